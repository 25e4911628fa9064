use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use tracelet::assets::ResourceManager;
use tracelet::pipeline::{DispatchConfig, Profiler};
use tracelet::postfx::PostChain;
use tracelet::render::{EngineError, RenderSettings, World};
use tracelet_service::{RenderParams, ServiceConfig};

#[derive(Parser)]
#[command(name = "tracelet", version, about = "Deterministic CPU ray tracer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a scene to an 8-bit RGB PNG.
    Render {
        scene: PathBuf,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
        #[command(flatten)]
        opts: RenderOpts,
    },
    /// Parse a scene and run pipeline validation; exit 1 on any diagnostic.
    Validate { scene: PathBuf },
    /// Render repeatedly and print profiler records as JSON lines.
    Bench {
        scene: PathBuf,
        #[arg(long, default_value_t = 5)]
        frames: u32,
        #[command(flatten)]
        opts: RenderOpts,
    },
    /// Run the render service.
    Serve {
        scene: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
    },
}

#[derive(Args, Clone)]
struct RenderOpts {
    #[arg(long, default_value_t = 128)]
    width: u32,
    #[arg(long, default_value_t = 128)]
    height: u32,
    #[arg(long, default_value_t = 4)]
    spp: u32,
    #[arg(long = "max-depth", default_value_t = 6)]
    max_depth: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "no-fxaa")]
    no_fxaa: bool,
    #[arg(long = "no-roughness-blur")]
    no_roughness_blur: bool,
}

impl RenderOpts {
    fn settings(&self) -> RenderSettings {
        let mut post = PostChain::default();
        if self.no_fxaa {
            post.fxaa = None;
        }
        if self.no_roughness_blur {
            post.roughness_blur = false;
        }
        RenderSettings {
            dispatch: DispatchConfig {
                width: self.width,
                height: self.height,
                samples_per_pixel: self.spp,
                max_depth: self.max_depth,
                seed: self.seed,
                ..DispatchConfig::default()
            },
            post,
            ..RenderSettings::default()
        }
    }
}

fn load(scene: &Path) -> Result<World, EngineError> {
    World::load(scene, &ResourceManager::new())
}

fn render(scene: &Path, output: &Path, opts: &RenderOpts) -> Result<(), String> {
    let mut world = load(scene).map_err(|e| e.to_string())?;
    let image = world.render(&opts.settings(), &Profiler::new()).map_err(|e| e.to_string())?;
    std::fs::write(output, image.encode_png()).map_err(|e| format!("cannot write {}: {e}", output.display()))
}

fn validate(scene: &Path) -> Result<bool, String> {
    let mut world = load(scene).map_err(|e| e.to_string())?;
    let diagnostics = world.validate(&DispatchConfig::default()).map_err(|e| e.to_string())?;
    for d in &diagnostics {
        println!("{d}");
    }
    Ok(diagnostics.is_empty())
}

fn bench(scene: &Path, frames: u32, opts: &RenderOpts) -> Result<(), String> {
    let mut world = load(scene).map_err(|e| e.to_string())?;
    let settings = opts.settings();
    let mut out = std::io::stdout().lock();
    for frame in 1..=frames {
        let profiler = Profiler::new();
        world.render(&settings, &profiler).map_err(|e| e.to_string())?;
        for r in profiler.report() {
            let line = json!({"frame": frame, "pass": r.pass_name, "wall_time": r.wall_time, "invocations": r.invocation_count});
            if writeln!(out, "{line}").is_err() {
                return Ok(());
            }
        }
    }
    Ok(())
}

fn serve(scene: &Path, bind: &str) -> Result<(), String> {
    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    let config = ServiceConfig { defaults: RenderParams::default(), ..ServiceConfig::default() };
    runtime.block_on(tracelet_service::serve(bind, scene, config)).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Render { scene, output, opts } => render(scene, output, opts).map(|_| true),
        Command::Validate { scene } => validate(scene),
        Command::Bench { scene, frames, opts } => bench(scene, *frames, opts).map(|_| true),
        Command::Serve { scene, bind } => serve(scene, bind).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
