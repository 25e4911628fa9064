//! The single render session: shared state, the progressive render loop and
//! the hot-reload poller.

use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{broadcast, watch, Notify};

use tracelet::accel::BuildConfig;
use tracelet::assets::ResourceManager;
use tracelet::pipeline::{dispatch_with_stats, DispatchConfig, Profiler};
use tracelet::postfx::{LdrImage, PostChain};
use tracelet::render::{pass_seed, Accumulator, Prepared, World};

/// Progressive render parameters. Each pass dispatches `spp_per_pass`
/// samples with seed `seed + pass`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderParams {
    pub width: u32,
    pub height: u32,
    pub spp_per_pass: u32,
    pub max_depth: u32,
    pub seed: u64,
    pub passes: u32,
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams { width: 128, height: 128, spp_per_pass: 1, max_depth: 6, seed: 7, passes: 16 }
    }
}

impl RenderParams {
    /// Dispatch configuration for pass `pass` (1-based).
    pub fn dispatch_config(&self, pass: u32) -> DispatchConfig {
        DispatchConfig {
            width: self.width,
            height: self.height,
            samples_per_pixel: self.spp_per_pass,
            max_depth: self.max_depth,
            seed: pass_seed(self.seed, pass),
            ..DispatchConfig::default()
        }
    }
}

/// Sparse override of [`RenderParams`], as accepted by `POST /render`.
#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderRequest {
    pub width: Option<u32>,
    pub height: Option<u32>,
    pub spp_per_pass: Option<u32>,
    pub max_depth: Option<u32>,
    pub seed: Option<u64>,
    pub passes: Option<u32>,
}

impl RenderRequest {
    pub fn apply(&self, base: RenderParams) -> Result<RenderParams, String> {
        let p = RenderParams {
            width: self.width.unwrap_or(base.width),
            height: self.height.unwrap_or(base.height),
            spp_per_pass: self.spp_per_pass.unwrap_or(base.spp_per_pass),
            max_depth: self.max_depth.unwrap_or(base.max_depth),
            seed: self.seed.unwrap_or(base.seed),
            passes: self.passes.unwrap_or(base.passes),
        };
        for (field, v, max) in [("width", p.width, 4096), ("height", p.height, 4096), ("spp_per_pass", p.spp_per_pass, 4096)] {
            if v == 0 || v > max {
                return Err(format!("{field} must be in 1..={max}, got {v}"));
            }
        }
        if p.passes == 0 {
            return Err("passes must be at least 1".into());
        }
        Ok(p)
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub defaults: RenderParams,
    pub post: PostChain,
    /// How often to poll asset files for changes; `None` disables it.
    pub reload_interval: Option<Duration>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig { defaults: RenderParams::default(), post: PostChain::default(), reload_interval: Some(Duration::from_millis(500)) }
    }
}

struct Control {
    params: RenderParams,
    running: bool,
    /// Set by mutations; consumed by the render loop at the next pass boundary.
    reset: Option<String>,
}

pub(crate) struct Shared {
    world: Mutex<World>,
    mgr: ResourceManager,
    control: Mutex<Control>,
    wake: Notify,
    events: broadcast::Sender<Arc<str>>,
    pub(crate) profiler: Profiler,
    pub(crate) shutdown: watch::Sender<bool>,
    post: PostChain,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl Shared {
    pub(crate) fn new(world: World, mgr: ResourceManager, config: &ServiceConfig) -> Arc<Shared> {
        Arc::new(Shared {
            world: Mutex::new(world),
            mgr,
            control: Mutex::new(Control { params: config.defaults, running: false, reset: None }),
            wake: Notify::new(),
            events: broadcast::channel(256).0,
            profiler: Profiler::new(),
            shutdown: watch::channel(false).0,
            post: config.post,
        })
    }

    pub(crate) fn world(&self) -> MutexGuard<'_, World> {
        lock(&self.world)
    }

    /// Marks accumulated state stale; takes effect at the next pass boundary.
    pub(crate) fn mark_dirty(&self, reason: &str) {
        lock(&self.control).reset = Some(reason.to_string());
        self.wake.notify_one();
    }

    pub(crate) fn params(&self) -> RenderParams {
        lock(&self.control).params
    }

    pub(crate) fn start_render(&self, params: RenderParams) {
        {
            let mut ctl = lock(&self.control);
            ctl.params = params;
            ctl.running = true;
            ctl.reset = Some("render".into());
        }
        self.wake.notify_one();
    }

    pub(crate) fn subscribe(&self) -> broadcast::Receiver<Arc<str>> {
        let rx = self.events.subscribe();
        self.wake.notify_one();
        rx
    }

    pub(crate) fn is_shutting_down(&self) -> bool {
        *self.shutdown.borrow()
    }
}

struct Progress {
    prepared: Arc<Prepared>,
    params: RenderParams,
    acc: Accumulator,
    pass: u32,
}

pub(crate) fn frame_event(pass: u32, image: &LdrImage) -> String {
    let mut rgba = Vec::with_capacity(image.pixels.len() * 4);
    for p in &image.pixels {
        rgba.extend_from_slice(&[p[0], p[1], p[2], 255]);
    }
    json!({
        "type": "frame",
        "pass": pass,
        "width": image.width,
        "height": image.height,
        "encoding": "rgba8",
        "data": BASE64.encode(rgba),
    })
    .to_string()
}

fn reset_event(reason: &str) -> String {
    json!({"type": "reset", "reason": reason}).to_string()
}

fn error_event(message: &str) -> String {
    json!({"type": "error", "message": message}).to_string()
}

enum Step {
    Idle,
    Pass { prepared: Arc<Prepared>, config: DispatchConfig, pass: u32 },
}

pub(crate) async fn render_loop(shared: Arc<Shared>) {
    let mut shutdown = shared.shutdown.subscribe();
    let mut progress: Option<Progress> = None;
    loop {
        if *shutdown.borrow() {
            break;
        }
        let step = boundary(&shared, &mut progress);
        let (prepared, config, pass) = match step {
            Step::Idle => {
                tokio::select! {
                    _ = shared.wake.notified() => {}
                    _ = shutdown.changed() => {}
                }
                continue;
            }
            Step::Pass { prepared, config, pass } => (prepared, config, pass),
        };
        let task_shared = shared.clone();
        let result = tokio::task::spawn_blocking(move || {
            dispatch_with_stats(&prepared.tlas, &prepared.programs, &config, &task_shared.profiler)
        })
        .await;
        let fb = match result {
            Ok(Ok((fb, _))) => fb,
            Ok(Err(e)) => {
                fail(&shared, &mut progress, &e.to_string());
                continue;
            }
            Err(e) => {
                fail(&shared, &mut progress, &e.to_string());
                continue;
            }
        };
        let Some(p) = progress.as_mut() else { continue };
        p.acc.add(&fb);
        p.pass = pass;
        match shared.post.apply(&p.acc.mean(), &shared.profiler) {
            Ok(image) => {
                let _ = shared.events.send(frame_event(pass, &image).into());
            }
            Err(e) => fail(&shared, &mut progress, &e.to_string()),
        }
    }
}

fn fail(shared: &Shared, progress: &mut Option<Progress>, message: &str) {
    *progress = None;
    lock(&shared.control).running = false;
    let _ = shared.events.send(error_event(message).into());
}

/// Drains pending mutations and decides the next pass.
fn boundary(shared: &Shared, progress: &mut Option<Progress>) -> Step {
    let mut ctl = lock(&shared.control);
    if let Some(reason) = ctl.reset.take() {
        *progress = None;
        let _ = shared.events.send(reset_event(&reason).into());
    }
    if !ctl.running || shared.events.receiver_count() == 0 {
        return Step::Idle;
    }
    if progress.is_none() {
        let params = ctl.params;
        match shared.world().prepare(&BuildConfig::default()) {
            Ok(prepared) => {
                *progress = Some(Progress {
                    prepared: Arc::new(prepared),
                    params,
                    acc: Accumulator::new(params.width, params.height),
                    pass: 0,
                })
            }
            Err(e) => {
                ctl.running = false;
                let _ = shared.events.send(error_event(&e.to_string()).into());
                return Step::Idle;
            }
        }
    }
    let p = progress.as_ref().expect("prepared above");
    if p.pass >= p.params.passes {
        ctl.running = false;
        return Step::Idle;
    }
    let pass = p.pass + 1;
    Step::Pass { prepared: p.prepared.clone(), config: p.params.dispatch_config(pass), pass }
}

pub(crate) async fn reload_loop(shared: Arc<Shared>, interval: Duration) {
    let mut shutdown = shared.shutdown.subscribe();
    let mut ticker = tokio::time::interval(interval);
    loop {
        tokio::select! {
            _ = ticker.tick() => {}
            _ = shutdown.changed() => break,
        }
        let changed = {
            let mut world = shared.world();
            let before = (world.materials().clone(), world.to_scene_file());
            let report = world.refresh(&shared.mgr);
            for e in &report.errors {
                eprintln!("reload: {e}");
            }
            !report.changed.is_empty() && (world.materials().clone(), world.to_scene_file()) != before
        };
        if changed {
            shared.mark_dirty("reload");
        }
    }
}
