//! Shader-stage execution model.
//!
//! A dispatch runs the ray-generation program once per pixel sample. Programs
//! spawn rays through [`TraceContext::trace_ray`], which walks the TLAS,
//! offers candidates to any-hit filters, then runs the closest-hit program of
//! the winning hit group or the selected miss program. Rays carry an opaque,
//! size-limited [`Payload`] and a recursion depth.
//!
//! Primary rays have depth 0 and each nested trace adds one. A trace issued
//! at depth `max_depth` skips traversal and returns the miss program's
//! result, so no program ever observes a depth above `max_depth`.

use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::accel::{HitCandidate, HitRecord, Instance, Tlas, TraversalStats};
use crate::geometry::Ray;

pub const DEFAULT_PAYLOAD_BUDGET: usize = 128;
pub const DEFAULT_MAX_DEPTH: u32 = 8;
pub const DEFAULT_TILE_SIZE: u32 = 16;
/// Largest payload budget the validator accepts.
pub const PAYLOAD_BUDGET_LIMIT: usize = 1024;
/// Largest recursion depth the validator accepts.
pub const MAX_DEPTH_LIMIT: u32 = 31;

/// Environment variable overriding the dispatch worker count.
pub const THREADS_ENV: &str = "ENGINE_THREADS";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("payload of {size} bytes exceeds the {budget}-byte budget")]
    PayloadOverflow { size: usize, budget: usize },
    #[error("payload decode failed: {0}")]
    PayloadDecode(String),
    #[error("validation failed: {}", format_diagnostics(.0))]
    Validation(Vec<Diagnostic>),
    #[error("invalid dispatch config: {0}")]
    InvalidConfig(String),
    #[error("program error: {0}")]
    Program(String),
}

fn format_diagnostics(d: &[Diagnostic]) -> String {
    d.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; ")
}

/// Opaque byte block passed between programs, with a recursion counter.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Payload {
    bytes: Vec<u8>,
    depth: u32,
}

impl Payload {
    pub fn new() -> Payload {
        Payload::default()
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Payload {
        Payload { bytes, depth: 0 }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    /// Depth of the ray this payload travels with.
    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn clear(&mut self) {
        self.bytes.clear();
    }

    pub fn push_u8(&mut self, v: u8) {
        self.bytes.push(v);
    }

    pub fn push_f64(&mut self, v: f64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    pub fn reader(&self) -> PayloadReader<'_> {
        PayloadReader { bytes: &self.bytes, pos: 0 }
    }
}

pub struct PayloadReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl PayloadReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], PipelineError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(PipelineError::PayloadDecode(format!(
                "need {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, PipelineError> {
        Ok(self.take(1)?[0])
    }

    pub fn f64(&mut self) -> Result<f64, PipelineError> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LaunchId {
    pub x: u32,
    pub y: u32,
    pub sample: u32,
}

pub trait RayGenProgram: Send + Sync {
    /// Returns the radiance estimate for one pixel sample.
    fn generate(&self, ctx: &mut TraceContext<'_>, launch: LaunchId) -> Result<[f64; 3], PipelineError>;
}

pub trait ClosestHitProgram: Send + Sync {
    fn closest_hit(
        &self,
        ctx: &mut TraceContext<'_>,
        ray: &Ray,
        hit: &HitRecord,
        payload: Payload,
    ) -> Result<Payload, PipelineError>;

    /// Reports a missing binding for an instance using this program, if any.
    fn check_binding(&self, _instance: &Instance) -> Option<String> {
        None
    }
}

pub trait AnyHitProgram: Send + Sync {
    /// Returns false to ignore the candidate and continue traversal.
    fn any_hit(&self, ray: &Ray, candidate: &HitCandidate, payload: &Payload) -> bool;
}

pub trait MissProgram: Send + Sync {
    fn miss(&self, ctx: &mut TraceContext<'_>, ray: &Ray, payload: Payload) -> Result<Payload, PipelineError>;
}

#[derive(Clone)]
pub struct HitGroup {
    pub closest_hit: Arc<dyn ClosestHitProgram>,
    pub any_hit: Option<Arc<dyn AnyHitProgram>>,
}

#[derive(Clone)]
pub struct ProgramTable {
    pub raygen: Arc<dyn RayGenProgram>,
    pub miss: Vec<Arc<dyn MissProgram>>,
    pub hit_groups: Vec<HitGroup>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispatchConfig {
    pub width: u32,
    pub height: u32,
    pub samples_per_pixel: u32,
    pub max_depth: u32,
    pub payload_budget: usize,
    pub seed: u64,
    pub tile_size: u32,
    /// Worker count; `None` consults `ENGINE_THREADS`, then the machine.
    pub threads: Option<usize>,
    /// Run [`validate`] before dispatch. Always on in debug builds.
    pub validate: bool,
}

impl Default for DispatchConfig {
    fn default() -> Self {
        DispatchConfig {
            width: 64,
            height: 64,
            samples_per_pixel: 1,
            max_depth: DEFAULT_MAX_DEPTH,
            payload_budget: DEFAULT_PAYLOAD_BUDGET,
            seed: 0,
            tile_size: DEFAULT_TILE_SIZE,
            threads: None,
            validate: false,
        }
    }
}

impl DispatchConfig {
    pub fn sized(width: u32, height: u32) -> DispatchConfig {
        DispatchConfig { width, height, ..DispatchConfig::default() }
    }

    fn check(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(m.to_string()));
        if self.width == 0 || self.height == 0 {
            return bad("width and height must be positive");
        }
        if self.samples_per_pixel == 0 {
            return bad("samples_per_pixel must be at least 1");
        }
        if self.max_depth == 0 {
            return bad("max_depth must be at least 1");
        }
        if self.payload_budget == 0 {
            return bad("payload_budget must be positive");
        }
        if self.tile_size == 0 {
            return bad("tile_size must be positive");
        }
        if self.threads == Some(0) {
            return bad("threads must be positive");
        }
        Ok(())
    }

    pub fn resolved_threads(&self) -> usize {
        self.threads
            .or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok()).filter(|&n| n > 0))
            .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
    }
}

/// HDR color plus the auxiliary planes consumed by post-processing.
#[derive(Debug, Clone, PartialEq)]
pub struct Framebuffer {
    pub width: u32,
    pub height: u32,
    pub color: Vec<[f32; 3]>,
    pub roughness: Vec<f32>,
    /// Primary-hit distance of sample 0; infinity where it missed.
    pub depth: Vec<f32>,
}

impl Framebuffer {
    pub fn new(width: u32, height: u32) -> Framebuffer {
        let n = (width as usize) * (height as usize);
        Framebuffer {
            width,
            height,
            color: vec![[0.0; 3]; n],
            roughness: vec![0.0; n],
            depth: vec![f32::INFINITY; n],
        }
    }

    #[inline]
    pub fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f32; 3] {
        self.color[self.index(x, y)]
    }

    /// Little-endian dump of all planes, for byte-level comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.color.len() * 20 + 8);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        for c in &self.color {
            for v in c {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in self.roughness.iter().chain(&self.depth) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticCode {
    UnresolvedHitGroup,
    NoMissProgram,
    SingularTransform,
    PayloadBudgetTooLarge,
    MaxDepthTooLarge,
    MissingBinding,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    pub code: DiagnosticCode,
    /// Debug name of the offending object.
    pub object: String,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}] {}", self.object, self.message)
    }
}

/// Structural checks run before a dispatch. An empty list means the
/// dispatch may proceed.
pub fn validate(tlas: &Tlas, programs: &ProgramTable, config: &DispatchConfig) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if programs.miss.is_empty() {
        out.push(Diagnostic {
            code: DiagnosticCode::NoMissProgram,
            object: "program table".into(),
            message: "no miss program bound".into(),
        });
    }
    if config.payload_budget > PAYLOAD_BUDGET_LIMIT {
        out.push(Diagnostic {
            code: DiagnosticCode::PayloadBudgetTooLarge,
            object: "dispatch config".into(),
            message: format!("payload budget {} exceeds {}", config.payload_budget, PAYLOAD_BUDGET_LIMIT),
        });
    }
    if config.max_depth > MAX_DEPTH_LIMIT {
        out.push(Diagnostic {
            code: DiagnosticCode::MaxDepthTooLarge,
            object: "dispatch config".into(),
            message: format!("max depth {} exceeds {}", config.max_depth, MAX_DEPTH_LIMIT),
        });
    }
    for inst in tlas.instances() {
        match programs.hit_groups.get(inst.hit_group_id as usize) {
            None => out.push(Diagnostic {
                code: DiagnosticCode::UnresolvedHitGroup,
                object: inst.debug_name.clone(),
                message: format!(
                    "hit group {} not bound ({} hit groups)",
                    inst.hit_group_id,
                    programs.hit_groups.len()
                ),
            }),
            Some(group) => {
                if let Some(msg) = group.closest_hit.check_binding(inst) {
                    out.push(Diagnostic {
                        code: DiagnosticCode::MissingBinding,
                        object: inst.debug_name.clone(),
                        message: msg,
                    });
                }
            }
        }
        if !inst.transform.is_invertible() {
            out.push(Diagnostic {
                code: DiagnosticCode::SingularTransform,
                object: inst.debug_name.clone(),
                message: format!("transform determinant {:e} is singular", inst.transform.determinant()),
            });
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct PassRecord {
    pub pass_name: String,
    /// Seconds.
    pub wall_time: f64,
    pub invocation_count: u64,
}

/// Collects named pass timings in execution order.
#[derive(Debug, Default)]
pub struct Profiler {
    records: Mutex<Vec<PassRecord>>,
}

impl Profiler {
    pub fn new() -> Profiler {
        Profiler::default()
    }

    pub fn record(&self, pass_name: &str, elapsed: Duration, invocation_count: u64) {
        self.records.lock().expect("profiler lock").push(PassRecord {
            pass_name: pass_name.to_string(),
            wall_time: elapsed.as_secs_f64(),
            invocation_count,
        });
    }

    /// Runs `f` and records its duration under `pass_name`.
    pub fn time<T>(&self, pass_name: &str, invocation_count: u64, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.record(pass_name, start.elapsed(), invocation_count);
        out
    }

    pub fn report(&self) -> Vec<PassRecord> {
        self.records.lock().expect("profiler lock").clone()
    }

    pub fn clear(&self) {
        self.records.lock().expect("profiler lock").clear();
    }

    pub fn to_json_lines(&self) -> String {
        self.report()
            .iter()
            .map(|r| serde_json::to_string(r).expect("pass record serializes") + "\n")
            .collect()
    }
}

/// Counters gathered over a dispatch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DispatchStats {
    pub raygen_invocations: u64,
    pub trace_calls: u64,
    pub closest_hit_invocations: u64,
    pub any_hit_invocations: u64,
    pub miss_invocations: u64,
    /// Deepest payload depth any program observed.
    pub max_observed_depth: u32,
    pub traversal: TraversalStats,
}

#[derive(Default)]
struct SharedCounters {
    raygen: AtomicU64,
    trace: AtomicU64,
    closest: AtomicU64,
    any: AtomicU64,
    miss: AtomicU64,
    max_depth: AtomicU32,
    node_visits: AtomicU64,
    triangle_tests: AtomicU64,
}

impl SharedCounters {
    fn snapshot(&self) -> DispatchStats {
        DispatchStats {
            raygen_invocations: self.raygen.load(Ordering::Relaxed),
            trace_calls: self.trace.load(Ordering::Relaxed),
            closest_hit_invocations: self.closest.load(Ordering::Relaxed),
            any_hit_invocations: self.any.load(Ordering::Relaxed),
            miss_invocations: self.miss.load(Ordering::Relaxed),
            max_observed_depth: self.max_depth.load(Ordering::Relaxed),
            traversal: TraversalStats {
                node_visits: self.node_visits.load(Ordering::Relaxed),
                triangle_tests: self.triangle_tests.load(Ordering::Relaxed),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TraceFlags {
    /// Accept the first hit the any-hit filters allow instead of the nearest.
    pub terminate_on_first_hit: bool,
    /// Return the payload untouched on a hit instead of running closest-hit.
    pub skip_closest_hit: bool,
}

impl TraceFlags {
    /// Occlusion-query flags.
    pub const OCCLUSION: TraceFlags = TraceFlags { terminate_on_first_hit: true, skip_closest_hit: true };
}

/// Per-sample execution state handed to programs.
pub struct TraceContext<'a> {
    tlas: &'a Tlas,
    programs: &'a ProgramTable,
    config: &'a DispatchConfig,
    counters: &'a SharedCounters,
    launch: LaunchId,
    rng: ChaCha8Rng,
    /// Depth of the ray whose program is running; `None` inside raygen.
    current_depth: Option<u32>,
    aux_roughness: Option<f32>,
    aux_depth: Option<f32>,
    traversal: TraversalStats,
}

impl<'a> TraceContext<'a> {
    pub fn launch(&self) -> LaunchId {
        self.launch
    }

    pub fn config(&self) -> &DispatchConfig {
        self.config
    }

    pub fn tlas(&self) -> &Tlas {
        self.tlas
    }

    /// Counter-based stream keyed by (seed, x, y, sample).
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Records the auxiliary values for this sample. The first write wins,
    /// so the primary hit's closest-hit program owns the pixel.
    pub fn write_aux(&mut self, roughness: f32, hit_distance: f32) {
        if self.aux_roughness.is_none() {
            self.aux_roughness = Some(roughness);
            self.aux_depth = Some(hit_distance);
        }
    }

    pub fn trace_ray(&mut self, ray: &Ray, payload: Payload, miss_index: usize) -> Result<Payload, PipelineError> {
        self.trace_ray_with(ray, payload, miss_index, TraceFlags::default())
    }

    pub fn trace_ray_with(
        &mut self,
        ray: &Ray,
        mut payload: Payload,
        miss_index: usize,
        flags: TraceFlags,
    ) -> Result<Payload, PipelineError> {
        self.check_budget(&payload)?;
        let miss = self.programs.miss.get(miss_index).cloned().ok_or_else(|| {
            PipelineError::Validation(vec![Diagnostic {
                code: DiagnosticCode::NoMissProgram,
                object: "program table".into(),
                message: format!("miss index {miss_index} out of range ({} bound)", self.programs.miss.len()),
            }])
        })?;
        self.counters.trace.fetch_add(1, Ordering::Relaxed);
        let depth = self.current_depth.map_or(0, |d| d + 1);
        assert!(depth <= self.config.max_depth, "payload depth {depth} beyond max_depth");
        payload.depth = depth;
        self.counters.max_depth.fetch_max(depth, Ordering::Relaxed);

        let hit = if depth >= self.config.max_depth {
            None
        } else {
            self.traverse(ray, &payload, flags)
        };

        let parent_depth = self.current_depth.replace(depth);
        let result = match hit {
            Some(hit) if flags.skip_closest_hit => {
                let _ = hit;
                Ok(payload)
            }
            Some(hit) => {
                let group = self.programs.hit_groups.get(hit.hit_group_id as usize).cloned().ok_or_else(|| {
                    let name = self.tlas.instance(hit.instance_index).map(|i| i.debug_name.clone()).unwrap_or_default();
                    PipelineError::Validation(vec![Diagnostic {
                        code: DiagnosticCode::UnresolvedHitGroup,
                        object: name,
                        message: format!("hit group {} not bound", hit.hit_group_id),
                    }])
                })?;
                self.counters.closest.fetch_add(1, Ordering::Relaxed);
                group.closest_hit.closest_hit(self, ray, &hit, payload)
            }
            None => {
                self.counters.miss.fetch_add(1, Ordering::Relaxed);
                miss.miss(self, ray, payload)
            }
        };
        self.current_depth = parent_depth;
        let mut out = result?;
        self.check_budget(&out)?;
        out.depth = depth;
        Ok(out)
    }

    fn check_budget(&self, payload: &Payload) -> Result<(), PipelineError> {
        if payload.len() > self.config.payload_budget {
            return Err(PipelineError::PayloadOverflow { size: payload.len(), budget: self.config.payload_budget });
        }
        Ok(())
    }

    fn traverse(&mut self, ray: &Ray, payload: &Payload, flags: TraceFlags) -> Option<HitRecord> {
        let groups = &self.programs.hit_groups;
        let counters = self.counters;
        let filter = |cand: &HitCandidate| match groups.get(cand.hit_group_id as usize).and_then(|g| g.any_hit.as_ref()) {
            Some(any_hit) => {
                counters.any.fetch_add(1, Ordering::Relaxed);
                any_hit.any_hit(ray, cand, payload)
            }
            None => true,
        };
        if flags.terminate_on_first_hit {
            self.tlas.trace_first_filtered(ray, &mut self.traversal, filter)
        } else {
            self.tlas.trace_nearest_filtered(ray, &mut self.traversal, filter)
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the sample stream at (seed, x, y, sample).
pub fn sample_seed(seed: u64, launch: LaunchId) -> u64 {
    let mut h = splitmix64(seed);
    for v in [launch.x as u64, launch.y as u64, launch.sample as u64] {
        h = splitmix64(h ^ v);
    }
    h
}

struct TileResult {
    x0: u32,
    y0: u32,
    w: u32,
    h: u32,
    color: Vec<[f32; 3]>,
    roughness: Vec<f32>,
    depth: Vec<f32>,
}

pub fn dispatch(
    tlas: &Tlas,
    programs: &ProgramTable,
    config: &DispatchConfig,
    profiler: &Profiler,
) -> Result<Framebuffer, PipelineError> {
    dispatch_with_stats(tlas, programs, config, profiler).map(|(fb, _)| fb)
}

/// Runs raygen over every pixel sample. Output depends only on the inputs
/// and the seed; tile size and worker count do not affect it.
pub fn dispatch_with_stats(
    tlas: &Tlas,
    programs: &ProgramTable,
    config: &DispatchConfig,
    profiler: &Profiler,
) -> Result<(Framebuffer, DispatchStats), PipelineError> {
    config.check()?;
    if config.validate || cfg!(debug_assertions) {
        let diags = validate(tlas, programs, config);
        if !diags.is_empty() {
            return Err(PipelineError::Validation(diags));
        }
    }
    let counters = SharedCounters::default();
    let start = Instant::now();

    let ts = config.tile_size;
    let mut tiles = Vec::new();
    for y0 in (0..config.height).step_by(ts as usize) {
        for x0 in (0..config.width).step_by(ts as usize) {
            tiles.push((x0, y0, ts.min(config.width - x0), ts.min(config.height - y0)));
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.resolved_threads())
        .build()
        .map_err(|e| PipelineError::InvalidConfig(format!("thread pool: {e}")))?;
    let results: Vec<Result<TileResult, PipelineError>> = pool.install(|| {
        tiles
            .par_iter()
            .map(|&(x0, y0, w, h)| render_tile(tlas, programs, config, &counters, x0, y0, w, h))
            .collect()
    });

    let mut fb = Framebuffer::new(config.width, config.height);
    for tile in results {
        let tile = tile?;
        for ty in 0..tile.h {
            for tx in 0..tile.w {
                let src = (ty * tile.w + tx) as usize;
                let dst = fb.index(tile.x0 + tx, tile.y0 + ty);
                fb.color[dst] = tile.color[src];
                fb.roughness[dst] = tile.roughness[src];
                fb.depth[dst] = tile.depth[src];
            }
        }
    }
    let stats = counters.snapshot();
    profiler.record("trace", start.elapsed(), stats.raygen_invocations);
    Ok((fb, stats))
}

#[allow(clippy::too_many_arguments)]
fn render_tile(
    tlas: &Tlas,
    programs: &ProgramTable,
    config: &DispatchConfig,
    counters: &SharedCounters,
    x0: u32,
    y0: u32,
    w: u32,
    h: u32,
) -> Result<TileResult, PipelineError> {
    let n = (w * h) as usize;
    let mut out = TileResult {
        x0,
        y0,
        w,
        h,
        color: Vec::with_capacity(n),
        roughness: Vec::with_capacity(n),
        depth: Vec::with_capacity(n),
    };
    let mut traversal = TraversalStats::default();
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            let mut sum = [0.0f64; 3];
            let mut rough = 0.0f64;
            let mut depth = f32::INFINITY;
            for sample in 0..config.samples_per_pixel {
                let launch = LaunchId { x, y, sample };
                let mut ctx = TraceContext {
                    tlas,
                    programs,
                    config,
                    counters,
                    launch,
                    rng: ChaCha8Rng::seed_from_u64(sample_seed(config.seed, launch)),
                    current_depth: None,
                    aux_roughness: None,
                    aux_depth: None,
                    traversal: TraversalStats::default(),
                };
                counters.raygen.fetch_add(1, Ordering::Relaxed);
                let c = programs.raygen.generate(&mut ctx, launch)?;
                if c.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(PipelineError::Program(format!(
                        "raygen produced invalid color {c:?} at ({x}, {y}) sample {sample}"
                    )));
                }
                for k in 0..3 {
                    sum[k] += c[k];
                }
                rough += ctx.aux_roughness.unwrap_or(0.0) as f64;
                if sample == 0 {
                    depth = ctx.aux_depth.unwrap_or(f32::INFINITY);
                }
                traversal.node_visits += ctx.traversal.node_visits;
                traversal.triangle_tests += ctx.traversal.triangle_tests;
            }
            let spp = config.samples_per_pixel as f64;
            out.color.push(sum.map(|v| (v / spp) as f32));
            out.roughness.push((rough / spp) as f32);
            out.depth.push(depth);
        }
    }
    counters.node_visits.fetch_add(traversal.node_visits, Ordering::Relaxed);
    counters.triangle_tests.fetch_add(traversal.triangle_tests, Ordering::Relaxed);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accel::{Blas, BlasId, BlasStore, BuildConfig, Mesh, MASK_WORLD};
    use crate::geometry::{Transform, Vec3};
    use rand::Rng;

    struct ConstMiss([f64; 3]);
    impl MissProgram for ConstMiss {
        fn miss(&self, _: &mut TraceContext<'_>, _: &Ray, mut p: Payload) -> Result<Payload, PipelineError> {
            p.clear();
            for v in self.0 {
                p.push_f64(v);
            }
            Ok(p)
        }
    }

    /// Shoots one ray straight down -z from each pixel center, with a
    /// random jitter folded into the color so the RNG stream is visible.
    struct OrthoRayGen {
        jitter: bool,
    }
    impl RayGenProgram for OrthoRayGen {
        fn generate(&self, ctx: &mut TraceContext<'_>, l: LaunchId) -> Result<[f64; 3], PipelineError> {
            let cfg = ctx.config().clone();
            let x = (l.x as f64 + 0.5) / cfg.width as f64 - 0.5;
            let y = (l.y as f64 + 0.5) / cfg.height as f64 - 0.5;
            let ray = Ray::new(Vec3::new(x * 2.0, y * 2.0, 10.0), -Vec3::Z);
            let p = ctx.trace_ray(&ray, Payload::new(), 0)?;
            let mut r = p.reader();
            let mut c = [r.f64()?, r.f64()?, r.f64()?];
            if self.jitter {
                c[0] += ctx.rng().random::<f64>();
            }
            Ok(c)
        }
    }

    /// Mirror-like program: records depth, re-traces back toward +z.
    struct Bouncer {
        deepest: AtomicU32,
    }
    impl ClosestHitProgram for Bouncer {
        fn closest_hit(&self, ctx: &mut TraceContext<'_>, ray: &Ray, hit: &HitRecord, p: Payload) -> Result<Payload, PipelineError> {
            self.deepest.fetch_max(p.depth(), Ordering::Relaxed);
            assert!(p.depth() <= ctx.config().max_depth);
            let n = hit.geometric_normal;
            let n = if n.dot(ray.direction) > 0.0 { -n } else { n };
            let d = crate::geometry::reflect(ray.direction, n);
            let next = Ray::new(hit.position, d).with_interval(1e-4, f64::INFINITY);
            ctx.trace_ray(&next, p, 0)
        }
    }

    struct DepthMiss {
        deepest: Arc<AtomicU32>,
    }
    impl MissProgram for DepthMiss {
        fn miss(&self, ctx: &mut TraceContext<'_>, _: &Ray, p: Payload) -> Result<Payload, PipelineError> {
            self.deepest.fetch_max(p.depth(), Ordering::Relaxed);
            assert!(p.depth() <= ctx.config().max_depth);
            ConstMiss([0.0; 3]).miss(ctx, &Ray::new(Vec3::ZERO, Vec3::Z), p)
        }
    }

    struct Overflowing;
    impl RayGenProgram for Overflowing {
        fn generate(&self, ctx: &mut TraceContext<'_>, _: LaunchId) -> Result<[f64; 3], PipelineError> {
            let budget = ctx.config().payload_budget;
            ctx.trace_ray(&Ray::new(Vec3::ZERO, Vec3::Z), Payload::from_bytes(vec![0; budget + 1]), 0)?;
            Ok([0.0; 3])
        }
    }

    fn quad_store() -> (BlasStore, BlasId) {
        let mut store = BlasStore::new();
        let mesh = Mesh::new(
            vec![[-1.0, -1.0, 0.0], [1.0, -1.0, 0.0], [1.0, 1.0, 0.0], [-1.0, 1.0, 0.0]],
            vec![[0, 1, 2], [0, 2, 3]],
        );
        let id = store.add(Blas::build(Arc::new(mesh), &BuildConfig::default()).unwrap());
        (store, id)
    }

    fn table(raygen: Arc<dyn RayGenProgram>, miss: Vec<Arc<dyn MissProgram>>, groups: Vec<HitGroup>) -> ProgramTable {
        ProgramTable { raygen, miss, hit_groups: groups }
    }

    #[test]
    fn raygen_count_and_constant_miss() {
        let tlas = Tlas::default();
        let programs = table(Arc::new(OrthoRayGen { jitter: false }), vec![Arc::new(ConstMiss([0.1, 0.2, 0.3]))], vec![]);
        let config = DispatchConfig { samples_per_pixel: 3, ..DispatchConfig::sized(2, 2) };
        let profiler = Profiler::new();
        let (fb, stats) = dispatch_with_stats(&tlas, &programs, &config, &profiler).unwrap();
        assert_eq!(stats.raygen_invocations, 12);
        for c in &fb.color {
            assert_eq!(*c, [0.1f32, 0.2, 0.3]);
        }
        let report = profiler.report();
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].pass_name, "trace");
        assert_eq!(report[0].invocation_count, 12);
    }

    #[test]
    fn deterministic_across_tiles_and_threads() {
        let tlas = Tlas::default();
        let programs = table(Arc::new(OrthoRayGen { jitter: true }), vec![Arc::new(ConstMiss([0.0; 3]))], vec![]);
        let base = DispatchConfig { seed: 42, samples_per_pixel: 2, ..DispatchConfig::sized(37, 23) };
        let profiler = Profiler::new();
        let reference = dispatch(&tlas, &programs, &base, &profiler).unwrap().to_bytes();
        for (tile, threads) in [(1, 1), (7, 2), (16, 3), (64, 8)] {
            let cfg = DispatchConfig { tile_size: tile, threads: Some(threads), ..base.clone() };
            assert_eq!(dispatch(&tlas, &programs, &cfg, &profiler).unwrap().to_bytes(), reference);
        }
        let other = DispatchConfig { seed: 43, ..base };
        assert_ne!(dispatch(&tlas, &programs, &other, &profiler).unwrap().to_bytes(), reference);
    }

    #[test]
    fn facing_mirrors_hit_depth_cutoff() {
        let (store, q) = quad_store();
        let inst = |id, z: f64| Instance {
            blas_id: q,
            transform: Transform::translate(Vec3::new(0.0, 0.0, z)),
            instance_id: id,
            hit_group_id: 0,
            mask: MASK_WORLD,
            debug_name: format!("mirror{id}"),
        };
        let tlas = Tlas::build(vec![inst(0, 0.0), inst(1, 20.0)], &store).unwrap();
        let bouncer = Arc::new(Bouncer { deepest: AtomicU32::new(0) });
        let miss_depth = Arc::new(AtomicU32::new(0));
        let programs = table(
            Arc::new(OrthoRayGen { jitter: false }),
            vec![Arc::new(DepthMiss { deepest: miss_depth.clone() })],
            vec![HitGroup { closest_hit: bouncer.clone(), any_hit: None }],
        );
        let config = DispatchConfig { max_depth: 8, ..DispatchConfig::sized(2, 2) };
        let (_, stats) = dispatch_with_stats(&tlas, &programs, &config, &Profiler::new()).unwrap();
        assert_eq!(stats.max_observed_depth, 8);
        assert_eq!(miss_depth.load(Ordering::Relaxed), 8);
        assert_eq!(bouncer.deepest.load(Ordering::Relaxed), 7);
    }

    #[test]
    fn payload_overflow_is_reported() {
        let programs = table(Arc::new(Overflowing), vec![Arc::new(ConstMiss([0.0; 3]))], vec![]);
        let config = DispatchConfig::sized(1, 1);
        let err = dispatch(&Tlas::default(), &programs, &config, &Profiler::new()).unwrap_err();
        assert_eq!(err, PipelineError::PayloadOverflow { size: 129, budget: 128 });
    }

    #[test]
    fn miss_index_out_of_range() {
        struct BadIndex;
        impl RayGenProgram for BadIndex {
            fn generate(&self, ctx: &mut TraceContext<'_>, _: LaunchId) -> Result<[f64; 3], PipelineError> {
                ctx.trace_ray(&Ray::new(Vec3::ZERO, Vec3::Z), Payload::new(), 3)?;
                Ok([0.0; 3])
            }
        }
        let programs = table(Arc::new(BadIndex), vec![Arc::new(ConstMiss([0.0; 3]))], vec![]);
        let err = dispatch(&Tlas::default(), &programs, &DispatchConfig::sized(1, 1), &Profiler::new()).unwrap_err();
        assert!(matches!(err, PipelineError::Validation(_)));
    }

    #[test]
    fn validation_diagnostics() {
        let (store, q) = quad_store();
        let mk = |id, group, t| Instance {
            blas_id: q,
            transform: t,
            instance_id: id,
            hit_group_id: group,
            mask: MASK_WORLD,
            debug_name: format!("obj{id}"),
        };
        let bouncer = Arc::new(Bouncer { deepest: AtomicU32::new(0) });
        let groups = vec![
            HitGroup { closest_hit: bouncer.clone(), any_hit: None },
            HitGroup { closest_hit: bouncer, any_hit: None },
        ];
        let programs = table(Arc::new(OrthoRayGen { jitter: false }), vec![Arc::new(ConstMiss([0.0; 3]))], groups.clone());
        let config = DispatchConfig::sized(4, 4);

        let good = Tlas::build(vec![mk(0, 1, Transform::IDENTITY)], &store).unwrap();
        assert!(validate(&good, &programs, &config).is_empty());

        let bad_group = Tlas::build(vec![mk(0, 0, Transform::IDENTITY), mk(5, 7, Transform::IDENTITY)], &store).unwrap();
        let diags = validate(&bad_group, &programs, &config);
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].object, "obj5");
        assert_eq!(diags[0].code, DiagnosticCode::UnresolvedHitGroup);

        let singular = Tlas::build(vec![mk(0, 0, Transform::scale(Vec3::new(1.0, 0.0, 1.0)))], &store).unwrap();
        let diags = validate(&singular, &programs, &config);
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].code, DiagnosticCode::SingularTransform);

        let no_miss = table(Arc::new(OrthoRayGen { jitter: false }), vec![], groups);
        let limits = DispatchConfig { payload_budget: 2048, max_depth: 40, ..config.clone() };
        let codes: Vec<_> = validate(&good, &no_miss, &limits).into_iter().map(|d| d.code).collect();
        assert_eq!(
            codes,
            vec![DiagnosticCode::NoMissProgram, DiagnosticCode::PayloadBudgetTooLarge, DiagnosticCode::MaxDepthTooLarge]
        );

        let forced = DispatchConfig { validate: true, ..config };
        let err = dispatch(&bad_group, &programs, &forced, &Profiler::new()).unwrap_err();
        match err {
            PipelineError::Validation(d) => assert!(d[0].to_string().contains("obj5")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let programs = table(Arc::new(OrthoRayGen { jitter: false }), vec![Arc::new(ConstMiss([0.0; 3]))], vec![]);
        for cfg in [
            DispatchConfig::sized(0, 4),
            DispatchConfig { samples_per_pixel: 0, ..DispatchConfig::sized(2, 2) },
            DispatchConfig { max_depth: 0, ..DispatchConfig::sized(2, 2) },
            DispatchConfig { tile_size: 0, ..DispatchConfig::sized(2, 2) },
        ] {
            assert!(matches!(
                dispatch(&Tlas::default(), &programs, &cfg, &Profiler::new()),
                Err(PipelineError::InvalidConfig(_))
            ));
        }
    }

    #[test]
    fn payload_codec() {
        let mut p = Payload::new();
        p.push_u8(7);
        p.push_f64(-1.25);
        let mut r = p.reader();
        assert_eq!(r.u8().unwrap(), 7);
        assert_eq!(r.f64().unwrap(), -1.25);
        assert!(r.u8().is_err());
    }

    #[test]
    fn profiler_json_lines() {
        let p = Profiler::new();
        p.record("trace", Duration::from_millis(3), 16);
        p.time("fxaa", 4, || ());
        let lines: Vec<serde_json::Value> = p.to_json_lines().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0]["pass_name"], "trace");
        assert_eq!(lines[1]["pass_name"], "fxaa");
        assert!(lines.iter().all(|l| l["wall_time"].as_f64().unwrap() >= 0.0));
    }

    #[test]
    fn seeds_are_distinct() {
        let a = sample_seed(1, LaunchId { x: 0, y: 1, sample: 0 });
        let b = sample_seed(1, LaunchId { x: 1, y: 0, sample: 0 });
        let c = sample_seed(2, LaunchId { x: 0, y: 1, sample: 0 });
        assert!(a != b && a != c && b != c);
    }
}
