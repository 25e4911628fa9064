//! Scene-level rendering: load a scene file with its materials and meshes,
//! flatten it into a TLAS with the built-in programs, render and post-process.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::accel::{AccelError, BuildConfig, Mesh, Tlas};
use crate::assets::material::{material_docs_to_json, resolve_materials, MaterialDoc, MaterialMap, MaterialProps};
use crate::assets::primitives;
use crate::assets::resources::{ResourceKey, ResourceKind, ResourceManager};
use crate::assets::scene_file::SceneFile;
use crate::assets::AssetError;
use crate::pipeline::{
    dispatch_with_stats, validate, Diagnostic, DispatchConfig, DispatchStats, Framebuffer, PipelineError, Profiler,
    ProgramTable,
};
use crate::postfx::{LdrImage, PostChain, PostError};
use crate::scene::{BlasCache, Collected, Scene, SceneError};
use crate::shading::{default_programs, ResolvedMaterial, ShadingScene};
use crate::uigen::ui_materials;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Asset(#[from] AssetError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Accel(#[from] AccelError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Post(#[from] PostError),
    #[error("unknown material {0:?}")]
    UnknownMaterial(String),
    #[error("io error on {}: {message}", path.display())]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderSettings {
    pub dispatch: DispatchConfig,
    pub post: PostChain,
    pub build: BuildConfig,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings { dispatch: DispatchConfig::default(), post: PostChain::default(), build: BuildConfig::default() }
    }
}

/// Everything a dispatch needs, derived from a [`World`].
pub struct Prepared {
    pub tlas: Tlas,
    pub programs: ProgramTable,
    pub collected: Collected,
}

#[derive(Debug, Default)]
pub struct RefreshReport {
    pub changed: Vec<ResourceKey>,
    pub errors: Vec<String>,
}

impl RefreshReport {
    pub fn is_empty(&self) -> bool {
        self.changed.is_empty() && self.errors.is_empty()
    }
}

/// A loaded scene with its raw and resolved materials.
pub struct World {
    pub scene: Scene,
    pub file: SceneFile,
    material_docs: Vec<MaterialDoc>,
    materials: MaterialMap,
    base_dir: PathBuf,
    scene_key: Option<ResourceKey>,
    materials_key: Option<ResourceKey>,
    mesh_keys: Vec<ResourceKey>,
    blas_cache: BlasCache,
}

fn load_mesh(reference: &str, base_dir: &Path, mgr: &ResourceManager, keys: &mut Vec<ResourceKey>) -> Result<Mesh, AssetError> {
    if let Some(name) = reference.strip_prefix(primitives::PREFIX) {
        return primitives::by_name(name);
    }
    let (file, geometry) = match reference.split_once('#') {
        Some((f, g)) => (f, Some(g)),
        None => (reference, None),
    };
    let key = ResourceKey::new(base_dir.join(file), ResourceKind::Collada);
    let res = mgr.load(&key)?;
    if !keys.contains(&key) {
        keys.push(key);
    }
    let asset = res.as_collada().expect("collada key yields collada resource");
    match geometry {
        Some(g) => asset.meshes.get(g).cloned().ok_or_else(|| AssetError::UnknownReference(reference.to_string())),
        None => Ok(asset.flatten()),
    }
}

impl World {
    /// Loads a scene file and everything it references through `mgr`.
    pub fn load(path: impl AsRef<Path>, mgr: &ResourceManager) -> Result<World, EngineError> {
        let scene_key = ResourceKey::new(path.as_ref(), ResourceKind::Scene);
        let file = mgr.load(&scene_key)?.as_scene().expect("scene key yields scene resource").clone();
        let base_dir = scene_key.path().parent().map(Path::to_path_buf).unwrap_or_default();
        let (docs, materials_key) = match &file.materials {
            Some(rel) => {
                let key = ResourceKey::new(base_dir.join(rel), ResourceKind::Materials);
                let docs = mgr.load(&key)?.as_materials().expect("materials key").to_vec();
                (docs, Some(key))
            }
            None => (Vec::new(), None),
        };
        let mut mesh_keys = Vec::new();
        let scene = Scene::from_nodes(&file.nodes, |r| load_mesh(r, &base_dir, mgr, &mut mesh_keys))?;
        let mut world = World::from_parts(file, scene, docs)?;
        world.base_dir = base_dir;
        world.scene_key = Some(scene_key);
        world.materials_key = materials_key;
        world.mesh_keys = mesh_keys;
        Ok(world)
    }

    /// A world without backing files.
    pub fn from_parts(file: SceneFile, scene: Scene, docs: Vec<MaterialDoc>) -> Result<World, EngineError> {
        let materials = resolve_materials(&docs)?;
        Ok(World {
            scene,
            file,
            material_docs: docs,
            materials,
            base_dir: PathBuf::new(),
            scene_key: None,
            materials_key: None,
            mesh_keys: Vec::new(),
            blas_cache: BlasCache::new(),
        })
    }

    pub fn material_docs(&self) -> &[MaterialDoc] {
        &self.material_docs
    }

    /// Resolved materials defined by the documents.
    pub fn materials(&self) -> &MaterialMap {
        &self.materials
    }

    pub fn materials_path(&self) -> Option<&Path> {
        self.materials_key.as_ref().map(|k| k.path())
    }

    /// Replaces the raw documents; on a resolution error nothing changes.
    pub fn set_material_docs(&mut self, docs: Vec<MaterialDoc>) -> Result<(), EngineError> {
        self.materials = resolve_materials(&docs)?;
        self.material_docs = docs;
        Ok(())
    }

    /// Overlays `patch` onto material `name` and re-resolves the forest.
    /// Applies nothing on error.
    pub fn patch_material(&mut self, name: &str, patch: &MaterialProps) -> Result<ResolvedMaterial, EngineError> {
        patch.check_ranges(name)?;
        let mut docs = self.material_docs.clone();
        let doc = docs.iter_mut().find(|d| d.name == name).ok_or_else(|| EngineError::UnknownMaterial(name.into()))?;
        doc.props.merge(patch);
        self.set_material_docs(docs)?;
        Ok(self.materials[name].clone())
    }

    /// Writes the raw documents, preserving `extends` links.
    pub fn save_materials(&self, path: &Path) -> Result<(), EngineError> {
        std::fs::write(path, material_docs_to_json(&self.material_docs))
            .map_err(|e| EngineError::Io { path: path.to_path_buf(), message: e.to_string() })
    }

    /// The scene file reflecting the current entity tree.
    pub fn to_scene_file(&self) -> SceneFile {
        SceneFile { nodes: self.scene.to_nodes(), ..self.file.clone() }
    }

    fn shading_scene(&self, collected: &Collected) -> ShadingScene {
        ShadingScene {
            materials: collected.materials.clone(),
            lights: self.file.lights.iter().map(Into::into).collect(),
            background: self.file.background,
            camera: (&self.file.camera).into(),
        }
    }

    /// Materials visible to entities: built-in UI materials overlaid by the
    /// documents.
    pub fn binding_materials(&self) -> MaterialMap {
        let mut all = ui_materials();
        all.extend(self.materials.iter().map(|(k, v)| (k.clone(), v.clone())));
        all
    }

    pub fn prepare(&mut self, build: &BuildConfig) -> Result<Prepared, EngineError> {
        let collected = self.scene.collect_instances(&self.binding_materials())?;
        let store = self.blas_cache.store(&self.scene, build)?;
        let tlas = Tlas::build_with(collected.instances.clone(), &store, build)?;
        let programs = default_programs(Arc::new(self.shading_scene(&collected)));
        Ok(Prepared { tlas, programs, collected })
    }

    pub fn validate(&mut self, config: &DispatchConfig) -> Result<Vec<Diagnostic>, EngineError> {
        let p = self.prepare(&BuildConfig::default())?;
        Ok(validate(&p.tlas, &p.programs, config))
    }

    pub fn render_hdr(
        &mut self,
        settings: &RenderSettings,
        profiler: &Profiler,
    ) -> Result<(Framebuffer, DispatchStats), EngineError> {
        let p = self.prepare(&settings.build)?;
        Ok(dispatch_with_stats(&p.tlas, &p.programs, &settings.dispatch, profiler)?)
    }

    pub fn render(&mut self, settings: &RenderSettings, profiler: &Profiler) -> Result<LdrImage, EngineError> {
        let (fb, _) = self.render_hdr(settings, profiler)?;
        Ok(settings.post.apply(&fb, profiler)?)
    }

    /// Polls `mgr` for changed files and re-derives whatever depends on
    /// them. On any failure the previous state is kept.
    pub fn refresh(&mut self, mgr: &ResourceManager) -> RefreshReport {
        let reload = mgr.reload_if_changed();
        let mut report = RefreshReport {
            changed: reload.changed,
            errors: reload.errors.iter().map(|(k, e)| format!("{k}: {e}")).collect(),
        };
        let touched = |k: &Option<ResourceKey>| k.as_ref().is_some_and(|k| report.changed.contains(k));
        let scene_changed = touched(&self.scene_key) || self.mesh_keys.iter().any(|k| report.changed.contains(k));
        let materials_changed = touched(&self.materials_key);
        if scene_changed {
            if let Some(key) = self.scene_key.clone() {
                match World::load(key.path(), mgr) {
                    Ok(w) => *self = w,
                    Err(e) => report.errors.push(e.to_string()),
                }
                return report;
            }
        }
        if materials_changed {
            let key = self.materials_key.clone().expect("checked above");
            let docs = mgr.get(&key).and_then(|r| r.as_materials().map(<[MaterialDoc]>::to_vec));
            if let Some(docs) = docs {
                if let Err(e) = self.set_material_docs(docs) {
                    report.errors.push(e.to_string());
                }
            }
        }
        report
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }
}

/// Seed for progressive pass `pass` (1-based).
pub fn pass_seed(seed: u64, pass: u32) -> u64 {
    seed.wrapping_add(pass as u64)
}

/// Running mean of per-pass HDR framebuffers.
#[derive(Debug, Clone)]
pub struct Accumulator {
    width: u32,
    height: u32,
    color: Vec<[f64; 3]>,
    roughness: Vec<f64>,
    depth: Vec<f32>,
    passes: u32,
}

impl Accumulator {
    pub fn new(width: u32, height: u32) -> Accumulator {
        let n = width as usize * height as usize;
        Accumulator {
            width,
            height,
            color: vec![[0.0; 3]; n],
            roughness: vec![0.0; n],
            depth: vec![f32::INFINITY; n],
            passes: 0,
        }
    }

    pub fn passes(&self) -> u32 {
        self.passes
    }

    pub fn reset(&mut self) {
        *self = Accumulator::new(self.width, self.height);
    }

    pub fn add(&mut self, fb: &Framebuffer) {
        assert_eq!((fb.width, fb.height), (self.width, self.height), "pass size mismatch");
        for (acc, c) in self.color.iter_mut().zip(&fb.color) {
            for k in 0..3 {
                acc[k] += c[k] as f64;
            }
        }
        for (acc, r) in self.roughness.iter_mut().zip(&fb.roughness) {
            *acc += *r as f64;
        }
        if self.passes == 0 {
            self.depth.copy_from_slice(&fb.depth);
        }
        self.passes += 1;
    }

    pub fn mean(&self) -> Framebuffer {
        let n = self.passes.max(1) as f64;
        let mut fb = Framebuffer::new(self.width, self.height);
        for (dst, acc) in fb.color.iter_mut().zip(&self.color) {
            *dst = acc.map(|v| (v / n) as f32);
        }
        for (dst, acc) in fb.roughness.iter_mut().zip(&self.roughness) {
            *dst = (acc / n) as f32;
        }
        fb.depth.copy_from_slice(&self.depth);
        fb
    }
}

/// Renders `passes` progressive passes offline and returns the
/// post-processed mean.
pub fn render_progressive(
    world: &mut World,
    settings: &RenderSettings,
    passes: u32,
    profiler: &Profiler,
) -> Result<LdrImage, EngineError> {
    let prepared = world.prepare(&settings.build)?;
    let mut acc = Accumulator::new(settings.dispatch.width, settings.dispatch.height);
    for pass in 1..=passes {
        let config = DispatchConfig { seed: pass_seed(settings.dispatch.seed, pass), ..settings.dispatch.clone() };
        let (fb, _) = dispatch_with_stats(&prepared.tlas, &prepared.programs, &config, profiler)?;
        acc.add(&fb);
    }
    Ok(settings.post.apply(&acc.mean(), profiler)?)
}
