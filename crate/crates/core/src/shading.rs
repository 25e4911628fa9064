//! Built-in programs: pinhole camera raygen, Lambert direct lighting with
//! shadow rays, mirror reflection, Fresnel-weighted refraction, emission and
//! a constant background.
//!
//! Hit groups: 0 opaque, 1 transparent (with the shadow any-hit filter),
//! 2 UI. Miss programs: 0 background, 1 shadow.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::accel::{HitCandidate, HitRecord, Instance, MASK_WORLD};
use crate::geometry::{f0_from_ior, reflect, refract, schlick, Ray, Vec3};
use crate::pipeline::{
    AnyHitProgram, ClosestHitProgram, HitGroup, LaunchId, MissProgram, Payload, PipelineError, ProgramTable,
    RayGenProgram, TraceContext, TraceFlags,
};

pub type Rgb = [f64; 3];

pub const HIT_GROUP_OPAQUE: u32 = 0;
pub const HIT_GROUP_TRANSPARENT: u32 = 1;
pub const HIT_GROUP_UI: u32 = 2;

pub const MISS_BACKGROUND: usize = 0;
pub const MISS_SHADOW: usize = 1;

/// Offset applied to both ends of shadow segments and to spawned rays.
pub const RAY_EPSILON: f64 = 1e-4;

const TAG_COLOR: u8 = 0;
const TAG_SHADOW: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedMaterial {
    pub name: String,
    pub albedo: Rgb,
    pub roughness: f64,
    pub reflectivity: f64,
    /// 0 marks an opaque conductor-like surface; dielectrics use ≥ 1.
    pub refraction_index: f64,
    pub transparency: f64,
    pub emission: Rgb,
}

impl Default for ResolvedMaterial {
    fn default() -> Self {
        ResolvedMaterial {
            name: "default".into(),
            albedo: [0.8, 0.8, 0.8],
            roughness: 0.0,
            reflectivity: 0.0,
            refraction_index: 1.0,
            transparency: 0.0,
            emission: [0.0, 0.0, 0.0],
        }
    }
}

impl ResolvedMaterial {
    pub fn hit_group(&self) -> u32 {
        if self.transparency > 0.0 {
            HIT_GROUP_TRANSPARENT
        } else {
            HIT_GROUP_OPAQUE
        }
    }

    /// Reflection weight at the given incidence cosine. Only transparent
    /// materials split energy with Fresnel; opaque mirrors reflect fully.
    pub fn fresnel(&self, cos_i: f64) -> f64 {
        if self.transparency > 0.0 {
            schlick(cos_i, f0_from_ior(self.refraction_index.max(1.0)))
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointLight {
    pub position: Vec3,
    pub intensity: Rgb,
    /// Distances below this are clamped in the inverse-square falloff.
    pub radius: f64,
}

impl PointLight {
    pub fn falloff(&self, distance: f64) -> f64 {
        let d = distance.max(self.radius);
        if d > 0.0 {
            1.0 / (d * d)
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: Vec3,
    pub look_at: Vec3,
    #[serde(default = "default_up")]
    pub up: Vec3,
    /// Vertical field of view.
    pub fov_degrees: f64,
}

fn default_up() -> Vec3 {
    Vec3::Y
}

impl Default for Camera {
    fn default() -> Self {
        Camera { position: Vec3::new(0.0, 0.0, 5.0), look_at: Vec3::ZERO, up: Vec3::Y, fov_degrees: 45.0 }
    }
}

impl Camera {
    /// Ray through the continuous image position (px, py), y down.
    pub fn ray(&self, px: f64, py: f64, width: u32, height: u32) -> Ray {
        let forward = (self.look_at - self.position).normalize();
        let right = forward.cross(self.up).normalize();
        let up = right.cross(forward);
        let half_h = (self.fov_degrees.to_radians() * 0.5).tan();
        let half_w = half_h * width as f64 / height as f64;
        let sx = (2.0 * px / width as f64 - 1.0) * half_w;
        let sy = (1.0 - 2.0 * py / height as f64) * half_h;
        Ray::new(self.position, forward + right * sx + up * sy)
    }
}

/// Radiance carried back up the ray tree, plus the hit distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorPayload {
    pub color: Rgb,
    pub hit_t: f64,
}

impl ColorPayload {
    pub const ENCODED_LEN: usize = 33;

    pub fn encode(&self) -> Payload {
        let mut p = Payload::new();
        p.push_u8(TAG_COLOR);
        for v in self.color {
            p.push_f64(v);
        }
        p.push_f64(self.hit_t);
        p
    }

    pub fn decode(p: &Payload) -> Result<ColorPayload, PipelineError> {
        let mut r = p.reader();
        if r.u8()? != TAG_COLOR {
            return Err(PipelineError::PayloadDecode("expected a color payload".into()));
        }
        let color = [r.f64()?, r.f64()?, r.f64()?];
        Ok(ColorPayload { color, hit_t: r.f64()? })
    }
}

impl Default for ColorPayload {
    fn default() -> Self {
        ColorPayload { color: [0.0; 3], hit_t: f64::INFINITY }
    }
}

fn shadow_payload(occluded: bool) -> Payload {
    let mut p = Payload::new();
    p.push_u8(TAG_SHADOW);
    p.push_u8(occluded as u8);
    p
}

fn is_shadow_payload(p: &Payload) -> bool {
    p.bytes().first() == Some(&TAG_SHADOW)
}

/// Read-only scene data the built-in programs consult.
#[derive(Debug, Clone, Default)]
pub struct ShadingScene {
    pub materials: HashMap<u32, ResolvedMaterial>,
    pub lights: Vec<PointLight>,
    pub background: Rgb,
    pub camera: Camera,
}

impl ShadingScene {
    pub fn material(&self, instance_id: u32) -> Result<&ResolvedMaterial, PipelineError> {
        self.materials
            .get(&instance_id)
            .ok_or_else(|| PipelineError::Program(format!("no material bound to instance {instance_id}")))
    }
}

/// True if something in the world blocks the segment `from → to`.
pub fn shadow_query(ctx: &mut TraceContext<'_>, from: Vec3, to: Vec3) -> Result<bool, PipelineError> {
    let delta = to - from;
    let dist = delta.length();
    if dist <= 2.0 * RAY_EPSILON {
        return Ok(false);
    }
    let ray = Ray::new(from, delta).with_interval(RAY_EPSILON, dist - RAY_EPSILON).with_mask(MASK_WORLD);
    let out = ctx.trace_ray_with(&ray, shadow_payload(true), MISS_SHADOW, TraceFlags::OCCLUSION)?;
    let mut r = out.reader();
    if r.u8()? != TAG_SHADOW {
        return Err(PipelineError::PayloadDecode("expected a shadow payload".into()));
    }
    Ok(r.u8()? != 0)
}

/// Lambert direct lighting at `position` with normal `normal` (facing the
/// viewer), shadowed per light.
pub fn shade_direct(
    ctx: &mut TraceContext<'_>,
    position: Vec3,
    normal: Vec3,
    material: &ResolvedMaterial,
    lights: &[PointLight],
) -> Result<Rgb, PipelineError> {
    let mut out = [0.0; 3];
    for light in lights {
        let to_light = light.position - position;
        let dist = to_light.length();
        if dist <= 0.0 {
            continue;
        }
        let n_dot_l = normal.dot(to_light / dist);
        if n_dot_l <= 0.0 {
            continue;
        }
        if shadow_query(ctx, position, light.position)? {
            continue;
        }
        let k = n_dot_l * light.falloff(dist) / PI;
        for c in 0..3 {
            out[c] += material.albedo[c] * k * light.intensity[c];
        }
    }
    Ok(out)
}

pub struct CameraRayGen {
    pub camera: Camera,
}

impl RayGenProgram for CameraRayGen {
    fn generate(&self, ctx: &mut TraceContext<'_>, launch: LaunchId) -> Result<[f64; 3], PipelineError> {
        let (w, h) = (ctx.config().width, ctx.config().height);
        let jx: f64 = ctx.rng().random();
        let jy: f64 = ctx.rng().random();
        let ray = self.camera.ray(launch.x as f64 + jx, launch.y as f64 + jy, w, h);
        let out = ctx.trace_ray(&ray, ColorPayload::default().encode(), MISS_BACKGROUND)?;
        Ok(ColorPayload::decode(&out)?.color)
    }
}

pub struct SurfaceHit {
    pub scene: Arc<ShadingScene>,
}

impl SurfaceHit {
    fn trace_color(ctx: &mut TraceContext<'_>, origin: Vec3, dir: Vec3, mask: u8) -> Result<Rgb, PipelineError> {
        let ray = Ray::new(origin, dir).with_interval(RAY_EPSILON, f64::INFINITY).with_mask(mask);
        let out = ctx.trace_ray(&ray, ColorPayload::default().encode(), MISS_BACKGROUND)?;
        Ok(ColorPayload::decode(&out)?.color)
    }
}

/// Shading normal turned toward the incoming ray. At silhouettes where the
/// interpolated normal faces away from the ray, the geometric normal is
/// used, so the normal always agrees with the side the ray arrived from.
pub fn facing_normal(d: Vec3, shading: Vec3, geometric: Vec3) -> Vec3 {
    let ng = if d.dot(geometric) < 0.0 { geometric } else { -geometric };
    let ns = if shading.dot(ng) >= 0.0 { shading } else { -shading };
    if ns.dot(d) < 0.0 {
        ns
    } else {
        ng
    }
}

/// Mirror direction about the shading normal `n`, or about the geometric
/// normal `ng` when the former would dip below the surface.
pub fn reflect_dir(d: Vec3, n: Vec3, ng: Vec3) -> Vec3 {
    let r = reflect(d, n);
    if r.dot(ng) > 0.0 {
        r
    } else {
        reflect(d, ng)
    }
}

/// Refracted direction about `n`, falling back to `ng` when the result
/// would stay on the incident side. `None` means total internal reflection.
pub fn refract_dir(d: Vec3, n: Vec3, ng: Vec3, eta: f64) -> Option<Vec3> {
    match refract(d, n, eta) {
        Some(t) if t.dot(ng) < 0.0 => Some(t),
        _ => refract(d, ng, eta),
    }
}

impl ClosestHitProgram for SurfaceHit {
    fn closest_hit(
        &self,
        ctx: &mut TraceContext<'_>,
        ray: &Ray,
        hit: &HitRecord,
        _payload: Payload,
    ) -> Result<Payload, PipelineError> {
        let mat = self.scene.material(hit.instance_id)?;
        ctx.write_aux(mat.roughness as f32, hit.t as f32);

        let d = ray.direction;
        let entering = d.dot(hit.geometric_normal) < 0.0;
        let n = facing_normal(d, hit.normal, hit.geometric_normal);
        let ng = if entering { hit.geometric_normal } else { -hit.geometric_normal };
        let cos_i = (-d.dot(n)).clamp(0.0, 1.0);
        let fresnel = mat.fresnel(cos_i);

        let mut color = mat.emission;
        let diffuse_w = (1.0 - mat.reflectivity - mat.transparency).max(0.0);
        if diffuse_w > 0.0 && mat.albedo.iter().any(|&a| a > 0.0) {
            let direct = shade_direct(ctx, hit.position, n, mat, &self.scene.lights)?;
            for c in 0..3 {
                color[c] += diffuse_w * direct[c];
            }
        }

        let mut reflected: Option<Rgb> = None;
        let mut reflection = |ctx: &mut TraceContext<'_>| -> Result<Rgb, PipelineError> {
            if let Some(c) = reflected {
                return Ok(c);
            }
            let c = Self::trace_color(ctx, hit.position, reflect_dir(d, n, ng), ray.mask)?;
            reflected = Some(c);
            Ok(c)
        };

        if mat.reflectivity > 0.0 {
            let w = mat.reflectivity * fresnel;
            let refl = reflection(ctx)?;
            for c in 0..3 {
                color[c] += w * refl[c];
            }
        }
        if mat.transparency > 0.0 {
            let ior = mat.refraction_index.max(1.0);
            let eta = if entering { 1.0 / ior } else { ior };
            let (w, radiance) = match refract_dir(d, n, ng, eta) {
                Some(t) => (mat.transparency * (1.0 - fresnel), Self::trace_color(ctx, hit.position, t, ray.mask)?),
                // total internal reflection: the refracted share goes to the mirror branch
                None => (mat.transparency, reflection(ctx)?),
            };
            for c in 0..3 {
                color[c] += w * radiance[c];
            }
        }
        Ok(ColorPayload { color, hit_t: hit.t }.encode())
    }

    fn check_binding(&self, instance: &Instance) -> Option<String> {
        (!self.scene.materials.contains_key(&instance.instance_id))
            .then(|| format!("no material bound to instance {}", instance.instance_id))
    }
}

/// Lets shadow rays pass through fully transparent surfaces.
pub struct ShadowFilter {
    pub scene: Arc<ShadingScene>,
}

impl AnyHitProgram for ShadowFilter {
    fn any_hit(&self, _ray: &Ray, candidate: &HitCandidate, payload: &Payload) -> bool {
        if !is_shadow_payload(payload) {
            return true;
        }
        match self.scene.materials.get(&candidate.instance_id) {
            Some(m) => m.transparency < 1.0,
            None => true,
        }
    }
}

pub struct BackgroundMiss {
    pub color: Rgb,
}

impl MissProgram for BackgroundMiss {
    fn miss(&self, _ctx: &mut TraceContext<'_>, _ray: &Ray, _payload: Payload) -> Result<Payload, PipelineError> {
        Ok(ColorPayload { color: self.color, hit_t: f64::INFINITY }.encode())
    }
}

pub struct ShadowMiss;

impl MissProgram for ShadowMiss {
    fn miss(&self, _ctx: &mut TraceContext<'_>, _ray: &Ray, _payload: Payload) -> Result<Payload, PipelineError> {
        Ok(shadow_payload(false))
    }
}

/// The standard program table over `scene`.
pub fn default_programs(scene: Arc<ShadingScene>) -> ProgramTable {
    let surface: Arc<dyn ClosestHitProgram> = Arc::new(SurfaceHit { scene: scene.clone() });
    let filter: Arc<dyn AnyHitProgram> = Arc::new(ShadowFilter { scene: scene.clone() });
    ProgramTable {
        raygen: Arc::new(CameraRayGen { camera: scene.camera }),
        miss: vec![Arc::new(BackgroundMiss { color: scene.background }), Arc::new(ShadowMiss)],
        hit_groups: vec![
            HitGroup { closest_hit: surface.clone(), any_hit: None },
            HitGroup { closest_hit: surface.clone(), any_hit: Some(filter) },
            HitGroup { closest_hit: surface, any_hit: None },
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accel::{Blas, BlasId, BlasStore, BuildConfig, Mesh, Tlas, MASK_UI};
    use crate::geometry::Transform;
    use crate::pipeline::{dispatch, dispatch_with_stats, DispatchConfig, Profiler};
    use std::sync::atomic::{AtomicU64, Ordering};

    #[test]
    fn secondary_directions_respect_the_geometric_side() {
        let ng = Vec3::Z;
        // grazing ray, shading normal tilted away from the viewer
        let d = Vec3::new(1.0, 0.0, -0.05).normalize();
        let ns = Vec3::new(-0.3, 0.0, 1.0).normalize();
        let n = facing_normal(d, ns, ng);
        assert!(n.dot(d) < 0.0);
        let r = reflect_dir(d, n, ng);
        assert!(r.dot(ng) > 0.0);
        assert!((reflect_dir(-Vec3::Z, Vec3::Z, Vec3::Z) - Vec3::Z).length() < 1e-12);

        let tilted = Vec3::new(0.6, 0.0, 1.0).normalize();
        if let Some(t) = refract_dir(d, facing_normal(d, tilted, ng), ng, 1.0 / 1.5) {
            assert!(t.dot(ng) < 0.0);
        }
        let straight = refract_dir(-Vec3::Z, Vec3::Z, Vec3::Z, 1.0 / 1.5).unwrap();
        assert!((straight + Vec3::Z).length() < 1e-12);
        // back-facing shading normal falls back to the geometric one
        assert_eq!(facing_normal(d, Vec3::new(1.0, 0.0, 0.01).normalize(), ng), ng);
    }

    /// Quad in the z = 0 plane facing +z, side 2.
    fn quad_blas(store: &mut BlasStore) -> BlasId {
        let mesh = Mesh::new(
            vec![[-1.0, -1.0, 0.0], [1.0, -1.0, 0.0], [1.0, 1.0, 0.0], [-1.0, 1.0, 0.0]],
            vec![[0, 1, 2], [0, 2, 3]],
        );
        store.add(Blas::build(Arc::new(mesh), &BuildConfig::default()).unwrap())
    }

    fn inst(blas: BlasId, id: u32, t: Transform, mat: &ResolvedMaterial) -> Instance {
        Instance {
            blas_id: blas,
            transform: t,
            instance_id: id,
            hit_group_id: mat.hit_group(),
            mask: MASK_WORLD,
            debug_name: format!("obj{id}"),
        }
    }

    fn matte(albedo: f64) -> ResolvedMaterial {
        ResolvedMaterial { albedo: [albedo; 3], ..ResolvedMaterial::default() }
    }

    /// Raygen shooting one ray per pixel from a fixed origin and direction.
    struct FixedRay(Ray);
    impl RayGenProgram for FixedRay {
        fn generate(&self, ctx: &mut TraceContext<'_>, _: LaunchId) -> Result<[f64; 3], PipelineError> {
            let out = ctx.trace_ray(&self.0, ColorPayload::default().encode(), MISS_BACKGROUND)?;
            Ok(ColorPayload::decode(&out)?.color)
        }
    }

    fn render_one(tlas: &Tlas, scene: ShadingScene, ray: Ray, max_depth: u32) -> Rgb {
        let mut programs = default_programs(Arc::new(scene));
        programs.raygen = Arc::new(FixedRay(ray));
        let config = DispatchConfig { max_depth, ..DispatchConfig::sized(1, 1) };
        let fb = dispatch(tlas, &programs, &config, &Profiler::new()).unwrap();
        fb.color[0].map(|v| v as f64)
    }

    #[test]
    fn color_payload_fits_budget() {
        let p = ColorPayload { color: [1.0, 2.0, 3.0], hit_t: 4.5 };
        let enc = p.encode();
        assert_eq!(enc.len(), ColorPayload::ENCODED_LEN);
        assert!(enc.len() <= 48);
        assert_eq!(ColorPayload::decode(&enc).unwrap(), p);
        assert!(ColorPayload::decode(&shadow_payload(true)).is_err());
    }

    #[test]
    fn direct_light_formula() {
        let mut store = BlasStore::new();
        let q = quad_blas(&mut store);
        let mat = matte(0.5);
        let tlas = Tlas::build(vec![inst(q, 0, Transform::IDENTITY, &mat)], &store).unwrap();
        let light = PointLight { position: Vec3::new(0.0, 0.0, 3.0), intensity: [2.0, 4.0, 8.0], radius: 0.1 };
        let scene = ShadingScene {
            materials: HashMap::from([(0, mat)]),
            lights: vec![light],
            background: [0.0; 3],
            camera: Camera::default(),
        };
        let got = render_one(&tlas, scene, Ray::new(Vec3::new(0.0, 0.0, 5.0), -Vec3::Z), 8);
        for c in 0..3 {
            // albedo · cosθ · I · falloff / π at normal incidence, d = 3
            let want = 0.5 * light.intensity[c] / 9.0 / PI;
            assert!((got[c] - want as f64).abs() < 1e-6, "{got:?}");
        }
    }

    fn lit_floor_scene(occluders: &[(Transform, ResolvedMaterial)], lights: Vec<PointLight>) -> (Tlas, ShadingScene) {
        let mut store = BlasStore::new();
        let q = quad_blas(&mut store);
        let floor = matte(0.5);
        let mut instances = vec![inst(q, 0, Transform::scale(Vec3::splat(10.0)), &floor)];
        let mut materials = HashMap::from([(0, floor)]);
        for (i, (t, m)) in occluders.iter().enumerate() {
            let id = i as u32 + 1;
            instances.push(inst(q, id, *t, m));
            materials.insert(id, m.clone());
        }
        let tlas = Tlas::build(instances, &store).unwrap();
        (tlas, ShadingScene { materials, lights, background: [0.0; 3], camera: Camera::default() })
    }

    const PROBE: Vec3 = Vec3::new(0.0, 0.0, 5.0);

    #[test]
    fn occluder_blocks_light_and_light_below_is_dark() {
        let light = PointLight { position: Vec3::new(0.0, 0.0, 4.0), intensity: [5.0; 3], radius: 0.1 };
        let wall = Transform::translate(Vec3::new(0.0, 0.0, 2.0)).compose(&Transform::scale(Vec3::splat(0.2)));
        let (tlas, scene) = lit_floor_scene(&[(wall, matte(0.5))], vec![light]);
        let probe = Ray::new(Vec3::new(3.0, 0.0, 5.0), Vec3::new(-3.0, 0.0, -5.0));
        assert_eq!(render_one(&tlas, scene, probe, 8), [0.0; 3]);

        let below = PointLight { position: Vec3::new(0.0, 0.0, -2.0), ..light };
        let (tlas, scene) = lit_floor_scene(&[], vec![below]);
        assert_eq!(render_one(&tlas, scene, Ray::new(PROBE, -Vec3::Z), 8), [0.0; 3]);
    }

    #[test]
    fn occluded_light_is_additive_no_op() {
        let lit = PointLight { position: Vec3::new(2.0, 1.0, 3.0), intensity: [3.0, 2.0, 1.0], radius: 0.1 };
        let blocked = PointLight { position: Vec3::new(0.0, 0.0, 4.0), intensity: [9.0; 3], radius: 0.1 };
        // small occluder directly above the probe point, below the blocked light
        let cap = Transform::translate(Vec3::new(0.0, 0.0, 2.0)).compose(&Transform::scale(Vec3::splat(0.3)));
        let probe = Ray::new(Vec3::new(-3.0, 0.0, 5.0), Vec3::new(3.0, 0.0, -5.0));
        let (tlas, scene) = lit_floor_scene(&[(cap, matte(0.5))], vec![lit, blocked]);
        let both = render_one(&tlas, scene, probe, 8);
        let (tlas, scene) = lit_floor_scene(&[(cap, matte(0.5))], vec![lit]);
        let single = render_one(&tlas, scene, probe, 8);
        assert!(single[0] > 0.0);
        for c in 0..3 {
            assert!((both[c] - single[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn transparent_occluder_casts_no_shadow() {
        let light = PointLight { position: Vec3::new(0.0, 0.0, 4.0), intensity: [5.0; 3], radius: 0.1 };
        let pane = Transform::translate(Vec3::new(0.0, 0.0, 2.0)).compose(&Transform::scale(Vec3::splat(0.2)));
        let glass = ResolvedMaterial { transparency: 1.0, refraction_index: 1.0, albedo: [0.0; 3], ..ResolvedMaterial::default() };
        let probe = Ray::new(Vec3::new(3.0, 0.0, 5.0), Vec3::new(-3.0, 0.0, -5.0));
        let (tlas, scene) = lit_floor_scene(&[(pane, glass)], vec![light]);
        let with_pane = render_one(&tlas, scene, probe, 8);
        let (tlas, scene) = lit_floor_scene(&[], vec![light]);
        let open = render_one(&tlas, scene, probe, 8);
        assert!(open[0] > 0.0);
        assert_eq!(with_pane, open);
    }

    #[test]
    fn mirror_returns_emitter_color() {
        let mut store = BlasStore::new();
        let q = quad_blas(&mut store);
        let mirror = ResolvedMaterial { reflectivity: 1.0, refraction_index: 0.0, albedo: [0.0; 3], ..ResolvedMaterial::default() };
        let patch = ResolvedMaterial { emission: [0.9, 0.6, 0.3], albedo: [0.0; 3], ..ResolvedMaterial::default() };
        // mirror at z = 0 facing +z; patch at z = 4 facing -z
        let patch_t = Transform::translate(Vec3::new(0.0, 0.0, 4.0))
            .compose(&Transform::rotate(Vec3::X, 180.0))
            .compose(&Transform::scale(Vec3::splat(5.0)));
        let tlas = Tlas::build(
            vec![inst(q, 0, Transform::scale(Vec3::splat(5.0)), &mirror), inst(q, 1, patch_t, &patch)],
            &store,
        )
        .unwrap();
        let scene = ShadingScene {
            materials: HashMap::from([(0, mirror), (1, patch.clone())]),
            lights: vec![PointLight { position: Vec3::new(3.0, 3.0, 3.0), intensity: [1.0; 3], radius: 0.1 }],
            background: [0.05; 3],
            camera: Camera::default(),
        };
        // slanted ray that reflects off the mirror into the patch
        let origin = Vec3::new(-2.0, 0.0, 2.0);
        let got = render_one(&tlas, scene, Ray::new(origin, Vec3::new(1.0, 0.0, -1.0)), 8);
        for c in 0..3 {
            assert!((got[c] - patch.emission[c]).abs() < 1e-6, "{got:?}");
        }
    }

    #[test]
    fn clear_slab_passes_background() {
        let mut store = BlasStore::new();
        let q = quad_blas(&mut store);
        let clear = ResolvedMaterial { transparency: 1.0, refraction_index: 1.0, albedo: [0.0; 3], ..ResolvedMaterial::default() };
        let front = Transform::translate(Vec3::new(0.0, 0.0, 0.5));
        let back = Transform::translate(Vec3::new(0.0, 0.0, -0.5)).compose(&Transform::rotate(Vec3::X, 180.0));
        let tlas = Tlas::build(vec![inst(q, 0, front, &clear), inst(q, 1, back, &clear)], &store).unwrap();
        let scene = ShadingScene {
            materials: HashMap::from([(0, clear.clone()), (1, clear)]),
            lights: vec![],
            background: [0.2, 0.4, 0.6],
            camera: Camera::default(),
        };
        let got = render_one(&tlas, scene, Ray::new(PROBE, -Vec3::Z), 8);
        for c in 0..3 {
            assert!((got[c] - [0.2, 0.4, 0.6][c]).abs() < 1e-6);
        }
    }

    #[test]
    fn background_only_and_black() {
        let scene = ShadingScene { background: [0.1, 0.1, 0.1], ..ShadingScene::default() };
        let programs = default_programs(Arc::new(scene));
        let fb = dispatch(&Tlas::default(), &programs, &DispatchConfig::sized(5, 4), &Profiler::new()).unwrap();
        assert!(fb.color.iter().all(|c| *c == [0.1f32; 3]));

        let programs = default_programs(Arc::new(ShadingScene::default()));
        let fb = dispatch(&Tlas::default(), &programs, &DispatchConfig::sized(5, 4), &Profiler::new()).unwrap();
        assert!(fb.color.iter().all(|c| *c == [0.0f32; 3]));
    }

    struct CountingMiss(AtomicU64, Box<dyn MissProgram>);
    impl MissProgram for CountingMiss {
        fn miss(&self, ctx: &mut TraceContext<'_>, ray: &Ray, p: Payload) -> Result<Payload, PipelineError> {
            self.0.fetch_add(1, Ordering::Relaxed);
            self.1.miss(ctx, ray, p)
        }
    }

    #[test]
    fn shadow_rays_use_miss_index_one() {
        let light = PointLight { position: Vec3::new(0.0, 0.0, 4.0), intensity: [1.0; 3], radius: 0.1 };
        let (tlas, scene) = lit_floor_scene(&[], vec![light]);
        let scene = Arc::new(scene);
        let mut programs = default_programs(scene.clone());
        let bg = Arc::new(CountingMiss(AtomicU64::new(0), Box::new(BackgroundMiss { color: [0.0; 3] })));
        let shadow = Arc::new(CountingMiss(AtomicU64::new(0), Box::new(ShadowMiss)));
        programs.miss = vec![bg.clone(), shadow.clone()];
        programs.raygen = Arc::new(FixedRay(Ray::new(PROBE, -Vec3::Z)));
        dispatch(&tlas, &programs, &DispatchConfig::sized(2, 2), &Profiler::new()).unwrap();
        assert_eq!(shadow.0.load(Ordering::Relaxed), 4);
        assert_eq!(bg.0.load(Ordering::Relaxed), 0);
    }

    #[test]
    fn ui_geometry_casts_no_shadow() {
        let mut store = BlasStore::new();
        let q = quad_blas(&mut store);
        let floor = matte(0.5);
        let ui_mat = ResolvedMaterial { emission: [1.0; 3], ..ResolvedMaterial::default() };
        let mut panel = inst(q, 1, Transform::translate(Vec3::new(0.0, 0.0, 2.0)).compose(&Transform::scale(Vec3::splat(0.3))), &ui_mat);
        panel.mask = MASK_UI;
        panel.hit_group_id = HIT_GROUP_UI;
        let tlas = Tlas::build(vec![inst(q, 0, Transform::scale(Vec3::splat(10.0)), &floor), panel], &store).unwrap();
        let light = PointLight { position: Vec3::new(0.0, 0.0, 4.0), intensity: [5.0; 3], radius: 0.1 };
        let scene = ShadingScene {
            materials: HashMap::from([(0, floor), (1, ui_mat)]),
            lights: vec![light],
            ..ShadingScene::default()
        };
        let probe = Ray::new(Vec3::new(3.0, 0.0, 5.0), Vec3::new(-3.0, 0.0, -5.0));
        assert!(render_one(&tlas, scene, probe, 8)[0] > 0.0);
    }

    #[test]
    fn energy_bounded_without_emission() {
        // closed-ish box of mirrors and diffuse walls, one light of intensity 1
        let mut store = BlasStore::new();
        let q = quad_blas(&mut store);
        let mats = [
            matte(1.0),
            ResolvedMaterial { reflectivity: 0.7, refraction_index: 0.0, albedo: [1.0; 3], ..ResolvedMaterial::default() },
            ResolvedMaterial { transparency: 0.6, reflectivity: 0.4, refraction_index: 1.5, albedo: [1.0; 3], ..ResolvedMaterial::default() },
        ];
        let placements = [
            Transform::translate(Vec3::new(0.0, 0.0, -2.0)).compose(&Transform::scale(Vec3::splat(3.0))),
            Transform::translate(Vec3::new(-2.0, 0.0, 0.0)).compose(&Transform::rotate(Vec3::Y, 90.0)).compose(&Transform::scale(Vec3::splat(3.0))),
            Transform::translate(Vec3::new(0.0, 0.0, 0.0)).compose(&Transform::rotate(Vec3::Y, 20.0)),
        ];
        let instances: Vec<Instance> = placements.iter().zip(&mats).enumerate().map(|(i, (t, m))| inst(q, i as u32, *t, m)).collect();
        let tlas = Tlas::build(instances, &store).unwrap();
        let scene = ShadingScene {
            materials: mats.iter().cloned().enumerate().map(|(i, m)| (i as u32, m)).collect(),
            lights: vec![PointLight { position: Vec3::new(1.0, 1.0, 1.0), intensity: [1.0; 3], radius: 1.0 }],
            background: [0.0; 3],
            camera: Camera { position: Vec3::new(1.5, 0.5, 4.0), look_at: Vec3::ZERO, ..Camera::default() },
        };
        let programs = default_programs(Arc::new(scene));
        let (fb, _) = dispatch_with_stats(&tlas, &programs, &DispatchConfig::sized(24, 24), &Profiler::new()).unwrap();
        assert!(fb.color.iter().flatten().any(|&v| v > 0.0));
        assert!(fb.color.iter().flatten().all(|&v| v <= 1.0));
    }

    #[test]
    fn missing_material_is_a_validation_error() {
        let mut store = BlasStore::new();
        let q = quad_blas(&mut store);
        let tlas = Tlas::build(vec![inst(q, 4, Transform::IDENTITY, &matte(0.5))], &store).unwrap();
        let programs = default_programs(Arc::new(ShadingScene::default()));
        let config = DispatchConfig { validate: true, ..DispatchConfig::sized(2, 2) };
        match dispatch(&tlas, &programs, &config, &Profiler::new()) {
            Err(PipelineError::Validation(d)) => assert_eq!(d[0].object, "obj4"),
            other => panic!("{other:?}"),
        }
    }
}
