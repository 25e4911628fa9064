use std::path::PathBuf;
use std::sync::Arc;

use proptest::prelude::*;

use tracelet::accel::{Blas, BuildConfig, Mesh};
use tracelet::assets::{MaterialProps, ResourceManager};
use tracelet::geometry::{ray_triangle, Ray, Vec3};
use tracelet::pipeline::{DispatchConfig, Framebuffer, Profiler};
use tracelet::postfx::{tonemap_srgb, PostChain};
use tracelet::render::{pass_seed, render_progressive, Accumulator, RenderSettings, World};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn cornell() -> World {
    World::load(fixtures().join("cornell.json"), &ResourceManager::new()).unwrap()
}

fn small(seed: u64) -> RenderSettings {
    RenderSettings {
        dispatch: DispatchConfig { width: 32, height: 32, samples_per_pixel: 1, max_depth: 4, seed, ..DispatchConfig::default() },
        ..RenderSettings::default()
    }
}

fn coord() -> impl Strategy<Value = f32> {
    -4.0f32..4.0
}

fn vertex() -> impl Strategy<Value = [f32; 3]> {
    [coord(), coord(), coord()]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn blas_matches_linear_scan(tris in prop::collection::vec([vertex(), vertex(), vertex()], 1..40),
                                o in [coord(), coord(), coord()], d in [coord(), coord(), coord()]) {
        let dir = Vec3::new(d[0] as f64, d[1] as f64, d[2] as f64);
        prop_assume!(dir.length() > 1e-3);
        let positions: Vec<[f32; 3]> = tris.iter().flatten().copied().collect();
        let indices = (0..tris.len() as u32).map(|i| [3 * i, 3 * i + 1, 3 * i + 2]).collect();
        let mesh = Arc::new(Mesh::new(positions, indices));
        let blas = Blas::build(mesh.clone(), &BuildConfig::default()).unwrap();
        let ray = Ray::new(Vec3::new(o[0] as f64, o[1] as f64, o[2] as f64), dir);

        let mut best: Option<(f64, u32)> = None;
        for i in 0..mesh.triangle_count() {
            let [a, b, c] = mesh.triangle(i);
            if let Some((t, _, _)) = ray_triangle(&ray, a, b, c) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, i as u32));
                }
            }
        }
        let got = blas.trace(&ray).map(|(t, i, _, _)| (t, i));
        match (got, best) {
            (None, None) => {}
            (Some((t, _)), Some((bt, _))) => prop_assert!((t - bt).abs() <= 1e-9 * bt.max(1.0)),
            other => prop_assert!(false, "bvh vs scan: {:?}", other),
        }
    }

    #[test]
    fn accumulator_mean_is_arithmetic_mean(values in prop::collection::vec(0.0f32..8.0, 1..12)) {
        let mut acc = Accumulator::new(2, 1);
        for v in &values {
            let mut fb = Framebuffer::new(2, 1);
            fb.color = vec![[*v, 2.0 * v, 0.5]; 2];
            acc.add(&fb);
        }
        let expected = values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64;
        let mean = acc.mean();
        prop_assert_eq!(acc.passes(), values.len() as u32);
        prop_assert!((mean.color[1][0] as f64 - expected).abs() < 1e-5);
        prop_assert!((mean.color[0][1] as f64 - 2.0 * expected).abs() < 1e-5);
        prop_assert_eq!(mean.color[0][2], 0.5);
    }

    #[test]
    fn pass_seeds_are_distinct(seed in any::<u64>(), a in 1u32..1000, b in 1u32..1000) {
        prop_assume!(a != b);
        prop_assert_ne!(pass_seed(seed, a), pass_seed(seed, b));
    }
}

#[test]
fn accumulator_reset_forgets_passes() {
    let mut acc = Accumulator::new(1, 1);
    let mut fb = Framebuffer::new(1, 1);
    fb.color[0] = [3.0; 3];
    acc.add(&fb);
    acc.reset();
    assert_eq!(acc.passes(), 0);
    assert_eq!(acc.mean().color[0], [0.0; 3]);
}

#[test]
fn single_pass_progressive_equals_direct_render() {
    let mut world = cornell();
    let settings = small(11);
    let progressive = render_progressive(&mut world, &settings, 1, &Profiler::new()).unwrap();
    let direct = small(pass_seed(11, 1));
    assert_eq!(progressive, world.render(&direct, &Profiler::new()).unwrap());
}

#[test]
fn raw_chain_is_plain_tonemap() {
    let mut world = cornell();
    let settings = RenderSettings { post: PostChain::raw(), ..small(3) };
    let (fb, _) = world.render_hdr(&settings, &Profiler::new()).unwrap();
    assert_eq!(world.render(&settings, &Profiler::new()).unwrap(), tonemap_srgb(&fb).unwrap());
}

#[test]
fn patch_is_all_or_nothing() {
    let mut world = cornell();
    let before = world.materials().clone();
    let bad = MaterialProps { roughness: Some(0.2), transparency: Some(7.0), ..MaterialProps::default() };
    assert!(world.patch_material("wall", &bad).is_err());
    assert_eq!(world.materials(), &before);

    let good = MaterialProps { roughness: Some(0.2), ..MaterialProps::default() };
    let wall = world.patch_material("wall", &good).unwrap();
    assert_eq!(wall.roughness, 0.2);
    assert_eq!(world.materials()["red"].roughness, 0.2, "children inherit the patch");
    assert!(world.patch_material("nope", &good).is_err());
}

#[test]
fn saved_materials_reload_identically() {
    let mut world = cornell();
    world
        .patch_material("red", &MaterialProps { albedo: Some([0.5, 0.1, 0.1]), ..MaterialProps::default() })
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("saved.json");
    world.save_materials(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("extends"));
    let docs = tracelet::assets::material::parse_material_doc(&text).unwrap();
    assert_eq!(&tracelet::assets::material::resolve_materials(&docs).unwrap(), world.materials());
}

#[test]
fn missing_scene_names_the_path() {
    let Err(err) = World::load(fixtures().join("absent.json"), &ResourceManager::new()) else {
        panic!("loaded a missing scene");
    };
    assert!(err.to_string().contains("absent.json"), "{err}");
}

#[test]
fn bad_hit_group_fixture_yields_one_diagnostic() {
    let mut world = World::load(fixtures().join("bad_hitgroup.json"), &ResourceManager::new()).unwrap();
    let diags = world.validate(&DispatchConfig::default()).unwrap();
    assert_eq!(diags.len(), 1, "{diags:?}");
    assert!(diags[0].to_string().contains("/odd"));
    assert!(cornell().validate(&DispatchConfig::default()).unwrap().is_empty());
}
