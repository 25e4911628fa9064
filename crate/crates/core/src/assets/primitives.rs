//! Built-in meshes referenced from scene files as `primitive:<name>`.

use std::f64::consts::PI;

use super::AssetError;
use crate::accel::Mesh;

pub const PREFIX: &str = "primitive:";

/// Square in the z = 0 plane spanning [-1, 1]², facing +z.
pub fn quad() -> Mesh {
    Mesh::new(
        vec![[-1.0, -1.0, 0.0], [1.0, -1.0, 0.0], [1.0, 1.0, 0.0], [-1.0, 1.0, 0.0]],
        vec![[0, 1, 2], [0, 2, 3]],
    )
}

/// Axis-aligned box with outward faces and flat normals.
pub fn box_mesh(min: [f32; 3], max: [f32; 3]) -> Mesh {
    let mut positions = Vec::with_capacity(24);
    let mut normals = Vec::with_capacity(24);
    let mut indices = Vec::with_capacity(12);
    for axis in 0..3 {
        for side in [0usize, 1] {
            let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
            let mut n = [0.0f32; 3];
            n[axis] = if side == 1 { 1.0 } else { -1.0 };
            let base = positions.len() as u32;
            for (a, b) in [(0, 0), (1, 0), (1, 1), (0, 1)] {
                let mut p = [0.0f32; 3];
                p[axis] = if side == 1 { max[axis] } else { min[axis] };
                p[u] = if a == 1 { max[u] } else { min[u] };
                p[v] = if b == 1 { max[v] } else { min[v] };
                positions.push(p);
                normals.push(n);
            }
            // (u, v, axis) is right-handed, so this winding faces +axis
            if side == 1 {
                indices.push([base, base + 1, base + 2]);
                indices.push([base, base + 2, base + 3]);
            } else {
                indices.push([base, base + 2, base + 1]);
                indices.push([base, base + 3, base + 2]);
            }
        }
    }
    Mesh::new(positions, indices).with_normals(normals)
}

pub fn cube() -> Mesh {
    box_mesh([-1.0; 3], [1.0; 3])
}

/// Unit sphere tessellated into `segments` longitudes and `rings` latitudes.
pub fn uv_sphere(segments: u32, rings: u32) -> Mesh {
    let mut positions = Vec::new();
    for r in 0..=rings {
        let theta = PI * r as f64 / rings as f64;
        for s in 0..=segments {
            let phi = 2.0 * PI * s as f64 / segments as f64;
            let p = [theta.sin() * phi.cos(), theta.cos(), -theta.sin() * phi.sin()];
            positions.push(p.map(|c| c as f32));
        }
    }
    let row = segments + 1;
    let mut indices = Vec::new();
    for r in 0..rings {
        for s in 0..segments {
            let a = r * row + s;
            let b = a + row;
            if r > 0 {
                indices.push([a, b, a + 1]);
            }
            if r + 1 < rings {
                indices.push([a + 1, b, b + 1]);
            }
        }
    }
    let normals = positions.clone();
    Mesh::new(positions, indices).with_normals(normals)
}

pub fn sphere() -> Mesh {
    uv_sphere(32, 16)
}

/// Resolves `primitive:<name>` references: `quad`, `cube`, `sphere`, or
/// `sphere:<segments>x<rings>`.
pub fn by_name(name: &str) -> Result<Mesh, AssetError> {
    match name {
        "quad" => Ok(quad()),
        "cube" => Ok(cube()),
        "sphere" => Ok(sphere()),
        other => other
            .strip_prefix("sphere:")
            .and_then(|dims| dims.split_once('x'))
            .and_then(|(s, r)| Some((s.parse::<u32>().ok()?, r.parse::<u32>().ok()?)))
            .filter(|&(s, r)| (3..=1024).contains(&s) && (2..=1024).contains(&r))
            .map(|(s, r)| uv_sphere(s, r))
            .ok_or_else(|| AssetError::UnknownReference(format!("{PREFIX}{other}"))),
    }
}
