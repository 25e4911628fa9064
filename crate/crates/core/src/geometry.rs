//! Math kernel: vectors, affine transforms, rays, boxes, intersection
//! primitives and the optical direction functions used by shading.
//!
//! All internal math is double precision. Meshes store single precision
//! positions and widen on load.

use std::ops::{Add, AddAssign, Div, Index, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Determinant threshold below which a ray is treated as parallel to a
/// triangle's plane.
pub const TRIANGLE_DET_EPSILON: f64 = 1e-9;

/// Barycentric slack accepted on triangle edges.
pub const BARYCENTRIC_SLACK: f64 = 1e-9;

/// Transforms with |det| at or below this are singular.
pub const SINGULAR_DET_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("transform is singular (determinant {0:e})")]
    SingularTransform(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const ONE: Vec3 = Vec3::new(1.0, 1.0, 1.0);
    pub const X: Vec3 = Vec3::new(1.0, 0.0, 0.0);
    pub const Y: Vec3 = Vec3::new(0.0, 1.0, 0.0);
    pub const Z: Vec3 = Vec3::new(0.0, 0.0, 1.0);

    #[inline]
    pub const fn new(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3 { x, y, z }
    }

    #[inline]
    pub const fn splat(v: f64) -> Vec3 {
        Vec3::new(v, v, v)
    }

    #[inline]
    pub fn from_f32(v: [f32; 3]) -> Vec3 {
        Vec3::new(v[0] as f64, v[1] as f64, v[2] as f64)
    }

    #[inline]
    pub fn to_f32(self) -> [f32; 3] {
        [self.x as f32, self.y as f32, self.z as f32]
    }

    #[inline]
    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    #[inline]
    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    #[inline]
    pub fn length_squared(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn length(self) -> f64 {
        self.length_squared().sqrt()
    }

    /// Unit vector in the same direction. Zero vectors come back unchanged.
    #[inline]
    pub fn normalize(self) -> Vec3 {
        let len = self.length();
        if len > 0.0 {
            self / len
        } else {
            self
        }
    }

    #[inline]
    pub fn mul_elem(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x * o.x, self.y * o.y, self.z * o.z)
    }

    #[inline]
    pub fn min(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    #[inline]
    pub fn max(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn max_component(self) -> f64 {
        self.x.max(self.y).max(self.z)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;

    #[inline]
    fn index(&self, axis: usize) -> &f64 {
        match axis {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("axis {axis} out of range"),
        }
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    #[inline]
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    #[inline]
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Vec3 {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> [f64; 3] {
        [v.x, v.y, v.z]
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    #[inline]
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    #[inline]
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    #[inline]
    fn mul(self, v: Vec3) -> Vec3 {
        v * self
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

/// Affine 4×4 matrix stored row-major. Points are column vectors, so
/// `a.compose(b)` applies `b` first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub m: [[f64; 4]; 4],
}

impl Default for Transform {
    fn default() -> Self {
        Transform::IDENTITY
    }
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        m: [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ],
    };

    /// Builds from 16 row-major values. The bottom row is forced to
    /// (0, 0, 0, 1).
    pub fn from_row_major(v: &[f64; 16]) -> Transform {
        let mut m = [[0.0; 4]; 4];
        for (r, row) in m.iter_mut().enumerate().take(3) {
            row.copy_from_slice(&v[r * 4..r * 4 + 4]);
        }
        m[3] = [0.0, 0.0, 0.0, 1.0];
        Transform { m }
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            out[r * 4..r * 4 + 4].copy_from_slice(&self.m[r]);
        }
        out
    }

    pub fn translate(t: Vec3) -> Transform {
        let mut out = Transform::IDENTITY;
        out.m[0][3] = t.x;
        out.m[1][3] = t.y;
        out.m[2][3] = t.z;
        out
    }

    pub fn scale(s: Vec3) -> Transform {
        let mut out = Transform::IDENTITY;
        out.m[0][0] = s.x;
        out.m[1][1] = s.y;
        out.m[2][2] = s.z;
        out
    }

    /// Right-handed rotation of `degrees` about `axis` (need not be unit).
    pub fn rotate(axis: Vec3, degrees: f64) -> Transform {
        let a = axis.normalize();
        let (s, c) = degrees.to_radians().sin_cos();
        let t = 1.0 - c;
        let mut out = Transform::IDENTITY;
        out.m[0][0] = t * a.x * a.x + c;
        out.m[0][1] = t * a.x * a.y - s * a.z;
        out.m[0][2] = t * a.x * a.z + s * a.y;
        out.m[1][0] = t * a.x * a.y + s * a.z;
        out.m[1][1] = t * a.y * a.y + c;
        out.m[1][2] = t * a.y * a.z - s * a.x;
        out.m[2][0] = t * a.x * a.z - s * a.y;
        out.m[2][1] = t * a.y * a.z + s * a.x;
        out.m[2][2] = t * a.z * a.z + c;
        out
    }

    /// `self · child`: the child is applied first, then `self`.
    pub fn compose(&self, child: &Transform) -> Transform {
        let mut out = [[0.0; 4]; 4];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, cell) in row.iter_mut().enumerate() {
                *cell = (0..4).map(|k| self.m[r][k] * child.m[k][c]).sum();
            }
        }
        Transform { m: out }
    }

    #[inline]
    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        let m = &self.m;
        Vec3::new(
            m[0][0] * p.x + m[0][1] * p.y + m[0][2] * p.z + m[0][3],
            m[1][0] * p.x + m[1][1] * p.y + m[1][2] * p.z + m[1][3],
            m[2][0] * p.x + m[2][1] * p.y + m[2][2] * p.z + m[2][3],
        )
    }

    /// Applies the linear part only.
    #[inline]
    pub fn apply_dir(&self, d: Vec3) -> Vec3 {
        let m = &self.m;
        Vec3::new(
            m[0][0] * d.x + m[0][1] * d.y + m[0][2] * d.z,
            m[1][0] * d.x + m[1][1] * d.y + m[1][2] * d.z,
            m[2][0] * d.x + m[2][1] * d.y + m[2][2] * d.z,
        )
    }

    /// Applies the transpose of the linear part. Called on an inverse
    /// transform this maps object normals to world normals.
    #[inline]
    pub fn apply_dir_transposed(&self, d: Vec3) -> Vec3 {
        let m = &self.m;
        Vec3::new(
            m[0][0] * d.x + m[1][0] * d.y + m[2][0] * d.z,
            m[0][1] * d.x + m[1][1] * d.y + m[2][1] * d.z,
            m[0][2] * d.x + m[1][2] * d.y + m[2][2] * d.z,
        )
    }

    /// Determinant of the upper-left 3×3 block (equal to the full
    /// determinant for affine matrices).
    pub fn determinant(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn is_invertible(&self) -> bool {
        self.determinant().abs() > SINGULAR_DET_EPSILON
    }

    pub fn invert(&self) -> Result<Transform, GeometryError> {
        let det = self.determinant();
        if !(det.abs() > SINGULAR_DET_EPSILON) {
            return Err(GeometryError::SingularTransform(det));
        }
        let m = &self.m;
        let inv_det = 1.0 / det;
        let mut r = [[0.0; 4]; 4];
        r[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_det;
        r[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_det;
        r[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_det;
        r[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_det;
        r[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_det;
        r[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_det;
        r[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv_det;
        r[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_det;
        r[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_det;
        // translation: -R⁻¹·t
        for i in 0..3 {
            r[i][3] = -(r[i][0] * m[0][3] + r[i][1] * m[1][3] + r[i][2] * m[2][3]);
        }
        r[3] = [0.0, 0.0, 0.0, 1.0];
        Ok(Transform { m: r })
    }

    pub fn max_abs_diff(&self, other: &Transform) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..4 {
            for c in 0..4 {
                worst = worst.max((self.m[r][c] - other.m[r][c]).abs());
            }
        }
        worst
    }
}

/// Default ray visibility mask: every instance group.
pub const RAY_MASK_ALL: u8 = 0xFF;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_min: f64,
    pub t_max: f64,
    /// ANDed with each instance mask; zero results are skipped.
    pub mask: u8,
}

impl Ray {
    /// Normalizes `direction`; the interval is `[0, ∞)`.
    pub fn new(origin: Vec3, direction: Vec3) -> Ray {
        Ray {
            origin,
            direction: direction.normalize(),
            t_min: 0.0,
            t_max: f64::INFINITY,
            mask: RAY_MASK_ALL,
        }
    }

    pub fn with_interval(mut self, t_min: f64, t_max: f64) -> Ray {
        self.t_min = t_min;
        self.t_max = t_max;
        self
    }

    pub fn with_mask(mut self, mask: u8) -> Ray {
        self.mask = mask;
        self
    }

    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    pub fn is_valid(&self) -> bool {
        self.origin.is_finite()
            && (self.direction.length() - 1.0).abs() <= 1e-6
            && self.t_min >= 0.0
            && self.t_min < self.t_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Default for Aabb {
    fn default() -> Self {
        Aabb::EMPTY
    }
}

impl Aabb {
    pub const EMPTY: Aabb = Aabb {
        min: Vec3::splat(f64::INFINITY),
        max: Vec3::splat(f64::NEG_INFINITY),
    };

    pub fn new(min: Vec3, max: Vec3) -> Aabb {
        Aabb { min, max }
    }

    pub fn from_points<I: IntoIterator<Item = Vec3>>(points: I) -> Aabb {
        points.into_iter().fold(Aabb::EMPTY, |b, p| b.grow(p))
    }

    pub fn is_empty(&self) -> bool {
        self.min.x > self.max.x || self.min.y > self.max.y || self.min.z > self.max.z
    }

    #[inline]
    pub fn grow(&self, p: Vec3) -> Aabb {
        Aabb::new(self.min.min(p), self.max.max(p))
    }

    #[inline]
    pub fn union(&self, o: &Aabb) -> Aabb {
        Aabb::new(self.min.min(o.min), self.max.max(o.max))
    }

    pub fn extent(&self) -> Vec3 {
        if self.is_empty() {
            Vec3::ZERO
        } else {
            self.max - self.min
        }
    }

    pub fn centroid(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn surface_area(&self) -> f64 {
        let e = self.extent();
        2.0 * (e.x * e.y + e.y * e.z + e.z * e.x)
    }

    pub fn contains_point(&self, p: Vec3) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }

    /// True if `o` lies inside this box. Empty boxes are contained by all.
    pub fn contains_box(&self, o: &Aabb) -> bool {
        o.is_empty() || (self.contains_point(o.min) && self.contains_point(o.max))
    }

    /// Box around the eight transformed corners.
    pub fn transformed(&self, t: &Transform) -> Aabb {
        if self.is_empty() {
            return Aabb::EMPTY;
        }
        let mut out = Aabb::EMPTY;
        for i in 0..8 {
            let corner = Vec3::new(
                if i & 1 == 0 { self.min.x } else { self.max.x },
                if i & 2 == 0 { self.min.y } else { self.max.y },
                if i & 4 == 0 { self.min.z } else { self.max.z },
            );
            out = out.grow(t.apply_point(corner));
        }
        out
    }
}

/// Möller–Trumbore on a possibly non-unit direction. Used directly by
/// object-space traversal where the transformed direction keeps world `t`.
#[inline]
pub fn intersect_triangle(
    origin: Vec3,
    direction: Vec3,
    t_min: f64,
    t_max: f64,
    v0: Vec3,
    v1: Vec3,
    v2: Vec3,
) -> Option<(f64, f64, f64)> {
    let e1 = v1 - v0;
    let e2 = v2 - v0;
    let p = direction.cross(e2);
    let det = e1.dot(p);
    if det.abs() < TRIANGLE_DET_EPSILON {
        return None;
    }
    let inv_det = 1.0 / det;
    let s = origin - v0;
    let u = s.dot(p) * inv_det;
    if u < -BARYCENTRIC_SLACK || u > 1.0 + BARYCENTRIC_SLACK {
        return None;
    }
    let q = s.cross(e1);
    let v = direction.dot(q) * inv_det;
    if v < -BARYCENTRIC_SLACK || u + v > 1.0 + BARYCENTRIC_SLACK {
        return None;
    }
    let t = e2.dot(q) * inv_det;
    if t < t_min || t > t_max {
        return None;
    }
    Some((t, u, v))
}

pub fn ray_triangle(ray: &Ray, v0: Vec3, v1: Vec3, v2: Vec3) -> Option<(f64, f64, f64)> {
    intersect_triangle(ray.origin, ray.direction, ray.t_min, ray.t_max, v0, v1, v2)
}

/// Slab test on raw origin / direction. Returns the parametric interval
/// clipped to `[t_min, t_max]`.
#[inline]
pub fn intersect_aabb(
    origin: Vec3,
    direction: Vec3,
    t_min: f64,
    t_max: f64,
    b: &Aabb,
) -> Option<(f64, f64)> {
    let mut enter = t_min;
    let mut exit = t_max;
    for axis in 0..3 {
        let o = origin[axis];
        let d = direction[axis];
        let (lo, hi) = (b.min[axis], b.max[axis]);
        if d == 0.0 {
            if o < lo || o > hi {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d;
        let mut t0 = (lo - o) * inv;
        let mut t1 = (hi - o) * inv;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        enter = enter.max(t0);
        exit = exit.min(t1);
        if enter > exit {
            return None;
        }
    }
    Some((enter, exit))
}

pub fn ray_aabb(ray: &Ray, b: &Aabb) -> Option<(f64, f64)> {
    if b.is_empty() {
        return None;
    }
    intersect_aabb(ray.origin, ray.direction, ray.t_min, ray.t_max, b)
}

/// Mirror `d` about the plane with normal `n`.
#[inline]
pub fn reflect(d: Vec3, n: Vec3) -> Vec3 {
    d - n * (2.0 * d.dot(n))
}

/// Snell refraction of `d` through a surface with normal `n` facing the
/// incident side. `eta_ratio` is n_incident / n_transmitted. `None` on total
/// internal reflection.
pub fn refract(d: Vec3, n: Vec3, eta_ratio: f64) -> Option<Vec3> {
    let cos_i = -d.dot(n);
    let sin2_t = eta_ratio * eta_ratio * (1.0 - cos_i * cos_i).max(0.0);
    let k = 1.0 - sin2_t;
    if k < 0.0 {
        return None;
    }
    let t = d * eta_ratio + n * (eta_ratio * cos_i - k.sqrt());
    Some(t.normalize())
}

/// Schlick's Fresnel approximation, clamped to [0, 1].
pub fn schlick(cos_i: f64, f0: f64) -> f64 {
    let m = (1.0 - cos_i).clamp(0.0, 1.0);
    (f0 + (1.0 - f0) * m.powi(5)).clamp(0.0, 1.0)
}

/// Normal-incidence reflectance of an interface with air.
pub fn f0_from_ior(ior: f64) -> f64 {
    let r = (1.0 - ior) / (1.0 + ior);
    r * r
}
