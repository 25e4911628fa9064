//! Image-space passes: roughness-guided blur on HDR color, sRGB tonemapping
//! and FXAA on the display-encoded result. [`PostChain`] runs them in that
//! fixed order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{Framebuffer, Profiler};

/// Blur radius in pixels at roughness 1.
pub const ROUGHNESS_SIGMA_MAX: f64 = 4.0;

const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PostError {
    #[error("non-finite pixel at ({x}, {y})")]
    NonFinitePixel { x: u32, y: u32 },
    #[error("post pass '{got}' out of order after '{after}'")]
    OutOfOrder { after: &'static str, got: &'static str },
}

/// 8-bit display-encoded RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LdrImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<[u8; 3]>,
}

impl LdrImage {
    pub fn new(width: u32, height: u32) -> LdrImage {
        LdrImage { width, height, pixels: vec![[0; 3]; width as usize * height as usize] }
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> LdrImage {
        LdrImage { width, height, pixels: vec![rgb; width as usize * height as usize] }
    }

    #[inline]
    pub fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        self.pixels[self.index(x, y)]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = self.index(x, y);
        self.pixels[i] = rgb;
    }

    pub fn as_raw(&self) -> Vec<u8> {
        self.pixels.iter().flatten().copied().collect()
    }

    pub fn to_rgba(&self) -> Vec<u8> {
        self.pixels.iter().flat_map(|p| [p[0], p[1], p[2], 255]).collect()
    }

    /// Encodes as an 8-bit RGB PNG.
    pub fn encode_png(&self) -> Vec<u8> {
        use image::ImageEncoder;
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out)
            .write_image(&self.as_raw(), self.width, self.height, image::ExtendedColorType::Rgb8)
            .expect("in-memory PNG encoding");
        out
    }
}

#[inline]
fn luma(rgb: [f32; 3]) -> f32 {
    rgb[0] * LUMA_WEIGHTS[0] + rgb[1] * LUMA_WEIGHTS[1] + rgb[2] * LUMA_WEIGHTS[2]
}

/// Linear-light value to the sRGB transfer curve, both in [0, 1].
pub fn srgb_encode(v: f64) -> f64 {
    if v <= 0.0031308 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn tonemap_srgb(fb: &Framebuffer) -> Result<LdrImage, PostError> {
    let mut out = LdrImage::new(fb.width, fb.height);
    for (i, c) in fb.color.iter().enumerate() {
        if c.iter().any(|v| !v.is_finite()) {
            let w = fb.width as usize;
            return Err(PostError::NonFinitePixel { x: (i % w) as u32, y: (i / w) as u32 });
        }
        out.pixels[i] = c.map(|v| quantize(srgb_encode((v as f64).clamp(0.0, 1.0))));
    }
    Ok(out)
}

fn gaussian_weights(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut w: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable Gaussian on the HDR color plane with a per-pixel sigma of
/// `roughness * ROUGHNESS_SIGMA_MAX`, edge-clamped. Roughness 0 pixels are
/// copied exactly.
pub fn roughness_blur(fb: &Framebuffer) -> Framebuffer {
    let (w, h) = (fb.width as i64, fb.height as i64);
    let sigma_at = |i: usize| fb.roughness[i].clamp(0.0, 1.0) as f64 * ROUGHNESS_SIGMA_MAX;
    // kernels are shared between pixels of equal roughness
    let mut cache: std::collections::HashMap<u64, Vec<f64>> = std::collections::HashMap::new();
    let mut kernel = |sigma: f64| -> Vec<f64> { cache.entry(sigma.to_bits()).or_insert_with(|| gaussian_weights(sigma)).clone() };

    let blur_pass = |src: &[[f32; 3]], horizontal: bool, kernel: &mut dyn FnMut(f64) -> Vec<f64>| -> Vec<[f32; 3]> {
        let mut dst = src.to_vec();
        for y in 0..h {
            for x in 0..w {
                let i = (y * w + x) as usize;
                let sigma = sigma_at(i);
                if sigma <= 0.0 {
                    continue;
                }
                let weights = kernel(sigma);
                let r = (weights.len() / 2) as i64;
                let mut acc = [0.0f64; 3];
                for (k, wk) in weights.iter().enumerate() {
                    let off = k as i64 - r;
                    let j = if horizontal {
                        (y * w + (x + off).clamp(0, w - 1)) as usize
                    } else {
                        ((y + off).clamp(0, h - 1) * w + x) as usize
                    };
                    for c in 0..3 {
                        acc[c] += wk * src[j][c] as f64;
                    }
                }
                dst[i] = acc.map(|v| v as f32);
            }
        }
        dst
    };

    let horiz = blur_pass(&fb.color, true, &mut kernel);
    let vert = blur_pass(&horiz, false, &mut kernel);
    Framebuffer { color: vert, ..fb.clone() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FxaaParams {
    pub contrast_threshold: f32,
    pub relative_threshold: f32,
    pub subpixel_blend: f32,
}

impl Default for FxaaParams {
    fn default() -> Self {
        FxaaParams { contrast_threshold: 0.0312, relative_threshold: 0.125, subpixel_blend: 0.75 }
    }
}

/// Edge-search step lengths, in pixels.
const FXAA_STEPS: [f32; 12] = [1.0, 1.0, 1.0, 1.0, 1.0, 1.5, 2.0, 2.0, 2.0, 2.0, 4.0, 8.0];

struct FloatImage {
    w: i64,
    h: i64,
    rgb: Vec<[f32; 3]>,
    luma: Vec<f32>,
}

impl FloatImage {
    fn from_ldr(img: &LdrImage) -> FloatImage {
        let rgb: Vec<[f32; 3]> = img.pixels.iter().map(|p| p.map(|v| v as f32 / 255.0)).collect();
        let luma = rgb.iter().map(|&c| luma(c)).collect();
        FloatImage { w: img.width as i64, h: img.height as i64, rgb, luma }
    }

    #[inline]
    fn at(&self, x: i64, y: i64) -> usize {
        (y.clamp(0, self.h - 1) * self.w + x.clamp(0, self.w - 1)) as usize
    }

    #[inline]
    fn l(&self, x: i64, y: i64) -> f32 {
        self.luma[self.at(x, y)]
    }

    /// Bilinear sample at continuous coordinates where pixel centers sit at
    /// integer + 0.5.
    fn sample<const N: usize>(&self, px: f32, py: f32, get: impl Fn(usize) -> [f32; N]) -> [f32; N] {
        let fx = px - 0.5;
        let fy = py - 0.5;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let tx = fx - x0;
        let ty = fy - y0;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let c00 = get(self.at(x0, y0));
        let c10 = get(self.at(x0 + 1, y0));
        let c01 = get(self.at(x0, y0 + 1));
        let c11 = get(self.at(x0 + 1, y0 + 1));
        let mut out = [0.0; N];
        for k in 0..N {
            let top = c00[k] + (c10[k] - c00[k]) * tx;
            let bottom = c01[k] + (c11[k] - c01[k]) * tx;
            out[k] = top + (bottom - top) * ty;
        }
        out
    }

    fn sample_luma(&self, px: f32, py: f32) -> f32 {
        self.sample(px, py, |i| [self.luma[i]])[0]
    }

    fn sample_rgb(&self, px: f32, py: f32) -> [f32; 3] {
        self.sample(px, py, |i| self.rgb[i])
    }
}

/// Luma-based edge smoothing on a display-encoded image.
pub fn fxaa(image: &LdrImage, params: &FxaaParams) -> LdrImage {
    let src = FloatImage::from_ldr(image);
    let mut out = image.clone();
    for y in 0..src.h {
        for x in 0..src.w {
            if let Some(rgb) = fxaa_pixel(&src, x, y, params) {
                out.pixels[(y * src.w + x) as usize] = rgb.map(|v| quantize(v as f64));
            }
        }
    }
    out
}

fn fxaa_pixel(img: &FloatImage, x: i64, y: i64, p: &FxaaParams) -> Option<[f32; 3]> {
    let m = img.l(x, y);
    let n = img.l(x, y - 1);
    let s = img.l(x, y + 1);
    let e = img.l(x + 1, y);
    let w = img.l(x - 1, y);
    let nw = img.l(x - 1, y - 1);
    let ne = img.l(x + 1, y - 1);
    let sw = img.l(x - 1, y + 1);
    let se = img.l(x + 1, y + 1);

    let all = [m, n, s, e, w, nw, ne, sw, se];
    let max = all.iter().copied().fold(f32::MIN, f32::max);
    let min = all.iter().copied().fold(f32::MAX, f32::min);
    let range = max - min;
    if range < p.contrast_threshold.max(p.relative_threshold * max) {
        return None;
    }

    // subpixel aliasing estimate from the low-pass neighbourhood
    let low = (2.0 * (n + s + e + w) + (nw + ne + sw + se)) / 12.0;
    let sub_a = ((low - m).abs() / range).clamp(0.0, 1.0);
    let sub_b = (-2.0 * sub_a + 3.0) * sub_a * sub_a;
    let sub_h = sub_b * sub_b * p.subpixel_blend;

    // a horizontal edge varies along y
    let edge_horz = 2.0 * (n + s - 2.0 * m).abs() + (ne + se - 2.0 * e).abs() + (nw + sw - 2.0 * w).abs();
    let edge_vert = 2.0 * (w + e - 2.0 * m).abs() + (nw + ne - 2.0 * n).abs() + (sw + se - 2.0 * s).abs();
    let horizontal = edge_horz >= edge_vert;

    let (luma_neg, luma_pos) = if horizontal { (n, s) } else { (w, e) };
    let grad_neg = (luma_neg - m).abs();
    let grad_pos = (luma_pos - m).abs();
    let toward_neg = grad_neg >= grad_pos;
    let step_sign: f32 = if toward_neg { -1.0 } else { 1.0 };
    let side = if toward_neg { luma_neg } else { luma_pos };
    let gradient_scaled = grad_neg.max(grad_pos) * 0.25;
    let luma_edge = (m + side) * 0.5;

    // start on the edge between this pixel and the chosen neighbour
    let (cx, cy) = (x as f32 + 0.5, y as f32 + 0.5);
    let (start_x, start_y) = if horizontal { (cx, cy + 0.5 * step_sign) } else { (cx + 0.5 * step_sign, cy) };
    let (dx, dy) = if horizontal { (1.0f32, 0.0f32) } else { (0.0, 1.0) };

    let mut dist_neg = 0.0f32;
    let mut dist_pos = 0.0f32;
    let mut end_neg = 0.0f32;
    let mut end_pos = 0.0f32;
    let mut done_neg = false;
    let mut done_pos = false;
    for &step in FXAA_STEPS.iter() {
        if !done_neg {
            dist_neg += step;
            end_neg = img.sample_luma(start_x - dx * dist_neg, start_y - dy * dist_neg) - luma_edge;
            done_neg = end_neg.abs() >= gradient_scaled;
        }
        if !done_pos {
            dist_pos += step;
            end_pos = img.sample_luma(start_x + dx * dist_pos, start_y + dy * dist_pos) - luma_edge;
            done_pos = end_pos.abs() >= gradient_scaled;
        }
        if done_neg && done_pos {
            break;
        }
    }

    let span = dist_neg + dist_pos;
    let nearer_neg = dist_neg < dist_pos;
    let dist = dist_neg.min(dist_pos);
    let end = if nearer_neg { end_neg } else { end_pos };
    let good_span = (end < 0.0) != (m - luma_edge < 0.0);
    let edge_offset = if good_span { 0.5 - dist / span } else { 0.0 };
    let offset = edge_offset.max(sub_h);

    let (sx, sy) = if horizontal { (cx, cy + offset * step_sign) } else { (cx + offset * step_sign, cy) };
    Some(img.sample_rgb(sx, sy))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PostChain {
    pub roughness_blur: bool,
    pub fxaa: Option<FxaaParams>,
}

impl Default for PostChain {
    fn default() -> Self {
        PostChain { roughness_blur: true, fxaa: Some(FxaaParams::default()) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Stage {
    Start,
    Blur,
    Tonemap,
    Fxaa,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Start => "start",
            Stage::Blur => "roughness_blur",
            Stage::Tonemap => "tonemap",
            Stage::Fxaa => "fxaa",
        }
    }
}

struct OrderGuard(Stage);

impl OrderGuard {
    fn enter(&mut self, next: Stage) -> Result<(), PostError> {
        if next <= self.0 {
            return Err(PostError::OutOfOrder { after: self.0.name(), got: next.name() });
        }
        self.0 = next;
        Ok(())
    }
}

impl PostChain {
    pub fn raw() -> PostChain {
        PostChain { roughness_blur: false, fxaa: None }
    }

    /// roughness_blur (HDR) → tonemap_srgb → fxaa, each recorded by name.
    pub fn apply(&self, fb: &Framebuffer, profiler: &Profiler) -> Result<LdrImage, PostError> {
        let pixels = fb.color.len() as u64;
        let mut order = OrderGuard(Stage::Start);
        let blurred;
        let mut hdr = fb;
        if self.roughness_blur {
            order.enter(Stage::Blur)?;
            blurred = profiler.time("roughness_blur", pixels, || roughness_blur(fb));
            hdr = &blurred;
        }
        order.enter(Stage::Tonemap)?;
        let mut ldr = profiler.time("tonemap", pixels, || tonemap_srgb(hdr))?;
        if let Some(params) = &self.fxaa {
            order.enter(Stage::Fxaa)?;
            ldr = profiler.time("fxaa", pixels, || fxaa(&ldr, params));
        }
        Ok(ldr)
    }
}
