//! Deterministic CPU ray-tracing engine.

pub mod accel;
pub mod assets;
pub mod geometry;
pub mod pipeline;
pub mod postfx;
pub mod render;
pub mod shading;
pub mod scene;
pub mod uigen;
