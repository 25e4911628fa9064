//! Asset loading: JSON material documents with single-parent inheritance, a
//! COLLADA subset, the native scene JSON format and a caching resource
//! manager with poll-based hot reload.

use std::path::PathBuf;

use thiserror::Error;

use crate::accel::AccelError;

pub mod collada;
pub mod material;
pub mod primitives;
pub mod resources;
pub mod scene_file;

pub use collada::{parse_collada, AssetNode, SceneAsset};
pub use material::{parse_material_doc, resolve_materials, MaterialDoc, MaterialProps, MaterialMap};
pub use resources::{ReloadReport, Resource, ResourceKey, ResourceKind, ResourceManager};
pub use scene_file::{CameraDef, LightDef, NodeDef, SceneFile};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssetError {
    #[error("{what} parse error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse { what: &'static str, line: Option<usize>, message: String },
    #[error("duplicate definition of {0:?}")]
    DuplicateDefinition(String),
    #[error("material {material:?}: {field} = {value} is out of range")]
    Range { material: String, field: &'static str, value: String },
    #[error("material {material:?} extends unknown parent {parent:?}")]
    UnknownParent { material: String, parent: String },
    #[error("inheritance cycle: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
    #[error("material {material:?}: {message}")]
    Constraint { material: String, message: String },
    #[error("unsupported feature: <{0}>")]
    Unsupported(String),
    #[error("unknown reference {0:?}")]
    UnknownReference(String),
    #[error("not found: {}", .0.display())]
    NotFound(PathBuf),
    #[error("io error on {}: {message}", path.display())]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Mesh(#[from] AccelError),
}
