//! Native scene JSON.
//!
//! ```json
//! {
//!   "camera": {"position": [0, 1, 4], "look_at": [0, 1, 0], "fov_degrees": 45},
//!   "background": [0.1, 0.1, 0.1],
//!   "lights": [{"position": [0, 1.9, 0], "intensity": [4, 4, 4], "radius": 0.1}],
//!   "materials": "materials.json",
//!   "nodes": [
//!     {"name": "floor", "mesh": "primitive:quad", "material": "white",
//!      "rotate": [1, 0, 0, -90], "scale": 2},
//!     {"name": "model", "mesh": "models/teapot.dae#body", "transform": [1,0,0,0, 0,1,0,0, 0,0,1,0, 0,0,0,1]}
//!   ]
//! }
//! ```
//!
//! A node's local transform is either `transform` (16 row-major values) or
//! the composition translate · rotate · scale of the optional shorthand
//! fields. Serialization always writes `transform`.

use serde::{Deserialize, Serialize};

use super::collada::{AssetNode, SceneAsset};
use super::AssetError;
use crate::geometry::{Transform, Vec3};
use crate::shading::{Camera, PointLight, Rgb};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraDef {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    #[serde(default = "default_up")]
    pub up: [f64; 3],
    pub fov_degrees: f64,
}

fn default_up() -> [f64; 3] {
    [0.0, 1.0, 0.0]
}

impl From<&CameraDef> for Camera {
    fn from(c: &CameraDef) -> Camera {
        Camera {
            position: Vec3::from(c.position),
            look_at: Vec3::from(c.look_at),
            up: Vec3::from(c.up),
            fov_degrees: c.fov_degrees,
        }
    }
}

impl Default for CameraDef {
    fn default() -> Self {
        CameraDef { position: [0.0, 0.0, 5.0], look_at: [0.0; 3], up: default_up(), fov_degrees: 45.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LightDef {
    pub position: [f64; 3],
    pub intensity: Rgb,
    #[serde(default)]
    pub radius: f64,
}

impl From<&LightDef> for PointLight {
    fn from(l: &LightDef) -> PointLight {
        PointLight { position: Vec3::from(l.position), intensity: l.intensity, radius: l.radius }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScaleDef {
    Uniform(f64),
    Axes([f64; 3]),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDef {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<[f64; 16]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translate: Option<[f64; 3]>,
    /// Axis x, y, z and angle in degrees.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotate: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<ScaleDef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub material: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub ui: bool,
    /// Explicit hit-group index, overriding the one implied by the material.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hit_group: Option<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<NodeDef>,
}

impl NodeDef {
    pub fn local_transform(&self) -> Transform {
        if let Some(m) = &self.transform {
            return Transform::from_row_major(m);
        }
        let mut t = Transform::IDENTITY;
        if let Some([x, y, z]) = self.translate {
            t = t.compose(&Transform::translate(Vec3::new(x, y, z)));
        }
        if let Some([x, y, z, deg]) = self.rotate {
            t = t.compose(&Transform::rotate(Vec3::new(x, y, z), deg));
        }
        match self.scale {
            Some(ScaleDef::Uniform(s)) => t = t.compose(&Transform::scale(Vec3::splat(s))),
            Some(ScaleDef::Axes([x, y, z])) => t = t.compose(&Transform::scale(Vec3::new(x, y, z))),
            None => {}
        }
        t
    }

    pub fn set_transform(&mut self, t: &Transform) {
        self.transform = Some(t.to_row_major());
        self.translate = None;
        self.rotate = None;
        self.scale = None;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    #[serde(default)]
    pub camera: CameraDef,
    #[serde(default)]
    pub background: Rgb,
    #[serde(default)]
    pub lights: Vec<LightDef>,
    /// Material document path, relative to the scene file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub materials: Option<String>,
    #[serde(default)]
    pub nodes: Vec<NodeDef>,
}

impl SceneFile {
    pub fn parse(text: &str) -> Result<SceneFile, AssetError> {
        serde_json::from_str(text).map_err(|e| AssetError::Parse {
            what: "scene JSON",
            line: Some(e.line()),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene files serialize")
    }
}

/// Converts an imported COLLADA node tree to scene nodes whose meshes
/// reference `<source>#<geometry id>`.
pub fn nodes_from_asset(asset: &SceneAsset, source: &str) -> Vec<NodeDef> {
    fn convert(n: &AssetNode, source: &str) -> NodeDef {
        let mut def = NodeDef {
            name: n.name.clone(),
            mesh: n.mesh.as_ref().map(|m| format!("{source}#{m}")),
            material: n.material.clone(),
            children: n.children.iter().map(|c| convert(c, source)).collect(),
            ..NodeDef::default()
        };
        def.set_transform(&n.transform);
        def
    }
    asset.nodes.iter().map(|n| convert(n, source)).collect()
}
