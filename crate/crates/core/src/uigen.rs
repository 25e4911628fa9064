//! UI widgets as ray-traced scene geometry.
//!
//! Widgets stack vertically in UI units: widget k's top edge sits at
//! y = -Σ_{j<k}(height_j + spacing), spanning x ∈ [0, width] with the front
//! face at z = 0 facing +z. Buttons are boxes of depth `layout.depth` with
//! text in front; sliders are a track quad plus a knob quad; labels are text
//! only. Text uses a built-in 16-segment vector font (flat quads, ASCII
//! 32–126, lowercase drawn as uppercase, other characters as `?`).

use std::collections::HashSet;

use thiserror::Error;

use crate::accel::{Mesh, Tlas, MASK_UI};
use crate::assets::material::MaterialMap;
use crate::assets::primitives::box_mesh;
use crate::geometry::{Ray, Transform, Vec3};
use crate::scene::{Collected, Entity, EntityId, MeshId, Scene, SceneError};
use crate::shading::ResolvedMaterial;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UiError {
    #[error("duplicate widget id {0:?}")]
    DuplicateId(String),
    #[error("unknown widget {0:?}")]
    UnknownWidget(String),
    #[error("invalid widget {id:?}: {message}")]
    InvalidSpec { id: String, message: String },
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum WidgetKind {
    Label,
    Button,
    Slider { min: f64, max: f64, value: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WidgetSpec {
    pub id: String,
    pub text: String,
    pub kind: WidgetKind,
}

impl WidgetSpec {
    pub fn label(id: &str, text: &str) -> WidgetSpec {
        WidgetSpec { id: id.into(), text: text.into(), kind: WidgetKind::Label }
    }

    pub fn button(id: &str, text: &str) -> WidgetSpec {
        WidgetSpec { id: id.into(), text: text.into(), kind: WidgetKind::Button }
    }

    pub fn slider(id: &str, text: &str, min: f64, max: f64, value: f64) -> WidgetSpec {
        WidgetSpec { id: id.into(), text: text.into(), kind: WidgetKind::Slider { min, max, value } }
    }

    fn validate(&self) -> Result<(), UiError> {
        if let WidgetKind::Slider { min, max, value } = self.kind {
            if !(min < max) || !(min..=max).contains(&value) {
                return Err(UiError::InvalidSpec {
                    id: self.id.clone(),
                    message: format!("slider needs min < max and value in range, got {min}, {max}, {value}"),
                });
            }
        }
        if self.id.is_empty() || self.id.contains('/') {
            return Err(UiError::InvalidSpec { id: self.id.clone(), message: "ids must be non-empty without '/'".into() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UiLayout {
    pub width: f64,
    pub button_height: f64,
    pub slider_height: f64,
    pub label_height: f64,
    pub spacing: f64,
    pub depth: f64,
}

impl Default for UiLayout {
    fn default() -> Self {
        UiLayout { width: 4.0, button_height: 0.5, slider_height: 0.3, label_height: 0.4, spacing: 0.1, depth: 0.05 }
    }
}

impl UiLayout {
    pub fn height_of(&self, kind: &WidgetKind) -> f64 {
        match kind {
            WidgetKind::Label => self.label_height,
            WidgetKind::Button => self.button_height,
            WidgetKind::Slider { .. } => self.slider_height,
        }
    }

    /// Horizontal inset of the slider track from the widget's left edge.
    pub fn track_start(&self) -> f64 {
        0.1 * self.slider_height
    }

    pub fn track_length(&self) -> f64 {
        self.width - 2.0 * self.track_start()
    }
}

pub const MAT_BUTTON: &str = "ui.button";
pub const MAT_TEXT: &str = "ui.text";
pub const MAT_TRACK: &str = "ui.track";
pub const MAT_KNOB: &str = "ui.knob";

/// Default materials for UI geometry. Emissive, so widgets read without
/// lights.
pub fn ui_materials() -> MaterialMap {
    let m = |name: &str, albedo: [f64; 3], emission: [f64; 3]| {
        (name.to_string(), ResolvedMaterial { name: name.into(), albedo, emission, ..ResolvedMaterial::default() })
    };
    [
        m(MAT_BUTTON, [0.1, 0.1, 0.1], [0.15, 0.18, 0.25]),
        m(MAT_TEXT, [0.0, 0.0, 0.0], [0.95, 0.95, 0.95]),
        m(MAT_TRACK, [0.1, 0.1, 0.1], [0.3, 0.3, 0.3]),
        m(MAT_KNOB, [0.1, 0.1, 0.1], [0.9, 0.55, 0.15]),
    ]
    .into_iter()
    .collect()
}

// 16-segment font on a 1 × 2 cell, y up. Segment endpoints:
const SEGMENTS: [(&str, [f64; 2], [f64; 2]); 16] = [
    ("A1", [0.0, 2.0], [0.5, 2.0]),
    ("A2", [0.5, 2.0], [1.0, 2.0]),
    ("B", [1.0, 2.0], [1.0, 1.0]),
    ("C", [1.0, 1.0], [1.0, 0.0]),
    ("D2", [1.0, 0.0], [0.5, 0.0]),
    ("D1", [0.5, 0.0], [0.0, 0.0]),
    ("E", [0.0, 0.0], [0.0, 1.0]),
    ("F", [0.0, 1.0], [0.0, 2.0]),
    ("G1", [0.0, 1.0], [0.5, 1.0]),
    ("G2", [0.5, 1.0], [1.0, 1.0]),
    ("H", [0.0, 2.0], [0.5, 1.0]),
    ("I", [0.5, 2.0], [0.5, 1.0]),
    ("J", [1.0, 2.0], [0.5, 1.0]),
    ("K", [0.5, 1.0], [0.0, 0.0]),
    ("L", [0.5, 1.0], [0.5, 0.0]),
    ("M", [0.5, 1.0], [1.0, 0.0]),
];

const GLYPHS: [&str; 64] = [
    "",                               // ' '
    "I",                              // !
    "F I",                            // "
    "B C G1 G2 I L D1 D2",            // #
    "A1 A2 F G1 G2 C D1 D2 I L",      // $
    "J K A1 F G1 I C D2 G2 L",        // %
    "A1 H I G1 E D1 D2 M",            // &
    "I",                              // '
    "J M",                            // (
    "H K",                            // )
    "G1 G2 H I J K L M",              // *
    "G1 G2 I L",                      // +
    "K",                              // ,
    "G1 G2",                          // -
    "D1",                             // .
    "J K",                            // /
    "A1 A2 B C D1 D2 E F J K",        // 0
    "B C J",                          // 1
    "A1 A2 B G1 G2 E D1 D2",          // 2
    "A1 A2 B C D1 D2 G2",             // 3
    "F G1 G2 B C",                    // 4
    "A1 A2 F G1 G2 C D1 D2",          // 5
    "A1 A2 F E D1 D2 C G1 G2",        // 6
    "A1 A2 B C",                      // 7
    "A1 A2 B C D1 D2 E F G1 G2",      // 8
    "A1 A2 B C D1 D2 F G1 G2",        // 9
    "I L",                            // :
    "I K",                            // ;
    "J M",                            // <
    "G1 G2 D1 D2",                    // =
    "H K",                            // >
    "A1 A2 B G2 L",                   // ?
    "A1 A2 B C D1 D2 E F G2 I",       // @
    "A1 A2 B C E F G1 G2",            // A
    "A1 A2 B C D1 D2 G2 I L",         // B
    "A1 A2 F E D1 D2",                // C
    "A1 A2 B C D1 D2 I L",            // D
    "A1 A2 F E D1 D2 G1",             // E
    "A1 A2 F E G1",                   // F
    "A1 A2 F E D1 D2 C G2",           // G
    "F E B C G1 G2",                  // H
    "A1 A2 I L D1 D2",                // I
    "B C D1 D2 E",                    // J
    "F E G1 J M",                     // K
    "F E D1 D2",                      // L
    "F E B C H J",                    // M
    "F E B C H M",                    // N
    "A1 A2 B C D1 D2 E F",            // O
    "A1 A2 B F E G1 G2",              // P
    "A1 A2 B C D1 D2 E F M",          // Q
    "A1 A2 B F E G1 G2 M",            // R
    "A1 A2 F G1 G2 C D1 D2",          // S
    "A1 A2 I L",                      // T
    "F E D1 D2 C B",                  // U
    "F E K J",                        // V
    "F E B C K M",                    // W
    "H J K M",                        // X
    "H J L",                          // Y
    "A1 A2 J K D1 D2",                // Z
    "A2 I L D2",                      // [
    "H M",                            // backslash
    "A1 I L D1",                      // ]
    "K M",                            // ^
    "D1 D2",                          // _
];

const GLYPHS_TAIL: [&str; 5] = [
    "H",            // `
    "A2 G1 I L D2", // {
    "I L",          // |
    "A1 G2 I L D1", // }
    "H G1 G2 J",    // ~
];

/// Segment names lit for `c`.
pub fn glyph_segments(c: char) -> Vec<&'static str> {
    let c = c.to_ascii_uppercase();
    let code = c as u32;
    let spec = match code {
        32..=95 => GLYPHS[(code - 32) as usize],
        96 => GLYPHS_TAIL[0],
        123..=126 => GLYPHS_TAIL[(code - 122) as usize],
        _ => GLYPHS['?' as usize - 32],
    };
    spec.split_whitespace().collect()
}

const STROKE: f64 = 0.16;
const ADVANCE: f64 = 1.4;

/// Flat quads for `text` in the z = `z` plane, left edge at `origin.x`,
/// baseline at `origin.y`, cap height `height`. `None` when nothing is
/// drawn.
pub fn text_mesh(text: &str, origin: [f64; 2], height: f64, z: f64) -> Option<Mesh> {
    let s = height / 2.0;
    let mut positions = Vec::new();
    let mut indices = Vec::new();
    for (i, c) in text.chars().enumerate() {
        let x0 = origin[0] + i as f64 * ADVANCE * s;
        for seg in glyph_segments(c) {
            let (_, a, b) = SEGMENTS.iter().find(|(n, _, _)| *n == seg).expect("glyph tables use known segments");
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len = (dx * dx + dy * dy).sqrt();
            let (nx, ny) = (-dy / len * STROKE * 0.5, dx / len * STROKE * 0.5);
            let base = positions.len() as u32;
            for (px, py) in [(a[0] - nx, a[1] - ny), (b[0] - nx, b[1] - ny), (b[0] + nx, b[1] + ny), (a[0] + nx, a[1] + ny)] {
                positions.push([(x0 + px * s) as f32, (origin[1] + py * s) as f32, z as f32]);
            }
            indices.push([base, base + 1, base + 2]);
            indices.push([base, base + 2, base + 3]);
        }
    }
    if indices.is_empty() {
        return None;
    }
    let normals = vec![[0.0, 0.0, 1.0]; positions.len()];
    Some(Mesh::new(positions, indices).with_normals(normals))
}

/// Square quad of side `size` centered on the origin, facing +z.
fn knob_mesh(size: f64) -> Mesh {
    let h = (size / 2.0) as f32;
    Mesh::new(vec![[-h, -h, 0.0], [h, -h, 0.0], [h, h, 0.0], [-h, h, 0.0]], vec![[0, 1, 2], [0, 2, 3]])
}

const TEXT_Z: f64 = 0.002;
const KNOB_Z: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
struct Parts {
    text: EntityId,
    text_mesh: Option<MeshId>,
    body: Option<EntityId>,
    knob: Option<EntityId>,
}

#[derive(Debug, Clone, PartialEq)]
struct Widget {
    spec: WidgetSpec,
    entity: EntityId,
    top: f64,
    parts: Parts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PickHit {
    pub id: String,
    /// Hit position in the widget's local frame (origin at its top-left).
    pub local: Vec3,
    pub t: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WidgetUpdate {
    pub text: Option<String>,
    pub value: Option<f64>,
}

/// A built widget stack living in a [`Scene`].
#[derive(Debug, Clone, PartialEq)]
pub struct Ui {
    root: EntityId,
    layout: UiLayout,
    widgets: Vec<Widget>,
}

fn text_layout(kind: &WidgetKind, h: f64) -> Option<([f64; 2], f64)> {
    match kind {
        WidgetKind::Label => Some(([0.0, -0.8 * h], 0.6 * h)),
        WidgetKind::Button => Some(([0.1 * h, -0.75 * h], 0.5 * h)),
        WidgetKind::Slider { .. } => None,
    }
}

/// Builds `specs` as a subtree named `name` under `parent`.
pub fn build_ui(
    scene: &mut Scene,
    parent: EntityId,
    name: &str,
    transform: Transform,
    specs: &[WidgetSpec],
    layout: UiLayout,
) -> Result<Ui, UiError> {
    let mut ids = HashSet::new();
    for s in specs {
        s.validate()?;
        if !ids.insert(s.id.as_str()) {
            return Err(UiError::DuplicateId(s.id.clone()));
        }
    }
    let root = scene.add_child(parent, Entity::new(name).with_transform(transform).with_ui(true))?;
    let mut widgets = Vec::with_capacity(specs.len());
    let mut top = 0.0;
    for spec in specs {
        let h = layout.height_of(&spec.kind);
        let entity =
            scene.add_child(root, Entity::new(&spec.id).with_transform(Transform::translate(Vec3::new(0.0, top, 0.0))).with_ui(true))?;
        let parts = build_parts(scene, entity, spec, &layout)?;
        widgets.push(Widget { spec: spec.clone(), entity, top, parts });
        top -= h + layout.spacing;
    }
    Ok(Ui { root, layout, widgets })
}

fn mesh_name(widget: &str, part: &str) -> String {
    format!("ui:{widget}:{part}")
}

fn knob_transform(spec: &WidgetSpec, layout: &UiLayout) -> Transform {
    let WidgetKind::Slider { min, max, value } = spec.kind else { return Transform::IDENTITY };
    let x = layout.track_start() + (value - min) / (max - min) * layout.track_length();
    Transform::translate(Vec3::new(x, -0.5 * layout.slider_height, KNOB_Z))
}

fn build_parts(scene: &mut Scene, entity: EntityId, spec: &WidgetSpec, layout: &UiLayout) -> Result<Parts, UiError> {
    let h = layout.height_of(&spec.kind);
    let w = layout.width;
    let mut body = None;
    let mut knob = None;
    match spec.kind {
        WidgetKind::Label => {}
        WidgetKind::Button => {
            let mesh = scene.add_mesh(mesh_name(&spec.id, "box"), box_mesh([0.0, -h as f32, -layout.depth as f32], [w as f32, 0.0, 0.0]));
            body = Some(scene.add_child(entity, Entity::new("box").with_mesh(mesh).with_material(MAT_BUTTON).with_ui(true))?);
        }
        WidgetKind::Slider { .. } => {
            let (x0, x1) = (layout.track_start(), layout.track_start() + layout.track_length());
            let (y0, y1) = (-0.65 * h, -0.35 * h);
            let track = Mesh::new(
                vec![[x0 as f32, y0 as f32, 0.0], [x1 as f32, y0 as f32, 0.0], [x1 as f32, y1 as f32, 0.0], [x0 as f32, y1 as f32, 0.0]],
                vec![[0, 1, 2], [0, 2, 3]],
            );
            let track = scene.add_mesh(mesh_name(&spec.id, "track"), track);
            body = Some(scene.add_child(entity, Entity::new("track").with_mesh(track).with_material(MAT_TRACK).with_ui(true))?);
            let km = scene.add_mesh(mesh_name(&spec.id, "knob"), knob_mesh(0.8 * h));
            let kt = knob_transform(spec, layout);
            knob = Some(scene.add_child(entity, Entity::new("knob").with_mesh(km).with_transform(kt).with_material(MAT_KNOB).with_ui(true))?);
        }
    }
    let glyphs = text_layout(&spec.kind, h).and_then(|(origin, size)| text_mesh(&spec.text, origin, size, TEXT_Z));
    let text_mesh = glyphs.map(|m| scene.add_mesh(mesh_name(&spec.id, "text"), m));
    let mut text_entity = Entity::new("text").with_material(MAT_TEXT).with_ui(true);
    text_entity.mesh = text_mesh;
    let text = scene.add_child(entity, text_entity)?;
    Ok(Parts { text, text_mesh, body, knob })
}

/// Value under a hit at `track_x` along the track, clamped to the range.
pub fn slider_from_hit(min: f64, max: f64, track_x: f64, track_length: f64) -> f64 {
    min + (track_x / track_length).clamp(0.0, 1.0) * (max - min)
}

impl Ui {
    pub fn root(&self) -> EntityId {
        self.root
    }

    pub fn layout(&self) -> &UiLayout {
        &self.layout
    }

    pub fn specs(&self) -> Vec<WidgetSpec> {
        self.widgets.iter().map(|w| w.spec.clone()).collect()
    }

    pub fn spec(&self, id: &str) -> Option<&WidgetSpec> {
        self.widgets.iter().find(|w| w.spec.id == id).map(|w| &w.spec)
    }

    /// Top edge of widget `id` in UI units.
    pub fn top_of(&self, id: &str) -> Option<f64> {
        self.widgets.iter().find(|w| w.spec.id == id).map(|w| w.top)
    }

    pub fn entity_of(&self, id: &str) -> Option<EntityId> {
        self.widgets.iter().find(|w| w.spec.id == id).map(|w| w.entity)
    }

    pub fn knob_entity(&self, id: &str) -> Option<EntityId> {
        self.widgets.iter().find(|w| w.spec.id == id).and_then(|w| w.parts.knob)
    }

    pub fn body_entity(&self, id: &str) -> Option<EntityId> {
        self.widgets.iter().find(|w| w.spec.id == id).and_then(|w| w.parts.body)
    }

    pub fn text_entity(&self, id: &str) -> Option<EntityId> {
        self.widgets.iter().find(|w| w.spec.id == id).map(|w| w.parts.text)
    }

    pub fn total_height(&self) -> f64 {
        let n = self.widgets.len();
        if n == 0 {
            return 0.0;
        }
        self.widgets.iter().map(|w| self.layout.height_of(&w.spec.kind)).sum::<f64>() + (n - 1) as f64 * self.layout.spacing
    }

    fn widget_for_entity(&self, scene: &Scene, mut e: EntityId) -> Option<&Widget> {
        loop {
            if let Some(w) = self.widgets.iter().find(|w| w.entity == e) {
                return Some(w);
            }
            e = scene.parent(e).ok()??;
        }
    }

    /// Widget under the nearest UI-mask hit of `ray`, if that hit belongs
    /// to this UI. Rays without the UI mask bit never pick.
    pub fn pick(&self, scene: &Scene, tlas: &Tlas, collected: &Collected, ray: &Ray) -> Option<PickHit> {
        if ray.mask & MASK_UI == 0 {
            return None;
        }
        let hit = tlas.trace_nearest(&ray.with_mask(MASK_UI))?;
        let entity = *collected.entities.get(hit.instance_id as usize)?;
        let widget = self.widget_for_entity(scene, entity)?;
        let inv = scene.world_transform(widget.entity).ok()?.invert().ok()?;
        Some(PickHit { id: widget.spec.id.clone(), local: inv.apply_point(hit.position), t: hit.t })
    }

    /// Slider value for a pick hit on slider `hit.id`.
    pub fn slider_value_at(&self, hit: &PickHit) -> Option<f64> {
        match self.spec(&hit.id)?.kind {
            WidgetKind::Slider { min, max, .. } => {
                Some(slider_from_hit(min, max, hit.local.x - self.layout.track_start(), self.layout.track_length()))
            }
            _ => None,
        }
    }

    /// Regenerates only the parts of widget `id` that the update touches.
    pub fn update_widget(&mut self, scene: &mut Scene, id: &str, update: WidgetUpdate) -> Result<(), UiError> {
        let layout = self.layout;
        let w = self.widgets.iter_mut().find(|w| w.spec.id == id).ok_or_else(|| UiError::UnknownWidget(id.into()))?;
        let mut spec = w.spec.clone();
        if let Some(text) = update.text {
            spec.text = text;
        }
        if let Some(v) = update.value {
            match &mut spec.kind {
                WidgetKind::Slider { value, .. } => *value = v,
                _ => return Err(UiError::InvalidSpec { id: id.into(), message: "only sliders carry a value".into() }),
            }
        }
        spec.validate()?;
        if spec.kind != w.spec.kind {
            if let Some(knob) = w.parts.knob {
                scene.set_local_transform(knob, knob_transform(&spec, &layout))?;
            }
        }
        if spec.text != w.spec.text {
            let h = layout.height_of(&spec.kind);
            let glyphs = text_layout(&spec.kind, h).and_then(|(origin, size)| text_mesh(&spec.text, origin, size, TEXT_Z));
            match (glyphs, w.parts.text_mesh) {
                (Some(m), Some(existing)) => {
                    scene.replace_mesh(existing, m)?;
                    scene.set_mesh(w.parts.text, Some(existing))?;
                }
                (Some(m), None) => {
                    let mid = scene.add_mesh(mesh_name(id, "text"), m);
                    w.parts.text_mesh = Some(mid);
                    scene.set_mesh(w.parts.text, Some(mid))?;
                }
                (None, _) => scene.set_mesh(w.parts.text, None)?,
            }
        }
        w.spec = spec;
        Ok(())
    }
}
