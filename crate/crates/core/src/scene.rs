//! Entity tree with per-entity transform, mesh, material and UI flag,
//! flattened depth-first into TLAS instances.

use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

use crate::accel::{AccelError, Blas, BlasId, BlasStore, BuildConfig, Instance, Mesh, MASK_UI, MASK_WORLD};
use crate::assets::material::MaterialMap;
use crate::assets::scene_file::NodeDef;
use crate::assets::AssetError;
use crate::geometry::Transform;
use crate::shading::{ResolvedMaterial, HIT_GROUP_UI};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("{parent:?} already has a child named {name:?}")]
    DuplicateName { parent: String, name: String },
    #[error("unknown or removed entity")]
    UnknownEntity,
    #[error("unknown mesh id {0}")]
    UnknownMesh(usize),
    #[error("entity {entity:?} references unknown material {material:?}")]
    UnknownMaterial { entity: String, material: String },
    #[error("{0}")]
    InvalidOperation(String),
    #[error(transparent)]
    Asset(#[from] AssetError),
    #[error(transparent)]
    Accel(#[from] AccelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityId {
    index: u32,
    generation: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MeshId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Entity {
    pub name: String,
    pub local_transform: Transform,
    pub mesh: Option<MeshId>,
    pub material_name: Option<String>,
    pub ui_flag: bool,
    pub hit_group: Option<u32>,
}

impl Entity {
    pub fn new(name: impl Into<String>) -> Entity {
        Entity { name: name.into(), local_transform: Transform::IDENTITY, mesh: None, material_name: None, ui_flag: false, hit_group: None }
    }

    pub fn with_transform(mut self, t: Transform) -> Entity {
        self.local_transform = t;
        self
    }

    pub fn with_mesh(mut self, mesh: MeshId) -> Entity {
        self.mesh = Some(mesh);
        self
    }

    pub fn with_material(mut self, name: impl Into<String>) -> Entity {
        self.material_name = Some(name.into());
        self
    }

    pub fn with_ui(mut self, ui: bool) -> Entity {
        self.ui_flag = ui;
        self
    }
}

#[derive(Debug, Clone)]
struct Node {
    entity: Entity,
    parent: Option<EntityId>,
    children: Vec<EntityId>,
}

#[derive(Debug, Clone)]
struct Slot {
    generation: u32,
    node: Option<Node>,
}

#[derive(Debug, Clone)]
struct MeshSlot {
    name: String,
    mesh: Arc<Mesh>,
    version: u64,
}

/// Instances flattened from the tree, with the material of each instance id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Collected {
    pub instances: Vec<Instance>,
    pub materials: HashMap<u32, ResolvedMaterial>,
    pub entities: Vec<EntityId>,
}

#[derive(Debug, Clone)]
pub struct Scene {
    slots: Vec<Slot>,
    free: Vec<u32>,
    root: EntityId,
    meshes: Vec<MeshSlot>,
    next_mesh_version: u64,
}

impl Default for Scene {
    fn default() -> Self {
        Scene::new()
    }
}

impl Scene {
    pub fn new() -> Scene {
        let root = Node { entity: Entity::new(""), parent: None, children: Vec::new() };
        Scene {
            slots: vec![Slot { generation: 0, node: Some(root) }],
            free: Vec::new(),
            root: EntityId { index: 0, generation: 0 },
            meshes: Vec::new(),
            next_mesh_version: 0,
        }
    }

    pub fn root(&self) -> EntityId {
        self.root
    }

    /// Number of live entities, including the root.
    pub fn len(&self) -> usize {
        self.slots.iter().filter(|s| s.node.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 1
    }

    fn node(&self, id: EntityId) -> Result<&Node, SceneError> {
        self.slots
            .get(id.index as usize)
            .filter(|s| s.generation == id.generation)
            .and_then(|s| s.node.as_ref())
            .ok_or(SceneError::UnknownEntity)
    }

    fn node_mut(&mut self, id: EntityId) -> Result<&mut Node, SceneError> {
        self.slots
            .get_mut(id.index as usize)
            .filter(|s| s.generation == id.generation)
            .and_then(|s| s.node.as_mut())
            .ok_or(SceneError::UnknownEntity)
    }

    pub fn contains(&self, id: EntityId) -> bool {
        self.node(id).is_ok()
    }

    pub fn entity(&self, id: EntityId) -> Result<&Entity, SceneError> {
        Ok(&self.node(id)?.entity)
    }

    pub fn parent(&self, id: EntityId) -> Result<Option<EntityId>, SceneError> {
        Ok(self.node(id)?.parent)
    }

    pub fn children(&self, id: EntityId) -> Result<&[EntityId], SceneError> {
        Ok(&self.node(id)?.children)
    }

    pub fn child_by_name(&self, parent: EntityId, name: &str) -> Result<Option<EntityId>, SceneError> {
        let node = self.node(parent)?;
        Ok(node.children.iter().copied().find(|c| self.node(*c).map(|n| n.entity.name == name).unwrap_or(false)))
    }

    /// Slash-separated names from the root, e.g. `/room/lamp`.
    pub fn path(&self, id: EntityId) -> Result<String, SceneError> {
        let mut names = Vec::new();
        let mut cur = Some(id);
        while let Some(c) = cur {
            let n = self.node(c)?;
            if n.parent.is_some() {
                names.push(n.entity.name.as_str());
            }
            cur = n.parent;
        }
        names.reverse();
        Ok(names.iter().map(|n| format!("/{n}")).collect())
    }

    pub fn find(&self, path: &str) -> Option<EntityId> {
        let mut cur = self.root;
        for part in path.split('/').filter(|p| !p.is_empty()) {
            cur = self.child_by_name(cur, part).ok()??;
        }
        Some(cur)
    }

    pub fn add_child(&mut self, parent: EntityId, entity: Entity) -> Result<EntityId, SceneError> {
        if self.child_by_name(parent, &entity.name)?.is_some() {
            return Err(SceneError::DuplicateName { parent: self.path(parent)?, name: entity.name });
        }
        if let Some(m) = entity.mesh {
            if m.0 >= self.meshes.len() {
                return Err(SceneError::UnknownMesh(m.0));
            }
        }
        let node = Node { entity, parent: Some(parent), children: Vec::new() };
        let id = match self.free.pop() {
            Some(index) => {
                let slot = &mut self.slots[index as usize];
                slot.node = Some(node);
                EntityId { index, generation: slot.generation }
            }
            None => {
                self.slots.push(Slot { generation: 0, node: Some(node) });
                EntityId { index: self.slots.len() as u32 - 1, generation: 0 }
            }
        };
        self.node_mut(parent)?.children.push(id);
        Ok(id)
    }

    /// Removes `id` and its whole subtree, returning the removed entity.
    pub fn remove(&mut self, id: EntityId) -> Result<Entity, SceneError> {
        if id == self.root {
            return Err(SceneError::InvalidOperation("the root cannot be removed".into()));
        }
        let parent = self.node(id)?.parent.expect("non-root entities have parents");
        self.node_mut(parent)?.children.retain(|c| *c != id);
        let mut stack = vec![id];
        let mut removed = None;
        while let Some(cur) = stack.pop() {
            let slot = &mut self.slots[cur.index as usize];
            let node = slot.node.take().expect("live subtree");
            slot.generation += 1;
            self.free.push(cur.index);
            stack.extend(node.children.iter().copied());
            if cur == id {
                removed = Some(node.entity);
            }
        }
        Ok(removed.expect("subtree root visited"))
    }

    pub fn is_ancestor(&self, ancestor: EntityId, id: EntityId) -> Result<bool, SceneError> {
        let mut cur = Some(id);
        while let Some(c) = cur {
            if c == ancestor {
                return Ok(true);
            }
            cur = self.node(c)?.parent;
        }
        Ok(false)
    }

    pub fn reparent(&mut self, id: EntityId, new_parent: EntityId) -> Result<(), SceneError> {
        self.node(new_parent)?;
        if id == self.root || self.is_ancestor(id, new_parent)? {
            return Err(SceneError::InvalidOperation("reparenting would create a cycle".into()));
        }
        let old_parent = self.node(id)?.parent.expect("non-root entities have parents");
        if old_parent == new_parent {
            return Ok(());
        }
        let name = self.node(id)?.entity.name.clone();
        if self.child_by_name(new_parent, &name)?.is_some() {
            return Err(SceneError::DuplicateName { parent: self.path(new_parent)?, name });
        }
        self.node_mut(old_parent)?.children.retain(|c| *c != id);
        self.node_mut(new_parent)?.children.push(id);
        self.node_mut(id)?.parent = Some(new_parent);
        Ok(())
    }

    pub fn set_local_transform(&mut self, id: EntityId, t: Transform) -> Result<(), SceneError> {
        self.node_mut(id)?.entity.local_transform = t;
        Ok(())
    }

    pub fn set_mesh(&mut self, id: EntityId, mesh: Option<MeshId>) -> Result<(), SceneError> {
        if let Some(m) = mesh {
            if m.0 >= self.meshes.len() {
                return Err(SceneError::UnknownMesh(m.0));
            }
        }
        self.node_mut(id)?.entity.mesh = mesh;
        Ok(())
    }

    /// Binds `material` to this entity only; children keep their own.
    pub fn set_material_override(&mut self, id: EntityId, material: impl Into<String>) -> Result<(), SceneError> {
        self.node_mut(id)?.entity.material_name = Some(material.into());
        Ok(())
    }

    pub fn world_transform(&self, id: EntityId) -> Result<Transform, SceneError> {
        let mut chain = Vec::new();
        let mut cur = Some(id);
        while let Some(c) = cur {
            let n = self.node(c)?;
            chain.push(&n.entity.local_transform);
            cur = n.parent;
        }
        Ok(chain.iter().rev().fold(Transform::IDENTITY, |acc, t| acc.compose(t)))
    }

    pub fn add_mesh(&mut self, name: impl Into<String>, mesh: Mesh) -> MeshId {
        self.next_mesh_version += 1;
        self.meshes.push(MeshSlot { name: name.into(), mesh: Arc::new(mesh), version: self.next_mesh_version });
        MeshId(self.meshes.len() - 1)
    }

    pub fn replace_mesh(&mut self, id: MeshId, mesh: Mesh) -> Result<(), SceneError> {
        self.next_mesh_version += 1;
        let version = self.next_mesh_version;
        let slot = self.meshes.get_mut(id.0).ok_or(SceneError::UnknownMesh(id.0))?;
        slot.mesh = Arc::new(mesh);
        slot.version = version;
        Ok(())
    }

    pub fn mesh(&self, id: MeshId) -> Option<&Arc<Mesh>> {
        self.meshes.get(id.0).map(|m| &m.mesh)
    }

    pub fn mesh_name(&self, id: MeshId) -> Option<&str> {
        self.meshes.get(id.0).map(|m| m.name.as_str())
    }

    pub fn mesh_by_name(&self, name: &str) -> Option<MeshId> {
        self.meshes.iter().position(|m| m.name == name).map(MeshId)
    }

    pub fn mesh_count(&self) -> usize {
        self.meshes.len()
    }

    /// Pre-order walk from the root (excluded), children in insertion order.
    pub fn depth_first(&self) -> Vec<EntityId> {
        let mut out = Vec::new();
        let mut stack: Vec<EntityId> = self.slots[self.root.index as usize]
            .node
            .as_ref()
            .map(|n| n.children.iter().rev().copied().collect())
            .unwrap_or_default();
        while let Some(id) = stack.pop() {
            out.push(id);
            if let Ok(n) = self.node(id) {
                stack.extend(n.children.iter().rev().copied());
            }
        }
        out
    }

    /// One instance per entity with a mesh, in depth-first order. Instance
    /// ids are positions in that order and `blas_id` equals the mesh id.
    /// Entities without a material name use the default material.
    pub fn collect_instances(&self, materials: &MaterialMap) -> Result<Collected, SceneError> {
        let mut out = Collected::default();
        let mut world_of: HashMap<EntityId, Transform> = HashMap::new();
        world_of.insert(self.root, self.node(self.root)?.entity.local_transform);
        for id in self.depth_first() {
            let node = self.node(id)?;
            let parent = node.parent.expect("non-root");
            let world = world_of[&parent].compose(&node.entity.local_transform);
            world_of.insert(id, world);
            let Some(mesh) = node.entity.mesh else { continue };
            let material = match &node.entity.material_name {
                Some(name) => materials.get(name).cloned().ok_or_else(|| SceneError::UnknownMaterial {
                    entity: self.path(id).unwrap_or_default(),
                    material: name.clone(),
                })?,
                None => ResolvedMaterial::default(),
            };
            let ui = node.entity.ui_flag;
            let instance_id = out.instances.len() as u32;
            out.instances.push(Instance {
                blas_id: BlasId(mesh.0),
                transform: world,
                instance_id,
                hit_group_id: node.entity.hit_group.unwrap_or(if ui { HIT_GROUP_UI } else { material.hit_group() }),
                mask: if ui { MASK_UI } else { MASK_WORLD },
                debug_name: self.path(id)?,
            });
            out.materials.insert(instance_id, material);
            out.entities.push(id);
        }
        Ok(out)
    }

    /// Builds a scene from file nodes, loading each distinct mesh reference
    /// once through `load_mesh`.
    pub fn from_nodes(
        nodes: &[NodeDef],
        mut load_mesh: impl FnMut(&str) -> Result<Mesh, AssetError>,
    ) -> Result<Scene, SceneError> {
        let mut scene = Scene::new();
        fn add(
            scene: &mut Scene,
            parent: EntityId,
            defs: &[NodeDef],
            load: &mut dyn FnMut(&str) -> Result<Mesh, AssetError>,
        ) -> Result<(), SceneError> {
            for d in defs {
                let mesh = match &d.mesh {
                    Some(r) => Some(match scene.mesh_by_name(r) {
                        Some(id) => id,
                        None => {
                            let m = load(r)?;
                            scene.add_mesh(r.clone(), m)
                        }
                    }),
                    None => None,
                };
                let entity = Entity {
                    name: d.name.clone(),
                    local_transform: d.local_transform(),
                    mesh,
                    material_name: d.material.clone(),
                    ui_flag: d.ui,
                    hit_group: d.hit_group,
                };
                let id = scene.add_child(parent, entity)?;
                add(scene, id, &d.children, load)?;
            }
            Ok(())
        }
        let root = scene.root;
        add(&mut scene, root, nodes, &mut load_mesh)?;
        Ok(scene)
    }

    /// File nodes for the subtree under the root. Meshes are written by name.
    pub fn to_nodes(&self) -> Vec<NodeDef> {
        fn convert(scene: &Scene, id: EntityId) -> NodeDef {
            let n = scene.node(id).expect("live");
            let mut def = NodeDef {
                name: n.entity.name.clone(),
                mesh: n.entity.mesh.and_then(|m| scene.mesh_name(m)).map(str::to_string),
                material: n.entity.material_name.clone(),
                ui: n.entity.ui_flag,
                hit_group: n.entity.hit_group,
                children: n.children.iter().map(|c| convert(scene, *c)).collect(),
                ..NodeDef::default()
            };
            def.set_transform(&n.entity.local_transform);
            def
        }
        self.node(self.root).map(|r| r.children.iter().map(|c| convert(self, *c)).collect()).unwrap_or_default()
    }
}

/// BLAS per mesh, rebuilt only when a mesh is added or replaced.
#[derive(Debug, Default)]
pub struct BlasCache {
    entries: Vec<Option<(u64, Arc<Blas>)>>,
    builds: usize,
}

impl BlasCache {
    pub fn new() -> BlasCache {
        BlasCache::default()
    }

    pub fn build_count(&self) -> usize {
        self.builds
    }

    /// A store whose ids coincide with the scene's mesh ids.
    pub fn store(&mut self, scene: &Scene, config: &BuildConfig) -> Result<BlasStore, SceneError> {
        self.entries.resize(scene.meshes.len(), None);
        let mut store = BlasStore::new();
        for (i, slot) in scene.meshes.iter().enumerate() {
            let blas = match &self.entries[i] {
                Some((v, b)) if *v == slot.version => b.clone(),
                _ => {
                    let b = Arc::new(Blas::build(slot.mesh.clone(), config)?);
                    self.builds += 1;
                    self.entries[i] = Some((slot.version, b.clone()));
                    b
                }
            };
            store.add_shared(blas);
        }
        Ok(store)
    }
}
