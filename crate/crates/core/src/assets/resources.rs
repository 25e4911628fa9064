//! Caching resource manager with content fingerprints and poll-based reload.

use std::collections::HashMap;
use std::fmt;
use std::io::ErrorKind;
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::SystemTime;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::collada::{parse_collada, SceneAsset};
use super::material::{parse_material_doc, MaterialDoc};
use super::scene_file::SceneFile;
use super::AssetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceKind {
    Materials,
    Scene,
    Collada,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ResourceKey {
    path: PathBuf,
    kind: ResourceKind,
}

fn lexical_absolute(p: &Path) -> PathBuf {
    let joined = if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().unwrap_or_default().join(p)
    };
    let mut out = PathBuf::new();
    for c in joined.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            other => out.push(other),
        }
    }
    out
}

impl ResourceKey {
    /// Normalizes `path` to an absolute path: canonical when the file
    /// exists, otherwise lexically cleaned.
    pub fn new(path: impl AsRef<Path>, kind: ResourceKind) -> ResourceKey {
        let lexical = lexical_absolute(path.as_ref());
        let path = std::fs::canonicalize(&lexical).unwrap_or(lexical);
        ResourceKey { path, kind }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn kind(&self) -> ResourceKind {
        self.kind
    }
}

impl fmt::Display for ResourceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}:{}", self.kind, self.path.display())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Resource {
    Materials(Vec<MaterialDoc>),
    Scene(SceneFile),
    Collada(SceneAsset),
}

impl Resource {
    fn parse(kind: ResourceKind, bytes: &[u8]) -> Result<Resource, AssetError> {
        let text = || {
            std::str::from_utf8(bytes).map_err(|e| AssetError::Parse { what: "text", line: None, message: e.to_string() })
        };
        Ok(match kind {
            ResourceKind::Materials => Resource::Materials(parse_material_doc(text()?)?),
            ResourceKind::Scene => Resource::Scene(SceneFile::parse(text()?)?),
            ResourceKind::Collada => Resource::Collada(parse_collada(bytes)?),
        })
    }

    pub fn as_materials(&self) -> Option<&[MaterialDoc]> {
        match self {
            Resource::Materials(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_scene(&self) -> Option<&SceneFile> {
        match self {
            Resource::Scene(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_collada(&self) -> Option<&SceneAsset> {
        match self {
            Resource::Collada(c) => Some(c),
            _ => None,
        }
    }
}

struct Entry {
    handle: Arc<Resource>,
    fingerprint: [u8; 32],
    modified: Option<SystemTime>,
}

#[derive(Debug, Default)]
pub struct ReloadReport {
    pub changed: Vec<ResourceKey>,
    /// Files that changed but failed to read or parse; their previous
    /// version stays cached.
    pub errors: Vec<(ResourceKey, AssetError)>,
}

/// Caches parsed resources by key. Loads are serialized, so concurrent loads
/// of one key parse it once.
#[derive(Default)]
pub struct ResourceManager {
    entries: Mutex<HashMap<ResourceKey, Entry>>,
    parses: AtomicUsize,
}

fn read(key: &ResourceKey) -> Result<(Vec<u8>, Option<SystemTime>), AssetError> {
    let bytes = std::fs::read(key.path()).map_err(|e| match e.kind() {
        ErrorKind::NotFound => AssetError::NotFound(key.path().to_path_buf()),
        _ => AssetError::Io { path: key.path().to_path_buf(), message: e.to_string() },
    })?;
    let modified = std::fs::metadata(key.path()).and_then(|m| m.modified()).ok();
    Ok((bytes, modified))
}

fn fingerprint(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

impl ResourceManager {
    pub fn new() -> ResourceManager {
        ResourceManager::default()
    }

    fn lock(&self) -> MutexGuard<'_, HashMap<ResourceKey, Entry>> {
        self.entries.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn parse(&self, kind: ResourceKind, bytes: &[u8]) -> Result<Resource, AssetError> {
        self.parses.fetch_add(1, Ordering::Relaxed);
        Resource::parse(kind, bytes)
    }

    pub fn load(&self, key: &ResourceKey) -> Result<Arc<Resource>, AssetError> {
        let mut entries = self.lock();
        if let Some(e) = entries.get(key) {
            return Ok(e.handle.clone());
        }
        let (bytes, modified) = read(key)?;
        let handle = Arc::new(self.parse(key.kind(), &bytes)?);
        entries.insert(key.clone(), Entry { handle: handle.clone(), fingerprint: fingerprint(&bytes), modified });
        Ok(handle)
    }

    pub fn get(&self, key: &ResourceKey) -> Option<Arc<Resource>> {
        self.lock().get(key).map(|e| e.handle.clone())
    }

    /// Number of parses performed so far, including reloads.
    pub fn parse_count(&self) -> usize {
        self.parses.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fingerprint(&self, key: &ResourceKey) -> Option<[u8; 32]> {
        self.lock().get(key).map(|e| e.fingerprint)
    }

    pub fn modified(&self, key: &ResourceKey) -> Option<SystemTime> {
        self.lock().get(key).and_then(|e| e.modified)
    }

    pub fn evict(&self, key: &ResourceKey) -> bool {
        self.lock().remove(key).is_some()
    }

    /// Re-fingerprints every cached file and re-parses those whose content
    /// changed. Call between dispatches only.
    pub fn reload_if_changed(&self) -> ReloadReport {
        let mut entries = self.lock();
        let mut keys: Vec<ResourceKey> = entries.keys().cloned().collect();
        keys.sort();
        let mut report = ReloadReport::default();
        for key in keys {
            let entry = entries.get_mut(&key).expect("key listed above");
            let (bytes, modified) = match read(&key) {
                Ok(r) => r,
                Err(e) => {
                    report.errors.push((key, e));
                    continue;
                }
            };
            let fp = fingerprint(&bytes);
            if fp == entry.fingerprint {
                entry.modified = modified;
                continue;
            }
            self.parses.fetch_add(1, Ordering::Relaxed);
            match Resource::parse(key.kind(), &bytes) {
                Ok(res) => {
                    *entry = Entry { handle: Arc::new(res), fingerprint: fp, modified };
                    report.changed.push(key);
                }
                Err(e) => report.errors.push((key, e)),
            }
        }
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn key_normalization() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.json", "{}");
        let plain = ResourceKey::new(dir.path().join("a.json"), ResourceKind::Materials);
        let dotted = ResourceKey::new(dir.path().join("./sub/../a.json"), ResourceKind::Materials);
        assert_eq!(plain, dotted);
        assert_eq!(ResourceKey::new(plain.path(), plain.kind()), plain);
        assert_ne!(plain, ResourceKey::new(dir.path().join("a.json"), ResourceKind::Scene));
        let missing = ResourceKey::new(dir.path().join("x/./y/../z.json"), ResourceKind::Scene);
        assert_eq!(ResourceKey::new(missing.path(), missing.kind()), missing);
    }

    #[test]
    fn loads_are_cached() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "m.json", r#"{"steel": {"roughness": 0.3}}"#);
        let mgr = ResourceManager::new();
        let key = ResourceKey::new(&p, ResourceKind::Materials);
        let a = mgr.load(&key).unwrap();
        let b = mgr.load(&ResourceKey::new(dir.path().join("./m.json"), ResourceKind::Materials)).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!(mgr.parse_count(), 1);
        assert_eq!(mgr.len(), 1);
        assert!(mgr.modified(&key).is_some());
        assert_eq!(a.as_materials().unwrap()[0].name, "steel");
    }

    #[test]
    fn hundred_loads_of_ten_files() {
        let dir = tempfile::tempdir().unwrap();
        let keys: Vec<ResourceKey> = (0..10)
            .map(|i| ResourceKey::new(write(dir.path(), &format!("m{i}.json"), "{}"), ResourceKind::Materials))
            .collect();
        let mgr = ResourceManager::new();
        for i in 0..100 {
            mgr.load(&keys[i % 10]).unwrap();
        }
        assert_eq!(mgr.parse_count(), 10);
    }

    #[test]
    fn concurrent_loads_parse_once() {
        let dir = tempfile::tempdir().unwrap();
        let key = ResourceKey::new(write(dir.path(), "m.json", "{}"), ResourceKind::Materials);
        let mgr = ResourceManager::new();
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| mgr.load(&key).unwrap());
            }
        });
        assert_eq!(mgr.parse_count(), 1);
    }

    #[test]
    fn missing_and_broken_files() {
        let dir = tempfile::tempdir().unwrap();
        let mgr = ResourceManager::new();
        let missing = ResourceKey::new(dir.path().join("nope.json"), ResourceKind::Materials);
        assert!(matches!(mgr.load(&missing), Err(AssetError::NotFound(_))));
        let bad = ResourceKey::new(write(dir.path(), "bad.json", "{"), ResourceKind::Materials);
        assert!(matches!(mgr.load(&bad), Err(AssetError::Parse { .. })));
        assert!(mgr.is_empty());
    }

    #[test]
    fn reload_detects_changes_and_retains_on_failure() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "m.json", r#"{"steel": {"roughness": 0.3}}"#);
        let key = ResourceKey::new(&p, ResourceKind::Materials);
        let mgr = ResourceManager::new();
        mgr.load(&key).unwrap();
        let report = mgr.reload_if_changed();
        assert!(report.changed.is_empty() && report.errors.is_empty());

        fs::write(&p, r#"{"steel": {"roughness": 0.9}}"#).unwrap();
        let report = mgr.reload_if_changed();
        assert_eq!(report.changed, vec![key.clone()]);
        assert_eq!(mgr.get(&key).unwrap().as_materials().unwrap()[0].props.roughness, Some(0.9));

        fs::write(&p, r#"{"steel": {"roughness": "#).unwrap();
        let report = mgr.reload_if_changed();
        assert!(report.changed.is_empty());
        assert_eq!(report.errors.len(), 1);
        assert_eq!(mgr.get(&key).unwrap().as_materials().unwrap()[0].props.roughness, Some(0.9));
    }
}
