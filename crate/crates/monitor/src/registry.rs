//! Structural models, sensor bindings and thresholds, persisted as JSON
//! documents.
//!
//! Mutations are serialized and each one bumps a registry-wide
//! `config_version`. Readers get immutable [`RuntimeConfig`] snapshots that
//! are rebuilt on every committed change, so a reader never observes a
//! partial update.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use shm_core::model::{RuntimeConfig, SensorBinding, StructuralModel, ThresholdConfig, ValidationErrors};

use crate::store::{self, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error(transparent)]
    Validation(#[from] ValidationErrors),
    #[error("{0}")]
    Invalid(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// A binding change requested by an operator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BindingRequest {
    pub device_id: String,
    pub structure_id: String,
    pub node_id: String,
    pub active: bool,
    /// Move the device even if it is actively bound elsewhere; its previous
    /// binding is deactivated in the same commit.
    pub replace: bool,
}

#[derive(Serialize, Deserialize)]
struct RegistryDocument {
    config_version: u64,
}

#[derive(Clone, Debug)]
struct StructureDocs {
    model: StructuralModel,
    bindings: BTreeMap<String, SensorBinding>,
    thresholds: Option<ThresholdConfig>,
}

#[derive(Debug, Default)]
struct State {
    version: u64,
    structures: BTreeMap<String, StructureDocs>,
    configs: HashMap<String, Arc<RuntimeConfig>>,
    /// device_id -> (structure_id, node_id) for active bindings.
    devices: HashMap<String, (String, String)>,
}

impl State {
    fn rebuild(&mut self, structure_id: &str) {
        let docs = &self.structures[structure_id];
        let config = RuntimeConfig::resolve(
            &docs.model,
            docs.bindings.values(),
            docs.thresholds.as_ref(),
            self.version,
        )
        .expect("stored models are validated");
        self.configs.insert(structure_id.to_owned(), Arc::new(config));
    }

    fn reindex_devices(&mut self) {
        self.devices = active_devices(&self.structures);
    }
}

#[derive(Debug)]
pub struct Registry {
    state: RwLock<State>,
    writer: Mutex<()>,
    data_dir: Option<PathBuf>,
}

/// Where a device currently reports to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeviceRoute {
    pub structure_id: String,
    pub node_id: String,
}

impl Registry {
    /// A registry that keeps everything in memory.
    pub fn in_memory() -> Self {
        Registry { state: RwLock::new(State::default()), writer: Mutex::new(()), data_dir: None }
    }

    /// Opens (or creates) a registry persisted under `data_dir`; every
    /// committed change is written through.
    pub fn open(data_dir: impl Into<PathBuf>) -> Result<Self, RegistryError> {
        let data_dir = data_dir.into();
        fs::create_dir_all(&data_dir).map_err(|e| StoreError::io(&data_dir, e))?;
        let state = load_state(&data_dir)?;
        Ok(Registry { state: RwLock::new(state), writer: Mutex::new(()), data_dir: Some(data_dir) })
    }

    /// Reads a registry from `data_dir` without attaching it for write-through.
    pub fn load_all(data_dir: &Path) -> Result<Self, RegistryError> {
        Ok(Registry { state: RwLock::new(load_state(data_dir)?), writer: Mutex::new(()), data_dir: None })
    }

    /// Writes every document to `data_dir`.
    pub fn save_all(&self, data_dir: &Path) -> Result<(), RegistryError> {
        let _w = self.writer.lock();
        let state = self.state.read();
        write_registry_doc(data_dir, state.version)?;
        for (id, docs) in &state.structures {
            write_structure(data_dir, id, docs, true, true, true)?;
        }
        Ok(())
    }

    pub fn data_dir(&self) -> Option<&Path> {
        self.data_dir.as_deref()
    }

    pub fn config_version(&self) -> u64 {
        self.state.read().version
    }

    pub fn structure_ids(&self) -> Vec<String> {
        self.state.read().structures.keys().cloned().collect()
    }

    pub fn contains(&self, structure_id: &str) -> bool {
        self.state.read().structures.contains_key(structure_id)
    }

    pub fn model(&self, structure_id: &str) -> Option<StructuralModel> {
        self.state.read().structures.get(structure_id).map(|d| d.model.clone())
    }

    pub fn bindings(&self, structure_id: &str) -> Option<Vec<SensorBinding>> {
        self.state
            .read()
            .structures
            .get(structure_id)
            .map(|d| d.bindings.values().cloned().collect())
    }

    pub fn thresholds(&self, structure_id: &str) -> Option<ThresholdConfig> {
        self.state.read().structures.get(structure_id).and_then(|d| d.thresholds.clone())
    }

    pub fn route(&self, device_id: &str) -> Option<DeviceRoute> {
        self.state
            .read()
            .devices
            .get(device_id)
            .map(|(s, n)| DeviceRoute { structure_id: s.clone(), node_id: n.clone() })
    }

    pub fn resolve_runtime_config(&self, structure_id: &str) -> Result<Arc<RuntimeConfig>, RegistryError> {
        self.state
            .read()
            .configs
            .get(structure_id)
            .cloned()
            .ok_or_else(|| RegistryError::NotFound(format!("structure {structure_id:?}")))
    }

    pub fn upsert_structure(&self, model: StructuralModel) -> Result<u64, RegistryError> {
        if !store::is_valid_id(&model.structure_id) {
            return Err(RegistryError::Invalid(format!("invalid structure id {:?}", model.structure_id)));
        }
        model.validate()?;
        let _w = self.writer.lock();
        let mut next = self.staged();
        let id = model.structure_id.clone();
        let mut bindings = next.structures.remove(&id).map(|d| (d.bindings, d.thresholds));
        if let Some((bindings, _)) = &mut bindings {
            // Bindings to nodes that no longer exist stop being effective.
            for b in bindings.values_mut() {
                if b.active && model.node(&b.node_id).is_none() {
                    b.active = false;
                }
            }
        }
        let (bindings, thresholds) = bindings.unwrap_or_default();
        next.structures.insert(id.clone(), StructureDocs { model, bindings, thresholds });
        self.commit(next, &[&id], (true, true, false))
    }

    pub fn upsert_binding(&self, request: BindingRequest, now_ms: i64) -> Result<u64, RegistryError> {
        if !store::is_valid_id(&request.device_id) {
            return Err(RegistryError::Invalid(format!("invalid device id {:?}", request.device_id)));
        }
        let _w = self.writer.lock();
        let mut next = self.staged();
        let BindingRequest { device_id, structure_id, node_id, active, replace } = request;

        let docs = next
            .structures
            .get(&structure_id)
            .ok_or_else(|| RegistryError::NotFound(format!("structure {structure_id:?}")))?;
        if docs.model.node(&node_id).is_none() {
            return Err(RegistryError::NotFound(format!("node {node_id:?} in structure {structure_id:?}")));
        }

        let mut touched = vec![structure_id.clone()];
        if active {
            if let Some(other) = docs
                .bindings
                .values()
                .find(|b| b.active && b.node_id == node_id && b.device_id != device_id)
            {
                return Err(RegistryError::Conflict(format!(
                    "node {node_id:?} is already bound to device {:?}",
                    other.device_id
                )));
            }
            if let Some((s, n)) = next.devices.get(&device_id).cloned() {
                if (s.as_str(), n.as_str()) != (structure_id.as_str(), node_id.as_str()) {
                    if !replace {
                        return Err(RegistryError::Conflict(format!(
                            "device {device_id:?} is already bound to node {n:?} of structure {s:?}"
                        )));
                    }
                    if s != structure_id {
                        let old = next.structures.get_mut(&s).expect("indexed structure exists");
                        let b = old.bindings.get_mut(&device_id).expect("indexed binding exists");
                        b.active = false;
                        b.updated_at_ms = now_ms;
                        touched.push(s);
                    }
                }
            }
        }

        let docs = next.structures.get_mut(&structure_id).expect("checked above");
        docs.bindings.insert(
            device_id.clone(),
            SensorBinding { device_id, structure_id, node_id, active, updated_at_ms: now_ms },
        );
        next.reindex_devices();
        let touched: Vec<&str> = touched.iter().map(String::as_str).collect();
        self.commit(next, &touched, (false, true, false))
    }

    pub fn set_thresholds(&self, config: ThresholdConfig) -> Result<u64, RegistryError> {
        config.validate().map_err(|e| RegistryError::Invalid(e.to_string()))?;
        let _w = self.writer.lock();
        let mut next = self.staged();
        let id = config.structure_id.clone();
        let docs = next
            .structures
            .get_mut(&id)
            .ok_or_else(|| RegistryError::NotFound(format!("structure {id:?}")))?;
        docs.thresholds = Some(config);
        self.commit(next, &[&id], (false, false, true))
    }

    /// Copy of the current documents to mutate; installed by [`Self::commit`].
    fn staged(&self) -> Staged {
        let state = self.state.read();
        Staged { structures: state.structures.clone(), devices: state.devices.clone() }
    }

    /// Persists the touched documents, then atomically swaps in the new state
    /// with a bumped version.
    fn commit(&self, next: Staged, touched: &[&str], docs: (bool, bool, bool)) -> Result<u64, RegistryError> {
        let version = self.state.read().version + 1;
        if let Some(dir) = &self.data_dir {
            for id in touched {
                write_structure(dir, id, &next.structures[*id], docs.0, docs.1, docs.2)?;
            }
            write_registry_doc(dir, version)?;
        }
        let mut state = self.state.write();
        state.version = version;
        state.structures = next.structures;
        state.reindex_devices();
        // Every config carries the registry version, so all are rebuilt.
        let ids: Vec<String> = state.structures.keys().cloned().collect();
        for id in ids {
            state.rebuild(&id);
        }
        Ok(version)
    }
}

struct Staged {
    structures: BTreeMap<String, StructureDocs>,
    devices: HashMap<String, (String, String)>,
}

impl Staged {
    fn reindex_devices(&mut self) {
        self.devices = active_devices(&self.structures);
    }
}

fn active_devices(structures: &BTreeMap<String, StructureDocs>) -> HashMap<String, (String, String)> {
    structures
        .values()
        .flat_map(|d| d.bindings.values())
        .filter(|b| b.active)
        .map(|b| (b.device_id.clone(), (b.structure_id.clone(), b.node_id.clone())))
        .collect()
}

fn write_registry_doc(data_dir: &Path, version: u64) -> Result<(), RegistryError> {
    store::write_document(&data_dir.join("registry.json"), &RegistryDocument { config_version: version })?;
    Ok(())
}

fn write_structure(
    data_dir: &Path,
    id: &str,
    docs: &StructureDocs,
    model: bool,
    bindings: bool,
    thresholds: bool,
) -> Result<(), RegistryError> {
    let dir = store::structure_dir(data_dir, id);
    if model {
        store::write_document(&dir.join("model.json"), &docs.model)?;
    }
    if bindings {
        let list: Vec<&SensorBinding> = docs.bindings.values().collect();
        store::write_document(&dir.join("bindings.json"), &list)?;
    }
    if thresholds {
        if let Some(t) = &docs.thresholds {
            store::write_document(&dir.join("thresholds.json"), t)?;
        }
    }
    Ok(())
}

fn load_state(data_dir: &Path) -> Result<State, RegistryError> {
    let mut state = State::default();
    if let Some(doc) = store::read_optional_document::<RegistryDocument>(&data_dir.join("registry.json"))? {
        state.version = doc.config_version;
    }
    let root = store::structures_dir(data_dir);
    let entries = match fs::read_dir(&root) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(state),
        Err(e) => return Err(StoreError::io(&root, e).into()),
    };
    let mut dirs: Vec<PathBuf> = entries
        .map(|e| e.map(|e| e.path()).map_err(|err| StoreError::io(&root, err)))
        .collect::<Result<_, _>>()?;
    dirs.sort();
    for dir in dirs {
        let model_path = dir.join("model.json");
        if !model_path.exists() {
            continue;
        }
        let model: StructuralModel = store::read_document(&model_path)?;
        model.validate().map_err(|e| StoreError::Format {
            path: model_path.clone(),
            line: 0,
            message: e.to_string(),
        })?;
        let bindings: Vec<SensorBinding> =
            store::read_optional_document(&dir.join("bindings.json"))?.unwrap_or_default();
        let thresholds: Option<ThresholdConfig> = store::read_optional_document(&dir.join("thresholds.json"))?;
        let id = model.structure_id.clone();
        let bindings = bindings.into_iter().map(|b| (b.device_id.clone(), b)).collect();
        state.structures.insert(id, StructureDocs { model, bindings, thresholds });
    }
    state.reindex_devices();
    let ids: Vec<String> = state.structures.keys().cloned().collect();
    for id in ids {
        state.rebuild(&id);
    }
    Ok(state)
}
