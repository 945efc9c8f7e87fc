//! Trained models available to the session service.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use segsteer_core::annotation::DESK_RADIUS;
use segsteer_core::segnet::{load_model, MiniLink, MiniLinkConfig};
use segsteer_core::tensor::ParamSet;
use segsteer_core::{Error, Result};

pub const PROVENANCE_FILE: &str = "provenance.json";

/// How a model directory was produced; written by `pretrain`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_seed: Option<u64>,
    pub domain: Option<String>,
    pub epochs: usize,
    pub lr: f64,
    pub max_clicks: usize,
    pub seed: u64,
    /// Guidance radius used during training.
    pub radius: f64,
}

impl Provenance {
    pub fn read(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(PROVENANCE_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(PROVENANCE_FILE);
        let text = serde_json::to_string_pretty(self).expect("provenance serializes");
        fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
    }
}

#[derive(Clone, Debug)]
pub struct ModelEntry {
    pub model_id: String,
    pub path: PathBuf,
    pub model: MiniLink,
    pub params: ParamSet,
    pub provenance: Option<Provenance>,
}

impl ModelEntry {
    /// Loads and validates a model directory; the id is the directory name.
    pub fn load(dir: &Path) -> Result<Self> {
        let (params, config) = load_model(dir)?;
        let model_id = dir
            .canonicalize()
            .unwrap_or_else(|_| dir.to_path_buf())
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into());
        Ok(Self {
            model_id,
            path: dir.to_path_buf(),
            model: MiniLink::new(config)?,
            params,
            provenance: Provenance::read(dir)?,
        })
    }

    pub fn config(&self) -> &MiniLinkConfig {
        self.model.config()
    }

    /// Radius the model was trained with, or the desk default.
    pub fn radius(&self) -> f64 {
        self.provenance.as_ref().map_or(DESK_RADIUS, |p| p.radius)
    }

    pub fn info(&self) -> ModelInfo {
        ModelInfo {
            model_id: self.model_id.clone(),
            path: self.path.display().to_string(),
            config: *self.config(),
            provenance: self.provenance.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub model_id: String,
    pub path: String,
    pub config: MiniLinkConfig,
    pub provenance: Option<Provenance>,
}

#[derive(Clone, Debug, Default)]
pub struct Registry {
    models: BTreeMap<String, ModelEntry>,
    default_id: Option<String>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a model; the first one added becomes the default.
    pub fn insert(&mut self, entry: ModelEntry) -> Result<()> {
        if self.models.contains_key(&entry.model_id) {
            return Err(Error::Invalid(format!("model id {:?} registered twice", entry.model_id)));
        }
        self.default_id.get_or_insert_with(|| entry.model_id.clone());
        self.models.insert(entry.model_id.clone(), entry);
        Ok(())
    }

    /// Registers every subdirectory of `root` that holds a model manifest.
    pub fn scan(&mut self, root: &Path) -> Result<()> {
        let rd = fs::read_dir(root).map_err(|e| Error::Io {
            path: root.to_path_buf(),
            source: e,
        })?;
        let mut dirs: Vec<PathBuf> = rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("manifest.txt").is_file())
            .collect();
        dirs.sort();
        for dir in dirs {
            let entry = ModelEntry::load(&dir)?;
            if !self.models.contains_key(&entry.model_id) {
                self.insert(entry)?;
            }
        }
        Ok(())
    }

    pub fn get(&self, id: Option<&str>) -> Option<&ModelEntry> {
        let id = id.or(self.default_id.as_deref())?;
        self.models.get(id)
    }

    pub fn default_id(&self) -> Option<&str> {
        self.default_id.as_deref()
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn listing(&self) -> Vec<ModelInfo> {
        self.models.values().map(ModelEntry::info).collect()
    }
}
