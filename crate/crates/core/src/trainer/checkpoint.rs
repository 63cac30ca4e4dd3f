//! Checkpoint directories: `manifest.json` plus `weights.safetensors`.
//!
//! Only trained tensors are stored. The base encoder is referenced by its
//! spec and content hash and must match on load.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::tensors_of;
use crate::backbone::{load_encoder, Encoder, EncoderSpec};
use crate::error::{Error, Result};
use crate::model::{BaselineModel, HidacConfig, HidacModel, RelationClassifier};
use crate::relsdata::OrderingStrategy;

const FORMAT: &str = "hidac-checkpoint/1";
const MANIFEST: &str = "manifest.json";
const WEIGHTS: &str = "weights.safetensors";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Hidac { config: HidacConfig },
    Baseline { unfreeze_ratio: f64, ordering: OrderingStrategy, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub encoder: EncoderSpec,
    pub base_hash: String,
    pub model: ModelKind,
    pub tensors: Vec<String>,
    pub created: chrono::DateTime<chrono::Utc>,
}

pub enum LoadedModel {
    Hidac(HidacModel),
    Baseline(BaselineModel),
}

impl LoadedModel {
    pub fn classifier(&self) -> &dyn RelationClassifier {
        match self {
            LoadedModel::Hidac(m) => m,
            LoadedModel::Baseline(m) => m,
        }
    }
}

/// Model handle accepted by [`save_checkpoint`].
pub enum Saveable<'a> {
    Hidac(&'a HidacModel),
    Baseline(&'a BaselineModel),
}

impl<'a> From<&'a HidacModel> for Saveable<'a> {
    fn from(m: &'a HidacModel) -> Self {
        Saveable::Hidac(m)
    }
}

impl<'a> From<&'a BaselineModel> for Saveable<'a> {
    fn from(m: &'a BaselineModel) -> Self {
        Saveable::Baseline(m)
    }
}

/// Writes into a sibling temporary directory, then renames it into place.
pub fn save_checkpoint<'a>(model: impl Into<Saveable<'a>>, dir: &Path) -> Result<CheckpointManifest> {
    let (encoder, base_hash, kind, vars) = match model.into() {
        Saveable::Hidac(m) => (
            m.encoder().spec().clone(),
            m.base_hash().to_string(),
            ModelKind::Hidac { config: m.config().clone() },
            m.trainable_vars(),
        ),
        Saveable::Baseline(m) => (
            m.encoder().spec().clone(),
            m.base_hash().to_string(),
            ModelKind::Baseline {
                unfreeze_ratio: m.unfreeze_ratio(),
                ordering: m.ordering(),
                seed: m.seed(),
            },
            m.trainable_vars(),
        ),
    };
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        encoder,
        base_hash,
        model: kind,
        tensors: vars.iter().map(|(n, _)| n.clone()).collect(),
        created: chrono::Utc::now(),
    };

    let tmp = sibling(dir, "tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    candle_core::safetensors::save(&tensors_of(&vars), tmp.join(WEIGHTS))?;
    let json = serde_json::to_vec_pretty(&manifest)?;
    fs::write(tmp.join(MANIFEST), json).map_err(|e| Error::io(tmp.join(MANIFEST), e))?;

    let old = sibling(dir, "old");
    if dir.exists() {
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    Ok(manifest)
}

fn sibling(dir: &Path, tag: &str) -> PathBuf {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    dir.with_file_name(format!(".{name}.{tag}-{}", std::process::id()))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    if manifest.format != FORMAT {
        return Err(Error::Load(format!("unsupported checkpoint format {:?}", manifest.format)));
    }
    Ok(manifest)
}

/// Loads a checkpoint, rebuilding the base encoder from the stored spec.
pub fn load_checkpoint(dir: &Path) -> Result<LoadedModel> {
    let manifest = read_manifest(dir)?;
    let encoder = load_encoder(&manifest.encoder)?;
    load_checkpoint_with(dir, encoder)
}

/// Loads a checkpoint on top of a caller-supplied base encoder, which must
/// hash to the recorded base.
pub fn load_checkpoint_with(dir: &Path, encoder: Encoder) -> Result<LoadedModel> {
    let manifest = read_manifest(dir)?;
    let hash = encoder.base_checksum()?;
    if hash != manifest.base_hash {
        return Err(Error::Load(format!(
            "checkpoint was trained on base {} but the supplied encoder hashes to {hash}",
            manifest.base_hash
        )));
    }
    let weights = dir.join(WEIGHTS);
    let tensors: HashMap<String, Tensor> = candle_core::safetensors::load(&weights, &crate::tensor::device())
        .map_err(|e| Error::Load(format!("{}: {e}", weights.display())))?;
    match manifest.model {
        ModelKind::Hidac { config } => {
            let model = HidacModel::new(encoder, config)?;
            model.load_state(&tensors)?;
            Ok(LoadedModel::Hidac(model))
        }
        ModelKind::Baseline {
            unfreeze_ratio,
            ordering,
            seed,
        } => {
            let model = BaselineModel::new(encoder, unfreeze_ratio, ordering, seed)?;
            model.load_state(&tensors)?;
            Ok(LoadedModel::Baseline(model))
        }
    }
}
