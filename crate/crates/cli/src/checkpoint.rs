//! Checkpoints on disk: the `.radw` weights plus a JSON sidecar with the
//! completed stage and the model configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rad_core::harness::train::{Stage, StagedModel};
use rad_core::nn::{DualStreamModel, ModelConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Serialize, Deserialize)]
pub struct Sidecar {
    pub stage: Stage,
    pub model: ModelConfig,
}

pub fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

pub fn save(staged: &StagedModel, weights: &Path) -> Result<()> {
    if let Some(dir) = weights.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    staged.model.params.save(weights)?;
    let side = Sidecar {
        stage: staged.completed,
        model: staged.model.config.clone(),
    };
    let path = sidecar_path(weights);
    std::fs::write(&path, serde_json::to_string_pretty(&side)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load(weights: &Path) -> Result<StagedModel> {
    let path = sidecar_path(weights);
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading checkpoint sidecar {} (written next to the weights)", path.display()))?;
    let side: Sidecar = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let model = DualStreamModel::load(side.model, weights)?;
    Ok(StagedModel {
        model,
        completed: side.stage,
    })
}

/// Loads a checkpoint that has completed at least `stage`.
pub fn load_at_least(weights: &Path, stage: Stage) -> Result<StagedModel> {
    let staged = load(weights)?;
    if staged.completed < stage {
        bail!(
            "{} is at stage {}, stage {} or later is required",
            weights.display(),
            staged.completed.number(),
            stage.number()
        );
    }
    Ok(staged)
}
