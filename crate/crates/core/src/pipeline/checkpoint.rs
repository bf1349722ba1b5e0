use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::{MetaPrompt, PipelineError};
use crate::llm_gateway::ModelSettings;
use crate::plot_tree::BranchingPlotTree;

pub const CHECKPOINT_VERSION: u32 = 1;

/// A node waiting for its alternate branch, with the prompt that will write it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrontierItem {
    pub node_id: String,
    pub meta_prompt: MetaPrompt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_digest: String,
    pub tree: BranchingPlotTree,
    pub frontier: Vec<FrontierItem>,
    /// Branches merged so far.
    pub completed: usize,
}

/// Digest of the settings that change model output. Budget and
/// parallelism are left out, so a run may be resumed with a larger budget.
pub fn config_digest(settings: &ModelSettings, retry_limit: u32) -> String {
    let material = json!({
        "model_id": settings.model_id,
        "generation_temperature": settings.generation_temperature,
        "extraction_temperature": settings.extraction_temperature,
        "max_output_tokens": settings.max_output_tokens,
        "retry_limit": retry_limit,
    });
    hex::encode(Sha256::digest(material.to_string().as_bytes()))
}

impl Checkpoint {
    /// Writes to a sibling temporary file first so a crash never leaves a
    /// half-written checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let mut text = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        text.push('\n');
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, text)
            .and_then(|()| fs::rename(&tmp, path))
            .map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text =
            fs::read_to_string(path).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
        let checkpoint: Checkpoint =
            serde_json::from_str(&text).map_err(|e| PipelineError::CorruptCheckpoint(e.to_string()))?;
        if checkpoint.version != CHECKPOINT_VERSION {
            return Err(PipelineError::CorruptCheckpoint(format!(
                "version {} is not supported",
                checkpoint.version
            )));
        }
        for item in &checkpoint.frontier {
            if checkpoint.tree.node(&item.node_id).is_none() {
                return Err(PipelineError::CorruptCheckpoint(format!(
                    "frontier names unknown node {}",
                    item.node_id
                )));
            }
        }
        Ok(checkpoint)
    }

    pub fn check_digest(&self, expected: &str) -> Result<(), PipelineError> {
        if self.config_digest == expected {
            Ok(())
        } else {
            Err(PipelineError::ConfigDigestMismatch {
                expected: expected.to_string(),
                found: self.config_digest.clone(),
            })
        }
    }
}
