//! Run configuration, read from a single TOML file.

use std::fs;
use std::path::{Path, PathBuf};

use fwdedit_core::editor::EditConfig;
use fwdedit_core::evaluation::BatchParams;
use fwdedit_core::model::{CorpusParams, ModelConfig, TrainConfig};
use fwdedit_core::targets::{Method, TargetSolveConfig};
use serde::{Deserialize, Serialize};

use crate::error::{FwdError, Result};
use crate::output::sha256_hex;

/// Model shape; the vocabulary size comes from the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub max_seq_len: usize,
    pub decisive_layers: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_mlp: m.d_mlp,
            max_seq_len: m.max_seq_len,
            decisive_layers: m.decisive_layers,
            seed: m.seed,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_mlp: self.d_mlp,
            max_seq_len: self.max_seq_len,
            decisive_layers: self.decisive_layers.clone(),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditSection {
    pub method: Method,
    pub lambda: f64,
    /// Omit to use the trace-scaled default.
    pub ridge_eps: Option<f64>,
    pub preservation_size: usize,
    pub n_edits: usize,
    pub min_neighbors: usize,
    /// Seeds the batch draw and the preservation sample.
    pub seed: u64,
}

impl Default for EditSection {
    fn default() -> Self {
        let e = EditConfig::default();
        let b = BatchParams::default();
        EditSection {
            method: e.method,
            lambda: e.lambda,
            ridge_eps: e.ridge_eps,
            preservation_size: e.preservation_size,
            n_edits: b.n_edits,
            min_neighbors: b.min_neighbors,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseSection {
    /// Random unit directions per Jacobian block.
    pub directions: usize,
    /// Requests whose Jacobian blocks are assembled.
    pub jacobian_requests: usize,
    pub seed: u64,
    /// Also dump full Jacobian matrices to JSON.
    pub include_matrices: bool,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        DiagnoseSection {
            directions: 1000,
            jacobian_requests: 4,
            seed: 0,
            include_matrices: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_dir: Option<PathBuf>,
    pub corpus: CorpusParams,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub edit: EditSection,
    pub solve: TargetSolveConfig,
    pub diagnose: DiagnoseSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FwdError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| FwdError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Replaces every seed with `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.corpus.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.edit.seed = seed;
        self.diagnose.seed = seed;
    }

    /// SHA-256 of the canonical JSON form; the output directory is excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }

    pub fn edit_config(&self, method: Method) -> EditConfig {
        EditConfig {
            method,
            lambda: self.edit.lambda,
            ridge_eps: self.edit.ridge_eps,
            preservation_size: self.edit.preservation_size,
            seed: self.edit.seed,
            solve: self.solve.clone(),
        }
    }

    pub fn batch_params(&self) -> BatchParams {
        BatchParams {
            n_edits: self.edit.n_edits,
            min_neighbors: self.edit.min_neighbors,
            seed: self.edit.seed,
        }
    }
}
