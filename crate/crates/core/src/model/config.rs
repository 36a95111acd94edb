use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub max_seq_len: usize,
    /// Block indices whose MLP down-projections are edited, shallowest first.
    pub decisive_layers: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            d_model: 64,
            n_layers: 6,
            n_heads: 4,
            d_mlp: 256,
            max_seq_len: 8,
            decisive_layers: vec![1, 2, 3, 4, 5],
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.d_mlp == 0 || self.max_seq_len == 0 {
            bail!(Input, "model dimensions must be positive");
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            bail!(
                Input,
                "d_model {} is not divisible by n_heads {}",
                self.d_model,
                self.n_heads
            );
        }
        if self.decisive_layers.is_empty() {
            bail!(Input, "at least one decisive layer is required");
        }
        for w in self.decisive_layers.windows(2) {
            if w[0] >= w[1] {
                bail!(Input, "decisive layers must be strictly increasing: {:?}", self.decisive_layers);
            }
        }
        if let Some(&last) = self.decisive_layers.last() {
            if last >= self.n_layers {
                bail!(Input, "decisive layer {} >= n_layers {}", last, self.n_layers);
            }
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Position of `layer` within `decisive_layers`.
    pub fn decisive_slot(&self, layer: usize) -> Result<usize> {
        match self.decisive_layers.iter().position(|&l| l == layer) {
            Some(i) => Ok(i),
            None => bail!(Input, "layer {} is not a decisive layer {:?}", layer, self.decisive_layers),
        }
    }

    pub fn first_decisive(&self) -> usize {
        self.decisive_layers[0]
    }

    pub fn last_decisive(&self) -> usize {
        *self.decisive_layers.last().expect("validated config")
    }
}
