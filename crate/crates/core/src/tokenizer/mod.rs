//! Dynamic visual tokenizer: a selector picks which patches to keep, a merger
//! folds the dropped patches into the kept ones, a codebook quantizes the
//! merged tokens, and a decoder reconstructs every patch from the codes.
//!
//! Training runs the merger and decoder over all `N` positions and expresses
//! the keep/drop decision as attention weights, so the hard mask still
//! receives gradients. Inference gathers the `T` retained rows explicitly.

mod codebook;
mod decoder;
mod merger;
mod model;
mod selector;
mod train;

pub(crate) use train::Batcher;


use serde::{Deserialize, Serialize};

use crate::autodiff::AdamWConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use codebook::{perplexity, Codebook};
pub use decoder::Decoder;
pub use merger::{Merger, MergerBlock};
pub use model::{tokenizer_loss, Tokenizer};
pub use selector::{gumbel_noise, relaxed_mask, Selector};
pub use train::{train_tokenizer, TokenizerStep};

/// Column of the selector output that means "keep".
pub const KEEP: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnMode {
    #[default]
    Causal,
    Bidirectional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tokenization {
    #[default]
    Dynamic,
    /// Selector bypassed, every patch kept.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    #[default]
    On,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub dim: usize,
    pub codebook_size: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub selector_hidden: usize,
    pub init_std: f64,
    /// Target mean fraction of retained patches.
    pub rho: f64,
    /// Weight of the rate term.
    pub lambda: f64,
    /// Gumbel-Softmax temperature at step 0.
    pub tau: f64,
    /// Temperature at the last step; linear interpolation in between.
    pub tau_final: f64,
    /// Commitment coefficient; 0 leaves only reconstruction and rate terms.
    pub commitment: f64,
    pub ema_decay: f64,
    /// Codes unused for this many consecutive steps are re-seeded.
    pub dead_code_steps: usize,
    pub attn_mode: AttnMode,
    pub tokenization: Tokenization,
    pub merger: Switch,
    pub steps: usize,
    pub batch_size: usize,
    /// `total_steps` is overridden by `steps` at training time.
    pub optimizer: AdamWConfig,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            grid_rows: 4,
            grid_cols: 4,
            dim: 16,
            codebook_size: 64,
            blocks: 2,
            heads: 2,
            ffn_hidden: 64,
            selector_hidden: 32,
            init_std: crate::autodiff::nn::INIT_STD,
            rho: 1.0 / 3.0,
            lambda: 2.0,
            tau: 1.0,
            tau_final: 1.0,
            commitment: 0.25,
            ema_decay: 0.99,
            dead_code_steps: 200,
            attn_mode: AttnMode::Causal,
            tokenization: Tokenization::Dynamic,
            merger: Switch::On,
            steps: 2000,
            batch_size: 16,
            optimizer: AdamWConfig {
                peak_lr: 2e-3,
                ..AdamWConfig::tokenizer_stage()
            },
        }
    }
}

impl TokenizerConfig {
    pub fn patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// Temperature for 0-based `step`.
    pub fn tau_at(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.tau;
        }
        let f = (step as f64 / (self.steps - 1) as f64).min(1.0);
        self.tau + (self.tau_final - self.tau) * f
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("tokenizer: {m}")));
        if self.patches() == 0 || self.dim == 0 {
            return bad("grid and dim must be positive".into());
        }
        if self.codebook_size < 2 {
            return bad(format!("codebook_size {} < 2", self.codebook_size));
        }
        if self.blocks == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!(
                "dim {} must split into {} heads, blocks >= 1",
                self.dim, self.heads
            ));
        }
        if self.ffn_hidden == 0 || self.selector_hidden == 0 {
            return bad("hidden sizes must be positive".into());
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad(format!("rho {} outside (0, 1]", self.rho));
        }
        if !(self.tau > 0.0 && self.tau_final > 0.0) {
            return bad("tau must be positive".into());
        }
        if !(self.lambda >= 0.0 && self.commitment >= 0.0 && self.init_std > 0.0) {
            return bad("lambda, commitment must be >= 0 and init_std > 0".into());
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad("ema_decay outside (0, 1)".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }
}

/// Selector output for one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionMask<S> {
    /// Selector logits `[N×2]`.
    pub pi: Tensor<S>,
    /// Relaxed distribution `[N×2]` (noise-free softmax in inference).
    pub pi_hat: Tensor<S>,
    /// Hard keep decision per patch.
    pub keep: Vec<bool>,
    pub tau: f64,
}

impl<S> DecisionMask<S> {
    /// Retained raster positions in order.
    pub fn retained(&self) -> Vec<usize> {
        self.keep
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect()
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn keep_fraction(&self) -> f64 {
        self.kept_count() as f64 / self.keep.len() as f64
    }
}

/// Result of tokenizing one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedImage<S> {
    /// Code index per retained token, `T` entries.
    pub codes: Vec<usize>,
    /// Raster position of each retained token.
    pub positions: Vec<usize>,
    /// Continuous merger output `[T×D]`.
    pub merged_features: Tensor<S>,
    /// Codebook rows `[T×D]`.
    pub quantized_features: Tensor<S>,
    pub mask: DecisionMask<S>,
}

impl<S> TokenizedImage<S> {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}
