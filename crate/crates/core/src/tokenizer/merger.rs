use rand::Rng;

use crate::autodiff::nn::{causal_weights, FeedForward, LayerNorm, MultiHeadAttention};
use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::AttnMode;

/// Pre-norm block: self-attention among retained tokens, cross-attention
/// from retained tokens to the original dropped features, feed-forward.
#[derive(Debug, Clone)]
pub struct MergerBlock {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl MergerBlock {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), dim),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), dim, heads, rng),
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), dim),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross"), dim, heads, rng),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), dim),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, hidden, rng),
        }
    }

    /// Cross-attention update for every position: queries are the current
    /// states, keys and values the original features weighted by `1 − M`.
    /// Rows with nothing to attend to get a zero update.
    pub fn cross_update<S: Scalar>(
        &self,
        tape: &Tape<S>,
        store: &ParamStore<S>,
        h: Var,
        x: Var,
        drop_weights: Var,
    ) -> Result<Var> {
        let q = self.ln_cross.forward(tape, store, h)?;
        self.cross_attn.forward(tape, store, q, x, drop_weights)
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &Tape<S>,
        store: &ParamStore<S>,
        h: Var,
        x: Var,
        self_weights: Var,
        drop_weights: Var,
    ) -> Result<Var> {
        let a = self.ln_self.forward(tape, store, h)?;
        let h = tape.add(h, self.self_attn.forward(tape, store, a, a, self_weights)?)?;
        let h = tape.add(h, self.cross_update(tape, store, h, x, drop_weights)?)?;
        let f = self.ln_ff.forward(tape, store, h)?;
        tape.add(h, self.ff.forward(tape, store, f)?)
    }
}

#[derive(Debug, Clone)]
pub struct Merger {
    pub blocks: Vec<MergerBlock>,
}

impl Merger {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        blocks: usize,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            blocks: (0..blocks)
                .map(|l| MergerBlock::new(store, &format!("merger.{l}"), dim, heads, hidden, rng))
                .collect(),
        }
    }

    /// Runs all blocks over the full `[N×D]` grid `x` with the keep column
    /// `m` (`[N×1]`) shaping the attention scopes, and returns all `N` rows;
    /// callers gather the retained ones.
    pub fn forward<S: Scalar>(
        &self,
        tape: &Tape<S>,
        store: &ParamStore<S>,
        x: Var,
        m: Var,
        attn_mode: AttnMode,
    ) -> Result<Var> {
        let n = tape.shape(x)[0];
        if tape.shape(m) != [n, 1] {
            return Err(Error::Shape {
                op: "merger",
                lhs: tape.shape(x),
                rhs: tape.shape(m),
            });
        }
        let keep_cols = tape.broadcast_rows(tape.transpose(m)?, n)?;
        let scope = match attn_mode {
            AttnMode::Causal => causal_weights::<S>(n),
            AttnMode::Bidirectional => Tensor::ones(&[n, n]),
        };
        let self_w = tape.mul(tape.constant(scope), keep_cols)?;
        let drop_w = tape.one_minus(keep_cols)?;
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(tape, store, h, x, self_w, drop_w)?;
        }
        Ok(h)
    }
}
