use rand::Rng;

use crate::autodiff::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

/// Reconstructs all `N` patch features: one learned query per raster
/// position cross-attends to the quantized tokens, each tagged with an
/// embedding of its source position. Cross-attention scores also get a
/// learned bias indexed by (query position, source position).
#[derive(Debug, Clone)]
pub struct Decoder {
    pub queries: ParamId,
    pub source_pos: ParamId,
    /// `N×N`, initialised with [`recency_prior`].
    pub position_bias: ParamId,
    pub ln_memory: LayerNorm,
    pub blocks: Vec<DecoderBlock>,
    pub ln_out: LayerNorm,
    pub head: Linear,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        n: usize,
        dim: usize,
        blocks: usize,
        heads: usize,
        hidden: usize,
        init_std: f64,
        rng: &mut R,
    ) -> Self {
        let queries = store.add_randn("decoder.queries", &[n, dim], init_std, rng);
        let source_pos = store.add_randn("decoder.source_pos", &[n, dim], init_std, rng);
        let position_bias = store.add("decoder.position_bias", recency_prior(n));
        let ln_memory = LayerNorm::new(store, "decoder.ln_memory", dim);
        let blocks = (0..blocks)
            .map(|l| {
                let name = format!("decoder.{l}");
                DecoderBlock {
                    ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), dim),
                    self_attn: MultiHeadAttention::new(
                        store,
                        &format!("{name}.self"),
                        dim,
                        heads,
                        rng,
                    ),
                    ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), dim),
                    cross_attn: MultiHeadAttention::new(
                        store,
                        &format!("{name}.cross"),
                        dim,
                        heads,
                        rng,
                    ),
                    ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), dim),
                    ff: FeedForward::new(store, &format!("{name}.ff"), dim, hidden, rng),
                }
            })
            .collect();
        let ln_out = LayerNorm::new(store, "decoder.ln_out", dim);
        let head = Linear::new(store, "decoder.head", dim, dim, true, rng);
        Self {
            queries,
            source_pos,
            position_bias,
            ln_memory,
            blocks,
            ln_out,
            head,
        }
    }

    /// `tokens` is `[R×D]` with source raster positions `positions`;
    /// `token_weights` is `[1×R]` (0 hides a token). Returns `[N×D]`.
    pub fn forward<S: Scalar>(
        &self,
        tape: &Tape<S>,
        store: &ParamStore<S>,
        tokens: Var,
        positions: &[usize],
        token_weights: Var,
    ) -> Result<Var> {
        let r = tape.shape(tokens)[0];
        if positions.len() != r || tape.shape(token_weights) != [1, r] {
            return Err(Error::Shape {
                op: "decoder",
                lhs: tape.shape(tokens),
                rhs: tape.shape(token_weights),
            });
        }
        let queries = tape.param(store, self.queries);
        let n = tape.shape(queries)[0];
        let pos = tape.gather_rows(tape.param(store, self.source_pos), positions)?;
        let memory = self
            .ln_memory
            .forward(tape, store, tape.add(tokens, pos)?)?;
        let cross_w = tape.broadcast_rows(token_weights, n)?;
        let table = tape.transpose(tape.param(store, self.position_bias))?;
        let bias = tape.transpose(tape.gather_rows(table, positions)?)?;
        let all = tape.constant(Tensor::ones(&[n, n]));
        let mut h = queries;
        for b in &self.blocks {
            let a = b.ln_self.forward(tape, store, h)?;
            h = tape.add(h, b.self_attn.forward(tape, store, a, a, all)?)?;
            let c = b.ln_cross.forward(tape, store, h)?;
            h = tape.add(
                h,
                b.cross_attn
                    .forward_biased(tape, store, c, memory, cross_w, Some(bias))?,
            )?;
            let f = b.ln_ff.forward(tape, store, h)?;
            h = tape.add(h, b.ff.forward(tape, store, f)?)?;
        }
        let h = self.ln_out.forward(tape, store, h)?;
        self.head.forward(tape, store, h)
    }
}

/// Distance penalty favouring the closest source position at or before the
/// query position: `−|i − p|`, with an extra `−FUTURE_PENALTY` when `p > i`.
pub fn recency_prior<S: Scalar>(n: usize) -> Tensor<S> {
    const FUTURE_PENALTY: f64 = 4.0;
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for p in 0..n {
            let d = i.abs_diff(p) as f64;
            let extra = if p > i { FUTURE_PENALTY } else { 0.0 };
            t.data_mut()[i * n + p] = S::lit(-(d + extra));
        }
    }
    t
}
