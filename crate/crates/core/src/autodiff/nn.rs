//! Parameterised layers built from tape ops.

use rand::Rng;

use crate::autodiff::params::{ParamId, ParamStore};
use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default standard deviation for freshly created weights.
pub const INIT_STD: f64 = 0.02;

pub const LN_EPS: f64 = 1e-5;

/// Scaled dot-product attention `softmax(q kᵀ/√D + mask) v` with an additive
/// mask whose entries are `0` or `−∞`. Fully masked rows yield zero rows.
pub fn attention<S: Scalar>(
    tape: &Tape<S>,
    q: Var,
    k: Var,
    v: Var,
    additive_mask: &Tensor<S>,
) -> Result<Var> {
    let weights = tape.constant(additive_mask.map(S::exp));
    attention_weighted(tape, q, k, v, weights)
}

/// Same as [`attention`] with multiplicative key weights in place of the
/// additive mask (`w = exp(mask)`); the weights may carry gradients.
pub fn attention_weighted<S: Scalar>(
    tape: &Tape<S>,
    q: Var,
    k: Var,
    v: Var,
    weights: Var,
) -> Result<Var> {
    attention_biased(tape, q, k, v, weights, None)
}

/// [`attention_weighted`] with an optional additive score bias `T_q × T_k`
/// (added after the `1/√D` scaling).
pub fn attention_biased<S: Scalar>(
    tape: &Tape<S>,
    q: Var,
    k: Var,
    v: Var,
    weights: Var,
    bias: Option<Var>,
) -> Result<Var> {
    let (qs, ks) = (tape.shape(q), tape.shape(k));
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(Error::Shape {
            op: "attention",
            lhs: qs,
            rhs: ks,
        });
    }
    let d = qs[1];
    let scores = tape.matmul_t(q, k)?;
    let mut scores = tape.scale(scores, S::lit(1.0 / (d as f64).sqrt()))?;
    if let Some(b) = bias {
        scores = tape.add(scores, b)?;
    }
    let probs = tape.weighted_softmax(scores, weights)?;
    tape.matmul(probs, v)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add_randn(format!("{name}.w"), &[fan_in, fan_out], INIT_STD, rng);
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])));
        Self { w, b }
    }

    pub fn forward<S: Scalar>(&self, tape: &Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, tape.param(store, self.w))?;
        match self.b {
            Some(b) => tape.add_bias(y, tape.param(store, b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        tape.layer_norm(
            x,
            tape.param(store, self.gamma),
            tape.param(store, self.beta),
            S::lit(LN_EPS),
        )
    }
}

/// Two-layer GELU MLP.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, store, x)?;
        let h = tape.gelu(h)?;
        self.down.forward(tape, store, h)
    }
}

/// Multi-head attention with separate query and key/value inputs.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(
            heads > 0 && dim % heads == 0,
            "dim {dim} not divisible by {heads} heads"
        );
        Self {
            wq: Linear::new(store, &format!("{name}.q"), dim, dim, false, rng),
            wk: Linear::new(store, &format!("{name}.k"), dim, dim, false, rng),
            wv: Linear::new(store, &format!("{name}.v"), dim, dim, false, rng),
            wo: Linear::new(store, &format!("{name}.o"), dim, dim, false, rng),
            heads,
        }
    }

    /// `weights` is `T_q × T_k`, non-negative; zero means "cannot attend".
    pub fn forward<S: Scalar>(
        &self,
        tape: &Tape<S>,
        store: &ParamStore<S>,
        queries: Var,
        keys: Var,
        weights: Var,
    ) -> Result<Var> {
        self.forward_biased(tape, store, queries, keys, weights, None)
    }

    /// [`forward`](Self::forward) with a score bias shared by all heads.
    pub fn forward_biased<S: Scalar>(
        &self,
        tape: &Tape<S>,
        store: &ParamStore<S>,
        queries: Var,
        keys: Var,
        weights: Var,
        bias: Option<Var>,
    ) -> Result<Var> {
        let q = self.wq.forward(tape, store, queries)?;
        let k = self.wk.forward(tape, store, keys)?;
        let v = self.wv.forward(tape, store, keys)?;
        let dim = tape.shape(q)[1];
        let hd = dim / self.heads;
        let out = if self.heads == 1 {
            attention_biased(tape, q, k, v, weights, bias)?
        } else {
            let mut parts = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let qh = tape.slice_cols(q, h * hd, hd)?;
                let kh = tape.slice_cols(k, h * hd, hd)?;
                let vh = tape.slice_cols(v, h * hd, hd)?;
                parts.push(attention_biased(tape, qh, kh, vh, weights, bias)?);
            }
            tape.concat_cols(&parts)?
        };
        self.wo.forward(tape, store, out)
    }
}

/// `T×T` lower-triangular 0/1 matrix (row `i` may see columns `≤ i`).
pub fn causal_weights<S: Scalar>(t: usize) -> Tensor<S> {
    let mut w = Tensor::zeros(&[t, t]);
    for i in 0..t {
        for j in 0..=i {
            w.data_mut()[i * t + j] = S::one();
        }
    }
    w
}

/// Additive form of [`causal_weights`]: `0` on and below the diagonal, `−∞` above.
pub fn causal_mask<S: Scalar>(t: usize) -> Tensor<S> {
    causal_weights::<S>(t).map(|w| {
        if w > S::zero() {
            S::zero()
        } else {
            S::neg_infinity()
        }
    })
}
