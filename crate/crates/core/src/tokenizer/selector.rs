use rand::Rng;

use crate::autodiff::nn::Linear;
use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::{DecisionMask, Mode, KEEP};

/// Per-patch keep/drop scorer.
///
/// Each patch is scored from its own feature, the feature of the preceding
/// patch in raster order (zeros before the first) and their element-wise
/// product, so the MLP can tell where the content changes.
#[derive(Debug, Clone)]
pub struct Selector {
    pub hidden: Linear,
    pub out: Linear,
}

impl Selector {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Linear::new(store, "selector.hidden", 3 * dim, hidden, true, rng),
            out: Linear::new(store, "selector.out", hidden, 2, true, rng),
        }
    }

    /// Logits `π` `[N×2]`.
    pub fn logits<S: Scalar>(&self, tape: &Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        let (n, d) = (shape[0], shape[1]);
        let zero = tape.constant(Tensor::zeros(&[1, d]));
        let prev = if n == 1 {
            zero
        } else {
            let head: Vec<usize> = (0..n - 1).collect();
            let shifted = tape.gather_rows(x, &head)?;
            tape.concat_rows(&[zero, shifted])?
        };
        let sim = tape.mul(x, prev)?;
        let input = tape.concat_cols(&[x, prev, sim])?;
        let h = tape.gelu(self.hidden.forward(tape, store, input)?)?;
        self.out.forward(tape, store, h)
    }

    /// Samples the decision mask. Returns the mask and the keep column as a
    /// `[N×1]` variable whose forward value is the hard `M` and whose
    /// gradient flows into the relaxed distribution (straight-through).
    ///
    /// If every patch would be dropped, the patch with the largest keep
    /// probability is kept.
    pub fn select<S: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &Tape<S>,
        store: &ParamStore<S>,
        x: Var,
        tau: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(DecisionMask<S>, Var)> {
        if !(tau > 0.0) {
            return Err(Error::invalid(format!(
                "selector temperature {tau} must be positive"
            )));
        }
        let pi = self.logits(tape, store, x)?;
        let n = tape.shape(pi)[0];
        let soft = match mode {
            Mode::Train => relaxed_mask(tape, pi, gumbel_noise(n, rng), tau)?,
            Mode::Infer => tape.softmax(pi, 1)?,
        };
        let keep = hard_keep(&tape.value(soft));
        let mut onehot = Tensor::zeros(&[n, 2]);
        for (i, &k) in keep.iter().enumerate() {
            onehot.data_mut()[i * 2 + if k { KEEP } else { 1 - KEEP }] = S::one();
        }
        let st = tape.straight_through(soft, onehot)?;
        let m = tape.slice_cols(st, KEEP, 1)?;
        let mask = DecisionMask {
            pi: tape.value(pi).clone(),
            pi_hat: tape.value(soft).clone(),
            keep,
            tau,
        };
        Ok((mask, m))
    }
}

/// Argmax per row with the top-1 guard; ties keep.
pub(crate) fn hard_keep<S: Scalar>(p: &Tensor<S>) -> Vec<bool> {
    let n = p.rows();
    let mut keep: Vec<bool> = (0..n).map(|i| p.at(i, KEEP) >= p.at(i, 1 - KEEP)).collect();
    if !keep.iter().any(|&k| k) {
        let best = (0..n)
            .max_by(|&a, &b| {
                p.at(a, KEEP)
                    .partial_cmp(&p.at(b, KEEP))
                    .expect("finite")
                    .then(b.cmp(&a))
            })
            .expect("non-empty grid");
        keep[best] = true;
    }
    keep
}

/// Standard Gumbel samples `−ln(−ln u)`, `[n×2]`.
pub fn gumbel_noise<S: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor<S> {
    let data = (0..2 * n)
        .map(|_| {
            let u: f64 = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12);
            S::lit(-(-u.ln()).ln())
        })
        .collect();
    Tensor::new(vec![n, 2], data).expect("n >= 1")
}

/// `softmax((log_softmax(π) + G) / τ)` row-wise.
pub fn relaxed_mask<S: Scalar>(tape: &Tape<S>, pi: Var, noise: Tensor<S>, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!(
            "temperature {tau} must be positive"
        )));
    }
    let logp = tape.log_softmax(pi)?;
    let g = tape.constant(noise);
    let z = tape.scale(tape.add(logp, g)?, S::lit(1.0 / tau))?;
    tape.softmax(z, 1)
}
