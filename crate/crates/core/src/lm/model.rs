use rand::Rng;

use crate::autodiff::nn::{causal_weights, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::lm::{LmConfig, MultimodalSequence, VisualTarget, Vocabulary};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const COS_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct LmBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

/// Pre-norm causal transformer with one output head over the whole
/// vocabulary.
#[derive(Debug, Clone)]
pub struct Lm<S> {
    pub config: LmConfig,
    pub vocab: Vocabulary,
    /// Feature width of continuous visual inputs.
    pub feature_dim: usize,
    pub store: ParamStore<S>,
    pub embed: ParamId,
    pub positions: ParamId,
    pub visual_proj: Linear,
    pub blocks: Vec<LmBlock>,
    pub ln_out: LayerNorm,
    pub head: Linear,
    /// Present in regression mode: hidden state to next visual feature.
    pub regression_head: Option<Linear>,
}

impl<S: Scalar> Lm<S> {
    pub fn new<R: Rng + ?Sized>(
        config: LmConfig,
        vocab: Vocabulary,
        feature_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if feature_dim == 0 {
            return Err(Error::invalid("lm feature dimension must be positive"));
        }
        let c = &config;
        let d = c.d_model;
        let mut store = ParamStore::new();
        let embed = store.add_randn("lm.embed", &[vocab.size(), d], c.init_std, rng);
        let positions = store.add_randn("lm.positions", &[c.context, d], c.init_std, rng);
        let visual_proj = Linear::new(&mut store, "lm.visual_proj", feature_dim, d, true, rng);
        let blocks = (0..c.blocks)
            .map(|l| LmBlock {
                ln_attn: LayerNorm::new(&mut store, &format!("lm.block{l}.ln_attn"), d),
                attn: MultiHeadAttention::new(
                    &mut store,
                    &format!("lm.block{l}.attn"),
                    d,
                    c.heads,
                    rng,
                ),
                ln_ff: LayerNorm::new(&mut store, &format!("lm.block{l}.ln_ff"), d),
                ff: FeedForward::new(&mut store, &format!("lm.block{l}.ff"), d, c.ffn_hidden, rng),
            })
            .collect();
        let ln_out = LayerNorm::new(&mut store, "lm.ln_out", d);
        let head = Linear::new(&mut store, "lm.head", d, vocab.size(), true, rng);
        let regression_head = (c.visual_target == VisualTarget::Regression)
            .then(|| Linear::new(&mut store, "lm.regression_head", d, feature_dim, true, rng));
        if c.frozen {
            store.freeze_where(|n| !n.starts_with("lm.visual_proj"));
        }
        Ok(Self {
            config,
            vocab,
            feature_dim,
            store,
            embed,
            positions,
            visual_proj,
            blocks,
            ln_out,
            head,
            regression_head,
        })
    }

    /// Same model in another precision.
    pub fn cast<T: Scalar>(&self) -> Lm<T> {
        Lm {
            config: self.config.clone(),
            vocab: self.vocab,
            feature_dim: self.feature_dim,
            store: self.store.cast(),
            embed: self.embed,
            positions: self.positions,
            visual_proj: self.visual_proj.clone(),
            blocks: self.blocks.clone(),
            ln_out: self.ln_out.clone(),
            head: self.head.clone(),
            regression_head: self.regression_head.clone(),
        }
    }

    fn check(&self, seq: &MultimodalSequence<S>) -> Result<()> {
        if seq.ids.is_empty() {
            return Err(Error::invalid("empty sequence"));
        }
        if seq.ids.len() > self.config.context {
            return Err(Error::invalid(format!(
                "sequence length {} exceeds context {}",
                seq.ids.len(),
                self.config.context
            )));
        }
        if let Some(&id) = seq.ids.iter().find(|&&id| id >= self.vocab.size()) {
            return Err(Error::invalid(format!(
                "token id {id} outside vocabulary of {}",
                self.vocab.size()
            )));
        }
        Ok(())
    }

    /// Final hidden states `[S×D_lm]`.
    pub fn hidden(
        &self,
        tape: &Tape<S>,
        store: &ParamStore<S>,
        seq: &MultimodalSequence<S>,
    ) -> Result<Var> {
        self.check(seq)?;
        let s = seq.ids.len();
        let mut x = tape.gather_rows(tape.param(store, self.embed), &seq.ids)?;
        let over = seq.override_positions();
        if !over.is_empty() {
            let feats = seq
                .visual_features
                .as_ref()
                .ok_or_else(|| Error::invalid("continuous sequence without features"))?;
            if feats.cols() != self.feature_dim {
                return Err(Error::Shape {
                    op: "lm visual projection",
                    lhs: feats.shape().to_vec(),
                    rhs: vec![self.feature_dim],
                });
            }
            let proj = self
                .visual_proj
                .forward(tape, store, tape.constant(feats.clone()))?;
            x = tape.replace_rows(x, &over, proj)?;
        }
        let pos: Vec<usize> = (0..s).collect();
        x = tape.add(
            x,
            tape.gather_rows(tape.param(store, self.positions), &pos)?,
        )?;
        let causal = tape.constant(causal_weights(s));
        for b in &self.blocks {
            let a = b.ln_attn.forward(tape, store, x)?;
            x = tape.add(x, b.attn.forward(tape, store, a, a, causal)?)?;
            let f = b.ln_ff.forward(tape, store, x)?;
            x = tape.add(x, b.ff.forward(tape, store, f)?)?;
        }
        self.ln_out.forward(tape, store, x)
    }

    /// Next-token logits `[S×V]`; row `i` predicts `ids[i + 1]`.
    pub fn logits(
        &self,
        tape: &Tape<S>,
        store: &ParamStore<S>,
        seq: &MultimodalSequence<S>,
    ) -> Result<Var> {
        let h = self.hidden(tape, store, seq)?;
        self.head.forward(tape, store, h)
    }

    /// Summed loss over supervised targets and their count. Visual targets
    /// use `1 − cos` against the next feature in regression mode.
    pub fn loss_sum(
        &self,
        tape: &Tape<S>,
        store: &ParamStore<S>,
        seq: &MultimodalSequence<S>,
    ) -> Result<(Var, usize)> {
        if seq.loss_mask.len() != seq.ids.len() {
            return Err(Error::invalid(
                "loss mask length differs from sequence length",
            ));
        }
        let s = seq.ids.len();
        let h = self.hidden(tape, store, seq)?;
        let logits = self.head.forward(tape, store, h)?;
        let regression = self
            .regression_head
            .as_ref()
            .filter(|_| seq.image_span.is_some());
        let mut ce_w = vec![S::zero(); s];
        let mut targets = vec![0; s];
        let mut reg = Vec::new();
        for i in 1..s {
            if !seq.loss_mask[i] {
                continue;
            }
            if regression.is_some() && self.vocab.is_visual(seq.ids[i]) {
                reg.push(i);
            } else {
                ce_w[i - 1] = S::one();
                targets[i - 1] = seq.ids[i];
            }
        }
        let count = reg.len() + ce_w.iter().filter(|&&w| w > S::zero()).count();
        if count == 0 {
            return Err(Error::invalid("loss mask has no active position"));
        }
        let mut parts = Vec::new();
        let ce_count = count - reg.len();
        if ce_count > 0 {
            let ce = tape.cross_entropy(logits, &targets, &ce_w)?;
            parts.push(tape.scale(ce, S::lit(ce_count as f64))?);
        }
        if let Some(head) = regression {
            if !reg.is_empty() {
                let span = seq.image_span.clone().expect("image present");
                let feats = seq.visual_features.as_ref().expect("image features");
                let prev: Vec<usize> = reg.iter().map(|&i| i - 1).collect();
                let rows: Vec<usize> = reg.iter().map(|&i| i - span.start).collect();
                let pred = head.forward(tape, store, tape.gather_rows(h, &prev)?)?;
                let target = tape.constant(feats.select_rows(&rows)?);
                let cos = tape.row_cosine(pred, target, S::lit(COS_EPS))?;
                let n = S::lit(reg.len() as f64);
                parts.push(tape.sub(tape.constant(Tensor::scalar(n)), tape.sum(cos)?)?);
            }
        }
        let mut total = parts[0];
        for &p in &parts[1..] {
            total = tape.add(total, p)?;
        }
        Ok((total, count))
    }

    /// Mean per-target loss of one sequence.
    pub fn lm_loss(
        &self,
        tape: &Tape<S>,
        store: &ParamStore<S>,
        seq: &MultimodalSequence<S>,
    ) -> Result<Var> {
        let (sum, count) = self.loss_sum(tape, store, seq)?;
        tape.scale(sum, S::lit(1.0 / count as f64))
    }

    /// Log-probabilities of every next token, `[S][V]`, in f64.
    pub fn log_probs(&self, seq: &MultimodalSequence<S>) -> Result<Vec<Vec<f64>>> {
        let tape = Tape::new();
        let logits = self.logits(&tape, &self.store, seq)?;
        let v = tape.value(logits);
        Ok((0..v.rows()).map(|r| log_softmax(v.row(r))).collect())
    }

    /// Logits for the token after the last one.
    pub fn next_logits(&self, seq: &MultimodalSequence<S>) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let logits = self.logits(&tape, &self.store, seq)?;
        let v = tape.value(logits);
        Ok(v.row(v.rows() - 1).iter().map(|x| x.as_f64()).collect())
    }

    /// `Σ_{i ∈ from..S} log p(ids[i] | ids[..i])`.
    pub fn log_likelihood(&self, seq: &MultimodalSequence<S>, from: usize) -> Result<f64> {
        if from == 0 || from > seq.ids.len() {
            return Err(Error::invalid(format!(
                "likelihood start {from} outside [1, {}]",
                seq.ids.len()
            )));
        }
        let lp = self.log_probs(seq)?;
        Ok((from..seq.ids.len()).map(|i| lp[i - 1][seq.ids[i]]).sum())
    }
}

pub(crate) fn log_softmax<S: Scalar>(row: &[S]) -> Vec<f64> {
    let row: Vec<f64> = row.iter().map(|x| x.as_f64()).collect();
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - lse).collect()
}
