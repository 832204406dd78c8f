use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{
    build_sequence, with_eos, Lm, MultimodalSequence, Order, VisualTokens, BOS, IMG, IMG_END,
};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub alpha_cfg: f64,
    pub top_k: usize,
    pub temperature: f64,
    /// Maximum number of sampled tokens.
    pub max_len: usize,
    /// Image samples drawn per prompt before reranking.
    pub candidates: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            alpha_cfg: 1.5,
            top_k: 16,
            temperature: 1.0,
            max_len: 32,
            candidates: 4,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || !(self.temperature > 0.0) || self.max_len == 0 || self.candidates == 0
        {
            return Err(Error::Config(
                "generate: top_k, temperature, max_len and candidates must be positive".into(),
            ));
        }
        if !self.alpha_cfg.is_finite() {
            return Err(Error::Config("generate: alpha_cfg must be finite".into()));
        }
        Ok(())
    }
}

/// `uncond + α (cond − uncond)`. The endpoints return the inputs exactly.
pub fn cfg_logits(cond: &[f64], uncond: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if cond.len() != uncond.len() {
        return Err(Error::Shape {
            op: "cfg_logits",
            lhs: vec![cond.len()],
            rhs: vec![uncond.len()],
        });
    }
    if alpha == 1.0 {
        return Ok(cond.to_vec());
    }
    if alpha == 0.0 {
        return Ok(uncond.to_vec());
    }
    Ok(cond
        .iter()
        .zip(uncond)
        .map(|(&c, &u)| u + alpha * (c - u))
        .collect())
}

/// Samples from the `k` largest logits after dividing by `temperature`.
/// `k` clamps to the row length; `−∞` entries are never drawn. Ties in the
/// ranking go to the lower index.
pub fn top_k_sample<R: Rng + ?Sized>(
    logits: &[f64],
    k: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<usize> {
    if k == 0 || !(temperature > 0.0) {
        return Err(Error::invalid(format!(
            "top-k needs k >= 1 and temperature > 0, got {k} and {temperature}"
        )));
    }
    if logits.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::NonFinite { op: "top-k logits" });
    }
    let mut idx: Vec<usize> = (0..logits.len())
        .filter(|&i| logits[i].is_finite())
        .collect();
    if idx.is_empty() {
        return Err(Error::invalid("no finite logit to sample"));
    }
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k);
    let top = logits[idx[0]];
    let weights: Vec<f64> = idx
        .iter()
        .map(|&i| ((logits[i] - top) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, &w) in idx.iter().zip(&weights) {
        if u < w {
            return Ok(i);
        }
        u -= w;
    }
    Ok(idx[idx
        .iter()
        .zip(&weights)
        .rposition(|(_, &w)| w > 0.0)
        .unwrap_or(0)])
}

fn mask_to(logits: &mut [f64], allowed: impl Fn(usize) -> bool) {
    for (i, l) in logits.iter_mut().enumerate() {
        if !allowed(i) {
            *l = f64::NEG_INFINITY;
        }
    }
}

fn push<S>(seq: &mut MultimodalSequence<S>, id: usize) {
    seq.ids.push(id);
    seq.loss_mask.push(true);
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GeneratedImage {
    pub codes: Vec<usize>,
    /// Stopped at `max_len` (or the context) without emitting `[/IMG]`.
    pub truncated: bool,
}

/// Samples visual codes after `prompt`, which must not yet contain
/// `[IMG]`. Guidance blends the prompted stream with a `[BOS][IMG]` stream.
pub fn generate_image_tokens<S: Scalar, R: Rng + ?Sized>(
    model: &Lm<S>,
    prompt: &MultimodalSequence<S>,
    config: &GenerateConfig,
    rng: &mut R,
) -> Result<GeneratedImage> {
    config.validate()?;
    if prompt.image_span.is_some() || prompt.ids.contains(&IMG) {
        return Err(Error::invalid(
            "image prompt already contains an image span",
        ));
    }
    let vocab = model.vocab;
    let mut cond = prompt.clone();
    push(&mut cond, IMG);
    let mut uncond = MultimodalSequence {
        ids: vec![BOS, IMG],
        loss_mask: vec![false, true],
        order: None,
        image_span: None,
        visual_features: None,
        continuous: false,
    };
    let mut codes = Vec::new();
    while codes.len() < config.max_len && cond.len() < model.config.context {
        let c = model.next_logits(&cond)?;
        let mut l = if config.alpha_cfg == 1.0 {
            c
        } else {
            cfg_logits(&c, &model.next_logits(&uncond)?, config.alpha_cfg)?
        };
        mask_to(&mut l, |i| i == IMG_END || vocab.is_visual(i));
        let id = top_k_sample(&l, config.top_k, config.temperature, rng)?;
        if id == IMG_END {
            return Ok(GeneratedImage {
                codes,
                truncated: false,
            });
        }
        codes.push(vocab.code_of(id).expect("masked to visual ids"));
        push(&mut cond, id);
        if uncond.len() < model.config.context {
            push(&mut uncond, id);
        }
    }
    Ok(GeneratedImage {
        codes,
        truncated: true,
    })
}

/// Samples text indices after an image-first prefix until end-of-text or
/// `max_len`. The end-of-text index is not returned.
pub fn generate_text<S: Scalar, R: Rng + ?Sized>(
    model: &Lm<S>,
    image: &VisualTokens<S>,
    config: &GenerateConfig,
    rng: &mut R,
) -> Result<Vec<usize>> {
    config.validate()?;
    let vocab = model.vocab;
    let mut seq = build_sequence(
        &vocab,
        Some(image),
        &[],
        Order::ImageFirst,
        model.config.input_mode,
    )?;
    let eos = vocab.text_id(vocab.eos_text())?;
    let mut out = Vec::new();
    while out.len() < config.max_len && seq.len() < model.config.context {
        let mut l = model.next_logits(&seq)?;
        mask_to(&mut l, |i| vocab.is_text(i));
        let id = top_k_sample(&l, config.top_k, config.temperature, rng)?;
        if id == eos {
            break;
        }
        out.push(vocab.text_of(id).expect("masked to text ids"));
        push(&mut seq, id);
    }
    Ok(out)
}

/// `log p(caption, end-of-text | image)` under image-first layout.
pub fn caption_log_likelihood<S: Scalar>(
    model: &Lm<S>,
    image: &VisualTokens<S>,
    caption: &[usize],
) -> Result<f64> {
    let vocab = model.vocab;
    let seq = build_sequence(
        &vocab,
        Some(image),
        &with_eos(&vocab, caption),
        Order::ImageFirst,
        model.config.input_mode,
    )?;
    let from = seq.image_span.as_ref().expect("image present").end + 1;
    model.log_likelihood(&seq, from)
}

/// `log p([IMG] codes [/IMG] | prompt)`, skipping the fixed `[IMG]`.
pub fn image_log_likelihood<S: Scalar>(
    model: &Lm<S>,
    prompt: &MultimodalSequence<S>,
    codes: &[usize],
) -> Result<f64> {
    let mut seq = prompt.clone();
    push(&mut seq, IMG);
    for &c in codes {
        push(&mut seq, model.vocab.visual_id(c)?);
    }
    push(&mut seq, IMG_END);
    model.log_likelihood(&seq, prompt.len() + 1)
}

/// Index of the candidate with the highest conditional log-likelihood;
/// the earliest wins ties.
pub fn rerank_by_likelihood<S: Scalar>(
    model: &Lm<S>,
    prompt: &MultimodalSequence<S>,
    candidates: &[Vec<usize>],
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::invalid("rerank needs at least one candidate"));
    }
    if candidates.len() == 1 {
        return Ok(0);
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, c) in candidates.iter().enumerate() {
        let ll = image_log_likelihood(model, prompt, c)?;
        if ll > best.1 {
            best = (i, ll);
        }
    }
    Ok(best.0)
}
