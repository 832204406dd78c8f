//! Decoder-only language model over one shared vocabulary of text ids and
//! visual code ids, trained with next-token cross-entropy on mixed
//! image/text sequences.

mod generate;
mod model;
mod train;

#[cfg(test)]
mod tests;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::AdamWConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::TokenizedImage;

pub use generate::{
    caption_log_likelihood, cfg_logits, generate_image_tokens, generate_text, image_log_likelihood,
    rerank_by_likelihood, top_k_sample, GenerateConfig, GeneratedImage,
};
pub use model::{Lm, LmBlock};
pub use train::{
    evaluate_loss, example_sequence, text_sequence, train_lm, with_eos, LmExample, LmStep,
};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const IMG: usize = 2;
pub const IMG_END: usize = 3;
pub const NUM_SPECIAL: usize = 4;

/// Id layout: specials, then `text_size` text ids, then one id per code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub text_size: usize,
    pub codebook_size: usize,
}

impl Vocabulary {
    pub fn new(text_size: usize, codebook_size: usize) -> Result<Self> {
        if text_size == 0 || codebook_size == 0 {
            return Err(Error::Config(format!(
                "vocabulary needs text and code ids, got {text_size} and {codebook_size}"
            )));
        }
        Ok(Self {
            text_size,
            codebook_size,
        })
    }

    pub fn size(&self) -> usize {
        NUM_SPECIAL + self.text_size + self.codebook_size
    }

    pub fn text_range(&self) -> Range<usize> {
        NUM_SPECIAL..NUM_SPECIAL + self.text_size
    }

    pub fn visual_range(&self) -> Range<usize> {
        NUM_SPECIAL + self.text_size..self.size()
    }

    /// The last text id doubles as end-of-text.
    pub fn eos_text(&self) -> usize {
        self.text_size - 1
    }

    pub fn text_id(&self, t: usize) -> Result<usize> {
        if t >= self.text_size {
            return Err(Error::invalid(format!(
                "text token {t} outside [0, {})",
                self.text_size
            )));
        }
        Ok(NUM_SPECIAL + t)
    }

    pub fn visual_id(&self, code: usize) -> Result<usize> {
        if code >= self.codebook_size {
            return Err(Error::invalid(format!(
                "code {code} outside [0, {})",
                self.codebook_size
            )));
        }
        Ok(NUM_SPECIAL + self.text_size + code)
    }

    pub fn is_visual(&self, id: usize) -> bool {
        self.visual_range().contains(&id)
    }

    pub fn is_text(&self, id: usize) -> bool {
        self.text_range().contains(&id)
    }

    pub fn code_of(&self, id: usize) -> Option<usize> {
        self.is_visual(id)
            .then(|| id - NUM_SPECIAL - self.text_size)
    }

    pub fn text_of(&self, id: usize) -> Option<usize> {
        self.is_text(id).then(|| id - NUM_SPECIAL)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    ImageFirst,
    TextFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    /// Image-first sequences feed the projected merger outputs in place of
    /// the code embeddings.
    #[default]
    Continuous,
    Quantized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisualTarget {
    /// Cross-entropy over code ids.
    #[default]
    Classification,
    /// Cosine regression onto the next token's continuous feature.
    Regression,
}

/// Codes plus their continuous merger features for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualTokens<S> {
    pub codes: Vec<usize>,
    /// `[T×D]`.
    pub features: Tensor<S>,
}

impl<S: Clone> From<&TokenizedImage<S>> for VisualTokens<S> {
    fn from(t: &TokenizedImage<S>) -> Self {
        Self {
            codes: t.codes.clone(),
            features: t.merged_features.clone(),
        }
    }
}

/// Token ids plus everything needed to embed and supervise them.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSequence<S> {
    pub ids: Vec<usize>,
    /// `loss_mask[i]`: whether predicting `ids[i]` from `ids[..i]` is
    /// supervised. Always false at 0.
    pub loss_mask: Vec<bool>,
    pub order: Option<Order>,
    /// Positions of the visual ids.
    pub image_span: Option<Range<usize>>,
    /// `[T×D]` features of the visual tokens, when an image is present.
    pub visual_features: Option<Tensor<S>>,
    /// Visual positions embed `visual_features` instead of their ids.
    pub continuous: bool,
}

impl<S> MultimodalSequence<S> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions whose input embedding is replaced by a projected feature.
    pub fn override_positions(&self) -> Vec<usize> {
        match (&self.image_span, self.continuous) {
            (Some(span), true) => span.clone().collect(),
            _ => Vec::new(),
        }
    }

    /// Span of the second modality: what the first one conditions.
    pub fn target_span(&self) -> Range<usize> {
        match (self.order, &self.image_span) {
            (Some(Order::ImageFirst), Some(span)) => span.end + 1..self.ids.len(),
            (Some(Order::TextFirst), Some(span)) => span.start..self.ids.len(),
            _ => 1..self.ids.len(),
        }
    }

    /// Restricts supervision. `specials = false` drops targets that are
    /// special ids; `prompt = false` keeps only the target span.
    pub fn apply_loss_policy(&mut self, vocab: &Vocabulary, specials: bool, prompt: bool) {
        let target = self.target_span();
        for i in 1..self.ids.len() {
            let special = self.ids[i] < NUM_SPECIAL;
            if (!specials && special) || (!prompt && !target.contains(&i)) {
                self.loss_mask[i] = false;
            }
        }
        debug_assert!(self.ids.iter().all(|&id| id < vocab.size()));
    }
}

/// Builds `[BOS][IMG] v… [/IMG] t…` (image first) or
/// `[BOS] t… [IMG] v… [/IMG]` (text first). `text` holds text indices,
/// codes are raw code indices. Continuous input applies to image-first
/// sequences only: in text-first sequences the image is the generation
/// target and is always fed back as code ids.
pub fn build_sequence<S: Scalar>(
    vocab: &Vocabulary,
    image: Option<&VisualTokens<S>>,
    text: &[usize],
    order: Order,
    input_mode: InputMode,
) -> Result<MultimodalSequence<S>> {
    if image.is_none() && text.is_empty() {
        return Err(Error::invalid("sequence needs an image or text"));
    }
    let text_ids = text
        .iter()
        .map(|&t| vocab.text_id(t))
        .collect::<Result<Vec<_>>>()?;
    let mut ids = vec![BOS];
    let Some(img) = image else {
        ids.extend(text_ids);
        let n = ids.len();
        return Ok(MultimodalSequence {
            loss_mask: (0..n).map(|i| i > 0).collect(),
            ids,
            order: None,
            image_span: None,
            visual_features: None,
            continuous: false,
        });
    };
    if img.codes.is_empty() {
        return Err(Error::invalid("image has no visual tokens (T = 0)"));
    }
    if img.features.rank() != 2 || img.features.rows() != img.codes.len() {
        return Err(Error::invalid(format!(
            "{} codes but features {:?}",
            img.codes.len(),
            img.features.shape()
        )));
    }
    let visual = img
        .codes
        .iter()
        .map(|&c| vocab.visual_id(c))
        .collect::<Result<Vec<_>>>()?;
    if order == Order::TextFirst {
        ids.extend(&text_ids);
    }
    ids.push(IMG);
    let start = ids.len();
    ids.extend(visual);
    let span = start..ids.len();
    ids.push(IMG_END);
    if order == Order::ImageFirst {
        ids.extend(text_ids);
    }
    let n = ids.len();
    Ok(MultimodalSequence {
        loss_mask: (0..n).map(|i| i > 0).collect(),
        ids,
        order: Some(order),
        image_span: Some(span),
        visual_features: Some(img.features.clone()),
        continuous: order == Order::ImageFirst && input_mode == InputMode::Continuous,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub context: usize,
    pub init_std: f64,
    pub input_mode: InputMode,
    pub visual_target: VisualTarget,
    /// Only the visual input projection is trained.
    pub frozen: bool,
    /// Probability that a training batch is drawn from the text-only set.
    pub mix_ratio: f64,
    /// Probability that a paired example is laid out image first.
    pub image_first_prob: f64,
    pub loss_on_specials: bool,
    pub loss_on_prompt: bool,
    pub steps: usize,
    pub batch_size: usize,
    /// `total_steps` is overridden by `steps` at training time.
    pub optimizer: AdamWConfig,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            blocks: 2,
            heads: 2,
            ffn_hidden: 256,
            context: 64,
            init_std: crate::autodiff::nn::INIT_STD,
            input_mode: InputMode::Continuous,
            visual_target: VisualTarget::Classification,
            frozen: false,
            mix_ratio: 0.0,
            image_first_prob: 0.5,
            loss_on_specials: true,
            loss_on_prompt: true,
            steps: 2000,
            batch_size: 16,
            optimizer: AdamWConfig::lm_stage(),
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("lm: {m}")));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} must split into {} heads",
                self.d_model, self.heads
            ));
        }
        if self.blocks == 0 || self.ffn_hidden == 0 || self.context < 2 {
            return bad("blocks, ffn_hidden must be positive and context >= 2".into());
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) || !(0.0..=1.0).contains(&self.image_first_prob) {
            return bad("mix_ratio and image_first_prob must lie in [0, 1]".into());
        }
        if self.batch_size == 0 || !(self.init_std > 0.0) {
            return bad("batch_size and init_std must be positive".into());
        }
        Ok(())
    }
}
