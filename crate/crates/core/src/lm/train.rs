use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{OptimizerState, Tape};
use crate::error::{Error, Result};
use crate::lm::{
    build_sequence, InputMode, Lm, LmConfig, MultimodalSequence, Order, VisualTokens, Vocabulary,
};
use crate::scalar::Scalar;
use crate::tokenizer::Batcher;

/// One image with its caption (text indices, without end-of-text).
#[derive(Debug, Clone, PartialEq)]
pub struct LmExample<S> {
    pub visual: VisualTokens<S>,
    pub caption: Vec<usize>,
}

/// Caption followed by the end-of-text index.
pub fn with_eos(vocab: &Vocabulary, caption: &[usize]) -> Vec<usize> {
    let mut t = caption.to_vec();
    t.push(vocab.eos_text());
    t
}

/// Sequence for a paired example, with the config's loss policy applied.
pub fn example_sequence<S: Scalar>(
    vocab: &Vocabulary,
    config: &LmConfig,
    ex: &LmExample<S>,
    order: Order,
) -> Result<MultimodalSequence<S>> {
    let mut seq = build_sequence(
        vocab,
        Some(&ex.visual),
        &with_eos(vocab, &ex.caption),
        order,
        config.input_mode,
    )?;
    seq.apply_loss_policy(vocab, config.loss_on_specials, config.loss_on_prompt);
    Ok(seq)
}

pub fn text_sequence<S: Scalar>(
    vocab: &Vocabulary,
    config: &LmConfig,
    text: &[usize],
) -> Result<MultimodalSequence<S>> {
    let mut seq = build_sequence(
        vocab,
        None,
        &with_eos(vocab, text),
        Order::TextFirst,
        InputMode::Quantized,
    )?;
    seq.apply_loss_policy(vocab, config.loss_on_specials, true);
    Ok(seq)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LmStep {
    pub step: usize,
    /// Mean per-target loss of the batch.
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub text_only: bool,
    pub targets: usize,
}

/// Target-weighted mean loss over `seqs`, no gradients.
pub fn evaluate_loss<S: Scalar>(model: &Lm<S>, seqs: &[MultimodalSequence<S>]) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for s in seqs {
        let tape = Tape::new();
        let (sum, n) = model.loss_sum(&tape, &model.store, s)?;
        total += tape.value(sum).item().as_f64();
        count += n;
    }
    if count == 0 {
        return Err(Error::invalid("no sequences to evaluate"));
    }
    Ok(total / count as f64)
}

/// Trains a fresh model. Each step draws a text-only batch with probability
/// `mix_ratio` and a paired batch otherwise; every paired example is laid
/// out image first with probability `image_first_prob`.
pub fn train_lm<S: Scalar>(
    pairs: &[LmExample<S>],
    text_only: &[Vec<usize>],
    vocab: Vocabulary,
    config: &LmConfig,
    seed: u64,
    on_step: &mut dyn FnMut(&LmStep) -> Result<()>,
) -> Result<Lm<S>> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("lm training needs at least one pair"));
    }
    if config.mix_ratio > 0.0 && text_only.is_empty() {
        return Err(Error::invalid(
            "mix_ratio > 0 but the text-only set is empty",
        ));
    }
    let feature_dim = pairs[0].visual.features.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Lm::new(config.clone(), vocab, feature_dim, &mut rng)?;
    let mut opt_cfg = config.optimizer.clone();
    opt_cfg.total_steps = config.steps;
    let mut opt = OptimizerState::new(opt_cfg, &model.store);
    let mut paired = Batcher::new(pairs.len());
    let mut texts = Batcher::new(text_only.len());

    for step in 0..config.steps {
        let is_text = config.mix_ratio > 0.0 && rng.random::<f64>() < config.mix_ratio;
        let seqs = if is_text {
            texts
                .next(config.batch_size, &mut rng)
                .into_iter()
                .map(|i| text_sequence(&vocab, config, &text_only[i]))
                .collect::<Result<Vec<_>>>()?
        } else {
            let idx = paired.next(config.batch_size, &mut rng);
            let mut seqs = Vec::with_capacity(idx.len());
            for i in idx {
                let order = if rng.random::<f64>() < config.image_first_prob {
                    Order::ImageFirst
                } else {
                    Order::TextFirst
                };
                seqs.push(example_sequence(&vocab, config, &pairs[i], order)?);
            }
            seqs
        };

        let tape = Tape::new();
        let mut total = None;
        let mut count = 0usize;
        for s in &seqs {
            let (sum, n) = model.loss_sum(&tape, &model.store, s)?;
            total = Some(match total {
                None => sum,
                Some(acc) => tape.add(acc, sum)?,
            });
            count += n;
        }
        let loss = tape.scale(total.expect("non-empty batch"), S::lit(1.0 / count as f64))?;
        let loss_v = tape.value(loss).item().as_f64();
        if !loss_v.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!(
                    "lm loss {loss_v} on a {} batch of {} sequences",
                    if is_text { "text-only" } else { "paired" },
                    seqs.len()
                ),
            });
        }
        let grads = tape.backward(loss)?;
        model.store.zero_grad();
        grads.accumulate_into(&mut model.store);
        let lr = opt.current_lr();
        let grad_norm = opt.step(&mut model.store);
        on_step(&LmStep {
            step,
            loss: loss_v,
            lr,
            grad_norm,
            text_only: is_text,
            targets: count,
        })?;
    }
    Ok(model)
}
