use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{OptimizerState, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synth::PatchGrid;
use crate::tokenizer::codebook::perplexity;
use crate::tokenizer::model::rate_term;
use crate::tokenizer::{Tokenizer, TokenizerConfig};

/// Per-step training record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenizerStep {
    pub step: usize,
    pub loss: f64,
    pub recon: f64,
    pub rate: f64,
    pub commit: f64,
    pub keep_fraction: f64,
    pub perplexity: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub tau: f64,
}

/// Endless shuffled pass over `0..n`.
pub(crate) struct Batcher {
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    pub(crate) fn next<R: Rng + ?Sized>(&mut self, size: usize, rng: &mut R) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn batch_mean<S: Scalar>(tape: &Tape<S>, parts: &[Var]) -> Result<Var> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = tape.add(acc, p)?;
    }
    tape.scale(acc, S::lit(1.0 / parts.len() as f64))
}

/// Trains a fresh tokenizer on `items`. `on_step` sees every step record in
/// order and may abort training by returning an error.
pub fn train_tokenizer<S: Scalar>(
    items: &[PatchGrid<S>],
    config: &TokenizerConfig,
    seed: u64,
    on_step: &mut dyn FnMut(&TokenizerStep) -> Result<()>,
) -> Result<Tokenizer<S>> {
    config.validate()?;
    if items.is_empty() {
        return Err(Error::invalid("tokenizer training needs at least one grid"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Tokenizer::<S>::new(config.clone(), &mut rng)?;
    for g in items {
        model.check_grid(g)?;
    }
    let mut opt_cfg = config.optimizer.clone();
    opt_cfg.total_steps = config.steps;
    let mut opt = OptimizerState::new(opt_cfg, &model.store);
    let mut batcher = Batcher::new(items.len());

    for step in 0..config.steps {
        let batch = batcher.next(config.batch_size, &mut rng);
        let tau = config.tau_at(step);
        if !model.codebook.initialized {
            let tape = Tape::new();
            let mut feats = Vec::new();
            for &i in &batch {
                feats.extend(
                    model
                        .forward_item(&tape, &items[i], tau, &mut rng)?
                        .features,
                );
            }
            model.codebook.init_from(&feats, &mut rng);
        }

        let tape = Tape::new();
        let (mut recons, mut keeps, mut commits) = (Vec::new(), Vec::new(), Vec::new());
        let (mut feats, mut codes) = (Vec::new(), Vec::new());
        let mut kept = 0usize;
        for &i in &batch {
            let f = model.forward_item(&tape, &items[i], tau, &mut rng)?;
            recons.push(f.recon);
            keeps.push(f.keep);
            commits.push(f.commit);
            kept += f.mask.kept_count();
            feats.extend(f.features);
            codes.extend(f.codes);
        }
        let recon = batch_mean(&tape, &recons)?;
        let keep = batch_mean(&tape, &keeps)?;
        let commit = batch_mean(&tape, &commits)?;
        let rate = rate_term(&tape, keep, config.rho, config.lambda)?;
        let loss = tape.add(
            tape.add(recon, rate)?,
            tape.scale(commit, S::lit(config.commitment))?,
        )?;
        let scalar = |v: Var| tape.value(v).item().as_f64();
        let (loss_v, recon_v, rate_v, commit_v) =
            (scalar(loss), scalar(recon), scalar(rate), scalar(commit));
        if !loss_v.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("tokenizer loss {loss_v}"),
            });
        }
        let grads = tape.backward(loss)?;
        model.store.zero_grad();
        grads.accumulate_into(&mut model.store);
        let lr = opt.current_lr();
        let grad_norm = opt.step(&mut model.store);
        if !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: "non-finite gradient norm".into(),
            });
        }

        let mut hist = vec![0u64; model.codebook.len()];
        for &c in &codes {
            hist[c] += 1;
        }
        model.codebook.ema_update(
            &feats,
            &codes,
            config.ema_decay,
            config.dead_code_steps,
            &mut rng,
        );

        let n = items[batch[0]].len();
        on_step(&TokenizerStep {
            step,
            loss: loss_v,
            recon: recon_v,
            rate: rate_v,
            commit: commit_v,
            keep_fraction: kept as f64 / (batch.len() * n) as f64,
            perplexity: perplexity(&hist),
            lr,
            grad_norm,
            tau,
        })?;
    }
    Ok(model)
}
