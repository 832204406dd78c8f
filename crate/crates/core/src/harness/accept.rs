//! The acceptance suite: property oracles plus end-to-end training runs on
//! the synthetic corpus, one verdict per criterion.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ablate::tokenizer_table;
use super::oracle;
use super::pipeline::{
    evaluate_lm, evaluate_tokenizer, governing_code_agreement, lm_examples, train_denoiser_stage,
    train_lm_stage, train_tokenizer_stage, Corpus, MetricsSink,
};
use super::CriterionResult;
use crate::autodiff::Tape;
use crate::denoiser::{diffusion_forward, diffusion_invert, draw_noise, noise_error, Denoiser};
use crate::error::{Error, Result};
use crate::lm::{
    build_sequence, cfg_logits, evaluate_loss, example_sequence, generate_image_tokens,
    text_sequence, with_eos, InputMode, Lm, LmExample, Order, VisualTokens, BOS, IMG,
};
use crate::persist::{
    load_denoiser, load_lm, load_tokenizer, save_denoiser, save_lm, save_tokenizer, Config,
    MetricsFormat,
};
use crate::synth::gen_items;
use crate::tensor::Tensor;
use crate::tokenizer::{gumbel_noise, relaxed_mask, AttnMode, Codebook, Tokenization, Tokenizer};

pub const CRITERIA: [(u8, &str); 12] = [
    (1, "gradient-oracle"),
    (2, "quantizer-oracle"),
    (3, "gumbel-softmax"),
    (4, "causality"),
    (5, "rate-control"),
    (6, "dynamic-allocation"),
    (7, "codebook-semantics"),
    (8, "lm-overfit"),
    (9, "cfg-endpoints"),
    (10, "cross-modal-alignment"),
    (11, "diffusion"),
    (12, "determinism-persistence"),
];

/// Seed the suite is run with unless overridden.
pub const ACCEPTANCE_SEED: u64 = 3;

const GRAD_TOL: f64 = 1e-4;
const OVERFIT_PAIRS: usize = 256;
const HELD_OUT: usize = 64;
const PROMPTS: usize = 100;
const SAMPLES: usize = 100;

/// Settings the suite was calibrated with: default sizes, a constant
/// Gumbel temperature of 0.2, target-span LM loss and a shorter denoiser run.
pub fn acceptance_config(seed: u64) -> Config {
    let mut c = Config {
        seed,
        ..Config::default()
    };
    c.tokenizer.tau = 0.2;
    c.tokenizer.tau_final = 0.2;
    c.lm.loss_on_prompt = false;
    c.denoiser.steps = 1500;
    c.generate.max_len = 2 * c.tokenizer.patches();
    c
}

#[derive(Debug, Clone, Default)]
pub struct AcceptOptions {
    /// Criterion ids to run; empty runs all.
    pub only: Vec<u8>,
    /// Checkpoints written by the persistence check go here.
    pub work_dir: PathBuf,
    pub metrics: MetricsSink,
}

/// Runs the selected criteria in order, reporting each through `log` as it
/// finishes. A criterion that errors is reported as failed.
pub fn run_acceptance(
    config: &Config,
    options: &AcceptOptions,
    log: &mut dyn FnMut(&CriterionResult),
) -> Result<Vec<CriterionResult>> {
    config.validate()?;
    if let Some(bad) = options
        .only
        .iter()
        .find(|&&id| !CRITERIA.iter().any(|(c, _)| *c == id))
    {
        return Err(Error::invalid(format!(
            "no acceptance criterion {bad}; ids run 1..=12"
        )));
    }
    let mut ctx = Context::new(config.clone(), options);
    let mut results = Vec::new();
    for (id, name) in CRITERIA {
        if !options.only.is_empty() && !options.only.contains(&id) {
            continue;
        }
        let outcome = match id {
            1 => ctx.gradient_oracle(),
            2 => ctx.quantizer_oracle(),
            3 => ctx.gumbel(),
            4 => ctx.causality(),
            5 => ctx.rate_control(),
            6 => ctx.dynamic_allocation(),
            7 => ctx.codebook_semantics(),
            8 => ctx.lm_overfit(),
            9 => ctx.cfg_endpoints(),
            10 => ctx.alignment(),
            11 => ctx.diffusion(),
            _ => ctx.determinism(),
        };
        let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        let r = CriterionResult {
            id,
            name,
            pass,
            detail,
        };
        log(&r);
        results.push(r);
    }
    Ok(results)
}

type Verdict = Result<(bool, String)>;

/// Models trained on demand and shared between criteria.
struct Context<'a> {
    config: Config,
    options: &'a AcceptOptions,
    seed: u64,
    corpus: Option<Corpus>,
    tokenizer: Option<Tokenizer<f32>>,
    overfit_lm: Option<Lm<f32>>,
    full_lm: Option<Lm<f32>>,
    denoiser: Option<Denoiser<f32>>,
}

impl<'a> Context<'a> {
    fn new(config: Config, options: &'a AcceptOptions) -> Self {
        Self {
            seed: config.seed,
            config,
            options,
            corpus: None,
            tokenizer: None,
            overfit_lm: None,
            full_lm: None,
            denoiser: None,
        }
    }

    fn sink(&self) -> &MetricsSink {
        &self.options.metrics
    }

    fn corpus(&mut self) -> Result<&Corpus> {
        if self.corpus.is_none() {
            self.corpus = Some(Corpus::generate(&self.config.synth, self.seed)?);
        }
        Ok(self.corpus.as_ref().expect("just set"))
    }

    fn tokenizer(&mut self) -> Result<&Tokenizer<f32>> {
        if self.tokenizer.is_none() {
            self.corpus()?;
            let corpus = self.corpus.as_ref().expect("generated");
            let tok = train_tokenizer_stage(
                &self.config.tokenizer,
                &corpus.train,
                self.seed,
                self.sink(),
                "tokenizer",
            )?;
            self.tokenizer = Some(tok);
        }
        Ok(self.tokenizer.as_ref().expect("just set"))
    }

    fn pairs(&mut self) -> Result<(Vec<LmExample<f32>>, Vec<LmExample<f32>>)> {
        self.tokenizer()?;
        let (tok, corpus) = (
            self.tokenizer.as_ref().expect("trained"),
            self.corpus.as_ref().expect("generated"),
        );
        let train = lm_examples(tok, &corpus.train)?;
        let held = lm_examples(tok, &corpus.val[..corpus.val.len().min(HELD_OUT)])?;
        Ok((train, held))
    }

    fn overfit_lm(&mut self) -> Result<&Lm<f32>> {
        if self.overfit_lm.is_none() {
            let (train, _) = self.pairs()?;
            let pairs = &train[..train.len().min(OVERFIT_PAIRS)];
            let lm = train_lm_stage(
                &self.config,
                &self.config.lm,
                pairs,
                self.seed,
                self.sink(),
                "lm-overfit",
            )?;
            self.overfit_lm = Some(lm);
        }
        Ok(self.overfit_lm.as_ref().expect("just set"))
    }

    fn full_lm(&mut self) -> Result<&Lm<f32>> {
        if self.full_lm.is_none() {
            let (train, _) = self.pairs()?;
            let lm = train_lm_stage(
                &self.config,
                &self.config.lm,
                &train,
                self.seed,
                self.sink(),
                "lm",
            )?;
            self.full_lm = Some(lm);
        }
        Ok(self.full_lm.as_ref().expect("just set"))
    }

    fn gradient_oracle(&mut self) -> Verdict {
        let mut errors = oracle::op_gradient_errors(self.seed)?;
        errors.push((
            "tokenizer_loss".into(),
            oracle::tokenizer_loss_error(self.seed)?,
        ));
        errors.push(("lm_loss".into(), oracle::lm_loss_error(self.seed)?));
        errors.push((
            "denoiser_loss".into(),
            oracle::denoiser_loss_error(self.seed)?,
        ));
        let (worst_name, worst) = errors.iter().fold(("", 0.0f64), |acc, (n, e)| {
            if *e > acc.1 || e.is_nan() {
                (n, *e)
            } else {
                acc
            }
        });
        let failing: Vec<&str> = errors
            .iter()
            .filter(|(_, e)| !(*e < GRAD_TOL))
            .map(|(n, _)| n.as_str())
            .collect();
        Ok((
            failing.is_empty(),
            format!(
                "{} checks x {} points, worst relative error {worst:.2e} ({worst_name}){}",
                errors.len(),
                oracle::POINTS,
                if failing.is_empty() {
                    String::new()
                } else {
                    format!(", failing: {}", failing.join(", "))
                }
            ),
        ))
    }

    fn quantizer_oracle(&mut self) -> Verdict {
        let (k, d, queries) = (64, 16, 1000);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x2);
        let mut cb = Codebook::<f64>::new(k, d, &mut rng)?;
        // A duplicate of code 9 at index 50, scaled by a power of two so the
        // normalised rows are bit-identical, makes exact ties.
        let dup = cb.codes.row(9).to_vec();
        for (j, v) in dup.iter().enumerate() {
            cb.codes.data_mut()[50 * d + j] = 4.0 * v;
        }
        let mut rows: Vec<Vec<f64>> = (0..queries - 20)
            .map(|_| {
                (0..d)
                    .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect()
            })
            .collect();
        rows.extend((0..20).map(|i| dup.iter().map(|x| x * 2f64.powi(i % 5 - 2)).collect()));
        let got = cb.lookup(&Tensor::from_rows(&rows)?)?;
        let mismatches = rows
            .iter()
            .zip(&got)
            .filter(|(q, &g)| brute_force_nearest(&cb.codes, q) != g)
            .count();
        let ties_low = got[queries - 20..].iter().all(|&c| c == 9);
        Ok((
            mismatches == 0 && ties_low,
            format!("{mismatches}/{queries} mismatches vs exhaustive scan (K={k}, D={d}); tied queries resolve to lowest index: {ties_low}"),
        ))
    }

    fn gumbel(&mut self) -> Verdict {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x3);
        let draws = 1000;
        let mut worst_sum = 0.0f64;
        for _ in 0..draws {
            let tau = rng.random_range(0.05..5.0);
            let tape = Tape::<f64>::new();
            let pi = tape.constant(Tensor::randn(&[16, 2], 2.0, &mut rng));
            let out = relaxed_mask(&tape, pi, gumbel_noise(16, &mut rng), tau)?;
            let v = tape.value(out);
            for r in 0..v.rows() {
                worst_sum = worst_sum.max((v.row(r).iter().sum::<f64>() - 1.0).abs());
            }
        }
        // A two-way softmax at temperature tau puts more than 0.99 on the
        // winner exactly when the noisy logit gap exceeds tau * ln 99, so
        // rows below that gap are counted but cannot be held to the bound.
        let tau = 0.01;
        let (mut max_total, mut above, mut decided, mut decided_above) =
            (0.0, 0usize, 0usize, 0usize);
        for _ in 0..draws {
            let tape = Tape::<f64>::new();
            let logits = Tensor::<f64>::randn(&[1, 2], 2.0, &mut rng);
            let noise = gumbel_noise::<f64, _>(1, &mut rng);
            let gap = (logits.at(0, 0) + noise.at(0, 0) - logits.at(0, 1) - noise.at(0, 1)).abs();
            let out = relaxed_mask(&tape, tape.constant(logits), noise, tau)?;
            let m = tape.value(out).row(0).iter().cloned().fold(0.0, f64::max);
            max_total += m;
            above += usize::from(m > 0.99);
            if gap > tau * 99f64.ln() + 1e-9 {
                decided += 1;
                decided_above += usize::from(m > 0.99);
            }
        }
        let mean_max = max_total / draws as f64;
        Ok((
            worst_sum <= 1e-6 && mean_max > 0.99 && decided_above == decided,
            format!(
                "worst |row sum - 1| {worst_sum:.1e} over {draws} draws; tau=0.01 mean row max {mean_max:.4}, {above}/{draws} rows above 0.99, {decided_above}/{decided} rows with gap > tau ln 99"
            ),
        ))
    }

    fn causality(&mut self) -> Verdict {
        let (merger_worst, bidirectional_moved) = self.merger_causality()?;
        let (lm_worst, lm_moved) = self.lm_causality()?;
        Ok((
            merger_worst <= 1e-6 && lm_worst <= 1e-6 && bidirectional_moved && lm_moved,
            format!(
                "16 perturbations each: merger max past change {merger_worst:.1e} (bidirectional control moved: {bidirectional_moved}), lm max past change {lm_worst:.1e} (perturbed position moved: {lm_moved})"
            ),
        ))
    }

    fn merger_causality(&self) -> Result<(f64, bool)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x4);
        let mut tok = Tokenizer::<f64>::new(self.config.tokenizer.clone(), &mut rng)?;
        for p in tok.store.iter_mut() {
            for v in p.value.data_mut() {
                *v += 0.3 * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
        }
        let (n, d) = (tok.config.patches(), tok.config.dim);
        let mut keep: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
            .collect();
        keep[0] = 1.0;
        keep[n - 1] = 1.0;
        let retained: Vec<usize> = (0..n).filter(|&i| keep[i] == 1.0).collect();
        let base = Tensor::<f64>::randn(&[n, d], 1.0, &mut rng);
        let run = |x: &Tensor<f64>, mode| -> Result<Tensor<f64>> {
            let tape = Tape::new();
            let m = tape.constant(Tensor::new(vec![n, 1], keep.clone())?);
            let out = tok
                .merger
                .forward(&tape, &tok.store, tape.constant(x.clone()), m, mode)?;
            let v = tape.value(out).clone();
            Ok(v)
        };
        let before = run(&base, AttnMode::Causal)?;
        let bi_before = run(&base, AttnMode::Bidirectional)?;
        let (mut worst, mut moved) = (0.0f64, false);
        for _ in 0..16 {
            let j = retained[rng.random_range(1..retained.len())];
            let mut x = base.clone();
            for c in 0..d {
                x.data_mut()[j * d + c] += rng.random_range(-1.0..1.0);
            }
            let after = run(&x, AttnMode::Causal)?;
            for &i in retained.iter().filter(|&&i| i < j) {
                for c in 0..d {
                    worst = worst.max((after.at(i, c) - before.at(i, c)).abs());
                }
            }
            let bi_after = run(&x, AttnMode::Bidirectional)?;
            moved |= (0..d).any(|c| (bi_after.at(0, c) - bi_before.at(0, c)).abs() > 1e-9);
        }
        Ok((worst, moved))
    }

    fn lm_causality(&self) -> Result<(f64, bool)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x40);
        let vocab = self.config.vocabulary()?;
        let dim = self.config.tokenizer.dim;
        let mut lm = Lm::<f64>::new(self.config.lm.clone(), vocab, dim, &mut rng)?;
        for p in lm.store.iter_mut() {
            for v in p.value.data_mut() {
                *v += 0.05 * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
        }
        let codes: Vec<usize> = (0..8)
            .map(|_| rng.random_range(0..vocab.codebook_size))
            .collect();
        let image = VisualTokens {
            features: Tensor::randn(&[codes.len(), dim], 1.0, &mut rng),
            codes,
        };
        let caption: Vec<usize> = (0..4)
            .map(|_| rng.random_range(0..vocab.text_size - 1))
            .collect();
        let base = build_sequence(
            &vocab,
            Some(&image),
            &with_eos(&vocab, &caption),
            Order::ImageFirst,
            InputMode::Continuous,
        )?;
        let span = base.image_span.clone().expect("image present");
        let logits = |seq: &crate::lm::MultimodalSequence<f64>| -> Result<Tensor<f64>> {
            let tape = Tape::new();
            let out = lm.logits(&tape, &lm.store, seq)?;
            let v = tape.value(out).clone();
            Ok(v)
        };
        let before = logits(&base)?;
        let (mut worst, mut moved) = (0.0f64, false);
        for _ in 0..16 {
            let j = rng.random_range(1..base.len());
            let mut seq = base.clone();
            if span.contains(&j) {
                let feats = seq.visual_features.as_mut().expect("continuous image");
                for c in 0..dim {
                    feats.data_mut()[(j - span.start) * dim + c] += rng.random_range(-1.0..1.0);
                }
            } else {
                let text = vocab.text_range();
                seq.ids[j] = match seq.ids[j] {
                    id if text.contains(&id) => text.start + (id + 1 - text.start) % text.len(),
                    _ => text.start,
                };
            }
            let after = logits(&seq)?;
            for i in 0..j {
                for c in 0..after.cols() {
                    worst = worst.max((after.at(i, c) - before.at(i, c)).abs());
                }
            }
            moved |= (0..after.cols()).any(|c| (after.at(j, c) - before.at(j, c)).abs() > 1e-9);
        }
        Ok((worst, moved))
    }

    fn rate_control(&mut self) -> Verdict {
        let rho = self.config.tokenizer.rho;
        self.tokenizer()?;
        let e = evaluate_tokenizer(
            self.tokenizer.as_ref().expect("trained"),
            &self.corpus.as_ref().expect("generated").val,
        )?;
        Ok((
            (e.keep_fraction - rho).abs() <= 0.1 && e.recon_cos >= 0.9,
            format!(
                "held-out keep fraction {:.3} (target {rho:.3} +/- 0.1), reconstruction cosine {:.3} (>= 0.9)",
                e.keep_fraction, e.recon_cos
            ),
        ))
    }

    fn dynamic_allocation(&mut self) -> Verdict {
        let rho = self.config.tokenizer.rho;
        let n = self.config.tokenizer.patches() as f64;
        self.tokenizer()?;
        let tok = self.tokenizer.as_ref().expect("trained");
        let corpus = self.corpus.as_ref().expect("generated");
        let by = evaluate_tokenizer(tok, &corpus.val)?.tokens_by_complexity;
        let (lo, hi) = (
            *by.keys().next().expect("items"),
            *by.keys().last().expect("items"),
        );
        let fixed_cfg = crate::tokenizer::TokenizerConfig {
            tokenization: Tokenization::Fixed,
            ..self.config.tokenizer.clone()
        };
        let fixed = train_tokenizer_stage(
            &fixed_cfg,
            &corpus.train,
            self.seed,
            self.sink(),
            "tokenizer-fixed",
        )?;
        let table = tokenizer_table(
            "fixed-vs-dynamic",
            &[("fixed", &fixed), ("dynamic", tok)],
            &corpus.val,
        )?;
        let fixed_t = table.value("fixed", "mean_tokens").expect("row");
        let dynamic_t = table.value("dynamic", "mean_tokens").expect("row");
        let bound = n * (rho + 0.1);
        Ok((
            hi > lo && by[&hi] > by[&lo] && fixed_t == n && dynamic_t < bound,
            format!(
                "mean T complexity {hi}: {:.2} vs complexity {lo}: {:.2}; fixed T {fixed_t:.2} vs dynamic T {dynamic_t:.2} (< {bound:.2})",
                by[&hi], by[&lo]
            ),
        ))
    }

    fn codebook_semantics(&mut self) -> Verdict {
        let mut clean = self.config.synth.clone();
        clean.noise_std = 0.0;
        let bank = self.corpus()?.bank.clone();
        let items = gen_items(&clean, &bank, self.seed ^ 0x7, 0..200)?;
        let agreement = governing_code_agreement(self.tokenizer()?, &items)?;
        Ok((
            agreement >= 0.9,
            format!("same-prototype patch pairs sharing a code: {agreement:.3} over 200 noise-free grids (>= 0.9)"),
        ))
    }

    fn lm_overfit(&mut self) -> Verdict {
        let (train, _) = self.pairs()?;
        let pairs = &train[..train.len().min(OVERFIT_PAIRS)];
        let vocab = self.config.vocabulary()?;
        let lm_cfg = self.config.lm.clone();
        let gen_cfg = self.config.generate.clone();
        let k = self.config.tokenizer.codebook_size;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x8);
        let model = self.overfit_lm()?;
        let mut ce = Vec::new();
        for order in [Order::ImageFirst, Order::TextFirst] {
            let seqs = pairs
                .iter()
                .map(|p| example_sequence(&vocab, &lm_cfg, p, order))
                .collect::<Result<Vec<_>>>()?;
            ce.push(evaluate_loss(model, &seqs)?);
        }
        let mean_ce = ce.iter().sum::<f64>() / ce.len() as f64;
        let (mut terminated, mut in_range) = (0usize, true);
        for p in pairs.iter().take(PROMPTS) {
            let prompt = text_sequence::<f32>(&vocab, &lm_cfg, &p.caption)?;
            let g = generate_image_tokens(model, &prompt, &gen_cfg, &mut rng)?;
            terminated += usize::from(!g.truncated);
            in_range &= g.codes.iter().all(|&c| c < k);
        }
        let need = (PROMPTS * 95).div_ceil(100);
        Ok((
            mean_ce < 0.2 && terminated >= need && in_range,
            format!(
                "target-span CE {mean_ce:.4} (image->text {:.4}, text->image {:.4}; < 0.2) on {} pairs; {terminated}/{PROMPTS} generations end with [/IMG] within {} tokens; all codes < {k}: {in_range}",
                ce[0],
                ce[1],
                pairs.len(),
                gen_cfg.max_len
            ),
        ))
    }

    fn cfg_endpoints(&mut self) -> Verdict {
        let (train, _) = self.pairs()?;
        let vocab = self.config.vocabulary()?;
        let lm_cfg = self.config.lm.clone();
        let model = self.overfit_lm()?;
        let mut worst = 0.0f64;
        for p in train.iter().take(8) {
            let mut cond_seq = text_sequence::<f32>(&vocab, &lm_cfg, &p.caption)?;
            cond_seq.ids.push(IMG);
            cond_seq.loss_mask.push(false);
            let mut uncond_seq = cond_seq.clone();
            uncond_seq.ids = vec![BOS, IMG];
            uncond_seq.loss_mask = vec![false, false];
            let cond = model.next_logits(&cond_seq)?;
            let uncond = model.next_logits(&uncond_seq)?;
            let diff = |a: &[f64], b: &[f64]| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max)
            };
            worst = worst.max(diff(&cfg_logits(&cond, &uncond, 1.0)?, &cond));
            worst = worst.max(diff(&cfg_logits(&cond, &uncond, 0.0)?, &uncond));
        }
        let blend = cfg_logits(&[3.0, 0.0], &[1.0, 2.0], 1.5)?;
        let example = (blend[0] - 4.0).abs() <= 1e-12 && (blend[1] + 1.0).abs() <= 1e-12;
        Ok((
            worst <= 1e-6 && example,
            format!("max endpoint deviation {worst:.1e} over 8 prompts; uncond [1,2], cond [3,0], alpha 1.5 -> [{}, {}]", blend[0], blend[1]),
        ))
    }

    fn alignment(&mut self) -> Verdict {
        let (_, held) = self.pairs()?;
        self.full_lm()?;
        let e = evaluate_lm(
            self.full_lm.as_ref().expect("trained"),
            self.tokenizer.as_ref().expect("trained"),
            &held,
        )?;
        Ok((
            e.likelihood_win_rate >= 0.9 && e.caption_recovery >= 0.8,
            format!(
                "{} held-out pairs: matched caption more likely {:.3} (>= 0.9), caption multiset recovered {:.3} (>= 0.8)",
                held.len(),
                e.likelihood_win_rate,
                e.caption_recovery
            ),
        ))
    }

    fn diffusion(&mut self) -> Verdict {
        let sched = self.config.denoiser.schedule()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xb);
        let mut round_trip = 0.0f64;
        for t in 1..=sched.steps() {
            let z0 = Tensor::<f64>::randn(&[4, 32], 1.0, &mut rng);
            let eps = Tensor::<f64>::randn(&[4, 32], 1.0, &mut rng);
            let back =
                diffusion_invert(&diffusion_forward(&z0, t, &eps, &sched)?, t, &eps, &sched)?;
            round_trip = round_trip.max(back.max_abs_diff(&z0));
        }

        self.tokenizer()?;
        let item = self.corpus.as_ref().expect("generated").train[0]
            .grid
            .clone();
        let tok = self.tokenizer.as_ref().expect("trained");
        let (den, z0, cond) =
            train_denoiser_stage(&self.config, tok, &item, self.seed, self.sink())?;
        let conds = Tensor::from_rows(&vec![cond.row(0).to_vec(); SAMPLES])?;
        let samples = den.sample(&conds, &mut rng)?;
        let mut worst_mean = 0.0f64;
        for c in 0..z0.cols() {
            let m = (0..SAMPLES).map(|r| samples.at(r, c) as f64).sum::<f64>() / SAMPLES as f64;
            worst_mean = worst_mean.max((m - z0.at(0, c) as f64).abs());
        }
        self.denoiser = Some(den);

        let dim = z0.cols();
        let (ts, eps) = draw_noise::<f64, _>(&sched, 4000, dim, &mut rng);
        debug_assert_eq!(ts.len(), 4000);
        let tape = Tape::new();
        let zero = tape.constant(Tensor::zeros(&[4000, dim]));
        let loss = noise_error(&tape, tape.constant(eps), zero)?;
        let zero_loss = tape.value(loss).item();
        let rel = (zero_loss - dim as f64).abs() / dim as f64;
        Ok((
            round_trip <= 1e-6 && worst_mean <= 0.1 && rel <= 0.05,
            format!(
                "forward/invert max error {round_trip:.1e}; single-pair sample mean max deviation {worst_mean:.4} over {SAMPLES} samples (<= 0.1); zero-predictor loss {zero_loss:.1} vs {dim} ({:.1}%)",
                100.0 * rel
            ),
        ))
    }

    fn determinism(&mut self) -> Verdict {
        let small = small_pipeline_config(&self.config);
        let a = run_small_pipeline(&small, self.seed)?;
        let b = run_small_pipeline(&small, self.seed)?;
        let bytes: usize = a.0.values().map(Vec::len).sum();
        let identical = a.0 == b.0 && bytes > 0;

        // Prefer the full-size models when earlier criteria trained them.
        let (tok, lm, den) = match (
            &self.tokenizer,
            &self.full_lm.as_ref().or(self.overfit_lm.as_ref()),
            &self.denoiser,
        ) {
            (Some(t), Some(l), Some(d)) => (t.clone(), (*l).clone(), d.clone()),
            _ => a.1,
        };
        let cfg = match (&self.tokenizer, &self.denoiser) {
            (Some(_), Some(_)) => self.config.clone(),
            _ => small,
        };
        let dir = &self.options.work_dir;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bits = |named: Vec<(String, Tensor<f32>)>| -> Vec<(String, Vec<u32>)> {
            named
                .into_iter()
                .map(|(n, t)| (n, t.data().iter().map(|x| x.to_bits()).collect()))
                .collect()
        };
        let tok_path = dir.join("tokenizer.ckpt");
        save_tokenizer(&tok_path, &tok, &cfg, 1)?;
        let (tok_back, _) = load_tokenizer::<f32>(&tok_path, &cfg)?;
        let tok_ok = bits(tok_back.store.named_values()) == bits(tok.store.named_values())
            && tok_back.codebook == tok.codebook;
        let lm_path = dir.join("lm.ckpt");
        save_lm(&lm_path, &lm, &cfg, 2)?;
        let lm_ok = bits(load_lm::<f32>(&lm_path, &cfg)?.0.store.named_values())
            == bits(lm.store.named_values());
        let den_path = dir.join("denoiser.ckpt");
        save_denoiser(&den_path, &den, &cfg, 3)?;
        let den_ok = bits(
            load_denoiser::<f32>(&den_path, &cfg)?
                .0
                .store
                .named_values(),
        ) == bits(den.store.named_values());
        Ok((
            identical && tok_ok && lm_ok && den_ok,
            format!(
                "two same-seed pipeline runs: {} metric streams, {bytes} bytes, identical: {identical}; checkpoint round trips bit-exact: tokenizer {tok_ok}, lm {lm_ok}, denoiser {den_ok}",
                a.0.len()
            ),
        ))
    }
}

/// Exhaustive nearest code under normalised Euclidean distance, first index
/// on ties.
fn brute_force_nearest(codes: &Tensor<f64>, q: &[f64]) -> usize {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let qn = norm(q);
    let mut best = (0, f64::MAX);
    for k in 0..codes.rows() {
        let c = codes.row(k);
        let cn = norm(c);
        let dist: f64 = q
            .iter()
            .zip(c)
            .map(|(a, b)| (a / qn - b / cn).powi(2))
            .sum();
        if dist < best.1 {
            best = (k, dist);
        }
    }
    best.0
}

/// Same model shapes as `config` with a short corpus and short runs.
fn small_pipeline_config(config: &Config) -> Config {
    let mut c = config.clone();
    c.synth.train_count = 64;
    c.synth.val_count = 8;
    c.tokenizer.steps = 40;
    c.lm.steps = 40;
    c.denoiser.steps = 40;
    c.denoiser.diffusion_steps = 10;
    c
}

type SmallModels = (Tokenizer<f32>, Lm<f32>, Denoiser<f32>);

/// Every stage plus sampling, with metrics buffered in memory.
fn run_small_pipeline(
    config: &Config,
    seed: u64,
) -> Result<(std::collections::BTreeMap<String, Vec<u8>>, SmallModels)> {
    let sink = MetricsSink::memory(MetricsFormat::Jsonl);
    let corpus = Corpus::generate(&config.synth, seed)?;
    let tok = train_tokenizer_stage(&config.tokenizer, &corpus.train, seed, &sink, "tokenizer")?;
    let pairs = lm_examples(&tok, &corpus.train)?;
    let lm = train_lm_stage(config, &config.lm, &pairs, seed, &sink, "lm")?;
    let (den, _, cond) = train_denoiser_stage(config, &tok, &corpus.train[0].grid, seed, &sink)?;
    let vocab = config.vocabulary()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sink.record("samples", |cb| {
        for (i, p) in pairs.iter().take(4).enumerate() {
            let prompt = text_sequence::<f32>(&vocab, &config.lm, &p.caption)?;
            let g = generate_image_tokens(&lm, &prompt, &config.generate, &mut rng)?;
            let s = den.sample(&cond, &mut rng)?;
            let codes: Vec<String> = g.codes.iter().map(|c| c.to_string()).collect();
            let checksum: f64 = s.data().iter().map(|&x| x as f64).sum();
            cb(&serde_json::json!({"item": i, "codes": codes.join(" "), "sample_sum": checksum}))?;
        }
        Ok(())
    })?;
    Ok((sink.contents(), (tok, lm, den)))
}
