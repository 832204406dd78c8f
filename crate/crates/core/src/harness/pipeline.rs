//! Shared stage runners and evaluations used by `accept` and `ablate`.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::denoiser::{train_denoiser, Denoiser};
use crate::error::{Error, Result};
use crate::lm::{
    caption_log_likelihood, evaluate_loss, example_sequence, generate_text, train_lm,
    GenerateConfig, Lm, LmConfig, LmExample, Order, VisualTokens,
};
use crate::persist::{Config, MetricsFormat, MetricsWriter};
use crate::synth::{gen_items, PatchGrid, PrototypeBank, SynthConfig, SyntheticItem};
use crate::tensor::Tensor;
use crate::tokenizer::{train_tokenizer, Tokenizer, TokenizerConfig};

/// Generated train/validation items plus the bank they came from.
pub struct Corpus {
    pub bank: PrototypeBank,
    pub train: Vec<SyntheticItem>,
    pub val: Vec<SyntheticItem>,
}

impl Corpus {
    pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let bank = cfg.bank()?;
        let n = cfg.train_count as u64;
        let train = gen_items(cfg, &bank, seed, 0..n)?;
        let val = gen_items(cfg, &bank, seed, n..n + cfg.val_count as u64)?;
        Ok(Self { bank, train, val })
    }
}

pub fn grids(items: &[SyntheticItem]) -> Vec<PatchGrid<f32>> {
    items.iter().map(|i| i.grid.clone()).collect()
}

/// Where per-step training records go: nowhere, one file per stage under a
/// directory, or in-memory buffers keyed by stage name.
#[derive(Debug, Clone, Default)]
pub enum MetricsSink {
    #[default]
    Discard,
    Dir {
        dir: PathBuf,
        format: MetricsFormat,
    },
    Memory {
        format: MetricsFormat,
        files: Rc<RefCell<BTreeMap<String, Vec<u8>>>>,
    },
}

impl MetricsSink {
    pub fn to_dir(dir: &Path, format: MetricsFormat) -> Self {
        MetricsSink::Dir {
            dir: dir.to_path_buf(),
            format,
        }
    }

    pub fn memory(format: MetricsFormat) -> Self {
        MetricsSink::Memory {
            format,
            files: Rc::default(),
        }
    }

    /// Buffered output of a memory sink, by stage name.
    pub fn contents(&self) -> BTreeMap<String, Vec<u8>> {
        match self {
            MetricsSink::Memory { files, .. } => files.borrow().clone(),
            _ => BTreeMap::new(),
        }
    }

    /// Calls `run` with a per-step callback writing to the stage's stream.
    pub fn record<T: Serialize, R>(
        &self,
        name: &str,
        run: impl FnOnce(&mut dyn FnMut(&T) -> Result<()>) -> Result<R>,
    ) -> Result<R> {
        match self {
            MetricsSink::Discard => run(&mut |_| Ok(())),
            MetricsSink::Dir { dir, format } => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let ext = match format {
                    MetricsFormat::Jsonl => "jsonl",
                    MetricsFormat::Csv => "csv",
                };
                let path = dir.join(format!("{name}.{ext}"));
                let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
                let mut w = MetricsWriter::new(BufWriter::new(file), *format);
                run(&mut |r| w.write(r))
            }
            MetricsSink::Memory { format, files } => {
                let mut w = MetricsWriter::new(Vec::new(), *format);
                let out = run(&mut |r| w.write(r));
                files.borrow_mut().insert(name.to_string(), w.into_inner());
                out
            }
        }
    }
}

pub fn train_tokenizer_stage(
    cfg: &TokenizerConfig,
    items: &[SyntheticItem],
    seed: u64,
    sink: &MetricsSink,
    name: &str,
) -> Result<Tokenizer<f32>> {
    let g = grids(items);
    sink.record(name, |cb| train_tokenizer(&g, cfg, seed, cb))
}

pub fn lm_examples(tok: &Tokenizer<f32>, items: &[SyntheticItem]) -> Result<Vec<LmExample<f32>>> {
    items
        .iter()
        .map(|it| {
            Ok(LmExample {
                visual: VisualTokens::from(&tok.tokenize(&it.grid)?),
                caption: it.caption.iter().map(|&c| c as usize).collect(),
            })
        })
        .collect()
}

pub fn train_lm_stage(
    config: &Config,
    lm: &LmConfig,
    pairs: &[LmExample<f32>],
    seed: u64,
    sink: &MetricsSink,
    name: &str,
) -> Result<Lm<f32>> {
    let vocab = config.vocabulary()?;
    // Text-only data: the captions alone.
    let texts: Vec<Vec<usize>> = pairs.iter().map(|p| p.caption.clone()).collect();
    sink.record(name, |cb| train_lm(pairs, &texts, vocab, lm, seed, cb))
}

/// Flattened `N×D` grid as one row.
pub fn flatten(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    t.clone().reshape(&[1, t.len()])
}

/// Single-pair denoiser: target is the item's feature grid, condition is
/// the tokenizer's reconstruction of it.
pub fn train_denoiser_stage(
    config: &Config,
    tok: &Tokenizer<f32>,
    item: &PatchGrid<f32>,
    seed: u64,
    sink: &MetricsSink,
) -> Result<(Denoiser<f32>, Tensor<f32>, Tensor<f32>)> {
    let z0 = flatten(&item.features)?;
    let cond = flatten(&tok.reconstruct(item)?.1)?;
    let d = sink.record("denoiser", |cb| {
        train_denoiser(&z0, &cond, &config.denoiser, seed, cb)
    })?;
    Ok((d, z0, cond))
}

/// Mean cosine between matching rows.
pub fn mean_row_cosine(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let mut total = 0.0;
    for r in 0..a.rows() {
        let (x, y) = (a.row(r), b.row(r));
        let dot: f64 = x.iter().zip(y).map(|(&p, &q)| p as f64 * q as f64).sum();
        let nx = x.iter().map(|&p| (p as f64).powi(2)).sum::<f64>().sqrt();
        let ny = y.iter().map(|&p| (p as f64).powi(2)).sum::<f64>().sqrt();
        total += dot / (nx * ny).max(1e-12);
    }
    total / a.rows() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenizerEval {
    pub mean_tokens: f64,
    pub keep_fraction: f64,
    pub recon_cos: f64,
    /// Complexity -> mean retained tokens.
    pub tokens_by_complexity: BTreeMap<usize, f64>,
}

/// Noise-free inference on `items`.
pub fn evaluate_tokenizer(tok: &Tokenizer<f32>, items: &[SyntheticItem]) -> Result<TokenizerEval> {
    let (mut tokens, mut keep, mut cos) = (0.0, 0.0, 0.0);
    let mut by: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for it in items {
        let (t, rec) = tok.reconstruct(&it.grid)?;
        tokens += t.len() as f64;
        keep += t.len() as f64 / it.grid.len() as f64;
        cos += mean_row_cosine(&it.grid.features, &rec);
        let e = by.entry(it.complexity).or_default();
        e.0 += t.len() as f64;
        e.1 += 1;
    }
    let n = items.len() as f64;
    Ok(TokenizerEval {
        mean_tokens: tokens / n,
        keep_fraction: keep / n,
        recon_cos: cos / n,
        tokens_by_complexity: by
            .into_iter()
            .map(|(c, (t, k))| (c, t / k as f64))
            .collect(),
    })
}

/// Fraction of same-prototype patch pairs whose governing tokens share a
/// code. A patch is governed by the latest retained token at or before it.
pub fn governing_code_agreement(tok: &Tokenizer<f32>, items: &[SyntheticItem]) -> Result<f64> {
    let (mut same, mut total) = (0usize, 0usize);
    for it in items {
        let t = tok.tokenize(&it.grid)?;
        let n = it.grid.len();
        let mut governing = Vec::with_capacity(n);
        let mut k = 0;
        let mut cur = t.codes[0];
        for p in 0..n {
            if k < t.positions.len() && t.positions[k] == p {
                cur = t.codes[k];
                k += 1;
            }
            governing.push(cur);
        }
        for i in 0..n {
            for j in i + 1..n {
                if it.assignment[i] == it.assignment[j] {
                    total += 1;
                    same += usize::from(governing[i] == governing[j]);
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::invalid("no same-prototype pairs"));
    }
    Ok(same as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LmEval {
    /// Per-token CE of caption given image (image first, caption span).
    pub caption_ce: f64,
    /// Teacher-forced next-code accuracy given the caption (text first).
    pub visual_accuracy: f64,
    /// Matched caption more likely than another item's caption.
    pub likelihood_win_rate: f64,
    /// Greedy caption decoding recovers the label multiset.
    pub caption_recovery: f64,
}

/// Index of the next item whose caption differs from item `i`'s.
fn other_caption(held: &[LmExample<f32>], i: usize) -> Option<usize> {
    (1..held.len())
        .map(|d| (i + d) % held.len())
        .find(|&j| held[j].caption != held[i].caption)
}

/// Held-out evaluation. In regression mode visual accuracy snaps each
/// predicted feature to the nearest codebook row.
pub fn evaluate_lm(
    model: &Lm<f32>,
    tok: &Tokenizer<f32>,
    held: &[LmExample<f32>],
) -> Result<LmEval> {
    let vocab = model.vocab;
    let target_only = LmConfig {
        loss_on_prompt: false,
        ..model.config.clone()
    };
    // Caption metrics only read the classification head.
    let mut plain = model.clone();
    plain.regression_head = None;
    let seqs = held
        .iter()
        .map(|e| example_sequence(&vocab, &target_only, e, Order::ImageFirst))
        .collect::<Result<Vec<_>>>()?;
    let caption_ce = evaluate_loss(&plain, &seqs)?;

    let (mut hit, mut total) = (0usize, 0usize);
    for e in held {
        let seq = example_sequence(&vocab, &target_only, e, Order::TextFirst)?;
        let span = seq.image_span.clone().expect("image present");
        let tape = Tape::new();
        let h = model.hidden(&tape, &model.store, &seq)?;
        let prev: Vec<usize> = span.clone().map(|p| p - 1).collect();
        let rows = tape.gather_rows(h, &prev)?;
        let predicted: Vec<usize> = match &model.regression_head {
            Some(head) => {
                let out = head.forward(&tape, &model.store, rows)?;
                let v = tape.value(out).clone();
                tok.codebook.lookup(&v)?
            }
            None => {
                let out = model.head.forward(&tape, &model.store, rows)?;
                let v = tape.value(out);
                let vis = vocab.visual_range();
                (0..v.rows())
                    .map(|r| {
                        let row = &v.row(r)[vis.clone()];
                        (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b })
                    })
                    .collect()
            }
        };
        hit += predicted
            .iter()
            .zip(&e.visual.codes)
            .filter(|(a, b)| a == b)
            .count();
        total += predicted.len();
    }

    let greedy = GenerateConfig {
        top_k: 1,
        ..GenerateConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut wins, mut recovered) = (0usize, 0usize);
    for (i, e) in held.iter().enumerate() {
        if let Some(j) = other_caption(held, i) {
            let a = caption_log_likelihood(&plain, &e.visual, &e.caption)?;
            let b = caption_log_likelihood(&plain, &e.visual, &held[j].caption)?;
            wins += usize::from(a > b);
        }
        let mut got = generate_text(&plain, &e.visual, &greedy, &mut rng)?;
        got.sort_unstable();
        recovered += usize::from(got == e.caption);
    }
    let n = held.len() as f64;
    Ok(LmEval {
        caption_ce,
        visual_accuracy: hit as f64 / total.max(1) as f64,
        likelihood_win_rate: wins as f64 / n,
        caption_recovery: recovered as f64 / n,
    })
}
