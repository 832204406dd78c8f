//! Named ablation pairs. Each trains both settings from the same seed and
//! reports one row of held-out metrics per setting.

use std::fmt;

use serde::Serialize;

use super::pipeline::{
    evaluate_lm, evaluate_tokenizer, lm_examples, train_lm_stage, train_tokenizer_stage, Corpus,
    MetricsSink,
};
use crate::error::{Error, Result};
use crate::lm::{InputMode, LmConfig, VisualTarget};
use crate::persist::Config;
use crate::synth::SyntheticItem;
use crate::tokenizer::{AttnMode, Switch, Tokenization, Tokenizer, TokenizerConfig};

pub const ABLATIONS: &[&str] = &[
    "fixed-vs-dynamic",
    "causal-vs-bidirectional",
    "merger-on-off",
    "quantized-vs-continuous",
    "frozen-vs-unlocked",
    "regression-vs-classification",
];

/// Held-out items scored by the LM ablations.
pub const LM_HELD_OUT: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub setting: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub name: String,
    pub columns: Vec<&'static str>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn value(&self, setting: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|&n| n == column)?;
        self.rows
            .iter()
            .find(|r| r.setting == setting)
            .map(|r| r.values[c])
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "## {}", self.name)?;
        writeln!(f, "| setting | {} |", self.columns.join(" | "))?;
        writeln!(f, "|---|{}", "---|".repeat(self.columns.len()))?;
        for r in &self.rows {
            let cells: Vec<String> = r.values.iter().map(|v| format!("{v:.4}")).collect();
            writeln!(f, "| {} | {} |", r.setting, cells.join(" | "))?;
        }
        Ok(())
    }
}

pub const TOKENIZER_COLUMNS: [&str; 3] = ["mean_tokens", "keep_fraction", "recon_cos"];
pub const LM_COLUMNS: [&str; 4] = [
    "caption_ce",
    "visual_accuracy",
    "likelihood_win_rate",
    "caption_recovery",
];

/// Tokenizer comparison on `items` (noise-free inference).
pub fn tokenizer_table(
    name: &str,
    rows: &[(&str, &Tokenizer<f32>)],
    items: &[SyntheticItem],
) -> Result<AblationTable> {
    let rows = rows
        .iter()
        .map(|(setting, tok)| {
            let e = evaluate_tokenizer(tok, items)?;
            Ok(AblationRow {
                setting: setting.to_string(),
                values: vec![e.mean_tokens, e.keep_fraction, e.recon_cos],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable {
        name: name.to_string(),
        columns: TOKENIZER_COLUMNS.to_vec(),
        rows,
    })
}

fn tokenizer_variants(
    name: &str,
    base: &TokenizerConfig,
) -> Option<[(&'static str, TokenizerConfig); 2]> {
    let with = |f: &dyn Fn(&mut TokenizerConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    Some(match name {
        "fixed-vs-dynamic" => [
            ("fixed", with(&|c| c.tokenization = Tokenization::Fixed)),
            ("dynamic", with(&|c| c.tokenization = Tokenization::Dynamic)),
        ],
        "causal-vs-bidirectional" => [
            ("causal", with(&|c| c.attn_mode = AttnMode::Causal)),
            (
                "bidirectional",
                with(&|c| c.attn_mode = AttnMode::Bidirectional),
            ),
        ],
        "merger-on-off" => [
            ("merger-on", with(&|c| c.merger = Switch::On)),
            ("merger-off", with(&|c| c.merger = Switch::Off)),
        ],
        _ => return None,
    })
}

fn lm_variants(name: &str, base: &LmConfig) -> Option<[(&'static str, LmConfig); 2]> {
    let with = |f: &dyn Fn(&mut LmConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    Some(match name {
        "quantized-vs-continuous" => [
            ("quantized", with(&|c| c.input_mode = InputMode::Quantized)),
            (
                "continuous",
                with(&|c| c.input_mode = InputMode::Continuous),
            ),
        ],
        "frozen-vs-unlocked" => [
            ("frozen", with(&|c| c.frozen = true)),
            ("unlocked", with(&|c| c.frozen = false)),
        ],
        "regression-vs-classification" => [
            (
                "regression",
                with(&|c| c.visual_target = VisualTarget::Regression),
            ),
            (
                "classification",
                with(&|c| c.visual_target = VisualTarget::Classification),
            ),
        ],
        _ => return None,
    })
}

/// Runs the named pair on a corpus generated from `config.synth`. LM
/// ablations share one tokenizer trained with `config.tokenizer`.
pub fn run_ablation(
    name: &str,
    config: &Config,
    seed: u64,
    sink: &MetricsSink,
) -> Result<AblationTable> {
    config.validate()?;
    if let Some(variants) = tokenizer_variants(name, &config.tokenizer) {
        let corpus = Corpus::generate(&config.synth, seed)?;
        let toks = variants
            .iter()
            .map(|(setting, cfg)| {
                train_tokenizer_stage(
                    cfg,
                    &corpus.train,
                    seed,
                    sink,
                    &format!("tokenizer-{setting}"),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let rows: Vec<(&str, &Tokenizer<f32>)> =
            variants.iter().map(|(s, _)| *s).zip(&toks).collect();
        return tokenizer_table(name, &rows, &corpus.val);
    }
    let Some(variants) = lm_variants(name, &config.lm) else {
        return Err(Error::invalid(format!(
            "unknown ablation {name:?}; expected one of {}",
            ABLATIONS.join(", ")
        )));
    };
    let corpus = Corpus::generate(&config.synth, seed)?;
    let tok = train_tokenizer_stage(&config.tokenizer, &corpus.train, seed, sink, "tokenizer")?;
    let pairs = lm_examples(&tok, &corpus.train)?;
    let held = lm_examples(&tok, &corpus.val[..corpus.val.len().min(LM_HELD_OUT)])?;
    let mut rows = Vec::new();
    for (setting, cfg) in &variants {
        let model = train_lm_stage(config, cfg, &pairs, seed, sink, &format!("lm-{setting}"))?;
        let e = evaluate_lm(&model, &tok, &held)?;
        rows.push(AblationRow {
            setting: setting.to_string(),
            values: vec![
                e.caption_ce,
                e.visual_accuracy,
                e.likelihood_win_rate,
                e.caption_recovery,
            ],
        });
    }
    Ok(AblationTable {
        name: name.to_string(),
        columns: LM_COLUMNS.to_vec(),
        rows,
    })
}
