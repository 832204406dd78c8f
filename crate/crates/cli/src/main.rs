use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use lvt_core::harness::pipeline::flatten;
use lvt_core::harness::{
    acceptance_config, run_ablation, run_acceptance, AcceptOptions, MetricsSink, ABLATIONS,
    ACCEPTANCE_SEED,
};
use lvt_core::lm::{
    generate_image_tokens, generate_text, rerank_by_likelihood, text_sequence, train_lm, LmExample,
    VisualTokens,
};
use lvt_core::persist::{
    load_denoiser, load_lm, load_tokenizer, save_denoiser, save_lm, save_tokenizer, Config,
    MetricsFormat,
};
use lvt_core::synth::{gen_corpus, ingest_features, write_atomic, CorpusItem};
use lvt_core::tokenizer::train_tokenizer;
use lvt_core::{denoiser::train_denoiser, Error, Result, Tensor};

#[derive(Parser)]
#[command(
    name = "lvt",
    version,
    about = "Dynamic visual tokenizer and unified image/text LM on synthetic patch grids"
)]
struct Cli {
    /// TOML or JSON config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for corpus, checkpoints and metrics.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Per-step metrics format.
    #[arg(long, global = true, default_value = "jsonl")]
    metrics: MetricsFormat,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/val corpus files and a manifest under OUT/corpus.
    GenCorpus,
    /// Train the tokenizer on OUT/corpus/train.lvtc.
    TrainTokenizer,
    /// Train the denoiser on training grids conditioned on their reconstructions.
    TrainDenoiser {
        /// Use only the first N training items.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train the language model on tokenized training pairs.
    TrainLm,
    /// Tokenize one stored grid and print its codes.
    Tokenize {
        /// Corpus file; defaults to OUT/corpus/val.lvtc.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Item id; defaults to the first item.
        #[arg(long)]
        id: Option<u64>,
    },
    /// Sample visual codes for a caption, optionally decoding a signal.
    GenerateImage {
        /// Comma-separated prototype labels, e.g. 3,7,12.
        #[arg(long)]
        prompt: String,
        /// Decode the codes and run the denoiser on the reconstruction.
        #[arg(long)]
        denoise: bool,
    },
    /// Caption one stored grid.
    GenerateText {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        id: Option<u64>,
    },
    /// Run a named ablation pair and print a comparison table.
    Ablate {
        /// One of: fixed-vs-dynamic, causal-vs-bidirectional, merger-on-off,
        /// quantized-vs-continuous, frozen-vs-unlocked,
        /// regression-vs-classification.
        name: String,
    },
    /// Run the acceptance suite and report each criterion.
    Accept {
        /// Comma-separated criterion ids; all when omitted.
        #[arg(long, value_delimiter = ',')]
        only: Vec<u8>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

/// `LVT_THREADS` caps the worker pool used for data generation.
fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("LVT_THREADS") else {
        return Ok(());
    };
    let n: usize =
        v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            Error::invalid(format!("LVT_THREADS={v:?} is not a positive integer"))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

fn load_config(cli: &Cli, fallback: impl FnOnce() -> Config) -> Result<Config> {
    let mut c = match &cli.config {
        Some(p) => Config::load(p)?,
        None => fallback(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    c.validate()?;
    Ok(c)
}

struct Run<'a> {
    cli: &'a Cli,
    config: Config,
}

impl Run<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.cli.out.join(name)
    }

    fn sink(&self) -> MetricsSink {
        MetricsSink::to_dir(&self.path("metrics"), self.cli.metrics)
    }

    fn corpus(&self, file: &str) -> Result<Vec<CorpusItem>> {
        read_corpus(&self.path("corpus").join(file), &self.config)
    }

    fn tokenizer(&self) -> Result<lvt_core::tokenizer::Tokenizer<f32>> {
        Ok(load_tokenizer(&self.path("tokenizer.ckpt"), &self.config)?.0)
    }
}

fn read_corpus(path: &Path, config: &Config) -> Result<Vec<CorpusItem>> {
    let items = ingest_features(path, Some(config.synth.dim))?;
    if items.is_empty() {
        return Err(Error::invalid(format!("{} holds no items", path.display())));
    }
    Ok(items)
}

fn pick(items: Vec<CorpusItem>, id: Option<u64>) -> Result<CorpusItem> {
    match id {
        None => Ok(items.into_iter().next().expect("non-empty corpus")),
        Some(id) => items
            .into_iter()
            .find(|i| i.id == id)
            .ok_or_else(|| Error::invalid(format!("no item with id {id}"))),
    }
}

/// Closed pipes (e.g. `| head`) are not errors.
fn print(v: &serde_json::Value) {
    let _ = writeln!(
        std::io::stdout().lock(),
        "{}",
        serde_json::to_string_pretty(v).expect("json value")
    );
}

fn run(cli: &Cli) -> Result<bool> {
    let config = match &cli.command {
        Command::Accept { .. } => load_config(cli, || acceptance_config(ACCEPTANCE_SEED))?,
        _ => load_config(cli, Config::default)?,
    };
    let run = Run { cli, config };
    let cfg = &run.config;
    let seed = cfg.seed;
    match &cli.command {
        Command::GenCorpus => {
            let paths = gen_corpus(&cfg.synth, seed, &run.path("corpus"))?;
            print(&json!({
                "train": paths.train, "val": paths.val, "manifest": paths.manifest,
                "train_count": cfg.synth.train_count, "val_count": cfg.synth.val_count,
            }));
        }
        Command::TrainTokenizer => {
            let grids: Vec<_> = run
                .corpus("train.lvtc")?
                .into_iter()
                .map(|i| i.grid)
                .collect();
            let tok = run.sink().record("tokenizer", |cb| {
                train_tokenizer(&grids, &cfg.tokenizer, seed, cb)
            })?;
            let path = run.path("tokenizer.ckpt");
            save_tokenizer(&path, &tok, cfg, cfg.tokenizer.steps as u64)?;
            print(&json!({"checkpoint": path, "steps": cfg.tokenizer.steps}));
        }
        Command::TrainDenoiser { limit } => {
            let tok = run.tokenizer()?;
            let mut items = run.corpus("train.lvtc")?;
            items.truncate(limit.unwrap_or(usize::MAX).max(1));
            let (mut signals, mut conds) = (Vec::new(), Vec::new());
            for it in &items {
                signals.push(flatten(&it.grid.features)?.row(0).to_vec());
                conds.push(flatten(&tok.reconstruct(&it.grid)?.1)?.row(0).to_vec());
            }
            let (signals, conds) = (Tensor::from_rows(&signals)?, Tensor::from_rows(&conds)?);
            let den = run.sink().record("denoiser", |cb| {
                train_denoiser(&signals, &conds, &cfg.denoiser, seed, cb)
            })?;
            let path = run.path("denoiser.ckpt");
            save_denoiser(&path, &den, cfg, cfg.denoiser.steps as u64)?;
            print(&json!({"checkpoint": path, "pairs": items.len(), "steps": cfg.denoiser.steps}));
        }
        Command::TrainLm => {
            let tok = run.tokenizer()?;
            let pairs = run
                .corpus("train.lvtc")?
                .iter()
                .map(|c| {
                    Ok(LmExample {
                        visual: VisualTokens::from(&tok.tokenize(&c.grid)?),
                        caption: c.caption.iter().map(|&l| l as usize).collect(),
                    })
                })
                .collect::<Result<Vec<LmExample<f32>>>>()?;
            let texts: Vec<Vec<usize>> = pairs.iter().map(|p| p.caption.clone()).collect();
            let vocab = cfg.vocabulary()?;
            let lm = run.sink().record("lm", |cb| {
                train_lm(&pairs, &texts, vocab, &cfg.lm, seed, cb)
            })?;
            let path = run.path("lm.ckpt");
            save_lm(&path, &lm, cfg, cfg.lm.steps as u64)?;
            print(&json!({"checkpoint": path, "pairs": pairs.len(), "steps": cfg.lm.steps}));
        }
        Command::Tokenize { input, id } => {
            let tok = run.tokenizer()?;
            let items = match input {
                Some(p) => read_corpus(p, cfg)?,
                None => run.corpus("val.lvtc")?,
            };
            let item = pick(items, *id)?;
            let t = tok.tokenize(&item.grid)?;
            print(&json!({
                "id": item.id,
                "tokens": t.len(),
                "patches": item.grid.len(),
                "keep_fraction": t.mask.keep_fraction(),
                "codes": t.codes,
                "positions": t.positions,
                "caption": item.caption,
            }));
        }
        Command::GenerateImage { prompt, denoise } => {
            let mut labels = parse_labels(prompt)?;
            labels.sort_unstable();
            let lm = load_lm::<f32>(&run.path("lm.ckpt"), cfg)?.0;
            let vocab = cfg.vocabulary()?;
            let seq = text_sequence::<f32>(&vocab, &cfg.lm, &labels)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let candidates = (0..cfg.generate.candidates)
                .map(|_| generate_image_tokens(&lm, &seq, &cfg.generate, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let codes: Vec<Vec<usize>> = candidates.iter().map(|c| c.codes.clone()).collect();
            let best = rerank_by_likelihood(&lm, &seq, &codes)?;
            let mut out = json!({
                "prompt": labels,
                "codes": codes[best],
                "truncated": candidates[best].truncated,
                "chosen": best,
                "candidates": codes,
            });
            if *denoise {
                let tok = run.tokenizer()?;
                let den = load_denoiser::<f32>(&run.path("denoiser.ckpt"), cfg)?.0;
                if codes[best].is_empty() {
                    return Err(Error::invalid("generated image has no codes to decode"));
                }
                let cond = flatten(&tok.decode_codes(&codes[best])?)?;
                let signal = den.sample(&cond, &mut rng)?;
                out["signal"] = json!(signal.data());
                out["signal_shape"] = json!([tok.config.patches(), tok.config.dim]);
            }
            print(&out);
        }
        Command::GenerateText { input, id } => {
            let tok = run.tokenizer()?;
            let lm = load_lm::<f32>(&run.path("lm.ckpt"), cfg)?.0;
            let items = match input {
                Some(p) => read_corpus(p, cfg)?,
                None => run.corpus("val.lvtc")?,
            };
            let item = pick(items, *id)?;
            let image = VisualTokens::from(&tok.tokenize(&item.grid)?);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let text = generate_text(&lm, &image, &cfg.generate, &mut rng)?;
            print(&json!({"id": item.id, "caption": text, "reference": item.caption}));
        }
        Command::Ablate { name } => {
            if !ABLATIONS.contains(&name.as_str()) {
                return Err(Error::invalid(format!(
                    "unknown ablation {name:?}; expected one of {}",
                    ABLATIONS.join(", ")
                )));
            }
            let table = run_ablation(name, cfg, seed, &run.sink())?;
            let _ = write!(std::io::stdout().lock(), "{table}");
            std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
            let path = run.path(&format!("ablation-{name}.json"));
            write_atomic(
                &path,
                &serde_json::to_vec_pretty(&table).expect("table serialises"),
            )?;
        }
        Command::Accept { only } => {
            let options = AcceptOptions {
                only: only.clone(),
                work_dir: run.path("checkpoints"),
                metrics: run.sink(),
            };
            std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
            let results = run_acceptance(cfg, &options, &mut |r| println!("{r}"))?;
            let lines: Vec<String> = results
                .iter()
                .map(|r| serde_json::to_string(r).expect("result serialises"))
                .collect();
            write_atomic(
                &run.path("accept.jsonl"),
                (lines.join("\n") + "\n").as_bytes(),
            )?;
            let passed = results.iter().filter(|r| r.pass).count();
            println!("{passed}/{} criteria passed", results.len());
            return Ok(passed == results.len());
        }
    }
    Ok(true)
}

fn parse_labels(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse().map_err(|_| {
                Error::invalid(format!("prompt label {t:?} is not a non-negative integer"))
            })
        })
        .collect()
}
