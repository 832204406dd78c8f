//! Finite-difference sweep over every differentiable tape op and the three
//! composite losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{check_gradients, check_param_gradients, ParamStore, Tape, Var};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::Result;
use crate::lm::{
    build_sequence, InputMode, Lm, LmConfig, Order, VisualTarget, VisualTokens, Vocabulary,
};
use crate::synth::PatchGrid;
use crate::tensor::Tensor;
use crate::tokenizer::{tokenizer_loss, AttnMode, Tokenizer, TokenizerConfig, KEEP};

const H: f64 = 1e-5;
pub const POINTS: usize = 10;

type OpFn = fn(&Tape<f64>, &[Var]) -> Result<Var>;

/// How to draw one input tensor.
#[derive(Clone, Copy)]
enum Draw {
    Normal(&'static [usize]),
    /// Uniform in `[lo, hi)`.
    Range(&'static [usize], f64, f64),
}

impl Draw {
    fn sample(self, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        match self {
            Draw::Normal(s) => Tensor::randn(s, 1.0, rng),
            Draw::Range(s, lo, hi) => {
                let n = s.iter().product();
                Tensor::from_f64(
                    s,
                    &(0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>(),
                )
                .expect("shape")
            }
        }
    }
}

/// `Σ out ⊙ C` with a fixed pseudo-random `C`, so every output coordinate
/// contributes a distinct weight.
fn project(tape: &Tape<f64>, out: Var) -> Result<Var> {
    let shape = tape.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let c = tape.constant(Tensor::randn(&shape, 1.0, &mut rng));
    tape.sum(tape.mul(out, c)?)
}

fn ops() -> Vec<(&'static str, Vec<Draw>, OpFn)> {
    use Draw::*;
    vec![
        ("matmul", vec![Normal(&[3, 4]), Normal(&[4, 2])], |t, v| {
            project(t, t.matmul(v[0], v[1])?)
        }),
        (
            "matmul_t",
            vec![Normal(&[3, 4]), Normal(&[2, 4])],
            |t, v| project(t, t.matmul_t(v[0], v[1])?),
        ),
        ("transpose", vec![Normal(&[3, 4])], |t, v| {
            project(t, t.transpose(v[0])?)
        }),
        ("add", vec![Normal(&[3, 4]), Normal(&[3, 4])], |t, v| {
            project(t, t.add(v[0], v[1])?)
        }),
        ("sub", vec![Normal(&[3, 4]), Normal(&[3, 4])], |t, v| {
            project(t, t.sub(v[0], v[1])?)
        }),
        ("mul", vec![Normal(&[3, 4]), Normal(&[3, 4])], |t, v| {
            project(t, t.mul(v[0], v[1])?)
        }),
        ("add_bias", vec![Normal(&[3, 4]), Normal(&[4])], |t, v| {
            project(t, t.add_bias(v[0], v[1])?)
        }),
        ("broadcast_rows", vec![Normal(&[1, 4])], |t, v| {
            project(t, t.broadcast_rows(v[0], 3)?)
        }),
        ("scale", vec![Normal(&[3, 4])], |t, v| {
            project(t, t.scale(v[0], -1.7)?)
        }),
        ("add_scalar", vec![Normal(&[3, 4])], |t, v| {
            project(t, t.add_scalar(v[0], 0.3)?)
        }),
        ("one_minus", vec![Normal(&[3, 4])], |t, v| {
            project(t, t.one_minus(v[0])?)
        }),
        ("gelu", vec![Normal(&[3, 4])], |t, v| {
            project(t, t.gelu(v[0])?)
        }),
        ("exp", vec![Normal(&[3, 4])], |t, v| {
            project(t, t.exp(v[0])?)
        }),
        ("ln", vec![Range(&[3, 4], 0.5, 3.0)], |t, v| {
            project(t, t.ln(v[0])?)
        }),
        ("square", vec![Normal(&[3, 4])], |t, v| {
            project(t, t.square(v[0])?)
        }),
        ("sum", vec![Normal(&[3, 4])], |t, v| {
            t.scale(t.sum(v[0])?, 0.7)
        }),
        ("mean", vec![Normal(&[3, 4])], |t, v| {
            t.scale(t.mean(v[0])?, 1.3)
        }),
        ("softmax_rows", vec![Normal(&[3, 4])], |t, v| {
            project(t, t.softmax(v[0], 1)?)
        }),
        ("softmax_cols", vec![Normal(&[3, 4])], |t, v| {
            project(t, t.softmax(v[0], 0)?)
        }),
        ("log_softmax", vec![Normal(&[3, 4])], |t, v| {
            project(t, t.log_softmax(v[0])?)
        }),
        (
            "weighted_softmax",
            vec![Normal(&[3, 4]), Range(&[3, 4], 0.1, 1.0)],
            |t, v| project(t, t.weighted_softmax(v[0], v[1])?),
        ),
        (
            "layer_norm",
            vec![Normal(&[3, 4]), Normal(&[4]), Normal(&[4])],
            |t, v| project(t, t.layer_norm(v[0], v[1], v[2], 1e-5)?),
        ),
        ("gather_rows", vec![Normal(&[5, 3])], |t, v| {
            project(t, t.gather_rows(v[0], &[0, 2, 2, 4])?)
        }),
        (
            "replace_rows",
            vec![Normal(&[4, 3]), Normal(&[2, 3])],
            |t, v| project(t, t.replace_rows(v[0], &[1, 3], v[1])?),
        ),
        ("slice_cols", vec![Normal(&[3, 5])], |t, v| {
            project(t, t.slice_cols(v[0], 1, 3)?)
        }),
        (
            "concat_cols",
            vec![Normal(&[3, 2]), Normal(&[3, 4])],
            |t, v| project(t, t.concat_cols(&[v[0], v[1]])?),
        ),
        (
            "concat_rows",
            vec![Normal(&[2, 3]), Normal(&[4, 3])],
            |t, v| project(t, t.concat_rows(&[v[0], v[1]])?),
        ),
        ("reshape", vec![Normal(&[3, 4])], |t, v| {
            project(t, t.reshape(v[0], &[2, 6])?)
        }),
        ("cross_entropy", vec![Normal(&[4, 5])], |t, v| {
            t.cross_entropy(v[0], &[1, 0, 4, 2], &[1.0, 0.0, 2.0, 0.5])
        }),
        (
            "row_cosine",
            vec![Normal(&[3, 4]), Normal(&[3, 4])],
            |t, v| project(t, t.row_cosine(v[0], v[1], 1e-8)?),
        ),
        ("l2_normalize_rows", vec![Normal(&[3, 4])], |t, v| {
            project(t, t.l2_normalize_rows(v[0], 1e-8)?)
        }),
    ]
}

/// Worst relative error over `POINTS` random points, per op.
pub fn op_gradient_errors(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, draws, f) in ops() {
        let mut worst = 0.0f64;
        for _ in 0..POINTS {
            let point: Vec<Tensor<f64>> = draws.iter().map(|d| d.sample(&mut rng)).collect();
            worst = worst.max(check_gradients(f, &point, H)?);
        }
        out.push((name.to_string(), worst));
    }
    out.push(("straight_through".into(), straight_through_error(&mut rng)?));
    Ok(out)
}

/// The straight-through op is identity in the backward pass by definition;
/// its forward is piecewise constant, so compare against identity directly.
fn straight_through_error(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..POINTS {
        let tape = Tape::new();
        let soft = tape.leaf(Tensor::randn(&[3, 2], 1.0, rng));
        let hard = Tensor::randn(&[3, 2], 1.0, rng).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        let c = Tensor::randn(&[3, 2], 1.0, rng);
        let y = tape.straight_through(soft, hard)?;
        let loss = tape.sum(tape.mul(y, tape.constant(c.clone()))?)?;
        let g = tape.backward(loss)?.get_or_zero(&tape, soft);
        worst = worst.max(g.max_abs_diff(&c));
    }
    Ok(worst)
}

fn perturb(store: &mut ParamStore<f64>, std: f64, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += std * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
}

/// Tokenizer objective through selector (soft keep column), merger and
/// decoder, alternating attention modes.
pub fn tokenizer_loss_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..POINTS {
        let attn_mode = if i % 2 == 0 {
            AttnMode::Causal
        } else {
            AttnMode::Bidirectional
        };
        let cfg = TokenizerConfig {
            grid_rows: 2,
            grid_cols: 3,
            dim: 8,
            codebook_size: 8,
            blocks: 1,
            ffn_hidden: 16,
            selector_hidden: 8,
            attn_mode,
            ..TokenizerConfig::default()
        };
        let mut tok = Tokenizer::<f64>::new(cfg.clone(), &mut rng)?;
        perturb(&mut tok.store, 0.3, &mut rng);
        let grid = PatchGrid::new(Tensor::randn(&[6, 8], 1.0, &mut rng), 2, 3, 0)?;
        let all: Vec<usize> = (0..6).collect();
        let err = check_param_gradients(
            &tok.store,
            |tape, store| {
                let x = tape.constant(grid.features.clone());
                let pi = tok.selector.logits(tape, store, x)?;
                let m = tape.slice_cols(tape.softmax(pi, 1)?, KEEP, 1)?;
                let merged = tok.merger.forward(tape, store, x, m, attn_mode)?;
                let w = tape.transpose(m)?;
                let rec = tok.decoder.forward(tape, store, merged, &all, w)?;
                tokenizer_loss(tape, x, rec, m, cfg.rho, cfg.lambda)
            },
            H,
            6,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Next-token loss on a tiny model, cycling through input and target modes.
pub fn lm_loss_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocabulary::new(6, 10)?;
    let mut worst = 0.0f64;
    for i in 0..POINTS {
        let (mode, target, order) = match i % 3 {
            0 => (
                InputMode::Continuous,
                VisualTarget::Classification,
                Order::ImageFirst,
            ),
            1 => (
                InputMode::Quantized,
                VisualTarget::Classification,
                Order::TextFirst,
            ),
            _ => (
                InputMode::Continuous,
                VisualTarget::Regression,
                Order::ImageFirst,
            ),
        };
        let cfg = LmConfig {
            d_model: 8,
            blocks: 1,
            heads: 2,
            ffn_hidden: 16,
            context: 16,
            input_mode: mode,
            visual_target: target,
            ..LmConfig::default()
        };
        let mut m = Lm::<f64>::new(cfg, vocab, 3, &mut rng)?;
        perturb(&mut m.store, 0.1, &mut rng);
        let codes: Vec<usize> = (0..3).map(|_| rng.random_range(0..10)).collect();
        let text: Vec<usize> = (0..3).map(|_| rng.random_range(0..6)).collect();
        let img = VisualTokens {
            features: Tensor::randn(&[codes.len(), 3], 1.0, &mut rng),
            codes,
        };
        let seq = build_sequence(&vocab, Some(&img), &text, order, mode)?;
        worst = worst.max(check_param_gradients(
            &m.store,
            |t, s| m.lm_loss(t, s, &seq),
            H,
            6,
        )?);
    }
    Ok(worst)
}

/// Noise-prediction loss with fixed timesteps and noise.
pub fn denoiser_loss_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = DenoiserConfig {
        hidden: 12,
        time_dim: 4,
        diffusion_steps: 10,
        ..DenoiserConfig::default()
    };
    let mut worst = 0.0f64;
    for _ in 0..POINTS {
        let d = Denoiser::<f64>::new(cfg.clone(), 5, 4, &mut rng)?;
        let z0 = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let cond = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let eps = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let ts: Vec<usize> = (0..3).map(|_| rng.random_range(1..=10)).collect();
        // Larger step: the loss is a sum of squares with large magnitude.
        let err = check_param_gradients(
            &d.store,
            |t, s| d.loss_with_noise(t, s, &z0, &cond, &ts, &eps),
            1e-4,
            8,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}
