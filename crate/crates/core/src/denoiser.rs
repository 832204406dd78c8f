//! Conditional diffusion denoiser over flattened feature grids.
//!
//! A small MLP predicts the injected noise from the noisy signal, a
//! sinusoidal embedding of the step and the conditioning features; sampling
//! runs the ancestral reverse process.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::Linear;
use crate::autodiff::{AdamWConfig, OptimizerState, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Variance schedule indexed by 1-based step `t ∈ [1, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config(
                "noise schedule needs at least one step".into(),
            ));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        if alpha_bars.windows(2).any(|w| w[1] >= w[0]) || !(alpha_bars[alpha_bars.len() - 1] > 0.0)
        {
            return Err(Error::Config(
                "cumulative alphas must decrease strictly and stay positive".into(),
            ));
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Betas linear from `start` at `t = 1` to `end` at `t = T`; a
    /// single-step schedule uses `end`.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        let betas = match steps {
            0 => Vec::new(),
            1 => vec![end],
            _ => (0..steps)
                .map(|i| start + (end - start) * i as f64 / (steps - 1) as f64)
                .collect(),
        };
        Self::new(betas)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!(
                "diffusion step {t} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.betas[t - 1])
    }

    /// `ᾱ_t`; `t = 0` gives 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check(t)?;
        Ok(self.alpha_bars[t - 1])
    }
}

/// `z_t = √ᾱ_t z0 + √(1 − ᾱ_t) ε`.
pub fn diffusion_forward<S: Scalar>(
    z0: &Tensor<S>,
    t: usize,
    eps: &Tensor<S>,
    sched: &NoiseSchedule,
) -> Result<Tensor<S>> {
    combine(z0, eps, t, sched, |ab| (ab.sqrt(), (1.0 - ab).sqrt()))
}

/// Recovers `z0` from `z_t` and the noise that produced it.
pub fn diffusion_invert<S: Scalar>(
    zt: &Tensor<S>,
    t: usize,
    eps: &Tensor<S>,
    sched: &NoiseSchedule,
) -> Result<Tensor<S>> {
    combine(zt, eps, t, sched, |ab| {
        (1.0 / ab.sqrt(), -(1.0 - ab).sqrt() / ab.sqrt())
    })
}

fn combine<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    t: usize,
    sched: &NoiseSchedule,
    coef: impl Fn(f64) -> (f64, f64),
) -> Result<Tensor<S>> {
    sched.check(t)?;
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "diffusion",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (ca, cb) = coef(sched.alpha_bar(t)?);
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &e)| S::lit(ca * x.as_f64() + cb * e.as_f64()))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Sinusoidal embedding `[sin(t ω_0), cos(t ω_0), …]` with
/// `ω_i = 10000^(−i / (dim/2))`, one row per step.
pub fn time_embedding<S: Scalar>(ts: &[usize], dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let mut out = Tensor::zeros(&[ts.len(), dim]);
    for (r, &t) in ts.iter().enumerate() {
        for i in 0..half {
            let w = 10000f64.powf(-(i as f64) / half as f64);
            out.data_mut()[r * dim + 2 * i] = S::lit((t as f64 * w).sin());
            out.data_mut()[r * dim + 2 * i + 1] = S::lit((t as f64 * w).cos());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Diffusion steps `T_d`.
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hidden: usize,
    /// Even.
    pub time_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    /// `total_steps` is overridden by `steps` at training time.
    pub optimizer: AdamWConfig,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            diffusion_steps: 50,
            // The usual 1e-4..0.02 over 1000 steps, rescaled to 50 steps.
            beta_start: 2e-3,
            beta_end: 0.4,
            hidden: 256,
            time_dim: 16,
            steps: 3000,
            batch_size: 32,
            optimizer: AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::lm_stage()
            },
        }
    }
}

impl DenoiserConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        if self.hidden == 0 || self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::Config(
                "denoiser: hidden must be positive and time_dim even".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(
                "denoiser: batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Three-layer GELU MLP `ε_θ(z_t, t, cond)`.
#[derive(Debug, Clone)]
pub struct Denoiser<S> {
    pub config: DenoiserConfig,
    pub schedule: NoiseSchedule,
    pub store: ParamStore<S>,
    pub signal_dim: usize,
    pub cond_dim: usize,
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
}

impl<S: Scalar> Denoiser<S> {
    pub fn new<R: Rng + ?Sized>(
        config: DenoiserConfig,
        signal_dim: usize,
        cond_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if signal_dim == 0 {
            return Err(Error::invalid("denoiser signal dimension must be positive"));
        }
        let mut store = ParamStore::new();
        let h = config.hidden;
        let input = signal_dim + config.time_dim + cond_dim;
        let l1 = Linear::new(&mut store, "denoiser.l1", input, h, true, rng);
        let l2 = Linear::new(&mut store, "denoiser.l2", h, h, true, rng);
        let l3 = Linear::new(&mut store, "denoiser.l3", h, signal_dim, true, rng);
        Ok(Self {
            schedule: config.schedule()?,
            config,
            store,
            signal_dim,
            cond_dim,
            l1,
            l2,
            l3,
        })
    }

    /// Same model in another precision.
    pub fn cast<T: Scalar>(&self) -> Denoiser<T> {
        Denoiser {
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            store: self.store.cast(),
            signal_dim: self.signal_dim,
            cond_dim: self.cond_dim,
            l1: self.l1.clone(),
            l2: self.l2.clone(),
            l3: self.l3.clone(),
        }
    }

    fn check_rows(&self, z: &[usize], cond: &[usize], ts: usize) -> Result<()> {
        if z.len() != 2
            || cond.len() != 2
            || z[1] != self.signal_dim
            || cond[1] != self.cond_dim
            || z[0] != cond[0]
            || ts != z[0]
        {
            return Err(Error::Shape {
                op: "denoiser",
                lhs: z.to_vec(),
                rhs: cond.to_vec(),
            });
        }
        Ok(())
    }

    /// `ε̂` for each row of `z_t` (`[B×signal]`) at steps `ts`, with
    /// conditions `cond` (`[B×cond]`).
    ///
    /// The MLP estimates the clean signal `ẑ0` and the noise follows
    /// analytically: `ε̂ = (z_t − √ᾱ_t ẑ0) / √(1 − ᾱ_t)`.
    pub fn predict(
        &self,
        tape: &Tape<S>,
        store: &ParamStore<S>,
        zt: Var,
        ts: &[usize],
        cond: Var,
    ) -> Result<Var> {
        self.check_rows(&tape.shape(zt), &tape.shape(cond), ts.len())?;
        let temb = tape.constant(time_embedding(ts, self.config.time_dim));
        let input = tape.concat_cols(&[zt, temb, cond])?;
        let h = tape.gelu(self.l1.forward(tape, store, input)?)?;
        let h = tape.gelu(self.l2.forward(tape, store, h)?)?;
        let z0_hat = self.l3.forward(tape, store, h)?;
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for &t in ts {
            let ab = self.schedule.alpha_bar(t)?;
            let s = (1.0 - ab).sqrt();
            a.extend(std::iter::repeat_n(S::lit(1.0 / s), self.signal_dim));
            b.extend(std::iter::repeat_n(S::lit(ab.sqrt() / s), self.signal_dim));
        }
        let shape = vec![ts.len(), self.signal_dim];
        let a = tape.constant(Tensor::new(shape.clone(), a)?);
        let b = tape.constant(Tensor::new(shape, b)?);
        tape.sub(tape.mul(a, zt)?, tape.mul(b, z0_hat)?)
    }

    /// Mean over rows of `‖ε − ε_θ(z_t, t, cond)‖²` with given steps and
    /// noise.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_with_noise(
        &self,
        tape: &Tape<S>,
        store: &ParamStore<S>,
        z0: &Tensor<S>,
        cond: &Tensor<S>,
        ts: &[usize],
        eps: &Tensor<S>,
    ) -> Result<Var> {
        self.check_rows(z0.shape(), cond.shape(), ts.len())?;
        let mut zt = Vec::with_capacity(z0.len());
        for (r, &t) in ts.iter().enumerate() {
            let row = |m: &Tensor<S>| Tensor::vector(m.row(r).to_vec());
            zt.extend(diffusion_forward(&row(z0), t, &row(eps), &self.schedule)?.into_data());
        }
        let zt = tape.constant(Tensor::new(z0.shape().to_vec(), zt)?);
        let pred = self.predict(tape, store, zt, ts, tape.constant(cond.clone()))?;
        noise_error(tape, tape.constant(eps.clone()), pred)
    }

    /// ε-prediction loss with `t ~ U{1..T}` and `ε ~ N(0, I)` drawn per row.
    pub fn epsilon_loss<R: Rng + ?Sized>(
        &self,
        tape: &Tape<S>,
        store: &ParamStore<S>,
        z0: &Tensor<S>,
        cond: &Tensor<S>,
        rng: &mut R,
    ) -> Result<Var> {
        let (ts, eps) = draw_noise(&self.schedule, z0.rows(), z0.cols(), rng);
        self.loss_with_noise(tape, store, z0, cond, &ts, &eps)
    }

    /// Ancestral sampling from `z_T ~ N(0, I)` to `z_0`, one sample per row
    /// of `cond`.
    pub fn sample<R: Rng + ?Sized>(&self, cond: &Tensor<S>, rng: &mut R) -> Result<Tensor<S>> {
        let b = cond.rows();
        let mut z: Vec<f64> = (0..b * self.signal_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        for t in (1..=self.schedule.steps()).rev() {
            let tape = Tape::new();
            let zt = tape.constant(Tensor::new(
                vec![b, self.signal_dim],
                z.iter().map(|&x| S::lit(x)).collect(),
            )?);
            let eps = self.predict(
                &tape,
                &self.store,
                zt,
                &vec![t; b],
                tape.constant(cond.clone()),
            )?;
            let eps = tape.value(eps);
            let beta = self.schedule.beta(t)?;
            let ab = self.schedule.alpha_bar(t)?;
            let ab_prev = self.schedule.alpha_bar(t - 1)?;
            let coef = beta / (1.0 - ab).sqrt();
            let scale = 1.0 / (1.0 - beta).sqrt();
            let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
            for (x, e) in z.iter_mut().zip(eps.data()) {
                *x = scale * (*x - coef * e.as_f64());
                if t > 1 {
                    *x += sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "ddpm_sample" });
        }
        Tensor::new(
            vec![b, self.signal_dim],
            z.into_iter().map(S::lit).collect(),
        )
    }
}

/// Mean over rows of the squared noise error `‖ε − ε̂‖²`.
pub fn noise_error<S: Scalar>(tape: &Tape<S>, eps: Var, pred: Var) -> Result<Var> {
    let rows = tape.shape(eps)[0];
    let diff = tape.sub(eps, pred)?;
    tape.scale(tape.sum(tape.square(diff)?)?, S::lit(1.0 / rows as f64))
}

/// Uniform steps `t ∈ [1, T]` and standard normal noise `[rows×dim]`.
pub fn draw_noise<S: Scalar, R: Rng + ?Sized>(
    sched: &NoiseSchedule,
    rows: usize,
    dim: usize,
    rng: &mut R,
) -> (Vec<usize>, Tensor<S>) {
    let ts = (0..rows)
        .map(|_| rng.random_range(1..=sched.steps()))
        .collect();
    let eps = (0..rows * dim)
        .map(|_| S::lit(rng.sample(StandardNormal)))
        .collect();
    (ts, Tensor::new(vec![rows, dim], eps).expect("rows x dim"))
}

/// Per-step denoiser training record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DenoiserStep {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Trains a fresh denoiser on paired rows of `signals` (`[M×signal]`) and
/// `conds` (`[M×cond]`).
pub fn train_denoiser<S: Scalar>(
    signals: &Tensor<S>,
    conds: &Tensor<S>,
    config: &DenoiserConfig,
    seed: u64,
    on_step: &mut dyn FnMut(&DenoiserStep) -> Result<()>,
) -> Result<Denoiser<S>> {
    if signals.rank() != 2
        || conds.rank() != 2
        || signals.rows() != conds.rows()
        || signals.rows() == 0
    {
        return Err(Error::invalid(format!(
            "denoiser training pairs: signals {:?} vs conditions {:?}",
            signals.shape(),
            conds.shape()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Denoiser::new(config.clone(), signals.cols(), conds.cols(), &mut rng)?;
    let mut opt_cfg = config.optimizer.clone();
    opt_cfg.total_steps = config.steps;
    let mut opt = OptimizerState::new(opt_cfg, &model.store);
    let mut batcher = crate::tokenizer::Batcher::new(signals.rows());
    for step in 0..config.steps {
        let idx = batcher.next(config.batch_size, &mut rng);
        let (z0, cond) = (signals.select_rows(&idx)?, conds.select_rows(&idx)?);
        let tape = Tape::new();
        let loss = model.epsilon_loss(&tape, &model.store, &z0, &cond, &mut rng)?;
        let loss_v = tape.value(loss).item().as_f64();
        if !loss_v.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("denoiser loss {loss_v}"),
            });
        }
        let grads = tape.backward(loss)?;
        model.store.zero_grad();
        grads.accumulate_into(&mut model.store);
        let lr = opt.current_lr();
        let grad_norm = opt.step(&mut model.store);
        on_step(&DenoiserStep {
            step,
            loss: loss_v,
            lr,
            grad_norm,
        })?;
    }
    Ok(model)
}
