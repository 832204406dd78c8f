use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synth::PatchGrid;
use crate::tensor::Tensor;
use crate::tokenizer::{
    Codebook, DecisionMask, Decoder, Merger, Mode, Selector, Switch, Tokenization, TokenizedImage,
    TokenizerConfig,
};

const COS_EPS: f64 = 1e-8;

/// Reconstruction plus rate terms for one grid:
/// `mean_i(1 − cos(x_i, rec_i)) + λ (ρ − mean(M))²`.
pub fn tokenizer_loss<S: Scalar>(
    tape: &Tape<S>,
    x: Var,
    reconstructed: Var,
    m: Var,
    rho: f64,
    lambda: f64,
) -> Result<Var> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::invalid(format!("rho {rho} outside (0, 1]")));
    }
    let recon = reconstruction_term(tape, x, reconstructed)?;
    let rate = rate_term(tape, tape.mean(m)?, rho, lambda)?;
    tape.add(recon, rate)
}

pub(crate) fn reconstruction_term<S: Scalar>(tape: &Tape<S>, x: Var, rec: Var) -> Result<Var> {
    let cos = tape.row_cosine(x, rec, S::lit(COS_EPS))?;
    tape.one_minus(tape.mean(cos)?)
}

/// `λ (ρ − keep)²` for a scalar keep fraction.
pub(crate) fn rate_term<S: Scalar>(
    tape: &Tape<S>,
    keep: Var,
    rho: f64,
    lambda: f64,
) -> Result<Var> {
    let gap = tape.sub(tape.constant(Tensor::scalar(S::lit(rho))), keep)?;
    tape.scale(tape.square(gap)?, S::lit(lambda))
}

/// Train-mode forward of one grid.
pub(crate) struct ItemForward<S> {
    pub mask: DecisionMask<S>,
    /// `1 − mean cos`, scalar.
    pub recon: Var,
    /// Mean of the straight-through keep column, scalar.
    pub keep: Var,
    /// Mean squared distance between normalised retained tokens and their
    /// (fixed) normalised codes, scalar.
    pub commit: Var,
    pub codes: Vec<usize>,
    /// Normalised retained merger outputs, for the EMA update.
    pub features: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Tokenizer<S> {
    pub config: TokenizerConfig,
    pub store: ParamStore<S>,
    pub selector: Selector,
    pub merger: Merger,
    pub decoder: Decoder,
    pub codebook: Codebook<S>,
}

impl<S: Scalar> Tokenizer<S> {
    pub fn new<R: Rng + ?Sized>(config: TokenizerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut store = ParamStore::new();
        let selector = Selector::new(&mut store, c.dim, c.selector_hidden, rng);
        let merger = Merger::new(&mut store, c.blocks, c.dim, c.heads, c.ffn_hidden, rng);
        let decoder = Decoder::new(
            &mut store,
            c.patches(),
            c.dim,
            c.blocks,
            c.heads,
            c.ffn_hidden,
            c.init_std,
            rng,
        );
        let codebook = Codebook::new(c.codebook_size, c.dim, rng)?;
        Ok(Self {
            config,
            store,
            selector,
            merger,
            decoder,
            codebook,
        })
    }

    /// Same model in another precision.
    pub fn cast<T: Scalar>(&self) -> Tokenizer<T> {
        Tokenizer {
            config: self.config.clone(),
            store: self.store.cast(),
            selector: self.selector.clone(),
            merger: self.merger.clone(),
            decoder: self.decoder.clone(),
            codebook: Codebook {
                codes: self.codebook.codes.cast(),
                usage_counts: self.codebook.usage_counts.clone(),
                ema_cluster_size: self.codebook.ema_cluster_size.clone(),
                ema_embed_sum: self.codebook.ema_embed_sum.clone(),
                idle_steps: self.codebook.idle_steps.clone(),
                initialized: self.codebook.initialized,
            },
        }
    }

    pub fn check_grid(&self, grid: &PatchGrid<S>) -> Result<()> {
        if grid.len() != self.config.patches() || grid.dim() != self.config.dim {
            return Err(Error::invalid(format!(
                "grid {}x{} with D={} does not match tokenizer N={} D={}",
                grid.rows,
                grid.cols,
                grid.dim(),
                self.config.patches(),
                self.config.dim
            )));
        }
        Ok(())
    }

    /// Decision mask for `x` plus the `[N×1]` keep column. Fixed
    /// tokenization keeps everything without consulting the selector.
    pub fn select_tokens<R: Rng + ?Sized>(
        &self,
        tape: &Tape<S>,
        x: Var,
        tau: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(DecisionMask<S>, Var)> {
        let n = tape.shape(x)[0];
        if n == 0 {
            return Err(Error::invalid("empty grid"));
        }
        match self.config.tokenization {
            Tokenization::Dynamic => self.selector.select(tape, &self.store, x, tau, mode, rng),
            Tokenization::Fixed => {
                let mut pi_hat = Tensor::zeros(&[n, 2]);
                for i in 0..n {
                    pi_hat.data_mut()[i * 2 + super::KEEP] = S::one();
                }
                let mask = DecisionMask {
                    pi: pi_hat.clone(),
                    pi_hat,
                    keep: vec![true; n],
                    tau,
                };
                Ok((mask, tape.constant(Tensor::ones(&[n, 1]))))
            }
        }
    }

    /// Merger output over all `N` positions (raw features when the merger
    /// is switched off).
    pub fn merge(&self, tape: &Tape<S>, x: Var, m: Var) -> Result<Var> {
        match self.config.merger {
            Switch::On => self
                .merger
                .forward(tape, &self.store, x, m, self.config.attn_mode),
            Switch::Off => Ok(x),
        }
    }

    /// Deterministic inference: select, merge, gather the retained rows,
    /// quantize.
    pub fn tokenize(&self, grid: &PatchGrid<S>) -> Result<TokenizedImage<S>> {
        self.check_grid(grid)?;
        let tape = Tape::new();
        let x = tape.constant(grid.features.clone());
        // Inference draws no noise; the generator is never consulted.
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let (mask, _) = self.select_tokens(&tape, x, self.config.tau, Mode::Infer, &mut unused)?;
        let positions = mask.retained();
        let m = tape.constant(Tensor::from_f64(
            &[mask.keep.len(), 1],
            &mask
                .keep
                .iter()
                .map(|&k| if k { 1.0 } else { 0.0 })
                .collect::<Vec<_>>(),
        )?);
        let merged_all = self.merge(&tape, x, m)?;
        let merged = tape.value(merged_all).select_rows(&positions)?;
        let (codes, quantized) = self.codebook.quantize(&merged)?;
        Ok(TokenizedImage {
            codes,
            positions,
            merged_features: merged,
            quantized_features: quantized,
            mask,
        })
    }

    /// Reconstructs all `N` features from quantized tokens and their raster
    /// positions.
    pub fn decode_at(&self, quantized: &Tensor<S>, positions: &[usize]) -> Result<Tensor<S>> {
        let t = positions.len();
        if t == 0 {
            return Err(Error::invalid("decode: no tokens (T = 0)"));
        }
        if quantized.rank() != 2 || quantized.rows() != t || quantized.cols() != self.config.dim {
            return Err(Error::invalid(format!(
                "decode: tokens {:?} vs {t} positions of dim {}",
                quantized.shape(),
                self.config.dim
            )));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= self.config.patches()) {
            return Err(Error::invalid(format!(
                "decode: position {p} outside the grid"
            )));
        }
        let tape = Tape::new();
        let tokens = tape.constant(quantized.clone());
        let w = tape.constant(Tensor::ones(&[1, t]));
        let out = self
            .decoder
            .forward(&tape, &self.store, tokens, positions, w)?;
        let v = tape.value(out).clone();
        Ok(v)
    }

    /// Decodes with positions taken from the mask's retained patches.
    pub fn decode_features(
        &self,
        quantized: &Tensor<S>,
        mask: &DecisionMask<S>,
    ) -> Result<Tensor<S>> {
        self.decode_at(quantized, &mask.retained())
    }

    /// Raster positions for `t` generated tokens whose true positions are
    /// unknown: spread evenly over the grid.
    pub fn spread_positions(&self, t: usize) -> Vec<usize> {
        let n = self.config.patches();
        (0..t.min(n)).map(|i| i * n / t.min(n).max(1)).collect()
    }

    /// Decodes generated code ids at evenly spread positions.
    pub fn decode_codes(&self, codes: &[usize]) -> Result<Tensor<S>> {
        if codes.is_empty() {
            return Err(Error::invalid("decode: empty code sequence"));
        }
        if let Some(&c) = codes.iter().find(|&&c| c >= self.codebook.len()) {
            return Err(Error::invalid(format!("code {c} outside codebook")));
        }
        let codes = &codes[..codes.len().min(self.config.patches())];
        let rows = self.codebook.codes.select_rows(codes)?;
        self.decode_at(&rows, &self.spread_positions(codes.len()))
    }

    /// Tokenize then decode.
    pub fn reconstruct(&self, grid: &PatchGrid<S>) -> Result<(TokenizedImage<S>, Tensor<S>)> {
        let tok = self.tokenize(grid)?;
        let rec = self.decode_at(&tok.quantized_features, &tok.positions)?;
        Ok((tok, rec))
    }

    /// Training forward of one grid on a shared tape.
    pub(crate) fn forward_item<R: Rng + ?Sized>(
        &self,
        tape: &Tape<S>,
        grid: &PatchGrid<S>,
        tau: f64,
        rng: &mut R,
    ) -> Result<ItemForward<S>> {
        self.check_grid(grid)?;
        let n = grid.len();
        let x = tape.constant(grid.features.clone());
        let (mask, m) = self.select_tokens(tape, x, tau, Mode::Train, rng)?;
        let merged = self.merge(tape, x, m)?;
        let codes_all = self.codebook.lookup(&tape.value(merged))?;
        let code_rows = self.codebook.codes.select_rows(&codes_all)?;
        let quantized = tape.straight_through(merged, code_rows.clone())?;
        let all: Vec<usize> = (0..n).collect();
        let weights = tape.transpose(m)?;
        let rec = self
            .decoder
            .forward(tape, &self.store, quantized, &all, weights)?;
        let recon = reconstruction_term(tape, x, rec)?;
        let keep = tape.mean(m)?;

        let retained = mask.retained();
        let kept = tape.gather_rows(merged, &retained)?;
        let kept_n = tape.l2_normalize_rows(kept, S::lit(1e-12))?;
        let targets = code_rows.select_rows(&retained)?;
        let targets = normalize_rows(&targets);
        let diff = tape.sub(kept_n, tape.constant(targets))?;
        let commit = tape.scale(
            tape.sum(tape.square(diff)?)?,
            S::lit(1.0 / retained.len() as f64),
        )?;

        let features = {
            let v = tape.value(kept_n);
            (0..v.rows())
                .map(|i| v.row(i).iter().map(|x| x.as_f64()).collect())
                .collect()
        };
        let codes = retained.iter().map(|&p| codes_all[p]).collect();
        Ok(ItemForward {
            mask,
            recon,
            keep,
            commit,
            codes,
            features,
        })
    }
}

fn normalize_rows<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let mut out = t.clone();
    let c = t.cols();
    for row in out.data_mut().chunks_mut(c) {
        let n = row.iter().map(|&x| x * x).sum::<S>().sqrt();
        if n > S::zero() {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
    out
}
