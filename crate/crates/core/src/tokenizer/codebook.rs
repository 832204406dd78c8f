use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-12;
const LAPLACE_EPS: f64 = 1e-5;

/// `K×D` code table updated by exponential moving averages rather than by
/// gradients. Lookup compares L2-normalised queries with L2-normalised codes.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<S> {
    pub codes: Tensor<S>,
    /// Tokens assigned to each code during training.
    pub usage_counts: Vec<u64>,
    pub ema_cluster_size: Vec<f64>,
    /// `K×D`, row-major.
    pub ema_embed_sum: Vec<f64>,
    /// Consecutive training steps without an assignment.
    pub idle_steps: Vec<usize>,
    /// False until seeded from data.
    pub initialized: bool,
}

fn normalized(row: &[f64]) -> Option<Vec<f64>> {
    let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n >= NORM_EPS).then(|| row.iter().map(|x| x / n).collect())
}

impl<S: Scalar> Codebook<S> {
    /// Random unit codes.
    pub fn new<R: Rng + ?Sized>(k: usize, d: usize, rng: &mut R) -> Result<Self> {
        if k < 2 || d == 0 {
            return Err(Error::invalid(format!(
                "codebook needs K >= 2 and D >= 1, got {k}x{d}"
            )));
        }
        let mut data = Vec::with_capacity(k * d);
        for _ in 0..k {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            data.extend(
                normalized(&v)
                    .expect("gaussian row")
                    .into_iter()
                    .map(S::lit),
            );
        }
        Self::from_codes(Tensor::new(vec![k, d], data)?)
    }

    pub fn from_codes(codes: Tensor<S>) -> Result<Self> {
        if codes.rank() != 2 || codes.rows() < 2 {
            return Err(Error::invalid(format!(
                "codebook shape {:?}",
                codes.shape()
            )));
        }
        let k = codes.rows();
        Ok(Self {
            ema_embed_sum: codes.data().iter().map(|x| x.as_f64()).collect(),
            codes,
            usage_counts: vec![0; k],
            ema_cluster_size: vec![1.0; k],
            idle_steps: vec![0; k],
            initialized: false,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.codes.cols()
    }

    /// Nearest code of `row` under normalised Euclidean distance; ties go to
    /// the lowest index.
    pub fn nearest(&self, row: &[S]) -> Result<usize> {
        let q: Vec<f64> = row.iter().map(|x| x.as_f64()).collect();
        let q = normalized(&q).ok_or_else(|| Error::invalid("quantize: zero-norm input row"))?;
        let mut best = (0, f64::INFINITY);
        for k in 0..self.len() {
            let c: Vec<f64> = self.codes.row(k).iter().map(|x| x.as_f64()).collect();
            let dist = match normalized(&c) {
                Some(c) => q
                    .iter()
                    .zip(&c)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>(),
                None => f64::INFINITY,
            };
            if dist < best.1 {
                best = (k, dist);
            }
        }
        Ok(best.0)
    }

    /// Code index per row of `x`.
    pub fn lookup(&self, x: &Tensor<S>) -> Result<Vec<usize>> {
        if x.cols() != self.dim() {
            return Err(Error::Shape {
                op: "quantize",
                lhs: x.shape().to_vec(),
                rhs: self.codes.shape().to_vec(),
            });
        }
        (0..x.rows())
            .map(|i| {
                self.nearest(x.row(i))
                    .map_err(|e| Error::invalid(format!("row {i}: {e}")))
            })
            .collect()
    }

    /// Inference quantization: codes and the corresponding code rows.
    pub fn quantize(&self, x: &Tensor<S>) -> Result<(Vec<usize>, Tensor<S>)> {
        let codes = self.lookup(x)?;
        let rows = self.codes.select_rows(&codes)?;
        Ok((codes, rows))
    }

    /// Seeds every code from a randomly chosen (normalised) feature row,
    /// jittered so duplicates separate.
    pub fn init_from<R: Rng + ?Sized>(&mut self, features: &[Vec<f64>], rng: &mut R) {
        if features.is_empty() {
            return;
        }
        for k in 0..self.len() {
            let src = &features[rng.random_range(0..features.len())];
            self.reseed(k, src, rng);
        }
        self.initialized = true;
    }

    fn reseed<R: Rng + ?Sized>(&mut self, k: usize, src: &[f64], rng: &mut R) {
        let d = self.dim();
        let jitter: Vec<f64> = src
            .iter()
            .map(|&x| {
                let z: f64 = rng.sample(StandardNormal);
                x + 0.01 * z
            })
            .collect();
        let v = normalized(&jitter).unwrap_or_else(|| {
            let mut e = vec![0.0; d];
            e[k % d] = 1.0;
            e
        });
        for (j, &x) in v.iter().enumerate() {
            self.codes.data_mut()[k * d + j] = S::lit(x);
            self.ema_embed_sum[k * d + j] = x;
        }
        self.ema_cluster_size[k] = 1.0;
        self.idle_steps[k] = 0;
    }

    /// One EMA step from a batch of normalised features and their codes.
    /// Codes idle for `dead_after` steps are re-seeded from batch features.
    pub fn ema_update<R: Rng + ?Sized>(
        &mut self,
        features: &[Vec<f64>],
        codes: &[usize],
        decay: f64,
        dead_after: usize,
        rng: &mut R,
    ) {
        let (k, d) = (self.len(), self.dim());
        let mut counts = vec![0.0f64; k];
        let mut sums = vec![0.0f64; k * d];
        for (f, &c) in features.iter().zip(codes) {
            counts[c] += 1.0;
            self.usage_counts[c] += 1;
            for (s, &x) in sums[c * d..(c + 1) * d].iter_mut().zip(f) {
                *s += x;
            }
        }
        for c in 0..k {
            self.ema_cluster_size[c] = decay * self.ema_cluster_size[c] + (1.0 - decay) * counts[c];
        }
        for (e, s) in self.ema_embed_sum.iter_mut().zip(&sums) {
            *e = decay * *e + (1.0 - decay) * s;
        }
        let total: f64 = self.ema_cluster_size.iter().sum();
        for c in 0..k {
            let size =
                (self.ema_cluster_size[c] + LAPLACE_EPS) / (total + k as f64 * LAPLACE_EPS) * total;
            for j in 0..d {
                self.codes.data_mut()[c * d + j] = S::lit(self.ema_embed_sum[c * d + j] / size);
            }
            if counts[c] > 0.0 {
                self.idle_steps[c] = 0;
            } else {
                self.idle_steps[c] += 1;
            }
        }
        if dead_after > 0 && !features.is_empty() {
            for c in 0..k {
                if self.idle_steps[c] >= dead_after {
                    let src = features[rng.random_range(0..features.len())].clone();
                    self.reseed(c, &src, rng);
                }
            }
        }
    }
}

/// `exp(entropy)` of a usage histogram; 0 for an empty histogram.
pub fn perplexity(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    h.exp()
}
