//! Forward rules. Each op validates shapes, computes its value, checks that
//! the result is finite and records itself on the tape.

use crate::autodiff::tape::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm, Tensor};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn finite<S: Scalar>(op: &'static str, t: Tensor<S>) -> Result<Tensor<S>> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
}

fn matrix_dims(op: &'static str, t: &[usize]) -> Result<(usize, usize)> {
    match t {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Shape {
            op,
            lhs: t.to_vec(),
            rhs: vec![],
        }),
    }
}

pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    let half = S::lit(0.5);
    let inner = S::lit(SQRT_2_OVER_PI) * (x + S::lit(GELU_C) * x * x * x);
    half * x * (S::one() + inner.tanh())
}

pub(crate) fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = S::lit(0.5);
    let inner = S::lit(SQRT_2_OVER_PI) * (x + S::lit(GELU_C) * x * x * x);
    let t = inner.tanh();
    let dinner = S::lit(SQRT_2_OVER_PI) * (S::one() + S::lit(3.0 * GELU_C) * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * dinner
}

impl<S: Scalar> Tape<S> {
    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa,
                rhs: sb,
            });
        }
        Ok(())
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.needs_grad(v))
    }

    /// Matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · bᵀ` with `b` stored `n×k`.
    pub fn matmul_t(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            let (m, k) = matrix_dims("matmul", va.shape())?;
            let (r, c) = matrix_dims("matmul", vb.shape())?;
            let (kb, n) = if trans_b { (c, r) } else { (r, c) };
            if k != kb {
                return Err(Error::Shape {
                    op: "matmul",
                    lhs: va.shape().to_vec(),
                    rhs: vb.shape().to_vec(),
                });
            }
            finite(
                "matmul",
                Tensor::new(vec![m, n], gemm(va.data(), vb.data(), m, k, n, trans_b))?,
            )?
        };
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, self.any_grad(&[a, b])))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = {
            let v = self.value(a);
            matrix_dims("transpose", v.shape())?;
            v.transpose()
        };
        Ok(self.push(out, Op::Transpose(a), self.any_grad(&[a])))
    }

    fn zip_with(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
    ) -> Result<Tensor<S>> {
        self.binary_same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        finite(op, Tensor::new(va.shape().to_vec(), data)?)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), self.any_grad(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), self.any_grad(&[a, b])))
    }

    /// Element-wise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), self.any_grad(&[a, b])))
    }

    /// `x[m×n] + bias[n]`, the bias repeated on every row.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let out = {
            let (vx, vb) = (self.value(x), self.value(bias));
            let (_, n) = matrix_dims("add_bias", vx.shape())?;
            if vb.len() != n {
                return Err(Error::Shape {
                    op: "add_bias",
                    lhs: vx.shape().to_vec(),
                    rhs: vb.shape().to_vec(),
                });
            }
            let data = vx
                .data()
                .chunks(n)
                .flat_map(|row| row.iter().zip(vb.data()).map(|(&a, &b)| a + b))
                .collect();
            finite("add_bias", Tensor::new(vx.shape().to_vec(), data)?)?
        };
        Ok(self.push(out, Op::AddBias { x, bias }, self.any_grad(&[x, bias])))
    }

    /// Stacks `rows` copies of a vector into a `rows×n` matrix.
    pub fn broadcast_rows(&self, x: Var, rows: usize) -> Result<Var> {
        let out = {
            let v = self.value(x);
            let n = v.len();
            let data = (0..rows).flat_map(|_| v.data().iter().copied()).collect();
            Tensor::new(vec![rows, n], data)?
        };
        Ok(self.push(out, Op::BroadcastRows { x }, self.any_grad(&[x])))
    }

    pub fn scale(&self, x: Var, c: S) -> Result<Var> {
        let out = finite("scale", self.value(x).map(|v| v * c))?;
        Ok(self.push(out, Op::Scale(x, c), self.any_grad(&[x])))
    }

    pub fn add_scalar(&self, x: Var, c: S) -> Result<Var> {
        let out = finite("add_scalar", self.value(x).map(|v| v + c))?;
        Ok(self.push(out, Op::AddScalar(x), self.any_grad(&[x])))
    }

    /// `1 - x`.
    pub fn one_minus(&self, x: Var) -> Result<Var> {
        let neg = self.scale(x, -S::one())?;
        self.add_scalar(neg, S::one())
    }

    pub fn gelu(&self, x: Var) -> Result<Var> {
        let out = finite("gelu", self.value(x).map(gelu))?;
        Ok(self.push(out, Op::Gelu(x), self.any_grad(&[x])))
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        let out = finite("exp", self.value(x).map(S::exp))?;
        Ok(self.push(out, Op::Exp(x), self.any_grad(&[x])))
    }

    pub fn ln(&self, x: Var) -> Result<Var> {
        let out = finite("ln", self.value(x).map(S::ln))?;
        Ok(self.push(out, Op::Ln(x), self.any_grad(&[x])))
    }

    pub fn square(&self, x: Var) -> Result<Var> {
        let out = finite("square", self.value(x).map(|v| v * v))?;
        Ok(self.push(out, Op::Square(x), self.any_grad(&[x])))
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let out = finite("sum", Tensor::scalar(self.value(x).sum()))?;
        Ok(self.push(out, Op::Sum(x), self.any_grad(&[x])))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let out = {
            let v = self.value(x);
            Tensor::scalar(v.sum() / S::lit(v.len() as f64))
        };
        let out = finite("mean", out)?;
        Ok(self.push(out, Op::Mean(x), self.any_grad(&[x])))
    }

    /// Softmax along `axis`, stabilised by subtracting the slice maximum.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let (out, outer, len, inner) = {
            let v = self.value(x);
            let shape = v.shape();
            if axis >= shape.len() {
                return Err(Error::invalid(format!(
                    "softmax axis {axis} out of range for {shape:?}"
                )));
            }
            let outer: usize = shape[..axis].iter().product();
            let len = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let src = v.data();
            let mut data = vec![S::zero(); src.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let m = (0..len).map(|j| src[at(j)]).fold(S::neg_infinity(), S::max);
                    let mut z = S::zero();
                    for j in 0..len {
                        let e = (src[at(j)] - m).exp();
                        data[at(j)] = e;
                        z += e;
                    }
                    for j in 0..len {
                        data[at(j)] /= z;
                    }
                }
            }
            (
                finite("softmax", Tensor::new(shape.to_vec(), data)?)?,
                outer,
                len,
                inner,
            )
        };
        Ok(self.push(
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            self.any_grad(&[x]),
        ))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self, x: Var) -> Result<Var> {
        let out = {
            let v = self.value(x);
            let n = v.cols();
            let data = v
                .data()
                .chunks(n)
                .flat_map(|row| {
                    let m = row.iter().copied().fold(S::neg_infinity(), S::max);
                    let lse = m + row.iter().map(|&r| (r - m).exp()).sum::<S>().ln();
                    row.iter().map(move |&r| r - lse)
                })
                .collect();
            finite("log_softmax", Tensor::new(v.shape().to_vec(), data)?)?
        };
        Ok(self.push(out, Op::LogSoftmax(x), self.any_grad(&[x])))
    }

    /// Softmax over the last axis with non-negative multiplicative weights:
    /// `out_ij = w_ij e^{s_ij} / Σ_k w_ik e^{s_ik}`.
    ///
    /// With 0/1 weights this is the usual masked softmax (weight 0 is the
    /// additive −∞ sentinel). Rows whose weights are all zero produce zero
    /// rows. Gradients flow into both the scores and the weights.
    pub fn weighted_softmax(&self, scores: Var, weights: Var) -> Result<Var> {
        self.binary_same_shape("weighted_softmax", scores, weights)?;
        let (out, ratio) = {
            let (vs, vw) = (self.value(scores), self.value(weights));
            let n = vs.cols();
            let mut out = vec![S::zero(); vs.len()];
            let mut ratio = vec![S::zero(); vs.len()];
            for (r, (srow, wrow)) in vs.data().chunks(n).zip(vw.data().chunks(n)).enumerate() {
                if wrow.iter().any(|&w| w < S::zero()) {
                    return Err(Error::invalid("weighted_softmax: negative weight"));
                }
                if wrow.iter().all(|&w| w == S::zero()) {
                    continue;
                }
                let mut m = srow.iter().copied().fold(S::neg_infinity(), S::max);
                let mut a: Vec<S> = srow.iter().map(|&s| (s - m).exp()).collect();
                let mut z: S = a.iter().zip(wrow).map(|(&a, &w)| a * w).sum();
                if z < S::min_positive_value() {
                    // The weighted entries all sit far below the row maximum.
                    m = srow
                        .iter()
                        .zip(wrow)
                        .filter(|(_, &w)| w > S::zero())
                        .map(|(&s, _)| s)
                        .fold(S::neg_infinity(), S::max);
                    a = srow.iter().map(|&s| (s - m).min(S::zero()).exp()).collect();
                    z = a.iter().zip(wrow).map(|(&a, &w)| a * w).sum();
                }
                let base = r * n;
                for j in 0..n {
                    ratio[base + j] = a[j] / z;
                    out[base + j] = wrow[j] * a[j] / z;
                }
            }
            let shape = vs.shape().to_vec();
            (finite("weighted_softmax", Tensor::new(shape, out)?)?, ratio)
        };
        Ok(self.push(
            out,
            Op::WeightedSoftmax {
                scores,
                weights,
                ratio,
            },
            self.any_grad(&[scores, weights]),
        ))
    }

    /// Per-row normalisation to zero mean and unit variance followed by the
    /// affine `gamma * x̂ + beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        if eps <= S::zero() {
            return Err(Error::invalid("layer_norm: eps must be positive"));
        }
        let (out, xhat, inv_std) = {
            let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
            let n = vx.cols();
            if vg.len() != n || vb.len() != n {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: vx.shape().to_vec(),
                    rhs: vg.shape().to_vec(),
                });
            }
            let nn = S::lit(n as f64);
            let mut out = Vec::with_capacity(vx.len());
            let mut xhat = Vec::with_capacity(vx.len());
            let mut inv_std = Vec::with_capacity(vx.rows());
            for row in vx.data().chunks(n) {
                let mu = row.iter().copied().sum::<S>() / nn;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() / nn;
                let is = S::one() / (var + eps).sqrt();
                inv_std.push(is);
                for (j, &v) in row.iter().enumerate() {
                    let h = (v - mu) * is;
                    xhat.push(h);
                    out.push(vg.data()[j] * h + vb.data()[j]);
                }
            }
            let t = finite("layer_norm", Tensor::new(vx.shape().to_vec(), out)?)?;
            (t, xhat, inv_std)
        };
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            self.any_grad(&[x, gamma, beta]),
        ))
    }

    /// Rows of `table` by index (embedding lookup / row selection).
    pub fn gather_rows(&self, table: Var, idx: &[usize]) -> Result<Var> {
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows: empty index list"));
        }
        let out = self.value(table).select_rows(idx)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            self.any_grad(&[table]),
        ))
    }

    /// Copy of `base` with row `pos[i]` replaced by row `i` of `rows`.
    pub fn replace_rows(&self, base: Var, pos: &[usize], rows: Var) -> Result<Var> {
        let out = {
            let (vb, vr) = (self.value(base), self.value(rows));
            if vr.rows() != pos.len() || vr.cols() != vb.cols() {
                return Err(Error::Shape {
                    op: "replace_rows",
                    lhs: vb.shape().to_vec(),
                    rhs: vr.shape().to_vec(),
                });
            }
            let mut seen = vec![false; vb.rows()];
            for &p in pos {
                if p >= vb.rows() || std::mem::replace(&mut seen[p], true) {
                    return Err(Error::invalid(format!("replace_rows: bad position {p}")));
                }
            }
            let mut out = vb.clone();
            let c = vb.cols();
            for (i, &p) in pos.iter().enumerate() {
                out.data_mut()[p * c..(p + 1) * c].copy_from_slice(vr.row(i));
            }
            out
        };
        Ok(self.push(
            out,
            Op::ReplaceRows {
                base,
                rows,
                pos: pos.to_vec(),
            },
            self.any_grad(&[base, rows]),
        ))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = {
            let v = self.value(x);
            let (m, n) = matrix_dims("slice_cols", v.shape())?;
            if len == 0 || start + len > n {
                return Err(Error::invalid(format!(
                    "slice_cols: {start}..{} out of {n}",
                    start + len
                )));
            }
            let data = v
                .data()
                .chunks(n)
                .flat_map(|row| row[start..start + len].iter().copied())
                .collect();
            Tensor::new(vec![m, len], data)?
        };
        Ok(self.push(out, Op::SliceCols { x, start }, self.any_grad(&[x])))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let m = vals
                .first()
                .ok_or_else(|| Error::invalid("concat_cols: no inputs"))?
                .rows();
            for v in &vals {
                if v.rank() != 2 || v.rows() != m {
                    return Err(Error::Shape {
                        op: "concat_cols",
                        lhs: vals[0].shape().to_vec(),
                        rhs: v.shape().to_vec(),
                    });
                }
            }
            let n: usize = vals.iter().map(|v| v.cols()).sum();
            let mut data = Vec::with_capacity(m * n);
            for r in 0..m {
                for v in &vals {
                    data.extend_from_slice(v.row(r));
                }
            }
            Tensor::new(vec![m, n], data)?
        };
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), self.any_grad(parts)))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let n = vals
                .first()
                .ok_or_else(|| Error::invalid("concat_rows: no inputs"))?
                .cols();
            for v in &vals {
                if v.rank() != 2 || v.cols() != n {
                    return Err(Error::Shape {
                        op: "concat_rows",
                        lhs: vals[0].shape().to_vec(),
                        rhs: v.shape().to_vec(),
                    });
                }
            }
            let m: usize = vals.iter().map(|v| v.rows()).sum();
            let data = vals.iter().flat_map(|v| v.data().iter().copied()).collect();
            Tensor::new(vec![m, n], data)?
        };
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), self.any_grad(parts)))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), self.any_grad(&[x])))
    }

    /// Mean next-token cross-entropy over rows with non-zero weight:
    /// `Σ_i w_i (−log softmax(logits_i)[t_i]) / Σ_i w_i`.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize], weights: &[S]) -> Result<Var> {
        let (out, probs) = {
            let v = self.value(logits);
            let (m, n) = matrix_dims("cross_entropy", v.shape())?;
            if targets.len() != m || weights.len() != m {
                return Err(Error::Shape {
                    op: "cross_entropy",
                    lhs: v.shape().to_vec(),
                    rhs: vec![targets.len()],
                });
            }
            let total: S = weights.iter().copied().sum();
            if total <= S::zero() {
                return Err(Error::invalid("cross_entropy: no active positions"));
            }
            let mut probs = Vec::with_capacity(m * n);
            let mut loss = S::zero();
            for ((row, &t), &w) in v.data().chunks(n).zip(targets).zip(weights) {
                if t >= n {
                    return Err(Error::invalid(format!("cross_entropy: target {t} >= {n}")));
                }
                let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
                let z: S = row.iter().map(|&r| (r - mx).exp()).sum();
                let lse = mx + z.ln();
                if w != S::zero() {
                    loss += w * (lse - row[t]);
                }
                probs.extend(row.iter().map(|&r| (r - lse).exp()));
            }
            (
                finite("cross_entropy", Tensor::scalar(loss / total))?,
                probs,
            )
        };
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            self.any_grad(&[logits]),
        ))
    }

    /// Cosine similarity of matching rows, `[m]`. Norms are floored at `eps`.
    pub fn row_cosine(&self, a: Var, b: Var, eps: S) -> Result<Var> {
        self.binary_same_shape("row_cosine", a, b)?;
        let (out, na, nb) = {
            let (va, vb) = (self.value(a), self.value(b));
            let n = va.cols();
            let mut out = Vec::with_capacity(va.rows());
            let mut na = Vec::with_capacity(va.rows());
            let mut nb = Vec::with_capacity(va.rows());
            for (ra, rb) in va.data().chunks(n).zip(vb.data().chunks(n)) {
                let x = ra.iter().map(|&v| v * v).sum::<S>().sqrt().max(eps);
                let y = rb.iter().map(|&v| v * v).sum::<S>().sqrt().max(eps);
                let dot: S = ra.iter().zip(rb).map(|(&p, &q)| p * q).sum();
                out.push(dot / (x * y));
                na.push(x);
                nb.push(y);
            }
            (finite("row_cosine", Tensor::vector(out))?, na, nb)
        };
        Ok(self.push(out, Op::RowCosine { a, b, na, nb }, self.any_grad(&[a, b])))
    }

    /// Rows scaled to unit L2 norm. Rows with norm below `eps` are an error.
    pub fn l2_normalize_rows(&self, x: Var, eps: S) -> Result<Var> {
        let (out, norms) = {
            let v = self.value(x);
            let n = v.cols();
            let mut norms = Vec::with_capacity(v.rows());
            let mut data = Vec::with_capacity(v.len());
            for (i, row) in v.data().chunks(n).enumerate() {
                let nr = row.iter().map(|&r| r * r).sum::<S>().sqrt();
                if nr < eps {
                    return Err(Error::invalid(format!(
                        "l2_normalize_rows: row {i} has zero norm"
                    )));
                }
                norms.push(nr);
                data.extend(row.iter().map(|&r| r / nr));
            }
            (
                finite("l2_normalize_rows", Tensor::new(v.shape().to_vec(), data)?)?,
                norms,
            )
        };
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }, self.any_grad(&[x])))
    }

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through(&self, soft: Var, hard: Tensor<S>) -> Result<Var> {
        let s = self.shape(soft);
        if s != hard.shape() {
            return Err(Error::Shape {
                op: "straight_through",
                lhs: s,
                rhs: hard.shape().to_vec(),
            });
        }
        let hard = finite("straight_through", hard)?;
        Ok(self.push(hard, Op::StraightThrough { soft }, self.any_grad(&[soft])))
    }
}
