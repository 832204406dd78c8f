//! Backward rules, one arm per recorded op.

use crate::autodiff::ops::gelu_grad;
use crate::autodiff::tape::{Node, Op, Var};
use crate::scalar::Scalar;
use crate::tensor::{gemm, gemm_at_b, Tensor};

struct Acc<'a, S> {
    nodes: &'a [Node<S>],
    grads: &'a mut [Option<Tensor<S>>],
}

impl<S: Scalar> Acc<'_, S> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn val(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Adds `data` (laid out like `v`) into `v`'s gradient.
    fn add(&mut self, v: Var, data: Vec<S>) {
        if !self.wants(v) {
            return;
        }
        let slot = &mut self.grads[v.0];
        match slot {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(data) {
                    *a += b;
                }
            }
            None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, data).expect("gradient shape"));
            }
        }
    }

    fn add_with(&mut self, v: Var, f: impl FnOnce(&Self) -> Vec<S>) {
        if self.wants(v) {
            let d = f(self);
            self.add(v, d);
        }
    }
}

pub(crate) fn propagate<S: Scalar>(
    nodes: &[Node<S>],
    id: usize,
    g: &Tensor<S>,
    grads: &mut [Option<Tensor<S>>],
) {
    let node = &nodes[id];
    let out = &node.value;
    let gd = g.data();
    let mut acc = Acc { nodes, grads };
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        &Op::MatMul { a, b, trans_b } => {
            let (m, k) = (acc.shape(a)[0], acc.shape(a)[1]);
            let n = out.cols();
            // out = a·b (b k×n) or a·bᵀ (b n×k)
            acc.add_with(a, |s| gemm(gd, s.val(b).data(), m, n, k, !trans_b));
            acc.add_with(b, |s| {
                if trans_b {
                    gemm_at_b(gd, s.val(a).data(), m, n, k)
                } else {
                    gemm_at_b(s.val(a).data(), gd, m, k, n)
                }
            });
        }
        &Op::Transpose(a) => {
            acc.add_with(a, |_| g.transpose().into_data());
        }
        &Op::Add(a, b) => {
            acc.add(a, gd.to_vec());
            acc.add(b, gd.to_vec());
        }
        &Op::Sub(a, b) => {
            acc.add(a, gd.to_vec());
            acc.add(b, gd.iter().map(|&x| -x).collect());
        }
        &Op::Mul(a, b) => {
            acc.add_with(a, |s| {
                gd.iter()
                    .zip(s.val(b).data())
                    .map(|(&g, &y)| g * y)
                    .collect()
            });
            acc.add_with(b, |s| {
                gd.iter()
                    .zip(s.val(a).data())
                    .map(|(&g, &x)| g * x)
                    .collect()
            });
        }
        &Op::AddBias { x, bias } => {
            acc.add(x, gd.to_vec());
            acc.add_with(bias, |_| column_sums(gd, out.cols()));
        }
        &Op::BroadcastRows { x } => {
            acc.add_with(x, |_| column_sums(gd, out.cols()));
        }
        &Op::Scale(x, c) => acc.add(x, gd.iter().map(|&v| v * c).collect()),
        &Op::AddScalar(x) => acc.add(x, gd.to_vec()),
        &Op::Gelu(x) => {
            acc.add_with(x, |s| {
                gd.iter()
                    .zip(s.val(x).data())
                    .map(|(&g, &v)| g * gelu_grad(v))
                    .collect()
            });
        }
        &Op::Exp(x) => acc.add(x, gd.iter().zip(out.data()).map(|(&g, &y)| g * y).collect()),
        &Op::Ln(x) => {
            acc.add_with(x, |s| {
                gd.iter()
                    .zip(s.val(x).data())
                    .map(|(&g, &v)| g / v)
                    .collect()
            });
        }
        &Op::Square(x) => {
            acc.add_with(x, |s| {
                gd.iter()
                    .zip(s.val(x).data())
                    .map(|(&g, &v)| S::lit(2.0) * g * v)
                    .collect()
            });
        }
        &Op::Sum(x) => {
            let n = acc.val(x).len();
            acc.add(x, vec![gd[0]; n]);
        }
        &Op::Mean(x) => {
            let n = acc.val(x).len();
            acc.add(x, vec![gd[0] / S::lit(n as f64); n]);
        }
        &Op::Softmax {
            x,
            outer,
            len,
            inner,
        } => {
            let y = out.data();
            let mut dx = vec![S::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let dot: S = (0..len).map(|j| y[at(j)] * gd[at(j)]).sum();
                    for j in 0..len {
                        dx[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                    }
                }
            }
            acc.add(x, dx);
        }
        &Op::LogSoftmax(x) => {
            let n = out.cols();
            let mut dx = Vec::with_capacity(out.len());
            for (yrow, grow) in out.data().chunks(n).zip(gd.chunks(n)) {
                let gs: S = grow.iter().copied().sum();
                dx.extend(yrow.iter().zip(grow).map(|(&y, &g)| g - y.exp() * gs));
            }
            acc.add(x, dx);
        }
        Op::WeightedSoftmax {
            scores,
            weights,
            ratio,
        } => {
            let n = out.cols();
            let p = out.data();
            let mut ds = vec![S::zero(); p.len()];
            let mut dw = vec![S::zero(); p.len()];
            for r in 0..out.rows() {
                let row = r * n..(r + 1) * n;
                let dot: S = p[row.clone()]
                    .iter()
                    .zip(&gd[row.clone()])
                    .map(|(&a, &b)| a * b)
                    .sum();
                for j in row {
                    ds[j] = p[j] * (gd[j] - dot);
                    dw[j] = ratio[j] * (gd[j] - dot);
                }
            }
            acc.add(*scores, ds);
            acc.add(*weights, dw);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let n = out.cols();
            let nn = S::lit(n as f64);
            acc.add_with(*beta, |_| column_sums(gd, n));
            acc.add_with(*gamma, |_| {
                let prod: Vec<S> = gd.iter().zip(xhat).map(|(&g, &h)| g * h).collect();
                column_sums(&prod, n)
            });
            acc.add_with(*x, |s| {
                let gam = s.val(*gamma).data();
                let mut dx = Vec::with_capacity(gd.len());
                for (r, (grow, hrow)) in gd.chunks(n).zip(xhat.chunks(n)).enumerate() {
                    let dh: Vec<S> = grow.iter().zip(gam).map(|(&g, &c)| g * c).collect();
                    let mean_dh = dh.iter().copied().sum::<S>() / nn;
                    let mean_dh_h = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<S>() / nn;
                    dx.extend(
                        dh.iter()
                            .zip(hrow)
                            .map(|(&d, &h)| inv_std[r] * (d - mean_dh - h * mean_dh_h)),
                    );
                }
                dx
            });
        }
        Op::GatherRows { table, idx } => {
            acc.add_with(*table, |s| {
                let t = s.val(*table);
                let c = t.cols();
                let mut dt = vec![S::zero(); t.len()];
                for (i, &r) in idx.iter().enumerate() {
                    for j in 0..c {
                        dt[r * c + j] += gd[i * c + j];
                    }
                }
                dt
            });
        }
        Op::ReplaceRows { base, rows, pos } => {
            let c = out.cols();
            acc.add_with(*base, |_| {
                let mut db = gd.to_vec();
                for &p in pos {
                    db[p * c..(p + 1) * c]
                        .iter_mut()
                        .for_each(|v| *v = S::zero());
                }
                db
            });
            acc.add_with(*rows, |_| {
                pos.iter()
                    .flat_map(|&p| gd[p * c..(p + 1) * c].to_vec())
                    .collect()
            });
        }
        &Op::SliceCols { x, start } => {
            acc.add_with(x, |s| {
                let n = s.val(x).cols();
                let len = out.cols();
                let mut dx = vec![S::zero(); s.val(x).len()];
                for r in 0..out.rows() {
                    dx[r * n + start..r * n + start + len]
                        .copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                dx
            });
        }
        Op::ConcatCols(parts) => {
            let n = out.cols();
            let mut off = 0;
            for &p in parts {
                let w = acc.val(p).cols();
                acc.add_with(p, |_| {
                    gd.chunks(n)
                        .flat_map(|row| row[off..off + w].to_vec())
                        .collect()
                });
                off += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = acc.val(p).len();
                acc.add(p, gd[off..off + len].to_vec());
                off += len;
            }
        }
        &Op::Reshape(x) => acc.add(x, gd.to_vec()),
        Op::CrossEntropy {
            logits,
            targets,
            weights,
            probs,
        } => {
            let n = acc.val(*logits).cols();
            let total: S = weights.iter().copied().sum();
            let scale = gd[0] / total;
            let mut dl = vec![S::zero(); probs.len()];
            for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                if w == S::zero() {
                    continue;
                }
                for j in 0..n {
                    let onehot = if j == t { S::one() } else { S::zero() };
                    dl[r * n + j] = scale * w * (probs[r * n + j] - onehot);
                }
            }
            acc.add(*logits, dl);
        }
        Op::RowCosine { a, b, na, nb } => {
            let n = acc.val(*a).cols();
            let cos = out.data();
            let grad_for = |s: &Acc<S>, x: Var, y: Var, nx: &[S], ny: &[S]| -> Vec<S> {
                let (vx, vy) = (s.val(x).data(), s.val(y).data());
                let mut d = Vec::with_capacity(vx.len());
                for r in 0..cos.len() {
                    let row = r * n..(r + 1) * n;
                    // d cos / dx = y/(|x||y|) - cos x/|x|², with |x| floored.
                    let floored = {
                        let raw = vx[row.clone()].iter().map(|&v| v * v).sum::<S>().sqrt();
                        raw < nx[r]
                    };
                    for j in row {
                        let mut v = vy[j] / (nx[r] * ny[r]);
                        if !floored {
                            v -= cos[r] * vx[j] / (nx[r] * nx[r]);
                        }
                        d.push(gd[r] * v);
                    }
                }
                d
            };
            acc.add_with(*a, |s| grad_for(s, *a, *b, na, nb));
            acc.add_with(*b, |s| grad_for(s, *b, *a, nb, na));
        }
        Op::L2NormalizeRows { x, norms } => {
            let n = out.cols();
            let mut dx = Vec::with_capacity(out.len());
            for (r, (yrow, grow)) in out.data().chunks(n).zip(gd.chunks(n)).enumerate() {
                let dot: S = yrow.iter().zip(grow).map(|(&y, &g)| y * g).sum();
                dx.extend(
                    yrow.iter()
                        .zip(grow)
                        .map(|(&y, &g)| (g - y * dot) / norms[r]),
                );
            }
            acc.add(*x, dx);
        }
        &Op::StraightThrough { soft } => acc.add(soft, gd.to_vec()),
    }
}

fn column_sums<S: Scalar>(data: &[S], n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); n];
    for row in data.chunks(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}
