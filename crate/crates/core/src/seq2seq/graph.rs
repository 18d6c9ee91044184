//! A small reverse-mode autodiff tape over [`Matrix`] values.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over the
//! node list is a valid topological backward pass. Parameters are referenced
//! by index into the owning store instead of being copied onto the tape.

use super::tensor::{self, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value {
    Owned(Matrix),
    Param(usize),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        stats: Vec<(f64, f64)>,
        beta: Var,
    },
    Softmax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        weight: f64,
        probs: Matrix,
    },
    MeanRows {
        x: Var,
        start: usize,
        end: usize,
    },
    Cosine(Var, Var),
    LogSumExp {
        x: Var,
        softmax: Vec<f64>,
    },
    Pick {
        x: Var,
        row: usize,
        col: usize,
    },
    Sum(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

struct Node {
    value: Value,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p [Matrix],
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p [Matrix]) -> Self {
        Self {
            params,
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(i) => &self.params[*i],
        }
    }

    /// Constant (or externally differentiated) input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Parameter `id` of the backing store; repeated calls return the same node.
    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = tensor::matmul(self.value(a), self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = tensor::matmul_bt(self.value(a), self.value(b));
        self.push(out, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape());
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let out = Matrix::from_vec(va.rows, va.cols, data);
        self.push(out, Op::Sub(a, b))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let mut out = self.value(x).clone();
        tensor::add_row_bias(&mut out, self.value(bias));
        self.push(out, Op::AddBias(x, bias))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_bias(xw, b)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale_assign(s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Matrix::from_vec(v.rows, v.cols, v.data.iter().map(|&t| tensor::gelu(t)).collect());
        self.push(out, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (out, stats) = tensor::layer_norm(self.value(x), self.value(gamma), self.value(beta));
        self.push(out, Op::LayerNorm { x, gamma, stats, beta })
    }

    /// Row-wise softmax; with `causal`, row `r` only sees columns `0..=r`.
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Var {
        let out = tensor::softmax_rows(self.value(x), causal.then_some(0));
        self.push(out, Op::Softmax(x))
    }

    /// Embedding lookup: row `r` of the output is row `ids[r]` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(out, Op::Gather {
            table,
            ids: ids.to_vec(),
        })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_cols(start, len);
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for p in parts {
                let m = self.value(*p);
                assert_eq!(m.rows, rows);
                out.row_mut(r)[offset..offset + m.cols].copy_from_slice(m.row(r));
                offset += m.cols;
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.cols, cols);
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// `weight · Σ_r −log softmax(logits_r)[targets_r]` as a 1×1 value; rows
    /// whose target is `None` are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], weight: f64) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows, targets.len());
        let logp = tensor::log_softmax_rows(l);
        let total: f64 = targets
            .iter()
            .enumerate()
            .filter_map(|(r, t)| t.map(|t| -logp.get(r, t)))
            .sum();
        let probs = Matrix::from_vec(logp.rows, logp.cols, logp.data.iter().map(|v| v.exp()).collect());
        self.push(
            Matrix::scalar(weight * total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weight,
                probs,
            },
        )
    }

    /// Mean of rows `start..end` as a 1×cols value.
    pub fn mean_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let m = self.value(x);
        assert!(start < end && end <= m.rows, "bad row span {start}..{end} for {} rows", m.rows);
        let n = (end - start) as f64;
        let mut out = vec![0.0; m.cols];
        for r in start..end {
            for (o, v) in out.iter_mut().zip(m.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= n);
        self.push(Matrix::row_vector(out), Op::MeanRows { x, start, end })
    }

    /// Cosine similarity of two equally shaped values, as 1×1.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape());
        let c = tensor::dot(&va.data, &vb.data) / (va.sum_sq().sqrt() * vb.sum_sq().sqrt());
        self.push(Matrix::scalar(c), Op::Cosine(a, b))
    }

    /// `log Σ exp` over every entry, as 1×1.
    pub fn log_sum_exp(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let lse = tensor::log_sum_exp(&v.data);
        let softmax = v.data.iter().map(|t| (t - lse).exp()).collect();
        self.push(Matrix::scalar(lse), Op::LogSumExp { x, softmax })
    }

    pub fn pick(&mut self, x: Var, row: usize, col: usize) -> Var {
        let out = Matrix::scalar(self.value(x).get(row, col));
        self.push(out, Op::Pick { x, row, col })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Matrix::scalar(self.value(x).data.iter().sum());
        self.push(out, Op::Sum(x))
    }

    /// Multiplies by a precomputed mask that already includes the `1/(1-p)` rescale.
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let v = self.value(x);
        assert_eq!(v.data.len(), mask.len());
        let out = Matrix::from_vec(v.rows, v.cols, v.data.iter().zip(&mask).map(|(a, m)| a * m).collect());
        self.push(out, Op::Dropout { x, mask })
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = tensor::matmul_bt(&g, self.value(*b));
                    let db = tensor::matmul_at(self.value(*a), &g);
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::MatMulBt(a, b) => {
                    let da = tensor::matmul(&g, self.value(*b));
                    let db = tensor::matmul_at(&g, self.value(*a));
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.clone());
                }
                Op::Sub(a, b) => {
                    let mut neg = g.clone();
                    neg.scale_assign(-1.0);
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], neg);
                }
                Op::AddBias(x, b) => {
                    let mut db = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (d, v) in db.data.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads[x.0], g.clone());
                    accumulate(&mut grads[b.0], db);
                }
                Op::Scale(x, s) => {
                    let mut dx = g.clone();
                    dx.scale_assign(*s);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let data = g.data.iter().zip(&xv.data).map(|(gv, t)| gv * tensor::gelu_grad(*t)).collect();
                    accumulate(&mut grads[x.0], Matrix::from_vec(g.rows, g.cols, data));
                }
                Op::LayerNorm { x, gamma, stats, beta } => {
                    let xv = self.value(*x);
                    let gm = self.value(*gamma);
                    let n = xv.cols as f64;
                    let mut dx = Matrix::zeros(xv.rows, xv.cols);
                    let mut dgamma = Matrix::zeros(1, xv.cols);
                    let mut dbeta = Matrix::zeros(1, xv.cols);
                    for r in 0..xv.rows {
                        let (mean, rstd) = stats[r];
                        let xr = xv.row(r);
                        let gr = g.row(r);
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for c in 0..xv.cols {
                            let xhat = (xr[c] - mean) * rstd;
                            let dxhat = gr[c] * gm.data[c];
                            dgamma.data[c] += gr[c] * xhat;
                            dbeta.data[c] += gr[c];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let out = dx.row_mut(r);
                        for c in 0..xv.cols {
                            let xhat = (xr[c] - mean) * rstd;
                            let dxhat = gr[c] * gm.data[c];
                            out[c] = rstd * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                    accumulate(&mut grads[gamma.0], dgamma);
                    accumulate(&mut grads[beta.0], dbeta);
                }
                Op::Softmax(x) => {
                    let y = self.value(Var(i));
                    let mut dx = Matrix::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let inner = tensor::dot(yr, gr);
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = yr[c] * (gr[c] - inner);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut dt = Matrix::zeros(t.rows, t.cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads[table.0], dt);
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows, xv.cols);
                    for r in 0..g.rows {
                        dx.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let cols = self.value(*p).cols;
                        accumulate(&mut grads[p.0], g.slice_cols(offset, cols));
                        offset += cols;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.value(*p).rows;
                        accumulate(&mut grads[p.0], g.slice_rows(offset, offset + rows));
                        offset += rows;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weight,
                    probs,
                } => {
                    let scale = g.item() * weight;
                    let mut dl = probs.clone();
                    for (r, t) in targets.iter().enumerate() {
                        match t {
                            Some(t) => dl.data[r * dl.cols + t] -= 1.0,
                            None => dl.row_mut(r).iter_mut().for_each(|v| *v = 0.0),
                        }
                    }
                    dl.scale_assign(scale);
                    accumulate(&mut grads[logits.0], dl);
                }
                Op::MeanRows { x, start, end } => {
                    let xv = self.value(*x);
                    let n = (end - start) as f64;
                    let mut dx = Matrix::zeros(xv.rows, xv.cols);
                    for r in *start..*end {
                        for (d, v) in dx.row_mut(r).iter_mut().zip(&g.data) {
                            *d = v / n;
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Cosine(a, b) => {
                    let gv = g.item();
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (na, nb) = (va.sum_sq().sqrt(), vb.sum_sq().sqrt());
                    let c = self.value(Var(i)).item();
                    let da = va
                        .data
                        .iter()
                        .zip(&vb.data)
                        .map(|(x, y)| gv * (y / (na * nb) - c * x / (na * na)))
                        .collect();
                    let db = vb
                        .data
                        .iter()
                        .zip(&va.data)
                        .map(|(y, x)| gv * (x / (na * nb) - c * y / (nb * nb)))
                        .collect();
                    accumulate(&mut grads[a.0], Matrix::from_vec(va.rows, va.cols, da));
                    accumulate(&mut grads[b.0], Matrix::from_vec(vb.rows, vb.cols, db));
                }
                Op::LogSumExp { x, softmax } => {
                    let xv = self.value(*x);
                    let gv = g.item();
                    let data = softmax.iter().map(|p| gv * p).collect();
                    accumulate(&mut grads[x.0], Matrix::from_vec(xv.rows, xv.cols, data));
                }
                Op::Pick { x, row, col } => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows, xv.cols);
                    dx.data[row * xv.cols + col] = g.item();
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    let dx = Matrix::from_vec(xv.rows, xv.cols, vec![g.item(); xv.data.len()]);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Dropout { x, mask } => {
                    let data = g.data.iter().zip(mask).map(|(a, m)| a * m).collect();
                    accumulate(&mut grads[x.0], Matrix::from_vec(g.rows, g.cols, data));
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Adds this graph's parameter gradients into `acc` (indexed like the store).
    pub fn accumulate_param_grads(&self, grads: &Gradients, acc: &mut [Matrix]) {
        for (id, var) in self.param_vars.iter().enumerate() {
            if let Some(g) = var.and_then(|v| grads.get(v)) {
                acc[id].add_assign(g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(f)/d(inputs) for a graph-building closure.
    fn check<F>(inputs: Vec<Matrix>, f: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let eval = |inputs: &[Matrix]| {
            let mut g = Graph::new(inputs);
            let vars: Vec<Var> = (0..inputs.len()).map(|i| g.param(i)).collect();
            let out = f(&mut g, &vars);
            g.value(out).item()
        };
        let mut g = Graph::new(&inputs);
        let vars: Vec<Var> = (0..inputs.len()).map(|i| g.param(i)).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        let mut acc: Vec<Matrix> = inputs.iter().map(|m| Matrix::zeros(m.rows, m.cols)).collect();
        g.accumulate_param_grads(&grads, &mut acc);

        let h = 1e-6;
        for (p, input) in inputs.iter().enumerate() {
            for e in 0..input.data.len() {
                let mut plus = inputs.clone();
                plus[p].data[e] += h;
                let mut minus = inputs.clone();
                minus[p].data[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = acc[p].data[e];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs().max(an.abs())),
                    "input {p} entry {e}: analytic {an} vs numeric {fd}"
                );
            }
        }
    }

    #[test]
    fn matmul_layernorm_gelu_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![
            random(&mut rng, 3, 4),
            random(&mut rng, 4, 5),
            random(&mut rng, 1, 5),
            random(&mut rng, 1, 5),
            random(&mut rng, 1, 5),
        ];
        check(inputs, |g, v| {
            let h = g.linear(v[0], v[1], v[2]);
            let h = g.gelu(h);
            let h = g.layer_norm(h, v[3], v[4]);
            let s = g.softmax_rows(h, true);
            let s = g.scale(s, 1.7);
            g.cross_entropy(s, &[Some(0), None, Some(2)], 0.5)
        });
    }

    #[test]
    fn attention_style_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![random(&mut rng, 4, 6), random(&mut rng, 5, 6), random(&mut rng, 7, 3)];
        check(inputs, |g, v| {
            let q = g.slice_cols(v[0], 0, 3);
            let k = g.slice_cols(v[1], 3, 3);
            let scores = g.matmul_bt(q, k);
            let p = g.softmax_rows(scores, false);
            let vv = g.slice_cols(v[1], 0, 3);
            let ctx = g.matmul(p, vv);
            let both = g.concat_cols(&[ctx, q]);
            let emb = g.gather_rows(v[2], &[1, 4, 1, 6]);
            let emb = g.concat_cols(&[emb, emb]);
            let mixed = g.add(both, emb);
            let d = g.sub(mixed, emb);
            let d = g.dropout(d, vec![2.0; 24]);
            g.sum(d)
        });
    }

    #[test]
    fn contrastive_style_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![random(&mut rng, 5, 4), random(&mut rng, 1, 4)];
        check(inputs, |g, v| {
            let a = g.mean_rows(v[0], 0, 2);
            let b = g.mean_rows(v[0], 2, 5);
            let ca = g.cosine(a, v[1]);
            let cb = g.cosine(b, v[1]);
            let sims = g.concat_rows(&[ca, cb]);
            let lse = g.log_sum_exp(sims);
            let pos = g.pick(sims, 1, 0);
            g.sub(lse, pos)
        });
    }
}
