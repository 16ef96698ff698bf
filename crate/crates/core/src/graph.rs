//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are either
//! constants or parameters copied out of a [`ParamStore`]; calling
//! [`Graph::backward`] on a scalar node yields [`Gradients`] keyed by
//! parameter id.

use crate::matrix::Matrix;
use crate::params::{Gradients, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Softmax(Var),
    Cols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        x: Var,
        index: Vec<Option<usize>>,
    },
    ScatterRows {
        src: Var,
        fill: Var,
        rows: Vec<usize>,
    },
    MeanRows(Var),
    Reshape(Var),
    /// Scalar objective whose gradient w.r.t. `input` was computed eagerly.
    Objective {
        input: Var,
        grad: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m.get(0, 0)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1×C` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        let mut v = self.value(x).clone();
        assert_eq!(v.cols(), r.cols(), "add_row width");
        for i in 0..v.rows() {
            for (o, b) in v.row_mut(i).iter_mut().zip(r.row(0)) {
                *o += b;
            }
        }
        self.push(v, Op::AddRow(x, row))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).scaled(s);
        self.push(v, Op::Scale(x, s))
    }

    /// Row-wise layer normalisation with affine `gamma`/`beta` (both `1×C`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let g = self.value(gamma).row(0).to_vec();
        let b = self.value(beta).row(0).to_vec();
        let mut xhat = Matrix::zeros(n, c);
        let mut out = Matrix::zeros(n, c);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat.set(i, j, h);
                out.set(i, j, h * g[j] + b[j]);
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|x| {
            let u = GELU_C * (x + GELU_A * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        self.push(v, Op::Gelu(x))
    }

    /// Row-wise softmax. Columns with `key_valid[j] == false` get exactly zero weight.
    pub fn softmax_rows(&mut self, x: Var, key_valid: Option<&[bool]>) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        if let Some(kv) = key_valid {
            assert_eq!(kv.len(), c, "key mask width");
        }
        let valid = |j: usize| key_valid.is_none_or(|kv| kv[j]);
        let mut out = Matrix::zeros(n, c);
        for i in 0..n {
            let row = xv.row(i);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if valid(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            let o = out.row_mut(i);
            for j in 0..c {
                if valid(j) {
                    let e = (row[j] - max).exp();
                    o[j] = e;
                    sum += e;
                }
            }
            for v in o.iter_mut() {
                *v /= sum;
            }
        }
        self.push(out, Op::Softmax(x))
    }

    pub fn cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols(), "column slice out of range");
        let v = Matrix::from_fn(xv.rows(), len, |i, j| xv.get(i, start + j));
        self.push(v, Op::Cols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut v = Matrix::zeros(rows, total);
        let mut off = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows(), rows, "concat_cols row count");
            for i in 0..rows {
                v.row_mut(i)[off..off + pv.cols()].copy_from_slice(pv.row(i));
            }
            off += pv.cols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Row `r` of the output is row `index[r]` of `x`, or zeros for `None`.
    pub fn gather_rows(&mut self, x: Var, index: &[Option<usize>]) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut v = Matrix::zeros(index.len(), c);
        for (r, idx) in index.iter().enumerate() {
            if let Some(src) = idx {
                v.row_mut(r).copy_from_slice(xv.row(*src));
            }
        }
        self.push(v, Op::GatherRows { x, index: index.to_vec() })
    }

    /// `total`-row output: row `rows[i]` holds row `i` of `src`, every other
    /// row holds the single row of `fill`.
    pub fn scatter_rows(&mut self, src: Var, fill: Var, rows: &[usize], total: usize) -> Var {
        let sv = self.value(src);
        let fv = self.value(fill);
        assert_eq!(sv.rows(), rows.len(), "scatter row count");
        assert_eq!(fv.rows(), 1, "scatter fill must be one row");
        assert_eq!(sv.cols(), fv.cols(), "scatter width");
        let mut v = Matrix::zeros(total, sv.cols());
        for r in 0..total {
            v.row_mut(r).copy_from_slice(fv.row(0));
        }
        for (i, &r) in rows.iter().enumerate() {
            v.row_mut(r).copy_from_slice(sv.row(i));
        }
        self.push(v, Op::ScatterRows { src, fill, rows: rows.to_vec() })
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let mut v = Matrix::zeros(1, c);
        for i in 0..n {
            for (o, x) in v.row_mut(0).iter_mut().zip(xv.row(i)) {
                *o += x;
            }
        }
        let v = v.scaled(1.0 / n as f64);
        self.push(v, Op::MeanRows(x))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(x).clone().reshaped(rows, cols);
        self.push(v, Op::Reshape(x))
    }

    /// Records a scalar objective `value` of `input` together with its
    /// gradient `grad` (same shape as `input`).
    pub fn objective(&mut self, input: Var, value: f64, grad: Matrix) -> Var {
        assert_eq!(self.value(input).shape(), grad.shape(), "objective gradient shape");
        self.push(Matrix::filled(1, 1, value), Op::Objective { input, grad })
    }

    /// Back-propagates from the scalar node `loss`.
    pub fn backward(&self, loss: Var, num_params: usize) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut out = Gradients::new(num_params);

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(a) => a.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(self.value(*b));
                    let gb = self.value(*a).matmul_tn(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulNT(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.matmul_tn(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(x, row) => {
                    acc(&mut grads, *row, column_sums(&g));
                    acc(&mut grads, *x, g);
                }
                Op::Scale(x, s) => acc(&mut grads, *x, g.scaled(*s)),
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let (n, c) = g.shape();
                    let gam = self.value(*gamma).row(0);
                    let mut ggamma = Matrix::zeros(1, c);
                    let mut gx = Matrix::zeros(n, c);
                    let mut gxh = vec![0.0; c];
                    for r in 0..n {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            ggamma.row_mut(0)[j] += gr[j] * hr[j];
                            gxh[j] = gr[j] * gam[j];
                            s1 += gxh[j];
                            s2 += gxh[j] * hr[j];
                        }
                        let k = inv_std[r] / c as f64;
                        let out = gx.row_mut(r);
                        for j in 0..c {
                            out[j] = k * (c as f64 * gxh[j] - s1 - hr[j] * s2);
                        }
                    }
                    acc(&mut grads, *beta, column_sums(&g));
                    acc(&mut grads, *gamma, ggamma);
                    acc(&mut grads, *x, gx);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for (gv, &x) in gx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *gv *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut gx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (o, (yv, gv)) in gx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = yv * (gv - dot);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Cols { x, start } => {
                    let (n, c) = self.value(*x).shape();
                    let mut gx = Matrix::zeros(n, c);
                    for r in 0..n {
                        gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let part = Matrix::from_fn(g.rows(), w, |r, j| g.get(r, off + j));
                        acc(&mut grads, *p, part);
                        off += w;
                    }
                }
                Op::GatherRows { x, index } => {
                    let (n, c) = self.value(*x).shape();
                    let mut gx = Matrix::zeros(n, c);
                    for (r, idx) in index.iter().enumerate() {
                        if let Some(src) = idx {
                            for (o, v) in gx.row_mut(*src).iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::ScatterRows { src, fill, rows } => {
                    let gsrc = g.select_rows(rows);
                    let mut taken = vec![false; g.rows()];
                    for &r in rows {
                        taken[r] = true;
                    }
                    let mut gfill = Matrix::zeros(1, g.cols());
                    for (r, t) in taken.iter().enumerate() {
                        if !t {
                            for (o, v) in gfill.row_mut(0).iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                    }
                    acc(&mut grads, *src, gsrc);
                    acc(&mut grads, *fill, gfill);
                }
                Op::MeanRows(x) => {
                    let n = self.value(*x).rows();
                    let gx = Matrix::from_fn(n, g.cols(), |_, j| g.get(0, j) / n as f64);
                    acc(&mut grads, *x, gx);
                }
                Op::Reshape(x) => {
                    let (r, c) = self.value(*x).shape();
                    acc(&mut grads, *x, g.reshaped(r, c));
                }
                Op::Objective { input, grad } => {
                    acc(&mut grads, *input, grad.scaled(g.get(0, 0)));
                }
            }
        }
        out
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut s = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in s.row_mut(0).iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of d(sum of weighted outputs)/d(param).
    fn check(build: impl Fn(&mut Graph, &ParamStore) -> Var, store: &ParamStore) {
        let mut g = Graph::new();
        let out = build(&mut g, store);
        let grads = g.backward(out, store.len());
        let h = 1e-5;
        for (id, name, value) in store.iter() {
            let analytic = grads.get(id).cloned().unwrap_or(Matrix::zeros(value.rows(), value.cols()));
            for k in 0..value.len() {
                let mut plus = store.clone();
                plus.value_mut(id).as_mut_slice()[k] += h;
                let mut minus = store.clone();
                minus.value_mut(id).as_mut_slice()[k] -= h;
                let mut gp = Graph::new();
                let fp = {
                    let v = build(&mut gp, &plus);
                    gp.scalar(v)
                };
                let mut gm = Graph::new();
                let fm = {
                    let v = build(&mut gm, &minus);
                    gm.scalar(v)
                };
                let numeric = (fp - fm) / (2.0 * h);
                let a = analytic.as_slice()[k];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "{name}[{k}]: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    /// Reduces any node to a scalar with fixed, non-uniform weights.
    fn weighted_sum(g: &mut Graph, x: Var) -> Var {
        let v = g.value(x).clone();
        let w = Matrix::from_fn(v.rows(), v.cols(), |i, j| ((i * 7 + j * 3) as f64 * 0.37).sin());
        let value: f64 = v.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum();
        g.objective(x, value, w)
    }

    fn store_with(entries: &[(&str, usize, usize)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, (name, r, c)) in entries.iter().enumerate() {
            let m = Matrix::from_fn(*r, *c, |i, j| ((i * 5 + j * 11 + n * 13) as f64 * 0.618).sin());
            s.insert(*name, m).unwrap();
        }
        s
    }

    #[test]
    fn attention_like_chain_matches_finite_differences() {
        let store = store_with(&[("x", 4, 6), ("w", 6, 6), ("g", 1, 6), ("b", 1, 6), ("bias", 1, 6)]);
        check(
            |g, s| {
                let x = g.param(s, s.id("x").unwrap());
                let w = g.param(s, s.id("w").unwrap());
                let gam = g.param(s, s.id("g").unwrap());
                let bet = g.param(s, s.id("b").unwrap());
                let bias = g.param(s, s.id("bias").unwrap());
                let n = g.layer_norm(x, gam, bet, 1e-6);
                let p = g.matmul(n, w);
                let p = g.add_row(p, bias);
                let q = g.cols(p, 0, 3);
                let k = g.cols(p, 3, 3);
                let sc = g.matmul_nt(q, k);
                let sc = g.scale(sc, 0.5);
                let a = g.softmax_rows(sc, Some(&[true, false, true, true]));
                let o = g.matmul(a, k);
                let o = g.gelu(o);
                let cat = g.concat_cols(&[o, q]);
                let m = g.mean_rows(cat);
                let r = g.reshape(m, 2, 3);
                weighted_sum(g, r)
            },
            &store,
        );
    }

    #[test]
    fn gather_scatter_match_finite_differences() {
        let store = store_with(&[("src", 2, 3), ("fill", 1, 3), ("table", 3, 3)]);
        check(
            |g, s| {
                let src = g.param(s, s.id("src").unwrap());
                let fill = g.param(s, s.id("fill").unwrap());
                let table = g.param(s, s.id("table").unwrap());
                let sc = g.scatter_rows(src, fill, &[3, 0], 5);
                let ga = g.gather_rows(table, &[Some(2), Some(2), None, Some(0), Some(1)]);
                let sum = g.add(sc, ga);
                weighted_sum(g, sum)
            },
            &store,
        );
    }

    #[test]
    fn masked_keys_receive_exactly_zero_weight() {
        let mut g = Graph::new();
        let x = g.constant(Matrix::from_vec(1, 3, vec![1.0, 50.0, -2.0]));
        let y = g.softmax_rows(x, Some(&[true, false, true]));
        let v = g.value(y);
        assert_eq!(v.get(0, 1), 0.0);
        assert!((v.get(0, 0) + v.get(0, 2) - 1.0).abs() < 1e-15);
    }
}
