//! Row-major f32 matrices and a small reverse-mode tape.
//!
//! The tape only knows the handful of operations the encoder-decoder needs.
//! Parameters are borrowed, never copied, so one trained parameter set can
//! serve many concurrent forward passes, each on its own tape.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    #[serde(with = "super::f32_codec")]
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix shape mismatch");
        Self { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, v: f32) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, v: f32) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|&x| (x as f64) * (x as f64)).sum()
    }
}

/// `c = op(a) · op(b) + beta · c` on row-major buffers.
///
/// `op(a)` is `m×k`, `op(b)` is `k×n`. When `ta` is set, `a` is stored as
/// `k×m`; likewise `tb` means `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can produce.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Gather { table: Var, ids: Vec<u32> },
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix, rstd: Vec<f32> },
    Softmax { x: Var },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Option<Matrix>,
    op: Op,
}

const LN_EPS: f32 = 1e-5;

pub struct Tape<'p> {
    params: &'p [Matrix],
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Matrix]) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(i)) => &self.params[*i],
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Input)
    }

    pub fn param(&mut self, index: usize) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(index),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id as usize));
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.rows, "matmul inner dims");
        let mut out = Matrix::zeros(av.rows, bv.cols);
        gemm(av.rows, av.cols, bv.cols, &av.data, false, &bv.data, false, 0.0, &mut out.data);
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.cols, "matmul_bt inner dims");
        let mut out = Matrix::zeros(av.rows, bv.rows);
        gemm(av.rows, av.cols, bv.rows, &av.data, false, &bv.data, true, 0.0, &mut out.data);
        self.push(out, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds the `1×n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        let bias = self.value(b);
        assert_eq!(bias.rows, 1);
        assert_eq!(bias.cols, out.cols);
        for r in 0..out.rows {
            for (x, &y) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *x += y;
            }
        }
        self.push(out, Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x *= s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x = x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let n = xv.cols;
        let mut xhat = Matrix::zeros(xv.rows, n);
        let mut out = Matrix::zeros(xv.rows, n);
        let mut rstd = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for i in 0..n {
                xh[i] = (row[i] - mean) * rs;
            }
            let o = out.row_mut(r);
            for i in 0..n {
                o[i] = xh[i] * g.data[i] + b.data[i];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked out.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let live = if causal { (r + 1).min(row.len()) } else { row.len() };
            let max = row[..live].iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for v in &mut row[..live] {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in &mut row[..live] {
                *v /= sum;
            }
            for v in &mut row[live..] {
                *v = 0.0;
            }
        }
        self.push(out, Op::Softmax { x })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(xv.rows, len);
        for r in 0..xv.rows {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Back-propagates `seed` (the gradient of the loss w.r.t. `root`) and
    /// accumulates parameter gradients into `param_grads`.
    pub fn backward(&self, root: Var, seed: Matrix, param_grads: &mut [Matrix]) {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(i) => param_grads[*i].add_assign(&dy),
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut dt = Matrix::zeros(t.rows, t.cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for (a, b) in dt.row_mut(id as usize).iter_mut().zip(dy.row(r)) {
                            *a += b;
                        }
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    // da = dy · bᵀ ; db = aᵀ · dy
                    let mut da = Matrix::zeros(av.rows, av.cols);
                    gemm(dy.rows, dy.cols, bv.rows, &dy.data, false, &bv.data, true, 0.0, &mut da.data);
                    let mut db = Matrix::zeros(bv.rows, bv.cols);
                    gemm(av.cols, av.rows, dy.cols, &av.data, true, &dy.data, false, 0.0, &mut db.data);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulBt(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    // y = a · bᵀ ; da = dy · b ; db = dyᵀ · a
                    let mut da = Matrix::zeros(av.rows, av.cols);
                    gemm(dy.rows, dy.cols, bv.cols, &dy.data, false, &bv.data, false, 0.0, &mut da.data);
                    let mut db = Matrix::zeros(bv.rows, bv.cols);
                    gemm(dy.cols, dy.rows, av.cols, &dy.data, true, &av.data, false, 0.0, &mut db.data);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, dy.clone());
                    acc(&mut grads, *a, dy);
                }
                Op::AddRow(a, b) => {
                    let mut db = Matrix::zeros(1, dy.cols);
                    for r in 0..dy.rows {
                        for (s, v) in db.data.iter_mut().zip(dy.row(r)) {
                            *s += v;
                        }
                    }
                    acc(&mut grads, *b, db);
                    acc(&mut grads, *a, dy);
                }
                Op::Scale(a, s) => {
                    let mut da = dy;
                    da.data.iter_mut().for_each(|x| *x *= s);
                    acc(&mut grads, *a, da);
                }
                Op::Relu(a) => {
                    let out = node.value.as_ref().unwrap();
                    let mut da = dy;
                    for (g, &o) in da.data.iter_mut().zip(&out.data) {
                        if o <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    acc(&mut grads, *a, da);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let g = self.value(*gamma);
                    let n = dy.cols;
                    let mut dgamma = Matrix::zeros(1, n);
                    let mut dbeta = Matrix::zeros(1, n);
                    let mut dx = Matrix::zeros(dy.rows, n);
                    let mut dxhat = vec![0.0f32; n];
                    for r in 0..dy.rows {
                        let (dyr, xh) = (dy.row(r), xhat.row(r));
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for i in 0..n {
                            dgamma.data[i] += dyr[i] * xh[i];
                            dbeta.data[i] += dyr[i];
                            dxhat[i] = dyr[i] * g.data[i];
                            mean_d += dxhat[i];
                            mean_dx += dxhat[i] * xh[i];
                        }
                        mean_d /= n as f32;
                        mean_dx /= n as f32;
                        let out = dx.row_mut(r);
                        for i in 0..n {
                            out[i] = rstd[r] * (dxhat[i] - mean_d - xh[i] * mean_dx);
                        }
                    }
                    acc(&mut grads, *gamma, dgamma);
                    acc(&mut grads, *beta, dbeta);
                    acc(&mut grads, *x, dx);
                }
                Op::Softmax { x } => {
                    let p = node.value.as_ref().unwrap();
                    let mut dx = Matrix::zeros(p.rows, p.cols);
                    for r in 0..p.rows {
                        let (pr, dr) = (p.row(r), dy.row(r));
                        let dot: f32 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for (o, (pi, di)) in dx.row_mut(r).iter_mut().zip(pr.iter().zip(dr)) {
                            *o = pi * (di - dot);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows, xv.cols);
                    for r in 0..dy.rows {
                        dx.row_mut(r)[*start..*start + dy.cols].copy_from_slice(dy.row(r));
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let cols = self.value(p).cols;
                        let mut dp = Matrix::zeros(dy.rows, cols);
                        for r in 0..dy.rows {
                            dp.row_mut(r).copy_from_slice(&dy.row(r)[off..off + cols]);
                        }
                        off += cols;
                        acc(&mut grads, p, dp);
                    }
                }
            }
        }
    }
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax_row(row: &[f32]) -> Vec<f32> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = row.iter().map(|&v| ((v - max) as f64).exp()).sum::<f64>().ln() + max as f64;
    row.iter().map(|&v| (v as f64 - lse) as f32).collect()
}
