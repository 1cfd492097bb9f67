//! Matrix-level reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of a forward pass. Parameters are
//! registered by reference (deduplicated by address), so one parameter used in
//! several places accumulates a single gradient. [`Graph::backward`] accepts
//! seed gradients for any set of outputs, which lets a caller differentiate a
//! loss that was computed outside the graph.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::numerics::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Matrix),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    VStack(Vec<Var>),
    ScaleRows(Var, Var),
    MeanRows(Var),
    Transpose(Var),
    Sum(Var),
}

struct Node<'p> {
    value: Cow<'p, Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Anything holding trainable matrices in a fixed visiting order.
pub trait Parameters {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix));

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |m| n += m.len());
        n
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        self.visit(&mut |m| out.extend_from_slice(m.as_slice()));
        out
    }

    /// Overwrites every parameter from a flat buffer produced by [`Parameters::to_flat`].
    fn load_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut(&mut |m| {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        });
        assert_eq!(
            offset,
            flat.len(),
            "flat buffer length does not match parameters"
        );
    }
}

impl Parameters for Matrix {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix)) {
        f(self)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        f(self)
    }
}

impl<T: Parameters> Parameters for Vec<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix)) {
        self.iter().for_each(|p| p.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        self.iter_mut().for_each(|p| p.visit_mut(f));
    }
}

#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    params: HashMap<usize, Var>,
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}

fn addr(m: &Matrix) -> usize {
    m as *const Matrix as usize
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a borrowed trainable matrix. Registering the same matrix twice
    /// returns the same variable.
    pub fn param(&mut self, m: &'p Matrix) -> Var {
        if let Some(&v) = self.params.get(&addr(m)) {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(m),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(addr(m), v);
        v
    }

    /// An owned leaf that receives a gradient (an input being differentiated).
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// An owned leaf that never receives a gradient.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b)).expect("matmul shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .matmul_t(self.value(b))
            .expect("matmul_t shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b)).expect("add shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds the `1 x c` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "add_row expects a row vector");
        let value = self.value(a).add_row(b.row(0)).expect("add_row shape");
        let rg = self.rg(a) || self.rg(bias);
        self.push(value, Op::AddRow(a, bias), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(&mut self, a: Var, c: Matrix) -> Var {
        let value = self.value(a).hadamard(&c).expect("mul_const shape");
        let rg = self.rg(a);
        self.push(value, Op::MulConst(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        // Unmasked rows only fail on non-finite input; propagate NaN so the
        // caller sees a non-finite loss instead of a panic.
        let x = self.value(a);
        let value = crate::numerics::softmax_rows(x, None)
            .unwrap_or_else(|_| Matrix::filled(x.rows(), x.cols(), f64::NAN));
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let n = cols as f64;
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        let g = self.value(gain).row(0);
        let b = self.value(bias).row(0);
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let xr = xhat.row(r);
            for (j, o) in value.row_mut(r).iter_mut().enumerate() {
                *o = xr[j] * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice_rows(start, end);
        let rg = self.rg(a);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice_cols(start, end);
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Matrix::hstack(&mats).expect("concat_cols shape");
        let rg = parts.iter().any(|&v| self.rg(v));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Matrix::vstack(&mats).expect("vstack shape");
        let rg = parts.iter().any(|&v| self.rg(v));
        self.push(value, Op::VStack(parts.to_vec()), rg)
    }

    /// Multiplies row `i` of `a` by `s[i]`, where `s` is a column vector.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Var {
        let av = self.value(a);
        let sv = self.value(s);
        assert_eq!(
            sv.shape(),
            (av.rows(), 1),
            "scale_rows expects a column vector"
        );
        let mut value = av.clone();
        for r in 0..av.rows() {
            let k = sv[(r, 0)];
            value.row_mut(r).iter_mut().for_each(|v| *v *= k);
        }
        let rg = self.rg(a) || self.rg(s);
        self.push(value, Op::ScaleRows(a, s), rg)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_rows();
        let rg = self.rg(a);
        self.push(value, Op::MeanRows(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// Linear map `x W + b` with `b` a row vector.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// Reverse pass from the given seed gradients.
    pub fn backward(&self, seeds: &[(Var, Matrix)]) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(
                g.shape(),
                self.value(*v).shape(),
                "seed gradient shape does not match its variable"
            );
            accumulate(&mut grads, *v, g.clone());
            last = last.max(v.0);
        }
        for idx in (0..=last.min(self.nodes.len().saturating_sub(1))).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node<'p>, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.matmul_t(self.value(*b)).unwrap());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, self.value(*a).t_matmul(g).unwrap());
                }
            }
            Op::MatMulT(a, b) => {
                // out = A B^T: dA = G B, dB = G^T A
                if self.rg(*a) {
                    accumulate(grads, *a, g.matmul(self.value(*b)).unwrap());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.t_matmul(self.value(*a)).unwrap());
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::AddRow(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    let mut col_sums = vec![0.0; g.cols()];
                    for r in g.iter_rows() {
                        for (s, v) in col_sums.iter_mut().zip(r) {
                            *s += v;
                        }
                    }
                    accumulate(grads, *b, Matrix::row_vector(&col_sums));
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::MulConst(a, c) => accumulate(grads, *a, g.hadamard(c).unwrap()),
            Op::Relu(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                for (dv, xv) in d.as_mut_slice().iter_mut().zip(x.as_slice()) {
                    if *xv <= 0.0 {
                        *dv = 0.0;
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let inner = dot(yr, gr);
                    for (j, o) in d.row_mut(r).iter_mut().enumerate() {
                        *o = yr[j] * (gr[j] - inner);
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).row(0);
                let (rows, cols) = xhat.shape();
                if self.rg(*gain) || self.rg(*bias) {
                    let mut dg = vec![0.0; cols];
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            dg[j] += g[(r, j)] * xhat[(r, j)];
                            db[j] += g[(r, j)];
                        }
                    }
                    if self.rg(*gain) {
                        accumulate(grads, *gain, Matrix::row_vector(&dg));
                    }
                    if self.rg(*bias) {
                        accumulate(grads, *bias, Matrix::row_vector(&db));
                    }
                }
                if self.rg(*x) {
                    let n = cols as f64;
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let xr = xhat.row(r);
                        let dxhat: Vec<f64> = (0..cols).map(|j| g[(r, j)] * gv[j]).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / n;
                        let mean_dx = dot(&dxhat, xr) / n;
                        let inv = inv_std[r];
                        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = inv * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    d.row_mut(start + r).copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, d);
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let width = self.value(p).cols();
                    if self.rg(p) {
                        accumulate(grads, p, g.slice_cols(offset, offset + width));
                    }
                    offset += width;
                }
            }
            Op::VStack(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let height = self.value(p).rows();
                    if self.rg(p) {
                        accumulate(grads, p, g.slice_rows(offset, offset + height));
                    }
                    offset += height;
                }
            }
            Op::ScaleRows(a, s) => {
                let av = self.value(*a);
                let sv = self.value(*s);
                if self.rg(*a) {
                    let mut d = g.clone();
                    for r in 0..d.rows() {
                        let k = sv[(r, 0)];
                        d.row_mut(r).iter_mut().for_each(|v| *v *= k);
                    }
                    accumulate(grads, *a, d);
                }
                if self.rg(*s) {
                    let d = Matrix::from_fn(av.rows(), 1, |r, _| dot(g.row(r), av.row(r)));
                    accumulate(grads, *s, d);
                }
            }
            Op::MeanRows(a) => {
                let src = self.value(*a);
                let k = 1.0 / src.rows() as f64;
                let d = Matrix::from_fn(src.rows(), src.cols(), |_, j| g[(0, j)] * k);
                accumulate(grads, *a, d);
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::Sum(a) => {
                let src = self.value(*a);
                accumulate(grads, *a, Matrix::filled(src.rows(), src.cols(), g[(0, 0)]));
            }
        }
    }

    /// Gathers parameter gradients into a flat vector in `params`' visiting
    /// order. Parameters that never entered the graph contribute zeros.
    pub fn param_grads<P: Parameters + ?Sized>(&self, grads: &Gradients, params: &P) -> Vec<f64> {
        let mut out = Vec::with_capacity(params.num_parameters());
        self.accumulate_param_grads(grads, params, &mut out, false);
        out
    }

    /// Adds parameter gradients into `acc`, which must already hold one slot
    /// per parameter (or be empty, in which case it is filled).
    pub fn add_param_grads<P: Parameters + ?Sized>(
        &self,
        grads: &Gradients,
        params: &P,
        acc: &mut Vec<f64>,
    ) {
        if acc.is_empty() {
            acc.resize(params.num_parameters(), 0.0);
        }
        self.accumulate_param_grads(grads, params, acc, true);
    }

    fn accumulate_param_grads<P: Parameters + ?Sized>(
        &self,
        grads: &Gradients,
        params: &P,
        out: &mut Vec<f64>,
        add: bool,
    ) {
        let mut offset = 0;
        params.visit(&mut |m| {
            let g = self.params.get(&addr(m)).and_then(|&v| grads.get(v));
            if add {
                if let Some(g) = g {
                    for (o, v) in out[offset..offset + m.len()].iter_mut().zip(g.as_slice()) {
                        *o += v;
                    }
                }
            } else {
                match g {
                    Some(g) => out.extend_from_slice(g.as_slice()),
                    None => out.extend(std::iter::repeat_n(0.0, m.len())),
                }
            }
            offset += m.len();
        });
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g).expect("gradient shape"),
        slot @ None => *slot = Some(g),
    }
}
