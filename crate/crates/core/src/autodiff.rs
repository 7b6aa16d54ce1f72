//! A small reverse-mode autodiff tape over row-major `f64` matrices.
//!
//! Rows are time steps (or batch entries), columns are features. Besides
//! the usual dense-layer operations the tape has two fused recurrence
//! nodes, [`Graph::reset_cumsum`] and [`Graph::reset_diag_recurrence`],
//! which run the step form of a linear recurrence with episode resets and
//! back-propagate through it in reverse time.

use ndarray::{s, Array2, Axis, Zip};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Sigmoid,
    /// `1 + ELU(z)` with ELU slope 1.
    Elu1p,
    /// GeLU, tanh approximation.
    Gelu,
    LeakyRelu(f64),
    Exp,
    Cos,
    Sin,
    Abs,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Unary {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Unary::Sigmoid => sigmoid(z),
            Unary::Elu1p => {
                if z > 0.0 {
                    1.0 + z
                } else {
                    z.exp()
                }
            }
            Unary::Gelu => 0.5 * z * (1.0 + (GELU_C * (z + GELU_A * z * z * z)).tanh()),
            Unary::LeakyRelu(slope) => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            Unary::Exp => z.exp(),
            Unary::Cos => z.cos(),
            Unary::Sin => z.sin(),
            Unary::Abs => z.abs(),
        }
    }

    /// Derivative given the input `z` and output `y`.
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Elu1p => {
                if z > 0.0 {
                    1.0
                } else {
                    y
                }
            }
            Unary::Gelu => {
                let t = (GELU_C * (z + GELU_A * z * z * z)).tanh();
                0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * z * z)
            }
            Unary::LeakyRelu(slope) => {
                if z > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Unary::Exp => y,
            Unary::Cos => -z.sin(),
            Unary::Sin => z.cos(),
            Unary::Abs => {
                if z > 0.0 {
                    1.0
                } else if z < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMulT {
        x: Var,
        w: Var,
    },
    AddRow {
        x: Var,
        bias: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Unary(Var, Unary),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    RepeatEach {
        x: Var,
        times: usize,
    },
    RowOuter(Var, Var),
    RowMatVecT {
        mat: Var,
        v: Var,
    },
    RowDot(Var, Var),
    DivCol {
        x: Var,
        d: Var,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    SumAll(Var),
    ResetCumsum {
        u: Var,
        flags: Vec<bool>,
    },
    ResetDiag {
        lam_re: Var,
        lam_im: Var,
        u_re: Var,
        u_im: Var,
        flags: Vec<bool>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Values are computed eagerly as nodes are added.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that requires them.
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient, or zeros of `shape` when the node did not influence the
    /// output.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input (parameter or observation).
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is computed for it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// `x · wᵀ` with `w` stored as `[out × in]`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Var {
        let value = self.value(x).dot(&self.value(w).t());
        self.push(value, Op::MatMulT { x, w }, &[x, w])
    }

    /// Adds a `[1 × m]` bias to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let value = self.value(x) + self.value(bias);
        self.push(value, Op::AddRow { x, bias }, &[x, bias])
    }

    /// Dense layer `x · wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul_t(x, w);
        self.add_row(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x) * k;
        self.push(value, Op::Scale(x, k), &[x])
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| 1.0 - v);
        self.push(value, Op::OneMinus(x), &[x])
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let value = self.value(x).mapv(|z| f.apply(z));
        self.push(value, Op::Unary(x, f), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    /// Non-parametric layer normalization over each row.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let mut value = Array2::zeros((n, d));
        let mut inv_std = Vec::with_capacity(n);
        for (row, mut out) in xv.rows().into_iter().zip(value.rows_mut()) {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            out.zip_mut_with(&row, |o, &v| *o = (v - mean) * inv);
            inv_std.push(inv);
        }
        self.push(value, Op::LayerNorm { x, inv_std }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols { x, start }, &[x])
    }

    /// Repeats each column `times` times: output column `i * times + j` is
    /// input column `i`.
    pub fn repeat_each(&mut self, x: Var, times: usize) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let value = Array2::from_shape_fn((n, d * times), |(r, c)| xv[[r, c / times]]);
        self.push(value, Op::RepeatEach { x, times }, &[x])
    }

    /// Per-row outer product, flattened row-major: `out[t, i*q + j] = a[t,i] b[t,j]`.
    pub fn row_outer(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, p) = av.dim();
        let q = bv.ncols();
        assert_eq!(bv.nrows(), n);
        let value = Array2::from_shape_fn((n, p * q), |(t, c)| av[[t, c / q]] * bv[[t, c % q]]);
        self.push(value, Op::RowOuter(a, b), &[a, b])
    }

    /// Per-row `Mᵀ v` where row `t` of `mat` is a flattened `[p × q]` matrix
    /// and row `t` of `v` has length `p`.
    pub fn row_matvec_t(&mut self, mat: Var, v: Var) -> Var {
        let (mv, vv) = (self.value(mat), self.value(v));
        let (n, p) = vv.dim();
        let q = mv.ncols() / p;
        assert_eq!(mv.ncols(), p * q);
        let mut value = Array2::zeros((n, q));
        for t in 0..n {
            for i in 0..p {
                let w = vv[[t, i]];
                for j in 0..q {
                    value[[t, j]] += mv[[t, i * q + j]] * w;
                }
            }
        }
        self.push(value, Op::RowMatVecT { mat, v }, &[mat, v])
    }

    /// Per-row dot product, `[n × 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let value = (self.value(a) * self.value(b)).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::RowDot(a, b), &[a, b])
    }

    /// Divides each row of `x` by the matching entry of the `[n × 1]` column `d`.
    pub fn div_col(&mut self, x: Var, d: Var) -> Var {
        let value = self.value(x) / self.value(d);
        self.push(value, Op::DivCol { x, d }, &[x, d])
    }

    /// Picks `x[t, idx[t]]` for every row, `[n × 1]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.nrows(), idx.len());
        let value = Array2::from_shape_fn((idx.len(), 1), |(t, _)| xv[[t, idx[t]]]);
        self.push(value, Op::Gather { x, idx: idx.to_vec() }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(x).sum());
        self.push(value, Op::SumAll(x), &[x])
    }

    /// `y_t = u_t + (flags[t] ? 0 : y_{t-1})` down the rows.
    pub fn reset_cumsum(&mut self, u: Var, flags: &[bool]) -> Var {
        let uv = self.value(u);
        assert_eq!(uv.nrows(), flags.len());
        let mut value = uv.clone();
        for (t, &flag) in flags.iter().enumerate().skip(1) {
            if !flag {
                let (prev, mut cur) = value.multi_slice_mut((s![t - 1, ..], s![t, ..]));
                cur += &prev;
            }
        }
        self.push(
            value,
            Op::ResetCumsum {
                u,
                flags: flags.to_vec(),
            },
            &[u],
        )
    }

    /// Complex diagonal recurrence `x_t = u_t + (flags[t] ? 0 : λ ⊙ x_{t-1})`
    /// with `λ = lam_re + i·lam_im` (`[1 × C]`) and inputs `[n × C]`. The
    /// output is `[n × 2C]`: real parts then imaginary parts.
    pub fn reset_diag_recurrence(&mut self, lam_re: Var, lam_im: Var, u_re: Var, u_im: Var, flags: &[bool]) -> Var {
        let (lr, li) = (self.value(lam_re), self.value(lam_im));
        let (ur, ui) = (self.value(u_re), self.value(u_im));
        let (n, c) = ur.dim();
        assert_eq!(ui.dim(), (n, c));
        assert_eq!(lr.dim(), (1, c));
        assert_eq!(li.dim(), (1, c));
        assert_eq!(flags.len(), n);
        let mut value = Array2::zeros((n, 2 * c));
        for t in 0..n {
            for k in 0..c {
                let (mut re, mut im) = (ur[[t, k]], ui[[t, k]]);
                if t > 0 && !flags[t] {
                    let (pr, pi) = (value[[t - 1, k]], value[[t - 1, c + k]]);
                    let (a, b) = (lr[[0, k]], li[[0, k]]);
                    re += a * pr - b * pi;
                    im += a * pi + b * pr;
                }
                value[[t, k]] = re;
                value[[t, c + k]] = im;
            }
        }
        self.push(
            value,
            Op::ResetDiag {
                lam_re,
                lam_im,
                u_re,
                u_im,
                flags: flags.to_vec(),
            },
            &[lam_re, lam_im, u_re, u_im],
        )
    }

    /// Reverse-mode sweep from the scalar `out` (`[1 × 1]`).
    pub fn backward(&self, out: Var) -> Grads {
        self.backward_with(out, Array2::ones((1, 1)))
    }

    /// Reverse-mode sweep seeded with an arbitrary adjoint for `out`.
    pub fn backward_with(&self, out: Var, seed: Array2<f64>) -> Grads {
        assert_eq!(seed.dim(), self.shape(out), "seed shape must match output");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &dy, &mut grads);
            }
            grads[i] = Some(dy);
        }
        Grads { grads }
    }

    fn propagate(&self, i: usize, dy: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMulT { x, w } => {
                if self.wants(*x) {
                    let dx = dy.dot(self.value(*w));
                    *self.slot(grads, *x) += &dx;
                }
                if self.wants(*w) {
                    let dw = dy.t().dot(self.value(*x));
                    *self.slot(grads, *w) += &dw;
                }
            }
            Op::AddRow { x, bias } => {
                if self.wants(*x) {
                    *self.slot(grads, *x) += dy;
                }
                if self.wants(*bias) {
                    *self.slot(grads, *bias) += &dy.sum_axis(Axis(0));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    *self.slot(grads, *a) += dy;
                }
                if self.wants(*b) {
                    *self.slot(grads, *b) += dy;
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    *self.slot(grads, *a) += dy;
                }
                if self.wants(*b) {
                    *self.slot(grads, *b) -= dy;
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = dy * self.value(*b);
                    *self.slot(grads, *a) += &d;
                }
                if self.wants(*b) {
                    let d = dy * self.value(*a);
                    *self.slot(grads, *b) += &d;
                }
            }
            Op::Scale(x, k) => {
                if self.wants(*x) {
                    self.slot(grads, *x).scaled_add(*k, dy);
                }
            }
            Op::OneMinus(x) => {
                if self.wants(*x) {
                    *self.slot(grads, *x) -= dy;
                }
            }
            Op::Unary(x, f) => {
                let xv = self.value(*x);
                let g = self.slot(grads, *x);
                Zip::from(g).and(dy).and(xv).and(y).for_each(|g, &d, &z, &yy| {
                    *g += d * f.derivative(z, yy);
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let d = y.ncols() as f64;
                let g = self.slot(grads, *x);
                for (t, ((mut grow, dyrow), yrow)) in g.rows_mut().into_iter().zip(dy.rows()).zip(y.rows()).enumerate()
                {
                    let mean_dy = dyrow.sum() / d;
                    let mean_dy_y = dyrow.dot(&yrow) / d;
                    let inv = inv_std[t];
                    Zip::from(&mut grow).and(&dyrow).and(&yrow).for_each(|g, &dv, &yv| {
                        *g += inv * (dv - mean_dy - yv * mean_dy_y);
                    });
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    if self.wants(*p) {
                        *self.slot(grads, *p) += &dy.slice(s![.., start..start + w]);
                    }
                    start += w;
                }
            }
            Op::SliceCols { x, start } => {
                let w = dy.ncols();
                let g = self.slot(grads, *x);
                let mut view = g.slice_mut(s![.., *start..*start + w]);
                view += dy;
            }
            Op::RepeatEach { x, times } => {
                let g = self.slot(grads, *x);
                for ((r, c), v) in dy.indexed_iter() {
                    g[[r, c / times]] += v;
                }
            }
            Op::RowOuter(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let q = bv.ncols();
                if self.wants(*a) {
                    let g = self.slot(grads, *a);
                    for ((t, c), v) in dy.indexed_iter() {
                        g[[t, c / q]] += v * bv[[t, c % q]];
                    }
                }
                if self.wants(*b) {
                    let g = self.slot(grads, *b);
                    for ((t, c), v) in dy.indexed_iter() {
                        g[[t, c % q]] += v * av[[t, c / q]];
                    }
                }
            }
            Op::RowMatVecT { mat, v } => {
                let (mv, vv) = (self.value(*mat), self.value(*v));
                let (n, p) = vv.dim();
                let q = dy.ncols();
                if self.wants(*mat) {
                    let g = self.slot(grads, *mat);
                    for t in 0..n {
                        for i in 0..p {
                            let w = vv[[t, i]];
                            for j in 0..q {
                                g[[t, i * q + j]] += dy[[t, j]] * w;
                            }
                        }
                    }
                }
                if self.wants(*v) {
                    let g = self.slot(grads, *v);
                    for t in 0..n {
                        for i in 0..p {
                            let mut acc = 0.0;
                            for j in 0..q {
                                acc += dy[[t, j]] * mv[[t, i * q + j]];
                            }
                            g[[t, i]] += acc;
                        }
                    }
                }
            }
            Op::RowDot(a, b) => {
                if self.wants(*a) {
                    let d = self.value(*b) * dy;
                    *self.slot(grads, *a) += &d;
                }
                if self.wants(*b) {
                    let d = self.value(*a) * dy;
                    *self.slot(grads, *b) += &d;
                }
            }
            Op::DivCol { x, d } => {
                let dv = self.value(*d);
                if self.wants(*x) {
                    let gx = dy / dv;
                    *self.slot(grads, *x) += &gx;
                }
                if self.wants(*d) {
                    // y = x / d  =>  dL/dd = -Σ_j dy_j y_j / d
                    let gd = -((dy * y).sum_axis(Axis(1)).insert_axis(Axis(1))) / dv;
                    *self.slot(grads, *d) += &gd;
                }
            }
            Op::Gather { x, idx } => {
                let g = self.slot(grads, *x);
                for (t, &k) in idx.iter().enumerate() {
                    g[[t, k]] += dy[[t, 0]];
                }
            }
            Op::SumAll(x) => {
                let k = dy[[0, 0]];
                self.slot(grads, *x).mapv_inplace(|v| v + k);
            }
            Op::ResetCumsum { u, flags } => {
                let g = self.slot(grads, *u);
                let c = dy.ncols();
                let mut carry = vec![0.0; c];
                for t in (0..flags.len()).rev() {
                    for k in 0..c {
                        let a = dy[[t, k]] + carry[k];
                        g[[t, k]] += a;
                        carry[k] = if flags[t] { 0.0 } else { a };
                    }
                }
            }
            Op::ResetDiag {
                lam_re,
                lam_im,
                u_re,
                u_im,
                flags,
            } => self.propagate_diag(y, dy, [*lam_re, *lam_im, *u_re, *u_im], flags, grads),
        }
    }

    fn propagate_diag(
        &self,
        y: &Array2<f64>,
        dy: &Array2<f64>,
        [lam_re, lam_im, u_re, u_im]: [Var; 4],
        flags: &[bool],
        grads: &mut [Option<Array2<f64>>],
    ) {
        let (lr, li) = (self.value(lam_re).clone(), self.value(lam_im).clone());
        let (n, c2) = y.dim();
        let c = c2 / 2;
        // Adjoints of x_t accumulated backwards in time, complex per channel.
        let mut adj = Array2::<f64>::zeros((n, c2));
        let mut dlam_re = Array2::<f64>::zeros((1, c));
        let mut dlam_im = Array2::<f64>::zeros((1, c));
        for k in 0..c {
            let (a, b) = (lr[[0, k]], li[[0, k]]);
            let (mut carry_re, mut carry_im) = (0.0, 0.0);
            for t in (0..n).rev() {
                let gr = dy[[t, k]] + carry_re;
                let gi = dy[[t, c + k]] + carry_im;
                adj[[t, k]] = gr;
                adj[[t, c + k]] = gi;
                if t > 0 && !flags[t] {
                    let (pr, pi) = (y[[t - 1, k]], y[[t - 1, c + k]]);
                    // dλ += adj · conj(x_{t-1});  carry = conj(λ) · adj
                    dlam_re[[0, k]] += gr * pr + gi * pi;
                    dlam_im[[0, k]] += gi * pr - gr * pi;
                    carry_re = a * gr + b * gi;
                    carry_im = a * gi - b * gr;
                } else {
                    carry_re = 0.0;
                    carry_im = 0.0;
                }
            }
        }
        if self.wants(u_re) {
            *self.slot(grads, u_re) += &adj.slice(s![.., ..c]);
        }
        if self.wants(u_im) {
            *self.slot(grads, u_im) += &adj.slice(s![.., c..]);
        }
        if self.wants(lam_re) {
            *self.slot(grads, lam_re) += &dlam_re;
        }
        if self.wants(lam_im) {
            *self.slot(grads, lam_im) += &dlam_im;
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Array2<f64>>], v: Var) -> &'a mut Array2<f64> {
        grads[v.0].get_or_insert_with(|| Array2::zeros(self.nodes[v.0].value.dim()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
        Array2::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences of `f` over every entry of every input.
    fn check_gradients(inputs: Vec<Array2<f64>>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
        let out = f(&mut g, &vars);
        let total = g.sum_all(out);
        let grads = g.backward(total);
        let eval = |xs: &[Array2<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
            let out = f(&mut g, &vars);
            g.value(out).sum()
        };
        let h = 1e-6;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[k], x.dim());
            for idx in 0..x.len() {
                let mut plus = inputs.clone();
                let mut minus = inputs.clone();
                plus[k].as_slice_mut().unwrap()[idx] += h;
                minus[k].as_slice_mut().unwrap()[idx] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[idx];
                assert!(
                    (a - fd).abs() <= 1e-6 * a.abs().max(fd.abs()).max(1.0),
                    "input {k} entry {idx}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn dense_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, (3, 4));
        let w = random(&mut rng, (5, 4));
        let b = random(&mut rng, (1, 5));
        check_gradients(vec![x, w, b], |g, v| {
            let h = g.linear(v[0], v[1], v[2]);
            let n = g.layer_norm(h);
            let a = g.unary(n, Unary::LeakyRelu(0.01));
            let s = g.sigmoid(h);
            let e = g.unary(h, Unary::Gelu);
            let m = g.mul(a, s);
            let o = g.one_minus(e);
            g.add(m, o)
        });
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, (4, 3));
        let b = random(&mut rng, (4, 2));
        let c = random(&mut rng, (4, 3));
        check_gradients(vec![a, b, c], |g, v| {
            let outer = g.row_outer(v[0], v[1]); // 4 x 6
            let q = g.unary(v[2], Unary::Elu1p);
            let mv = g.row_matvec_t(outer, q); // 4 x 2
            let dot = g.row_dot(v[0], q);
            let d = g.unary(dot, Unary::Exp);
            let ratio = g.div_col(mv, d);
            let cat = g.concat_cols(&[ratio, v[0]]);
            let sl = g.slice_cols(cat, 1, 3);
            let rep = g.repeat_each(sl, 2);
            let sc = g.scale(rep, -0.7);
            let picked = g.gather(sc, &[0, 5, 2, 1]);
            let cs = g.unary(picked, Unary::Cos);
            let sn = g.unary(picked, Unary::Sin);
            g.sub(cs, sn)
        });
    }

    #[test]
    fn recurrences_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let flags = [true, false, false, true, false, false, false];
        let lr = random(&mut rng, (1, 3)) * 0.9;
        let li = random(&mut rng, (1, 3)) * 0.4;
        let ur = random(&mut rng, (7, 3));
        let ui = random(&mut rng, (7, 3));
        check_gradients(vec![lr, li, ur.clone(), ui], |g, v| {
            let y = g.reset_diag_recurrence(v[0], v[1], v[2], v[3], &flags);
            g.unary(y, Unary::Sin)
        });
        check_gradients(vec![ur], |g, v| {
            let y = g.reset_cumsum(v[0], &flags);
            g.unary(y, Unary::Sigmoid)
        });
    }

    #[test]
    fn diag_recurrence_forward() {
        let mut g = Graph::new();
        let lr = g.constant(array![[0.5]]);
        let li = g.constant(array![[0.0]]);
        let ur = g.constant(array![[1.0], [1.0], [1.0], [1.0]]);
        let ui = g.constant(array![[0.0], [0.0], [0.0], [0.0]]);
        let y = g.reset_diag_recurrence(lr, li, ur, ui, &[true, false, false, true]);
        assert_eq!(g.value(y).column(0).to_vec(), vec![1.0, 1.5, 1.75, 1.0]);
    }

    #[test]
    fn resets_cut_gradients_exactly() {
        let mut g = Graph::new();
        let u = g.param(Array2::from_elem((6, 2), 0.3));
        let y = g.reset_cumsum(u, &[true, false, false, true, false, false]);
        let tail = g.slice_cols(y, 0, 2);
        let s = g.sum_all(tail);
        let seed = Array2::ones((1, 1));
        let grads = g.backward_with(s, seed);
        let gu = grads.get(u).unwrap();
        // Every position feeds positions after it inside its own episode only.
        assert_eq!(gu.column(0).to_vec(), vec![3.0, 2.0, 1.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn zero_seed_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let x = g.param(random(&mut rng, (3, 3)));
        let w = g.param(random(&mut rng, (2, 3)));
        let y = g.matmul_t(x, w);
        let grads = g.backward_with(y, Array2::zeros((3, 2)));
        assert!(grads.get(w).unwrap().iter().all(|&v| v == 0.0));
        assert!(grads.get(x).unwrap().iter().all(|&v| v == 0.0));
    }
}
