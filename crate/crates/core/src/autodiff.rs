//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward evaluation. Values are `Array2<f64>`;
//! scalars are `1 x 1` matrices and row vectors are `1 x n`. Calling [`Tape::backward`] replays
//! the record once in reverse and consumes the tape.

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};
use crate::grid::Topology;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
pub const LEAKY_SLOPE: f64 = 0.01;

/// Standard normal cumulative distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// `P(a < Z <= b)` for a standard normal `Z`, evaluated on the tail that avoids cancellation.
pub fn normal_interval(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        0.5 * (libm::erfc(a / SQRT_2) - libm::erfc(b / SQRT_2))
    } else if b <= 0.0 {
        0.5 * (libm::erfc(-b / SQRT_2) - libm::erfc(-a / SQRT_2))
    } else {
        1.0 - 0.5 * (libm::erfc(-a / SQRT_2) + libm::erfc(b / SQRT_2))
    }
}

/// Numerically stable `log(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise functions with known derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    LeakyRelu,
    Tanh,
    Softplus,
    Log,
    Exp,
    NormalCdf,
    NormalPdf,
    Square,
    Sqrt,
    /// `x log x`, extended by 0 at 0.
    XLogX,
    /// `log x` for `x >= delta`, continued linearly with matching slope below `delta`.
    Barrier { delta: f64 },
}

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Unary::Tanh => x.tanh(),
            Unary::Softplus => softplus(x),
            Unary::Log => x.ln(),
            Unary::Exp => x.exp(),
            Unary::NormalCdf => normal_cdf(x),
            Unary::NormalPdf => normal_pdf(x),
            Unary::Square => x * x,
            Unary::Sqrt => x.max(0.0).sqrt(),
            Unary::XLogX => {
                if x > 0.0 {
                    x * x.ln()
                } else {
                    0.0
                }
            }
            Unary::Barrier { delta } => {
                if x >= delta {
                    x.ln()
                } else {
                    delta.ln() + (x - delta) / delta
                }
            }
        }
    }

    /// Derivative at input `x` with output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Softplus => sigmoid(x),
            Unary::Log => 1.0 / x,
            Unary::Exp => y,
            Unary::NormalCdf => normal_pdf(x),
            Unary::NormalPdf => -x * y,
            Unary::Square => 2.0 * x,
            // The derivative is infinite at 0; the floor keeps zero-spread ensembles finite.
            Unary::Sqrt => 0.5 / y.max(1e-15),
            Unary::XLogX => x.max(1e-300).ln() + 1.0,
            Unary::Barrier { delta } => 1.0 / x.max(delta),
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Min(Var, Var),
    Max(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Unary(Var, Unary),
    Clip(Var, f64, f64),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    Transpose(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    GaussianBins(Var, BinSpec),
    SeparablePush { mu: Var, kx: Var, ky: Var },
}

/// Parameters of the fused Gaussian binning primitive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinSpec {
    pub bins: usize,
    pub topology: Topology,
    pub std: f64,
}

/// Periodic images summed on each side for the wrapped Gaussian.
const WRAPS: i32 = 3;
/// Images farther than this many standard deviations are skipped.
const WRAP_CUTOFF: f64 = 8.5;

impl BinSpec {
    fn edge(&self, j: usize) -> f64 {
        j as f64 / self.bins as f64
    }

    /// Probability mass of each bin under `N(mean, std^2)` and its derivative in `mean`.
    pub fn row(&self, mean: f64, probs: &mut [f64], dprobs: Option<&mut [f64]>) {
        let k = self.bins;
        let sd = self.std;
        probs.iter_mut().for_each(|p| *p = 0.0);
        let mut dp_buf = dprobs;
        if let Some(d) = dp_buf.as_deref_mut() {
            d.iter_mut().for_each(|x| *x = 0.0);
        }
        match self.topology {
            Topology::Torus => {
                let m = mean - mean.floor();
                for w in -WRAPS..=WRAPS {
                    let lo = w as f64;
                    if m - (lo + 1.0) > WRAP_CUTOFF * sd || lo - m > WRAP_CUTOFF * sd {
                        continue;
                    }
                    for j in 0..k {
                        let a = (lo + self.edge(j) - m) / sd;
                        let b = (lo + self.edge(j + 1) - m) / sd;
                        probs[j] += normal_interval(a, b);
                        if let Some(d) = dp_buf.as_deref_mut() {
                            d[j] -= (normal_pdf(b) - normal_pdf(a)) / sd;
                        }
                    }
                }
            }
            Topology::ClippedBox => {
                for j in 0..k {
                    let a = if j == 0 { f64::NEG_INFINITY } else { (self.edge(j) - mean) / sd };
                    let b = if j + 1 == k {
                        f64::INFINITY
                    } else {
                        (self.edge(j + 1) - mean) / sd
                    };
                    probs[j] = normal_interval(a, b);
                    if let Some(d) = dp_buf.as_deref_mut() {
                        let pa = if a.is_finite() { normal_pdf(a) } else { 0.0 };
                        let pb = if b.is_finite() { normal_pdf(b) } else { 0.0 };
                        d[j] = -(pb - pa) / sd;
                    }
                }
            }
        }
    }

    /// Bin probabilities for a column of means (`n x 1` -> `n x bins`).
    pub fn matrix(&self, means: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((means.nrows(), self.bins));
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            self.row(means[[i, 0]], row.as_slice_mut().expect("contiguous"), None);
        }
        out
    }
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records operations of one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of `var`; `None` when it does not influence the output or was a constant.
    pub fn get(&self, var: Var) -> Option<&Array2<f64>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, zeros of the given shape when absent.
    pub fn get_or_zeros(&self, var: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(var).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(a: &Array2<f64>, b: &Array2<f64>, op: &str) {
    assert_eq!(a.dim(), b.dim(), "{op}: operand shapes differ");
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Value of a `1 x 1` node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar_value on a non-scalar node");
        val[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// Adds a `1 x m` row to every row of an `n x m` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row: second operand must be a single row");
        let value = self.value(x) + r;
        self.push(value, Op::AddRow(x, row), &[x, row])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "add");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "sub");
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "mul");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "div");
        let value = self.value(a) / self.value(b);
        self.push(value, Op::Div(a, b), &[a, b])
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "min");
        let value = Zip::from(self.value(a)).and(self.value(b)).map_collect(|x, y| x.min(*y));
        self.push(value, Op::Min(a, b), &[a, b])
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "max");
        let value = Zip::from(self.value(a)).and(self.value(b)).map_collect(|x, y| x.max(*y));
        self.push(value, Op::Max(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x) * c;
        self.push(value, Op::Scale(x, c), &[x])
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x) + c;
        self.push(value, Op::Offset(x), &[x])
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let value = self.value(x).mapv(|v| f.apply(v));
        self.push(value, Op::Unary(x, f), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn clip(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).mapv(|v| v.clamp(lo, hi));
        self.push(value, Op::Clip(x, lo, hi), &[x])
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    /// Column sums (`n x m` -> `1 x m`).
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let value = self.value(x).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(value, Op::SumRows(x), &[x])
    }

    /// Row sums (`n x m` -> `n x 1`).
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let value = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::SumCols(x), &[x])
    }

    /// Repeats a `1 x m` row `n` times.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Var {
        let v = self.value(x);
        assert_eq!(v.nrows(), 1, "broadcast_rows expects a single row");
        let value = v.broadcast((n, v.ncols())).expect("broadcast").to_owned();
        self.push(value, Op::BroadcastRows(x), &[x])
    }

    /// Repeats an `n x 1` column `m` times.
    pub fn broadcast_cols(&mut self, x: Var, m: usize) -> Var {
        let v = self.value(x);
        assert_eq!(v.ncols(), 1, "broadcast_cols expects a single column");
        let value = v.broadcast((v.nrows(), m)).expect("broadcast").to_owned();
        self.push(value, Op::BroadcastCols(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).t().to_owned();
        self.push(value, Op::Transpose(x), &[x])
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(x, start), &[x])
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice(s![start..end, ..]).to_owned();
        self.push(value, Op::SliceRows(x, start), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let flat: Vec<f64> = self.value(x).iter().copied().collect();
        let value = Array2::from_shape_vec((rows, cols), flat).expect("reshape: size mismatch");
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Gaussian bin probabilities for a column of means (`n x 1` -> `n x bins`).
    pub fn gaussian_bins(&mut self, means: Var, spec: BinSpec) -> Var {
        assert_eq!(self.value(means).ncols(), 1, "gaussian_bins expects a column of means");
        let value = spec.matrix(self.value(means));
        self.push(value, Op::GaussianBins(means, spec), &[means])
    }

    /// Pushes a `1 x n` mass row through a product kernel given by per-axis bin
    /// probabilities `kx`, `ky` (`n x k` each); returns the `1 x k^2` row-major result.
    pub fn separable_push(&mut self, mu: Var, kx: Var, ky: Var) -> Var {
        let (m, x, y) = (self.value(mu), self.value(kx), self.value(ky));
        assert_eq!(m.ncols(), x.nrows(), "separable_push: mass length");
        same_shape(x, y, "separable_push");
        let k = x.ncols();
        let weighted = x * &m.t();
        let grid = weighted.t().dot(y);
        let value = grid.into_shape_with_order((1, k * k)).expect("square grid");
        self.push(value, Op::SeparablePush { mu, kx, ky }, &[mu, kx, ky])
    }

    /// Reverse pass from `out`. `seed` defaults to 1 and requires a `1 x 1` output.
    pub fn backward(&mut self, out: Var, seed: Option<Array2<f64>>) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        let seed = match seed {
            Some(s) => {
                if s.dim() != self.shape(out) {
                    return Err(Error::ShapeMismatch { expected: self.value(out).len(), got: s.len() });
                }
                s
            }
            None => {
                if self.shape(out) != (1, 1) {
                    return Err(Error::ShapeMismatch { expected: 1, got: self.value(out).len() });
                }
                Array2::ones((1, 1))
            }
        };
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[idx];
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, delta: Array2<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    acc(*a, g.dot(&val(*b).t()));
                }
                if needs(*b) {
                    acc(*b, val(*a).t().dot(g));
                }
            }
            Op::AddRow(x, row) => {
                acc(*x, g.clone());
                if needs(*row) {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                if needs(*b) {
                    acc(*b, -g);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g * val(*b));
                }
                if needs(*b) {
                    acc(*b, g * val(*a));
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if needs(*a) {
                    acc(*a, g / bv);
                }
                if needs(*b) {
                    let d = Zip::from(g).and(&node.value).and(bv).map_collect(|g, y, b| -g * y / b);
                    acc(*b, d);
                }
            }
            Op::Min(a, b) | Op::Max(a, b) => {
                let pick_a = |x: f64, y: f64| match node.op {
                    Op::Min(..) => x <= y,
                    _ => x >= y,
                };
                let (av, bv) = (val(*a), val(*b));
                if needs(*a) {
                    let d = Zip::from(g)
                        .and(av)
                        .and(bv)
                        .map_collect(|g, x, y| if pick_a(*x, *y) { *g } else { 0.0 });
                    acc(*a, d);
                }
                if needs(*b) {
                    let d = Zip::from(g)
                        .and(av)
                        .and(bv)
                        .map_collect(|g, x, y| if pick_a(*x, *y) { 0.0 } else { *g });
                    acc(*b, d);
                }
            }
            Op::Scale(x, c) => acc(*x, g * *c),
            Op::Offset(x) => acc(*x, g.clone()),
            Op::Unary(x, f) => {
                let d = Zip::from(g)
                    .and(val(*x))
                    .and(&node.value)
                    .map_collect(|g, x, y| g * f.derivative(*x, *y));
                acc(*x, d);
            }
            Op::Clip(x, lo, hi) => {
                let d = Zip::from(g)
                    .and(val(*x))
                    .map_collect(|g, x| if *x >= *lo && *x <= *hi { *g } else { 0.0 });
                acc(*x, d);
            }
            Op::Sum(x) => {
                let shape = val(*x).dim();
                acc(*x, Array2::from_elem(shape, g[[0, 0]]));
            }
            Op::SumRows(x) => {
                let shape = val(*x).dim();
                acc(*x, g.broadcast(shape).expect("broadcast").to_owned());
            }
            Op::SumCols(x) => {
                let shape = val(*x).dim();
                acc(*x, g.broadcast(shape).expect("broadcast").to_owned());
            }
            Op::BroadcastRows(x) => acc(*x, g.sum_axis(Axis(0)).insert_axis(Axis(0))),
            Op::BroadcastCols(x) => acc(*x, g.sum_axis(Axis(1)).insert_axis(Axis(1))),
            Op::Transpose(x) => acc(*x, g.t().to_owned()),
            Op::SliceCols(x, start) => {
                let mut d = Array2::zeros(val(*x).dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(*x, d);
            }
            Op::SliceRows(x, start) => {
                let mut d = Array2::zeros(val(*x).dim());
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                acc(*x, d);
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for p in parts {
                    let w = val(*p).ncols();
                    if needs(*p) {
                        acc(*p, g.slice(s![.., col..col + w]).to_owned());
                    }
                    col += w;
                }
            }
            Op::Reshape(x) => {
                let shape = val(*x).dim();
                let flat: Vec<f64> = g.iter().copied().collect();
                acc(*x, Array2::from_shape_vec(shape, flat).expect("reshape"));
            }
            Op::GaussianBins(means, spec) => {
                let m = val(*means);
                let mut d = Array2::zeros(m.dim());
                let mut probs = vec![0.0; spec.bins];
                let mut dprobs = vec![0.0; spec.bins];
                for i in 0..m.nrows() {
                    spec.row(m[[i, 0]], &mut probs, Some(&mut dprobs));
                    d[[i, 0]] = g.row(i).iter().zip(&dprobs).map(|(a, b)| a * b).sum();
                }
                acc(*means, d);
            }
            Op::SeparablePush { mu, kx, ky } => {
                let (x, y) = (val(*kx), val(*ky));
                let k = x.ncols();
                let gg = g.to_shape((k, k)).expect("square grid").to_owned();
                let m_col = val(*mu).t().to_owned();
                if needs(*mu) {
                    let d = (x.dot(&gg) * y).sum_axis(Axis(1)).insert_axis(Axis(0));
                    acc(*mu, d);
                }
                if needs(*kx) {
                    acc(*kx, y.dot(&gg.t()) * &m_col);
                }
                if needs(*ky) {
                    acc(*ky, x.dot(&gg) * &m_col);
                }
            }
        }
    }
}
