use std::rc::Rc;

use super::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("{op}: shape mismatch {lhs} vs {rhs}")]
    ShapeMismatch { op: &'static str, lhs: Shape, rhs: Shape },
    #[error("{op}: argument {value} at index {index} outside the guarded domain")]
    Domain { op: &'static str, index: usize, value: f64 },
    #[error("{op}: input {shape} too small for {need}")]
    TooSmall {
        op: &'static str,
        shape: Shape,
        need: Shape,
    },
    #[error("backward: output must be a scalar, got {0}")]
    NotScalar(Shape),
    #[error("backward: output does not depend on the requested input")]
    Unreachable,
    #[error("replay: the moved node must be a leaf")]
    NotLeaf,
}

type GResult<T> = Result<T, GraphError>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A fixed 2-D correlation kernel.
#[derive(Clone, Debug, PartialEq)]
pub enum Kernel {
    Dense {
        rows: usize,
        cols: usize,
        weights: Vec<f64>,
    },
    /// Outer product `vertical[i] * horizontal[j]`, applied as two 1-D passes.
    Separable { vertical: Vec<f64>, horizontal: Vec<f64> },
}

impl Kernel {
    pub fn dense(rows: usize, cols: usize, weights: Vec<f64>) -> Self {
        assert_eq!(rows * cols, weights.len());
        assert!(rows > 0 && cols > 0);
        Kernel::Dense { rows, cols, weights }
    }

    pub fn separable(vertical: Vec<f64>, horizontal: Vec<f64>) -> Self {
        assert!(!vertical.is_empty() && !horizontal.is_empty());
        Kernel::Separable { vertical, horizontal }
    }

    /// Normalized isotropic Gaussian window of `size` taps per side.
    pub fn gaussian(size: usize, sigma: f64) -> Self {
        let taps = gaussian_taps(size, sigma);
        Kernel::Separable {
            vertical: taps.clone(),
            horizontal: taps,
        }
    }

    pub fn shape(&self) -> Shape {
        match self {
            Kernel::Dense { rows, cols, .. } => Shape::new(*rows, *cols),
            Kernel::Separable { vertical, horizontal } => Shape::new(vertical.len(), horizontal.len()),
        }
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        match self {
            Kernel::Dense { cols, weights, .. } => weights[i * cols + j],
            Kernel::Separable { vertical, horizontal } => vertical[i] * horizontal[j],
        }
    }
}

/// Neumaier summation. Reductions feed ratios whose finite differences are
/// taken at tiny steps, so their rounding noise has to stay near one ulp.
pub(crate) fn compensated_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() {
            (sum - t) + v
        } else {
            (v - t) + sum
        };
        sum = t;
    }
    sum + comp
}

/// 1-D Gaussian taps centered on the middle tap, normalized to sum to one.
pub(crate) fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    assert!(size > 0 && sigma > 0.0);
    let center = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - center;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// One of the four subbands of a single-level orthonormal Haar transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HaarBand {
    LL,
    LH,
    HL,
    HH,
}

impl HaarBand {
    pub const DETAIL: [HaarBand; 3] = [HaarBand::LH, HaarBand::HL, HaarBand::HH];

    /// Signs applied to the 2x2 block `[top-left, top-right, bottom-left, bottom-right]`.
    fn signs(self) -> [f64; 4] {
        match self {
            HaarBand::LL => [1.0, 1.0, 1.0, 1.0],
            HaarBand::LH => [1.0, 1.0, -1.0, -1.0],
            HaarBand::HL => [1.0, -1.0, 1.0, -1.0],
            HaarBand::HH => [1.0, -1.0, -1.0, 1.0],
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var, f64),
    Ln(Var),
    Square(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Pow(Var, f64),
    Correlate(Var, Rc<Kernel>),
    Downsample2(Var),
    Haar(Var, HaarBand),
    Crop(Var, usize, usize),
    Select(Rc<[bool]>, Var, Var),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for a single forward/backward evaluation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// A leaf whose gradient can be requested.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    #[inline]
    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Value of a scalar node.
    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> GResult<Shape> {
        let (lhs, rhs) = (self.shape(a), self.shape(b));
        if lhs != rhs {
            return Err(GraphError::ShapeMismatch { op, lhs, rhs });
        }
        Ok(lhs)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> GResult<Var> {
        let shape = self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(Tensor::new(shape, data), op, &[a, b]))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> GResult<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> GResult<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> GResult<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise quotient. Exact zeros in the denominator are rejected; the
    /// caller is responsible for guarding.
    pub fn div(&mut self, a: Var, b: Var) -> GResult<Var> {
        self.same_shape("div", a, b)?;
        if let Some(index) = self.value(b).data().iter().position(|&v| v == 0.0) {
            return Err(GraphError::Domain {
                op: "div",
                index,
                value: 0.0,
            });
        }
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Offset(a, c), |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Natural log; arguments must be strictly positive.
    pub fn ln(&mut self, a: Var) -> GResult<Var> {
        if let Some(index) = self.value(a).data().iter().position(|&v| v <= 0.0 || v.is_nan()) {
            return Err(GraphError::Domain {
                op: "ln",
                index,
                value: self.value(a).data()[index],
            });
        }
        Ok(self.unary(a, Op::Ln(a), f64::ln))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    /// Clamp to `[lo, hi]`; either bound may be infinite.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        assert!(lo <= hi, "clamp bounds {lo} > {hi}");
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// `x^p` for `p > 0` on nonnegative inputs.
    pub fn pow(&mut self, a: Var, p: f64) -> GResult<Var> {
        assert!(p > 0.0, "pow exponent must be positive");
        if let Some(index) = self.value(a).data().iter().position(|&v| v < 0.0) {
            return Err(GraphError::Domain {
                op: "pow",
                index,
                value: self.value(a).data()[index],
            });
        }
        Ok(self.unary(a, Op::Pow(a, p), |x| x.powf(p)))
    }

    /// Valid-mode 2-D cross-correlation with a fixed kernel.
    pub fn correlate(&mut self, a: Var, kernel: Rc<Kernel>) -> GResult<Var> {
        let shape = self.shape(a);
        let k = kernel.shape();
        if shape.rows < k.rows || shape.cols < k.cols {
            return Err(GraphError::TooSmall {
                op: "correlate",
                shape,
                need: k,
            });
        }
        let value = correlate_valid(self.value(a), &kernel);
        Ok(self.push(value, Op::Correlate(a, kernel), &[a]))
    }

    /// Keeps even-indexed rows and columns.
    pub fn downsample2(&mut self, a: Var) -> Var {
        let value = downsample2_valid(self.value(a));
        self.push(value, Op::Downsample2(a), &[a])
    }

    /// One subband of a single-level orthonormal Haar transform. Both input
    /// dimensions must be even.
    pub fn haar(&mut self, a: Var, band: HaarBand) -> GResult<Var> {
        let src = self.value(a);
        let s = src.shape();
        if s.rows < 2 || s.cols < 2 || !s.rows.is_multiple_of(2) || !s.cols.is_multiple_of(2) {
            return Err(GraphError::TooSmall {
                op: "haar",
                shape: s,
                need: Shape::new(2 * s.rows.div_ceil(2).max(1), 2 * s.cols.div_ceil(2).max(1)),
            });
        }
        let value = haar_valid(src, band);
        Ok(self.push(value, Op::Haar(a, band), &[a]))
    }

    /// Sub-rectangle of `shape` starting at `(row, col)`.
    pub fn crop(&mut self, a: Var, row: usize, col: usize, shape: Shape) -> GResult<Var> {
        let src = self.value(a);
        let s = src.shape();
        if row + shape.rows > s.rows || col + shape.cols > s.cols || shape.is_empty() {
            return Err(GraphError::TooSmall {
                op: "crop",
                shape: s,
                need: Shape::new(row + shape.rows, col + shape.cols),
            });
        }
        let value = crop_valid(src, row, col, shape);
        Ok(self.push(value, Op::Crop(a, row, col), &[a]))
    }

    /// Elementwise `if mask { on_true } else { on_false }`. The mask is a
    /// constant: gradients flow only into the selected branch.
    pub fn select(&mut self, mask: Rc<[bool]>, on_true: Var, on_false: Var) -> GResult<Var> {
        let shape = self.same_shape("select", on_true, on_false)?;
        if mask.len() != shape.len() {
            return Err(GraphError::ShapeMismatch {
                op: "select",
                lhs: shape,
                rhs: Shape::new(1, mask.len()),
            });
        }
        let (t, f) = (self.value(on_true).data(), self.value(on_false).data());
        let data = mask
            .iter()
            .enumerate()
            .map(|(i, &m)| if m { t[i] } else { f[i] })
            .collect();
        Ok(self.push(
            Tensor::new(shape, data),
            Op::Select(mask, on_true, on_false),
            &[on_true, on_false],
        ))
    }

    /// Builds a mask from the current value of `a`.
    pub fn mask_where(&self, a: Var, pred: impl Fn(f64) -> bool) -> Rc<[bool]> {
        self.value(a).data().iter().map(|&v| pred(v)).collect()
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = compensated_sum(self.value(a).data());
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = compensated_sum(t.data()) / t.data().len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Gradient of the scalar `output` with respect to `wrt`.
    pub fn backward(&self, output: Var, wrt: Var) -> GResult<Tensor> {
        let shape = self.shape(output);
        if shape != Shape::SCALAR {
            return Err(GraphError::NotScalar(shape));
        }
        if !self.nodes[wrt.0].requires_grad || wrt.0 > output.0 {
            return Err(GraphError::Unreachable);
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(vec![1.0]);

        for idx in (wrt.0..=output.0).rev() {
            if idx == wrt.0 {
                break;
            }
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut adj);
        }
        adj[wrt.0]
            .take()
            .map(|g| Tensor::new(self.shape(wrt), g))
            .ok_or(GraphError::Unreachable)
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let mut acc = |target: Var, f: &dyn Fn(&mut [f64])| {
            if nodes[target.0].requires_grad {
                let slot = adj[target.0].get_or_insert_with(|| vec![0.0; nodes[target.0].value.shape().len()]);
                f(slot);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|s: &mut [f64]| add_each(s, |i| g[i]));
                acc(*b, &|s: &mut [f64]| add_each(s, |i| g[i]));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s: &mut [f64]| add_each(s, |i| g[i]));
                acc(*b, &|s: &mut [f64]| add_each(s, |i| -g[i]));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &|s: &mut [f64]| add_each(s, |i| g[i] * bv[i]));
                acc(*b, &|s: &mut [f64]| add_each(s, |i| g[i] * av[i]));
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &|s: &mut [f64]| add_each(s, |i| g[i] / bv[i]));
                acc(*b, &|s: &mut [f64]| add_each(s, |i| -g[i] * av[i] / (bv[i] * bv[i])));
            }
            Op::Scale(a, c) => acc(*a, &|s: &mut [f64]| add_each(s, |i| g[i] * c)),
            Op::Offset(a, _) => acc(*a, &|s: &mut [f64]| add_each(s, |i| g[i])),
            Op::Ln(a) => {
                let av = val(*a);
                acc(*a, &|s: &mut [f64]| add_each(s, |i| g[i] / av[i]));
            }
            Op::Square(a) => {
                let av = val(*a);
                acc(*a, &|s: &mut [f64]| add_each(s, |i| 2.0 * g[i] * av[i]));
            }
            Op::Abs(a) => {
                let av = val(*a);
                acc(*a, &|s: &mut [f64]| {
                    add_each(s, |i| {
                        if av[i] > 0.0 {
                            g[i]
                        } else if av[i] < 0.0 {
                            -g[i]
                        } else {
                            0.0
                        }
                    })
                });
            }
            Op::Clamp(a, lo, hi) => {
                let av = val(*a);
                acc(*a, &|s: &mut [f64]| {
                    add_each(s, |i| if av[i] > *lo && av[i] < *hi { g[i] } else { 0.0 })
                });
            }
            Op::Pow(a, p) => {
                let av = val(*a);
                acc(*a, &|s: &mut [f64]| {
                    add_each(s, |i| {
                        if av[i] > 0.0 {
                            g[i] * p * av[i].powf(p - 1.0)
                        } else if *p == 1.0 {
                            g[i]
                        } else {
                            0.0
                        }
                    })
                });
            }
            Op::Correlate(a, kernel) => {
                if nodes[a.0].requires_grad {
                    let in_shape = nodes[a.0].value.shape();
                    let grad = correlate_valid_adjoint(g, node.value.shape(), in_shape, kernel);
                    acc(*a, &|s: &mut [f64]| add_each(s, |i| grad[i]));
                }
            }
            Op::Downsample2(a) => {
                if nodes[a.0].requires_grad {
                    let in_shape = nodes[a.0].value.shape();
                    let out = node.value.shape();
                    let mut grad = vec![0.0; in_shape.len()];
                    for r in 0..out.rows {
                        for c in 0..out.cols {
                            grad[2 * r * in_shape.cols + 2 * c] = g[r * out.cols + c];
                        }
                    }
                    acc(*a, &|s: &mut [f64]| add_each(s, |i| grad[i]));
                }
            }
            Op::Haar(a, band) => {
                if nodes[a.0].requires_grad {
                    let in_shape = nodes[a.0].value.shape();
                    let out = node.value.shape();
                    let [sa, sb, sc, sd] = band.signs();
                    let mut grad = vec![0.0; in_shape.len()];
                    for r in 0..out.rows {
                        for c in 0..out.cols {
                            let h = 0.5 * g[r * out.cols + c];
                            let top = 2 * r * in_shape.cols + 2 * c;
                            let bottom = top + in_shape.cols;
                            grad[top] = sa * h;
                            grad[top + 1] = sb * h;
                            grad[bottom] = sc * h;
                            grad[bottom + 1] = sd * h;
                        }
                    }
                    acc(*a, &|s: &mut [f64]| add_each(s, |i| grad[i]));
                }
            }
            Op::Crop(a, row, col) => {
                if nodes[a.0].requires_grad {
                    let in_shape = nodes[a.0].value.shape();
                    let out = node.value.shape();
                    let mut grad = vec![0.0; in_shape.len()];
                    for r in 0..out.rows {
                        let dst = (row + r) * in_shape.cols + col;
                        grad[dst..dst + out.cols].copy_from_slice(&g[r * out.cols..(r + 1) * out.cols]);
                    }
                    acc(*a, &|s: &mut [f64]| add_each(s, |i| grad[i]));
                }
            }
            Op::Select(mask, t, f) => {
                acc(*t, &|s: &mut [f64]| add_each(s, |i| if mask[i] { g[i] } else { 0.0 }));
                acc(*f, &|s: &mut [f64]| add_each(s, |i| if mask[i] { 0.0 } else { g[i] }));
            }
            Op::Sum(a) => acc(*a, &|s: &mut [f64]| add_each(s, |_| g[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.shape().len() as f64;
                acc(*a, &|s: &mut [f64]| add_each(s, |_| g[0] / n));
            }
        }
    }
}

/// Forward value and difference of one node during [`Graph::replay_difference`].
enum Replay {
    /// Unaffected by the moved leaf; the recorded value stands.
    Fixed,
    Moved {
        lo: Vec<f64>,
        diff: Vec<f64>,
    },
}

impl Graph {
    /// `f(upper) - f(lower)` for the scalar `output`, where only the leaf
    /// `wrt` changes, computed without subtracting two rounded totals.
    ///
    /// Every node carries its value at `lower` and its exact-form difference
    /// to the value at `upper` (`a*b` moves by `da*b + a*db + da*db`, `ln a` by
    /// `ln_1p(da/a)`, and so on), so the result keeps full relative precision
    /// even when the difference is many orders below the output. Select masks
    /// are taken from the recorded tape; the replay therefore measures the
    /// branch the graph was built on.
    pub fn replay_difference(&self, output: Var, wrt: Var, lower: &Tensor, upper: &Tensor) -> GResult<f64> {
        let shape = self.shape(wrt);
        for t in [lower, upper] {
            if t.shape() != shape {
                return Err(GraphError::ShapeMismatch {
                    op: "replay",
                    lhs: shape,
                    rhs: t.shape(),
                });
            }
        }
        if !matches!(self.nodes[wrt.0].op, Op::Leaf) {
            return Err(GraphError::NotLeaf);
        }
        if self.shape(output).len() != 1 {
            return Err(GraphError::NotScalar(self.shape(output)));
        }
        let mut state: Vec<Replay> = Vec::with_capacity(output.0 + 1);
        for (idx, node) in self.nodes[..=output.0].iter().enumerate() {
            let next = if idx == wrt.0 {
                let diff = upper.data().iter().zip(lower.data()).map(|(u, l)| u - l).collect();
                Replay::Moved {
                    lo: lower.data().to_vec(),
                    diff,
                }
            } else {
                self.replay_node(node, &state)
            };
            state.push(next);
        }
        Ok(match &state[output.0] {
            Replay::Fixed => 0.0,
            Replay::Moved { diff, .. } => diff[0],
        })
    }

    fn replay_node(&self, node: &Node, state: &[Replay]) -> Replay {
        let moved = |v: &Var| matches!(state[v.0], Replay::Moved { .. });
        let any_moved = match &node.op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Select(_, a, b) => moved(a) || moved(b),
            Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Ln(a)
            | Op::Square(a)
            | Op::Abs(a)
            | Op::Clamp(a, ..)
            | Op::Pow(a, _)
            | Op::Correlate(a, _)
            | Op::Downsample2(a)
            | Op::Haar(a, _)
            | Op::Crop(a, ..)
            | Op::Sum(a)
            | Op::Mean(a) => moved(a),
        };
        if !any_moved {
            return Replay::Fixed;
        }
        // (value at lower, difference) of a parent
        let get = |v: &Var| -> (&[f64], &[f64]) {
            match &state[v.0] {
                Replay::Moved { lo, diff } => (lo, diff),
                Replay::Fixed => (self.nodes[v.0].value.data(), &[]),
            }
        };
        let n = node.value.shape().len();
        // only binary ops can have a fixed parent, and theirs match the node's shape
        let zeros = vec![0.0; n];
        let pair = |v: &Var| {
            let (lo, d) = get(v);
            (lo, if d.is_empty() { &zeros[..] } else { d })
        };
        let zip = |a: &Var, f: &dyn Fn(f64, f64) -> (f64, f64)| {
            let (lo, d) = pair(a);
            let (lo, diff) = lo.iter().zip(d).map(|(&x, &dx)| f(x, dx)).unzip();
            Replay::Moved { lo, diff }
        };
        let zip2 = |a: &Var, b: &Var, f: &dyn Fn(f64, f64, f64, f64) -> (f64, f64)| {
            let ((la, da), (lb, db)) = (pair(a), pair(b));
            let (lo, diff) = (0..n).map(|i| f(la[i], da[i], lb[i], db[i])).unzip();
            Replay::Moved { lo, diff }
        };
        let linear = |a: &Var, f: &dyn Fn(&Tensor) -> Tensor| {
            let (lo, d) = pair(a);
            let shape = self.shape(*a);
            let lo = f(&Tensor::new(shape, lo.to_vec())).data().to_vec();
            let diff = f(&Tensor::new(shape, d.to_vec())).data().to_vec();
            Replay::Moved { lo, diff }
        };
        match &node.op {
            Op::Leaf => Replay::Fixed,
            Op::Add(a, b) => zip2(a, b, &|x, dx, y, dy| (x + y, dx + dy)),
            Op::Sub(a, b) => zip2(a, b, &|x, dx, y, dy| (x - y, dx - dy)),
            Op::Mul(a, b) => zip2(a, b, &|x, dx, y, dy| (x * y, dx * y + x * dy + dx * dy)),
            Op::Div(a, b) => zip2(a, b, &|x, dx, y, dy| (x / y, (dx * y - x * dy) / (y * (y + dy)))),
            Op::Scale(a, c) => zip(a, &|x, dx| (c * x, c * dx)),
            Op::Offset(a, c) => zip(a, &|x, dx| (x + c, dx)),
            Op::Ln(a) => zip(a, &|x, dx| (x.ln(), (dx / x).ln_1p())),
            Op::Square(a) => zip(a, &|x, dx| (x * x, dx * (2.0 * x + dx))),
            Op::Abs(a) => zip(a, &|x, dx| {
                let up = x + dx;
                let d = if x >= 0.0 && up >= 0.0 {
                    dx
                } else if x <= 0.0 && up <= 0.0 {
                    -dx
                } else {
                    up.abs() - x.abs()
                };
                (x.abs(), d)
            }),
            Op::Clamp(a, l, h) => zip(a, &|x, dx| {
                let up = x + dx;
                let inside = |v: f64| v >= *l && v <= *h;
                let d = if inside(x) && inside(up) {
                    dx
                } else if (x <= *l && up <= *l) || (x >= *h && up >= *h) {
                    0.0
                } else {
                    up.clamp(*l, *h) - x.clamp(*l, *h)
                };
                (x.clamp(*l, *h), d)
            }),
            Op::Pow(a, p) => zip(a, &|x, dx| {
                let d = if x > 0.0 {
                    x.powf(*p) * (p * (dx / x).ln_1p()).exp_m1()
                } else {
                    (x + dx).max(0.0).powf(*p) - x.max(0.0).powf(*p)
                };
                (x.powf(*p), d)
            }),
            Op::Correlate(a, kernel) => linear(a, &|t| correlate_valid(t, kernel)),
            Op::Downsample2(a) => linear(a, &downsample2_valid),
            Op::Haar(a, band) => linear(a, &|t| haar_valid(t, *band)),
            Op::Crop(a, row, col) => {
                let shape = node.value.shape();
                linear(a, &|t| crop_valid(t, *row, *col, shape))
            }
            Op::Select(mask, t, f) => {
                let ((lt, dt), (lf, df)) = (pair(t), pair(f));
                let (lo, diff) = mask
                    .iter()
                    .enumerate()
                    .map(|(i, &m)| if m { (lt[i], dt[i]) } else { (lf[i], df[i]) })
                    .unzip();
                Replay::Moved { lo, diff }
            }
            Op::Sum(a) => {
                let (lo, d) = pair(a);
                Replay::Moved {
                    lo: vec![compensated_sum(lo)],
                    diff: vec![compensated_sum(d)],
                }
            }
            Op::Mean(a) => {
                let (lo, d) = pair(a);
                let len = lo.len() as f64;
                Replay::Moved {
                    lo: vec![compensated_sum(lo) / len],
                    diff: vec![compensated_sum(d) / len],
                }
            }
        }
    }
}

fn add_each(slot: &mut [f64], f: impl Fn(usize) -> f64) {
    for (i, v) in slot.iter_mut().enumerate() {
        *v += f(i);
    }
}

fn downsample2_valid(src: &Tensor) -> Tensor {
    let s = src.shape();
    let out = Shape::new(s.rows.div_ceil(2), s.cols.div_ceil(2));
    let mut data = Vec::with_capacity(out.len());
    for r in 0..out.rows {
        for c in 0..out.cols {
            data.push(src.at(2 * r, 2 * c));
        }
    }
    Tensor::new(out, data)
}

fn haar_valid(src: &Tensor, band: HaarBand) -> Tensor {
    let s = src.shape();
    let out = Shape::new(s.rows / 2, s.cols / 2);
    let [sa, sb, sc, sd] = band.signs();
    let mut data = Vec::with_capacity(out.len());
    for r in 0..out.rows {
        for c in 0..out.cols {
            let (y, x) = (2 * r, 2 * c);
            let v = sa * src.at(y, x) + sb * src.at(y, x + 1) + sc * src.at(y + 1, x) + sd * src.at(y + 1, x + 1);
            data.push(0.5 * v);
        }
    }
    Tensor::new(out, data)
}

fn crop_valid(src: &Tensor, row: usize, col: usize, shape: Shape) -> Tensor {
    let cols = src.shape().cols;
    let mut data = Vec::with_capacity(shape.len());
    for r in row..row + shape.rows {
        let start = r * cols + col;
        data.extend_from_slice(&src.data()[start..start + shape.cols]);
    }
    Tensor::new(shape, data)
}

fn correlate_valid(src: &Tensor, kernel: &Kernel) -> Tensor {
    let s = src.shape();
    let k = kernel.shape();
    let out = Shape::new(s.rows - k.rows + 1, s.cols - k.cols + 1);
    let x = src.data();
    match kernel {
        Kernel::Dense { cols, weights, .. } => {
            let mut data = vec![0.0; out.len()];
            for r in 0..out.rows {
                for c in 0..out.cols {
                    let mut acc = 0.0;
                    for i in 0..k.rows {
                        let row = &x[(r + i) * s.cols + c..];
                        let kw = &weights[i * cols..(i + 1) * cols];
                        for (w, v) in kw.iter().zip(row) {
                            acc += w * v;
                        }
                    }
                    data[r * out.cols + c] = acc;
                }
            }
            Tensor::new(out, data)
        }
        Kernel::Separable { vertical, horizontal } => {
            // horizontal pass: s.rows x out.cols
            let mut tmp = vec![0.0; s.rows * out.cols];
            for r in 0..s.rows {
                let row = &x[r * s.cols..(r + 1) * s.cols];
                let dst = &mut tmp[r * out.cols..(r + 1) * out.cols];
                for (c, d) in dst.iter_mut().enumerate() {
                    *d = horizontal.iter().zip(&row[c..]).map(|(w, v)| w * v).sum();
                }
            }
            let mut data = vec![0.0; out.len()];
            for r in 0..out.rows {
                let dst = &mut data[r * out.cols..(r + 1) * out.cols];
                for (i, w) in vertical.iter().enumerate() {
                    let src_row = &tmp[(r + i) * out.cols..(r + i + 1) * out.cols];
                    for (d, v) in dst.iter_mut().zip(src_row) {
                        *d += w * v;
                    }
                }
            }
            Tensor::new(out, data)
        }
    }
}

fn correlate_valid_adjoint(g: &[f64], out: Shape, input: Shape, kernel: &Kernel) -> Vec<f64> {
    let mut grad = vec![0.0; input.len()];
    match kernel {
        Kernel::Dense { rows, cols, weights } => {
            for r in 0..out.rows {
                for c in 0..out.cols {
                    let gv = g[r * out.cols + c];
                    for i in 0..*rows {
                        let dst = &mut grad[(r + i) * input.cols + c..];
                        for (d, w) in dst.iter_mut().zip(&weights[i * cols..(i + 1) * cols]) {
                            *d += w * gv;
                        }
                    }
                }
            }
        }
        Kernel::Separable { vertical, horizontal } => {
            let mut tmp = vec![0.0; input.rows * out.cols];
            for r in 0..out.rows {
                let src = &g[r * out.cols..(r + 1) * out.cols];
                for (i, w) in vertical.iter().enumerate() {
                    let dst = &mut tmp[(r + i) * out.cols..(r + i + 1) * out.cols];
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d += w * v;
                    }
                }
            }
            for r in 0..input.rows {
                let src = &tmp[r * out.cols..(r + 1) * out.cols];
                let dst = &mut grad[r * input.cols..(r + 1) * input.cols];
                for (c, &v) in src.iter().enumerate() {
                    for (d, w) in dst[c..].iter_mut().zip(horizontal) {
                        *d += w * v;
                    }
                }
            }
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(Shape::new(rows, cols), data.to_vec())
    }

    #[test]
    fn clamp_value_and_flat_derivative() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(1.7));
        let y = g.clamp(x, 0.0, 1.0);
        assert_eq!(g.item(y), 1.0);
        assert_eq!(g.backward(y, x).unwrap().item(), 0.0);
    }

    #[test]
    fn haar_ll_of_constant() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(Shape::new(4, 4), 10.0));
        let ll = g.haar(x, HaarBand::LL).unwrap();
        assert_eq!(g.shape(ll), Shape::new(2, 2));
        assert!(g.value(ll).data().iter().all(|&v| v == 20.0));
        for band in HaarBand::DETAIL {
            let d = g.haar(x, band).unwrap();
            assert!(g.value(d).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn valid_correlation_shape() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(Shape::new(5, 5), 1.0));
        let k = Rc::new(Kernel::dense(3, 3, vec![1.0; 9]));
        let y = g.correlate(x, k).unwrap();
        assert_eq!(g.shape(y), Shape::new(3, 3));
        assert!(g.value(y).data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn separable_matches_dense() {
        let v = vec![0.2, 0.5, 0.3];
        let h = vec![0.1, 0.7, 0.15, 0.05];
        let dense: Vec<f64> = v.iter().flat_map(|a| h.iter().map(move |b| a * b)).collect();
        let data: Vec<f64> = (0..42).map(|i| ((i * 37) % 11) as f64 - 3.0).collect();
        let x = t(6, 7, &data);
        let a = correlate_valid(&x, &Kernel::separable(v.clone(), h.clone()));
        let b = correlate_valid(&x, &Kernel::dense(3, 4, dense.clone()));
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
        let gout: Vec<f64> = (0..a.shape().len()).map(|i| (i as f64).sin()).collect();
        let ga = correlate_valid_adjoint(&gout, a.shape(), x.shape(), &Kernel::separable(v, h));
        let gb = correlate_valid_adjoint(&gout, a.shape(), x.shape(), &Kernel::dense(3, 4, dense));
        for (p, q) in ga.iter().zip(&gb) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let data = [1.0, -2.0, 3.5, 0.25];
        let x = g.input(t(2, 2, &data));
        let sq = g.square(x);
        let s = g.sum(sq);
        let grad = g.backward(s, x).unwrap();
        for (gv, xv) in grad.data().iter().zip(data) {
            assert_eq!(*gv, 2.0 * xv);
        }
    }

    #[test]
    fn mean_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::filled(Shape::new(3, 5), 2.0));
        let m = g.mean(x);
        let grad = g.backward(m, x).unwrap();
        assert!(grad.data().iter().all(|&v| (v - 1.0 / 15.0).abs() < 1e-15));
    }

    #[test]
    fn errors() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(Shape::new(2, 2)));
        let b = g.input(Tensor::zeros(Shape::new(2, 3)));
        assert!(matches!(g.add(a, b), Err(GraphError::ShapeMismatch { .. })));
        assert!(matches!(g.ln(a), Err(GraphError::Domain { op: "ln", .. })));
        assert!(matches!(g.div(a, a), Err(GraphError::Domain { op: "div", .. })));
        assert!(matches!(g.backward(a, a), Err(GraphError::NotScalar(_))));
        let s = g.sum(a);
        assert!(matches!(g.backward(s, b), Err(GraphError::Unreachable)));
        let c = g.constant(Tensor::scalar(1.0));
        let s2 = g.scale(c, 2.0);
        assert!(matches!(g.backward(s2, a), Err(GraphError::Unreachable)));
    }

    #[test]
    fn backward_is_deterministic() {
        let build = || {
            let mut g = Graph::new();
            let data: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).cos() * 50.0 + 100.0).collect();
            let x = g.input(t(8, 8, &data));
            let k = Rc::new(Kernel::gaussian(3, 0.6));
            let c = g.correlate(x, k).unwrap();
            let l = g.ln(c).unwrap();
            let p = g.mul(l, l).unwrap();
            let s = g.sum(p);
            g.backward(s, x).unwrap()
        };
        let a = build();
        let b = build();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn haar_inverse_reconstructs() {
        let data: Vec<f64> = (0..48).map(|i| ((i * 7919) % 251) as f64 * 0.73).collect();
        let mut g = Graph::new();
        let x = g.constant(t(6, 8, &data));
        let bands: Vec<Tensor> = [HaarBand::LL, HaarBand::LH, HaarBand::HL, HaarBand::HH]
            .iter()
            .map(|&b| {
                let v = g.haar(x, b).unwrap();
                g.value(v).clone()
            })
            .collect();
        let (ll, lh, hl, hh) = (&bands[0], &bands[1], &bands[2], &bands[3]);
        let mut rec = vec![0.0; 48];
        for r in 0..3 {
            for c in 0..4 {
                let (a, b, cc, d) = (ll.at(r, c), lh.at(r, c), hl.at(r, c), hh.at(r, c));
                rec[2 * r * 8 + 2 * c] = 0.5 * (a + b + cc + d);
                rec[2 * r * 8 + 2 * c + 1] = 0.5 * (a + b - cc - d);
                rec[(2 * r + 1) * 8 + 2 * c] = 0.5 * (a - b + cc - d);
                rec[(2 * r + 1) * 8 + 2 * c + 1] = 0.5 * (a - b - cc + d);
            }
        }
        let err = rec.iter().zip(&data).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        assert!(err < 1e-12, "{err}");
    }
}
