//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! Every forward op appends a node; [`Tape::backward`] walks the nodes in reverse
//! once. A tape is single-use: build a fresh one for every forward pass.

use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Lower bound applied to probabilities before taking logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Silu,
    /// Leaky rectifier with negative slope 0.2.
    LeakyRelu,
    Identity,
}

const LEAKY_SLOPE: f64 = 0.2;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(clamp(sigmoid(z), PROB_CLAMP, 1 - PROB_CLAMP))`.
pub fn clamped_log_sigmoid(z: f64) -> f64 {
    sigmoid(z).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln()
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Silu => x * sigmoid(x),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Identity => x,
        }
    }

    /// Derivative given the pre-activation input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Act(Var, Activation),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    RowScale(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    Square(Var),
    Sum(Var),
    Mean(Var),
    LogSigmoid(Var),
    Clamp(Var, f64, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, mut value: Tensor, tracked: bool) -> Var {
        value.grad = None;
        self.push(value, Op::Leaf, tracked)
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        tracked: bool,
    ) -> Result<Var> {
        value.check_finite(name)?;
        Ok(self.push(value, op, tracked))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::dim("matmul", format!("({m},{k}) x ({k2},{n})")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).values(),
            false,
            self.value(b).values(),
            false,
            &mut out,
            false,
        );
        let t = self.tracked(&[a, b]);
        self.push_checked("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), t)
    }

    /// Adds a length-`n` bias to every row of an `(m, n)` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        let b = self.value(bias).values();
        if b.len() != n {
            return Err(Error::dim(
                "add_bias",
                format!("bias {} for width {n}", b.len()),
            ));
        }
        let mut out = self.value(a).values().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            row.iter_mut().zip(b).for_each(|(o, bi)| *o += bi);
        }
        let t = self.tracked(&[a, bias]);
        self.push_checked(
            "add_bias",
            Tensor::new(vec![m, n], out)?,
            Op::AddBias(a, bias),
            t,
        )
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let out: Vec<f64> = x.values().iter().map(|&v| act.apply(v)).collect();
        let t = self.tracked(&[a]);
        self.push_checked("activation", Tensor::new(shape, out)?, Op::Act(a, act), t)
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim(
                name,
                format!("{:?} vs {:?}", x.shape(), y.shape()),
            ));
        }
        let shape = x.shape().to_vec();
        let out = x
            .values()
            .iter()
            .zip(y.values())
            .map(|(&p, &q)| f(p, q))
            .collect();
        let t = self.tracked(&[a, b]);
        self.push_checked(name, Tensor::new(shape, out)?, op, t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let out = x.values().iter().map(|v| v * c).collect();
        let t = self.tracked(&[a]);
        self.push_checked("scale", Tensor::new(shape, out)?, Op::Scale(a, c), t)
    }

    /// Multiplies row `i` by `coef[i]`.
    pub fn row_scale(&mut self, a: Var, coef: Vec<f64>) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if coef.len() != m {
            return Err(Error::dim(
                "row_scale",
                format!("{} coefficients for {m} rows", coef.len()),
            ));
        }
        let mut out = self.value(a).values().to_vec();
        for (row, c) in out.chunks_mut(n.max(1)).zip(&coef) {
            row.iter_mut().for_each(|v| *v *= c);
        }
        let shape = self.value(a).shape().to_vec();
        let t = self.tracked(&[a]);
        self.push_checked(
            "row_scale",
            Tensor::new(shape, out)?,
            Op::RowScale(a, coef),
            t,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&tensors)?;
        let t = self.tracked(parts);
        self.push_checked("concat_cols", out, Op::ConcatCols(parts.to_vec()), t)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let out = x.values().iter().map(|v| v * v).collect();
        let t = self.tracked(&[a]);
        self.push_checked("square", Tensor::new(shape, out)?, Op::Square(a), t)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).values().iter().sum();
        let t = self.tracked(&[a]);
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(a), t)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::dim("mean", "empty tensor"));
        }
        let s = x.values().iter().sum::<f64>() / x.len() as f64;
        let t = self.tracked(&[a]);
        self.push_checked("mean", Tensor::scalar(s), Op::Mean(a), t)
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is zero wherever the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let out = x.values().iter().map(|v| v.clamp(lo, hi)).collect();
        let t = self.tracked(&[a]);
        self.push_checked("clamp", Tensor::new(shape, out)?, Op::Clamp(a, lo, hi), t)
    }

    /// Elementwise [`clamped_log_sigmoid`].
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let out = x.values().iter().map(|&z| clamped_log_sigmoid(z)).collect();
        let t = self.tracked(&[a]);
        self.push_checked(
            "log_sigmoid",
            Tensor::new(shape, out)?,
            Op::LogSigmoid(a),
            t,
        )
    }

    /// Reverse pass from a scalar `loss`. May run at most once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::DoubleBackward);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss has shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (idx, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::numeric(
                        "backward",
                        format!("gradient entry {bad} of node {idx} is {}", g[bad]),
                    ));
                }
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let tracked = |v: Var| self.nodes[v.0].tracked;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).cols();
                if tracked(*a) {
                    // dA = dC · B^T
                    let buf = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, val(*b).values(), true, buf, true);
                }
                if tracked(*b) {
                    // dB = A^T · dC
                    let buf = slot(grads, *b, k * n);
                    gemm(k, m, n, val(*a).values(), true, g, false, buf, true);
                }
            }
            Op::AddBias(a, bias) => {
                let n = val(*bias).len();
                if tracked(*a) {
                    accumulate(slot(grads, *a, g.len()), g);
                }
                if tracked(*bias) {
                    let buf = slot(grads, *bias, n);
                    for row in g.chunks(n.max(1)) {
                        buf.iter_mut().zip(row).for_each(|(b, r)| *b += r);
                    }
                }
            }
            Op::Act(a, act) => {
                if tracked(*a) {
                    let x = val(*a).values();
                    let y = node.value.values();
                    let buf = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] * act.derivative(x[i], y[i]);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if tracked(v) {
                        accumulate(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if tracked(*a) {
                    accumulate(slot(grads, *a, g.len()), g);
                }
                if tracked(*b) {
                    let buf = slot(grads, *b, g.len());
                    buf.iter_mut().zip(g).for_each(|(d, gi)| *d -= gi);
                }
            }
            Op::Mul(a, b) => {
                if tracked(*a) {
                    let other = val(*b).values();
                    let buf = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] * other[i];
                    }
                }
                if tracked(*b) {
                    let other = val(*a).values();
                    let buf = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] * other[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if tracked(*a) {
                    let buf = slot(grads, *a, g.len());
                    buf.iter_mut().zip(g).for_each(|(d, gi)| *d += c * gi);
                }
            }
            Op::RowScale(a, coef) => {
                if tracked(*a) {
                    let n = val(*a).cols().max(1);
                    let buf = slot(grads, *a, g.len());
                    for ((drow, grow), c) in buf.chunks_mut(n).zip(g.chunks(n)).zip(coef) {
                        drow.iter_mut().zip(grow).for_each(|(d, gi)| *d += c * gi);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let (rows, w) = val(p).dims2();
                    if tracked(p) {
                        let buf = slot(grads, p, rows * w);
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            buf[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += w;
                }
            }
            Op::Square(a) => {
                if tracked(*a) {
                    let x = val(*a).values();
                    let buf = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        buf[i] += 2.0 * x[i] * g[i];
                    }
                }
            }
            Op::Sum(a) => {
                if tracked(*a) {
                    let n = val(*a).len();
                    slot(grads, *a, n).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                if tracked(*a) {
                    let n = val(*a).len();
                    let s = g[0] / n as f64;
                    slot(grads, *a, n).iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Clamp(a, lo, hi) => {
                if tracked(*a) {
                    let x = val(*a).values();
                    let buf = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        if x[i] > *lo && x[i] < *hi {
                            buf[i] += g[i];
                        }
                    }
                }
            }
            Op::LogSigmoid(a) => {
                if tracked(*a) {
                    let z = val(*a).values();
                    let buf = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        let p = sigmoid(z[i]);
                        if p > PROB_CLAMP && p < 1.0 - PROB_CLAMP {
                            buf[i] += g[i] * (1.0 - p);
                        }
                    }
                }
            }
        }
    }

    /// Gradient of the last backward pass with respect to `v`; `None` when `v` was not
    /// reached or [`Tape::backward`] has not run.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.as_ref()?.get(v.0)?.as_deref()
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(buf: &mut [f64], g: &[f64]) {
    buf.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_var(tape: &mut Tape, v: f64) -> Var {
        tape.variable(Tensor::scalar(v))
    }

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let x = scalar_var(&mut tape, 3.0);
        let y = tape.square(x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let x = scalar_var(&mut tape, 3.0);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn tanh_slope_at_zero() {
        let mut tape = Tape::new();
        let x = scalar_var(&mut tape, 0.0);
        let y = tape.activation(x, Activation::Tanh).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0]);
    }

    #[test]
    fn double_backward_is_rejected() {
        let mut tape = Tape::new();
        let x = scalar_var(&mut tape, 2.0);
        let y = tape.square(x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::DoubleBackward)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(5.0));
        let x = scalar_var(&mut tape, 2.0);
        let y = tape.mul(c, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[5.0]);
        assert!(!tape.is_tracked(c));
    }

    #[test]
    fn overflow_is_reported_with_op_name() {
        let mut tape = Tape::new();
        let x = scalar_var(&mut tape, 1e200);
        match tape.square(x) {
            Err(Error::Numeric { op, .. }) => assert_eq!(op, "square"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn log_sigmoid_clamps_both_tails() {
        assert!((clamped_log_sigmoid(0.0) - 0.5f64.ln()).abs() < 1e-15);
        assert_eq!(clamped_log_sigmoid(-100.0), PROB_CLAMP.ln());
        assert_eq!(clamped_log_sigmoid(100.0), (1.0 - PROB_CLAMP).ln());
        let mut tape = Tape::new();
        let z = tape.variable(Tensor::new(vec![1, 2], vec![-100.0, 0.0]).unwrap());
        let l = tape.log_sigmoid(z).unwrap();
        let s = tape.sum(l).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(z).unwrap(), &[0.0, 0.5]);
    }

    #[test]
    fn clamp_blocks_gradient_outside_bounds() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::new(vec![1, 3], vec![-5.0, 0.5, 5.0]).unwrap());
        let c = tape.clamp(x, -1.0, 1.0).unwrap();
        assert_eq!(tape.value(c).values(), &[-1.0, 0.5, 1.0]);
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn concat_and_row_scale_route_gradients() {
        let mut tape = Tape::new();
        let a = tape.variable(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let b = tape.variable(Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = tape.concat_cols(&[a, b]).unwrap();
        let r = tape.row_scale(c, vec![10.0, 100.0]).unwrap();
        let s = tape.sum(r).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[10.0, 100.0]);
        assert_eq!(tape.grad(b).unwrap(), &[10.0, 10.0, 100.0, 100.0]);
    }
}
