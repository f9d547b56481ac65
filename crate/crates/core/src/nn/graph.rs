//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Calling
//! [`Graph::backward`] on a `1 x 1` node walks the tape in reverse and
//! accumulates gradients for every node that depends on a parameter leaf.
//! Constants and [`Graph::detach`] outputs never receive gradient.

use super::tensor::{gemm, Operand, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Softplus(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Huber(Var, f64),
    Expectile(Var, f64),
    QuantileHuber {
        pred: Var,
        target: Tensor,
        taus: Vec<f64>,
        kappa: f64,
    },
    SumCols(Var),
    MeanAll(Var),
    SumAll(Var),
    MulCol(Var, Var),
    BroadcastRows(Var),
    OuterHadamard(Var, Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    label: Option<String>,
}

/// The tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like `like` when none reached it.
    pub fn wrt_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.wrt(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Huber loss `l_H^κ`: quadratic `x²/(2κ)` inside `|x| ≤ κ`, linear outside.
#[inline]
pub fn huber(x: f64, kappa: f64) -> f64 {
    if x.abs() <= kappa {
        0.5 * x * x / kappa
    } else {
        x.abs() - 0.5 * kappa
    }
}

#[inline]
pub(crate) fn huber_grad(x: f64, kappa: f64) -> f64 {
    if x.abs() <= kappa {
        x / kappa
    } else {
        x.signum()
    }
}

/// Asymmetric squared loss `|ν − 1(x<0)| · x²`.
#[inline]
pub fn expectile(x: f64, nu: f64) -> f64 {
    let w = if x < 0.0 { 1.0 - nu } else { nu };
    w * x * x
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-row quantile-Huber TD loss: `(1/N′) Σ_n Σ_m |τ_n − 1(δ<0)| l_H^κ(δ)`
/// with `δ = target[b, m] − pred[b, n]`.
pub(crate) fn quantile_huber_rows(pred: &Tensor, target: &Tensor, taus: &[f64], kappa: f64) -> Tensor {
    let (b, n, m) = (pred.rows(), pred.cols(), target.cols());
    let mut out = Tensor::zeros(b, 1);
    for row in 0..b {
        let p = pred.row(row);
        let t = target.row(row);
        let mut acc = 0.0;
        for (j, &pj) in p.iter().enumerate() {
            for &tk in t {
                let d = tk - pj;
                let w = (taus[j] - if d < 0.0 { 1.0 } else { 0.0 }).abs();
                acc += w * huber(d, kappa);
            }
        }
        let _ = n;
        out.data_mut()[row] = acc / m as f64;
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// A trainable leaf. The label identifies it in gradient errors.
    pub fn param(&mut self, value: Tensor, label: impl Into<String>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].label = Some(label.into());
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Stop-gradient: a constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `x + 1·bᵀ`: add a `1 x c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if bs != [1, xs[1]] {
            return Err(Error::shape("add_row", format!("{xs:?} + {bs:?}")));
        }
        let mut value = self.value(x).clone();
        let cols = xs[1];
        let brow = self.value(b).data().to_vec();
        for chunk in value.data_mut().chunks_mut(cols) {
            for (v, bb) in chunk.iter_mut().zip(&brow) {
                *v += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(value, Op::AddRow(x, b), rg))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Div(a, b), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| c * v, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::Shift(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Clamp to `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn huber(&mut self, x: Var, kappa: f64) -> Var {
        self.unary(x, |v| huber(v, kappa), Op::Huber(x, kappa))
    }

    pub fn expectile(&mut self, x: Var, nu: f64) -> Var {
        self.unary(x, |v| expectile(v, nu), Op::Expectile(x, nu))
    }

    /// Quantile-Huber TD loss per row of `pred` (`B x N` quantile values at
    /// levels `taus`) against a constant `B x N′` target sample matrix.
    /// Returns `B x 1`.
    pub fn quantile_huber(
        &mut self,
        pred: Var,
        target: Tensor,
        taus: &[f64],
        kappa: f64,
    ) -> Result<Var> {
        let ps = self.shape(pred);
        if ps[1] != taus.len() || target.rows() != ps[0] {
            return Err(Error::shape(
                "quantile_huber",
                format!(
                    "pred {ps:?}, target {:?}, {} levels",
                    target.shape(),
                    taus.len()
                ),
            ));
        }
        let value = quantile_huber_rows(self.value(pred), &target, taus, kappa);
        let rg = self.rg(pred);
        Ok(self.push(
            value,
            Op::QuantileHuber {
                pred,
                target,
                taus: taus.to_vec(),
                kappa,
            },
            rg,
        ))
    }

    /// Row sums, `B x C -> B x 1`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let c = v.cols();
        let data = v.data().chunks(c.max(1)).map(|r| r.iter().sum()).collect();
        let rg = self.rg(x);
        self.push(Tensor::column(data), Op::SumCols(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x).mean();
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::MeanAll(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    /// Multiply each row of `x` (`B x C`) by the matching entry of `w` (`B x 1`).
    pub fn mul_col(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws != [xs[0], 1] {
            return Err(Error::shape("mul_col", format!("{xs:?} * {ws:?}")));
        }
        let wv = self.value(w).data().to_vec();
        let mut value = self.value(x).clone();
        for (chunk, s) in value.data_mut().chunks_mut(xs[1].max(1)).zip(&wv) {
            for v in chunk {
                *v *= s;
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(value, Op::MulCol(x, w), rg))
    }

    /// Repeat a `1 x C` row `n` times.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs[0] != 1 {
            return Err(Error::shape("broadcast_rows", format!("{xs:?}")));
        }
        let row = self.value(x).data().to_vec();
        let mut data = Vec::with_capacity(n * xs[1]);
        for _ in 0..n {
            data.extend_from_slice(&row);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(n, xs[1], data)?, Op::BroadcastRows(x), rg))
    }

    /// Pairwise element-wise product: row `b·N + n` is `g[b] ⊙ h[n]`.
    /// `g` is `B x d`, `h` is `N x d`, result is `(B·N) x d`.
    pub fn outer_hadamard(&mut self, g: Var, h: Var) -> Result<Var> {
        let (gs, hs) = (self.shape(g), self.shape(h));
        if gs[1] != hs[1] {
            return Err(Error::shape("outer_hadamard", format!("{gs:?} ⊙ {hs:?}")));
        }
        let d = gs[1];
        let (gv, hv) = (self.value(g), self.value(h));
        let mut data = Vec::with_capacity(gs[0] * hs[0] * d);
        for b in 0..gs[0] {
            let gr = gv.row(b);
            for n in 0..hs[0] {
                data.extend(gr.iter().zip(hv.row(n)).map(|(x, y)| x * y));
            }
        }
        let rg = self.rg(g) || self.rg(h);
        let value = Tensor::from_vec(gs[0] * hs[0], d, data)?;
        Ok(self.push(value, Op::OuterHadamard(g, h), rg))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(x).clone().reshape(rows, cols)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Horizontal concatenation of equally tall blocks.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.shape(p)[0]);
        if parts.iter().any(|&p| self.shape(p)[0] != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_vec(rows, total, data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Reverse sweep from a `1 x 1` loss.
    ///
    /// Fails if any parameter leaf ends up with a non-finite gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != [1, 1] {
            return Err(Error::shape("backward", "loss must be 1 x 1"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gout, &mut grads)?;
            // keep interior gradients around for inspection
            grads[idx] = Some(gout);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Some(label), Some(g)) = (&node.label, &grads[idx]) {
                if !g.all_finite() {
                    return Err(Error::NonFiniteGradient {
                        param: label.clone(),
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    gemm(1.0, Operand::plain(gout), Operand::transposed(bv), 0.0, &mut ga);
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                    gemm(1.0, Operand::transposed(av), Operand::plain(gout), 0.0, &mut gb);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddRow(x, b) => {
                if self.rg(*b) {
                    let cols = gout.cols();
                    let mut gb = vec![0.0; cols];
                    for chunk in gout.data().chunks(cols.max(1)) {
                        for (acc, g) in gb.iter_mut().zip(chunk) {
                            *acc += g;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::row_vector(gb));
                }
                self.accumulate(grads, *x, gout.clone());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                if self.rg(*b) {
                    self.accumulate(grads, *b, gout.map(|g| -g));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, gout.zip_map(self.value(*b), |g, y| g * y));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, gout.zip_map(self.value(*a), |g, x| g * x));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.rg(*a) {
                    self.accumulate(grads, *a, gout.zip_map(bv, |g, y| g / y));
                }
                if self.rg(*b) {
                    // d(a/b)/db = -out / b
                    let t = out.zip_map(bv, |o, y| -o / y);
                    self.accumulate(grads, *b, gout.zip_map(&t, |g, v| g * v));
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, gout.map(|g| g * c)),
            Op::Shift(x) | Op::Reshape(x) => {
                let xs = self.shape(*x);
                self.accumulate(grads, *x, gout.clone().reshape(xs[0], xs[1])?)
            }
            Op::Relu(x) => {
                let g = gout.zip_map(out, |g, o| if o > 0.0 { g } else { 0.0 });
                self.accumulate(grads, *x, g)
            }
            Op::Tanh(x) => self.accumulate(grads, *x, gout.zip_map(out, |g, o| g * (1.0 - o * o))),
            Op::Exp(x) => self.accumulate(grads, *x, gout.zip_map(out, |g, o| g * o)),
            Op::Log(x) => self.accumulate(grads, *x, gout.zip_map(self.value(*x), |g, v| g / v)),
            Op::Sqrt(x) => self.accumulate(grads, *x, gout.zip_map(out, |g, o| 0.5 * g / o)),
            Op::Softplus(x) => {
                self.accumulate(grads, *x, gout.zip_map(self.value(*x), |g, v| g * sigmoid(v)))
            }
            Op::Square(x) => {
                self.accumulate(grads, *x, gout.zip_map(self.value(*x), |g, v| 2.0 * g * v))
            }
            Op::Clamp(x, lo, hi) => {
                let g = gout.zip_map(self.value(*x), |g, v| {
                    if v < *lo || v > *hi {
                        0.0
                    } else {
                        g
                    }
                });
                self.accumulate(grads, *x, g)
            }
            Op::Huber(x, kappa) => {
                let g = gout.zip_map(self.value(*x), |g, v| g * huber_grad(v, *kappa));
                self.accumulate(grads, *x, g)
            }
            Op::Expectile(x, nu) => {
                let g = gout.zip_map(self.value(*x), |g, v| {
                    let w = if v < 0.0 { 1.0 - nu } else { *nu };
                    2.0 * g * w * v
                });
                self.accumulate(grads, *x, g)
            }
            Op::QuantileHuber {
                pred,
                target,
                taus,
                kappa,
            } => {
                let pv = self.value(*pred);
                let (b, n, m) = (pv.rows(), pv.cols(), target.cols());
                let mut g = Tensor::zeros(b, n);
                for row in 0..b {
                    let scale = gout.data()[row] / m as f64;
                    let t = target.row(row);
                    for j in 0..n {
                        let p = pv.get(row, j);
                        let mut acc = 0.0;
                        for &tk in t {
                            let d = tk - p;
                            let w = (taus[j] - if d < 0.0 { 1.0 } else { 0.0 }).abs();
                            acc -= w * huber_grad(d, *kappa);
                        }
                        g.set(row, j, acc * scale);
                    }
                }
                self.accumulate(grads, *pred, g)
            }
            Op::SumCols(x) => {
                let xs = self.shape(*x);
                let mut g = Tensor::zeros(xs[0], xs[1]);
                for (chunk, go) in g.data_mut().chunks_mut(xs[1].max(1)).zip(gout.data()) {
                    chunk.fill(*go);
                }
                self.accumulate(grads, *x, g)
            }
            Op::MeanAll(x) => {
                let xs = self.shape(*x);
                let n = (xs[0] * xs[1]).max(1) as f64;
                self.accumulate(grads, *x, Tensor::full(xs[0], xs[1], gout.item() / n))
            }
            Op::SumAll(x) => {
                let xs = self.shape(*x);
                self.accumulate(grads, *x, Tensor::full(xs[0], xs[1], gout.item()))
            }
            Op::MulCol(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let c = xv.cols().max(1);
                if self.rg(*x) {
                    let mut g = gout.clone();
                    for (chunk, s) in g.data_mut().chunks_mut(c).zip(wv.data()) {
                        for v in chunk {
                            *v *= s;
                        }
                    }
                    self.accumulate(grads, *x, g);
                }
                if self.rg(*w) {
                    let data = gout
                        .data()
                        .chunks(c)
                        .zip(xv.data().chunks(c))
                        .map(|(g, x)| g.iter().zip(x).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *w, Tensor::column(data));
                }
            }
            Op::BroadcastRows(x) => {
                let c = gout.cols();
                let mut acc = vec![0.0; c];
                for chunk in gout.data().chunks(c.max(1)) {
                    for (a, g) in acc.iter_mut().zip(chunk) {
                        *a += g;
                    }
                }
                self.accumulate(grads, *x, Tensor::row_vector(acc))
            }
            Op::OuterHadamard(gv, hv) => {
                let (gval, hval) = (self.value(*gv), self.value(*hv));
                let (bsz, nsz, d) = (gval.rows(), hval.rows(), gval.cols());
                let mut gg = Tensor::zeros(bsz, d);
                let mut gh = Tensor::zeros(nsz, d);
                for b in 0..bsz {
                    for n in 0..nsz {
                        let go = gout.row(b * nsz + n);
                        let hrow = hval.row(n);
                        let grow = gval.row(b);
                        let off_g = b * d;
                        let off_h = n * d;
                        for k in 0..d {
                            gg.data_mut()[off_g + k] += go[k] * hrow[k];
                            gh.data_mut()[off_h + k] += go[k] * grow[k];
                        }
                    }
                }
                if self.rg(*gv) {
                    self.accumulate(grads, *gv, gg);
                }
                if self.rg(*hv) {
                    self.accumulate(grads, *hv, gh);
                }
            }
            Op::ConcatCols(parts) => {
                let rows = gout.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.rg(p) {
                        let mut g = Tensor::zeros(rows, w);
                        for r in 0..rows {
                            let src = &gout.row(r)[offset..offset + w];
                            g.data_mut()[r * w..(r + 1) * w].copy_from_slice(src);
                        }
                        self.accumulate(grads, p, g);
                    }
                    offset += w;
                }
            }
        }
        Ok(())
    }
}
