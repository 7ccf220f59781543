//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! A [`Graph`] records every operation in evaluation order. Each node keeps
//! its forward value plus whatever the backward rule needs, so
//! [`Graph::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Graph`].
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
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Transpose(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Gelu(Var),
    Ln(Var),
    FloorMax { x: Var, floor: f64 },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Sum(Var),
    Pick { x: Var, index: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// The tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`]: one optional gradient per node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf tensor. `requires_grad` leaves receive gradients on backward.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        let value = value.check_finite("leaf")?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        let value = value.check_finite(name)?;
        let ng = self.ng(inputs);
        Ok(self.push(value, op, ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn row_broadcast(&self, op: &'static str, a: Var, row: Var) -> Result<()> {
        let (_, n) = self.value(a).rank2(op)?;
        if self.shape(row) != [1, n] {
            return Err(Error::shape(op, self.shape(a), self.shape(row)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        self.record(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul_nt(self.value(a), self.value(b))?;
        self.record(out, Op::MatMulNt(a, b), &[a, b], "matmul_nt")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.record(out, Op::Add(a, b), &[a, b], "add")
    }

    /// `a + row` with `row: 1×n` broadcast over every row of `a: m×n`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, row)?;
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        let n = r.len();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += r[i % n];
        }
        self.record(out, Op::AddRow(a, row), &[a, row], "add_row")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.record(out, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.record(out, Op::Mul(a, b), &[a, b], "mul")
    }

    /// `a ⊙ row` with `row: 1×n` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, row)?;
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        let n = r.len();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= r[i % n];
        }
        self.record(out, Op::MulRow(a, row), &[a, row], "mul_row")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.record(out, Op::Div(a, b), &[a, b], "div")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.record(out, Op::Scale(a, c), &[a], "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.record(out, Op::AddScalar(a), &[a], "add_scalar")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.record(out, Op::Transpose(a), &[a], "transpose")
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = tensor::softmax_rows(self.value(x))?;
        self.record(out, Op::Softmax(x), &[x], "softmax_rows")
    }

    /// Softmax with key columns removed; see [`tensor::softmax_rows_masked`].
    /// Masked columns get exactly zero weight and zero gradient, which the
    /// plain softmax backward rule already yields since their output is 0.
    pub fn softmax_rows_masked(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let out = tensor::softmax_rows_masked(self.value(x), keep)?;
        self.record(out, Op::Softmax(x), &[x], "softmax_rows")
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = tensor::log_softmax_rows(self.value(x))?;
        self.record(out, Op::LogSoftmax(x), &[x], "log_softmax_rows")
    }

    /// Row normalisation without affine parameters.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (out, inv_std) = tensor::layer_norm_rows(self.value(x), eps)?;
        self.record(out, Op::LayerNorm { x, inv_std }, &[x], "layer_norm")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(tensor::gelu);
        self.record(out, Op::Gelu(x), &[x], "gelu")
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::ln);
        self.record(out, Op::Ln(x), &[x], "ln")
    }

    /// Elementwise `max(x, floor)`; gradient flows only where `x > floor`.
    pub fn floor_max(&mut self, x: Var, floor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(floor));
        self.record(out, Op::FloorMax { x, floor }, &[x], "floor_max")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        self.record(out, Op::ConcatRows(parts.to_vec()), parts, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (m, _) = self.value(first).rank2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).rank2("concat_cols")?;
            if pm != m {
                return Err(Error::shape(
                    "concat_cols",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..m {
                out[i * n + offset..i * n + offset + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let out = Tensor::new(&[m, n], out)?;
        self.record(out, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, len)?;
        self.record(out, Op::SliceRows { x, start }, &[x], "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).rank2("slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let out = Tensor::new(&[m, len], out)?;
        self.record(out, Op::SliceCols { x, start }, &[x], "slice_cols")
    }

    /// Sum of all entries, as a 1×1 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.record(out, Op::Sum(x), &[x], "sum")
    }

    /// Single entry at flat `index`, as a 1×1 tensor.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = *self
            .value(x)
            .data()
            .get(index)
            .ok_or_else(|| Error::shape("pick", self.shape(x), &[index]))?;
        self.record(Tensor::scalar(v), Op::Pick { x, index }, &[x], "pick")
    }

    /// Sum of squared entries.
    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let sq = self.mul(x, x)?;
        self.sum(sq)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward from non-scalar node of shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    let ga = tensor::matmul_nt(g, self.value(*b))?;
                    self.accumulate(grads, *a, ga);
                }
                if needs(*b) {
                    let gb = tensor::matmul_tn(self.value(*a), g)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                // c = a bᵀ: da = g b, db = gᵀ a
                if needs(*a) {
                    let ga = tensor::matmul(g, self.value(*b))?;
                    self.accumulate(grads, *a, ga);
                }
                if needs(*b) {
                    let gb = tensor::matmul_tn(g, self.value(*a))?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if needs(*row) {
                    let gr = column_sums(g);
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if needs(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::MulRow(a, row) => {
                let r = self.value(*row).data();
                let n = r.len();
                if needs(*a) {
                    let mut ga = g.clone();
                    for (i, v) in ga.data_mut().iter_mut().enumerate() {
                        *v *= r[i % n];
                    }
                    self.accumulate(grads, *a, ga);
                }
                if needs(*row) {
                    let gx = g.zip_map(self.value(*a), |x, y| x * y);
                    self.accumulate(grads, *row, column_sums(&gx));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |x, y| x / y));
                }
                if needs(*b) {
                    // d(a/b)/db = -out / b
                    let gb = g
                        .zip_map(&node.value, |x, o| x * o)
                        .zip_map(bv, |x, y| -x / y);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()?),
            Op::Softmax(x) => {
                // dx = y ⊙ (g − Σ_j g_j y_j) per row
                let y = &node.value;
                let (m, n) = y.rank2("softmax_rows")?;
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[m, n], gx)?);
            }
            Op::LogSoftmax(x) => {
                // dx = g − softmax ⊙ Σ_j g_j per row
                let out = &node.value;
                let (m, n) = out.rank2("log_softmax_rows")?;
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let gr = g.row(i);
                    let total: f64 = gr.iter().sum();
                    for j in 0..n {
                        gx[i * n + j] = gr[j] - out.row(i)[j].exp() * total;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[m, n], gx)?);
            }
            Op::LayerNorm { x, inv_std } => {
                // dx = r (g − mean(g) − x̂ mean(g ⊙ x̂))
                let xhat = &node.value;
                let (m, n) = xhat.rank2("layer_norm")?;
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let gr = g.row(i);
                    let xr = xhat.row(i);
                    let mean_g = gr.iter().sum::<f64>() / n as f64;
                    let mean_gx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        gx[i * n + j] = inv_std[i] * (gr[j] - mean_g - xr[j] * mean_gx);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[m, n], gx)?);
            }
            Op::Gelu(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| gv * tensor::gelu_grad(xv));
                self.accumulate(grads, *x, gx);
            }
            Op::Ln(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| gv / xv);
                self.accumulate(grads, *x, gx);
            }
            Op::FloorMax { x, floor } => {
                let f = *floor;
                let gx = g.zip_map(self.value(*x), |gv, xv| if xv > f { gv } else { 0.0 });
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).rows();
                    if needs(p) {
                        self.accumulate(grads, p, g.slice_rows(start, len)?);
                    }
                    start += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = g.rank2("concat_cols")?;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if needs(p) {
                        let mut gp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            gp.extend_from_slice(&g.data()[i * n + offset..i * n + offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::new(&[m, w], gp)?);
                    }
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let src = self.value(*x);
                let mut gx = Tensor::zeros(src.shape());
                let c = src.cols();
                gx.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, *x, gx);
            }
            Op::SliceCols { x, start } => {
                let src = self.value(*x);
                let (m, n) = src.rank2("slice_cols")?;
                let w = g.cols();
                let mut gx = Tensor::zeros(src.shape());
                for i in 0..m {
                    gx.data_mut()[i * n + start..i * n + start + w].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let gx = Tensor::full(self.shape(*x), g.item());
                self.accumulate(grads, *x, gx);
            }
            Op::Pick { x, index } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                gx.data_mut()[*index] = g.item();
                self.accumulate(grads, *x, gx);
            }
        }
        Ok(())
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let n = g.cols();
    let mut out = vec![0.0; n];
    for (i, v) in g.data().iter().enumerate() {
        out[i % n] += v;
    }
    Tensor::new(&[1, n], out).expect("n > 0")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_gradient, max_relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Compares reverse-mode gradients of `build` against central differences.
    fn check(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| g.leaf(t.clone(), true).unwrap())
            .collect();
        let out = build(&mut g, &vars).unwrap();
        let grads = g.backward(out).unwrap();
        let analytic: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.get_or_zeros(v, t))
            .collect();
        let numeric = fd_gradient(
            |leaves| {
                let mut g = Graph::new();
                let vars: Vec<Var> = leaves
                    .iter()
                    .map(|t| g.constant(t.clone()).unwrap())
                    .collect();
                let out = build(&mut g, &vars)?;
                Ok(g.value(out).clone())
            },
            inputs,
            1e-5,
        )
        .unwrap();
        for (a, n) in analytic.iter().zip(&numeric) {
            let err = max_relative_error(a, n);
            assert!(err <= 1e-4, "relative error {err}: {a:?} vs {n:?}");
        }
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
        let w = g.constant(rand(g.shape(x), seed))?;
        let p = g.mul(x, w)?;
        g.sum(p)
    }

    #[test]
    fn gradcheck_matmul_family() {
        let a = rand(&[3, 4], 1);
        let b = rand(&[4, 2], 2);
        check(&[a.clone(), b], |g, v| {
            let c = g.matmul(v[0], v[1])?;
            weighted_sum(g, c, 9)
        });
        let b2 = rand(&[5, 4], 3);
        check(&[a, b2], |g, v| {
            let c = g.matmul_nt(v[0], v[1])?;
            weighted_sum(g, c, 9)
        });
    }

    #[test]
    fn gradcheck_elementwise_and_broadcast() {
        let a = rand(&[3, 4], 4);
        let b = rand(&[3, 4], 5).map(|v| v.abs() + 0.5);
        let r = rand(&[1, 4], 6);
        check(&[a, b, r], |g, v| {
            let s = g.add(v[0], v[1])?;
            let d = g.sub(s, v[0])?;
            let m = g.mul(d, v[0])?;
            let q = g.div(m, v[1])?;
            let ar = g.add_row(q, v[2])?;
            let mr = g.mul_row(ar, v[2])?;
            let sc = g.scale(mr, -1.5)?;
            let t = g.transpose(sc)?;
            let z = g.add_scalar(t, 0.3)?;
            weighted_sum(g, z, 11)
        });
    }

    #[test]
    fn gradcheck_nonlinearities() {
        let x = rand(&[3, 5], 7);
        check(std::slice::from_ref(&x), |g, v| {
            let s = g.softmax_rows(v[0])?;
            weighted_sum(g, s, 12)
        });
        check(std::slice::from_ref(&x), |g, v| {
            let keep = [true, false, true, true, false];
            let s = g.softmax_rows_masked(v[0], Some(&keep))?;
            weighted_sum(g, s, 13)
        });
        check(std::slice::from_ref(&x), |g, v| {
            let s = g.log_softmax_rows(v[0])?;
            weighted_sum(g, s, 14)
        });
        check(std::slice::from_ref(&x), |g, v| {
            let s = g.layer_norm_rows(v[0], 1e-6)?;
            weighted_sum(g, s, 15)
        });
        check(std::slice::from_ref(&x), |g, v| {
            let s = g.gelu(v[0])?;
            weighted_sum(g, s, 16)
        });
        let pos = x.map(|v| v.abs() + 0.1);
        check(&[pos], |g, v| {
            let s = g.ln(v[0])?;
            let f = g.floor_max(s, -0.5)?;
            weighted_sum(g, f, 17)
        });
    }

    #[test]
    fn gradcheck_structural_ops() {
        let a = rand(&[2, 6], 20);
        let b = rand(&[3, 6], 21);
        check(&[a, b], |g, v| {
            let c = g.concat_rows(&[v[0], v[1]])?;
            let s = g.slice_rows(c, 1, 3)?;
            let l = g.slice_cols(s, 0, 2)?;
            let r = g.slice_cols(s, 2, 4)?;
            let cc = g.concat_cols(&[r, l])?;
            let p = g.pick(cc, 4)?;
            let sq = g.sum_squares(cc)?;
            let t = g.add(p, sq)?;
            weighted_sum(g, t, 22)
        });
    }

    #[test]
    fn reused_node_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true).unwrap();
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 7.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0), true).unwrap();
        let c = g.constant(Tensor::scalar(5.0)).unwrap();
        let y = g.mul(x, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().item(), 5.0);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]), true).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn ln_of_zero_is_a_hard_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0)).unwrap();
        assert!(matches!(g.ln(x), Err(Error::NonFinite { op: "ln" })));
    }
}
