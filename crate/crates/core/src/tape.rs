//! Record-then-replay reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation evaluates eagerly, appends a node holding its value and
//! operands, and returns a [`Var`] handle. [`Tape::backward`] walks the nodes
//! in reverse and accumulates gradients. Operands always precede the node
//! that uses them, so a single reverse sweep is a valid topological order.
//!
//! ```
//! use coslearn::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let p = tape.param(Tensor::vector(vec![1.0, 2.0]));
//! let sq = tape.mul(p, p).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(p).data(), &[2.0, 4.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Tape::custom`]: `(input, output, grad_output) -> grad_input`.
pub type BackwardFn = Box<dyn Fn(&Tensor, &Tensor, &Tensor) -> Tensor + Send + Sync>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Dot(Var, Var),
    L2Normalize(Var),
    Softmax(Var),
    LogSoftmax(Var),
    SliceRows { src: Var, start: usize },
    ConcatRows(Vec<Var>),
    Custom { input: Var, backward: BackwardFn },
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
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

    /// Records a leaf whose gradient [`Tape::backward`] always reports.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(Op::Leaf, value);
        self.params.push(v);
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, op: Op, value: Tensor) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push(op, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.record("add", Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.record("sub", Op::Sub(a, b), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.record("mul", Op::Mul(a, b), out)
    }

    /// `a[..., n] + bias[n]` on every last-axis row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = self.value(a).add_row_vector(self.value(bias))?;
        self.record("add_bias", Op::AddBias(a, bias), out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).scale(c);
        self.record("scale", Op::Scale(a, c), out)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.record("add_scalar", Op::AddScalar(a), out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.record("matmul", Op::MatMul(a, b), out)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).relu();
        self.record("relu", Op::Relu(a), out)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.record("exp", Op::Exp(a), out)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.record("log", Op::Log(a), out)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.record("sum", Op::Sum(a), out)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.record("mean", Op::Mean(a), out)
    }

    /// `[..., n] -> [...]`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).sum_last();
        self.record("sum_last", Op::SumLast(a), out)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 1 {
            return Err(Error::shape("dot", ta.shape(), tb.shape()));
        }
        let out = Tensor::scalar(ta.dot(tb)?);
        self.record("dot", Op::Dot(a, b), out)
    }

    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).l2_normalize()?;
        self.record("l2_normalize", Op::L2Normalize(a), out)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax();
        self.record("softmax", Op::Softmax(a), out)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).log_softmax();
        self.record("log_softmax", Op::LogSoftmax(a), out)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, end)?;
        self.record("slice_rows", Op::SliceRows { src: a, start }, out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&values)?;
        self.record("concat_rows", Op::ConcatRows(parts.to_vec()), out)
    }

    /// Elementwise-or-not unary op with a caller-supplied backward rule.
    pub fn custom(
        &mut self,
        input: Var,
        forward: impl FnOnce(&Tensor) -> Tensor,
        backward: BackwardFn,
    ) -> Result<Var> {
        let out = forward(self.value(input));
        self.record("custom", Op::Custom { input, backward }, out)
    }

    /// Reverse accumulation from a one-element `loss`.
    ///
    /// The tape is not consumed, so calling this twice yields identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full_like(lv, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        for &p in &self.params {
            if p.0 >= grads.len() {
                grads.resize_with(p.0 + 1, || None);
            }
            if grads[p.0].is_none() {
                grads[p.0] = Some(Tensor::full_like(self.value(p), 0.0));
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, g.zip_map(vb, "mul", |x, y| x * y)?)?;
                accumulate(grads, *b, g.zip_map(va, "mul", |x, y| x * y)?)?;
            }
            Op::AddBias(a, bias) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *bias, g.sum_rows_to_vector())?;
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.scale(*c))?,
            Op::AddScalar(a) => accumulate(grads, *a, g.clone())?,
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, g.matmul(&vb.transpose()?)?)?;
                accumulate(grads, *b, va.transpose()?.matmul(g)?)?;
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                let d = g.zip_map(va, "relu", |gi, x| if x > 0.0 { gi } else { 0.0 })?;
                accumulate(grads, *a, d)?;
            }
            Op::Exp(a) => accumulate(grads, *a, g.zip_map(out, "exp", |gi, y| gi * y)?)?,
            Op::Log(a) => {
                let va = self.value(*a);
                accumulate(grads, *a, g.zip_map(va, "log", |gi, x| gi / x)?)?;
            }
            Op::Sum(a) => {
                let gs = g.data()[0];
                accumulate(grads, *a, Tensor::full_like(self.value(*a), gs))?;
            }
            Op::Mean(a) => {
                let va = self.value(*a);
                let gs = g.data()[0] / va.len() as f64;
                accumulate(grads, *a, Tensor::full_like(va, gs))?;
            }
            Op::SumLast(a) => {
                let va = self.value(*a);
                let w = va.last_dim();
                let data = g.data().iter().flat_map(|&gi| std::iter::repeat_n(gi, w));
                let d = Tensor::new(va.shape().to_vec(), data.collect())?;
                accumulate(grads, *a, d)?;
            }
            Op::Dot(a, b) => {
                let gs = g.data()[0];
                let (va, vb) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, vb.scale(gs))?;
                accumulate(grads, *b, va.scale(gs))?;
            }
            Op::L2Normalize(a) => {
                // d/dx (x/r) applied to g: (g - y<g,y>) / r, row by row.
                let va = self.value(*a);
                let w = va.last_dim();
                let mut d = g.clone();
                for ((drow, yrow), xrow) in d
                    .data_mut()
                    .chunks_exact_mut(w)
                    .zip(out.rows())
                    .zip(va.rows())
                {
                    let r = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let gy: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (di, yi) in drow.iter_mut().zip(yrow) {
                        *di = (*di - yi * gy) / r;
                    }
                }
                accumulate(grads, *a, d)?;
            }
            Op::Softmax(a) => {
                let w = out.last_dim();
                let mut d = g.clone();
                for (drow, srow) in d.data_mut().chunks_exact_mut(w).zip(out.rows()) {
                    let gs: f64 = drow.iter().zip(srow).map(|(a, b)| a * b).sum();
                    for (di, si) in drow.iter_mut().zip(srow) {
                        *di = si * (*di - gs);
                    }
                }
                accumulate(grads, *a, d)?;
            }
            Op::LogSoftmax(a) => {
                let w = out.last_dim();
                let mut d = g.clone();
                for (drow, lrow) in d.data_mut().chunks_exact_mut(w).zip(out.rows()) {
                    let total: f64 = drow.iter().sum();
                    for (di, li) in drow.iter_mut().zip(lrow) {
                        *di -= li.exp() * total;
                    }
                }
                accumulate(grads, *a, d)?;
            }
            Op::SliceRows { src, start } => {
                let vs = self.value(*src);
                let stride = vs.len() / vs.shape()[0];
                let mut d = Tensor::full_like(vs, 0.0);
                let off = start * stride;
                d.data_mut()[off..off + g.len()].copy_from_slice(g.data());
                accumulate(grads, *src, d)?;
            }
            Op::ConcatRows(parts) => {
                let mut row = 0;
                for &p in parts {
                    let rows = self.value(p).shape()[0];
                    accumulate(grads, p, g.slice_rows(row, row + rows)?)?;
                    row += rows;
                }
            }
            Op::Custom { input, backward } => {
                let d = backward(self.value(*input), out, g);
                if !d.same_shape(self.value(*input)) {
                    return Err(Error::shape(
                        "custom backward",
                        d.shape(),
                        self.shape(*input),
                    ));
                }
                accumulate(grads, *input, d)?;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, d: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => {
            *slot = Some(d);
            Ok(())
        }
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when `v` does not influence the loss and is not a parameter.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a registered parameter.
    ///
    /// Panics if `v` neither is a parameter nor reaches the loss.
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.get(v).expect("no gradient recorded for this variable")
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_has_unit_gradient() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::vector(vec![0.3, -1.0, 2.0]));
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(p).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn self_dot_gradient_is_twice_the_input() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let loss = tape.dot(p, p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(p).data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(p), Err(Error::NotScalar(_))));
    }

    #[test]
    fn backward_is_repeatable() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_rows(&[vec![0.5, -1.5], vec![2.0, 0.25]]).unwrap());
        let y = tape.l2_normalize(x).unwrap();
        let z = tape.log_softmax(y).unwrap();
        let loss = tape.mean(z).unwrap();
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        assert_eq!(g1.wrt(x), g2.wrt(x));
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::vector(vec![1.0]));
        let q = tape.param(Tensor::zeros(&[2, 2]));
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(q), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn log_of_zero_is_a_non_finite_error() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::vector(vec![0.0]));
        assert!(matches!(tape.log(p), Err(Error::NonFinite { op: "log" })));
    }
}
