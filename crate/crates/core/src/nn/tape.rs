//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! Every operation appends a node holding its output value. `backward` walks
//! the nodes once, in reverse order, accumulating vector-Jacobian products.
//! Nodes that do not depend on a gradient-requiring leaf are skipped.

use crate::error::{Error, Result};
use crate::nn::tensor::{linear_forward, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Relu(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Square(Var),
    SumAll(Var),
    SumCols(Var),
    ConcatCols(Var, Var),
    SliceCols { x: Var, start: usize, end: usize },
    RepeatRows { x: Var, times: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Linear { .. } => "linear",
            Op::Tanh(_) => "tanh",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Exp(_) => "exp",
            Op::Relu(_) => "relu",
            Op::Clamp { .. } => "clamp",
            Op::Square(_) => "square",
            Op::SumAll(_) => "sum",
            Op::SumCols(_) => "sum_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::RepeatRows { .. } => "repeat_rows",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of the operations executed during one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    visited: Vec<usize>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros if `var` was not reached.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }

    /// Indices of the non-leaf nodes processed, in processing order.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the current value of `v` into a new constant leaf, cutting the
    /// gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(wv.shape().len(), 2, "linear weight must be a matrix");
        assert_eq!(xv.cols(), wv.cols(), "linear input width");
        assert_eq!(bv.len(), wv.shape()[0], "linear bias length");
        let out = linear_forward(xv, wv, bv);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(out, Op::Tanh(x), rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(av.same_shape(bv), "{}: shape {:?} vs {:?}", op.name(), av.shape(), bv.shape());
        let out = av.zip_map(bv, f);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).scale(factor);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        let rg = self.rg(x);
        self.push(out, Op::Exp(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(out, Op::Clamp { x, lo, hi }, rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let rg = self.rg(x);
        self.push(out, Op::Square(x), rg)
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Row sums, `[rows, cols] -> [rows, 1]`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let out = self.value(x).sum_cols();
        let rg = self.rg(x);
        self.push(out, Op::SumCols(x), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).concat_cols(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::ConcatCols(a, b), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let out = self.value(x).slice_cols(start, end);
        let rg = self.rg(x);
        self.push(out, Op::SliceCols { x, start, end }, rg)
    }

    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let out = self.value(x).repeat_rows(times);
        let rg = self.rg(x);
        self.push(out, Op::RepeatRows { x, times }, rg)
    }

    /// Vector-Jacobian products of the scalar `output` with respect to
    /// every node on the tape.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_value = self.value(output);
        if out_value.len() != 1 {
            return Err(Error::shape(
                "backward output",
                "scalar",
                format!("{:?}", out_value.shape()),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[output.0] = Some(Tensor::filled(out_value.shape(), 1.0));
        let mut visited = Vec::new();

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            visited.push(idx);
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            shapes,
            visited,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match *op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(x), self.value(w));
                let rows = xv.rows();
                let input = xv.cols();
                let outd = wv.shape()[0];
                let gd = g.data();
                if self.rg(x) {
                    // dx = g W
                    let wd = wv.data();
                    let mut dx = vec![0.0; rows * input];
                    for r in 0..rows {
                        let dxr = &mut dx[r * input..(r + 1) * input];
                        for o in 0..outd {
                            let go = gd[r * outd + o];
                            if go != 0.0 {
                                let wr = &wd[o * input..(o + 1) * input];
                                for (d, w) in dxr.iter_mut().zip(wr) {
                                    *d += go * w;
                                }
                            }
                        }
                    }
                    let dx = Tensor::new(xv.shape().to_vec(), dx).expect("dx shape");
                    self.accumulate(grads, x, dx);
                }
                if self.rg(w) {
                    // dW = gᵀ x
                    let mut dw = vec![0.0; outd * input];
                    for r in 0..rows {
                        let xr = xv.row_slice(r);
                        for o in 0..outd {
                            let go = gd[r * outd + o];
                            if go != 0.0 {
                                let dwr = &mut dw[o * input..(o + 1) * input];
                                for (d, xi) in dwr.iter_mut().zip(xr) {
                                    *d += go * xi;
                                }
                            }
                        }
                    }
                    let dw = Tensor::new(wv.shape().to_vec(), dw).expect("dw shape");
                    self.accumulate(grads, w, dw);
                }
                if self.rg(b) {
                    let mut db = vec![0.0; outd];
                    for r in 0..rows {
                        for (o, d) in db.iter_mut().enumerate() {
                            *d += gd[r * outd + o];
                        }
                    }
                    let db = Tensor::new(self.value(b).shape().to_vec(), db).expect("db shape");
                    self.accumulate(grads, b, db);
                }
            }
            Op::Tanh(x) => {
                let dx = out.zip_map(g, |y, g| g * (1.0 - y * y));
                self.accumulate(grads, x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    self.accumulate(grads, a, g.zip_map(self.value(b), |g, y| g * y));
                }
                if self.rg(b) {
                    self.accumulate(grads, b, g.zip_map(self.value(a), |g, x| g * x));
                }
            }
            Op::Scale(x, f) => self.accumulate(grads, x, g.scale(f)),
            Op::Exp(x) => self.accumulate(grads, x, g.zip_map(out, |g, y| g * y)),
            Op::Relu(x) => {
                let dx = g.zip_map(self.value(x), |g, v| if v > 0.0 { g } else { 0.0 });
                self.accumulate(grads, x, dx);
            }
            Op::Clamp { x, lo, hi } => {
                let dx = g.zip_map(self.value(x), |g, v| if v > lo && v < hi { g } else { 0.0 });
                self.accumulate(grads, x, dx);
            }
            Op::Square(x) => {
                let dx = g.zip_map(self.value(x), |g, v| 2.0 * g * v);
                self.accumulate(grads, x, dx);
            }
            Op::SumAll(x) => {
                let gs = g.item();
                self.accumulate(grads, x, Tensor::filled(self.value(x).shape(), gs));
            }
            Op::SumCols(x) => {
                let xv = self.value(x);
                let cols = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                for r in 0..xv.rows() {
                    let gr = g.data()[r];
                    dx.row_slice_mut(r).iter_mut().for_each(|d| *d = gr);
                }
                debug_assert_eq!(dx.cols(), cols);
                self.accumulate(grads, x, dx);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(a).cols();
                let cb = self.value(b).cols();
                if self.rg(a) {
                    let ga = g.slice_cols(0, ca).reshape(self.value(a).shape().to_vec());
                    self.accumulate(grads, a, ga.expect("concat grad a"));
                }
                if self.rg(b) {
                    let gb = g.slice_cols(ca, ca + cb).reshape(self.value(b).shape().to_vec());
                    self.accumulate(grads, b, gb.expect("concat grad b"));
                }
            }
            Op::SliceCols { x, start, end } => {
                let xv = self.value(x);
                let mut dx = Tensor::zeros(xv.shape());
                for r in 0..xv.rows() {
                    dx.row_slice_mut(r)[start..end].copy_from_slice(g.row_slice(r));
                }
                self.accumulate(grads, x, dx);
            }
            Op::RepeatRows { x, times } => {
                let xv = self.value(x);
                let cols = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                for r in 0..xv.rows() {
                    let dr = dx.row_slice_mut(r);
                    for t in 0..times {
                        let gr = g.row_slice(r * times + t);
                        for c in 0..cols {
                            dr[c] += gr[c];
                        }
                    }
                }
                self.accumulate(grads, x, dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(3.0));
        let y = tape.square(w);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(w).item(), 6.0);
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(3.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.scale(c, 2.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(w).item(), 0.0);
        assert!(g.get(w).is_none());
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.square(w);
        assert!(matches!(tape.backward(y), Err(Error::Shape { .. })));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(2.0));
        let d = tape.detach(w);
        let y = tape.mul(w, d);
        let g = tape.backward(y).unwrap();
        // d/dw (w * stopgrad(w)) = stopgrad(w)
        assert_eq!(g.wrt(w).item(), 2.0);
    }

    #[test]
    fn visits_each_op_once_in_reverse_order() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![0.5, -1.0]));
        let a = tape.tanh(w);
        let b = tape.square(a);
        let c = tape.add(a, b);
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        let order = g.visit_order();
        assert_eq!(order, &[s.index(), c.index(), b.index(), a.index()]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f(w) = sum(w * w + w), df/dw = 2w + 1
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let sq = tape.mul(w, w);
        let y = tape.add(sq, w);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap().wrt(w);
        assert_eq!(g.data(), &[3.0, -3.0, 2.0]);
    }

    #[test]
    fn relu_and_clamp_masks() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![-1.0, 0.5, 3.0]));
        let r = tape.relu(w);
        let c = tape.clamp(w, -0.5, 2.0);
        let y = tape.add(r, c);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap().wrt(w);
        assert_eq!(g.data(), &[0.0, 2.0, 1.0]);
    }
}
