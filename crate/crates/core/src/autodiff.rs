//! Tape-based reverse-mode differentiation.
//!
//! Operations are recorded in call order, which is a topological order; the
//! backward pass walks the tape once in reverse. Nodes created from constants
//! (and everything computed only from constants) carry no gradient.

use crate::error::{Error, Result};
use crate::tensor::{Padding, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: Padding,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Max(Var, Var),
    Min(Var, Var),
    Neg(Var),
    Abs(Var),
    Relu(Var),
    ClipNonneg(Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    MaxScalar(Var, f64),
    MinScalar(Var, f64),
    AddBias(Var, Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumLastAxis(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recording of primitive operations and their forward values.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, or `None` when `v` does not
    /// influence the root (or was recorded as a constant).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.adjoints.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.adjoints.get_mut(v.0).and_then(Option::take)
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

    /// Records a value that is not differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let ng = self.needs_grad(a);
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(value, op, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(a, b, v, Op::MatMul { a, b, trans_b: false }))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_t(self.value(b))?;
        Ok(self.binary(a, b, v, Op::MatMul { a, b, trans_b: true }))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let v = self.value(input).conv2d(self.value(kernel), stride, padding)?;
        Ok(self.binary(
            input,
            kernel,
            v,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
        ))
    }

    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let (v, argmax) = self.value(input).maxpool2d(window, stride)?;
        Ok(self.unary(input, v, Op::MaxPool2d { input, argmax }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Mul(a, b)))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).maximum(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Max(a, b)))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).minimum(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Min(a, b)))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        self.unary(a, v, Op::Neg(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).abs();
        self.unary(a, v, Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).relu();
        self.unary(a, v, Op::Relu(a))
    }

    pub fn clip_nonneg(&mut self, a: Var) -> Var {
        let v = self.value(a).clip_nonneg();
        self.unary(a, v, Op::ClipNonneg(a))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).add_scalar(c);
        self.unary(a, v, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mul_scalar(c);
        self.unary(a, v, Op::MulScalar(a, c))
    }

    pub fn max_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x.max(c));
        self.unary(a, v, Op::MaxScalar(a, c))
    }

    pub fn min_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x.min(c));
        self.unary(a, v, Op::MinScalar(a, c))
    }

    /// Adds the vector `bias` along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let v = self.value(x).add_bias(self.value(bias))?;
        Ok(self.binary(x, bias, v, Op::AddBias(x, bias)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.unary(a, v, Op::Reshape(a)))
    }

    pub fn reduce_sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.unary(a, v, Op::Sum(a))
    }

    pub fn reduce_mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.unary(a, v, Op::Mean(a))
    }

    pub fn sum_last_axis(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).sum_last_axis()?;
        Ok(self.unary(a, v, Op::SumLastAxis(a)))
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(Tensor::full(root_value.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[idx].clone() else { continue };
            self.propagate(node, &g, &mut adj)?;
        }
        Ok(Gradients { adjoints: adj })
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.needs_grad(v) {
            return Ok(());
        }
        let slot = &mut adj[v.0];
        *slot = Some(match slot.take() {
            None => g,
            Some(mut acc) => {
                if acc.shape() != g.shape() {
                    return Err(Error::dim("accumulate", acc.shape(), g.shape()));
                }
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
                acc
            }
        });
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    // dA = G · op(B)ᵀ
                    let ga = if *trans_b { g.matmul(bv)? } else { g.matmul_t(bv)? };
                    self.accumulate(adj, *a, ga)?;
                }
                if self.needs_grad(*b) {
                    let gb = if *trans_b {
                        // C = A·Bᵀ  =>  dB = Gᵀ · A
                        transpose_matmul(g, av)?
                    } else {
                        transpose_matmul(av, g)?
                    };
                    self.accumulate(adj, *b, gb)?;
                }
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (gi, gk) = Tensor::conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    *stride,
                    *padding,
                    self.needs_grad(*input),
                    self.needs_grad(*kernel),
                )?;
                if let Some(gi) = gi {
                    self.accumulate(adj, *input, gi)?;
                }
                if let Some(gk) = gk {
                    self.accumulate(adj, *kernel, gk)?;
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let mut gi = vec![0.0; self.value(*input).len()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    gi[src] += gv;
                }
                let shape = self.value(*input).shape().to_vec();
                self.accumulate(adj, *input, Tensor::from_parts(shape, gi))?;
            }
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.clone())?;
                self.accumulate(adj, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g.clone())?;
                self.accumulate(adj, *b, g.map(|x| -x))?;
            }
            Op::Mul(a, b) => {
                if self.needs_grad(*a) {
                    self.accumulate(adj, *a, g.mul(self.value(*b))?)?;
                }
                if self.needs_grad(*b) {
                    self.accumulate(adj, *b, g.mul(self.value(*a))?)?;
                }
            }
            Op::Max(a, b) | Op::Min(a, b) => {
                let is_max = matches!(node.op, Op::Max(..));
                let (av, bv) = (self.value(*a), self.value(*b));
                let pick_a: Vec<bool> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&x, &y)| if is_max { x >= y } else { x <= y })
                    .collect();
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(&pick_a)
                    .map(|(&gv, &p)| if p { gv } else { 0.0 })
                    .collect();
                let gb: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(&pick_a)
                    .map(|(&gv, &p)| if p { 0.0 } else { gv })
                    .collect();
                self.accumulate(adj, *a, Tensor::from_parts(g.shape().to_vec(), ga))?;
                self.accumulate(adj, *b, Tensor::from_parts(g.shape().to_vec(), gb))?;
            }
            Op::Neg(a) => self.accumulate(adj, *a, g.map(|x| -x))?,
            Op::Abs(a) => {
                let s = self.value(*a).map(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.accumulate(adj, *a, g.mul(&s)?)?;
            }
            Op::Relu(a) | Op::ClipNonneg(a) => {
                // Subgradient 0 at the kink.
                let ga = self
                    .value(*a)
                    .zip_map(g, "relu_grad", |x, gv| if x > 0.0 { gv } else { 0.0 })?;
                self.accumulate(adj, *a, ga)?;
            }
            Op::AddScalar(a) => self.accumulate(adj, *a, g.clone())?,
            Op::MulScalar(a, c) => self.accumulate(adj, *a, g.mul_scalar(*c))?,
            Op::MaxScalar(a, c) => {
                let c = *c;
                let ga = self
                    .value(*a)
                    .zip_map(g, "max_scalar_grad", |x, gv| if x > c { gv } else { 0.0 })?;
                self.accumulate(adj, *a, ga)?;
            }
            Op::MinScalar(a, c) => {
                let c = *c;
                let ga = self
                    .value(*a)
                    .zip_map(g, "min_scalar_grad", |x, gv| if x < c { gv } else { 0.0 })?;
                self.accumulate(adj, *a, ga)?;
            }
            Op::AddBias(x, bias) => {
                self.accumulate(adj, *x, g.clone())?;
                if self.needs_grad(*bias) {
                    let n = self.value(*bias).len();
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks_exact(n) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(adj, *bias, Tensor::from_parts(vec![n], gb))?;
                }
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(adj, *a, g.reshape(&shape)?)?;
            }
            Op::Sum(a) => {
                let gv = g.item()?;
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(adj, *a, Tensor::full(&shape, gv))?;
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let gv = g.item()? / av.len() as f64;
                self.accumulate(adj, *a, Tensor::full(av.shape(), gv))?;
            }
            Op::SumLastAxis(a) => {
                let shape = self.value(*a).shape().to_vec();
                let n = *shape.last().unwrap_or(&1);
                let data: Vec<f64> = g.data().iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
                self.accumulate(adj, *a, Tensor::from_parts(shape, data))?;
            }
        }
        Ok(())
    }
}

/// `aᵀ · b` for `a: [k×m]`, `b: [k×n]`.
fn transpose_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let ([k, m], [k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::dim("matmul_grad", a.shape(), b.shape()));
    };
    if k != k2 {
        return Err(Error::dim("matmul_grad", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    crate::tensor::gemm(*m, *k, *n, a.data(), true, b.data(), false, &mut out, false);
    Ok(Tensor::from_parts(vec![*m, *n], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let s = g.reduce_sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.reduce_sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.add(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item().unwrap(), 2.0);
    }

    #[test]
    fn non_scalar_root_is_contract_error() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let x = g.variable(Tensor::vector(vec![3.0, 4.0]));
        let p = g.mul(c, x).unwrap();
        let s = g.reduce_sum(p);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_kink_has_zero_subgradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![0.0, 1.0, -1.0]));
        let r = g.clip_nonneg(x);
        let s = g.reduce_sum(r);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }
}
