//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive appends one node holding its forward value and whatever it
//! needs for the backward rule. Parents always precede children, so a single
//! reverse sweep over the node list visits each node exactly once after all
//! of its consumers have contributed to its gradient.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

/// Backward bookkeeping for each primitive.
pub(crate) enum Op<T> {
    Leaf,
    Add { a: Var, b: Var, bcast: Option<(Vec<usize>, Vec<usize>)> },
    Sub { a: Var, b: Var, bcast: Option<(Vec<usize>, Vec<usize>)> },
    Mul { a: Var, b: Var, bcast: Option<(Vec<usize>, Vec<usize>)> },
    Scale { x: Var, s: T },
    Shift { x: Var },
    Relu { x: Var },
    LeakyRelu { x: Var, slope: T },
    Sigmoid { x: Var },
    Matmul(super::linalg::MatmulSaved),
    Permute { x: Var, axes: Vec<usize> },
    Reshape { x: Var },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Sum { x: Var, axis: usize },
    Mean { x: Var, axis: usize },
    SumAll { x: Var },
    Softmax { x: Var, axis: usize },
    Conv1d(super::conv::Conv1dSaved),
    Conv2d(super::conv::Conv2dSaved),
    MaxPool1d { x: Var, argmax: Vec<usize> },
    BatchNorm(super::norm::BatchNormSaved<T>),
    LayerNorm(super::norm::LayerNormSaved<T>),
    Dropout { x: Var, mask: Vec<T> },
    Mse { a: Var, b: Var, batch: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Difference { x: Var, axis: usize, k: usize },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Vec<T>>,
}

/// Pending update of a non-trainable buffer (batch-norm running statistics)
/// produced by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BufferUpdate<T> {
    pub name: String,
    pub value: Vec<T>,
}

pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    mode: Mode,
    backward_done: bool,
    pub(crate) rng: ChaCha8Rng,
    params: Vec<(String, Var)>,
    touched: BTreeSet<String>,
    buffer_updates: Vec<BufferUpdate<T>>,
    kink_tracking: bool,
    kink_signature: u64,
}

impl<T: Scalar> Tape<T> {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            mode,
            backward_done: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
            touched: BTreeSet::new(),
            buffer_updates: Vec::new(),
            kink_tracking: false,
            kink_signature: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a named parameter from `store` as a leaf. Trainable entries
    /// require gradients; buffers are constants.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let entry = store.entry(name)?;
        self.touched.insert(name.to_string());
        let var = self.push(entry.value.clone(), Op::Leaf, entry.trainable);
        if entry.trainable {
            self.params.push((name.to_string(), var));
        }
        Ok(var)
    }

    /// Copies `x` into a fresh constant: the result carries the same value but
    /// blocks gradient flow into `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let shape = self.shape(v).to_vec();
        self.grad(v).map(|g| Tensor::new(shape, g.to_vec()).expect("grad shape"))
    }

    /// Parameters registered through [`Tape::param`], in registration order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// Every stored tensor read through [`Tape::param`], buffers included.
    pub fn touched(&self) -> &BTreeSet<String> {
        &self.touched
    }

    pub(crate) fn record_buffer_update(&mut self, name: String, value: Vec<T>) {
        self.buffer_updates.push(BufferUpdate { name, value });
    }

    pub fn take_buffer_updates(&mut self) -> Vec<BufferUpdate<T>> {
        std::mem::take(&mut self.buffer_updates)
    }

    /// Enables hashing of every piecewise-linear branch decision (relu masks,
    /// pooling argmax). Two forward passes with equal signatures took the
    /// same linear piece everywhere.
    pub fn track_kinks(&mut self, on: bool) {
        self.kink_tracking = on;
    }

    pub fn kink_signature(&self) -> u64 {
        self.kink_signature
    }

    pub(crate) fn kinks_on(&self) -> bool {
        self.kink_tracking
    }

    pub(crate) fn mix_kinks(&mut self, bits: impl Iterator<Item = u64>) {
        if !self.kink_tracking {
            return;
        }
        let mut h = self.kink_signature;
        for b in bits {
            h ^= b.wrapping_add(0x9e37_79b9_7f4a_7c15);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        self.kink_signature = h;
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Propagates d(loss)/d(node) to every ancestor that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract("backward", "tape already consumed; re-run the forward pass"));
        }
        if self.nodes.is_empty() {
            return Err(Error::contract("backward", "empty tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            if !g.iter().all(|x| x.is_finite()) {
                return Err(Error::Numeric { location: format!("gradient of node {i}") });
            }
            let contributions = self.node_backward(i, &g);
            self.nodes[i].grad = Some(g);
            for (parent, delta) in contributions {
                let node = &mut self.nodes[parent.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(&delta) {
                            *a += *d;
                        }
                    }
                    None => node.grad = Some(delta),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        use super::{conv, elementwise as ew, linalg, loss, norm, temporal};
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add { a, b, bcast } => ew::add_backward(self, *a, *b, bcast.as_ref(), g),
            Op::Sub { a, b, bcast } => ew::sub_backward(self, *a, *b, bcast.as_ref(), g),
            Op::Mul { a, b, bcast } => ew::mul_backward(self, *a, *b, bcast.as_ref(), g),
            Op::Scale { x, s } => vec![(*x, g.iter().map(|&d| d * *s).collect())],
            Op::Shift { x } => vec![(*x, g.to_vec())],
            Op::Relu { x } => ew::relu_backward(self, *x, g),
            Op::LeakyRelu { x, slope } => ew::leaky_relu_backward(self, *x, *slope, g),
            Op::Sigmoid { x } => ew::sigmoid_backward(&node.value, *x, g),
            Op::Matmul(saved) => linalg::matmul_backward(self, saved, g),
            Op::Permute { x, axes } => linalg::permute_backward(self, *x, axes, g),
            Op::Reshape { x } => vec![(*x, g.to_vec())],
            Op::Concat { xs, axis } => linalg::concat_backward(self, xs, *axis, g),
            Op::Slice { x, axis, start } => {
                linalg::slice_backward(self, *x, *axis, *start, node.value.shape(), g)
            }
            Op::Sum { x, axis } => linalg::sum_backward(self, *x, *axis, g, false),
            Op::Mean { x, axis } => linalg::sum_backward(self, *x, *axis, g, true),
            Op::SumAll { x } => vec![(*x, vec![g[0]; self.value(*x).len()])],
            Op::Softmax { x, axis } => norm::softmax_backward(&node.value, *x, *axis, g),
            Op::Conv1d(saved) => conv::conv1d_backward(self, saved, g),
            Op::Conv2d(saved) => conv::conv2d_backward(self, saved, g),
            Op::MaxPool1d { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&src, &d) in argmax.iter().zip(g) {
                    dx[src] += d;
                }
                vec![(*x, dx)]
            }
            Op::BatchNorm(saved) => norm::batchnorm_backward(self, saved, g),
            Op::LayerNorm(saved) => norm::layernorm_backward(self, saved, g),
            Op::Dropout { x, mask } => {
                vec![(*x, g.iter().zip(mask).map(|(&d, &m)| d * m).collect())]
            }
            Op::Mse { a, b, batch } => loss::mse_backward(self, *a, *b, *batch, g[0]),
            Op::CrossEntropy { logits, labels, probs } => {
                loss::cross_entropy_backward(*logits, labels, probs, g[0])
            }
            Op::Difference { x, axis, k } => temporal::difference_backward(self, *x, *axis, *k, g),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new(Mode::Eval, 0);
        let x = tape.leaf(Tensor::from_f64([3], &[1.0, -2.0, 0.5]).unwrap());
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn constant_leaf_has_no_grad() {
        let mut tape = Tape::<f64>::new(Mode::Eval, 0);
        let c = tape.constant(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
        let x = tape.leaf(Tensor::from_f64([2], &[3.0, 4.0]).unwrap());
        let p = tape.mul(c, x).unwrap();
        let s = tape.sum_all(p);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn mse_against_zero_gradient() {
        let mut tape = Tape::<f64>::new(Mode::Eval, 0);
        let x = tape.leaf(Tensor::from_f64([1], &[2.0]).unwrap());
        let z = tape.constant(Tensor::zeros([1]));
        let l = tape.mse(x, z).unwrap();
        assert_eq!(tape.value(l).data(), &[4.0]);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn second_backward_rejected() {
        let mut tape = Tape::<f64>::new(Mode::Eval, 0);
        let x = tape.leaf(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Contract { .. })));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new(Mode::Eval, 0);
        let x = tape.leaf(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::Contract { .. })));
    }

    #[test]
    fn shared_input_accumulates() {
        // d/dx (x*x + x) = 2x + 1
        let mut tape = Tape::<f64>::new(Mode::Eval, 0);
        let x = tape.leaf(Tensor::from_f64([1], &[3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[7.0]);
    }
}
