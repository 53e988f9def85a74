//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to run its backward rule. Inputs always precede outputs, so a single
//! reverse sweep over the node list visits each operation once in reverse
//! record order.

use crate::error::{Result, TensorError};
use crate::ops::conv::{self, ConvGeom};
use crate::ops::{elementwise, norm, pool};
use crate::scalar::Scalar;
use crate::tensor::{check_shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Arguments handed to the backward rule of a [`Tape::custom`] op.
pub struct CustomArgs<'a, T> {
    pub inputs: Vec<&'a [T]>,
    pub output: &'a [T],
    pub upstream: &'a [T],
}

pub type CustomBackward<T> = Box<dyn Fn(&CustomArgs<'_, T>) -> Vec<Vec<T>>>;

pub(crate) enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat(Vec<Var>),
    Mse(Var, Var),
    Sum(Var),
    GlobalAvgPool(Var),
    Reshape(Var),
    Custom {
        name: &'static str,
        inputs: Vec<Var>,
        backward: CustomBackward<T>,
    },
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Relu(_) => "relu",
            Op::MaxPool2 { .. } => "maxpool2x2",
            Op::Upsample2(_) => "upsample_nearest2x",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Concat(_) => "concat_channels",
            Op::Mse(..) => "mse_loss",
            Op::Sum(_) => "sum",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Reshape(_) => "reshape",
            Op::Custom { name, .. } => name,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, weight, bias, ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias.iter().copied());
                v
            }
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Relu(x)
            | Op::Upsample2(x)
            | Op::Scale(x, _)
            | Op::Sum(x)
            | Op::GlobalAvgPool(x)
            | Op::Reshape(x) => vec![*x],
            Op::MaxPool2 { input, .. } => vec![*input],
            Op::Add(a, b) | Op::Mul(a, b) | Op::Mse(a, b) => vec![*a, *b],
            Op::Concat(xs) => xs.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

pub(crate) struct Node<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Ordered record of the operations of one forward pass.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a copy of `t`; the leaf requires grad iff `t` does.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf from raw parts.
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>, requires_grad: bool) -> Result<Var> {
        let shape = shape.into();
        check_shape(&shape, data.len())?;
        self.nodes.push(Node {
            shape,
            value: data,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape")
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an operation with a caller-supplied backward rule.
    ///
    /// The rule receives the input values, the output value and the upstream
    /// gradient, and returns one gradient per input (same lengths as inputs).
    pub fn custom(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        shape: Vec<usize>,
        value: Vec<T>,
        backward: CustomBackward<T>,
    ) -> Result<Var> {
        check_shape(&shape, value.len())?;
        self.push(
            shape,
            value,
            Op::Custom {
                name,
                inputs: inputs.to_vec(),
                backward,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = &self.nodes[loss.0].shape;
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: node.op.name() });
            }
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (dx, dw, db) = conv::backward(
                    geom,
                    self.value(*input),
                    self.value(*weight),
                    g,
                    self.wants(*input),
                    self.wants(*weight),
                    bias.map(|b| self.wants(b)).unwrap_or(false),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *input, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *weight, dw);
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    accumulate(grads, *b, db);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let r = norm::backward(
                    &node.shape,
                    g,
                    xhat,
                    inv_std,
                    self.value(*gamma),
                    *train,
                );
                if self.wants(*input) {
                    accumulate(grads, *input, r.dx);
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, r.dgamma);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, r.dbeta);
                }
            }
            Op::Relu(x) => {
                let dx = elementwise::relu_backward(self.value(*x), g);
                accumulate(grads, *x, dx);
            }
            Op::MaxPool2 { input, argmax } => {
                let dx = pool::maxpool2_backward(self.nodes[input.0].value.len(), argmax, g);
                accumulate(grads, *input, dx);
            }
            Op::Upsample2(x) => {
                let dx = pool::upsample2_backward(self.shape(*x), g);
                accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    accumulate(grads, *a, g.iter().zip(vb).map(|(g, b)| *g * *b).collect());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.iter().zip(va).map(|(g, a)| *g * *a).collect());
                }
            }
            Op::Scale(x, c) => {
                accumulate(grads, *x, g.iter().map(|g| *g * *c).collect());
            }
            Op::Concat(xs) => {
                let shapes: Vec<&[usize]> = xs.iter().map(|x| self.shape(*x)).collect();
                let parts = elementwise::concat_backward(&shapes, g);
                for (x, dx) in xs.iter().zip(parts) {
                    if self.wants(*x) {
                        accumulate(grads, *x, dx);
                    }
                }
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let n = T::of(va.len() as f64);
                let two = T::of(2.0);
                let upstream = g[0];
                let d: Vec<T> = va
                    .iter()
                    .zip(vb)
                    .map(|(x, y)| upstream * (two * (*x - *y) / n))
                    .collect();
                if self.wants(*b) {
                    accumulate(grads, *b, d.iter().map(|v| -*v).collect());
                }
                if self.wants(*a) {
                    accumulate(grads, *a, d);
                }
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.len();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::GlobalAvgPool(x) => {
                let dx = pool::global_avg_backward(self.shape(*x), g);
                accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
            Op::Custom {
                inputs, backward, ..
            } => {
                let args = CustomArgs {
                    inputs: inputs.iter().map(|v| self.value(*v)).collect(),
                    output: &node.value,
                    upstream: g,
                };
                let dxs = backward(&args);
                for (x, dx) in inputs.iter().zip(dxs) {
                    if self.wants(*x) {
                        accumulate(grads, *x, dx);
                    }
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(&contribution) {
                *e += *c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

/// Gradients produced by one [`Tape::backward`] sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `t.grad` (accumulating across calls).
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor<T>) {
        if let Some(g) = self.get(v) {
            t.accumulate_grad(g);
        }
    }
}
