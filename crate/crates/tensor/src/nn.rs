//! Layer building blocks that keep their weights in a [`ParamStore`] and
//! record their forward pass on a [`Graph`].

use std::collections::HashMap;

use rand::Rng;

use crate::error::Result;
use crate::ops::conv::{Conv2dSpec, Padding};
use crate::ops::norm::{BnMode, RunningStats, DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, parameters require grad.
    Train,
    /// Running statistics, nothing requires grad.
    Eval,
}

/// One forward pass: a tape plus lazily bound parameters.
pub struct Graph<'s, T: Scalar> {
    pub tape: Tape<T>,
    store: &'s mut ParamStore<T>,
    bound: HashMap<ParamId, Var>,
    mode: Mode,
}

impl<'s, T: Scalar> Graph<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, mode: Mode) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
            mode,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Tape variable for a stored parameter, recorded once per graph.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let t = self.store.get(id);
        let requires_grad = self.mode == Mode::Train && t.requires_grad();
        let v = self
            .tape
            .constant(t.shape().to_vec(), t.data().to_vec(), requires_grad)
            .expect("stored tensors are well formed");
        self.bound.insert(id, v);
        v
    }

    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.tape.leaf(t)
    }

    /// Runs the reverse sweep and accumulates into the stored gradients.
    pub fn backward(self, loss: Var) -> Result<()> {
        let grads = self.tape.backward(loss)?;
        for (id, var) in &self.bound {
            grads.accumulate_into(*var, self.store.get_mut(*id));
        }
        Ok(())
    }

    fn batchnorm(&mut self, bn: &BatchNorm2d, x: Var) -> Result<Var> {
        let (g, b) = (self.param(bn.gamma), self.param(bn.beta));
        let mut stats = RunningStats {
            mean: self.store.get(bn.running_mean).data().to_vec(),
            var: self.store.get(bn.running_var).data().to_vec(),
        };
        let mode = match self.mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval,
        };
        let y = self
            .tape
            .batchnorm2d(x, g, b, &mut stats, mode, bn.momentum, bn.eps)?;
        if mode == BnMode::Train {
            self.store.get_mut(bn.running_mean).data_mut().copy_from_slice(&stats.mean);
            self.store.get_mut(bn.running_var).data_mut().copy_from_slice(&stats.var);
        }
        Ok(y)
    }
}

/// Gain on the `1/sqrt(fan_in)` bound of the uniform weight init.
pub const INIT_GAIN: f64 = 0.1;

/// Convolution weights are drawn from `U(-g/sqrt(fan_in), g/sqrt(fan_in))`
/// with `g = INIT_GAIN`; biases start at zero.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = INIT_GAIN / ((in_channels * kernel * kernel) as f64).sqrt();
        let w = Tensor::uniform(vec![out_channels, in_channels, kernel, kernel], -bound, bound, rng);
        let weight = store.add_param(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add_param(format!("{name}.bias"), Tensor::zeros(vec![out_channels])));
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            spec: Conv2dSpec {
                stride,
                padding: Padding::uniform(padding),
            },
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.tape.conv2d(x, w, b, self.spec)
    }

    pub fn num_params(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel * self.kernel
            + if self.bias.is_some() { self.out_channels } else { 0 }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: store.add_param(format!("{name}.gamma"), Tensor::full(vec![channels], T::one())),
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros(vec![channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(vec![channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(vec![channels], T::one())),
            channels,
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        g.batchnorm(self, x)
    }

    /// Batchnorm followed by relu.
    pub fn forward_relu<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = g.batchnorm(self, x)?;
        g.tape.relu(y)
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }
}
