//! Per-channel batch normalisation over `[B,C,H,W]`.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Op, Tape, Var};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running mean and (unbiased) variance tracked in train mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

fn dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [b, c, h, w] => Ok((*b, *c, h * w)),
        _ => Err(TensorError::shape(
            "batchnorm2d",
            format!("input must be [B,C,H,W], got {shape:?}"),
        )),
    }
}

pub(crate) struct BnGrads<T> {
    pub dx: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

pub(crate) fn backward<T: Scalar>(
    shape: &[usize],
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    train: bool,
) -> BnGrads<T> {
    let (b, c, hw) = dims(shape).expect("recorded shape");
    let m = T::of((b * hw) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for bi in 0..b {
        for ch in 0..c {
            let o = (bi * c + ch) * hw;
            for i in o..o + hw {
                dgamma[ch] += dy[i] * xhat[i];
                dbeta[ch] += dy[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for bi in 0..b {
        for ch in 0..c {
            let o = (bi * c + ch) * hw;
            let scale = gamma[ch] * inv_std[ch];
            for i in o..o + hw {
                dx[i] = if train {
                    scale / m * (m * dy[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                } else {
                    scale * dy[i]
                };
            }
        }
    }
    BnGrads { dx, dgamma, dbeta }
}

impl<T: Scalar> Tape<T> {
    /// Batch normalisation. In train mode the batch statistics normalise the
    /// input and `stats` is updated with `momentum`; in eval mode `stats` is used.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: BnMode,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let (b, c, hw) = dims(self.shape(input))?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(TensorError::shape(
                    "batchnorm2d",
                    format!("{name} shape {:?} does not match C={c}", self.shape(v)),
                ));
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(TensorError::shape(
                "batchnorm2d",
                format!("running stats have {} channels, input has {c}", stats.mean.len()),
            ));
        }
        let m = b * hw;
        if mode == BnMode::Train && m < 2 {
            return Err(TensorError::InvalidBatch(m));
        }
        let x = self.value(input);
        let eps_t = T::of(eps);

        let (mean, var) = match mode {
            BnMode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let o = (bi * c + ch) * hw;
                        mean[ch] += x[o..o + hw].iter().copied().sum::<T>();
                    }
                }
                let mt = T::of(m as f64);
                mean.iter_mut().for_each(|v| *v /= mt);
                for bi in 0..b {
                    for ch in 0..c {
                        let o = (bi * c + ch) * hw;
                        var[ch] += x[o..o + hw]
                            .iter()
                            .map(|v| (*v - mean[ch]) * (*v - mean[ch]))
                            .sum::<T>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= mt);
                (mean, var)
            }
            BnMode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps_t).sqrt()).collect();
        let (g, bt) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let o = (bi * c + ch) * hw;
                for i in o..o + hw {
                    xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                    y[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }

        if mode == BnMode::Train {
            let mom = T::of(momentum);
            let unbias = T::of(m as f64 / (m - 1) as f64);
            for ch in 0..c {
                stats.mean[ch] = (T::one() - mom) * stats.mean[ch] + mom * mean[ch];
                stats.var[ch] = (T::one() - mom) * stats.var[ch] + mom * var[ch] * unbias;
            }
        }
        let shape = self.shape(input).to_vec();
        self.push(
            shape,
            y,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == BnMode::Train,
            },
        )
    }
}
