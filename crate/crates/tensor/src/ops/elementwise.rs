use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Op, Tape, Var};
use crate::tensor::check_shape;

pub(crate) fn relu_backward<T: Scalar>(x: &[T], g: &[T]) -> Vec<T> {
    x.iter()
        .zip(g)
        .map(|(x, g)| if *x > T::zero() { *g } else { T::zero() })
        .collect()
}

/// Splits a gradient of a channel concatenation back into its parts.
pub(crate) fn concat_backward<T: Scalar>(shapes: &[&[usize]], g: &[T]) -> Vec<Vec<T>> {
    let b = shapes[0][0];
    let hw = shapes[0][2] * shapes[0][3];
    let total_c: usize = shapes.iter().map(|s| s[1]).sum();
    let mut parts: Vec<Vec<T>> = shapes.iter().map(|s| Vec::with_capacity(s.iter().product())).collect();
    for bi in 0..b {
        let mut c0 = 0;
        for (part, s) in parts.iter_mut().zip(shapes) {
            let start = (bi * total_c + c0) * hw;
            part.extend_from_slice(&g[start..start + s[1] * hw]);
            c0 += s[1];
        }
    }
    parts
}

impl<T: Scalar> Tape<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .iter()
            .map(|v| if *v > T::zero() { *v } else { T::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Add(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x * *y).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let c = T::of(factor);
        let out = self.value(x).iter().map(|v| *v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale(x, c))
    }

    /// Concatenates `[B,Ci,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(first) = xs.first() else {
            return Err(TensorError::shape("concat_channels", "no inputs"));
        };
        let s0 = self.shape(*first).to_vec();
        if s0.len() != 4 {
            return Err(TensorError::shape(
                "concat_channels",
                format!("inputs must be [B,C,H,W], got {s0:?}"),
            ));
        }
        for x in xs {
            let s = self.shape(*x);
            if s.len() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3] {
                return Err(TensorError::shape(
                    "concat_channels",
                    format!("shape {s:?} incompatible with {s0:?}"),
                ));
            }
        }
        let hw = s0[2] * s0[3];
        let total_c: usize = xs.iter().map(|x| self.shape(*x)[1]).sum();
        let mut out = Vec::with_capacity(s0[0] * total_c * hw);
        for bi in 0..s0[0] {
            for x in xs {
                let c = self.shape(*x)[1];
                out.extend_from_slice(&self.value(*x)[bi * c * hw..(bi + 1) * c * hw]);
            }
        }
        self.push(vec![s0[0], total_c, s0[2], s0[3]], out, Op::Concat(xs.to_vec()))
    }

    /// Mean of squared differences over all elements; returns shape `[1]`.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse_loss", pred, target)?;
        let n = T::of(self.value(pred).len() as f64);
        let s: T = self
            .value(pred)
            .iter()
            .zip(self.value(target))
            .map(|(x, y)| (*x - *y) * (*x - *y))
            .sum();
        self.push(vec![1], vec![s / n], Op::Mse(pred, target))
    }

    /// Sum of all elements; returns shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum(x))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        check_shape(&shape, self.value(x).len()).map_err(|e| TensorError::shape("reshape", e.to_string()))?;
        let out = self.value(x).to_vec();
        self.push(shape, out, Op::Reshape(x))
    }
}
