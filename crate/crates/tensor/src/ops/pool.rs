use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Op, Tape, Var};

fn nchw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match shape {
        [b, c, h, w] => Ok((*b, *c, *h, *w)),
        _ => Err(TensorError::shape(op, format!("input must be [B,C,H,W], got {shape:?}"))),
    }
}

pub(crate) fn maxpool2_backward<T: Scalar>(in_len: usize, argmax: &[usize], g: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); in_len];
    for (src, gv) in argmax.iter().zip(g) {
        dx[*src] += *gv;
    }
    dx
}

pub(crate) fn upsample2_backward<T: Scalar>(in_shape: &[usize], g: &[T]) -> Vec<T> {
    let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let mut dx = vec![T::zero(); b * c * h * w];
    let w2 = 2 * w;
    for plane in 0..b * c {
        let src = &g[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for y in 0..2 * h {
            for x in 0..w2 {
                dst[(y / 2) * w + x / 2] += src[y * w2 + x];
            }
        }
    }
    dx
}

pub(crate) fn global_avg_backward<T: Scalar>(in_shape: &[usize], g: &[T]) -> Vec<T> {
    let hw = in_shape[2] * in_shape[3];
    let inv = T::one() / T::of(hw as f64);
    g.iter().flat_map(|gv| std::iter::repeat_n(*gv * inv, hw)).collect()
}

impl<T: Scalar> Tape<T> {
    /// 2x2 max pooling with stride 2 (odd trailing rows/columns are dropped).
    /// Ties resolve to the first maximum in row-major order.
    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let (b, c, h, w) = nchw("maxpool2x2", self.shape(input))?;
        if h < 2 || w < 2 {
            return Err(TensorError::shape(
                "maxpool2x2",
                format!("spatial size {h}x{w} is smaller than the 2x2 window"),
            ));
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = self.value(input);
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        self.push(vec![b, c, ho, wo], out, Op::MaxPool2 { input, argmax })
    }

    /// Nearest-neighbour upsampling doubling H and W.
    pub fn upsample_nearest2x(&mut self, input: Var) -> Result<Var> {
        let (b, c, h, w) = nchw("upsample_nearest2x", self.shape(input))?;
        let x = self.value(input);
        let mut out = vec![T::zero(); b * c * 4 * h * w];
        for plane in 0..b * c {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        self.push(vec![b, c, 2 * h, 2 * w], out, Op::Upsample2(input))
    }

    /// Mean over H and W, producing `[B,C,1,1]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (b, c, h, w) = nchw("global_avg_pool", self.shape(input))?;
        let hw = h * w;
        let inv = T::one() / T::of(hw as f64);
        let out: Vec<T> = self
            .value(input)
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        self.push(vec![b, c, 1, 1], out, Op::GlobalAvgPool(input))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap().with_grad());
        let y = tape.maxpool2x2(x).unwrap();
        assert_eq!(tape.value(y), &[4.0]);
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_tie_prefers_first_in_row_major() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::new(vec![1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]).unwrap().with_grad());
        let y = tape.maxpool2x2(x).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_doubles_extent() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::new(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
        let y = tape.upsample_nearest2x(x).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 4]);
        assert_eq!(tape.value(y), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn pooling_rejects_tiny_or_wrong_rank_input() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::zeros(vec![1, 1, 1, 4]));
        assert!(tape.maxpool2x2(x).is_err());
        let v = tape.leaf(&Tensor::zeros(vec![4]));
        assert!(tape.upsample_nearest2x(v).is_err());
    }
}
