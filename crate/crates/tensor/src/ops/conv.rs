//! 2-D convolution via im2col + gemm, NCHW layout.

use rayon::prelude::*;

use crate::error::{Result, TensorError};
use crate::scalar::{gemm, Mat, Scalar};
use crate::tape::{Op, Tape, Var};

/// Zero padding added on each side of the spatial axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn uniform(p: usize) -> Self {
        Padding {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    pub fn new(top: usize, bottom: usize, left: usize, right: usize) -> Self {
        Padding {
            top,
            bottom,
            left,
            right,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Conv2dSpec {
            stride,
            padding: Padding::uniform(padding),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: Padding,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], wt: &[usize], bias: Option<&[usize]>, spec: Conv2dSpec) -> Result<Self> {
        let err = |d: String| TensorError::shape("conv2d", d);
        if x.len() != 4 {
            return Err(err(format!("input must be [B,Cin,H,W], got {x:?}")));
        }
        if wt.len() != 4 {
            return Err(err(format!("weight must be [Cout,Cin,kh,kw], got {wt:?}")));
        }
        if spec.stride == 0 {
            return Err(err("stride must be positive".into()));
        }
        let (batch, cin, h, w) = (x[0], x[1], x[2], x[3]);
        let (cout, wcin, kh, kw) = (wt[0], wt[1], wt[2], wt[3]);
        if wcin != cin {
            return Err(err(format!("input has Cin={cin} but weight expects Cin={wcin}")));
        }
        if let Some(b) = bias {
            if b != [cout] {
                return Err(err(format!("bias shape {b:?} does not match Cout={cout}")));
            }
        }
        let hp = h + spec.padding.top + spec.padding.bottom;
        let wp = w + spec.padding.left + spec.padding.right;
        if kh > hp || kw > wp {
            return Err(err(format!(
                "kernel {kh}x{kw} larger than padded input {hp}x{wp} (H={h}, W={w})"
            )));
        }
        Ok(ConvGeom {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride: spec.stride,
            pad: spec.padding,
            ho: (hp - kh) / spec.stride + 1,
            wo: (wp - kw) / spec.stride + 1,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.cout * self.p()
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == Padding::default()
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.ho, self.wo]
    }

    /// Input index feeding output row `o` for kernel offset `k`, or None in the padding.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let i = (o * stride + k) as isize - pad as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                for oy in 0..g.ho {
                    let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    match ConvGeom::src(oy, ki, g.stride, g.pad.top, g.h) {
                        None => dst.iter_mut().for_each(|v| *v = T::zero()),
                        Some(iy) => {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = match ConvGeom::src(ox, kj, g.stride, g.pad.left, g.w) {
                                    Some(ix) => plane[iy * g.w + ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                for oy in 0..g.ho {
                    let Some(iy) = ConvGeom::src(oy, ki, g.stride, g.pad.top, g.h) else {
                        continue;
                    };
                    for ox in 0..g.wo {
                        if let Some(ix) = ConvGeom::src(ox, kj, g.stride, g.pad.left, g.w) {
                            dx[c * g.h * g.w + iy * g.w + ix] += cols[row + oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.out_len()];
    let run = |(b, out_b): (usize, &mut [T])| {
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        let wm = Mat::new(w, g.cout, g.k());
        if g.pointwise() {
            gemm(wm, Mat::new(xb, g.k(), g.p()), T::zero(), out_b);
        } else {
            let mut cols = vec![T::zero(); g.k() * g.p()];
            im2col(g, xb, &mut cols);
            gemm(wm, Mat::new(&cols, g.k(), g.p()), T::zero(), out_b);
        }
        if let Some(bias) = bias {
            for (o, bv) in bias.iter().enumerate() {
                out_b[o * g.p()..(o + 1) * g.p()].iter_mut().for_each(|v| *v += *bv);
            }
        }
    };
    if crate::parallel_enabled() && g.batch > 1 {
        out.par_chunks_mut(g.out_len()).enumerate().for_each(run);
    } else {
        out.chunks_mut(g.out_len()).enumerate().for_each(run);
    }
    out
}

type ConvGrads<T> = (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>);

/// Per-sample partial weight/bias gradients are always summed in batch order,
/// so the serial and parallel paths are bitwise identical.
pub(crate) fn backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let (k, p) = (g.k(), g.p());
    let per_sample = |b: usize| -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        let dyb = &dy[b * g.out_len()..(b + 1) * g.out_len()];
        let dym = Mat::new(dyb, g.cout, p);
        let cols_owned;
        let cols: &[T] = if g.pointwise() {
            xb
        } else if need_dw {
            let mut c = vec![T::zero(); k * p];
            im2col(g, xb, &mut c);
            cols_owned = c;
            &cols_owned
        } else {
            &[]
        };
        let dw = need_dw.then(|| {
            let mut dw = vec![T::zero(); g.cout * k];
            gemm(dym, Mat::new(cols, k, p).t(), T::zero(), &mut dw);
            dw
        });
        let db = need_db.then(|| {
            (0..g.cout)
                .map(|o| dyb[o * p..(o + 1) * p].iter().copied().sum())
                .collect::<Vec<T>>()
        });
        let dx = need_dx.then(|| {
            let wt = Mat::new(w, g.cout, k).t();
            if g.pointwise() {
                let mut dx = vec![T::zero(); g.in_len()];
                gemm(wt, dym, T::zero(), &mut dx);
                dx
            } else {
                let mut dcols = vec![T::zero(); k * p];
                gemm(wt, dym, T::zero(), &mut dcols);
                let mut dx = vec![T::zero(); g.in_len()];
                col2im(g, &dcols, &mut dx);
                dx
            }
        });
        (dx, dw, db)
    };
    let parts: Vec<_> = if crate::parallel_enabled() && g.batch > 1 {
        (0..g.batch).into_par_iter().map(per_sample).collect()
    } else {
        (0..g.batch).map(per_sample).collect()
    };

    let mut dx = need_dx.then(|| Vec::with_capacity(x.len()));
    let mut dw: Option<Vec<T>> = None;
    let mut db: Option<Vec<T>> = None;
    for (pdx, pdw, pdb) in parts {
        if let (Some(acc), Some(v)) = (dx.as_mut(), pdx) {
            acc.extend_from_slice(&v);
        }
        sum_into(&mut dw, pdw);
        sum_into(&mut db, pdb);
    }
    (dx, dw, db)
}

fn sum_into<T: Scalar>(acc: &mut Option<Vec<T>>, part: Option<Vec<T>>) {
    match (acc.as_mut(), part) {
        (Some(a), Some(p)) => a.iter_mut().zip(p).for_each(|(a, p)| *a += p),
        (None, Some(p)) => *acc = Some(p),
        _ => {}
    }
}

impl<T: Scalar> Tape<T> {
    /// `input [B,Cin,H,W]`, `weight [Cout,Cin,kh,kw]`, optional `bias [Cout]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let geom = ConvGeom::new(
            self.shape(input),
            self.shape(weight),
            bias.map(|b| self.shape(b)),
            spec,
        )?;
        let value = forward(
            &geom,
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        );
        self.push(
            geom.out_shape(),
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn run(x: Tensor<f64>, w: Tensor<f64>, spec: Conv2dSpec) -> Tensor<f64> {
        let mut tape = Tape::new();
        let (xv, wv) = (tape.leaf(&x), tape.leaf(&w));
        let y = tape.conv2d(xv, wv, None, spec).unwrap();
        tape.tensor(y)
    }

    #[test]
    fn ones_kernel_sums_window() {
        let y = run(
            Tensor::full(vec![1, 1, 3, 3], 1.0),
            Tensor::full(vec![1, 1, 2, 2], 1.0),
            Conv2dSpec::new(1, 0),
        );
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn identity_kernel_copies_input() {
        let x = Tensor::new(vec![2, 1, 3, 2], (0..12).map(|v| v as f64 - 3.5).collect()).unwrap();
        let y = run(x.clone(), Tensor::full(vec![1, 1, 1, 1], 1.0), Conv2dSpec::new(1, 0));
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn output_extent_formula() {
        let spec = Conv2dSpec {
            stride: 2,
            padding: Padding::new(1, 0, 2, 1),
        };
        let g = ConvGeom::new(&[1, 3, 9, 8], &[4, 3, 3, 3], None, spec).unwrap();
        assert_eq!((g.ho, g.wo), ((9 + 1 - 3) / 2 + 1, (8 + 3 - 3) / 2 + 1));
    }

    #[test]
    fn mismatched_channels_name_dimensions() {
        let err = ConvGeom::new(&[1, 3, 8, 8], &[4, 2, 3, 3], None, Conv2dSpec::new(1, 1)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("Cin=3") && msg.contains("Cin=2"), "{msg}");
        assert!(ConvGeom::new(&[1, 1, 2, 2], &[1, 1, 3, 3], None, Conv2dSpec::new(1, 0)).is_err());
        assert!(ConvGeom::new(&[1, 1, 2, 2], &[1, 1, 3, 3], Some(&[2]), Conv2dSpec::new(1, 1)).is_err());
    }
}
