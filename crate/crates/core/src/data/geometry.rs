use serde::{Deserialize, Serialize};

use crate::codec::LandmarkSet;
use crate::error::{CoreError, Result};

/// Axis-aligned box: top-left corner and size, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BoundingBox { x, y, w, h }
    }

    /// The box whose crop at margin 0 reproduces a `width x height` image.
    pub fn image_extent(width: usize, height: usize) -> Self {
        BoundingBox::new(-0.5, -0.5, width as f64, height as f64)
    }

    /// Normalizer `sqrt(w * h)`.
    pub fn d(&self) -> f64 {
        (self.w * self.h).sqrt()
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.w > 0.0 && self.h > 0.0 && self.w.is_finite() && self.h.is_finite())
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoundingBox::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }
}

/// Tight rectangle over the visible landmarks.
pub fn bbox_from_landmarks(landmarks: &LandmarkSet) -> Result<BoundingBox> {
    let mut it = (0..landmarks.len())
        .filter(|&k| landmarks.is_visible(k))
        .map(|k| landmarks.xy(k));
    let (x0, y0) = it.next().ok_or(CoreError::EmptySample)?;
    let (mut lx, mut ly, mut hx, mut hy) = (x0, y0, x0, y0);
    for (x, y) in it {
        lx = lx.min(x);
        ly = ly.min(y);
        hx = hx.max(x);
        hy = hy.max(y);
    }
    Ok(BoundingBox::new(lx, ly, hx - lx, hy - ly))
}

/// Similarity transform `p' = A p + t` with `A = [[a, -b], [b, a]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        a: 1.0,
        b: 0.0,
        tx: 0.0,
        ty: 0.0,
    };

    /// Rotation by `theta` radians and uniform `scale` about `(cx, cy)`.
    pub fn about(cx: f64, cy: f64, theta: f64, scale: f64) -> Self {
        let (a, b) = (scale * theta.cos(), scale * theta.sin());
        Affine {
            a,
            b,
            tx: cx - (a * cx - b * cy),
            ty: cy - (b * cx + a * cy),
        }
    }

    /// Maps `(p - c) * s + o`.
    pub fn scale_translate(c: (f64, f64), s: f64, o: (f64, f64)) -> Self {
        Affine {
            a: s,
            b: 0.0,
            tx: o.0 - s * c.0,
            ty: o.1 - s * c.1,
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.a * x - self.b * y + self.tx, self.b * x + self.a * y + self.ty)
    }

    pub fn scale(&self) -> f64 {
        self.a.hypot(self.b)
    }

    pub fn inverse(&self) -> Affine {
        let det = self.a * self.a + self.b * self.b;
        let (a, b) = (self.a / det, -self.b / det);
        Affine {
            a,
            b,
            tx: -(a * self.tx - b * self.ty),
            ty: -(b * self.tx + a * self.ty),
        }
    }

    /// `self` after `first`.
    pub fn compose(&self, first: &Affine) -> Affine {
        let (tx, ty) = self.apply(first.tx, first.ty);
        Affine {
            a: self.a * first.a - self.b * first.b,
            b: self.b * first.a + self.a * first.b,
            tx,
            ty,
        }
    }

    pub fn map_landmarks(&self, l: &LandmarkSet) -> LandmarkSet {
        l.map(self.scale(), |x, y| self.apply(x, y))
    }

    /// Box around the mapped corners of `bbox`.
    pub fn map_bbox(&self, bbox: &BoundingBox) -> BoundingBox {
        let (cx, cy) = self.apply(bbox.center().0, bbox.center().1);
        let s = self.scale();
        BoundingBox::from_center(cx, cy, bbox.w * s, bbox.h * s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tight_box() {
        let b = bbox_from_landmarks(&LandmarkSet::new_2d(&[(0.0, 0.0), (8.0, 2.0)])).unwrap();
        assert_eq!((b.w, b.h, b.d()), (8.0, 2.0, 4.0));
        let single = bbox_from_landmarks(&LandmarkSet::new_2d(&[(3.0, 3.0)])).unwrap();
        assert_eq!(single.d(), 0.0);
        assert!(matches!(
            bbox_from_landmarks(&LandmarkSet::invisible(3)),
            Err(CoreError::EmptySample)
        ));
    }

    #[test]
    fn invisible_points_are_ignored() {
        let mut l = LandmarkSet::new_2d(&[(1.0, 1.0), (5.0, 7.0)]);
        l.points.push([-1.0, -1.0, 0.0]);
        let b = bbox_from_landmarks(&l).unwrap();
        assert_eq!((b.x, b.y, b.w, b.h), (1.0, 1.0, 4.0, 6.0));
    }

    proptest! {
        #[test]
        fn matches_brute_force(pts in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..40)) {
            let b = bbox_from_landmarks(&LandmarkSet::new_2d(&pts)).unwrap();
            let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
            let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(b.x, min(&xs));
            prop_assert_eq!(b.y, min(&ys));
            prop_assert_eq!(b.w, max(&xs) - min(&xs));
            prop_assert_eq!(b.h, max(&ys) - min(&ys));
        }

        #[test]
        fn inverse_round_trip(theta in -3.0f64..3.0, s in 0.2f64..5.0, cx in -50.0f64..50.0,
                              cy in -50.0f64..50.0, x in -100.0f64..100.0, y in -100.0f64..100.0) {
            let t = Affine::about(cx, cy, theta, s);
            let (u, v) = t.apply(x, y);
            let (bx, by) = t.inverse().apply(u, v);
            prop_assert!((bx - x).abs() < 1e-9 && (by - y).abs() < 1e-9);
            let id = t.inverse().compose(&t);
            let (ix, iy) = id.apply(x, y);
            prop_assert!((ix - x).abs() < 1e-9 && (iy - y).abs() < 1e-9);
        }
    }
}
