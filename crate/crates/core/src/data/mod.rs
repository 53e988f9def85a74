//! Samples, file formats, cropping, augmentation, ablation perturbations
//! and the synthetic face generator.

pub mod augment;
pub mod flip;
pub mod geometry;
pub mod image;
pub mod manifest;
pub mod pts;
pub mod synth;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use self::geometry::{bbox_from_landmarks, Affine, BoundingBox};
pub use self::image::Image;
use crate::codec::LandmarkSet;
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    /// 3D when a depth sidecar is present.
    pub landmarks: LandmarkSet,
    pub bbox: BoundingBox,
    pub yaw: Option<f64>,
    pub id: String,
}

impl Sample {
    /// `bbox` defaults to the tight box around the visible landmarks.
    pub fn new(
        image: Image,
        landmarks: LandmarkSet,
        bbox: Option<BoundingBox>,
        yaw: Option<f64>,
        id: impl Into<String>,
    ) -> Result<Self> {
        let bbox = match bbox {
            Some(b) => b,
            None => bbox_from_landmarks(&landmarks)?,
        };
        Ok(Sample {
            image,
            landmarks,
            bbox,
            yaw,
            id: id.into(),
        })
    }
}

/// Maps the margin-expanded square around `bbox` onto an
/// `out_resolution` square. The returned affine takes original pixel
/// coordinates to the crop; the crop's `bbox` is the sample's own box
/// carried through the same transform.
pub fn crop_and_resize(sample: &Sample, bbox: &BoundingBox, out_resolution: usize, margin: f64) -> Result<(Sample, Affine)> {
    if bbox.is_degenerate() || !bbox.x.is_finite() || !bbox.y.is_finite() {
        return Err(CoreError::DegenerateBbox { w: bbox.w, h: bbox.h });
    }
    let side = bbox.w.max(bbox.h) * (1.0 + 2.0 * margin);
    let s = out_resolution as f64 / side;
    let o = (out_resolution as f64 - 1.0) / 2.0;
    let t = Affine::scale_translate(bbox.center(), s, (o, o));
    let inv = t.inverse();
    let image = sample
        .image
        .warp(out_resolution, out_resolution, |x, y| inv.apply(x, y));
    Ok((
        Sample {
            image,
            landmarks: t.map_landmarks(&sample.landmarks),
            bbox: t.map_bbox(&sample.bbox),
            yaw: sample.yaw,
            id: sample.id.clone(),
        },
        t,
    ))
}

/// Shifts the centre by up to `p * d` per axis and rescales by a factor in
/// `[1 - p, 1 + p]`, all uniform.
pub fn perturb_bbox(bbox: &BoundingBox, p: f64, seed: u64) -> BoundingBox {
    assert!((0.0..1.0).contains(&p), "noise level must lie in [0, 1)");
    if p == 0.0 {
        return *bbox;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = bbox.d();
    let (cx, cy) = bbox.center();
    let dx = rng.random_range(-p * d..=p * d);
    let dy = rng.random_range(-p * d..=p * d);
    let s = rng.random_range(1.0 - p..=1.0 + p);
    BoundingBox::from_center(cx + dx, cy + dy, bbox.w * s, bbox.h * s)
}

/// Loses detail as if the face had been captured at `target_face_px`
/// (measured as `sqrt(w * h)` of its box): area-downsample, then bilinear
/// upsample back to the original size. Landmarks are untouched. Targets at
/// or above the current face size leave the sample unchanged.
pub fn downscale_face(sample: &Sample, target_face_px: f64) -> Sample {
    assert!(target_face_px >= 8.0, "target face size must be at least 8px");
    let f = target_face_px / sample.bbox.d();
    if !(f < 1.0) {
        return sample.clone();
    }
    let img = &sample.image;
    let sw = ((img.width as f64 * f).round() as usize).max(1);
    let sh = ((img.height as f64 * f).round() as usize).max(1);
    let small = img.resize_area(sw, sh);
    let (kx, ky) = (sw as f64 / img.width as f64, sh as f64 / img.height as f64);
    let image = Image::from_fn(img.width, img.height, |x, y| {
        let u = ((x as f64 + 0.5) * kx - 0.5).clamp(0.0, sw as f64 - 1.0);
        let v = ((y as f64 + 0.5) * ky - 0.5).clamp(0.0, sh as f64 - 1.0);
        small.sample(u, v)
    });
    Sample {
        image,
        ..sample.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Sample {
        let image = Image::from_fn(40, 40, |x, y| [x as f32 / 40.0, y as f32 / 40.0, 0.3]);
        let l = LandmarkSet::new_2d(&[(10.0, 12.0), (30.0, 14.0), (20.0, 30.0)]);
        Sample::new(image, l, None, Some(10.0), "s").unwrap()
    }

    #[test]
    fn identity_crop() {
        let s = sample();
        let (c, t) = crop_and_resize(&s, &BoundingBox::image_extent(40, 40), 40, 0.0).unwrap();
        assert_eq!(t, Affine::IDENTITY);
        assert_eq!(c.image, s.image);
        assert_eq!(c.landmarks, s.landmarks);
    }

    #[test]
    fn box_centre_maps_to_output_centre() {
        let s = sample();
        let b = s.bbox;
        let (_, t) = crop_and_resize(&s, &b, 64, 0.1).unwrap();
        let (u, v) = t.apply(b.center().0, b.center().1);
        assert!((u - 31.5).abs() < 1e-12 && (v - 31.5).abs() < 1e-12);
        let side = b.w.max(b.h) * 1.2;
        assert!((t.scale() - 64.0 / side).abs() < 1e-12);
    }

    #[test]
    fn degenerate_box_is_rejected() {
        let s = sample();
        let b = BoundingBox::new(3.0, 3.0, 0.0, 5.0);
        assert!(matches!(crop_and_resize(&s, &b, 32, 0.1), Err(CoreError::DegenerateBbox { .. })));
    }

    #[test]
    fn zero_noise_is_identity() {
        let b = BoundingBox::new(1.5, 2.5, 30.0, 20.0);
        assert_eq!(perturb_bbox(&b, 0.0, 9), b);
        assert_eq!(perturb_bbox(&b, 0.2, 9), perturb_bbox(&b, 0.2, 9));
        assert_ne!(perturb_bbox(&b, 0.3, 9), b);
    }

    #[test]
    fn downscale_keeps_size_and_landmarks() {
        let s = sample();
        let d = downscale_face(&s, 8.0);
        assert_eq!((d.image.width, d.image.height), (40, 40));
        assert_eq!(d.landmarks, s.landmarks);
        assert_ne!(d.image, s.image);
        assert_eq!(downscale_face(&s, s.bbox.d()), s);
    }

    proptest! {
        #[test]
        fn back_projection_is_exact(x in -50.0f64..90.0, y in -50.0f64..90.0,
                                    bx in 0.0f64..20.0, by in 0.0f64..20.0, w in 5.0f64..30.0, h in 5.0f64..30.0) {
            let s = sample();
            let (_, t) = crop_and_resize(&s, &BoundingBox::new(bx, by, w, h), 64, 0.1).unwrap();
            let (u, v) = t.apply(x, y);
            let (bx2, by2) = t.inverse().apply(u, v);
            prop_assert!((bx2 - x).abs() < 1e-9 && (by2 - y).abs() < 1e-9);
        }

        #[test]
        fn perturbed_centre_stays_in_range(p in 0.0f64..0.99, seed in any::<u64>()) {
            let b = BoundingBox::new(10.0, 20.0, 40.0, 30.0);
            let q = perturb_bbox(&b, p, seed);
            let d = b.d();
            prop_assert!((q.center().0 - b.center().0).abs() <= p * d + 1e-9);
            prop_assert!((q.center().1 - b.center().1).abs() <= p * d + 1e-9);
            let s = q.w / b.w;
            prop_assert!(s >= 1.0 - p - 1e-12 && s <= 1.0 + p + 1e-12);
        }
    }
}
