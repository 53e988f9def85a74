//! Random flips, rotation, scale, colour jitter and occlusion, applied in
//! the canonical crop frame. Landmarks follow the same transform as the
//! image grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::flip::flip_permutation;
use super::{Affine, Image, Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Rotation is drawn uniformly from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    pub scale_range: (f64, f64),
    /// Per-channel gain drawn from `[1 - j, 1 + j]`.
    pub color_jitter: f64,
    pub occlusion_prob: f64,
    pub seed: u64,
}

impl AugmentConfig {
    pub fn fan() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            rotation_deg: 50.0,
            scale_range: (0.8, 1.2),
            color_jitter: 0.2,
            occlusion_prob: 0.2,
            seed: 0,
        }
    }

    pub fn guided() -> Self {
        AugmentConfig {
            rotation_deg: 70.0,
            scale_range: (0.7, 1.3),
            ..Self::fan()
        }
    }

    /// No-op configuration.
    pub fn identity() -> Self {
        AugmentConfig {
            flip_prob: 0.0,
            rotation_deg: 0.0,
            scale_range: (1.0, 1.0),
            color_jitter: 0.0,
            occlusion_prob: 0.0,
            seed: 0,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        AugmentConfig { seed, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Occlusion {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub noise_seed: u64,
}

/// One concrete draw from an [`AugmentConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub flip: bool,
    pub rotation_deg: f64,
    pub scale: f64,
    pub gain: [f32; 3],
    pub occlusion: Option<Occlusion>,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip: false,
        rotation_deg: 0.0,
        scale: 1.0,
        gain: [1.0; 3],
        occlusion: None,
    };

    pub fn rotation(deg: f64) -> Self {
        AugmentParams {
            rotation_deg: deg,
            ..Self::IDENTITY
        }
    }

    pub fn flip() -> Self {
        AugmentParams {
            flip: true,
            ..Self::IDENTITY
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Draws parameters for a `width x height` image. Flips are only drawn for
/// mark-ups with a known flip table.
pub fn sample_params(cfg: &AugmentConfig, width: usize, height: usize, num_landmarks: usize) -> AugmentParams {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let flip = rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0)) && flip_permutation(num_landmarks).is_some();
    let rotation_deg = uniform(&mut rng, -cfg.rotation_deg, cfg.rotation_deg);
    let scale = uniform(&mut rng, cfg.scale_range.0, cfg.scale_range.1);
    let j = cfg.color_jitter;
    let gain = [0; 3].map(|_| uniform(&mut rng, 1.0 - j, 1.0 + j) as f32);
    let occlusion = rng.random_bool(cfg.occlusion_prob.clamp(0.0, 1.0)).then(|| {
        let w = ((uniform(&mut rng, 0.1, 0.3) * width as f64).round() as usize).max(1);
        let h = ((uniform(&mut rng, 0.1, 0.3) * height as f64).round() as usize).max(1);
        Occlusion {
            x: rng.random_range(0..=width - w),
            y: rng.random_range(0..=height - h),
            w,
            h,
            noise_seed: rng.random(),
        }
    });
    AugmentParams {
        flip,
        rotation_deg,
        scale,
        gain,
        occlusion,
    }
}

/// The rotation/scale part as an affine about the image centre.
pub fn geometric_transform(p: &AugmentParams, width: usize, height: usize) -> Affine {
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    Affine::about(cx, cy, p.rotation_deg.to_radians(), p.scale)
}

/// Applies `p`: mirror (with the index permutation), then rotation and
/// scale about the centre, then colour gain and occlusion.
pub fn apply_params(sample: &Sample, p: &AugmentParams) -> Sample {
    let (w, h) = (sample.image.width, sample.image.height);
    let mut landmarks = sample.landmarks.clone();
    let mut bbox = sample.bbox;
    let mut image = sample.image.clone();
    let mirror_x = w as f64 - 1.0;
    if p.flip {
        if let Some(perm) = flip_permutation(landmarks.len()) {
            landmarks = landmarks.map(1.0, |x, y| (mirror_x - x, y)).permuted(&perm);
            bbox.x = mirror_x - (bbox.x + bbox.w);
            image = Image::from_fn(w, h, |x, y| sample.image.get(w - 1 - x, y));
        }
    }
    let t = geometric_transform(p, w, h);
    if t != Affine::IDENTITY {
        let inv = t.inverse();
        image = image.warp(w, h, |x, y| inv.apply(x, y));
        landmarks = t.map_landmarks(&landmarks);
        bbox = t.map_bbox(&bbox);
    }
    if p.gain != [1.0; 3] {
        for px in image.data.chunks_exact_mut(3) {
            for k in 0..3 {
                px[k] = (px[k] * p.gain[k]).clamp(0.0, 1.0);
            }
        }
    }
    if let Some(o) = p.occlusion {
        let mut rng = ChaCha8Rng::seed_from_u64(o.noise_seed);
        for y in o.y..(o.y + o.h).min(h) {
            for x in o.x..(o.x + o.w).min(w) {
                image.set(x, y, [rng.random(), rng.random(), rng.random()]);
            }
        }
    }
    Sample {
        image,
        landmarks,
        bbox,
        yaw: sample.yaw,
        id: sample.id.clone(),
    }
}

/// One random augmentation drawn from `cfg.seed`.
pub fn augment(sample: &Sample, cfg: &AugmentConfig) -> Sample {
    let p = sample_params(cfg, sample.image.width, sample.image.height, sample.landmarks.len());
    apply_params(sample, &p)
}
