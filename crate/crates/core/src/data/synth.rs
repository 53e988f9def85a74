//! Procedural faces: a symmetric 3D landmark template on an ellipsoidal
//! head, posed by a weak-perspective camera and rendered with Lambertian
//! shading plus a small colour-coded mark at every visible landmark.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, Record};
use super::pts::{write_depth, write_pts};
use super::{Image, Sample};
use crate::codec::LandmarkSet;
use crate::error::{CoreError, Result};

/// Head ellipsoid semi-axes (x, y, z) in template units.
const HEAD: [f64; 3] = [1.0, 1.35, 0.95];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub count: usize,
    pub seed: u64,
    pub num_landmarks: usize,
    pub yaw_range: (f64, f64),
    pub pitch_range: (f64, f64),
    pub roll_range: (f64, f64),
    pub image_size: usize,
}

impl SynthConfig {
    pub fn new(count: usize, seed: u64, num_landmarks: usize, yaw_range: (f64, f64)) -> Self {
        SynthConfig {
            count,
            seed,
            num_landmarks,
            yaw_range,
            pitch_range: (-15.0, 15.0),
            roll_range: (-15.0, 15.0),
            image_size: 128,
        }
    }
}

/// Pose in degrees, scale in pixels per template unit, translation in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

type Mat3 = [[f64; 3]; 3];

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

fn apply(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

fn transpose(m: &Mat3) -> Mat3 {
    [0, 1, 2].map(|i| [m[0][i], m[1][i], m[2][i]])
}

impl Camera {
    /// `Rz(roll) Rx(pitch) Ry(yaw)`; x right, y down, z toward the viewer.
    pub fn rotation(&self) -> Mat3 {
        let (sy, cy) = self.yaw.to_radians().sin_cos();
        let (sp, cp) = self.pitch.to_radians().sin_cos();
        let (sr, cr) = self.roll.to_radians().sin_cos();
        let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
        let rz = [[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]];
        matmul(&rz, &matmul(&rx, &ry))
    }

    /// Image-frame `(x, y, z)`; `z` is depth toward the viewer in pixels.
    pub fn project(&self, p: [f64; 3]) -> [f64; 3] {
        let q = apply(&self.rotation(), p);
        [
            self.scale * q[0] + self.tx,
            self.scale * q[1] + self.ty,
            self.scale * q[2],
        ]
    }
}

fn surface_z(x: f64, y: f64) -> f64 {
    let r = 1.0 - (x / HEAD[0]).powi(2) - (y / HEAD[1]).powi(2);
    HEAD[2] * r.max(0.0).sqrt()
}

fn on_face(x: f64, y: f64, lift: f64) -> [f64; 3] {
    [x, y, surface_z(x, y) + lift]
}

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, n: usize, start: f64) -> Vec<(f64, f64)> {
    (0..n)
        .map(|k| {
            let phi = start - 2.0 * PI * k as f64 / n as f64;
            (cx + rx * phi.cos(), cy - ry * phi.sin())
        })
        .collect()
}

/// 68-point template, mirror-symmetric in x under the 68-point flip table.
pub fn template_68() -> Vec<[f64; 3]> {
    let mut p = Vec::with_capacity(68);
    for i in 0..17 {
        let t = PI * i as f64 / 16.0;
        p.push(on_face(-0.92 * t.cos(), -0.2 + 1.12 * t.sin(), 0.0));
    }
    for side in [-1.0, 1.0] {
        for i in 0..5 {
            let u = i as f64 / 4.0;
            let x = if side < 0.0 { -0.75 + 0.6 * u } else { 0.15 + 0.6 * u };
            let arch = 0.08 * (PI * u).sin();
            p.push(on_face(x, -0.52 - arch, 0.02));
        }
    }
    for i in 0..4 {
        let u = i as f64 / 3.0;
        p.push(on_face(0.0, -0.35 + 0.45 * u, 0.05 + 0.25 * u));
    }
    for i in 0..5 {
        let x = -0.2 + 0.1 * i as f64;
        let lift = 0.15 - 0.2 * x.abs();
        p.push(on_face(x, 0.2 + 0.04 * (1.0 - (x / 0.2).powi(2)), lift));
    }
    for (cx, start) in [(-0.4, PI), (0.4, PI)] {
        for (x, y) in ellipse(cx, -0.3, 0.14, 0.06, 6, start) {
            p.push(on_face(x, y, 0.0));
        }
    }
    for (x, y) in ellipse(0.0, 0.58, 0.33, 0.14, 12, PI) {
        p.push(on_face(x, y, 0.03));
    }
    for (x, y) in ellipse(0.0, 0.58, 0.2, 0.05, 8, PI) {
        p.push(on_face(x, y, 0.02));
    }
    p
}

/// Eye centres, nose tip, mouth corners.
pub fn template_5() -> Vec<[f64; 3]> {
    let t = template_68();
    let mean = |r: std::ops::Range<usize>| {
        let n = r.len() as f64;
        let mut m = [0.0; 3];
        for i in r {
            for k in 0..3 {
                m[k] += t[i][k] / n;
            }
        }
        m
    };
    vec![mean(36..42), mean(42..48), t[30], t[48], t[54]]
}

pub fn template(num_landmarks: usize) -> Result<Vec<[f64; 3]>> {
    match num_landmarks {
        68 => Ok(template_68()),
        5 => Ok(template_5()),
        n => Err(CoreError::Config(format!(
            "synthetic faces support 5 or 68 landmarks, not {n}"
        ))),
    }
}

/// Rounds to a multiple of 2^-16 so text round trips are exact.
pub fn quantize(v: f64) -> f64 {
    (v * 65536.0).round() / 65536.0
}

fn outward_normal(p: [f64; 3]) -> [f64; 3] {
    let n = [p[0] / HEAD[0].powi(2), p[1] / HEAD[1].powi(2), p[2] / HEAD[2].powi(2)];
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    n.map(|v| v / len)
}

/// True when the head surface under the landmark faces the viewer.
pub fn landmark_visible(cam: &Camera, p: [f64; 3]) -> bool {
    let base = [p[0], p[1], surface_z(p[0], p[1])];
    apply(&cam.rotation(), outward_normal(base))[2] > 0.1
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthFace {
    /// 3D landmarks in image pixels.
    pub sample: Sample,
    pub camera: Camera,
    pub visible: Vec<bool>,
}

fn hue_rgb(h: f64) -> [f32; 3] {
    let f = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        (1.0 - (k.min(4.0 - k).clamp(0.0, 1.0))) as f32
    };
    [f(5.0), f(3.0), f(1.0)]
}

fn render(cfg: &SynthConfig, cam: &Camera, points: &[[f64; 3]], visible: &[bool], rng: &mut ChaCha8Rng) -> Image {
    let size = cfg.image_size;
    let rt = transpose(&cam.rotation());
    let dir = apply(&rt, [0.0, 0.0, 1.0]);
    let inv_a2 = HEAD.map(|a| 1.0 / (a * a));
    let alpha: f64 = (0..3).map(|i| dir[i] * dir[i] * inv_a2[i]).sum();
    let light = {
        let l: [f64; 3] = [-0.35, -0.45, 0.82];
        let n = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
        l.map(|v| v / n)
    };
    let skin = [
        rng.random_range(0.55..0.85f32),
        rng.random_range(0.40..0.65f32),
        rng.random_range(0.30..0.50f32),
    ];
    let bg_a = [0.0; 3].map(|_: f32| rng.random_range(0.0..0.35f32));
    let bg_b = [0.0; 3].map(|_: f32| rng.random_range(0.0..0.35f32));
    let mark_sigma = 0.045 * cam.scale;
    let n = points.len();
    let colours: Vec<[f32; 3]> = (0..n).map(|k| hue_rgb((k as f64 * 0.618_034) % 1.0)).collect();

    Image::from_fn(size, size, |u, v| {
        let t = (u + v) as f32 / (2 * size) as f32;
        let mut c = [0, 1, 2].map(|k| bg_a[k] * (1.0 - t) + bg_b[k] * t);
        let o = apply(&rt, [(u as f64 - cam.tx) / cam.scale, (v as f64 - cam.ty) / cam.scale, 0.0]);
        let beta: f64 = 2.0 * (0..3).map(|i| o[i] * dir[i] * inv_a2[i]).sum::<f64>();
        let gamma: f64 = (0..3).map(|i| o[i] * o[i] * inv_a2[i]).sum::<f64>() - 1.0;
        let disc = beta * beta - 4.0 * alpha * gamma;
        if disc >= 0.0 {
            let z = (-beta + disc.sqrt()) / (2.0 * alpha);
            let hit = [0, 1, 2].map(|i| o[i] + z * dir[i]);
            let nc = apply(&cam.rotation(), outward_normal(hit));
            let lambert = (nc[0] * light[0] + nc[1] * light[1] + nc[2] * light[2]).max(0.0);
            let shade = (0.3 + 0.7 * lambert) as f32;
            c = skin.map(|s| s * shade);
        }
        for k in 0..n {
            if !visible[k] {
                continue;
            }
            let (dx, dy) = (u as f64 - points[k][0], v as f64 - points[k][1]);
            let r2 = dx * dx + dy * dy;
            if r2 > 16.0 * mark_sigma * mark_sigma {
                continue;
            }
            let a = (-r2 / (2.0 * mark_sigma * mark_sigma)).exp() as f32;
            for ch in 0..3 {
                c[ch] = c[ch] * (1.0 - a) + colours[k][ch] * a;
            }
        }
        c
    })
}

fn face_rng(cfg: &SynthConfig, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    rng
}

fn draw_camera(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Camera {
    let range = |rng: &mut ChaCha8Rng, r: (f64, f64)| if r.1 > r.0 { rng.random_range(r.0..=r.1) } else { r.0 };
    let size = cfg.image_size as f64;
    Camera {
        yaw: quantize(range(rng, cfg.yaw_range)),
        pitch: range(rng, cfg.pitch_range),
        roll: range(rng, cfg.roll_range),
        scale: size * rng.random_range(0.22..0.28),
        tx: (size - 1.0) / 2.0 + rng.random_range(-0.05..0.05) * size,
        ty: (size - 1.0) / 2.0 + rng.random_range(-0.05..0.05) * size,
    }
}

/// Pose of face `index` without rendering it.
pub fn camera_for(cfg: &SynthConfig, index: usize) -> Camera {
    draw_camera(cfg, &mut face_rng(cfg, index))
}

/// Draws face `index` of the dataset described by `cfg`.
pub fn generate_face(cfg: &SynthConfig, index: usize) -> Result<SynthFace> {
    let tpl = template(cfg.num_landmarks)?;
    let mut rng = face_rng(cfg, index);
    let cam = draw_camera(cfg, &mut rng);
    let points: Vec<[f64; 3]> = tpl.iter().map(|p| cam.project(*p).map(quantize)).collect();
    let visible: Vec<bool> = tpl.iter().map(|p| landmark_visible(&cam, *p)).collect();
    let image = render(cfg, &cam, &points, &visible, &mut rng);
    let sample = Sample::new(
        image,
        LandmarkSet::new_3d(&points),
        None,
        Some(cam.yaw),
        format!("{index:06}"),
    )?;
    Ok(SynthFace {
        sample,
        camera: cam,
        visible,
    })
}

/// In-memory dataset.
pub fn generate_samples(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    (0..cfg.count).map(|i| Ok(generate_face(cfg, i)?.sample)).collect()
}

/// Writes images, landmark files, depth sidecars and `manifest.tsv`
/// under `out_dir`; returns the manifest records.
pub fn synth_generate(cfg: &SynthConfig, out_dir: &Path) -> Result<Vec<Record>> {
    if cfg.count == 0 {
        return Err(CoreError::Config("count must be at least 1".into()));
    }
    for sub in ["images", "landmarks", "depth"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| CoreError::io(&d, e))?;
    }
    let mut records = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let face = generate_face(cfg, i)?;
        let s = &face.sample;
        let rec = Record {
            image: format!("images/{}.png", s.id),
            pts: format!("landmarks/{}.pts", s.id),
            depth: Some(format!("depth/{}.txt", s.id)),
            yaw: s.yaw,
        };
        s.image.save_png(&out_dir.join(&rec.image))?;
        let write = |rel: &str, text: String| {
            let p = out_dir.join(rel);
            fs::write(&p, text).map_err(|e| CoreError::io(&p, e))
        };
        write(&rec.pts, write_pts(&s.landmarks))?;
        write(rec.depth.as_ref().expect("set above"), write_depth(&s.landmarks.depths()))?;
        records.push(rec);
    }
    let path = out_dir.join("manifest.tsv");
    fs::write(&path, write_manifest(&records)).map_err(|e| CoreError::io(&path, e))?;
    Ok(records)
}
