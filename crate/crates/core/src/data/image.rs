use std::path::Path;

use crate::error::{CoreError, Result};

/// RGB image with channels interleaved, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> Self {
        let mut img = Image::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        img
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, c: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    /// Bilinear sample at pixel-centre coordinates; outside reads as zero.
    pub fn sample(&self, x: f64, y: f64) -> [f32; 3] {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
        let (x0, y0) = (x0 as isize, y0 as isize);
        let mut out = [0.0f32; 3];
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                let w = wx * wy;
                if w == 0.0 {
                    continue;
                }
                let (xi, yi) = (x0 + dx, y0 + dy);
                if xi < 0 || yi < 0 || xi >= self.width as isize || yi >= self.height as isize {
                    continue;
                }
                let c = self.get(xi as usize, yi as usize);
                for k in 0..3 {
                    out[k] += w * c[k];
                }
            }
        }
        out
    }

    /// Output pixel `(x, y)` reads the source at `inverse(x, y)`.
    pub fn warp(&self, width: usize, height: usize, inverse: impl Fn(f64, f64) -> (f64, f64)) -> Image {
        Image::from_fn(width, height, |x, y| {
            let (u, v) = inverse(x as f64, y as f64);
            self.sample(u, v)
        })
    }

    /// Area-average downsample to `width x height`.
    pub fn resize_area(&self, width: usize, height: usize) -> Image {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        Image::from_fn(width, height, |x, y| {
            let (x0, x1) = (x as f64 * sx, (x + 1) as f64 * sx);
            let (y0, y1) = (y as f64 * sy, (y + 1) as f64 * sy);
            let mut acc = [0.0f64; 3];
            let mut total = 0.0;
            for yi in (y0.floor() as usize)..(y1.ceil() as usize).min(self.height) {
                let wy = (y1.min(yi as f64 + 1.0) - y0.max(yi as f64)).max(0.0);
                for xi in (x0.floor() as usize)..(x1.ceil() as usize).min(self.width) {
                    let wx = (x1.min(xi as f64 + 1.0) - x0.max(xi as f64)).max(0.0);
                    let c = self.get(xi, yi);
                    for k in 0..3 {
                        acc[k] += wx * wy * c[k] as f64;
                    }
                    total += wx * wy;
                }
            }
            acc.map(|a| (a / total) as f32)
        })
    }

    /// Planar `[3, H, W]` copy.
    pub fn to_planar(&self) -> Vec<f32> {
        let n = self.width * self.height;
        let mut out = vec![0.0; 3 * n];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for k in 0..3 {
                out[k * n + i] = px[k];
            }
        }
        out
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|e| CoreError::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Ok(Image {
            width: w as usize,
            height: h as usize,
            data: rgb.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(
            path,
            &self.to_bytes(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| CoreError::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Image {
        Image::from_fn(4, 3, |x, y| [x as f32 / 4.0, y as f32 / 3.0, 0.5])
    }

    #[test]
    fn bilinear_hits_pixels_and_interpolates() {
        let img = ramp();
        assert_eq!(img.sample(2.0, 1.0), img.get(2, 1));
        let mid = img.sample(1.5, 1.0);
        assert!((mid[0] - 1.5 / 4.0).abs() < 1e-6);
        assert_eq!(img.sample(-3.0, 0.0), [0.0; 3]);
    }

    #[test]
    fn identity_warp() {
        let img = ramp();
        assert_eq!(img.warp(4, 3, |x, y| (x, y)), img);
    }

    #[test]
    fn area_resize_of_constant_is_constant() {
        let img = Image::from_fn(10, 10, |_, _| [0.25, 0.5, 0.75]);
        let small = img.resize_area(3, 3);
        for v in small.data.chunks(3) {
            assert!((v[0] - 0.25).abs() < 1e-6 && (v[2] - 0.75).abs() < 1e-6);
        }
        assert_eq!(img.resize_area(10, 10), img);
    }

    #[test]
    fn png_round_trip_of_quantized_image() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = Image::from_fn(5, 4, |x, y| [x as f32 * 51.0 / 255.0, y as f32 * 17.0 / 255.0, 1.0]);
        img.save_png(&p).unwrap();
        let back = Image::load_png(&p).unwrap();
        assert_eq!(back.to_bytes(), img.to_bytes());
        assert!(Image::load_png(&dir.path().join("missing.png")).is_err());
    }
}
