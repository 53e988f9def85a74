//! Landmark sets and Gaussian heatmaps.
//!
//! Heatmap pixel `k` covers image pixels whose centres map through
//! `img = (k + 0.5) * scale - 0.5`, so a stack produced at a quarter of the
//! input resolution uses `scale = 4`.

use serde::{Deserialize, Serialize};

/// Coordinates of a landmark that is absent or outside the frame.
pub const INVISIBLE: f64 = -1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    /// `[x, y, z]` per landmark; `z` is zero unless `num_coords == 3`.
    pub points: Vec<[f64; 3]>,
    pub num_coords: usize,
}

impl LandmarkSet {
    pub fn new_2d(xy: &[(f64, f64)]) -> Self {
        LandmarkSet {
            points: xy.iter().map(|&(x, y)| [x, y, 0.0]).collect(),
            num_coords: 2,
        }
    }

    pub fn new_3d(xyz: &[[f64; 3]]) -> Self {
        LandmarkSet {
            points: xyz.to_vec(),
            num_coords: 3,
        }
    }

    pub fn invisible(n: usize) -> Self {
        LandmarkSet {
            points: vec![[INVISIBLE, INVISIBLE, 0.0]; n],
            num_coords: 2,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_3d(&self) -> bool {
        self.num_coords == 3
    }

    pub fn xy(&self, k: usize) -> (f64, f64) {
        (self.points[k][0], self.points[k][1])
    }

    pub fn is_visible(&self, k: usize) -> bool {
        let [x, y, _] = self.points[k];
        !(x == INVISIBLE && y == INVISIBLE)
    }

    pub fn visible_count(&self) -> usize {
        (0..self.len()).filter(|&k| self.is_visible(k)).count()
    }

    /// Drops depth.
    pub fn to_2d(&self) -> Self {
        LandmarkSet {
            points: self.points.iter().map(|p| [p[0], p[1], 0.0]).collect(),
            num_coords: 2,
        }
    }

    pub fn with_depth(&self, z: &[f64]) -> Self {
        LandmarkSet {
            points: self.points.iter().zip(z).map(|(p, &z)| [p[0], p[1], z]).collect(),
            num_coords: 3,
        }
    }

    pub fn depths(&self) -> Vec<f64> {
        self.points.iter().map(|p| p[2]).collect()
    }

    /// Output slot `k` takes input landmark `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        LandmarkSet {
            points: perm.iter().map(|&i| self.points[i]).collect(),
            num_coords: self.num_coords,
        }
    }

    /// Applies `f` to the x,y of every visible landmark and scales z by `zscale`.
    pub fn map(&self, zscale: f64, f: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        let points = (0..self.len())
            .map(|k| {
                let [x, y, z] = self.points[k];
                if self.is_visible(k) {
                    let (u, v) = f(x, y);
                    [u, v, z * zscale]
                } else {
                    self.points[k]
                }
            })
            .collect();
        LandmarkSet {
            points,
            num_coords: self.num_coords,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    /// `N * H * W`, map-major, row-major within a map.
    pub maps: Vec<f64>,
    pub num_maps: usize,
    pub height: usize,
    pub width: usize,
    /// Image pixels per heatmap pixel.
    pub scale: f64,
    /// Per map: true when the landmark fell inside the grid.
    pub visible: Vec<bool>,
}

impl HeatmapStack {
    pub fn zeros(num_maps: usize, height: usize, width: usize) -> Self {
        HeatmapStack {
            maps: vec![0.0; num_maps * height * width],
            num_maps,
            height,
            width,
            scale: 1.0,
            visible: vec![false; num_maps],
        }
    }

    /// Wraps raw network output.
    pub fn from_maps(maps: Vec<f64>, num_maps: usize, height: usize, width: usize, scale: f64) -> Self {
        assert_eq!(maps.len(), num_maps * height * width);
        HeatmapStack {
            maps,
            num_maps,
            height,
            width,
            scale,
            visible: vec![true; num_maps],
        }
    }

    pub fn map(&self, k: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.maps[k * n..(k + 1) * n]
    }

    fn map_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.maps[k * n..(k + 1) * n]
    }

    pub fn get(&self, k: usize, row: usize, col: usize) -> f64 {
        self.maps[(k * self.height + row) * self.width + col]
    }

    /// Horizontal mirror of every map, then channel `k` takes map `perm[k]`.
    pub fn mirrored(&self, perm: &[usize]) -> Self {
        let mut out = HeatmapStack {
            maps: vec![0.0; self.maps.len()],
            visible: perm.iter().map(|&i| self.visible[i]).collect(),
            ..self.clone()
        };
        let w = self.width;
        for (k, &src) in perm.iter().enumerate() {
            let from = self.map(src).to_vec();
            let to = out.map_mut(k);
            for r in 0..self.height {
                for c in 0..w {
                    to[r * w + c] = from[r * w + (w - 1 - c)];
                }
            }
        }
        out
    }
}

/// Image-frame coordinate to heatmap-frame coordinate.
pub fn to_heatmap_frame(p: f64, scale: f64) -> f64 {
    (p + 0.5) / scale - 0.5
}

pub fn to_image_frame(p: f64, scale: f64) -> f64 {
    (p + 0.5) * scale - 0.5
}

/// Nearest pixel index, ties broken toward the grid centre so that the rule
/// commutes with mirroring. `None` outside `[0, n)`.
pub fn nearest_pixel(p: f64, n: usize) -> Option<usize> {
    if !p.is_finite() {
        return None;
    }
    let centre = (n as f64 - 1.0) / 2.0;
    let fl = p.floor();
    let frac = p - fl;
    let r = if frac > 0.5 {
        fl + 1.0
    } else if frac < 0.5 {
        fl
    } else if p < centre {
        fl + 1.0
    } else {
        fl
    };
    (r >= 0.0 && r < n as f64).then_some(r as usize)
}

fn window(sigma: f64) -> isize {
    (3.0 * sigma).ceil() as isize
}

fn splat(stack: &mut HeatmapStack, k: usize, cx: usize, cy: usize, mx: f64, my: f64, sigma: f64) {
    let (w, h) = (stack.width as isize, stack.height as isize);
    let r = window(sigma);
    let denom = 2.0 * sigma * sigma;
    let map = stack.map_mut(k);
    for dy in -r..=r {
        let y = cy as isize + dy;
        if y < 0 || y >= h {
            continue;
        }
        for dx in -r..=r {
            let x = cx as isize + dx;
            if x < 0 || x >= w {
                continue;
            }
            let (ex, ey) = (x as f64 - mx, y as f64 - my);
            map[(y * w + x) as usize] = (-(ex * ex + ey * ey) / denom).exp();
        }
    }
}

fn encode_with(landmarks: &LandmarkSet, (h, w): (usize, usize), sigma: f64, subpixel: bool) -> HeatmapStack {
    assert!(sigma > 0.0, "sigma must be positive");
    let mut stack = HeatmapStack::zeros(landmarks.len(), h, w);
    for k in 0..landmarks.len() {
        if !landmarks.is_visible(k) {
            continue;
        }
        let (x, y) = landmarks.xy(k);
        if let (Some(cx), Some(cy)) = (nearest_pixel(x, w), nearest_pixel(y, h)) {
            let (mx, my) = if subpixel { (x, y) } else { (cx as f64, cy as f64) };
            splat(&mut stack, k, cx, cy, mx, my, sigma);
            stack.visible[k] = true;
        }
    }
    stack
}

/// One peak-normalized Gaussian per landmark, centred on its nearest pixel
/// and truncated to a `(6 sigma + 1)` square window. Landmarks outside the
/// grid give an all-zero map marked invisible. Coordinates are in heatmap
/// pixels.
pub fn encode(landmarks: &LandmarkSet, resolution: (usize, usize), sigma: f64) -> HeatmapStack {
    encode_with(landmarks, resolution, sigma, false)
}

/// As [`encode`], but the Gaussian is centred on the exact landmark position
/// (the window stays on the nearest pixel). Used as the regression target.
pub fn encode_subpixel(landmarks: &LandmarkSet, resolution: (usize, usize), sigma: f64) -> HeatmapStack {
    encode_with(landmarks, resolution, sigma, true)
}

/// Arg-max per map with a quarter-pixel step toward the larger neighbour on
/// each axis, mapped through the stack's scale. An all-zero map decodes to
/// an invisible landmark.
pub fn decode(stack: &HeatmapStack) -> LandmarkSet {
    let (h, w) = (stack.height, stack.width);
    let mut points = Vec::with_capacity(stack.num_maps);
    for k in 0..stack.num_maps {
        let map = stack.map(k);
        if map.iter().all(|v| *v == 0.0) {
            points.push([INVISIBLE, INVISIBLE, 0.0]);
            continue;
        }
        let mut best = 0;
        for (i, v) in map.iter().enumerate() {
            if *v > map[best] {
                best = i;
            }
        }
        let (r, c) = (best / w, best % w);
        let mut x = c as f64;
        let mut y = r as f64;
        if c > 0 && c + 1 < w {
            x += 0.25 * step(map[best - 1], map[best + 1]);
        }
        if r > 0 && r + 1 < h {
            y += 0.25 * step(map[best - w], map[best + w]);
        }
        points.push([to_image_frame(x, stack.scale), to_image_frame(y, stack.scale), 0.0]);
    }
    LandmarkSet { points, num_coords: 2 }
}

fn step(before: f64, after: f64) -> f64 {
    if after > before {
        1.0
    } else if before > after {
        -1.0
    } else {
        0.0
    }
}

/// `encode(landmarks, resolution, 1)`, one channel per landmark in index order.
pub fn guide_channels(landmarks: &LandmarkSet, resolution: (usize, usize)) -> HeatmapStack {
    encode(&landmarks.to_2d(), resolution, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn peak_and_neighbours() {
        let l = LandmarkSet::new_2d(&[(10.0, 12.0)]);
        let s = encode(&l, (64, 64), 1.0);
        assert_eq!(s.get(0, 12, 10), 1.0);
        for (r, c) in [(11, 10), (13, 10), (12, 9), (12, 11)] {
            assert!((s.get(0, r, c) - 0.606_530_659_712_633).abs() < 1e-12);
        }
        assert_eq!(s.get(0, 12, 14), 0.0);
        assert!(s.visible[0]);
    }

    #[test]
    fn outside_landmark_is_blank() {
        let s = encode(&LandmarkSet::new_2d(&[(-5.0, -5.0)]), (64, 64), 1.0);
        assert!(s.maps.iter().all(|v| *v == 0.0));
        assert!(!s.visible[0]);
        assert!(!decode(&s).is_visible(0));
    }

    #[test]
    fn mass_is_close_to_two_pi_sigma_squared() {
        for sigma in [1.0, 1.5, 2.0] {
            let s = encode(&LandmarkSet::new_2d(&[(32.0, 30.0)]), (64, 64), sigma);
            let total: f64 = s.maps.iter().sum();
            let want = 2.0 * std::f64::consts::PI * sigma * sigma;
            assert!((total - want).abs() / want < 0.02, "{sigma}: {total}");
        }
    }

    #[test]
    fn decode_quarter_offset() {
        let mut s = HeatmapStack::zeros(1, 32, 32);
        s.maps[12 * 32 + 10] = 1.0;
        s.maps[12 * 32 + 11] = 0.5;
        s.maps[12 * 32 + 9] = 0.2;
        let l = decode(&s);
        assert_eq!(l.xy(0), (10.25, 12.0));
    }

    #[test]
    fn decode_keeps_first_maximum() {
        let mut s = HeatmapStack::zeros(1, 8, 8);
        s.maps[9] = 1.0;
        s.maps[20] = 1.0;
        assert_eq!(decode(&s).xy(0), (1.0, 1.0));
    }

    #[test]
    fn decode_maps_through_scale() {
        let mut s = encode(&LandmarkSet::new_2d(&[(5.0, 7.0)]), (16, 16), 1.0);
        s.scale = 4.0;
        assert_eq!(decode(&s).xy(0), (4.0 * 5.5 - 0.5, 4.0 * 7.5 - 0.5));
        assert!((to_heatmap_frame(to_image_frame(3.3, 4.0), 4.0) - 3.3).abs() < 1e-12);
    }

    #[test]
    fn round_trip_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut max, mut sum) = (0.0f64, 0.0);
        for _ in 0..1000 {
            let p = (rng.random_range(4.0..60.0), rng.random_range(4.0..60.0));
            let d = decode(&encode(&LandmarkSet::new_2d(&[p]), (64, 64), 1.0));
            let (x, y) = d.xy(0);
            let e = (x - p.0).abs().max((y - p.1).abs());
            max = max.max(e);
            sum += (x - p.0).abs() + (y - p.1).abs();
        }
        let mean = sum / 2000.0;
        assert!(max <= 0.5 && mean <= 0.3, "{max} {mean}");
    }

    #[test]
    fn subpixel_target_keeps_window_and_shifts_peak() {
        let l = LandmarkSet::new_2d(&[(10.3, 12.0)]);
        let s = encode_subpixel(&l, (32, 32), 1.0);
        assert!(s.get(0, 12, 11) > s.get(0, 12, 9));
        assert_eq!(decode(&s).xy(0), (10.25, 12.0));
    }

    #[test]
    fn guide_channels_follow_landmark_order() {
        let l = LandmarkSet::new_2d(&[(3.0, 4.0), (20.0, 9.0), (7.0, 30.0)]);
        let g = guide_channels(&l, (32, 32));
        assert_eq!(g.num_maps, 3);
        for k in 0..3 {
            let (x, y) = l.xy(k);
            assert_eq!(g.get(k, y as usize, x as usize), 1.0);
        }
        let perm = [2, 0, 1];
        let gp = guide_channels(&l.permuted(&perm), (32, 32));
        for (k, &src) in perm.iter().enumerate() {
            assert_eq!(gp.map(k), g.map(src));
        }
    }

    #[test]
    fn nearest_pixel_ties_are_mirror_symmetric() {
        assert_eq!(nearest_pixel(2.5, 64), Some(3));
        assert_eq!(nearest_pixel(60.5, 64), Some(60));
        assert_eq!(nearest_pixel(-0.5, 64), Some(0));
        assert_eq!(nearest_pixel(63.5, 64), Some(63));
        assert_eq!(nearest_pixel(64.5, 64), None);
        assert_eq!(nearest_pixel(-0.6, 64), None);
    }

    proptest! {
        #[test]
        fn round_trip_within_half_pixel(x in 1.0f64..30.0, y in 1.0f64..14.0) {
            let d = decode(&encode(&LandmarkSet::new_2d(&[(x, y)]), (16, 32), 1.0));
            let (u, v) = d.xy(0);
            prop_assert!((u - x).abs() <= 0.5 && (v - y).abs() <= 0.5);
        }

        #[test]
        fn scale_covariance(x in 0.0f64..31.0, y in 0.0f64..31.0) {
            let a = encode(&LandmarkSet::new_2d(&[(x, y)]), (32, 32), 1.0);
            let b = encode(&LandmarkSet::new_2d(&[(2.0 * x, 2.0 * y)]), (64, 64), 1.0);
            let peak = |s: &HeatmapStack| {
                let i = s.map(0).iter().position(|v| *v == 1.0).unwrap();
                (i % s.width, i / s.width)
            };
            let (pa, pb) = (peak(&a), peak(&b));
            // doubling a coordinate moves its nearest pixel to 2c or 2c +/- 1
            prop_assert!((pb.0 as isize - 2 * pa.0 as isize).abs() <= 1);
            prop_assert!((pb.1 as isize - 2 * pa.1 as isize).abs() <= 1);
            let snap = encode(&LandmarkSet::new_2d(&[(2.0 * pa.0 as f64, 2.0 * pa.1 as f64)]), (64, 64), 1.0);
            prop_assert_eq!(peak(&snap), (2 * pa.0, 2 * pa.1));
        }

        #[test]
        fn encoded_maps_are_bounded(x in -10.0f64..40.0, y in -10.0f64..40.0, sigma in 0.5f64..3.0) {
            let s = encode(&LandmarkSet::new_2d(&[(x, y)]), (32, 32), sigma);
            prop_assert!(s.maps.iter().all(|v| (0.0..=1.0).contains(v)));
            if s.visible[0] {
                prop_assert_eq!(s.maps.iter().cloned().fold(0.0, f64::max), 1.0);
            }
        }
    }
}
