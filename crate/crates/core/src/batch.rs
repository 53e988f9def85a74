//! Network inputs and targets built from cropped samples, and batched
//! inference.

use fan_tensor::{Graph, Mode, ParamStore, Scalar, Tensor};

use crate::arch::{Model, Network};
use crate::codec::{decode, encode_subpixel, guide_channels, to_heatmap_frame, HeatmapStack, LandmarkSet};
use crate::config::ModelKind;
use crate::data::Sample;
use crate::error::{CoreError, Result};

/// What the guide channels of a guided network carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuideSource {
    /// Encoded from each sample's own landmarks.
    GroundTruth,
    /// All zero.
    Zero,
}

fn planar<T: Scalar>(s: &Sample, out: &mut Vec<T>) {
    out.extend(s.image.to_planar().into_iter().map(|v| T::of(v as f64)));
}

fn maps<T: Scalar>(h: &HeatmapStack, out: &mut Vec<T>) {
    out.extend(h.maps.iter().map(|v| T::of(*v)));
}

fn check_crop(s: &Sample, res: usize, n: usize) -> Result<()> {
    if s.image.width != res || s.image.height != res {
        return Err(CoreError::Contract(format!(
            "sample {} is {}x{}, network expects {res}x{res}",
            s.id, s.image.width, s.image.height
        )));
    }
    if s.landmarks.len() != n {
        return Err(CoreError::Contract(format!(
            "sample {} has {} landmarks, network expects {n}",
            s.id,
            s.landmarks.len()
        )));
    }
    Ok(())
}

/// `[B, 3, R, R]` images.
pub fn image_batch<T: Scalar>(crops: &[&Sample], res: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(crops.len() * 3 * res * res);
    for s in crops {
        planar(s, &mut data);
    }
    Ok(Tensor::new([crops.len(), 3, res, res], data)?)
}

/// `[B, N, R, R]` guide maps; `guides[i]` is used for crop `i`.
pub fn guide_batch<T: Scalar>(guides: &[&LandmarkSet], res: usize) -> Result<Tensor<T>> {
    let n = guides.first().map_or(0, |g| g.len());
    let mut data = Vec::with_capacity(guides.len() * n * res * res);
    for g in guides {
        maps(&guide_channels(g, (res, res)), &mut data);
    }
    Ok(Tensor::new([guides.len(), n, res, res], data)?)
}

/// `[B, N, H, H]` sub-pixel Gaussian targets at heatmap resolution.
pub fn heatmap_targets<T: Scalar>(crops: &[&Sample], input_res: usize, hm_res: usize, sigma: f64) -> Result<Tensor<T>> {
    let scale = input_res as f64 / hm_res as f64;
    let n = crops.first().map_or(0, |s| s.landmarks.len());
    let mut data = Vec::with_capacity(crops.len() * n * hm_res * hm_res);
    for s in crops {
        let l = s.landmarks.map(1.0, |x, y| (to_heatmap_frame(x, scale), to_heatmap_frame(y, scale)));
        maps(&encode_subpixel(&l, (hm_res, hm_res), sigma), &mut data);
    }
    Ok(Tensor::new([crops.len(), n, hm_res, hm_res], data)?)
}

/// `[B, N]` depths divided by the face size `d` of each crop.
pub fn depth_targets<T: Scalar>(crops: &[&Sample]) -> Result<Tensor<T>> {
    let n = crops.first().map_or(0, |s| s.landmarks.len());
    let mut data = Vec::with_capacity(crops.len() * n);
    for s in crops {
        if !s.landmarks.is_3d() {
            return Err(CoreError::Data(format!("sample {} has no depth values", s.id)));
        }
        let d = s.bbox.d();
        data.extend(s.landmarks.depths().iter().map(|z| T::of(z / d)));
    }
    Ok(Tensor::new([crops.len(), n], data)?)
}

/// Records the forward pass of `net` for one batch and returns the
/// supervised outputs (one per stack, or the single depth output).
pub fn forward<T: Scalar>(
    net: &Network,
    kind: ModelKind,
    g: &mut Graph<'_, T>,
    crops: &[&Sample],
    guides: Option<&[&LandmarkSet]>,
) -> Result<Vec<fan_tensor::Var>> {
    let res = crops[0].image.width;
    let image = g.input(&image_batch(crops, res)?);
    match (net, kind) {
        (Network::Fan(f), ModelKind::Guided) => {
            let guides = guides.ok_or_else(|| CoreError::Contract("guided network needs guide landmarks".into()))?;
            let guide = g.input(&guide_batch(guides, res)?);
            f.forward_guided(g, image, guide)
        }
        (Network::Fan(f), _) => f.forward(g, image),
        (Network::Depth(d), _) => {
            let guides = guides.ok_or_else(|| CoreError::Contract("depth regressor needs 2D landmarks".into()))?;
            let hm = g.input(&guide_batch(guides, res)?);
            Ok(vec![d.forward(g, image, hm)?])
        }
    }
}

/// Zero guide sets for `crops`.
pub fn zero_guides(crops: &[&Sample]) -> Vec<LandmarkSet> {
    crops.iter().map(|s| LandmarkSet::invisible(s.landmarks.len())).collect()
}

/// Guide landmarks for a batch under `source`.
pub fn guides_for(crops: &[&Sample], source: GuideSource) -> Vec<LandmarkSet> {
    match source {
        GuideSource::GroundTruth => crops.iter().map(|s| s.landmarks.to_2d()).collect(),
        GuideSource::Zero => zero_guides(crops),
    }
}

/// Output of batched inference for one crop.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    /// Decoded landmarks of the last stack, in crop pixels.
    Landmarks(LandmarkSet),
    /// Depth over face size, one per landmark.
    Depth(Vec<f64>),
}

/// Eval-mode inference over `crops` in batches of `batch`. `guides` must be
/// given for guided and depth networks.
pub fn predict<T: Scalar>(
    model: &Model<T>,
    crops: &[&Sample],
    guides: Option<&[LandmarkSet]>,
    batch: usize,
) -> Result<Vec<Prediction>> {
    let res = model.spec.input_resolution();
    let n = model.spec.num_landmarks();
    for s in crops {
        check_crop(s, res, n)?;
    }
    if let Some(g) = guides {
        if g.len() != crops.len() {
            return Err(CoreError::Contract("one guide set per sample is required".into()));
        }
    }
    // eval mode touches no stored state; a scratch copy keeps `model` shared
    let mut store: ParamStore<T> = model.store.clone();
    let mut out = Vec::with_capacity(crops.len());
    for start in (0..crops.len()).step_by(batch.max(1)) {
        let end = (start + batch.max(1)).min(crops.len());
        let chunk = &crops[start..end];
        let gl: Option<Vec<&LandmarkSet>> = guides.map(|g| g[start..end].iter().collect());
        let mut g = Graph::new(&mut store, Mode::Eval);
        let outputs = forward(&model.net, model.spec.kind, &mut g, chunk, gl.as_deref())?;
        let last = *outputs.last().expect("at least one output");
        let values: Vec<f64> = g.tape.value(last).iter().map(|v| v.as_f64()).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(fan_tensor::TensorError::NonFinite { op: "inference".into() }.into());
        }
        let shape = g.tape.shape(last).to_vec();
        match &model.net {
            Network::Fan(_) => {
                let (h, w) = (shape[2], shape[3]);
                let per = n * h * w;
                let scale = res as f64 / w as f64;
                for b in 0..chunk.len() {
                    let stack = HeatmapStack::from_maps(values[b * per..(b + 1) * per].to_vec(), n, h, w, scale);
                    out.push(Prediction::Landmarks(decode(&stack)));
                }
            }
            Network::Depth(_) => {
                for b in 0..chunk.len() {
                    out.push(Prediction::Depth(values[b * n..(b + 1) * n].to_vec()));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Image;

    fn crop(res: usize, pts: &[(f64, f64)]) -> Sample {
        Sample::new(Image::new(res, res), LandmarkSet::new_2d(pts), None, None, "c").unwrap()
    }

    #[test]
    fn target_peaks_sit_at_heatmap_positions() {
        let s = crop(64, &[(17.5, 33.5), (2.0, 60.0)]);
        let t: Tensor<f64> = heatmap_targets(&[&s], 64, 16, 1.0).unwrap();
        assert_eq!(t.shape(), &[1, 2, 16, 16]);
        // 17.5 in a 64 grid is 4.25 at scale 4 and 33.5 is 8.25
        let m = &t.data()[..256];
        let best = (0..256).max_by(|a, b| m[*a].total_cmp(&m[*b])).unwrap();
        assert_eq!((best % 16, best / 16), (4, 8));
    }

    #[test]
    fn depth_targets_need_depth() {
        let s = crop(8, &[(1.0, 1.0), (5.0, 6.0)]);
        assert!(matches!(depth_targets::<f32>(&[&s]), Err(CoreError::Data(_))));
        let mut t = s.clone();
        t.landmarks = s.landmarks.with_depth(&[2.0, -4.0]);
        let d = t.bbox.d();
        let z: Tensor<f64> = depth_targets(&[&t]).unwrap();
        assert_eq!(z.data(), &[2.0 / d, -4.0 / d]);
    }

    #[test]
    fn zero_guides_encode_to_zero() {
        let s = crop(16, &[(3.0, 3.0)]);
        let z = zero_guides(&[&s]);
        let t: Tensor<f32> = guide_batch(&z.iter().collect::<Vec<_>>(), 16).unwrap();
        assert!(t.data().iter().all(|v| *v == 0.0));
        let g = guides_for(&[&s], GuideSource::GroundTruth);
        let t: Tensor<f32> = guide_batch(&g.iter().collect::<Vec<_>>(), 16).unwrap();
        assert_eq!(t.data()[3 * 16 + 3], 1.0);
    }
}
