//! Evaluation of predictors on datasets, with optional box noise and face
//! downscaling, and the ablation tables built on top of it.

use fan_tensor::Scalar;

use crate::arch::Model;
use crate::batch::{guides_for, predict, GuideSource, Prediction};
use crate::codec::LandmarkSet;
use crate::config::ModelKind;
use crate::data::{crop_and_resize, downscale_face, perturb_bbox, Affine, Sample};
use crate::error::{CoreError, Result};
use crate::metrics::{auc, ced_curve, depth_error, nme, yaw_bin, EvalResult, AUC_THRESHOLD, CED_STEP, YAW_BINS};

/// Something that maps samples to landmarks in original image pixels.
pub enum Predictor<'a, T: Scalar> {
    /// A heatmap network; guided networks take guides from `GuideSource`.
    Network(&'a Model<T>, GuideSource),
    /// Returns each sample's own landmarks.
    Passthrough,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    /// Box noise level in `[0, 1)`.
    pub noise: f64,
    /// Simulated face size in pixels.
    pub face_px: Option<f64>,
    pub seed: u64,
    pub margin: f64,
    pub batch: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            noise: 0.0,
            face_px: None,
            seed: 0,
            margin: 0.1,
            batch: 10,
        }
    }
}

fn noise_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ index as u64
}

/// Crops after applying the perturbations in `opts`; returns the crops and
/// the crop transforms.
pub fn perturbed_crops(samples: &[Sample], res: usize, opts: &EvalOptions) -> Result<(Vec<Sample>, Vec<Affine>)> {
    let mut crops = Vec::with_capacity(samples.len());
    let mut maps = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let degraded;
        let src = match opts.face_px {
            Some(px) => {
                degraded = downscale_face(s, px);
                &degraded
            }
            None => s,
        };
        let bbox = perturb_bbox(&src.bbox, opts.noise, noise_seed(opts.seed, i));
        let (c, t) = crop_and_resize(src, &bbox, res, opts.margin)?;
        crops.push(c);
        maps.push(t);
    }
    Ok((crops, maps))
}

/// Landmark predictions in original image coordinates.
pub fn predict_landmarks<T: Scalar>(p: &Predictor<'_, T>, samples: &[Sample], opts: &EvalOptions) -> Result<Vec<LandmarkSet>> {
    let (model, source) = match p {
        Predictor::Passthrough => return Ok(samples.iter().map(|s| s.landmarks.clone()).collect()),
        Predictor::Network(m, g) => (*m, *g),
    };
    if model.spec.kind == ModelKind::Depth {
        return Err(CoreError::Contract("depth regressor does not predict landmarks".into()));
    }
    let n = model.spec.num_landmarks();
    if let Some(s) = samples.iter().find(|s| s.landmarks.len() != n) {
        return Err(CoreError::Contract(format!(
            "model predicts {n} landmarks, sample {} has {}",
            s.id,
            s.landmarks.len()
        )));
    }
    let (crops, maps) = perturbed_crops(samples, model.spec.input_resolution(), opts)?;
    let refs: Vec<&Sample> = crops.iter().collect();
    let guides = (model.spec.kind == ModelKind::Guided).then(|| guides_for(&refs, source));
    let preds = predict(model, &refs, guides.as_deref(), opts.batch)?;
    Ok(preds
        .into_iter()
        .zip(&maps)
        .map(|(p, t)| match p {
            Prediction::Landmarks(l) => t.inverse().map_landmarks(&l),
            Prediction::Depth(_) => unreachable!("heatmap network"),
        })
        .collect())
}

/// Per-sample NME against each sample's own landmarks and box.
pub fn evaluate<T: Scalar>(p: &Predictor<'_, T>, samples: &[Sample], opts: &EvalOptions) -> Result<Vec<EvalResult>> {
    let preds = predict_landmarks(p, samples, opts)?;
    samples
        .iter()
        .zip(&preds)
        .map(|(s, l)| {
            Ok(EvalResult {
                id: s.id.clone(),
                nme: nme(&s.landmarks, l, &s.bbox)?,
                yaw: s.yaw,
                landmarks_used: (0..l.len()).filter(|&k| l.is_visible(k) && s.landmarks.is_visible(k)).count(),
            })
        })
        .collect()
}

/// Mean `|dz| / d` of a depth regressor given 2D guide landmarks in
/// original image pixels (ground truth when `guides` is `None`).
pub fn evaluate_depth<T: Scalar>(
    model: &Model<T>,
    samples: &[Sample],
    guides: Option<&[LandmarkSet]>,
    opts: &EvalOptions,
) -> Result<Vec<f64>> {
    let depths = predict_depth(model, samples, guides, opts)?;
    samples
        .iter()
        .zip(&depths)
        .map(|(s, z)| {
            if !s.landmarks.is_3d() {
                return Err(CoreError::Data(format!("sample {} has no depth values", s.id)));
            }
            depth_error(&s.landmarks.depths(), z, s.bbox.d())
        })
        .collect()
}

/// Depth per landmark in original image pixels.
pub fn predict_depth<T: Scalar>(
    model: &Model<T>,
    samples: &[Sample],
    guides: Option<&[LandmarkSet]>,
    opts: &EvalOptions,
) -> Result<Vec<Vec<f64>>> {
    if model.spec.kind != ModelKind::Depth {
        return Err(CoreError::Contract("expected a depth regressor".into()));
    }
    let (crops, maps) = perturbed_crops(samples, model.spec.input_resolution(), opts)?;
    let crop_guides: Vec<LandmarkSet> = match guides {
        Some(g) => {
            if g.len() != samples.len() {
                return Err(CoreError::Contract("one guide set per sample is required".into()));
            }
            g.iter().zip(&maps).map(|(l, t)| t.map_landmarks(l).to_2d()).collect()
        }
        None => crops.iter().map(|c| c.landmarks.to_2d()).collect(),
    };
    let refs: Vec<&Sample> = crops.iter().collect();
    let preds = predict(model, &refs, Some(&crop_guides), opts.batch)?;
    Ok(preds
        .into_iter()
        .zip(samples)
        .map(|(p, s)| match p {
            Prediction::Depth(z) => z.iter().map(|v| v * s.bbox.d()).collect(),
            Prediction::Landmarks(_) => unreachable!("depth network"),
        })
        .collect())
}

/// Plain evaluation summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub mean_nme: f64,
    pub auc: f64,
    pub failure_rate: f64,
    pub count: usize,
}

pub fn summarize(results: &[EvalResult], threshold: f64) -> Result<Summary> {
    let curve = ced_curve(results, CED_STEP)?;
    Ok(Summary {
        mean_nme: crate::metrics::mean_nme(results),
        auc: auc(&curve, threshold),
        failure_rate: crate::metrics::failure_rate(results, threshold)?,
        count: results.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Protocol {
    /// One row, AUC per yaw bin.
    Yaw,
    /// One row per box-noise level.
    Noise(Vec<f64>),
    /// One row per simulated face size in pixels.
    Resolution(Vec<f64>),
    /// One row per predictor.
    Size,
}

pub const NOISE_LEVELS: [f64; 4] = [0.0, 0.1, 0.2, 0.3];
pub const RESOLUTION_LADDER: [f64; 6] = [60.0, 50.0, 40.0, 30.0, 20.0, 15.0];

/// AUC matrix, rows are conditions and columns yaw bins.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub row_label: String,
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl AblationTable {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows.len(), self.columns.len())
    }

    /// Fields holding commas (the yaw bin labels) are double-quoted.
    pub fn to_csv(&self) -> String {
        let mut s = csv_field(&self.row_label);
        for c in &self.columns {
            s.push(',');
            s.push_str(&csv_field(c));
        }
        s.push('\n');
        for (r, vals) in self.rows.iter().zip(&self.values) {
            s.push_str(&csv_field(r));
            for v in vals {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// AUC at the default threshold per yaw bin.
pub fn auc_by_yaw(results: &[EvalResult]) -> Result<Vec<f64>> {
    let mut bins: [Vec<EvalResult>; 3] = Default::default();
    for r in results {
        let y = r
            .yaw
            .ok_or_else(|| CoreError::Data(format!("sample {} has no yaw", r.id)))?;
        bins[yaw_bin(y)].push(r.clone());
    }
    bins.iter()
        .enumerate()
        .map(|(b, rs)| {
            if rs.is_empty() {
                return Err(CoreError::InsufficientBin {
                    bin: YAW_BINS[b].to_string(),
                    have: 0,
                    need: 1,
                });
            }
            Ok(auc(&ced_curve(rs, CED_STEP)?, AUC_THRESHOLD))
        })
        .collect()
}

/// Runs `protocol` over `samples`. `Size` takes one labelled predictor per
/// row; every other protocol takes exactly one.
pub fn ablation_report<T: Scalar>(
    predictors: &[(String, Predictor<'_, T>)],
    samples: &[Sample],
    protocol: &Protocol,
    opts: &EvalOptions,
) -> Result<AblationTable> {
    let single = || -> Result<&Predictor<'_, T>> {
        match predictors {
            [(_, p)] => Ok(p),
            _ => Err(CoreError::Config(format!(
                "this protocol takes one model, got {}",
                predictors.len()
            ))),
        }
    };
    let columns: Vec<String> = YAW_BINS.iter().map(|s| s.to_string()).collect();
    let (row_label, rows, values) = match protocol {
        Protocol::Yaw => {
            let r = evaluate(single()?, samples, opts)?;
            ("condition".to_string(), vec!["auc".to_string()], vec![auc_by_yaw(&r)?])
        }
        Protocol::Noise(levels) => {
            let p = single()?;
            let mut vals = Vec::new();
            for &l in levels {
                let o = EvalOptions { noise: l, ..opts.clone() };
                vals.push(auc_by_yaw(&evaluate(p, samples, &o)?)?);
            }
            ("noise".to_string(), levels.iter().map(|l| l.to_string()).collect(), vals)
        }
        Protocol::Resolution(sizes) => {
            let p = single()?;
            let mut vals = Vec::new();
            for &px in sizes {
                let o = EvalOptions {
                    face_px: Some(px),
                    ..opts.clone()
                };
                vals.push(auc_by_yaw(&evaluate(p, samples, &o)?)?);
            }
            ("face_px".to_string(), sizes.iter().map(|s| s.to_string()).collect(), vals)
        }
        Protocol::Size => {
            if predictors.is_empty() {
                return Err(CoreError::Config("size protocol needs at least one model".into()));
            }
            let mut vals = Vec::new();
            for (_, p) in predictors {
                vals.push(auc_by_yaw(&evaluate(p, samples, opts)?)?);
            }
            ("model".to_string(), predictors.iter().map(|(l, _)| l.clone()).collect(), vals)
        }
    };
    Ok(AblationTable {
        row_label,
        rows,
        columns,
        values,
    })
}
