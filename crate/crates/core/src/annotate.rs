//! Landmark annotation: a 2D network proposes landmarks, the guided network
//! turns them into projected 3D landmarks and an optional depth regressor
//! adds `z`.

use std::fs;
use std::path::Path;

use fan_tensor::Scalar;
use log::info;

use crate::arch::Model;
use crate::batch::{guide_batch, predict, Prediction};
use crate::codec::{guide_channels, LandmarkSet};
use crate::config::ModelKind;
use crate::data::manifest::{write_manifest, Record};
use crate::data::pts::{write_depth, write_pts};
use crate::data::{crop_and_resize, Sample};
use crate::error::{CoreError, Result};
use crate::eval::{predict_depth, EvalOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub id: String,
    /// Original image pixels; `z` is zero without a depth regressor.
    pub landmarks: LandmarkSet,
    pub yaw: Option<f64>,
}

/// Result of one annotation run. The two digests cover the guide maps fed to
/// the guided network and an independent encoding of the 2D predictions;
/// they agree when the plumbing is consistent.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRun {
    pub annotations: Vec<Annotation>,
    pub fed_guide_digest: u64,
    pub encoded_guide_digest: u64,
}

fn fnv1a(hash: &mut u64, bytes: &[u8]) {
    for b in bytes {
        *hash ^= *b as u64;
        *hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
}

const FNV_OFFSET: u64 = 0xCBF2_9CE4_8422_2325;

pub fn annotate<T: Scalar>(
    model_2d: &Model<T>,
    guided: &Model<T>,
    depth: Option<&Model<T>>,
    samples: &[Sample],
    opts: &EvalOptions,
) -> Result<AnnotationRun> {
    if guided.spec.kind != ModelKind::Guided {
        return Err(CoreError::Config("second network must be a guided 2D-to-3D model".into()));
    }
    if matches!(model_2d.spec.kind, ModelKind::Guided | ModelKind::Depth) {
        return Err(CoreError::Config("first network must be a plain 2D model".into()));
    }
    if model_2d.spec.num_landmarks() != guided.spec.num_landmarks() {
        return Err(CoreError::Contract("the two networks predict different landmark counts".into()));
    }
    let res2d = model_2d.spec.input_resolution();
    let res3d = guided.spec.input_resolution();
    let mut first = Vec::with_capacity(samples.len());
    let mut second = Vec::with_capacity(samples.len());
    for s in samples {
        first.push(crop_and_resize(s, &s.bbox, res2d, opts.margin)?);
        second.push(crop_and_resize(s, &s.bbox, res3d, opts.margin)?);
    }
    let refs: Vec<&Sample> = first.iter().map(|(c, _)| c).collect();
    let proposals: Vec<LandmarkSet> = predict(model_2d, &refs, None, opts.batch)?
        .into_iter()
        .zip(&first)
        .map(|(p, (_, t))| match p {
            Prediction::Landmarks(l) => t.inverse().map_landmarks(&l),
            Prediction::Depth(_) => unreachable!("heatmap network"),
        })
        .collect();
    let guides: Vec<LandmarkSet> = proposals
        .iter()
        .zip(&second)
        .map(|(l, (_, t))| t.map_landmarks(l))
        .collect();

    let mut fed = FNV_OFFSET;
    let mut encoded = FNV_OFFSET;
    for g in &guides {
        let t = guide_batch::<f32>(&[g], res3d)?;
        for v in t.data() {
            fnv1a(&mut fed, &v.to_le_bytes());
        }
        for v in &guide_channels(g, (res3d, res3d)).maps {
            fnv1a(&mut encoded, &(*v as f32).to_le_bytes());
        }
    }
    info!("guide digest fed {fed:016x} encoded {encoded:016x}");

    let refs: Vec<&Sample> = second.iter().map(|(c, _)| c).collect();
    let projected: Vec<LandmarkSet> = predict(guided, &refs, Some(&guides), opts.batch)?
        .into_iter()
        .zip(&second)
        .map(|(p, (_, t))| match p {
            Prediction::Landmarks(l) => t.inverse().map_landmarks(&l),
            Prediction::Depth(_) => unreachable!("heatmap network"),
        })
        .collect();
    let depths: Vec<Vec<f64>> = match depth {
        Some(m) => predict_depth(m, samples, Some(&projected), &EvalOptions { noise: 0.0, face_px: None, ..opts.clone() })?,
        None => samples.iter().map(|s| vec![0.0; s.landmarks.len()]).collect(),
    };
    let annotations = samples
        .iter()
        .zip(projected)
        .zip(depths)
        .map(|((s, l), z)| Annotation {
            id: s.id.clone(),
            landmarks: l.with_depth(&z),
            yaw: s.yaw,
        })
        .collect();
    Ok(AnnotationRun {
        annotations,
        fed_guide_digest: fed,
        encoded_guide_digest: encoded,
    })
}

/// Writes `<id>.pts` with a depth sidecar `<id>.depth` per annotation and a
/// manifest pointing at the original images.
pub fn write_annotations(run: &AnnotationRun, images: &[String], out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir, e))?;
    let mut records = Vec::with_capacity(run.annotations.len());
    for (a, img) in run.annotations.iter().zip(images) {
        let pts = format!("{}.pts", a.id);
        let depth = format!("{}.depth", a.id);
        let p = out_dir.join(&pts);
        fs::write(&p, write_pts(&a.landmarks)).map_err(|e| CoreError::io(&p, e))?;
        let p = out_dir.join(&depth);
        fs::write(&p, write_depth(&a.landmarks.depths())).map_err(|e| CoreError::io(&p, e))?;
        records.push(Record {
            image: img.clone(),
            pts,
            depth: Some(depth),
            yaw: a.yaw,
        });
    }
    let p = out_dir.join("manifest.tsv");
    fs::write(&p, write_manifest(&records)).map_err(|e| CoreError::io(&p, e))
}
