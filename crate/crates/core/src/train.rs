//! Minibatch training with RMSprop and a step learning-rate schedule.

use fan_tensor::{Graph, Mode, RmsPropState, Scalar, TensorError};
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::Model;
use crate::batch::{depth_targets, forward, guides_for, heatmap_targets, predict, GuideSource, Prediction};
use crate::codec::LandmarkSet;
use crate::config::{ModelKind, TrainConfig};
use crate::data::augment::{augment, AugmentConfig};
use crate::data::{crop_and_resize, Sample};
use crate::error::{CoreError, Result};
use crate::metrics::{depth_error, nme};

/// Weights, optimizer state and the number of finished epochs.
#[derive(Debug, Clone)]
pub struct TrainState<T: Scalar> {
    pub model: Model<T>,
    pub optim: RmsPropState<T>,
    pub epoch: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: Model<T>, cfg: &TrainConfig) -> Result<Self> {
        Ok(TrainState {
            model,
            optim: RmsPropState::new(cfg.lr_at(1))?,
            epoch: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean batch loss; zero for the pre-training entry.
    pub train_loss: f64,
    /// Mean NME for heatmap networks, mean `|dz| / d` for the depth regressor.
    pub val_error: f64,
}

/// Crops every sample to the square network input around its own box.
pub fn prepare(samples: &[Sample], input_res: usize, margin: f64) -> Result<Vec<Sample>> {
    samples
        .iter()
        .map(|s| Ok(crop_and_resize(s, &s.bbox, input_res, margin)?.0))
        .collect()
}

/// Splits off the last tenth (at least one sample) for validation.
pub fn split_validation<T: Clone>(items: &[T]) -> (Vec<T>, Vec<T>) {
    let n_val = (items.len() / 10).max(1).min(items.len().saturating_sub(1));
    let cut = items.len() - n_val;
    (items[..cut].to_vec(), items[cut..].to_vec())
}

fn mix(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mean validation error of `model` on prepared crops.
pub fn validation_error<T: Scalar>(model: &Model<T>, crops: &[Sample], guide: GuideSource, batch: usize) -> Result<f64> {
    let refs: Vec<&Sample> = crops.iter().collect();
    let guides: Option<Vec<LandmarkSet>> = match model.spec.kind {
        ModelKind::Guided | ModelKind::Depth => Some(guides_for(&refs, guide)),
        _ => None,
    };
    let preds = predict(model, &refs, guides.as_deref(), batch)?;
    let mut total = 0.0;
    for (s, p) in crops.iter().zip(&preds) {
        total += match p {
            Prediction::Landmarks(l) => nme(&s.landmarks, l, &s.bbox)?,
            Prediction::Depth(z) => {
                let d = s.bbox.d();
                let gt: Vec<f64> = s.landmarks.depths();
                let pred: Vec<f64> = z.iter().map(|v| v * d).collect();
                depth_error(&gt, &pred, d)?
            }
        };
    }
    Ok(total / crops.len() as f64)
}

/// Runs epochs `state.epoch + 1 ..= cfg.epochs` on prepared crops. A
/// pre-training validation entry is logged first when starting from
/// epoch 0. `epoch_lr` overrides the schedule when given.
pub fn train<T: Scalar>(
    state: &mut TrainState<T>,
    train_crops: &[Sample],
    val_crops: &[Sample],
    cfg: &TrainConfig,
    guide: GuideSource,
    epoch_lr: Option<&dyn Fn(usize) -> f64>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if train_crops.is_empty() {
        return Err(CoreError::Data("no training samples".into()));
    }
    let kind = state.model.spec.kind;
    if kind == ModelKind::Depth && train_crops.iter().any(|s| !s.landmarks.is_3d()) {
        return Err(CoreError::Data("depth training needs depth values for every sample".into()));
    }
    let input_res = state.model.spec.input_resolution();
    let hm_res = state.model.spec.fan.as_ref().map(|f| f.heatmap_resolution()).unwrap_or(0);
    let aug: Option<AugmentConfig> = cfg.augment.config();
    let mut logs = Vec::new();
    if state.epoch == 0 && !val_crops.is_empty() {
        let e = validation_error(&state.model, val_crops, guide, cfg.batch_size)?;
        info!("epoch 0 val {e:.5}");
        let log = EpochLog {
            epoch: 0,
            learning_rate: cfg.lr_at(1),
            train_loss: 0.0,
            val_error: e,
        };
        on_epoch(&log);
        logs.push(log);
    }
    let mut order: Vec<usize> = (0..train_crops.len()).collect();
    for epoch in state.epoch + 1..=cfg.epochs {
        let lr = epoch_lr.map_or_else(|| cfg.lr_at(epoch), |f| f(epoch));
        state.optim.set_learning_rate(lr)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let owned: Vec<Sample> = match &aug {
                Some(a) => chunk
                    .iter()
                    .map(|&i| augment(&train_crops[i], &a.with_seed(mix(cfg.seed, epoch, i))))
                    .collect(),
                None => chunk.iter().map(|&i| train_crops[i].clone()).collect(),
            };
            let crops: Vec<&Sample> = owned.iter().collect();
            let guides = guides_for(&crops, guide);
            let guide_refs: Vec<&LandmarkSet> = guides.iter().collect();
            let store = &mut state.model.store;
            store.zero_grad();
            let mut g = Graph::new(store, Mode::Train);
            let outputs = forward(&state.model.net, kind, &mut g, &crops, Some(&guide_refs))?;
            let loss = if kind == ModelKind::Depth {
                let t = g.input(&depth_targets::<T>(&crops)?);
                g.tape.mse_loss(outputs[0], t)?
            } else {
                let t = g.input(&heatmap_targets::<T>(&crops, input_res, hm_res, cfg.sigma)?);
                crate::arch::Fan::loss(&mut g, &outputs, t)?
            };
            let value = g.tape.value(loss)[0].as_f64();
            if !value.is_finite() {
                return Err(TensorError::Diverged(format!("loss at epoch {epoch}")).into());
            }
            g.backward(loss)?;
            state.optim.step(&mut state.model.store)?;
            loss_sum += value;
            batches += 1;
        }
        state.epoch = epoch;
        let val_error = if val_crops.is_empty() {
            f64::NAN
        } else {
            validation_error(&state.model, val_crops, guide, cfg.batch_size)?
        };
        let log = EpochLog {
            epoch,
            learning_rate: lr,
            train_loss: loss_sum / batches as f64,
            val_error,
        };
        info!(
            "epoch {epoch} lr {lr:e} loss {:.6} val {val_error:.5}",
            log.train_loss
        );
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}
