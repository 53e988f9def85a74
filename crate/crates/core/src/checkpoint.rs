//! Binary checkpoints.
//!
//! ```text
//! "FANCKPT1"  u32 version
//! u32 len, UTF-8 config text
//! u32 tensor count
//! per tensor: u32 len, UTF-8 name, u8 dtype (1 = f32, 2 = f64),
//!             u32 rank, u64 extents..., raw little-endian data
//! ```
//!
//! The config text is TOML holding the model and training sections plus the
//! epoch counter. Optimizer accumulators are stored as extra tensors named
//! `rmsprop:<parameter>`.

use std::fs;
use std::path::Path;

use fan_tensor::{DType, RmsPropState, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::arch::Model;
use crate::config::{ModelSpec, RunConfig, TrainConfig};
use crate::error::{CoreError, Result};
use crate::train::TrainState;

pub const MAGIC: &[u8; 8] = b"FANCKPT1";
pub const VERSION: u32 = 1;
const OPTIM_PREFIX: &str = "rmsprop:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimHeader {
    learning_rate: f64,
    alpha: f64,
    eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    epoch: usize,
    model: ModelSpec,
    train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer: Option<OptimHeader>,
}

/// Everything a checkpoint restores.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub run: RunConfig,
    pub epoch: usize,
    pub model: Model<T>,
    pub optim: Option<RmsPropState<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Training state to resume from; a fresh optimizer when none was saved.
    pub fn into_state(self) -> Result<(TrainState<T>, RunConfig)> {
        let optim = match self.optim {
            Some(o) => o,
            None => RmsPropState::new(self.run.train.lr_at(self.epoch + 1))?,
        };
        Ok((
            TrainState {
                model: self.model,
                optim,
                epoch: self.epoch,
            },
            self.run,
        ))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("field fits in u32").to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_str(out, name);
    out.push(T::DTYPE.tag());
    put_u32(out, t.shape().len());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Serializes weights, buffers, the config and, when `optim` is given, the
/// optimizer state.
pub fn to_bytes<T: Scalar>(model: &Model<T>, train: &TrainConfig, epoch: usize, optim: Option<&RmsPropState<T>>) -> Vec<u8> {
    let header = Header {
        epoch,
        model: model.spec.clone(),
        train: train.clone(),
        optimizer: optim.map(|o| OptimHeader {
            learning_rate: o.learning_rate,
            alpha: o.alpha,
            eps: o.eps,
        }),
    };
    let text = toml::to_string(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, &text);
    let entries = model.store.entries();
    let accs: Vec<(String, &Tensor<T>)> = match optim {
        Some(o) if !o.accumulators.is_empty() => fan_tensor::optim::accumulator_names(&model.store)
            .into_iter()
            .map(|n| format!("{OPTIM_PREFIX}{n}"))
            .zip(&o.accumulators)
            .collect(),
        _ => Vec::new(),
    };
    put_u32(&mut out, entries.len() + accs.len());
    for e in entries {
        put_tensor(&mut out, &e.name, &e.tensor);
    }
    for (name, t) in &accs {
        put_tensor(&mut out, name, t);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CoreError::Checkpoint(format!("truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CoreError::Checkpoint("name is not UTF-8".into()))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<(String, Tensor<T>)> {
        let name = self.string()?;
        let tag = self.take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| CoreError::Checkpoint(format!("{name}: unknown dtype tag {tag}")))?;
        let rank = self.u32()?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()?);
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(dtype.size()).ok_or_else(|| CoreError::Checkpoint(format!("{name}: size overflow")))?)?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
        };
        Ok((name, Tensor::new(shape, data)?))
    }
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CoreError::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(CoreError::Checkpoint(format!("unsupported version {version}")));
    }
    let text = r.string()?;
    let header: Header = toml::from_str(&text).map_err(|e| CoreError::Checkpoint(format!("config: {e}")))?;
    let run = RunConfig {
        model: header.model,
        train: header.train,
    };
    run.model.validate()?;
    let mut model = Model::<T>::build(&run.model, 0)?;
    let count = r.u32()?;
    let mut seen = vec![false; model.store.len()];
    let mut accs: Vec<(String, Tensor<T>)> = Vec::new();
    for _ in 0..count {
        let (name, t) = r.tensor::<T>()?;
        if let Some(p) = name.strip_prefix(OPTIM_PREFIX) {
            accs.push((p.to_string(), t));
            continue;
        }
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| CoreError::Checkpoint(format!("unexpected tensor {name}")))?;
        let slot = model.store.get_mut(id);
        if slot.shape() != t.shape() {
            return Err(CoreError::Checkpoint(format!(
                "{name}: stored shape {:?}, model expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        slot.data_mut().copy_from_slice(t.data());
        seen[id.index()] = true;
    }
    if r.pos != bytes.len() {
        return Err(CoreError::Checkpoint("trailing bytes".into()));
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(CoreError::Checkpoint(format!("missing tensor {}", model.store.entries()[i].name)));
    }
    let optim = match header.optimizer {
        None => None,
        Some(h) => {
            let mut o = RmsPropState::with_hyper(h.learning_rate, h.alpha, h.eps)?;
            if !accs.is_empty() {
                let names = fan_tensor::optim::accumulator_names(&model.store);
                if names.len() != accs.len() || names.iter().zip(&accs).any(|(a, (b, _))| a != b) {
                    return Err(CoreError::Checkpoint("optimizer state does not match the model".into()));
                }
                o.accumulators = accs.into_iter().map(|(_, t)| t).collect();
            }
            Some(o)
        }
    };
    Ok(Checkpoint {
        run,
        epoch: header.epoch,
        model,
        optim,
    })
}

pub fn save<T: Scalar>(path: &Path, state: &TrainState<T>, train: &TrainConfig) -> Result<()> {
    let bytes = to_bytes(&state.model, train, state.epoch, Some(&state.optim));
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        CoreError::Checkpoint(m) => CoreError::Checkpoint(format!("{}: {m}", path.display())),
        e => e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{FanConfig, ModelKind};
    use fan_tensor::{Graph, Mode};
    use rand::SeedableRng;

    fn small() -> Model<f32> {
        let cfg = FanConfig {
            num_stacks: 1,
            hg_depth: 1,
            width: 16,
            input_resolution: 16,
            ..FanConfig::tiny(3)
        };
        Model::build(&ModelSpec::fan(ModelKind::Fan2d, cfg), 5).unwrap()
    }

    fn run(model: &Model<f32>) -> Vec<f32> {
        let mut store = model.store.clone();
        let x = Tensor::<f32>::uniform(vec![2, 3, 16, 16], 0.0, 1.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new(&mut store, Mode::Eval);
        let xi = g.input(&x);
        let out = model.fan().unwrap().forward(&mut g, xi).unwrap();
        g.tape.value(out[0]).to_vec()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = small();
        let mut o = RmsPropState::<f32>::new(1e-4).unwrap();
        o.accumulators = fan_tensor::optim::accumulator_names(&m.store)
            .iter()
            .map(|n| {
                let id = m.store.find(n).unwrap();
                Tensor::full(m.store.get(id).shape().to_vec(), 0.5)
            })
            .collect();
        let bytes = to_bytes(&m, &TrainConfig::fan(), 7, Some(&o));
        assert_eq!(&bytes[..8], MAGIC);
        let c = from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(c.epoch, 7);
        assert_eq!(c.model.store, m.store);
        assert_eq!(c.optim.unwrap(), o);
        assert_eq!(run(&c.model), run(&m));
        assert_eq!(to_bytes(&c.model, &c.run.train, 7, None), to_bytes(&m, &TrainConfig::fan(), 7, None));
    }

    #[test]
    fn damaged_files_are_rejected() {
        let bytes = to_bytes(&small(), &TrainConfig::fan(), 0, None);
        assert!(matches!(from_bytes::<f32>(&bytes[..bytes.len() - 3]), Err(CoreError::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes::<f32>(&bad), Err(CoreError::Checkpoint(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(from_bytes::<f32>(&extra), Err(CoreError::Checkpoint(_))));
    }

    #[test]
    fn loads_across_precisions() {
        let m = small();
        let c = from_bytes::<f64>(&to_bytes(&m, &TrainConfig::fan(), 0, None)).unwrap();
        let back = from_bytes::<f32>(&to_bytes(&c.model, &c.run.train, 0, None)).unwrap();
        assert_eq!(back.model.store, m.store);
    }
}
