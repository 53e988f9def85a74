//! Network construction: blocks, hourglasses, stacked FAN, the guided
//! variant and the depth regressor.

pub mod block;
pub mod depth;
pub mod fan;
pub mod hourglass;

use fan_tensor::{ParamStore, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use block::{block_params, Block};
pub use depth::{depth_params, DepthRegressor};
pub use fan::{fan_params, Fan};
pub use hourglass::{hourglass_params, Hourglass};

use crate::config::{FanConfig, ModelKind, ModelSpec};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone)]
pub enum Network {
    Fan(Fan),
    Depth(DepthRegressor),
}

/// A network description together with its weights.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub spec: ModelSpec,
    pub net: Network,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes from `seed`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = match spec.kind {
            ModelKind::Depth => Network::Depth(DepthRegressor::new(
                &mut store,
                spec.depth.as_ref().expect("validated"),
                &mut rng,
            )?),
            _ => Network::Fan(Fan::new(&mut store, spec.fan.as_ref().expect("validated"), &mut rng)?),
        };
        Ok(Model {
            spec: spec.clone(),
            net,
            store,
        })
    }

    pub fn fan(&self) -> Result<&Fan> {
        match &self.net {
            Network::Fan(f) => Ok(f),
            Network::Depth(_) => Err(CoreError::Contract("expected a heatmap network".into())),
        }
    }

    pub fn depth(&self) -> Result<&DepthRegressor> {
        match &self.net {
            Network::Depth(d) => Ok(d),
            Network::Fan(_) => Err(CoreError::Contract("expected a depth regressor".into())),
        }
    }

    pub fn num_params(&self) -> usize {
        self.store.num_trainable_scalars()
    }
}

pub fn build_fan<T: Scalar>(cfg: &FanConfig, seed: u64) -> Result<Model<T>> {
    let kind = if cfg.is_guided() { ModelKind::Guided } else { ModelKind::Fan2d };
    Model::build(&ModelSpec::fan(kind, cfg.clone()), seed)
}

pub fn build_2d_to_3d_fan<T: Scalar>(cfg: &FanConfig, seed: u64) -> Result<Model<T>> {
    if !cfg.is_guided() {
        return Err(CoreError::Config(format!(
            "2D-to-3D network needs in_channels = 3 + {} = {}, got {}",
            cfg.num_landmarks,
            3 + cfg.num_landmarks,
            cfg.in_channels
        )));
    }
    Model::build(&ModelSpec::fan(ModelKind::Guided, cfg.clone()), seed)
}

/// Trainable scalars implied by a model description.
pub fn count_parameters(spec: &ModelSpec) -> usize {
    match (spec.kind, &spec.fan, &spec.depth) {
        (ModelKind::Depth, _, Some(d)) => depth_params(d),
        (_, Some(f), _) => fan_params(f),
        _ => 0,
    }
}

/// Full-scale size ladder: four stacks down to one at full width, then
/// narrower single-stack networks.
pub fn size_sweep_configs() -> Vec<FanConfig> {
    size_sweep_from(&FanConfig::full())
}

/// The same ladder shape anchored at `base`. Widths halve while they stay
/// multiples of 8, and at most two narrowing steps are taken.
pub fn size_sweep_from(base: &FanConfig) -> Vec<FanConfig> {
    let mut out = Vec::new();
    for stacks in (1..=base.num_stacks).rev() {
        out.push(FanConfig {
            num_stacks: stacks,
            ..base.clone()
        });
    }
    let mut width = base.width;
    for _ in 0..2 {
        width /= 2;
        if width < 8 || width % 8 != 0 {
            break;
        }
        out.push(FanConfig {
            num_stacks: 1,
            width,
            ..base.clone()
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use fan_tensor::{Graph, Mode, Tensor};

    #[test]
    fn full_network_parameter_count_is_in_range() {
        let n = fan_params(&FanConfig::full());
        assert!((20_000_000..=28_000_000).contains(&n), "{n}");
    }

    #[test]
    fn full_guided_stem_takes_71_channels() {
        let cfg = FanConfig::full().guided();
        assert_eq!(cfg.in_channels, 71);
        let diff = fan_params(&cfg) - fan_params(&FanConfig::full());
        assert_eq!(diff, 68 * (256 / 4) * 49);
    }

    #[test]
    fn guided_toy_accepts_eight_channels() {
        let m = build_2d_to_3d_fan::<f32>(&FanConfig::tiny(5).guided(), 0).unwrap();
        let store = &m.store;
        let w = store.get(store.find("stem.conv.weight").unwrap());
        assert_eq!(w.shape(), &[8, 8, 7, 7]);
        assert!(build_2d_to_3d_fan::<f32>(&FanConfig::tiny(5), 0).is_err());
    }

    #[test]
    fn sweep_is_strictly_decreasing_and_wide() {
        let sweep = size_sweep_configs();
        assert_eq!(sweep[0], FanConfig::full());
        assert_eq!(sweep.len(), 6);
        let counts: Vec<usize> = sweep.iter().map(fan_params).collect();
        assert!(counts.windows(2).all(|w| w[0] > w[1]), "{counts:?}");
        assert!(counts[0] >= 10 * counts[counts.len() - 1]);
    }

    #[test]
    fn tiny_forward_shapes_and_gradient_reach() {
        let cfg = FanConfig::tiny(5);
        let mut m = build_fan::<f64>(&cfg, 1).unwrap();
        let Network::Fan(fan) = m.net.clone() else { unreachable!() };
        let mut g = Graph::new(&mut m.store, Mode::Train);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = g.input(&Tensor::uniform(vec![2, 3, 64, 64], 0.0, 1.0, &mut rng));
        let t = g.input(&Tensor::uniform(vec![2, 5, 16, 16], 0.0, 1.0, &mut rng));
        let outs = fan.forward(&mut g, x).unwrap();
        assert_eq!(outs.len(), 2);
        for &o in &outs {
            assert_eq!(g.tape.shape(o), &[2, 5, 16, 16]);
        }
        let loss = Fan::loss(&mut g, &outs, t).unwrap();
        g.backward(loss).unwrap();
        for id in m.store.trainable() {
            let t = m.store.get(id);
            let grad = t.grad().unwrap();
            assert_eq!(grad.len(), t.numel());
            assert!(grad.iter().all(|v| v.is_finite()));
            assert!(grad.iter().any(|v| *v != 0.0), "{} has zero gradient", m.store.name(id));
        }
    }
}
