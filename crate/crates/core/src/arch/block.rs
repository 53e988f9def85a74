use fan_tensor::{BatchNorm2d, Conv2d, Graph, ParamStore, Scalar, Var};
use rand::Rng;

use crate::config::{BlockConfig, BlockKind};
use crate::error::Result;

/// Pre-activation residual block.
///
/// Hierarchical: three cascaded 3x3 convolutions producing `out/2`, `out/4`
/// and `out/4` channels, concatenated. Bottleneck: 1x1 -> 3x3 -> 1x1 with
/// `out/2` inner channels. Convolutions inside the block carry no bias.
#[derive(Debug, Clone)]
pub struct Block {
    pub cfg: BlockConfig,
    bn1: BatchNorm2d,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    conv2: Conv2d,
    bn3: BatchNorm2d,
    conv3: Conv2d,
    skip: Option<(BatchNorm2d, Conv2d)>,
}

impl Block {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: BlockConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (i, o) = (cfg.in_channels, cfg.out_channels);
        let n = |s: &str| format!("{name}.{s}");
        let (c1, c2, c3, k1, k3) = match cfg.kind {
            BlockKind::Hierarchical => ((i, o / 2), (o / 2, o / 4), (o / 4, o / 4), 3, 3),
            BlockKind::Bottleneck => ((i, o / 2), (o / 2, o / 2), (o / 2, o), 1, 1),
        };
        let bn1 = BatchNorm2d::new(store, &n("bn1"), c1.0);
        let conv1 = Conv2d::new(store, &n("conv1"), c1.0, c1.1, k1, 1, k1 / 2, false, rng);
        let bn2 = BatchNorm2d::new(store, &n("bn2"), c2.0);
        let conv2 = Conv2d::new(store, &n("conv2"), c2.0, c2.1, 3, 1, 1, false, rng);
        let bn3 = BatchNorm2d::new(store, &n("bn3"), c3.0);
        let conv3 = Conv2d::new(store, &n("conv3"), c3.0, c3.1, k3, 1, k3 / 2, false, rng);
        let skip = (i != o).then(|| {
            (
                BatchNorm2d::new(store, &n("skip.bn"), i),
                Conv2d::new(store, &n("skip.conv"), i, o, 1, 1, 0, false, rng),
            )
        });
        Ok(Block {
            cfg,
            bn1,
            conv1,
            bn2,
            conv2,
            bn3,
            conv3,
            skip,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let a = self.bn1.forward_relu(g, x)?;
        let a = self.conv1.forward(g, a)?;
        let b = self.bn2.forward_relu(g, a)?;
        let b = self.conv2.forward(g, b)?;
        let c = self.bn3.forward_relu(g, b)?;
        let c = self.conv3.forward(g, c)?;
        let y = match self.cfg.kind {
            BlockKind::Hierarchical => g.tape.concat_channels(&[a, b, c])?,
            BlockKind::Bottleneck => c,
        };
        let s = self.skip_forward(g, x)?;
        Ok(g.tape.add(y, s)?)
    }

    pub fn skip_forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        match &self.skip {
            None => Ok(x),
            Some((bn, conv)) => {
                let s = bn.forward_relu(g, x)?;
                Ok(conv.forward(g, s)?)
            }
        }
    }

    pub fn skip_params(&self) -> usize {
        self.skip
            .as_ref()
            .map_or(0, |(bn, conv)| bn.num_params() + conv.num_params())
    }

    pub fn num_params(&self) -> usize {
        [&self.bn1, &self.bn2, &self.bn3]
            .iter()
            .map(|b| b.num_params())
            .sum::<usize>()
            + [&self.conv1, &self.conv2, &self.conv3]
                .iter()
                .map(|c| c.num_params())
                .sum::<usize>()
            + self.skip_params()
    }
}

/// Closed-form trainable-scalar count of a block.
pub fn block_params(cfg: BlockConfig) -> usize {
    let (i, o) = (cfg.in_channels, cfg.out_channels);
    let skip = if i != o { 2 * i + i * o } else { 0 };
    skip + match cfg.kind {
        BlockKind::Hierarchical => {
            let (h, q) = (o / 2, o / 4);
            2 * i + 9 * i * h + 2 * h + 9 * h * q + 2 * q + 9 * q * q
        }
        BlockKind::Bottleneck => {
            let h = o / 2;
            2 * i + i * h + 2 * h + 9 * h * h + 2 * h + h * o
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fan_tensor::{Mode, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(kind: BlockKind, i: usize, o: usize) -> (ParamStore<f32>, Block) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let b = Block::new(&mut store, "b", BlockConfig::new(kind, i, o), &mut rng).unwrap();
        (store, b)
    }

    #[test]
    fn hierarchical_preserves_shape_and_splits_channels() {
        let (mut store, b) = build(BlockKind::Hierarchical, 256, 256);
        assert_eq!(b.conv1.out_channels, 128);
        assert_eq!(b.conv2.out_channels, 64);
        assert_eq!(b.conv3.out_channels, 64);
        assert_eq!(b.skip_params(), 0);
        let mut g = Graph::new(&mut store, Mode::Train);
        let x = g.input(&Tensor::full(vec![2, 256, 4, 4], 0.5));
        let y = b.forward(&mut g, x).unwrap();
        assert_eq!(g.tape.shape(y), &[2, 256, 4, 4]);
    }

    #[test]
    fn projection_skip_when_channels_change() {
        for kind in [BlockKind::Hierarchical, BlockKind::Bottleneck] {
            let (mut store, b) = build(kind, 8, 16);
            assert_eq!(b.skip_params(), 2 * 8 + 8 * 16);
            assert_eq!(b.num_params(), store.num_trainable_scalars());
            assert_eq!(b.num_params(), block_params(b.cfg));
            let mut g = Graph::new(&mut store, Mode::Train);
            let x = g.input(&Tensor::full(vec![1, 8, 6, 6], 1.0));
            let y = b.forward(&mut g, x).unwrap();
            assert_eq!(g.tape.shape(y), &[1, 16, 6, 6]);
        }
    }

    #[test]
    fn zero_input_gives_skip_output() {
        let (mut store, b) = build(BlockKind::Hierarchical, 8, 16);
        let mut g = Graph::new(&mut store, Mode::Train);
        let x = g.input(&Tensor::zeros(vec![2, 8, 4, 4]));
        let y = b.forward(&mut g, x).unwrap();
        let s = b.skip_forward(&mut g, x).unwrap();
        assert_eq!(g.tape.value(y), g.tape.value(s));
    }

    #[test]
    fn indivisible_split_is_a_config_error() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = BlockConfig::new(BlockKind::Hierarchical, 8, 10);
        assert!(Block::new(&mut store, "b", cfg, &mut rng).is_err());
    }
}
