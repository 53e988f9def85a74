use fan_tensor::{BatchNorm2d, Conv2d, Graph, ParamStore, Scalar, Var};
use rand::Rng;

use super::block::{block_params, Block};
use crate::config::{BlockConfig, DepthRegressorConfig};
use crate::error::{CoreError, Result};

/// Residual trunk mapping RGB plus `N` heatmaps to one depth per landmark.
///
/// 7x7 stride-2 stem, then `num_stages` blocks each followed by a 2x2 max
/// pool, then a head convolution whose kernel covers the remaining grid.
#[derive(Debug, Clone)]
pub struct DepthRegressor {
    pub cfg: DepthRegressorConfig,
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Block>,
    bn_final: BatchNorm2d,
    head: Conv2d,
}

impl DepthRegressor {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &DepthRegressorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let stem_conv = Conv2d::new(store, "depth.stem.conv", cfg.in_channels, w, 7, 2, 3, true, rng);
        let stem_bn = BatchNorm2d::new(store, "depth.stem.bn", w);
        let stages = (0..cfg.num_stages)
            .map(|i| Block::new(store, &format!("depth.stage{i}"), BlockConfig::new(cfg.block, w, w), rng))
            .collect::<Result<Vec<_>>>()?;
        let bn_final = BatchNorm2d::new(store, "depth.bn_final", w);
        let k = cfg.final_resolution();
        let head = Conv2d::new(store, "depth.head", w, cfg.num_landmarks, k, 1, 0, true, rng);
        Ok(DepthRegressor {
            cfg: cfg.clone(),
            stem_conv,
            stem_bn,
            stages,
            bn_final,
            head,
        })
    }

    /// `image` is `[B,3,R,R]`, `heatmaps` is `[B,N,R,R]`; returns `[B,N]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, image: Var, heatmaps: Var) -> Result<Var> {
        let (si, sh) = (g.tape.shape(image).to_vec(), g.tape.shape(heatmaps).to_vec());
        let r = self.cfg.input_resolution;
        if si.len() != 4 || si[1] != 3 || si[2] != r || si[3] != r {
            return Err(CoreError::Config(format!("depth regressor expects [B,3,{r},{r}] image, got {si:?}")));
        }
        if sh.len() != 4 || sh[0] != si[0] || sh[1] != self.cfg.num_landmarks || sh[2..] != si[2..] {
            return Err(CoreError::Config(format!(
                "heatmaps {sh:?} do not match image {si:?} with {} landmarks",
                self.cfg.num_landmarks
            )));
        }
        let x = g.tape.concat_channels(&[image, heatmaps])?;
        let x = self.stem_conv.forward(g, x)?;
        let mut x = self.stem_bn.forward_relu(g, x)?;
        for stage in &self.stages {
            x = stage.forward(g, x)?;
            x = g.tape.maxpool2x2(x)?;
        }
        let x = self.bn_final.forward_relu(g, x)?;
        let z = self.head.forward(g, x)?;
        Ok(g.tape.reshape(z, vec![si[0], self.cfg.num_landmarks])?)
    }
}

pub fn depth_params(cfg: &DepthRegressorConfig) -> usize {
    let w = cfg.width;
    let k = cfg.final_resolution();
    cfg.in_channels * w * 49
        + w
        + 2 * w
        + cfg.num_stages * block_params(BlockConfig::new(cfg.block, w, w))
        + 2 * w
        + w * cfg.num_landmarks * k * k
        + cfg.num_landmarks
}
