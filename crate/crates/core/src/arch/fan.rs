use fan_tensor::{BatchNorm2d, Conv2d, Graph, ParamStore, Scalar, Var};
use rand::Rng;

use super::block::{block_params, Block};
use super::hourglass::{hourglass_params, Hourglass};
use crate::config::{BlockConfig, FanConfig};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone)]
struct Stack {
    hg: Hourglass,
    top: Block,
    conv_last: Conv2d,
    bn_last: BatchNorm2d,
    head: Conv2d,
    /// Feature and heatmap remaps feeding the next stack; absent on the last.
    remap: Option<(Conv2d, Conv2d)>,
}

/// Stacked hourglass network with intermediate supervision.
#[derive(Debug, Clone)]
pub struct Fan {
    pub cfg: FanConfig,
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    stem1: Block,
    stem2: Block,
    stem3: Block,
    stacks: Vec<Stack>,
}

impl Fan {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &FanConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (w, n, k) = (cfg.width, cfg.num_landmarks, cfg.block);
        let stem_conv = Conv2d::new(store, "stem.conv", cfg.in_channels, w / 4, 7, 2, 3, true, rng);
        let stem_bn = BatchNorm2d::new(store, "stem.bn", w / 4);
        let stem1 = Block::new(store, "stem.b1", BlockConfig::new(k, w / 4, w / 2), rng)?;
        let stem2 = Block::new(store, "stem.b2", BlockConfig::new(k, w / 2, w / 2), rng)?;
        let stem3 = Block::new(store, "stem.b3", BlockConfig::new(k, w / 2, w), rng)?;
        let mut stacks = Vec::with_capacity(cfg.num_stacks);
        for s in 0..cfg.num_stacks {
            let p = |x: &str| format!("s{s}.{x}");
            let hg = Hourglass::new(store, &p("hg"), cfg.hg_depth, w, k, rng)?;
            let top = Block::new(store, &p("top"), BlockConfig::new(k, w, w), rng)?;
            let conv_last = Conv2d::new(store, &p("conv_last"), w, w, 1, 1, 0, true, rng);
            let bn_last = BatchNorm2d::new(store, &p("bn_last"), w);
            let head = Conv2d::new(store, &p("head"), w, n, 1, 1, 0, true, rng);
            let remap = (s + 1 < cfg.num_stacks).then(|| {
                (
                    Conv2d::new(store, &p("remap_features"), w, w, 1, 1, 0, true, rng),
                    Conv2d::new(store, &p("remap_heatmaps"), n, w, 1, 1, 0, true, rng),
                )
            });
            stacks.push(Stack {
                hg,
                top,
                conv_last,
                bn_last,
                head,
                remap,
            });
        }
        Ok(Fan {
            cfg: cfg.clone(),
            stem_conv,
            stem_bn,
            stem1,
            stem2,
            stem3,
            stacks,
        })
    }

    /// Input `[B, in_channels, R, R]`; returns one `[B, N, R/4, R/4]`
    /// heatmap stack per hourglass, first stack first.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Vec<Var>> {
        let s = g.tape.shape(x);
        let r = self.cfg.input_resolution;
        if s.len() != 4 || s[1] != self.cfg.in_channels || s[2] != r || s[3] != r {
            return Err(CoreError::Config(format!(
                "network expects [B,{},{r},{r}], got {s:?}",
                self.cfg.in_channels
            )));
        }
        let x = self.stem_conv.forward(g, x)?;
        let x = self.stem_bn.forward_relu(g, x)?;
        let x = self.stem1.forward(g, x)?;
        let x = g.tape.maxpool2x2(x)?;
        let x = self.stem2.forward(g, x)?;
        let mut previous = self.stem3.forward(g, x)?;

        let mut outputs = Vec::with_capacity(self.stacks.len());
        for st in &self.stacks {
            let ll = st.hg.forward(g, previous)?;
            let ll = st.top.forward(g, ll)?;
            let ll = st.conv_last.forward(g, ll)?;
            let ll = st.bn_last.forward_relu(g, ll)?;
            let out = st.head.forward(g, ll)?;
            outputs.push(out);
            if let Some((bl, al)) = &st.remap {
                let f = bl.forward(g, ll)?;
                let h = al.forward(g, out)?;
                let merged = g.tape.add(previous, f)?;
                previous = g.tape.add(merged, h)?;
            }
        }
        Ok(outputs)
    }

    /// Concatenates RGB with `N` guide channels and runs the network.
    pub fn forward_guided<T: Scalar>(&self, g: &mut Graph<'_, T>, image: Var, guide: Var) -> Result<Vec<Var>> {
        if !self.cfg.is_guided() {
            return Err(CoreError::Config("network was not built for guide channels".into()));
        }
        let (si, sg) = (g.tape.shape(image), g.tape.shape(guide));
        if sg.len() != 4 || sg[1] != self.cfg.num_landmarks {
            return Err(CoreError::Config(format!(
                "expected {} guide channels, got shape {sg:?}",
                self.cfg.num_landmarks
            )));
        }
        if si.len() != 4 || si[1] != 3 {
            return Err(CoreError::Config(format!("expected RGB image, got shape {si:?}")));
        }
        let x = g.tape.concat_channels(&[image, guide])?;
        self.forward(g, x)
    }

    /// Sum of per-stack mean squared errors against one target.
    pub fn loss<T: Scalar>(g: &mut Graph<'_, T>, outputs: &[Var], target: Var) -> Result<Var> {
        let mut total: Option<Var> = None;
        for &o in outputs {
            let l = g.tape.mse_loss(o, target)?;
            total = Some(match total {
                None => l,
                Some(t) => g.tape.add(t, l)?,
            });
        }
        total.ok_or_else(|| CoreError::Contract("no outputs to supervise".into()))
    }
}

/// Closed-form trainable-scalar count for a FAN configuration.
pub fn fan_params(cfg: &FanConfig) -> usize {
    let (w, n, k) = (cfg.width, cfg.num_landmarks, cfg.block);
    let conv = |i: usize, o: usize, ks: usize| i * o * ks * ks + o;
    let stem = conv(cfg.in_channels, w / 4, 7)
        + 2 * (w / 4)
        + block_params(BlockConfig::new(k, w / 4, w / 2))
        + block_params(BlockConfig::new(k, w / 2, w / 2))
        + block_params(BlockConfig::new(k, w / 2, w));
    let per_stack = hourglass_params(cfg.hg_depth, w, k)
        + block_params(BlockConfig::new(k, w, w))
        + conv(w, w, 1)
        + 2 * w
        + conv(w, n, 1);
    let remap = conv(w, w, 1) + conv(n, w, 1);
    stem + cfg.num_stacks * per_stack + (cfg.num_stacks - 1) * remap
}
