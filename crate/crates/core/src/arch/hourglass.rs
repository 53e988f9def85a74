use fan_tensor::{Graph, ParamStore, Scalar, Var};
use rand::Rng;

use super::block::{block_params, Block};
use crate::config::{BlockConfig, BlockKind};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone)]
struct Level {
    up: Block,
    low1: Block,
    low3: Block,
}

/// Recursive encoder-decoder. Level `l` keeps a full-resolution skip block
/// and sends a pooled copy through `low1`, the next level (or the bottom
/// block), `low3` and a nearest-neighbour upsample; the two are summed.
#[derive(Debug, Clone)]
pub struct Hourglass {
    pub depth: usize,
    pub width: usize,
    levels: Vec<Level>,
    bottom: Block,
}

impl Hourglass {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        depth: usize,
        width: usize,
        kind: BlockKind,
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(CoreError::Config("hourglass depth must be at least 1".into()));
        }
        let cfg = BlockConfig::new(kind, width, width);
        let mut levels = Vec::with_capacity(depth);
        for l in 0..depth {
            levels.push(Level {
                up: Block::new(store, &format!("{name}.l{l}.up"), cfg, rng)?,
                low1: Block::new(store, &format!("{name}.l{l}.low1"), cfg, rng)?,
                low3: Block::new(store, &format!("{name}.l{l}.low3"), cfg, rng)?,
            });
        }
        let bottom = Block::new(store, &format!("{name}.bottom"), cfg, rng)?;
        Ok(Hourglass {
            depth,
            width,
            levels,
            bottom,
        })
    }

    /// Rejects spatial sizes that do not halve cleanly `depth` times.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let unit = 1usize << self.depth;
        if h % unit != 0 || w % unit != 0 {
            return Err(CoreError::Config(format!(
                "hourglass of depth {} needs spatial size divisible by {unit}, got {h}x{w}",
                self.depth
            )));
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let s = g.tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.width {
            return Err(CoreError::Config(format!(
                "hourglass expects [B,{},H,W], got {s:?}",
                self.width
            )));
        }
        self.check_input(s[2], s[3])?;
        self.level(g, x, 0)
    }

    fn level<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, l: usize) -> Result<Var> {
        let lv = &self.levels[l];
        let up = lv.up.forward(g, x)?;
        let low = g.tape.maxpool2x2(x)?;
        let low = lv.low1.forward(g, low)?;
        let low = if l + 1 == self.depth {
            self.bottom.forward(g, low)?
        } else {
            self.level(g, low, l + 1)?
        };
        let low = lv.low3.forward(g, low)?;
        let low = g.tape.upsample_nearest2x(low)?;
        Ok(g.tape.add(up, low)?)
    }
}

pub fn hourglass_params(depth: usize, width: usize, kind: BlockKind) -> usize {
    (3 * depth + 1) * block_params(BlockConfig::new(kind, width, width))
}
