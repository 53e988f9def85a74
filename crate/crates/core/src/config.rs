//! Model, training and run configuration. Files are TOML; the same text is
//! embedded in checkpoints.

use serde::{Deserialize, Serialize};

use crate::data::augment::AugmentConfig;
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Bottleneck,
    #[default]
    Hierarchical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl BlockConfig {
    pub fn new(kind: BlockKind, in_channels: usize, out_channels: usize) -> Self {
        BlockConfig {
            kind,
            in_channels,
            out_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(CoreError::Config("block channels must be positive".into()));
        }
        let div = match self.kind {
            BlockKind::Hierarchical => 4,
            BlockKind::Bottleneck => 2,
        };
        if self.out_channels % div != 0 {
            return Err(CoreError::Config(format!(
                "{:?} block needs out_channels divisible by {div}, got {}",
                self.kind, self.out_channels
            )));
        }
        Ok(())
    }
}

fn default_depth() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FanConfig {
    pub num_stacks: usize,
    #[serde(default = "default_depth")]
    pub hg_depth: usize,
    pub width: usize,
    pub num_landmarks: usize,
    pub in_channels: usize,
    pub input_resolution: usize,
    #[serde(default)]
    pub block: BlockKind,
}

impl FanConfig {
    /// Four stacks, 68 landmarks, 256px input, 256 channels.
    pub fn full() -> Self {
        FanConfig {
            num_stacks: 4,
            hg_depth: 4,
            width: 256,
            num_landmarks: 68,
            in_channels: 3,
            input_resolution: 256,
            block: BlockKind::Hierarchical,
        }
    }

    /// Two stacks of depth 3 at width 32 over 64px input.
    pub fn tiny(num_landmarks: usize) -> Self {
        FanConfig {
            num_stacks: 2,
            hg_depth: 3,
            width: 32,
            num_landmarks,
            in_channels: 3,
            input_resolution: 64,
            block: BlockKind::Hierarchical,
        }
    }

    /// Same network with `3 + N` input channels.
    pub fn guided(mut self) -> Self {
        self.in_channels = 3 + self.num_landmarks;
        self
    }

    pub fn heatmap_resolution(&self) -> usize {
        self.input_resolution / 4
    }

    pub fn is_guided(&self) -> bool {
        self.in_channels == 3 + self.num_landmarks
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CoreError::Config(m));
        if !(1..=4).contains(&self.num_stacks) {
            return err(format!("num_stacks must be in 1..=4, got {}", self.num_stacks));
        }
        if self.hg_depth == 0 {
            return err("hg_depth must be at least 1".into());
        }
        if self.width == 0 || self.width % 8 != 0 {
            return err(format!("width must be a positive multiple of 8, got {}", self.width));
        }
        if self.num_landmarks == 0 {
            return err("num_landmarks must be positive".into());
        }
        if self.in_channels != 3 && self.in_channels != 3 + self.num_landmarks {
            return err(format!(
                "in_channels must be 3 or {}, got {}",
                3 + self.num_landmarks,
                self.in_channels
            ));
        }
        let unit = 4usize << self.hg_depth;
        if self.input_resolution == 0 || self.input_resolution % unit != 0 {
            return err(format!(
                "input_resolution {} must be divisible by {unit} (stem x4, hourglass depth {})",
                self.input_resolution, self.hg_depth
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthRegressorConfig {
    pub num_landmarks: usize,
    pub in_channels: usize,
    pub width: usize,
    pub num_stages: usize,
    pub input_resolution: usize,
    #[serde(default)]
    pub block: BlockKind,
}

impl DepthRegressorConfig {
    pub fn tiny(num_landmarks: usize) -> Self {
        DepthRegressorConfig {
            num_landmarks,
            in_channels: 3 + num_landmarks,
            width: 32,
            num_stages: 3,
            input_resolution: 64,
            block: BlockKind::Hierarchical,
        }
    }

    /// Spatial size reaching the head convolution.
    pub fn final_resolution(&self) -> usize {
        self.input_resolution >> (1 + self.num_stages)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CoreError::Config(m));
        if self.num_landmarks == 0 {
            return err("num_landmarks must be positive".into());
        }
        if self.in_channels != 3 + self.num_landmarks {
            return err(format!(
                "depth regressor needs {} input channels, got {}",
                3 + self.num_landmarks,
                self.in_channels
            ));
        }
        if self.width == 0 || self.width % 4 != 0 {
            return err(format!("width must be a positive multiple of 4, got {}", self.width));
        }
        let unit = 2usize << self.num_stages;
        if self.input_resolution == 0 || self.input_resolution % unit != 0 {
            return err(format!(
                "input_resolution {} must be divisible by {unit}",
                self.input_resolution
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// 2D landmarks from RGB.
    Fan2d,
    /// Projected 3D landmarks from RGB.
    Fan3d,
    /// Projected 3D landmarks from RGB plus 2D guide channels.
    Guided,
    /// Per-landmark depth from RGB plus heatmaps.
    Depth,
}

impl std::str::FromStr for ModelKind {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fan2d" => Ok(ModelKind::Fan2d),
            "fan3d" => Ok(ModelKind::Fan3d),
            "guided" => Ok(ModelKind::Guided),
            "depth" => Ok(ModelKind::Depth),
            _ => Err(CoreError::Config(format!("unknown model kind '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fan: Option<FanConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<DepthRegressorConfig>,
}

impl ModelSpec {
    pub fn fan(kind: ModelKind, cfg: FanConfig) -> Self {
        ModelSpec {
            kind,
            fan: Some(cfg),
            depth: None,
        }
    }

    pub fn depth(cfg: DepthRegressorConfig) -> Self {
        ModelSpec {
            kind: ModelKind::Depth,
            fan: None,
            depth: Some(cfg),
        }
    }

    pub fn num_landmarks(&self) -> usize {
        match (&self.fan, &self.depth) {
            (Some(f), _) => f.num_landmarks,
            (_, Some(d)) => d.num_landmarks,
            _ => 0,
        }
    }

    pub fn input_resolution(&self) -> usize {
        match (&self.fan, &self.depth) {
            (Some(f), _) => f.input_resolution,
            (_, Some(d)) => d.input_resolution,
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ModelKind::Depth => self
                .depth
                .as_ref()
                .ok_or_else(|| CoreError::Config("depth model needs a [model.depth] section".into()))?
                .validate(),
            kind => {
                let f = self
                    .fan
                    .as_ref()
                    .ok_or_else(|| CoreError::Config(format!("{kind:?} model needs a [model.fan] section")))?;
                f.validate()?;
                match (kind, f.is_guided()) {
                    (ModelKind::Guided, false) => Err(CoreError::Config(format!(
                        "guided model needs in_channels = {}",
                        3 + f.num_landmarks
                    ))),
                    (ModelKind::Fan2d | ModelKind::Fan3d, true) => {
                        Err(CoreError::Config("plain FAN takes 3 input channels".into()))
                    }
                    _ => Ok(()),
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AugmentPreset {
    None,
    #[default]
    Fan,
    Guided,
}

impl AugmentPreset {
    pub fn config(self) -> Option<AugmentConfig> {
        match self {
            AugmentPreset::None => None,
            AugmentPreset::Fan => Some(AugmentConfig::fan()),
            AugmentPreset::Guided => Some(AugmentConfig::guided()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub drop_epochs: Vec<usize>,
    pub drop_factor: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub augment: AugmentPreset,
    #[serde(default)]
    pub seed: u64,
    /// Heatmap target width in heatmap pixels.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Crop margin per side, as a fraction of the box.
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn default_sigma() -> f64 {
    1.0
}

fn default_margin() -> f64 {
    0.1
}

impl TrainConfig {
    /// 1e-4, dropped tenfold after epochs 15 and 30, 40 epochs, minibatch 10.
    pub fn fan() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            drop_epochs: vec![15, 30],
            drop_factor: 0.1,
            batch_size: 10,
            epochs: 40,
            augment: AugmentPreset::Fan,
            seed: 0,
            sigma: default_sigma(),
            margin: default_margin(),
        }
    }

    /// Starts at 1e-3 with the wider rotation and scale ranges.
    pub fn guided() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            augment: AugmentPreset::Guided,
            ..Self::fan()
        }
    }

    /// Learning rate for a 1-indexed epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.drop_epochs.iter().filter(|d| epoch > **d).count();
        self.learning_rate * self.drop_factor.powi(drops as i32)
    }

    pub fn final_lr(&self) -> f64 {
        self.learning_rate * self.drop_factor.powi(self.drop_epochs.len() as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CoreError::Config("learning_rate must be positive".into()));
        }
        if !(self.drop_factor > 0.0 && self.drop_factor <= 1.0) {
            return Err(CoreError::Config("drop_factor must lie in (0,1]".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch_size must be positive".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(CoreError::Config("sigma must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(CoreError::Config("margin must lie in [0,1)".into()));
        }
        Ok(())
    }
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fan_schedule() {
        let t = TrainConfig::fan();
        assert_eq!(t.lr_at(1), 1e-4);
        assert_eq!(t.lr_at(15), 1e-4);
        assert!((t.lr_at(16) - 1e-5).abs() < 1e-20);
        assert!((t.lr_at(30) - 1e-5).abs() < 1e-20);
        assert!((t.lr_at(31) - 1e-6).abs() < 1e-21);
        assert!((t.lr_at(40) - 1e-6).abs() < 1e-21);
        assert_eq!((t.epochs, t.batch_size), (40, 10));
        assert_eq!(TrainConfig::guided().learning_rate, 1e-3);
    }

    #[test]
    fn config_validation() {
        FanConfig::full().validate().unwrap();
        FanConfig::tiny(5).validate().unwrap();
        FanConfig::tiny(5).guided().validate().unwrap();
        assert_eq!(FanConfig::tiny(5).guided().in_channels, 8);
        assert_eq!(FanConfig::full().heatmap_resolution(), 64);
        let mut c = FanConfig::tiny(5);
        c.in_channels = 4;
        assert!(c.validate().is_err());
        c = FanConfig::tiny(5);
        c.input_resolution = 48;
        assert!(c.validate().is_err());
        c = FanConfig::tiny(5);
        c.num_stacks = 5;
        assert!(c.validate().is_err());
        DepthRegressorConfig::tiny(5).validate().unwrap();
        assert_eq!(DepthRegressorConfig::tiny(5).final_resolution(), 4);
    }

    #[test]
    fn run_config_round_trip() {
        let cfg = RunConfig {
            model: ModelSpec::fan(ModelKind::Guided, FanConfig::tiny(5).guided()),
            train: TrainConfig::guided(),
        };
        let text = cfg.to_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn parses_hand_written_file() {
        let text = r#"
[model]
kind = "fan2d"

[model.fan]
num_stacks = 1
width = 16
num_landmarks = 68
in_channels = 3
input_resolution = 64
hg_depth = 2

[train]
learning_rate = 1e-4
drop_epochs = [15, 30]
drop_factor = 0.1
batch_size = 10
epochs = 40
"#;
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.model.fan.unwrap().block, BlockKind::Hierarchical);
        assert_eq!(cfg.train.augment, AugmentPreset::Fan);
        assert!(RunConfig::parse("[model]\nkind = \"guided\"\n").is_err());
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let spec = ModelSpec::fan(ModelKind::Guided, FanConfig::tiny(5));
        assert!(spec.validate().is_err());
        let spec = ModelSpec::fan(ModelKind::Fan2d, FanConfig::tiny(5).guided());
        assert!(spec.validate().is_err());
    }
}
