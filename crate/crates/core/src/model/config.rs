use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Freezable unit of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Stem,
    Stage1,
    Stage2,
    Stage3,
    Stage4,
    Head,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Stem,
        Stage::Stage1,
        Stage::Stage2,
        Stage::Stage3,
        Stage::Stage4,
        Stage::Head,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Stem => "stem",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Stage3 => "stage3",
            Stage::Stage4 => "stage4",
            Stage::Head => "head",
        }
    }

    /// The residual stage with 0-based index `i` (0..4).
    pub(crate) fn residual(i: usize) -> Stage {
        [Stage::Stage1, Stage::Stage2, Stage::Stage3, Stage::Stage4][i]
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::UnknownStage(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// Two 3×3 convolutions.
    Basic,
    /// 1×1 reduce, 3×3, 1×1 expand (×4).
    Bottleneck,
}

impl BlockKind {
    pub fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

/// Declarative description of the four-stage residual network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub input_size: usize,
    pub block_kind: BlockKind,
    pub stage_depths: [usize; 4],
    /// Inner width of each stage. The stem produces `stage_widths[0]` channels;
    /// bottleneck stages output four times their width.
    pub stage_widths: [usize; 4],
    pub dense_units: usize,
    pub dropout_rate: f64,
    pub frozen_stages: BTreeSet<Stage>,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::resnet50()
    }
}

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

impl NetworkConfig {
    /// The 50-layer bottleneck arrangement at 224×224.
    pub fn resnet50() -> Self {
        Self {
            input_channels: 3,
            input_size: 224,
            block_kind: BlockKind::Bottleneck,
            stage_depths: [3, 4, 6, 3],
            stage_widths: [64, 128, 256, 512],
            dense_units: 256,
            dropout_rate: 0.3,
            frozen_stages: [Stage::Stem, Stage::Stage1, Stage::Stage2].into_iter().collect(),
            seed: 0,
        }
    }

    /// Small basic-block network for 64×64 inputs; trains in seconds on a CPU.
    pub fn desk() -> Self {
        Self {
            input_size: 64,
            block_kind: BlockKind::Basic,
            stage_depths: [1, 1, 1, 1],
            stage_widths: [8, 16, 32, 64],
            dense_units: 32,
            ..Self::resnet50()
        }
    }

    /// Minimal network used by end-to-end gradient checks.
    pub fn tiny() -> Self {
        Self {
            input_size: 16,
            block_kind: BlockKind::Basic,
            stage_depths: [1, 1, 1, 1],
            stage_widths: [2, 2, 2, 2],
            dense_units: 4,
            frozen_stages: BTreeSet::new(),
            ..Self::resnet50()
        }
    }

    /// Output channel count of residual stage `i`.
    pub fn stage_out(&self, i: usize) -> usize {
        self.stage_widths[i] * self.block_kind.expansion()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be positive".into()));
        }
        if self.stage_depths.contains(&0) || self.stage_widths.contains(&0) {
            return Err(Error::Config("stage depths and widths must be positive".into()));
        }
        if self.dense_units == 0 {
            return Err(Error::Config("dense_units must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        self.feature_size().map(|_| ())
    }

    /// Spatial size of the final feature map. Every stride-2 layer must see an
    /// even size (or a single pixel) so no input rows are silently dropped.
    pub fn feature_size(&self) -> Result<usize> {
        let mut s = self.input_size;
        if s < 2 {
            return Err(Error::Config(format!("input_size {s} too small")));
        }
        let halve = |s: usize, what: &str| {
            if s > 1 && s % 2 == 1 {
                Err(Error::Config(format!(
                    "input_size {} is not evenly reducible: {what} receives odd size {s}",
                    self.input_size
                )))
            } else {
                Ok(s.div_ceil(2))
            }
        };
        s = halve(s, "stem convolution")?;
        s = halve(s, "stem max pool")?;
        for stage in 2..=4 {
            s = halve(s, &format!("stage{stage}"))?;
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reducible_sizes() {
        let mut cfg = NetworkConfig::resnet50();
        assert_eq!(cfg.feature_size().unwrap(), 7);
        cfg.input_size = 64;
        assert_eq!(cfg.feature_size().unwrap(), 2);
        cfg.input_size = 16;
        assert_eq!(cfg.feature_size().unwrap(), 1);
        for bad in [20, 48, 100, 1] {
            cfg.input_size = bad;
            assert!(cfg.validate().is_err(), "{bad}");
        }
    }

    #[test]
    fn stage_names_roundtrip() {
        for st in Stage::ALL {
            assert_eq!(st.name().parse::<Stage>().unwrap(), st);
        }
        assert!(matches!("stage5".parse::<Stage>(), Err(Error::UnknownStage(_))));
    }

    #[test]
    fn dropout_must_be_below_one() {
        let cfg = NetworkConfig {
            dropout_rate: 1.0,
            ..NetworkConfig::desk()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_json_roundtrip() {
        let cfg = NetworkConfig::desk();
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<NetworkConfig>(&s).unwrap(), cfg);
    }
}
