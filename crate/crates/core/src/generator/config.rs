use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    Affa,
    Concat,
    Add,
    None,
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionKind::Affa => "affa",
            FusionKind::Concat => "concat",
            FusionKind::Add => "add",
            FusionKind::None => "none",
        })
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "affa" => Ok(FusionKind::Affa),
            "concat" => Ok(FusionKind::Concat),
            "add" => Ok(FusionKind::Add),
            "none" => Ok(FusionKind::None),
            _ => Err(Error::InvalidConfig(format!("unknown fusion kind `{s}`"))),
        }
    }
}

/// One architecture variant. `fusion_plan` is keyed by decoder resolution
/// and must name every level from the bottleneck up to the working size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub resolution: usize,
    pub use_mapping: bool,
    pub use_ifsr: bool,
    pub fusion_plan: BTreeMap<usize, FusionKind>,
    pub base_channels: usize,
    pub channel_cap: usize,
    pub bottleneck_resolution: usize,
}

pub const PRESETS: [&str; 7] = ["baseline1", "baseline2", "configA", "configB", "configC", "configD", "configE"];

/// Fusion per level at the reference 256 layout, top level first:
/// 256, 128, 64, 32, 16, 8.
fn preset_levels(name: &str) -> Option<([FusionKind; 6], bool, bool)> {
    use FusionKind::*;
    Some(match name {
        "baseline1" => ([Concat, Concat, Concat, None, None, None], true, true),
        "baseline2" => ([Add, Add, Add, None, None, None], true, true),
        "configA" => ([Affa, Affa, Affa, None, None, None], true, false),
        "configB" => ([Affa, Affa, Affa, None, None, None], true, true),
        "configC" => ([Concat, Affa, Affa, Affa, None, None], true, true),
        "configD" => ([Concat, Affa, Affa, Affa, Affa, Affa], true, true),
        "configE" => ([Concat, Affa, Affa, Affa, Affa, Affa], false, true),
        _ => return Option::None,
    })
}

/// Number of halvings from `resolution` towards an 8×8-at-256 bottleneck:
/// five when `resolution` is divisible by 32, otherwise as many as divide evenly.
fn default_depth(resolution: usize) -> usize {
    let mut d = 0;
    let mut r = resolution;
    while d < 5 && r % 2 == 0 && r > 2 {
        r /= 2;
        d += 1;
    }
    d
}

impl ModelConfig {
    /// Paper-scale preset: 256×256, base width 64, cap 512, 8×8 bottleneck.
    pub fn preset(name: &str) -> Result<Self> {
        Self::preset_at(name, 256, 64, 512)
    }

    /// Desk-scale preset: 64×64, base width 32, cap 128.
    pub fn desk(name: &str) -> Result<Self> {
        Self::preset_at(name, 64, 32, 128)
    }

    /// A preset laid out at another resolution. Levels keep their order
    /// from the top, so at 64×64 the plan covers 64 down to 2; levels that
    /// do not exist at this size are dropped from the bottom.
    pub fn preset_at(name: &str, resolution: usize, base_channels: usize, channel_cap: usize) -> Result<Self> {
        let (levels, use_mapping, use_ifsr) =
            preset_levels(name).ok_or_else(|| Error::InvalidConfig(format!("unknown preset `{name}`")))?;
        let depth = default_depth(resolution);
        let fusion_plan = (0..=depth).map(|k| (resolution >> k, levels[k])).collect();
        let cfg = Self {
            name: name.to_string(),
            resolution,
            use_mapping,
            use_ifsr,
            fusion_plan,
            base_channels,
            channel_cap,
            bottleneck_resolution: resolution >> depth,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Same preset with a different working size, keeping widths and flags.
    pub fn rescaled(&self, resolution: usize) -> Result<Self> {
        if preset_levels(&self.name).is_none() {
            return Err(Error::InvalidConfig(format!("`{}` is not a preset and cannot be rescaled", self.name)));
        }
        let mut c = Self::preset_at(&self.name, resolution, self.base_channels, self.channel_cap)?;
        c.use_mapping = self.use_mapping;
        c.use_ifsr = self.use_ifsr;
        Ok(c)
    }

    /// Number of downsampling steps between the working size and the bottleneck.
    pub fn depth(&self) -> usize {
        (self.resolution / self.bottleneck_resolution).trailing_zeros() as usize
    }

    /// Width at level `k` (0 is the working resolution).
    pub fn channels(&self, level: usize) -> usize {
        (self.base_channels << level).min(self.channel_cap)
    }

    /// Decoder resolutions from the top level down.
    pub fn levels(&self) -> Vec<usize> {
        (0..=self.depth()).map(|k| self.resolution >> k).collect()
    }

    pub fn fusion_at(&self, resolution: usize) -> FusionKind {
        self.fusion_plan.get(&resolution).copied().unwrap_or(FusionKind::None)
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.bottleneck_resolution;
        if self.resolution == 0 || b == 0 || self.resolution % b != 0 || !(self.resolution / b).is_power_of_two() {
            return Err(Error::ConfigMismatch(format!(
                "bottleneck {b} must divide resolution {} by a power of two",
                self.resolution
            )));
        }
        if b < 2 {
            return Err(Error::ConfigMismatch("bottleneck must be at least 2×2 for instance statistics".into()));
        }
        if self.base_channels == 0 || self.channel_cap < self.base_channels {
            return Err(Error::ConfigMismatch("channel widths must satisfy 0 < base ≤ cap".into()));
        }
        let want: Vec<usize> = self.levels();
        let mut have: Vec<usize> = self.fusion_plan.keys().copied().collect();
        have.reverse();
        if have != want {
            return Err(Error::ConfigMismatch(format!(
                "fusion plan covers {have:?} but the decoder has levels {want:?}"
            )));
        }
        Ok(())
    }

    /// Stable `key = value` lines describing the feature columns of the variant.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        s += &format!("name = {}\n", self.name);
        s += &format!("resolution = {}\n", self.resolution);
        s += &format!("use_mapping = {}\n", self.use_mapping);
        s += &format!("use_ifsr = {}\n", self.use_ifsr);
        s += &format!("base_channels = {}\n", self.base_channels);
        s += &format!("channel_cap = {}\n", self.channel_cap);
        s += &format!("bottleneck_resolution = {}\n", self.bottleneck_resolution);
        for (r, k) in self.fusion_plan.iter().rev() {
            s += &format!("fusion.{r} = {k}\n");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use FusionKind::*;

    fn plan(c: &ModelConfig) -> Vec<(usize, FusionKind)> {
        c.fusion_plan.iter().rev().map(|(r, k)| (*r, *k)).collect()
    }

    #[test]
    fn paper_scale_plans() {
        let c = ModelConfig::preset("configC").unwrap();
        assert_eq!(plan(&c), [(256, Concat), (128, Affa), (64, Affa), (32, Affa), (16, None), (8, None)]);
        let d = ModelConfig::preset("configD").unwrap();
        assert_eq!(d.fusion_at(16), Affa);
        assert_eq!(d.fusion_at(8), Affa);
        assert_eq!(c.bottleneck_resolution, 8);
        assert_eq!(c.channels(0), 64);
        assert_eq!(c.channels(5), 512);
    }

    #[test]
    fn desk_layout_rescales_levels() {
        let b = ModelConfig::desk("configB").unwrap();
        assert_eq!(b.bottleneck_resolution, 2);
        assert_eq!(plan(&b), [(64, Affa), (32, Affa), (16, Affa), (8, None), (4, None), (2, None)]);
        let odd = ModelConfig::preset_at("configD", 112, 32, 128).unwrap();
        assert_eq!(odd.levels(), [112, 56, 28, 14, 7]);
    }

    #[test]
    fn a_and_b_differ_only_in_ifsr() {
        let a = ModelConfig::preset("configA").unwrap();
        let mut b = ModelConfig::preset("configB").unwrap();
        assert!(!a.use_ifsr && b.use_ifsr);
        b.use_ifsr = false;
        b.name = a.name.clone();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_plans_are_rejected() {
        let mut c = ModelConfig::desk("configC").unwrap();
        c.fusion_plan.insert(128, Affa);
        assert!(matches!(c.validate(), Err(Error::ConfigMismatch(_))));
        let mut c = ModelConfig::desk("configC").unwrap();
        c.bottleneck_resolution = 3;
        assert!(c.validate().is_err());
        assert!(ModelConfig::preset("configZ").is_err());
    }
}
