//! Run configuration files: a flat `key = value` document (TOML syntax)
//! whose keys are dotted paths, with `inherit` naming a preset.
//!
//! ```text
//! inherit = "configC"
//! scale = "desk"
//! seed = 7
//! model.fusion.16 = "affa"
//! loss.identity = 5.0
//! train.batch_size = 8
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::error::{Error, Result};
use crate::generator::{FusionKind, ModelConfig};
use crate::objectives::{GpMode, IfsrMode};
use crate::trainer::{DecayMode, TrainConfig};

pub const DEFAULT_SEED: u64 = 1234;
pub const DEFAULT_PRESET: &str = "configC";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// 256×256, widths 64 to 512, batch 10.
    Paper,
    /// 64×64, widths 32 to 128, batch 4.
    #[default]
    Desk,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub scale: Scale,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub deterministic: bool,
    pub backbone: String,
    pub perceptual: String,
}

impl RunConfig {
    pub fn preset(name: &str, scale: Scale) -> Result<Self> {
        let (model, train) = match scale {
            Scale::Paper => (ModelConfig::preset(name)?, TrainConfig::default()),
            Scale::Desk => (ModelConfig::desk(name)?, TrainConfig::desk()),
        };
        Ok(Self {
            preset: name.to_string(),
            scale,
            model,
            train,
            seed: DEFAULT_SEED,
            deterministic: true,
            backbone: "stub".into(),
            perceptual: "stub".into(),
        })
    }

    /// Parses a configuration document, resolving `inherit` and `scale` first.
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::InvalidConfig(format!("{e}")))?;
        let mut flat = Vec::new();
        flatten("", &Value::Table(table), &mut flat);
        Self::from_pairs(&flat)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn from_pairs(pairs: &[(String, Value)]) -> Result<Self> {
        let get = |k: &str| pairs.iter().find(|(key, _)| key == k).map(|(_, v)| v);
        let preset = match get("inherit") {
            Some(v) => as_str("inherit", v)?.to_string(),
            None => DEFAULT_PRESET.to_string(),
        };
        let scale = match get("scale") {
            Some(v) => parse_enum("scale", v)?,
            None => Scale::Desk,
        };
        let mut cfg = Self::preset(&preset, scale)?;
        let rest: Vec<(String, Value)> = pairs
            .iter()
            .filter(|(k, _)| k != "inherit" && k != "scale")
            .cloned()
            .collect();
        cfg.apply(&rest)?;
        Ok(cfg)
    }

    /// Applies dotted-key overrides. `model.resolution` is applied before
    /// the other model keys since it rebuilds the fusion plan.
    pub fn apply(&mut self, pairs: &[(String, Value)]) -> Result<()> {
        let (first, rest): (Vec<_>, Vec<_>) = pairs.iter().partition(|(k, _)| k == "model.resolution");
        for (k, v) in first.into_iter().chain(rest) {
            self.set(k, v)?;
        }
        self.model.validate()?;
        self.train.validate()
    }

    /// Parses `key=value` strings, values in TOML syntax; bare words are
    /// taken as strings.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        let pairs = overrides
            .iter()
            .map(|o| {
                let (k, v) = o
                    .split_once('=')
                    .ok_or_else(|| Error::InvalidConfig(format!("override `{o}` is not key=value")))?;
                Ok((k.trim().to_string(), parse_value(v.trim())))
            })
            .collect::<Result<Vec<_>>>()?;
        self.apply(&pairs)
    }

    fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let o = &mut t.optimizer;
        let w = &mut t.weights;
        let a = &mut t.augment;
        match key {
            "seed" => self.seed = as_uint(key, v)?,
            "deterministic" => self.deterministic = as_bool(key, v)?,
            "backbone" => self.backbone = as_str(key, v)?.into(),
            "perceptual" => self.perceptual = as_str(key, v)?.into(),
            "model.name" => m.name = as_str(key, v)?.into(),
            "model.resolution" => *m = m.rescaled(as_uint(key, v)? as usize)?,
            "model.use_mapping" => m.use_mapping = as_bool(key, v)?,
            "model.use_ifsr" => m.use_ifsr = as_bool(key, v)?,
            "model.base_channels" => m.base_channels = as_uint(key, v)? as usize,
            "model.channel_cap" => m.channel_cap = as_uint(key, v)? as usize,
            "model.bottleneck_resolution" => m.bottleneck_resolution = as_uint(key, v)? as usize,
            k if k.starts_with("model.fusion.") => {
                let res: usize = k["model.fusion.".len()..]
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("`{k}`: fusion keys end in a resolution")))?;
                let kind: FusionKind = as_str(k, v)?.parse()?;
                m.fusion_plan.insert(res, kind);
            }
            "train.batch_size" => t.batch_size = as_uint(key, v)? as usize,
            "train.same_prob" => t.same_prob = as_float(key, v)?,
            "train.margin_scale" => t.margin_scale = as_float(key, v)?,
            "train.ifsr_mode" => t.ifsr_mode = parse_enum::<IfsrMode>(key, v)?,
            "train.gp_mode" => t.gp_mode = parse_enum::<GpMode>(key, v)?,
            "train.ifsr_first" => {
                let last = t.ifsr_blocks.map_or(0, |b| b.1);
                t.ifsr_blocks = Some((as_uint(key, v)? as usize, last));
            }
            "train.ifsr_last" => {
                let first = t.ifsr_blocks.map_or(2, |b| b.0);
                t.ifsr_blocks = Some((first, as_uint(key, v)? as usize));
            }
            "train.checkpoint_every" => t.checkpoint_every = as_uint(key, v)?,
            "train.attention_every" => t.attention_every = as_uint(key, v)?,
            "optim.lr" => o.lr = as_float(key, v)?,
            "optim.beta1" => o.beta1 = as_float(key, v)?,
            "optim.beta2" => o.beta2 = as_float(key, v)?,
            "optim.eps" => o.eps = as_float(key, v)?,
            "optim.decay" => o.decay = as_float(key, v)?,
            "optim.decay_every" => o.decay_every = as_uint(key, v)?,
            "optim.decay_mode" => o.decay_mode = parse_enum::<DecayMode>(key, v)?,
            "loss.identity" => w.identity = as_float(key, v)?,
            "loss.reconstruction" => w.reconstruction = as_float(key, v)?,
            "loss.perceptual" => w.perceptual = as_float(key, v)?,
            "loss.cycle" => w.cycle = as_float(key, v)?,
            "loss.ifsr" => w.ifsr = as_float(key, v)?,
            "loss.gp" => w.gp = as_float(key, v)?,
            "loss.adversarial" => w.adversarial = as_float(key, v)?,
            "augment.brightness" => a.brightness = as_float(key, v)?,
            "augment.contrast_min" => a.contrast.0 = as_float(key, v)?,
            "augment.contrast_max" => a.contrast.1 = as_float(key, v)?,
            "augment.saturation_min" => a.saturation.0 = as_float(key, v)?,
            "augment.saturation_max" => a.saturation.1 = as_float(key, v)?,
            _ => return Err(Error::InvalidConfig(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Every setting as `key = value` lines in a stable order. The output
    /// parses back to an equal configuration.
    pub fn render(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let o = &t.optimizer;
        let w = &t.weights;
        let a = &t.augment;
        let mut lines = vec![
            format!("inherit = {:?}", self.preset),
            format!("scale = \"{}\"", enum_name(&self.scale)),
            format!("seed = {}", self.seed),
            format!("deterministic = {}", self.deterministic),
            format!("backbone = {:?}", self.backbone),
            format!("perceptual = {:?}", self.perceptual),
            format!("model.name = {:?}", m.name),
            format!("model.resolution = {}", m.resolution),
            format!("model.use_mapping = {}", m.use_mapping),
            format!("model.use_ifsr = {}", m.use_ifsr),
            format!("model.base_channels = {}", m.base_channels),
            format!("model.channel_cap = {}", m.channel_cap),
            format!("model.bottleneck_resolution = {}", m.bottleneck_resolution),
        ];
        for (r, k) in m.fusion_plan.iter().rev() {
            lines.push(format!("model.fusion.{r} = \"{k}\""));
        }
        lines.extend([
            format!("train.batch_size = {}", t.batch_size),
            format!("train.same_prob = {:?}", t.same_prob),
            format!("train.margin_scale = {:?}", t.margin_scale),
            format!("train.ifsr_mode = \"{}\"", enum_name(&t.ifsr_mode)),
            format!("train.gp_mode = \"{}\"", enum_name(&t.gp_mode)),
        ]);
        if let Some((f, l)) = t.ifsr_blocks {
            lines.push(format!("train.ifsr_first = {f}"));
            lines.push(format!("train.ifsr_last = {l}"));
        }
        lines.extend([
            format!("train.checkpoint_every = {}", t.checkpoint_every),
            format!("train.attention_every = {}", t.attention_every),
            format!("optim.lr = {:?}", o.lr),
            format!("optim.beta1 = {:?}", o.beta1),
            format!("optim.beta2 = {:?}", o.beta2),
            format!("optim.eps = {:?}", o.eps),
            format!("optim.decay = {:?}", o.decay),
            format!("optim.decay_every = {}", o.decay_every),
            format!("optim.decay_mode = \"{}\"", enum_name(&o.decay_mode)),
            format!("loss.identity = {:?}", w.identity),
            format!("loss.reconstruction = {:?}", w.reconstruction),
            format!("loss.perceptual = {:?}", w.perceptual),
            format!("loss.cycle = {:?}", w.cycle),
            format!("loss.ifsr = {:?}", w.ifsr),
            format!("loss.gp = {:?}", w.gp),
            format!("loss.adversarial = {:?}", w.adversarial),
            format!("augment.brightness = {:?}", a.brightness),
            format!("augment.contrast_min = {:?}", a.contrast.0),
            format!("augment.contrast_max = {:?}", a.contrast.1),
            format!("augment.saturation_min = {:?}", a.saturation.0),
            format!("augment.saturation_max = {:?}", a.saturation.1),
        ]);
        lines.join("\n") + "\n"
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

fn parse_value(s: &str) -> Value {
    format!("v = {s}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(s.to_string()))
}

fn type_error(key: &str, want: &str, v: &Value) -> Error {
    Error::InvalidConfig(format!("`{key}` expects {want}, got {v}"))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| type_error(key, "a string", v))
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| type_error(key, "true or false", v))
}

fn as_uint(key: &str, v: &Value) -> Result<u64> {
    v.as_integer()
        .and_then(|i| u64::try_from(i).ok())
        .ok_or_else(|| type_error(key, "a non-negative integer", v))
}

fn as_float(key: &str, v: &Value) -> Result<f64> {
    v.as_float()
        .or_else(|| v.as_integer().map(|i| i as f64))
        .ok_or_else(|| type_error(key, "a number", v))
}

fn parse_enum<E: for<'de> Deserialize<'de>>(key: &str, v: &Value) -> Result<E> {
    let s = as_str(key, v)?;
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::InvalidConfig(format!("`{key}`: unknown value `{s}`")))
}

fn enum_name<E: Serialize>(e: &E) -> String {
    match serde_json::to_value(e) {
        Ok(serde_json::Value::String(s)) => s,
        _ => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inheritance_and_overrides() {
        let c = RunConfig::parse("inherit = \"configE\"\nseed = 7\nloss.identity = 5\nmodel.fusion.16 = \"none\"\n").unwrap();
        assert_eq!(c.preset, "configE");
        assert!(!c.model.use_mapping);
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.weights.identity, 5.0);
        assert_eq!(c.model.fusion_at(16), FusionKind::None);
        assert_eq!(c.train.batch_size, 4);
    }

    #[test]
    fn dotted_tables_are_accepted() {
        let c = RunConfig::parse("[train]\nbatch_size = 2\n[model.fusion]\n64 = \"add\"\n").unwrap();
        assert_eq!(c.train.batch_size, 2);
        assert_eq!(c.model.fusion_at(64), FusionKind::Add);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::parse("train.batchsize = 2\n").unwrap_err();
        assert!(e.to_string().contains("batchsize"));
        assert!(RunConfig::parse("model.fusion.128 = \"affa\"\n").is_err());
        assert!(RunConfig::parse("train.gp_mode = \"both\"\n").is_err());
    }

    #[test]
    fn render_round_trips() {
        for scale in [Scale::Desk, Scale::Paper] {
            for p in crate::generator::PRESETS {
                let mut c = RunConfig::preset(p, scale).unwrap();
                c.train.ifsr_blocks = Some((2, 5));
                assert_eq!(RunConfig::parse(&c.render()).unwrap(), c);
            }
        }
    }

    #[test]
    fn resolution_override_rebuilds_plan() {
        let mut c = RunConfig::preset("configD", Scale::Desk).unwrap();
        c.apply_overrides(&["model.resolution=32".into(), "train.gp_mode=r1".into()]).unwrap();
        assert_eq!(c.model.levels(), [32, 16, 8, 4, 2]);
        assert_eq!(c.train.gp_mode, GpMode::R1);
    }
}
