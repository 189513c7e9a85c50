//! Alternating critic/generator optimization, checkpoints and metrics.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::ops::RangeInclusive;
use std::path::Path;

use gradtape::nn::Module;
use gradtape::optim::Adam;
use gradtape::{grad, no_grad, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::backbone::{BackboneAdapter, PerceptualNet};
use crate::calibration::{default_ifsr_blocks, IfsrMargins};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::{Generator, ModelConfig};
use crate::objectives::{
    cycle_loss, gradient_penalty, hinge_d_loss, hinge_g_loss, identity_loss, ifsr_loss, perceptual_loss,
    reconstruction_loss, total_generator_loss, GpMode, IfsrMode, LossReport, LossWeights, Term,
};
use crate::pipeline::{sample_batch, AugmentConfig, FaceStore, PairBatch, TrainingPair};

pub const CHECKPOINT_VERSION: &str = "1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecayMode {
    #[default]
    Staircase,
    Continuous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSpec {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay: f64,
    pub decay_every: u64,
    pub decay_mode: DecayMode,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
            decay: 0.97,
            decay_every: 100_000,
            decay_mode: DecayMode::Staircase,
        }
    }
}

/// Learning rate after `step` updates.
pub fn lr_at(step: u64, spec: &OptimizerSpec) -> f64 {
    match spec.decay_mode {
        DecayMode::Staircase => spec.lr * spec.decay.powi((step / spec.decay_every) as i32),
        DecayMode::Continuous => spec.lr * spec.decay.powf(step as f64 / spec.decay_every as f64),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub same_prob: f64,
    pub optimizer: OptimizerSpec,
    pub weights: LossWeights,
    pub margin_scale: f64,
    /// First and last backbone block regularized; defaults by backbone depth.
    pub ifsr_blocks: Option<(usize, usize)>,
    pub ifsr_mode: IfsrMode,
    pub gp_mode: GpMode,
    pub augment: AugmentConfig,
    pub checkpoint_every: u64,
    pub attention_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 10,
            same_prob: 0.2,
            optimizer: OptimizerSpec::default(),
            weights: LossWeights::default(),
            margin_scale: 1.2,
            ifsr_blocks: None,
            ifsr_mode: IfsrMode::Hinge,
            gp_mode: GpMode::Interpolated,
            augment: AugmentConfig::default(),
            checkpoint_every: 1000,
            attention_every: 500,
        }
    }
}

impl TrainConfig {
    /// Small-batch settings for the 64×64 desk preset.
    pub fn desk() -> Self {
        Self {
            batch_size: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let o = &self.optimizer;
        let ok = self.batch_size > 0
            && (0.0..=1.0).contains(&self.same_prob)
            && self.margin_scale > 0.0
            && o.lr > 0.0
            && (0.0..1.0).contains(&o.beta1)
            && (0.0..1.0).contains(&o.beta2)
            && o.eps > 0.0
            && o.decay > 0.0
            && o.decay_every > 0;
        if !ok {
            return Err(Error::InvalidConfig(format!("invalid training settings: {self:?}")));
        }
        Ok(())
    }
}

/// Losses of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub g: LossReport,
    pub d: Option<LossReport>,
}

/// Everything that changes during training, plus the frozen networks it reads.
pub struct Trainer<T: Scalar> {
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub generator: Generator<T>,
    pub discriminator: Discriminator<T>,
    pub opt_g: Adam<T>,
    pub opt_d: Adam<T>,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub margins: Option<IfsrMargins>,
    backbone: BackboneAdapter<T>,
    perceptual: Box<dyn PerceptualNet<T>>,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh networks initialized from `seed`. `margins` is required when the
    /// variant uses IFSR and is trimmed to the regularized block range.
    pub fn new(
        model: ModelConfig,
        config: TrainConfig,
        backbone: BackboneAdapter<T>,
        perceptual: Box<dyn PerceptualNet<T>>,
        margins: Option<IfsrMargins>,
        seed: u64,
    ) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let generator = Generator::new(&model, &mut rng)?;
        let discriminator = Discriminator::new(&model, &mut rng)?;
        let o = &config.optimizer;
        let opt_g = Adam::new(&generator, o.beta1, o.beta2, o.eps);
        let opt_d = Adam::new(&discriminator, o.beta1, o.beta2, o.eps);
        let mut t = Self {
            model,
            config,
            generator,
            discriminator,
            opt_g,
            opt_d,
            rng,
            step: 0,
            margins: None,
            backbone,
            perceptual,
        };
        t.margins = prepare_margins(&t.model, &t.config, &t.backbone, margins)?;
        Ok(t)
    }

    fn ifsr_active(&self) -> bool {
        ifsr_active(&self.model, &self.config)
    }

    pub fn ifsr_blocks(&self) -> RangeInclusive<usize> {
        ifsr_blocks(&self.config, &self.backbone)
    }

    pub fn backbone(&self) -> &BackboneAdapter<T> {
        &self.backbone
    }

    pub fn perceptual(&self) -> &dyn PerceptualNet<T> {
        self.perceptual.as_ref()
    }

    pub fn sample(&mut self, store: &FaceStore<T>) -> Result<Vec<TrainingPair<T>>> {
        sample_batch(store, self.config.batch_size, self.config.same_prob, &self.config.augment, &mut self.rng)
    }

    fn non_finite(&self, report: &LossReport) -> Error {
        Error::NonFiniteLoss {
            step: self.step,
            terms: report.describe(),
        }
    }

    /// `fake` is the current generator output; the critic sees it detached.
    fn critic_step(&mut self, batch: &PairBatch<T>, fake: &Tensor<T>, lr: f64) -> Result<LossReport> {
        let x_t = Var::constant(batch.target.clone());
        let d = &self.discriminator;
        let hinge = hinge_d_loss(&d.forward(&x_t)?, &d.forward(&Var::constant(fake.clone()))?);
        let w = self.config.weights.gp;
        let mut report = LossReport::default();
        report.terms.insert("d_hinge".into(), hinge.item().as_f64());
        report.weights.insert("d_hinge".into(), 1.0);
        let mut total = hinge;
        if w > 0.0 {
            let critic = |x: &Var<T>| d.forward(x);
            let gp = gradient_penalty(&critic, &batch.target, fake, self.config.gp_mode, &mut self.rng)?;
            report.terms.insert("gp".into(), gp.item().as_f64());
            report.weights.insert("gp".into(), w);
            total = total.add(&gp.scale(T::lit(w)));
        }
        report.total = report.recompute_total();
        if !report.all_finite() {
            return Err(self.non_finite(&report));
        }
        let params = self.discriminator.parameters();
        let grads = grad(&total, &params.iter().collect::<Vec<_>>(), false);
        self.opt_d.step(&mut self.discriminator, &grads, lr);
        Ok(report)
    }

    fn generator_terms(&self, batch: &PairBatch<T>, z_s: &Var<T>, x_c: &Var<T>) -> Result<Vec<(Term, Var<T>)>> {
        let w = &self.config.weights;
        let x_t = Var::constant(batch.target.clone());
        let mut terms = Vec::new();
        if w.adversarial > 0.0 {
            terms.push((Term::Adversarial, hinge_g_loss(&self.discriminator.forward(x_c)?)));
        }
        let ifsr = self.ifsr_active();
        if w.identity > 0.0 || ifsr {
            let out_c = self.backbone.forward(x_c)?;
            if w.identity > 0.0 {
                terms.push((Term::Identity, identity_loss(z_s, &out_c.embedding)?));
            }
            if ifsr {
                let out_t = no_grad(|| self.backbone.forward(&x_t))?;
                let margins = self.margins.as_ref().expect("margins checked at construction");
                let l = ifsr_loss(
                    &out_t.blocks,
                    &out_c.blocks,
                    self.ifsr_blocks(),
                    margins,
                    self.config.margin_scale,
                    self.config.ifsr_mode,
                )?;
                terms.push((Term::Ifsr, l));
            }
        }
        if w.reconstruction > 0.0 {
            terms.push((Term::Reconstruction, reconstruction_loss(&x_t, x_c, &batch.same)?));
        }
        if w.perceptual > 0.0 {
            terms.push((
                Term::Perceptual,
                perceptual_loss(&x_t, x_c, &batch.same, self.perceptual.as_ref())?,
            ));
        }
        if w.cycle > 0.0 {
            let z_t = no_grad(|| self.backbone.embed_batch(&x_t))?;
            let g = |x: &Var<T>, z: &Var<T>| Ok(self.generator.forward(x, z)?.image);
            terms.push((Term::Cycle, cycle_loss(&x_t, x_c, &z_t, &g)?));
        }
        Ok(terms)
    }

    /// One critic update followed by one generator update on `pairs`. Both
    /// use the same generator forward pass; the generator is unchanged in
    /// between. The critic step is skipped when the adversarial weight is
    /// zero, since the generator would not read it.
    pub fn train_step(&mut self, pairs: &[TrainingPair<T>]) -> Result<StepReport> {
        let batch = PairBatch::from_pairs(pairs)?;
        let lr = lr_at(self.step, &self.config.optimizer);
        let z_s = no_grad(|| self.backbone.embed_batch(&Var::constant(batch.source.clone())))?;
        let x_c = self.generator.forward(&Var::constant(batch.target.clone()), &z_s)?.image;
        let d = if self.config.weights.adversarial > 0.0 {
            Some(self.critic_step(&batch, &x_c.value().clone(), lr)?)
        } else {
            None
        };
        let terms = self.generator_terms(&batch, &z_s, &x_c)?;
        let (total, g) = total_generator_loss(&terms, &self.config.weights);
        if !g.all_finite() {
            return Err(self.non_finite(&g));
        }
        let params = self.generator.parameters();
        let grads = grad(&total, &params.iter().collect::<Vec<_>>(), false);
        self.opt_g.step(&mut self.generator, &grads, lr);
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            lr,
            g,
            d,
        })
    }

    /// Samples a batch from `store` and trains on it.
    pub fn train_iteration(&mut self, store: &FaceStore<T>) -> Result<StepReport> {
        let pairs = self.sample(store)?;
        self.train_step(&pairs)
    }

    /// Channel-averaged AFFA masks of the first target in `pairs`, per resolution.
    pub fn attention_maps(&self, pairs: &[TrainingPair<T>]) -> Result<BTreeMap<usize, Vec<f64>>> {
        let first = &pairs[..1];
        let batch = PairBatch::from_pairs(first)?;
        let out = no_grad(|| -> Result<_> {
            let z = self.backbone.embed_batch(&Var::constant(batch.source.clone()))?;
            self.generator.forward(&Var::constant(batch.target.clone()), &z)
        })?;
        Ok(out
            .masks
            .iter()
            .map(|(r, m)| {
                let v = m.value();
                let (c, hw) = (v.shape()[1], r * r);
                let mean = (0..hw)
                    .map(|p| (0..c).map(|ch| v.data()[ch * hw + p].as_f64()).sum::<f64>() / c as f64)
                    .collect();
                (*r, mean)
            })
            .collect())
    }

    pub fn to_archive(&self) -> Result<Archive<T>> {
        let mut a = Archive::new();
        a.insert_module("g", &self.generator);
        a.insert_module("d", &self.discriminator);
        for (name, opt) in [("opt_g", &self.opt_g), ("opt_d", &self.opt_d)] {
            for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
                a.insert(format!("{name}.m.{i:05}"), m.clone());
                a.insert(format!("{name}.v.{i:05}"), v.clone());
            }
            a.set_meta(format!("{name}.t"), opt.t.to_string());
        }
        a.set_meta("format_version", CHECKPOINT_VERSION);
        a.set_meta("step", self.step.to_string());
        a.set_meta("model_config", to_json(&self.model)?);
        a.set_meta("train_config", to_json(&self.config)?);
        a.set_meta("rng_seed", hex::encode(self.rng.get_seed()));
        a.set_meta("rng_stream", self.rng.get_stream().to_string());
        a.set_meta("rng_word_pos", self.rng.get_word_pos().to_string());
        a.set_meta("backbone_id", self.backbone.id());
        a.set_meta("backbone_checksum", self.backbone.checksum());
        a.set_meta("perceptual_id", self.perceptual.id());
        if let Some(m) = &self.margins {
            a.set_meta("margins", m.to_tsv());
        }
        Ok(a)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    /// Rebuilds a trainer from an archive. The frozen networks must be the
    /// ones the checkpoint was trained with.
    pub fn from_archive(a: &Archive<T>, backbone: BackboneAdapter<T>, perceptual: Box<dyn PerceptualNet<T>>) -> Result<Self> {
        let s = Snapshot::read(a, &backbone)?;
        Ok(Self {
            model: s.model,
            config: s.config,
            generator: s.generator,
            discriminator: s.discriminator,
            opt_g: s.opt_g,
            opt_d: s.opt_d,
            rng: s.rng,
            step: s.step,
            margins: s.margins,
            backbone,
            perceptual,
        })
    }

    pub fn load_checkpoint(path: &Path, backbone: BackboneAdapter<T>, perceptual: Box<dyn PerceptualNet<T>>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?, backbone, perceptual)
    }

    /// Replaces the trainable state with the checkpoint at `path`. On error
    /// `self` is left as it was.
    pub fn restore(&mut self, path: &Path) -> Result<()> {
        let s = Snapshot::read(&Archive::load(path)?, &self.backbone)?;
        self.model = s.model;
        self.config = s.config;
        self.generator = s.generator;
        self.discriminator = s.discriminator;
        self.opt_g = s.opt_g;
        self.opt_d = s.opt_d;
        self.rng = s.rng;
        self.step = s.step;
        self.margins = s.margins;
        Ok(())
    }

    /// Trains for `steps` iterations, appending one JSON line per step to
    /// `out/metrics.jsonl`, saving `out/checkpoint.safetensors` every
    /// `checkpoint_every` steps and at the end, and dumping attention maps
    /// to `out/attention.jsonl`.
    pub fn run(&mut self, store: &FaceStore<T>, steps: u64, out: Option<&Path>) -> Result<Vec<StepReport>> {
        let mut log = match out {
            Some(dir) => Some(MetricsLog::open(dir)?),
            None => None,
        };
        let mut reports = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let pairs = self.sample(store)?;
            let r = self.train_step(&pairs)?;
            if let (Some(log), Some(dir)) = (&mut log, out) {
                log.append(&r)?;
                let every = self.config.attention_every;
                if every > 0 && r.step % every == 0 {
                    log.attention(r.step, &self.attention_maps(&pairs)?)?;
                }
                if self.config.checkpoint_every > 0 && r.step % self.config.checkpoint_every == 0 {
                    self.save_checkpoint(&dir.join(CHECKPOINT_FILE))?;
                }
            }
            reports.push(r);
        }
        if let Some(dir) = out {
            self.save_checkpoint(&dir.join(CHECKPOINT_FILE))?;
        }
        Ok(reports)
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const ATTENTION_FILE: &str = "attention.jsonl";

/// One attention dump line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub step: u64,
    pub resolution: usize,
    pub values: Vec<f64>,
}

pub struct MetricsLog {
    metrics: BufWriter<File>,
    attention: BufWriter<File>,
}

impl MetricsLog {
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let p = dir.join(name);
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&p)
                .map_err(|e| Error::io(&p, e))?;
            Ok(BufWriter::new(f))
        };
        Ok(Self {
            metrics: open(METRICS_FILE)?,
            attention: open(ATTENTION_FILE)?,
        })
    }

    pub fn append(&mut self, r: &StepReport) -> Result<()> {
        let line = serde_json::to_string(r).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(self.metrics, "{line}")
            .and_then(|_| self.metrics.flush())
            .map_err(|e| Error::io(METRICS_FILE, e))
    }

    pub fn attention(&mut self, step: u64, maps: &BTreeMap<usize, Vec<f64>>) -> Result<()> {
        for (r, values) in maps {
            let rec = AttentionRecord {
                step,
                resolution: *r,
                values: values.clone(),
            };
            let line = serde_json::to_string(&rec).map_err(|e| Error::Parse(e.to_string()))?;
            writeln!(self.attention, "{line}").map_err(|e| Error::io(ATTENTION_FILE, e))?;
        }
        self.attention.flush().map_err(|e| Error::io(ATTENTION_FILE, e))
    }
}

/// Reads a metrics log written by [`MetricsLog`].
pub fn read_metrics(path: &Path) -> Result<Vec<StepReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

/// Loads only the generator and its configuration from a checkpoint.
pub fn load_generator<T: Scalar>(path: &Path) -> Result<Generator<T>> {
    let a = Archive::<T>::load(path)?;
    let model: ModelConfig = parse_json(a.meta("model_config")?)?;
    let mut g = Generator::new(&model, &mut ChaCha8Rng::seed_from_u64(0))?;
    a.load_module("g", &mut g)?;
    Ok(g)
}

fn ifsr_active(model: &ModelConfig, config: &TrainConfig) -> bool {
    model.use_ifsr && config.weights.ifsr > 0.0
}

fn ifsr_blocks<T: Scalar>(config: &TrainConfig, backbone: &BackboneAdapter<T>) -> RangeInclusive<usize> {
    match config.ifsr_blocks {
        Some((a, b)) => a..=b,
        None => default_ifsr_blocks(backbone.block_count()),
    }
}

fn prepare_margins<T: Scalar>(
    model: &ModelConfig,
    config: &TrainConfig,
    backbone: &BackboneAdapter<T>,
    margins: Option<IfsrMargins>,
) -> Result<Option<IfsrMargins>> {
    if !ifsr_active(model, config) {
        return Ok(margins);
    }
    let range = ifsr_blocks(config, backbone);
    backbone.check_range(*range.start(), *range.end())?;
    match margins {
        Some(m) => Ok(Some(m.restrict(range)?)),
        None => Err(Error::InvalidConfig(format!(
            "variant `{}` regularizes with IFSR and needs a margins file",
            model.name
        ))),
    }
}

/// Trainable state read back from a checkpoint.
struct Snapshot<T: Scalar> {
    model: ModelConfig,
    config: TrainConfig,
    generator: Generator<T>,
    discriminator: Discriminator<T>,
    opt_g: Adam<T>,
    opt_d: Adam<T>,
    rng: ChaCha8Rng,
    step: u64,
    margins: Option<IfsrMargins>,
}

impl<T: Scalar> Snapshot<T> {
    fn read(a: &Archive<T>, backbone: &BackboneAdapter<T>) -> Result<Self> {
        let version = a.meta("format_version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointCorrupt(format!("unsupported checkpoint version {version}")));
        }
        let model: ModelConfig = parse_json(a.meta("model_config")?)?;
        let config: TrainConfig = parse_json(a.meta("train_config")?)?;
        model.validate()?;
        config.validate()?;
        if backbone.checksum() != a.meta("backbone_checksum")? {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint was trained with backbone `{}`, got `{}`",
                a.meta("backbone_id")?,
                backbone.id()
            )));
        }
        let margins = match a.metadata.get("margins") {
            Some(text) => Some(IfsrMargins::parse_tsv(text)?),
            None => None,
        };
        let margins = prepare_margins(&model, &config, backbone, margins)?;
        let mut init = ChaCha8Rng::seed_from_u64(0);
        let mut generator = Generator::new(&model, &mut init)?;
        let mut discriminator = Discriminator::new(&model, &mut init)?;
        a.load_module("g", &mut generator)?;
        a.load_module("d", &mut discriminator)?;
        let o = &config.optimizer;
        let mut opt_g = Adam::new(&generator, o.beta1, o.beta2, o.eps);
        let mut opt_d = Adam::new(&discriminator, o.beta1, o.beta2, o.eps);
        for (name, opt) in [("opt_g", &mut opt_g), ("opt_d", &mut opt_d)] {
            for i in 0..opt.m.len() {
                let m = a.tensor(&format!("{name}.m.{i:05}"))?;
                let v = a.tensor(&format!("{name}.v.{i:05}"))?;
                if m.shape() != opt.m[i].shape() || v.shape() != opt.v[i].shape() {
                    return Err(Error::CheckpointCorrupt(format!("optimizer state {name}[{i}] has the wrong shape")));
                }
                opt.m[i] = m.clone();
                opt.v[i] = v.clone();
            }
            opt.t = parse_num(a.meta(&format!("{name}.t"))?)?;
        }
        let mut rng = ChaCha8Rng::from_seed(unhex(a.meta("rng_seed")?)?);
        rng.set_stream(parse_num(a.meta("rng_stream")?)?);
        rng.set_word_pos(parse_num(a.meta("rng_word_pos")?)?);
        Ok(Self {
            model,
            config,
            generator,
            discriminator,
            opt_g,
            opt_d,
            rng,
            step: parse_num(a.meta("step")?)?,
            margins,
        })
    }
}

fn to_json<S: Serialize>(v: &S) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Parse(e.to_string()))
}

fn parse_json<D: for<'de> Deserialize<'de>>(s: &str) -> Result<D> {
    serde_json::from_str(s).map_err(|e| Error::CheckpointCorrupt(format!("bad embedded config: {e}")))
}

fn parse_num<N: std::str::FromStr>(s: &str) -> Result<N> {
    s.parse().map_err(|_| Error::CheckpointCorrupt(format!("bad number `{s}` in metadata")))
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    let mut out = [0u8; 32];
    hex::decode_to_slice(s, &mut out).map_err(|_| Error::CheckpointCorrupt("bad rng seed".into()))?;
    Ok(out)
}

/// Loss values by term name across a report stream, in step order.
pub fn series(reports: &[StepReport], term: &str) -> Vec<f64> {
    reports
        .iter()
        .filter_map(|r| {
            if term == "total" {
                Some(r.g.total)
            } else {
                r.g.terms.get(term).or_else(|| r.d.as_ref().and_then(|d| d.terms.get(term))).copied()
            }
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

