use std::path::Path;

use faceswap::archive::{module_checksum, Archive};
use faceswap::backbone::{perceptual_from_spec, BackboneAdapter};
use faceswap::calibration::{
    collect_distances, derive_margins, emit_report, CalibrationReport, GeneratorSwap, IfsrMargins, SourcePassThrough,
    SwapModel, TargetPassThrough,
};
use faceswap::config::RunConfig;
use faceswap::eval::{evaluate_dirs, load_labelled, Adapters, StubEstimator, REPORT_VERSION};
use faceswap::generator::{ModelConfig, PRESETS};
use faceswap::pipeline::synthetic::SynthConfig;
use faceswap::pipeline::{load_face, FaceStore, Template};
use faceswap::trainer::{
    load_generator, median, series, Trainer, ATTENTION_FILE, CHECKPOINT_FILE, CHECKPOINT_VERSION, METRICS_FILE,
};
use faceswap::{Error, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::plot::figures_for;
use crate::{
    AlignArgs, CalibrateArgs, Command, ConfigCommand, EvaluateArgs, PlotArgs, RunConfigArgs, SwapArgs, SynthArgs,
    TrainArgs,
};

/// An error together with the pipeline stage that raised it.
#[derive(Debug)]
pub struct Failure {
    pub stage: &'static str,
    pub error: Error,
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        self.error.class().exit_code()
    }

    /// One human-readable line, then one JSON line, on stderr.
    pub fn report(&self) {
        eprintln!("error [{}]: {}", self.stage, self.error);
        let diag = serde_json::json!({
            "stage": self.stage,
            "class": format!("{:?}", self.error.class()).to_lowercase(),
            "exit_code": self.exit_code(),
            "message": self.error.to_string(),
        });
        eprintln!("{diag}");
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

trait Stage<T> {
    fn stage(self, stage: &'static str) -> Outcome<T>;
}

impl<T> Stage<T> for faceswap::Result<T> {
    fn stage(self, stage: &'static str) -> Outcome<T> {
        self.map_err(|error| Failure { stage, error })
    }
}

pub fn run<T: Scalar>(command: &Command) -> Outcome {
    match command {
        Command::Align(a) => align::<T>(a),
        Command::Synth(a) => synth(a),
        Command::CalibrateIfsr(a) => calibrate::<T>(a),
        Command::Train(a) => train::<T>(a),
        Command::Swap(a) => swap::<T>(a),
        Command::Evaluate(a) => evaluate::<T>(a),
        Command::Plot(a) => plot(a),
        Command::Config(c) => config(c),
        Command::Version => {
            println!("faceswap {}", env!("CARGO_PKG_VERSION"));
            println!("checkpoint format {CHECKPOINT_VERSION}");
            println!("metric report version {REPORT_VERSION}");
            Ok(())
        }
    }
}

fn align<T: Scalar>(a: &AlignArgs) -> Outcome {
    let template = match &a.template {
        Some(p) => Template::load(p).stage("template")?,
        None => Template::arcface(),
    };
    let faces = load_labelled::<T>(&a.input, &template, a.resolution).stage("align")?;
    let mut n = 0;
    for (rel, face) in faces {
        let out = a.out.join(&rel).with_extension("png");
        face.save(&out).stage("write")?;
        n += 1;
    }
    println!("aligned {n} images into {}", a.out.display());
    Ok(())
}

fn synth(a: &SynthArgs) -> Outcome {
    let cfg = SynthConfig {
        identities: a.identities,
        per_identity: a.per_identity,
        resolution: a.resolution,
        seed: a.seed,
    };
    cfg.write(&a.out, a.raw).stage("synth")?;
    println!(
        "wrote {} images for {} identities into {}",
        a.identities * a.per_identity,
        a.identities,
        a.out.display()
    );
    Ok(())
}

fn calibrate<T: Scalar>(a: &CalibrateArgs) -> Outcome {
    let backbone = BackboneAdapter::<T>::from_spec(&a.backbone).stage("backbone")?;
    let generator = match a.swap_model.as_str() {
        "target" | "source" => None,
        path => Some(load_generator::<T>(Path::new(path)).stage("load-checkpoint")?),
    };
    let resolution = generator.as_ref().map_or(a.resolution, |g| g.config().resolution);
    let store = FaceStore::<T>::load_dir(&a.data, &Template::arcface(), resolution).stage("load-data")?;
    let model: Box<dyn SwapModel<T> + '_> = match (&generator, a.swap_model.as_str()) {
        (Some(g), _) => Box::new(GeneratorSwap {
            generator: g,
            backbone: &backbone,
            label: format!("checkpoint:{}", &module_checksum(g)[..12]),
        }),
        (None, "target") => Box::new(TargetPassThrough),
        _ => Box::new(SourcePassThrough),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let samples = collect_distances(model.as_ref(), &backbone, &store, a.n, &mut rng).stage("collect")?;
    let first = a.first.unwrap_or(1);
    let last = a.last.unwrap_or(backbone.block_count());
    backbone.check_range(first, last).stage("collect")?;
    let margins = derive_margins(&samples, first..=last, &model.id(), &backbone.id()).stage("margins")?;
    let mut report = CalibrationReport::build(&samples, &margins).stage("report")?;
    report.metadata.insert("seed".into(), a.seed.to_string());
    report.metadata.insert("triplets".into(), a.n.to_string());
    let report_path = a.report.clone().unwrap_or_else(|| a.out.with_extension("report.json"));
    emit_report(&report, &margins, &report_path, &a.out).stage("write")?;
    for b in &report.blocks {
        let m = margins.margin(b.block_index).map_or("-".into(), |m| format!("{m:.4}"));
        println!(
            "block {:2}  c2t {:.4}  c2s {:.4}  eer {:.4}  margin {m}",
            b.block_index, b.c2t_mean, b.c2s_mean, b.eer
        );
    }
    println!("margins: {}\nreport: {}", a.out.display(), report_path.display());
    Ok(())
}

fn resolve_config(r: &RunConfigArgs) -> Outcome<RunConfig> {
    let path = Path::new(&r.config);
    let mut cfg = if path.is_file() {
        RunConfig::load(path).stage("config")?
    } else {
        RunConfig::preset(&r.config, r.scale.into()).stage("config")?
    };
    cfg.apply_overrides(&r.overrides).stage("config")?;
    if let Some(seed) = r.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn train<T: Scalar>(a: &TrainArgs) -> Outcome {
    let cfg = resolve_config(&a.run)?;
    let backbone = BackboneAdapter::<T>::from_spec(&cfg.backbone).stage("backbone")?;
    let perceptual = perceptual_from_spec::<T>(&cfg.perceptual).stage("perceptual")?;
    let ckpt = a.out.join(CHECKPOINT_FILE);
    let mut trainer = if a.resume && ckpt.exists() {
        Trainer::load_checkpoint(&ckpt, backbone, perceptual).stage("resume")?
    } else {
        let margins = match &a.margins {
            Some(p) => Some(IfsrMargins::load(p).stage("margins")?),
            None => None,
        };
        let t = Trainer::new(cfg.model.clone(), cfg.train.clone(), backbone, perceptual, margins, cfg.seed)
            .stage("init")?;
        std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e)).stage("init")?;
        for stale in [METRICS_FILE, ATTENTION_FILE] {
            let p = a.out.join(stale);
            if p.exists() {
                std::fs::remove_file(&p).map_err(|e| Error::io(&p, e)).stage("init")?;
            }
        }
        faceswap::archive::write_atomic(&a.out.join("run_config.toml"), cfg.render().as_bytes()).stage("init")?;
        t
    };
    let resolution = trainer.model.resolution;
    let store = FaceStore::<T>::load_dir(&a.data, &Template::arcface(), resolution).stage("load-data")?;
    let remaining = a.steps.saturating_sub(trainer.step);
    let reports = trainer.run(&store, remaining, Some(&a.out)).stage("train")?;
    let total = series(&reports, "total");
    let k = total.len().min(100);
    if k > 0 {
        println!(
            "steps {}  median total first {k}: {:.4}  last {k}: {:.4}",
            trainer.step,
            median(&total[..k]),
            median(&total[total.len() - k..])
        );
    }
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn swap<T: Scalar>(a: &SwapArgs) -> Outcome {
    let generator = load_generator::<T>(&a.checkpoint).stage("load-checkpoint")?;
    let backbone = BackboneAdapter::<T>::from_spec(&a.backbone).stage("backbone")?;
    let archive = Archive::<T>::load(&a.checkpoint).stage("load-checkpoint")?;
    if archive.meta("backbone_checksum").stage("load-checkpoint")? != backbone.checksum() {
        return Err(Failure {
            stage: "backbone",
            error: Error::ConfigMismatch(format!("checkpoint was not trained with backbone `{}`", a.backbone)),
        });
    }
    let r = generator.config().resolution;
    let template = Template::arcface();
    let target = load_face::<T>(&a.target, &template, r, "target").stage("align-target")?;
    let source = load_face::<T>(&a.source, &template, r, "source").stage("align-source")?;
    let z = backbone.embed(&source).stage("embed-source")?;
    let out = generator.generate(&target, &z).stage("generate")?;
    out.save(&a.out).stage("write")?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn evaluate<T: Scalar>(a: &EvaluateArgs) -> Outcome {
    let adapters = Adapters::<T> {
        identity: match &a.gallery {
            Some(_) => Some(BackboneAdapter::from_spec(&a.identity_encoder).stage("identity-encoder")?),
            None => None,
        },
        pose: (!a.no_pose).then(|| Box::new(StubEstimator::pose()) as _),
        expression: (!a.no_expression).then(|| Box::new(StubEstimator::expression()) as _),
        features: if a.no_fid {
            None
        } else {
            Some(perceptual_from_spec(&a.features).stage("features")?)
        },
    };
    let report = evaluate_dirs(&a.swapped, &a.reference, a.gallery.as_deref(), &adapters, a.resolution)
        .stage("evaluate")?;
    report.save(&a.out).stage("write")?;
    print!("{}", report.to_json());
    Ok(())
}

fn plot(a: &PlotArgs) -> Outcome {
    let figures = figures_for(&a.input).stage("plot")?;
    for p in figures.write(&a.out).stage("write")? {
        println!("{}", p.display());
    }
    Ok(())
}

fn config(c: &ConfigCommand) -> Outcome {
    match c {
        ConfigCommand::List => {
            for name in PRESETS {
                let m = ModelConfig::preset(name).stage("config")?;
                println!("{name:10} mapping={} ifsr={}", m.use_mapping, m.use_ifsr);
            }
        }
        ConfigCommand::Show { name, scale } => {
            let cfg = RunConfig::preset(name, (*scale).into()).stage("config")?;
            print!("{}", cfg.model.describe());
        }
        ConfigCommand::Dump(r) => print!("{}", resolve_config(r)?.render()),
    }
    Ok(())
}
