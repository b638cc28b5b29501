use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use candle_core::Device;
use clap::{Args, Parser, Subcommand};
use gandistill::checkpoint::{self, ContainerKind};
use gandistill::config::{preset, ExtractorConfig, RunConfig, SynthConfig, TrainMode, PRESETS};
use gandistill::datapipe::{load_dataset, LoadOptions, Split, SynthKind};
use gandistill::netzoo::{derive_teacher, Generator};
use gandistill::nn::ParamInit;
use gandistill::profiler::{compression_ratio, profile};
use gandistill::trainer::{
    build_extractor, open_data, FidEvaluator, MetricRecord, MetricsLog, PairedTrainer, Phase, UnpairedTrainer,
};

/// Set to 1 to pin the math backend to a single thread.
const DETERMINISTIC_ENV: &str = "GANDISTILL_DETERMINISTIC";

#[derive(Parser)]
#[command(name = "gandistill", version, about = "Online multi-teacher distillation for image-to-image GANs")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct ConfigSource {
    /// TOML run configuration.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset instead of a file.
    #[arg(long)]
    preset: Option<String>,
    /// Override a config value, e.g. `--set train.seed=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigSource {
    fn load(&self) -> gandistill::Result<RunConfig> {
        match (&self.config, &self.preset) {
            (Some(p), _) => RunConfig::load(p, &self.overrides),
            (None, Some(name)) => {
                let text = preset(name)?.to_toml()?;
                RunConfig::parse(&text, &self.overrides)
            }
            (None, None) => Err(gandistill::Error::Config {
                path: "<cli>".into(),
                msg: "pass --config or --preset".into(),
            }),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a student with online teachers.
    Train {
        #[command(flatten)]
        source: ConfigSource,
        /// Continue from a training-state checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Build and profile every network, then run two iterations on synthetic data.
        #[arg(long)]
        dry_run: bool,
    },
    /// Print MACs and parameter counts of the student and its teachers.
    Profile {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long, default_value_t = 256)]
        resolution: usize,
    },
    /// FID of the student's translations of a split against its targets.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Needed when the checkpoint is a bare student export.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write the student weights and spec alone.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// List presets, or print one as TOML.
    Presets { name: Option<String> },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1") {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let config_error = e
                .downcast_ref::<gandistill::Error>()
                .is_some_and(gandistill::Error::is_config_error);
            eprintln!("error: {e:#}");
            ExitCode::from(if config_error { 2 } else { 3 })
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let device = Device::Cpu;
    match cli.cmd {
        Command::Train {
            source,
            resume,
            dry_run,
        } => {
            let cfg = source.load()?;
            if dry_run {
                dry_run_train(cfg, &device)
            } else {
                train(cfg, resume.as_deref(), &device)
            }
        }
        Command::Profile { source, resolution } => {
            let cfg = source.load()?;
            print_profiles(&cfg, resolution, &device)?;
            Ok(())
        }
        Command::Evaluate {
            checkpoint,
            split,
            config,
        } => evaluate(&checkpoint, &split, config.as_deref(), &device),
        Command::Export { checkpoint, out } => {
            let student = checkpoint::import_student(&checkpoint, &device)?;
            checkpoint::export_student(&student, &out)?;
            println!("{}", serde_json::json!({"out": out, "params": gandistill::nn::Net::param_count(&student)}));
            Ok(())
        }
        Command::Presets { name } => {
            match name {
                Some(n) => print!("{}", preset(&n)?.to_toml()?),
                None => PRESETS.iter().for_each(|p| println!("{p}")),
            }
            Ok(())
        }
    }
}

fn print_profiles(cfg: &RunConfig, resolution: usize, device: &Device) -> anyhow::Result<()> {
    let dtype = cfg.train.precision.dtype();
    let mut init = ParamInit::new(0, dtype, device);
    let shape = [1, cfg.student.in_channels, resolution, resolution];
    let student = Generator::build(&cfg.student, &mut init)?;
    let s_report = profile(&student, shape)?;
    println!("== student ({:?}, ngf {})", cfg.student.style, cfg.student.ngf);
    print!("{}", s_report.to_table());
    let mut summary = vec![serde_json::json!({
        "net": "student", "macs": s_report.total_macs, "params": s_report.total_params,
    })];
    for d in cfg.teachers.derivations() {
        let spec = derive_teacher(&cfg.student, d)?;
        let t = Generator::build(&spec, &mut init)?;
        let report = profile(&t, shape)?;
        let ratio = compression_ratio(&report, &s_report)?;
        println!("== teacher {d:?}");
        print!("{}", report.to_table());
        println!("student compression vs this teacher: {ratio}");
        summary.push(serde_json::json!({
            "net": format!("{d:?}"), "macs": report.total_macs, "params": report.total_params,
            "ratio_macs": ratio.macs, "ratio_params": ratio.params,
        }));
    }
    println!("{}", serde_json::Value::Array(summary));
    Ok(())
}

fn extractor_for(cfg: &RunConfig, allow_fallback: bool) -> ExtractorConfig {
    match &cfg.distill.extractor {
        ExtractorConfig::Vgg16 { weights } if allow_fallback && !weights.exists() => {
            log::warn!("{} not found; using a random VGG-shaped extractor", weights.display());
            ExtractorConfig::default()
        }
        other => other.clone(),
    }
}

fn train(cfg: RunConfig, resume: Option<&Path>, device: &Device) -> anyhow::Result<()> {
    let dtype = cfg.train.precision.dtype();
    let (train, val) = open_data(&cfg)?;
    let extractor = build_extractor(&cfg.distill.extractor, dtype, device)?;
    std::fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    std::fs::write(cfg.output_dir.join("config.toml"), cfg.to_toml()?)?;
    let state = cfg.output_dir.join("state.safetensors");
    let student = cfg.output_dir.join("student.safetensors");
    match cfg.train.mode {
        TrainMode::PairedPix2pix => {
            let mut t = PairedTrainer::new(cfg.clone(), train, extractor, device)?;
            if let Some(r) = resume {
                t.load_state(r)?;
                log::info!("resumed at student iteration {}", t.student_iters());
            }
            t.log_to_output_dir()?;
            log::info!("training for {} student iterations", t.budget());
            t.run()?;
            t.save_state(&state)?;
            t.export_student(&student)?;
        }
        TrainMode::UnpairedCyclegan => {
            let eval = FidEvaluator::hermetic(cfg.eval.fid_dim, cfg.eval.fid_seed, device)?;
            let mut t = UnpairedTrainer::new(cfg.clone(), train, val, extractor, Box::new(eval), device)?;
            if let Some(r) = resume {
                t.load_state(r)?;
                log::info!("resumed after teacher epoch {}", t.teacher_epochs());
            }
            t.log_to_output_dir()?;
            t.run()?;
            t.save_state(&state)?;
            t.export_student(&student)?;
        }
    }
    println!("{}", serde_json::json!({"state": state, "student": student}));
    Ok(())
}

/// Shrinks a config to a two-iteration synthetic run on the same networks.
fn dry_run_config(mut cfg: RunConfig) -> RunConfig {
    let side = cfg.student.downsample_factor().max(64);
    let paired = cfg.train.mode == TrainMode::PairedPix2pix;
    cfg.data.root = None;
    cfg.data.layout = None;
    cfg.data.crop = None;
    cfg.data.synthetic = Some(SynthConfig {
        kind: SynthKind::EdgeFill,
        count: if paired { cfg.train.batch_size } else { 1 },
        size: side as u32,
        seed: 0,
        val_count: 2,
    });
    cfg.distill.extractor = extractor_for(&cfg, true);
    if paired {
        cfg.train.max_student_iters = Some(1);
        cfg.train.update_interval_n = 1;
    } else {
        cfg.train.batch_size = 1;
        cfg.train.update_interval_n = 1;
        cfg.train.evaluate_interval_m = Some(1);
        cfg.train.epochs_const = 1;
        cfg.train.epochs_decay = 0;
    }
    cfg.train.checkpoint_every = None;
    cfg
}

fn dry_run_train(cfg: RunConfig, device: &Device) -> anyhow::Result<()> {
    print_profiles(&cfg, 256, device)?;
    let cfg = dry_run_config(cfg);
    let dtype = cfg.train.precision.dtype();
    let (train, val) = open_data(&cfg)?;
    let extractor = build_extractor(&cfg.distill.extractor, dtype, device)?;
    let records: Vec<MetricRecord> = match cfg.train.mode {
        TrainMode::PairedPix2pix => {
            let mut t = PairedTrainer::new(cfg.clone(), train, extractor, device)?;
            t.run()?;
            t.metrics().records().to_vec()
        }
        TrainMode::UnpairedCyclegan => {
            let eval = FidEvaluator::hermetic(cfg.eval.fid_dim, cfg.eval.fid_seed, device)?;
            let mut t = UnpairedTrainer::new(cfg.clone(), train, val, extractor, Box::new(eval), device)?;
            t.run()?;
            t.metrics().records().to_vec()
        }
    };
    for r in &records {
        println!("{}", serde_json::to_string(r)?);
    }
    let steps = records.iter().filter(|r| r.phase != Phase::Evaluate).count();
    if steps != 2 {
        bail!("dry run performed {steps} training iterations, expected 2");
    }
    println!("dry run ok");
    Ok(())
}

fn evaluate(ckpt: &Path, split: &str, config: Option<&Path>, device: &Device) -> anyhow::Result<()> {
    let split = match split {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => bail!(gandistill::Error::Config {
            path: "--split".into(),
            msg: format!("unknown split `{other}`"),
        }),
    };
    let (_, manifest) = checkpoint::load(ckpt, device)?;
    let cfg = match (config, manifest.state.get("config")) {
        (Some(p), _) => RunConfig::load(p, &[])?,
        (None, Some(v)) => serde_json::from_value(v.clone()).context("config stored in checkpoint")?,
        (None, None) => bail!(gandistill::Error::Config {
            path: "--config".into(),
            msg: format!("{:?} container carries no config; pass --config", manifest.kind),
        }),
    };
    if manifest.kind == ContainerKind::Diagnostic {
        log::warn!("evaluating a diagnostic checkpoint");
    }
    let student = checkpoint::import_student(ckpt, device)?;
    let data = match (&cfg.data.synthetic, split) {
        (Some(_), Split::Train) => open_data(&cfg)?.0,
        (Some(_), _) => open_data(&cfg)?.1.context("synthetic config has no validation split")?,
        (None, _) => {
            let root = cfg.data.root.as_deref().context("data.root not set")?;
            let layout = cfg.data.layout.context("data.layout not set")?;
            load_dataset(root, layout, split, &LoadOptions { load_size: cfg.data.load_size })?
        }
    };
    let dtype = gandistill::nn::Net::named_params(&student)
        .first()
        .map(|(_, v)| v.dtype())
        .unwrap_or(candle_core::DType::F32);
    let sources = data.all_sources(dtype, device)?;
    let targets = data.all_targets(dtype, device)?;
    let eval = FidEvaluator::hermetic(cfg.eval.fid_dim, cfg.eval.fid_seed, device)?;
    let score = eval.direction(&student, &sources, &targets)?;
    let rec = MetricRecord {
        phase: Phase::Evaluate,
        iteration: 0,
        epoch: 0,
        lr: 0.0,
        losses: [("fid".to_string(), score)].into_iter().collect(),
    };
    let mut log = MetricsLog::to_file(&cfg.output_dir.join("metrics.ndjson"))?;
    log.push(rec)?;
    println!(
        "{}",
        serde_json::json!({"split": split, "fid": score, "images": sources.dim(0)?, "fid_dim": cfg.eval.fid_dim})
    );
    Ok(())
}
