//! Run configuration: TOML sections per module, `--set a.b=value` overrides
//! and named presets.

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::datapipe::{Augment, Layout, SynthKind};
use crate::losses::{GanFamily, LossWeights, SsimParams};
use crate::netzoo::{GeneratorSpec, SharedDiscriminatorSpec, TeacherDerivation};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    PairedPix2pix,
    UnpairedCyclegan,
}

/// How teacher and student updates interleave in paired mode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternation {
    /// One teacher iteration, then `n` student iterations.
    #[default]
    Iteration,
    /// One teacher epoch, then `n` student epochs.
    Epoch,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

fn default_lr() -> f64 {
    2e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Student epochs at the initial learning rate.
    pub epochs_const: usize,
    /// Student epochs of linear decay to zero.
    pub epochs_decay: usize,
    pub update_interval_n: usize,
    #[serde(default)]
    pub evaluate_interval_m: Option<usize>,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub alternation: Alternation,
    /// Stop after this many student iterations (paired mode).
    #[serde(default)]
    pub max_student_iters: Option<usize>,
    #[serde(default)]
    pub precision: Precision,
    /// Save a resumable checkpoint every this many student iterations (paired mode).
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

impl TrainConfig {
    pub fn student_epochs(&self) -> usize {
        self.epochs_const + self.epochs_decay
    }

    /// Learning-rate factor for 1-based student epoch `e`: 1 for the constant
    /// phase, then linear, reaching 0 at the last scheduled epoch.
    pub fn lr_factor(&self, e: usize) -> f64 {
        if e <= self.epochs_const {
            1.0
        } else if self.epochs_decay == 0 {
            0.0
        } else {
            (self.student_epochs().saturating_sub(e) as f64 / self.epochs_decay as f64).clamp(0.0, 1.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeachersConfig {
    #[serde(default)]
    pub wider: Option<WiderConfig>,
    #[serde(default)]
    pub deeper: Option<DeeperConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WiderConfig {
    pub eta: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeeperConfig {
    pub blocks_per_site: usize,
}

impl TeachersConfig {
    /// Derivations in head order: wider first.
    pub fn derivations(&self) -> Vec<TeacherDerivation> {
        let mut v = Vec::new();
        if let Some(w) = self.wider {
            v.push(TeacherDerivation::Wider { eta: w.eta });
        }
        if let Some(d) = self.deeper {
            v.push(TeacherDerivation::Deeper {
                blocks_per_site: d.blocks_per_site,
            });
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub kind: SynthKind,
    pub count: usize,
    pub size: u32,
    #[serde(default)]
    pub seed: u64,
    /// Size of the generated validation split.
    #[serde(default = "default_val_count")]
    pub val_count: usize,
}

fn default_val_count() -> usize {
    4
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub root: Option<PathBuf>,
    #[serde(default)]
    pub layout: Option<Layout>,
    #[serde(default)]
    pub synthetic: Option<SynthConfig>,
    /// Images are resized to this square side at load time.
    #[serde(default)]
    pub load_size: Option<u32>,
    #[serde(default)]
    pub crop: Option<usize>,
    /// Random horizontal flip on the training split.
    #[serde(default = "default_true")]
    pub flip: bool,
}

impl DataConfig {
    pub fn train_augment(&self) -> Augment {
        Augment {
            flip: self.flip,
            crop: self.crop,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExtractorConfig {
    /// Pretrained torchvision VGG16 weights in safetensors format.
    Vgg16 { weights: PathBuf },
    /// Randomly initialized VGG-shaped network with the given block widths.
    Random { widths: [usize; 4], seed: u64 },
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig::Random {
            widths: [8, 16, 32, 32],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    /// Channel-distillation sites; defaults to the student's downsample outputs.
    #[serde(default)]
    pub cd_sites: Option<Vec<String>>,
    #[serde(default)]
    pub extractor: ExtractorConfig,
    #[serde(default)]
    pub ssim: SsimParams,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            cd_sites: None,
            extractor: ExtractorConfig::default(),
            ssim: SsimParams::default(),
        }
    }
}

fn default_fid_dim() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Width of the pooled features of the hermetic FID extractor.
    #[serde(default = "default_fid_dim")]
    pub fid_dim: usize,
    #[serde(default)]
    pub fid_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fid_dim: default_fid_dim(),
            fid_seed: 0,
        }
    }
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub student: GeneratorSpec,
    pub teachers: TeachersConfig,
    pub discriminator: SharedDiscriminatorSpec,
    pub losses: LossWeights,
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn cd_sites(&self) -> Vec<String> {
        self.distill
            .cd_sites
            .clone()
            .unwrap_or_else(|| self.student.downsample_taps())
    }

    pub fn validate(&self) -> Result<()> {
        let at = |path: &str, e: Error| match e {
            Error::InvalidSpec(m) => Error::config(path, m),
            other => other,
        };
        self.student.validate().map_err(|e| at("student", e))?;
        if self.student.deeper.is_some() {
            return Err(Error::config("student.deeper", "the student cannot be a derived spec"));
        }
        self.discriminator.validate().map_err(|e| at("discriminator", e))?;
        self.losses.validate().map_err(|e| at("losses", e))?;
        self.distill.ssim.validate().map_err(|e| at("distill.ssim", e))?;
        for d in self.teachers.derivations() {
            crate::netzoo::derive_teacher(&self.student, d).map_err(|e| at("teachers", e))?;
        }
        let t = &self.train;
        for (name, v) in [
            ("train.update_interval_n", t.update_interval_n),
            ("train.batch_size", t.batch_size),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be >= 1"));
            }
        }
        if t.student_epochs() == 0 {
            return Err(Error::config("train.epochs_const", "at least one student epoch is required"));
        }
        if !(t.lr.is_finite() && t.lr > 0.0) {
            return Err(Error::config("train.lr", "must be a positive number"));
        }
        let teachers = self.teachers.derivations().len();
        match t.mode {
            TrainMode::PairedPix2pix => {
                if teachers == 0 {
                    return Err(Error::config("teachers", "paired mode needs at least one teacher"));
                }
                if self.discriminator.num_heads != teachers {
                    return Err(Error::config(
                        "discriminator.num_heads",
                        format!("paired mode needs one head per teacher ({teachers})"),
                    ));
                }
            }
            TrainMode::UnpairedCyclegan => {
                if self.teachers.deeper.is_some() {
                    return Err(Error::config("teachers.deeper", "unpaired mode uses the wider teacher only"));
                }
                if self.teachers.wider.is_none() {
                    return Err(Error::config("teachers.wider", "unpaired mode needs the wider teacher"));
                }
                match t.evaluate_interval_m {
                    None | Some(0) => {
                        return Err(Error::config("train.evaluate_interval_m", "unpaired mode needs m >= 1"))
                    }
                    Some(_) => {}
                }
                if self.discriminator.num_heads != 1 {
                    return Err(Error::config("discriminator.num_heads", "unpaired discriminators have one head"));
                }
                if self.student.in_channels != self.student.out_channels {
                    return Err(Error::config("student", "cycle training needs in_channels == out_channels"));
                }
            }
        }
        match (&self.data.root, &self.data.synthetic) {
            (Some(_), Some(_)) => return Err(Error::config("data", "set either root or synthetic, not both")),
            (None, None) => return Err(Error::config("data", "set data.root or data.synthetic")),
            (Some(_), None) if self.data.layout.is_none() => {
                return Err(Error::config("data.layout", "required with data.root"))
            }
            _ => {}
        }
        Ok(())
    }

    /// Parses TOML text, applies `key.path=value` overrides and validates.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config("<file>", e.to_string()))?;
        for ov in overrides {
            apply_override(&mut doc, ov)?;
        }
        let de = toml::Value::Table(doc);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config("<serialize>", e.to_string()))
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, falling back to a string.
pub fn apply_override(doc: &mut toml::Table, ov: &str) -> Result<()> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| Error::config(ov, "override must look like key.path=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty key segment"));
    }
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{part}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub const PRESETS: [&str; 6] = [
    "edges2shoes_resnet",
    "edges2shoes_unet",
    "cityscapes_resnet",
    "cityscapes_unet",
    "horse2zebra",
    "summer2winter",
];

struct Row {
    name: &'static str,
    unet: bool,
    paired: bool,
    epochs: (usize, usize),
    n: usize,
    m: Option<usize>,
    ndf: usize,
    lambda_cd: f64,
    d_share: usize,
    batch: usize,
    dataset: &'static str,
}

const ROWS: [Row; 6] = [
    Row { name: "edges2shoes_resnet", unet: false, paired: true, epochs: (100, 100), n: 1, m: None, ndf: 128, lambda_cd: 1e2, d_share: 3, batch: 4, dataset: "edges2shoes" },
    Row { name: "edges2shoes_unet", unet: true, paired: true, epochs: (100, 100), n: 1, m: None, ndf: 128, lambda_cd: 1e1, d_share: 5, batch: 4, dataset: "edges2shoes" },
    Row { name: "cityscapes_resnet", unet: false, paired: true, epochs: (300, 450), n: 3, m: None, ndf: 128, lambda_cd: 0.0, d_share: 4, batch: 1, dataset: "cityscapes" },
    Row { name: "cityscapes_unet", unet: true, paired: true, epochs: (300, 450), n: 3, m: None, ndf: 128, lambda_cd: 5e1, d_share: 5, batch: 4, dataset: "cityscapes" },
    Row { name: "horse2zebra", unet: false, paired: false, epochs: (100, 100), n: 4, m: Some(10), ndf: 64, lambda_cd: 5e2, d_share: 0, batch: 1, dataset: "horse2zebra" },
    Row { name: "summer2winter", unet: false, paired: false, epochs: (100, 100), n: 4, m: Some(6), ndf: 64, lambda_cd: 1e2, d_share: 0, batch: 1, dataset: "summer2winter_yosemite" },
];

/// Hyper-parameter rows for the four benchmark datasets.
pub fn preset(name: &str) -> Result<RunConfig> {
    let row = ROWS
        .iter()
        .find(|r| r.name == name)
        .ok_or_else(|| Error::config("preset", format!("unknown preset `{name}`; known: {}", PRESETS.join(", "))))?;
    let student = if row.unet {
        GeneratorSpec::unet(16)
    } else {
        GeneratorSpec::resnet_mobile(16)
    };
    let (teachers, discriminator, gan_family) = if row.paired {
        (
            TeachersConfig {
                wider: Some(WiderConfig { eta: 4 }),
                deeper: Some(DeeperConfig {
                    blocks_per_site: if row.unet { 2 } else { 1 },
                }),
            },
            SharedDiscriminatorSpec::new(row.ndf, row.d_share, 2),
            GanFamily::Hinge,
        )
    } else {
        (
            TeachersConfig {
                wider: Some(WiderConfig { eta: 4 }),
                deeper: None,
            },
            SharedDiscriminatorSpec {
                in_channels: 3,
                ..SharedDiscriminatorSpec::new(row.ndf, 0, 1)
            },
            GanFamily::Lsgan,
        )
    };
    let cfg = RunConfig {
        student,
        teachers,
        discriminator,
        losses: LossWeights {
            lambda_cd: row.lambda_cd,
            gan_family,
            ..LossWeights::default()
        },
        train: TrainConfig {
            mode: if row.paired {
                TrainMode::PairedPix2pix
            } else {
                TrainMode::UnpairedCyclegan
            },
            epochs_const: row.epochs.0,
            epochs_decay: row.epochs.1,
            update_interval_n: row.n,
            evaluate_interval_m: row.m,
            batch_size: row.batch,
            lr: default_lr(),
            seed: 0,
            alternation: Alternation::Iteration,
            max_student_iters: None,
            precision: Precision::F32,
            checkpoint_every: None,
        },
        data: DataConfig {
            root: Some(PathBuf::from(format!("datasets/{}", row.dataset))),
            layout: Some(if row.paired { Layout::AlignedAb } else { Layout::SplitFolders }),
            synthetic: None,
            load_size: Some(256),
            crop: None,
            flip: true,
        },
        distill: DistillConfig {
            cd_sites: None,
            extractor: ExtractorConfig::Vgg16 {
                weights: PathBuf::from("weights/vgg16.safetensors"),
            },
            ssim: SsimParams::default(),
        },
        eval: EvalConfig::default(),
        output_dir: PathBuf::from(format!("runs/{}", row.name)),
    };
    cfg.validate()?;
    Ok(cfg)
}
