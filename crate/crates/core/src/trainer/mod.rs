//! Online distillation loops: alternating teacher/student updates for paired
//! data, and the evaluate-and-snapshot loop for unpaired data.

mod learn_best;
mod paired;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{ExtractorConfig, RunConfig, TrainConfig, TrainMode};
use crate::datapipe::{load_dataset, synth_dataset, Augment, Dataset, ItemPlan, Layout, LoadOptions, SampleBatch, Split};
use crate::losses::{FeatureExtractor, Vgg};
use crate::nn::ParamInit;
use crate::optim::Adam;
use crate::{Error, Result};

pub use learn_best::{FidEvaluator, LearnBest, LearnBestEvent, TeacherEvaluator, TeacherSnapshot, UnpairedTrainer};
pub use paired::PairedTrainer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Teacher,
    Student,
    Evaluate,
}

/// Which update comes next given completed teacher and student steps.
///
/// `unit` is the teacher's block length in iterations: 1 for iteration-level
/// interleaving, batches-per-epoch for epoch-level. Every completed teacher
/// block is followed by `n` student blocks of the same length.
pub fn next_event(teacher_done: usize, student_done: usize, n: usize, unit: usize) -> Phase {
    if teacher_done % unit != 0 {
        Phase::Teacher
    } else if student_done < (teacher_done / unit) * n * unit {
        Phase::Student
    } else {
        Phase::Teacher
    }
}

/// Student-epoch position (1-based) of the teacher after `teacher_iters`
/// iterations; teachers run `1/n` as many epochs, so their schedule is stretched.
pub fn teacher_lr_epoch(teacher_iters: usize, n: usize, batches_per_epoch: usize) -> usize {
    teacher_iters * n / batches_per_epoch.max(1) + 1
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub phase: Phase,
    /// Steps completed in this phase, including this one.
    pub iteration: usize,
    /// 1-based epoch of the updated network.
    pub epoch: usize,
    pub lr: f64,
    pub losses: BTreeMap<String, f64>,
}

/// In-memory metrics, mirrored to a newline-delimited JSON file when one is set.
#[derive(Debug, Default)]
pub struct MetricsLog {
    records: Vec<MetricRecord>,
    sink: Option<BufWriter<File>>,
}

impl MetricsLog {
    /// Appends to `path`, creating parent directories.
    pub fn to_file(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            records: Vec::new(),
            sink: Some(BufWriter::new(f)),
        })
    }

    pub fn push(&mut self, rec: MetricRecord) -> Result<()> {
        if let Some(w) = &mut self.sink {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn phase(&self, phase: Phase) -> impl Iterator<Item = &MetricRecord> {
        self.records.iter().filter(move |r| r.phase == phase)
    }
}

/// Bounded history of recent student objectives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    capacity: usize,
    values: VecDeque<f64>,
}

impl LossHistory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            values: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, v: f64) {
        if self.values.len() == self.capacity {
            self.values.pop_front();
        }
        self.values.push_back(v);
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().copied()
    }
}

impl Default for LossHistory {
    fn default() -> Self {
        Self::new(256)
    }
}

/// Deterministic batch sequence over a dataset: batch `i` is a pure function
/// of the stream seed and `i`, so resuming needs only the counter.
#[derive(Debug, Clone)]
pub struct BatchStream {
    seed: u64,
    batch_size: usize,
    aug: Augment,
    cached: Option<(u64, Vec<ItemPlan>)>,
}

impl BatchStream {
    pub fn new(seed: u64, batch_size: usize, aug: Augment) -> Self {
        Self {
            seed,
            batch_size,
            aug,
            cached: None,
        }
    }

    pub fn batch_at(&mut self, data: &Dataset, iteration: usize, dtype: DType, device: &Device) -> Result<SampleBatch> {
        let per_epoch = data.batches_per_epoch(self.batch_size);
        let epoch = (iteration / per_epoch) as u64;
        let offset = iteration % per_epoch;
        if self.cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.cached = Some((epoch, data.epoch_plan(self.seed, epoch, self.aug)));
        }
        let plan = &self.cached.as_ref().expect("cached above").1;
        let lo = offset * self.batch_size;
        let hi = (lo + self.batch_size).min(plan.len());
        data.batch(&plan[lo..hi], self.aug, dtype, device)
    }
}

const STUDENT_STREAM: u64 = 0x5354_5544;
const VAL_SEED: u64 = 0x5641_4c;

pub(crate) fn stream_seeds(seed: u64) -> (u64, u64) {
    (seed, seed ^ STUDENT_STREAM)
}

/// Spatial size of training batches.
pub(crate) fn train_hw(data: &Dataset, aug: Augment) -> (usize, usize) {
    match aug.crop {
        Some(c) => (c, c),
        None => {
            let (w, h) = data.dimensions();
            (h as usize, w as usize)
        }
    }
}

/// Training and (if present) validation splits for a config.
pub fn open_data(cfg: &RunConfig) -> Result<(Dataset, Option<Dataset>)> {
    let unpaired = cfg.train.mode == TrainMode::UnpairedCyclegan;
    if let Some(s) = &cfg.data.synthetic {
        let train = synth_dataset(s.kind, s.count, s.size, s.seed)?;
        let val = if s.val_count > 0 {
            Some(synth_dataset(s.kind, s.val_count, s.size, s.seed ^ VAL_SEED)?)
        } else {
            None
        };
        if unpaired {
            let split = |d: Dataset| Dataset::unpaired(d.source_images().to_vec(), d.target_images().to_vec());
            return Ok((split(train)?, val.map(split).transpose()?));
        }
        return Ok((train, val));
    }
    let root = cfg
        .data
        .root
        .as_deref()
        .ok_or_else(|| Error::config("data.root", "not set"))?;
    let layout = cfg
        .data
        .layout
        .ok_or_else(|| Error::config("data.layout", "not set"))?;
    let opts = LoadOptions {
        load_size: cfg.data.load_size,
    };
    let train = load_dataset(root, layout, Split::Train, &opts)?;
    let val_dir = match layout {
        Layout::AlignedAb => root.join(Split::Val.dir_name()),
        Layout::SplitFolders => root.join(format!("{}A", Split::Val.dir_name())),
    };
    let val = if val_dir.is_dir() {
        Some(load_dataset(root, layout, Split::Val, &opts)?)
    } else {
        None
    };
    Ok((train, val))
}

pub fn build_extractor(cfg: &ExtractorConfig, dtype: DType, device: &Device) -> Result<Box<dyn FeatureExtractor>> {
    Ok(match cfg {
        ExtractorConfig::Vgg16 { weights } => Box::new(Vgg::load(weights, dtype, device)?),
        ExtractorConfig::Random { widths, seed } => {
            Box::new(Vgg::random(*widths, &mut ParamInit::new(*seed, dtype, device))?)
        }
    })
}

/// First non-finite entry of a loss record.
pub(crate) fn non_finite(rec: &BTreeMap<String, f64>) -> Option<String> {
    rec.iter().find(|(_, v)| !v.is_finite()).map(|(k, _)| k.clone())
}

pub(crate) fn prefixed(prefix: &str, tensors: Vec<(String, Tensor)>) -> impl Iterator<Item = (String, Tensor)> + '_ {
    tensors.into_iter().map(move |(n, t)| (format!("{prefix}{n}"), t))
}

pub(crate) fn set_lr(opts: &mut [&mut Adam], train: &TrainConfig, epoch: usize) -> f64 {
    let lr = train.lr * train.lr_factor(epoch);
    for o in opts {
        o.set_lr(lr);
    }
    lr
}

/// Step counts of each optimizer, keyed by role, for the checkpoint manifest.
pub(crate) type StepCounts = BTreeMap<String, HashMap<String, u64>>;

pub(crate) fn diagnostic_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("diagnostic.safetensors")
}

pub(crate) fn state_value<T: serde::de::DeserializeOwned>(state: &serde_json::Value, key: &str, path: &Path) -> Result<T> {
    let v = state
        .get(key)
        .ok_or_else(|| Error::checkpoint(path, format!("manifest state lacks `{key}`")))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::checkpoint(path, format!("manifest `{key}`: {e}")))
}
