use std::collections::BTreeMap;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    non_finite, prefixed, set_lr, state_value, stream_seeds, train_hw, BatchStream, LossHistory, MetricRecord,
    MetricsLog, Phase, StepCounts,
};
use crate::checkpoint::{self, ContainerKind, Manifest};
use crate::config::{RunConfig, TrainMode};
use crate::datapipe::{Dataset, PairMode, SampleBatch};
use crate::evalkit::{extract_stats, fid, ConvPoolExtractor, PooledExtractor};
use crate::losses::{
    cyclegan_teacher_loss, gan_loss, total_student_loss, FeatureExtractor, GanFamily, Side, StudentLoss,
    StudentLossInputs,
};
use crate::netzoo::{derive_teacher, AdapterSet, Generator, SharedDiscriminator};
use crate::nn::{Mode, Net, ParamInit, TapSink};
use crate::optim::{Adam, AdamConfig};
use crate::{Error, Result};

/// Scores the two translation directions on a validation split; lower is better.
pub trait TeacherEvaluator {
    /// Returns `(F_A, F_B)`: the quality of `g_a`'s A -> B and `g_b`'s B -> A translations.
    fn evaluate(&mut self, g_a: &Generator, g_b: &Generator, val: &Dataset) -> Result<(f64, f64)>;
}

/// FID with an injected pooled-feature extractor.
pub struct FidEvaluator {
    extractor: Box<dyn PooledExtractor>,
    chunk: usize,
}

impl FidEvaluator {
    pub fn new(extractor: Box<dyn PooledExtractor>) -> Self {
        Self { extractor, chunk: 8 }
    }

    /// The hermetic random-conv extractor.
    pub fn hermetic(dim: usize, seed: u64, device: &Device) -> Result<Self> {
        Ok(Self::new(Box::new(ConvPoolExtractor::new(seed, dim, device)?)))
    }

    fn translate(&self, g: &Generator, images: &Tensor) -> Result<Tensor> {
        let n = images.dim(0)?;
        let mut outs = Vec::new();
        for lo in (0..n).step_by(self.chunk) {
            let len = self.chunk.min(n - lo);
            outs.push(g.forward(&images.narrow(0, lo, len)?, Mode::Eval)?.detach());
        }
        Ok(Tensor::cat(&outs, 0)?)
    }

    /// FID of `g`'s translations of `source` against `target`.
    pub fn direction(&self, g: &Generator, source: &Tensor, target: &Tensor) -> Result<f64> {
        let fake = self.translate(g, source)?;
        fid(
            &extract_stats(&fake, self.extractor.as_ref())?,
            &extract_stats(target, self.extractor.as_ref())?,
        )
    }
}

impl TeacherEvaluator for FidEvaluator {
    fn evaluate(&mut self, g_a: &Generator, g_b: &Generator, val: &Dataset) -> Result<(f64, f64)> {
        let dtype = g_a.named_params().first().map(|(_, v)| v.dtype()).unwrap_or(DType::F32);
        let dev = g_a.named_params().first().map(|(_, v)| v.device().clone()).unwrap_or(Device::Cpu);
        let a = val.all_sources(dtype, &dev)?;
        let b = val.all_targets(dtype, &dev)?;
        Ok((self.direction(g_a, &a, &b)?, self.direction(g_b, &b, &a)?))
    }
}

/// Best-so-far bookkeeping of the evaluate-and-snapshot loop.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearnBest {
    pub best_a: Option<f64>,
    pub best_b: Option<f64>,
    /// Metric stored with the current snapshot: the best `F_A` seen when it was taken.
    pub snapshot_metric: Option<f64>,
    pub updates: usize,
}

impl LearnBest {
    /// Folds in one evaluation. Returns true when `G_A` should be snapshotted,
    /// i.e. when either direction strictly improved on its best. Both bests
    /// are updated when both improve.
    pub fn observe(&mut self, fid_a: f64, fid_b: f64) -> bool {
        let improves = |best: Option<f64>, f: f64| f.is_finite() && best.is_none_or(|b| f < b);
        let (ia, ib) = (improves(self.best_a, fid_a), improves(self.best_b, fid_b));
        if ia {
            self.best_a = Some(fid_a);
        }
        if ib {
            self.best_b = Some(fid_b);
        }
        if ia || ib {
            self.snapshot_metric = Some(self.best_a.unwrap_or(f64::INFINITY));
            self.updates += 1;
        }
        ia || ib
    }
}

/// Frozen copy of `G_A` that the student distills from.
pub struct TeacherSnapshot {
    pub generator: Generator,
    pub metric: f64,
    /// Teacher epoch at which it was taken.
    pub epoch: usize,
    pub fid_a: f64,
    pub fid_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LearnBestEvent {
    TeacherEpoch { epoch: usize },
    Evaluation { epoch: usize, fid_a: f64, fid_b: f64, snapshot: bool },
    EvaluationFailed { epoch: usize, reason: String },
    StudentBlock { epoch: usize, student_epochs: usize, snapshot_epoch: usize },
    StudentBlockSkipped { epoch: usize },
}

#[derive(Serialize, Deserialize)]
struct Counters {
    teacher_epochs: usize,
    student_epochs: usize,
    teacher_iters: usize,
    student_iters: usize,
}

/// Unpaired training: CycleGAN teachers `G_A`, `G_B` with discriminators, an
/// evaluation every `m` teacher epochs, and `m * n` student epochs distilled
/// from the best `G_A` snapshot after each evaluation.
pub struct UnpairedTrainer {
    cfg: RunConfig,
    device: Device,
    dtype: DType,
    data: Dataset,
    val: Dataset,
    g_a: Generator,
    g_b: Generator,
    d_a: SharedDiscriminator,
    d_b: SharedDiscriminator,
    opt_g: Adam,
    opt_d: Adam,
    student: Generator,
    adapters: AdapterSet,
    opt_s: Adam,
    extractor: Box<dyn FeatureExtractor>,
    evaluator: Box<dyn TeacherEvaluator>,
    learn_best: LearnBest,
    snapshot: Option<TeacherSnapshot>,
    teacher_stream: BatchStream,
    student_stream: BatchStream,
    counters: Counters,
    events: Vec<LearnBestEvent>,
    history: LossHistory,
    metrics: MetricsLog,
}

fn named(prefix: &str, net: &dyn Net) -> Vec<(String, candle_core::Var)> {
    net.named_params()
        .into_iter()
        .map(|(n, v)| (format!("{prefix}{n}"), v))
        .collect()
}

impl UnpairedTrainer {
    pub fn new(
        cfg: RunConfig,
        data: Dataset,
        val: Option<Dataset>,
        extractor: Box<dyn FeatureExtractor>,
        evaluator: Box<dyn TeacherEvaluator>,
        device: &Device,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.train.mode != TrainMode::UnpairedCyclegan {
            return Err(Error::config("train.mode", "UnpairedTrainer needs unpaired_cyclegan"));
        }
        if data.mode() != PairMode::Unpaired {
            return Err(Error::Dataset("unpaired training needs an unpaired dataset".into()));
        }
        let val = val.ok_or_else(|| Error::Dataset("unpaired training needs a validation split".into()))?;
        let dtype = cfg.train.precision.dtype();
        let mut init = ParamInit::new(cfg.train.seed, dtype, device);
        let student = Generator::build(&cfg.student, &mut init)?;
        let derivation = *cfg
            .teachers
            .derivations()
            .first()
            .ok_or_else(|| Error::config("teachers.wider", "required"))?;
        let t_spec = derive_teacher(&cfg.student, derivation)?;
        let g_a = Generator::build(&t_spec, &mut init)?;
        let g_b = Generator::build(&t_spec, &mut init)?;
        let d_a = SharedDiscriminator::build(&cfg.discriminator, &mut init)?;
        let d_b = SharedDiscriminator::build(&cfg.discriminator, &mut init)?;
        if cfg.discriminator.in_channels != cfg.student.out_channels {
            return Err(Error::config("discriminator.in_channels", "unpaired discriminators see one image"));
        }
        let aug = cfg.data.train_augment();
        let (h, w) = train_hw(&data, aug);
        let probe = [1, cfg.student.in_channels, h, w];
        student.tap_shapes(probe)?;
        d_a.walk_shapes([1, cfg.discriminator.in_channels, h, w], &mut |_| {})?;
        let adapters = AdapterSet::attach(&student, &g_a, &cfg.cd_sites(), probe, &mut init)?;
        let adam = AdamConfig::gan(cfg.train.lr);
        let mut gp = named("g_a.", &g_a);
        gp.extend(named("g_b.", &g_b));
        let mut dp = named("d_a.", &d_a);
        dp.extend(named("d_b.", &d_b));
        let mut sp = named("student.", &student);
        sp.extend(adapters.named_params());
        let (ts, ss) = stream_seeds(cfg.train.seed);
        let bs = cfg.train.batch_size;
        Ok(Self {
            opt_g: Adam::new(gp, adam)?,
            opt_d: Adam::new(dp, adam)?,
            opt_s: Adam::new(sp, adam)?,
            teacher_stream: BatchStream::new(ts, bs, aug),
            student_stream: BatchStream::new(ss, bs, aug),
            device: device.clone(),
            dtype,
            data,
            val,
            g_a,
            g_b,
            d_a,
            d_b,
            student,
            adapters,
            extractor,
            evaluator,
            learn_best: LearnBest::default(),
            snapshot: None,
            counters: Counters {
                teacher_epochs: 0,
                student_epochs: 0,
                teacher_iters: 0,
                student_iters: 0,
            },
            events: Vec::new(),
            history: LossHistory::default(),
            metrics: MetricsLog::default(),
            cfg,
        })
    }

    pub fn log_to_output_dir(&mut self) -> Result<()> {
        self.metrics = MetricsLog::to_file(&self.cfg.output_dir.join("metrics.ndjson"))?;
        Ok(())
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn student(&self) -> &Generator {
        &self.student
    }

    pub fn teacher_a(&self) -> &Generator {
        &self.g_a
    }

    pub fn teacher_b(&self) -> &Generator {
        &self.g_b
    }

    pub fn adapters(&self) -> &AdapterSet {
        &self.adapters
    }

    pub fn snapshot(&self) -> Option<&TeacherSnapshot> {
        self.snapshot.as_ref()
    }

    pub fn learn_best(&self) -> &LearnBest {
        &self.learn_best
    }

    pub fn events(&self) -> &[LearnBestEvent] {
        &self.events
    }

    pub fn metrics(&self) -> &MetricsLog {
        &self.metrics
    }

    pub fn teacher_epochs(&self) -> usize {
        self.counters.teacher_epochs
    }

    pub fn student_epochs(&self) -> usize {
        self.counters.student_epochs
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.data.batches_per_epoch(self.cfg.train.batch_size)
    }

    /// Teacher epochs of a full run: enough for the scheduled student epochs at interval `n`.
    pub fn teacher_epoch_budget(&self) -> usize {
        self.cfg.train.student_epochs().div_ceil(self.cfg.train.update_interval_n)
    }

    fn m(&self) -> usize {
        self.cfg.train.evaluate_interval_m.unwrap_or(1)
    }

    /// One CycleGAN generator update, then one update of both discriminators.
    pub fn step_teacher(&mut self, batch: &SampleBatch) -> Result<BTreeMap<String, f64>> {
        let cl = cyclegan_teacher_loss(&self.g_a, &self.g_b, &self.d_a, &self.d_b, batch)?;
        let mut rec = cl.record()?;
        if let Some(k) = non_finite(&rec) {
            return Err(Error::NonFinite(format!("teacher loss `{k}`")));
        }
        self.opt_g.step(&cl.total.backward()?)?;
        let d = |d: &SharedDiscriminator, real: &Tensor, fake: &Tensor| -> Result<Tensor> {
            gan_loss(
                Some(&d.forward(real, 0, Mode::Train)?),
                &d.forward(&fake.detach(), 0, Mode::Train)?,
                GanFamily::Lsgan,
                Side::Discriminator,
            )
        };
        let d_a = d(&self.d_a, &batch.y, &cl.fake_b)?;
        let d_b = d(&self.d_b, &batch.x, &cl.fake_a)?;
        rec.insert("d_a".into(), scalar(&d_a)?);
        rec.insert("d_b".into(), scalar(&d_b)?);
        if let Some(k) = non_finite(&rec) {
            return Err(Error::NonFinite(format!("teacher loss `{k}`")));
        }
        self.opt_d.step(&(d_a + d_b)?.backward()?)?;
        Ok(rec)
    }

    /// Student objective against the current snapshot.
    pub fn student_objective(&self, x: &Tensor) -> Result<StudentLoss> {
        let snap = self
            .snapshot
            .as_ref()
            .ok_or_else(|| Error::InvalidSpec("no teacher snapshot yet".into()))?;
        let sites = self.adapters.sites().to_vec();
        let mut sink = TapSink::only(&sites);
        let t_out = snap.generator.forward_with_taps(x, Mode::Eval, &mut sink)?.detach();
        let t_taps = sink.into_map();
        let wider_taps = sites
            .iter()
            .map(|s| {
                t_taps
                    .get(s)
                    .map(|t| t.detach())
                    .ok_or_else(|| Error::MissingTap(format!("teacher:{s}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut sink = TapSink::only(&sites);
        let s_out = self.student.forward_with_taps(x, Mode::Train, &mut sink)?;
        let projected = self.adapters.project(&sink.into_map())?;
        total_student_loss(
            &StudentLossInputs {
                wider_out: Some(&t_out),
                deeper_out: None,
                student_out: &s_out,
                wider_taps: &wider_taps,
                student_taps: &projected,
            },
            &self.cfg.losses,
            self.extractor.as_ref(),
            &self.cfg.distill.ssim,
        )
    }

    fn audit_student_grads(&self, grads: &GradStore) -> Result<()> {
        let mut foreign = named("g_a.", &self.g_a);
        foreign.extend(named("g_b.", &self.g_b));
        foreign.extend(named("d_a.", &self.d_a));
        foreign.extend(named("d_b.", &self.d_b));
        if let Some(s) = &self.snapshot {
            foreign.extend(named("snapshot.", &s.generator));
        }
        for (name, v) in foreign {
            if grads.get(v.as_tensor()).is_some() {
                return Err(Error::InvalidSpec(format!("student objective reached `{name}`")));
            }
        }
        Ok(())
    }

    pub fn step_student(&mut self, x: &Tensor) -> Result<BTreeMap<String, f64>> {
        let loss = self.student_objective(x)?;
        let rec = loss.record()?;
        if let Some(k) = non_finite(&rec) {
            return Err(Error::NonFinite(format!("student loss `{k}`")));
        }
        let grads = loss.total.backward()?;
        self.audit_student_grads(&grads)?;
        self.opt_s.step(&grads)?;
        self.history.push(rec["total"]);
        Ok(rec)
    }

    fn teacher_epoch(&mut self) -> Result<()> {
        let epoch = self.counters.teacher_epochs + 1;
        let n = self.cfg.train.update_interval_n;
        let lr_epoch = ((epoch - 1) * n + 1).min(self.cfg.train.student_epochs());
        let lr = set_lr(&mut [&mut self.opt_g, &mut self.opt_d], &self.cfg.train, lr_epoch);
        for _ in 0..self.batches_per_epoch() {
            let batch = self
                .teacher_stream
                .batch_at(&self.data, self.counters.teacher_iters, self.dtype, &self.device)?;
            let losses = self.step_teacher(&batch)?;
            self.counters.teacher_iters += 1;
            self.metrics.push(MetricRecord {
                phase: Phase::Teacher,
                iteration: self.counters.teacher_iters,
                epoch,
                lr,
                losses,
            })?;
        }
        self.counters.teacher_epochs = epoch;
        self.events.push(LearnBestEvent::TeacherEpoch { epoch });
        Ok(())
    }

    fn evaluate(&mut self, epoch: usize) -> Result<()> {
        match self.evaluator.evaluate(&self.g_a, &self.g_b, &self.val) {
            Ok((fid_a, fid_b)) => {
                let snapshot = self.learn_best.observe(fid_a, fid_b);
                if snapshot {
                    self.snapshot = Some(TeacherSnapshot {
                        generator: self.g_a.deep_copy()?,
                        metric: self.learn_best.snapshot_metric.unwrap_or(f64::INFINITY),
                        epoch,
                        fid_a,
                        fid_b,
                    });
                }
                self.events.push(LearnBestEvent::Evaluation {
                    epoch,
                    fid_a,
                    fid_b,
                    snapshot,
                });
                self.metrics.push(MetricRecord {
                    phase: Phase::Evaluate,
                    iteration: self.counters.teacher_iters,
                    epoch,
                    lr: 0.0,
                    losses: BTreeMap::from([("fid_a".to_string(), fid_a), ("fid_b".to_string(), fid_b)]),
                })?;
            }
            Err(e) => {
                log::warn!("teacher evaluation at epoch {epoch} failed, keeping the previous snapshot: {e}");
                self.events.push(LearnBestEvent::EvaluationFailed {
                    epoch,
                    reason: e.to_string(),
                });
            }
        }
        Ok(())
    }

    fn student_block(&mut self, epoch: usize) -> Result<()> {
        let Some(snapshot_epoch) = self.snapshot.as_ref().map(|s| s.epoch) else {
            log::warn!("no teacher snapshot at epoch {epoch}; skipping the student block");
            self.events.push(LearnBestEvent::StudentBlockSkipped { epoch });
            return Ok(());
        };
        let epochs = self.m() * self.cfg.train.update_interval_n;
        let k = self.batches_per_epoch();
        for _ in 0..epochs {
            let s_epoch = self.counters.student_epochs + 1;
            let lr = set_lr(&mut [&mut self.opt_s], &self.cfg.train, s_epoch);
            for _ in 0..k {
                let batch = self
                    .student_stream
                    .batch_at(&self.data, self.counters.student_iters, self.dtype, &self.device)?;
                let losses = self.step_student(&batch.x)?;
                self.counters.student_iters += 1;
                self.metrics.push(MetricRecord {
                    phase: Phase::Student,
                    iteration: self.counters.student_iters,
                    epoch: s_epoch,
                    lr,
                    losses,
                })?;
            }
            self.counters.student_epochs = s_epoch;
        }
        self.events.push(LearnBestEvent::StudentBlock {
            epoch,
            student_epochs: epochs,
            snapshot_epoch,
        });
        Ok(())
    }

    /// Runs teacher epochs up to `target` (capped by the budget), each followed,
    /// every `m` epochs, by an evaluation and a student block.
    pub fn run_until(&mut self, target: usize) -> Result<()> {
        let target = target.min(self.teacher_epoch_budget());
        while self.counters.teacher_epochs < target {
            let r = self.teacher_epoch().and_then(|_| {
                let epoch = self.counters.teacher_epochs;
                if epoch % self.m() == 0 {
                    self.evaluate(epoch)?;
                    self.student_block(epoch)?;
                }
                Ok(())
            });
            if let Err(e) = r {
                return Err(self.abort(e));
            }
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.teacher_epoch_budget())
    }

    fn abort(&self, e: Error) -> Error {
        match e {
            Error::NonFinite(reason) => {
                let path = super::diagnostic_path(&self.cfg);
                let saved = self.save_container(&path, ContainerKind::Diagnostic).ok().map(|_| path);
                Error::TrainingAborted {
                    iteration: self.counters.student_iters,
                    reason: format!("non-finite {reason}"),
                    checkpoint: saved,
                }
            }
            other => other,
        }
    }

    pub fn export_student(&self, path: &Path) -> Result<()> {
        checkpoint::export_student(&self.student, path)
    }

    fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = prefixed("student.", self.student.state_tensors()).collect();
        out.extend(self.adapters.state_tensors());
        for (p, net) in [("g_a.", &self.g_a), ("g_b.", &self.g_b)] {
            out.extend(prefixed(p, net.state_tensors()));
        }
        for (p, net) in [("d_a.", &self.d_a), ("d_b.", &self.d_b)] {
            out.extend(prefixed(p, net.state_tensors()));
        }
        if let Some(s) = &self.snapshot {
            out.extend(prefixed("snapshot.", s.generator.state_tensors()));
        }
        out.extend(self.opt_g.state_tensors("opt.g."));
        out.extend(self.opt_d.state_tensors("opt.d."));
        out.extend(self.opt_s.state_tensors("opt.student."));
        out
    }

    fn save_container(&self, path: &Path, kind: ContainerKind) -> Result<()> {
        let steps: StepCounts = BTreeMap::from([
            ("g".to_string(), self.opt_g.step_counts()),
            ("d".to_string(), self.opt_d.step_counts()),
            ("student".to_string(), self.opt_s.step_counts()),
        ]);
        let snapshot = self
            .snapshot
            .as_ref()
            .map(|s| json!({"metric": s.metric, "epoch": s.epoch, "fid_a": s.fid_a, "fid_b": s.fid_b}));
        let mut manifest = Manifest::new(kind, self.cfg.student.clone());
        manifest.state = json!({
            "config": self.cfg,
            "counters": self.counters,
            "steps": steps,
            "learn_best": self.learn_best,
            "snapshot": snapshot,
            "events": self.events,
            "history": self.history,
        });
        checkpoint::save(path, &self.state_tensors(), &manifest)
    }

    /// Saves at a teacher-epoch boundary.
    pub fn save_state(&self, path: &Path) -> Result<()> {
        self.save_container(path, ContainerKind::TrainState)
    }

    pub fn load_state(&mut self, path: &Path) -> Result<()> {
        let (tensors, manifest) = checkpoint::load(path, &self.device)?;
        if manifest.kind != ContainerKind::TrainState {
            return Err(Error::checkpoint(path, format!("{:?} container is not a training state", manifest.kind)));
        }
        if manifest.student_spec != self.cfg.student {
            return Err(Error::checkpoint(path, "student spec differs from the configured student"));
        }
        let wrap = |e: Error| Error::checkpoint(path, e.to_string());
        self.student.load_state(&tensors, "student.").map_err(wrap)?;
        self.adapters.load_state(&tensors, "").map_err(wrap)?;
        self.g_a.load_state(&tensors, "g_a.").map_err(wrap)?;
        self.g_b.load_state(&tensors, "g_b.").map_err(wrap)?;
        self.d_a.load_state(&tensors, "d_a.").map_err(wrap)?;
        self.d_b.load_state(&tensors, "d_b.").map_err(wrap)?;
        let steps: StepCounts = state_value(&manifest.state, "steps", path)?;
        for (key, prefix, opt) in [
            ("g", "opt.g.", &mut self.opt_g),
            ("d", "opt.d.", &mut self.opt_d),
            ("student", "opt.student.", &mut self.opt_s),
        ] {
            let counts = steps
                .get(key)
                .ok_or_else(|| Error::checkpoint(path, format!("missing step counts for `{key}`")))?;
            opt.load_state(&tensors, prefix, counts).map_err(wrap)?;
        }
        let snap: Option<serde_json::Value> = state_value(&manifest.state, "snapshot", path)?;
        self.snapshot = match snap {
            Some(meta) => {
                let generator = self.g_a.deep_copy()?;
                generator.load_state(&tensors, "snapshot.").map_err(wrap)?;
                let f = |k: &str| meta.get(k).and_then(|v| v.as_f64()).unwrap_or(f64::INFINITY);
                Some(TeacherSnapshot {
                    generator,
                    metric: f("metric"),
                    epoch: meta.get("epoch").and_then(|v| v.as_u64()).unwrap_or(0) as usize,
                    fid_a: f("fid_a"),
                    fid_b: f("fid_b"),
                })
            }
            None => None,
        };
        self.counters = state_value(&manifest.state, "counters", path)?;
        self.learn_best = state_value(&manifest.state, "learn_best", path)?;
        self.events = state_value(&manifest.state, "events", path)?;
        self.history = state_value(&manifest.state, "history", path)?;
        Ok(())
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
