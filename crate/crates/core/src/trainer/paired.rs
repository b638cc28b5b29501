use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use serde_json::json;

use super::{
    diagnostic_path, next_event, non_finite, prefixed, set_lr, state_value, stream_seeds, teacher_lr_epoch, train_hw,
    BatchStream, LossHistory, MetricRecord, MetricsLog, Phase, StepCounts,
};
use crate::checkpoint::{self, ContainerKind, Manifest};
use crate::config::{Alternation, RunConfig, TrainMode};
use crate::datapipe::{Dataset, PairMode, SampleBatch};
use crate::losses::{gan_loss, recon_loss, total_student_loss, FeatureExtractor, Side, StudentLoss, StudentLossInputs};
use crate::netzoo::{derive_teacher, AdapterSet, Generator, SharedDiscriminator, TeacherDerivation};
use crate::nn::{Mode, Net, ParamInit, TapSink};
use crate::optim::{Adam, AdamConfig};
use crate::{Error, Result};

struct Teacher {
    label: &'static str,
    derivation: TeacherDerivation,
    net: Generator,
    opt: Adam,
}

/// Paired-data online distillation: teachers and a partially shared
/// discriminator train adversarially on (x, y); the student learns from the
/// teachers' outputs on x alone.
pub struct PairedTrainer {
    cfg: RunConfig,
    device: Device,
    dtype: DType,
    data: Dataset,
    student: Generator,
    teachers: Vec<Teacher>,
    disc: SharedDiscriminator,
    opt_d: Adam,
    adapters: AdapterSet,
    opt_s: Adam,
    extractor: Box<dyn FeatureExtractor>,
    teacher_stream: BatchStream,
    student_stream: BatchStream,
    teacher_done: usize,
    student_done: usize,
    history: LossHistory,
    metrics: MetricsLog,
}

fn named(prefix: &str, net: &dyn Net) -> Vec<(String, candle_core::Var)> {
    net.named_params()
        .into_iter()
        .map(|(n, v)| (format!("{prefix}{n}"), v))
        .collect()
}

impl PairedTrainer {
    pub fn new(cfg: RunConfig, data: Dataset, extractor: Box<dyn FeatureExtractor>, device: &Device) -> Result<Self> {
        cfg.validate()?;
        if cfg.train.mode != TrainMode::PairedPix2pix {
            return Err(Error::config("train.mode", "PairedTrainer needs paired_pix2pix"));
        }
        if data.mode() != PairMode::Paired {
            return Err(Error::Dataset("paired training needs a paired dataset".into()));
        }
        let dtype = cfg.train.precision.dtype();
        let mut init = ParamInit::new(cfg.train.seed, dtype, device);
        let student = Generator::build(&cfg.student, &mut init)?;
        let adam = AdamConfig::gan(cfg.train.lr);
        let mut teachers = Vec::new();
        for d in cfg.teachers.derivations() {
            let spec = derive_teacher(&cfg.student, d)?;
            let net = Generator::build(&spec, &mut init)?;
            let label = match d {
                TeacherDerivation::Wider { .. } => "wider",
                TeacherDerivation::Deeper { .. } => "deeper",
            };
            let opt = Adam::new(net.named_params(), adam)?;
            teachers.push(Teacher {
                label,
                derivation: d,
                net,
                opt,
            });
        }
        let disc = SharedDiscriminator::build(&cfg.discriminator, &mut init)?;
        let aug = cfg.data.train_augment();
        let (h, w) = train_hw(&data, aug);
        let probe = [1, cfg.student.in_channels, h, w];
        // tap and shape mismatches surface here rather than mid-run
        student.tap_shapes(probe)?;
        disc.walk_shapes([1, cfg.discriminator.in_channels, h, w], &mut |_| {})?;
        if cfg.discriminator.in_channels != cfg.student.in_channels + cfg.student.out_channels {
            return Err(Error::config(
                "discriminator.in_channels",
                "must equal student in_channels + out_channels (conditional input)",
            ));
        }
        let adapters = match teachers.iter().find(|t| t.label == "wider") {
            Some(wt) => AdapterSet::attach(&student, &wt.net, &cfg.cd_sites(), probe, &mut init)?,
            None => AdapterSet::empty(),
        };
        let opt_d = Adam::new(disc.named_params(), adam)?;
        let mut s_params = named("student.", &student);
        s_params.extend(adapters.named_params());
        let opt_s = Adam::new(s_params, adam)?;
        let (ts, ss) = stream_seeds(cfg.train.seed);
        let bs = cfg.train.batch_size;
        Ok(Self {
            teacher_stream: BatchStream::new(ts, bs, aug),
            student_stream: BatchStream::new(ss, bs, aug),
            device: device.clone(),
            dtype,
            data,
            student,
            teachers,
            disc,
            opt_d,
            adapters,
            opt_s,
            extractor,
            teacher_done: 0,
            student_done: 0,
            history: LossHistory::default(),
            metrics: MetricsLog::default(),
            cfg,
        })
    }

    /// Mirrors metrics to `output_dir/metrics.ndjson`.
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

    pub fn teachers(&self) -> impl Iterator<Item = (TeacherDerivation, &Generator)> {
        self.teachers.iter().map(|t| (t.derivation, &t.net))
    }

    pub fn wider_teacher(&self) -> Option<&Generator> {
        self.teachers.iter().find(|t| t.label == "wider").map(|t| &t.net)
    }

    pub fn discriminator(&self) -> &SharedDiscriminator {
        &self.disc
    }

    pub fn adapters(&self) -> &AdapterSet {
        &self.adapters
    }

    pub fn metrics(&self) -> &MetricsLog {
        &self.metrics
    }

    pub fn history(&self) -> &LossHistory {
        &self.history
    }

    pub fn teacher_iters(&self) -> usize {
        self.teacher_done
    }

    pub fn student_iters(&self) -> usize {
        self.student_done
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.data.batches_per_epoch(self.cfg.train.batch_size)
    }

    /// Student iterations in a full run.
    pub fn budget(&self) -> usize {
        self.cfg
            .train
            .max_student_iters
            .unwrap_or(self.cfg.train.student_epochs() * self.batches_per_epoch())
    }

    fn unit(&self) -> usize {
        match self.cfg.train.alternation {
            Alternation::Iteration => 1,
            Alternation::Epoch => self.batches_per_epoch(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// One discriminator update, then one update of every teacher through its head.
    pub fn step_teacher(&mut self, batch: &SampleBatch) -> Result<BTreeMap<String, f64>> {
        if batch.mode != PairMode::Paired {
            return Err(Error::InvalidSpec("teacher step needs a paired batch".into()));
        }
        let (x, y) = (&batch.x, &batch.y);
        let family = self.cfg.losses.gan_family;
        let fakes = self
            .teachers
            .iter()
            .map(|t| t.net.forward(x, Mode::Train))
            .collect::<Result<Vec<_>>>()?;
        let mut rec = BTreeMap::new();

        let d_real = self.disc.forward_all(&Tensor::cat(&[x, y], 1)?, Mode::Train)?;
        let mut d_total: Option<Tensor> = None;
        for (h, (t, fake)) in self.teachers.iter().zip(&fakes).enumerate() {
            let d_fake = self.disc.forward(&Tensor::cat(&[x, &fake.detach()], 1)?, h, Mode::Train)?;
            let l = gan_loss(Some(&d_real[h]), &d_fake, family, Side::Discriminator)?;
            rec.insert(format!("d_{}", t.label), scalar(&l)?);
            d_total = Some(match d_total {
                Some(acc) => (acc + l)?,
                None => l,
            });
        }
        let d_total = d_total.ok_or_else(|| Error::InvalidSpec("no teachers".into()))?;
        rec.insert("d_total".into(), scalar(&d_total)?);
        if let Some(k) = non_finite(&rec) {
            return Err(Error::NonFinite(format!("teacher loss `{k}`")));
        }
        self.opt_d.step(&d_total.backward()?)?;

        let mut g_total: Option<Tensor> = None;
        for (h, (t, fake)) in self.teachers.iter().zip(&fakes).enumerate() {
            let d_fake = self.disc.forward(&Tensor::cat(&[x, fake], 1)?, h, Mode::Train)?;
            let adv = gan_loss(None, &d_fake, family, Side::Generator)?;
            let recon = recon_loss(fake, y)?;
            rec.insert(format!("g_gan_{}", t.label), scalar(&adv)?);
            rec.insert(format!("recon_{}", t.label), scalar(&recon)?);
            let l = (adv + (recon * self.cfg.losses.lambda_recon)?)?;
            g_total = Some(match g_total {
                Some(acc) => (acc + l)?,
                None => l,
            });
        }
        let g_total = g_total.expect("teachers checked above");
        rec.insert("g_total".into(), scalar(&g_total)?);
        if let Some(k) = non_finite(&rec) {
            return Err(Error::NonFinite(format!("teacher loss `{k}`")));
        }
        let grads = g_total.backward()?;
        for t in &mut self.teachers {
            t.opt.step(&grads)?;
        }
        Ok(rec)
    }

    /// The student objective on a source batch. Teachers run in inference mode
    /// and their outputs are detached; nothing here sees a target image or a
    /// discriminator.
    pub fn student_objective(&self, x: &Tensor) -> Result<StudentLoss> {
        let sites = self.adapters.sites().to_vec();
        let mut wider_out = None;
        let mut deeper_out = None;
        let mut wider_taps = Vec::new();
        for t in &self.teachers {
            let mut sink = TapSink::only(&sites);
            let out = t.net.forward_with_taps(x, Mode::Eval, &mut sink)?.detach();
            match t.derivation {
                TeacherDerivation::Wider { .. } => {
                    let taps = sink.into_map();
                    wider_taps = sites
                        .iter()
                        .map(|s| {
                            taps.get(s)
                                .map(|t| t.detach())
                                .ok_or_else(|| Error::MissingTap(format!("teacher:{s}")))
                        })
                        .collect::<Result<_>>()?;
                    wider_out = Some(out);
                }
                TeacherDerivation::Deeper { .. } => deeper_out = Some(out),
            }
        }
        let mut sink = TapSink::only(&sites);
        let student_out = self.student.forward_with_taps(x, Mode::Train, &mut sink)?;
        let projected = self.adapters.project(&sink.into_map())?;
        total_student_loss(
            &StudentLossInputs {
                wider_out: wider_out.as_ref(),
                deeper_out: deeper_out.as_ref(),
                student_out: &student_out,
                wider_taps: &wider_taps,
                student_taps: &projected,
            },
            &self.cfg.losses,
            self.extractor.as_ref(),
            &self.cfg.distill.ssim,
        )
    }

    /// Fails if any teacher or discriminator parameter received a gradient.
    fn audit_student_grads(&self, grads: &GradStore) -> Result<()> {
        let foreign = self
            .teachers
            .iter()
            .flat_map(|t| t.net.named_params())
            .chain(self.disc.named_params());
        for (name, v) in foreign {
            if grads.get(v.as_tensor()).is_some() {
                return Err(Error::InvalidSpec(format!("student objective reached `{name}`")));
            }
        }
        Ok(())
    }

    /// One update of the student and its adapters.
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

    /// Mean absolute difference between student and wider-teacher outputs,
    /// both in inference mode.
    pub fn probe_l1(&self, x: &Tensor) -> Result<f64> {
        let wt = self
            .wider_teacher()
            .ok_or_else(|| Error::InvalidSpec("no wider teacher".into()))?;
        let s = self.student.forward(x, Mode::Eval)?;
        let t = wt.forward(x, Mode::Eval)?;
        scalar(&recon_loss(&s, &t)?)
    }

    fn teacher_event(&mut self) -> Result<()> {
        let n = self.cfg.train.update_interval_n;
        let k = self.batches_per_epoch();
        let epoch = teacher_lr_epoch(self.teacher_done, n, k).min(self.cfg.train.student_epochs());
        let mut opts: Vec<&mut Adam> = self.teachers.iter_mut().map(|t| &mut t.opt).collect();
        opts.push(&mut self.opt_d);
        let lr = set_lr(&mut opts, &self.cfg.train, epoch);
        let batch = self
            .teacher_stream
            .batch_at(&self.data, self.teacher_done, self.dtype, &self.device)?;
        let losses = self.step_teacher(&batch)?;
        self.teacher_done += 1;
        self.metrics.push(MetricRecord {
            phase: Phase::Teacher,
            iteration: self.teacher_done,
            epoch: self.teacher_done.saturating_sub(1) / k + 1,
            lr,
            losses,
        })
    }

    fn student_event(&mut self) -> Result<()> {
        let k = self.batches_per_epoch();
        let epoch = self.student_done / k + 1;
        let lr = set_lr(&mut [&mut self.opt_s], &self.cfg.train, epoch);
        let batch = self
            .student_stream
            .batch_at(&self.data, self.student_done, self.dtype, &self.device)?;
        let losses = self.step_student(&batch.x)?;
        self.student_done += 1;
        self.metrics.push(MetricRecord {
            phase: Phase::Student,
            iteration: self.student_done,
            epoch,
            lr,
            losses,
        })
    }

    /// Runs until `target` student iterations (capped by the budget) have completed.
    pub fn run_until(&mut self, target: usize) -> Result<()> {
        let target = target.min(self.budget());
        let n = self.cfg.train.update_interval_n;
        let unit = self.unit();
        while self.student_done < target {
            let step = match next_event(self.teacher_done, self.student_done, n, unit) {
                Phase::Teacher => self.teacher_event(),
                _ => self.student_event(),
            };
            if let Err(e) = step {
                return Err(self.abort(e));
            }
            if let Some(every) = self.cfg.train.checkpoint_every {
                if every > 0 && self.student_done % every == 0 && self.metrics.records().last().map(|r| r.phase) == Some(Phase::Student) {
                    self.save_state(&self.cfg.output_dir.join("state.safetensors"))?;
                }
            }
        }
        Ok(())
    }

    /// The full schedule.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.budget())
    }

    fn abort(&self, e: Error) -> Error {
        match e {
            Error::NonFinite(reason) => {
                let path = diagnostic_path(&self.cfg);
                let saved = self.save_container(&path, ContainerKind::Diagnostic).ok().map(|_| path);
                Error::TrainingAborted {
                    iteration: self.student_done,
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

    fn step_counts(&self) -> StepCounts {
        let mut m = BTreeMap::new();
        m.insert("student".to_string(), self.opt_s.step_counts());
        m.insert("disc".to_string(), self.opt_d.step_counts());
        for t in &self.teachers {
            m.insert(format!("teacher.{}", t.label), t.opt.step_counts());
        }
        m
    }

    fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = prefixed("student.", self.student.state_tensors()).collect();
        out.extend(prefixed("", self.adapters.state_tensors()));
        out.extend(prefixed("disc.", self.disc.state_tensors()));
        for t in &self.teachers {
            out.extend(prefixed(&format!("teacher.{}.", t.label), t.net.state_tensors()));
            out.extend(t.opt.state_tensors(&format!("opt.teacher.{}.", t.label)));
        }
        out.extend(self.opt_s.state_tensors("opt.student."));
        out.extend(self.opt_d.state_tensors("opt.disc."));
        out
    }

    fn save_container(&self, path: &Path, kind: ContainerKind) -> Result<()> {
        let mut manifest = Manifest::new(kind, self.cfg.student.clone());
        manifest.state = json!({
            "config": self.cfg,
            "teacher_done": self.teacher_done,
            "student_done": self.student_done,
            "steps": self.step_counts(),
            "history": self.history,
        });
        checkpoint::save(path, &self.state_tensors(), &manifest)
    }

    /// Writes every network, optimizer moment and counter.
    pub fn save_state(&self, path: &Path) -> Result<()> {
        self.save_container(path, ContainerKind::TrainState)
    }

    /// Restores a state saved by [`save_state`](Self::save_state) into a
    /// trainer built from the same config.
    pub fn load_state(&mut self, path: &Path) -> Result<()> {
        let (tensors, manifest) = checkpoint::load(path, &self.device)?;
        if manifest.kind != ContainerKind::TrainState {
            return Err(Error::checkpoint(path, format!("{:?} container is not a training state", manifest.kind)));
        }
        if manifest.student_spec != self.cfg.student {
            return Err(Error::checkpoint(path, "student spec differs from the configured student"));
        }
        let saved: RunConfig = state_value(&manifest.state, "config", path)?;
        if saved.teachers != self.cfg.teachers || saved.discriminator != self.cfg.discriminator {
            return Err(Error::checkpoint(path, "teacher or discriminator config differs from the checkpoint"));
        }
        let steps: StepCounts = state_value(&manifest.state, "steps", path)?;
        let get = |k: &str| -> Result<&HashMap<String, u64>> {
            steps
                .get(k)
                .ok_or_else(|| Error::checkpoint(path, format!("missing step counts for `{k}`")))
        };
        let wrap = |e: Error| Error::checkpoint(path, e.to_string());
        self.student.load_state(&tensors, "student.").map_err(wrap)?;
        self.adapters.load_state(&tensors, "").map_err(wrap)?;
        self.disc.load_state(&tensors, "disc.").map_err(wrap)?;
        for t in &mut self.teachers {
            t.net.load_state(&tensors, &format!("teacher.{}.", t.label)).map_err(wrap)?;
            t.opt
                .load_state(&tensors, &format!("opt.teacher.{}.", t.label), get(&format!("teacher.{}", t.label))?)
                .map_err(wrap)?;
        }
        self.opt_s.load_state(&tensors, "opt.student.", get("student")?).map_err(wrap)?;
        self.opt_d.load_state(&tensors, "opt.disc.", get("disc")?).map_err(wrap)?;
        self.teacher_done = state_value(&manifest.state, "teacher_done", path)?;
        self.student_done = state_value(&manifest.state, "student_done", path)?;
        self.history = state_value(&manifest.state, "history", path)?;
        Ok(())
    }

    /// Rebuilds a trainer from a training-state container, using the config stored in it.
    pub fn resume(path: &Path, data: Dataset, extractor: Box<dyn FeatureExtractor>, device: &Device) -> Result<Self> {
        let (_, manifest) = checkpoint::load(path, device)?;
        let cfg: RunConfig = state_value(&manifest.state, "config", path)?;
        let mut t = Self::new(cfg, data, extractor, device)?;
        t.load_state(path)?;
        Ok(t)
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
