mod common;

use candle_core::{DType, Device, Tensor};
use common::tiny_paired;
use gandistill::checkpoint::{self, import_student, ContainerKind, Manifest, FORMAT_VERSION};
use gandistill::config::{preset, RunConfig, TrainMode, PRESETS};
use gandistill::netzoo::{build_generator, GeneratorSpec};
use gandistill::nn::{Mode, Net, ParamInit};
use gandistill::trainer::{build_extractor, open_data, PairedTrainer};
use gandistill::Error;

fn dev() -> Device {
    Device::Cpu
}

fn config_path(e: &Error) -> String {
    match e {
        Error::Config { path, .. } => path.clone(),
        other => panic!("expected a config error, got {other}"),
    }
}

#[test]
fn presets_round_trip() {
    for name in PRESETS {
        let cfg = preset(name).unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::parse(&text, &[]).unwrap(), cfg, "{name}");
    }
    assert!(preset("nope").is_err());
}

#[test]
fn edges2shoes_unet_row() {
    let c = preset("edges2shoes_unet").unwrap();
    let l = &c.losses;
    assert_eq!(
        (l.lambda_ssim, l.lambda_feature, l.lambda_style, l.lambda_tv, l.lambda_cd),
        (1e1, 1e4, 1e1, 1e-5, 1e1)
    );
    assert_eq!(c.student.ngf, 16);
    assert_eq!(c.teachers.wider.as_ref().unwrap().eta * c.student.ngf, 64);
    assert_eq!((c.discriminator.ndf, c.discriminator.d_share, c.discriminator.num_heads), (128, 5, 2));
    assert_eq!((c.train.update_interval_n, c.train.epochs_const, c.train.epochs_decay), (1, 100, 100));
}

#[test]
fn horse2zebra_row() {
    let c = preset("horse2zebra").unwrap();
    assert_eq!(c.train.mode, TrainMode::UnpairedCyclegan);
    assert_eq!((c.train.update_interval_n, c.train.evaluate_interval_m), (4, Some(10)));
    assert_eq!(c.losses.lambda_cd, 5e2);
    assert_eq!(c.discriminator.ndf, 64);
    assert!(c.teachers.deeper.is_none() && c.teachers.wider.is_some());
    let s2w = preset("summer2winter").unwrap();
    assert_eq!(s2w.train.evaluate_interval_m, Some(6));
}

#[test]
fn deeper_teacher_rejected_in_unpaired_mode() {
    let text = preset("horse2zebra").unwrap().to_toml().unwrap();
    let e = RunConfig::parse(&text, &["teachers.deeper.blocks_per_site=1".into()]).unwrap_err();
    assert_eq!(config_path(&e), "teachers.deeper");
    let e = RunConfig::parse(&text, &["train.evaluate_interval_m=0".into()]).unwrap_err();
    assert_eq!(config_path(&e), "train.evaluate_interval_m");
}

#[test]
fn head_count_must_match_teachers() {
    let text = preset("edges2shoes_resnet").unwrap().to_toml().unwrap();
    let e = RunConfig::parse(&text, &["discriminator.num_heads=1".into()]).unwrap_err();
    assert_eq!(config_path(&e), "discriminator.num_heads");
}

#[test]
fn unknown_keys_rejected_with_path() {
    let text = preset("edges2shoes_unet").unwrap().to_toml().unwrap();
    let e = RunConfig::parse(&text, &["losses.lambda_bogus=1".into()]).unwrap_err();
    assert!(config_path(&e).starts_with("losses"), "{e}");
    let e = RunConfig::parse(&text, &["train.batch_size=\"four\"".into()]).unwrap_err();
    assert_eq!(config_path(&e), "train.batch_size");
}

#[test]
fn overrides_take_precedence() {
    let text = preset("edges2shoes_unet").unwrap().to_toml().unwrap();
    let c = RunConfig::parse(&text, &["train.seed=42".into(), "losses.lambda_cd=0.5".into()]).unwrap();
    assert_eq!(c.train.seed, 42);
    assert_eq!(c.losses.lambda_cd, 0.5);
}

#[test]
fn data_source_exclusive() {
    let text = preset("edges2shoes_unet").unwrap().to_toml().unwrap();
    let both = ["data.synthetic.kind=edge_fill".into(), "data.synthetic.count=2".into(), "data.synthetic.size=32".into()];
    assert_eq!(config_path(&RunConfig::parse(&text, &both).unwrap_err()), "data");
}

fn trained(dir: &std::path::Path) -> PairedTrainer {
    let mut cfg = tiny_paired(dir);
    cfg.train.max_student_iters = Some(2);
    let (data, _) = open_data(&cfg).unwrap();
    let fx = build_extractor(&cfg.distill.extractor, DType::F32, &dev()).unwrap();
    let mut t = PairedTrainer::new(cfg, data, fx, &dev()).unwrap();
    t.run().unwrap();
    t
}

#[test]
fn export_import_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let t = trained(dir.path());
    let out = dir.path().join("student.safetensors");
    t.export_student(&out).unwrap();
    let g = import_student(&out, &dev()).unwrap();
    let x = Tensor::rand(-1f32, 1.0, (2, 3, 32, 32), &dev()).unwrap();
    let a: Vec<f32> = t.student().forward(&x, Mode::Eval).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let b: Vec<f32> = g.forward(&x, Mode::Eval).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert_eq!(g.checksum().unwrap(), t.student().checksum().unwrap());

    // the student can also be taken straight from a training state
    let state = dir.path().join("state.safetensors");
    t.save_state(&state).unwrap();
    assert_eq!(import_student(&state, &dev()).unwrap().checksum().unwrap(), g.checksum().unwrap());
}

#[test]
fn export_holds_student_only() {
    let dir = tempfile::tempdir().unwrap();
    let t = trained(dir.path());
    let out = dir.path().join("student.safetensors");
    t.export_student(&out).unwrap();
    let (tensors, manifest) = checkpoint::load(&out, &dev()).unwrap();
    assert_eq!(manifest.kind, ContainerKind::Student);
    assert_eq!(&manifest.student_spec, t.student().spec());
    let names: std::collections::BTreeSet<String> = tensors.keys().cloned().collect();
    let own: std::collections::BTreeSet<String> = t.student().state_tensors().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, own);
    assert!(names.iter().all(|n| !n.contains("adapter") && !n.starts_with("teacher") && !n.starts_with("opt")));
}

#[test]
fn export_size_accounting() {
    let dir = tempfile::tempdir().unwrap();
    let t = trained(dir.path());
    let out = dir.path().join("student.safetensors");
    t.export_student(&out).unwrap();
    let size = std::fs::metadata(&out).unwrap().len() as usize;
    let payload = t.student().param_count() * 4;
    // header: manifest JSON plus one small entry per tensor
    let header = size - payload;
    let manifest_len = serde_json::to_string(&Manifest::new(ContainerKind::Student, t.student().spec().clone()))
        .unwrap()
        .len();
    let entries = t.student().state_tensors().len();
    assert!(size > payload);
    assert!(header >= manifest_len && header <= manifest_len + 160 * entries + 256, "header {header}");
}

#[test]
fn mismatched_spec_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let g = build_generator(&GeneratorSpec::unet(4), &mut ParamInit::new(0, DType::F32, &dev())).unwrap();
    let path = dir.path().join("g.safetensors");
    // manifest claims a different student than the tensors hold
    let manifest = Manifest::new(ContainerKind::Student, GeneratorSpec::unet(8));
    checkpoint::save(&path, &g.state_tensors(), &manifest).unwrap();
    assert!(matches!(import_student(&path, &dev()), Err(Error::Checkpoint { .. })));
}

#[test]
fn version_mismatch_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let g = build_generator(&GeneratorSpec::unet(4), &mut ParamInit::new(0, DType::F32, &dev())).unwrap();
    let path = dir.path().join("g.safetensors");
    let mut manifest = Manifest::new(ContainerKind::Student, g.spec().clone());
    manifest.version = FORMAT_VERSION + 1;
    checkpoint::save(&path, &g.state_tensors(), &manifest).unwrap();
    match import_student(&path, &dev()) {
        Err(Error::Checkpoint { msg, .. }) => assert!(msg.contains("version"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn corrupt_and_missing_files_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.safetensors");
    std::fs::write(&path, b"\x10\x00\x00\x00\x00\x00\x00\x00{not json}").unwrap();
    assert!(matches!(checkpoint::load(&path, &dev()), Err(Error::Checkpoint { .. })));
    let g = build_generator(&GeneratorSpec::unet(4), &mut ParamInit::new(0, DType::F32, &dev())).unwrap();
    let good = dir.path().join("good.safetensors");
    checkpoint::save(&good, &g.state_tensors(), &Manifest::new(ContainerKind::Student, g.spec().clone())).unwrap();
    let bytes = std::fs::read(&good).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(checkpoint::load(&path, &dev()), Err(Error::Checkpoint { .. })));
    assert!(checkpoint::load(&dir.path().join("absent"), &dev()).is_err());
}

#[test]
fn duplicate_names_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tensor::zeros(2, DType::F32, &dev()).unwrap();
    let r = checkpoint::save(
        &dir.path().join("d.safetensors"),
        &[("a".into(), t.clone()), ("a".into(), t)],
        &Manifest::new(ContainerKind::Student, GeneratorSpec::unet(4)),
    );
    assert!(r.is_err());
}
