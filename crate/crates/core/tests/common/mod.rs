#![allow(dead_code)]

use std::path::Path;

use gandistill::config::{
    preset, DataConfig, DeeperConfig, ExtractorConfig, Precision, RunConfig, SynthConfig, TeachersConfig, WiderConfig,
};
use gandistill::datapipe::{Dataset, SynthKind};
use gandistill::netzoo::{GeneratorSpec, SharedDiscriminatorSpec};
use gandistill::trainer::TeacherEvaluator;
use gandistill::netzoo::Generator;
use gandistill::Result;

pub fn tiny_unet(ngf: usize, depth: usize) -> GeneratorSpec {
    GeneratorSpec {
        unet_depth: depth,
        ..GeneratorSpec::unet(ngf)
    }
}

pub fn tiny_mobile(ngf: usize, blocks: usize) -> GeneratorSpec {
    GeneratorSpec {
        num_resblocks: blocks,
        ..GeneratorSpec::resnet_mobile(ngf)
    }
}

pub fn synth(count: usize, size: u32, seed: u64, val_count: usize) -> DataConfig {
    DataConfig {
        root: None,
        layout: None,
        synthetic: Some(SynthConfig {
            kind: SynthKind::EdgeFill,
            count,
            size,
            seed,
            val_count,
        }),
        load_size: None,
        crop: None,
        flip: true,
    }
}

/// Paired config small enough for unit tests: 32px synthetic data, both teachers.
pub fn tiny_paired(out: &Path) -> RunConfig {
    let mut cfg = preset("edges2shoes_unet").unwrap();
    cfg.student = tiny_unet(4, 3);
    cfg.teachers = TeachersConfig {
        wider: Some(WiderConfig { eta: 2 }),
        deeper: Some(DeeperConfig { blocks_per_site: 1 }),
    };
    cfg.discriminator = SharedDiscriminatorSpec {
        n_layers: 2,
        ..SharedDiscriminatorSpec::new(4, 1, 2)
    };
    cfg.losses.lambda_cd = 10.0;
    cfg.train.epochs_const = 2;
    cfg.train.epochs_decay = 2;
    cfg.train.update_interval_n = 1;
    cfg.train.batch_size = 2;
    cfg.train.seed = 5;
    cfg.data = synth(4, 32, 1, 2);
    cfg.distill.extractor = ExtractorConfig::Random {
        widths: [4, 8, 8, 8],
        seed: 0,
    };
    cfg.output_dir = out.to_path_buf();
    cfg.validate().unwrap();
    cfg
}

/// Unpaired config: mobile-resnet student, wider teachers, one-image discriminators.
pub fn tiny_unpaired(out: &Path) -> RunConfig {
    let mut cfg = preset("horse2zebra").unwrap();
    cfg.student = tiny_mobile(2, 1);
    cfg.teachers.wider = Some(WiderConfig { eta: 2 });
    cfg.discriminator = SharedDiscriminatorSpec {
        in_channels: 3,
        n_layers: 2,
        ..SharedDiscriminatorSpec::new(4, 0, 1)
    };
    cfg.losses.lambda_cd = 10.0;
    cfg.train.batch_size = 2;
    cfg.train.seed = 9;
    cfg.train.precision = Precision::F32;
    cfg.data = synth(2, 32, 3, 2);
    cfg.distill.extractor = ExtractorConfig::Random {
        widths: [4, 8, 8, 8],
        seed: 0,
    };
    cfg.output_dir = out.to_path_buf();
    cfg
}

/// Evaluator replaying a fixed metric sequence; NaN entries fail.
pub struct Scripted {
    pub seq: Vec<(f64, f64)>,
    pub next: usize,
}

impl Scripted {
    pub fn boxed(seq: &[(f64, f64)]) -> Box<Self> {
        Box::new(Self {
            seq: seq.to_vec(),
            next: 0,
        })
    }
}

impl TeacherEvaluator for Scripted {
    fn evaluate(&mut self, _: &Generator, _: &Generator, _: &Dataset) -> Result<(f64, f64)> {
        let v = self.seq[self.next.min(self.seq.len() - 1)];
        self.next += 1;
        if v.0.is_nan() {
            return Err(gandistill::Error::NonFinite("scripted evaluation".into()));
        }
        Ok(v)
    }
}
