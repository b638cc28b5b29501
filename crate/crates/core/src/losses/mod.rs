//! Teacher objectives, student distillation terms and channel distillation.

mod extractor;
mod ssim;

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

pub use extractor::{FeatureExtractor, Vgg, VGG16_WIDTHS};
pub use ssim::{ssim_index_map, ssim_loss, SsimParams};

use crate::datapipe::{PairMode, SampleBatch};
use crate::netzoo::{Generator, SharedDiscriminator};
use crate::nn::{dims4, Mode};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanFamily {
    Hinge,
    Lsgan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Generator,
    Discriminator,
}

fn default_recon() -> f64 {
    100.0
}

fn default_family() -> GanFamily {
    GanFamily::Hinge
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_ssim: f64,
    pub lambda_feature: f64,
    pub lambda_style: f64,
    pub lambda_tv: f64,
    pub lambda_cd: f64,
    /// Teacher reconstruction weight (paired mode).
    #[serde(default = "default_recon")]
    pub lambda_recon: f64,
    #[serde(default = "default_family")]
    pub gan_family: GanFamily,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ssim: 1e1,
            lambda_feature: 1e4,
            lambda_style: 1e1,
            lambda_tv: 1e-5,
            lambda_cd: 0.0,
            lambda_recon: default_recon(),
            gan_family: GanFamily::Hinge,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_ssim", self.lambda_ssim),
            ("lambda_feature", self.lambda_feature),
            ("lambda_style", self.lambda_style),
            ("lambda_tv", self.lambda_tv),
            ("lambda_cd", self.lambda_cd),
            ("lambda_recon", self.lambda_recon),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidSpec(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn zero_like(t: &Tensor) -> Result<Tensor> {
    Ok(Tensor::zeros((), t.dtype(), t.device())?)
}

fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = scalar(&t.sum_all()?)?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Adversarial loss on patch score maps. The generator side ignores `d_real`.
pub fn gan_loss(d_real: Option<&Tensor>, d_fake: &Tensor, family: GanFamily, side: Side) -> Result<Tensor> {
    ensure_finite(d_fake, "discriminator output (fake)")?;
    match side {
        Side::Generator => match family {
            GanFamily::Hinge => Ok(d_fake.mean_all()?.neg()?),
            GanFamily::Lsgan => Ok((d_fake - 1.0)?.sqr()?.mean_all()?),
        },
        Side::Discriminator => {
            let d_real = d_real.ok_or_else(|| Error::InvalidSpec("discriminator loss needs real scores".into()))?;
            ensure_finite(d_real, "discriminator output (real)")?;
            same_shape(d_real, d_fake, "gan_loss")?;
            match family {
                GanFamily::Hinge => {
                    let real = (1.0 - d_real)?.relu()?.mean_all()?;
                    let fake = (d_fake + 1.0)?.relu()?.mean_all()?;
                    Ok((real + fake)?)
                }
                GanFamily::Lsgan => {
                    let real = (d_real - 1.0)?.sqr()?.mean_all()?;
                    let fake = d_fake.sqr()?.mean_all()?;
                    Ok(((real + fake)? * 0.5)?)
                }
            }
        }
    }
}

/// Mean absolute error.
pub fn recon_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(pred, target, "recon_loss")?;
    Ok((pred - target)?.abs()?.mean_all()?)
}

/// Squared horizontal plus vertical neighbour differences over the element count.
pub fn tv_loss(p: &Tensor) -> Result<Tensor> {
    let [_, _, h, w] = dims4(p)?;
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!("tv_loss needs H, W >= 2, got {h}x{w}")));
    }
    let dy = (p.narrow(2, 1, h - 1)? - p.narrow(2, 0, h - 1)?)?.sqr()?.sum_all()?;
    let dx = (p.narrow(3, 1, w - 1)? - p.narrow(3, 0, w - 1)?)?.sqr()?.sum_all()?;
    Ok(((dx + dy)? / p.elem_count() as f64)?)
}

fn tap<'a>(map: &'a BTreeMap<String, Tensor>, name: &str) -> Result<&'a Tensor> {
    map.get(name).ok_or_else(|| Error::MissingTap(name.to_string()))
}

/// Sum over taps of the mean absolute activation difference.
pub fn feature_loss_from(ft: &BTreeMap<String, Tensor>, fs: &BTreeMap<String, Tensor>, taps: &[String]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for name in taps {
        let (a, b) = (tap(ft, name)?, tap(fs, name)?);
        same_shape(a, b, name)?;
        let term = (a - b)?.abs()?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::InvalidSpec("no feature taps".into()))
}

/// Per-sample Gram matrices `F F^T / (C H W)`, shape (N, C, C).
pub fn gram(f: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = dims4(f)?;
    let flat = f.reshape((n, c, h * w))?;
    Ok((flat.matmul(&flat.t()?)? / (c * h * w) as f64)?)
}

/// Sum over taps of the L1 distance between Gram matrices, averaged over the batch.
pub fn style_loss_from(ft: &BTreeMap<String, Tensor>, fs: &BTreeMap<String, Tensor>, taps: &[String]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for name in taps {
        let (a, b) = (tap(ft, name)?, tap(fs, name)?);
        same_shape(a, b, name)?;
        let n = a.dims()[0];
        let term = ((gram(a)? - gram(b)?)?.abs()?.sum_all()? / n as f64)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::InvalidSpec("no style taps".into()))
}

pub fn feature_loss(p_t: &Tensor, p_s: &Tensor, fx: &dyn FeatureExtractor) -> Result<Tensor> {
    same_shape(p_t, p_s, "feature_loss")?;
    let taps = fx.feature_taps();
    feature_loss_from(&fx.extract(p_t, &taps)?, &fx.extract(p_s, &taps)?, &taps)
}

pub fn style_loss(p_t: &Tensor, p_s: &Tensor, fx: &dyn FeatureExtractor) -> Result<Tensor> {
    same_shape(p_t, p_s, "style_loss")?;
    let taps = fx.style_taps();
    style_loss_from(&fx.extract(p_t, &taps)?, &fx.extract(p_s, &taps)?, &taps)
}

/// Weighted distillation loss and its unweighted terms.
#[derive(Debug, Clone)]
pub struct KdLoss {
    pub total: Tensor,
    pub ssim: Tensor,
    pub feature: Tensor,
    pub style: Tensor,
    pub tv: Tensor,
}

impl KdLoss {
    fn add(self, other: KdLoss) -> Result<KdLoss> {
        Ok(KdLoss {
            total: (self.total + other.total)?,
            ssim: (self.ssim + other.ssim)?,
            feature: (self.feature + other.feature)?,
            style: (self.style + other.style)?,
            tv: (self.tv + other.tv)?,
        })
    }

    pub fn record(&self) -> Result<BTreeMap<String, f64>> {
        Ok(BTreeMap::from([
            ("kd".to_string(), scalar(&self.total)?),
            ("ssim".to_string(), scalar(&self.ssim)?),
            ("feature".to_string(), scalar(&self.feature)?),
            ("style".to_string(), scalar(&self.style)?),
            ("tv".to_string(), scalar(&self.tv)?),
        ]))
    }
}

/// Weighted sum of SSIM, perceptual, style and total-variation terms.
/// Terms whose weight is zero are reported as zero and not computed.
pub fn kd_loss(p_t: &Tensor, p_s: &Tensor, w: &LossWeights, fx: &dyn FeatureExtractor, ssim: &SsimParams) -> Result<KdLoss> {
    same_shape(p_t, p_s, "kd_loss")?;
    let zero = zero_like(p_s)?;
    let ssim_term = if w.lambda_ssim > 0.0 { ssim_loss(p_t, p_s, ssim)? } else { zero.clone() };
    let (feature, style) = if w.lambda_feature > 0.0 || w.lambda_style > 0.0 {
        let mut taps: Vec<String> = Vec::new();
        if w.lambda_feature > 0.0 {
            taps.extend(fx.feature_taps());
        }
        if w.lambda_style > 0.0 {
            taps.extend(fx.style_taps());
        }
        taps.sort();
        taps.dedup();
        let ft = fx.extract(p_t, &taps)?;
        let fs = fx.extract(p_s, &taps)?;
        let feature = if w.lambda_feature > 0.0 {
            feature_loss_from(&ft, &fs, &fx.feature_taps())?
        } else {
            zero.clone()
        };
        let style = if w.lambda_style > 0.0 {
            style_loss_from(&ft, &fs, &fx.style_taps())?
        } else {
            zero.clone()
        };
        (feature, style)
    } else {
        (zero.clone(), zero.clone())
    };
    let tv = if w.lambda_tv > 0.0 { tv_loss(p_s)? } else { zero };
    let total = ((((&ssim_term * w.lambda_ssim)? + (&feature * w.lambda_feature)?)? + (&style * w.lambda_style)?)?
        + (&tv * w.lambda_tv)?)?;
    Ok(KdLoss {
        total,
        ssim: ssim_term,
        feature,
        style,
        tv,
    })
}

/// Distillation from the wider and/or deeper teacher; the losses add.
pub fn kd_multi(
    p_t_w: Option<&Tensor>,
    p_t_d: Option<&Tensor>,
    p_s: &Tensor,
    w: &LossWeights,
    fx: &dyn FeatureExtractor,
    ssim: &SsimParams,
) -> Result<KdLoss> {
    match (p_t_w, p_t_d) {
        (Some(a), Some(b)) => kd_loss(a, p_s, w, fx, ssim)?.add(kd_loss(b, p_s, w, fx, ssim)?),
        (Some(t), None) | (None, Some(t)) => kd_loss(t, p_s, w, fx, ssim),
        (None, None) => Err(Error::InvalidSpec("kd_multi needs at least one teacher output".into())),
    }
}

/// Per-channel spatial mean. (C, H, W) -> (C); (N, C, H, W) -> (N, C).
pub fn channel_attention(map: &Tensor) -> Result<Tensor> {
    match map.rank() {
        3 => Ok(map.mean((1, 2))?),
        4 => Ok(map.mean((2, 3))?),
        r => Err(Error::Shape(format!("channel_attention expects a 3-d or 4-d map, got rank {r}"))),
    }
}

/// Mean over sites of the per-channel mean squared attention difference.
pub fn cd_loss(teacher_taps: &[Tensor], student_taps: &[Tensor]) -> Result<Tensor> {
    if teacher_taps.len() != student_taps.len() {
        return Err(Error::Shape(format!(
            "cd_loss: {} teacher sites vs {} student sites",
            teacher_taps.len(),
            student_taps.len()
        )));
    }
    if teacher_taps.is_empty() {
        return Err(Error::InvalidSpec("cd_loss needs at least one site".into()));
    }
    let mut total: Option<Tensor> = None;
    for (i, (t, s)) in teacher_taps.iter().zip(student_taps).enumerate() {
        let (wt, ws) = (channel_attention(t)?, channel_attention(s)?);
        if wt.dims() != ws.dims() {
            return Err(Error::Shape(format!(
                "cd_loss site {i}: teacher attention {:?} vs student {:?}",
                wt.dims(),
                ws.dims()
            )));
        }
        // mean over channels and over the batch
        let term = (wt - ws)?.sqr()?.mean_all()?;
        total = Some(match total {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    Ok((total.expect("non-empty") / teacher_taps.len() as f64)?)
}

/// Inputs of the full student objective. Teacher tensors must already be detached.
pub struct StudentLossInputs<'a> {
    pub wider_out: Option<&'a Tensor>,
    pub deeper_out: Option<&'a Tensor>,
    pub student_out: &'a Tensor,
    /// Wider-teacher taps at the distillation sites, in site order.
    pub wider_taps: &'a [Tensor],
    /// Adapter-projected student taps, in the same order.
    pub student_taps: &'a [Tensor],
}

#[derive(Debug, Clone)]
pub struct StudentLoss {
    pub total: Tensor,
    pub kd: KdLoss,
    /// `None` when channel distillation is disabled or has no sites.
    pub cd: Option<Tensor>,
}

impl StudentLoss {
    pub fn record(&self) -> Result<BTreeMap<String, f64>> {
        let mut r = self.kd.record()?;
        r.insert("cd".into(), self.cd.as_ref().map(scalar).transpose()?.unwrap_or(0.0));
        r.insert("total".into(), scalar(&self.total)?);
        Ok(r)
    }
}

/// `lambda_cd * CD(wider, student) + KD_multi`.
pub fn total_student_loss(
    inputs: &StudentLossInputs<'_>,
    w: &LossWeights,
    fx: &dyn FeatureExtractor,
    ssim: &SsimParams,
) -> Result<StudentLoss> {
    let kd = kd_multi(inputs.wider_out, inputs.deeper_out, inputs.student_out, w, fx, ssim)?;
    let cd = if w.lambda_cd > 0.0 && !inputs.wider_taps.is_empty() {
        Some(cd_loss(inputs.wider_taps, inputs.student_taps)?)
    } else {
        None
    };
    let total = match &cd {
        Some(cd) => ((cd * w.lambda_cd)? + &kd.total)?,
        None => kd.total.clone(),
    };
    Ok(StudentLoss { total, kd, cd })
}

pub const CYCLE_WEIGHT: f64 = 10.0;
pub const IDENTITY_WEIGHT: f64 = 5.0;

/// Generator-side CycleGAN objective and the fakes it produced.
#[derive(Debug, Clone)]
pub struct CycleLoss {
    pub total: Tensor,
    pub gan_a: Tensor,
    pub gan_b: Tensor,
    pub cycle_a: Tensor,
    pub cycle_b: Tensor,
    pub idt_a: Tensor,
    pub idt_b: Tensor,
    /// `G_A(a)`, judged by `D_A`.
    pub fake_b: Tensor,
    /// `G_B(b)`, judged by `D_B`.
    pub fake_a: Tensor,
}

impl CycleLoss {
    pub fn record(&self) -> Result<BTreeMap<String, f64>> {
        let mut r = BTreeMap::new();
        for (k, v) in [
            ("g_total", &self.total),
            ("gan_a", &self.gan_a),
            ("gan_b", &self.gan_b),
            ("cycle_a", &self.cycle_a),
            ("cycle_b", &self.cycle_b),
            ("idt_a", &self.idt_a),
            ("idt_b", &self.idt_b),
        ] {
            r.insert(k.to_string(), scalar(v)?);
        }
        Ok(r)
    }
}

/// LSGAN adversarial terms, cycle L1 (x10) and identity L1 (x5).
/// `G_A: A -> B` is judged by `D_A`; `G_B: B -> A` by `D_B`.
pub fn cyclegan_teacher_loss(
    g_a: &Generator,
    g_b: &Generator,
    d_a: &SharedDiscriminator,
    d_b: &SharedDiscriminator,
    batch: &SampleBatch,
) -> Result<CycleLoss> {
    if batch.mode != PairMode::Unpaired {
        return Err(Error::InvalidSpec("cyclegan_teacher_loss needs an unpaired batch".into()));
    }
    let (a, b) = (&batch.x, &batch.y);
    let fake_b = g_a.forward(a, Mode::Train)?;
    let fake_a = g_b.forward(b, Mode::Train)?;
    let gan_a = gan_loss(None, &d_a.forward(&fake_b, 0, Mode::Train)?, GanFamily::Lsgan, Side::Generator)?;
    let gan_b = gan_loss(None, &d_b.forward(&fake_a, 0, Mode::Train)?, GanFamily::Lsgan, Side::Generator)?;
    let cycle_a = recon_loss(&g_b.forward(&fake_b, Mode::Train)?, a)?;
    let cycle_b = recon_loss(&g_a.forward(&fake_a, Mode::Train)?, b)?;
    let idt_a = recon_loss(&g_a.forward(b, Mode::Train)?, b)?;
    let idt_b = recon_loss(&g_b.forward(a, Mode::Train)?, a)?;
    let total = (((&gan_a + &gan_b)? + ((&cycle_a + &cycle_b)? * CYCLE_WEIGHT)?)?
        + ((&idt_a + &idt_b)? * IDENTITY_WEIGHT)?)?;
    Ok(CycleLoss {
        total,
        gan_a,
        gan_b,
        cycle_a,
        cycle_b,
        idt_a,
        idt_b,
        fake_b,
        fake_a,
    })
}
