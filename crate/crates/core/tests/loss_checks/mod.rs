//! Loss-term checks shared by the `losses` and `acceptance` test targets.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use gandistill::losses::{
    cd_loss, channel_attention, feature_loss, feature_loss_from, gan_loss, gram, kd_loss, kd_multi, recon_loss,
    ssim_index_map, ssim_loss, style_loss, style_loss_from, total_student_loss, tv_loss, FeatureExtractor, GanFamily,
    LossWeights, Side, SsimParams, StudentLossInputs, Vgg,
};
use gandistill::nn::ParamInit;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

fn dev() -> Device {
    Device::Cpu
}

fn rand_vec(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn t4(v: Vec<f64>, s: [usize; 4]) -> Tensor {
    Tensor::from_vec(v, s.to_vec(), &dev()).unwrap()
}

fn rand4(seed: u64, s: [usize; 4]) -> Tensor {
    t4(rand_vec(seed, s.iter().product()), s)
}

fn val(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1().unwrap()
}

/// Index into a contiguous NCHW buffer.
fn at(v: &[f64], s: [usize; 4], n: usize, c: usize, y: usize, x: usize) -> f64 {
    v[((n * s[1] + c) * s[2] + y) * s[3] + x]
}

fn small_ssim() -> SsimParams {
    SsimParams {
        window_size: 3,
        sigma: 1.5,
        dynamic_range: 2.0,
    }
}

/// Tiny VGG-shaped extractor whose taps fit 4x4 inputs.
fn tiny_vgg(seed: u64) -> Vgg {
    Vgg::random([3, 4, 4, 4], &mut ParamInit::new(seed, DType::F64, &dev()))
        .unwrap()
        .with_taps(vec!["relu2_2".into()], vec!["relu1_2".into(), "relu2_2".into()])
        .unwrap()
}

// ---- adversarial and reconstruction ----

pub fn gan_fixed_points() {
    let ones = Tensor::ones((2, 1, 3, 3), DType::F64, &dev()).unwrap();
    let g = gan_loss(None, &ones, GanFamily::Lsgan, Side::Generator).unwrap();
    assert_eq!(val(&g), 0.0);
    let neg = ones.neg().unwrap();
    let d = gan_loss(Some(&ones), &neg, GanFamily::Hinge, Side::Discriminator).unwrap();
    assert_eq!(val(&d), 0.0);
    let half = (&ones * 0.5).unwrap();
    let d = gan_loss(Some(&half), &half, GanFamily::Lsgan, Side::Discriminator).unwrap();
    assert!((val(&d) - 0.25).abs() < TOL);
}

pub fn gan_matches_direct_formulas() {
    let s = [2, 1, 3, 3];
    let (r, f) = (rand4(1, s), rand4(2, s));
    let (rv, fv) = (flat(&r), flat(&f));
    let n = rv.len() as f64;
    let hinge_d = rv.iter().map(|x| (1.0 - x).max(0.0)).sum::<f64>() / n + fv.iter().map(|x| (1.0 + x).max(0.0)).sum::<f64>() / n;
    let hinge_g = -fv.iter().sum::<f64>() / n;
    let ls_d = 0.5 * (rv.iter().map(|x| (x - 1.0).powi(2)).sum::<f64>() / n + fv.iter().map(|x| x * x).sum::<f64>() / n);
    let ls_g = fv.iter().map(|x| (x - 1.0).powi(2)).sum::<f64>() / n;
    let got = |fam, side| val(&gan_loss(Some(&r), &f, fam, side).unwrap());
    assert!((got(GanFamily::Hinge, Side::Discriminator) - hinge_d).abs() < TOL);
    assert!((got(GanFamily::Hinge, Side::Generator) - hinge_g).abs() < TOL);
    assert!((got(GanFamily::Lsgan, Side::Discriminator) - ls_d).abs() < TOL);
    assert!((got(GanFamily::Lsgan, Side::Generator) - ls_g).abs() < TOL);
}

pub fn gan_rejects_nan() {
    let bad = Tensor::new(&[[[[f64::NAN]]]], &dev()).unwrap();
    assert!(gan_loss(None, &bad, GanFamily::Hinge, Side::Generator).is_err());
}

pub fn recon_cases() {
    let s = [2, 3, 4, 4];
    let a = rand4(3, s);
    assert_eq!(val(&recon_loss(&a, &a).unwrap()), 0.0);
    let shifted = (&a + 0.5).unwrap();
    assert!((val(&recon_loss(&shifted, &a).unwrap()) - 0.5).abs() < TOL);
    let b = rand4(4, s);
    let (av, bv) = (flat(&a), flat(&b));
    let oracle = av.iter().zip(&bv).map(|(x, y)| (x - y).abs()).sum::<f64>() / av.len() as f64;
    assert!((val(&recon_loss(&a, &b).unwrap()) - oracle).abs() < TOL);
    assert_eq!(val(&recon_loss(&a, &b).unwrap()), val(&recon_loss(&b, &a).unwrap()));
    assert!(recon_loss(&a, &rand4(5, [2, 3, 4, 2])).is_err());
}

// ---- SSIM ----

/// Literal sliding-window SSIM over valid positions.
fn ssim_oracle(a: &Tensor, b: &Tensor, p: &SsimParams) -> f64 {
    let s: [usize; 4] = a.dims().try_into().unwrap();
    let (av, bv) = (flat(a), flat(b));
    let k = p.window_size;
    let g = p.gaussian();
    let (c1, c2) = (p.c1(), p.c2());
    let mut total = 0.0;
    let mut count = 0usize;
    for n in 0..s[0] {
        for c in 0..s[1] {
            for y0 in 0..=s[2] - k {
                for x0 in 0..=s[3] - k {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in 0..k {
                        for dx in 0..k {
                            let w = g[dy] * g[dx];
                            let x = at(&av, s, n, c, y0 + dy, x0 + dx);
                            let y = at(&bv, s, n, c, y0 + dy, x0 + dx);
                            ma += w * x;
                            mb += w * y;
                            saa += w * x * x;
                            sbb += w * y * y;
                            sab += w * x * y;
                        }
                    }
                    let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                    total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
        }
    }
    1.0 - total / count as f64
}

pub fn ssim_identity_and_symmetry() {
    let p = SsimParams::default();
    let a = rand4(6, [1, 3, 16, 16]);
    let b = rand4(7, [1, 3, 16, 16]);
    assert!(val(&ssim_loss(&a, &a, &p).unwrap()).abs() < 1e-12);
    let ab = val(&ssim_loss(&a, &b, &p).unwrap());
    let ba = val(&ssim_loss(&b, &a, &p).unwrap());
    assert!((ab - ba).abs() < 1e-12);
    assert!((0.0..=2.0).contains(&ab));
}

pub fn ssim_constant_vs_negation_near_two() {
    let p = SsimParams::default();
    let a = (Tensor::ones((1, 3, 11, 11), DType::F64, &dev()).unwrap() * 0.8).unwrap();
    let l = val(&ssim_loss(&a, &a.neg().unwrap(), &p).unwrap());
    let (mu, c1) = (0.8f64, p.c1());
    let closed = 1.0 - (-2.0 * mu * mu + c1) / (2.0 * mu * mu + c1);
    assert!((l - closed).abs() < TOL, "{l} vs {closed}");
    assert!(l > 1.99);
}

pub fn ssim_matches_sliding_window_oracle() {
    let p3 = SsimParams {
        window_size: 5,
        ..SsimParams::default()
    };
    for (seed, p) in [(8, &p3), (9, &small_ssim())] {
        let a = rand4(seed, [2, 3, 8, 8]);
        let b = rand4(seed + 100, [2, 3, 8, 8]);
        let got = val(&ssim_loss(&a, &b, p).unwrap());
        let want = ssim_oracle(&a, &b, p);
        assert!((got - want).abs() < TOL, "{got} vs {want}");
    }
    let map = ssim_index_map(&rand4(1, [1, 1, 8, 8]), &rand4(2, [1, 1, 8, 8]), &p3).unwrap();
    assert_eq!(map.dims(), &[1, 1, 4, 4]);
}

pub fn ssim_constants_follow_range() {
    let p = SsimParams::default();
    assert!((p.c1() - (0.01f64 * 2.0).powi(2)).abs() < 1e-15);
    assert!((p.c2() - (0.03f64 * 2.0).powi(2)).abs() < 1e-15);
}

pub fn ssim_window_too_large() {
    let a = rand4(1, [1, 3, 8, 8]);
    assert!(ssim_loss(&a, &a, &SsimParams::default()).is_err());
}

// ---- total variation ----

pub fn tv_cases() {
    let c = (Tensor::ones((1, 3, 4, 4), DType::F64, &dev()).unwrap() * 0.3).unwrap();
    assert_eq!(val(&tv_loss(&c).unwrap()), 0.0);
    // width-2 step 0|1, 3 rows: one unit horizontal diff per row
    let step = t4(vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0], [1, 1, 3, 2]);
    assert!((val(&tv_loss(&step).unwrap()) - 3.0 / 6.0).abs() < TOL);
    let s = [2, 3, 5, 4];
    let r = rand4(10, s);
    let v = flat(&r);
    let mut sum = 0.0;
    for n in 0..s[0] {
        for ch in 0..s[1] {
            for y in 0..s[2] {
                for x in 0..s[3] {
                    if x + 1 < s[3] {
                        sum += (at(&v, s, n, ch, y, x + 1) - at(&v, s, n, ch, y, x)).powi(2);
                    }
                    if y + 1 < s[2] {
                        sum += (at(&v, s, n, ch, y + 1, x) - at(&v, s, n, ch, y, x)).powi(2);
                    }
                }
            }
        }
    }
    assert!((val(&tv_loss(&r).unwrap()) - sum / v.len() as f64).abs() < TOL);
}

// ---- perceptual terms ----

pub fn gram_by_hand() {
    // 2 channels over a 2x2 grid
    let f = t4(vec![1.0, 2.0, 3.0, 4.0, 0.5, -1.0, 2.0, 0.0], [1, 2, 2, 2]);
    let g = flat(&gram(&f).unwrap());
    let (a, b) = ([1.0, 2.0, 3.0, 4.0], [0.5, -1.0, 2.0, 0.0]);
    let dot = |x: &[f64; 4], y: &[f64; 4]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / 8.0;
    let want = [dot(&a, &a), dot(&a, &b), dot(&b, &a), dot(&b, &b)];
    for (x, y) in g.iter().zip(want) {
        assert!((x - y).abs() < TOL);
    }
}

pub fn feature_and_style_from_maps() {
    let taps = vec!["t".to_string()];
    let a = rand4(11, [2, 2, 3, 3]);
    let ft = BTreeMap::from([("t".to_string(), a.clone())]);
    let ones = BTreeMap::from([("t".to_string(), (&a + 1.0).unwrap())]);
    assert!((val(&feature_loss_from(&ones, &ft, &taps).unwrap()) - 1.0).abs() < TOL);
    assert_eq!(val(&feature_loss_from(&ft, &ft, &taps).unwrap()), 0.0);
    assert_eq!(val(&style_loss_from(&ft, &ft, &taps).unwrap()), 0.0);
    // zero activations on one side: the other side's Gram L1 norm (per sample)
    let zeros = BTreeMap::from([("t".to_string(), a.zeros_like().unwrap())]);
    let g_norm = flat(&gram(&a).unwrap()).iter().map(|x| x.abs()).sum::<f64>() / 2.0;
    assert!((val(&style_loss_from(&ft, &zeros, &taps).unwrap()) - g_norm).abs() < TOL);
    assert!(feature_loss_from(&ft, &ft, &["missing".to_string()]).is_err());
}

/// One 1x1 conv with known weights followed by ReLU, as a stub extractor.
struct Stub {
    w: [[f64; 3]; 2],
}

impl Stub {
    fn act(&self, x: &Tensor) -> Vec<f64> {
        let s: [usize; 4] = x.dims().try_into().unwrap();
        let v = flat(x);
        let mut out = Vec::new();
        for n in 0..s[0] {
            for o in 0..2 {
                for y in 0..s[2] {
                    for xx in 0..s[3] {
                        let z: f64 = (0..3).map(|c| self.w[o][c] * at(&v, s, n, c, y, xx)).sum();
                        out.push(z.max(0.0));
                    }
                }
            }
        }
        out
    }
}

impl FeatureExtractor for Stub {
    fn extract(&self, x: &Tensor, taps: &[String]) -> gandistill::Result<BTreeMap<String, Tensor>> {
        let w = Tensor::new(&self.w, x.device())?.reshape((2, 3, 1, 1))?;
        let y = x.conv2d(&w, 0, 1, 1, 1)?.relu()?;
        Ok(taps.iter().map(|t| (t.clone(), y.clone())).collect())
    }
    fn feature_taps(&self) -> Vec<String> {
        vec!["a".into()]
    }
    fn style_taps(&self) -> Vec<String> {
        vec!["a".into()]
    }
}

const STUB: Stub = Stub {
    w: [[0.5, -0.25, 1.0], [-0.75, 0.5, 0.25]],
};

pub fn feature_loss_stub_oracle() {
    let s = [1, 3, 4, 4];
    let (t, p) = (rand4(12, s), rand4(13, s));
    let (at_, ap) = (STUB.act(&t), STUB.act(&p));
    let want = at_.iter().zip(&ap).map(|(x, y)| (x - y).abs()).sum::<f64>() / at_.len() as f64;
    assert!((val(&feature_loss(&t, &p, &STUB).unwrap()) - want).abs() < TOL);
    assert_eq!(val(&feature_loss(&t, &t, &STUB).unwrap()), 0.0);
}

pub fn style_loss_stub_oracle() {
    let s = [1, 3, 4, 4];
    let (t, p) = (rand4(14, s), rand4(15, s));
    let gram_of = |a: &[f64]| {
        let hw = 16;
        let mut g = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                g[i][j] = (0..hw).map(|k| a[i * hw + k] * a[j * hw + k]).sum::<f64>() / (2 * hw) as f64;
            }
        }
        g
    };
    let (gt, gp) = (gram_of(&STUB.act(&t)), gram_of(&STUB.act(&p)));
    let want: f64 = (0..2).flat_map(|i| (0..2).map(move |j| (i, j))).map(|(i, j)| (gt[i][j] - gp[i][j]).abs()).sum();
    assert!((val(&style_loss(&t, &p, &STUB).unwrap()) - want).abs() < TOL);
}

pub fn extractor_is_repeatable_and_frozen() {
    let vgg = tiny_vgg(1);
    let x = rand4(16, [1, 3, 4, 4]);
    let taps = vgg.style_taps();
    let a = vgg.extract(&x, &taps).unwrap();
    let b = vgg.extract(&x, &taps).unwrap();
    for k in &taps {
        assert_eq!(flat(&a[k]), flat(&b[k]));
    }
    let xv = Var::from_tensor(&x).unwrap();
    let out = vgg.extract(xv.as_tensor(), &taps).unwrap();
    let grads = out["relu2_2"].sum_all().unwrap().backward().unwrap();
    assert!(grads.get(xv.as_tensor()).is_some());
    for (_, p) in gandistill::nn::Net::named_params(&vgg) {
        assert!(grads.get(p.as_tensor()).is_none());
    }
    assert!(vgg.extract(&x, &["relu9_9".to_string()]).is_err());
}

// ---- KD composition ----

fn table_weights() -> LossWeights {
    LossWeights::default()
}

pub fn kd_is_weighted_sum() {
    let s = [1, 3, 4, 4];
    let (t, p) = (rand4(17, s), rand4(18, s));
    let w = table_weights();
    let sp = small_ssim();
    let kd = kd_loss(&t, &p, &w, &STUB, &sp).unwrap();
    let manual = w.lambda_ssim * val(&ssim_loss(&t, &p, &sp).unwrap())
        + w.lambda_feature * val(&feature_loss(&t, &p, &STUB).unwrap())
        + w.lambda_style * val(&style_loss(&t, &p, &STUB).unwrap())
        + w.lambda_tv * val(&tv_loss(&p).unwrap());
    assert!((val(&kd.total) - manual).abs() < TOL * manual.abs().max(1.0));
    let rec = kd.record().unwrap();
    assert_eq!(rec["kd"], val(&kd.total));
}

pub fn kd_zero_cases() {
    let s = [1, 3, 4, 4];
    let (t, p) = (rand4(19, s), rand4(20, s));
    let sp = small_ssim();
    let no_tv = LossWeights {
        lambda_tv: 0.0,
        ..table_weights()
    };
    assert!(val(&kd_loss(&t, &t, &no_tv, &STUB, &sp).unwrap().total).abs() < 1e-12);
    let zero = LossWeights {
        lambda_ssim: 0.0,
        lambda_feature: 0.0,
        lambda_style: 0.0,
        lambda_tv: 0.0,
        ..table_weights()
    };
    assert_eq!(val(&kd_loss(&t, &p, &zero, &STUB, &sp).unwrap().total), 0.0);
}

pub fn kd_linear_in_each_weight() {
    let s = [1, 3, 4, 4];
    let (t, p) = (rand4(21, s), rand4(22, s));
    let sp = small_ssim();
    let w = table_weights();
    let doubled = LossWeights {
        lambda_style: 2.0 * w.lambda_style,
        ..w.clone()
    };
    let a = kd_loss(&t, &p, &w, &STUB, &sp).unwrap();
    let b = kd_loss(&t, &p, &doubled, &STUB, &sp).unwrap();
    let style = val(&a.style);
    assert!((val(&b.total) - val(&a.total) - w.lambda_style * style).abs() < TOL * val(&b.total).max(1.0));
}

pub fn kd_multi_composition() {
    let s = [1, 3, 4, 4];
    let (tw, td, p) = (rand4(23, s), rand4(24, s), rand4(25, s));
    let sp = small_ssim();
    let w = table_weights();
    let single = val(&kd_loss(&tw, &p, &w, &STUB, &sp).unwrap().total);
    assert_eq!(val(&kd_multi(Some(&tw), None, &p, &w, &STUB, &sp).unwrap().total), single);
    let both = val(&kd_multi(Some(&tw), Some(&td), &p, &w, &STUB, &sp).unwrap().total);
    let other = val(&kd_loss(&td, &p, &w, &STUB, &sp).unwrap().total);
    assert!((both - single - other).abs() < TOL * both.max(1.0));
    let no_tv = LossWeights { lambda_tv: 0.0, ..w };
    assert!(val(&kd_multi(Some(&p), Some(&p), &p, &no_tv, &STUB, &sp).unwrap().total).abs() < 1e-12);
    assert!(kd_multi(None, None, &p, &no_tv, &STUB, &sp).is_err());
}

// ---- channel distillation ----

pub fn channel_attention_cases() {
    let half = (Tensor::ones((2, 3, 3), DType::F64, &dev()).unwrap() * 0.5).unwrap();
    assert_eq!(flat(&channel_attention(&half).unwrap()), vec![0.5, 0.5]);
    let grid = Tensor::arange(0.0f64, 18.0, &dev()).unwrap().reshape((2, 3, 3)).unwrap();
    assert_eq!(flat(&channel_attention(&grid).unwrap()), vec![4.0, 13.0]);
    let zero = Tensor::zeros((4, 2, 2), DType::F64, &dev()).unwrap();
    assert_eq!(flat(&channel_attention(&zero).unwrap()), vec![0.0; 4]);
    assert!(channel_attention(&Tensor::zeros(4, DType::F64, &dev()).unwrap()).is_err());
}

pub fn cd_by_hand() {
    let t = Tensor::new(&[[[1.0f64, 1.0], [1.0, 1.0]], [[0.0, 0.0], [0.0, 0.0]]], &dev()).unwrap();
    let s = Tensor::zeros((2, 2, 2), DType::F64, &dev()).unwrap();
    assert!((val(&cd_loss(&[t.clone()], &[s.clone()]).unwrap()) - 0.5).abs() < TOL);
    assert_eq!(val(&cd_loss(&[t.clone()], &[t.clone()]).unwrap()), 0.0);
    assert!(cd_loss(&[t.clone()], &[]).is_err());
    assert!(cd_loss(&[], &[]).is_err());
    let wrong = Tensor::zeros((3, 2, 2), DType::F64, &dev()).unwrap();
    assert!(cd_loss(&[t], &[wrong]).is_err());
}

fn cd_oracle(t: &[Tensor], s: &[Tensor]) -> f64 {
    let mut acc = 0.0;
    for (a, b) in t.iter().zip(s) {
        let dims: [usize; 4] = a.dims().try_into().unwrap();
        let (av, bv) = (flat(a), flat(b));
        let hw = (dims[2] * dims[3]) as f64;
        let mut site = 0.0;
        for n in 0..dims[0] {
            for c in 0..dims[1] {
                let mut wa = 0.0;
                let mut wb = 0.0;
                for y in 0..dims[2] {
                    for x in 0..dims[3] {
                        wa += at(&av, dims, n, c, y, x);
                        wb += at(&bv, dims, n, c, y, x);
                    }
                }
                site += ((wa - wb) / hw).powi(2);
            }
        }
        acc += site / (dims[0] * dims[1]) as f64;
    }
    acc / t.len() as f64
}

pub fn cd_matches_loop_oracle_and_site_order() {
    let t = vec![rand4(30, [2, 4, 3, 3]), rand4(31, [2, 8, 2, 2])];
    let s = vec![rand4(32, [2, 4, 3, 3]), rand4(33, [2, 8, 2, 2])];
    let got = val(&cd_loss(&t, &s).unwrap());
    assert!((got - cd_oracle(&t, &s)).abs() < TOL);
    let (tr, sr): (Vec<_>, Vec<_>) = (t.iter().rev().cloned().collect(), s.iter().rev().cloned().collect());
    assert!((val(&cd_loss(&tr, &sr).unwrap()) - got).abs() < 1e-12);
}

pub fn student_objective_composition() {
    let s = [1, 3, 4, 4];
    let (tw, td, p) = (rand4(40, s), rand4(41, s), rand4(42, s));
    let taps_t = vec![rand4(43, [1, 4, 2, 2])];
    let taps_s = vec![rand4(44, [1, 4, 2, 2])];
    let sp = small_ssim();
    let inputs = StudentLossInputs {
        wider_out: Some(&tw),
        deeper_out: Some(&td),
        student_out: &p,
        wider_taps: &taps_t,
        student_taps: &taps_s,
    };
    let w0 = LossWeights {
        lambda_cd: 0.0,
        ..table_weights()
    };
    let l0 = total_student_loss(&inputs, &w0, &STUB, &sp).unwrap();
    assert!(l0.cd.is_none());
    assert_eq!(val(&l0.total), val(&kd_multi(Some(&tw), Some(&td), &p, &w0, &STUB, &sp).unwrap().total));
    let w = LossWeights {
        lambda_cd: 50.0,
        ..table_weights()
    };
    let l = total_student_loss(&inputs, &w, &STUB, &sp).unwrap();
    let want = val(&l0.total) + 50.0 * val(&cd_loss(&taps_t, &taps_s).unwrap());
    assert!((val(&l.total) - want).abs() < TOL * want.max(1.0));
    let no_tv = LossWeights { lambda_tv: 0.0, ..w };
    let same = StudentLossInputs {
        wider_out: Some(&p),
        deeper_out: Some(&p),
        student_out: &p,
        wider_taps: &taps_t,
        student_taps: &taps_t,
    };
    assert!(val(&total_student_loss(&same, &no_tv, &STUB, &sp).unwrap().total).abs() < 1e-12);
}

// ---- finite-difference gradients ----

/// Central differences against autograd; error is measured as the relative
/// norm of the difference between the two gradient vectors.
fn grad_check(label: &str, x0: &Tensor, f: &dyn Fn(&Tensor) -> Tensor) {
    let v = Var::from_tensor(x0).unwrap();
    let grads = f(v.as_tensor()).backward().unwrap();
    let analytic = flat(grads.get(v.as_tensor()).expect("input receives a gradient"));
    let base = flat(x0);
    let h = 1e-6;
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[i] += h;
        minus[i] -= h;
        let fp = val(&f(&Tensor::from_vec(plus, x0.dims(), &dev()).unwrap()));
        let fm = val(&f(&Tensor::from_vec(minus, x0.dims(), &dev()).unwrap()));
        numeric.push((fp - fm) / (2.0 * h));
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt().max(1e-8);
    assert!(diff / scale < 1e-3, "{label}: relative gradient error {}", diff / scale);
}

const IMG: [usize; 4] = [1, 3, 4, 4];

pub fn gradients_of_image_losses() {
    let t = rand4(50, IMG);
    let p = rand4(51, IMG);
    let sp = small_ssim();
    grad_check("recon", &p, &|x| recon_loss(x, &t).unwrap());
    grad_check("ssim", &p, &|x| ssim_loss(&t, x, &sp).unwrap());
    grad_check("tv", &p, &|x| tv_loss(x).unwrap());
    grad_check("feature/stub", &p, &|x| feature_loss(&t, x, &STUB).unwrap());
    grad_check("style/stub", &p, &|x| style_loss(&t, x, &STUB).unwrap());
    let vgg = tiny_vgg(3);
    grad_check("feature/vgg", &p, &|x| feature_loss(&t, x, &vgg).unwrap());
    grad_check("style/vgg", &p, &|x| style_loss(&t, x, &vgg).unwrap());
    let w = table_weights();
    grad_check("kd", &p, &|x| kd_loss(&t, x, &w, &vgg, &sp).unwrap().total);
}

pub fn gradients_of_adversarial_and_cd() {
    let r = rand4(52, IMG);
    let f = rand4(53, IMG);
    for fam in [GanFamily::Hinge, GanFamily::Lsgan] {
        grad_check("gan d", &f, &|x| gan_loss(Some(&r), x, fam, Side::Discriminator).unwrap());
        grad_check("gan g", &f, &|x| gan_loss(None, x, fam, Side::Generator).unwrap());
    }
    let t = rand4(54, IMG);
    grad_check("cd", &f, &|x| cd_loss(&[t.clone()], &[x.clone()]).unwrap());
    grad_check("gram", &f, &|x| gram(x).unwrap().sum_all().unwrap());
}

#[allow(dead_code)]
pub const ALL: &[(&str, fn())] = &[
    ("gan_fixed_points", gan_fixed_points),
    ("gan_matches_direct_formulas", gan_matches_direct_formulas),
    ("gan_rejects_nan", gan_rejects_nan),
    ("recon_cases", recon_cases),
    ("ssim_identity_and_symmetry", ssim_identity_and_symmetry),
    ("ssim_constant_vs_negation_near_two", ssim_constant_vs_negation_near_two),
    ("ssim_matches_sliding_window_oracle", ssim_matches_sliding_window_oracle),
    ("ssim_constants_follow_range", ssim_constants_follow_range),
    ("ssim_window_too_large", ssim_window_too_large),
    ("tv_cases", tv_cases),
    ("gram_by_hand", gram_by_hand),
    ("feature_and_style_from_maps", feature_and_style_from_maps),
    ("feature_loss_stub_oracle", feature_loss_stub_oracle),
    ("style_loss_stub_oracle", style_loss_stub_oracle),
    ("extractor_is_repeatable_and_frozen", extractor_is_repeatable_and_frozen),
    ("kd_is_weighted_sum", kd_is_weighted_sum),
    ("kd_zero_cases", kd_zero_cases),
    ("kd_linear_in_each_weight", kd_linear_in_each_weight),
    ("kd_multi_composition", kd_multi_composition),
    ("channel_attention_cases", channel_attention_cases),
    ("cd_by_hand", cd_by_hand),
    ("cd_matches_loop_oracle_and_site_order", cd_matches_loop_oracle_and_site_order),
    ("student_objective_composition", student_objective_composition),
    ("gradients_of_image_losses", gradients_of_image_losses),
    ("gradients_of_adversarial_and_cd", gradients_of_adversarial_and_cd),
];
