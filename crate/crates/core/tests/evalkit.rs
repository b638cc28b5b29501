use candle_core::{Device, Tensor};
use gandistill::evalkit::{extract_stats, fid, FeatureStats, FlattenExtractor};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rows(seed: u64, n: usize, d: usize) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0))
}

fn spd(seed: u64, d: usize) -> DMatrix<f64> {
    let a = rows(seed, d, d);
    &a * a.transpose() + DMatrix::identity(d, d) * 0.1
}

fn stats(mean: DVector<f64>, cov: DMatrix<f64>) -> FeatureStats {
    FeatureStats { mean, cov, count: 10 }
}

/// Second implementation: tr((Sa Sb)^{1/2}) as the sum of square roots of the
/// (real, non-negative) eigenvalues of the non-symmetric product Sa Sb.
fn fid_oracle(a: &FeatureStats, b: &FeatureStats) -> f64 {
    let prod = &a.cov * &b.cov;
    let eig = prod.complex_eigenvalues();
    let cross: f64 = eig.iter().map(|z| z.re.max(0.0).sqrt()).sum();
    (&a.mean - &b.mean).norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * cross
}

#[test]
fn stats_by_hand() {
    let f = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 6.0, 5.0, 4.0]);
    let s = FeatureStats::from_rows(&f).unwrap();
    assert_eq!(s.count, 3);
    assert!((s.mean[0] - 3.0).abs() < 1e-12 && (s.mean[1] - 4.0).abs() < 1e-12);
    // deviations (-2,-2), (0,2), (2,0)
    let want = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 4.0]);
    assert!((&s.cov - want).amax() < 1e-12);
}

#[test]
fn stats_need_two_samples() {
    assert!(FeatureStats::from_rows(&rows(0, 1, 3)).is_err());
}

#[test]
fn duplicated_image_has_zero_covariance() {
    let img = Tensor::new(&[[[[0.3f32, -0.7], [0.1, 0.9]]; 3]], &Device::Cpu).unwrap();
    let batch = Tensor::cat(&[&img, &img, &img, &img], 0).unwrap();
    let s = extract_stats(&batch, &FlattenExtractor).unwrap();
    assert_eq!(s.cov.amax(), 0.0);
    assert_eq!(s.dim(), 12);
}

#[test]
fn stats_ignore_row_order() {
    let f = rows(1, 6, 3);
    let mut perm = f.clone();
    perm.swap_rows(0, 5);
    perm.swap_rows(1, 3);
    let (a, b) = (FeatureStats::from_rows(&f).unwrap(), FeatureStats::from_rows(&perm).unwrap());
    assert!((&a.mean - &b.mean).amax() < 1e-12);
    assert!((&a.cov - &b.cov).amax() < 1e-12);
    assert_eq!(a.cov, a.cov.transpose());
}

#[test]
fn fid_identity_is_exact_zero() {
    let s = FeatureStats::from_rows(&rows(2, 8, 4)).unwrap();
    assert_eq!(fid(&s, &s).unwrap(), 0.0);
}

#[test]
fn fid_shifted_identity_gaussians() {
    let d = 5;
    let a = stats(DVector::zeros(d), DMatrix::identity(d, d));
    let mut mu = DVector::zeros(d);
    mu[0] = 2.0;
    let b = stats(mu, DMatrix::identity(d, d));
    assert!((fid(&a, &b).unwrap() - 4.0).abs() < 1e-6);
}

#[test]
fn fid_grows_with_squared_mean_gap() {
    let cov = spd(3, 4);
    let a = stats(DVector::zeros(4), cov.clone());
    for k in [0.5, 1.0, 3.0] {
        let b = stats(DVector::from_element(4, k), cov.clone());
        assert!((fid(&a, &b).unwrap() - 4.0 * k * k).abs() < 1e-6);
    }
}

#[test]
fn fid_matches_eigen_oracle() {
    for seed in 0..5 {
        let d = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let a = stats(DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)), spd(seed, d));
        let b = stats(DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)), spd(seed + 50, d));
        let got = fid(&a, &b).unwrap();
        let want = fid_oracle(&a, &b);
        assert!((got - want).abs() < 1e-6, "seed {seed}: {got} vs {want}");
        assert!((fid(&b, &a).unwrap() - got).abs() < 1e-9);
    }
}

#[test]
fn fid_singular_covariances() {
    let a = FeatureStats::from_rows(&rows(4, 3, 6)).unwrap();
    let b = FeatureStats::from_rows(&rows(5, 3, 6)).unwrap();
    let v = fid(&a, &b).unwrap();
    assert!(v.is_finite() && v >= 0.0);
}

#[test]
fn fid_dimension_mismatch() {
    let a = stats(DVector::zeros(2), DMatrix::identity(2, 2));
    let b = stats(DVector::zeros(3), DMatrix::identity(3, 3));
    assert!(fid(&a, &b).is_err());
}
