//! Fréchet distance between Gaussian fits of pooled image features.

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::nn::{Layer, Mode, ParamInit, Sequential, TapSink};
use crate::{Error, Result};

/// Jitter added to both covariances when the first square root is not finite.
pub const SQRT_JITTER: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    /// Unbiased (n - 1) sample covariance.
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl FeatureStats {
    /// Stats of the rows of `features` (one sample per row).
    pub fn from_rows(features: &DMatrix<f64>) -> Result<Self> {
        let (n, d) = features.shape();
        if n < 2 {
            return Err(Error::InvalidSpec(format!("feature statistics need >= 2 samples, got {n}")));
        }
        // shifting by one sample keeps duplicated inputs at an exactly zero covariance
        let origin = features.row(0).clone_owned();
        let mut centered = features.clone();
        for mut r in centered.row_iter_mut() {
            r -= &origin;
        }
        let shifted_mean = centered.row_mean();
        for mut r in centered.row_iter_mut() {
            r -= &shifted_mean;
        }
        let mut cov = centered.transpose() * &centered / (n - 1) as f64;
        cov = (&cov + cov.transpose()) * 0.5;
        let mean = (shifted_mean + origin).transpose();
        debug_assert_eq!(mean.len(), d);
        Ok(Self { mean, cov, count: n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Network mapping an image batch (N, 3, H, W) in [-1, 1] to pooled (N, d) features.
pub trait PooledExtractor {
    fn pooled(&self, images: &Tensor) -> Result<DMatrix<f64>>;
}

fn tensor_rows(t: &Tensor) -> Result<DMatrix<f64>> {
    let (n, d) = t.dims2()?;
    let v: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    Ok(DMatrix::from_row_slice(n, d, &v))
}

/// Every pixel value is a feature. For tests on small images.
#[derive(Debug, Default, Clone, Copy)]
pub struct FlattenExtractor;

impl PooledExtractor for FlattenExtractor {
    fn pooled(&self, images: &Tensor) -> Result<DMatrix<f64>> {
        tensor_rows(&images.flatten_from(1)?)
    }
}

/// Seeded random conv stack with global average pooling: a cheap, hermetic
/// stand-in for an Inception pool layer.
#[derive(Debug)]
pub struct ConvPoolExtractor {
    body: Sequential,
}

impl ConvPoolExtractor {
    pub fn new(seed: u64, dim: usize, device: &Device) -> Result<Self> {
        let mut init = ParamInit::new(seed, DType::F32, device);
        let mut body = Sequential::new();
        let mut cin = 3;
        for (i, cout) in [dim / 2, dim].into_iter().enumerate() {
            let cout = cout.max(1);
            let mut conv = init.conv(cin, cout, 3, 2, 1, 1, true)?;
            conv.weight = init.normal(conv.weight.dims(), 0.0, (2.0 / (9 * cin) as f64).sqrt())?;
            body.layer(format!("conv{i}"), Layer::Conv(conv));
            body.layer(format!("relu{i}"), Layer::Relu);
            cin = cout;
        }
        body.freeze();
        Ok(Self { body })
    }
}

impl PooledExtractor for ConvPoolExtractor {
    fn pooled(&self, images: &Tensor) -> Result<DMatrix<f64>> {
        let f = self
            .body
            .forward(&images.to_dtype(DType::F32)?, Mode::Eval, &mut TapSink::none())?;
        tensor_rows(&f.mean((2, 3))?)
    }
}

pub fn extract_stats(images: &Tensor, ex: &dyn PooledExtractor) -> Result<FeatureStats> {
    FeatureStats::from_rows(&ex.pooled(images)?)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `tr((Sa Sb)^{1/2})` via the symmetric form `(Sa^{1/2} Sb Sa^{1/2})^{1/2}`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let s = sym_sqrt(a);
    let m = &s * b * &s;
    let m = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(m).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum()
}

pub fn fid(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() || a.cov.shape() != b.cov.shape() {
        return Err(Error::Shape(format!(
            "feature dimensionality {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    if a.mean == b.mean && a.cov == b.cov {
        return Ok(0.0);
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let trace = a.cov.trace() + b.cov.trace();
    let mut cross = trace_sqrt_product(&a.cov, &b.cov);
    if !cross.is_finite() {
        let jitter = DMatrix::<f64>::identity(a.dim(), a.dim()) * SQRT_JITTER;
        cross = trace_sqrt_product(&(&a.cov + &jitter), &(&b.cov + &jitter));
    }
    let d = mean_term + trace - 2.0 * cross;
    if !d.is_finite() {
        return Err(Error::NonFinite("FID".into()));
    }
    Ok(d.max(0.0))
}
