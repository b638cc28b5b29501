use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::nn::dims4;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsimParams {
    pub window_size: usize,
    pub sigma: f64,
    /// Value range of the images; 2 for [-1, 1].
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window_size: 11,
            sigma: 1.5,
            dynamic_range: 2.0,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (0.01 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (0.03 * self.dynamic_range).powi(2)
    }

    /// Normalized 1-d Gaussian weights.
    pub fn gaussian(&self) -> Vec<f64> {
        let half = (self.window_size / 2) as f64;
        let g: Vec<f64> = (0..self.window_size)
            .map(|i| {
                let d = i as f64 - half;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.window_size % 2 == 0 {
            return Err(Error::InvalidSpec(format!(
                "SSIM window must be odd and positive, got {}",
                self.window_size
            )));
        }
        if !(self.sigma > 0.0 && self.dynamic_range > 0.0) {
            return Err(Error::InvalidSpec("SSIM sigma and dynamic range must be > 0".into()));
        }
        Ok(())
    }
}

/// Local SSIM index over every fully contained window position.
pub fn ssim_index_map(a: &Tensor, b: &Tensor, p: &SsimParams) -> Result<Tensor> {
    p.validate()?;
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("ssim: {:?} vs {:?}", a.dims(), b.dims())));
    }
    let [_, _, h, w] = dims4(a)?;
    let k = p.window_size;
    if h < k || w < k {
        return Err(Error::Shape(format!("SSIM window {k} is larger than the {h}x{w} image")));
    }
    let g = p.gaussian();
    // the Gaussian window is separable: blur rows, then columns, each as a
    // product with a banded (n, n - k + 1) matrix
    let band = |n: usize| -> Result<Tensor> {
        let out = n - k + 1;
        let mut m = vec![0.0f64; n * out];
        for j in 0..out {
            for (d, gv) in g.iter().enumerate() {
                m[(j + d) * out + j] = *gv;
            }
        }
        Ok(Tensor::from_vec(m, (n, out), a.device())?.to_dtype(a.dtype())?)
    };
    let (band_w, band_h) = (band(w)?, band(h)?);
    let blur = |t: &Tensor| -> Result<Tensor> {
        let rows = t.broadcast_matmul(&band_w)?;
        Ok(rows.transpose(2, 3)?.broadcast_matmul(&band_h)?.transpose(2, 3)?)
    };

    let mu_a = blur(a)?;
    let mu_b = blur(b)?;
    let mu_a2 = mu_a.sqr()?;
    let mu_b2 = mu_b.sqr()?;
    let mu_ab = (&mu_a * &mu_b)?;
    let var_a = (blur(&a.sqr()?)? - &mu_a2)?;
    let var_b = (blur(&b.sqr()?)? - &mu_b2)?;
    let cov = (blur(&(a * b)?)? - &mu_ab)?;

    let num = (((mu_ab * 2.0)? + p.c1())? * ((cov * 2.0)? + p.c2())?)?;
    let den = (((mu_a2 + mu_b2)? + p.c1())? * ((var_a + var_b)? + p.c2())?)?;
    Ok((num / den)?)
}

/// `1 - mean SSIM`; 0 for identical images, at most 2.
pub fn ssim_loss(a: &Tensor, b: &Tensor, p: &SsimParams) -> Result<Tensor> {
    Ok((1.0 - ssim_index_map(a, b, p)?.mean_all()?)?)
}
