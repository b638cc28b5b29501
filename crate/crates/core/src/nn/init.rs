use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{BatchNorm, Conv2d, ConvTranspose2d};
use crate::Result;

/// Standard deviation of the normal initializer used for every convolution.
pub const CONV_INIT_STD: f64 = 0.02;

/// Seeded parameter factory. Networks built in the same order from the same
/// seed receive bit-identical parameters.
pub struct ParamInit {
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamInit {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn normal(&mut self, shape: &[usize], mean: f64, std: f64) -> Result<Var> {
        let dist = Normal::new(mean, std).expect("std must be finite and non-negative");
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    pub fn constant(&self, shape: &[usize], value: f64) -> Result<Var> {
        let t = (Tensor::ones(shape, self.dtype, &self.device)? * value)?;
        Ok(Var::from_tensor(&t)?)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Conv2d> {
        let weight = self.normal(
            &[out_channels, in_channels / groups, kernel, kernel],
            0.0,
            CONV_INIT_STD,
        )?;
        let bias = bias.then(|| self.constant(&[out_channels], 0.0)).transpose()?;
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
            groups,
            frozen: false,
        })
    }

    pub fn conv_transpose(
        &mut self,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        bias: bool,
    ) -> Result<ConvTranspose2d> {
        let weight = self.normal(
            &[in_channels, out_channels, kernel, kernel],
            0.0,
            CONV_INIT_STD,
        )?;
        let bias = bias.then(|| self.constant(&[out_channels], 0.0)).transpose()?;
        Ok(ConvTranspose2d {
            weight,
            bias,
            stride,
            padding,
            output_padding,
        })
    }

    /// Affine batch norm: gamma ~ N(1, 0.02), beta = 0, running stats at identity.
    pub fn batch_norm(&mut self, channels: usize) -> Result<BatchNorm> {
        Ok(BatchNorm {
            gamma: self.normal(&[channels], 1.0, CONV_INIT_STD)?,
            beta: self.constant(&[channels], 0.0)?,
            running_mean: self.constant(&[channels], 0.0)?,
            running_var: self.constant(&[channels], 1.0)?,
            momentum: 0.1,
        })
    }
}
