//! Static MACs / parameter accounting.
//!
//! One multiply-accumulate counts as one MAC. Convolutions cost
//! `k*k*(C_in/groups)*C_out*H_out*W_out` per sample; transposed convolutions
//! are counted on their output grid, `k*k*C_in*C_out*H_out*W_out`. Biases,
//! normalization and activations cost nothing but their parameters are counted.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::nn::{Layer, Net, Shape4, ShapeEvent};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub name: String,
    pub kind: String,
    pub output_shape: Shape4,
    pub macs: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub input_shape: Shape4,
    pub per_layer: Vec<LayerProfile>,
    pub total_macs: u64,
    pub total_params: u64,
}

pub fn layer_macs(layer: &Layer, output: Shape4) -> u64 {
    let [n, _, h, w] = output.map(|d| d as u64);
    match layer {
        Layer::Conv(c) => {
            let k = c.kernel_size() as u64;
            let cin_per_group = (c.in_channels() / c.groups) as u64;
            n * k * k * cin_per_group * c.out_channels() as u64 * h * w
        }
        Layer::ConvTranspose(c) => {
            let k = c.kernel_size() as u64;
            n * k * k * c.in_channels() as u64 * c.out_channels() as u64 * h * w
        }
        _ => 0,
    }
}

pub fn layer_params(layer: &Layer) -> u64 {
    let count = |v: &candle_core::Var| v.elem_count() as u64;
    match layer {
        Layer::Conv(c) => count(&c.weight) + c.bias.as_ref().map_or(0, count),
        Layer::ConvTranspose(c) => count(&c.weight) + c.bias.as_ref().map_or(0, count),
        Layer::BatchNorm(bn) => count(&bn.gamma) + count(&bn.beta),
        _ => 0,
    }
}

pub fn profile(net: &dyn Net, input_shape: Shape4) -> Result<ProfileReport> {
    let mut per_layer = Vec::new();
    net.walk_shapes(input_shape, &mut |ev| {
        if let ShapeEvent::Layer {
            name, layer, output, ..
        } = ev
        {
            per_layer.push(LayerProfile {
                name: name.to_string(),
                kind: layer.kind().to_string(),
                output_shape: output,
                macs: layer_macs(layer, output),
                params: layer_params(layer),
            });
        }
    })?;
    let total_macs = per_layer.iter().map(|l| l.macs).sum();
    let total_params = per_layer.iter().map(|l| l.params).sum();
    Ok(ProfileReport {
        input_shape,
        per_layer,
        total_macs,
        total_params,
    })
}

impl ProfileReport {
    pub fn gmacs(&self) -> f64 {
        self.total_macs as f64 / 1e9
    }

    pub fn mparams(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn layer(&self, name: &str) -> Option<&LayerProfile> {
        self.per_layer.iter().find(|l| l.name == name)
    }

    pub fn to_table(&self) -> String {
        let width = self.per_layer.iter().map(|l| l.name.len()).max().unwrap_or(4).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "input {:?}", self.input_shape);
        let _ = writeln!(s, "{:<width$}  {:<18}  {:<22}  {:>14}  {:>10}", "layer", "type", "output", "MACs", "params");
        for l in &self.per_layer {
            let _ = writeln!(
                s,
                "{:<width$}  {:<18}  {:<22}  {:>14}  {:>10}",
                l.name,
                l.kind,
                format!("{:?}", l.output_shape),
                l.macs,
                l.params
            );
        }
        let _ = writeln!(
            s,
            "total: {} MACs ({:.3}G), {} params ({:.3}M)",
            self.total_macs,
            self.gmacs(),
            self.total_params,
            self.mparams()
        );
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionRatio {
    pub macs: f64,
    pub params: f64,
}

impl CompressionRatio {
    /// Ratios rounded to one decimal, as displayed in comparison tables.
    pub fn rounded(&self) -> (f64, f64) {
        ((self.macs * 10.0).round() / 10.0, (self.params * 10.0).round() / 10.0)
    }
}

impl std::fmt::Display for CompressionRatio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.1}x MACs, {:.1}x params", self.macs, self.params)
    }
}

pub fn compression_ratio(big: &ProfileReport, small: &ProfileReport) -> Result<CompressionRatio> {
    ratio_of(big.total_macs as f64, big.total_params as f64, small.total_macs as f64, small.total_params as f64)
}

/// Ratio from raw totals, for comparing against published figures.
pub fn ratio_of(big_macs: f64, big_params: f64, small_macs: f64, small_params: f64) -> Result<CompressionRatio> {
    if small_macs == 0.0 || small_params == 0.0 {
        return Err(Error::InvalidSpec("compression ratio against an empty network".into()));
    }
    Ok(CompressionRatio {
        macs: big_macs / small_macs,
        params: big_params / small_params,
    })
}
