use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use super::NormKind;
use crate::nn::{Layer, Mode, Net, ParamInit, Sequential, Shape4, ShapeEvent, TapSink};
use crate::{Error, Result};

fn six() -> usize {
    6
}
fn one() -> usize {
    1
}
fn four() -> usize {
    4
}

/// PatchGAN trunk whose first `d_share` convolution units are shared by all heads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharedDiscriminatorSpec {
    /// 6 for conditional (input, output) pairs, 3 for unconditional.
    #[serde(default = "six")]
    pub in_channels: usize,
    pub ndf: usize,
    #[serde(default)]
    pub d_share: usize,
    #[serde(default = "one")]
    pub num_heads: usize,
    /// Number of stride-2 convolutions; the trunk has `n_layers + 2` convolutions.
    #[serde(default = "four")]
    pub n_layers: usize,
    #[serde(default)]
    pub norm: NormKind,
}

impl SharedDiscriminatorSpec {
    pub fn new(ndf: usize, d_share: usize, num_heads: usize) -> Self {
        Self {
            in_channels: 6,
            ndf,
            d_share,
            num_heads,
            n_layers: 4,
            norm: NormKind::Instance,
        }
    }

    /// Total convolution units from input to the 1-channel head.
    pub fn depth(&self) -> usize {
        self.n_layers + 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.ndf == 0 || self.in_channels == 0 {
            return bad("ndf and in_channels must be >= 1".into());
        }
        if self.n_layers == 0 {
            return bad("n_layers must be >= 1".into());
        }
        if !(1..=2).contains(&self.num_heads) {
            return bad(format!("num_heads must be 1 or 2, got {}", self.num_heads));
        }
        if self.d_share >= self.depth() {
            return bad(format!(
                "d_share {} must be less than the trunk depth {}",
                self.d_share,
                self.depth()
            ));
        }
        Ok(())
    }

    fn unit_channels(&self, i: usize) -> usize {
        if i == self.depth() - 1 {
            1
        } else {
            self.ndf * (1usize << i.min(3))
        }
    }
}

#[derive(Debug)]
pub struct SharedDiscriminator {
    spec: SharedDiscriminatorSpec,
    trunk: Sequential,
    heads: Vec<Sequential>,
}

impl SharedDiscriminator {
    pub fn build(spec: &SharedDiscriminatorSpec, init: &mut ParamInit) -> Result<Self> {
        spec.validate()?;
        let mut trunk = Sequential::new();
        for i in 0..spec.d_share {
            push_unit(&mut trunk, spec, i, &format!("trunk.{i}"), init)?;
        }
        let heads = (0..spec.num_heads)
            .map(|h| {
                let mut seq = Sequential::new();
                for i in spec.d_share..spec.depth() {
                    push_unit(&mut seq, spec, i, &format!("head{h}.{i}"), init)?;
                }
                Ok(seq)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: spec.clone(),
            trunk,
            heads,
        })
    }

    pub fn spec(&self) -> &SharedDiscriminatorSpec {
        &self.spec
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// Patch score map from one head.
    pub fn forward(&self, x: &Tensor, head: usize, mode: Mode) -> Result<Tensor> {
        let h = self.head(head)?;
        let shared = self.trunk.forward(x, mode, &mut TapSink::none())?;
        h.forward(&shared, mode, &mut TapSink::none())
    }

    /// Score maps from every head, sharing one trunk evaluation.
    pub fn forward_all(&self, x: &Tensor, mode: Mode) -> Result<Vec<Tensor>> {
        let shared = self.trunk.forward(x, mode, &mut TapSink::none())?;
        self.heads
            .iter()
            .map(|h| h.forward(&shared, mode, &mut TapSink::none()))
            .collect()
    }

    fn head(&self, head: usize) -> Result<&Sequential> {
        self.heads.get(head).ok_or_else(|| {
            Error::InvalidSpec(format!("head {head} requested, discriminator has {}", self.heads.len()))
        })
    }

    pub fn trunk_params(&self) -> Vec<(String, Var)> {
        self.trunk.named_params()
    }

    /// Parameters a single head sees: the shared trunk plus its own layers.
    pub fn head_params(&self, head: usize) -> Result<Vec<(String, Var)>> {
        let mut out = self.trunk.named_params();
        out.extend(self.head(head)?.named_params());
        Ok(out)
    }
}

fn push_unit(seq: &mut Sequential, spec: &SharedDiscriminatorSpec, i: usize, name: &str, init: &mut ParamInit) -> Result<()> {
    let last = spec.depth() - 1;
    let cin = if i == 0 { spec.in_channels } else { spec.unit_channels(i - 1) };
    let cout = spec.unit_channels(i);
    let stride = if i < spec.n_layers { 2 } else { 1 };
    let normed = i > 0 && i < last;
    let bias = !normed || spec.norm.conv_bias();
    seq.layer(format!("{name}.conv"), Layer::Conv(init.conv(cin, cout, 4, stride, 1, 1, bias)?));
    if normed {
        seq.layer(format!("{name}.norm"), spec.norm.layer(cout, init)?);
    }
    if i < last {
        seq.layer(format!("{name}.lrelu"), Layer::LeakyRelu(0.2));
    }
    Ok(())
}

impl Net for SharedDiscriminator {
    fn named_params(&self) -> Vec<(String, Var)> {
        let mut out = self.trunk.named_params();
        for h in &self.heads {
            out.extend(h.named_params());
        }
        out
    }

    fn named_buffers(&self) -> Vec<(String, Var)> {
        let mut out = self.trunk.named_buffers();
        for h in &self.heads {
            out.extend(h.named_buffers());
        }
        out
    }

    /// Walks the trunk once, then every head from the trunk output; returns head 0's output shape.
    fn walk_shapes(&self, input: Shape4, visit: &mut dyn FnMut(ShapeEvent<'_>)) -> Result<Shape4> {
        let shared = self.trunk.walk_shapes(input, visit)?;
        let mut first = None;
        for h in &self.heads {
            let out = h.walk_shapes(shared, visit)?;
            first.get_or_insert(out);
        }
        Ok(first.unwrap_or(shared))
    }
}
