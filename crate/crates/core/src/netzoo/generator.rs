use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::nn::{Layer, Mode, Net, ParamInit, Sequential, Shape4, ShapeEvent, TapSink};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorStyle {
    /// Mobile resnet: residual blocks made of depthwise + pointwise convolutions.
    ResnetMobile,
    /// Pix2pix encoder/decoder with skip concatenation.
    Unet,
    /// Full 3x3 resnet generator; the uncompressed reference model.
    Resnet,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Instance norm without affine parameters. Convolutions before it carry a bias.
    #[default]
    Instance,
    /// Affine batch norm. Convolutions before it have no bias.
    Batch,
}

impl NormKind {
    pub(crate) fn conv_bias(self) -> bool {
        self == NormKind::Instance
    }

    pub(crate) fn layer(self, channels: usize, init: &mut ParamInit) -> Result<Layer> {
        Ok(match self {
            NormKind::Instance => Layer::InstanceNorm { channels },
            NormKind::Batch => Layer::BatchNorm(init.batch_norm(channels)?),
        })
    }
}

/// Residual blocks inserted by the deeper teacher derivation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeeperInsertion {
    pub blocks_per_site: usize,
}

fn three() -> usize {
    3
}
fn nine() -> usize {
    9
}
fn eight() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub style: GeneratorStyle,
    pub ngf: usize,
    #[serde(default = "three")]
    pub in_channels: usize,
    #[serde(default = "three")]
    pub out_channels: usize,
    #[serde(default = "nine")]
    pub num_resblocks: usize,
    #[serde(default = "eight")]
    pub unet_depth: usize,
    #[serde(default)]
    pub norm: NormKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deeper: Option<DeeperInsertion>,
}

impl GeneratorSpec {
    pub fn new(style: GeneratorStyle, ngf: usize) -> Self {
        Self {
            style,
            ngf,
            in_channels: 3,
            out_channels: 3,
            num_resblocks: 9,
            unet_depth: 8,
            norm: NormKind::Instance,
            deeper: None,
        }
    }

    pub fn resnet_mobile(ngf: usize) -> Self {
        Self::new(GeneratorStyle::ResnetMobile, ngf)
    }

    pub fn unet(ngf: usize) -> Self {
        Self::new(GeneratorStyle::Unet, ngf)
    }

    pub fn resnet(ngf: usize) -> Self {
        Self::new(GeneratorStyle::Resnet, ngf)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.ngf == 0 {
            return bad("ngf must be >= 1");
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("in_channels and out_channels must be >= 1");
        }
        match self.style {
            GeneratorStyle::ResnetMobile | GeneratorStyle::Resnet if self.num_resblocks == 0 => {
                bad("num_resblocks must be >= 1")
            }
            GeneratorStyle::Unet if self.unet_depth < 2 => bad("unet_depth must be >= 2"),
            GeneratorStyle::Resnet if self.deeper.is_some() => {
                bad("the resnet style has no deeper insertion sites")
            }
            _ if self.deeper.is_some_and(|d| d.blocks_per_site == 0) => {
                bad("blocks_per_site must be >= 1")
            }
            _ => Ok(()),
        }
    }

    /// Product of all stride-2 reductions; input sides must be a multiple of it.
    pub fn downsample_factor(&self) -> usize {
        match self.style {
            GeneratorStyle::ResnetMobile | GeneratorStyle::Resnet => 4,
            GeneratorStyle::Unet => 1 << self.unet_depth,
        }
    }

    /// Outputs of each downsampling stage, the default distillation sites.
    pub fn downsample_taps(&self) -> Vec<String> {
        let n = match self.style {
            GeneratorStyle::ResnetMobile | GeneratorStyle::Resnet => 2,
            GeneratorStyle::Unet => self.unet_depth,
        };
        (1..=n).map(|i| format!("down{i}")).collect()
    }
}

#[derive(Debug)]
pub struct Generator {
    spec: GeneratorSpec,
    body: Sequential,
}

impl Generator {
    pub fn build(spec: &GeneratorSpec, init: &mut ParamInit) -> Result<Self> {
        spec.validate()?;
        let body = match spec.style {
            GeneratorStyle::ResnetMobile | GeneratorStyle::Resnet => build_resnet(spec, init)?,
            GeneratorStyle::Unet => {
                let mut body = Sequential::new();
                body.append(unet_level(spec, 1, init)?);
                body
            }
        };
        Ok(Self {
            spec: spec.clone(),
            body,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn body(&self) -> &Sequential {
        &self.body
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.forward_with_taps(x, mode, &mut TapSink::none())
    }

    pub fn forward_with_taps(&self, x: &Tensor, mode: Mode, taps: &mut TapSink) -> Result<Tensor> {
        self.check_input(x.dims())?;
        self.body.forward(x, mode, taps)
    }

    fn check_input(&self, dims: &[usize]) -> Result<()> {
        let &[_, c, h, w] = dims else {
            return Err(Error::Shape(format!("generator input must be NCHW, got {dims:?}")));
        };
        if c != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "generator expects {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        let f = self.spec.downsample_factor();
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by the downsampling factor {f}"
            )));
        }
        Ok(())
    }

    pub fn tap_names(&self) -> Vec<String> {
        self.body.tap_names()
    }

    /// Tap shapes for an input of the given shape.
    pub fn tap_shapes(&self, input: Shape4) -> Result<Vec<(String, Shape4)>> {
        let mut out = Vec::new();
        self.walk_shapes(input, &mut |ev| {
            if let ShapeEvent::Tap { name, shape } = ev {
                out.push((name.to_string(), shape));
            }
        })?;
        Ok(out)
    }

    /// Independent copy of all parameters and buffers.
    pub fn deep_copy(&self) -> Result<Self> {
        Ok(Self {
            spec: self.spec.clone(),
            body: self.body.deep_copy()?,
        })
    }
}

impl Net for Generator {
    fn named_params(&self) -> Vec<(String, candle_core::Var)> {
        self.body.named_params()
    }

    fn named_buffers(&self) -> Vec<(String, candle_core::Var)> {
        self.body.named_buffers()
    }

    fn walk_shapes(&self, input: Shape4, visit: &mut dyn FnMut(ShapeEvent<'_>)) -> Result<Shape4> {
        self.check_input(&input)?;
        self.body.walk_shapes(input, visit)
    }
}

fn norm_relu(seq: &mut Sequential, prefix: &str, ch: usize, norm: NormKind, init: &mut ParamInit) -> Result<()> {
    seq.layer(format!("{prefix}.norm"), norm.layer(ch, init)?);
    seq.layer(format!("{prefix}.relu"), Layer::Relu);
    Ok(())
}

/// conv3x3 - norm - relu - conv3x3 - norm with an identity skip.
fn plain_block(name: &str, ch: usize, norm: NormKind, reflect: bool, init: &mut ParamInit) -> Result<Sequential> {
    let bias = norm.conv_bias();
    let pad = usize::from(!reflect);
    let mut body = Sequential::new();
    for (i, last) in [(1, false), (2, true)] {
        if reflect {
            body.layer(format!("{name}.pad{i}"), Layer::ReflectionPad(1));
        }
        body.layer(format!("{name}.conv{i}"), Layer::Conv(init.conv(ch, ch, 3, 1, pad, 1, bias)?));
        body.layer(format!("{name}.norm{i}"), norm.layer(ch, init)?);
        if !last {
            body.layer(format!("{name}.relu"), Layer::Relu);
        }
    }
    let mut seq = Sequential::new();
    seq.residual(name, body);
    Ok(seq)
}

/// Two depthwise-separable stages, relu after the first, with an identity skip.
fn mobile_block(name: &str, ch: usize, norm: NormKind, init: &mut ParamInit) -> Result<Sequential> {
    let mut body = Sequential::new();
    for i in 1..=2 {
        body.layer(format!("{name}.pad{i}"), Layer::ReflectionPad(1));
        body.layer(format!("{name}.dw{i}"), Layer::Conv(init.conv(ch, ch, 3, 1, 0, ch, false)?));
        body.layer(format!("{name}.dw{i}_norm"), norm.layer(ch, init)?);
        body.layer(format!("{name}.pw{i}"), Layer::Conv(init.conv(ch, ch, 1, 1, 0, 1, false)?));
        body.layer(format!("{name}.pw{i}_norm"), norm.layer(ch, init)?);
        if i == 1 {
            body.layer(format!("{name}.relu"), Layer::Relu);
        }
    }
    let mut seq = Sequential::new();
    seq.residual(name, body);
    Ok(seq)
}

/// Deeper-teacher insertion after a resnet resampling stage: one extra conv plus residual blocks.
fn resnet_stage_insert(seq: &mut Sequential, stage: &str, ch: usize, spec: &GeneratorSpec, init: &mut ParamInit) -> Result<()> {
    let Some(d) = spec.deeper else { return Ok(()) };
    let bias = spec.norm.conv_bias();
    seq.layer(format!("{stage}.extra.conv"), Layer::Conv(init.conv(ch, ch, 3, 1, 1, 1, bias)?));
    norm_relu(seq, &format!("{stage}.extra"), ch, spec.norm, init)?;
    for k in 1..=d.blocks_per_site {
        seq.append(plain_block(&format!("{stage}.res{k}"), ch, spec.norm, false, init)?);
    }
    Ok(())
}

fn build_resnet(spec: &GeneratorSpec, init: &mut ParamInit) -> Result<Sequential> {
    let ngf = spec.ngf;
    let bias = spec.norm.conv_bias();
    let mut seq = Sequential::new();

    seq.layer("stem.pad", Layer::ReflectionPad(3));
    seq.layer("stem.conv", Layer::Conv(init.conv(spec.in_channels, ngf, 7, 1, 0, 1, bias)?));
    norm_relu(&mut seq, "stem", ngf, spec.norm, init)?;
    seq.tap("stem");

    let mut ch = ngf;
    for i in 1..=2 {
        let stage = format!("down{i}");
        seq.layer(format!("{stage}.conv"), Layer::Conv(init.conv(ch, ch * 2, 3, 2, 1, 1, bias)?));
        ch *= 2;
        norm_relu(&mut seq, &stage, ch, spec.norm, init)?;
        resnet_stage_insert(&mut seq, &stage, ch, spec, init)?;
        seq.tap(stage);
    }

    let mid = spec.num_resblocks / 2;
    for b in 1..=spec.num_resblocks {
        let name = format!("block{b}");
        let block = match spec.style {
            GeneratorStyle::Resnet => plain_block(&name, ch, spec.norm, true, init)?,
            _ => mobile_block(&name, ch, spec.norm, init)?,
        };
        seq.append(block);
        seq.tap(&name);
        if b == mid {
            if let Some(d) = spec.deeper {
                for k in 1..=2 * d.blocks_per_site {
                    seq.append(plain_block(&format!("mid.res{k}"), ch, spec.norm, false, init)?);
                }
            }
        }
    }

    for i in 1..=2 {
        let stage = format!("up{i}");
        seq.layer(
            format!("{stage}.conv"),
            Layer::ConvTranspose(init.conv_transpose(ch, ch / 2, 3, 2, 1, 1, bias)?),
        );
        ch /= 2;
        norm_relu(&mut seq, &stage, ch, spec.norm, init)?;
        resnet_stage_insert(&mut seq, &stage, ch, spec, init)?;
        seq.tap(stage);
    }

    seq.layer("head.pad", Layer::ReflectionPad(3));
    seq.layer("head.conv", Layer::Conv(init.conv(ngf, spec.out_channels, 7, 1, 0, 1, true)?));
    seq.layer("head.tanh", Layer::Tanh);
    Ok(seq)
}

fn unet_channels(spec: &GeneratorSpec, level: usize) -> usize {
    spec.ngf * (1usize << (level - 1).min(3))
}

/// Builds level `level` of the encoder/decoder: down conv, inner levels (as a
/// skip concatenation), up conv. Level 1 is the outermost.
fn unet_level(spec: &GeneratorSpec, level: usize, init: &mut ParamInit) -> Result<Sequential> {
    let depth = spec.unet_depth;
    let bias = spec.norm.conv_bias();
    let inner = unet_channels(spec, level);
    let outer_in = if level == 1 { spec.in_channels } else { unet_channels(spec, level - 1) };
    let outer_out = if level == 1 { spec.out_channels } else { outer_in };
    let down = format!("down{level}");
    let up = format!("up{level}");
    let mut seq = Sequential::new();

    if level > 1 {
        seq.layer(format!("{down}.lrelu"), Layer::LeakyRelu(0.2));
    }
    seq.layer(format!("{down}.conv"), Layer::Conv(init.conv(outer_in, inner, 4, 2, 1, 1, bias)?));
    if level > 1 && level < depth {
        seq.layer(format!("{down}.norm"), spec.norm.layer(inner, init)?);
    }
    if let Some(d) = spec.deeper {
        for k in 1..=d.blocks_per_site {
            seq.append(plain_block(&format!("{down}.res{k}"), inner, spec.norm, false, init)?);
        }
    }
    seq.tap(&down);

    let up_in = if level < depth {
        seq.skip_concat(format!("skip{}", level + 1), unet_level(spec, level + 1, init)?);
        inner * 2
    } else {
        inner
    };

    seq.layer(format!("{up}.relu"), Layer::Relu);
    let up_bias = level == 1 || bias;
    seq.layer(
        format!("{up}.conv"),
        Layer::ConvTranspose(init.conv_transpose(up_in, outer_out, 4, 2, 1, 0, up_bias)?),
    );
    if level == 1 {
        seq.layer(format!("{up}.tanh"), Layer::Tanh);
    } else {
        seq.layer(format!("{up}.norm"), spec.norm.layer(outer_out, init)?);
        if let Some(d) = spec.deeper {
            for k in 1..=d.blocks_per_site {
                seq.append(plain_block(&format!("{up}.res{k}"), outer_out, spec.norm, false, init)?);
            }
        }
    }
    seq.tap(up);
    Ok(seq)
}
