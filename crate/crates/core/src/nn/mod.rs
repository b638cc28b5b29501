//! Minimal layer graph on top of candle tensors.
//!
//! Networks are trees of [`Node`]s: plain layers, residual bodies, skip
//! concatenations and named taps. The same tree drives the forward pass,
//! parameter enumeration and static shape inference (used by the profiler).

pub mod depthwise;
pub mod init;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::{Hash, Hasher};

use candle_core::{DType, Tensor, Var};

use crate::{Error, Result};
pub use init::ParamInit;

pub const NORM_EPS: f64 = 1e-5;

/// Batch, channels, height, width.
pub type Shape4 = [usize; 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    /// Frozen convolutions never contribute parameter gradients.
    pub frozen: bool,
}

impl Conv2d {
    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1] * self.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.in_channels() && self.groups == self.out_channels()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = if self.frozen {
            self.weight.as_tensor().detach()
        } else {
            self.weight.as_tensor().clone()
        };
        let y = if self.is_depthwise() {
            depthwise::depthwise_conv2d(x, &w, self.stride, self.padding)?
        } else {
            x.conv2d(&w, self.padding, self.stride, 1, self.groups)?
        };
        let bias = self.bias.as_ref().map(|b| match self.frozen {
            true => b.as_tensor().detach(),
            false => b.as_tensor().clone(),
        });
        add_channel_bias(y, bias.as_ref())
    }

    fn output_shape(&self, s: Shape4) -> std::result::Result<Shape4, String> {
        let [n, c, h, w] = s;
        if c != self.in_channels() {
            return Err(format!("expects {} input channels, got {c}", self.in_channels()));
        }
        let k = self.kernel_size();
        if h + 2 * self.padding < k || w + 2 * self.padding < k {
            return Err(format!("kernel {k} exceeds padded input {h}x{w}"));
        }
        Ok([
            n,
            self.out_channels(),
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        ])
    }
}

/// Transposed convolution; weight layout is (in, out, k, k).
#[derive(Debug)]
pub struct ConvTranspose2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl ConvTranspose2d {
    pub fn in_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(
            self.weight.as_tensor(),
            self.padding,
            self.output_padding,
            self.stride,
            1,
        )?;
        add_channel_bias(y, self.bias.as_ref().map(|b| b.as_tensor()))
    }

    fn output_shape(&self, s: Shape4) -> std::result::Result<Shape4, String> {
        let [n, c, h, w] = s;
        if c != self.in_channels() {
            return Err(format!("expects {} input channels, got {c}", self.in_channels()));
        }
        let k = self.kernel_size();
        let grow = |d: usize| ((d - 1) * self.stride + k + self.output_padding).checked_sub(2 * self.padding);
        match (grow(h), grow(w)) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok([n, self.out_channels(), oh, ow]),
            _ => Err(format!("input {h}x{w} too small for transposed conv")),
        }
    }
}

#[derive(Debug)]
pub struct BatchNorm {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn channels(&self) -> usize {
        self.gamma.dims()[0]
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = self.channels();
        let (mean, var) = match mode {
            Mode::Train => {
                let mean = x.mean_keepdim((0, 2, 3))?;
                let centered = x.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
                let [n, _, h, w] = dims4(x)?;
                let count = (n * h * w) as f64;
                let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let m = self.momentum;
                let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                    + (mean.detach().flatten_all()? * m)?)?;
                let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                    + (var.detach().flatten_all()? * (m * unbiased))?)?;
                self.running_mean.set(&new_mean)?;
                self.running_var.set(&new_var)?;
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            ),
        };
        let normed = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.as_tensor().reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.as_tensor().reshape((1, c, 1, 1))?)?)
    }
}

fn add_channel_bias(y: Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    match bias {
        Some(b) => {
            let c = b.dims()[0];
            Ok(y.broadcast_add(&b.reshape((1, c, 1, 1))?)?)
        }
        None => Ok(y),
    }
}

pub(crate) fn dims4(x: &Tensor) -> Result<Shape4> {
    match x.dims() {
        &[n, c, h, w] => Ok([n, c, h, w]),
        d => Err(Error::Shape(format!("expected a 4-d tensor, got {d:?}"))),
    }
}

/// Instance normalization without affine parameters.
/// Non-overlapping max pooling as a reshape and two reductions. candle's own
/// max-pool backward scales the gradient by the share of maxima in a window,
/// which is 1/k^2 of the correct value when the maximum is unique.
fn max_pool_tiled(x: &Tensor, k: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (ho, wo) = (h / k, w / k);
    let x = x.narrow(2, 0, ho * k)?.narrow(3, 0, wo * k)?;
    Ok(x.reshape((n, c, ho, k, wo, k))?.max(5)?.max(3)?)
}

pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim((2, 3))?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim((2, 3))?;
    Ok(centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?)
}

/// Reflection padding on both spatial axes (edge pixel not repeated).
pub fn reflection_pad2d(x: &Tensor, pad: usize) -> Result<Tensor> {
    if pad == 0 {
        return Ok(x.clone());
    }
    let [_, _, h, w] = dims4(x)?;
    if pad >= h || pad >= w {
        return Err(Error::Shape(format!("reflection pad {pad} needs spatial size > {pad}, got {h}x{w}")));
    }
    let index = |len: usize| -> Result<Tensor> {
        let idx: Vec<u32> = (0..len + 2 * pad)
            .map(|i| {
                let p = i as isize - pad as isize;
                let r = if p < 0 {
                    -p
                } else if p >= len as isize {
                    2 * (len as isize - 1) - p
                } else {
                    p
                };
                r as u32
            })
            .collect();
        Ok(Tensor::from_vec(idx, len + 2 * pad, x.device())?)
    };
    Ok(x.index_select(&index(h)?, 2)?.index_select(&index(w)?, 3)?)
}

#[derive(Debug)]
pub enum Layer {
    Conv(Conv2d),
    ConvTranspose(ConvTranspose2d),
    ReflectionPad(usize),
    InstanceNorm { channels: usize },
    BatchNorm(BatchNorm),
    Relu,
    LeakyRelu(f64),
    Tanh,
    MaxPool { kernel: usize, stride: usize },
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(c) if c.is_depthwise() => "conv2d_depthwise",
            Layer::Conv(c) if c.groups == 1 && c.kernel_size() == 1 => "conv2d_pointwise",
            Layer::Conv(_) => "conv2d",
            Layer::ConvTranspose(_) => "conv_transpose2d",
            Layer::ReflectionPad(_) => "reflection_pad2d",
            Layer::InstanceNorm { .. } => "instance_norm",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::Relu => "relu",
            Layer::LeakyRelu(_) => "leaky_relu",
            Layer::Tanh => "tanh",
            Layer::MaxPool { .. } => "max_pool2d",
        }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match self {
            Layer::Conv(c) => c.forward(x),
            Layer::ConvTranspose(c) => c.forward(x),
            Layer::ReflectionPad(p) => reflection_pad2d(x, *p),
            Layer::InstanceNorm { .. } => instance_norm(x),
            Layer::BatchNorm(bn) => bn.forward(x, mode),
            Layer::Relu => Ok(x.relu()?),
            Layer::LeakyRelu(slope) => Ok(x.maximum(&(x * *slope)?)?),
            Layer::Tanh => Ok(x.tanh()?),
            Layer::MaxPool { kernel, stride } if kernel == stride => max_pool_tiled(x, *kernel),
            Layer::MaxPool { kernel, stride } => {
                Ok(x.max_pool2d_with_stride((*kernel, *kernel), (*stride, *stride))?)
            }
        }
    }

    pub fn output_shape(&self, s: Shape4) -> std::result::Result<Shape4, String> {
        let [n, c, h, w] = s;
        match self {
            Layer::Conv(conv) => conv.output_shape(s),
            Layer::ConvTranspose(conv) => conv.output_shape(s),
            Layer::ReflectionPad(p) => {
                if *p >= h || *p >= w {
                    Err(format!("reflection pad {p} needs spatial size > {p}, got {h}x{w}"))
                } else {
                    Ok([n, c, h + 2 * p, w + 2 * p])
                }
            }
            Layer::InstanceNorm { channels } if *channels != c => {
                Err(format!("expects {channels} channels, got {c}"))
            }
            Layer::BatchNorm(bn) if bn.channels() != c => {
                Err(format!("expects {} channels, got {c}", bn.channels()))
            }
            Layer::MaxPool { kernel, stride } => {
                if h < *kernel || w < *kernel {
                    Err(format!("pool {kernel} exceeds input {h}x{w}"))
                } else {
                    Ok([n, c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
                }
            }
            _ => Ok(s),
        }
    }

    /// Trainable parameters, suffixed `.weight` / `.bias` (`.gamma` / `.beta` for batch norm).
    fn params(&self) -> Vec<(&'static str, &Var)> {
        match self {
            Layer::Conv(Conv2d { weight, bias, .. })
            | Layer::ConvTranspose(ConvTranspose2d { weight, bias, .. }) => {
                let mut v = vec![("weight", weight)];
                if let Some(b) = bias {
                    v.push(("bias", b));
                }
                v
            }
            Layer::BatchNorm(bn) => vec![("gamma", &bn.gamma), ("beta", &bn.beta)],
            _ => vec![],
        }
    }

    fn buffers(&self) -> Vec<(&'static str, &Var)> {
        match self {
            Layer::BatchNorm(bn) => vec![
                ("running_mean", &bn.running_mean),
                ("running_var", &bn.running_var),
            ],
            _ => vec![],
        }
    }

    fn deep_copy(&self) -> Result<Layer> {
        let cp = |v: &Var| -> Result<Var> { Ok(Var::from_tensor(&v.as_tensor().copy()?)?) };
        let cp_opt = |v: &Option<Var>| v.as_ref().map(cp).transpose();
        Ok(match self {
            Layer::Conv(c) => Layer::Conv(Conv2d {
                weight: cp(&c.weight)?,
                bias: cp_opt(&c.bias)?,
                stride: c.stride,
                padding: c.padding,
                groups: c.groups,
                frozen: c.frozen,
            }),
            Layer::ConvTranspose(c) => Layer::ConvTranspose(ConvTranspose2d {
                weight: cp(&c.weight)?,
                bias: cp_opt(&c.bias)?,
                stride: c.stride,
                padding: c.padding,
                output_padding: c.output_padding,
            }),
            Layer::BatchNorm(bn) => Layer::BatchNorm(BatchNorm {
                gamma: cp(&bn.gamma)?,
                beta: cp(&bn.beta)?,
                running_mean: cp(&bn.running_mean)?,
                running_var: cp(&bn.running_var)?,
                momentum: bn.momentum,
            }),
            Layer::ReflectionPad(p) => Layer::ReflectionPad(*p),
            Layer::InstanceNorm { channels } => Layer::InstanceNorm { channels: *channels },
            Layer::Relu => Layer::Relu,
            Layer::LeakyRelu(s) => Layer::LeakyRelu(*s),
            Layer::Tanh => Layer::Tanh,
            Layer::MaxPool { kernel, stride } => Layer::MaxPool {
                kernel: *kernel,
                stride: *stride,
            },
        })
    }
}

#[derive(Debug)]
pub enum Node {
    Layer { name: String, layer: Layer },
    /// `x + body(x)`
    Residual { name: String, body: Sequential },
    /// `cat([x, body(x)], channels)`
    SkipConcat { name: String, body: Sequential },
    /// Records the current activation under a name; identity otherwise.
    Tap(String),
}

/// Collects named intermediate activations during a forward pass.
#[derive(Debug, Default)]
pub struct TapSink {
    wanted: Option<BTreeSet<String>>,
    captured: BTreeMap<String, Tensor>,
}

impl TapSink {
    pub fn none() -> Self {
        Self {
            wanted: Some(BTreeSet::new()),
            captured: BTreeMap::new(),
        }
    }

    pub fn all() -> Self {
        Self::default()
    }

    pub fn only<S: AsRef<str>>(names: &[S]) -> Self {
        Self {
            wanted: Some(names.iter().map(|s| s.as_ref().to_string()).collect()),
            captured: BTreeMap::new(),
        }
    }

    pub(crate) fn offer(&mut self, name: &str, t: &Tensor) {
        if self.wanted.as_ref().is_none_or(|w| w.contains(name)) {
            self.captured.insert(name.to_string(), t.clone());
        }
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.captured
    }
}

pub enum ShapeEvent<'a> {
    Layer {
        name: &'a str,
        layer: &'a Layer,
        input: Shape4,
        output: Shape4,
    },
    Tap {
        name: &'a str,
        shape: Shape4,
    },
}

#[derive(Debug, Default)]
pub struct Sequential {
    pub nodes: Vec<Node>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn layer(&mut self, name: impl Into<String>, layer: Layer) -> &mut Self {
        self.nodes.push(Node::Layer {
            name: name.into(),
            layer,
        });
        self
    }

    pub fn tap(&mut self, name: impl Into<String>) -> &mut Self {
        self.nodes.push(Node::Tap(name.into()));
        self
    }

    pub fn residual(&mut self, name: impl Into<String>, body: Sequential) -> &mut Self {
        self.nodes.push(Node::Residual {
            name: name.into(),
            body,
        });
        self
    }

    pub fn skip_concat(&mut self, name: impl Into<String>, body: Sequential) -> &mut Self {
        self.nodes.push(Node::SkipConcat {
            name: name.into(),
            body,
        });
        self
    }

    pub fn append(&mut self, other: Sequential) -> &mut Self {
        self.nodes.extend(other.nodes);
        self
    }

    pub fn forward(&self, x: &Tensor, mode: Mode, taps: &mut TapSink) -> Result<Tensor> {
        let mut h = x.clone();
        for node in &self.nodes {
            h = match node {
                Node::Layer { layer, .. } => layer.forward(&h, mode)?,
                Node::Residual { body, .. } => (&h + body.forward(&h, mode, taps)?)?,
                Node::SkipConcat { body, .. } => {
                    let inner = body.forward(&h, mode, taps)?;
                    Tensor::cat(&[&h, &inner], 1)?
                }
                Node::Tap(name) => {
                    taps.offer(name, &h);
                    h
                }
            };
        }
        Ok(h)
    }

    /// Visits every layer in forward order.
    pub fn for_each_layer<'a>(&'a self, f: &mut dyn FnMut(&'a str, &'a Layer)) {
        for node in &self.nodes {
            match node {
                Node::Layer { name, layer } => f(name, layer),
                Node::Residual { body, .. } | Node::SkipConcat { body, .. } => body.for_each_layer(f),
                Node::Tap(_) => {}
            }
        }
    }

    pub fn tap_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_taps(&mut out);
        out
    }

    fn collect_taps(&self, out: &mut Vec<String>) {
        for node in &self.nodes {
            match node {
                Node::Tap(name) => out.push(name.clone()),
                Node::Residual { body, .. } | Node::SkipConcat { body, .. } => body.collect_taps(out),
                Node::Layer { .. } => {}
            }
        }
    }

    pub fn named_params(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        self.for_each_layer(&mut |name, layer| {
            for (suffix, v) in layer.params() {
                out.push((format!("{name}.{suffix}"), v.clone()));
            }
        });
        out
    }

    pub fn named_buffers(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        self.for_each_layer(&mut |name, layer| {
            for (suffix, v) in layer.buffers() {
                out.push((format!("{name}.{suffix}"), v.clone()));
            }
        });
        out
    }

    pub fn walk_shapes(&self, input: Shape4, visit: &mut dyn FnMut(ShapeEvent<'_>)) -> Result<Shape4> {
        let mut s = input;
        for node in &self.nodes {
            s = match node {
                Node::Layer { name, layer } => {
                    let out = layer
                        .output_shape(s)
                        .map_err(|e| Error::Shape(format!("layer `{name}` ({}): {e}", layer.kind())))?;
                    visit(ShapeEvent::Layer {
                        name,
                        layer,
                        input: s,
                        output: out,
                    });
                    out
                }
                Node::Residual { name, body } => {
                    let out = body.walk_shapes(s, visit)?;
                    if out != s {
                        return Err(Error::Shape(format!(
                            "residual `{name}` changes shape {s:?} -> {out:?}"
                        )));
                    }
                    s
                }
                Node::SkipConcat { name, body } => {
                    let out = body.walk_shapes(s, visit)?;
                    if out[0] != s[0] || out[2..] != s[2..] {
                        return Err(Error::Shape(format!(
                            "skip `{name}` cannot concatenate {s:?} with {out:?}"
                        )));
                    }
                    [s[0], s[1] + out[1], s[2], s[3]]
                }
                Node::Tap(name) => {
                    visit(ShapeEvent::Tap { name, shape: s });
                    s
                }
            };
        }
        Ok(s)
    }

    /// Stops gradients from reaching any convolution parameter.
    pub fn freeze(&mut self) {
        for node in &mut self.nodes {
            match node {
                Node::Layer {
                    layer: Layer::Conv(c),
                    ..
                } => c.frozen = true,
                Node::Residual { body, .. } | Node::SkipConcat { body, .. } => body.freeze(),
                _ => {}
            }
        }
    }

    pub fn deep_copy(&self) -> Result<Sequential> {
        let nodes = self
            .nodes
            .iter()
            .map(|node| {
                Ok(match node {
                    Node::Layer { name, layer } => Node::Layer {
                        name: name.clone(),
                        layer: layer.deep_copy()?,
                    },
                    Node::Residual { name, body } => Node::Residual {
                        name: name.clone(),
                        body: body.deep_copy()?,
                    },
                    Node::SkipConcat { name, body } => Node::SkipConcat {
                        name: name.clone(),
                        body: body.deep_copy()?,
                    },
                    Node::Tap(name) => Node::Tap(name.clone()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Sequential { nodes })
    }
}

/// Common surface of every built network: parameters, buffers and static shapes.
pub trait Net {
    fn named_params(&self) -> Vec<(String, Var)>;

    fn named_buffers(&self) -> Vec<(String, Var)> {
        Vec::new()
    }

    fn walk_shapes(&self, input: Shape4, visit: &mut dyn FnMut(ShapeEvent<'_>)) -> Result<Shape4>;

    fn vars(&self) -> Vec<Var> {
        self.named_params().into_iter().map(|(_, v)| v).collect()
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Parameters and buffers as plain tensors, keyed by name.
    fn state_tensors(&self) -> Vec<(String, Tensor)> {
        self.named_params()
            .into_iter()
            .chain(self.named_buffers())
            .map(|(n, v)| (n, v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites parameters and buffers from `state`, keys prefixed by `prefix`.
    fn load_state(&self, state: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (name, var) in self.named_params().into_iter().chain(self.named_buffers()) {
            let key = format!("{prefix}{name}");
            let t = state
                .get(&key)
                .ok_or_else(|| Error::Shape(format!("missing tensor `{key}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "tensor `{key}` has shape {:?}, network expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    /// Order-sensitive hash over every parameter and buffer bit pattern.
    fn checksum(&self) -> Result<u64> {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, t) in self.state_tensors() {
            name.hash(&mut h);
            for v in t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                v.to_bits().hash(&mut h);
            }
        }
        Ok(h.finish())
    }
}

impl Net for Sequential {
    fn named_params(&self) -> Vec<(String, Var)> {
        Sequential::named_params(self)
    }

    fn named_buffers(&self) -> Vec<(String, Var)> {
        Sequential::named_buffers(self)
    }

    fn walk_shapes(&self, input: Shape4, visit: &mut dyn FnMut(ShapeEvent<'_>)) -> Result<Shape4> {
        Sequential::walk_shapes(self, input, visit)
    }
}
