use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::nn::{Layer, Mode, Net, Node, ParamInit, Sequential, Shape4, ShapeEvent, TapSink};
use crate::{Error, Result};

/// Frozen network producing named activations for perceptual losses.
/// Inputs are images in [-1, 1]; any renormalization happens inside.
pub trait FeatureExtractor {
    fn extract(&self, x: &Tensor, taps: &[String]) -> Result<BTreeMap<String, Tensor>>;
    fn feature_taps(&self) -> Vec<String>;
    fn style_taps(&self) -> Vec<String>;
}

/// Block widths of torchvision's VGG16.
pub const VGG16_WIDTHS: [usize; 4] = [64, 128, 256, 512];

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// VGG16 `features` up to relu4_3, with torchvision layer indices as names
/// (`features.0.weight` ...). Smaller widths give a cheap VGG-shaped extractor.
#[derive(Debug)]
pub struct Vgg {
    body: Sequential,
    widths: [usize; 4],
    feature_taps: Vec<String>,
    style_taps: Vec<String>,
}

impl Vgg {
    /// He-initialized weights. Only meaningful for smoke runs; real training
    /// loads pretrained weights with [`Vgg::load`].
    pub fn random(widths: [usize; 4], init: &mut ParamInit) -> Result<Self> {
        let blocks = [2usize, 2, 3, 3];
        let mut body = Sequential::new();
        let mut idx = 0;
        let mut cin = 3;
        for (b, (&reps, &width)) in blocks.iter().zip(&widths).enumerate() {
            if b > 0 {
                body.layer(format!("features.{idx}"), Layer::MaxPool { kernel: 2, stride: 2 });
                idx += 1;
            }
            for r in 0..reps {
                let std = (2.0 / (9 * cin) as f64).sqrt();
                let mut conv = init.conv(cin, width, 3, 1, 1, 1, true)?;
                conv.weight = init.normal(conv.weight.dims(), 0.0, std)?;
                body.layer(format!("features.{idx}"), Layer::Conv(conv));
                body.layer(format!("features.{}", idx + 1), Layer::Relu);
                idx += 2;
                cin = width;
                if r + 1 == reps {
                    body.tap(format!("relu{}_{}", b + 1, reps));
                }
            }
        }
        body.freeze();
        Ok(Self {
            body,
            widths,
            feature_taps: vec!["relu3_3".into()],
            style_taps: ["relu1_2", "relu2_2", "relu3_3", "relu4_3"].map(String::from).to_vec(),
        })
    }

    /// Loads torchvision VGG16 weights (`features.{i}.weight|bias`) from a safetensors file.
    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let tensors = candle_core::safetensors::load(path, device)
            .map_err(|e| Error::checkpoint(path, format!("cannot read extractor weights: {e}")))?;
        let mut init = ParamInit::new(0, dtype, device);
        let vgg = Self::random(VGG16_WIDTHS, &mut init)?;
        let state: HashMap<String, Tensor> = tensors.into_iter().collect();
        vgg.body.load_state(&state, "")?;
        Ok(vgg)
    }

    pub fn widths(&self) -> [usize; 4] {
        self.widths
    }

    pub fn with_taps(mut self, feature_taps: Vec<String>, style_taps: Vec<String>) -> Result<Self> {
        let known = self.body.tap_names();
        for t in feature_taps.iter().chain(&style_taps) {
            if !known.contains(t) {
                return Err(Error::MissingTap(t.clone()));
            }
        }
        self.feature_taps = feature_taps;
        self.style_taps = style_taps;
        Ok(self)
    }

    fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        let dev = x.device();
        let mean = Tensor::new(&IMAGENET_MEAN, dev)?.to_dtype(x.dtype())?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&IMAGENET_STD, dev)?.to_dtype(x.dtype())?.reshape((1, 3, 1, 1))?;
        let unit = ((x + 1.0)? * 0.5)?;
        Ok(unit.broadcast_sub(&mean)?.broadcast_div(&std)?)
    }
}

impl FeatureExtractor for Vgg {
    fn extract(&self, x: &Tensor, taps: &[String]) -> Result<BTreeMap<String, Tensor>> {
        let known = self.body.tap_names();
        if let Some(missing) = taps.iter().find(|t| !known.contains(t)) {
            return Err(Error::MissingTap(missing.clone()));
        }
        if x.dims().get(1) != Some(&3) {
            return Err(Error::Shape(format!("extractor expects 3-channel images, got {:?}", x.dims())));
        }
        let mut sink = TapSink::only(taps);
        // run only as deep as the deepest requested tap
        let deepest = taps.iter().filter_map(|t| known.iter().position(|k| k == t)).max();
        let Some(deepest) = deepest else {
            return Ok(BTreeMap::new());
        };
        let mut h = self.normalize(x)?;
        let mut seen = 0;
        for node in &self.body.nodes {
            match node {
                Node::Layer { layer, .. } => h = layer.forward(&h, Mode::Eval)?,
                Node::Tap(name) => {
                    sink.offer(name, &h);
                    if seen == deepest {
                        break;
                    }
                    seen += 1;
                }
                _ => unreachable!("vgg has no nested nodes"),
            }
        }
        Ok(sink.into_map())
    }

    fn feature_taps(&self) -> Vec<String> {
        self.feature_taps.clone()
    }

    fn style_taps(&self) -> Vec<String> {
        self.style_taps.clone()
    }
}

impl Net for Vgg {
    fn named_params(&self) -> Vec<(String, candle_core::Var)> {
        self.body.named_params()
    }

    fn walk_shapes(&self, input: Shape4, visit: &mut dyn FnMut(ShapeEvent<'_>)) -> Result<Shape4> {
        self.body.walk_shapes(input, visit)
    }
}
