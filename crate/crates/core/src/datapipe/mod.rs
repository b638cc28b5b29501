//! Paired / unpaired image datasets, epoch planning and synthetic data.

mod synth;

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::{imageops::FilterType, RgbImage};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use synth::{edge_map, synth_dataset, SynthKind};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    Paired,
    Unpaired,
}

/// Images in [-1, 1], NCHW. Paired: `y[i]` is the target of `x[i]`.
/// Unpaired: `x` from domain A and `y` from domain B, independently drawn.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub mode: PairMode,
    pub x: Tensor,
    pub y: Tensor,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.x.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// One image per sample holding A (left half) and B (right half).
    #[serde(rename = "aligned_AB")]
    AlignedAb,
    /// `{split}A/` and `{split}B/` folders of unrelated images.
    SplitFolders,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Per-sample augmentation drawn from the epoch RNG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augment {
    pub flip: bool,
    /// Random square crop size; `None` keeps the full image.
    pub crop: Option<usize>,
}

impl Augment {
    pub const NONE: Augment = Augment { flip: false, crop: None };
}

#[derive(Debug, Clone)]
pub struct Dataset {
    mode: PairMode,
    a: Vec<RgbImage>,
    b: Vec<RgbImage>,
    paths: Vec<PathBuf>,
}

/// Which images make up one sample and how they are augmented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemPlan {
    pub a: usize,
    pub b: usize,
    pub flip: bool,
    pub crop_at: (u32, u32),
}

impl Dataset {
    pub fn paired(pairs: Vec<(RgbImage, RgbImage)>) -> Result<Self> {
        let (a, b): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        Self::new(PairMode::Paired, a, b, Vec::new())
    }

    pub fn unpaired(a: Vec<RgbImage>, b: Vec<RgbImage>) -> Result<Self> {
        Self::new(PairMode::Unpaired, a, b, Vec::new())
    }

    fn new(mode: PairMode, a: Vec<RgbImage>, b: Vec<RgbImage>, paths: Vec<PathBuf>) -> Result<Self> {
        if a.is_empty() || b.is_empty() {
            return Err(Error::Dataset("empty split".into()));
        }
        if mode == PairMode::Paired && a.len() != b.len() {
            return Err(Error::Dataset(format!("{} sources vs {} targets", a.len(), b.len())));
        }
        let dims = a[0].dimensions();
        if let Some(img) = a.iter().chain(&b).find(|i| i.dimensions() != dims) {
            return Err(Error::Dataset(format!(
                "mixed image sizes {:?} and {:?}; set a load size to resize",
                dims,
                img.dimensions()
            )));
        }
        Ok(Self { mode, a, b, paths })
    }

    pub fn mode(&self) -> PairMode {
        self.mode
    }

    /// Image side lengths (width, height).
    pub fn dimensions(&self) -> (u32, u32) {
        self.a[0].dimensions()
    }

    pub fn source_images(&self) -> &[RgbImage] {
        &self.a
    }

    pub fn target_images(&self) -> &[RgbImage] {
        &self.b
    }

    /// Files the dataset was read from.
    pub fn paths(&self) -> &[PathBuf] {
        &self.paths
    }

    /// Samples per epoch: the pair count, or `max(|A|, |B|)` unpaired.
    pub fn epoch_len(&self) -> usize {
        self.a.len().max(self.b.len())
    }

    pub fn batches_per_epoch(&self, batch_size: usize) -> usize {
        self.epoch_len().div_ceil(batch_size)
    }

    /// Deterministic sample order for `epoch`: a seeded shuffle of A (wrapping
    /// when B is larger), and a uniformly drawn B partner in unpaired mode.
    pub fn epoch_plan(&self, seed: u64, epoch: u64, aug: Augment) -> Vec<ItemPlan> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..self.a.len()).collect();
        order.shuffle(&mut rng);
        let (w, h) = self.dimensions();
        (0..self.epoch_len())
            .map(|k| {
                let a = order[k % order.len()];
                let b = match self.mode {
                    PairMode::Paired => a,
                    PairMode::Unpaired => rng.random_range(0..self.b.len()),
                };
                let flip = aug.flip && rng.random_bool(0.5);
                let crop_at = match aug.crop {
                    Some(c) if (c as u32) < w || (c as u32) < h => (
                        rng.random_range(0..=w.saturating_sub(c as u32)),
                        rng.random_range(0..=h.saturating_sub(c as u32)),
                    ),
                    _ => (0, 0),
                };
                ItemPlan { a, b, flip, crop_at }
            })
            .collect()
    }

    /// Materializes a batch from planned items.
    pub fn batch(&self, items: &[ItemPlan], aug: Augment, dtype: DType, device: &Device) -> Result<SampleBatch> {
        if items.is_empty() {
            return Err(Error::Dataset("empty batch".into()));
        }
        if let Some(c) = aug.crop {
            let (w, h) = self.dimensions();
            if c as u32 > w || c as u32 > h {
                return Err(Error::Dataset(format!("crop {c} larger than images {w}x{h}")));
            }
        }
        let prep = |img: &RgbImage, it: &ItemPlan| to_chw(img, it, aug.crop);
        let x: Vec<Vec<f32>> = items.iter().map(|it| prep(&self.a[it.a], it)).collect();
        let y: Vec<Vec<f32>> = items.iter().map(|it| prep(&self.b[it.b], it)).collect();
        let (w, h) = match aug.crop {
            Some(c) => (c, c),
            None => {
                let (w, h) = self.dimensions();
                (w as usize, h as usize)
            }
        };
        let stack = |v: Vec<Vec<f32>>| -> Result<Tensor> {
            let n = v.len();
            Ok(Tensor::from_vec(v.concat(), (n, 3, h, w), device)?.to_dtype(dtype)?)
        };
        Ok(SampleBatch {
            mode: self.mode,
            x: stack(x)?,
            y: stack(y)?,
        })
    }

    /// All target images (B side) as one unaugmented tensor.
    pub fn all_targets(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        self.stack_side(&self.b, dtype, device)
    }

    pub fn all_sources(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        self.stack_side(&self.a, dtype, device)
    }

    fn stack_side(&self, imgs: &[RgbImage], dtype: DType, device: &Device) -> Result<Tensor> {
        let (w, h) = self.dimensions();
        let plan = ItemPlan {
            a: 0,
            b: 0,
            flip: false,
            crop_at: (0, 0),
        };
        let data: Vec<f32> = imgs.iter().flat_map(|i| to_chw(i, &plan, None)).collect();
        Ok(Tensor::from_vec(data, (imgs.len(), 3, h as usize, w as usize), device)?.to_dtype(dtype)?)
    }
}

/// u8 RGB -> CHW floats in [-1, 1], with crop and horizontal flip.
fn to_chw(img: &RgbImage, it: &ItemPlan, crop: Option<usize>) -> Vec<f32> {
    let (w, h) = img.dimensions();
    let (cw, ch) = crop.map_or((w, h), |c| (c as u32, c as u32));
    let (x0, y0) = if crop.is_some() { it.crop_at } else { (0, 0) };
    let mut out = vec![0f32; 3 * (cw * ch) as usize];
    for y in 0..ch {
        for x in 0..cw {
            let sx = if it.flip { x0 + cw - 1 - x } else { x0 + x };
            let p = img.get_pixel(sx, y0 + y);
            for c in 0..3 {
                out[(c as u32 * cw * ch + y * cw + x) as usize] = p[c] as f32 / 127.5 - 1.0;
            }
        }
    }
    out
}

/// CHW floats in [-1, 1] -> u8 RGB.
pub fn to_image(t: &Tensor) -> Result<RgbImage> {
    let &[3, h, w] = t.dims() else {
        return Err(Error::Shape(format!("expected (3, H, W), got {:?}", t.dims())));
    };
    let v: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let plane = h * w;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let q = |c: usize| ((v[c * plane + i].clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
        image::Rgb([q(0), q(1), q(2)])
    }))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadOptions {
    /// Resize every image (each half, for aligned data) to this square side.
    pub load_size: Option<u32>,
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("missing split directory {}", dir.display())));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!("empty split {}", dir.display())));
    }
    Ok(files)
}

fn decode(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|e| Error::Dataset(format!("cannot decode {}: {e}", path.display())))
}

fn resize(img: RgbImage, opts: &LoadOptions) -> RgbImage {
    match opts.load_size {
        Some(s) if img.dimensions() != (s, s) => image::imageops::resize(&img, s, s, FilterType::Triangle),
        _ => img,
    }
}

pub fn load_dataset(root: &Path, layout: Layout, split: Split, opts: &LoadOptions) -> Result<Dataset> {
    match layout {
        Layout::AlignedAb => {
            let files = list_images(&root.join(split.dir_name()))?;
            let mut a = Vec::with_capacity(files.len());
            let mut b = Vec::with_capacity(files.len());
            for f in &files {
                let img = decode(f)?;
                let (w, h) = img.dimensions();
                if w < 2 || w % 2 != 0 {
                    return Err(Error::Dataset(format!("{}: width {w} cannot split into A|B", f.display())));
                }
                let half = w / 2;
                a.push(resize(image::imageops::crop_imm(&img, 0, 0, half, h).to_image(), opts));
                b.push(resize(image::imageops::crop_imm(&img, half, 0, half, h).to_image(), opts));
            }
            Dataset::new(PairMode::Paired, a, b, files)
        }
        Layout::SplitFolders => {
            let fa = list_images(&root.join(format!("{}A", split.dir_name())))?;
            let fb = list_images(&root.join(format!("{}B", split.dir_name())))?;
            let a = fa.iter().map(|f| decode(f).map(|i| resize(i, opts))).collect::<Result<Vec<_>>>()?;
            let b = fb.iter().map(|f| decode(f).map(|i| resize(i, opts))).collect::<Result<Vec<_>>>()?;
            Dataset::new(PairMode::Unpaired, a, b, fa.into_iter().chain(fb).collect())
        }
    }
}

/// Writes a dataset in the given layout (used for fixtures and exports).
pub fn save_dataset(ds: &Dataset, root: &Path, layout: Layout, split: Split) -> Result<()> {
    match layout {
        Layout::AlignedAb => {
            if ds.mode != PairMode::Paired {
                return Err(Error::Dataset("aligned layout needs paired data".into()));
            }
            let dir = root.join(split.dir_name());
            std::fs::create_dir_all(&dir)?;
            for (i, (a, b)) in ds.a.iter().zip(&ds.b).enumerate() {
                let (w, h) = a.dimensions();
                let mut out = RgbImage::new(2 * w, h);
                image::imageops::replace(&mut out, a, 0, 0);
                image::imageops::replace(&mut out, b, w as i64, 0);
                out.save(dir.join(format!("{i:05}.png")))?;
            }
        }
        Layout::SplitFolders => {
            for (side, imgs) in [("A", &ds.a), ("B", &ds.b)] {
                let dir = root.join(format!("{}{side}", split.dir_name()));
                std::fs::create_dir_all(&dir)?;
                for (i, img) in imgs.iter().enumerate() {
                    img.save(dir.join(format!("{i:05}.png")))?;
                }
            }
        }
    }
    Ok(())
}
