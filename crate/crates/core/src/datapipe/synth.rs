use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// y: a filled random polygon on white; x: its one-pixel outline.
    EdgeFill,
    /// x: smooth grayscale field; y: the same field through a fixed colormap.
    Colormap,
}

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);

pub fn synth_dataset(kind: SynthKind, count: usize, size: u32, seed: u64) -> Result<Dataset> {
    if count == 0 || size < 16 {
        return Err(Error::Dataset(format!(
            "synthetic data needs count >= 1 and size >= 16, got {count} and {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = (0..count)
        .map(|_| match kind {
            SynthKind::EdgeFill => {
                let y = filled_polygon(&mut rng, size);
                (edge_map(&y), y)
            }
            SynthKind::Colormap => colormap_pair(&mut rng, size),
        })
        .collect();
    Dataset::paired(pairs)
}

fn filled_polygon(rng: &mut ChaCha8Rng, size: u32) -> RgbImage {
    let s = size as f64;
    let n = rng.random_range(3..=7);
    let (cx, cy) = (rng.random_range(0.35..0.65) * s, rng.random_range(0.35..0.65) * s);
    let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    angles.sort_by(f64::total_cmp);
    let verts: Vec<(f64, f64)> = angles
        .iter()
        .map(|a| {
            let r = rng.random_range(0.15..0.4) * s;
            (cx + r * a.cos(), cy + r * a.sin())
        })
        .collect();
    // fill colours stay well away from white so the mask is recoverable from y
    let fill = Rgb([rng.random_range(0..200), rng.random_range(0..200), rng.random_range(0..200)]);
    RgbImage::from_fn(size, size, |x, y| {
        if inside(&verts, x as f64 + 0.5, y as f64 + 0.5) {
            fill
        } else {
            WHITE
        }
    })
}

/// Even-odd ray casting.
fn inside(verts: &[(f64, f64)], px: f64, py: f64) -> bool {
    let mut c = false;
    let mut j = verts.len() - 1;
    for i in 0..verts.len() {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            c = !c;
        }
        j = i;
    }
    c
}

/// Black outline of the non-white region: shape pixels with a 4-neighbour
/// outside the shape (the image border counts as outside).
pub fn edge_map(y: &RgbImage) -> RgbImage {
    let (w, h) = y.dimensions();
    let shape = |x: i64, yy: i64| {
        x >= 0 && yy >= 0 && x < w as i64 && yy < h as i64 && *y.get_pixel(x as u32, yy as u32) != WHITE
    };
    RgbImage::from_fn(w, h, |x, yy| {
        let (x, yy) = (x as i64, yy as i64);
        let edge = shape(x, yy)
            && [(1, 0), (-1, 0), (0, 1), (0, -1)]
                .iter()
                .any(|(dx, dy)| !shape(x + dx, yy + dy));
        if edge {
            BLACK
        } else {
            WHITE
        }
    })
}

fn colormap_pair(rng: &mut ChaCha8Rng, size: u32) -> (RgbImage, RgbImage) {
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..3.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let s = size as f64;
    let field = |x: u32, y: u32| {
        let (u, v) = (x as f64 / s, y as f64 / s);
        let sum: f64 = waves
            .iter()
            .map(|(f, th, ph)| (std::f64::consts::TAU * f * (u * th.cos() + v * th.sin()) + ph).sin())
            .sum();
        (sum / 6.0 + 0.5).clamp(0.0, 1.0)
    };
    let x = RgbImage::from_fn(size, size, |px, py| {
        let g = (field(px, py) * 255.0).round() as u8;
        Rgb([g, g, g])
    });
    let y = RgbImage::from_fn(size, size, |px, py| {
        let t = x.get_pixel(px, py)[0] as f64 / 255.0;
        let ch = |c: f64| ((0.5 + 0.5 * (std::f64::consts::TAU * (t + c)).cos()) * 255.0).round() as u8;
        Rgb([ch(0.0), ch(0.33), ch(0.67)])
    });
    (x, y)
}
