//! Deterministic synthetic shape-segmentation data.
//!
//! Each class has its own shape family and a saturated rim color, while the
//! object interiors share one blotchy texture with only a faint class tint.
//! A classifier trained on image labels therefore keys on the rims and
//! leaves the interiors cold.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CianError, Result};
use crate::formats::{read_mask, read_ppm, write_mask, write_ppm};
use crate::mask::{ImageLabelSet, SeedMask};
use crate::tensor::Tensor;

/// Mean background gray of the family.
pub const BACKGROUND_GRAY: f32 = 0.5;
const BACKGROUND_JITTER: f32 = 0.01;
const BACKGROUND_NOISE: f32 = 0.006;
const RIM_WIDTH: f32 = 2.5;
const TINT: f32 = 0.05;
pub const MANIFEST: &str = "manifest.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = CianError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(CianError::invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub id: String,
    /// `H×W×3`, every value a multiple of 1/255.
    pub pixels: Tensor<f32>,
    /// Dense ground truth, evaluation only.
    pub gt: SeedMask,
    pub labels: ImageLabelSet,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Disc,
    Square,
    Triangle,
    Diamond,
    Cross,
}

const SHAPES: [Shape; 5] = [
    Shape::Disc,
    Shape::Square,
    Shape::Triangle,
    Shape::Diamond,
    Shape::Cross,
];

impl Shape {
    /// Signed distance-like value: negative inside, roughly in pixels.
    fn depth(self, dx: f32, dy: f32, r: f32) -> f32 {
        match self {
            Shape::Disc => (dx * dx + dy * dy).sqrt() - r,
            Shape::Square => dx.abs().max(dy.abs()) - 0.85 * r,
            Shape::Diamond => (dx.abs() + dy.abs()) / std::f32::consts::SQRT_2 - 0.8 * r,
            Shape::Triangle => {
                // upward triangle with circumradius 1.3r
                let r = 1.3 * r;
                let s3 = 3f32.sqrt();
                let e1 = (-dy) - r / 2.0;
                let e2 = (s3 * dx + dy) / 2.0 - r / 2.0;
                let e3 = (-s3 * dx + dy) / 2.0 - r / 2.0;
                e1.max(e2).max(e3)
            }
            Shape::Cross => {
                let arm = 0.6 * r;
                let h = (dx.abs() - r).max(dy.abs() - arm);
                let v = (dx.abs() - arm).max(dy.abs() - r);
                h.min(v)
            }
        }
    }
}

fn hue_rgb(h: f32) -> [f32; 3] {
    let f = |n: f32| {
        let k = (n + h * 6.0) % 6.0;
        1.0 - (k.min(4.0 - k).clamp(0.0, 1.0))
    };
    [f(5.0), f(3.0), f(1.0)]
}

/// Saturated rim color of class `c` (1-based).
fn rim_color(c: u8, classes: usize) -> [f32; 3] {
    let h = (c - 1) as f32 / classes as f32;
    hue_rgb(h).map(|v| 0.1 + 0.8 * v)
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

struct Placed {
    class: u8,
    shape: Shape,
    cx: f32,
    cy: f32,
    r: f32,
    rim: [f32; 3],
    tint: [f32; 3],
}

fn draw(size: usize, classes: usize, rng: &mut ChaCha8Rng) -> (Vec<f32>, Vec<u8>) {
    let s = size as f32;
    let n_shapes = rng.random_range(1..=3usize);
    let mut placed: Vec<Placed> = Vec::new();
    for _ in 0..n_shapes {
        let class = rng.random_range(1..=classes as u8);
        let shape = SHAPES[(class as usize - 1) % SHAPES.len()];
        let r = s * rng.random_range(0.13..0.21f32);
        for _ in 0..50 {
            let cx = rng.random_range(r + 2.0..s - r - 2.0);
            let cy = rng.random_range(r + 2.0..s - r - 2.0);
            if placed
                .iter()
                .all(|p| ((p.cx - cx).powi(2) + (p.cy - cy).powi(2)).sqrt() > p.r + r + 3.0)
            {
                let base = rim_color(class, classes);
                let rim = base.map(|v| v + rng.random_range(-0.05..0.05f32));
                let tint = hue_rgb((class - 1) as f32 / classes as f32).map(|v| TINT * (v - 0.5));
                placed.push(Placed {
                    class,
                    shape,
                    cx,
                    cy,
                    r,
                    rim,
                    tint,
                });
                break;
            }
        }
    }

    let bg_shift = rng.random_range(-BACKGROUND_JITTER..BACKGROUND_JITTER);
    let bg_hue: [f32; 3] =
        std::array::from_fn(|_| rng.random_range(-0.3..0.3f32) * BACKGROUND_JITTER);
    // interior texture: a few random blobs blending two shared colors
    let blobs: Vec<(f32, f32, f32)> = (0..12)
        .map(|_| {
            (
                rng.random_range(0.0..s),
                rng.random_range(0.0..s),
                rng.random_range(2.0..5.0f32),
            )
        })
        .collect();
    let tex_a = [0.85, 0.75, 0.35];
    let tex_b = [0.55, 0.35, 0.7];

    let mut pixels = vec![0f32; size * size * 3];
    let mut gt = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let mut color: [f32; 3] = std::array::from_fn(|k| {
                BACKGROUND_GRAY
                    + bg_shift
                    + bg_hue[k]
                    + rng.random_range(-1.0..1.0f32) * BACKGROUND_NOISE
            });
            for p in &placed {
                let d = p.shape.depth(fx - p.cx, fy - p.cy, p.r);
                if d >= 0.0 {
                    continue;
                }
                gt[y * size + x] = p.class;
                color = if -d <= RIM_WIDTH {
                    p.rim
                } else {
                    let w = blobs
                        .iter()
                        .map(|&(bx, by, br)| {
                            (-((fx - bx).powi(2) + (fy - by).powi(2)) / (2.0 * br * br)).exp()
                        })
                        .sum::<f32>()
                        .min(1.0);
                    std::array::from_fn(|k| {
                        tex_a[k] * (1.0 - w)
                            + tex_b[k] * w
                            + p.tint[k]
                            + rng.random_range(-0.03..0.03f32)
                    })
                };
            }
            for k in 0..3 {
                pixels[(y * size + x) * 3 + k] = quantize(color[k]);
            }
        }
    }
    (pixels, gt)
}

fn meets_invariants(gt: &[u8], classes: usize) -> bool {
    let n = gt.len();
    let mut counts = vec![0usize; classes + 1];
    for &g in gt {
        counts[g as usize] += 1;
    }
    counts[0] * 5 >= n && counts[1..].iter().all(|&c| c == 0 || c * 100 >= n)
}

/// Generate one image deterministically from `(seed, split, index)`.
pub fn generate_image(
    index: usize,
    size: usize,
    classes: usize,
    seed: u64,
    split: Split,
) -> Result<SynthImage> {
    if !(2..=254).contains(&classes) {
        return Err(CianError::invalid(format!(
            "need 2..=254 classes, got {classes}"
        )));
    }
    if size < 32 {
        return Err(CianError::invalid(format!(
            "image size must be at least 32, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split.stream() << 40) | index as u64);
    loop {
        let (pixels, gt) = draw(size, classes, &mut rng);
        if !meets_invariants(&gt, classes) {
            continue;
        }
        let gt = SeedMask::new(size, size, gt)?;
        return Ok(SynthImage {
            id: format!("{split}_{index:04}"),
            labels: gt.foreground_classes(),
            pixels: Tensor::new(&[size, size, 3], pixels)?,
            gt,
        });
    }
}

/// `n_images` images of `size×size` with `classes` foreground classes. The
/// two splits draw from disjoint random streams.
pub fn generate_dataset(
    n_images: usize,
    size: usize,
    classes: usize,
    seed: u64,
    split: Split,
) -> Result<Vec<SynthImage>> {
    (0..n_images)
        .map(|i| generate_image(i, size, classes, seed, split))
        .collect()
}

/// Write `<id>.ppm`, `<id>_gt.pgm` and the manifest into `dir`.
pub fn write_dataset(dir: &Path, images: &[SynthImage]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for img in images {
        write_ppm(&dir.join(format!("{}.ppm", img.id)), &img.pixels)?;
        write_mask(&dir.join(format!("{}_gt.pgm", img.id)), &img.gt)?;
        manifest.push_str(&format!("{}\t{}\n", img.id, img.labels));
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Parse manifest lines `<id><TAB><labels>`.
pub fn parse_manifest(text: &str) -> Result<Vec<(String, ImageLabelSet)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let (id, labels) = line
                .split_once('\t')
                .ok_or_else(|| CianError::format("manifest", format!("missing tab in {line:?}")))?;
            Ok((id.to_string(), ImageLabelSet::parse(labels)?))
        })
        .collect()
}

/// Read a directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Vec<SynthImage>> {
    let entries = parse_manifest(&fs::read_to_string(dir.join(MANIFEST))?)?;
    entries
        .into_iter()
        .map(|(id, labels)| {
            let pixels = read_ppm(&dir.join(format!("{id}.ppm")))?;
            let gt = read_mask(&dir.join(format!("{id}_gt.pgm")))?;
            if gt.foreground_classes() != labels {
                return Err(CianError::format(
                    "manifest",
                    format!("labels of {id} disagree with its mask"),
                ));
            }
            Ok(SynthImage {
                id,
                pixels,
                gt,
                labels,
            })
        })
        .collect()
}

/// Image labels of a dataset, in order.
pub fn label_index(images: &[SynthImage]) -> Vec<ImageLabelSet> {
    images.iter().map(|i| i.labels.clone()).collect()
}
