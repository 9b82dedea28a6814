//! Initial seeds: a global-average-pooling classifier trained on image
//! labels, its class activation maps, a saliency proxy for background, and
//! thresholding into sparse masks. Also ground-truth substitution and
//! relabeling from a trained segmentation model.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::SynthImage;
use crate::error::{CianError, Result};
use crate::mask::{ImageLabelSet, SeedMask, IGNORE};
use crate::model::{predict, Classifier, Encoder, ModelParams, DEFAULT_WIDTHS};
use crate::optim::Sgd;
use crate::tensor::{Real, Tensor};

pub const FG_THRESH: f64 = 0.3;
pub const BG_THRESH: f64 = 0.06;
const TIE_TOLERANCE: f32 = 1e-6;

/// Encoder plus a per-class 1×1 kernel (no background output).
#[derive(Clone, Debug, PartialEq)]
pub struct CamModel<T> {
    pub encoder: Encoder<T>,
    pub classifier: Classifier<T>,
}

impl<T: Real> CamModel<T> {
    pub fn init(widths: &[usize], classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::init(widths, &mut rng)?;
        let classifier = Classifier::init(
            encoder.out_dim(),
            classes,
            (1.0 / encoder.out_dim() as f64).sqrt(),
            &mut rng,
        )?;
        Ok(CamModel {
            encoder,
            classifier,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_outputs()
    }

    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = self
            .encoder
            .layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect();
        out.extend([&self.classifier.weight, &self.classifier.bias]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = self
            .encoder
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect();
        out.extend([&mut self.classifier.weight, &mut self.classifier.bias]);
        out
    }

    fn zeros_like(&self) -> Self {
        CamModel {
            encoder: self.encoder.zeros_like(),
            classifier: self.classifier.zeros_like(),
        }
    }

    /// Image-level logits: the classifier applied to the pooled features.
    pub fn image_logits(&self, image: &Tensor<T>) -> Result<Vec<T>> {
        let x = self.encoder.forward(image)?;
        let (h, w, d) = x.dims3()?;
        let inv = T::one() / T::lit((h * w) as f64);
        let mut pooled = vec![T::zero(); d];
        for px in x.data().chunks(d) {
            for (p, &v) in pooled.iter_mut().zip(px) {
                *p += v;
            }
        }
        let pooled = Tensor::new(&[1, 1, d], pooled.into_iter().map(|v| v * inv).collect())?;
        Ok(self.classifier.forward(&pooled)?.into_data())
    }

    /// Multi-label sigmoid loss of one image and its parameter gradients.
    pub fn loss_and_grad(
        &self,
        image: &Tensor<T>,
        labels: &ImageLabelSet,
    ) -> Result<(T, CamModel<T>)> {
        let (x, cache) = self.encoder.forward_cached(image)?;
        let (h, w, d) = x.dims3()?;
        let c = self.num_classes();
        let n = T::lit((h * w) as f64);
        let mut pooled = vec![T::zero(); d];
        for px in x.data().chunks(d) {
            for (p, &v) in pooled.iter_mut().zip(px) {
                *p += v;
            }
        }
        let pooled = Tensor::new(&[1, 1, d], pooled.into_iter().map(|v| v / n).collect())?;
        let logits = self.classifier.forward(&pooled)?;
        let mut loss = T::zero();
        let mut grad_logit = vec![T::zero(); c];
        for (k, (&z, g)) in logits.data().iter().zip(&mut grad_logit).enumerate() {
            let y = if labels.contains(k as u8 + 1) {
                T::one()
            } else {
                T::zero()
            };
            // numerically stable binary cross-entropy with logits
            loss += z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln();
            let sig = T::one() / (T::one() + (-z).exp());
            *g = (sig - y) / T::lit(c as f64);
        }
        loss = loss / T::lit(c as f64);
        if !loss.is_finite() {
            return Err(CianError::NonFinite("CAM classifier loss".into()));
        }
        let mut grads = self.zeros_like();
        let g_logits = Tensor::new(&[1, 1, c], grad_logit)?;
        let g_pooled = self
            .classifier
            .backward(&pooled, &g_logits, &mut grads.classifier)?;
        let per_pixel: Vec<T> = g_pooled.data().iter().map(|&v| v / n).collect();
        let mut g_x = Tensor::zeros(x.shape());
        for px in g_x.data_mut().chunks_mut(d) {
            px.copy_from_slice(&per_pixel);
        }
        self.encoder.backward(&cache, &g_x, &mut grads.encoder)?;
        Ok((loss, grads))
    }
}

/// Settings for the CAM classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct CamConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub seed: u64,
    pub widths: Vec<usize>,
}

impl Default for CamConfig {
    fn default() -> Self {
        CamConfig {
            epochs: 15,
            lr: 0.03,
            momentum: 0.9,
            batch: 8,
            seed: 0,
            widths: DEFAULT_WIDTHS.to_vec(),
        }
    }
}

/// Train the pooled classifier with a multi-label sigmoid loss. Zero epochs
/// returns the initialization.
pub fn train_cam_classifier(
    images: &[SynthImage],
    classes: usize,
    config: &CamConfig,
) -> Result<CamModel<f32>> {
    if let Some(img) = images.iter().find(|i| i.labels.is_empty()) {
        return Err(CianError::invalid(format!(
            "image {} has no foreground label",
            img.id
        )));
    }
    if config.batch == 0 {
        return Err(CianError::invalid("batch must be positive"));
    }
    let mut model = CamModel::<f32>::init(&config.widths, classes, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut opt = Sgd::new(config.momentum, model.tensors());
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch) {
            let mut total = model.zeros_like();
            let mut loss = 0.0;
            for &i in chunk {
                let (l, g) = model.loss_and_grad(&images[i].pixels, &images[i].labels)?;
                loss += l;
                for (t, gt) in total.tensors_mut().into_iter().zip(g.tensors()) {
                    t.add_scaled(gt, 1.0)?;
                }
            }
            let scale = 1.0 / chunk.len() as f32;
            for t in total.tensors_mut() {
                *t = t.scale(scale);
            }
            if !loss.is_finite() {
                return Err(CianError::NonFinite(format!(
                    "CAM classifier loss in epoch {epoch}"
                )));
            }
            let grads = total.tensors();
            opt.step(model.tensors_mut(), grads, config.lr)?;
        }
    }
    Ok(model)
}

/// Fraction of images whose thresholded sigmoid outputs match the label set
/// exactly.
pub fn multilabel_accuracy(model: &CamModel<f32>, images: &[SynthImage]) -> Result<f64> {
    let mut hits = 0;
    for img in images {
        let logits = model.image_logits(&img.pixels)?;
        let predicted = ImageLabelSet::new(
            (0..logits.len())
                .filter(|&k| logits[k] > 0.0)
                .map(|k| k as u8 + 1),
        );
        hits += usize::from(predicted == img.labels);
    }
    Ok(hits as f64 / images.len().max(1) as f64)
}

/// Per-class score maps normalized into `[0, 1]` over the image.
#[derive(Clone, Debug, PartialEq)]
pub struct CamMap {
    /// `H×W×C`
    pub scores: Tensor<f32>,
}

impl CamMap {
    /// Min-max normalize each channel; constant channels become zero.
    pub fn from_raw(raw: &Tensor<f32>) -> Result<Self> {
        let (_, _, c) = raw.dims3()?;
        let mut scores = raw.clone();
        for k in 0..c {
            let (lo, hi) = raw
                .data()
                .iter()
                .skip(k)
                .step_by(c)
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
            for v in scores.data_mut().iter_mut().skip(k).step_by(c) {
                *v = if hi > lo { (*v - lo) / (hi - lo) } else { 0.0 };
            }
        }
        Ok(CamMap { scores })
    }

    pub fn class_map(&self, class: u8) -> Result<Tensor<f32>> {
        let (h, w, c) = self.scores.dims3()?;
        let k = (class as usize)
            .checked_sub(1)
            .filter(|&k| k < c)
            .ok_or_else(|| CianError::invalid(format!("no CAM channel for class {class}")))?;
        Ok(Tensor::from_fn(&[h, w], |i| self.scores.data()[i * c + k]))
    }
}

/// Nearest-neighbour resize of an `h×w×c` map.
pub fn upsample_nearest(map: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    let (h, w, c) = map.dims3()?;
    if (h, w) == (height, width) {
        return Ok(map.clone());
    }
    let mut out = Vec::with_capacity(height * width * c);
    for y in 0..height {
        let sy = y * h / height;
        for x in 0..width {
            let sx = x * w / width;
            out.extend_from_slice(&map.data()[(sy * w + sx) * c..(sy * w + sx + 1) * c]);
        }
    }
    Tensor::new(&[height, width, c], out)
}

/// The classifier kernel applied at every feature position, normalized per
/// class and resized to the image.
pub fn extract_cam(model: &CamModel<f32>, image: &Tensor<f32>) -> Result<CamMap> {
    let (h, w, _) = image.dims3()?;
    let x = model.encoder.forward(image)?;
    let raw = model.classifier.forward(&x)?.map(|v| v.max(0.0));
    CamMap::from_raw(&upsample_nearest(&raw, h, w)?)
}

/// Median of the border pixels of every image, per channel.
pub fn background_reference(images: &[&Tensor<f32>]) -> Result<[f32; 3]> {
    let mut channels: [Vec<f32>; 3] = Default::default();
    for img in images {
        let (h, w, c) = img.dims3()?;
        if c != 3 {
            return Err(CianError::invalid(format!(
                "expected RGB image, got {c} channels"
            )));
        }
        for y in 0..h {
            for x in 0..w {
                if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                    for (k, ch) in channels.iter_mut().enumerate() {
                        ch.push(img.data()[(y * w + x) * 3 + k]);
                    }
                }
            }
        }
    }
    if channels[0].is_empty() {
        return Err(CianError::invalid("no images for the background reference"));
    }
    Ok(channels.map(|mut ch| {
        ch.sort_by(f32::total_cmp);
        ch[ch.len() / 2]
    }))
}

/// Distance of every pixel from the reference color, min-max scaled to
/// `[0, 1]` (constant images give zeros).
pub fn saliency_map(image: &Tensor<f32>, reference: [f32; 3]) -> Result<Tensor<f32>> {
    let (h, w, c) = image.dims3()?;
    if c != 3 {
        return Err(CianError::invalid(format!(
            "expected RGB image, got {c} channels"
        )));
    }
    let dist: Vec<f32> = image
        .data()
        .chunks(3)
        .map(|px| {
            px.iter()
                .zip(reference)
                .map(|(&v, r)| (v - r) * (v - r))
                .sum::<f32>()
                .sqrt()
        })
        .collect();
    let raw = Tensor::new(&[h, w, 1], dist)?;
    let scaled = CamMap::from_raw(&raw)?.scores;
    scaled.reshape(&[h, w])
}

fn check_threshold(name: &str, t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(CianError::invalid(format!(
            "{name} must lie in [0, 1], got {t}"
        )))
    }
}

/// Threshold a CAM into a seed mask. A pixel takes class `c` when `c` is a
/// labeled class whose score exceeds `fg_thresh` and no other labeled
/// class comes within the tie tolerance of it; it is background when no
/// labeled class exceeds `fg_thresh` and saliency is below `bg_thresh`;
/// everything else is IGNORE.
pub fn cam_to_seeds(
    cam: &CamMap,
    saliency: &Tensor<f32>,
    labels: &ImageLabelSet,
    fg_thresh: f64,
    bg_thresh: f64,
) -> Result<SeedMask> {
    check_threshold("fg_thresh", fg_thresh)?;
    check_threshold("bg_thresh", bg_thresh)?;
    let (h, w, c) = cam.scores.dims3()?;
    if saliency.shape() != [h, w] {
        return Err(CianError::shape("cam_to_seeds", saliency.shape(), &[h, w]));
    }
    if let Some(bad) = labels.iter().find(|&l| l as usize > c) {
        return Err(CianError::InvalidLabel {
            label: bad,
            num_classes: c + 1,
        });
    }
    let (fg, bg) = (fg_thresh as f32, bg_thresh as f32);
    let out = cam
        .scores
        .data()
        .chunks(c)
        .zip(saliency.data())
        .map(|(scores, &sal)| {
            let mut best: Option<(u8, f32)> = None;
            for l in labels.iter() {
                let s = scores[l as usize - 1];
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((l, s));
                }
            }
            match best {
                Some((l, s)) if s > fg => {
                    // the tie test looks at every labeled class, so raising
                    // the threshold can never resolve a conflict
                    let tied = labels
                        .iter()
                        .any(|o| o != l && s - scores[o as usize - 1] <= TIE_TOLERANCE);
                    if tied {
                        IGNORE
                    } else {
                        l
                    }
                }
                _ if sal < bg => 0,
                _ => IGNORE,
            }
        })
        .collect();
    SeedMask::new(h, w, out)
}

/// Seeds and saliency maps for a dataset.
pub fn generate_seeds(
    model: &CamModel<f32>,
    images: &[SynthImage],
    reference: [f32; 3],
    fg_thresh: f64,
    bg_thresh: f64,
) -> Result<Vec<(SeedMask, Tensor<f32>)>> {
    images
        .iter()
        .map(|img| {
            let cam = extract_cam(model, &img.pixels)?;
            let sal = saliency_map(&img.pixels, reference)?;
            Ok((
                cam_to_seeds(&cam, &sal, &img.labels, fg_thresh, bg_thresh)?,
                sal,
            ))
        })
        .collect()
}

/// Pixel precision (correct among labeled seed pixels) and recall (correct
/// among all pixels) against dense ground truth.
pub fn seed_quality(seeds: &[SeedMask], truth: &[SeedMask]) -> Result<(f64, f64)> {
    if seeds.len() != truth.len() {
        return Err(CianError::invalid(format!(
            "{} seed masks for {} images",
            seeds.len(),
            truth.len()
        )));
    }
    let (mut correct, mut labeled, mut total) = (0usize, 0usize, 0usize);
    for (s, t) in seeds.iter().zip(truth) {
        if s.len() != t.len() {
            return Err(CianError::shape(
                "seed_quality",
                &[s.height(), s.width()],
                &[t.height(), t.width()],
            ));
        }
        for (&a, &b) in s.labels().iter().zip(t.labels()) {
            total += 1;
            if a != IGNORE {
                labeled += 1;
                correct += usize::from(a == b);
            }
        }
    }
    Ok((
        correct as f64 / labeled.max(1) as f64,
        correct as f64 / total.max(1) as f64,
    ))
}

/// Replace `floor(ratio·n)` uniformly chosen seed masks with ground truth.
pub fn substitute_seeds(
    seeds: &[SeedMask],
    truth: &[SeedMask],
    ratio: f64,
    seed: u64,
) -> Result<Vec<SeedMask>> {
    if seeds.len() != truth.len() {
        return Err(CianError::invalid(format!(
            "{} seed masks for {} ground-truth masks",
            seeds.len(),
            truth.len()
        )));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(CianError::invalid(format!(
            "substitution ratio must lie in [0, 1], got {ratio}"
        )));
    }
    let n = seeds.len();
    let count = substitution_count(ratio, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = seeds.to_vec();
    for i in index::sample(&mut rng, n, count) {
        out[i] = truth[i].clone();
    }
    Ok(out)
}

/// `floor(ratio·n)`, robust to the ratio's binary representation.
pub fn substitution_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64) + 1e-9).floor() as usize
}

/// Dense predictions of a trained model as the next round's seeds.
pub fn relabel_for_retraining<T: Real>(
    params: &ModelParams<T>,
    images: &[SynthImage],
) -> Result<Vec<SeedMask>> {
    images
        .iter()
        .map(|img| predict(params, &img.pixels.cast()))
        .collect()
}
