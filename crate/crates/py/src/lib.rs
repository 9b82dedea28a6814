//! Python module `cian`: synthetic data, models, pairing, losses and the
//! ablation pipeline.

use std::path::PathBuf;

use cian_core::dataset::{generate_dataset as gen, Split, SynthImage};
use cian_core::evaluation::evaluate as eval_masks;
use cian_core::losses::{online_pseudo_label, seeded_ce as ce};
use cian_core::model::{predict, self_logits, ModelParams, DEFAULT_WIDTHS};
use cian_core::pairing::{sample_pairs as sample, PairMode};
use cian_core::train::{
    load_checkpoint, run_ablation as ablation, save_checkpoint, PipelineConfig,
};
use cian_core::{CianError, ImageLabelSet, SeedMask, Tensor};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn err(e: CianError) -> PyErr {
    match e {
        CianError::Io(_) | CianError::NonFinite(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

pub fn mask_from_rows(rows: Vec<Vec<u32>>) -> Result<SeedMask, CianError> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(CianError::InvalidArgument(
            "mask rows differ in length".into(),
        ));
    }
    let labels = rows
        .into_iter()
        .flatten()
        .map(|v| {
            u8::try_from(v)
                .map_err(|_| CianError::InvalidArgument(format!("mask value {v} exceeds 255")))
        })
        .collect::<Result<Vec<u8>, _>>()?;
    SeedMask::new(h, w, labels)
}

/// Rows of plain integers; `Vec<u8>` would reach Python as `bytes`.
pub fn mask_to_rows(mask: &SeedMask) -> Vec<Vec<u32>> {
    mask.labels()
        .chunks(mask.width().max(1))
        .map(|r| r.iter().map(|&v| u32::from(v)).collect())
        .collect()
}

/// `H×W×K` nested lists to a tensor.
pub fn tensor_from_nested(v: Vec<Vec<Vec<f64>>>) -> Result<Tensor<f64>, CianError> {
    let h = v.len();
    let w = v.first().map_or(0, Vec::len);
    let k = v.first().and_then(|r| r.first()).map_or(0, Vec::len);
    if v.iter()
        .any(|r| r.len() != w || r.iter().any(|p| p.len() != k))
    {
        return Err(CianError::InvalidArgument("ragged nested list".into()));
    }
    Tensor::new(&[h, w, k], v.into_iter().flatten().flatten().collect())
}

pub fn tensor_to_nested<T: cian_core::Real>(
    t: &Tensor<T>,
) -> Result<Vec<Vec<Vec<f64>>>, CianError> {
    let (h, w, k) = t.dims3()?;
    let data = t.data();
    Ok((0..h)
        .map(|y| {
            (0..w)
                .map(|x| {
                    let at = (y * w + x) * k;
                    data[at..at + k].iter().map(|v| v.as_f64()).collect()
                })
                .collect()
        })
        .collect())
}

/// One synthetic image with its ground truth.
#[pyclass(name = "Image", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyImage {
    inner: SynthImage,
}

#[pymethods]
impl PyImage {
    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    /// Foreground classes present.
    #[getter]
    fn labels(&self) -> Vec<u32> {
        self.inner.labels.iter().map(u32::from).collect()
    }

    /// `H×W×3` values in `[0, 1]`.
    fn pixels(&self) -> PyResult<Vec<Vec<Vec<f64>>>> {
        tensor_to_nested(&self.inner.pixels).map_err(err)
    }

    fn ground_truth(&self) -> Vec<Vec<u32>> {
        mask_to_rows(&self.inner.gt)
    }

    fn __repr__(&self) -> String {
        format!(
            "Image(id={:?}, labels={})",
            self.inner.id, self.inner.labels
        )
    }
}

#[pyfunction]
#[pyo3(signature = (n, size = 64, classes = 3, seed = 0, split = "train"))]
fn generate_dataset(
    n: usize,
    size: usize,
    classes: usize,
    seed: u64,
    split: &str,
) -> PyResult<Vec<PyImage>> {
    let split: Split = split.parse().map_err(err)?;
    Ok(gen(n, size, classes, seed, split)
        .map_err(err)?
        .into_iter()
        .map(|inner| PyImage { inner })
        .collect())
}

/// Segmentation network: encoder, affinity module and classifier.
#[pyclass(name = "Model")]
pub struct PyModel {
    params: ModelParams<f32>,
}

fn image_tensor(image: &Bound<'_, PyAny>) -> PyResult<Tensor<f32>> {
    if let Ok(img) = image.extract::<PyImage>() {
        return Ok(img.inner.pixels);
    }
    let nested: Vec<Vec<Vec<f64>>> = image.extract()?;
    Ok(tensor_from_nested(nested).map_err(err)?.cast())
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (classes = 3, seed = 0))]
    fn new(classes: usize, seed: u64) -> PyResult<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(&DEFAULT_WIDTHS, classes, &mut rng).map_err(err)?;
        Ok(PyModel { params })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            params: load_checkpoint(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.params).map_err(err)
    }

    #[getter]
    fn classes(&self) -> usize {
        self.params.num_classes()
    }

    /// Self-affinity logits, `H×W×(C+1)`.
    fn logits(&self, image: &Bound<'_, PyAny>) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let logits = self_logits(&self.params, &image_tensor(image)?).map_err(err)?;
        tensor_to_nested(&logits).map_err(err)
    }

    /// Dense argmax labels.
    fn predict(&self, image: &Bound<'_, PyAny>) -> PyResult<Vec<Vec<u32>>> {
        let mask = predict(&self.params, &image_tensor(image)?).map_err(err)?;
        Ok(mask_to_rows(&mask))
    }
}

/// Per-class IoU (None where undefined) and their mean.
#[pyfunction]
fn miou(
    truth: Vec<Vec<Vec<u32>>>,
    predictions: Vec<Vec<Vec<u32>>>,
    classes: usize,
) -> PyResult<(Vec<Option<f64>>, f64)> {
    let to_masks = |v: Vec<Vec<Vec<u32>>>| {
        v.into_iter()
            .map(mask_from_rows)
            .collect::<Result<Vec<_>, _>>()
    };
    let cm = eval_masks(
        classes + 1,
        &to_masks(truth).map_err(err)?,
        &to_masks(predictions).map_err(err)?,
    )
    .map_err(err)?;
    Ok(cm.miou())
}

/// Reference ids for each query in `batch`.
#[pyfunction]
#[pyo3(signature = (labels, batch, mode = "common", refs = 1, seed = 0))]
fn sample_pairs(
    labels: Vec<Vec<u8>>,
    batch: Vec<usize>,
    mode: &str,
    refs: usize,
    seed: u64,
) -> PyResult<Vec<Vec<usize>>> {
    let index: Vec<ImageLabelSet> = labels.into_iter().map(ImageLabelSet::new).collect();
    let mode: PairMode = mode.parse().map_err(err)?;
    let pairs = sample(&index, &batch, mode, refs, seed).map_err(err)?;
    Ok(pairs.reference_ids)
}

/// Mean cross-entropy over non-IGNORE pixels and its gradient.
#[pyfunction]
fn seeded_ce(
    logits: Vec<Vec<Vec<f64>>>,
    seeds: Vec<Vec<u32>>,
) -> PyResult<(f64, Vec<Vec<Vec<f64>>>)> {
    let logits = tensor_from_nested(logits).map_err(err)?;
    let (loss, grad) = ce(&logits, &mask_from_rows(seeds).map_err(err)?).map_err(err)?;
    Ok((loss, tensor_to_nested(&grad).map_err(err)?))
}

/// Argmax labels kept where the class is background or in `labels`.
#[pyfunction]
fn pseudo_label(logits: Vec<Vec<Vec<f64>>>, labels: Vec<u8>) -> PyResult<Vec<Vec<u32>>> {
    let logits = tensor_from_nested(logits).map_err(err)?;
    let mask = online_pseudo_label(&logits, &ImageLabelSet::new(labels)).map_err(err)?;
    Ok(mask_to_rows(&mask))
}

/// Run all four training configurations and return the report CSV.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (n_train = 200, n_val = 50, image_size = 64, classes = 3, epochs = None, crop = None, seed = 0))]
fn run_ablation(
    py: Python<'_>,
    n_train: usize,
    n_val: usize,
    image_size: usize,
    classes: usize,
    epochs: Option<usize>,
    crop: Option<usize>,
    seed: u64,
) -> PyResult<String> {
    let mut cfg = PipelineConfig {
        n_train,
        n_val,
        image_size,
        classes,
        ..PipelineConfig::default()
    };
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    cfg.train.crop = crop.unwrap_or(cfg.train.crop).min(image_size);
    cfg.train.seed = seed;
    cfg.cam.seed = seed;
    let report = py.detach(|| ablation(&cfg)).map_err(err)?;
    Ok(report.to_csv())
}

#[pymodule]
pub fn cian(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("IGNORE", cian_core::IGNORE)?;
    m.add_class::<PyImage>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(miou, m)?)?;
    m.add_function(wrap_pyfunction!(sample_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(seeded_ce, m)?)?;
    m.add_function(wrap_pyfunction!(pseudo_label, m)?)?;
    m.add_function(wrap_pyfunction!(run_ablation, m)?)?;
    Ok(())
}
