//! Python bindings: training config, model checkpoints, the synthetic
//! generator, the full pipeline and the evaluation metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use rankuda::checkpoint::{load_checkpoint, save_checkpoint};
use rankuda::dataset::{Manifest, OutputLock};
use rankuda::encoder::{EncoderConfig, ModelState};
use rankuda::image::{Image, PnmLoader};
use rankuda::metrics::{evaluate as eval_metrics, krcc as krcc_, plcc as plcc_, srcc as srcc_, LogisticForm};
use rankuda::naturalness::{dnv_histogram, mscn_map};
use rankuda::synth::{generate, write_synthetic, Distortion, SyntheticSpec};
use rankuda::trainer::{predict_images, run_pipeline, tournament_scores, PipelineData, TrainConfig};
use rankuda::Error;

fn py_err(e: Error) -> PyErr {
    let msg = format!("[{}] {e}", e.code());
    match e.code() {
        "io" | "locked" => PyIOError::new_err(msg),
        "config" | "parse" | "invalid_input" | "shape_mismatch" | "non_finite" | "constraint" => {
            PyValueError::new_err(msg)
        }
        _ => PyRuntimeError::new_err(msg),
    }
}

trait PyResultExt<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> PyResultExt<T> for rankuda::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Flat `key = value` training configuration.
#[pyclass(name = "TrainConfig", from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (text = None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let inner = match text {
            Some(t) => TrainConfig::parse(t).py()?,
            None => TrainConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: TrainConfig::load(&path).py()?,
        })
    }

    #[staticmethod]
    fn keys() -> Vec<&'static str> {
        TrainConfig::KEYS.to_vec()
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.set(key, value).py()?;
        next.validate().py()?;
        self.inner = next;
        Ok(())
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .render()
            .lines()
            .filter_map(|l| l.split_once('='))
            .find(|(k, _)| k.trim() == key)
            .map(|(_, v)| v.trim().to_string())
            .ok_or_else(|| PyValueError::new_err(format!("unknown config key {key:?}")))
    }

    fn render(&self) -> String {
        self.inner.render()
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig(seed={}, scale_factor={})", self.inner.seed, self.inner.scale_factor)
    }
}

fn to_image(nested: Vec<Vec<Vec<f64>>>) -> PyResult<Image> {
    let c = nested.len();
    let h = nested.first().map_or(0, Vec::len);
    let w = nested.first().and_then(|p| p.first()).map_or(0, Vec::len);
    let mut data = Vec::with_capacity(c * h * w);
    for plane in &nested {
        if plane.len() != h || plane.iter().any(|r| r.len() != w) {
            return Err(PyValueError::new_err("image planes must all be h x w"));
        }
        data.extend(plane.iter().flatten());
    }
    Image::new(c, h, w, data).py()
}

/// Encoder, heads and centers.
#[pyclass(name = "Model")]
struct PyModel {
    inner: ModelState,
}

#[pymethods]
impl PyModel {
    /// Freshly initialized model.
    #[new]
    #[pyo3(signature = (input_size = 32, scale_factor = 0.25, seed = 0))]
    fn new(input_size: usize, scale_factor: f64, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: ModelState::init(EncoderConfig::scaled(input_size, scale_factor), seed).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.inner).py()
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.feature_dim()
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.inner.config().input_size
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.params().keys().cloned().collect()
    }

    /// Target-head scores for images given as `[channel][row][col]` lists in [0, 1].
    fn predict(&self, images: Vec<Vec<Vec<Vec<f64>>>>) -> PyResult<Vec<f64>> {
        let images = images.into_iter().map(to_image).collect::<PyResult<Vec<_>>>()?;
        predict_images(&self.inner, &images).py()
    }

    /// Scores for every image of an `image_id,score` manifest, as `(id, score)`.
    fn predict_manifest(&self, manifest: PathBuf) -> PyResult<Vec<(String, f64)>> {
        let m = Manifest::read(&manifest).py()?;
        let scores = predict_images(&self.inner, &m.load_images(&PnmLoader).py()?).py()?;
        Ok(m.ids().into_iter().zip(scores).collect())
    }
}

/// Write the synthetic two-domain dataset to `out`.
#[pyfunction]
#[pyo3(signature = (out, images = 64, size = 32, levels = 8, seed = 0, pseudo_noise = 0.15, panel_fraction = 0.7, distortions = "noise,blur,contrast"))]
#[allow(clippy::too_many_arguments)]
fn synthesize(
    out: PathBuf,
    images: usize,
    size: usize,
    levels: usize,
    seed: u64,
    pseudo_noise: f64,
    panel_fraction: f64,
    distortions: &str,
) -> PyResult<()> {
    let spec = SyntheticSpec {
        images_per_domain: images,
        size,
        levels,
        distortions: distortions
            .split(',')
            .map(str::parse)
            .collect::<rankuda::Result<Vec<Distortion>>>()
            .py()?,
        pseudo_noise,
        panel_fraction,
        seed,
    };
    let _lock = OutputLock::acquire(&out).py()?;
    write_synthetic(&generate(&spec).py()?, &out).py()
}

/// Run the pipeline on manifests; returns the final `(id, score)` predictions.
/// With `out`, stage outputs are written there and an interrupted run resumes.
#[pyfunction]
#[pyo3(signature = (source, target, pseudo, config = None, out = None))]
fn train(
    py: Python<'_>,
    source: PathBuf,
    target: PathBuf,
    pseudo: PathBuf,
    config: Option<PyTrainConfig>,
    out: Option<PathBuf>,
) -> PyResult<Vec<(String, f64)>> {
    let cfg = config.map(|c| c.inner).unwrap_or_default();
    let data = PipelineData::from_manifests(&source, &target, &pseudo).py()?;
    let result = py.detach(|| {
        let _lock = out.as_deref().map(OutputLock::acquire).transpose()?;
        run_pipeline(&data, &cfg, out.as_deref())
    });
    let result = result.py()?;
    Ok(data.target_ids.into_iter().zip(result.predictions).collect())
}

#[pyfunction]
fn srcc(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    srcc_(&pred, &truth).py()
}

#[pyfunction]
fn krcc(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    krcc_(&pred, &truth).py()
}

#[pyfunction]
fn plcc(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    plcc_(&pred, &truth).py()
}

/// SRCC/KRCC plus PLCC/MAE/RMSE after the five-parameter logistic mapping.
#[pyfunction]
#[pyo3(signature = (pred, truth, logistic = "exponential"))]
fn evaluate(pred: Vec<f64>, truth: Vec<f64>, logistic: &str) -> PyResult<Vec<(String, f64)>> {
    let form = match logistic {
        "exponential" => LogisticForm::Exponential,
        "sigmoid" => LogisticForm::Sigmoid,
        other => return Err(PyValueError::new_err(format!("unknown logistic form {other:?}"))),
    };
    let r = eval_metrics(&pred, &truth, form).py()?;
    Ok(vec![
        ("srcc".into(), r.srcc),
        ("krcc".into(), r.krcc),
        ("plcc".into(), r.plcc),
        ("mae".into(), r.mae),
        ("rmse".into(), r.rmse),
    ])
}

/// Tournament scores from a square matrix of `P(row beats column)`.
#[pyfunction]
fn tournament(probs: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let n = probs.len();
    if probs.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("probability matrix must be square"));
    }
    tournament_scores(n, |i, j| Ok(probs[i][j]), None).py()
}

/// Mean, variance, skewness and kurtosis of the pooled MSCN histogram of a
/// manifest's images; `None` when every coefficient is identical.
#[pyfunction]
fn naturalness_moments(manifest: PathBuf) -> PyResult<Option<(f64, f64, f64, f64)>> {
    let m = Manifest::read(&manifest).py()?;
    let maps = m
        .load_images(&PnmLoader)
        .py()?
        .iter()
        .map(|i| mscn_map(&i.to_gray()))
        .collect::<rankuda::Result<Vec<_>>>()
        .py()?;
    Ok(dnv_histogram(&maps)
        .py()?
        .moments()
        .ok()
        .map(|mo| (mo.mean, mo.variance, mo.skewness, mo.kurtosis)))
}

#[pymodule]
fn pyrankuda(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(srcc, m)?)?;
    m.add_function(wrap_pyfunction!(krcc, m)?)?;
    m.add_function(wrap_pyfunction!(plcc, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(tournament, m)?)?;
    m.add_function(wrap_pyfunction!(naturalness_moments, m)?)?;
    Ok(())
}
