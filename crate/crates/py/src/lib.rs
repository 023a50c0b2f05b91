//! Python bindings. Arrays cross the boundary as nested lists; structured
//! results come back as dictionaries.

use std::path::PathBuf;

use mani_core::checkpoint::{load_checkpoint, save_checkpoint};
use mani_core::config::{resolve, KeyValues};
use mani_core::data::{load_dataset, Domain, Image, InstanceMap, Mask, Role, Sample, Split};
use mani_core::metrics::{evaluate, predict_masks};
use mani_core::model::ModelBundle;
use mani_core::trainer::Preset;
use ndarray::{Array1, Array2, Array3};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_json<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn grid<T: Clone>(rows: Vec<Vec<T>>, what: &str) -> PyResult<Array2<T>> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(err(format!("{what} rows have different lengths")));
    }
    Array2::from_shape_vec((h, w), rows.concat()).map_err(err)
}

fn cube<T: Clone>(v: Vec<Vec<Vec<T>>>, what: &str) -> PyResult<Array3<T>> {
    let a = v.len();
    let b = v.first().map_or(0, Vec::len);
    let c = v.first().and_then(|r| r.first()).map_or(0, Vec::len);
    if v.iter().any(|r| r.len() != b || r.iter().any(|x| x.len() != c)) {
        return Err(err(format!("{what} is ragged")));
    }
    let flat: Vec<T> = v.into_iter().flatten().flatten().collect();
    Array3::from_shape_vec((a, b, c), flat).map_err(err)
}

fn rows<T: Clone>(a: &Array2<T>) -> Vec<Vec<T>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

#[pyfunction]
fn softplus(x: f64) -> f64 {
    mani_core::losses::softplus(x)
}

/// Soft dice loss of probabilities against a binary mask.
#[pyfunction]
fn dice_loss(probs: Vec<Vec<f64>>, mask: Vec<Vec<u8>>) -> PyResult<f64> {
    mani_core::losses::dice_loss(&grid(probs, "probs")?.view(), &grid(mask, "mask")?).map_err(err)
}

#[pyfunction]
fn bce_loss(logits: Vec<Vec<f64>>, mask: Vec<Vec<u8>>) -> PyResult<f64> {
    mani_core::losses::bce_loss(&grid(logits, "logits")?.view(), &grid(mask, "mask")?).map_err(err)
}

#[pyfunction]
fn seg_loss(logits: Vec<Vec<f64>>, mask: Vec<Vec<u8>>) -> PyResult<f64> {
    mani_core::losses::seg_loss(&grid(logits, "logits")?.view(), &grid(mask, "mask")?).map_err(err)
}

/// JSD estimate from critic scores of positive and negative pairs.
#[pyfunction]
fn jsd_from_scores(pos: Vec<f64>, neg: Vec<f64>) -> PyResult<f64> {
    let (v, _, _) = mani_core::losses::jsd_from_scores(&Array1::from(pos), &Array1::from(neg)).map_err(err)?;
    Ok(v)
}

/// Mean of the `D x H x W` features over the mask; `None` for an empty mask.
#[pyfunction]
fn masked_mean_pool(features: Vec<Vec<Vec<f64>>>, mask: Vec<Vec<u8>>) -> PyResult<Option<Vec<f64>>> {
    let p = cube(features, "features")?;
    let pooled = mani_core::pooling::masked_mean_pool(&p.view(), &grid(mask, "mask")?).map_err(err)?;
    Ok(pooled.map(|v| v.to_vec()))
}

#[pyfunction]
fn masked_max_pool(features: Vec<Vec<Vec<f64>>>, mask: Vec<Vec<u8>>) -> PyResult<Option<Vec<f64>>> {
    let p = cube(features, "features")?;
    let pooled = mani_core::pooling::masked_max_pool(&p.view(), &grid(mask, "mask")?).map_err(err)?;
    Ok(pooled.map(|v| v.to_vec()))
}

#[pyfunction]
fn dice_score(pred: Vec<Vec<u8>>, gt: Vec<Vec<u8>>) -> PyResult<f64> {
    mani_core::metrics::dice_score(&grid(pred, "pred")?, &grid(gt, "gt")?).map_err(err)
}

#[pyfunction]
fn aji(gt: Vec<Vec<u32>>, pred: Vec<Vec<u32>>) -> PyResult<f64> {
    mani_core::metrics::aji(&grid(gt, "gt")?, &grid(pred, "pred")?).map_err(err)
}

/// Returns `(dq, sq, pq)`.
#[pyfunction]
fn panoptic(gt: Vec<Vec<u32>>, pred: Vec<Vec<u32>>) -> PyResult<(f64, f64, f64)> {
    let p = mani_core::metrics::panoptic(&grid(gt, "gt")?, &grid(pred, "pred")?).map_err(err)?;
    Ok((p.dq, p.sq, p.pq))
}

/// Labels the 8-connected components of a binary mask.
#[pyfunction]
fn extract_instances(mask: Vec<Vec<u8>>) -> PyResult<Vec<Vec<u32>>> {
    let m: Mask = grid(mask, "mask")?;
    let inst: InstanceMap = mani_core::metrics::extract_instances(&m);
    Ok(rows(&inst))
}

/// Runs the command line tool in-process and returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("mani".to_string()).chain(args).collect();
    py.detach(|| mani_core::cli::run(argv))
}

/// Training configuration.
#[pyclass(name = "TrainConfig", module = "mani", from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: mani_core::trainer::TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    /// Builds a configuration from an optional preset and `key=value`
    /// overrides, using the same keys as configuration files.
    #[new]
    #[pyo3(signature = (preset=None, **overrides))]
    fn new(preset: Option<&str>, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut flags = KeyValues::default();
        if let Some(p) = preset {
            flags.set("preset", p);
        }
        if let Some(d) = overrides {
            for (k, v) in d.iter() {
                let key: String = k.extract()?;
                let text = match v.extract::<bool>() {
                    Ok(b) if v.is_instance_of::<pyo3::types::PyBool>() => b.to_string(),
                    _ => v.str()?.to_string(),
                };
                flags.set(&key, text);
            }
        }
        Ok(PyTrainConfig {
            inner: resolve(None, &flags).map_err(err)?,
        })
    }

    #[staticmethod]
    fn presets() -> Vec<&'static str> {
        vec!["paper-semantic", "desk"]
    }

    #[staticmethod]
    fn from_preset(name: &str) -> PyResult<Self> {
        let preset: Preset = name.parse().map_err(err)?;
        Ok(PyTrainConfig { inner: preset.config() })
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_json(py, &self.inner)
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.model.feature_dim()
    }

    #[getter]
    fn total_iters(&self) -> usize {
        self.inner.total_iters()
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig({})", serde_json::to_string(&self.inner).unwrap_or_default())
    }
}

/// A trained (or freshly initialized) model.
#[pyclass(name = "Model", module = "mani", unsendable)]
struct PyModel {
    bundle: ModelBundle<f32>,
    config: mani_core::trainer::TrainConfig,
}

fn sample_from(image: Vec<Vec<Vec<f32>>>) -> PyResult<Sample> {
    let image: Image = cube(image, "image")?;
    if image.dim().2 != 3 {
        return Err(err("image must be H x W x 3"));
    }
    Ok(Sample {
        id: "input".into(),
        image,
        mask: None,
        instance_map: None,
        domain: Domain::Target,
    })
}

#[pymethods]
impl PyModel {
    #[new]
    fn new(config: &PyTrainConfig) -> PyResult<Self> {
        Ok(PyModel {
            bundle: ModelBundle::new(&config.inner.model, config.inner.seed).map_err(err)?,
            config: config.inner.clone(),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (bundle, config) = load_checkpoint(&path).map_err(err)?;
        Ok(PyModel { bundle, config })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.bundle, &self.config, &path).map_err(err)
    }

    #[getter]
    fn config(&self) -> PyTrainConfig {
        PyTrainConfig {
            inner: self.config.clone(),
        }
    }

    /// Binary nucleus mask of an `H x W x 3` image with values in [0, 1].
    fn predict(&mut self, image: Vec<Vec<Vec<f32>>>) -> PyResult<Vec<Vec<u8>>> {
        let sample = sample_from(image)?;
        let masks = predict_masks(&mut self.bundle, std::slice::from_ref(&sample)).map_err(err)?;
        Ok(rows(&masks[0]))
    }

    /// Metrics report on a labeled split of a dataset directory.
    #[pyo3(signature = (data, split="test"))]
    fn evaluate<'py>(&mut self, py: Python<'py>, data: PathBuf, split: &str) -> PyResult<Bound<'py, PyAny>> {
        let split: Split = split.parse().map_err(err)?;
        let ds = load_dataset(&data, Role::TargetUnlabeled, split).map_err(err)?;
        ds.require_masks("evaluation dataset").map_err(err)?;
        let report = evaluate(&mut self.bundle, &ds).map_err(err)?;
        to_json(py, &report)
    }
}

/// Trains on a source and a target dataset directory. Returns the final
/// model and the run summary.
#[pyfunction]
#[pyo3(signature = (config, source, target, out=None))]
fn train<'py>(
    py: Python<'py>,
    config: &PyTrainConfig,
    source: PathBuf,
    target: PathBuf,
    out: Option<PathBuf>,
) -> PyResult<(PyModel, Bound<'py, PyAny>)> {
    let cfg = config.inner.clone();
    let (outcome, summary) = py
        .detach(|| mani_core::cli::train_from_dirs(&cfg, &source, &target, out.as_deref()))
        .map_err(err)?;
    let model = PyModel {
        bundle: outcome.last,
        config: cfg,
    };
    Ok((model, to_json(py, &summary)?))
}

#[pymodule]
fn mani(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(softplus, m)?)?;
    m.add_function(wrap_pyfunction!(dice_loss, m)?)?;
    m.add_function(wrap_pyfunction!(bce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(seg_loss, m)?)?;
    m.add_function(wrap_pyfunction!(jsd_from_scores, m)?)?;
    m.add_function(wrap_pyfunction!(masked_mean_pool, m)?)?;
    m.add_function(wrap_pyfunction!(masked_max_pool, m)?)?;
    m.add_function(wrap_pyfunction!(dice_score, m)?)?;
    m.add_function(wrap_pyfunction!(aji, m)?)?;
    m.add_function(wrap_pyfunction!(panoptic, m)?)?;
    m.add_function(wrap_pyfunction!(extract_instances, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
