//! Python bindings for `lora3d`.
//!
//! Tensors cross the boundary as flat `list[float]` plus a shape, which
//! keeps the extension free of a numpy dependency.

use std::path::PathBuf;

use lora3d::checkpoint::Checkpoint;
use lora3d::data::{self, Manifest, ManifestRow, SynthSpec};
use lora3d::model::{count_trainable, flops_estimate, AdapterPath, BackboneConfig, Classifier};
use lora3d::{metrics, optim, train, Error, HeadSettings, LoraSettings, RandomSource, Tensor};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for lora3d::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn extents3(extents: Vec<usize>) -> PyResult<[usize; 3]> {
    <[usize; 3]>::try_from(extents).map_err(|v| PyValueError::new_err(format!("expected 3 extents, got {}", v.len())))
}

/// Trainable parameters of one adapter: `r·(d_out + d_in·k³)`.
#[pyfunction]
fn lora_param_count(d_out: usize, d_in: usize, k: usize, r: usize) -> usize {
    lora3d::lora_param_count(d_out, d_in, k, r)
}

/// Per-layer trainable counts and their total.
#[pyfunction]
#[pyo3(signature = (preset, rank=4, in_channels=2, hidden=128))]
fn count_params(preset: &str, rank: usize, in_channels: usize, hidden: usize) -> PyResult<(Vec<(String, usize)>, usize)> {
    let config = BackboneConfig::preset(preset, in_channels).py()?;
    let lora = LoraSettings {
        rank,
        ..LoraSettings::default()
    };
    let head = HeadSettings {
        hidden,
        ..HeadSettings::default()
    };
    let count = count_trainable(&config, &lora, &head);
    Ok((count.breakdown, count.total))
}

/// Per-layer multiply-accumulates and the total FLOP count (2 per MAC).
#[pyfunction]
#[pyo3(signature = (preset, extents, in_channels=2, hidden=128))]
fn flops(preset: &str, extents: Vec<usize>, in_channels: usize, hidden: usize) -> PyResult<(Vec<(String, u64)>, u64)> {
    let config = BackboneConfig::preset(preset, in_channels).py()?;
    let head = HeadSettings {
        hidden,
        ..HeadSettings::default()
    };
    let r = flops_estimate(&config, &head, extents3(extents)?).py()?;
    Ok((r.rows, r.total_flops))
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    metrics::roc_auc(&scores, &labels).py()
}

#[pyfunction]
fn auc_rank_oracle(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    metrics::auc_rank_oracle(&scores, &labels).py()
}

/// ROC points `(threshold, fpr, tpr)`, starting at `(inf, 0, 0)`.
#[pyfunction]
fn roc_curve(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<Vec<(f64, f64, f64)>> {
    let curve = metrics::roc_curve(&scores, &labels).py()?;
    Ok(curve.points.iter().map(|p| (p.threshold, p.fpr, p.tpr)).collect())
}

/// `(tp, fp, tn, fn)`; a score at or above the threshold is positive.
#[pyfunction]
#[pyo3(signature = (scores, labels, threshold=0.5))]
fn confusion(scores: Vec<f64>, labels: Vec<u8>, threshold: f64) -> PyResult<(usize, usize, usize, usize)> {
    let cm = metrics::confusion(&scores, &labels, threshold).py()?;
    Ok((cm.tp, cm.fp, cm.tn, cm.fn_))
}

/// Loss and logit gradient of binary cross-entropy on one logit.
#[pyfunction]
fn bce_with_logits(logit: f64, label: u8) -> PyResult<(f64, f64)> {
    optim::bce_with_logits(logit, label).py()
}

/// Stratified folds of subject ids.
#[pyfunction]
#[pyo3(signature = (ids, labels, k=5, seed=0))]
fn stratified_kfold(ids: Vec<String>, labels: Vec<u8>, k: usize, seed: u64) -> PyResult<Vec<Vec<String>>> {
    if ids.len() != labels.len() {
        return Err(PyValueError::new_err(format!("{} ids but {} labels", ids.len(), labels.len())));
    }
    let rows = ids
        .into_iter()
        .zip(labels)
        .map(|(id, label)| ManifestRow {
            path: PathBuf::from(format!("{id}.vol")),
            subject_id: id,
            label,
        })
        .collect();
    let manifest = Manifest::new(rows, ".").py()?;
    Ok(data::stratified_kfold(&manifest, k, seed).py()?.folds)
}

/// Write a synthetic cohort and its manifest; returns the subject count.
#[pyfunction]
#[pyo3(signature = (out_dir, n=100, seed=0, extents=vec![16, 16, 16], separation=2.0, channels=2))]
fn gen_synth(out_dir: PathBuf, n: usize, seed: u64, extents: Vec<usize>, separation: f64, channels: usize) -> PyResult<usize> {
    let spec = SynthSpec {
        n_per_class: n,
        extents: extents3(extents)?,
        channels,
        seed,
        separation,
    };
    Ok(data::synth_generate(&out_dir, &spec).py()?.len())
}

/// `(shape, values)` of a volume file.
#[pyfunction]
fn load_volume(path: PathBuf) -> PyResult<(Vec<usize>, Vec<f32>)> {
    let v = data::load_volume(&path).py()?;
    Ok((v.shape().to_vec(), v.into_data()))
}

/// Adapted classifier over a frozen backbone.
#[pyclass(name = "Classifier")]
struct PyClassifier {
    inner: Classifier<f32>,
}

#[pymethods]
impl PyClassifier {
    /// Random backbone from `seed`, zero-initialized adapter updates.
    #[new]
    #[pyo3(signature = (preset="tiny", in_channels=2, rank=4, hidden=128, seed=0))]
    fn new(preset: &str, in_channels: usize, rank: usize, hidden: usize, seed: u64) -> PyResult<Self> {
        let config = BackboneConfig::preset(preset, in_channels).py()?;
        let lora = LoraSettings {
            rank,
            ..LoraSettings::default()
        };
        let head = HeadSettings {
            hidden,
            ..HeadSettings::default()
        };
        let inner = lora3d::build_classifier(
            &config,
            &lora,
            &head,
            None,
            &mut RandomSource::with_stream(seed, 0),
            &mut RandomSource::with_stream(seed, 1),
        )
        .py()?;
        Ok(Self { inner })
    }

    /// Rebuild the model stored in a checkpoint file.
    #[staticmethod]
    fn from_checkpoint(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).py()?;
        Ok(Self {
            inner: train::model_from_checkpoint(&ck).py()?,
        })
    }

    /// Logits for a batch given as a flat list and its `[n, c, d, h, w]` shape.
    fn logits(&self, values: Vec<f32>, shape: Vec<usize>) -> PyResult<Vec<f32>> {
        let x = Tensor::from_vec(shape, values).py()?;
        Ok(self.inner.logits(&x).py()?.into_data())
    }

    /// Logistic scores for the same input layout as `logits`.
    fn predict_scores(&self, values: Vec<f32>, shape: Vec<usize>) -> PyResult<Vec<f64>> {
        let x = Tensor::from_vec(shape, values).py()?;
        self.inner.predict_scores(&x).py()
    }

    /// Evaluate adapters as a separate convolution instead of folding them
    /// into the kernels.
    fn set_parallel(&mut self, parallel: bool) {
        self.inner.set_adapter_path(if parallel { AdapterPath::Parallel } else { AdapterPath::Merged });
    }

    /// Fold every adapter into its kernel and drop it.
    fn merge(&mut self) {
        self.inner.merge_adapters();
    }

    fn trainable_param_count(&self) -> usize {
        self.inner.trainable_param_count().total
    }

    /// `(convolutions, adapters)`.
    fn conv_and_adapter_counts(&self) -> (usize, usize) {
        self.inner.conv_and_adapter_counts()
    }

    fn trainable_names(&self) -> Vec<String> {
        self.inner.trainable_names()
    }
}

#[pymodule]
fn lora3d_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(lora_param_count, m)?)?;
    m.add_function(wrap_pyfunction!(count_params, m)?)?;
    m.add_function(wrap_pyfunction!(flops, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(auc_rank_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(roc_curve, m)?)?;
    m.add_function(wrap_pyfunction!(confusion, m)?)?;
    m.add_function(wrap_pyfunction!(bce_with_logits, m)?)?;
    m.add_function(wrap_pyfunction!(stratified_kfold, m)?)?;
    m.add_function(wrap_pyfunction!(gen_synth, m)?)?;
    m.add_function(wrap_pyfunction!(load_volume, m)?)?;
    m.add_class::<PyClassifier>()?;
    Ok(())
}
