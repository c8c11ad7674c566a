//! Python bindings: codes, Hamming search, synthetic data and the training pipeline.

use std::collections::HashMap;

use advbin::codespace::{self, load_codes, save_codes, BinaryCode, BinaryCodeBatch, CodePrior, LambdaMode};
use advbin::config::ExperimentConfig;
use advbin::dataset::{self, load_features, save_features, split_query_gallery, IdentityDataset, Label};
use advbin::nn::{load_model, save_model, Network};
use advbin::retrieval::{self, EvalReport, HammingIndex};
use advbin::trainer;
use pyo3::exceptions::{PyIndexError, PyOSError, PyValueError};
use pyo3::prelude::*;

fn err(e: advbin::Error) -> PyErr {
    match e {
        advbin::Error::Io(io) => PyOSError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn label((identity, view): (u32, u16)) -> Label {
    Label { identity, view }
}

fn lambda_mode(name: &str) -> PyResult<LambdaMode> {
    name.parse().map_err(err)
}

#[pyclass(name = "BinaryCode", module = "advbin")]
struct PyBinaryCode {
    inner: BinaryCode,
}

#[pymethods]
impl PyBinaryCode {
    /// Builds a code from a sequence of 0/1 values.
    #[new]
    fn new(bits: Vec<u8>) -> PyResult<Self> {
        Ok(Self { inner: BinaryCode::from_bits(&bits).map_err(err)? })
    }

    #[staticmethod]
    fn zeros(bits: usize) -> PyResult<Self> {
        Ok(Self { inner: BinaryCode::zeros(bits).map_err(err)? })
    }

    fn to_list(&self) -> Vec<u8> {
        self.inner.to_bits()
    }

    fn count_ones(&self) -> u32 {
        self.inner.count_ones()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __getitem__(&self, j: usize) -> PyResult<bool> {
        if j >= self.inner.len() {
            return Err(PyIndexError::new_err(format!("bit {j} out of range for {} bits", self.inner.len())));
        }
        Ok(self.inner.get(j))
    }

    fn __eq__(&self, other: PyRef<'_, Self>) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        let s: String = self.inner.to_bits().iter().map(|b| char::from(b'0' + b)).collect();
        format!("BinaryCode('{s}')")
    }
}

#[pyclass(name = "CodeBatch", module = "advbin")]
struct PyCodeBatch {
    inner: BinaryCodeBatch,
}

#[pymethods]
impl PyCodeBatch {
    #[new]
    fn new(codes: Vec<PyRef<'_, PyBinaryCode>>) -> PyResult<Self> {
        let first = codes.first().ok_or_else(|| PyValueError::new_err("empty code list"))?;
        let mut batch = BinaryCodeBatch::new(first.inner.len()).map_err(err)?;
        for c in &codes {
            batch.push(&c.inner).map_err(err)?;
        }
        Ok(Self { inner: batch })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: load_codes(path).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_codes(path, &self.inner).map_err(err)
    }

    #[getter]
    fn bits(&self) -> usize {
        self.inner.bits()
    }

    fn bit_means(&self) -> Vec<f64> {
        self.inner.bit_means()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __getitem__(&self, i: usize) -> PyResult<PyBinaryCode> {
        if i >= self.inner.len() {
            return Err(PyIndexError::new_err(format!("row {i} out of range for {} codes", self.inner.len())));
        }
        Ok(PyBinaryCode { inner: self.inner.get(i) })
    }
}

/// Hamming distance between two codes of equal length.
#[pyfunction]
fn hamming(a: PyRef<'_, PyBinaryCode>, b: PyRef<'_, PyBinaryCode>) -> PyResult<u32> {
    codespace::hamming(&a.inner, &b.inner).map_err(err)
}

/// Thresholds each entry at 1/(2*lam).
#[pyfunction]
fn binarize(z: Vec<f64>, lam: f64) -> PyResult<PyBinaryCode> {
    Ok(PyBinaryCode { inner: codespace::binarize(&z, lam).map_err(err)? })
}

/// Maps a code to its real embedding, bits divided by `lam`.
#[pyfunction]
fn normalize_uniform(code: PyRef<'_, PyBinaryCode>, lam: f64) -> PyResult<Vec<f64>> {
    codespace::normalize_uniform(&code.inner, lam).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (bits, p = 0.5, mode = "norm-matching"))]
fn normalization_factor(bits: usize, p: f64, mode: &str) -> PyResult<f64> {
    let prior = CodePrior::new(bits, p, lambda_mode(mode)?).map_err(err)?;
    codespace::normalization_factor(&prior).map_err(err)
}

/// Draws `count` codes from the Bernoulli(p) prior.
#[pyfunction]
#[pyo3(signature = (bits, count, seed, p = 0.5))]
fn sample_codes(bits: usize, count: usize, seed: u64, p: f64) -> PyResult<PyCodeBatch> {
    let prior = CodePrior::new(bits, p, LambdaMode::NormMatching).map_err(err)?;
    Ok(PyCodeBatch { inner: codespace::sample_codes(&prior, count, seed).map_err(err)? })
}

#[pyclass(name = "HammingIndex", module = "advbin")]
struct PyHammingIndex {
    inner: HammingIndex,
}

#[pymethods]
impl PyHammingIndex {
    /// `labels` are `(identity, view)` pairs, one per code.
    #[new]
    fn new(codes: PyRef<'_, PyCodeBatch>, labels: Vec<(u32, u16)>) -> PyResult<Self> {
        let labels = labels.into_iter().map(label).collect();
        Ok(Self { inner: retrieval::build_index(codes.inner.clone(), labels).map_err(err)? })
    }

    /// Top-`k` `(row, distance)` pairs, ties by row. With `query_label`, gallery
    /// items sharing both identity and view with it are skipped.
    #[pyo3(signature = (code, k, query_label = None))]
    fn query(&self, code: PyRef<'_, PyBinaryCode>, k: usize, query_label: Option<(u32, u16)>) -> PyResult<Vec<(usize, u32)>> {
        let q = query_label.map(label);
        let hits = retrieval::query_hamming(&self.inner, &code.inner, |g| q == Some(g), k).map_err(err)?;
        Ok(hits.into_iter().map(|n| (n.row, n.distance)).collect())
    }

    fn memory_bytes(&self) -> u64 {
        self.inner.memory_bytes()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Config", module = "advbin")]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    /// Defaults, then `overrides` applied as `key = value` settings.
    #[new]
    #[pyo3(signature = (overrides = None))]
    fn new(overrides: Option<HashMap<String, String>>) -> PyResult<Self> {
        let mut inner = ExperimentConfig::default();
        let mut pairs: Vec<_> = overrides.unwrap_or_default().into_iter().collect();
        pairs.sort();
        for (k, v) in pairs {
            inner.set(&k, &v).map_err(err)?;
        }
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: ExperimentConfig::load(path).map_err(err)? })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    /// Normalization factor for the configured code length and mode.
    fn lam(&self) -> PyResult<f64> {
        self.inner.train.lambda().map_err(err)
    }
}

#[pyclass(name = "Dataset", module = "advbin")]
struct PyDataset {
    inner: IdentityDataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn synthesize(config: PyRef<'_, PyConfig>) -> PyResult<Self> {
        Ok(Self { inner: dataset::generate_synthetic(&config.inner.synth).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: load_features(path).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_features(path, &self.inner).map_err(err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn labels(&self) -> Vec<(u32, u16)> {
        self.inner.labels().into_iter().map(|l| (l.identity, l.view)).collect()
    }

    fn features(&self) -> Vec<Vec<f32>> {
        self.inner.records().iter().map(|r| r.features.clone()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Extractor", module = "advbin")]
struct PyExtractor {
    inner: Network,
}

fn report_dict(report: &EvalReport, prefix: &str) -> HashMap<String, f64> {
    report.metric_rows(prefix).into_iter().collect()
}

#[pymethods]
impl PyExtractor {
    /// Freshly initialized extractor for `dataset`'s feature dimension.
    #[new]
    fn new(config: PyRef<'_, PyConfig>, dataset: PyRef<'_, PyDataset>) -> PyResult<Self> {
        Ok(Self { inner: config.inner.train.new_extractor(dataset.inner.dim()).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: load_model(path).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_model(path, &self.inner).map_err(err)
    }

    /// Identity-classification pretraining; returns the new extractor and the
    /// per-iteration cross-entropy.
    fn pretrain(&self, dataset: PyRef<'_, PyDataset>, config: PyRef<'_, PyConfig>) -> PyResult<(Self, Vec<f64>)> {
        let (net, report) = trainer::pretrain(&self.inner, &dataset.inner, &config.inner.train).map_err(err)?;
        Ok((Self { inner: net }, report.records.iter().map(|r| r.cross_entropy).collect()))
    }

    /// Joint triplet and adversarial training from a fresh critic. Returns the new
    /// extractor and a summary of the run.
    fn train(&self, dataset: PyRef<'_, PyDataset>, config: PyRef<'_, PyConfig>) -> PyResult<(Self, HashMap<String, f64>)> {
        let t = &config.inner.train;
        let critic = t.new_critic().map_err(err)?;
        let (net, _, report) = trainer::train_joint(&self.inner, &critic, &dataset.inner, t).map_err(err)?;
        let mut summary = HashMap::new();
        summary.insert("global_iterations".to_string(), report.records.len() as f64);
        summary.insert("critic_updates".to_string(), report.critic_updates as f64);
        summary.insert("gan_generator_updates".to_string(), report.gan_generator_updates as f64);
        summary.insert("critic_estimate_first".to_string(), report.mean_critic_estimate(0.0, 0.1));
        summary.insert("critic_estimate_last".to_string(), report.mean_critic_estimate(0.9, 1.0));
        summary.insert("bit_balance_mean".to_string(), report.bit_balance.mean);
        if let Some(last) = report.records.last() {
            summary.insert("final_triplet_loss".to_string(), last.triplet_loss);
        }
        Ok((Self { inner: net }, summary))
    }

    /// Real-valued features, one row per record.
    fn features(&self, dataset: PyRef<'_, PyDataset>) -> PyResult<Vec<Vec<f64>>> {
        let z = trainer::extract_features(&self.inner, &dataset.inner).map_err(err)?;
        Ok(z.iter_rows().map(<[f64]>::to_vec).collect())
    }

    fn encode(&self, dataset: PyRef<'_, PyDataset>, config: PyRef<'_, PyConfig>) -> PyResult<PyCodeBatch> {
        let lam = config.inner.train.lambda_for(self.inner.spec.output_dim()).map_err(err)?;
        let (codes, _) = trainer::encode_dataset(&self.inner, &dataset.inner, lam).map_err(err)?;
        Ok(PyCodeBatch { inner: codes })
    }

    /// Cross-view CMC/mAP of binary codes and real features on the configured split,
    /// with real-valued metrics prefixed `real_`.
    fn evaluate(&self, dataset: PyRef<'_, PyDataset>, config: PyRef<'_, PyConfig>) -> PyResult<HashMap<String, f64>> {
        let cfg = &config.inner;
        let ds = &dataset.inner;
        let split = split_query_gallery(ds, &cfg.split, cfg.seed).map_err(err)?;
        let lam = cfg.train.lambda_for(self.inner.spec.output_dim()).map_err(err)?;
        let z = trainer::extract_features(&self.inner, ds).map_err(err)?;
        let codes = trainer::encode_features(&z, lam).map_err(err)?;
        let labels = ds.labels();
        let bin = retrieval::evaluate_codes(&codes, &labels, &split, cfg.eval.cmc_depth).map_err(err)?;
        let real = retrieval::evaluate_features(&z, &labels, &split, cfg.eval.cmc_depth).map_err(err)?;
        let mut out = report_dict(&bin, "");
        out.extend(report_dict(&real, "real_"));
        out.insert("quantized_fraction".to_string(), trainer::quantization_fraction(&z, lam, 0.25));
        Ok(out)
    }
}

/// Cross-view CMC/mAP of stored codes on the configured split.
#[pyfunction]
fn evaluate_codes(codes: PyRef<'_, PyCodeBatch>, dataset: PyRef<'_, PyDataset>, config: PyRef<'_, PyConfig>) -> PyResult<HashMap<String, f64>> {
    let cfg = &config.inner;
    let split = split_query_gallery(&dataset.inner, &cfg.split, cfg.seed).map_err(err)?;
    let report = retrieval::evaluate_codes(&codes.inner, &dataset.inner.labels(), &split, cfg.eval.cmc_depth).map_err(err)?;
    Ok(report_dict(&report, ""))
}

#[pymodule]
#[pyo3(name = "advbin")]
fn advbin_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBinaryCode>()?;
    m.add_class::<PyCodeBatch>()?;
    m.add_class::<PyHammingIndex>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyExtractor>()?;
    m.add_function(wrap_pyfunction!(hamming, m)?)?;
    m.add_function(wrap_pyfunction!(binarize, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_uniform, m)?)?;
    m.add_function(wrap_pyfunction!(normalization_factor, m)?)?;
    m.add_function(wrap_pyfunction!(sample_codes, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_codes, m)?)?;
    Ok(())
}
