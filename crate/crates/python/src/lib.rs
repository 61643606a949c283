//! Python bindings: datasets, prompt banks, partitioning, the federated
//! round and the numerical building blocks.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIndexError, PyOSError, PyValueError};
use pyo3::prelude::*;

use tofa::bayes::{global_posterior, personalized_posterior};
use tofa::embedding::{self, EmbeddingDataset, PromptBank};
use tofa::fusion;
use tofa::gda::{gda_fit, GdaClassifier};
use tofa::partition::{partition as split, ClientSplit};
use tofa::round::{self, PromptSource};
use tofa::stats::compute_stats;
use tofa::synth::{synth_generate, synth_prompts, CovarianceSpec, MeanSpec, SynthConfig};
use tofa::transport::InProcessBus;
use tofa::{Error, NiwPosterior, PartitionSpec};

create_exception!(tofa, TofaError, PyException);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::InvalidParameter(_) | Error::DimensionMismatch(_) => PyValueError::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        other => TofaError::new_err(other.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for tofa::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

#[pyclass(name = "EmbeddingDataset", module = "tofa", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: EmbeddingDataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(num_classes: usize, labels: Vec<u32>, rows: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(PyDataset {
            inner: EmbeddingDataset::from_rows(num_classes, labels, &rows).py()?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyDataset {
            inner: embedding::load_embeddings(path).py()?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        embedding::save_embeddings(path, &self.inner).py()
    }

    fn normalized(&self) -> PyResult<Self> {
        Ok(PyDataset {
            inner: embedding::normalize(&self.inner).py()?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn labels(&self) -> Vec<u32> {
        self.inner.labels().to_vec()
    }

    fn row(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.inner.len() {
            return Err(PyIndexError::new_err(format!("row {i} out of range")));
        }
        Ok(self.inner.row(i).iter().map(|&v| v as f64).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "EmbeddingDataset(n={}, d={}, classes={})",
            self.inner.len(),
            self.inner.dim(),
            self.inner.num_classes()
        )
    }
}

#[pyclass(name = "PromptBank", module = "tofa", from_py_object)]
#[derive(Clone)]
struct PyPromptBank {
    inner: PromptBank,
}

#[pymethods]
impl PyPromptBank {
    /// `rows[c][m]` is the embedding of prompt m of class c; slot 0 is the
    /// hand-crafted prompt.
    #[new]
    fn new(rows: Vec<Vec<Vec<f64>>>) -> PyResult<Self> {
        Ok(PyPromptBank {
            inner: PromptBank::from_rows(&rows).py()?.normalize().py()?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyPromptBank {
            inner: embedding::load_prompts(path).py()?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        embedding::save_prompts(path, &self.inner).py()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn slots(&self) -> usize {
        self.inner.slots()
    }

    fn zero_shot(&self, z: Vec<f64>, clip_temp: f64) -> Vec<f64> {
        tofa::text::zero_shot_predict(&self.inner, &z, clip_temp)
    }
}

/// Run settings. Keyword arguments override the defaults; unknown names
/// raise ValueError.
#[pyclass(name = "RunConfig", module = "tofa", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: round::RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, pyo3::types::PyDict>>) -> PyResult<Self> {
        let mut value = serde_json::to_value(round::RunConfig::default()).expect("config serializes");
        if let Some(kw) = kwargs {
            let json = kw.py().import("json")?.call_method1("dumps", (kw,))?;
            let overrides: serde_json::Value =
                serde_json::from_str(&json.extract::<String>()?).map_err(|e| PyValueError::new_err(e.to_string()))?;
            if let (Some(base), Some(over)) = (value.as_object_mut(), overrides.as_object()) {
                for (k, v) in over {
                    base.insert(k.clone(), v.clone());
                }
            }
        }
        let inner: round::RunConfig = serde_json::from_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().py()?;
        Ok(PyRunConfig { inner })
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("config serializes")
    }

    fn __repr__(&self) -> String {
        format!("RunConfig({})", self.to_json())
    }
}

#[pyclass(name = "Posterior", module = "tofa", from_py_object)]
#[derive(Clone)]
struct PyPosterior {
    inner: NiwPosterior,
}

#[pymethods]
impl PyPosterior {
    #[getter]
    fn dof(&self) -> f64 {
        self.inner.dof
    }

    #[getter]
    fn kappas(&self) -> Vec<f64> {
        self.inner.kappas.clone()
    }

    #[getter]
    fn means(&self) -> Vec<Vec<f64>> {
        self.inner.means.iter().map(|m| m.iter().cloned().collect()).collect()
    }

    /// Row-major scale matrix.
    #[getter]
    fn scale(&self) -> Vec<Vec<f64>> {
        let s = &self.inner.scale;
        (0..s.nrows()).map(|i| s.row(i).iter().cloned().collect()).collect()
    }

    /// Gaussian discriminant head from the MAP parameters.
    #[pyo3(signature = (ridge = 1e-4))]
    fn classifier(&self, ridge: f64) -> PyResult<PyGda> {
        let (means, cov) = self.inner.map_estimate().py()?;
        Ok(PyGda {
            inner: gda_fit(&means, &cov, ridge).py()?,
        })
    }
}

#[pyclass(name = "GdaClassifier", module = "tofa")]
struct PyGda {
    inner: GdaClassifier,
}

#[pymethods]
impl PyGda {
    fn predict(&self, z: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.predict(&z).py()
    }

    fn logits(&self, z: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.discriminants(&z).py()
    }
}

#[pyclass(name = "Report", module = "tofa")]
struct PyReport {
    inner: round::EvalReport,
}

#[pymethods]
impl PyReport {
    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn to_table(&self) -> String {
        self.inner.to_table()
    }

    #[getter]
    fn headline(&self) -> Option<f64> {
        self.inner.headline
    }

    /// (visual, text, fused) mean present-class accuracy.
    #[getter]
    fn average(&self) -> Option<(f64, f64, f64)> {
        self.inner.average.map(|a| (a.visual, a.text, a.fused))
    }

    /// (visual uploads, text uploads, broadcasts).
    #[getter]
    fn messages(&self) -> (usize, usize, usize) {
        let m = &self.inner.messages;
        (m.visual_uploads, m.text_uploads, m.broadcasts)
    }
}

#[pyfunction]
#[pyo3(signature = (classes, dim, per_class, variance = 0.25, mean_scale = 1.0, informative = 2, planted = 1, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn synth(
    classes: usize,
    dim: usize,
    per_class: usize,
    variance: f64,
    mean_scale: f64,
    informative: usize,
    planted: usize,
    seed: u64,
) -> PyResult<(PyDataset, PyPromptBank)> {
    let out = synth_generate(&SynthConfig {
        num_classes: classes,
        dim,
        clients: 1,
        means: MeanSpec::Random { scale: mean_scale },
        covariance: CovarianceSpec::Isotropic(variance),
        per_class,
        seed,
    })
    .py()?;
    let bank = synth_prompts(&out.truth, informative, 0.3, planted, seed.wrapping_add(1)).py()?;
    Ok((PyDataset { inner: out.pooled }, PyPromptBank { inner: bank }))
}

/// Splits `ds` into `(train, test)` pairs, one per client.
#[pyfunction]
#[pyo3(signature = (ds, scheme = "class-split", clients = 10, shots = Some(16), seed = 0))]
fn partition(
    ds: &PyDataset,
    scheme: &str,
    clients: usize,
    shots: Option<usize>,
    seed: u64,
) -> PyResult<Vec<(PyDataset, PyDataset)>> {
    let scheme = scheme.parse().py()?;
    let spec = PartitionSpec::new(scheme, clients, shots, seed);
    Ok(split(&ds.inner, &spec)
        .py()?
        .into_iter()
        .map(|s| (PyDataset { inner: s.train }, PyDataset { inner: s.test }))
        .collect())
}

/// Pooled posterior over the training sets of all clients.
#[pyfunction]
#[pyo3(signature = (datasets, s0 = 1e-6, kappa0 = 1e-6))]
fn global_posterior_of(datasets: Vec<PyDataset>, s0: f64, kappa0: f64) -> PyResult<PyPosterior> {
    let msgs: Vec<_> = datasets
        .iter()
        .enumerate()
        .map(|(k, d)| compute_stats(k as u32, &d.inner))
        .collect();
    let merged = tofa::ClientStatsMessage::merge_all(&msgs).py()?;
    Ok(PyPosterior {
        inner: global_posterior(&merged, &tofa::PriorConfig { s0, kappa0 }).py()?,
    })
}

/// Power-prior posterior of one client given everyone's training sets.
#[pyfunction]
#[pyo3(signature = (datasets, client, alpha, s0 = 1e-6, kappa0 = 1e-6))]
fn personalized(datasets: Vec<PyDataset>, client: usize, alpha: f64, s0: f64, kappa0: f64) -> PyResult<PyPosterior> {
    if client >= datasets.len() {
        return Err(PyIndexError::new_err(format!("client {client} out of range")));
    }
    let msgs: Vec<_> = datasets
        .iter()
        .enumerate()
        .map(|(k, d)| compute_stats(k as u32, &d.inner))
        .collect();
    let merged = tofa::ClientStatsMessage::merge_all(&msgs).py()?;
    let prior = tofa::PriorConfig { s0, kappa0 };
    Ok(PyPosterior {
        inner: personalized_posterior(&merged, &msgs[client], alpha, &prior).py()?,
    })
}

/// Runs one federated round over `(train, test)` pairs with a shared bank.
#[pyfunction]
#[pyo3(signature = (clients, bank, config = None))]
fn run_round(
    py: Python<'_>,
    clients: Vec<(PyDataset, PyDataset)>,
    bank: &PyPromptBank,
    config: Option<&PyRunConfig>,
) -> PyResult<PyReport> {
    let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
    let splits: Vec<ClientSplit> = clients
        .into_iter()
        .map(|(train, test)| ClientSplit {
            train: train.inner,
            test: test.inner,
        })
        .collect();
    let prompts = PromptSource::Shared(bank.inner.clone());
    let out = py
        .detach(|| round::run_round(&splits, &prompts, &cfg, &InProcessBus::new()))
        .py()?;
    Ok(PyReport { inner: out.report })
}

/// Adaptive fusion of two probability vectors; returns (probs, eta).
#[pyfunction]
fn fuse(visual: Vec<f64>, text: Vec<f64>) -> PyResult<(Vec<f64>, f64)> {
    if visual.len() != text.len() {
        return Err(PyValueError::new_err("probability vectors differ in length"));
    }
    let f = fusion::fuse(visual, text);
    Ok((f.probs, f.eta))
}

/// Temperature whose mean max-probability on `logits` matches `accuracy`.
#[pyfunction]
fn calibrate(logits: Vec<Vec<f64>>, accuracy: f64) -> PyResult<f64> {
    Ok(fusion::calibrate(&logits, accuracy, &Default::default())
        .py()?
        .temperature)
}

#[pymodule]
#[pyo3(name = "tofa")]
fn tofa_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("TofaError", m.py().get_type::<TofaError>())?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyPromptBank>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyPosterior>()?;
    m.add_class::<PyGda>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(partition, m)?)?;
    m.add_function(wrap_pyfunction!(global_posterior_of, m)?)?;
    m.add_function(wrap_pyfunction!(personalized, m)?)?;
    m.add_function(wrap_pyfunction!(run_round, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    Ok(())
}
