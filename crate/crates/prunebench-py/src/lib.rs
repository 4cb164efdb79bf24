//! Python bindings: datasets, masked networks, pruning, and the three
//! attacks, mirroring the Rust API closely enough for scripting and
//! notebook exploration.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use prunebench::attacks::{
    bb_l0, cw_l2, pgd_linf, sample_starting_point, AttackRecord, BbConfig, CwConfig,
    NetworkOracle, PgdConfig,
};
use prunebench::data;
use prunebench::harness;
use prunebench::model::{build_cnn5, MaskedNetwork};
use prunebench::pruning::{self, PruningMethod};
use prunebench::tensor::Tensor;
use prunebench::training::{train_to_convergence, TrainConfig};

fn to_py(e: prunebench::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A labeled image set with pixels in [0,1].
#[pyclass(name = "Dataset")]
#[derive(Clone)]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Deterministic 28x28 seven-segment digit glyphs.
    #[staticmethod]
    fn synthetic_glyphs(n: usize, seed: u64) -> PyDataset {
        PyDataset {
            inner: data::synthetic_glyphs(n, seed),
        }
    }

    /// Load MNIST-format IDX image and label files.
    #[staticmethod]
    fn load_idx(images_path: PathBuf, labels_path: PathBuf) -> PyResult<PyDataset> {
        Ok(PyDataset {
            inner: data::load_idx(&images_path, &labels_path).map_err(to_py)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn class_count(&self) -> usize {
        self.inner.class_count
    }

    /// (height, width, channels) of a single sample.
    #[getter]
    fn sample_shape(&self) -> (usize, usize, usize) {
        self.inner.sample_shape()
    }

    fn label(&self, i: usize) -> PyResult<usize> {
        if i >= self.inner.len() {
            return Err(PyValueError::new_err(format!(
                "index {} out of range for dataset of {}",
                i,
                self.inner.len()
            )));
        }
        Ok(self.inner.labels[i])
    }

    /// Flat pixel values of sample `i`, row-major.
    fn image(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.inner.len() {
            return Err(PyValueError::new_err(format!(
                "index {} out of range for dataset of {}",
                i,
                self.inner.len()
            )));
        }
        Ok(self.inner.image(i).data().to_vec())
    }

    /// Deterministic, disjoint (train, validation) split.
    fn split(&self, val_fraction: f64, seed: u64) -> PyResult<(PyDataset, PyDataset)> {
        let (train, val) = data::split(&self.inner, val_fraction, seed).map_err(to_py)?;
        Ok((PyDataset { inner: train }, PyDataset { inner: val }))
    }

    /// The fixed evaluation subset: first `n` samples under a fixed shuffle.
    fn evaluation_subset(&self, n: usize) -> PyResult<PyDataset> {
        Ok(PyDataset {
            inner: harness::evaluation_subset(&self.inner, n).map_err(to_py)?,
        })
    }
}

/// One attack's outcome on one image.
#[pyclass(name = "AttackResult")]
#[derive(Clone)]
struct PyAttackResult {
    #[pyo3(get)]
    success: bool,
    #[pyo3(get)]
    l0: usize,
    #[pyo3(get)]
    l2: f64,
    #[pyo3(get)]
    linf: f64,
    #[pyo3(get)]
    iterations: usize,
    #[pyo3(get)]
    adversarial: Option<Vec<f64>>,
}

impl From<AttackRecord> for PyAttackResult {
    fn from(r: AttackRecord) -> Self {
        PyAttackResult {
            success: r.success,
            l0: r.l0,
            l2: r.l2,
            linf: r.linf,
            iterations: r.iterations,
            adversarial: r.adversarial.map(|t| t.data().to_vec()),
        }
    }
}

/// A convolutional classifier with per-weight pruning masks.
#[pyclass(name = "Network")]
#[derive(Clone)]
struct PyNetwork {
    inner: MaskedNetwork,
}

impl PyNetwork {
    fn image_tensor(&self, pixels: &[f64]) -> PyResult<Tensor> {
        let (h, w, c) = self.inner.input_shape;
        if pixels.len() != h * w * c {
            return Err(PyValueError::new_err(format!(
                "expected {} pixels for input shape {:?}, got {}",
                h * w * c,
                self.inner.input_shape,
                pixels.len()
            )));
        }
        Tensor::new(vec![1, h, w, c], pixels.to_vec()).map_err(to_py)
    }
}

#[pymethods]
impl PyNetwork {
    /// Build the five-layer CNN with freshly initialized weights.
    #[staticmethod]
    fn cnn5(height: usize, width: usize, channels: usize, classes: usize, seed: u64)
        -> PyResult<PyNetwork> {
        Ok(PyNetwork {
            inner: build_cnn5((height, width, channels), classes, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<PyNetwork> {
        Ok(PyNetwork {
            inner: MaskedNetwork::load_checkpoint(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_checkpoint(&path).map_err(to_py)
    }

    #[getter]
    fn class_count(&self) -> usize {
        self.inner.class_count
    }

    /// (total weights, nonzero weights, compression rate).
    fn sparsity(&self) -> (usize, usize, f64) {
        let s = self.inner.sparsity();
        (s.total, s.nonzero, s.compression_rate())
    }

    fn predict(&self, pixels: Vec<f64>) -> PyResult<usize> {
        let x = self.image_tensor(&pixels)?;
        self.inner.predict_one(&x).map_err(to_py)
    }

    fn logits(&self, pixels: Vec<f64>) -> PyResult<Vec<f64>> {
        let x = self.image_tensor(&pixels)?;
        Ok(self.inner.logits(&x).map_err(to_py)?.data().to_vec())
    }

    fn clean_accuracy(&self, dataset: &PyDataset) -> PyResult<f64> {
        let oracle = NetworkOracle::new(&self.inner);
        harness::clean_accuracy(&oracle, &dataset.inner).map_err(to_py)
    }

    /// Train in place until validation loss stops improving; returns the
    /// best validation accuracy reached.
    #[pyo3(signature = (train, val, seed, max_epochs=None))]
    fn train(
        &mut self,
        train: &PyDataset,
        val: &PyDataset,
        seed: u64,
        max_epochs: Option<usize>,
    ) -> PyResult<f64> {
        let mut cfg = TrainConfig::default();
        if let Some(m) = max_epochs {
            cfg.max_epochs = m;
        }
        let history =
            train_to_convergence(&mut self.inner, &train.inner, &val.inner, &cfg, seed)
                .map_err(to_py)?;
        Ok(history
            .epochs
            .iter()
            .map(|e| e.val_acc)
            .fold(0.0f64, f64::max))
    }

    /// Iteratively halve the remaining units down each rate in `rates`,
    /// fine-tuning between steps; returns [(rate, pruned network), ...].
    #[pyo3(signature = (method, rates, train, val, seed, max_epochs=None))]
    fn iterative_prune(
        &mut self,
        method: &str,
        rates: Vec<usize>,
        train: &PyDataset,
        val: &PyDataset,
        seed: u64,
        max_epochs: Option<usize>,
    ) -> PyResult<Vec<(usize, PyNetwork)>> {
        let method = parse_method(method)?;
        let mut cfg = TrainConfig::default();
        if let Some(m) = max_epochs {
            cfg.max_epochs = m;
        }
        let mut step = 0u64;
        let mut trainer = |n: &mut MaskedNetwork| {
            step += 1;
            train_to_convergence(
                n,
                &train.inner,
                &val.inner,
                &cfg,
                harness::derive_seed(seed, step),
            )
            .map(|_| ())
        };
        let checkpoints =
            pruning::iterative_prune(&mut self.inner, &method, &rates, &mut trainer, seed)
                .map_err(to_py)?;
        Ok(checkpoints
            .into_iter()
            .map(|(rate, net)| (rate, PyNetwork { inner: net }))
            .collect())
    }

    /// PGD attack under an L-infinity budget `eps`.
    fn attack_pgd(
        &self,
        pixels: Vec<f64>,
        label: usize,
        eps: f64,
        seed: u64,
    ) -> PyResult<PyAttackResult> {
        let x = self.image_tensor(&pixels)?;
        let oracle = NetworkOracle::new(&self.inner);
        let cfg = PgdConfig::new(eps);
        Ok(pgd_linf(&oracle, &x, label, &cfg, seed).map_err(to_py)?.into())
    }

    /// Carlini&Wagner minimal-L2 attack.
    #[pyo3(signature = (pixels, label, seed, inner_steps=None, binary_search_steps=None))]
    fn attack_cw(
        &self,
        pixels: Vec<f64>,
        label: usize,
        seed: u64,
        inner_steps: Option<usize>,
        binary_search_steps: Option<usize>,
    ) -> PyResult<PyAttackResult> {
        let x = self.image_tensor(&pixels)?;
        let oracle = NetworkOracle::new(&self.inner);
        let mut cfg = CwConfig::default();
        if let Some(s) = inner_steps {
            cfg.inner_steps = s;
        }
        if let Some(s) = binary_search_steps {
            cfg.binary_search_steps = s;
        }
        Ok(cw_l2(&oracle, &x, label, &cfg, seed).map_err(to_py)?.into())
    }

    /// Brendel&Bethge minimal-L0 attack, seeded from a correctly-classified
    /// image of another class drawn from `pool`.
    #[pyo3(signature = (pixels, label, pool, seed, inner_steps=None, binary_search_steps=None))]
    fn attack_bb(
        &self,
        pixels: Vec<f64>,
        label: usize,
        pool: &PyDataset,
        seed: u64,
        inner_steps: Option<usize>,
        binary_search_steps: Option<usize>,
    ) -> PyResult<PyAttackResult> {
        let x = self.image_tensor(&pixels)?;
        let oracle = NetworkOracle::new(&self.inner);
        let start = sample_starting_point(&pool.inner, label, seed, &oracle).map_err(to_py)?;
        let mut cfg = BbConfig::default();
        if let Some(s) = inner_steps {
            cfg.inner_steps = s;
        }
        if let Some(s) = binary_search_steps {
            cfg.binary_search_steps = s;
        }
        Ok(bb_l0(&oracle, &x, label, &start, &cfg, seed)
            .map_err(to_py)?
            .into())
    }
}

fn parse_method(label: &str) -> PyResult<PruningMethod> {
    PruningMethod::all()
        .into_iter()
        .find(|m| m.label() == label)
        .ok_or_else(|| {
            PyValueError::new_err(format!(
                "unknown pruning method '{}'; see pruning_methods()",
                label
            ))
        })
}

/// Labels of the nine supported pruning methods.
#[pyfunction]
fn pruning_methods() -> Vec<String> {
    PruningMethod::all().iter().map(|m| m.label()).collect()
}

/// Deterministic seed mixing, identical to the Rust pipeline's.
#[pyfunction]
fn derive_seed(base: u64, salt: u64) -> u64 {
    harness::derive_seed(base, salt)
}

#[pymodule]
fn prunebench_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyAttackResult>()?;
    m.add_function(wrap_pyfunction!(pruning_methods, m)?)?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    Ok(())
}
