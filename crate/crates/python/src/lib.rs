//! Python bindings. Inputs and outputs are plain lists of floats; a batch
//! is a list of flattened rows.

use std::path::PathBuf;

use ngebm::attacks::{pgd as pgd_attack, AttackConfig, Norm};
use ngebm::checkpoint::Checkpoint;
use ngebm::data::{Dataset, GaussianMixture, Split};
use ngebm::energy::{energy_values, score_batch, ScoreKind};
use ngebm::metrics;
use ngebm::nn::{Model, ModelSpec};
use ngebm::trainer::{self, TrainConfig};
use ngebm::Tensor;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn err(e: ngebm::Error) -> PyErr {
    match e {
        ngebm::Error::Config(_) | ngebm::Error::InvalidSpec(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Stacks rows into a `[n, ..input_shape]` tensor.
pub fn batch(rows: &[Vec<f64>], input_shape: &[usize]) -> Result<Tensor, ngebm::Error> {
    let d: usize = input_shape.iter().product();
    if let Some(bad) = rows.iter().position(|r| r.len() != d) {
        return Err(ngebm::Error::Config(format!(
            "row {bad} has {} values, expected {d}",
            rows[bad].len()
        )));
    }
    let mut shape = vec![rows.len()];
    shape.extend_from_slice(input_shape);
    Ok(Tensor::new(shape, rows.concat())?)
}

pub fn unbatch(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn dataset(x: &[Vec<f64>], y: Vec<usize>, num_classes: usize) -> Result<Dataset, ngebm::Error> {
    let d = x.first().map_or(0, Vec::len);
    Dataset::new(batch(x, &[d])?, y, num_classes, Split::Train, "python")
}

/// A classifier whose negative log-sum-exp of logits is the energy.
#[pyclass(name = "Model", module = "ngebm", frozen)]
pub struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    /// Fully connected ReLU network with freshly initialized weights.
    #[staticmethod]
    #[pyo3(signature = (input_dim, hidden, num_classes, seed = 0))]
    fn mlp(input_dim: usize, hidden: Vec<usize>, num_classes: usize, seed: u64) -> PyResult<Self> {
        let spec = ModelSpec::mlp(input_dim, &hidden, num_classes);
        Ok(Self { inner: Model::init(spec, seed).map_err(err)? })
    }

    /// Loads the model stored in a training checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: Checkpoint::load(&path).map_err(err)?.model })
    }

    #[getter]
    fn input_shape(&self) -> Vec<usize> {
        self.inner.spec.input_shape.clone()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.spec.num_classes
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.params.num_values()
    }

    fn logits(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let t = batch(&x, &self.inner.spec.input_shape).map_err(err)?;
        Ok(unbatch(&self.inner.logits(&t).map_err(err)?))
    }

    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        let t = batch(&x, &self.inner.spec.input_shape).map_err(err)?;
        self.inner.predict(&t).map_err(err)
    }

    fn energy(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let t = batch(&x, &self.inner.spec.input_shape).map_err(err)?;
        energy_values(&self.inner.logits(&t).map_err(err)?).map_err(err)
    }

    /// Euclidean norm of the input gradient of the energy, per row.
    fn egm(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let t = batch(&x, &self.inner.spec.input_shape).map_err(err)?;
        ngebm::energy::egm(&self.inner, &t).map_err(err)
    }

    /// `kind` is one of `log_density_proxy`, `max_softmax`, `approximate_mass`.
    fn score(&self, x: Vec<Vec<f64>>, kind: &str) -> PyResult<Vec<f64>> {
        let kind: ScoreKind = kind.parse().map_err(err)?;
        let t = batch(&x, &self.inner.spec.input_shape).map_err(err)?;
        score_batch(&self.inner, &t, kind).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(input_shape={:?}, num_classes={}, num_params={})",
            self.inner.spec.input_shape,
            self.inner.spec.num_classes,
            self.inner.params.num_values()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (confidences, correct, n_bins = metrics::DEFAULT_ECE_BINS))]
fn ece<'py>(py: Python<'py>, confidences: Vec<f64>, correct: Vec<bool>, n_bins: usize) -> PyResult<Bound<'py, PyDict>> {
    let r = metrics::ece(&confidences, &correct, n_bins).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("ece", r.ece)?;
    let bins = r
        .bins
        .iter()
        .map(|b| {
            let d = PyDict::new(py);
            d.set_item("lower", b.lower)?;
            d.set_item("upper", b.upper)?;
            d.set_item("count", b.count)?;
            d.set_item("mean_confidence", b.mean_confidence)?;
            d.set_item("accuracy", b.accuracy)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    out.set_item("bins", bins)?;
    Ok(out)
}

/// Probability that an in-distribution score exceeds an out-of-distribution one.
#[pyfunction]
fn auroc(scores_in: Vec<f64>, scores_out: Vec<f64>) -> PyResult<f64> {
    Ok(metrics::auroc(&scores_in, &scores_out).map_err(err)?.auroc)
}

#[pyfunction]
#[pyo3(signature = (values, n_bins = 50, range = None))]
fn histogram<'py>(py: Python<'py>, values: Vec<f64>, n_bins: usize, range: Option<(f64, f64)>) -> PyResult<Bound<'py, PyDict>> {
    let h = metrics::histogram(&values, n_bins, range).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("edges", h.edges)?;
    out.set_item("counts", h.counts)?;
    out.set_item("density", h.density)?;
    Ok(out)
}

/// Isotropic Gaussian blobs in 2-D, one class per center. Returns `(x, y)`.
#[pyfunction]
#[pyo3(signature = (centers, std, n_per_class, seed = 0, label_noise = 0.0))]
fn gaussian_mixture(centers: Vec<[f64; 2]>, std: f64, n_per_class: usize, seed: u64, label_noise: f64) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut gm = GaussianMixture::new(centers, std, n_per_class, seed);
    gm.label_noise = label_noise;
    let ds = gm.generate().map_err(err)?;
    Ok((unbatch(&ds.inputs), ds.labels))
}

/// Trains an MLP on `(x, y)`. `config` is a JSON object with the training
/// options (for example `{"epochs": 10, "loss": {"mode": "ngebm"}}`).
/// Returns the model and one dict per epoch.
#[pyfunction]
#[pyo3(signature = (x, y, num_classes, hidden = vec![32, 32], config = None))]
fn train<'py>(
    py: Python<'py>,
    x: Vec<Vec<f64>>,
    y: Vec<usize>,
    num_classes: usize,
    hidden: Vec<usize>,
    config: Option<&str>,
) -> PyResult<(PyModel, Vec<Bound<'py, PyDict>>)> {
    let cfg: TrainConfig = match config {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => TrainConfig::default(),
    };
    let ds = dataset(&x, y, num_classes).map_err(err)?;
    let spec = ModelSpec::mlp(ds.input_shape()[0], &hidden, num_classes);
    let (ckpt, log) = py
        .detach(|| trainer::train(&cfg, spec, &ds, Some(&ds)))
        .map_err(err)?;
    let records = log
        .records
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("epoch", r.epoch)?;
            d.set_item("lr", r.lr)?;
            d.set_item("loss_total", r.loss_total)?;
            d.set_item("loss_ce", r.loss_ce)?;
            d.set_item("loss_other", r.loss_other)?;
            d.set_item("eval_accuracy", r.eval_accuracy)?;
            d.set_item("mean_egm", r.mean_egm)?;
            d.set_item("diverged_chains", r.diverged_chains)?;
            d.set_item("skipped_batches", r.skipped_batches)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((PyModel { inner: ckpt.model }, records))
}

/// Accuracy, mean confidence and ECE of `model` on `(x, y)`.
#[pyfunction]
#[pyo3(signature = (model, x, y, n_bins = metrics::DEFAULT_ECE_BINS))]
fn evaluate<'py>(py: Python<'py>, model: &PyModel, x: Vec<Vec<f64>>, y: Vec<usize>, n_bins: usize) -> PyResult<Bound<'py, PyDict>> {
    let ds = dataset(&x, y, model.inner.spec.num_classes).map_err(err)?;
    let ev = trainer::evaluate(&model.inner, &ds, n_bins).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("accuracy", ev.accuracy)?;
    out.set_item("mean_confidence", ev.mean_confidence)?;
    out.set_item("ece", ev.ece.ece)?;
    Ok(out)
}

/// Projected gradient descent on the cross-entropy within an `l2` or
/// `linf` ball of radius `epsilon`. Returns the adversarial rows.
#[pyfunction]
#[pyo3(signature = (model, x, y, norm, epsilon, n_steps = 40, seed = 0))]
fn pgd(model: &PyModel, x: Vec<Vec<f64>>, y: Vec<usize>, norm: &str, epsilon: f64, n_steps: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let norm: Norm = norm.parse().map_err(err)?;
    let cfg = AttackConfig { norm, epsilon, n_steps, ..AttackConfig::default() };
    let t = batch(&x, &model.inner.spec.input_shape).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(unbatch(&pgd_attack(&model.inner, &t, &y, &cfg, &mut rng).map_err(err)?))
}

#[pymodule]
#[pyo3(name = "ngebm")]
fn ngebm_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(ece, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(histogram, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_mixture, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(pgd, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_roundtrips_rows() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        let t = batch(&rows, &[2]).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(unbatch(&t), rows);
    }

    #[test]
    fn ragged_rows_are_rejected() {
        assert!(batch(&[vec![1.0, 2.0], vec![3.0]], &[2]).is_err());
    }
}
