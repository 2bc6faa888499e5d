//! Python bindings for the xattn block-sparse attention toolkit.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use xattn::calibrate::{calibrate as run_calibration, FidelityEvaluator};
use xattn::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(format!("[{}] {other}", other.kind())),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for xattn::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Row-major float32 matrix (or stack of matrices).
#[pyclass(name = "Tensor", module = "pyxattn", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTensor(xattn::Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(rows: Vec<Vec<f32>>) -> PyResult<Self> {
        xattn::Tensor::from_rows(&rows).py().map(PyTensor)
    }

    #[staticmethod]
    fn from_flat(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        xattn::Tensor::new(shape, data).py().map(PyTensor)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        xattn::load_tensor(path).py().map(PyTensor)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        xattn::save_tensor(&self.0, path).py()
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.dims().to_vec()
    }

    fn flat(&self) -> Vec<f32> {
        self.0.data().to_vec()
    }

    fn tolist(&self) -> PyResult<Vec<Vec<f32>>> {
        let (_, c) = self.0.matrix_dims().py()?;
        Ok(self.0.data().chunks(c.max(1)).map(<[f32]>::to_vec).collect())
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.dims())
    }
}

/// Query, key and value matrices of one head.
#[pyclass(name = "AttentionInputs", module = "pyxattn", frozen, from_py_object)]
#[derive(Clone)]
struct PyInputs(xattn::AttentionInputs);

#[pymethods]
impl PyInputs {
    #[new]
    #[pyo3(signature = (q, k, v, causal = true))]
    fn new(q: &PyTensor, k: &PyTensor, v: &PyTensor, causal: bool) -> PyResult<Self> {
        xattn::AttentionInputs::new(q.0.clone(), k.0.clone(), v.0.clone(), causal)
            .py()
            .map(PyInputs)
    }

    #[getter]
    fn seq_len(&self) -> usize {
        self.0.seq_len()
    }

    #[getter]
    fn head_dim(&self) -> usize {
        self.0.head_dim()
    }

    #[getter]
    fn causal(&self) -> bool {
        self.0.causal()
    }

    #[getter]
    fn q(&self) -> PyTensor {
        PyTensor(self.0.q().clone())
    }

    #[getter]
    fn k(&self) -> PyTensor {
        PyTensor(self.0.k().clone())
    }

    #[getter]
    fn v(&self) -> PyTensor {
        PyTensor(self.0.v().clone())
    }

    fn __repr__(&self) -> String {
        format!(
            "AttentionInputs(seq_len={}, head_dim={}, causal={})",
            self.0.seq_len(),
            self.0.head_dim(),
            self.0.causal()
        )
    }
}

/// Block size, stride, threshold and selection policy.
///
/// `strategy` is "threshold", "topk:K" or "topratio:R"; `pattern` is
/// "antidiagonal", "diagonal", "fullsum" or "random:SEED".
#[pyclass(name = "SelectionConfig", module = "pyxattn", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig(xattn::SelectionConfig);

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (block_size = 128, stride = 8, tau = 0.9, strategy = "threshold", pattern = "antidiagonal",
                        causal = true, force_diagonal_block = true, force_first_block = false))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        block_size: usize,
        stride: usize,
        tau: f64,
        strategy: &str,
        pattern: &str,
        causal: bool,
        force_diagonal_block: bool,
        force_first_block: bool,
    ) -> PyResult<Self> {
        let cfg = xattn::SelectionConfig {
            block_size,
            stride,
            tau,
            strategy: strategy.parse().py()?,
            pattern: pattern.parse().py()?,
            causal,
            force_diagonal_block,
            force_first_block,
        };
        cfg.validate().py()?;
        Ok(PyConfig(cfg))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let cfg: xattn::SelectionConfig = serde_json::from_str(text).map_err(|e| py_err(e.into()))?;
        cfg.validate().py()?;
        Ok(PyConfig(cfg))
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(|e| py_err(e.into()))
    }

    #[getter]
    fn block_size(&self) -> usize {
        self.0.block_size
    }

    #[getter]
    fn stride(&self) -> usize {
        self.0.stride
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.0.tau
    }

    #[setter]
    fn set_tau(&mut self, tau: f64) -> PyResult<()> {
        let cfg = xattn::SelectionConfig { tau, ..self.0.clone() };
        cfg.validate().py()?;
        self.0 = cfg;
        Ok(())
    }

    #[getter]
    fn strategy(&self) -> String {
        self.0.strategy.to_string()
    }

    #[getter]
    fn pattern(&self) -> String {
        String::from(self.0.pattern)
    }

    #[getter]
    fn causal(&self) -> bool {
        self.0.causal
    }

    fn __repr__(&self) -> String {
        format!("SelectionConfig({})", self.to_json().unwrap_or_default())
    }
}

/// Boolean grid of selected (query block, key block) pairs.
#[pyclass(name = "BlockMask", module = "pyxattn", frozen)]
struct PyMask(xattn::BlockMask);

#[pymethods]
impl PyMask {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        xattn::BlockMask::load(path).py().map(PyMask)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).py()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.0.n_query_blocks(), self.0.n_key_blocks())
    }

    fn get(&self, q: usize, k: usize) -> PyResult<bool> {
        let (nq, nk) = self.shape();
        if q >= nq || k >= nk {
            return Err(PyValueError::new_err(format!(
                "block ({q}, {k}) outside a {nq}×{nk} mask"
            )));
        }
        Ok(self.0.get(q, k))
    }

    /// Selected key blocks of each query block.
    fn rows(&self) -> Vec<Vec<usize>> {
        (0..self.0.n_query_blocks())
            .map(|q| self.0.selected(q).collect())
            .collect()
    }

    fn count(&self) -> usize {
        self.0.count()
    }

    #[pyo3(signature = (causal = true))]
    fn density(&self, causal: bool) -> f64 {
        xattn::density(&self.0, causal)
    }

    fn __repr__(&self) -> String {
        let (nq, nk) = self.shape();
        format!("BlockMask({nq}×{nk}, selected={})", self.0.count())
    }
}

#[pyfunction]
fn full_attention(inp: &PyInputs) -> PyResult<PyTensor> {
    xattn::full_attention(&inp.0).py().map(PyTensor)
}

#[pyfunction]
fn build_mask(inp: &PyInputs, config: &PyConfig) -> PyResult<PyMask> {
    xattn::build_mask(&inp.0, &config.0).py().map(PyMask)
}

#[pyfunction]
fn block_probabilities(inp: &PyInputs, config: &PyConfig) -> PyResult<Vec<Vec<f64>>> {
    xattn::selection::block_prob_rows(&inp.0, &config.0).py()
}

#[pyfunction]
fn sparse_attention(inp: &PyInputs, mask: &PyMask, block_size: usize) -> PyResult<PyTensor> {
    xattn::sparse_attention(&inp.0, &mask.0, block_size).py().map(PyTensor)
}

#[pyfunction]
fn output_error(sparse: &PyTensor, full: &PyTensor) -> PyResult<f64> {
    xattn::output_error(&sparse.0, &full.0).py()
}

#[pyfunction]
#[pyo3(signature = (p, tau, forced = Vec::new()))]
fn find_blocks(p: Vec<f64>, tau: f64, forced: Vec<usize>) -> PyResult<Vec<usize>> {
    xattn::find_blocks(&p, tau, &forced).py()
}

#[pyfunction]
fn rank_correlation(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    xattn::rank_correlation(&a, &b).py()
}

#[pyfunction]
fn js_divergence(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    xattn::js_divergence(&p, &q).py()
}

/// Heads generated from a workload spec given as JSON text.
#[pyfunction]
fn generate_workload(spec_json: &str) -> PyResult<Vec<PyInputs>> {
    let spec = xattn::WorkloadSpec::from_json(spec_json).py()?;
    Ok(xattn::generate(&spec).py()?.into_iter().map(PyInputs).collect())
}

/// Per-head minimum thresholds. `workloads[w][h]` is head `h` of calibration
/// input `w`. Returns the calibration result as a dict.
#[pyfunction]
#[pyo3(signature = (workloads, config, budget = 8, t_init = 0.9, epsilon = 0.01))]
fn calibrate<'py>(
    py: Python<'py>,
    workloads: Vec<Vec<PyInputs>>,
    config: &PyConfig,
    budget: usize,
    t_init: f64,
    epsilon: f64,
) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
    let set = workloads
        .into_iter()
        .map(|w| w.into_iter().map(|h| h.0).collect())
        .collect();
    let ev = FidelityEvaluator::new(set, &config.0).py()?;
    let r = run_calibration(&ev, budget, t_init, epsilon).py()?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("thresholds", r.thresholds)?;
    d.set_item("step_counts", r.step_counts)?;
    d.set_item("baseline_perf", r.baseline_perf)?;
    d.set_item("final_perf", r.final_perf)?;
    d.set_item("t_init", r.t_init)?;
    d.set_item("epsilon", r.epsilon)?;
    Ok(d)
}

#[pymodule]
fn pyxattn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyInputs>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyMask>()?;
    m.add_function(wrap_pyfunction!(full_attention, m)?)?;
    m.add_function(wrap_pyfunction!(build_mask, m)?)?;
    m.add_function(wrap_pyfunction!(block_probabilities, m)?)?;
    m.add_function(wrap_pyfunction!(sparse_attention, m)?)?;
    m.add_function(wrap_pyfunction!(output_error, m)?)?;
    m.add_function(wrap_pyfunction!(find_blocks, m)?)?;
    m.add_function(wrap_pyfunction!(rank_correlation, m)?)?;
    m.add_function(wrap_pyfunction!(js_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(generate_workload, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    Ok(())
}
