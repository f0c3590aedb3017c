//! Python bindings: graphs, the classifier, GraphCAM, metrics and the
//! pipeline stages. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use gtp_core::graph::{build_adjacency, normalize_adjacency, Connectivity, WsiGraph};
use gtp_core::graphcam::{graphcam, reconstruct_heatmap};
use gtp_core::metrics;
use gtp_core::model::{self, GraphInput, GtpConfig, GtpParams, TrainExample};
use gtp_core::pipeline::{self, RunConfig};
use gtp_core::{GtpError, Tensor};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: GtpError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn run_config(json: Option<&str>) -> PyResult<RunConfig> {
    let cfg: RunConfig = match json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(format!("bad config: {e}")))?,
        None => RunConfig::default(),
    };
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

/// A patch graph: node features, 8-connected edges, grid coordinates.
#[pyclass(name = "Graph", from_py_object)]
#[derive(Clone)]
pub struct PyGraph {
    inner: WsiGraph,
}

#[pymethods]
impl PyGraph {
    #[new]
    #[pyo3(signature = (coords, features, label=None, slide_id="graph".to_string()))]
    fn new(coords: Vec<(i32, i32)>, features: Vec<Vec<f64>>, label: Option<usize>, slide_id: String) -> PyResult<Self> {
        let features = Tensor::from_rows(&features).map_err(err)?;
        let edges = build_adjacency(&coords, Connectivity::Eight).map_err(err)?;
        let inner = WsiGraph {
            slide_id,
            features,
            edges,
            coords,
            label,
            patch_size: 0,
            connectivity: Connectivity::Eight,
        };
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: WsiGraph::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn num_nodes(&self) -> usize {
        self.inner.num_nodes()
    }

    #[getter]
    fn edges(&self) -> Vec<(usize, usize)> {
        self.inner.edges.clone()
    }

    #[getter]
    fn label(&self) -> Option<usize> {
        self.inner.label
    }

    fn normalized_adjacency(&self) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&normalize_adjacency(&self.inner.edges, self.inner.num_nodes()).map_err(err)?.matrix))
    }

    fn permuted(&self, perm: Vec<usize>) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.permuted(&perm).map_err(err)?,
        })
    }
}

/// The graph-transformer classifier.
#[pyclass(name = "Model")]
pub struct PyModel {
    inner: GtpParams,
}

#[pymethods]
impl PyModel {
    /// Fresh parameters from a JSON model config (defaults when omitted).
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(config: Option<&str>) -> PyResult<Self> {
        let cfg: GtpConfig = match config {
            Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(format!("bad model config: {e}")))?,
            None => GtpConfig::default(),
        };
        Ok(Self {
            inner: GtpParams::init(cfg).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: model::load_model(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model::save_model(&path, &self.inner).map_err(err)
    }

    /// Trains on labelled graphs and returns the per-step total loss.
    fn fit(&mut self, py: Python<'_>, graphs: Vec<PyGraph>) -> PyResult<Vec<f64>> {
        let data = pipeline::examples(&graphs.into_iter().map(|g| g.inner).collect::<Vec<_>>()).map_err(err)?;
        let start = self.inner.clone();
        let (params, history) = py.detach(|| model::train_from(start, &data)).map_err(err)?;
        self.inner = params;
        Ok(history.iter().map(|h| h.total_loss).collect())
    }

    fn predict(&self, graph: &PyGraph) -> PyResult<Vec<f64>> {
        let input = GraphInput::from_graph(&graph.inner).map_err(err)?;
        Ok(model::forward(&self.inner, &input, false, None).map_err(err)?.probabilities())
    }

    /// Node relevance for `target` (predicted class when omitted).
    #[pyo3(signature = (graph, target=None, clamp=true))]
    fn explain<'py>(&self, py: Python<'py>, graph: &PyGraph, target: Option<usize>, clamp: bool) -> PyResult<Bound<'py, PyDict>> {
        let input = GraphInput::from_graph(&graph.inner).map_err(err)?;
        let (probs, mut trace) = model::infer(&self.inner, &input).map_err(err)?;
        let target = target.unwrap_or_else(|| metrics::argmax(&probs));
        let map = graphcam(&mut trace, &self.inner, target, clamp).map_err(err)?;
        let (r0, c0) = graph.inner.coords.iter().fold((0, 0), |(r, c), &(a, b)| (r.max(a), c.max(b)));
        let heat = reconstruct_heatmap(&map.c_g, &graph.inner.coords, r0 as usize + 1, c0 as usize + 1).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("target_class", target)?;
        d.set_item("class_probability", map.class_probability)?;
        d.set_item("node_relevance", map.c_g)?;
        d.set_item("token_relevance", rows(&map.c_t))?;
        d.set_item("grid", heat.cells)?;
        d.set_item("grid_shape", (heat.grid_rows, heat.grid_cols))?;
        Ok(d)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        use gtp_core::checkpoint::NamedParams;
        self.inner.num_scalars()
    }
}

#[pyfunction]
fn nt_xent_loss(z: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    gtp_core::contrastive::nt_xent_value(&Tensor::from_rows(&z).map_err(err)?, tau).map_err(err)
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    Ok(metrics::roc_auc(&scores, &labels).map_err(err)?.auc)
}

#[pyfunction]
fn delong_test<'py>(py: Python<'py>, scores_a: Vec<f64>, scores_b: Vec<f64>, labels: Vec<bool>) -> PyResult<Bound<'py, PyDict>> {
    let r = metrics::delong_test(&scores_a, &scores_b, &labels).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("auc_a", r.auc_a)?;
    d.set_item("auc_b", r.auc_b)?;
    d.set_item("z", r.z)?;
    d.set_item("log10_p", r.log10_p)?;
    Ok(d)
}

/// Writes a synthetic dataset; returns the number of slides.
#[pyfunction]
#[pyo3(signature = (out, config=None))]
fn synth(py: Python<'_>, out: PathBuf, config: Option<&str>) -> PyResult<usize> {
    let cfg = run_config(config)?;
    let m = py.detach(|| pipeline::generate_dataset(&cfg, &out)).map_err(err)?;
    Ok(m.slides.len())
}

/// Default run configuration as a JSON string.
#[pyfunction]
fn default_config() -> String {
    serde_json::to_string_pretty(&RunConfig::default()).expect("config serializes")
}

/// Trains a model directly on in-memory graphs with the given model config.
#[pyfunction]
#[pyo3(signature = (graphs, config=None))]
fn train(py: Python<'_>, graphs: Vec<PyGraph>, config: Option<&str>) -> PyResult<PyModel> {
    let cfg: GtpConfig = match config {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(format!("bad model config: {e}")))?,
        None => GtpConfig::default(),
    };
    let data: Vec<TrainExample> = pipeline::examples(&graphs.into_iter().map(|g| g.inner).collect::<Vec<_>>()).map_err(err)?;
    let (params, _) = py.detach(|| model::train(&data, &cfg)).map_err(err)?;
    Ok(PyModel { inner: params })
}

#[pymodule]
fn gtp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGraph>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(nt_xent_loss, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(delong_test, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add("LOG10_ALPHA_05", metrics::LOG10_ALPHA_05)?;
    Ok(())
}
