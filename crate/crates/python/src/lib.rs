//! Python bindings: datasets, configurations, models, training protocols and
//! the self-check suites.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use dgm::checkpoint;
use dgm::config::{GraphMode, ModelConfig, NodeConv};
use dgm::data::{
    load_tabular, make_splits, synth_clusters as synth, write_tabular, ClusterSpec, NodeDataset, SplitScheme,
    TabularSchema,
};
use dgm::dgm::{edge_probabilities as probabilities, gumbel_top_k as sample, knn_baseline};
use dgm::graph::SampledGraph;
use dgm::model::{Model, ModelInputs};
use dgm::report::MetricsReport;
use dgm::rng::DgmRng;
use dgm::tensor::{Array, Tape};
use dgm::train::{self, History};
use dgm::Error;

type Edge = (usize, usize, f64);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        e @ (Error::Numeric(_) | Error::Domain { .. }) => PyArithmeticError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn rows(a: &Array) -> Vec<Vec<f64>> {
    (0..a.rows()).map(|i| a.row(i).to_vec()).collect()
}

fn array(rows: &[Vec<f64>]) -> PyResult<Array> {
    Array::from_rows(rows).map_err(py_err)
}

fn edges(g: &SampledGraph) -> Vec<Edge> {
    g.edges().collect()
}

/// Layer stack, optimiser schedule and inference settings.
#[pyclass(name = "Config", module = "dgm_py", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyConfig {
    /// Defaults, optionally overridden by TOML text.
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => ModelConfig::from_toml(t).map_err(py_err)?,
            None => ModelConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn pointcloud() -> Self {
        Self {
            inner: ModelConfig::pointcloud(),
        }
    }

    #[staticmethod]
    fn zero_shot() -> Self {
        Self {
            inner: ModelConfig::zero_shot(),
        }
    }

    fn knn_baseline(&self) -> Self {
        Self {
            inner: self.inner.knn_baseline(),
        }
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    /// Sets the sampled in-degree of every layer.
    fn set_neighbours(&mut self, k: usize) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.layers.iter_mut().for_each(|l| l.k = k);
        next.validate().map_err(py_err)?;
        self.inner = next;
        Ok(())
    }

    #[getter]
    fn neighbours(&self) -> Vec<usize> {
        self.inner.layers.iter().map(|l| l.k).collect()
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epochs
    }

    #[setter]
    fn set_epochs(&mut self, epochs: usize) {
        self.inner.epochs = epochs;
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    /// Weight of the graph loss.
    #[getter]
    fn graph_loss_weight(&self) -> f64 {
        self.inner.lambda
    }

    #[setter]
    fn set_graph_loss_weight(&mut self, w: f64) -> PyResult<()> {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(PyValueError::new_err("graph loss weight must be a non-negative number"));
        }
        self.inner.lambda = w;
        Ok(())
    }

    #[getter]
    fn repeats(&self) -> usize {
        self.inner.repeats
    }

    #[setter]
    fn set_repeats(&mut self, repeats: usize) -> PyResult<()> {
        if repeats == 0 {
            return Err(PyValueError::new_err("repeats must be at least 1"));
        }
        self.inner.repeats = repeats;
        Ok(())
    }

    #[getter]
    fn standardize(&self) -> bool {
        self.inner.standardize
    }

    #[setter]
    fn set_standardize(&mut self, on: bool) {
        self.inner.standardize = on;
    }

    /// `"dgm"`, `"mdgm"` or `"knn"`.
    #[getter]
    fn graph_mode(&self) -> &'static str {
        match self.inner.graph_mode {
            GraphMode::Dgm => "dgm",
            GraphMode::Mdgm => "mdgm",
            GraphMode::Knn => "knn",
        }
    }

    #[setter]
    fn set_graph_mode(&mut self, mode: &str) -> PyResult<()> {
        self.inner.graph_mode = match mode {
            "dgm" => GraphMode::Dgm,
            "mdgm" => GraphMode::Mdgm,
            "knn" => GraphMode::Knn,
            other => return Err(PyValueError::new_err(format!("unknown graph mode {other:?}"))),
        };
        Ok(())
    }

    /// `"edge_conv"` or `"sgcn"`.
    #[getter]
    fn node_conv(&self) -> &'static str {
        match self.inner.node_conv {
            NodeConv::EdgeConv => "edge_conv",
            NodeConv::Sgcn => "sgcn",
        }
    }

    #[setter]
    fn set_node_conv(&mut self, conv: &str) -> PyResult<()> {
        self.inner.node_conv = match conv {
            "edge_conv" => NodeConv::EdgeConv,
            "sgcn" => NodeConv::Sgcn,
            other => return Err(PyValueError::new_err(format!("unknown node convolution {other:?}"))),
        };
        Ok(())
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(graph_mode={:?}, node_conv={:?}, k={:?}, epochs={}, seed={})",
            self.graph_mode(),
            self.node_conv(),
            self.neighbours(),
            self.inner.epochs,
            self.inner.seed
        )
    }
}

/// Node features, labels and split masks.
#[pyclass(name = "Dataset", module = "dgm_py", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: NodeDataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (modality1, labels, modality2 = None))]
    fn new(modality1: Vec<Vec<f64>>, labels: Vec<usize>, modality2: Option<Vec<Vec<f64>>>) -> PyResult<Self> {
        let m2 = modality2.map(|m| array(&m)).transpose()?;
        let inner = NodeDataset::new(array(&modality1)?, m2, labels).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Reads a CSV; without a schema file the `label`, `m1_*` and `m2_*`
    /// headers define the columns.
    #[staticmethod]
    #[pyo3(signature = (path, schema = None))]
    fn load_csv(path: PathBuf, schema: Option<PathBuf>) -> PyResult<Self> {
        let schema = match schema {
            Some(s) => TabularSchema::load(&s),
            None => TabularSchema::from_header(&path),
        }
        .map_err(py_err)?;
        Ok(Self {
            inner: load_tabular(&path, &schema).map_err(py_err)?,
        })
    }

    fn save_csv(&self, path: PathBuf) -> PyResult<()> {
        write_tabular(&self.inner, &path, &TabularSchema::for_dataset(&self.inner)).map_err(py_err)
    }

    /// Copy with fresh masks. `scheme` is `"transductive"`, `"inductive"` or
    /// `"kfold"` (with `folds` and the chosen `fold`).
    #[pyo3(signature = (scheme, seed = 0, folds = 10, fold = 0))]
    fn with_split(&self, scheme: &str, seed: u64, folds: usize, fold: usize) -> PyResult<Self> {
        let scheme = match scheme {
            "transductive" => SplitScheme::Transductive,
            "inductive" => SplitScheme::Inductive,
            "kfold" => SplitScheme::KFold { folds },
            other => return Err(PyValueError::new_err(format!("unknown split scheme {other:?}"))),
        };
        let mut all = make_splits(&self.inner, scheme, seed).map_err(py_err)?;
        if fold >= all.len() {
            return Err(PyValueError::new_err(format!("fold {fold} out of range for {} folds", all.len())));
        }
        let masks = all.swap_remove(fold);
        Ok(Self {
            inner: self.inner.clone().with_masks(masks).map_err(py_err)?,
        })
    }

    #[getter]
    fn num_nodes(&self) -> usize {
        self.inner.num_nodes()
    }

    #[getter]
    fn class_count(&self) -> usize {
        self.inner.class_count
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels.clone()
    }

    #[getter]
    fn modality1(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.modality1)
    }

    #[getter]
    fn modality2(&self) -> Option<Vec<Vec<f64>>> {
        self.inner.modality2.as_ref().map(rows)
    }

    #[getter]
    fn train_mask(&self) -> Vec<bool> {
        self.inner.masks.train.clone()
    }

    #[getter]
    fn val_mask(&self) -> Vec<bool> {
        self.inner.masks.val.clone()
    }

    #[getter]
    fn test_mask(&self) -> Vec<bool> {
        self.inner.masks.test.clone()
    }

    #[getter]
    fn unseen_mask(&self) -> Vec<bool> {
        self.inner.masks.unseen.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.num_nodes()
    }
}

/// Parameters of a layer stack together with its configuration.
#[pyclass(name = "Model", module = "dgm_py", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: Model,
}

impl PyModel {
    fn inputs(&self, dataset: &PyDataset) -> PyResult<ModelInputs> {
        let ds = train::prepare(&dataset.inner, &self.inner.config).map_err(py_err)?;
        ModelInputs::from_dataset(&ds, &self.inner.config).map_err(py_err)
    }
}

#[pymethods]
impl PyModel {
    /// Freshly initialised model sized for `dataset`.
    #[new]
    fn new(config: &PyConfig, dataset: &PyDataset) -> PyResult<Self> {
        let c = &config.inner;
        let dims = Model::dims_for(&dataset.inner, c).map_err(py_err)?;
        Ok(Self {
            inner: Model::new(c.clone(), dims, c.seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = checkpoint::load(&path).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[pyo3(signature = (path, epoch = 0))]
    fn save(&self, path: PathBuf, epoch: usize) -> PyResult<()> {
        checkpoint::save(&path, &self.inner, epoch, None).map_err(py_err)
    }

    /// Labels from the summed softmax of `repeats` stochastic passes. The
    /// dataset is preprocessed with its own training mask, as in training.
    #[pyo3(signature = (dataset, repeats = 8, seed = 0))]
    fn predict(&self, dataset: &PyDataset, repeats: usize, seed: u64) -> PyResult<Vec<usize>> {
        let inputs = self.inputs(dataset)?;
        train::predict_stochastic(&self.inner, &inputs, repeats, seed).map_err(py_err)
    }

    /// Edge lists `(i, j, p_ij)` of every layer for one forward pass.
    #[pyo3(signature = (dataset, seed = 0))]
    fn sample_graphs(&self, dataset: &PyDataset, seed: u64) -> PyResult<Vec<Vec<Edge>>> {
        let inputs = self.inputs(dataset)?;
        let tape = Tape::new();
        let pass = self.inner.forward(&tape, &inputs, &DgmRng::new(seed)).map_err(py_err)?;
        Ok(pass.layers.iter().map(|l| edges(&l.graph)).collect())
    }

    #[getter]
    fn temperatures(&self) -> Vec<f64> {
        self.inner.temperatures()
    }

    #[getter]
    fn parameter_names(&self) -> Vec<String> {
        self.inner.params.names().map(str::to_string).collect()
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.inner.config.clone(),
        }
    }

    fn parameter(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let a = self
            .inner
            .params
            .get(name)
            .ok_or_else(|| PyValueError::new_err(format!("no parameter named {name:?}")))?;
        Ok((a.shape().to_vec(), a.data().to_vec()))
    }
}

/// Outcome of a train-then-evaluate run.
#[pyclass(name = "RunResult", module = "dgm_py")]
struct PyRun {
    #[pyo3(get)]
    model: PyModel,
    #[pyo3(get)]
    accuracy: f64,
    #[pyo3(get)]
    per_class_accuracy: Vec<f64>,
    #[pyo3(get)]
    predictions: Vec<usize>,
    history: History,
    report: String,
}

#[pymethods]
impl PyRun {
    fn task_losses(&self) -> Vec<f64> {
        self.history.epochs.iter().map(|e| e.task_loss).collect()
    }

    fn graph_losses(&self) -> Vec<f64> {
        self.history.epochs.iter().map(|e| e.graph_loss).collect()
    }

    /// Per-epoch homophily of the graphs sampled at `layer`.
    #[pyo3(signature = (layer = 0))]
    fn homophily(&self, layer: usize) -> Vec<Option<f64>> {
        self.history
            .epochs
            .iter()
            .map(|e| e.homophily.get(layer).copied().flatten())
            .collect()
    }

    #[pyo3(signature = (layer = 0))]
    fn temperature(&self, layer: usize) -> Vec<f64> {
        self.history
            .epochs
            .iter()
            .filter_map(|e| e.temperature.get(layer).copied())
            .collect()
    }

    /// Metrics report as sorted-key JSON.
    fn report_json(&self) -> String {
        self.report.clone()
    }
}

/// Trains on the dataset's training mask and scores its test mask, or with
/// `inductive`, trains without the unseen nodes and scores them.
#[pyfunction]
#[pyo3(signature = (config, dataset, inductive = false))]
fn train_model(config: &PyConfig, dataset: &PyDataset, inductive: bool) -> PyResult<PyRun> {
    let c = &config.inner;
    let out = if inductive {
        train::run_inductive(c, &dataset.inner)
    } else {
        train::run_transductive(c, &dataset.inner)
    }
    .map_err(py_err)?;
    let mut report =
        MetricsReport::new(if inductive { "inductive" } else { "transductive" }, c).with_history(&out.history);
    report.accuracy = Some(out.evaluation.accuracy);
    report.per_class_accuracy = Some(out.evaluation.per_class_accuracy.clone());
    Ok(PyRun {
        model: PyModel { inner: out.model },
        accuracy: out.evaluation.accuracy,
        per_class_accuracy: out.evaluation.per_class_accuracy,
        predictions: out.evaluation.predictions,
        report: report.to_json().map_err(py_err)?,
        history: out.history,
    })
}

/// Stratified k-fold accuracy: `(mean, sample std, per-fold accuracies)`.
#[pyfunction]
#[pyo3(signature = (config, dataset, folds = 10))]
fn cross_validate(config: &PyConfig, dataset: &PyDataset, folds: usize) -> PyResult<(f64, f64, Vec<f64>)> {
    let cv = train::cross_validate(&config.inner, &dataset.inner, folds).map_err(py_err)?;
    Ok((cv.mean, cv.std, cv.fold_accuracy))
}

#[pyfunction]
#[pyo3(signature = (nodes = 300, classes = 3, node_dim = 8, graph_dim = 3, separation = 1.0, noise = 0.1, node_signal = 2.0, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn synth_clusters(
    nodes: usize,
    classes: usize,
    node_dim: usize,
    graph_dim: usize,
    separation: f64,
    noise: f64,
    node_signal: f64,
    seed: u64,
) -> PyResult<PyDataset> {
    let mut spec = ClusterSpec::new(nodes, classes, node_dim, graph_dim, separation, noise, seed);
    spec.node_signal = node_signal;
    Ok(PyDataset {
        inner: synth(&spec).map_err(py_err)?,
    })
}

/// `p_ij = exp(−t ‖x_i − x_j‖²)` for the rows of `points`.
#[pyfunction]
fn edge_probabilities(points: Vec<Vec<f64>>, temperature: f64) -> PyResult<Vec<Vec<f64>>> {
    let tape = Tape::new();
    let p = probabilities(&tape.constant(&array(&points)?), &tape.scalar(temperature)).map_err(py_err)?;
    Ok(rows(&p.probs.to_array()))
}

/// `k` sampled in-neighbours per node, as `(i, j, p_ij)` edges.
#[pyfunction]
#[pyo3(signature = (points, temperature, k, seed = 0))]
fn gumbel_top_k(points: Vec<Vec<f64>>, temperature: f64, k: usize, seed: u64) -> PyResult<Vec<Edge>> {
    let tape = Tape::new();
    let p = probabilities(&tape.constant(&array(&points)?), &tape.scalar(temperature)).map_err(py_err)?;
    Ok(edges(&sample(&p, k, &mut DgmRng::new(seed)).map_err(py_err)?))
}

/// The `k` nearest other points of each node.
#[pyfunction]
fn knn_graph(points: Vec<Vec<f64>>, k: usize) -> PyResult<Vec<Edge>> {
    let tape = Tape::new();
    let p = probabilities(&tape.constant(&array(&points)?), &tape.scalar(1.0)).map_err(py_err)?;
    Ok(edges(&knn_baseline(&p, k).map_err(py_err)?))
}

/// Share of edges joining equal labels; `None` without edges.
#[pyfunction]
fn homophily(num_nodes: usize, edge_list: Vec<Edge>, labels: Vec<usize>) -> PyResult<Option<f64>> {
    if labels.len() != num_nodes {
        return Err(PyValueError::new_err("one label per node is required"));
    }
    let g = SampledGraph::from_edges(num_nodes, edge_list).map_err(py_err)?;
    Ok(dgm::metrics::homophily(&g, &labels, &vec![true; num_nodes]))
}

#[pyfunction]
fn mean_iou(pred: Vec<Vec<usize>>, truth: Vec<Vec<usize>>, part_sets: Vec<Vec<usize>>) -> PyResult<f64> {
    dgm::metrics::mean_iou(&pred, &truth, &part_sets).map_err(py_err)
}

/// `(name, max relative error, passed)` for every finite-difference check.
#[pyfunction]
fn gradcheck() -> PyResult<Vec<(String, f64, bool)>> {
    Ok(dgm::verify::gradient_suite()
        .map_err(py_err)?
        .into_iter()
        .map(|c| (c.name, c.report.max_rel_error, c.report.passed()))
        .collect())
}

/// `(name, p-value, passed)` for every sampler check.
#[pyfunction]
#[pyo3(signature = (draws = 100_000, seed = 0))]
fn sample_test(draws: usize, seed: u64) -> PyResult<Vec<(String, f64, bool)>> {
    Ok(dgm::verify::sampling_suite(draws, seed)
        .map_err(py_err)?
        .into_iter()
        .map(|c| (c.name, c.p_value, c.passed))
        .collect())
}

#[pymodule]
fn dgm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyRun>()?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(cross_validate, m)?)?;
    m.add_function(wrap_pyfunction!(synth_clusters, m)?)?;
    m.add_function(wrap_pyfunction!(edge_probabilities, m)?)?;
    m.add_function(wrap_pyfunction!(gumbel_top_k, m)?)?;
    m.add_function(wrap_pyfunction!(knn_graph, m)?)?;
    m.add_function(wrap_pyfunction!(homophily, m)?)?;
    m.add_function(wrap_pyfunction!(mean_iou, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(sample_test, m)?)?;
    Ok(())
}
