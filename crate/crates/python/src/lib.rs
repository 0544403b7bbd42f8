//! Python bindings over the core crate: dataset generation, model
//! training and scoring, streaming thresholds, and full simulation
//! runs. Functions mirror the `dragon` CLI commands and return their
//! JSON outcomes as plain dicts; classes wrap the model checkpoint and
//! the streaming threshold for incremental use.

use std::path::PathBuf;
use std::str::FromStr;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyFloat, PyList, PyString};

use dragon_core::cli::{
    self, CompareArgs, DetectArgs, EvalArgs, GenArgs, LayerFlags, ModelCheckpoint, SimArgs,
    SimFlags, TrainArgs,
};
use dragon_core::config::{ModeChoice, Topology};
use dragon_core::dataset::TimeSeriesDataset;
use dragon_core::detection;
use dragon_core::error::Error as CoreError;
use dragon_core::simulator::QosMode;
use dragon_core::tensor::Tensor;
use dragon_core::workload::SchedulerPolicy;

fn pyerr(e: CoreError) -> PyErr {
    match &e {
        CoreError::Io(..) => PyIOError::new_err(e.to_string()),
        CoreError::Numerical(..) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Serialize through serde_json and rebuild as Python objects, so the
/// dicts match the CLI's JSON output field for field.
fn to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<Py<PyAny>> {
    Ok(match v {
        serde_json::Value::Null => py.None(),
        serde_json::Value::Bool(b) => PyBool::new(py, *b).to_owned().into_any().unbind(),
        serde_json::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_pyobject(py)?.into_any().unbind()
            } else if let Some(u) = n.as_u64() {
                u.into_pyobject(py)?.into_any().unbind()
            } else {
                PyFloat::new(py, n.as_f64().unwrap_or(f64::NAN)).into_any().unbind()
            }
        }
        serde_json::Value::String(s) => PyString::new(py, s).into_any().unbind(),
        serde_json::Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(to_py(py, item)?)?;
            }
            list.into_any().unbind()
        }
        serde_json::Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, to_py(py, item)?)?;
            }
            dict.into_any().unbind()
        }
    })
}

fn outcome_to_py<T: serde::Serialize>(py: Python<'_>, outcome: &T) -> PyResult<Py<PyAny>> {
    let value = serde_json::to_value(outcome)
        .map_err(|e| PyValueError::new_err(format!("outcome serialization: {e}")))?;
    to_py(py, &value)
}

/// Accepts 1|2|3 (reference layouts) or a federation TOML path.
fn parse_topology(v: &Bound<'_, PyAny>) -> PyResult<Topology> {
    let text = if let Ok(n) = v.extract::<u64>() {
        n.to_string()
    } else {
        v.extract::<String>()?
    };
    Topology::from_str(&text).map_err(pyerr)
}

fn parse_mode(s: &str) -> PyResult<ModeChoice> {
    ModeChoice::from_str(s).map_err(pyerr)
}

fn rows_to_tensor(rows: &[Vec<f64>], what: &str) -> PyResult<Tensor> {
    let n_rows = rows.len();
    let n_cols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != n_cols) {
        return Err(PyValueError::new_err(format!("{what}: ragged rows")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::new(vec![n_rows, n_cols], flat).map_err(pyerr)
}

/// One-sided reconstruction residual: the pooled L2 norm of
/// max(observed - reconstructed, 0) and the per-row norms.
#[pyfunction]
fn fault_score(observed: Vec<Vec<f64>>, reconstructed: Vec<Vec<f64>>) -> PyResult<(f64, Vec<f64>)> {
    let obs = rows_to_tensor(&observed, "observed")?;
    let rec = rows_to_tensor(&reconstructed, "reconstructed")?;
    detection::fault_score(&obs, &rec).map_err(pyerr)
}

/// Expand detections to cover whole ground-truth anomaly segments that
/// they hit anywhere.
#[pyfunction]
fn point_adjust(pred: Vec<bool>, truth: Vec<bool>) -> PyResult<Vec<bool>> {
    detection::point_adjust(&pred, &truth).map_err(pyerr)
}

/// Point-adjusted accuracy, precision, recall, F1 and AUROC.
#[pyfunction]
fn detection_metrics(
    py: Python<'_>,
    scores: Vec<f64>,
    pred: Vec<bool>,
    truth: Vec<bool>,
) -> PyResult<Py<PyAny>> {
    let m = detection::metrics::detection_metrics(&scores, &pred, &truth).map_err(pyerr)?;
    outcome_to_py(py, &m)
}

/// Streaming threshold pass over a score series; returns per-point
/// labels and the final threshold (infinity while warming up).
#[pyfunction]
#[pyo3(signature = (scores, q_low=0.07, q_risk=1e-4))]
fn spot_stream(scores: Vec<f64>, q_low: f64, q_risk: f64) -> PyResult<(Vec<bool>, f64)> {
    cli::spot_stream(&scores, q_low, q_risk).map_err(pyerr)
}

/// Streaming peaks-over-threshold detector. Scores below the low
/// quantile refit the tail; `threshold()` is None until enough tail
/// mass has been seen.
#[pyclass(name = "SpotDetector")]
struct PySpotDetector {
    inner: detection::pot::SpotDetector,
}

#[pymethods]
impl PySpotDetector {
    #[new]
    #[pyo3(signature = (q_low=0.07, q_risk=1e-4, capacity=500, refine=false))]
    fn new(q_low: f64, q_risk: f64, capacity: usize, refine: bool) -> PyResult<Self> {
        let inner =
            detection::pot::SpotDetector::new(q_low, q_risk, capacity, refine).map_err(pyerr)?;
        Ok(PySpotDetector { inner })
    }

    fn observe(&mut self, score: f64) -> PyResult<()> {
        self.inner.observe(score).map_err(pyerr)?;
        Ok(())
    }

    fn threshold(&self) -> Option<f64> {
        self.inner.threshold()
    }
}

/// A trained model checkpoint: the network plus the input scaling it
/// was fitted with.
#[pyclass(name = "Model")]
struct PyModel {
    ckpt: ModelCheckpoint,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel { ckpt: ModelCheckpoint::load(&path).map_err(pyerr)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.ckpt.save(&path).map_err(pyerr)
    }

    /// Features per entity row.
    #[getter]
    fn n_features(&self) -> usize {
        self.ckpt.net.cfg().n_features
    }

    #[getter]
    fn window_len(&self) -> usize {
        self.ckpt.net.cfg().window_len
    }

    /// Largest entity count the schedule encoding accepts.
    #[getter]
    fn m_max(&self) -> usize {
        self.ckpt.net.cfg().m_max
    }

    #[getter]
    fn width(&self) -> usize {
        self.ckpt.net.cfg().width
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.ckpt.net.param_count()
    }

    #[getter]
    fn normalized(&self) -> bool {
        self.ckpt.normalizer.is_some()
    }

    /// Score a time series row by row, exactly as `detect` does:
    /// scale, window, generate, pool the one-sided residual.
    #[pyo3(signature = (features, seed=0))]
    fn score(&self, features: Vec<Vec<f64>>, seed: u64) -> PyResult<Vec<f64>> {
        let ds = TimeSeriesDataset::new(features, None).map_err(pyerr)?;
        cli::score_dataset(&self.ckpt.net, &ds, self.ckpt.normalizer.as_ref(), seed)
            .map_err(pyerr)
    }

    fn __repr__(&self) -> String {
        let cfg = self.ckpt.net.cfg();
        format!(
            "Model(n_features={}, window_len={}, m_max={}, width={}, params={})",
            cfg.n_features,
            cfg.window_len,
            cfg.m_max,
            cfg.width,
            self.ckpt.net.param_count()
        )
    }
}

/// Write a synthetic labeled time-series CSV.
#[pyfunction]
#[pyo3(signature = (out, rows=5000, dims=55, fraction=0.1369, seed=0, min_segment=None,
                    max_segment=None, spike_min=None, spike_max=None, noise_sigma=None,
                    affected=None))]
#[allow(clippy::too_many_arguments)]
fn gen_synthetic(
    py: Python<'_>,
    out: PathBuf,
    rows: usize,
    dims: usize,
    fraction: f64,
    seed: u64,
    min_segment: Option<usize>,
    max_segment: Option<usize>,
    spike_min: Option<f64>,
    spike_max: Option<f64>,
    noise_sigma: Option<f64>,
    affected: Option<f64>,
) -> PyResult<Py<PyAny>> {
    let args = GenArgs {
        out,
        rows,
        dims,
        fraction,
        seed,
        min_segment,
        max_segment,
        spike_min,
        spike_max,
        noise_sigma,
        affected,
    };
    let outcome = cli::cmd_gen_synthetic(&args).map_err(pyerr)?;
    outcome_to_py(py, &outcome)
}

/// Train a reconstruction model on a CSV; identical protocol to the
/// CLI `train` command (temporal split, clean windows, best held-out
/// F1 checkpointing).
#[pyfunction]
#[pyo3(signature = (data, out, curve=None, resume=None, epochs=60, batch=16, steps=8, lr=1e-3,
                    width=32, rounds=2, n_per_entity=7, window_k=10, gen_iters=10, gen_lr=0.05,
                    split=0.8, patience=10, eval_every=1, q_low=0.07, q_risk=1e-4, seed=0))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    data: PathBuf,
    out: PathBuf,
    curve: Option<PathBuf>,
    resume: Option<PathBuf>,
    epochs: usize,
    batch: usize,
    steps: usize,
    lr: f64,
    width: usize,
    rounds: usize,
    n_per_entity: usize,
    window_k: usize,
    gen_iters: usize,
    gen_lr: f64,
    split: f64,
    patience: usize,
    eval_every: usize,
    q_low: f64,
    q_risk: f64,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let args = TrainArgs {
        data,
        out,
        curve,
        resume,
        epochs,
        batch,
        steps,
        lr,
        width,
        rounds,
        n_per_entity,
        window_k,
        gen_iters,
        gen_lr,
        split,
        patience,
        eval_every,
        q_low,
        q_risk,
        seed,
    };
    let outcome = cli::cmd_train(&args).map_err(pyerr)?;
    outcome_to_py(py, &outcome)
}

/// Score a CSV with a checkpoint and threshold the scores online.
#[pyfunction]
#[pyo3(signature = (checkpoint, data, out=None, scores=None, q_low=0.07, q_risk=1e-4, seed=0))]
fn detect(
    py: Python<'_>,
    checkpoint: PathBuf,
    data: PathBuf,
    out: Option<PathBuf>,
    scores: Option<PathBuf>,
    q_low: f64,
    q_risk: f64,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let args = DetectArgs { checkpoint, data, out, scores, q_low, q_risk, seed };
    let outcome = cli::cmd_detect(&args).map_err(pyerr)?;
    outcome_to_py(py, &outcome)
}

#[allow(clippy::too_many_arguments)]
fn layer_from_options(
    topology: Option<&Bound<'_, PyAny>>,
    mode: Option<&str>,
    lookahead: Option<usize>,
    window_k: Option<usize>,
    seed: Option<u64>,
    intervals: Option<u64>,
    alpha: Option<f64>,
    beta: Option<f64>,
    delta1: Option<f64>,
    delta2: Option<f64>,
    qos_mode: Option<&str>,
    q_low: Option<f64>,
    q_risk: Option<f64>,
    arrival_rate: Option<f64>,
    fault_rate: Option<f64>,
    slo_multiplier: Option<f64>,
    initial_temp: Option<f64>,
    cooling: Option<f64>,
    anneal_iters: Option<usize>,
    scheduler: Option<&str>,
    finetune_lr: Option<f64>,
    threads: Option<usize>,
    checkpoint: Option<PathBuf>,
    out_dir: Option<PathBuf>,
) -> PyResult<LayerFlags> {
    Ok(LayerFlags {
        topology: topology.map(parse_topology).transpose()?,
        mode: mode.map(parse_mode).transpose()?,
        lookahead,
        window_k,
        seed,
        intervals,
        alpha,
        beta,
        delta1,
        delta2,
        qos_mode: qos_mode.map(|s| QosMode::from_str(s).map_err(pyerr)).transpose()?,
        q_low,
        q_risk,
        arrival_rate,
        fault_rate,
        slo_multiplier,
        initial_temp,
        cooling,
        anneal_iters,
        scheduler: scheduler.map(|s| SchedulerPolicy::from_str(s).map_err(pyerr)).transpose()?,
        finetune_lr,
        threads,
        checkpoint,
        out_dir,
    })
}

/// Run one simulation and write its report; returns the summary and
/// output paths. Unset options fall through to the config file (or the
/// DRAGON_CONFIG env var), then to built-in defaults.
#[pyfunction]
#[pyo3(signature = (topology=None, mode=None, lookahead=None, window_k=None, seed=None,
                    intervals=None, alpha=None, beta=None, delta1=None, delta2=None,
                    qos_mode=None, q_low=None, q_risk=None, arrival_rate=None, fault_rate=None,
                    slo_multiplier=None, initial_temp=None, cooling=None, anneal_iters=None,
                    scheduler=None, finetune_lr=None, threads=None, checkpoint=None,
                    out_dir=None, config=None, pretrain_intervals=60, pretrain_epochs=30,
                    save_checkpoint=None))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    py: Python<'_>,
    topology: Option<&Bound<'_, PyAny>>,
    mode: Option<&str>,
    lookahead: Option<usize>,
    window_k: Option<usize>,
    seed: Option<u64>,
    intervals: Option<u64>,
    alpha: Option<f64>,
    beta: Option<f64>,
    delta1: Option<f64>,
    delta2: Option<f64>,
    qos_mode: Option<&str>,
    q_low: Option<f64>,
    q_risk: Option<f64>,
    arrival_rate: Option<f64>,
    fault_rate: Option<f64>,
    slo_multiplier: Option<f64>,
    initial_temp: Option<f64>,
    cooling: Option<f64>,
    anneal_iters: Option<usize>,
    scheduler: Option<&str>,
    finetune_lr: Option<f64>,
    threads: Option<usize>,
    checkpoint: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    config: Option<PathBuf>,
    pretrain_intervals: u64,
    pretrain_epochs: usize,
    save_checkpoint: Option<PathBuf>,
) -> PyResult<Py<PyAny>> {
    let layer = layer_from_options(
        topology, mode, lookahead, window_k, seed, intervals, alpha, beta, delta1, delta2,
        qos_mode, q_low, q_risk, arrival_rate, fault_rate, slo_multiplier, initial_temp, cooling,
        anneal_iters, scheduler, finetune_lr, threads, checkpoint, out_dir,
    )?;
    let args = SimArgs {
        flags: SimFlags { config, layer, pretrain_intervals, pretrain_epochs, save_checkpoint },
    };
    let outcome = cli::cmd_simulate(args).map_err(pyerr)?;
    outcome_to_py(py, &outcome)
}

/// Recompute the summary of a written trace; optionally score SLO
/// violations against a reference sidecar or rewrite the report.
#[pyfunction]
#[pyo3(signature = (trace, out_dir=None, reference=None, write_reference=None))]
fn evaluate(
    py: Python<'_>,
    trace: PathBuf,
    out_dir: Option<PathBuf>,
    reference: Option<PathBuf>,
    write_reference: Option<PathBuf>,
) -> PyResult<Py<PyAny>> {
    let args = EvalArgs { trace, out_dir, reference, write_reference };
    let outcome = cli::cmd_evaluate(&args).map_err(pyerr)?;
    outcome_to_py(py, &outcome)
}

/// Paired-seed comparison across remediation modes; each seed shares
/// one pretrained model across the modes it pairs.
#[pyfunction]
#[pyo3(signature = (modes, seeds, topology=None, lookahead=None, window_k=None, intervals=None,
                    alpha=None, beta=None, delta1=None, delta2=None, qos_mode=None, q_low=None,
                    q_risk=None, arrival_rate=None, fault_rate=None, slo_multiplier=None,
                    initial_temp=None, cooling=None, anneal_iters=None, scheduler=None,
                    finetune_lr=None, threads=None, checkpoint=None, out_dir=None, config=None,
                    pretrain_intervals=60, pretrain_epochs=30, out=None))]
#[allow(clippy::too_many_arguments)]
fn compare(
    py: Python<'_>,
    modes: Vec<String>,
    seeds: Vec<u64>,
    topology: Option<&Bound<'_, PyAny>>,
    lookahead: Option<usize>,
    window_k: Option<usize>,
    intervals: Option<u64>,
    alpha: Option<f64>,
    beta: Option<f64>,
    delta1: Option<f64>,
    delta2: Option<f64>,
    qos_mode: Option<&str>,
    q_low: Option<f64>,
    q_risk: Option<f64>,
    arrival_rate: Option<f64>,
    fault_rate: Option<f64>,
    slo_multiplier: Option<f64>,
    initial_temp: Option<f64>,
    cooling: Option<f64>,
    anneal_iters: Option<usize>,
    scheduler: Option<&str>,
    finetune_lr: Option<f64>,
    threads: Option<usize>,
    checkpoint: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    config: Option<PathBuf>,
    pretrain_intervals: u64,
    pretrain_epochs: usize,
    out: Option<PathBuf>,
) -> PyResult<Py<PyAny>> {
    let layer = layer_from_options(
        topology, None, lookahead, window_k, None, intervals, alpha, beta, delta1, delta2,
        qos_mode, q_low, q_risk, arrival_rate, fault_rate, slo_multiplier, initial_temp, cooling,
        anneal_iters, scheduler, finetune_lr, threads, checkpoint, out_dir,
    )?;
    let modes = modes
        .iter()
        .map(|s| parse_mode(s))
        .collect::<PyResult<Vec<ModeChoice>>>()?;
    let args = CompareArgs {
        flags: SimFlags {
            config,
            layer,
            pretrain_intervals,
            pretrain_epochs,
            save_checkpoint: None,
        },
        modes,
        seeds,
        out,
    };
    let outcome = cli::cmd_compare(args).map_err(pyerr)?;
    outcome_to_py(py, &outcome)
}

#[pymodule]
fn dragon_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PySpotDetector>()?;
    m.add_function(wrap_pyfunction!(fault_score, m)?)?;
    m.add_function(wrap_pyfunction!(point_adjust, m)?)?;
    m.add_function(wrap_pyfunction!(detection_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(spot_stream, m)?)?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(detect, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    Ok(())
}
