//! Python bindings for `must_core`. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use must_core::analysis;
use must_core::cli::{self, Analysis, RunConfig};
use must_core::datasets::{self, EvalSet, Scenario, SourceDomain, SyntheticSpec, TargetDomain};
use must_core::must::{self, Domains, Snapshot, TrainOptions, Variant};
use must_core::nn::{self, ArchSpec};
use must_core::rv::{self, Criterion};
use must_core::{Error, Matrix};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for must_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).py()
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().py()
}

/// Hyperparameters of one training run.
#[pyclass(name = "TrainerConfig", from_py_object)]
#[derive(Clone)]
struct PyTrainerConfig {
    #[pyo3(get, set)]
    lambda_: f64,
    #[pyo3(get, set)]
    confidence_threshold: f64,
    #[pyo3(get, set)]
    lr: f64,
    #[pyo3(get, set)]
    momentum: f64,
    #[pyo3(get, set)]
    steps: usize,
    #[pyo3(get, set)]
    batch_size: usize,
    #[pyo3(get, set)]
    seed: u64,
    #[pyo3(get, set)]
    record_every: usize,
    /// "must", "only-bn" or "source-only".
    #[pyo3(get, set)]
    variant: String,
    #[pyo3(get, set)]
    teacher_hidden: Vec<usize>,
    #[pyo3(get, set)]
    teacher_input_bn: bool,
    #[pyo3(get, set)]
    teacher_hidden_bn: bool,
    #[pyo3(get, set)]
    student_hidden: Vec<usize>,
    #[pyo3(get, set)]
    student_input_bn: bool,
    #[pyo3(get, set)]
    student_hidden_bn: bool,
}

impl PyTrainerConfig {
    fn from_core(c: &must::TrainerConfig) -> Self {
        PyTrainerConfig {
            lambda_: c.lambda,
            confidence_threshold: c.confidence_threshold,
            lr: c.lr,
            momentum: c.momentum,
            steps: c.steps,
            batch_size: c.batch_size,
            seed: c.seed,
            record_every: c.record_every,
            variant: c.variant.to_string(),
            teacher_hidden: c.teacher_arch.hidden.clone(),
            teacher_input_bn: c.teacher_arch.input_bn,
            teacher_hidden_bn: c.teacher_arch.hidden_bn,
            student_hidden: c.student_arch.hidden.clone(),
            student_input_bn: c.student_arch.input_bn,
            student_hidden_bn: c.student_arch.hidden_bn,
        }
    }

    fn to_core(&self) -> PyResult<must::TrainerConfig> {
        let cfg = must::TrainerConfig {
            lambda: self.lambda_,
            confidence_threshold: self.confidence_threshold,
            lr: self.lr,
            momentum: self.momentum,
            steps: self.steps,
            batch_size: self.batch_size,
            seed: self.seed,
            record_every: self.record_every,
            variant: parse::<Variant>(&self.variant)?,
            teacher_arch: ArchSpec {
                hidden: self.teacher_hidden.clone(),
                input_bn: self.teacher_input_bn,
                hidden_bn: self.teacher_hidden_bn,
                head: None,
            },
            student_arch: ArchSpec {
                hidden: self.student_hidden.clone(),
                input_bn: self.student_input_bn,
                hidden_bn: self.student_hidden_bn,
                head: None,
            },
        };
        cfg.validate().py()?;
        Ok(cfg)
    }
}

#[pymethods]
impl PyTrainerConfig {
    /// Defaults; any field may be given as a keyword.
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut cfg = Self::from_core(&must::TrainerConfig::default());
        if let Some(kw) = kwargs {
            let obj = Bound::new(kw.py(), cfg)?;
            for (k, v) in kw.iter() {
                obj.setattr(k.extract::<String>()?.as_str(), v)?;
            }
            cfg = obj.borrow().clone();
        }
        cfg.to_core()?;
        Ok(cfg)
    }

    fn __repr__(&self) -> String {
        format!(
            "TrainerConfig(lambda_={}, confidence_threshold={}, lr={}, momentum={}, steps={}, batch_size={}, seed={}, variant={:?})",
            self.lambda_, self.confidence_threshold, self.lr, self.momentum, self.steps, self.batch_size, self.seed, self.variant
        )
    }
}

/// Sources, unlabeled target and held-out target labels of one problem.
#[pyclass(name = "Problem", skip_from_py_object)]
struct PyProblem {
    sources: Vec<SourceDomain>,
    target: TargetDomain,
    eval: Option<EvalSet>,
    #[pyo3(get)]
    num_classes: usize,
}

impl PyProblem {
    fn domains(&self) -> Domains<'_> {
        Domains {
            sources: &self.sources,
            target: &self.target,
            num_classes: self.num_classes,
        }
    }
}

#[pymethods]
impl PyProblem {
    /// Builds a problem from Python data; `eval_labels` is optional.
    #[new]
    #[pyo3(signature = (sources, target, num_classes, eval_labels=None))]
    fn new(
        sources: Vec<(Vec<Vec<f64>>, Vec<usize>)>,
        target: Vec<Vec<f64>>,
        num_classes: usize,
        eval_labels: Option<Vec<usize>>,
    ) -> PyResult<Self> {
        let sources = sources
            .into_iter()
            .enumerate()
            .map(|(k, (x, y))| {
                Ok(SourceDomain {
                    name: format!("source_{k}"),
                    features: matrix(x)?,
                    labels: y,
                })
            })
            .collect::<PyResult<Vec<_>>>()?;
        let features = matrix(target)?;
        let eval = eval_labels.map(|labels| EvalSet {
            features: features.clone(),
            labels,
        });
        Ok(PyProblem {
            sources,
            target: TargetDomain {
                name: "target".into(),
                features,
            },
            eval,
            num_classes,
        })
    }

    #[getter]
    fn sources(&self) -> Vec<(Vec<Vec<f64>>, Vec<usize>)> {
        self.sources.iter().map(|s| (s.features.to_rows(), s.labels.clone())).collect()
    }

    #[getter]
    fn target(&self) -> Vec<Vec<f64>> {
        self.target.features.to_rows()
    }

    #[getter]
    fn eval_labels(&self) -> Option<Vec<usize>> {
        self.eval.as_ref().map(|e| e.labels.clone())
    }
}

/// Multi-domain MLP checkpoint.
#[pyclass(name = "Network", from_py_object)]
#[derive(Clone)]
struct PyNetwork {
    inner: nn::Network,
}

#[pymethods]
impl PyNetwork {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyNetwork {
            inner: nn::Network::load_checkpoint(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_checkpoint(&path).py()
    }

    #[getter]
    fn num_domains(&self) -> usize {
        self.inner.num_domains()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn param_vector(&self) -> Vec<f64> {
        self.inner.param_vector()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.param_names()
    }

    /// Eval-mode class probabilities through batch-norm entry `domain`.
    fn predict_proba(&self, x: Vec<Vec<f64>>, domain: usize) -> PyResult<Vec<Vec<f64>>> {
        Ok(self.inner.predict_proba(&matrix(x)?, domain).py()?.to_rows())
    }

    fn predict(&self, x: Vec<Vec<f64>>, domain: usize) -> PyResult<Vec<usize>> {
        must::predict(&self.inner, &matrix(x)?, domain).py()
    }
}

#[pyclass(name = "TrainedPair", skip_from_py_object)]
struct PyTrainedPair {
    inner: must::TrainedPair,
}

#[pymethods]
impl PyTrainedPair {
    #[getter]
    fn teacher(&self) -> PyNetwork {
        PyNetwork {
            inner: self.inner.teacher.clone(),
        }
    }

    #[getter]
    fn student(&self) -> PyNetwork {
        PyNetwork {
            inner: self.inner.student.clone(),
        }
    }

    #[getter]
    fn teacher_target_domain(&self) -> usize {
        self.inner.teacher_target_domain()
    }

    /// Recorded steps as dicts keyed by the log CSV columns.
    #[getter]
    fn log<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner
            .log
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("step", r.step)?;
                d.set_item("source_domain", r.source_domain)?;
                d.set_item("loss_teacher_clf", r.loss_teacher_clf)?;
                d.set_item("loss_student", r.loss_student)?;
                d.set_item("loss_teacher_total", r.loss_teacher_total)?;
                d.set_item("pct_confident", r.pct_confident)?;
                d.set_item("teacher_src_acc", r.teacher_src_acc)?;
                d.set_item("teacher_tgt_acc", r.teacher_tgt_acc)?;
                d.set_item("student_tgt_acc", r.student_tgt_acc)?;
                Ok(d)
            })
            .collect()
    }

    /// `(step, teacher target probabilities)` pairs.
    #[getter]
    fn snapshots(&self) -> Vec<(usize, Vec<Vec<f64>>)> {
        self.inner.snapshots.iter().map(|s| (s.step, s.teacher_probs.to_rows())).collect()
    }

    fn save_log(&self, path: PathBuf) -> PyResult<()> {
        must::write_log_csv(&self.inner.log, &path).py()
    }
}

#[pyfunction]
#[pyo3(signature = (scenario="clusters2d", n_per_class=200, num_sources=3, num_classes=2, shift=1.5, separation=4.0, noise_std=0.5, seed=0))]
#[allow(clippy::too_many_arguments)]
fn generate(
    scenario: &str,
    n_per_class: usize,
    num_sources: usize,
    num_classes: usize,
    shift: f64,
    separation: f64,
    noise_std: f64,
    seed: u64,
) -> PyResult<PyProblem> {
    let d = datasets::generate(&SyntheticSpec {
        scenario: parse::<Scenario>(scenario)?,
        n_per_class,
        num_sources,
        num_classes,
        shift,
        separation,
        noise_std,
        seed,
    })
    .py()?;
    Ok(PyProblem {
        sources: d.source_domains().py()?,
        target: d.target_domain().py()?,
        eval: Some(d.eval_set().py()?),
        num_classes: d.num_classes,
    })
}

/// Trains a teacher/student pair. Accuracies are logged when the problem
/// carries target labels.
#[pyfunction]
#[pyo3(signature = (config, problem, snapshot_every=0))]
fn train(py: Python<'_>, config: &PyTrainerConfig, problem: &PyProblem, snapshot_every: usize) -> PyResult<PyTrainedPair> {
    let cfg = config.to_core()?;
    let opts = TrainOptions {
        eval: problem.eval.as_ref(),
        snapshot_every,
    };
    let inner = py.detach(|| must::train_with(&cfg, &problem.domains(), opts)).py()?;
    Ok(PyTrainedPair { inner })
}

#[pyfunction]
fn confidence_mask(probs: Vec<Vec<f64>>, threshold: f64) -> PyResult<Vec<bool>> {
    must::confidence_mask(&matrix(probs)?, threshold).py()
}

#[pyfunction]
fn accuracy(predicted: Vec<usize>, labels: Vec<usize>) -> f64 {
    must::accuracy(&predicted, &labels)
}

#[pyfunction]
fn sigmoid_derivative(g: f64) -> f64 {
    analysis::sigmoid_derivative(g)
}

/// `(passed, max identity error, max bound excess)`.
#[pyfunction]
fn check_sigmoid_derivative_identity(g_values: Vec<f64>) -> (bool, f64, f64) {
    let r = analysis::check_sigmoid_derivative_identity(&g_values);
    (r.passed, r.max_identity_error, r.max_bound_excess)
}

#[pyfunction]
fn lemma_bound_report<'py>(
    py: Python<'py>,
    teacher: &PyNetwork,
    student: &PyNetwork,
    target: Vec<Vec<f64>>,
    teacher_domain: usize,
    lambda_: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let r = analysis::lemma_bound_report(&teacher.inner, &student.inner, &matrix(target)?, teacher_domain, lambda_).py()?;
    let d = PyDict::new(py);
    d.set_item("passed", r.passed())?;
    d.set_item("min_slack", r.min_slack())?;
    d.set_item("rho", r.rho)?;
    d.set_item("per_sample_max_excess", r.per_sample_max_excess)?;
    d.set_item("param_names", r.param_names)?;
    d.set_item("a", r.a)?;
    d.set_item("lhs", r.lhs)?;
    d.set_item("rhs", r.rhs)?;
    d.set_item("slack", r.slack)?;
    Ok(d)
}

/// `(mean_std per window position, time-averaged mean std)`.
#[pyfunction]
fn consistency_track(snapshots: Vec<(usize, Vec<Vec<f64>>)>, window: usize) -> PyResult<(Vec<f64>, f64)> {
    let snaps = snapshots
        .into_iter()
        .map(|(step, p)| {
            Ok(Snapshot {
                step,
                teacher_probs: matrix(p)?,
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    let r = analysis::consistency_track(&snaps, window).py()?;
    let avg = r.time_averaged_mean_std();
    Ok((r.mean_std, avg))
}

/// `(epsilons, cumulative flip counts, per-sample flip radius or None)`.
#[pyfunction]
#[pyo3(signature = (net, features, domain, eps_grid="0:0.05:2"))]
#[allow(clippy::type_complexity)]
fn margin_probe(
    net: &PyNetwork,
    features: Vec<Vec<f64>>,
    domain: usize,
    eps_grid: &str,
) -> PyResult<(Vec<f64>, Vec<usize>, Vec<Option<f64>>)> {
    let grid = analysis::parse_eps_grid(eps_grid).py()?;
    let c = analysis::margin_probe(&net.inner, &matrix(features)?, domain, &grid).py()?;
    Ok((c.epsilons, c.flip_counts, c.flip_eps))
}

#[pyfunction]
fn reverse_validate(py: Python<'_>, config: &PyTrainerConfig, problem: &PyProblem, seed: u64) -> PyResult<f64> {
    let cfg = config.to_core()?;
    Ok(py.detach(|| rv::reverse_validate(&cfg, &problem.domains(), seed)).py()?.rv_loss)
}

/// Returns `(best index, [(rv_loss, student_src_acc)] per candidate)`.
#[pyfunction]
#[pyo3(signature = (grid, problem, seed=0, criterion="rv"))]
fn select(
    py: Python<'_>,
    grid: Vec<PyTrainerConfig>,
    problem: &PyProblem,
    seed: u64,
    criterion: &str,
) -> PyResult<(usize, Vec<(f64, f64)>)> {
    let grid = grid.iter().map(|c| c.to_core()).collect::<PyResult<Vec<_>>>()?;
    let criterion = parse::<Criterion>(criterion)?;
    let s = py.detach(|| rv::select(&grid, &problem.domains(), seed, criterion)).py()?;
    Ok((s.best_index, s.results.iter().map(|r| (r.rv.rv_loss, r.student_src_acc)).collect()))
}

/// Runs a `must-lab` subcommand (`gen-data`, `train`, `sweep`, `ablate`,
/// `analyze-bound`, `analyze-consistency`, `analyze-margin`) and returns the
/// written paths.
#[pyfunction]
#[pyo3(signature = (command, config=None, overrides=Vec::new()))]
fn run_command(py: Python<'_>, command: &str, config: Option<PathBuf>, overrides: Vec<String>) -> PyResult<Vec<PathBuf>> {
    let cfg = RunConfig::resolve(config.as_deref(), &overrides).py()?;
    let command = command.to_string();
    py.detach(move || match command.as_str() {
        "gen-data" => cli::cmd_gen_data(&cfg),
        "train" => cli::cmd_train(&cfg),
        "sweep" => cli::cmd_sweep(&cfg),
        "ablate" => cli::cmd_ablate(&cfg),
        other => match other.strip_prefix("analyze-") {
            Some(which) => which.parse::<Analysis>().and_then(|a| cli::cmd_analyze(&cfg, a)),
            None => Err(Error::Config(format!("unknown command {other:?}"))),
        },
    })
    .py()
}

#[pymodule]
fn must_lab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrainerConfig>()?;
    m.add_class::<PyProblem>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyTrainedPair>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(confidence_mask, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(sigmoid_derivative, m)?)?;
    m.add_function(wrap_pyfunction!(check_sigmoid_derivative_identity, m)?)?;
    m.add_function(wrap_pyfunction!(lemma_bound_report, m)?)?;
    m.add_function(wrap_pyfunction!(consistency_track, m)?)?;
    m.add_function(wrap_pyfunction!(margin_probe, m)?)?;
    m.add_function(wrap_pyfunction!(reverse_validate, m)?)?;
    m.add_function(wrap_pyfunction!(select, m)?)?;
    m.add_function(wrap_pyfunction!(run_command, m)?)?;
    Ok(())
}
