//! Python bindings: the loss and reward primitives, experiment configs,
//! checkpoints and the pipeline drivers.
//!
//! Structured results (metrics rows, corpora) cross the boundary as JSON and
//! come out as plain dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use intentlab::harness::{self, Checkpoint, ExperimentConfig, PipelineOptions, SeedData, Step};
use intentlab::toy::probe::{probe_styles, Representation};
use intentlab::vib::OuPriorConfig;

fn err(e: intentlab::Error) -> PyErr {
    let msg = format!("{} ({})", e, e.kind());
    match e {
        intentlab::Error::Contract(_) | intentlab::Error::Format(_) => PyValueError::new_err(msg),
        intentlab::Error::Io { .. } => PyIOError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

/// Serializes through JSON text and parses it with Python's `json` module.
fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn prior(alpha: f64, sigma_p: f64, beta_max: f64, warmup_fraction: f64) -> PyResult<OuPriorConfig> {
    let c = OuPriorConfig {
        alpha,
        sigma_p,
        beta_max,
        warmup_fraction,
    };
    c.validate().map_err(err)?;
    Ok(c)
}

/// Closed-form per-step KL against the OU prior `N(α·prev, σ_p²)`.
#[pyfunction]
#[pyo3(signature = (mu, sigma, prev, alpha=0.95, sigma_p=0.5))]
fn kl_ou_step(mu: Vec<f64>, sigma: Vec<f64>, prev: Vec<f64>, alpha: f64, sigma_p: f64) -> PyResult<f64> {
    let c = prior(alpha, sigma_p, 0.5, 0.1)?;
    intentlab::vib::kl_ou_step(&mu, &sigma, &prev, &c).map_err(err)
}

/// Monte-Carlo KL estimate and its standard error.
#[pyfunction]
#[pyo3(signature = (mu_q, sigma_q, mu_p, sigma_p, n_samples=100_000, seed=0))]
fn kl_monte_carlo(
    mu_q: Vec<f64>,
    sigma_q: Vec<f64>,
    mu_p: Vec<f64>,
    sigma_p: f64,
    n_samples: usize,
    seed: u64,
) -> PyResult<(f64, f64)> {
    let mut rng = intentlab::rng::StreamRng::new(seed, "python-kl");
    intentlab::vib::kl_monte_carlo(&mu_q, &sigma_q, &mu_p, sigma_p, n_samples, &mut rng).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (step, total_steps, beta_max=0.5, warmup_fraction=0.1))]
fn beta_schedule(step: usize, total_steps: usize, beta_max: f64, warmup_fraction: f64) -> PyResult<f64> {
    let c = prior(0.95, 0.5, beta_max, warmup_fraction)?;
    intentlab::vib::beta_schedule(step, total_steps, &c).map_err(err)
}

#[pyfunction]
fn loss_win(winners: Vec<f64>, anchor: f64) -> PyResult<f64> {
    intentlab::uapo::loss_win(&winners, anchor).map_err(err)
}

#[pyfunction]
fn loss_lose(losers: Vec<f64>, anchor: f64) -> PyResult<f64> {
    intentlab::uapo::loss_lose(&losers, anchor).map_err(err)
}

/// Token error rate of `hyp` against `reference`.
#[pyfunction]
fn wer(hyp: Vec<usize>, reference: Vec<usize>) -> PyResult<f64> {
    intentlab::reward::wer(&hyp, &reference).map_err(err)
}

/// Winner and loser indices, or `None` when either set is empty.
#[pyfunction]
fn partition(rewards: Vec<f64>, anchor: f64) -> Option<(Vec<usize>, Vec<usize>)> {
    intentlab::reward::partition(&rewards, anchor)
}

#[pyclass(name = "Config")]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        PyConfig {
            inner: ExperimentConfig::default(),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PyConfig {
            inner: ExperimentConfig::from_toml(text).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig {
            inner: ExperimentConfig::load(&path).map_err(err)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(err)
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.seeds.clone()
    }

    #[setter]
    fn set_seeds(&mut self, seeds: Vec<u64>) {
        self.inner.seeds = seeds;
    }

    #[getter]
    fn out_dir(&self) -> PathBuf {
        self.inner.out_dir.clone()
    }

    #[setter]
    fn set_out_dir(&mut self, dir: PathBuf) {
        self.inner.out_dir = dir;
    }

    fn __repr__(&self) -> String {
        format!("Config(hash={}, seeds={:?})", self.inner.hash(), self.inner.seeds)
    }
}

#[pyclass(name = "Checkpoint")]
struct PyCheckpoint {
    inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCheckpoint {
            inner: Checkpoint::load(&path).map_err(err)?,
        })
    }

    #[getter]
    fn stage(&self) -> &'static str {
        self.inner.stage.as_str()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn checkpoint_id(&self) -> String {
        self.inner.checkpoint_id.clone()
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.inner.config_hash.clone()
    }

    #[getter]
    fn strategy(&self) -> &'static str {
        self.inner.strategy.as_str()
    }

    /// Metrics row on the held-out split of this checkpoint's seed.
    fn evaluate<'py>(&self, py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyAny>> {
        let cfg = config.inner.clone();
        let ck = self.inner.clone();
        let row = py
            .detach(move || {
                let sd = SeedData::new(&cfg, ck.seed)?;
                harness::eval_checkpoint(&cfg, &sd, &ck, None)
            })
            .map_err(err)?;
        to_py(py, &row)
    }

    /// Linear-probe style accuracy for `e`, `h` and (when present) `z`.
    fn probe<'py>(&self, py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyAny>> {
        let cfg = config.inner.clone();
        let ck = self.inner.clone();
        let accs = py
            .detach(move || -> intentlab::Result<Vec<(String, f64)>> {
                let m = ck.model()?;
                let sd = SeedData::new(&cfg, ck.seed)?;
                let mut out = Vec::new();
                for rep in Representation::ALL {
                    if rep == Representation::Z && !m.strategy.needs_intent() {
                        continue;
                    }
                    let acc = probe_styles(&m, rep, &sd.data.heldout, &cfg.eval.probe)?;
                    out.push((format!("acc_{}", rep.as_str()), acc));
                }
                Ok(out)
            })
            .map_err(err)?;
        to_py(py, &accs.into_iter().collect::<std::collections::BTreeMap<_, _>>())
    }
}

/// The synthetic corpus of one seed as a list of utterance dicts.
#[pyfunction]
fn generate_corpus<'py>(py: Python<'py>, config: &PyConfig, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let c = &config.inner;
    let corpus = intentlab::toy::generate_corpus(&c.task, c.corpus_size, seed).map_err(err)?;
    to_py(py, &corpus)
}

/// Runs the full pipeline; returns the report rows.
#[pyfunction]
#[pyo3(signature = (config, stop_after=None, resume=None))]
fn run_pipeline<'py>(
    py: Python<'py>,
    config: &PyConfig,
    stop_after: Option<&str>,
    resume: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let stop_after = stop_after.map(str::parse::<Step>).transpose().map_err(err)?;
    let opts = PipelineOptions { resume, stop_after };
    let cfg = config.inner.clone();
    let rows = py.detach(move || harness::run_pipeline(&cfg, &opts)).map_err(err)?;
    to_py(py, &rows)
}

/// Stage 1 + Stage 2 + eval over the strategy × grounding grid.
#[pyfunction]
fn ablate<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config.inner.clone();
    let rows = py.detach(move || harness::ablate(&cfg)).map_err(err)?;
    to_py(py, &rows)
}

#[pymodule(name = "intentlab")]
fn intentlab_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(kl_ou_step, m)?)?;
    m.add_function(wrap_pyfunction!(kl_monte_carlo, m)?)?;
    m.add_function(wrap_pyfunction!(beta_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(loss_win, m)?)?;
    m.add_function(wrap_pyfunction!(loss_lose, m)?)?;
    m.add_function(wrap_pyfunction!(wer, m)?)?;
    m.add_function(wrap_pyfunction!(partition, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    Ok(())
}
