//! Python bindings: tokenizer, policy model, decoding, the reaching
//! benchmark and the tabulated oracle.

use std::path::PathBuf;

use diffact_core::bench::{self, BenchConfig, TrainingRecipe};
use diffact_core::oracle::{self, TabulatedModel};
use diffact_core::rng::derive_seed;
use diffact_core::{schedule, ActionChunk, DecodeConfig, Error, PosteriorModel, TokenId, TokenizerSpec};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde_json::Value;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Validation(_) | Error::Domain(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(format!("[{}] {other}", other.category())),
    }
}

fn enum_from_str<T: serde::de::DeserializeOwned>(what: &str, value: &str) -> PyResult<T> {
    serde_json::from_value(Value::String(value.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown {what} '{value}'")))
}

/// Builds a decode configuration from an optional JSON object plus keyword
/// overrides.
#[allow(clippy::too_many_arguments)]
fn decode_config(
    config: Option<&str>,
    rounds: Option<usize>,
    scoring: Option<&str>,
    temperature: Option<&str>,
    fixed_temperature: Option<f64>,
    remask: Option<bool>,
    seed: Option<u64>,
) -> PyResult<DecodeConfig> {
    let mut cfg: DecodeConfig = match config {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => DecodeConfig::default(),
    };
    if let Some(r) = rounds {
        cfg.total_rounds = r;
    }
    if let Some(s) = scoring {
        cfg.scoring = enum_from_str("scoring mode", s)?;
    }
    if let Some(t) = temperature {
        cfg.temperature_mode = enum_from_str("temperature mode", t)?;
    }
    if let Some(f) = fixed_temperature {
        cfg.fixed_temperature = f;
    }
    if let Some(on) = remask {
        cfg.remask.threshold_check = on;
        cfg.remask.residual_drop = on;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

fn run_decode<M: PosteriorModel + ?Sized>(
    py: Python<'_>,
    model: &M,
    context: Vec<TokenId>,
    cfg: DecodeConfig,
) -> PyResult<DecodeResult> {
    let (chunk, trace) = py
        .detach(|| diffact_core::decode(model, &context, &cfg))
        .map_err(py_err)?;
    Ok(DecodeResult {
        tokens: chunk.tokens,
        nfe: trace.nfe,
        trace_jsonl: trace.to_jsonl().map_err(py_err)?,
    })
}

/// Output of a decode call.
#[pyclass(frozen, get_all)]
struct DecodeResult {
    tokens: Vec<TokenId>,
    nfe: usize,
    /// One JSON object per refinement round.
    trace_jsonl: String,
}

#[pymethods]
impl DecodeResult {
    fn __repr__(&self) -> String {
        format!("DecodeResult(len={}, nfe={})", self.tokens.len(), self.nfe)
    }
}

/// Per-dimension binning between continuous actions and tokens.
#[pyclass(frozen)]
struct Tokenizer {
    inner: TokenizerSpec,
}

#[pymethods]
impl Tokenizer {
    /// Fits quantile bins per column; `gripper_dim` becomes a binary token.
    #[staticmethod]
    #[pyo3(signature = (columns, num_bins, gripper_dim=None))]
    fn fit(columns: Vec<Vec<f64>>, num_bins: usize, gripper_dim: Option<usize>) -> PyResult<Self> {
        let inner = diffact_core::codec::fit_bins(&columns, num_bins, gripper_dim).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: TokenizerSpec::from_json(text).map_err(py_err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(py_err)
    }

    #[getter]
    fn num_bins(&self) -> usize {
        self.inner.num_bins
    }

    #[getter]
    fn dims(&self) -> usize {
        self.inner.dims
    }

    #[getter]
    fn mask_id(&self) -> TokenId {
        self.inner.mask_id()
    }

    fn checksum(&self) -> String {
        self.inner.checksum()
    }

    /// Rows of `dims` values to a flat token list.
    fn tokenize(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<TokenId>> {
        Ok(self.inner.tokenize_chunk(&rows).map_err(py_err)?.tokens)
    }

    /// Flat tokens back to rows of bin centers.
    fn detokenize(&self, tokens: Vec<TokenId>) -> PyResult<Vec<Vec<f64>>> {
        let dims = self.inner.dims;
        if dims == 0 || tokens.len() % dims != 0 {
            return Err(PyValueError::new_err(format!(
                "{} tokens do not split into rows of {dims}",
                tokens.len()
            )));
        }
        let horizon = tokens.len() / dims;
        let chunk = ActionChunk::new(tokens, horizon, dims, self.inner.num_bins).map_err(py_err)?;
        self.inner.detokenize_chunk(&chunk).map_err(py_err)
    }
}

/// Bidirectional transformer over `[context; action]` tokens.
#[pyclass(frozen)]
struct PolicyModel {
    inner: diffact_core::PolicyModel,
}

#[pymethods]
impl PolicyModel {
    /// Loads a checkpoint written by `diffact train`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = diffact_core::PolicyModel::load(&path).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path, Default::default()).map_err(py_err)?;
        Ok(())
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// The model configuration as JSON.
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(self.inner.config()).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    /// Posterior rows (one per action position, `K` probabilities each).
    fn forward(&self, context: Vec<TokenId>, tokens: Vec<TokenId>) -> PyResult<Vec<Vec<f64>>> {
        let k = self.inner.config().num_classes;
        let n = tokens.len();
        let chunk = ActionChunk::new(tokens, n, 1, k).map_err(py_err)?;
        let post = self.inner.forward(&context, &chunk).map_err(py_err)?;
        Ok((0..post.rows()).map(|i| post.row(i).to_vec()).collect())
    }

    #[pyo3(signature = (context, *, config=None, rounds=None, scoring=None, temperature=None,
                        fixed_temperature=None, remask=None, seed=None))]
    #[allow(clippy::too_many_arguments)]
    fn decode(
        &self,
        py: Python<'_>,
        context: Vec<TokenId>,
        config: Option<&str>,
        rounds: Option<usize>,
        scoring: Option<&str>,
        temperature: Option<&str>,
        fixed_temperature: Option<f64>,
        remask: Option<bool>,
        seed: Option<u64>,
    ) -> PyResult<DecodeResult> {
        let cfg = decode_config(config, rounds, scoring, temperature, fixed_temperature, remask, seed)?;
        run_decode(py, &self.inner, context, cfg)
    }
}

/// A model given by an explicit posterior table over every partial state.
#[pyclass(frozen)]
struct TabulatedOracle {
    inner: TabulatedModel,
}

#[pymethods]
impl TabulatedOracle {
    #[staticmethod]
    fn random(chunk_len: usize, num_classes: usize, contexts: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: TabulatedModel::random(chunk_len, num_classes, contexts, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: TabulatedModel::from_json(text).map_err(py_err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(py_err)
    }

    #[pyo3(signature = (context, *, rounds=12, scoring="max_confidence"))]
    fn decode(&self, py: Python<'_>, context: TokenId, rounds: usize, scoring: &str) -> PyResult<DecodeResult> {
        let cfg = oracle_config(rounds, scoring)?;
        run_decode(py, &self.inner, vec![context], cfg)
    }

    /// Reference result computed by brute force over the table.
    #[pyo3(signature = (context, *, rounds=12, scoring="max_confidence"))]
    fn exhaustive_decode(&self, context: TokenId, rounds: usize, scoring: &str) -> PyResult<Vec<TokenId>> {
        let cfg = oracle_config(rounds, scoring)?;
        Ok(oracle::exhaustive_decode(&self.inner, &[context], &cfg).map_err(py_err)?.tokens)
    }
}

fn oracle_config(rounds: usize, scoring: &str) -> PyResult<DecodeConfig> {
    decode_config(None, Some(rounds), Some(scoring), Some("hard"), None, Some(false), None)
}

/// The synthetic reaching benchmark: tasks, expert chunks and tokenizer.
#[pyclass(frozen)]
struct Dataset {
    inner: bench::Dataset,
}

#[pymethods]
impl Dataset {
    /// Generates `tasks` episodes; `bench` is an optional JSON object of
    /// benchmark settings.
    #[staticmethod]
    #[pyo3(signature = (tasks, seed, bench=None))]
    fn generate(tasks: usize, seed: u64, bench: Option<&str>) -> PyResult<Self> {
        let cfg: BenchConfig = match bench {
            Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => BenchConfig::default(),
        };
        let inner = bench::generate_dataset(tasks, derive_seed(seed, "data"), &cfg).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: bench::Dataset::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.episodes.len()
    }

    #[getter]
    fn tokenizer(&self) -> Tokenizer {
        Tokenizer {
            inner: self.inner.tokenizer.clone(),
        }
    }

    fn held_out_ids(&self) -> Vec<u64> {
        self.inner.held_out_tasks().iter().map(|t| t.task_id).collect()
    }

    /// Context tokens of a task.
    fn context(&self, task_id: u64) -> PyResult<Vec<TokenId>> {
        Ok(self.episode(task_id)?.context.clone())
    }

    /// Expert action tokens of a task.
    fn expert_tokens(&self, task_id: u64) -> PyResult<Vec<TokenId>> {
        let ep = self.episode(task_id)?;
        Ok(self.inner.tokenizer.tokenize_chunk(&ep.expert).map_err(py_err)?.tokens)
    }

    /// Distance to target after executing flat `tokens` from the task start.
    fn final_distance(&self, task_id: u64, tokens: Vec<TokenId>) -> PyResult<f64> {
        let ep = self.episode(task_id)?;
        let cfg = &self.inner.config;
        let chunk = ActionChunk::new(tokens, cfg.horizon, cfg.action_dims, cfg.num_bins).map_err(py_err)?;
        let rows = self.inner.tokenizer.detokenize_chunk(&chunk).map_err(py_err)?;
        Ok(ep.task.final_distance(&rows))
    }

    /// Trains a policy with the default recipe, optionally overriding steps.
    #[pyo3(signature = (seed, steps=None))]
    fn train(&self, py: Python<'_>, seed: u64, steps: Option<usize>) -> PyResult<PolicyModel> {
        let mut recipe = TrainingRecipe::default();
        if let Some(s) = steps {
            recipe.train.steps = s;
            recipe.train.warmup_steps = s / 20;
        }
        let (inner, _) = py
            .detach(|| bench::train_policy(&self.inner, &recipe, seed, |_, _| {}))
            .map_err(py_err)?;
        Ok(PolicyModel { inner })
    }

    /// Success statistics of `model` over held-out tasks as a dict-like JSON
    /// string.
    #[pyo3(signature = (model, *, episodes=None, rounds=None, scoring=None, temperature=None, seed=None))]
    #[allow(clippy::too_many_arguments)]
    fn evaluate(
        &self,
        py: Python<'_>,
        model: &PolicyModel,
        episodes: Option<usize>,
        rounds: Option<usize>,
        scoring: Option<&str>,
        temperature: Option<&str>,
        seed: Option<u64>,
    ) -> PyResult<String> {
        let cfg = decode_config(None, rounds, scoring, temperature, None, None, seed)?;
        let mut tasks = self.inner.held_out_tasks();
        if let Some(n) = episodes {
            tasks.truncate(n);
        }
        let report = py
            .detach(|| bench::evaluate(&model.inner, &self.inner.tokenizer, &self.inner.config, &tasks, &cfg))
            .map_err(py_err)?;
        serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }
}

impl Dataset {
    fn episode(&self, task_id: u64) -> PyResult<&bench::EpisodeRecord> {
        self.inner
            .episodes
            .iter()
            .find(|e| e.task.task_id == task_id)
            .ok_or_else(|| PyValueError::new_err(format!("task {task_id} is not in the dataset")))
    }
}

/// Mask ratio `gamma(t)` for `kind` in {"cosine", "linear"}.
#[pyfunction]
#[pyo3(signature = (t, kind="cosine"))]
fn gamma(t: f64, kind: &str) -> PyResult<f64> {
    schedule::gamma(t, enum_from_str("schedule", kind)?).map_err(py_err)
}

/// Tokens kept after round `round` of `rounds` for a chunk of `chunk_len`.
#[pyfunction]
#[pyo3(signature = (round, rounds, chunk_len, kind="cosine"))]
fn keep_target(round: usize, rounds: usize, chunk_len: usize, kind: &str) -> PyResult<usize> {
    let s = schedule::MaskSchedule::new(enum_from_str("schedule", kind)?, rounds, chunk_len);
    Ok(s.keep_target_after_round(round))
}

#[pyfunction(name = "derive_seed")]
fn py_derive_seed(root: u64, name: &str) -> u64 {
    derive_seed(root, name)
}

#[pymodule]
fn diffact(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Tokenizer>()?;
    m.add_class::<PolicyModel>()?;
    m.add_class::<TabulatedOracle>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<DecodeResult>()?;
    m.add_function(wrap_pyfunction!(gamma, m)?)?;
    m.add_function(wrap_pyfunction!(keep_target, m)?)?;
    m.add_function(wrap_pyfunction!(py_derive_seed, m)?)?;
    Ok(())
}
