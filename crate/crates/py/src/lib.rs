//! Python bindings for `frameloop`.
//!
//! Frame indices, working sets and pools are plain `list[int]`; embeddings
//! and search vectors are `list[float]`. Errors map onto `ValueError`,
//! `IndexError`, `OSError`, `ConnectionError` and `RuntimeError`.

use std::collections::HashMap;
use std::path::PathBuf;

use frameloop::embed::HashingEmbedder;
use frameloop::gateway::{self, Gateway, MockBackend, PromptKind};
use frameloop::policy_grad::{self, BaselineMode, PolicyGradConfig};
use frameloop::reflection::{self, LoopConfig, TraceEntry};
use frameloop::retrieval::{self, RetrievalConfig, WorkingSet};
use frameloop::simulator::{Experiment, SIM_TEMPERATURE};
use frameloop::store::{self, EmbeddingStore};
use frameloop::tma::{self, TmaSchedule, ToyAttentionInstance};
use frameloop::{Error, SearchState};
use pyo3::exceptions::{
    PyConnectionError, PyIOError, PyIndexError, PyRuntimeError, PyValueError,
};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Bounds { .. } => PyIndexError::new_err(msg),
        Error::Io { .. } => PyIOError::new_err(msg),
        Error::Transport { .. } => PyConnectionError::new_err(msg),
        Error::Service { .. } => PyRuntimeError::new_err(msg),
        Error::Format(_) | Error::Validation(_) | Error::Parse(_) => PyValueError::new_err(msg),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for frameloop::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Cached frame embeddings: unit-norm rows plus one timestamp per frame.
#[pyclass(name = "Store", module = "frameloop_py", frozen)]
pub struct PyStore {
    pub inner: EmbeddingStore,
}

#[pymethods]
impl PyStore {
    /// Build from raw rows; each row is L2-normalized.
    #[new]
    fn new(rows: Vec<Vec<f64>>, timestamps: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: EmbeddingStore::from_rows(&rows, timestamps).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: EmbeddingStore::load(path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).py()
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: EmbeddingStore::from_bytes(data).py()?,
        })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_bytes())
    }

    #[getter]
    fn n_frames(&self) -> usize {
        self.inner.n_frames()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn timestamps(&self) -> Vec<f64> {
        self.inner.timestamps().to_vec()
    }

    fn row(&self, frame: usize) -> PyResult<Vec<f64>> {
        self.inner.check_index(frame).py()?;
        Ok(self.inner.row(frame).to_vec())
    }

    fn __len__(&self) -> usize {
        self.inner.n_frames()
    }

    fn __eq__(&self, other: PyRef<'_, PyStore>) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Store(n_frames={}, dim={})", self.inner.n_frames(), self.inner.dim())
    }
}

fn query(v: Vec<f64>) -> PyResult<SearchState> {
    SearchState::new("", &v).py()
}

fn working(s: &EmbeddingStore, frames: Vec<usize>) -> PyResult<WorkingSet> {
    WorkingSet::new(s, frames).py()
}

/// Size in bytes of a store file with `n_frames` rows of width `dim`.
#[pyfunction]
fn file_size(n_frames: usize, dim: usize) -> usize {
    store::file_size(n_frames, dim)
}

#[pyfunction]
#[pyo3(signature = (u, lambda_txt=0.3, breakpoint=0.4))]
fn alpha_txt(u: f64, lambda_txt: f64, breakpoint: f64) -> PyResult<f64> {
    let s = TmaSchedule {
        lambda_txt,
        txt_breakpoint: breakpoint,
        ..Default::default()
    };
    tma::alpha_txt(u, &s).py()
}

#[pyfunction]
#[pyo3(signature = (u, lambda_img=0.3, breakpoint=0.6))]
fn alpha_img(u: f64, lambda_img: f64, breakpoint: f64) -> PyResult<f64> {
    let s = TmaSchedule {
        lambda_img,
        img_breakpoint: breakpoint,
        ..Default::default()
    };
    tma::alpha_img(u, &s).py()
}

/// Attention mass on the text keys of a toy instance with `n_text` text and
/// `n_visual` visual keys, row-major `scores` and progress `u`.
#[pyfunction]
#[pyo3(signature = (scores, n_text, n_visual, u, lambda_txt=0.3, lambda_img=0.3))]
fn text_mass(
    scores: Vec<f64>,
    n_text: usize,
    n_visual: usize,
    u: f64,
    lambda_txt: f64,
    lambda_img: f64,
) -> PyResult<f64> {
    let inst = ToyAttentionInstance::new(n_text, n_visual, scores, u).py()?;
    let s = TmaSchedule {
        lambda_txt,
        lambda_img,
        ..Default::default()
    };
    tma::attention_text_mass(&inst, &s).py()
}

#[pyfunction]
fn cosine_sim(store: &PyStore, frame: usize, q: Vec<f64>) -> PyResult<f64> {
    retrieval::cosine_sim(&store.inner, frame, &query(q)?).py()
}

/// Softmax retrieval probabilities over `pool`, in pool order.
#[pyfunction]
#[pyo3(signature = (store, pool, q, temperature=1.0))]
fn policy(store: &PyStore, pool: Vec<usize>, q: Vec<f64>, temperature: f64) -> PyResult<Vec<f64>> {
    retrieval::policy_distribution(&store.inner, &pool, &query(q)?, temperature).py()
}

/// Grow `frames` to `target` with the most similar unseen frames.
#[pyfunction]
fn expand_top_m(store: &PyStore, frames: Vec<usize>, q: Vec<f64>, target: usize) -> PyResult<Vec<usize>> {
    let w = working(&store.inner, frames)?;
    Ok(retrieval::expand_top_m(&store.inner, &w, &query(q)?, target).py()?.indices().to_vec())
}

/// Grow `frames` to `target` by sampling the soft policy without replacement.
#[pyfunction]
#[pyo3(signature = (store, frames, q, target, temperature=1.0, seed=0))]
fn expand_sampled(
    store: &PyStore,
    frames: Vec<usize>,
    q: Vec<f64>,
    target: usize,
    temperature: f64,
    seed: u64,
) -> PyResult<Vec<usize>> {
    let w = working(&store.inner, frames)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = retrieval::expand_sampled(&store.inner, &w, &query(q)?, target, temperature, &mut rng);
    Ok(out.py()?.indices().to_vec())
}

/// Prune `frames` to `target` by greedy maximal marginal relevance.
#[pyfunction]
#[pyo3(signature = (store, frames, q, target, mmr_lambda=0.5))]
fn shrink_mmr(
    store: &PyStore,
    frames: Vec<usize>,
    q: Vec<f64>,
    target: usize,
    mmr_lambda: f64,
) -> PyResult<Vec<usize>> {
    let w = working(&store.inner, frames)?;
    let out = retrieval::shrink_mmr_greedy(&store.inner, &w, &query(q)?, target, mmr_lambda);
    Ok(out.py()?.indices().to_vec())
}

#[pyfunction]
#[pyo3(signature = (store, frames, q, mmr_lambda=0.5))]
fn mmr_objective(store: &PyStore, frames: Vec<usize>, q: Vec<f64>, mmr_lambda: f64) -> PyResult<f64> {
    retrieval::mmr_objective(&store.inner, &frames, &query(q)?, mmr_lambda).py()
}

/// Exhaustive MMR optimum over `pool`: `(frames, objective)`.
#[pyfunction]
#[pyo3(signature = (store, pool, q, target, mmr_lambda=0.5))]
fn mmr_brute_force(
    store: &PyStore,
    pool: Vec<usize>,
    q: Vec<f64>,
    target: usize,
    mmr_lambda: f64,
) -> PyResult<(Vec<usize>, f64)> {
    retrieval::mmr_brute_force(&store.inner, &pool, &query(q)?, target, mmr_lambda).py()
}

#[pyfunction]
fn sim(store: &PyStore, frame: usize, s: Vec<f64>) -> PyResult<f64> {
    policy_grad::sim(&store.inner, frame, &s).py()
}

#[pyfunction]
fn sim_gradient(store: &PyStore, frame: usize, s: Vec<f64>) -> PyResult<Vec<f64>> {
    policy_grad::sim_gradient(&store.inner, frame, &s).py()
}

#[pyfunction]
#[pyo3(signature = (store, pool, s, frame, temperature=1.0))]
fn log_policy(store: &PyStore, pool: Vec<usize>, s: Vec<f64>, frame: usize, temperature: f64) -> PyResult<f64> {
    policy_grad::log_policy(&store.inner, &pool, &s, frame, temperature).py()
}

#[pyfunction]
#[pyo3(signature = (store, pool, s, frame, temperature=1.0))]
fn log_policy_gradient(
    store: &PyStore,
    pool: Vec<usize>,
    s: Vec<f64>,
    frame: usize,
    temperature: f64,
) -> PyResult<Vec<f64>> {
    policy_grad::log_policy_gradient(&store.inner, &pool, &s, frame, temperature).py()
}

#[pyfunction]
#[pyo3(signature = (store, frames, s, gamma=0.5))]
fn surrogate_value(store: &PyStore, frames: Vec<usize>, s: Vec<f64>, gamma: f64) -> PyResult<f64> {
    let w = working(&store.inner, frames)?;
    policy_grad::surrogate_value(&store.inner, &w, &s, gamma).py()
}

#[pyfunction]
#[pyo3(signature = (store, frames, s, gamma=0.5))]
fn surrogate_gradient(store: &PyStore, frames: Vec<usize>, s: Vec<f64>, gamma: f64) -> PyResult<Vec<f64>> {
    let w = working(&store.inner, frames)?;
    policy_grad::surrogate_gradient(&store.inner, &w, &s, gamma).py()
}

fn prompt_kind(name: &str) -> PyResult<PromptKind> {
    PromptKind::ALL
        .into_iter()
        .find(|k| k.name() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown prompt kind {name:?}")))
}

/// Fill a prompt template. `kind` is one of `route`, `summarize`,
/// `evaluate`, `reflect`, `frame_note`, `global_answer`, `answer`.
#[pyfunction]
fn render_prompt(kind: &str, fields: HashMap<String, String>) -> PyResult<String> {
    let f: Vec<(&str, &str)> = fields.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    gateway::render_prompt(prompt_kind(kind)?, &gateway::fields(&f)).py()
}

#[pyfunction]
fn template(kind: &str) -> PyResult<&'static str> {
    Ok(prompt_kind(kind)?.template())
}

#[pyfunction]
fn parse_evaluator<'py>(py: Python<'py>, reply: &str) -> PyResult<Bound<'py, PyDict>> {
    let v = gateway::parse_evaluator(reply).py()?;
    let d = PyDict::new(py);
    d.set_item("score", v.score)?;
    d.set_item("verdict", v.verdict.as_str())?;
    d.set_item("brief_reason", v.brief_reason)?;
    Ok(d)
}

#[pyfunction]
fn parse_reflector(reply: &str) -> PyResult<String> {
    gateway::parse_reflector(reply).py()
}

#[pyfunction]
fn parse_router(reply: &str) -> PyResult<&'static str> {
    Ok(gateway::parse_router(reply).py()?.as_str())
}

fn entry_dict<'py>(py: Python<'py>, e: &TraceEntry) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("round", e.round)?;
    d.set_item("working_indices", e.working_indices.clone())?;
    d.set_item("answer", &e.answer)?;
    d.set_item("score", e.score)?;
    d.set_item("verdict", &e.verdict)?;
    d.set_item("brief_reason", &e.brief_reason)?;
    d.set_item("refined_query", &e.refined_query)?;
    d.set_item("warnings", e.warnings.clone())?;
    Ok(d)
}

/// Answer `question` over `store` with the offline mock backend.
///
/// `replies` maps prompt kinds to scripted replies, used in order with the
/// last one repeating. Kinds left out get the built-in canned reply. Text is
/// embedded with the hashing embedder at the store's dimension.
#[pyfunction]
#[pyo3(signature = (store, question, replies=None, max_rounds=3, stop_threshold=0.7, stochastic=false, seed=0))]
#[allow(clippy::too_many_arguments)]
fn run_loop<'py>(
    py: Python<'py>,
    store: &PyStore,
    question: &str,
    replies: Option<HashMap<String, Vec<String>>>,
    max_rounds: usize,
    stop_threshold: f64,
    stochastic: bool,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let mut backend = MockBackend::new();
    for (name, list) in replies.unwrap_or_default() {
        if list.is_empty() {
            return Err(PyValueError::new_err(format!("no replies given for {name:?}")));
        }
        backend = backend.script(prompt_kind(&name)?, list);
    }
    let config = LoopConfig {
        max_rounds,
        stop_threshold,
        retrieval: RetrievalConfig {
            stochastic,
            rng_seed: seed,
            ..Default::default()
        },
        ..Default::default()
    };
    let gw = Gateway::new(backend);
    let embedder = HashingEmbedder::new(store.inner.dim());
    let out = py
        .detach(|| reflection::run_loop(question, &store.inner, &gw, &embedder, &config))
        .map_err(|e| py_err(e.error))?;

    let d = PyDict::new(py);
    d.set_item("answer", &out.answer)?;
    d.set_item("mode", out.mode.as_str())?;
    d.set_item("used_fallback", out.used_fallback)?;
    d.set_item("global_caption", &out.global_caption)?;
    let rounds = out
        .trace
        .iter()
        .map(|r| entry_dict(py, &TraceEntry::from(r)))
        .collect::<PyResult<Vec<_>>>()?;
    d.set_item("rounds", rounds)?;
    let calls = PyDict::new(py);
    for kind in PromptKind::ALL {
        calls.set_item(kind.name(), gw.backend().count(kind))?;
    }
    d.set_item("calls", calls)?;
    Ok(d)
}

/// Planted-environment policy-gradient runs, one dict per seed with
/// `seed`, `first_mean`, `last_mean`, `slope` and `rewards`.
#[pyfunction]
#[pyo3(signature = (seeds=100, seed_start=0, steps=20, eta=0.5, baseline="running-mean", frames=32, dim=16, planted=4, k=4, temperature=SIM_TEMPERATURE))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    seeds: u64,
    seed_start: u64,
    steps: usize,
    eta: f64,
    baseline: &str,
    frames: usize,
    dim: usize,
    planted: usize,
    k: usize,
    temperature: f64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let baseline_mode = match baseline {
        "zero" => BaselineMode::Zero,
        "running-mean" => BaselineMode::RunningMean,
        other => return Err(PyValueError::new_err(format!("unknown baseline {other:?}"))),
    };
    let ex = Experiment {
        n_frames: frames,
        dim,
        n_planted: planted,
        k,
        steps,
        temperature,
        policy: PolicyGradConfig {
            step_size: eta,
            baseline_mode,
            ..Default::default()
        },
    };
    let runs = py.detach(|| {
        (seed_start..seed_start + seeds)
            .map(|s| ex.run_seed(s))
            .collect::<Result<Vec<_>, Error>>()
    });
    runs.py()?
        .into_iter()
        .map(|(traj, sum)| {
            let d = PyDict::new(py);
            d.set_item("seed", sum.seed)?;
            d.set_item("first_mean", sum.first_mean)?;
            d.set_item("last_mean", sum.last_mean)?;
            d.set_item("slope", sum.slope)?;
            d.set_item("rewards", traj.rewards)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
pub fn frameloop_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyStore>()?;
    m.add("HEADER_LEN", store::HEADER_LEN)?;
    m.add_function(wrap_pyfunction!(file_size, m)?)?;
    m.add_function(wrap_pyfunction!(alpha_txt, m)?)?;
    m.add_function(wrap_pyfunction!(alpha_img, m)?)?;
    m.add_function(wrap_pyfunction!(text_mass, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_sim, m)?)?;
    m.add_function(wrap_pyfunction!(policy, m)?)?;
    m.add_function(wrap_pyfunction!(expand_top_m, m)?)?;
    m.add_function(wrap_pyfunction!(expand_sampled, m)?)?;
    m.add_function(wrap_pyfunction!(shrink_mmr, m)?)?;
    m.add_function(wrap_pyfunction!(mmr_objective, m)?)?;
    m.add_function(wrap_pyfunction!(mmr_brute_force, m)?)?;
    m.add_function(wrap_pyfunction!(sim, m)?)?;
    m.add_function(wrap_pyfunction!(sim_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(log_policy, m)?)?;
    m.add_function(wrap_pyfunction!(log_policy_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(surrogate_value, m)?)?;
    m.add_function(wrap_pyfunction!(surrogate_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(render_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(template, m)?)?;
    m.add_function(wrap_pyfunction!(parse_evaluator, m)?)?;
    m.add_function(wrap_pyfunction!(parse_reflector, m)?)?;
    m.add_function(wrap_pyfunction!(parse_router, m)?)?;
    m.add_function(wrap_pyfunction!(run_loop, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
