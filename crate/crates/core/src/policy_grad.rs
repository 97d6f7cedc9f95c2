//! Numeric score-function view of the search-text update.
//!
//! The search text is treated as a raw vector `s` in embedding space, with
//! `sim(i, s) = <v_i, s / |s|>`. Everything here is a closed-form gradient;
//! the test suite checks each one against central finite differences.

use crate::error::{Error, Result};
use crate::retrieval::WorkingSet;
use crate::store::{EmbeddingStore, MIN_NORM};
use crate::vecmath::{self, axpy, dot, norm};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMode {
    Zero,
    /// Mean of the rewards observed before the current one.
    RunningMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGradConfig {
    pub step_size: f64,
    pub baseline_mode: BaselineMode,
    /// Weight of the pairwise redundancy penalty in the set surrogate.
    pub redundancy_weight: f64,
    /// Softmax temperature of the retrieval policy.
    pub temperature: f64,
}

impl Default for PolicyGradConfig {
    fn default() -> Self {
        Self {
            step_size: 0.5,
            baseline_mode: BaselineMode::RunningMean,
            redundancy_weight: 0.5,
            temperature: 1.0,
        }
    }
}

impl PolicyGradConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size >= 0.0) {
            return Err(Error::validation(format!(
                "step size must be non-negative, got {}",
                self.step_size
            )));
        }
        if !(self.redundancy_weight >= 0.0) {
            return Err(Error::validation("redundancy weight must be non-negative"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::validation("temperature must be positive"));
        }
        Ok(())
    }
}

/// Reward baseline tracker.
#[derive(Debug, Clone, PartialEq)]
pub struct Baseline {
    mode: BaselineMode,
    sum: f64,
    count: u64,
}

impl Baseline {
    pub fn new(mode: BaselineMode) -> Self {
        Self {
            mode,
            sum: 0.0,
            count: 0,
        }
    }

    /// Current baseline value; 0 before any reward has been observed.
    pub fn value(&self) -> f64 {
        match self.mode {
            BaselineMode::Zero => 0.0,
            BaselineMode::RunningMean if self.count == 0 => 0.0,
            BaselineMode::RunningMean => self.sum / self.count as f64,
        }
    }

    pub fn observe(&mut self, reward: f64) {
        self.sum += reward;
        self.count += 1;
    }
}

fn unit_and_norm(s: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = norm(s);
    if !(n > MIN_NORM) {
        return Err(Error::validation(format!("search vector has norm {n:e}")));
    }
    Ok((s.iter().map(|v| v / n).collect(), n))
}

/// `sim(frame, s)` for an unnormalized search vector.
pub fn sim(store: &EmbeddingStore, frame: usize, s: &[f64]) -> Result<f64> {
    store.check_index(frame)?;
    let (unit, _) = unit_and_norm(s)?;
    Ok(dot(store.row(frame), &unit))
}

fn sim_gradient_with(v: &[f64], unit: &[f64], n: f64) -> Vec<f64> {
    let c = dot(v, unit);
    v.iter().zip(unit).map(|(vi, ui)| (vi - c * ui) / n).collect()
}

/// Gradient of `sim(frame, s)` with respect to `s`:
/// `(v - <v, s_hat> s_hat) / |s|`.
pub fn sim_gradient(store: &EmbeddingStore, frame: usize, s: &[f64]) -> Result<Vec<f64>> {
    store.check_index(frame)?;
    let (unit, n) = unit_and_norm(s)?;
    Ok(sim_gradient_with(store.row(frame), &unit, n))
}

/// Per-frame similarities, similarity gradients and policy probabilities
/// over a pool, sharing one normalization of `s`.
struct PoolGrads {
    grads: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

impl PoolGrads {
    fn new(store: &EmbeddingStore, pool: &[usize], s: &[f64], temperature: f64) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::validation("retrieval pool is empty"));
        }
        for &i in pool {
            store.check_index(i)?;
        }
        let (unit, n) = unit_and_norm(s)?;
        let sims: Vec<f64> = pool.iter().map(|&i| dot(store.row(i), &unit)).collect();
        let grads = pool
            .iter()
            .map(|&i| sim_gradient_with(store.row(i), &unit, n))
            .collect();
        Ok(Self {
            grads,
            probs: vecmath::softmax(&sims, temperature),
        })
    }

    fn mean_grad(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.grads[0].len()];
        for (g, p) in self.grads.iter().zip(&self.probs) {
            axpy(*p, g, &mut out);
        }
        out
    }

    fn log_policy_grad(&self, pos: usize, mean: &[f64], temperature: f64) -> Vec<f64> {
        self.grads[pos]
            .iter()
            .zip(mean)
            .map(|(g, m)| (g - m) / temperature)
            .collect()
    }
}

/// `grad_s log pi(frame | s) = (g_frame - E_pi[g]) / temperature` over `pool`.
pub fn log_policy_gradient(
    store: &EmbeddingStore,
    pool: &[usize],
    s: &[f64],
    frame: usize,
    temperature: f64,
) -> Result<Vec<f64>> {
    let pos = pool
        .iter()
        .position(|&i| i == frame)
        .ok_or_else(|| Error::validation(format!("frame {frame} is not in the pool")))?;
    let pg = PoolGrads::new(store, pool, s, temperature)?;
    Ok(pg.log_policy_grad(pos, &pg.mean_grad(), temperature))
}

/// Log-probability of drawing `frame` from the softmax policy over `pool`.
pub fn log_policy(
    store: &EmbeddingStore,
    pool: &[usize],
    s: &[f64],
    frame: usize,
    temperature: f64,
) -> Result<f64> {
    let pos = pool
        .iter()
        .position(|&i| i == frame)
        .ok_or_else(|| Error::validation(format!("frame {frame} is not in the pool")))?;
    let (unit, _) = unit_and_norm(s)?;
    let sims: Vec<f64> = pool.iter().map(|&i| dot(store.row(i), &unit)).collect();
    Ok(vecmath::softmax(&sims, temperature)[pos].ln())
}

/// Summed score function of a sequential draw without replacement:
/// `sum_t grad_s log pi(i_t | s, i_<t)`, renormalizing over the frames still
/// in the pool at each step.
pub fn sequence_score(
    store: &EmbeddingStore,
    pool: &[usize],
    s: &[f64],
    sampled: &[usize],
    temperature: f64,
) -> Result<Vec<f64>> {
    let mut remaining = pool.to_vec();
    let mut total = vec![0.0; store.dim()];
    for &frame in sampled {
        let pos = remaining.iter().position(|&i| i == frame).ok_or_else(|| {
            Error::validation(format!("sampled frame {frame} not in the remaining pool"))
        })?;
        let pg = PoolGrads::new(store, &remaining, s, temperature)?;
        let g = pg.log_policy_grad(pos, &pg.mean_grad(), temperature);
        axpy(1.0, &g, &mut total);
        remaining.remove(pos);
    }
    Ok(total)
}

/// Joint log-probability of a sequential draw without replacement.
pub fn sequence_log_prob(
    store: &EmbeddingStore,
    pool: &[usize],
    s: &[f64],
    sampled: &[usize],
    temperature: f64,
) -> Result<f64> {
    let mut remaining = pool.to_vec();
    let mut total = 0.0;
    for &frame in sampled {
        total += log_policy(store, &remaining, s, frame, temperature)?;
        remaining.retain(|&i| i != frame);
    }
    Ok(total)
}

/// The REINFORCE increment `step_size * score * (reward - baseline)`.
pub fn reinforce_step(
    store: &EmbeddingStore,
    pool: &[usize],
    s: &[f64],
    sampled: &[usize],
    advantage: f64,
    config: &PolicyGradConfig,
) -> Result<Vec<f64>> {
    if sampled.is_empty() {
        return Err(Error::validation("no sampled frames"));
    }
    let score = sequence_score(store, pool, s, sampled, config.temperature)?;
    let coeff = config.step_size * advantage;
    Ok(score.iter().map(|g| coeff * g).collect())
}

/// One ascent step on the search vector. Uses the baseline's value before
/// recording `reward` into it.
pub fn reinforce_update(
    store: &EmbeddingStore,
    pool: &[usize],
    s: &[f64],
    sampled: &[usize],
    reward: f64,
    baseline: &mut Baseline,
    config: &PolicyGradConfig,
) -> Result<Vec<f64>> {
    let advantage = reward - baseline.value();
    let delta = reinforce_step(store, pool, s, sampled, advantage, config)?;
    baseline.observe(reward);
    Ok(s.iter().zip(&delta).map(|(a, b)| a + b).collect())
}

/// Largest pairwise similarity inside the set; 0 for a singleton.
fn max_pairwise(store: &EmbeddingStore, frames: &[usize]) -> f64 {
    let mut best: Option<f64> = None;
    for (a, &i) in frames.iter().enumerate() {
        for &j in &frames[a + 1..] {
            let v = dot(store.row(i), store.row(j));
            best = Some(best.map_or(v, |b| b.max(v)));
        }
    }
    best.unwrap_or(0.0)
}

fn check_set(store: &EmbeddingStore, working: &WorkingSet) -> Result<()> {
    if working.is_empty() {
        return Err(Error::validation("surrogate of an empty working set"));
    }
    for &i in working.indices() {
        store.check_index(i)?;
    }
    Ok(())
}

/// Mean relevance minus `gamma` times the worst pairwise redundancy.
pub fn surrogate_value(
    store: &EmbeddingStore,
    working: &WorkingSet,
    s: &[f64],
    gamma: f64,
) -> Result<f64> {
    check_set(store, working)?;
    let (unit, _) = unit_and_norm(s)?;
    let frames = working.indices();
    let relevance: f64 =
        frames.iter().map(|&i| dot(store.row(i), &unit)).sum::<f64>() / frames.len() as f64;
    Ok(relevance - gamma * max_pairwise(store, frames))
}

/// Gradient of [`surrogate_value`] with the set held fixed. The redundancy
/// term does not depend on `s`.
pub fn surrogate_gradient(
    store: &EmbeddingStore,
    working: &WorkingSet,
    s: &[f64],
    _gamma: f64,
) -> Result<Vec<f64>> {
    check_set(store, working)?;
    let (unit, n) = unit_and_norm(s)?;
    let frames = working.indices();
    let mut out = vec![0.0; store.dim()];
    for &i in frames {
        axpy(1.0 / frames.len() as f64, &sim_gradient_with(store.row(i), &unit, n), &mut out);
    }
    Ok(out)
}

/// Diagnostic bundle for one update.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub per_frame_gradients: Vec<Vec<f64>>,
    pub mean_gradient: Vec<f64>,
    pub log_policy_gradients: Vec<Vec<f64>>,
    pub advantage: f64,
    pub surrogate_value: f64,
    pub objective_estimate: f64,
}

impl GradReport {
    /// Norm of `sum_i pi(i) grad log pi(i)`, zero up to rounding.
    pub fn score_identity_residual(&self, probs: &[f64]) -> f64 {
        let mut acc = vec![0.0; self.mean_gradient.len()];
        for (g, p) in self.log_policy_gradients.iter().zip(probs) {
            axpy(*p, g, &mut acc);
        }
        norm(&acc)
    }
}

/// Assemble a [`GradReport`] for `s` over `pool`. `objective_estimate` is
/// supplied by the caller (a Monte Carlo mean of rewards under the policy).
#[allow(clippy::too_many_arguments)]
pub fn grad_report(
    store: &EmbeddingStore,
    pool: &[usize],
    working: &WorkingSet,
    s: &[f64],
    reward: f64,
    baseline: &Baseline,
    config: &PolicyGradConfig,
    objective_estimate: f64,
) -> Result<GradReport> {
    let pg = PoolGrads::new(store, pool, s, config.temperature)?;
    let mean = pg.mean_grad();
    let log_policy_gradients = (0..pool.len())
        .map(|p| pg.log_policy_grad(p, &mean, config.temperature))
        .collect();
    Ok(GradReport {
        log_policy_gradients,
        mean_gradient: mean,
        per_frame_gradients: pg.grads,
        advantage: reward - baseline.value(),
        surrogate_value: surrogate_value(store, working, s, config.redundancy_weight)?,
        objective_estimate,
    })
}

/// Policy probabilities over `pool` for an unnormalized `s`.
pub fn policy_probs(
    store: &EmbeddingStore,
    pool: &[usize],
    s: &[f64],
    temperature: f64,
) -> Result<Vec<f64>> {
    Ok(PoolGrads::new(store, pool, s, temperature)?.probs)
}
