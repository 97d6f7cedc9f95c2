//! Planted-evidence environment for the numeric search-vector updates.
//!
//! A few "evidence" frames cluster around a hidden direction; the rest are
//! random. Reward is the fraction of evidence frames a sampled working set
//! covers, so the best search vector is the hidden direction and
//! improvement under REINFORCE is directly measurable.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::policy_grad::{reinforce_update, Baseline, PolicyGradConfig};
use crate::retrieval::{sample_without_replacement, RetrievalConfig};
use crate::store::{normalize, EmbeddingStore};
use crate::vecmath::dot;

/// Scale of the per-frame noise added to the hidden direction for evidence
/// frames (noise vectors have expected norm 1 before scaling).
pub const PLANTED_NOISE: f64 = 0.5;

/// Seconds between consecutive synthetic frames.
const FRAME_SPACING: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedEnv {
    pub store: EmbeddingStore,
    /// Evidence frames, ascending.
    pub planted: Vec<usize>,
    pub hidden: Vec<f64>,
    pub seed: u64,
}

fn gaussian(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Random unit vector.
pub fn random_unit(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        if let Ok(v) = normalize(&gaussian(dim, rng)) {
            return v;
        }
    }
}

pub fn make_env(n_frames: usize, dim: usize, n_planted: usize, seed: u64) -> Result<PlantedEnv> {
    if n_planted == 0 {
        return Err(Error::validation("at least one planted frame is required"));
    }
    if n_planted > n_frames {
        return Err(Error::validation(format!(
            "{n_planted} planted frames exceed pool of {n_frames}"
        )));
    }
    if dim == 0 {
        return Err(Error::validation("dimension must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden = random_unit(dim, &mut rng);

    let mut order: Vec<usize> = (0..n_frames).collect();
    order.shuffle(&mut rng);
    let mut planted = order[..n_planted].to_vec();
    planted.sort_unstable();

    let noise_scale = PLANTED_NOISE / (dim as f64).sqrt();
    let rows: Vec<Vec<f64>> = (0..n_frames)
        .map(|i| {
            if planted.binary_search(&i).is_ok() {
                let noise = gaussian(dim, &mut rng);
                hidden
                    .iter()
                    .zip(&noise)
                    .map(|(h, e)| h + noise_scale * e)
                    .collect()
            } else {
                random_unit(dim, &mut rng)
            }
        })
        .collect();
    let timestamps = (0..n_frames).map(|i| i as f64 * FRAME_SPACING).collect();
    Ok(PlantedEnv {
        store: EmbeddingStore::from_rows(&rows, timestamps)?,
        planted,
        hidden,
        seed,
    })
}

impl PlantedEnv {
    /// Fraction of planted frames present in `frames`; order and duplicates
    /// do not matter.
    pub fn reward(&self, frames: &[usize]) -> f64 {
        let hits = self
            .planted
            .iter()
            .filter(|p| frames.contains(p))
            .count();
        hits as f64 / self.planted.len() as f64
    }

    /// Mean similarity to the hidden direction of planted and other frames.
    pub fn similarity_gap(&self) -> (f64, f64) {
        let (mut p, mut np, mut o, mut no) = (0.0, 0, 0.0, 0);
        for (i, row) in self.store.rows().enumerate() {
            let s = dot(row, &self.hidden);
            if self.planted.binary_search(&i).is_ok() {
                p += s;
                np += 1;
            } else {
                o += s;
                no += 1;
            }
        }
        (p / np as f64, if no == 0 { 0.0 } else { o / no as f64 })
    }

    fn all_frames(&self) -> Vec<usize> {
        (0..self.store.n_frames()).collect()
    }

    /// Draw `k` frames sequentially without replacement from the softmax
    /// policy for search vector `s`.
    pub fn sample(&self, s: &[f64], k: usize, temperature: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
        let unit = normalize(s)?;
        let sims: Vec<f64> = self.store.rows().map(|r| dot(r, &unit)).collect();
        Ok(sample_without_replacement(&sims, k, temperature, rng))
    }

    /// Monte Carlo estimate of the expected reward of `s`.
    pub fn estimate_objective(
        &self,
        s: &[f64],
        k: usize,
        temperature: f64,
        samples: usize,
        rng: &mut impl Rng,
    ) -> Result<f64> {
        let mut total = 0.0;
        for _ in 0..samples {
            total += self.reward(&self.sample(s, k, temperature, rng)?);
        }
        Ok(total / samples as f64)
    }
}

/// Free-function form of [`PlantedEnv::reward`].
pub fn reward(env: &PlantedEnv, frames: &[usize]) -> f64 {
    env.reward(frames)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Reward observed at each step, before that step's update.
    pub rewards: Vec<f64>,
    pub final_s: Vec<f64>,
}

/// REINFORCE on the search vector for `steps` steps, drawing `k` frames per
/// step. The retrieval softmax temperature drives both sampling and the
/// score function so the estimator stays unbiased; `config.temperature` is
/// ignored. `init` overrides the random starting vector.
pub fn run_numeric_loop(
    env: &PlantedEnv,
    steps: usize,
    k: usize,
    config: &PolicyGradConfig,
    retrieval: &RetrievalConfig,
    init: Option<&[f64]>,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::validation("steps must be at least 1"));
    }
    if k == 0 || k > env.store.n_frames() {
        return Err(Error::validation(format!(
            "working-set size {k} invalid for {} frames",
            env.store.n_frames()
        )));
    }
    let config = PolicyGradConfig {
        temperature: retrieval.softmax_temperature,
        ..config.clone()
    };
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(retrieval.rng_seed);
    let mut s = match init {
        Some(v) => v.to_vec(),
        None => random_unit(env.store.dim(), &mut rng),
    };
    let pool = env.all_frames();
    let mut baseline = Baseline::new(config.baseline_mode);
    let mut rewards = Vec::with_capacity(steps);
    for _ in 0..steps {
        let sampled = env.sample(&s, k, config.temperature, &mut rng)?;
        let r = env.reward(&sampled);
        rewards.push(r);
        s = reinforce_update(&env.store, &pool, &s, &sampled, r, &mut baseline, &config)?;
    }
    Ok(Trajectory { rewards, final_s: s })
}

/// Least-squares slope of `ys` against `0, 1, 2, ...`.
pub fn ls_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let mean_x = (n - 1.0) / 2.0;
    let mean_y = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mean_x;
        sxy += dx * (y - mean_y);
        sxx += dx * dx;
    }
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Harness defaults for the planted Monte Carlo experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub n_frames: usize,
    pub dim: usize,
    pub n_planted: usize,
    pub k: usize,
    pub steps: usize,
    pub policy: PolicyGradConfig,
    pub temperature: f64,
}

impl Default for Experiment {
    fn default() -> Self {
        Self {
            n_frames: 32,
            dim: 16,
            n_planted: 4,
            k: 4,
            steps: 20,
            policy: PolicyGradConfig::default(),
            temperature: SIM_TEMPERATURE,
        }
    }
}

/// Retrieval temperature used by the planted experiments.
pub const SIM_TEMPERATURE: f64 = 0.1;

/// Per-seed summary of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedSummary {
    pub seed: u64,
    pub first_mean: f64,
    pub last_mean: f64,
    pub slope: f64,
}

fn window_mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

impl Experiment {
    pub fn run_seed(&self, seed: u64) -> Result<(Trajectory, SeedSummary)> {
        let env = make_env(self.n_frames, self.dim, self.n_planted, seed)?;
        let retrieval = RetrievalConfig {
            softmax_temperature: self.temperature,
            rng_seed: seed ^ 0x9e37_79b9_7f4a_7c15,
            ..Default::default()
        };
        let traj = run_numeric_loop(&env, self.steps, self.k, &self.policy, &retrieval, None)?;
        let w = (self.steps / 2).clamp(1, 10);
        let r = &traj.rewards;
        let summary = SeedSummary {
            seed,
            first_mean: window_mean(&r[..w]),
            last_mean: window_mean(&r[r.len() - w..]),
            slope: ls_slope(r),
        };
        Ok((traj, summary))
    }
}
