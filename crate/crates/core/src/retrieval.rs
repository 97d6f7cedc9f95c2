//! Similarity, the soft retrieval policy, and the two working-set moves:
//! expand (add the most relevant unseen frames) and shrink (greedy maximal
//! marginal relevance down to a diverse core).
//!
//! Frame indices double as temporal order because store timestamps are
//! strictly increasing, so "sorted by timestamp" is "sorted by index".
//! Ties are always broken toward the lower frame index.

use rand::Rng;

use crate::error::{Error, Result};
use crate::store::{EmbeddingStore, SearchState};
use crate::vecmath;

/// Largest number of subsets [`mmr_brute_force`] will enumerate.
pub const BRUTE_FORCE_BUDGET: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalConfig {
    /// Softmax temperature of the retrieval policy.
    pub softmax_temperature: f64,
    /// Relevance weight in the MMR objective; `1 - mmr_lambda` weighs redundancy.
    pub mmr_lambda: f64,
    /// Working-set sizes per round for expand mode.
    pub static_schedule: Vec<usize>,
    /// Working-set sizes per round for shrink mode.
    pub dynamic_schedule: Vec<usize>,
    /// Sample expansions from the soft policy instead of taking the exact top-m.
    pub stochastic: bool,
    pub rng_seed: u64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            softmax_temperature: 1.0,
            mmr_lambda: 0.5,
            static_schedule: vec![4, 8, 16],
            dynamic_schedule: vec![64, 32, 16],
            stochastic: false,
            rng_seed: 0,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self, max_rounds: usize) -> Result<()> {
        if !(self.softmax_temperature > 0.0) || !self.softmax_temperature.is_finite() {
            return Err(Error::validation(format!(
                "softmax temperature must be positive, got {}",
                self.softmax_temperature
            )));
        }
        check_lambda(self.mmr_lambda)?;
        let check = |name: &str, s: &[usize], increasing: bool| -> Result<()> {
            if s.is_empty() || s.contains(&0) {
                return Err(Error::validation(format!(
                    "{name} schedule must be non-empty with positive sizes"
                )));
            }
            if s.len() > max_rounds {
                return Err(Error::validation(format!(
                    "{name} schedule has {} entries for {max_rounds} rounds",
                    s.len()
                )));
            }
            let monotone = s
                .windows(2)
                .all(|w| if increasing { w[1] > w[0] } else { w[1] < w[0] });
            if !monotone {
                return Err(Error::validation(format!(
                    "{name} schedule {s:?} must be strictly {}",
                    if increasing { "increasing" } else { "decreasing" }
                )));
            }
            Ok(())
        };
        check("static", &self.static_schedule, true)?;
        check("dynamic", &self.dynamic_schedule, false)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::validation(format!("mmr lambda {lambda} outside [0, 1]")))
    }
}

/// Temporally ordered, duplicate-free subset of frame indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WorkingSet {
    indices: Vec<usize>,
    /// Size this set was last reconfigured toward.
    pub target: usize,
}

impl WorkingSet {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Build a working set, sorting and checking indices against `store`.
    pub fn new(store: &EmbeddingStore, mut indices: Vec<usize>) -> Result<Self> {
        for &i in &indices {
            store.check_index(i)?;
        }
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::validation("working set contains duplicate frames"));
        }
        let target = indices.len();
        Ok(Self { indices, target })
    }

    /// Every frame of the store.
    pub fn full(store: &EmbeddingStore) -> Self {
        let n = store.n_frames();
        Self {
            indices: (0..n).collect(),
            target: n,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, frame: usize) -> bool {
        self.indices.binary_search(&frame).is_ok()
    }

    fn from_sorted(mut indices: Vec<usize>, target: usize) -> Self {
        indices.sort_unstable();
        Self { indices, target }
    }
}

/// Cosine similarity between a cached frame and the search embedding.
pub fn cosine_sim(store: &EmbeddingStore, frame: usize, query: &SearchState) -> Result<f64> {
    store.check_index(frame)?;
    Ok(vecmath::dot(store.row(frame), query.embedding()))
}

/// Similarity of each frame in `pool` to the query, in pool order.
pub fn similarities(store: &EmbeddingStore, pool: &[usize], query: &SearchState) -> Result<Vec<f64>> {
    pool.iter().map(|&i| cosine_sim(store, i, query)).collect()
}

fn pairwise_sim(store: &EmbeddingStore, a: usize, b: usize) -> f64 {
    vecmath::dot(store.row(a), store.row(b))
}

/// Softmax retrieval policy over `pool`, returned in pool order.
pub fn policy_distribution(
    store: &EmbeddingStore,
    pool: &[usize],
    query: &SearchState,
    temperature: f64,
) -> Result<Vec<f64>> {
    if pool.is_empty() {
        return Err(Error::validation("retrieval pool is empty"));
    }
    if !(temperature > 0.0) {
        return Err(Error::validation(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let sims = similarities(store, pool, query)?;
    Ok(vecmath::softmax(&sims, temperature))
}

/// Draw `k` distinct positions from `logits` one at a time, renormalizing the
/// softmax over what is left after each draw. Returns positions in draw order.
pub fn sample_without_replacement<R: Rng + ?Sized>(
    logits: &[f64],
    k: usize,
    temperature: f64,
    rng: &mut R,
) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..logits.len()).collect();
    let mut drawn = Vec::with_capacity(k);
    while drawn.len() < k && !remaining.is_empty() {
        let sub: Vec<f64> = remaining.iter().map(|&p| logits[p]).collect();
        let probs = vecmath::softmax(&sub, temperature);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = remaining.len() - 1;
        for (slot, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = slot;
                break;
            }
        }
        drawn.push(remaining.remove(pick));
    }
    drawn
}

fn unseen(store: &EmbeddingStore, working: &WorkingSet, target: usize) -> Result<Vec<usize>> {
    if target > store.n_frames() {
        return Err(Error::validation(format!(
            "target {target} exceeds pool of {} frames",
            store.n_frames()
        )));
    }
    if target < working.len() {
        return Err(Error::validation(format!(
            "expand target {target} is below current size {}",
            working.len()
        )));
    }
    Ok((0..store.n_frames()).filter(|&i| !working.contains(i)).collect())
}

/// Add the `target - |working|` most similar unseen frames.
pub fn expand_top_m(
    store: &EmbeddingStore,
    working: &WorkingSet,
    query: &SearchState,
    target: usize,
) -> Result<WorkingSet> {
    let candidates = unseen(store, working, target)?;
    let m = target - working.len();
    let sims = similarities(store, &candidates, query)?;
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    // stable sort keeps lower indices first among equal similarities
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]));
    let mut indices = working.indices.clone();
    indices.extend(order.into_iter().take(m).map(|p| candidates[p]));
    Ok(WorkingSet::from_sorted(indices, target))
}

/// Add `target - |working|` unseen frames drawn sequentially without
/// replacement from the soft policy.
pub fn expand_sampled<R: Rng + ?Sized>(
    store: &EmbeddingStore,
    working: &WorkingSet,
    query: &SearchState,
    target: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<WorkingSet> {
    let candidates = unseen(store, working, target)?;
    let m = target - working.len();
    let sims = similarities(store, &candidates, query)?;
    let mut indices = working.indices.clone();
    indices.extend(
        sample_without_replacement(&sims, m, temperature, rng)
            .into_iter()
            .map(|p| candidates[p]),
    );
    Ok(WorkingSet::from_sorted(indices, target))
}

/// Expand according to `config`: exact top-m, or sampled when stochastic.
pub fn expand<R: Rng + ?Sized>(
    store: &EmbeddingStore,
    working: &WorkingSet,
    query: &SearchState,
    target: usize,
    config: &RetrievalConfig,
    rng: &mut R,
) -> Result<WorkingSet> {
    if config.stochastic {
        expand_sampled(store, working, query, target, config.softmax_temperature, rng)
    } else {
        expand_top_m(store, working, query, target)
    }
}

/// Greedy MMR over abstract similarities. `relevance[p]` is the query
/// similarity of candidate `p`; `pair(p, q)` the similarity between
/// candidates. Returns chosen candidate positions in pick order.
pub fn mmr_greedy_positions(
    relevance: &[f64],
    pair: impl Fn(usize, usize) -> f64,
    target: usize,
    lambda: f64,
) -> Vec<usize> {
    let n = relevance.len();
    let mut chosen: Vec<usize> = Vec::with_capacity(target);
    let mut taken = vec![false; n];
    // running max similarity of each candidate to the chosen set
    let mut redundancy = vec![f64::NEG_INFINITY; n];
    while chosen.len() < target.min(n) {
        let mut best: Option<(usize, f64)> = None;
        for p in (0..n).filter(|&p| !taken[p]) {
            let score = if chosen.is_empty() {
                relevance[p]
            } else {
                lambda * relevance[p] - (1.0 - lambda) * redundancy[p]
            };
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((p, score));
            }
        }
        let (pick, _) = best.expect("candidates remain");
        taken[pick] = true;
        chosen.push(pick);
        for p in (0..n).filter(|&p| !taken[p]) {
            redundancy[p] = redundancy[p].max(pair(p, pick));
        }
    }
    chosen
}

/// Prune `working` to `target` frames by greedy maximal marginal relevance.
pub fn shrink_mmr_greedy(
    store: &EmbeddingStore,
    working: &WorkingSet,
    query: &SearchState,
    target: usize,
    lambda: f64,
) -> Result<WorkingSet> {
    if target == 0 {
        return Err(Error::validation("shrink target must be at least 1"));
    }
    if target > working.len() {
        return Err(Error::validation(format!(
            "shrink target {target} exceeds working set of {}",
            working.len()
        )));
    }
    check_lambda(lambda)?;
    if target == working.len() {
        return Ok(WorkingSet::from_sorted(working.indices.clone(), target));
    }
    let cand = working.indices();
    let rel = similarities(store, cand, query)?;
    let picks = mmr_greedy_positions(&rel, |a, b| pairwise_sim(store, cand[a], cand[b]), target, lambda);
    Ok(WorkingSet::from_sorted(
        picks.into_iter().map(|p| cand[p]).collect(),
        target,
    ))
}

/// MMR set objective over abstract similarities; positions index `relevance`.
/// The redundancy max over an empty set counts as 0.
pub fn mmr_objective_positions(
    relevance: &[f64],
    pair: impl Fn(usize, usize) -> f64,
    subset: &[usize],
    lambda: f64,
) -> f64 {
    subset
        .iter()
        .map(|&i| {
            let redundancy = subset
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| pair(i, j))
                .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
                .unwrap_or(0.0);
            lambda * relevance[i] - (1.0 - lambda) * redundancy
        })
        .sum()
}

/// MMR set objective of `subset` (frame indices) for `query`.
pub fn mmr_objective(
    store: &EmbeddingStore,
    subset: &[usize],
    query: &SearchState,
    lambda: f64,
) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::validation("mmr objective of an empty subset"));
    }
    let rel = similarities(store, subset, query)?;
    let positions: Vec<usize> = (0..subset.len()).collect();
    Ok(mmr_objective_positions(
        &rel,
        |a, b| pairwise_sim(store, subset[a], subset[b]),
        &positions,
        lambda,
    ))
}

fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k);
    let mut acc: u64 = 1;
    for i in 0..k {
        acc = match acc.checked_mul(n - i) {
            Some(v) => v / (i + 1),
            None => return u64::MAX,
        };
    }
    acc
}

/// Exhaustive MMR argmax over abstract similarities. Returns the maximizing
/// positions (ascending) and their objective; ties go to the
/// lexicographically smallest position list.
pub fn mmr_brute_force_positions(
    relevance: &[f64],
    pair: impl Fn(usize, usize) -> f64,
    target: usize,
    lambda: f64,
) -> Result<(Vec<usize>, f64)> {
    let n = relevance.len();
    if target == 0 || target > n {
        return Err(Error::validation(format!(
            "subset size {target} invalid for pool of {n}"
        )));
    }
    let count = binomial(n as u64, target as u64);
    if count > BRUTE_FORCE_BUDGET {
        return Err(Error::validation(format!(
            "C({n}, {target}) = {count} subsets exceeds budget {BRUTE_FORCE_BUDGET}"
        )));
    }
    let mut combo: Vec<usize> = (0..target).collect();
    let mut best = (combo.clone(), mmr_objective_positions(relevance, &pair, &combo, lambda));
    // advance to the next combination in lexicographic order
    while let Some(i) = (0..target).rev().find(|&i| combo[i] < n - target + i) {
        combo[i] += 1;
        for j in i + 1..target {
            combo[j] = combo[j - 1] + 1;
        }
        let value = mmr_objective_positions(relevance, &pair, &combo, lambda);
        if value > best.1 {
            best = (combo.clone(), value);
        }
    }
    Ok(best)
}

/// Exhaustive MMR argmax over `pool`; returns frame indices and objective.
pub fn mmr_brute_force(
    store: &EmbeddingStore,
    pool: &[usize],
    query: &SearchState,
    target: usize,
    lambda: f64,
) -> Result<(Vec<usize>, f64)> {
    check_lambda(lambda)?;
    let mut pool = pool.to_vec();
    pool.sort_unstable();
    pool.dedup();
    let rel = similarities(store, &pool, query)?;
    let (positions, value) =
        mmr_brute_force_positions(&rel, |a, b| pairwise_sim(store, pool[a], pool[b]), target, lambda)?;
    Ok((positions.into_iter().map(|p| pool[p]).collect(), value))
}
