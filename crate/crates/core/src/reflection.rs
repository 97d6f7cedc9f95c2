//! The reflect-and-retry question loop.
//!
//! One question runs as: route (static or dynamic), build a global caption
//! from uniformly spaced seed frames, then up to `max_rounds` rounds of
//! reconfigure working set -> answer -> evaluate -> reflect. The loop stops at
//! the first accepted answer; if none is accepted it answers from the global
//! caption alone.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::TextEmbedder;
use crate::error::{Error, Result};
use crate::gateway::{Backend, FrameRef, Gateway, QuestionType, Verdict, ACCEPT_THRESHOLD};
use crate::policy_grad::{Baseline, BaselineMode};
use crate::retrieval::{self, RetrievalConfig, WorkingSet};
use crate::store::{EmbeddingStore, FrameSource, SearchState};

/// Word limit the reflector is asked to respect.
pub const REFINED_QUERY_TOKEN_LIMIT: usize = 25;

#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    pub max_rounds: usize,
    pub stop_threshold: f64,
    pub retrieval: RetrievalConfig,
    pub seed_frames_for_caption: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            max_rounds: 3,
            stop_threshold: ACCEPT_THRESHOLD,
            retrieval: RetrievalConfig::default(),
            seed_frames_for_caption: 16,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_rounds == 0 {
            return Err(Error::validation("max rounds must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.stop_threshold) {
            return Err(Error::validation(format!(
                "stop threshold {} outside [0, 1]",
                self.stop_threshold
            )));
        }
        if self.seed_frames_for_caption == 0 {
            return Err(Error::validation("caption needs at least one seed frame"));
        }
        self.retrieval.validate(self.max_rounds)
    }

    fn schedule(&self, mode: QuestionType) -> &[usize] {
        match mode {
            QuestionType::Static => &self.retrieval.static_schedule,
            QuestionType::Dynamic => &self.retrieval.dynamic_schedule,
        }
    }

    /// Working-set size for 1-based `round`, clamped to the pool. Rounds past
    /// the end of the schedule hold its last entry.
    pub fn target_size(&self, mode: QuestionType, round: usize, n_frames: usize) -> usize {
        let s = self.schedule(mode);
        s[(round - 1).min(s.len() - 1)].min(n_frames)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopState {
    pub search: SearchState,
    pub working: WorkingSet,
    pub global_caption: String,
    /// Rounds completed so far.
    pub round: usize,
    pub mode: QuestionType,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub working_indices: Vec<usize>,
    pub answer: String,
    pub verdict: Verdict,
    /// Score minus the running mean of earlier rounds' scores.
    pub advantage: f64,
    pub refined_query: String,
    pub warnings: Vec<String>,
}

/// Serialized form of a [`RoundRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub round: usize,
    pub working_indices: Vec<usize>,
    pub answer: String,
    pub score: f64,
    pub verdict: String,
    pub brief_reason: String,
    pub refined_query: String,
    pub warnings: Vec<String>,
}

impl From<&RoundRecord> for TraceEntry {
    fn from(r: &RoundRecord) -> Self {
        Self {
            round: r.round,
            working_indices: r.working_indices.clone(),
            answer: r.answer.clone(),
            score: r.verdict.score,
            verdict: r.verdict.verdict.as_str().to_string(),
            brief_reason: r.verdict.brief_reason.clone(),
            refined_query: r.refined_query.clone(),
            warnings: r.warnings.clone(),
        }
    }
}

pub fn trace_to_json(trace: &[RoundRecord]) -> String {
    let entries: Vec<TraceEntry> = trace.iter().map(TraceEntry::from).collect();
    serde_json::to_string_pretty(&entries).expect("trace serializes")
}

pub fn write_trace(trace: &[RoundRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = trace_to_json(trace);
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A failure partway through a loop, with the rounds completed before it.
#[derive(Debug)]
pub struct LoopError {
    pub error: Error,
    pub trace: Vec<RoundRecord>,
}

impl fmt::Display for LoopError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after {} round(s))", self.error, self.trace.len())
    }
}

impl std::error::Error for LoopError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<Error> for LoopError {
    fn from(error: Error) -> Self {
        Self {
            error,
            trace: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopOutcome {
    pub answer: String,
    pub trace: Vec<RoundRecord>,
    pub mode: QuestionType,
    pub global_caption: String,
    /// The answer came from the global caption after every round was rejected.
    pub used_fallback: bool,
}

const DYNAMIC_CUES: &[&str] = &[
    "how many", "how often", "times", "count", "counting", "before", "after", "first", "last",
    "then", "order", "sequence", "change", "changes", "changed", "repeat", "repeated",
    "repeatedly", "again", "begin", "begins", "start", "starts", "end", "ends", "finally",
    "earlier", "later", "next", "previous", "while", "during", "until",
];

/// Keyword fallback router: counting, order and change cues mean dynamic.
pub fn heuristic_route(question: &str) -> QuestionType {
    let lowered = question.to_lowercase();
    let words: Vec<&str> = lowered
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    let padded = format!(" {} ", words.join(" "));
    let hit = DYNAMIC_CUES
        .iter()
        .any(|cue| padded.contains(&format!(" {cue} ")));
    if hit {
        QuestionType::Dynamic
    } else {
        QuestionType::Static
    }
}

/// Ask the router backend; fall back to [`heuristic_route`] on any failure.
pub fn route_question<B: Backend>(question: &str, gateway: &Gateway<B>) -> QuestionType {
    match gateway.route(question) {
        Ok(t) => t,
        Err(e) => {
            log::info!("router failed ({e}); using keyword heuristic");
            heuristic_route(question)
        }
    }
}

/// `floor(i * n / k)` for `i < k`, with `k` capped at `n`.
pub fn seed_indices(n_frames: usize, seeds: usize) -> Vec<usize> {
    let k = seeds.min(n_frames);
    (0..k).map(|i| i * n_frames / k).collect()
}

fn frame_ref(store: &EmbeddingStore, index: usize) -> FrameRef {
    FrameRef {
        index,
        timestamp: store.timestamps()[index],
    }
}

pub fn build_global_caption<B: Backend>(
    store: &EmbeddingStore,
    gateway: &Gateway<B>,
    config: &LoopConfig,
) -> Result<String> {
    let notes = seed_indices(store.n_frames(), config.seed_frames_for_caption)
        .into_iter()
        .map(|i| gateway.frame_note(frame_ref(store, i)))
        .collect::<Result<Vec<_>>>()?;
    gateway.summarize(&notes)
}

/// Replace the search text with a non-empty refinement. Returns the new state
/// and any warnings (an over-long refinement is applied but flagged).
pub fn apply_reflection<E: TextEmbedder + ?Sized>(
    state: &LoopState,
    refined_query: &str,
    embedder: &E,
) -> Result<(LoopState, Vec<String>)> {
    let refined = refined_query.trim();
    if refined.is_empty() {
        return Ok((state.clone(), Vec::new()));
    }
    let mut warnings = Vec::new();
    let tokens = refined.split_whitespace().count();
    if tokens > REFINED_QUERY_TOKEN_LIMIT {
        warnings.push(format!(
            "refined query has {tokens} tokens, over the {REFINED_QUERY_TOKEN_LIMIT}-token limit"
        ));
    }
    let search = SearchState::new(refined, &embedder.embed(refined)?)?;
    Ok((
        LoopState {
            search,
            ..state.clone()
        },
        warnings,
    ))
}

/// Everything a round needs besides the evolving state.
pub struct RoundContext<'a, B, E: ?Sized> {
    pub question: &'a str,
    pub store: &'a EmbeddingStore,
    pub gateway: &'a Gateway<B>,
    pub embedder: &'a E,
    pub config: &'a LoopConfig,
}

/// Per-loop mutable extras: sampling generator and score baseline.
pub struct RoundAux {
    pub rng: ChaCha8Rng,
    pub baseline: Baseline,
}

impl RoundAux {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            baseline: Baseline::new(BaselineMode::RunningMean),
        }
    }
}

/// Reconfigure the working set for the next round according to the mode.
pub fn reconfigure(
    store: &EmbeddingStore,
    state: &LoopState,
    config: &LoopConfig,
    rng: &mut ChaCha8Rng,
) -> Result<WorkingSet> {
    let round = state.round + 1;
    let target = config.target_size(state.mode, round, store.n_frames());
    match state.mode {
        QuestionType::Static => {
            let target = target.max(state.working.len());
            retrieval::expand(store, &state.working, &state.search, target, &config.retrieval, rng)
        }
        QuestionType::Dynamic => {
            // the first shrink starts from the whole pool
            let base = if state.round == 0 {
                WorkingSet::full(store)
            } else {
                state.working.clone()
            };
            let target = target.min(base.len());
            retrieval::shrink_mmr_greedy(
                store,
                &base,
                &state.search,
                target,
                config.retrieval.mmr_lambda,
            )
        }
    }
}

/// Run one round. Returns the record, the next state, and whether the answer
/// was accepted.
pub fn run_round<B: Backend, E: TextEmbedder + ?Sized>(
    ctx: &RoundContext<'_, B, E>,
    state: &LoopState,
    aux: &mut RoundAux,
) -> Result<(RoundRecord, LoopState, bool)> {
    if state.round >= ctx.config.max_rounds {
        return Err(Error::validation("no rounds left"));
    }
    let working = reconfigure(ctx.store, state, ctx.config, &mut aux.rng)?;
    let frames: Vec<FrameRef> = working
        .indices()
        .iter()
        .map(|&i| frame_ref(ctx.store, i))
        .collect();
    let answer = ctx.gateway.answer(ctx.question, &frames, &state.global_caption)?;
    let evaluation = ctx
        .gateway
        .evaluate(ctx.question, &answer, &state.global_caption)?;
    let verdict = evaluation.verdict;

    let mut warnings = Vec::new();
    if evaluation.degraded {
        warnings.push("evaluator reply unparsable; scored as reject".to_string());
    }
    let advantage = verdict.score - aux.baseline.value();
    aux.baseline.observe(verdict.score);

    let round = state.round + 1;
    let mut next = LoopState {
        working,
        round,
        ..state.clone()
    };
    let accepted = verdict.accepted(ctx.config.stop_threshold);
    let mut refined_query = String::new();
    if !accepted && round < ctx.config.max_rounds {
        let reflection =
            ctx.gateway
                .reflect(ctx.question, &state.global_caption, &answer, &verdict)?;
        if reflection.degraded {
            warnings.push("reflector reply unparsable; query kept".to_string());
        }
        let (updated, w) = apply_reflection(&next, &reflection.refined_query, ctx.embedder)?;
        warnings.extend(w);
        next = updated;
        refined_query = reflection.refined_query;
    }

    let record = RoundRecord {
        round,
        working_indices: next.working.indices().to_vec(),
        answer,
        verdict,
        advantage,
        refined_query,
        warnings,
    };
    Ok((record, next, accepted))
}

/// Answer `question` over the frames of `source`.
///
/// Every frame of `source` is read exactly once, up front.
pub fn run_loop<B: Backend, E: TextEmbedder + ?Sized>(
    question: &str,
    source: &dyn FrameSource,
    gateway: &Gateway<B>,
    embedder: &E,
    config: &LoopConfig,
) -> std::result::Result<LoopOutcome, LoopError> {
    config.validate()?;
    if question.trim().is_empty() {
        return Err(Error::validation("question is empty").into());
    }
    let store = EmbeddingStore::cache_from(source)?;
    if embedder.dim() != store.dim() {
        return Err(Error::validation(format!(
            "text embedder dimension {} does not match store dimension {}",
            embedder.dim(),
            store.dim()
        ))
        .into());
    }

    let mode = route_question(question, gateway);
    let global_caption = build_global_caption(&store, gateway, config)?;
    let mut state = LoopState {
        search: SearchState::new(question, &embedder.embed(question)?)?,
        working: WorkingSet::empty(),
        global_caption: global_caption.clone(),
        round: 0,
        mode,
    };
    let ctx = RoundContext {
        question,
        store: &store,
        gateway,
        embedder,
        config,
    };
    let mut aux = RoundAux::new(config.retrieval.rng_seed);
    let mut trace = Vec::new();

    while state.round < config.max_rounds {
        let (record, next, accepted) = match run_round(&ctx, &state, &mut aux) {
            Ok(r) => r,
            Err(error) => return Err(LoopError { error, trace }),
        };
        let answer = record.answer.clone();
        trace.push(record);
        state = next;
        if accepted {
            return Ok(LoopOutcome {
                answer,
                trace,
                mode,
                global_caption,
                used_fallback: false,
            });
        }
    }

    match gateway.global_answer(question, &global_caption) {
        Ok(answer) => Ok(LoopOutcome {
            answer,
            trace,
            mode,
            global_caption,
            used_fallback: true,
        }),
        Err(error) => Err(LoopError { error, trace }),
    }
}
