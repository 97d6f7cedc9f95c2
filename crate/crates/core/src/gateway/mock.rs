//! Deterministic in-process backends.

use std::collections::HashMap;
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use super::parse::ACCEPT_THRESHOLD;
use super::{Backend, Completion, PromptKind};
use crate::error::Result;
use crate::reflection::heuristic_route;

type Responder = Box<dyn Fn(&str, usize) -> Result<String> + Send + Sync>;

/// Scripted backend. Each prompt kind can have its own responder, which sees
/// the prompt and how many times that kind was called before. Kinds without a
/// responder fall back to [`offline_reply`].
#[derive(Default)]
pub struct MockBackend {
    responders: HashMap<PromptKind, Responder>,
    log: Mutex<Vec<(PromptKind, String)>>,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Respond to `kind` with a closure of `(prompt, call_index)`.
    pub fn on(
        mut self,
        kind: PromptKind,
        f: impl Fn(&str, usize) -> Result<String> + Send + Sync + 'static,
    ) -> Self {
        self.responders.insert(kind, Box::new(f));
        self
    }

    /// Reply to `kind` with `replies` in order, repeating the last one.
    pub fn script<S: Into<String>>(self, kind: PromptKind, replies: impl IntoIterator<Item = S>) -> Self {
        let replies: Vec<String> = replies.into_iter().map(Into::into).collect();
        assert!(!replies.is_empty(), "script needs at least one reply");
        self.on(kind, move |_, n| Ok(replies[n.min(replies.len() - 1)].clone()))
    }

    /// Every prompt received so far, in order.
    pub fn calls(&self) -> Vec<(PromptKind, String)> {
        self.log.lock().unwrap().clone()
    }

    pub fn count(&self, kind: PromptKind) -> usize {
        self.log.lock().unwrap().iter().filter(|(k, _)| *k == kind).count()
    }
}

impl Backend for MockBackend {
    fn complete(&self, kind: PromptKind, prompt: &str) -> Result<Completion> {
        let n = {
            let mut log = self.log.lock().unwrap();
            let n = log.iter().filter(|(k, _)| *k == kind).count();
            log.push((kind, prompt.to_string()));
            n
        };
        let text = match self.responders.get(&kind) {
            Some(f) => f(prompt, n)?,
            None => offline_reply(kind, prompt),
        };
        Ok(Completion { text, retries: 0 })
    }
}

fn line_after<'a>(prompt: &'a str, prefix: &str) -> &'a str {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix(prefix))
        .unwrap_or("")
        .trim()
}

/// Stable pseudo-score in `[0, 1]` derived from the prompt bytes.
fn hashed_score(prompt: &str) -> f64 {
    let digest = Sha256::digest(prompt.as_bytes());
    let word = u64::from_le_bytes(digest[..8].try_into().unwrap());
    (word % 101) as f64 / 100.0
}

/// Canned reply used by the offline backend: well-formed for every role,
/// deterministic in the prompt.
pub fn offline_reply(kind: PromptKind, prompt: &str) -> String {
    match kind {
        PromptKind::Route => {
            let q = line_after(prompt, "Question. ");
            let qtype = heuristic_route(q);
            format!(
                "{{\"qtype\":\"{}\",\"rationale\":\"keyword cues\"}}",
                qtype.as_str()
            )
        }
        PromptKind::FrameNote => format!("Notes for frame {}.", line_after(prompt, "Frame. ")),
        PromptKind::Summarize => {
            let n = prompt.lines().filter(|l| l.starts_with("- ")).count();
            format!("A scene summarized from {n} frame notes.")
        }
        PromptKind::Answer => format!(
            "Answer drawn from keyframes {}.",
            line_after(prompt, "Keyframes (earlier → later): ")
        ),
        PromptKind::Evaluate => {
            let score = hashed_score(prompt);
            let verdict = if score >= ACCEPT_THRESHOLD { "accept" } else { "reject" };
            format!("{{\"score\":{score},\"verdict\":\"{verdict}\",\"brief_reason\":\"offline mock\"}}")
        }
        PromptKind::Reflect => {
            let q = line_after(prompt, "Question: ").trim_end_matches('?');
            serde_json::json!({ "refined_query": format!("frames showing {q}") }).to_string()
        }
        PromptKind::GlobalAnswer => "Not enough evidence from global caption.".to_string(),
    }
}
