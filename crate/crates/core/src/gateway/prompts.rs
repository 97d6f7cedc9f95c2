//! Prompt templates for each backend role and placeholder substitution.
//!
//! Placeholders are `{name}` with `name` made of lowercase ASCII letters,
//! digits and underscores. Any other brace (JSON examples inside a template)
//! is literal text.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PromptKind {
    /// Classify a question as static or dynamic.
    Route,
    /// Merge per-frame notes into one global caption.
    Summarize,
    /// Score an answer.
    Evaluate,
    /// Rewrite the search text after a rejected answer.
    Reflect,
    /// Describe a single frame.
    FrameNote,
    /// Answer from the global caption alone.
    GlobalAnswer,
    /// Answer from the ordered keyframes plus the global caption.
    Answer,
}

impl PromptKind {
    pub const ALL: [PromptKind; 7] = [
        PromptKind::Route,
        PromptKind::Summarize,
        PromptKind::Evaluate,
        PromptKind::Reflect,
        PromptKind::FrameNote,
        PromptKind::GlobalAnswer,
        PromptKind::Answer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PromptKind::Route => "route",
            PromptKind::Summarize => "summarize",
            PromptKind::Evaluate => "evaluate",
            PromptKind::Reflect => "reflect",
            PromptKind::FrameNote => "frame_note",
            PromptKind::GlobalAnswer => "global_answer",
            PromptKind::Answer => "answer",
        }
    }

    pub fn template(self) -> &'static str {
        match self {
            PromptKind::Route => ROUTE,
            PromptKind::Summarize => SUMMARIZE,
            PromptKind::Evaluate => EVALUATE,
            PromptKind::Reflect => REFLECT,
            PromptKind::FrameNote => FRAME_NOTE,
            PromptKind::GlobalAnswer => GLOBAL_ANSWER,
            PromptKind::Answer => ANSWER,
        }
    }

    /// Placeholder names in order of first appearance.
    pub fn placeholders(self) -> Vec<&'static str> {
        let mut out: Vec<&'static str> = Vec::new();
        for seg in segments(self.template()) {
            if let Segment::Slot(name) = seg {
                if !out.contains(&name) {
                    out.push(name);
                }
            }
        }
        out
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

const ROUTE: &str = "\
Role. Classify a video question as static or dynamic. Output JSON only.
Definitions.
- dynamic: requires temporal reasoning such as counting, repetition, order, or changes over time (e.g., “how many times”, “before/after”, “first/last”).
- static: can be answered from a small set of unordered frames (identity, attribute, location, scene, one-shot action).
Question. {question}
Return. Single-line JSON with fields: qtype (\"static\" or \"dynamic\"), rationale (1–2 short phrases; no extra text).
";

const SUMMARIZE: &str = "\
Role. Summarize chronologically ordered frame notes into a compact global caption. Do not invent facts.
Input. Frame-wise notes (earlier → later):
{notes}
Write. One global caption (2–4 sentences) that connects multiple frames, focusing on: (1) moving entities with consistent appearance and actions across time; (2) static scene objects and their states; (3) temporal hints only if explicitly evidenced (e.g., “then”, “later”, “repeatedly”).
Style: terse and factual; no bullet lists, storytelling, or frame-by-frame recitation.
";

const EVALUATE: &str = "\
Role. Precise evaluator for video-QA. Return a single-line JSON only (no Markdown/code).
Keys. \"score\" (float 0..1), \"verdict\" (\"accept\" if score ≥ 0.7 else \"reject\"), \"brief_reason\" (1–2 short bullets).
Example user. {one_shot_user}
Example assistant. {one_shot_assistant}
Your task. Given the current case, output the JSON only.
Current case.
{case}
";

const REFLECT: &str = "\
Role. Reflector in a video-understanding pipeline. You receive the question, a global caption (from 16 uniformly sampled frames), the last answer (low confidence/rejected), and its evaluation JSON.
Objective. Analyze why the answer likely fails (missing object, wrong span, ambiguity, etc.) and produce a single short declarative retrieval text for the next round of keyframe selection.
Strict rules.
(1) Output JSON only with key refined_query.
(2) refined_query ≤ 25 tokens, declarative statement (not a question), capturing disambiguating cues (entities, attributes, actions, temporal hints, viewpoint).
(3) If confidence is already good (score ≥ 0.7 or verdict=\"accept\"), return an empty string.
(4) Prefer concrete visual cues (colors, clothing, object names, motion phase, timestamps, left/right, first/last).
(5) No speculation or unseen entities.
Inputs.
Question: {question}
Global caption: {global_caption}
Last answer: {last_answer}
Evaluation JSON: {eval_json}
Return. {\"refined_query\": \"...\"}
";

const FRAME_NOTE: &str = "\
Role. Assist video understanding via per-frame analysis. Describe the main objects and actions in this single frame concisely.
Focus.
(1) Living entities: distinct entities (appearance, clothing, color, species), likely roles, and what each is doing (verb phrases).
(2) Static objects & scene: salient items and states (color, shape, on/off, open/closed, broken/intact), plus scene context (indoor/outdoor, location hints).
Style. Specific but brief; no speculation; 2–4 short sentences.
Frame. {frame}
";

const GLOBAL_ANSWER: &str = "\
Role. Answer concisely using only the question and the global video caption.
Inputs.
Question: {question}
Global caption (may miss fine details): {global_caption}
Instruction. Produce one short answer (1–2 sentences). If information is insufficient, reply: “Not enough evidence from global caption.”
";

const ANSWER: &str = "\
Role. Answer a video question from temporally ordered keyframes and a global caption.
Inputs.
Keyframes (earlier → later): {frames}
Global caption: {global_caption}
Question: {question}
Instruction. Compare events across the keyframes in order. Produce one short answer (1–2 sentences).
";

enum Segment<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn is_slot_name(s: &str) -> bool {
    !s.is_empty()
        && s
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

fn segments(template: &str) -> Vec<Segment<'_>> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_slot_name(&after[..close]) => {
                if open > 0 {
                    out.push(Segment::Text(&rest[..open]));
                }
                out.push(Segment::Slot(&after[..close]));
                rest = &after[close + 1..];
            }
            _ => {
                out.push(Segment::Text(&rest[..=open]));
                rest = after;
            }
        }
    }
    if !rest.is_empty() {
        out.push(Segment::Text(rest));
    }
    out
}

/// Substitute `fields` into the template for `kind`. Values are inserted
/// verbatim; extra fields are ignored.
pub fn render_prompt<K, V>(kind: PromptKind, fields: &BTreeMap<K, V>) -> Result<String>
where
    K: std::borrow::Borrow<str> + Ord,
    V: AsRef<str>,
{
    let mut out = String::with_capacity(kind.template().len() + 256);
    for seg in segments(kind.template()) {
        match seg {
            Segment::Text(t) => out.push_str(t),
            Segment::Slot(name) => {
                let value = fields.get(name).ok_or_else(|| {
                    Error::validation(format!("missing placeholder \"{name}\" for {kind} prompt"))
                })?;
                out.push_str(value.as_ref());
            }
        }
    }
    Ok(out)
}

/// Convenience builder for field maps.
pub fn fields<'a>(pairs: &[(&'a str, &'a str)]) -> BTreeMap<&'a str, &'a str> {
    pairs.iter().copied().collect()
}
