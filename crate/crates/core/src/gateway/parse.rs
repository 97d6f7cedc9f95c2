//! Strict parsers for structured backend replies.
//!
//! Replies are scanned for balanced-brace objects (braces inside JSON strings
//! do not count) and the first one that decodes as a JSON object is
//! validated field by field.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Default acceptance threshold on the evaluator score.
pub const ACCEPT_THRESHOLD: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionType {
    Static,
    Dynamic,
}

impl QuestionType {
    pub fn as_str(self) -> &'static str {
        match self {
            QuestionType::Static => "static",
            QuestionType::Dynamic => "dynamic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Accept,
    Reject,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Accept => "accept",
            Decision::Reject => "reject",
        }
    }
}

/// Evaluator output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub score: f64,
    pub verdict: Decision,
    pub brief_reason: String,
}

impl Verdict {
    /// Fallback used when the evaluator reply cannot be parsed.
    pub fn degraded(reason: impl Into<String>) -> Self {
        Self {
            score: 0.0,
            verdict: Decision::Reject,
            brief_reason: reason.into(),
        }
    }

    /// Accepted when the score reaches `threshold` or the verdict says accept.
    pub fn accepted(&self, threshold: f64) -> bool {
        self.score >= threshold || self.verdict == Decision::Accept
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("verdict serializes")
    }
}

/// Byte ranges of balanced `{...}` spans, in order of their opening brace.
fn balanced_spans(text: &str) -> impl Iterator<Item = &str> + '_ {
    let bytes = text.as_bytes();
    let mut start = 0;
    std::iter::from_fn(move || {
        while let Some(off) = bytes[start..].iter().position(|&b| b == b'{') {
            let open = start + off;
            start = open + 1;
            let mut depth = 0usize;
            let mut in_str = false;
            let mut escaped = false;
            for (i, &b) in bytes.iter().enumerate().skip(open) {
                if in_str {
                    match b {
                        _ if escaped => escaped = false,
                        b'\\' => escaped = true,
                        b'"' => in_str = false,
                        _ => {}
                    }
                    continue;
                }
                match b {
                    b'"' => in_str = true,
                    b'{' => depth += 1,
                    b'}' => {
                        depth -= 1;
                        if depth == 0 {
                            return Some(&text[open..=i]);
                        }
                    }
                    _ => {}
                }
            }
        }
        None
    })
}

/// First balanced-brace span in `reply` that decodes as a JSON object.
pub fn extract_object(reply: &str) -> Result<Map<String, Value>> {
    balanced_spans(reply)
        .find_map(|span| match serde_json::from_str::<Value>(span) {
            Ok(Value::Object(map)) => Some(map),
            _ => None,
        })
        .ok_or_else(|| Error::Parse(format!("no JSON object in reply {}", excerpt(reply))))
}

fn excerpt(s: &str) -> String {
    const MAX: usize = 80;
    let mut cut: String = s.chars().take(MAX).collect();
    if s.chars().nth(MAX).is_some() {
        cut.push_str("...");
    }
    format!("{cut:?}")
}

fn string_field<'a>(obj: &'a Map<String, Value>, key: &str) -> Result<&'a str> {
    match obj.get(key) {
        Some(Value::String(s)) => Ok(s),
        Some(other) => Err(Error::Parse(format!("\"{key}\" is not a string: {other}"))),
        None => Err(Error::Parse(format!("missing key \"{key}\""))),
    }
}

pub fn parse_evaluator(reply: &str) -> Result<Verdict> {
    let obj = extract_object(reply)?;
    let score = match obj.get("score") {
        Some(Value::Number(n)) => n.as_f64().unwrap_or(f64::NAN),
        Some(other) => return Err(Error::Parse(format!("\"score\" is not a number: {other}"))),
        None => return Err(Error::Parse("missing key \"score\"".into())),
    };
    if !(0.0..=1.0).contains(&score) {
        return Err(Error::Parse(format!("score {score} outside [0, 1]")));
    }
    let verdict = match string_field(&obj, "verdict")?.trim() {
        "accept" => Decision::Accept,
        "reject" => Decision::Reject,
        other => return Err(Error::Parse(format!("unknown verdict {other:?}"))),
    };
    let brief_reason = match obj.get("brief_reason") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| match v {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            })
            .collect::<Vec<_>>()
            .join("; "),
        Some(other) => other.to_string(),
    };
    Ok(Verdict {
        score,
        verdict,
        brief_reason,
    })
}

/// Refined search text; an empty string means "keep the current query".
pub fn parse_reflector(reply: &str) -> Result<String> {
    let obj = extract_object(reply)?;
    Ok(string_field(&obj, "refined_query")?.trim().to_string())
}

pub fn parse_router(reply: &str) -> Result<QuestionType> {
    let obj = extract_object(reply)?;
    match string_field(&obj, "qtype")?.trim() {
        "static" => Ok(QuestionType::Static),
        "dynamic" => Ok(QuestionType::Dynamic),
        other => Err(Error::Parse(format!("unknown qtype {other:?}"))),
    }
}
