//! Backend-agnostic access to the LLM roles (router, frame describer,
//! summarizer, actor, evaluator, reflector).
//!
//! A [`Gateway`] renders the role prompt, sends it through a [`Backend`] and
//! parses the reply. Parse failures on the evaluator and reflector are
//! retried once and then degraded (reject with score 0, or "keep the current
//! query") so a loop can always finish without a well-behaved backend.

mod http;
mod mock;
mod parse;
mod prompts;

use std::fmt;
use std::time::Duration;

pub use http::{extract_content, HttpBackend};
pub use mock::{offline_reply, MockBackend};
pub use parse::{
    extract_object, parse_evaluator, parse_reflector, parse_router, Decision, QuestionType,
    Verdict, ACCEPT_THRESHOLD,
};
pub use prompts::{fields, render_prompt, PromptKind};

use crate::error::{Error, Result};

/// Environment variable holding the bearer token for HTTP backends.
pub const API_KEY_ENV: &str = "FRAMELOOP_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Http,
    Mock,
}

/// A credential that never shows up in `Debug` output.
#[derive(Clone, Default, PartialEq, Eq)]
pub struct Secret(Option<String>);

impl Secret {
    pub fn new(value: impl Into<String>) -> Self {
        Self(Some(value.into()))
    }

    pub fn none() -> Self {
        Self(None)
    }

    pub fn expose(&self) -> Option<&str> {
        self.0.as_deref()
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(_) => f.write_str("Secret(***)"),
            None => f.write_str("Secret(None)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub model_name: String,
    pub api_key: Secret,
    pub timeout: Duration,
    pub max_retries: u32,
    pub sampling_temperature: f64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint: String::new(),
            model_name: String::new(),
            api_key: Secret::none(),
            timeout: Duration::from_secs(60),
            max_retries: 1,
            sampling_temperature: 0.0,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kind == BackendKind::Http {
            if self.endpoint.trim().is_empty() {
                return Err(Error::validation("http backend needs an endpoint"));
            }
            if self.model_name.trim().is_empty() {
                return Err(Error::validation("http backend needs a model name"));
            }
        }
        if self.timeout.is_zero() {
            return Err(Error::validation("backend timeout must be positive"));
        }
        Ok(())
    }
}

/// Assistant text plus call metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    /// Attempts beyond the first that were needed.
    pub retries: u32,
}

pub trait Backend: Send + Sync {
    fn complete(&self, kind: PromptKind, prompt: &str) -> Result<Completion>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn complete(&self, kind: PromptKind, prompt: &str) -> Result<Completion> {
        (**self).complete(kind, prompt)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn complete(&self, kind: PromptKind, prompt: &str) -> Result<Completion> {
        (**self).complete(kind, prompt)
    }
}

/// Uses `fallback` whenever `primary` fails to reach its service.
pub struct FallbackBackend<P, F> {
    pub primary: P,
    pub fallback: F,
}

impl<P: Backend, F: Backend> Backend for FallbackBackend<P, F> {
    fn complete(&self, kind: PromptKind, prompt: &str) -> Result<Completion> {
        match self.primary.complete(kind, prompt) {
            Err(e @ (Error::Transport { .. } | Error::Service { .. })) => {
                log::warn!("{kind} call failed ({e}); using fallback backend");
                self.fallback.complete(kind, prompt)
            }
            other => other,
        }
    }
}

impl PromptKind {
    /// Recognize which template a rendered prompt came from.
    pub fn detect(prompt: &str) -> Option<PromptKind> {
        PromptKind::ALL.into_iter().find(|k| {
            let head = k.template().lines().next().unwrap_or_default();
            prompt.lines().next() == Some(head)
        })
    }
}

/// Build the backend described by `config`.
pub fn backend_from_config(config: &BackendConfig) -> Result<Box<dyn Backend>> {
    config.validate()?;
    Ok(match config.kind {
        BackendKind::Http => Box::new(HttpBackend::new(config.clone())?),
        BackendKind::Mock => Box::new(MockBackend::new()),
    })
}

/// Send one prompt through the backend described by `config`.
pub fn call(config: &BackendConfig, prompt: &str) -> Result<Completion> {
    let kind = PromptKind::detect(prompt).unwrap_or(PromptKind::Answer);
    backend_from_config(config)?.complete(kind, prompt)
}

/// A frame as presented to the backend roles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameRef {
    pub index: usize,
    pub timestamp: f64,
}

impl fmt::Display for FrameRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{} @ {}s", self.index, self.timestamp)
    }
}

/// Evaluator result, noting whether the reply had to be degraded.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub verdict: Verdict,
    pub degraded: bool,
}

/// Reflector result, noting whether the reply had to be degraded.
#[derive(Debug, Clone, PartialEq)]
pub struct Reflection {
    pub refined_query: String,
    pub degraded: bool,
}

pub const ONE_SHOT_USER: &str = "Question: what color is the car? Global caption: A red sedan parks beside a fence. Answer: The car is red.";
pub const ONE_SHOT_ASSISTANT: &str =
    r#"{"score":0.9,"verdict":"accept","brief_reason":["answer matches the keyframes"]}"#;

/// Role-level client over any [`Backend`].
pub struct Gateway<B> {
    backend: B,
    pub one_shot_user: String,
    pub one_shot_assistant: String,
}

impl<B: Backend> Gateway<B> {
    pub fn new(backend: B) -> Self {
        Self {
            backend,
            one_shot_user: ONE_SHOT_USER.to_string(),
            one_shot_assistant: ONE_SHOT_ASSISTANT.to_string(),
        }
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    fn ask(&self, kind: PromptKind, pairs: &[(&str, &str)]) -> Result<String> {
        let prompt = render_prompt(kind, &fields(pairs))?;
        Ok(self.backend.complete(kind, &prompt)?.text)
    }

    /// Raw router classification; parse failures are returned as errors.
    pub fn route(&self, question: &str) -> Result<QuestionType> {
        parse_router(&self.ask(PromptKind::Route, &[("question", question)])?)
    }

    pub fn frame_note(&self, frame: FrameRef) -> Result<String> {
        Ok(self
            .ask(PromptKind::FrameNote, &[("frame", &frame.to_string())])?
            .trim()
            .to_string())
    }

    pub fn summarize(&self, notes: &[String]) -> Result<String> {
        let listed: Vec<String> = notes.iter().map(|n| format!("- {n}")).collect();
        Ok(self
            .ask(PromptKind::Summarize, &[("notes", &listed.join("\n"))])?
            .trim()
            .to_string())
    }

    pub fn answer(&self, question: &str, frames: &[FrameRef], caption: &str) -> Result<String> {
        let listed: Vec<String> = frames.iter().map(ToString::to_string).collect();
        Ok(self
            .ask(
                PromptKind::Answer,
                &[
                    ("frames", &listed.join(", ")),
                    ("global_caption", caption),
                    ("question", question),
                ],
            )?
            .trim()
            .to_string())
    }

    pub fn evaluate(&self, question: &str, answer: &str, caption: &str) -> Result<Evaluation> {
        let case = format!("Question: {question}\nGlobal caption: {caption}\nAnswer: {answer}");
        let pairs = [
            ("one_shot_user", self.one_shot_user.as_str()),
            ("one_shot_assistant", self.one_shot_assistant.as_str()),
            ("case", case.as_str()),
        ];
        let mut last_err = None;
        for _ in 0..2 {
            match parse_evaluator(&self.ask(PromptKind::Evaluate, &pairs)?) {
                Ok(verdict) => {
                    return Ok(Evaluation {
                        verdict,
                        degraded: false,
                    })
                }
                Err(e) => last_err = Some(e),
            }
        }
        let reason = format!("unparsable evaluator reply: {}", last_err.unwrap());
        Ok(Evaluation {
            verdict: Verdict::degraded(reason),
            degraded: true,
        })
    }

    pub fn reflect(
        &self,
        question: &str,
        caption: &str,
        last_answer: &str,
        verdict: &Verdict,
    ) -> Result<Reflection> {
        let eval_json = verdict.to_json();
        let pairs = [
            ("question", question),
            ("global_caption", caption),
            ("last_answer", last_answer),
            ("eval_json", eval_json.as_str()),
        ];
        for _ in 0..2 {
            if let Ok(q) = parse_reflector(&self.ask(PromptKind::Reflect, &pairs)?) {
                return Ok(Reflection {
                    refined_query: q,
                    degraded: false,
                });
            }
        }
        Ok(Reflection {
            refined_query: String::new(),
            degraded: true,
        })
    }

    pub fn global_answer(&self, question: &str, caption: &str) -> Result<String> {
        Ok(self
            .ask(
                PromptKind::GlobalAnswer,
                &[("question", question), ("global_caption", caption)],
            )?
            .trim()
            .to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn secret_debug_is_redacted() {
        let c = BackendConfig {
            api_key: Secret::new("sk-very-secret"),
            ..Default::default()
        };
        assert!(!format!("{c:?}").contains("sk-very-secret"));
    }

    #[test]
    fn http_config_requires_endpoint_and_model() {
        let mut c = BackendConfig {
            kind: BackendKind::Http,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.endpoint = "http://localhost:1/v1/chat/completions".into();
        assert!(c.validate().is_err());
        c.model_name = "m".into();
        assert!(c.validate().is_ok());
    }

    #[test]
    fn detect_prompt_kind() {
        for kind in PromptKind::ALL {
            let pairs: Vec<(&str, &str)> = kind.placeholders().into_iter().map(|p| (p, "x")).collect();
            let prompt = render_prompt(kind, &fields(&pairs)).unwrap();
            assert_eq!(PromptKind::detect(&prompt), Some(kind));
        }
    }

    #[test]
    fn call_with_mock_config() {
        let prompt = render_prompt(PromptKind::GlobalAnswer, &fields(&[("question", "q"), ("global_caption", "c")]))
            .unwrap();
        let out = call(&BackendConfig::default(), &prompt).unwrap();
        assert_eq!(out.text, "Not enough evidence from global caption.");
    }

    #[test]
    fn evaluator_retries_then_degrades() {
        let g = Gateway::new(MockBackend::new().script(PromptKind::Evaluate, ["garbage"]));
        let e = g.evaluate("q", "a", "c").unwrap();
        assert!(e.degraded);
        assert_eq!(e.verdict.score, 0.0);
        assert_eq!(e.verdict.verdict, Decision::Reject);
        assert_eq!(g.backend().count(PromptKind::Evaluate), 2);

        let g = Gateway::new(MockBackend::new().script(
            PromptKind::Evaluate,
            ["oops", r#"{"score":0.9,"verdict":"accept"}"#],
        ));
        let e = g.evaluate("q", "a", "c").unwrap();
        assert!(!e.degraded);
        assert_eq!(e.verdict.score, 0.9);
    }

    #[test]
    fn reflector_degrades_to_empty() {
        let g = Gateway::new(MockBackend::new().script(PromptKind::Reflect, [r#"{"query":"x"}"#]));
        let r = g.reflect("q", "c", "a", &Verdict::degraded("x")).unwrap();
        assert!(r.degraded);
        assert!(r.refined_query.is_empty());
    }

    #[test]
    fn fallback_backend_on_transport_error() {
        struct Down;
        impl Backend for Down {
            fn complete(&self, _: PromptKind, _: &str) -> Result<Completion> {
                Err(Error::Transport {
                    attempts: 2,
                    message: "refused".into(),
                })
            }
        }
        let b = FallbackBackend {
            primary: Down,
            fallback: MockBackend::new().script(PromptKind::Answer, ["ok"]),
        };
        assert_eq!(b.complete(PromptKind::Answer, "p").unwrap().text, "ok");
    }
}
