//! Evidence-set selection for video question answering over cached frame
//! embeddings, and timestep-dependent cross-modal attention gains.
//!
//! The question-answering side works on a pool of pre-computed frame
//! embeddings ([`store`]). A retrieval policy ([`retrieval`]) grows or prunes
//! a temporally ordered working set, an LLM-backed actor/evaluator/reflector
//! loop ([`reflection`], [`gateway`]) answers and rewrites the search text,
//! and [`policy_grad`] plus [`simulator`] give the numeric score-function
//! view of that rewrite. [`tma`] holds the attention gain schedules.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod embed;
pub mod error;
pub mod gateway;
pub mod policy_grad;
pub mod reflection;
pub mod retrieval;
pub mod simulator;
pub mod store;
pub mod tma;
pub mod vecmath;

pub use error::{Error, Result};
pub use store::{EmbeddingStore, SearchState};
