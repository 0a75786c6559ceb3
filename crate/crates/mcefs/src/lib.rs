//! Experiment harness for few-shot aspect-based sentiment classification
//! over chat-completion models.
//!
//! Three conversation protocols are implemented: traditional few-shot
//! prompting, metacognition-enhanced few-shot prompting (the model predicts
//! each demonstration without its label, receives correctness feedback, and
//! reflects before the test query), and the latter with praise injected
//! after correct demonstration predictions. Runs are deterministic given a
//! corpus, a config, and a scripted backend, and are resumable after
//! interruption.

pub mod backend;
pub mod corpus;
pub mod metrics;
pub mod protocol;
pub mod runner;
pub mod sampler;
