//! Evaluation harness for measuring how language models recover from
//! deliberately perturbed chain-of-thought reasoning stubs.
//!
//! The pipeline has four phases: a model generates a short solution stub for
//! a math problem, a held-out model (or a deterministic rule) introduces a
//! single reasoning error into the stub, the evaluated model completes the
//! perturbed stub through assistant prefill so the whole thing reads as one
//! uninterrupted utterance, and a judge model grades the final answer.
//! Trials are persisted to an append-only run store and summarized into
//! per-scenario success rates, recovery statistics, and correction-style
//! counts.
//!
//! Modules map onto the pipeline: [`datasets`] loads benchmark problems,
//! [`client`] talks to OpenAI-compatible chat endpoints (with retries, rate
//! limiting, and a prefill capability probe), [`perturb`] produces and
//! validates perturbations, [`scenarios`] orchestrates trials, [`grading`]
//! decides correctness, [`store`] persists records, and [`analysis`] computes
//! the reported metrics. [`scripted`] is an in-process provider used to run
//! the whole pipeline deterministically in tests.

pub mod analysis;
pub mod assets;
pub mod client;
pub mod config;
pub mod datasets;
pub mod exec;
pub mod grading;
pub mod perturb;
pub mod scenarios;
pub mod scripted;
pub mod store;

pub use client::{ChatClient, ChatMessage, CompletionRequest, CompletionResult, SamplingParams};
pub use config::RunConfig;
pub use datasets::{DatasetId, Problem};
pub use grading::Verdict;
pub use perturb::{PerturbationKind, PerturbationRecord, ReasoningStub};
pub use scenarios::{Orchestrator, ScenarioKind, TrialRecord, TrialStatus};
pub use store::RunStore;
