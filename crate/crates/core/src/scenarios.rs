//! The three evaluation scenarios and the four-phase trial workflow.
//!
//! A Direct trial is one unbounded solve call plus grading. A perturbed
//! trial runs the full workflow: stub generation, perturbation (model or
//! rule), prefill completion of the perturbed stub, grading of the full
//! utterance. On-policy stubs come from the evaluated model itself;
//! off-policy stubs come from a shared set prepared once with the held-out
//! model and reused byte-identically across evaluated models.
//!
//! Every trial ends in a [`TrialRecord`], failed ones included; absent
//! responses are excluded from success-rate denominators downstream but stay
//! visible as coverage.

use std::collections::HashMap;
use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::assets;
use crate::client::{ChatClient, ChatMessage, ClientError, CompletionRequest, SamplingParams};
use crate::config::{ConfigError, PerturberConfig, RunConfig};
use crate::datasets::Problem;
use crate::exec;
use crate::grading::{self, GradeError, Verdict};
use crate::perturb::{
    self, rules, PerturbationKind, PerturbationRecord, ReasoningStub, StubOrigin,
};
use crate::store::{RunStore, StoreError, TrialSink, SCHEMA_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Direct,
    OnPolicy,
    OffPolicy,
}

impl ScenarioKind {
    pub const ALL: &'static [ScenarioKind] =
        &[ScenarioKind::Direct, ScenarioKind::OnPolicy, ScenarioKind::OffPolicy];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioKind::Direct => "direct",
            ScenarioKind::OnPolicy => "on_policy",
            ScenarioKind::OffPolicy => "off_policy",
        }
    }

    pub fn is_perturbed(&self) -> bool {
        !matches!(self, ScenarioKind::Direct)
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "direct" => Ok(ScenarioKind::Direct),
            "on_policy" => Ok(ScenarioKind::OnPolicy),
            "off_policy" => Ok(ScenarioKind::OffPolicy),
            other => Err(format!("unknown scenario '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Ok,
    AbsentResponse,
    PerturbationFailed,
    GradingFailed,
}

/// Request attempts per phase, including retries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseAttempts {
    pub stub: u32,
    pub perturbation: u32,
    pub completion: u32,
    pub grading: u32,
}

/// Full provenance of one evaluated problem in one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub schema_version: u32,
    pub run_id: String,
    pub problem_id: String,
    pub model: String,
    pub dataset: crate::datasets::DatasetId,
    pub scenario: ScenarioKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stub: Option<ReasoningStub>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<PerturbationRecord>,
    pub completion: String,
    /// What the grader sees: perturbed stub ++ completion for perturbed
    /// scenarios, the completion alone for Direct.
    pub full_utterance: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    pub status: TrialStatus,
    pub attempts: PhaseAttempts,
    pub sampling: SamplingParams,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
}

impl TrialRecord {
    pub fn key(&self) -> (String, ScenarioKind) {
        (self.problem_id.clone(), self.scenario)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub executed: usize,
    pub skipped_existing: usize,
    pub ok: usize,
    pub absent_response: usize,
    pub perturbation_failed: usize,
    pub grading_failed: usize,
}

impl RunSummary {
    fn tally(&mut self, status: TrialStatus) {
        self.executed += 1;
        match status {
            TrialStatus::Ok => self.ok += 1,
            TrialStatus::AbsentResponse => self.absent_response += 1,
            TrialStatus::PerturbationFailed => self.perturbation_failed += 1,
            TrialStatus::GradingFailed => self.grading_failed += 1,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("stub set {path}: {message}")]
    StubSet { path: String, message: String },
    #[error("run aborted after a store write failure ({written} records already durable): {source}")]
    Aborted {
        written: usize,
        #[source]
        source: StoreError,
    },
}

/// Outcome of one phase: the value plus request attempts, or the trial
/// status the failure maps to.
type Phase<T> = Result<(T, u32), (TrialStatus, u32)>;

fn client_failure(err: ClientError) -> (TrialStatus, u32) {
    let attempts = match &err {
        ClientError::AbsentResponse { attempts, .. } => *attempts,
        _ => 1,
    };
    log::debug!("phase failed: {err}");
    (TrialStatus::AbsentResponse, attempts)
}

pub struct Orchestrator {
    config: RunConfig,
    evaluated: ChatClient,
    helper: ChatClient,
    stub_set: Option<HashMap<String, PerturbationRecord>>,
}

impl Orchestrator {
    /// Wire up a run. Off-policy runs load their shared stub set here.
    pub fn new(config: RunConfig, evaluated: ChatClient, helper: ChatClient) -> Result<Self, RunError> {
        config.validate()?;
        let stub_set = match config.scenario {
            ScenarioKind::OffPolicy => {
                let path = config.stub_set.as_ref().expect("validated above");
                Some(load_stub_set(path)?)
            }
            _ => None,
        };
        Ok(Self { config, evaluated, helper, stub_set })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    fn solve_prompt(problem: &Problem) -> String {
        assets::fill(assets::SOLVE_TEMPLATE, &[("problem", &problem.question)])
    }

    /// Phase one: the first `stub_max_tokens` tokens of a solution, sampled
    /// with the solution params. Mid-word truncation is expected.
    pub fn generate_stub(&self, problem: &Problem) -> Result<ReasoningStub, ClientError> {
        let (stub, _) = self.stub_phase(problem)?;
        Ok(stub)
    }

    fn stub_phase(&self, problem: &Problem) -> Result<(ReasoningStub, u32), ClientError> {
        let request = CompletionRequest::new(
            self.config.evaluated.model.clone(),
            vec![ChatMessage::user(Self::solve_prompt(problem))],
            self.config.sampling.with_max_tokens(self.config.stub_max_tokens),
        );
        let result = self.evaluated.complete_chat(&request)?;
        Ok((
            ReasoningStub {
                text: result.text,
                origin: StubOrigin::OnPolicy(self.config.evaluated.model.clone()),
                problem_id: problem.id.clone(),
            },
            result.attempts,
        ))
    }

    /// Phase two. Model perturbations get one greedy retry when the reply
    /// is unparseable or fails validation; rule perturbations are
    /// deterministic per (problem, seed).
    fn perturb_phase(&self, stub: &ReasoningStub) -> Phase<PerturbationRecord> {
        match &self.config.perturber {
            PerturberConfig::Rule { seed } => {
                let trial_seed = seed ^ fnv1a(stub.problem_id.as_bytes());
                match rules::apply_any_rule(stub, trial_seed, PerturbationKind::RULE_KINDS) {
                    Ok(record) if record.validation.verdict.is_valid() => Ok((record, 0)),
                    _ => Err((TrialStatus::PerturbationFailed, 0)),
                }
            }
            PerturberConfig::Model => {
                let prompt = match perturb::render_perturbation_prompt(stub) {
                    Ok(prompt) => prompt,
                    Err(_) => return Err((TrialStatus::PerturbationFailed, 0)),
                };
                let request = CompletionRequest::new(
                    self.config.helper.model.clone(),
                    vec![ChatMessage::user(prompt)],
                    self.config.helper_sampling,
                );
                let mut attempts = 0;
                for _ in 0..2 {
                    let result = match self.helper.complete_chat(&request) {
                        Ok(result) => result,
                        Err(err) => {
                            let (status, more) = client_failure(err);
                            return Err((status, attempts + more));
                        }
                    };
                    attempts += result.attempts;
                    if let Ok(text) = perturb::parse_perturbed_stub(&result.text) {
                        let validation = perturb::validate_perturbation(stub, &text);
                        if validation.verdict.is_valid() {
                            return Ok((
                                PerturbationRecord {
                                    original: stub.clone(),
                                    perturbed_text: text,
                                    kind: PerturbationKind::LlmFreeform,
                                    perturber: self.config.helper.model.clone(),
                                    explanation: None,
                                    validation,
                                },
                                attempts,
                            ));
                        }
                    }
                }
                Err((TrialStatus::PerturbationFailed, attempts))
            }
        }
    }

    /// Phase three: continue the perturbed stub through assistant prefill;
    /// stub and completion read as one uninterrupted utterance.
    fn completion_phase(&self, problem: &Problem, perturbed: &str) -> Result<(String, u32), ClientError> {
        let request = CompletionRequest::prefill(
            self.config.evaluated.model.clone(),
            vec![
                ChatMessage::user(Self::solve_prompt(problem)),
                ChatMessage::assistant(perturbed.to_string()),
            ],
            self.config.sampling,
        );
        let result = self.evaluated.complete_chat(&request)?;
        Ok((result.text, result.attempts))
    }

    /// Direct solutions run uncapped; only stubs carry a token ceiling.
    fn direct_phase(&self, problem: &Problem) -> Result<(String, u32), ClientError> {
        let request = CompletionRequest::new(
            self.config.evaluated.model.clone(),
            vec![ChatMessage::user(Self::solve_prompt(problem))],
            self.config.sampling,
        );
        let result = self.evaluated.complete_chat(&request)?;
        Ok((result.text, result.attempts))
    }

    fn grading_phase(&self, problem: &Problem, full_utterance: &str) -> Phase<Verdict> {
        match grading::grade_candidate(&self.helper, problem, full_utterance, &self.config.grader_config())
        {
            Ok(outcome) => Ok((outcome.verdict, outcome.attempts)),
            Err(GradeError::Client(err)) => Err(client_failure(err)),
            Err(err) => {
                log::debug!("grading failed: {err}");
                let attempts = match err {
                    GradeError::MalformedVerdict { calls, .. } => calls,
                    _ => 0,
                };
                Err((TrialStatus::GradingFailed, attempts))
            }
        }
    }

    /// Run the full workflow for one problem. Failures become statuses, not
    /// errors; the record is always produced.
    pub fn run_trial(&self, problem: &Problem) -> TrialRecord {
        let started_at = Utc::now();
        let mut attempts = PhaseAttempts::default();
        let record = |status: TrialStatus,
                          stub: Option<ReasoningStub>,
                          perturbation: Option<PerturbationRecord>,
                          completion: String,
                          full_utterance: String,
                          verdict: Option<Verdict>,
                          attempts: PhaseAttempts| TrialRecord {
            schema_version: SCHEMA_VERSION,
            run_id: self.config.run_id.clone(),
            problem_id: problem.id.clone(),
            model: self.config.evaluated.model.clone(),
            dataset: problem.dataset,
            scenario: self.config.scenario,
            stub,
            perturbation,
            completion,
            full_utterance,
            verdict,
            status,
            attempts,
            sampling: self.config.sampling,
            started_at,
            finished_at: Utc::now(),
        };

        // Direct: solve then grade.
        if self.config.scenario == ScenarioKind::Direct {
            let (completion, used) = match self.direct_phase(problem) {
                Ok(done) => done,
                Err(err) => {
                    attempts.completion = client_failure(err).1;
                    return record(
                        TrialStatus::AbsentResponse,
                        None,
                        None,
                        String::new(),
                        String::new(),
                        None,
                        attempts,
                    );
                }
            };
            attempts.completion = used;
            let full = completion.clone();
            return match self.grading_phase(problem, &full) {
                Ok((verdict, used)) => {
                    attempts.grading = used;
                    record(TrialStatus::Ok, None, None, completion, full, Some(verdict), attempts)
                }
                Err((status, used)) => {
                    attempts.grading = used;
                    record(status, None, None, completion, full, None, attempts)
                }
            };
        }

        // Perturbed scenarios: obtain (stub, perturbation).
        let (stub, perturbation) = match self.config.scenario {
            ScenarioKind::OnPolicy => {
                let (stub, used) = match self.stub_phase(problem) {
                    Ok(done) => done,
                    Err(err) => {
                        attempts.stub = client_failure(err).1;
                        return record(
                            TrialStatus::AbsentResponse,
                            None,
                            None,
                            String::new(),
                            String::new(),
                            None,
                            attempts,
                        );
                    }
                };
                attempts.stub = used;
                match self.perturb_phase(&stub) {
                    Ok((perturbation, used)) => {
                        attempts.perturbation = used;
                        (stub, perturbation)
                    }
                    Err((status, used)) => {
                        attempts.perturbation = used;
                        return record(
                            status,
                            Some(stub),
                            None,
                            String::new(),
                            String::new(),
                            None,
                            attempts,
                        );
                    }
                }
            }
            ScenarioKind::OffPolicy => {
                let shared = self.stub_set.as_ref().expect("off-policy runs load a stub set");
                match shared.get(&problem.id) {
                    Some(perturbation) => {
                        (perturbation.original.clone(), perturbation.clone())
                    }
                    None => {
                        log::debug!("no shared stub for problem '{}'", problem.id);
                        return record(
                            TrialStatus::PerturbationFailed,
                            None,
                            None,
                            String::new(),
                            String::new(),
                            None,
                            attempts,
                        );
                    }
                }
            }
            ScenarioKind::Direct => unreachable!("handled above"),
        };

        let (completion, used) = match self.completion_phase(problem, &perturbation.perturbed_text) {
            Ok(done) => done,
            Err(err) => {
                attempts.completion = client_failure(err).1;
                return record(
                    TrialStatus::AbsentResponse,
                    Some(stub),
                    Some(perturbation),
                    String::new(),
                    String::new(),
                    None,
                    attempts,
                );
            }
        };
        attempts.completion = used;
        let full_utterance = format!("{}{}", perturbation.perturbed_text, completion);

        match self.grading_phase(problem, &full_utterance) {
            Ok((verdict, used)) => {
                attempts.grading = used;
                record(
                    TrialStatus::Ok,
                    Some(stub),
                    Some(perturbation),
                    completion,
                    full_utterance,
                    Some(verdict),
                    attempts,
                )
            }
            Err((status, used)) => {
                attempts.grading = used;
                record(status, Some(stub), Some(perturbation), completion, full_utterance, None, attempts)
            }
        }
    }

    /// Execute all pending trials against the store, resuming past work.
    /// Already-recorded (problem, scenario) keys are skipped; re-running a
    /// completed run performs zero generation calls.
    pub fn execute_run(&self, problems: &[Problem], store: &RunStore) -> Result<RunSummary, RunError> {
        let pending_ids: std::collections::HashSet<String> =
            store.pending_trials(problems).into_iter().collect();
        let skipped = problems.len() - pending_ids.len();
        let pending: Vec<Problem> =
            problems.iter().filter(|p| pending_ids.contains(&p.id)).cloned().collect();
        let mut summary = self.execute_with_sink(pending, store)?;
        summary.skipped_existing = skipped;
        Ok(summary)
    }

    /// Fan the given trials out under the configured concurrency bound,
    /// appending each record to `sink` as it finishes.
    pub fn execute_with_sink(
        &self,
        pending: Vec<Problem>,
        sink: &dyn TrialSink,
    ) -> Result<RunSummary, RunError> {
        self.execute_with_sink_bound(pending, sink, self.config.concurrency)
    }

    /// Same as [`execute_with_sink`] with an explicit bound; bound 1 is the
    /// sequential reference path.
    pub fn execute_with_sink_bound(
        &self,
        pending: Vec<Problem>,
        sink: &dyn TrialSink,
        bound: usize,
    ) -> Result<RunSummary, RunError> {
        let aborted = AtomicBool::new(false);
        let failure: Mutex<Option<StoreError>> = Mutex::new(None);
        let summary = Mutex::new(RunSummary::default());

        exec::map_bounded(pending, bound, |problem| {
            if aborted.load(Ordering::Relaxed) {
                return;
            }
            let record = self.run_trial(&problem);
            if aborted.load(Ordering::Relaxed) {
                return;
            }
            match sink.append(&record) {
                Ok(()) => summary.lock().expect("summary poisoned").tally(record.status),
                Err(err) => {
                    // First failure wins; everything in flight drains without
                    // writing, leaving the store a valid prefix.
                    aborted.store(true, Ordering::Relaxed);
                    failure.lock().expect("failure slot poisoned").get_or_insert(err);
                }
            }
        });

        let summary = summary.into_inner().expect("summary poisoned");
        match failure.into_inner().expect("failure slot poisoned") {
            Some(source) => Err(RunError::Aborted { written: summary.executed, source }),
            None => Ok(summary),
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for byte in bytes {
        hash ^= *byte as u64;
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    hash
}

// --- off-policy shared stub sets ---

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StubSetEntry {
    pub schema_version: u32,
    pub problem_id: String,
    pub record: PerturbationRecord,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StubSetSummary {
    pub prepared: usize,
    pub skipped_existing: usize,
    pub stub_failed: usize,
    pub perturbation_failed: usize,
}

/// Build the shared off-policy stub set: the held-out model generates each
/// stub and its perturbation once, persisted for verbatim reuse across all
/// evaluated models. Resumable; existing entries are kept.
pub fn prepare_stub_set(
    config: &RunConfig,
    helper: &ChatClient,
    problems: &[Problem],
    out_path: &Path,
) -> Result<StubSetSummary, RunError> {
    let existing: HashMap<String, PerturbationRecord> = if out_path.exists() {
        load_stub_set(out_path)?
    } else {
        HashMap::new()
    };
    let pending: Vec<Problem> =
        problems.iter().filter(|p| !existing.contains_key(&p.id)).cloned().collect();
    let skipped_existing = problems.len() - pending.len();

    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| RunError::StubSet {
                path: out_path.display().to_string(),
                message: e.to_string(),
            })?;
        }
    }
    let file = OpenOptions::new().create(true).append(true).open(out_path).map_err(|e| {
        RunError::StubSet { path: out_path.display().to_string(), message: e.to_string() }
    })?;
    let writer = Mutex::new(file);
    let summary = Mutex::new(StubSetSummary { skipped_existing, ..StubSetSummary::default() });

    // A shadow orchestrator whose "evaluated" model is the helper: stubs in
    // the shared set are the held-out model's work by definition.
    let mut helper_config = config.clone();
    helper_config.evaluated = config.helper.clone();
    let shadow = Orchestrator {
        config: helper_config,
        evaluated: helper.clone(),
        helper: helper.clone(),
        stub_set: None,
    };

    exec::map_bounded(pending, config.concurrency, |problem| {
        let stub = match shadow.stub_phase(&problem) {
            Ok((stub, _)) => ReasoningStub {
                origin: StubOrigin::OffPolicy(config.helper.model.clone()),
                ..stub
            },
            Err(err) => {
                log::debug!("stub generation failed for '{}': {err}", problem.id);
                summary.lock().expect("summary poisoned").stub_failed += 1;
                return;
            }
        };
        let record = match shadow.perturb_phase(&stub) {
            Ok((record, _)) => record,
            Err(_) => {
                summary.lock().expect("summary poisoned").perturbation_failed += 1;
                return;
            }
        };
        let entry = StubSetEntry {
            schema_version: SCHEMA_VERSION,
            problem_id: problem.id.clone(),
            record,
        };
        let line = serde_json::to_string(&entry).expect("stub set entry serializes");
        let mut file = writer.lock().expect("stub set writer poisoned");
        let result = writeln!(file, "{line}").and_then(|_| file.flush());
        match result {
            Ok(()) => summary.lock().expect("summary poisoned").prepared += 1,
            Err(err) => {
                log::error!("stub set write failed: {err}");
                summary.lock().expect("summary poisoned").stub_failed += 1;
            }
        }
    });

    Ok(summary.into_inner().expect("summary poisoned"))
}

/// Load a stub set keyed by problem id. First entry per problem wins.
pub fn load_stub_set(path: &Path) -> Result<HashMap<String, PerturbationRecord>, RunError> {
    let text = std::fs::read_to_string(path).map_err(|e| RunError::StubSet {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut set = HashMap::new();
    for (index, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: StubSetEntry = serde_json::from_str(line).map_err(|e| RunError::StubSet {
            path: path.display().to_string(),
            message: format!("line {}: {e}", index + 1),
        })?;
        set.entry(entry.problem_id).or_insert(entry.record);
    }
    Ok(set)
}
