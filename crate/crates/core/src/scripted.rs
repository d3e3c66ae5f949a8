//! Deterministic in-process provider implementing the client contract.
//!
//! A script is an ordered list of rules; each incoming request is served by
//! the first rule whose predicates match, consuming the next entry of that
//! rule's status schedule. A request matching no rule panics loudly: a
//! scripted test must account for every call its pipeline makes. Every
//! request is appended to a call log with timing, so tests can assert call
//! shapes, ordering, overlap, and rate.
//!
//! [`AgentBehavior`] sits one level up: a per-problem description of how a
//! fake model behaves (solves directly or not, recovers from a perturbation
//! or not, corrects explicitly or implicitly) that expands into scripts for
//! a full pipeline run, so end-to-end success rates are computable by hand
//! before the run.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::Deserialize;

use crate::client::{
    ChatMessage, ChatProvider, CompletionRequest, FinishReason, ProviderFault, ProviderReply, Role,
};
use crate::datasets::Problem;

/// Request predicates: all present fields must match.
#[derive(Debug, Clone, Default)]
pub struct Predicate {
    /// Role of the final message.
    pub role: Option<Role>,
    pub prefill: Option<bool>,
    /// Substring searched across all message contents.
    pub contains: Option<String>,
}

impl Predicate {
    fn matches(&self, request: &CompletionRequest) -> bool {
        if let Some(role) = self.role {
            if request.messages.last().map(|m| m.role) != Some(role) {
                return false;
            }
        }
        if let Some(prefill) = self.prefill {
            if request.prefill != prefill {
                return false;
            }
        }
        if let Some(needle) = &self.contains {
            if !request.messages.iter().any(|m| m.content.contains(needle.as_str())) {
                return false;
            }
        }
        true
    }
}

/// How a matched rule produces its reply text.
#[derive(Debug, Clone)]
pub enum Responder {
    Text(String),
    /// Extract the `<reasoning_stub>` block from the request and return it
    /// with its first number bumped, wrapped in `<perturbed_stub>` tags.
    PerturbStub,
    /// Extract `<answer>` and `<candidate_solution>` blocks and reply
    /// "correct" or "incorrect" by deterministic exact-match grading.
    JudgeExactMatch,
}

impl Responder {
    pub fn text(text: impl Into<String>) -> Self {
        Responder::Text(text.into())
    }
}

#[derive(Debug, Clone)]
pub struct Rule {
    pub name: String,
    pub when: Predicate,
    pub respond: Responder,
    /// Consumed one per matched call; the last entry repeats. 2xx entries
    /// produce replies, everything else a provider fault.
    pub statuses: Vec<u16>,
    pub delay: Duration,
}

impl Rule {
    pub fn any() -> Self {
        Self {
            name: "any".into(),
            when: Predicate::default(),
            respond: Responder::text(""),
            statuses: vec![200],
            delay: Duration::ZERO,
        }
    }

    pub fn on_contains(needle: impl Into<String>) -> Self {
        let needle = needle.into();
        Self {
            name: format!("contains:{}", &needle[..needle.len().min(24)]),
            when: Predicate { contains: Some(needle), ..Predicate::default() },
            ..Self::any()
        }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_prefill(mut self, prefill: bool) -> Self {
        self.when.prefill = Some(prefill);
        self
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.when.role = Some(role);
        self
    }

    pub fn responding(mut self, respond: Responder) -> Self {
        self.respond = respond;
        self
    }

    pub fn with_statuses(mut self, statuses: Vec<u16>) -> Self {
        assert!(!statuses.is_empty(), "status schedule cannot be empty");
        self.statuses = statuses;
        self
    }

    pub fn with_delay_ms(mut self, delay_ms: u64) -> Self {
        self.delay = Duration::from_millis(delay_ms);
        self
    }
}

/// One logged request.
#[derive(Debug, Clone)]
pub struct CallRecord {
    pub index: usize,
    pub rule: String,
    pub model: String,
    pub prefill: bool,
    pub status: u16,
    /// Whitespace tokens generated, for replies.
    pub tokens: Option<u32>,
    pub messages: Vec<ChatMessage>,
    /// Offsets from provider creation; `started_at..finished_at` spans the
    /// in-flight window used for overlap assertions.
    pub started_at: Duration,
    pub finished_at: Duration,
}

pub struct ScriptedProvider {
    rules: Vec<Rule>,
    cursors: Mutex<Vec<usize>>,
    log: Mutex<Vec<CallRecord>>,
    epoch: Instant,
}

impl ScriptedProvider {
    pub fn new(rules: Vec<Rule>) -> Self {
        let cursors = Mutex::new(vec![0; rules.len()]);
        Self { rules, cursors, log: Mutex::new(Vec::new()), epoch: Instant::now() }
    }

    /// Load rules from a TOML script file.
    pub fn from_file(path: &Path) -> Result<Self, ScriptError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScriptError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let file: ScriptFile = toml::from_str(&text).map_err(|e| ScriptError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let rules = file
            .rule
            .into_iter()
            .map(RuleSpec::into_rule)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::new(rules))
    }

    pub fn call_log(&self) -> Vec<CallRecord> {
        self.log.lock().expect("call log poisoned").clone()
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().expect("call log poisoned").len()
    }

    pub fn calls_matching(&self, pred: impl Fn(&CallRecord) -> bool) -> usize {
        self.call_log().iter().filter(|r| pred(r)).count()
    }

    /// Largest number of requests that were ever in flight simultaneously.
    pub fn max_concurrent_calls(&self) -> usize {
        let log = self.call_log();
        let mut events: Vec<(Duration, i32)> = Vec::with_capacity(log.len() * 2);
        for record in &log {
            events.push((record.started_at, 1));
            events.push((record.finished_at, -1));
        }
        events.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut current = 0i32;
        let mut peak = 0i32;
        for (_, delta) in events {
            current += delta;
            peak = peak.max(current);
        }
        peak.max(0) as usize
    }
}

impl ChatProvider for ScriptedProvider {
    fn execute(&self, request: &CompletionRequest) -> Result<ProviderReply, ProviderFault> {
        let started_at = self.epoch.elapsed();
        let (rule_index, rule) = self
            .rules
            .iter()
            .enumerate()
            .find(|(_, rule)| rule.when.matches(request))
            .unwrap_or_else(|| {
                panic!(
                    "scripted provider: no rule matches request (model={}, prefill={}, last_role={:?}, first_content={:?})",
                    request.model,
                    request.prefill,
                    request.messages.last().map(|m| m.role),
                    request.messages.first().map(|m| m.content.chars().take(80).collect::<String>()),
                )
            });

        let status = {
            let mut cursors = self.cursors.lock().expect("cursors poisoned");
            let cursor = &mut cursors[rule_index];
            let status = rule.statuses[(*cursor).min(rule.statuses.len() - 1)];
            *cursor += 1;
            status
        };

        if !rule.delay.is_zero() {
            std::thread::sleep(rule.delay);
        }

        let outcome = if (200..300).contains(&status) {
            let text = match &rule.respond {
                Responder::Text(text) => text.clone(),
                Responder::PerturbStub => perturb_stub_reply(request),
                Responder::JudgeExactMatch => judge_reply(request),
            };
            let (text, truncated, tokens) = truncate_tokens(&text, request.sampling.max_tokens);
            Ok(ProviderReply {
                text,
                finish_reason: if truncated { FinishReason::Length } else { FinishReason::Stop },
                tokens: Some(tokens),
            })
        } else {
            Err(ProviderFault::Status { code: status, message: format!("scripted status {status}") })
        };

        let finished_at = self.epoch.elapsed();
        {
            let mut log = self.log.lock().expect("call log poisoned");
            let index = log.len();
            log.push(CallRecord {
                index,
                rule: rule.name.clone(),
                model: request.model.clone(),
                prefill: request.prefill,
                status,
                tokens: outcome.as_ref().ok().and_then(|r| r.tokens),
                messages: request.messages.clone(),
                started_at,
                finished_at,
            });
        }
        outcome
    }
}

/// Truncate to `max` whitespace tokens, reporting the generated count.
fn truncate_tokens(text: &str, max: Option<u32>) -> (String, bool, u32) {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    match max {
        Some(max) if tokens.len() > max as usize => {
            (tokens[..max as usize].join(" "), true, max)
        }
        _ => (text.to_string(), false, tokens.len() as u32),
    }
}

fn extract_tag(text: &str, tag: &str) -> Option<String> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text.find(&open)? + open.len();
    let end = text[start..].find(&close)? + start;
    Some(text[start..end].trim().to_string())
}

fn request_text(request: &CompletionRequest) -> String {
    request
        .messages
        .iter()
        .map(|m| m.content.as_str())
        .collect::<Vec<_>>()
        .join("\n")
}

/// Bump the first digit run by one; a minimal single-site mutation that
/// always changes the value.
fn perturb_stub_reply(request: &CompletionRequest) -> String {
    let text = request_text(request);
    let stub = extract_tag(&text, "reasoning_stub")
        .unwrap_or_else(|| panic!("perturb rule matched a request with no <reasoning_stub> block"));
    let mutated = bump_first_number(&stub)
        .unwrap_or_else(|| panic!("scripted perturber needs a digit in the stub: {stub:?}"));
    format!(
        "A single number change will derail the later arithmetic.\n<perturbed_stub>{mutated}</perturbed_stub>"
    )
}

fn bump_first_number(text: &str) -> Option<String> {
    let start = text.find(|c: char| c.is_ascii_digit())?;
    let end = text[start..]
        .find(|c: char| !c.is_ascii_digit())
        .map(|offset| start + offset)
        .unwrap_or(text.len());
    let value: u64 = text[start..end].parse().ok()?;
    Some(format!("{}{}{}", &text[..start], value + 1, &text[end..]))
}

fn judge_reply(request: &CompletionRequest) -> String {
    let text = request_text(request);
    let answer = extract_tag(&text, "answer")
        .unwrap_or_else(|| panic!("judge rule matched a request with no <answer> block"));
    let candidate = extract_tag(&text, "candidate_solution")
        .unwrap_or_else(|| panic!("judge rule matched a request with no <candidate_solution> block"));
    match crate::grading::exact_match_grade(&candidate, &answer) {
        crate::grading::Verdict::Correct => "correct".into(),
        crate::grading::Verdict::Incorrect => "incorrect".into(),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScriptError {
    #[error("failed to read script {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse script {path}: {message}")]
    Parse { path: String, message: String },
    #[error("rule '{rule}': {message}")]
    BadRule { rule: String, message: String },
}

#[derive(Debug, Deserialize)]
struct ScriptFile {
    #[serde(default)]
    rule: Vec<RuleSpec>,
}

#[derive(Debug, Deserialize)]
struct RuleSpec {
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    role: Option<String>,
    #[serde(default)]
    prefill: Option<bool>,
    #[serde(default)]
    contains: Option<String>,
    #[serde(default)]
    responder: Option<String>,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    statuses: Option<Vec<u16>>,
    #[serde(default)]
    delay_ms: Option<u64>,
}

impl RuleSpec {
    fn into_rule(self) -> Result<Rule, ScriptError> {
        let name = self.name.unwrap_or_else(|| "unnamed".into());
        let role = match self.role.as_deref() {
            None => None,
            Some("system") => Some(Role::System),
            Some("user") => Some(Role::User),
            Some("assistant") => Some(Role::Assistant),
            Some(other) => {
                return Err(ScriptError::BadRule {
                    rule: name,
                    message: format!("unknown role '{other}'"),
                })
            }
        };
        let respond = match self.responder.as_deref() {
            None | Some("text") => Responder::Text(self.text.unwrap_or_default()),
            Some("perturb-stub") => Responder::PerturbStub,
            Some("judge-exact-match") => Responder::JudgeExactMatch,
            Some(other) => {
                return Err(ScriptError::BadRule {
                    rule: name,
                    message: format!("unknown responder '{other}'"),
                })
            }
        };
        let statuses = self.statuses.unwrap_or_else(|| vec![200]);
        if statuses.is_empty() {
            return Err(ScriptError::BadRule { rule: name, message: "empty status schedule".into() });
        }
        Ok(Rule {
            name,
            when: Predicate { role, prefill: self.prefill, contains: self.contains },
            respond,
            statuses,
            delay: Duration::from_millis(self.delay_ms.unwrap_or(0)),
        })
    }
}

// --- behavior-table pipeline agents ---

/// Whether the fake model recovers from a perturbed stub. Pure function of
/// (problem, seed), so expected totals are computable before the run.
#[derive(Debug, Clone)]
pub enum Recovery {
    Always,
    Never,
    WithProbability { probability: f64, seed: u64 },
}

impl Recovery {
    pub fn decide(&self, problem_id: &str) -> bool {
        match self {
            Recovery::Always => true,
            Recovery::Never => false,
            Recovery::WithProbability { probability, seed } => {
                let mut hash = *seed ^ 0x9e37_79b9_7f4a_7c15;
                for byte in problem_id.bytes() {
                    hash = hash.wrapping_mul(0x100_0000_01b3).wrapping_add(byte as u64);
                }
                ((hash >> 11) as f64 / (1u64 << 53) as f64) < *probability
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum CorrectionStyle {
    Explicit { marker: String },
    Implicit,
}

/// Scripted behavior of one fake model on one problem.
#[derive(Debug, Clone)]
pub struct AgentBehavior {
    pub solves_directly: bool,
    pub recovery: Recovery,
    pub style: CorrectionStyle,
}

impl AgentBehavior {
    pub fn always_correct() -> Self {
        Self {
            solves_directly: true,
            recovery: Recovery::Always,
            style: CorrectionStyle::Implicit,
        }
    }

    pub fn explicit_corrector(marker: impl Into<String>) -> Self {
        Self {
            solves_directly: true,
            recovery: Recovery::Always,
            style: CorrectionStyle::Explicit { marker: marker.into() },
        }
    }

    pub fn never_recovers() -> Self {
        Self {
            solves_directly: true,
            recovery: Recovery::Never,
            style: CorrectionStyle::Implicit,
        }
    }
}

/// A final answer guaranteed to grade incorrect against `answer`.
pub fn wrong_answer(answer: &str) -> String {
    match answer.trim().parse::<f64>() {
        Ok(value) => {
            let wrong = value + 1.0;
            if wrong.fract() == 0.0 {
                format!("{}", wrong as i64)
            } else {
                format!("{wrong}")
            }
        }
        Err(_) => "0".into(),
    }
}

fn direct_text(problem: &Problem, behavior: &AgentBehavior) -> String {
    let answer = if behavior.solves_directly {
        problem.answer.clone()
    } else {
        wrong_answer(&problem.answer)
    };
    format!(
        "To solve this, note the key quantities 24 and 18 and combine them step by step. \
         Working through the arithmetic carefully gives the result. The final answer is {answer}."
    )
}

fn completion_text(problem: &Problem, behavior: &AgentBehavior) -> String {
    if behavior.recovery.decide(&problem.id) {
        match &behavior.style {
            CorrectionStyle::Explicit { marker } => format!(
                " {marker}, the step above contains an error in one of the numbers. \
                 Redoing that step gives the right value, so the final answer is {}.",
                problem.answer
            ),
            CorrectionStyle::Implicit => format!(
                " Proceeding to recompute the totals precisely from the problem statement, \
                 the final answer is {}.",
                problem.answer
            ),
        }
    } else {
        format!(
            " Following the steps above to the end, the final answer is {}.",
            wrong_answer(&problem.answer)
        )
    }
}

fn helper_stub_text() -> String {
    "To solve this, start from the given values 36 and 12, set up the intermediate \
     quantities, and work stepwise toward the result."
        .into()
}

/// Rules that answer the prefill probe battery by continuing correctly.
pub fn probe_support_rules() -> Vec<Rule> {
    vec![
        Rule::on_contains("2 + 2").with_prefill(true).named("probe-arithmetic").responding(Responder::text(" 4")),
        Rule::on_contains("positive integers").with_prefill(true).named("probe-counting").responding(Responder::text(" 4")),
        Rule::on_contains("opposite of hot").with_prefill(true).named("probe-idiom").responding(Responder::text(" cold.")),
    ]
}

/// Expand behavior tables into the evaluated-model and helper-model scripts
/// for a full pipeline run.
///
/// The evaluated script serves direct solutions and stub requests from one
/// rule per problem (stub requests differ only by their max_tokens cap) plus
/// one prefill-completion rule per problem. The helper script perturbs
/// stubs, judges candidates, and serves stub requests for off-policy
/// preparation. Problem questions must not be substrings of one another,
/// since rules match on question text.
pub fn agent_scripts(
    problems: &[Problem],
    behaviors: &HashMap<String, AgentBehavior>,
    delay_ms: u64,
) -> (ScriptedProvider, ScriptedProvider) {
    let mut evaluated = probe_support_rules();
    let mut helper = vec![
        Rule::on_contains("<reasoning_stub>")
            .named("perturb")
            .responding(Responder::PerturbStub)
            .with_delay_ms(delay_ms),
        Rule::on_contains("<candidate_solution>")
            .named("judge")
            .responding(Responder::JudgeExactMatch)
            .with_delay_ms(delay_ms),
    ];
    for problem in problems {
        let behavior = behaviors
            .get(&problem.id)
            .unwrap_or_else(|| panic!("no behavior declared for problem '{}'", problem.id));
        evaluated.push(
            Rule::on_contains(problem.question.clone())
                .with_prefill(true)
                .named(format!("complete:{}", problem.id))
                .responding(Responder::text(completion_text(problem, behavior)))
                .with_delay_ms(delay_ms),
        );
        evaluated.push(
            Rule::on_contains(problem.question.clone())
                .with_prefill(false)
                .named(format!("solve:{}", problem.id))
                .responding(Responder::text(direct_text(problem, behavior)))
                .with_delay_ms(delay_ms),
        );
        helper.push(
            Rule::on_contains(problem.question.clone())
                .with_prefill(false)
                .named(format!("helper-stub:{}", problem.id))
                .responding(Responder::text(helper_stub_text()))
                .with_delay_ms(delay_ms),
        );
    }
    (ScriptedProvider::new(evaluated), ScriptedProvider::new(helper))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::SamplingParams;

    fn user_request(content: &str) -> CompletionRequest {
        CompletionRequest::new("m", vec![ChatMessage::user(content)], SamplingParams::greedy())
    }

    #[test]
    fn first_matching_rule_wins() {
        let provider = ScriptedProvider::new(vec![
            Rule::on_contains("alpha").responding(Responder::text("first")),
            Rule::any().responding(Responder::text("fallback")),
        ]);
        let reply = provider.execute(&user_request("alpha beta")).unwrap();
        assert_eq!(reply.text, "first");
        let reply = provider.execute(&user_request("gamma")).unwrap();
        assert_eq!(reply.text, "fallback");
    }

    #[test]
    #[should_panic(expected = "no rule matches")]
    fn unmatched_request_panics_loudly() {
        let provider = ScriptedProvider::new(vec![
            Rule::on_contains("only-this").responding(Responder::text("x")),
        ]);
        let _ = provider.execute(&user_request("something else"));
    }

    #[test]
    fn status_schedule_consumes_then_repeats_last() {
        let provider = ScriptedProvider::new(vec![Rule::any()
            .responding(Responder::text("ok"))
            .with_statuses(vec![500, 500, 200])]);
        assert!(provider.execute(&user_request("a")).is_err());
        assert!(provider.execute(&user_request("b")).is_err());
        assert!(provider.execute(&user_request("c")).is_ok());
        assert!(provider.execute(&user_request("d")).is_ok());
        let log = provider.call_log();
        assert_eq!(log.iter().map(|r| r.status).collect::<Vec<_>>(), vec![500, 500, 200, 200]);
    }

    #[test]
    fn max_tokens_truncates_by_whitespace_tokens() {
        let provider = ScriptedProvider::new(vec![Rule::any()
            .responding(Responder::text("one two three four five six"))]);
        let mut request = user_request("go");
        request.sampling = SamplingParams::greedy().with_max_tokens(3);
        let reply = provider.execute(&request).unwrap();
        assert_eq!(reply.text, "one two three");
        assert_eq!(reply.finish_reason, FinishReason::Length);
        assert_eq!(reply.tokens, Some(3));
    }

    #[test]
    fn untruncated_reply_reports_stop() {
        let provider = ScriptedProvider::new(vec![Rule::any().responding(Responder::text("short reply"))]);
        let reply = provider.execute(&user_request("go")).unwrap();
        assert_eq!(reply.finish_reason, FinishReason::Stop);
        assert_eq!(reply.tokens, Some(2));
    }

    #[test]
    fn perturb_responder_bumps_a_number_in_tags() {
        let provider = ScriptedProvider::new(vec![Rule::any().responding(Responder::PerturbStub)]);
        let reply = provider
            .execute(&user_request("perturb this:\n<reasoning_stub>we have 40 hours</reasoning_stub>"))
            .unwrap();
        assert!(reply.text.contains("<perturbed_stub>we have 41 hours</perturbed_stub>"));
    }

    #[test]
    fn judge_responder_grades_by_exact_match() {
        let provider = ScriptedProvider::new(vec![Rule::any().responding(Responder::JudgeExactMatch)]);
        let correct = provider
            .execute(&user_request("<answer>42</answer><candidate_solution>the final answer is 42.</candidate_solution>"))
            .unwrap();
        assert_eq!(correct.text, "correct");
        let incorrect = provider
            .execute(&user_request("<answer>42</answer><candidate_solution>the final answer is 41.</candidate_solution>"))
            .unwrap();
        assert_eq!(incorrect.text, "incorrect");
    }

    #[test]
    fn empty_run_has_empty_log() {
        let provider = ScriptedProvider::new(vec![Rule::any()]);
        assert!(provider.call_log().is_empty());
        assert_eq!(provider.max_concurrent_calls(), 0);
    }

    #[test]
    fn recovery_probability_is_pure_per_problem() {
        let recovery = Recovery::WithProbability { probability: 0.5, seed: 7 };
        let first = recovery.decide("p001");
        assert_eq!(first, recovery.decide("p001"));
        let hits = (0..1000)
            .filter(|n| Recovery::WithProbability { probability: 0.5, seed: 7 }.decide(&format!("p{n}")))
            .count();
        assert!((300..700).contains(&hits), "suspicious hit count {hits}");
    }

    #[test]
    fn wrong_answer_never_matches() {
        assert_eq!(wrong_answer("42"), "43");
        assert_eq!(wrong_answer("1.5"), "2.5");
        assert_eq!(wrong_answer("x+2"), "0");
    }

    #[test]
    fn script_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.toml");
        std::fs::write(
            &path,
            r#"
[[rule]]
name = "solve"
prefill = false
contains = "Solve"
text = "The final answer is 9."

[[rule]]
name = "judge"
contains = "<candidate_solution>"
responder = "judge-exact-match"
statuses = [500, 200]
"#,
        )
        .unwrap();
        let provider = ScriptedProvider::from_file(&path).unwrap();
        let reply = provider.execute(&user_request("Solve the following")).unwrap();
        assert_eq!(reply.text, "The final answer is 9.");
    }
}
