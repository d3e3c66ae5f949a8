//! Candidate-solution grading.
//!
//! The live path is an LLM judge: the verification prompt carries the
//! problem, its ground-truth answer, and the candidate solution, and the
//! judge must reply with the single word "correct" or "incorrect". Grading
//! cares only about the final answer, never the reasoning. A deterministic
//! exact-match grader backs scripted end-to-end tests.

use serde::{Deserialize, Serialize};

use crate::assets;
use crate::client::{ChatClient, ChatMessage, ClientError, CompletionRequest, SamplingParams};
use crate::datasets::Problem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Correct,
    Incorrect,
}

/// Judge configuration. Verification always decodes greedily.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraderConfig {
    pub model: String,
    pub sampling: SamplingParams,
    /// Extra judge calls allowed when the verdict does not parse.
    pub max_verdict_retries: u32,
}

impl GraderConfig {
    pub fn new(model: impl Into<String>) -> Self {
        Self { model: model.into(), sampling: SamplingParams::greedy(), max_verdict_retries: 1 }
    }
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum GradeError {
    #[error("candidate solution is empty")]
    EmptyCandidate,
    #[error("judge reply did not normalize to a verdict after {calls} call(s): {last:?}")]
    MalformedVerdict { last: String, calls: u32 },
    #[error(transparent)]
    Client(#[from] ClientError),
}

/// Render the verification prompt with problem, answer, and candidate
/// substituted into their slots.
pub fn render_verification_prompt(problem: &Problem, candidate: &str) -> Result<String, GradeError> {
    if candidate.trim().is_empty() {
        return Err(GradeError::EmptyCandidate);
    }
    Ok(assets::fill(
        assets::VERIFY_TEMPLATE,
        &[
            ("problem", &problem.question),
            ("answer", &problem.answer),
            ("candidate_solution", candidate),
        ],
    ))
}

/// Normalize and parse a judge reply.
///
/// Accepted language: exactly "correct" or "incorrect" up to surrounding
/// whitespace, letter case, and one trailing period. Anything looser risks
/// misreading an explanation as a verdict.
pub fn parse_verdict(response: &str) -> Result<Verdict, GradeError> {
    let trimmed = response.trim();
    let trimmed = trimmed.strip_suffix('.').unwrap_or(trimmed);
    match trimmed.to_lowercase().as_str() {
        "correct" => Ok(Verdict::Correct),
        "incorrect" => Ok(Verdict::Incorrect),
        _ => Err(GradeError::MalformedVerdict { last: response.trim().to_string(), calls: 1 }),
    }
}

/// Outcome of [`grade_candidate`] with judge-call accounting.
#[derive(Debug, Clone)]
pub struct GradeOutcome {
    pub verdict: Verdict,
    /// Judge calls made, counting verdict retries (not transport retries).
    pub judge_calls: u32,
    /// Total request attempts across those calls.
    pub attempts: u32,
}

/// Ask the judge about one candidate, retrying malformed verdicts up to the
/// configured budget. Issues at most `1 + max_verdict_retries` judge calls.
pub fn grade_candidate(
    client: &ChatClient,
    problem: &Problem,
    full_utterance: &str,
    config: &GraderConfig,
) -> Result<GradeOutcome, GradeError> {
    let prompt = render_verification_prompt(problem, full_utterance)?;
    let request = CompletionRequest::new(
        config.model.clone(),
        vec![ChatMessage::user(prompt)],
        config.sampling,
    );
    let mut attempts = 0;
    let mut last = String::new();
    for call in 1..=(1 + config.max_verdict_retries) {
        let result = client.complete_chat(&request)?;
        attempts += result.attempts;
        match parse_verdict(&result.text) {
            Ok(verdict) => return Ok(GradeOutcome { verdict, judge_calls: call, attempts }),
            Err(_) => last = result.text,
        }
    }
    Err(GradeError::MalformedVerdict {
        last: last.trim().to_string(),
        calls: 1 + config.max_verdict_retries,
    })
}

/// Deterministic grader for scripted tests: extract the final number from
/// the candidate, normalize both sides, compare.
pub fn exact_match_grade(candidate: &str, ground_truth: &str) -> Verdict {
    let Some(extracted) = final_number(candidate) else {
        return Verdict::Incorrect;
    };
    match normalize_number(ground_truth) {
        Some(expected) if expected == extracted => Verdict::Correct,
        _ => Verdict::Incorrect,
    }
}

/// Last number-looking token in the text, normalized.
fn final_number(text: &str) -> Option<String> {
    static RE: std::sync::OnceLock<regex::Regex> = std::sync::OnceLock::new();
    let re = RE.get_or_init(|| {
        regex::Regex::new(r"-?[$€£]?\d[\d,]*(?:\.\d+)?").expect("final-number regex")
    });
    re.find_iter(text).last().and_then(|m| normalize_number(m.as_str()))
}

/// Strip currency symbols and thousands separators, then canonicalize the
/// decimal representation ("42.0" and "42" compare equal).
fn normalize_number(raw: &str) -> Option<String> {
    let cleaned: String = raw
        .trim()
        .chars()
        .filter(|c| !matches!(c, '$' | '€' | '£' | ','))
        .collect();
    let cleaned = cleaned.trim();
    if cleaned.is_empty() {
        return None;
    }
    let (sign, digits) = match cleaned.strip_prefix('-') {
        Some(rest) => ("-", rest),
        None => ("", cleaned),
    };
    if digits.is_empty() || !digits.chars().all(|c| c.is_ascii_digit() || c == '.') {
        return None;
    }
    if digits.chars().filter(|c| *c == '.').count() > 1 {
        return None;
    }
    let (int_part, frac_part) = match digits.split_once('.') {
        Some((i, f)) => (i, f.trim_end_matches('0')),
        None => (digits, ""),
    };
    let int_part = int_part.trim_start_matches('0');
    let int_part = if int_part.is_empty() { "0" } else { int_part };
    let sign = if int_part == "0" && frac_part.is_empty() { "" } else { sign };
    if frac_part.is_empty() {
        Some(format!("{sign}{int_part}"))
    } else {
        Some(format!("{sign}{int_part}.{frac_part}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::RetryPolicy;
    use crate::datasets::DatasetId;
    use crate::scripted::{Responder, Rule, ScriptedProvider};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn problem() -> Problem {
        Problem {
            id: "p1".into(),
            question: "What is six times seven?".into(),
            answer: "42".into(),
            dataset: DatasetId::Gsm8k,
            template_id: None,
        }
    }

    fn judge(rules: Vec<Rule>) -> ChatClient {
        ChatClient::new(Arc::new(ScriptedProvider::new(rules)), RetryPolicy::immediate())
    }

    #[test]
    fn prompt_contains_final_answer_instruction_and_candidate() {
        let rendered = render_verification_prompt(&problem(), "I think it is 42").unwrap();
        assert!(rendered
            .contains("You should only care about whether the final answer produced matches the answer"));
        assert!(rendered.contains("<candidate_solution>\nI think it is 42\n</candidate_solution>"));
        assert!(rendered.contains("<answer>\n42\n</answer>"));
    }

    #[test]
    fn empty_candidate_is_rejected() {
        assert!(matches!(
            render_verification_prompt(&problem(), "  "),
            Err(GradeError::EmptyCandidate)
        ));
    }

    #[test]
    fn parses_bare_verdicts() {
        assert_eq!(parse_verdict("correct").unwrap(), Verdict::Correct);
        assert_eq!(parse_verdict(" Incorrect.\n").unwrap(), Verdict::Incorrect);
        assert_eq!(parse_verdict("CORRECT").unwrap(), Verdict::Correct);
    }

    #[test]
    fn explanations_are_malformed() {
        assert!(parse_verdict("The solution is correct").is_err());
        assert!(parse_verdict("correct, because the answer matches").is_err());
        assert!(parse_verdict("").is_err());
    }

    #[test]
    fn grade_retries_one_garbage_verdict() {
        let client = judge(vec![Rule::any()
            .responding(Responder::text("unparseable"))
            .with_statuses(vec![200])]);
        // First call garbage, then flip the rule set: easier with two rules
        // and a status schedule is not possible for alternating text, so use
        // a fresh provider that replies garbage then a verdict.
        struct Flaky(std::sync::atomic::AtomicU32);
        impl crate::client::ChatProvider for Flaky {
            fn execute(
                &self,
                _request: &crate::client::CompletionRequest,
            ) -> Result<crate::client::ProviderReply, crate::client::ProviderFault> {
                let call = self.0.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                Ok(crate::client::ProviderReply {
                    text: if call == 0 { "hmm let me think".into() } else { "incorrect".into() },
                    finish_reason: crate::client::FinishReason::Stop,
                    tokens: None,
                })
            }
        }
        drop(client);
        let client = ChatClient::new(
            Arc::new(Flaky(std::sync::atomic::AtomicU32::new(0))),
            RetryPolicy::immediate(),
        );
        let outcome =
            grade_candidate(&client, &problem(), "the final answer is 41", &GraderConfig::new("judge"))
                .unwrap();
        assert_eq!(outcome.verdict, Verdict::Incorrect);
        assert_eq!(outcome.judge_calls, 2);
    }

    #[test]
    fn grade_fails_after_exhausting_verdict_retries() {
        let client = judge(vec![Rule::any().responding(Responder::text("word salad"))]);
        let err =
            grade_candidate(&client, &problem(), "the final answer is 41", &GraderConfig::new("judge"))
                .unwrap_err();
        match err {
            GradeError::MalformedVerdict { calls, .. } => assert_eq!(calls, 2),
            other => panic!("expected malformed verdict, got {other:?}"),
        }
    }

    #[test]
    fn grade_makes_at_most_budgeted_judge_calls() {
        let provider = Arc::new(ScriptedProvider::new(vec![
            Rule::any().responding(Responder::text("garbage")),
        ]));
        let client = ChatClient::new(provider.clone(), RetryPolicy::immediate());
        let config = GraderConfig { max_verdict_retries: 3, ..GraderConfig::new("judge") };
        let _ = grade_candidate(&client, &problem(), "answer 4", &config);
        assert_eq!(provider.call_count(), 4);
    }

    #[test]
    fn exact_match_handles_wording_and_formats() {
        assert_eq!(exact_match_grade("The answer is 42.", "42"), Verdict::Correct);
        assert_eq!(exact_match_grade("we get 42.0 in the end", "42"), Verdict::Correct);
        assert_eq!(exact_match_grade("total cost: $1,234", "1234"), Verdict::Correct);
        assert_eq!(exact_match_grade("it is 41", "42"), Verdict::Incorrect);
        assert_eq!(exact_match_grade("no numbers here", "42"), Verdict::Incorrect);
        assert_eq!(exact_match_grade("first 10 then finally 7", "7"), Verdict::Correct);
    }

    #[test]
    fn numeric_normalization_is_exact() {
        assert_eq!(normalize_number("42.0").as_deref(), Some("42"));
        assert_eq!(normalize_number("042").as_deref(), Some("42"));
        assert_eq!(normalize_number("-0").as_deref(), Some("0"));
        assert_eq!(normalize_number("3.50").as_deref(), Some("3.5"));
        assert_eq!(normalize_number("$1,000").as_deref(), Some("1000"));
        assert_eq!(normalize_number("x+2"), None);
    }

    proptest! {
        /// Decorated verdict words always parse; other words never do.
        #[test]
        fn verdict_language_is_exactly_two_words(
            correct in any::<bool>(),
            upper_mask in any::<u16>(),
            lead in "[ \t\n]{0,3}",
            trail in "[ \t\n]{0,3}",
            period in any::<bool>(),
        ) {
            let word = if correct { "correct" } else { "incorrect" };
            let cased: String = word
                .chars()
                .enumerate()
                .map(|(i, c)| {
                    if upper_mask & (1 << (i % 16)) != 0 { c.to_ascii_uppercase() } else { c }
                })
                .collect();
            let decorated = format!("{lead}{cased}{}{trail}", if period { "." } else { "" });
            let verdict = parse_verdict(&decorated).unwrap();
            prop_assert_eq!(verdict, if correct { Verdict::Correct } else { Verdict::Incorrect });
        }

        #[test]
        fn random_words_never_parse(word in "[a-z]{1,12}") {
            prop_assume!(word != "correct" && word != "incorrect");
            prop_assert!(parse_verdict(&word).is_err());
        }

        /// Numbers that normalize equal always grade correct when placed
        /// terminally in a candidate.
        #[test]
        fn trailing_zero_equivalence(int in 0u32..10_000, zeros in 0usize..3) {
            let decorated = format!("{int}.{}", "0".repeat(zeros.max(1)));
            let candidate = format!("the final answer is {decorated}");
            prop_assert_eq!(exact_match_grade(&candidate, &int.to_string()), Verdict::Correct);
        }
    }
}
