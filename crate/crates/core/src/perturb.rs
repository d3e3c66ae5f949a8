//! Single-error perturbation of reasoning stubs.
//!
//! Two routes produce perturbations: the perturber-model prompt (rendered by
//! [`render_perturbation_prompt`], parsed back by [`parse_perturbed_stub`])
//! and deterministic rule-based mutation in [`rules`]. Both end in
//! [`validate_perturbation`], which enforces minimality: the perturbed text
//! must differ, stay within the length band, and touch at most a few token
//! spans.

pub mod rules;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::assets;

/// Length-ratio band accepted by the minimality validator.
pub const LENGTH_RATIO_BAND: (f64, f64) = (0.8, 1.25);
/// Maximum changed token spans accepted by the minimality validator.
pub const MAX_CHANGED_SPANS: usize = 3;

/// The first ~100 generated tokens of a solution, used as the perturbation
/// substrate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningStub {
    pub text: String,
    pub origin: StubOrigin,
    pub problem_id: String,
}

/// Whether the stub came from the model that will complete it (on-policy)
/// or from a held-out model shared across evaluated models (off-policy).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", content = "model", rename_all = "snake_case")]
pub enum StubOrigin {
    OnPolicy(String),
    OffPolicy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    NumberChange,
    OperatorSwap,
    KeyPhraseAlteration,
    OrderOfOperationsReversal,
    UnitChange,
    ComparisonSwap,
    TimeRelationChange,
    FractionInversion,
    DecimalShift,
    LlmFreeform,
}

impl PerturbationKind {
    /// Every rule-applicable kind, in a fixed order.
    pub const RULE_KINDS: &'static [PerturbationKind] = &[
        PerturbationKind::NumberChange,
        PerturbationKind::OperatorSwap,
        PerturbationKind::KeyPhraseAlteration,
        PerturbationKind::OrderOfOperationsReversal,
        PerturbationKind::UnitChange,
        PerturbationKind::ComparisonSwap,
        PerturbationKind::TimeRelationChange,
        PerturbationKind::FractionInversion,
        PerturbationKind::DecimalShift,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PerturbationKind::NumberChange => "number-change",
            PerturbationKind::OperatorSwap => "operator-swap",
            PerturbationKind::KeyPhraseAlteration => "key-phrase-alteration",
            PerturbationKind::OrderOfOperationsReversal => "order-of-operations-reversal",
            PerturbationKind::UnitChange => "unit-change",
            PerturbationKind::ComparisonSwap => "comparison-swap",
            PerturbationKind::TimeRelationChange => "time-relation-change",
            PerturbationKind::FractionInversion => "fraction-inversion",
            PerturbationKind::DecimalShift => "decimal-shift",
            PerturbationKind::LlmFreeform => "llm-freeform",
        }
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PerturbationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('_', "-").as_str() {
            "number-change" => Ok(PerturbationKind::NumberChange),
            "operator-swap" => Ok(PerturbationKind::OperatorSwap),
            "key-phrase-alteration" => Ok(PerturbationKind::KeyPhraseAlteration),
            "order-of-operations-reversal" => Ok(PerturbationKind::OrderOfOperationsReversal),
            "unit-change" => Ok(PerturbationKind::UnitChange),
            "comparison-swap" => Ok(PerturbationKind::ComparisonSwap),
            "time-relation-change" => Ok(PerturbationKind::TimeRelationChange),
            "fraction-inversion" => Ok(PerturbationKind::FractionInversion),
            "decimal-shift" => Ok(PerturbationKind::DecimalShift),
            "llm-freeform" => Ok(PerturbationKind::LlmFreeform),
            other => Err(format!("unknown perturbation kind '{other}'")),
        }
    }
}

/// A produced perturbation with its provenance and validation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub original: ReasoningStub,
    pub perturbed_text: String,
    pub kind: PerturbationKind,
    /// Model id of the perturber, or `"rule"` for rule-based mutation.
    pub perturber: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
    pub validation: ValidationReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub length_ratio: f64,
    pub changed_token_spans: usize,
    pub verdict: ValidationVerdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationVerdict {
    Valid,
    Invalid(InvalidReason),
}

impl ValidationVerdict {
    pub fn is_valid(&self) -> bool {
        matches!(self, ValidationVerdict::Valid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidReason {
    NoChange,
    Length,
    TooManySpans,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum PerturbError {
    #[error("reasoning stub is empty")]
    EmptyStub,
    #[error("no applicable site for {0} in the stub")]
    NotApplicable(PerturbationKind),
    #[error("no well-formed <perturbed_stub> block in the response")]
    UnparseablePerturbation,
}

/// Render the perturbation prompt with the stub in its
/// `<reasoning_stub>` slot.
pub fn render_perturbation_prompt(stub: &ReasoningStub) -> Result<String, PerturbError> {
    if stub.text.trim().is_empty() {
        return Err(PerturbError::EmptyStub);
    }
    Ok(assets::fill(assets::PERTURB_TEMPLATE, &[("stub", &stub.text)]))
}

/// Extract the content of the final well-formed
/// `<perturbed_stub>...</perturbed_stub>` block, trimmed.
///
/// Models sometimes draft a block and then finalize another; the last
/// well-formed block is taken as the answer.
pub fn parse_perturbed_stub(response: &str) -> Result<String, PerturbError> {
    let mut last = None;
    let mut rest = response;
    while let Some(start) = rest.find("<perturbed_stub>") {
        let content_start = start + "<perturbed_stub>".len();
        match rest[content_start..].find("</perturbed_stub>") {
            Some(end) => {
                last = Some(rest[content_start..content_start + end].trim().to_string());
                rest = &rest[content_start + end + "</perturbed_stub>".len()..];
            }
            None => break,
        }
    }
    last.ok_or(PerturbError::UnparseablePerturbation)
}

/// Check minimality: the perturbed text must differ from the original, stay
/// within [`LENGTH_RATIO_BAND`], and change at most [`MAX_CHANGED_SPANS`]
/// token spans.
pub fn validate_perturbation(original: &ReasoningStub, perturbed: &str) -> ValidationReport {
    let original_len = original.text.chars().count().max(1);
    let length_ratio = perturbed.chars().count() as f64 / original_len as f64;
    if perturbed == original.text {
        return ValidationReport {
            length_ratio,
            changed_token_spans: 0,
            verdict: ValidationVerdict::Invalid(InvalidReason::NoChange),
        };
    }
    let original_tokens: Vec<&str> = original.text.split_whitespace().collect();
    let perturbed_tokens: Vec<&str> = perturbed.split_whitespace().collect();
    let changed_token_spans = changed_spans(&original_tokens, &perturbed_tokens);
    let verdict = if length_ratio < LENGTH_RATIO_BAND.0 || length_ratio > LENGTH_RATIO_BAND.1 {
        ValidationVerdict::Invalid(InvalidReason::Length)
    } else if changed_token_spans > MAX_CHANGED_SPANS {
        ValidationVerdict::Invalid(InvalidReason::TooManySpans)
    } else if changed_token_spans == 0 {
        // Whitespace-only rewrites tokenize identically; still a change of
        // the raw text, but not a usable perturbation.
        ValidationVerdict::Invalid(InvalidReason::NoChange)
    } else {
        ValidationVerdict::Valid
    };
    ValidationReport { length_ratio, changed_token_spans, verdict }
}

#[derive(PartialEq)]
enum DiffOp {
    Keep,
    Delete,
    Insert,
}

/// Count maximal contiguous changed regions under an LCS alignment.
fn changed_spans(a: &[&str], b: &[&str]) -> usize {
    let ops = diff_ops(a, b);
    let mut spans = 0;
    let mut in_span = false;
    for op in ops {
        if op == DiffOp::Keep {
            in_span = false;
        } else if !in_span {
            spans += 1;
            in_span = true;
        }
    }
    spans
}

fn diff_ops(a: &[&str], b: &[&str]) -> Vec<DiffOp> {
    let n = a.len();
    let m = b.len();
    let mut lcs = vec![vec![0u32; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            lcs[i][j] = if a[i] == b[j] {
                lcs[i + 1][j + 1] + 1
            } else {
                lcs[i + 1][j].max(lcs[i][j + 1])
            };
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if a[i] == b[j] && lcs[i][j] == lcs[i + 1][j + 1] + 1 {
            ops.push(DiffOp::Keep);
            i += 1;
            j += 1;
        } else if lcs[i + 1][j] >= lcs[i][j + 1] {
            ops.push(DiffOp::Delete);
            i += 1;
        } else {
            ops.push(DiffOp::Insert);
            j += 1;
        }
    }
    ops.extend(std::iter::repeat_with(|| DiffOp::Delete).take(n - i));
    ops.extend(std::iter::repeat_with(|| DiffOp::Insert).take(m - j));
    ops
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stub(text: &str) -> ReasoningStub {
        ReasoningStub {
            text: text.to_string(),
            origin: StubOrigin::OnPolicy("test-model".into()),
            problem_id: "p1".into(),
        }
    }

    #[test]
    fn prompt_contains_guidelines_and_tagged_stub() {
        let rendered = render_perturbation_prompt(&stub("we compute 40 * 2")).unwrap();
        assert!(rendered.contains("Make minimal changes to the stub"));
        assert!(rendered.contains("<reasoning_stub>\nwe compute 40 * 2\n</reasoning_stub>"));
    }

    #[test]
    fn empty_stub_is_rejected() {
        assert!(matches!(
            render_perturbation_prompt(&stub("  ")),
            Err(PerturbError::EmptyStub)
        ));
    }

    #[test]
    fn parses_single_block() {
        let parsed = parse_perturbed_stub("reasoning...<perturbed_stub>X</perturbed_stub>").unwrap();
        assert_eq!(parsed, "X");
    }

    #[test]
    fn parses_last_of_two_blocks() {
        let parsed = parse_perturbed_stub(
            "<perturbed_stub>A</perturbed_stub> hmm <perturbed_stub>B</perturbed_stub>",
        )
        .unwrap();
        assert_eq!(parsed, "B");
    }

    #[test]
    fn unclosed_block_is_unparseable() {
        let result = parse_perturbed_stub("text <perturbed_stub>never closed");
        assert!(matches!(result, Err(PerturbError::UnparseablePerturbation)));
    }

    #[test]
    fn parse_trims_whitespace() {
        let parsed = parse_perturbed_stub("<perturbed_stub>\n  X  \n</perturbed_stub>").unwrap();
        assert_eq!(parsed, "X");
    }

    #[test]
    fn identity_is_invalid_no_change() {
        let s = stub("the same text");
        let report = validate_perturbation(&s, "the same text");
        assert_eq!(report.verdict, ValidationVerdict::Invalid(InvalidReason::NoChange));
        assert_eq!(report.changed_token_spans, 0);
    }

    #[test]
    fn doubled_length_is_invalid_length() {
        let s = stub("short stub text here");
        let doubled = format!("{} {}", s.text, s.text);
        let report = validate_perturbation(&s, &doubled);
        assert_eq!(report.verdict, ValidationVerdict::Invalid(InvalidReason::Length));
        assert!((report.length_ratio - 2.05).abs() < 0.1, "ratio {}", report.length_ratio);
    }

    #[test]
    fn single_token_change_is_one_span() {
        let s = stub("he works 40 hours per week");
        let report = validate_perturbation(&s, "he works 45 hours per week");
        assert_eq!(report.changed_token_spans, 1);
        assert_eq!(report.verdict, ValidationVerdict::Valid);
    }

    #[test]
    fn scattered_changes_count_separate_spans() {
        let s = stub("a b c d e f g h");
        let report = validate_perturbation(&s, "a X c d Y f g Z");
        assert_eq!(report.changed_token_spans, 3);
        assert_eq!(report.verdict, ValidationVerdict::Valid);
    }

    #[test]
    fn four_scattered_changes_are_too_many() {
        let s = stub("a b c d e f g h i");
        let report = validate_perturbation(&s, "a X c Y e Z g W i");
        assert_eq!(report.changed_token_spans, 4);
        assert_eq!(report.verdict, ValidationVerdict::Invalid(InvalidReason::TooManySpans));
    }

    proptest! {
        /// validate(s, s.text) is always invalid(no_change).
        #[test]
        fn self_validation_is_always_no_change(text in "[ -~]{1,80}") {
            let s = stub(&text);
            let report = validate_perturbation(&s, &text);
            prop_assert_eq!(report.verdict, ValidationVerdict::Invalid(InvalidReason::NoChange));
        }

        /// Span counts from the LCS alignment never exceed the number of
        /// differing tokens on either side.
        #[test]
        fn spans_bounded_by_token_count(
            a in proptest::collection::vec("[a-d]{1,3}", 0..12),
            b in proptest::collection::vec("[a-d]{1,3}", 0..12),
        ) {
            let a_refs: Vec<&str> = a.iter().map(String::as_str).collect();
            let b_refs: Vec<&str> = b.iter().map(String::as_str).collect();
            let spans = changed_spans(&a_refs, &b_refs);
            prop_assert!(spans <= a_refs.len().max(b_refs.len()).max(1));
            if a == b {
                prop_assert_eq!(spans, 0);
            }
        }
    }
}
