//! Deterministic rule-based perturbations.
//!
//! Each kind collects the sites where it applies, one site is chosen
//! uniformly under the supplied seed, and a single mutation is spliced in.
//! The whole operation is a pure function of (stub, kind, seed). Sites whose
//! mutation provably would not change the value of the touched arithmetic
//! (adding zero, multiplying by one, inverting `a/a`) are excluded up front.

use std::ops::Range;
use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use super::{
    validate_perturbation, PerturbError, PerturbationKind, PerturbationRecord, ReasoningStub,
};
use crate::assets;

/// Substitution tables for the lexicon-driven kinds. Loaded from data
/// files; the embedded defaults ship with the crate.
#[derive(Debug, Clone)]
pub struct Lexicons {
    pub units: Vec<(String, String)>,
    pub time_relations: Vec<(String, String)>,
    pub key_phrases: Vec<(String, String)>,
}

impl Lexicons {
    pub fn defaults() -> &'static Lexicons {
        static DEFAULTS: OnceLock<Lexicons> = OnceLock::new();
        DEFAULTS.get_or_init(|| Lexicons {
            units: parse_tsv(assets::UNITS_LEXICON),
            time_relations: parse_tsv(assets::TIME_LEXICON),
            key_phrases: parse_tsv(assets::KEY_PHRASE_LEXICON),
        })
    }

    /// Load `units.tsv`, `time_relations.tsv`, and `key_phrases.tsv` from a
    /// directory, falling back to the embedded default for missing files.
    pub fn from_dir(dir: &std::path::Path) -> std::io::Result<Lexicons> {
        let read = |name: &str, fallback: &str| -> std::io::Result<Vec<(String, String)>> {
            let path = dir.join(name);
            if path.exists() {
                Ok(parse_tsv(&std::fs::read_to_string(path)?))
            } else {
                Ok(parse_tsv(fallback))
            }
        };
        Ok(Lexicons {
            units: read("units.tsv", assets::UNITS_LEXICON)?,
            time_relations: read("time_relations.tsv", assets::TIME_LEXICON)?,
            key_phrases: read("key_phrases.tsv", assets::KEY_PHRASE_LEXICON)?,
        })
    }
}

fn parse_tsv(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter(|line| !line.trim().is_empty() && !line.starts_with('#'))
        .filter_map(|line| {
            line.split_once('\t')
                .map(|(from, to)| (from.trim().to_string(), to.trim().to_string()))
        })
        .collect()
}

struct Site {
    range: Range<usize>,
    action: SiteAction,
}

enum SiteAction {
    Replace { text: String, note: String },
    BumpNumber,
    ShiftDecimal,
}

/// Deterministically perturb `stub` with one mutation of the given kind,
/// using the embedded default lexicons.
pub fn apply_rule_perturbation(
    stub: &ReasoningStub,
    kind: PerturbationKind,
    seed: u64,
) -> Result<PerturbationRecord, PerturbError> {
    apply_with_lexicons(stub, kind, seed, Lexicons::defaults())
}

pub fn apply_with_lexicons(
    stub: &ReasoningStub,
    kind: PerturbationKind,
    seed: u64,
    lexicons: &Lexicons,
) -> Result<PerturbationRecord, PerturbError> {
    if stub.text.trim().is_empty() {
        return Err(PerturbError::EmptyStub);
    }
    if kind == PerturbationKind::LlmFreeform {
        return Err(PerturbError::NotApplicable(kind));
    }
    let sites = collect_sites(&stub.text, kind, lexicons);
    if sites.is_empty() {
        return Err(PerturbError::NotApplicable(kind));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let index = if sites.len() == 1 { 0 } else { rng.random_range(0..sites.len()) };
    let site = &sites[index];
    let original_slice = &stub.text[site.range.clone()];
    let (replacement, note) = match &site.action {
        SiteAction::Replace { text, note } => (text.clone(), note.clone()),
        SiteAction::BumpNumber => {
            let delta = rng.random_range(1..=9u64);
            let bumped = bump_number(original_slice, delta)
                .expect("number sites hold parseable numbers");
            (bumped.clone(), format!("number_change: '{original_slice}' -> '{bumped}'"))
        }
        SiteAction::ShiftDecimal => {
            let right = rng.random_range(0..2u8) == 0;
            let shifted = shift_decimal(original_slice, right);
            (shifted.clone(), format!("decimal_shift: '{original_slice}' -> '{shifted}'"))
        }
    };
    let mut perturbed = stub.text.clone();
    perturbed.replace_range(site.range.clone(), &replacement);
    let validation = validate_perturbation(stub, &perturbed);
    Ok(PerturbationRecord {
        original: stub.clone(),
        perturbed_text: perturbed,
        kind,
        perturber: "rule".into(),
        explanation: Some(note),
        validation,
    })
}

/// Try rule kinds in seeded order and return the first that applies.
pub fn apply_any_rule(
    stub: &ReasoningStub,
    seed: u64,
    allowed: &[PerturbationKind],
) -> Result<PerturbationRecord, PerturbError> {
    let mut order: Vec<PerturbationKind> = allowed
        .iter()
        .copied()
        .filter(|k| *k != PerturbationKind::LlmFreeform)
        .collect();
    if order.is_empty() {
        return Err(PerturbError::NotApplicable(PerturbationKind::LlmFreeform));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_ab1e);
    for swap_to in (1..order.len()).rev() {
        let with = rng.random_range(0..=swap_to);
        order.swap(swap_to, with);
    }
    let mut last = PerturbError::NotApplicable(order[0]);
    for kind in order {
        match apply_rule_perturbation(stub, kind, seed) {
            Ok(record) => return Ok(record),
            Err(err) => last = err,
        }
    }
    Err(last)
}

/// Apply many (stub, kind, seed) jobs under the worker-pool bound.
pub fn batch_apply(
    jobs: Vec<(ReasoningStub, PerturbationKind, u64)>,
    bound: usize,
) -> Vec<Result<PerturbationRecord, PerturbError>> {
    crate::exec::map_bounded(jobs, bound, |(stub, kind, seed)| {
        apply_rule_perturbation(&stub, kind, seed)
    })
}

fn collect_sites(text: &str, kind: PerturbationKind, lexicons: &Lexicons) -> Vec<Site> {
    match kind {
        PerturbationKind::NumberChange => number_sites(text),
        PerturbationKind::OperatorSwap => operator_sites(text),
        PerturbationKind::DecimalShift => decimal_sites(text),
        PerturbationKind::FractionInversion => fraction_sites(text),
        PerturbationKind::OrderOfOperationsReversal => order_of_operations_sites(text),
        PerturbationKind::ComparisonSwap => comparison_sites(text),
        PerturbationKind::UnitChange => lexicon_sites(text, &lexicons.units, "unit_change"),
        PerturbationKind::TimeRelationChange => {
            lexicon_sites(text, &lexicons.time_relations, "time_relation_change")
        }
        PerturbationKind::KeyPhraseAlteration => {
            lexicon_sites(text, &lexicons.key_phrases, "key_phrase_alteration")
        }
        PerturbationKind::LlmFreeform => Vec::new(),
    }
}

fn number_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d+(?:\.\d+)?").expect("number regex"))
}

fn number_sites(text: &str) -> Vec<Site> {
    number_regex()
        .find_iter(text)
        .filter(|m| bump_number(m.as_str(), 1).is_some())
        .map(|m| Site { range: m.range(), action: SiteAction::BumpNumber })
        .collect()
}

fn bump_number(token: &str, delta: u64) -> Option<String> {
    match token.split_once('.') {
        Some((int, frac)) => {
            let value: u64 = int.parse().ok()?;
            Some(format!("{}.{frac}", value.checked_add(delta)?))
        }
        None => {
            let value: u64 = token.parse().ok()?;
            Some(value.checked_add(delta)?.to_string())
        }
    }
}

fn decimal_sites(text: &str) -> Vec<Site> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"\d+\.\d+").expect("decimal regex"));
    re.find_iter(text)
        .filter(|m| m.as_str().parse::<f64>().map(|v| v != 0.0).unwrap_or(false))
        .map(|m| Site { range: m.range(), action: SiteAction::ShiftDecimal })
        .collect()
}

/// Move the decimal point one place. Shifting right multiplies by ten
/// ("1.5" becomes "15.0"), shifting left divides ("1.5" becomes "0.15").
fn shift_decimal(token: &str, right: bool) -> String {
    let (int, frac) = token.split_once('.').expect("decimal sites carry a point");
    if right {
        let (head, rest) = frac.split_at(1);
        let new_int = format!("{int}{head}");
        if rest.is_empty() {
            format!("{new_int}.0")
        } else {
            format!("{new_int}.{rest}")
        }
    } else {
        let (head, last) = int.split_at(int.len() - 1);
        let new_int = if head.is_empty() { "0" } else { head };
        format!("{new_int}.{last}{frac}")
    }
}

const OPERATOR_PAIRS: &[(char, char)] =
    &[('+', '-'), ('-', '+'), ('*', '/'), ('/', '*'), ('×', '÷'), ('÷', '×')];

fn swapped_operator(op: char) -> Option<char> {
    OPERATOR_PAIRS.iter().find(|(from, _)| *from == op).map(|(_, to)| *to)
}

fn is_multiplicative(op: char) -> bool {
    matches!(op, '*' | '/' | '×' | '÷')
}

fn operator_sites(text: &str) -> Vec<Site> {
    let mut sites = Vec::new();
    for (index, ch) in text.char_indices() {
        let Some(swapped) = swapped_operator(ch) else { continue };
        let before = text[..index].chars().rev().find(|c| *c != ' ');
        let after = text[index + ch.len_utf8()..].chars().find(|c| *c != ' ');
        let left_ok = matches!(before, Some(c) if c.is_ascii_digit() || c == ')');
        let right_ok = matches!(after, Some(c) if c.is_ascii_digit() || c == '(');
        if !left_ok || !right_ok {
            continue;
        }
        // Skip sites where the swap provably keeps the value: x ± 0, and
        // multiplicative swaps with a unit/zero operand.
        let left = number_ending_at(text, index);
        let right = number_starting_after(text, index + ch.len_utf8());
        let degenerate = if is_multiplicative(ch) {
            right == Some(0.0) || right == Some(1.0) || left == Some(0.0)
        } else {
            right == Some(0.0)
        };
        if degenerate {
            continue;
        }
        sites.push(Site {
            range: index..index + ch.len_utf8(),
            action: SiteAction::Replace {
                text: swapped.to_string(),
                note: format!("operator_swap: '{ch}' -> '{swapped}'"),
            },
        });
    }
    sites
}

fn number_starting_after(text: &str, from: usize) -> Option<f64> {
    let rest = text[from..].trim_start_matches(' ');
    let m = number_regex().find(rest)?;
    if m.start() != 0 {
        return None;
    }
    m.as_str().parse().ok()
}

fn number_ending_at(text: &str, operator_start: usize) -> Option<f64> {
    let head = text[..operator_start].trim_end_matches(' ');
    let end = head.len();
    let start = head
        .char_indices()
        .rev()
        .take_while(|(_, c)| c.is_ascii_digit() || *c == '.')
        .last()
        .map(|(i, _)| i)?;
    let token = &head[start..end];
    if token.is_empty() {
        return None;
    }
    token.parse().ok()
}

fn fraction_sites(text: &str) -> Vec<Site> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(\d+)(\s*/\s*)(\d+)").expect("fraction regex"));
    re.captures_iter(text)
        .filter_map(|caps| {
            let whole = caps.get(0)?;
            let numerator = caps.get(1)?.as_str();
            let separator = caps.get(2)?.as_str();
            let denominator = caps.get(3)?.as_str();
            let n: f64 = numerator.parse().ok()?;
            let d: f64 = denominator.parse().ok()?;
            if n == d || n == 0.0 || d == 0.0 {
                return None;
            }
            Some(Site {
                range: whole.range(),
                action: SiteAction::Replace {
                    text: format!("{denominator}{separator}{numerator}"),
                    note: format!(
                        "fraction_inversion: '{numerator}/{denominator}' -> '{denominator}/{numerator}'"
                    ),
                },
            })
        })
        .collect()
}

fn apply_op(op: char, x: f64, y: f64) -> f64 {
    match op {
        '+' => x + y,
        '-' => x - y,
        '*' | '×' => x * y,
        _ => x / y,
    }
}

fn order_of_operations_sites(text: &str) -> Vec<Site> {
    static GROUP_FIRST: OnceLock<Regex> = OnceLock::new();
    static GROUP_LAST: OnceLock<Regex> = OnceLock::new();
    let group_first = GROUP_FIRST.get_or_init(|| {
        Regex::new(r"\((\d+(?:\.\d+)?)\s*([+\-*/×÷])\s*(\d+(?:\.\d+)?)\)\s*([+\-*/×÷])\s*(\d+(?:\.\d+)?)")
            .expect("grouped-first regex")
    });
    let group_last = GROUP_LAST.get_or_init(|| {
        Regex::new(r"(\d+(?:\.\d+)?)\s*([+\-*/×÷])\s*\((\d+(?:\.\d+)?)\s*([+\-*/×÷])\s*(\d+(?:\.\d+)?)\)")
            .expect("grouped-last regex")
    });

    let mut sites = Vec::new();
    for caps in group_first.captures_iter(text) {
        let (a, op1, b, op2, c) = capture_expression(&caps);
        let original = apply_op(op2, apply_op(op1, a, b), c);
        let reversed = apply_op(op1, a, apply_op(op2, b, c));
        if !values_differ(original, reversed) {
            continue;
        }
        let a_text = caps.get(1).unwrap().as_str();
        let b_text = caps.get(3).unwrap().as_str();
        let c_text = caps.get(5).unwrap().as_str();
        sites.push(Site {
            range: caps.get(0).unwrap().range(),
            action: SiteAction::Replace {
                text: format!("{a_text} {op1} ({b_text} {op2} {c_text})"),
                note: format!(
                    "order_of_operations_reversal: '({a_text} {op1} {b_text}) {op2} {c_text}' -> '{a_text} {op1} ({b_text} {op2} {c_text})'"
                ),
            },
        });
    }
    for caps in group_last.captures_iter(text) {
        let (a, op1, b, op2, c) = capture_expression(&caps);
        let original = apply_op(op1, a, apply_op(op2, b, c));
        let reversed = apply_op(op2, apply_op(op1, a, b), c);
        if !values_differ(original, reversed) {
            continue;
        }
        let a_text = caps.get(1).unwrap().as_str();
        let b_text = caps.get(3).unwrap().as_str();
        let c_text = caps.get(5).unwrap().as_str();
        sites.push(Site {
            range: caps.get(0).unwrap().range(),
            action: SiteAction::Replace {
                text: format!("({a_text} {op1} {b_text}) {op2} {c_text}"),
                note: format!(
                    "order_of_operations_reversal: '{a_text} {op1} ({b_text} {op2} {c_text})' -> '({a_text} {op1} {b_text}) {op2} {c_text}'"
                ),
            },
        });
    }
    sites
}

fn capture_expression(caps: &regex::Captures<'_>) -> (f64, char, f64, char, f64) {
    let number = |i: usize| caps.get(i).unwrap().as_str().parse::<f64>().unwrap();
    let op = |i: usize| caps.get(i).unwrap().as_str().chars().next().unwrap();
    (number(1), op(2), number(3), op(4), number(5))
}

fn values_differ(x: f64, y: f64) -> bool {
    if !x.is_finite() || !y.is_finite() {
        return false;
    }
    (x - y).abs() > 1e-9 * x.abs().max(y.abs()).max(1.0)
}

const COMPARISON_PAIRS: &[(&str, &str)] = &[
    ("greater than", "less than"),
    ("less than", "greater than"),
    ("more than", "fewer than"),
    ("fewer than", "more than"),
    ("at least", "at most"),
    ("at most", "at least"),
    ("larger than", "smaller than"),
    ("smaller than", "larger than"),
    ("bigger than", "smaller than"),
    ("taller than", "shorter than"),
    ("shorter than", "taller than"),
    (" > ", " < "),
    (" < ", " > "),
    (" >= ", " <= "),
    (" <= ", " >= "),
    (" ≥ ", " ≤ "),
    (" ≤ ", " ≥ "),
];

fn comparison_sites(text: &str) -> Vec<Site> {
    substitution_sites(text, COMPARISON_PAIRS.iter().copied(), "comparison_swap")
}

fn lexicon_sites(text: &str, lexicon: &[(String, String)], label: &str) -> Vec<Site> {
    substitution_sites(
        text,
        lexicon.iter().map(|(from, to)| (from.as_str(), to.as_str())),
        label,
    )
}

fn substitution_sites<'a>(
    text: &str,
    pairs: impl Iterator<Item = (&'a str, &'a str)>,
    label: &str,
) -> Vec<Site> {
    let mut sites = Vec::new();
    for (from, to) in pairs {
        if from.is_empty() || from == to {
            continue;
        }
        for (start, _) in text.match_indices(from) {
            let end = start + from.len();
            if !pattern_bounded(text, start, end, from) {
                continue;
            }
            sites.push(Site {
                range: start..end,
                action: SiteAction::Replace {
                    text: to.to_string(),
                    note: format!("{label}: '{from}' -> '{to}'"),
                },
            });
        }
    }
    sites.sort_by_key(|site| (site.range.start, site.range.end));
    sites
}

/// Word-boundary check applied only on sides where the pattern edge is
/// alphanumeric, so patterns like "% of" still match after a digit.
fn pattern_bounded(text: &str, start: usize, end: usize, pattern: &str) -> bool {
    let first_alnum = pattern.chars().next().is_some_and(|c| c.is_alphanumeric());
    let last_alnum = pattern.chars().next_back().is_some_and(|c| c.is_alphanumeric());
    let before_ok = !first_alnum
        || start == 0
        || !text[..start].chars().next_back().is_some_and(|c| c.is_alphanumeric());
    let after_ok = !last_alnum
        || end == text.len()
        || !text[end..].chars().next().is_some_and(|c| c.is_alphanumeric());
    before_ok && after_ok
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perturb::{StubOrigin, ValidationVerdict};
    use proptest::prelude::*;

    fn stub(text: &str) -> ReasoningStub {
        ReasoningStub {
            text: text.to_string(),
            origin: StubOrigin::OnPolicy("test-model".into()),
            problem_id: "p1".into(),
        }
    }

    #[test]
    fn operator_swap_inverts_multiplication() {
        let record =
            apply_rule_perturbation(&stub("so 5 × 4 gives the total"), PerturbationKind::OperatorSwap, 0)
                .unwrap();
        assert_eq!(record.perturbed_text, "so 5 ÷ 4 gives the total");
        assert!(record.validation.verdict.is_valid());
    }

    #[test]
    fn operator_swap_skips_degenerate_operands() {
        // 7 * 1 == 7 / 1 and 3 + 0 == 3 - 0; neither is a usable site.
        assert!(matches!(
            apply_rule_perturbation(&stub("take 7 * 1 then 3 + 0"), PerturbationKind::OperatorSwap, 0),
            Err(PerturbError::NotApplicable(_))
        ));
    }

    #[test]
    fn number_change_can_reproduce_the_forty_to_forty_five_example() {
        let s = stub("she works 40 hours each week");
        let seed = (0..200)
            .find(|seed| {
                apply_rule_perturbation(&s, PerturbationKind::NumberChange, *seed)
                    .map(|r| r.perturbed_text == "she works 45 hours each week")
                    .unwrap_or(false)
            })
            .expect("some seed adds five");
        let record = apply_rule_perturbation(&s, PerturbationKind::NumberChange, seed).unwrap();
        assert_eq!(record.perturbed_text, "she works 45 hours each week");
        assert_eq!(record.validation.changed_token_spans, 1);
    }

    #[test]
    fn number_change_without_digits_is_not_applicable() {
        let result = apply_rule_perturbation(
            &stub("no digits in this stub at all"),
            PerturbationKind::NumberChange,
            3,
        );
        assert!(matches!(result, Err(PerturbError::NotApplicable(PerturbationKind::NumberChange))));
    }

    #[test]
    fn decimal_shift_moves_the_point_one_place() {
        let s = stub("the item costs 1.5 dollars today");
        let record = apply_rule_perturbation(&s, PerturbationKind::DecimalShift, 7).unwrap();
        assert!(
            record.perturbed_text == "the item costs 15.0 dollars today"
                || record.perturbed_text == "the item costs 0.15 dollars today",
            "unexpected shift: {}",
            record.perturbed_text
        );
    }

    #[test]
    fn decimal_shift_helper_matches_examples() {
        assert_eq!(shift_decimal("1.5", true), "15.0");
        assert_eq!(shift_decimal("1.5", false), "0.15");
        assert_eq!(shift_decimal("12.34", true), "123.4");
        assert_eq!(shift_decimal("12.34", false), "1.234");
    }

    #[test]
    fn fraction_inversion_swaps_numerator_and_denominator() {
        let record =
            apply_rule_perturbation(&stub("use 3/4 of the flour"), PerturbationKind::FractionInversion, 0)
                .unwrap();
        assert_eq!(record.perturbed_text, "use 4/3 of the flour");
    }

    #[test]
    fn fraction_inversion_skips_equal_terms() {
        let result =
            apply_rule_perturbation(&stub("exactly 5/5 of them"), PerturbationKind::FractionInversion, 0);
        assert!(matches!(result, Err(PerturbError::NotApplicable(_))));
    }

    #[test]
    fn order_of_operations_regroups_parenthesized_expression() {
        let record = apply_rule_perturbation(
            &stub("compute (2 + 3) * 4 for the total"),
            PerturbationKind::OrderOfOperationsReversal,
            0,
        )
        .unwrap();
        assert_eq!(record.perturbed_text, "compute 2 + (3 * 4) for the total");
    }

    #[test]
    fn comparison_swap_flips_words() {
        let record = apply_rule_perturbation(
            &stub("the result is greater than 10"),
            PerturbationKind::ComparisonSwap,
            0,
        )
        .unwrap();
        assert_eq!(record.perturbed_text, "the result is less than 10");
    }

    #[test]
    fn unit_change_substitutes_without_converting() {
        let record =
            apply_rule_perturbation(&stub("a rope of 12 meters length"), PerturbationKind::UnitChange, 0)
                .unwrap();
        assert_eq!(record.perturbed_text, "a rope of 12 feet length");
    }

    #[test]
    fn time_relation_change_substitutes() {
        let record = apply_rule_perturbation(
            &stub("she earns 10 dollars per hour at work"),
            PerturbationKind::TimeRelationChange,
            0,
        )
        .unwrap();
        assert!(record.perturbed_text.contains("per minute"));
    }

    #[test]
    fn key_phrase_alteration_changes_percent_of() {
        let record = apply_rule_perturbation(
            &stub("the second glass costs 60% of the price"),
            PerturbationKind::KeyPhraseAlteration,
            0,
        )
        .unwrap();
        assert_eq!(record.perturbed_text, "the second glass costs 60% more than the price");
    }

    #[test]
    fn word_boundaries_prevent_partial_matches() {
        // "hoursmeters" must not offer a unit-change site.
        let result =
            apply_rule_perturbation(&stub("a nonsense wordmeters here"), PerturbationKind::UnitChange, 0);
        assert!(matches!(result, Err(PerturbError::NotApplicable(_))));
    }

    #[test]
    fn llm_freeform_is_not_rule_applicable() {
        let result = apply_rule_perturbation(&stub("anything 5"), PerturbationKind::LlmFreeform, 0);
        assert!(matches!(result, Err(PerturbError::NotApplicable(PerturbationKind::LlmFreeform))));
    }

    #[test]
    fn any_rule_finds_an_applicable_kind() {
        let record = apply_any_rule(
            &stub("combine 3 + 4 then double it"),
            9,
            PerturbationKind::RULE_KINDS,
        )
        .unwrap();
        assert!(record.validation.verdict.is_valid());
        assert_ne!(record.perturbed_text, record.original.text);
    }

    #[test]
    fn rule_records_flow_through_the_validator() {
        let record =
            apply_rule_perturbation(&stub("we need 40 hours and 3/4 of a day"), PerturbationKind::NumberChange, 5)
                .unwrap();
        assert_eq!(record.perturber, "rule");
        assert!(record.explanation.is_some());
        assert_eq!(record.validation.verdict, ValidationVerdict::Valid);
    }

    proptest! {
        /// apply_rule_perturbation is a pure function of (stub, kind, seed).
        #[test]
        fn deterministic_under_fixed_inputs(seed in any::<u64>()) {
            let s = stub("we add 12 + 30 then take 60% of the total over 2.5 days");
            for kind in PerturbationKind::RULE_KINDS {
                let first = apply_rule_perturbation(&s, *kind, seed);
                let second = apply_rule_perturbation(&s, *kind, seed);
                match (first, second) {
                    (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
                    (Err(_), Err(_)) => {}
                    other => prop_assert!(false, "diverged: {other:?}"),
                }
            }
        }

        /// Every applicable rule perturbation on this corpus is minimal and
        /// changes the text.
        #[test]
        fn applicable_rules_validate(seed in any::<u64>()) {
            let s = stub("he works 40 hours per week, saves 60% of 5 dollars, and splits 3/4 of (2 + 3) * 4 meters");
            for kind in PerturbationKind::RULE_KINDS {
                if let Ok(record) = apply_rule_perturbation(&s, *kind, seed) {
                    prop_assert!(record.validation.verdict.is_valid(),
                        "kind {kind:?} produced invalid perturbation: {:?}", record.validation);
                    prop_assert_ne!(&record.perturbed_text, &s.text);
                }
            }
        }
    }
}
