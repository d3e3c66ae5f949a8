//! Prompt templates and default lexicons embedded at build time.
//!
//! The templates carry `{slot}` substitution points; everything outside the
//! slots is treated as fixed text and fingerprinted into run manifests so an
//! edited template is detectable after the fact.

use sha2::{Digest, Sha256};

/// Prompt sent to the evaluated model for direct solutions, stub generation,
/// and (as the user turn of a prefill request) stub completion.
pub const SOLVE_TEMPLATE: &str = include_str!("../assets/prompts/solve.txt");

/// Prompt sent to the judge model. Slots: `{problem}`, `{answer}`,
/// `{candidate_solution}`.
pub const VERIFY_TEMPLATE: &str = include_str!("../assets/prompts/verify.txt");

/// Prompt sent to the perturber model. Slot: `{stub}`.
pub const PERTURB_TEMPLATE: &str = include_str!("../assets/prompts/perturb.txt");

pub const UNITS_LEXICON: &str = include_str!("../assets/lexicons/units.tsv");
pub const TIME_LEXICON: &str = include_str!("../assets/lexicons/time_relations.tsv");
pub const KEY_PHRASE_LEXICON: &str = include_str!("../assets/lexicons/key_phrases.tsv");
pub const PIVOT_MARKERS: &str = include_str!("../assets/lexicons/pivot_markers.txt");

/// Replace `{name}` slots in a single left-to-right pass.
///
/// Substituted values are never rescanned, so slot-shaped text inside an
/// input cannot trigger a second substitution.
pub fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let tokens: Vec<(String, &str)> = slots
        .iter()
        .map(|(name, value)| (format!("{{{name}}}"), *value))
        .collect();
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    loop {
        let next = tokens
            .iter()
            .filter_map(|(token, value)| rest.find(token.as_str()).map(|at| (at, token, *value)))
            .min_by_key(|(at, _, _)| *at);
        match next {
            Some((at, token, value)) => {
                out.push_str(&rest[..at]);
                out.push_str(value);
                rest = &rest[at + token.len()..];
            }
            None => {
                out.push_str(rest);
                return out;
            }
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_replaces_each_slot_once() {
        let rendered = fill("a {x} b {y} c", &[("x", "1"), ("y", "2")]);
        assert_eq!(rendered, "a 1 b 2 c");
    }

    #[test]
    fn fill_does_not_rescan_substituted_values() {
        let rendered = fill("q: {q} a: {a}", &[("q", "{a}"), ("a", "42")]);
        assert_eq!(rendered, "q: {a} a: 42");
    }

    #[test]
    fn fill_leaves_unknown_braces_alone() {
        let rendered = fill("keep {this} {x}", &[("x", "v")]);
        assert_eq!(rendered, "keep {this} v");
    }

    #[test]
    fn templates_carry_expected_slots() {
        assert!(SOLVE_TEMPLATE.contains("{problem}"));
        assert!(VERIFY_TEMPLATE.contains("{problem}"));
        assert!(VERIFY_TEMPLATE.contains("{answer}"));
        assert!(VERIFY_TEMPLATE.contains("{candidate_solution}"));
        assert!(PERTURB_TEMPLATE.contains("{stub}"));
    }

    #[test]
    fn sha256_hex_is_stable() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
