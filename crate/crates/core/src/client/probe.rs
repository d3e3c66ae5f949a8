//! Heuristic battery deciding whether a model/provider combination honors
//! assistant prefill.
//!
//! Provider support for prefill is inconsistently documented and silently
//! broken endpoints restart the answer instead of continuing it, which
//! invalidates perturbed-stub results. Each probe ends with an assistant
//! message whose correct continuation is strongly constrained; a provider is
//! classified as supporting prefill only if every probe continues rather
//! than restarts.

use serde::{Deserialize, Serialize};

use super::{ChatClient, ChatMessage, ClientError, CompletionRequest, SamplingParams};

pub struct PrefillProbe {
    pub name: &'static str,
    pub user: &'static str,
    pub prefix: &'static str,
    /// Acceptable continuation openings, compared case-insensitively after
    /// leading whitespace is dropped.
    pub expected: &'static [&'static str],
}

pub const PROBE_BATTERY: &[PrefillProbe] = &[
    PrefillProbe {
        name: "arithmetic",
        user: "What is 2 + 2? Reply with the full equation and nothing else.",
        prefix: "2 + 2 =",
        expected: &["4"],
    },
    PrefillProbe {
        name: "counting",
        user: "List the first four positive integers separated by commas, nothing else.",
        prefix: "1, 2, 3,",
        expected: &["4"],
    },
    PrefillProbe {
        name: "idiom",
        user: "Complete this sentence exactly, with no extra words: The opposite of hot is cold.",
        prefix: "The opposite of hot is",
        expected: &["cold"],
    },
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefillVerdict {
    Supported,
    Unsupported(UnsupportedReason),
}

impl PrefillVerdict {
    pub fn is_supported(&self) -> bool {
        matches!(self, PrefillVerdict::Supported)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnsupportedReason {
    /// The provider answered from scratch instead of continuing the prefix.
    Restarted { probe: String, reply: String },
    /// The provider rejected the assistant-final message outright.
    Rejected { status: u16 },
    Transport { message: String },
}

/// Run the probe battery against `model`, greedily decoded.
pub fn probe_prefill_support(client: &ChatClient, model: &str) -> PrefillVerdict {
    for probe in PROBE_BATTERY {
        let request = CompletionRequest::prefill(
            model,
            vec![ChatMessage::user(probe.user), ChatMessage::assistant(probe.prefix)],
            SamplingParams::greedy().with_max_tokens(16),
        );
        let result = match client.complete_chat(&request) {
            Ok(result) => result,
            Err(ClientError::ProviderRejected { code, .. }) => {
                return PrefillVerdict::Unsupported(UnsupportedReason::Rejected { status: code });
            }
            Err(err) => {
                return PrefillVerdict::Unsupported(UnsupportedReason::Transport {
                    message: err.to_string(),
                });
            }
        };
        if !continues(&result.text, probe.expected) {
            return PrefillVerdict::Unsupported(UnsupportedReason::Restarted {
                probe: probe.name.to_string(),
                reply: result.text.chars().take(120).collect(),
            });
        }
    }
    PrefillVerdict::Supported
}

fn continues(reply: &str, expected: &[&str]) -> bool {
    let normalized = reply.trim_start().to_lowercase();
    expected.iter().any(|want| normalized.starts_with(&want.to_lowercase()))
}
