//! Live HTTP provider for OpenAI-compatible `/chat/completions` endpoints.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    ChatMessage, ChatProvider, CompletionRequest, FinishReason, ProviderEndpoint, ProviderFault,
    ProviderReply,
};

/// Wire body: model, messages, temperature, top_p, optional max_tokens.
#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    top_p: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Deserialize)]
struct WireResponse {
    #[serde(default)]
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    completion_tokens: Option<u32>,
}

pub struct HttpProvider {
    endpoint: ProviderEndpoint,
    agent: ureq::Agent,
}

impl HttpProvider {
    pub fn new(endpoint: ProviderEndpoint) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(300)))
            .build();
        Self { endpoint, agent: config.into() }
    }

    pub fn endpoint(&self) -> &ProviderEndpoint {
        &self.endpoint
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.endpoint.base_url.trim_end_matches('/'))
    }

    /// Read the credential at request time. The value lives only on this
    /// call's stack; records and logs carry the variable name at most.
    fn bearer_token(&self) -> Result<Option<String>, ProviderFault> {
        match &self.endpoint.api_key_env {
            None => Ok(None),
            Some(var) => match std::env::var(var) {
                Ok(value) if !value.is_empty() => Ok(Some(value)),
                _ => Err(ProviderFault::Transport(format!(
                    "credential environment variable '{var}' is unset or empty"
                ))),
            },
        }
    }
}

impl ChatProvider for HttpProvider {
    fn execute(&self, request: &CompletionRequest) -> Result<ProviderReply, ProviderFault> {
        let body = WireRequest {
            model: &request.model,
            messages: &request.messages,
            temperature: request.sampling.temperature,
            top_p: request.sampling.top_p,
            max_tokens: request.sampling.max_tokens,
        };
        let mut call = self.agent.post(self.url());
        if let Some(token) = self.bearer_token()? {
            call = call.header("authorization", format!("Bearer {token}"));
        }
        let mut response = call
            .send_json(&body)
            .map_err(|e| ProviderFault::Transport(e.to_string()))?;

        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| ProviderFault::Transport(format!("failed reading response body: {e}")))?;
        if !(200..300).contains(&status) {
            return Err(ProviderFault::Status { code: status, message: truncate(&text, 512) });
        }

        let parsed: WireResponse = serde_json::from_str(&text).map_err(|e| {
            ProviderFault::Transport(format!("malformed response body: {e}: {}", truncate(&text, 256)))
        })?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| ProviderFault::Transport("response carried no choices".into()))?;
        let content = choice
            .message
            .content
            .ok_or_else(|| ProviderFault::Transport("first choice carried no content".into()))?;
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("stop") => FinishReason::Stop,
            Some("length") => FinishReason::Length,
            _ => FinishReason::Other,
        };
        Ok(ProviderReply {
            text: content,
            finish_reason,
            tokens: parsed.usage.and_then(|u| u.completion_tokens),
        })
    }
}

fn truncate(text: &str, limit: usize) -> String {
    if text.len() <= limit {
        text.to_string()
    } else {
        let mut end = limit;
        while !text.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}...", &text[..end])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn url_joins_without_duplicate_slash() {
        let provider = HttpProvider::new(ProviderEndpoint {
            base_url: "http://localhost:9999/v1/".into(),
            api_key_env: None,
            requests_per_second: None,
        });
        assert_eq!(provider.url(), "http://localhost:9999/v1/chat/completions");
    }

    #[test]
    fn missing_credential_is_a_transport_fault() {
        let provider = HttpProvider::new(ProviderEndpoint {
            base_url: "http://localhost:9999/v1".into(),
            api_key_env: Some("STUBMARK_TEST_SURELY_UNSET_KEY".into()),
            requests_per_second: None,
        });
        let request = CompletionRequest::new(
            "m",
            vec![ChatMessage::user("hi")],
            crate::client::SamplingParams::greedy(),
        );
        match provider.execute(&request).unwrap_err() {
            ProviderFault::Transport(message) => {
                assert!(message.contains("STUBMARK_TEST_SURELY_UNSET_KEY"))
            }
            other => panic!("expected transport fault, got {other:?}"),
        }
    }
}
