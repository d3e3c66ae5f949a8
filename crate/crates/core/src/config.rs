//! Run configuration: the TOML file the CLI consumes and the snapshot the
//! run manifest stores.
//!
//! Everything a run depends on is explicit here: model ids, endpoints,
//! dataset, scenario, sampling values, retry budget, concurrency. Secrets
//! are referenced by environment variable name only.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::client::http::HttpProvider;
use crate::client::{ChatClient, ProviderEndpoint, RetryPolicy, SamplingParams};
use crate::datasets::{self, DatasetError, DatasetId, Problem};
use crate::grading::GraderConfig;
use crate::scenarios::ScenarioKind;
use crate::scripted::ScriptedProvider;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Script(#[from] crate::scripted::ScriptError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub kind: DatasetId,
    pub path: PathBuf,
    /// GSM-Symbolic sample file; required when `kind` is `gsm8k-matched`,
    /// whose problems are derived rather than loaded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub symbolic_path: Option<PathBuf>,
}

impl DatasetConfig {
    pub fn load(&self) -> Result<Vec<Problem>, DatasetError> {
        match self.kind {
            DatasetId::Gsm8kMatched => {
                let symbolic_path = self
                    .symbolic_path
                    .as_ref()
                    .ok_or(DatasetError::DerivedDataset)?;
                let gsm8k = datasets::load_dataset(&self.path, DatasetId::Gsm8k)?;
                let symbolic = datasets::load_dataset(symbolic_path, DatasetId::GsmSymbolic)?;
                datasets::derive_matched_subset(&gsm8k, &symbolic)
            }
            kind => datasets::load_dataset(&self.path, kind),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointKind {
    Http,
    Script,
}

/// One model behind one endpoint. `kind = "script"` swaps the live HTTP
/// provider for a scripted one, which is how desk-scale runs work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpointConfig {
    pub model: String,
    #[serde(default = "default_endpoint_kind")]
    pub kind: EndpointKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requests_per_second: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
}

fn default_endpoint_kind() -> EndpointKind {
    EndpointKind::Http
}

impl ModelEndpointConfig {
    pub fn build_client(&self, policy: &RetryPolicy) -> Result<ChatClient, ConfigError> {
        let client = match self.kind {
            EndpointKind::Http => {
                let base_url = self.base_url.clone().ok_or_else(|| {
                    ConfigError::Invalid(format!("endpoint for '{}' needs base_url", self.model))
                })?;
                let provider = HttpProvider::new(ProviderEndpoint {
                    base_url,
                    api_key_env: self.api_key_env.clone(),
                    requests_per_second: self.requests_per_second,
                });
                ChatClient::new(Arc::new(provider), policy.clone())
            }
            EndpointKind::Script => {
                let script = self.script.as_ref().ok_or_else(|| {
                    ConfigError::Invalid(format!(
                        "scripted endpoint for '{}' needs a script path",
                        self.model
                    ))
                })?;
                ChatClient::new(Arc::new(ScriptedProvider::from_file(script)?), policy.clone())
            }
        };
        Ok(match self.requests_per_second {
            Some(ceiling) => client.with_rate_limit(ceiling),
            None => client,
        })
    }
}

/// How perturbed scenarios obtain their error: the perturber model with the
/// perturbation prompt, or deterministic rule mutation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PerturberConfig {
    Model,
    Rule {
        #[serde(default)]
        seed: u64,
    },
}

impl Default for PerturberConfig {
    fn default() -> Self {
        PerturberConfig::Model
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run_id: String,
    /// Store root; each run gets `<store>/<run_id>/`.
    pub store: PathBuf,
    pub scenario: ScenarioKind,
    pub dataset: DatasetConfig,
    /// Model under evaluation.
    pub evaluated: ModelEndpointConfig,
    /// Held-out model: stub source for off-policy runs, perturber, grader.
    pub helper: ModelEndpointConfig,
    #[serde(default = "default_stub_max_tokens")]
    pub stub_max_tokens: u32,
    /// Solution sampling, used for stubs, completions, and direct solutions.
    #[serde(default = "default_solution_sampling")]
    pub sampling: SamplingParams,
    /// Perturber/judge sampling; must stay greedy.
    #[serde(default = "greedy_sampling")]
    pub helper_sampling: SamplingParams,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub perturber: PerturberConfig,
    /// Shared perturbed-stub set for off-policy runs, produced by
    /// `prepare-stubs`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stub_set: Option<PathBuf>,
    #[serde(default = "default_max_verdict_retries")]
    pub max_verdict_retries: u32,
}

fn default_stub_max_tokens() -> u32 {
    100
}

fn default_solution_sampling() -> SamplingParams {
    SamplingParams::nucleus(0.2, 0.8)
}

fn greedy_sampling() -> SamplingParams {
    SamplingParams::greedy()
}

fn default_concurrency() -> usize {
    4
}

fn default_max_verdict_retries() -> u32 {
    1
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let config: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.run_id.trim().is_empty() {
            return Err(ConfigError::Invalid("run_id is empty".into()));
        }
        if self.run_id.contains(['/', '\\']) {
            return Err(ConfigError::Invalid("run_id must not contain path separators".into()));
        }
        if self.stub_max_tokens == 0 {
            return Err(ConfigError::Invalid("stub_max_tokens must be positive".into()));
        }
        if self.concurrency == 0 {
            return Err(ConfigError::Invalid("concurrency must be at least 1".into()));
        }
        self.sampling
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("sampling: {e}")))?;
        self.helper_sampling
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("helper_sampling: {e}")))?;
        if !self.helper_sampling.is_greedy() {
            return Err(ConfigError::Invalid(
                "helper_sampling must be greedy (temperature 0)".into(),
            ));
        }
        if self.scenario == ScenarioKind::OffPolicy && self.stub_set.is_none() {
            return Err(ConfigError::Invalid(
                "off_policy runs need stub_set (produced by prepare-stubs)".into(),
            ));
        }
        if self.dataset.kind == DatasetId::Gsm8kMatched && self.dataset.symbolic_path.is_none() {
            return Err(ConfigError::Invalid(
                "gsm8k-matched needs dataset.symbolic_path to derive the subset".into(),
            ));
        }
        Ok(())
    }

    pub fn grader_config(&self) -> GraderConfig {
        GraderConfig {
            model: self.helper.model.clone(),
            sampling: self.helper_sampling,
            max_verdict_retries: self.max_verdict_retries,
        }
    }
}
