//! On-disk configuration: the clients, server, prompts, scales, mock
//! scripts, and service limits a deployment runs with, as one JSON document.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendBinding, Gateway, MockScript};
use crate::eval::{Harness, ScaleMap, SERVER_PARTICIPANT};
use crate::orchestrator::{
    PromptSet, Runner, DEFAULT_AGGREGATION_SYSTEM_PROMPT, DEFAULT_FINAL_TEMPLATE,
    DEFAULT_SUMMARY_TEMPLATE,
};
use crate::router::JudgeConfig;
use crate::store::SERVER_OVERRIDE_KEY;
use crate::types::{ClientPool, ClientProfile, InvariantError, RunConfig};
use crate::vlm::DEFAULT_VLM_FEEDBACK_INSTRUCTION;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Invalid(#[from] InvariantError),
}

/// The four prompt texts a deployment can override. Omitted fields fall
/// back to the built-in prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptsConfig {
    pub summary_template: String,
    pub final_template: String,
    pub aggregation_system_prompt: String,
    pub vlm_feedback_instruction: String,
}

impl Default for PromptsConfig {
    fn default() -> Self {
        PromptsConfig {
            summary_template: DEFAULT_SUMMARY_TEMPLATE.to_string(),
            final_template: DEFAULT_FINAL_TEMPLATE.to_string(),
            aggregation_system_prompt: DEFAULT_AGGREGATION_SYSTEM_PROMPT.to_string(),
            vlm_feedback_instruction: DEFAULT_VLM_FEEDBACK_INSTRUCTION.to_string(),
        }
    }
}

impl PromptsConfig {
    pub fn prompt_set(&self) -> PromptSet {
        PromptSet {
            summary_template: self.summary_template.clone(),
            final_template: self.final_template.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), InvariantError> {
        self.prompt_set().validate()?;
        if self.aggregation_system_prompt.trim().is_empty() {
            return Err(InvariantError::new("aggregation system prompt: empty"));
        }
        if self.vlm_feedback_instruction.trim().is_empty() {
            return Err(InvariantError::new("vision feedback instruction: empty"));
        }
        Ok(())
    }
}

/// Limits for the HTTP service.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    /// Queries allowed to run at once; further accepted queries wait.
    pub max_concurrent_runs: usize,
    /// Accepted-but-waiting queries beyond which submissions are rejected.
    pub max_queued_runs: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            max_concurrent_runs: 8,
            max_queued_runs: 128,
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<(), InvariantError> {
        if self.max_concurrent_runs == 0 {
            return Err(InvariantError::new(
                "service config: max_concurrent_runs must be at least 1",
            ));
        }
        Ok(())
    }
}

/// One deployment's complete configuration. Only `server` is required; every
/// other field has a working default. Unknown top-level fields are rejected
/// so config typos fail loudly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColmConfig {
    /// Registered clients; may start empty when clients are registered over
    /// HTTP at runtime.
    #[serde(default)]
    pub clients: Vec<ClientProfile>,
    /// The aggregation server's backend.
    pub server: BackendBinding,
    /// Judge used for expert selection; lexical routing when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<JudgeConfig>,
    #[serde(default)]
    pub prompts: PromptsConfig,
    #[serde(default)]
    pub scale_map: ScaleMap,
    #[serde(default)]
    pub run: RunConfig,
    /// Scripts for mock backends, keyed by model id.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub mock_scripts: BTreeMap<String, MockScript>,
    /// Grader for judged benchmarks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_judge: Option<BackendBinding>,
    #[serde(default)]
    pub service: ServiceConfig,
}

impl ColmConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: ColmConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), InvariantError> {
        self.pool()?;
        for profile in &self.clients {
            if profile.name == SERVER_PARTICIPANT || profile.name == SERVER_OVERRIDE_KEY {
                return Err(InvariantError::new(format!(
                    "client name: '{}' is reserved",
                    profile.name
                )));
            }
        }
        self.server.validate()?;
        if let Some(judge) = &self.judge {
            judge.binding.validate()?;
            judge.validate()?;
        }
        self.prompts.validate()?;
        self.scale_map.validate()?;
        self.run.validate()?;
        if let Some(score_judge) = &self.score_judge {
            score_judge.validate()?;
        }
        self.service.validate()?;
        Ok(())
    }

    /// The configured clients as a pool (name-unique, individually valid).
    pub fn pool(&self) -> Result<ClientPool, InvariantError> {
        ClientPool::new(self.clients.clone())
    }

    pub fn gateway(&self) -> Gateway {
        Gateway::with_scripts(self.mock_scripts.clone())
    }

    pub fn runner(&self) -> Runner {
        Runner {
            gateway: Arc::new(self.gateway()),
            server: self.server.clone(),
            judge: self.judge.clone(),
            prompts: self.prompts.prompt_set(),
            aggregation_system_prompt: self.prompts.aggregation_system_prompt.clone(),
            vlm_feedback_instruction: self.prompts.vlm_feedback_instruction.clone(),
        }
    }

    pub fn harness(&self) -> Harness {
        Harness {
            scripts: self.mock_scripts.clone(),
            server: self.server.clone(),
            judge: self.judge.clone(),
            prompts: self.prompts.prompt_set(),
            aggregation_system_prompt: self.prompts.aggregation_system_prompt.clone(),
            vlm_feedback_instruction: self.prompts.vlm_feedback_instruction.clone(),
            scale: self.scale_map.clone(),
            score_judge: self.score_judge.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a_minimal_config_gets_working_defaults() {
        let config =
            ColmConfig::from_json(r#"{"server":{"kind":"mock","model_id":"agg"}}"#).unwrap();
        assert!(config.clients.is_empty());
        assert_eq!(config.run.k, 3);
        assert_eq!(config.service.max_concurrent_runs, 8);
        assert_eq!(config.service.max_queued_runs, 128);
        assert_eq!(
            config.prompts.aggregation_system_prompt,
            DEFAULT_AGGREGATION_SYSTEM_PROMPT
        );
        assert!(config.scale_map.get("mt_bench").is_some());
    }

    #[test]
    fn the_toy_config_round_trips_and_validates() {
        let config = crate::eval::toy::toy_config();
        config.validate().unwrap();
        let encoded = crate::canonical::to_canonical_json(&config).unwrap();
        let decoded = ColmConfig::from_json(&encoded).unwrap();
        assert_eq!(decoded, config);
        assert_eq!(decoded.pool().unwrap().len(), 3);
        assert!(decoded.mock_scripts.contains_key("toy-server"));
    }

    #[test]
    fn duplicate_and_reserved_client_names_are_rejected() {
        let duplicate = r#"{
            "server": {"kind": "mock", "model_id": "agg"},
            "clients": [
                {"name": "math", "role_prompt": "You solve math.", "backend": {"kind": "mock", "model_id": "m1"}},
                {"name": "math", "role_prompt": "You solve math twice.", "backend": {"kind": "mock", "model_id": "m2"}}
            ]
        }"#;
        assert!(matches!(
            ColmConfig::from_json(duplicate).unwrap_err(),
            ConfigError::Invalid(e) if e.to_string().contains("duplicate")
        ));

        for reserved in [SERVER_PARTICIPANT, SERVER_OVERRIDE_KEY] {
            let body = format!(
                r#"{{
                    "server": {{"kind": "mock", "model_id": "agg"}},
                    "clients": [{{"name": "{reserved}", "role_prompt": "You answer.", "backend": {{"kind": "mock", "model_id": "m1"}}}}]
                }}"#
            );
            assert!(matches!(
                ColmConfig::from_json(&body).unwrap_err(),
                ConfigError::Invalid(e) if e.to_string().contains("reserved")
            ));
        }
    }

    #[test]
    fn unknown_fields_and_bad_sections_fail_loudly() {
        let typo = r#"{"server":{"kind":"mock","model_id":"agg"},"serviec":{}}"#;
        assert!(matches!(
            ColmConfig::from_json(typo).unwrap_err(),
            ConfigError::Parse(_)
        ));

        let zero_concurrency = r#"{
            "server": {"kind": "mock", "model_id": "agg"},
            "service": {"max_concurrent_runs": 0}
        }"#;
        assert!(ColmConfig::from_json(zero_concurrency).is_err());

        let bad_scale = r#"{
            "server": {"kind": "mock", "model_id": "agg"},
            "scale_map": {"broken": {"divisor": 0.0}}
        }"#;
        assert!(ColmConfig::from_json(bad_scale).is_err());
    }

    #[test]
    fn missing_config_files_surface_the_path() {
        let err = ColmConfig::load(Path::new("/nonexistent/colm.json")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/colm.json"));
    }
}
