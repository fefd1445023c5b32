//! Run configuration: which backend serves each agent role, scoring
//! weights, cache location, parallelism, and the seed all randomness is
//! drawn from.
//!
//! Credentials never appear in the file — live backends name an
//! environment variable (`auth_env`) and the token is read from the
//! process environment at call time.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use medcot_core::Weights;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::judge::{
    Backend, ClientOptions, JudgeClient, JudgeRequest, Message, RetryPolicy, Role, ScriptedReply,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error in {path}: {detail}")]
    Parse { path: String, detail: String },
    #[error("invalid config: {detail}")]
    Invalid { detail: String },
}

/// Backend selection for one role, as written in the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    /// OpenAI-compatible endpoint; `auth_env` names the environment
    /// variable holding the bearer token.
    Live { base_url: String, auth_env: String },
    /// Replay fixtures (JSONL of `{key, response_text}`).
    Replay { path: PathBuf },
    /// Inline scripted replies, mainly for tests and demos.
    Scripted { replies: Vec<ScriptedReply> },
}

fn default_max_tokens() -> u32 {
    2048
}

/// Per-role model settings plus the backend that serves them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoleConfig {
    pub model: String,
    pub backend: BackendSpec,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

fn default_parallelism() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Role name (`reasoner`, `scorer`, ...) → backend + model.
    #[serde(default)]
    pub roles: BTreeMap<Role, RoleConfig>,
    #[serde(default)]
    pub weights: Weights,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            roles: BTreeMap::new(),
            weights: Weights::default(),
            cache_dir: None,
            parallelism: default_parallelism(),
            seed: 0,
            retry: RetryPolicy::default(),
        }
    }
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let config: RunConfig =
            serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.weights
            .validate()
            .map_err(|e| ConfigError::Invalid { detail: e.to_string() })?;
        if self.parallelism == 0 {
            return Err(ConfigError::Invalid { detail: "parallelism must be >= 1".into() });
        }
        for (role, rc) in &self.roles {
            if rc.model.trim().is_empty() {
                return Err(ConfigError::Invalid { detail: format!("role {role}: empty model") });
            }
            if let BackendSpec::Live { base_url, auth_env } = &rc.backend {
                if base_url.trim().is_empty() {
                    return Err(ConfigError::Invalid {
                        detail: format!("role {role}: empty base_url"),
                    });
                }
                if auth_env.trim().is_empty() {
                    return Err(ConfigError::Invalid {
                        detail: format!("role {role}: empty auth_env"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Replaces every configured backend with one replay fixture file —
    /// the `--replay` override.
    pub fn override_with_replay(&mut self, fixture: &Path) {
        for rc in self.roles.values_mut() {
            rc.backend = BackendSpec::Replay { path: fixture.to_path_buf() };
        }
    }

    /// True when no configured backend can reach a network.
    pub fn is_offline(&self) -> bool {
        self.roles
            .values()
            .all(|rc| !matches!(rc.backend, BackendSpec::Live { .. }))
    }

    /// Builds the shared judge client from this config.
    pub fn build_client(&self) -> Result<JudgeClient, ConfigError> {
        let mut backends = BTreeMap::new();
        for (&role, rc) in &self.roles {
            let backend = match &rc.backend {
                BackendSpec::Live { base_url, auth_env } => Backend::Live {
                    base_url: base_url.clone(),
                    auth_env: auth_env.clone(),
                },
                BackendSpec::Replay { path } => {
                    Backend::replay_from_path(path).map_err(|e| ConfigError::Invalid {
                        detail: format!("role {role}: {e}"),
                    })?
                }
                BackendSpec::Scripted { replies } => Backend::scripted(replies.clone()),
            };
            backends.insert(role, backend);
        }
        Ok(JudgeClient::new(
            backends,
            ClientOptions {
                cache_dir: self.cache_dir.clone(),
                retry: self.retry,
                parallelism: self.parallelism,
                pin_nonzero_temperature: false,
            },
        ))
    }

    /// Builds a request for `role` using its configured model settings.
    pub fn request_for(
        &self,
        role: Role,
        messages: Vec<Message>,
    ) -> Result<JudgeRequest, ConfigError> {
        let rc = self
            .roles
            .get(&role)
            .ok_or_else(|| ConfigError::Invalid { detail: format!("role {role} not configured") })?;
        Ok(JudgeRequest {
            role,
            model: rc.model.clone(),
            messages,
            temperature: rc.temperature,
            max_tokens: rc.max_tokens,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_json() -> String {
        serde_json::json!({
            "roles": {
                "scorer": {
                    "model": "judge-large",
                    "backend": { "kind": "live", "base_url": "https://api.example.com/v1", "auth_env": "JUDGE_API_KEY" }
                },
                "reasoner": {
                    "model": "reasoner-7b",
                    "backend": { "kind": "scripted", "replies": [ { "kind": "text", "text": "ok" } ] },
                    "temperature": 0.2,
                    "max_tokens": 512
                }
            },
            "weights": { "w_fc": 0.3, "w_ic": 0.3, "w_lrc": 0.4 },
            "parallelism": 4,
            "seed": 42
        })
        .to_string()
    }

    #[test]
    fn parses_and_validates_sample() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, sample_json()).unwrap();
        let cfg = RunConfig::from_path(&path).unwrap();
        assert_eq!(cfg.parallelism, 4);
        assert_eq!(cfg.seed, 42);
        assert!(!cfg.is_offline());

        let req = cfg
            .request_for(Role::Reasoner, vec![Message::user("q")])
            .unwrap();
        assert_eq!(req.model, "reasoner-7b");
        assert_eq!(req.temperature, 0.2);
        assert_eq!(req.max_tokens, 512);
    }

    #[test]
    fn bad_weights_and_zero_parallelism_rejected() {
        let mut cfg = RunConfig::default();
        cfg.weights = Weights { w_fc: 0.5, w_ic: 0.5, w_lrc: 0.5 };
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid { .. })));

        let mut cfg = RunConfig::default();
        cfg.parallelism = 0;
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid { .. })));
    }

    #[test]
    fn replay_override_reaches_every_role() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, sample_json()).unwrap();
        let mut cfg = RunConfig::from_path(&path).unwrap();

        let fixture = dir.path().join("fixtures.jsonl");
        std::fs::write(&fixture, "").unwrap();
        cfg.override_with_replay(&fixture);
        assert!(cfg.is_offline());
        let client = cfg.build_client().unwrap();
        assert!(client.replay_only());
    }

    #[test]
    fn live_backend_schema_has_no_credential_field() {
        // Only the variable NAME is configurable; the serialized form
        // carries no slot a token could hide in.
        let spec = BackendSpec::Live {
            base_url: "https://api.example.com/v1".into(),
            auth_env: "JUDGE_API_KEY".into(),
        };
        let value = serde_json::to_value(&spec).unwrap();
        let keys: Vec<&str> = value.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, ["auth_env", "base_url", "kind"]);
    }
}
