//! Run configuration, loaded from TOML.
//!
//! ```toml
//! workspace = "run"                  # relative to the config file
//! task_description = "task.md"
//! seeds = ["seeds/baseline.hip"]
//! max_generations = 100
//! context_budget_bytes = 200000      # optional
//!
//! [llm]
//! provider = "http"                  # or "replay"
//! endpoint = "https://host/v1/chat/completions"
//! api_key_env = "KERNEL_SCIENTIST_API_KEY"
//!
//! [llm.roles.selector]
//! model = "fast-model"
//! temperature = 0.7
//! max_attempts = 3
//! # ... designer, writer, digester
//!
//! [evaluator]
//! kind = "external"                  # or "mock"
//! command = "./submit.sh {source_path} {shapes_path} {result_path}"
//! timeout_s = 600
//! shapes = [[1024, 1536, 7168], [6144, 512, 4096]]
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;

use crate::evaluation::{EvaluatorConfig, EvaluatorKind, MockSettings, DEFAULT_TIMEOUT};
use crate::gateway::{GatewayConfig, LlmRole, RoleName};
use crate::population::BenchmarkShape;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    workspace: Option<PathBuf>,
    task_description: PathBuf,
    #[serde(default)]
    seeds: Vec<PathBuf>,
    #[serde(default = "default_max_generations")]
    max_generations: u32,
    #[serde(default)]
    context_budget_bytes: Option<usize>,
    llm: RawLlm,
    evaluator: RawEvaluator,
}

fn default_max_generations() -> u32 {
    100
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLlm {
    #[serde(default = "default_provider")]
    provider: String,
    #[serde(default)]
    endpoint: Option<String>,
    #[serde(default)]
    api_key_env: Option<String>,
    #[serde(default)]
    request_timeout_s: Option<f64>,
    #[serde(default)]
    backoff_ms: Option<u64>,
    #[serde(default)]
    replay_script: Option<PathBuf>,
    #[serde(default)]
    roles: BTreeMap<String, LlmRole>,
}

fn default_provider() -> String {
    "http".into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvaluator {
    kind: String,
    #[serde(default)]
    command: Option<String>,
    #[serde(default)]
    timeout_s: Option<f64>,
    shapes: Vec<[u64; 3]>,
    #[serde(default)]
    mock: Option<MockSettings>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LlmProvider {
    /// OpenAI-compatible chat-completions endpoint.
    Http {
        endpoint: String,
        api_key_env: Option<String>,
        request_timeout: Duration,
    },
    /// Replays canned responses from a YAML file mapping lane or role
    /// names to response lists.
    Replay { script: PathBuf },
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub workspace: PathBuf,
    pub task_description_path: PathBuf,
    pub seed_paths: Vec<PathBuf>,
    pub max_generations: u32,
    pub context_budget_bytes: Option<usize>,
    pub provider: LlmProvider,
    pub gateway: GatewayConfig,
    pub evaluator: EvaluatorConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base)
    }

    /// Parses and validates a config; relative paths resolve against `base`.
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let invalid = |m: String| ConfigError::Invalid(m);
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };

        let mut roles = BTreeMap::new();
        for (name, role) in raw.llm.roles {
            let key: RoleName = name
                .parse()
                .map_err(|_| invalid(format!("unknown llm role {name:?}")))?;
            role.validate().map_err(|e| invalid(format!("llm role {name}: {e}")))?;
            roles.insert(key, role);
        }
        for role in RoleName::ALL {
            if !roles.contains_key(&role) {
                return Err(invalid(format!("llm role {role} is not configured")));
            }
        }

        let provider = match raw.llm.provider.as_str() {
            "http" => {
                let endpoint = raw
                    .llm
                    .endpoint
                    .filter(|e| e.starts_with("http://") || e.starts_with("https://"))
                    .ok_or_else(|| invalid("llm.endpoint must be an http(s) URL".into()))?;
                let timeout = raw.llm.request_timeout_s.unwrap_or(600.0);
                LlmProvider::Http {
                    endpoint,
                    api_key_env: raw.llm.api_key_env,
                    request_timeout: positive_secs(timeout)
                        .ok_or_else(|| invalid("llm.request_timeout_s must be positive".into()))?,
                }
            }
            "replay" => LlmProvider::Replay {
                script: resolve(
                    &raw.llm
                        .replay_script
                        .ok_or_else(|| invalid("llm.replay_script is required for provider \"replay\"".into()))?,
                ),
            },
            other => return Err(invalid(format!("unknown llm provider {other:?}"))),
        };

        let shapes = raw
            .evaluator
            .shapes
            .iter()
            .map(|[m, k, n]| BenchmarkShape::new(*m, *k, *n))
            .collect::<Result<Vec<_>, _>>()
            .map_err(invalid)?;
        let timeout = match raw.evaluator.timeout_s {
            Some(s) => positive_secs(s).ok_or_else(|| invalid("evaluator.timeout_s must be positive".into()))?,
            None => DEFAULT_TIMEOUT,
        };
        let kind = match raw.evaluator.kind.as_str() {
            "external" | "external_command" => EvaluatorKind::ExternalCommand {
                command_template: raw
                    .evaluator
                    .command
                    .ok_or_else(|| invalid("evaluator.command is required for kind \"external\"".into()))?,
            },
            "mock" => EvaluatorKind::Mock(raw.evaluator.mock.unwrap_or_default()),
            other => return Err(invalid(format!("unknown evaluator kind {other:?}"))),
        };
        let evaluator = EvaluatorConfig { kind, timeout, shapes };
        evaluator.validate().map_err(invalid)?;

        if raw.context_budget_bytes == Some(0) {
            return Err(invalid("context_budget_bytes must be positive".into()));
        }

        Ok(Self {
            workspace: resolve(raw.workspace.as_deref().unwrap_or(Path::new("."))),
            task_description_path: resolve(&raw.task_description),
            seed_paths: raw.seeds.iter().map(|p| resolve(p)).collect(),
            max_generations: raw.max_generations,
            context_budget_bytes: raw.context_budget_bytes,
            provider,
            gateway: GatewayConfig {
                roles,
                backoff_base: Duration::from_millis(raw.llm.backoff_ms.unwrap_or(1000)),
            },
            evaluator,
        })
    }
}

fn positive_secs(s: f64) -> Option<Duration> {
    (s.is_finite() && s > 0.0).then(|| Duration::from_secs_f64(s))
}
