//! Application configuration: file, then environment, then command-line flags.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use planeval::embedding::DEFAULT_DIMENSION;
use planeval::orchestrator::{ChatBackend, RemoteChatBackend, ScriptedMockBackend};
use planeval::{Embedder, HashEmbedder, RemoteEmbedder, RetrievalConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const ENV_EMBEDDING_URL: &str = "PLANEVAL_EMBEDDING_URL";
pub const ENV_CHAT_URL: &str = "PLANEVAL_CHAT_URL";
pub const ENV_CHAT_MODEL: &str = "PLANEVAL_CHAT_MODEL";
pub const ENV_TIMEOUT: &str = "PLANEVAL_TIMEOUT_SECS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Fallback,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub embedding_provider: ProviderKind,
    pub embedding_url: Option<String>,
    pub embedding_dimension: usize,
    pub chat_backend: BackendKind,
    pub chat_url: Option<String>,
    pub chat_model: String,
    pub timeout_secs: f64,
    pub retrieval: RetrievalConfig,
    pub seed: u64,
    pub kb: Option<PathBuf>,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            embedding_provider: ProviderKind::Fallback,
            embedding_url: None,
            embedding_dimension: DEFAULT_DIMENSION,
            chat_backend: BackendKind::Mock,
            chat_url: None,
            chat_model: "default".into(),
            timeout_secs: 30.0,
            retrieval: RetrievalConfig::default(),
            seed: 0,
            kb: None,
        }
    }
}

impl AppConfig {
    /// Reads `path` if given (JSON), then applies environment overrides.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| planeval::Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| {
                    CliError::Config(format!("{}: {e}", p.display()))
                })?
            }
            None => Self::default(),
        };
        config.apply_env()?;
        Ok(config)
    }

    fn apply_env(&mut self) -> Result<(), CliError> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        if let Some(url) = var(ENV_EMBEDDING_URL) {
            self.embedding_url = Some(url);
        }
        if let Some(url) = var(ENV_CHAT_URL) {
            self.chat_url = Some(url);
        }
        if let Some(model) = var(ENV_CHAT_MODEL) {
            self.chat_model = model;
        }
        if let Some(t) = var(ENV_TIMEOUT) {
            self.timeout_secs = t
                .parse()
                .map_err(|_| CliError::Config(format!("{ENV_TIMEOUT}={t} is not a number")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.embedding_provider == ProviderKind::Remote && self.embedding_url.is_none() {
            return Err(CliError::Config(format!(
                "remote embedding provider needs a URL (embedding_url or {ENV_EMBEDDING_URL})"
            )));
        }
        if self.chat_backend == BackendKind::Remote && self.chat_url.is_none() {
            return Err(CliError::Config(format!(
                "remote chat backend needs a URL (chat_url or {ENV_CHAT_URL})"
            )));
        }
        if self.embedding_dimension == 0 {
            return Err(CliError::Config("embedding_dimension must be positive".into()));
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(CliError::Config("timeout_secs must be positive".into()));
        }
        self.retrieval
            .validated()
            .map_err(|e| CliError::Config(format!("retrieval: {e}")))?;
        Ok(())
    }

    fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    pub fn embedder(&self) -> Result<Arc<dyn Embedder>, CliError> {
        self.validate()?;
        Ok(match self.embedding_provider {
            ProviderKind::Fallback => Arc::new(HashEmbedder::new(self.embedding_dimension)),
            ProviderKind::Remote => Arc::new(RemoteEmbedder::new(
                self.embedding_url.clone().unwrap_or_default(),
                self.timeout(),
            )),
        })
    }

    pub fn backend(&self) -> Result<Arc<dyn ChatBackend>, CliError> {
        self.validate()?;
        Ok(match self.chat_backend {
            BackendKind::Mock => Arc::new(ScriptedMockBackend),
            BackendKind::Remote => Arc::new(RemoteChatBackend::new(
                self.chat_url.clone().unwrap_or_default(),
                self.chat_model.clone(),
                self.timeout(),
            )),
        })
    }
}
