use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Deserialize;

use quarry_core::conductor::PlannerConfig;
use quarry_core::retriever::RetrieverConfig;

/// Where session language models come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LmSource {
    /// `QUARRY_LM_*` environment variables.
    #[default]
    Env,
    /// Replies are supplied per session as a trace (tests, demos).
    Scripted,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct ApiConfig {
    pub bind: SocketAddr,
    pub corpus_root: PathBuf,
    pub token: Option<String>,
    pub lm: LmSource,
    pub planner: PlannerConfig,
    pub retriever: RetrieverConfig,
}

impl Default for ApiConfig {
    fn default() -> Self {
        Self {
            bind: ([127, 0, 0, 1], 8080).into(),
            corpus_root: PathBuf::from("quarry-data"),
            token: None,
            lm: LmSource::Env,
            planner: PlannerConfig::default(),
            retriever: RetrieverConfig::default(),
        }
    }
}

impl ApiConfig {
    /// Defaults, then the optional TOML file, then `QUARRY_*` overrides.
    pub fn load(file: Option<&Path>) -> anyhow::Result<Self> {
        let mut cfg = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => Self::default(),
        };
        if let Ok(v) = std::env::var("QUARRY_BIND") {
            cfg.bind = v.parse().with_context(|| format!("QUARRY_BIND={v}"))?;
        }
        if let Ok(v) = std::env::var("QUARRY_ROOT") {
            cfg.corpus_root = v.into();
        }
        if let Ok(v) = std::env::var("QUARRY_TOKEN") {
            cfg.token = Some(v).filter(|t| !t.is_empty());
        }
        if std::env::var("QUARRY_LM_PROVIDER").as_deref() == Ok("scripted") {
            cfg.lm = LmSource::Scripted;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if !self.corpus_root.is_dir() {
            bail!("corpus root {} does not exist", self.corpus_root.display());
        }
        Ok(())
    }
}
