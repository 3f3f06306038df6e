//! Flat TOML run configuration. Values come from built-in defaults, then the
//! config file, then command-line flags.

use std::path::Path;

use anyhow::Context;
use drawreason_core::episode::remote::RemoteConfig;
use drawreason_core::episode::EpisodeConfig;
use drawreason_core::eval::EvalConfig;
use drawreason_core::grpo::DEFAULT_CLIP_EPS;
use drawreason_core::reflect::FilterConfig;
use drawreason_core::reward::{ConfidenceLadder, DEFAULT_BETA};
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: f64,
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
    pub max_in_flight: usize,

    pub alpha: usize,
    pub max_steps: usize,
    pub frame_budget: usize,

    pub beta: f64,
    pub clip_eps: f64,
    pub ladder: Vec<f64>,
    pub numeric_cut: f64,
    pub min_steps: usize,

    pub seed: u64,
    pub parallel: usize,
    pub attempts: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        let remote = RemoteConfig::default();
        let ep = EpisodeConfig::default();
        let filter = FilterConfig::default();
        Self {
            endpoint: remote.endpoint,
            model: remote.model,
            timeout_secs: remote.timeout_secs,
            max_attempts: remote.max_attempts,
            backoff_base_ms: remote.backoff_base_ms,
            backoff_max_ms: remote.backoff_max_ms,
            max_in_flight: remote.max_in_flight,
            alpha: ep.alpha,
            max_steps: ep.max_steps,
            frame_budget: ep.frame_budget,
            beta: DEFAULT_BETA,
            clip_eps: DEFAULT_CLIP_EPS,
            ladder: ConfidenceLadder::default().thresholds().to_vec(),
            numeric_cut: filter.numeric_cut,
            min_steps: filter.min_steps,
            seed: 0,
            parallel: 1,
            attempts: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text)
            .map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        self.episode()?;
        self.ladder()?;
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(UsageError(format!("clip_eps must be in (0, 1), got {}", self.clip_eps)));
        }
        if !self.beta.is_finite() || !self.numeric_cut.is_finite() {
            return Err(UsageError("beta and numeric_cut must be finite".into()));
        }
        if self.parallel == 0 || self.attempts == 0 {
            return Err(UsageError("parallel and attempts must be at least 1".into()));
        }
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(UsageError("timeout_secs must be positive".into()));
        }
        Ok(())
    }

    pub fn episode(&self) -> Result<EpisodeConfig, UsageError> {
        let cfg = EpisodeConfig {
            alpha: self.alpha,
            max_steps: self.max_steps,
            frame_budget: self.frame_budget,
        };
        cfg.validate(1).map_err(|e| UsageError(e.to_string()))?;
        Ok(cfg)
    }

    pub fn ladder(&self) -> Result<ConfidenceLadder, UsageError> {
        ConfidenceLadder::new(self.ladder.clone()).ok_or_else(|| {
            UsageError("ladder must be non-empty, strictly increasing and within [0, 1)".into())
        })
    }

    pub fn remote(&self) -> RemoteConfig {
        RemoteConfig {
            endpoint: self.endpoint.clone(),
            model: self.model.clone(),
            timeout_secs: self.timeout_secs,
            max_attempts: self.max_attempts,
            backoff_base_ms: self.backoff_base_ms,
            backoff_max_ms: self.backoff_max_ms,
            max_in_flight: self.max_in_flight,
        }
    }

    pub fn filter(&self) -> Result<FilterConfig, UsageError> {
        Ok(FilterConfig {
            beta: self.beta,
            numeric_cut: self.numeric_cut,
            min_steps: self.min_steps,
            ladder: self.ladder()?,
        })
    }

    pub fn eval(&self) -> Result<EvalConfig, UsageError> {
        Ok(EvalConfig {
            ladder: self.ladder()?,
            numeric_cut: self.numeric_cut,
        })
    }
}
