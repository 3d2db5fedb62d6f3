//! Declarative run configuration, serialized as flat JSON.
//!
//! A config written by `--dump-config` reproduces the identical run when
//! loaded back; unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::presets::{self, Experiment, Regime};
use crate::runner::Mode;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// "example1" or "example2".
    pub example: String,
    /// Constraint regime for example1: "nominal" or "tight".
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub regime: Option<String>,
    /// Oscillator damping for example2.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub epsilon: Option<f64>,
    /// "simultaneous", "independent" or "both".
    pub mode: String,
    pub n_e: usize,
    pub n_c: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub phi: Option<f64>,
    pub ts: f64,
    pub steps: usize,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] simul_ecmpc_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Invalid(format!(
                "unsupported schema version {}",
                self.schema_version
            )));
        }
        match self.example.as_str() {
            "example1" => {
                if !matches!(self.regime.as_deref(), Some("nominal") | Some("tight")) {
                    return Err(ConfigError::Invalid(
                        "example1 needs regime=nominal|tight".into(),
                    ));
                }
            }
            "example2" => {
                if self.epsilon.is_none() {
                    return Err(ConfigError::Invalid("example2 needs epsilon".into()));
                }
            }
            other => {
                return Err(ConfigError::Invalid(format!("unknown example {other:?}")));
            }
        }
        if !matches!(self.mode.as_str(), "simultaneous" | "independent" | "both") {
            return Err(ConfigError::Invalid(format!(
                "unknown mode {:?}",
                self.mode
            )));
        }
        if self.n_e < 1 || self.n_c < 1 {
            return Err(ConfigError::Invalid("horizons must be at least 1".into()));
        }
        if let Some(phi) = self.phi {
            if !(0.0..=1.0).contains(&phi) {
                return Err(ConfigError::Invalid(format!("phi {phi} outside [0,1]")));
            }
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN
        if !(self.ts > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "ts {} must be positive",
                self.ts
            )));
        }
        Ok(())
    }

    pub fn modes(&self) -> Vec<Mode> {
        match self.mode.as_str() {
            "simultaneous" => vec![Mode::Simultaneous],
            "independent" => vec![Mode::Independent],
            _ => vec![Mode::Simultaneous, Mode::Independent],
        }
    }

    pub fn effective_phi(&self) -> f64 {
        self.phi.unwrap_or_else(|| {
            if self.example == "example2" {
                presets::example2_phi_for(self.n_e)
            } else {
                0.5
            }
        })
    }

    pub fn experiment(&self) -> Result<Experiment, ConfigError> {
        self.validate()?;
        let phi = self.effective_phi();
        let exp = match self.example.as_str() {
            "example1" => {
                let regime = match self.regime.as_deref() {
                    Some("tight") => Regime::Tight,
                    _ => Regime::Nominal,
                };
                presets::example1(regime, self.n_e, self.n_c, phi, self.ts, self.seed)?
            }
            _ => presets::example2(
                self.epsilon.unwrap_or(0.1),
                self.n_e,
                self.n_c,
                phi,
                self.ts,
                self.seed,
            )?,
        };
        Ok(exp)
    }

    pub fn to_json(&self) -> Result<String, ConfigError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
