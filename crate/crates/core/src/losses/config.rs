use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Sft,
    Dpo,
    Dpop,
    Ipo,
    Slic,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Sft,
        LossKind::Dpo,
        LossKind::Dpop,
        LossKind::Ipo,
        LossKind::Slic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Sft => "sft",
            LossKind::Dpo => "dpo",
            LossKind::Dpop => "dpop",
            LossKind::Ipo => "ipo",
            LossKind::Slic => "slic",
        }
    }

    /// Whether the loss reads the frozen reference model.
    pub fn uses_reference(self) -> bool {
        matches!(self, LossKind::Dpo | LossKind::Dpop | LossKind::Ipo)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown loss kind {s:?}")))
    }
}

/// Loss selection and its scalars.
///
/// `lambda` weighs the preferred-likelihood penalty of DPOP; `tau` is the
/// IPO regularizer; `slic_reg_weight` weighs SLiC's cross-entropy term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub beta: f64,
    pub lambda: f64,
    pub tau: f64,
    pub slic_reg_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Dpop,
            beta: 0.3,
            lambda: 50.0,
            tau: 0.1,
            slic_reg_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.beta, self.lambda, self.tau, self.slic_reg_weight]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("loss scalars must be finite".into()));
        }
        if self.beta <= 0.0 {
            return Err(Error::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.slic_reg_weight < 0.0 {
            return Err(Error::Config(format!(
                "slic_reg_weight must be >= 0, got {}",
                self.slic_reg_weight
            )));
        }
        Ok(())
    }
}
