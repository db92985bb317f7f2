use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gat::DEFAULT_ATTN_DIM;
use crate::heads::{RegressorConfig, STAGE_WEIGHTS};
use crate::synthdata::GenConfig;
use crate::tca::{DEFAULT_HEADS, STAGES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    GatOnly,
    TcaOnly,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Self::Baseline, Self::GatOnly, Self::TcaOnly, Self::Full];

    pub fn uses_gat(self) -> bool {
        matches!(self, Self::GatOnly | Self::Full)
    }

    pub fn uses_tca(self) -> bool {
        matches!(self, Self::TcaOnly | Self::Full)
    }

    pub fn key(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::GatOnly => "gat_only",
            Self::TcaOnly => "tca_only",
            Self::Full => "full",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.key() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub batch_size: usize,
    /// GAT, TCA, regressor and loss log-variances.
    pub lr_trunk: f64,
    /// TAP and SAP heads.
    pub lr_heads: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub data: GenConfig,
    pub stage_weights: [f64; STAGES],
    /// Number of stages; fixed at 3 and recorded for provenance.
    pub stages: usize,
    pub attn_dim: usize,
    pub tca_heads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            epochs: 20,
            batch_size: 4,
            lr_trunk: 1e-3,
            lr_heads: 1e-4,
            adam: AdamConfig::default(),
            seed: 0,
            data: GenConfig::default(),
            stage_weights: STAGE_WEIGHTS,
            stages: STAGES,
            attn_dim: DEFAULT_ATTN_DIM,
            tca_heads: DEFAULT_HEADS,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.stages != STAGES {
            return Err(Error::invalid(format!("only {STAGES} stages are supported")));
        }
        if !(self.lr_trunk > 0.0 && self.lr_heads > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::invalid("Adam needs beta1, beta2 in [0, 1) and eps > 0"));
        }
        if !(a.weight_decay >= 0.0) {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        if self.stage_weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::invalid("stage weights must be positive"));
        }
        if self.attn_dim == 0 || self.tca_heads == 0 || self.data.dim % self.tca_heads != 0 {
            return Err(Error::invalid(format!(
                "attention sizes invalid: attn_dim {}, {} heads for D = {}",
                self.attn_dim, self.tca_heads, self.data.dim
            )));
        }
        self.data.validate()
    }

    pub fn regressor(&self) -> RegressorConfig {
        RegressorConfig {
            stage_weights: self.stage_weights,
            score_scale: self.data.score_range(),
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_keys_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(v.key().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.key()));
        }
        assert!("both".parse::<Variant>().is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"variant": "tca_only", "epochs": 3}"#).unwrap();
        assert_eq!(c.variant, Variant::TcaOnly);
        assert_eq!(c.batch_size, RunConfig::default().batch_size);
        c.validate().unwrap();
        assert!(RunConfig { batch_size: 0, ..c }.validate().is_err());
    }
}
