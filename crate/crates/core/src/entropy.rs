//! Entropy functions of the target-marginal divergence and their convex
//! conjugates.
//!
//! Only the conjugate enters the training objective, through the terminal
//! term `Ψ*(v(1, y))` of the value loss. Three closed-form families are
//! supported:
//!
//! | kind                | `Ψ*(x)`                      | divergence            |
//! |---------------------|------------------------------|-----------------------|
//! | `indicator`         | `x`                          | hard marginal (EOT)   |
//! | `kl`                | `c·e^{x/c} − c`              | `c·KL`                |
//! | `softplus`          | `2·log(1 + e^x) − 2·log 2`   | softplus-type         |

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

pub const DEFAULT_KL_SCALE: f64 = 5.0;

fn default_kl_scale() -> f64 {
    DEFAULT_KL_SCALE
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EntropySpec {
    /// Convex indicator of `{1}`; the problem reduces to balanced EOT.
    Indicator,
    /// `c·KL`, conjugate `c·e^{x/c} − c`.
    #[serde(rename = "kl")]
    ScaledKl {
        #[serde(default = "default_kl_scale")]
        scale: f64,
    },
    #[serde(rename = "softplus")]
    SoftplusConjugate,
}

impl Default for EntropySpec {
    fn default() -> Self {
        EntropySpec::Indicator
    }
}

impl EntropySpec {
    pub fn validate(&self) -> Result<()> {
        if let EntropySpec::ScaledKl { scale } = *self {
            if !(scale.is_finite() && scale > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "kl scale must be positive and finite, got {scale}"
                )));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            EntropySpec::Indicator => "indicator",
            EntropySpec::ScaledKl { .. } => "kl",
            EntropySpec::SoftplusConjugate => "softplus",
        }
    }

    /// `Ψ*(x)`.
    pub fn conjugate(&self, x: f64) -> Result<f64> {
        ensure_finite("entropy conjugate input", x)?;
        self.validate()?;
        Ok(self.conjugate_unchecked(x))
    }

    /// `Ψ*'(x)`.
    pub fn conjugate_grad(&self, x: f64) -> Result<f64> {
        ensure_finite("entropy conjugate input", x)?;
        self.validate()?;
        Ok(self.conjugate_grad_unchecked(x))
    }

    pub(crate) fn conjugate_unchecked(&self, x: f64) -> f64 {
        match *self {
            EntropySpec::Indicator => x,
            EntropySpec::ScaledKl { scale } => scale * (x / scale).exp_m1(),
            EntropySpec::SoftplusConjugate => 2.0 * softplus(x) - 2.0 * std::f64::consts::LN_2,
        }
    }

    pub(crate) fn conjugate_grad_unchecked(&self, x: f64) -> f64 {
        match *self {
            EntropySpec::Indicator => 1.0,
            EntropySpec::ScaledKl { scale } => (x / scale).exp(),
            EntropySpec::SoftplusConjugate => 2.0 * sigmoid(x),
        }
    }
}

/// `log(1 + e^x)` without overflow for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Free-function form of [`EntropySpec::conjugate`].
pub fn conjugate_eval(spec: &EntropySpec, x: f64) -> Result<f64> {
    spec.conjugate(x)
}

/// Free-function form of [`EntropySpec::conjugate_grad`].
pub fn conjugate_grad(spec: &EntropySpec, x: f64) -> Result<f64> {
    spec.conjugate_grad(x)
}
