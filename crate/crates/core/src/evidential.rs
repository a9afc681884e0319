//! Closed-form evidential quantities for a single binary class head.
//!
//! Each head emits two logits `(f_pos, f_neg)` which are turned into the
//! parameters of a Beta prior over the Bernoulli class probability. The
//! prior's mean is the prediction, its expected entropy is the aleatoric
//! uncertainty used for acquisition, and its KL divergence from the uniform
//! Beta(1, 1) is the evidence regularizer.

use std::f64::consts::LN_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::special::{self, DomainError};

/// Logits are clamped to `[-LOGIT_CLAMP, LOGIT_CLAMP]` before exponentiation.
pub const LOGIT_CLAMP: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvidentialError {
    #[error("non-finite logit ({0})")]
    NonFiniteLogit(f64),
    #[error("Beta parameters must be positive and finite, got ({alpha}, {beta})")]
    InvalidParams { alpha: f64, beta: f64 },
    #[error("cannot aggregate an empty sequence of uncertainties")]
    EmptyAggregation,
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Parameters `(alpha, beta)` of the Beta prior of one class head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    alpha: f64,
    beta: f64,
}

impl BetaParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, EvidentialError> {
        let valid = |v: f64| v.is_finite() && v > 0.0;
        if valid(alpha) && valid(beta) {
            Ok(Self { alpha, beta })
        } else {
            Err(EvidentialError::InvalidParams { alpha, beta })
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Total evidence `E = alpha + beta`.
    pub fn total(&self) -> f64 {
        self.alpha + self.beta
    }
}

/// Predictive mean of a Beta prior: `(p_pos, p_neg)` with `p_pos + p_neg = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassPredictor {
    pub p_pos: f64,
    pub p_neg: f64,
}

/// One-hot encoding of a binary label: `[1, 0]` for positive, `[0, 1]` for negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelPair {
    pub y_pos: u8,
    pub y_neg: u8,
}

impl LabelPair {
    pub const POSITIVE: LabelPair = LabelPair { y_pos: 1, y_neg: 0 };
    pub const NEGATIVE: LabelPair = LabelPair { y_pos: 0, y_neg: 1 };

    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Self::POSITIVE
        } else {
            Self::NEGATIVE
        }
    }

    pub fn is_positive(&self) -> bool {
        self.y_pos == 1
    }
}

/// Maps a pair of logits to Beta parameters: `exp(clamp(f, -10, 10)) + 1`.
pub fn evidence_from_logits(f_pos: f64, f_neg: f64) -> Result<BetaParams, EvidentialError> {
    for f in [f_pos, f_neg] {
        if !f.is_finite() {
            return Err(EvidentialError::NonFiniteLogit(f));
        }
    }
    let map = |f: f64| f.clamp(-LOGIT_CLAMP, LOGIT_CLAMP).exp() + 1.0;
    Ok(BetaParams {
        alpha: map(f_pos),
        beta: map(f_neg),
    })
}

pub fn predictive_mean(bp: BetaParams) -> ClassPredictor {
    let total = bp.total();
    ClassPredictor {
        p_pos: bp.alpha / total,
        p_neg: bp.beta / total,
    }
}

/// Expected binary entropy (in bits) of `p ~ Beta(alpha, beta)`:
///
/// `AU = (1/ln 2) Σ_{γ ∈ {α, β}} (γ/E) (ψ(E + 1) − ψ(γ + 1))`.
pub fn aleatoric_uncertainty(bp: BetaParams) -> f64 {
    let total = bp.total();
    let psi_total = special::digamma_unchecked(total + 1.0);
    let term = |g: f64| (g / total) * (psi_total - special::digamma_unchecked(g + 1.0));
    ((term(bp.alpha) + term(bp.beta)) / LN_2).clamp(0.0, 1.0)
}

/// Replaces the true-class evidence by 1: `τ̃ = y + (1 − y) ⊙ τ`.
pub fn adjust_params(bp: BetaParams, y: LabelPair) -> BetaParams {
    let adjust = |label: u8, value: f64| {
        let label = f64::from(label);
        label + (1.0 - label) * value
    };
    BetaParams {
        alpha: adjust(y.y_pos, bp.alpha),
        beta: adjust(y.y_neg, bp.beta),
    }
}

/// `KL(Beta(a, b) ‖ Beta(1, 1))` in closed form:
///
/// `ln Γ(a + b) − ln Γ(a) − ln Γ(b) + Σ_{γ ∈ {a, b}} (γ − 1)(ψ(γ) − ψ(a + b))`.
pub fn kl_to_uniform(alpha: f64, beta: f64) -> Result<f64, EvidentialError> {
    let total = alpha + beta;
    let log_norm = special::lgamma(total)? - special::lgamma(alpha)? - special::lgamma(beta)?;
    let psi_total = special::digamma(total)?;
    let cross = (alpha - 1.0) * (special::digamma(alpha)? - psi_total)
        + (beta - 1.0) * (special::digamma(beta)? - psi_total);
    Ok((log_norm + cross).max(0.0))
}

/// How label-level uncertainties are combined into one image-level score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Sum,
    Max,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Mean => "mean",
            Aggregation::Sum => "sum",
            Aggregation::Max => "max",
        })
    }
}

impl FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "sum" => Ok(Aggregation::Sum),
            "max" => Ok(Aggregation::Max),
            other => Err(format!(
                "unknown aggregation '{other}' (expected mean, sum or max)"
            )),
        }
    }
}

pub fn image_uncertainty(per_class_au: &[f64], mode: Aggregation) -> Result<f64, EvidentialError> {
    if per_class_au.is_empty() {
        return Err(EvidentialError::EmptyAggregation);
    }
    let sum: f64 = per_class_au.iter().sum();
    Ok(match mode {
        Aggregation::Mean => sum / per_class_au.len() as f64,
        Aggregation::Sum => sum,
        Aggregation::Max => per_class_au
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max),
    })
}
