//! Experiment configuration with per-method, per-regime defaults.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::active::{ActiveConfig, ActiveError, BudgetSchedule, ModelConfig, Regime, Sampler};
use crate::data::{DataError, SyntheticSpec};
use crate::evidential::Aggregation;
use crate::losses::{LossError, LossWeights, Method, VatConfig};
use crate::trainer::{OptimizerConfig, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{field}: {message}")]
    Invalid {
        field: &'static str,
        message: String,
    },
    #[error("synthetic: {0}")]
    Synthetic(#[from] DataError),
    #[error("optimizer: {0}")]
    Optimizer(#[from] TrainError),
    #[error("vat: {0}")]
    Vat(#[from] LossError),
    #[error("schedule: {0}")]
    Schedule(#[from] ActiveError),
}

/// Dropout rate tuned per method, regime and sampler.
pub fn default_dropout(method: Method, regime: Regime, sampler: Sampler) -> f64 {
    match (method, regime, sampler) {
        (Method::Esup | Method::Epsu, _, _) => 0.5,
        (Method::Evat | Method::Enot, Regime::Low, Sampler::Random) => 0.20,
        (Method::Evat | Method::Enot, Regime::Low, Sampler::Au) => 0.25,
        (Method::Emt, Regime::Low, Sampler::Random) => 0.30,
        (Method::Emt, Regime::Low, Sampler::Au) => 0.20,
        (_, Regime::Mid, _) => 0.20,
        (_, Regime::Custom, _) => 0.5,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub sampler: Sampler,
    pub regime: Regime,
    /// Budget fractions for the custom regime.
    pub fractions: Option<Vec<f64>>,
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    /// Dataset file; when absent the synthetic spec is generated in memory.
    pub data: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub val_ratio: f64,
    pub aggregation: Aggregation,
    pub enforce_class_coverage: bool,
    pub hidden_dims: Vec<usize>,
    /// Falls back to the tuned per-method value.
    pub dropout_rate: Option<f64>,
    pub optimizer: OptimizerConfig,
    /// Falls back to the per-method trade-off weights.
    pub weights: Option<LossWeights>,
    pub vat: VatConfig,
    pub augment_strength: f64,
    pub emt_consistency_on_labelled: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            method: Method::Esup,
            sampler: Sampler::Random,
            regime: Regime::Low,
            fractions: None,
            seeds: vec![0],
            out_dir: None,
            data: None,
            synthetic: SyntheticSpec::default(),
            val_ratio: 7.0,
            aggregation: Aggregation::Mean,
            enforce_class_coverage: false,
            hidden_dims: ModelConfig::default().hidden_dims,
            dropout_rate: None,
            optimizer: train.optimizer,
            weights: None,
            vat: train.vat,
            augment_strength: train.augment_strength,
            emt_consistency_on_labelled: train.emt_consistency_on_labelled,
        }
    }
}

impl ExperimentConfig {
    /// Fills every defaulted field so the result is self-contained.
    pub fn resolved(mut self) -> Self {
        self.dropout_rate
            .get_or_insert(default_dropout(self.method, self.regime, self.sampler));
        self.weights
            .get_or_insert(LossWeights::for_method(self.method));
        if self.regime != Regime::Custom {
            self.fractions = None;
        }
        self
    }

    pub fn schedule(&self) -> Result<BudgetSchedule, ConfigError> {
        Ok(BudgetSchedule::for_regime(
            self.regime,
            self.fractions.clone(),
        )?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |field, message: String| Err(ConfigError::Invalid { field, message });
        if self.seeds.is_empty() {
            return invalid("seeds", "at least one seed is required".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return invalid("seeds", "seeds must be distinct".into());
        }
        if self.regime == Regime::Custom && self.fractions.is_none() {
            return invalid(
                "fractions",
                "the custom regime needs a fractions list".into(),
            );
        }
        self.schedule()?;
        if !(self.val_ratio > 0.0 && self.val_ratio.is_finite()) {
            return invalid(
                "val_ratio",
                format!("must be positive, got {}", self.val_ratio),
            );
        }
        if self.hidden_dims.contains(&0) {
            return invalid("hidden_dims", "layer widths must be positive".into());
        }
        if let Some(p) = self.dropout_rate {
            if !(0.0..1.0).contains(&p) {
                return invalid("dropout_rate", format!("{p} outside [0, 1)"));
            }
        }
        if let Some(w) = &self.weights {
            let all = [
                w.lambda_sup,
                w.lambda_cons,
                w.lambda_sup_1,
                w.lambda_sup_2,
                w.lambda_cons_l,
                w.lambda_cons_u,
            ];
            if all.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return invalid(
                    "weights",
                    "trade-off weights must be finite and non-negative".into(),
                );
            }
        }
        if !(self.augment_strength >= 0.0 && self.augment_strength.is_finite()) {
            return invalid(
                "augment_strength",
                format!("{} must be non-negative", self.augment_strength),
            );
        }
        if self.data.is_none() {
            self.synthetic.validate()?;
        }
        self.optimizer.validate()?;
        self.vat.validate()?;
        Ok(())
    }

    /// Protocol configuration of one seed.
    pub fn active_config(&self, seed: u64) -> Result<ActiveConfig, ConfigError> {
        let cfg = self.clone().resolved();
        Ok(ActiveConfig {
            method: cfg.method,
            sampler: cfg.sampler,
            schedule: cfg.schedule()?,
            val_ratio: cfg.val_ratio,
            aggregation: cfg.aggregation,
            enforce_class_coverage: cfg.enforce_class_coverage,
            model: ModelConfig {
                hidden_dims: cfg.hidden_dims.clone(),
                dropout_rate: cfg.dropout_rate.expect("resolved"),
            },
            train: TrainConfig {
                optimizer: cfg.optimizer,
                weights: cfg.weights.expect("resolved"),
                vat: cfg.vat,
                augment_strength: cfg.augment_strength,
                emt_consistency_on_labelled: cfg.emt_consistency_on_labelled,
            },
            seed,
        })
    }
}
