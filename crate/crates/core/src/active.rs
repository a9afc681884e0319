//! Pool-based annotation protocol: pool bookkeeping, acquisition by
//! aleatoric uncertainty or at random, validation growth, and the per-round
//! reset/train/evaluate/select cycle.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Split};
use crate::evidential::{
    aleatoric_uncertainty, image_uncertainty, Aggregation, BetaParams, EvidentialError,
};
use crate::losses::Method;
use crate::metrics::MetricsBundle;
use crate::model::{init, ClassifierSpec, ModelError, ModelState, ParamSet};
use crate::trainer::{
    derive_seed, evaluate, predict_beta, train_round, EpochRecord, Flavor, RoundPools, TrainConfig,
    TrainError,
};

#[derive(Debug, Error)]
pub enum ActiveError {
    #[error("budget schedule must be a strictly increasing sequence in (0, 1]: {0:?}")]
    InvalidSchedule(Vec<f64>),
    #[error("validation ratio must be positive, got {0}")]
    InvalidRatio(f64),
    #[error("budget of {needed} samples exceeds the available {available}")]
    BudgetExceedsCorpus { needed: usize, available: usize },
    #[error("cannot select {k} samples from a pool of {available}")]
    SelectionTooLarge { k: usize, available: usize },
    #[error("unlabelled pool is empty")]
    EmptyPool,
    #[error("need {needed} more validation samples, only {available} unlabelled remain")]
    InsufficientUnlabelled { needed: usize, available: usize },
    #[error("round {round} failed: {source}")]
    Round { round: usize, source: TrainError },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Evidential(#[from] EvidentialError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    Au,
    Random,
}

impl fmt::Display for Sampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sampler::Au => "au",
            Sampler::Random => "random",
        })
    }
}

impl FromStr for Sampler {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "au" => Ok(Sampler::Au),
            "random" => Ok(Sampler::Random),
            other => Err(format!("unknown sampler '{other}' (expected au or random)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Low,
    Mid,
    Custom,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Low => "low",
            Regime::Mid => "mid",
            Regime::Custom => "custom",
        })
    }
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "low" => Ok(Regime::Low),
            "mid" => Ok(Regime::Mid),
            "custom" => Ok(Regime::Custom),
            other => Err(format!(
                "unknown regime '{other}' (expected low, mid or custom)"
            )),
        }
    }
}

/// Budget fractions of the training pool, one per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetSchedule {
    pub regime: Regime,
    pub fractions: Vec<f64>,
}

impl BudgetSchedule {
    pub fn low() -> Self {
        Self {
            regime: Regime::Low,
            fractions: vec![0.02, 0.025, 0.03, 0.035, 0.04, 0.045, 0.05],
        }
    }

    pub fn mid() -> Self {
        Self {
            regime: Regime::Mid,
            fractions: vec![0.05, 0.06, 0.07, 0.08, 0.09, 0.10],
        }
    }

    pub fn custom(fractions: Vec<f64>) -> Result<Self, ActiveError> {
        let s = Self {
            regime: Regime::Custom,
            fractions,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn for_regime(regime: Regime, custom: Option<Vec<f64>>) -> Result<Self, ActiveError> {
        match regime {
            Regime::Low => Ok(Self::low()),
            Regime::Mid => Ok(Self::mid()),
            Regime::Custom => Self::custom(custom.unwrap_or_default()),
        }
    }

    pub fn validate(&self) -> Result<(), ActiveError> {
        let ok = !self.fractions.is_empty()
            && self.fractions.iter().all(|&f| f > 0.0 && f <= 1.0)
            && self.fractions.windows(2).all(|w| w[0] < w[1]);
        if ok {
            Ok(())
        } else {
            Err(ActiveError::InvalidSchedule(self.fractions.clone()))
        }
    }

    /// Labelled-set size at round `r`: `⌊fraction_r · pool⌋`.
    pub fn target(&self, round: usize, pool_size: usize) -> usize {
        // the tolerance keeps decimal fractions such as 0.035 from flooring one short
        (self.fractions[round] * pool_size as f64 + 1e-9).floor() as usize
    }
}

/// Partition of the training corpus for the current round. Index lists are
/// dataset row indices, kept sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolState {
    pub labelled: Vec<usize>,
    pub unlabelled: Vec<usize>,
    pub validation: Vec<usize>,
    pub round: usize,
}

impl PoolState {
    pub fn corpus_size(&self) -> usize {
        self.labelled.len() + self.unlabelled.len() + self.validation.len()
    }

    fn take_from_unlabelled(&mut self, picked: &[usize]) -> Vec<usize> {
        let mut moved: Vec<usize> = picked.to_vec();
        moved.sort_unstable();
        self.unlabelled.retain(|i| moved.binary_search(i).is_err());
        moved
    }

    fn merge(into: &mut Vec<usize>, more: &[usize]) {
        into.extend_from_slice(more);
        into.sort_unstable();
    }
}

/// `⌈L_T / ratio⌉`.
pub fn validation_target(labelled: usize, ratio: f64) -> usize {
    (labelled as f64 / ratio - 1e-9).ceil().max(0.0) as usize
}

/// Random initial labelled and validation sets drawn from `corpus` (the
/// training pool row indices); everything else stays unlabelled.
pub fn init_pools(
    corpus: &[usize],
    schedule: &BudgetSchedule,
    val_ratio: f64,
    seed: u64,
) -> Result<PoolState, ActiveError> {
    schedule.validate()?;
    if !(val_ratio > 0.0 && val_ratio.is_finite()) {
        return Err(ActiveError::InvalidRatio(val_ratio));
    }
    let n_labelled = schedule.target(0, corpus.len());
    let n_validation = validation_target(n_labelled, val_ratio);
    if n_labelled == 0 || n_labelled + n_validation > corpus.len() {
        return Err(ActiveError::BudgetExceedsCorpus {
            needed: n_labelled.max(1) + n_validation,
            available: corpus.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = sample(&mut rng, corpus.len(), n_labelled + n_validation).into_vec();
    let mut labelled: Vec<usize> = picked[..n_labelled].iter().map(|&i| corpus[i]).collect();
    let mut validation: Vec<usize> = picked[n_labelled..].iter().map(|&i| corpus[i]).collect();
    labelled.sort_unstable();
    validation.sort_unstable();
    let mut unlabelled: Vec<usize> = corpus.to_vec();
    unlabelled.sort_unstable();
    unlabelled
        .retain(|i| labelled.binary_search(i).is_err() && validation.binary_search(i).is_err());
    Ok(PoolState {
        labelled,
        unlabelled,
        validation,
        round: 0,
    })
}

/// Keeps drawing random unlabelled samples into the labelled set until every
/// class that has a positive anywhere in the training corpus is covered.
/// Returns the number of extra samples annotated.
pub fn complete_class_coverage(pool: &mut PoolState, data: &Dataset, seed: u64) -> usize {
    let k = data.n_classes();
    let present = |rows: &[usize]| -> Vec<bool> {
        (0..k)
            .map(|c| rows.iter().any(|&r| data.labels().get(r, c) == 1))
            .collect()
    };
    let reachable: Vec<bool> = {
        let mut all = pool.labelled.clone();
        all.extend_from_slice(&pool.unlabelled);
        present(&all)
    };
    let mut covered = present(&pool.labelled);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extra = Vec::new();
    let mut candidates = pool.unlabelled.clone();
    while covered.iter().zip(&reachable).any(|(c, r)| *r && !c) && !candidates.is_empty() {
        let i = candidates.swap_remove(rng.random_range(0..candidates.len()));
        for (c, cov) in covered.iter_mut().enumerate() {
            *cov |= data.labels().get(i, c) == 1;
        }
        extra.push(i);
    }
    let moved = pool.take_from_unlabelled(&extra);
    PoolState::merge(&mut pool.labelled, &moved);
    moved.len()
}

/// Classes with a positive in the training corpus but none in the labelled set.
pub fn uncovered_classes(pool: &PoolState, data: &Dataset) -> Vec<usize> {
    (0..data.n_classes())
        .filter(|&c| {
            let has = |rows: &[usize]| rows.iter().any(|&r| data.labels().get(r, c) == 1);
            !has(&pool.labelled) && (has(&pool.unlabelled) || has(&pool.validation))
        })
        .collect()
}

/// Acquisition scores for the unlabelled pool, aligned with `pool.unlabelled`.
#[allow(clippy::too_many_arguments)]
pub fn score_pool(
    spec: &ClassifierSpec,
    nets: &[ParamSet],
    pool: &PoolState,
    data: &Dataset,
    sampler: Sampler,
    aggregation: Aggregation,
    seed: u64,
) -> Result<Vec<f64>, ActiveError> {
    if pool.unlabelled.is_empty() {
        return Err(ActiveError::EmptyPool);
    }
    match sampler {
        Sampler::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((0..pool.unlabelled.len())
                .map(|_| rng.random::<f64>())
                .collect())
        }
        Sampler::Au => {
            let k = spec.num_classes;
            let (alpha, beta) = predict_beta(spec, nets, data, &pool.unlabelled)?;
            let mut per_class = vec![0.0; k];
            let mut scores = Vec::with_capacity(pool.unlabelled.len());
            for row in 0..pool.unlabelled.len() {
                for (c, au) in per_class.iter_mut().enumerate() {
                    let j = row * k + c;
                    *au = aleatoric_uncertainty(BetaParams::new(alpha[j], beta[j])?);
                }
                scores.push(image_uncertainty(&per_class, aggregation)?);
            }
            Ok(scores)
        }
    }
}

/// Indices of the `k` highest-scoring entries, ties broken by ascending index,
/// returned in ascending index order.
pub fn select_for_annotation(scored: &[(usize, f64)], k: usize) -> Result<Vec<usize>, ActiveError> {
    if k > scored.len() {
        return Err(ActiveError::SelectionTooLarge {
            k,
            available: scored.len(),
        });
    }
    let mut order: Vec<&(usize, f64)> = scored.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut picked: Vec<usize> = order[..k].iter().map(|p| p.0).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Moves random unlabelled samples into validation until `L_V = ⌈L_T / ratio⌉`.
pub fn grow_validation(
    pool: &mut PoolState,
    val_ratio: f64,
    seed: u64,
) -> Result<usize, ActiveError> {
    if !(val_ratio > 0.0 && val_ratio.is_finite()) {
        return Err(ActiveError::InvalidRatio(val_ratio));
    }
    let target = validation_target(pool.labelled.len(), val_ratio);
    let needed = target.saturating_sub(pool.validation.len());
    if needed == 0 {
        return Ok(0);
    }
    if needed > pool.unlabelled.len() {
        return Err(ActiveError::InsufficientUnlabelled {
            needed,
            available: pool.unlabelled.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: Vec<usize> = sample(&mut rng, pool.unlabelled.len(), needed)
        .into_iter()
        .map(|i| pool.unlabelled[i])
        .collect();
    let moved = pool.take_from_unlabelled(&picked);
    PoolState::merge(&mut pool.validation, &moved);
    Ok(moved.len())
}

/// Network shape apart from the data-determined input and output widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![256, 128],
            dropout_rate: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveConfig {
    pub method: Method,
    pub sampler: Sampler,
    pub schedule: BudgetSchedule,
    pub val_ratio: f64,
    pub aggregation: Aggregation,
    pub enforce_class_coverage: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl ActiveConfig {
    pub fn new(method: Method, sampler: Sampler, seed: u64) -> Self {
        Self {
            method,
            sampler,
            schedule: BudgetSchedule::low(),
            val_ratio: 7.0,
            aggregation: Aggregation::Mean,
            enforce_class_coverage: false,
            model: ModelConfig::default(),
            train: TrainConfig::for_method(method),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub budget_fraction: f64,
    pub labelled: usize,
    pub unlabelled: usize,
    pub validation: usize,
    pub method: Method,
    pub sampler: Sampler,
    /// Weights used for pool scoring, chosen on validation AUROC.
    pub model_choice: Flavor,
    /// Weights whose test metrics are reported (the better of the two).
    pub test_flavor: Flavor,
    pub epochs_run: usize,
    pub val_auroc: f64,
    pub test: MetricsBundle,
    /// Samples annotated at the end of this round (empty after the last).
    pub selected: Vec<usize>,
}

/// Identifies a (method, sampler) combination, written `method+sampler`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RunKey {
    pub method: Method,
    pub sampler: Sampler,
}

impl fmt::Display for RunKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}", self.method, self.sampler)
    }
}

impl FromStr for RunKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (m, smp) = s
            .split_once('+')
            .ok_or_else(|| format!("expected method+sampler, got '{s}'"))?;
        Ok(Self {
            method: m.parse()?,
            sampler: smp.parse()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub sampler: Sampler,
    pub seed: u64,
    pub rounds: Vec<RoundReport>,
}

impl RunRecord {
    pub fn key(&self) -> RunKey {
        RunKey {
            method: self.method,
            sampler: self.sampler,
        }
    }
}

/// Progress notifications emitted while a run executes.
#[derive(Debug, Clone, Copy)]
pub enum RunEvent<'a> {
    /// Pool partition at the start of a round, before training.
    Pools(&'a PoolState),
    Epoch(&'a EpochRecord),
    Round(&'a RoundReport),
}

/// Runs every budget round of `cfg` on `data`, reporting progress to
/// `observer` as it goes so that partial results survive a failure.
pub fn run_active_learning(
    cfg: &ActiveConfig,
    data: &Dataset,
    observer: &mut dyn FnMut(RunEvent<'_>),
) -> Result<RunRecord, ActiveError> {
    cfg.schedule.validate()?;
    let corpus = data.indices(Split::TrainPool);
    let test = data.indices(Split::Test);
    let spec = ClassifierSpec::new(
        data.n_features(),
        cfg.model.hidden_dims.clone(),
        data.n_classes(),
        cfg.model.dropout_rate,
    );
    let mut nets: Vec<ModelState> = (0..cfg.method.network_count())
        .map(|i| init(&spec, derive_seed(cfg.seed, &[10, i as u64])))
        .collect::<Result<_, _>>()?;

    let mut pool = init_pools(
        &corpus,
        &cfg.schedule,
        cfg.val_ratio,
        derive_seed(cfg.seed, &[20]),
    )?;
    if cfg.enforce_class_coverage {
        let extra = complete_class_coverage(&mut pool, data, derive_seed(cfg.seed, &[21]));
        if extra > 0 {
            log::info!("class coverage required {extra} extra initial annotations");
            grow_validation(&mut pool, cfg.val_ratio, derive_seed(cfg.seed, &[22]))?;
        }
    } else {
        let missing = uncovered_classes(&pool, data);
        if !missing.is_empty() {
            log::warn!("initial labelled set has no positives for classes {missing:?}");
        }
    }

    let mut rounds = Vec::with_capacity(cfg.schedule.fractions.len());
    for round in 0..cfg.schedule.fractions.len() {
        pool.round = round;
        observer(RunEvent::Pools(&pool));
        for net in nets.iter_mut() {
            net.reset_to_snapshot();
        }
        let pools = RoundPools {
            labelled: &pool.labelled,
            unlabelled: &pool.unlabelled,
            validation: &pool.validation,
        };
        let round_seed = derive_seed(cfg.seed, &[30, round as u64]);
        let trained = train_round(
            cfg.method, &mut nets, data, pools, &cfg.train, round, round_seed,
        )
        .map_err(|source| ActiveError::Round { round, source })?;
        for record in &trained.epochs {
            observer(RunEvent::Epoch(record));
        }

        let raw = evaluate(&spec, &trained.best_raw.params, data, &test)?;
        let ema = evaluate(&spec, &trained.best_ema.params, data, &test)?;
        let (test_flavor, test_metrics) = if ema.metrics.macro_auroc > raw.metrics.macro_auroc {
            (Flavor::Ema, ema.metrics)
        } else {
            (Flavor::Raw, raw.metrics)
        };
        let model_choice = trained.preferred();

        let mut selected = Vec::new();
        if round + 1 < cfg.schedule.fractions.len() {
            let target = cfg.schedule.target(round + 1, corpus.len());
            let k = target.saturating_sub(pool.labelled.len());
            if k > 0 {
                let scores = score_pool(
                    &spec,
                    &trained.checkpoint(model_choice).params,
                    &pool,
                    data,
                    cfg.sampler,
                    cfg.aggregation,
                    derive_seed(cfg.seed, &[40, round as u64]),
                )?;
                let scored: Vec<(usize, f64)> =
                    pool.unlabelled.iter().copied().zip(scores).collect();
                selected = select_for_annotation(&scored, k)?;
            }
        }

        let report = RoundReport {
            round,
            budget_fraction: cfg.schedule.fractions[round],
            labelled: pool.labelled.len(),
            unlabelled: pool.unlabelled.len(),
            validation: pool.validation.len(),
            method: cfg.method,
            sampler: cfg.sampler,
            model_choice,
            test_flavor,
            epochs_run: trained.epochs.len(),
            val_auroc: trained.checkpoint(model_choice).val_auroc,
            test: test_metrics,
            selected: selected.clone(),
        };
        log::info!(
            "{}+{} seed {} round {} ({:.1}%): test macro AUROC {:.4} after {} epochs",
            cfg.method,
            cfg.sampler,
            cfg.seed,
            round,
            100.0 * report.budget_fraction,
            report.test.macro_auroc,
            report.epochs_run
        );
        observer(RunEvent::Round(&report));
        rounds.push(report);

        if !selected.is_empty() {
            let moved = pool.take_from_unlabelled(&selected);
            PoolState::merge(&mut pool.labelled, &moved);
            grow_validation(
                &mut pool,
                cfg.val_ratio,
                derive_seed(cfg.seed, &[50, round as u64]),
            )?;
        }
    }
    Ok(RunRecord {
        method: cfg.method,
        sampler: cfg.sampler,
        seed: cfg.seed,
        rounds,
    })
}
