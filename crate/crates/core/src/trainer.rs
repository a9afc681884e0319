//! One annotation round of training: Adam with L2 weight decay, plateau LR
//! decay and early stopping on validation loss, EMA maintenance, and
//! checkpoint selection on validation AUROC.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::data::{augment_batch, Dataset, LabelMatrix};
use crate::evidential::{evidence_from_logits, EvidentialError};
use crate::losses::{
    anneal_coefficient, emt_loss, enot_loss, epsu_loss, esup_on_tape, evat_loss, vat_perturbation,
    Labelled, LossError, LossWeights, Method, PassSeeds, TapeNet, VatConfig, Views,
};
use crate::metrics::{MetricsBundle, MetricsError};
use crate::model::{ema_blend, forward, ClassifierSpec, Mode, ModelError, ModelState, ParamSet};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
    #[error("labelled pool is empty")]
    EmptyLabelled,
    #[error("validation pool is empty")]
    EmptyValidation,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{method} expects {expected} networks, got {got}")]
    NetworkCount {
        method: Method,
        expected: usize,
        got: usize,
    },
    #[error("non-finite gradient for {param} at epoch {epoch}")]
    NonFiniteGradient { param: String, epoch: usize },
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Evidential(#[from] EvidentialError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Decay of the reporting EMA copy kept for every method.
    pub ema_decay: f64,
    /// Decay of the eMT teacher.
    pub teacher_ema_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-5,
            lr_decay_factor: 0.1,
            lr_patience: 5,
            early_stop_patience: 15,
            max_epochs: 100,
            batch_size: 64,
            ema_decay: 0.999,
            teacher_ema_decay: 0.91,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("epsilon", self.epsilon),
            ("lr_decay_factor", self.lr_decay_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TrainError::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        let unit = [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("ema_decay", self.ema_decay),
            ("teacher_ema_decay", self.teacher_ema_decay),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(TrainError::InvalidConfig(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "weight_decay = {}",
                self.weight_decay
            )));
        }
        let counts = [
            ("lr_patience", self.lr_patience),
            ("early_stop_patience", self.early_stop_patience),
            ("max_epochs", self.max_epochs),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(TrainError::InvalidConfig(format!(
                    "{name} must be positive"
                )));
            }
        }
        Ok(())
    }
}

/// First and second moment estimates for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: i32,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }
}

/// One bias-corrected Adam update with L2 weight decay added to the gradient.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    cfg: &OptimizerConfig,
) -> Result<(), TrainError> {
    if grads.len() != params.tensors().len()
        || grads
            .iter()
            .zip(params.tensors())
            .any(|(g, p)| g.shape() != p.shape())
    {
        return Err(TrainError::Model(ModelError::Incongruent));
    }
    if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
        return Err(TrainError::NonFiniteGradient {
            param: params.names()[i].clone(),
            epoch: 0,
        });
    }
    state.step += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.step);
    let c2 = 1.0 - cfg.beta2.powi(state.step);
    for (((p, g), m), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let g = gv + cfg.weight_decay * *pv;
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * g;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * g * g;
            *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Everything about a round's training apart from data and model state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub weights: LossWeights,
    pub vat: VatConfig,
    /// Strength of the feature augmentation applied to every training input.
    pub augment_strength: f64,
    /// Whether eMT consistency also covers labelled inputs.
    pub emt_consistency_on_labelled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_method(Method::Esup)
    }
}

impl TrainConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            weights: LossWeights::for_method(method),
            vat: VatConfig::default(),
            augment_strength: 0.3,
            emt_consistency_on_labelled: true,
        }
    }
}

/// Index sets used by one round.
#[derive(Debug, Clone, Copy)]
pub struct RoundPools<'a> {
    pub labelled: &'a [usize],
    pub unlabelled: &'a [usize],
    pub validation: &'a [usize],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub round: usize,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auroc_raw: f64,
    pub val_auroc_ema: f64,
}

/// Which copy of the weights a prediction uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    Raw,
    Ema,
}

impl std::fmt::Display for Flavor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Flavor::Raw => "raw",
            Flavor::Ema => "ema",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// One parameter set per network.
    pub params: Vec<ParamSet>,
    pub epoch: usize,
    pub val_auroc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedRound {
    pub best_raw: Checkpoint,
    pub best_ema: Checkpoint,
    pub epochs: Vec<EpochRecord>,
}

impl TrainedRound {
    /// Flavor with the higher validation AUROC; raw wins ties.
    pub fn preferred(&self) -> Flavor {
        if self.best_ema.val_auroc > self.best_raw.val_auroc {
            Flavor::Ema
        } else {
            Flavor::Raw
        }
    }

    pub fn checkpoint(&self, flavor: Flavor) -> &Checkpoint {
        match flavor {
            Flavor::Raw => &self.best_raw,
            Flavor::Ema => &self.best_ema,
        }
    }
}

/// Mixes a base seed with stream tags into an independent seed.
pub fn derive_seed(base: u64, stream: &[u64]) -> u64 {
    let mut h = base ^ 0x5851_F42D_4C95_7F2D;
    for &s in stream {
        h = (h ^ s).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        h ^= h >> 29;
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 32;
    }
    h
}

const PREDICT_CHUNK: usize = 2048;

/// Beta parameters of the ensemble of `nets` on the given rows (eval mode),
/// as row-major `rows × K` buffers. With several networks the α and β of
/// the members are averaged.
pub fn predict_beta(
    spec: &ClassifierSpec,
    nets: &[ParamSet],
    data: &Dataset,
    rows: &[usize],
) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    let k = spec.num_classes;
    let mut alpha = vec![0.0; rows.len() * k];
    let mut beta = vec![0.0; rows.len() * k];
    let share = 1.0 / nets.len() as f64;
    for (c, chunk) in rows.chunks(PREDICT_CHUNK).enumerate() {
        let x = data.gather(chunk);
        let offset = c * PREDICT_CHUNK * k;
        for net in nets {
            let logits = forward(spec, net, &x, Mode::Eval)?;
            for (j, pair) in logits.data().chunks_exact(2).enumerate() {
                let bp = evidence_from_logits(pair[0], pair[1])?;
                alpha[offset + j] += share * bp.alpha();
                beta[offset + j] += share * bp.beta();
            }
        }
    }
    Ok((alpha, beta))
}

/// Per-class positive probabilities `scores[k][i]` and their metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub scores: Vec<Vec<f64>>,
    pub metrics: MetricsBundle,
}

/// Eval-mode predictive means on `rows` scored against their labels.
pub fn evaluate(
    spec: &ClassifierSpec,
    nets: &[ParamSet],
    data: &Dataset,
    rows: &[usize],
) -> Result<Evaluation, TrainError> {
    if rows.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let k = spec.num_classes;
    let (alpha, beta) = predict_beta(spec, nets, data, rows)?;
    let mut scores = vec![Vec::with_capacity(rows.len()); k];
    for (j, (a, b)) in alpha.iter().zip(&beta).enumerate() {
        scores[j % k].push(a / (a + b));
    }
    let labels: Vec<Vec<u8>> = (0..k)
        .map(|c| rows.iter().map(|&r| data.labels().get(r, c)).collect())
        .collect();
    let metrics = MetricsBundle::compute(&scores, &labels)?;
    Ok(Evaluation { scores, metrics })
}

/// Supervised evidential loss at full KL weight, averaged over networks.
fn validation_loss(
    spec: &ClassifierSpec,
    nets: &[ParamSet],
    x: &Tensor,
    y: &LabelMatrix,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for net in nets {
        let mut tape = Tape::new();
        let handle = TapeNet::new(&mut tape, spec, net, false);
        let logits = handle.logits(&mut tape, x, Mode::Eval)?;
        let loss = esup_on_tape(&mut tape, logits, y, 1.0)?;
        total += tape.value(loss).data()[0];
    }
    Ok(total / nets.len() as f64)
}

fn validation_auroc(
    spec: &ClassifierSpec,
    nets: &[ParamSet],
    data: &Dataset,
    rows: &[usize],
) -> Result<f64, TrainError> {
    match evaluate(spec, nets, data, rows) {
        Ok(e) => Ok(e.metrics.macro_auroc),
        Err(TrainError::Metrics(MetricsError::NoEvaluableClass)) => {
            log::warn!("no validation class has both labels; AUROC taken as 0.5");
            Ok(0.5)
        }
        Err(e) => Err(e),
    }
}

/// Cycles through a seeded shuffle of the unlabelled pool.
struct UnlabelledStream<'a> {
    pool: &'a [usize],
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl<'a> UnlabelledStream<'a> {
    fn new(pool: &'a [usize], seed: u64) -> Self {
        Self {
            pool,
            order: Vec::new(),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.pool.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order = self.pool.to_vec();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

struct Plateau {
    best: f64,
    since_best: usize,
    since_decay: usize,
}

impl Plateau {
    fn new() -> Self {
        Self {
            best: f64::INFINITY,
            since_best: 0,
            since_decay: 0,
        }
    }

    /// Records a validation loss; returns whether the LR should decay now.
    fn observe(&mut self, loss: f64, patience: usize) -> bool {
        if loss < self.best {
            self.best = loss;
            self.since_best = 0;
            self.since_decay = 0;
            return false;
        }
        self.since_best += 1;
        self.since_decay += 1;
        if self.since_decay >= patience {
            self.since_decay = 0;
            true
        } else {
            false
        }
    }
}

struct Batch {
    x: Tensor,
    view: Tensor,
    y: LabelMatrix,
    x_u: Option<Tensor>,
    view_u: Option<Tensor>,
}

/// Trains `nets` (one per network of `method`, already reset) for one round.
#[allow(clippy::too_many_arguments)]
pub fn train_round(
    method: Method,
    nets: &mut [ModelState],
    data: &Dataset,
    pools: RoundPools<'_>,
    cfg: &TrainConfig,
    round: usize,
    seed: u64,
) -> Result<TrainedRound, TrainError> {
    let opt = &cfg.optimizer;
    opt.validate()?;
    cfg.vat.validate()?;
    if nets.len() != method.network_count() {
        return Err(TrainError::NetworkCount {
            method,
            expected: method.network_count(),
            got: nets.len(),
        });
    }
    if pools.labelled.is_empty() {
        return Err(TrainError::EmptyLabelled);
    }
    if pools.validation.is_empty() {
        return Err(TrainError::EmptyValidation);
    }
    let spec = nets[0].spec.clone();
    let feature_std = data.feature_std(pools.labelled);
    let mut adam: Vec<AdamState> = nets.iter().map(|n| AdamState::new(&n.params)).collect();
    let mut teacher = nets[0].params.clone();
    let use_unlabelled = method.uses_unlabelled() && !pools.unlabelled.is_empty();
    let mut stream = UnlabelledStream::new(pools.unlabelled, derive_seed(seed, &[1]));
    let val_x = data.gather(pools.validation);
    let val_y = data.gather_labels(pools.validation);

    let mut lr = opt.learning_rate;
    let mut plateau = Plateau::new();
    let mut epochs = Vec::new();
    let mut best_raw: Option<Checkpoint> = None;
    let mut best_ema: Option<Checkpoint> = None;
    let mut step = 0usize;

    for epoch in 1..=opt.max_epochs {
        let lambda_t = anneal_coefficient(epoch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2, epoch as u64]));
        let mut order = pools.labelled.to_vec();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_weight = 0usize;

        for chunk in order.chunks(opt.batch_size) {
            step += 1;
            let strength = cfg.augment_strength;
            let raw = data.gather(chunk);
            let batch = {
                let x = augment_batch(&raw, strength, &feature_std, &mut rng);
                let view = augment_batch(&raw, strength, &feature_std, &mut rng);
                let (x_u, view_u) = if use_unlabelled {
                    let raw_u = data.gather(&stream.next_batch(chunk.len()));
                    let a = augment_batch(&raw_u, strength, &feature_std, &mut rng);
                    let b = augment_batch(&raw_u, strength, &feature_std, &mut rng);
                    (Some(a), Some(b))
                } else {
                    (None, None)
                };
                Batch {
                    x,
                    view,
                    y: data.gather_labels(chunk),
                    x_u,
                    view_u,
                }
            };
            let seeds = PassSeeds(Some(rng.random()));
            let vat_seed: u64 = rng.random();

            let mut tape = Tape::new();
            let handles: Vec<TapeNet<'_>> = nets
                .iter()
                .map(|n| TapeNet::new(&mut tape, &spec, &n.params, true))
                .collect();
            let weights = &cfg.weights;
            let loss = match method {
                Method::Esup => {
                    let logits = handles[0].logits(&mut tape, &batch.x, seeds.mode(0))?;
                    esup_on_tape(&mut tape, logits, &batch.y, lambda_t)?
                }
                Method::Epsu => epsu_loss(
                    &mut tape,
                    &handles[0],
                    Labelled {
                        x: &batch.x,
                        y: &batch.y,
                    },
                    batch.x_u.as_ref(),
                    weights,
                    epoch,
                    seeds,
                )?,
                Method::Evat => {
                    let unlabelled = match &batch.x_u {
                        Some(x_u) => {
                            let r = vat_perturbation(
                                &spec,
                                &nets[0].params,
                                x_u,
                                &cfg.vat,
                                vat_seed,
                                seeds.mode(1),
                            )?;
                            Some((x_u, r.r_adv))
                        }
                        None => None,
                    };
                    let anchor = TapeNet::new(&mut tape, &spec, &nets[0].params, false);
                    evat_loss(
                        &mut tape,
                        &handles[0],
                        &anchor,
                        Labelled {
                            x: &batch.x,
                            y: &batch.y,
                        },
                        unlabelled.as_ref().map(|(x, r)| (*x, r)),
                        weights,
                        epoch,
                        seeds,
                    )?
                }
                Method::Emt => {
                    let teacher_net = TapeNet::new(&mut tape, &spec, &teacher, false);
                    let unlabelled = match (&batch.x_u, &batch.view_u) {
                        (Some(a), Some(b)) => Some(Views {
                            first: a,
                            second: b,
                        }),
                        _ => None,
                    };
                    emt_loss(
                        &mut tape,
                        &handles[0],
                        &teacher_net,
                        Views {
                            first: &batch.x,
                            second: &batch.view,
                        },
                        &batch.y,
                        unlabelled,
                        weights,
                        epoch,
                        seeds,
                        cfg.emt_consistency_on_labelled,
                    )?
                }
                Method::Enot => {
                    let unlabelled = match (&batch.x_u, &batch.view_u) {
                        (Some(a), Some(b)) => Some(Views {
                            first: a,
                            second: b,
                        }),
                        _ => None,
                    };
                    enot_loss(
                        &mut tape,
                        &handles[0],
                        &handles[1],
                        Views {
                            first: &batch.x,
                            second: &batch.view,
                        },
                        &batch.y,
                        unlabelled,
                        weights,
                        epoch,
                        seeds,
                    )?
                }
            };
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    loss: value,
                });
            }
            let grads = tape.backward(loss)?;
            for ((net, handle), state) in nets.iter_mut().zip(&handles).zip(&mut adam) {
                let g: Vec<Tensor> = handle
                    .weights
                    .iter()
                    .map(|&w| grads.wrt(w).cloned())
                    .collect::<Result<_, _>>()?;
                adam_step(&mut net.params, &g, state, lr, opt).map_err(|e| match e {
                    TrainError::NonFiniteGradient { param, .. } => {
                        TrainError::NonFiniteGradient { param, epoch }
                    }
                    other => other,
                })?;
                net.ema_update(opt.ema_decay)?;
            }
            if method == Method::Emt {
                ema_blend(&mut teacher, &nets[0].params, opt.teacher_ema_decay)?;
            }
            loss_sum += value * chunk.len() as f64;
            loss_weight += chunk.len();
        }

        let raw: Vec<ParamSet> = nets.iter().map(|n| n.params.clone()).collect();
        let ema: Vec<ParamSet> = nets.iter().map(|n| n.ema_params.clone()).collect();
        let val_loss = validation_loss(&spec, &raw, &val_x, &val_y)?;
        let val_auroc_raw = validation_auroc(&spec, &raw, data, pools.validation)?;
        let val_auroc_ema = validation_auroc(&spec, &ema, data, pools.validation)?;
        let record = EpochRecord {
            round,
            epoch,
            lr,
            train_loss: loss_sum / loss_weight as f64,
            val_loss,
            val_auroc_raw,
            val_auroc_ema,
        };
        log::debug!("{}", serde_json::to_string(&record).unwrap_or_default());
        epochs.push(record);

        if best_raw
            .as_ref()
            .is_none_or(|b| val_auroc_raw > b.val_auroc)
        {
            best_raw = Some(Checkpoint {
                params: raw,
                epoch,
                val_auroc: val_auroc_raw,
            });
        }
        if best_ema
            .as_ref()
            .is_none_or(|b| val_auroc_ema > b.val_auroc)
        {
            best_ema = Some(Checkpoint {
                params: ema,
                epoch,
                val_auroc: val_auroc_ema,
            });
        }

        if plateau.observe(val_loss, opt.lr_patience) {
            lr *= opt.lr_decay_factor;
            log::debug!("round {round} epoch {epoch}: learning rate decays to {lr:e}");
        }
        if plateau.since_best >= opt.early_stop_patience {
            log::debug!("round {round}: early stop after epoch {epoch}");
            break;
        }
    }
    Ok(TrainedRound {
        best_raw: best_raw.expect("at least one epoch runs"),
        best_ema: best_ema.expect("at least one epoch runs"),
        epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let spec = ClassifierSpec::new(3, vec![2], 1, 0.0);
        let mut p = init(&spec, 0).unwrap().params;
        let before = p.clone();
        let grads: Vec<Tensor> = p
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let mut state = AdamState::new(&p);
        adam_step(&mut p, &grads, &mut state, cfg.learning_rate, &cfg).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let spec = ClassifierSpec::new(3, vec![], 1, 0.0);
        let mut p = init(&spec, 1).unwrap().params;
        let before = p.clone();
        let grads: Vec<Tensor> = p
            .tensors()
            .iter()
            .map(|t| {
                Tensor::new(
                    t.shape().to_vec(),
                    (0..t.len()).map(|i| i as f64 - 1.5).collect(),
                )
                .unwrap()
            })
            .collect();
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let mut state = AdamState::new(&p);
        adam_step(&mut p, &grads, &mut state, 1e-3, &cfg).unwrap();
        // bias-corrected first step: Δ = −lr · g / (|g| + ε)
        for ((a, b), g) in p.tensors().iter().zip(before.tensors()).zip(&grads) {
            for ((&x, &y), &gv) in a.data().iter().zip(b.data()).zip(g.data()) {
                let expect = -1e-3 * gv / (gv.abs() + cfg.epsilon);
                assert!((x - y - expect).abs() < 1e-15, "{} vs {}", x - y, expect);
            }
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let spec = ClassifierSpec::new(2, vec![], 1, 0.0);
        let mut p = init(&spec, 1).unwrap().params;
        let mut grads: Vec<Tensor> = p
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        grads[0].data_mut()[0] = f64::NAN;
        let mut state = AdamState::new(&p);
        let err = adam_step(
            &mut p,
            &grads,
            &mut state,
            1e-3,
            &OptimizerConfig::default(),
        );
        assert!(matches!(err, Err(TrainError::NonFiniteGradient { .. })));
    }

    #[test]
    fn plateau_schedule() {
        let mut p = Plateau::new();
        assert!(!p.observe(1.0, 2));
        assert!(!p.observe(1.0, 2));
        assert!(p.observe(1.0, 2));
        assert!(!p.observe(1.0, 2));
        assert!(p.observe(1.0, 2));
        assert_eq!(p.since_best, 4);
        assert!(!p.observe(0.5, 2));
        assert_eq!(p.since_best, 0);
    }

    #[test]
    fn unlabelled_stream_cycles_whole_pool() {
        let pool = [3, 8, 11, 20, 21];
        let mut s = UnlabelledStream::new(&pool, 9);
        let mut first: Vec<usize> = s.next_batch(3);
        first.extend(s.next_batch(2));
        first.sort_unstable();
        assert_eq!(first, pool);
        assert_eq!(s.next_batch(10).len(), 5);
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, &[2]), derive_seed(1, &[3]));
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
    }
}
