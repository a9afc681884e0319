//! Evidential supervised loss and its four consistency-based semi-supervised
//! extensions.
//!
//! Per class head the supervised loss is the Bayes risk of the squared error
//! under the Beta prior (`L_err + L_var`) plus the annealed KL regularizer on
//! the label-adjusted parameters. Consistency terms compare two predictive
//! means with the same Bayes-risk form but without the KL term. Every loss is
//! averaged over classes, then over the batch.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::data::LabelMatrix;
use crate::evidential::{ClassPredictor, LabelPair, LOGIT_CLAMP};
use crate::model::{forward_on_tape, ClassifierSpec, Mode, ModelError, ParamSet};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("epoch counter starts at 1, got {0}")]
    InvalidEpoch(usize),
    #[error("{0} rows of labels for a batch of {1}")]
    LabelRows(usize, usize),
    #[error("{0} label classes for a model with {1} heads")]
    LabelClasses(usize, usize),
    #[error("invalid VAT configuration: {0}")]
    InvalidVat(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Semi-supervised method variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Esup,
    Epsu,
    Evat,
    Emt,
    Enot,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Esup,
        Method::Epsu,
        Method::Evat,
        Method::Emt,
        Method::Enot,
    ];

    pub fn uses_unlabelled(&self) -> bool {
        !matches!(self, Method::Esup)
    }

    pub fn network_count(&self) -> usize {
        if matches!(self, Method::Enot) {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Esup => "esup",
            Method::Epsu => "epsu",
            Method::Evat => "evat",
            Method::Emt => "emt",
            Method::Enot => "enot",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| format!("unknown method '{s}' (expected esup, epsu, evat, emt or enot)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_sup: f64,
    pub lambda_cons: f64,
    pub lambda_sup_1: f64,
    pub lambda_sup_2: f64,
    pub lambda_cons_l: f64,
    pub lambda_cons_u: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::for_method(Method::Esup)
    }
}

impl LossWeights {
    /// Trade-off weights used for each method unless overridden.
    pub fn for_method(method: Method) -> Self {
        let base = LossWeights {
            lambda_sup: 1.0,
            lambda_cons: 0.0,
            lambda_sup_1: 0.67,
            lambda_sup_2: 0.67,
            lambda_cons_l: 0.67,
            lambda_cons_u: 1.0,
        };
        match method {
            Method::Esup | Method::Epsu | Method::Enot => base,
            Method::Evat => LossWeights {
                lambda_cons: 1.0,
                ..base
            },
            Method::Emt => LossWeights {
                lambda_cons: 196.0,
                ..base
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VatConfig {
    pub epsilon: f64,
    pub xi: f64,
    pub power_iterations: usize,
}

impl Default for VatConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            xi: 1e-6,
            power_iterations: 1,
        }
    }
}

impl VatConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(LossError::InvalidVat(format!("epsilon = {}", self.epsilon)));
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(LossError::InvalidVat(format!("xi = {}", self.xi)));
        }
        if self.power_iterations == 0 {
            return Err(LossError::InvalidVat("power_iterations = 0".into()));
        }
        Ok(())
    }
}

/// KL weight `λ_t = min(1, t / 10)` for epoch `t ≥ 1`.
pub fn anneal_coefficient(epoch: usize) -> Result<f64, LossError> {
    if epoch < 1 {
        return Err(LossError::InvalidEpoch(epoch));
    }
    Ok((epoch as f64 / 10.0).min(1.0))
}

/// `(y⁺ − p̂⁺)² + (y⁻ − p̂⁻)²`.
pub fn loss_err(y: LabelPair, p: ClassPredictor) -> f64 {
    (f64::from(y.y_pos) - p.p_pos).powi(2) + (f64::from(y.y_neg) - p.p_neg).powi(2)
}

/// `[p̂⁺(1 − p̂⁺) + p̂⁻(1 − p̂⁻)] / (E + 1)`.
pub fn loss_var(p: ClassPredictor, total_evidence: f64) -> f64 {
    (p.p_pos * (1.0 - p.p_pos) + p.p_neg * (1.0 - p.p_neg)) / (total_evidence + 1.0)
}

/// Beta-prior quantities of a `batch × 2K` logit matrix, each `batch × K`.
#[derive(Debug, Clone, Copy)]
pub struct Evidence {
    pub alpha: Var,
    pub beta: Var,
    pub total: Var,
    pub p_pos: Var,
    pub p_neg: Var,
}

pub fn evidence_on_tape(tape: &mut Tape, logits: Var) -> Result<Evidence, LossError> {
    let (_, width) = tape.value(logits).dims2();
    let pos: Vec<usize> = (0..width).step_by(2).collect();
    let neg: Vec<usize> = (1..width).step_by(2).collect();
    let to_param = |tape: &mut Tape, cols: &[usize]| -> Result<Var, AutodiffError> {
        let f = tape.columns(logits, cols)?;
        let f = tape.clamp_st(f, -LOGIT_CLAMP, LOGIT_CLAMP)?;
        let e = tape.exp(f)?;
        tape.add_scalar(e, 1.0)
    };
    let alpha = to_param(tape, &pos)?;
    let beta = to_param(tape, &neg)?;
    let total = tape.add(alpha, beta)?;
    let p_pos = tape.div(alpha, total)?;
    let p_neg = tape.div(beta, total)?;
    Ok(Evidence {
        alpha,
        beta,
        total,
        p_pos,
        p_neg,
    })
}

fn err_on_tape(
    tape: &mut Tape,
    target: (Var, Var),
    pred: (Var, Var),
) -> Result<Var, AutodiffError> {
    let d_pos = tape.sub(target.0, pred.0)?;
    let d_neg = tape.sub(target.1, pred.1)?;
    let s_pos = tape.square(d_pos)?;
    let s_neg = tape.square(d_neg)?;
    tape.add(s_pos, s_neg)
}

fn var_on_tape(tape: &mut Tape, ev: &Evidence) -> Result<Var, AutodiffError> {
    let q_pos = tape.affine(ev.p_pos, -1.0, 1.0)?;
    let q_neg = tape.affine(ev.p_neg, -1.0, 1.0)?;
    let v_pos = tape.mul(ev.p_pos, q_pos)?;
    let v_neg = tape.mul(ev.p_neg, q_neg)?;
    let numer = tape.add(v_pos, v_neg)?;
    let denom = tape.add_scalar(ev.total, 1.0)?;
    tape.div(numer, denom)
}

/// KL(Beta(α̃, β̃) ‖ Beta(1, 1)) elementwise, with α̃ = y⁺ + (1 − y⁺)α, β̃ = y⁻ + (1 − y⁻)β.
fn kl_on_tape(tape: &mut Tape, ev: &Evidence, y_pos: &Tensor) -> Result<Var, AutodiffError> {
    let y_neg = y_pos.map(|v| 1.0 - v);
    let adjusted = |tape: &mut Tape, param: Var, y: &Tensor| -> Result<Var, AutodiffError> {
        let keep = tape.constant(y.map(|v| 1.0 - v));
        let base = tape.constant(y.clone());
        let kept = tape.mul(keep, param)?;
        tape.add(base, kept)
    };
    let a = adjusted(tape, ev.alpha, y_pos)?;
    let b = adjusted(tape, ev.beta, &y_neg)?;
    let s = tape.add(a, b)?;
    let lg_s = tape.lgamma(s)?;
    let lg_a = tape.lgamma(a)?;
    let lg_b = tape.lgamma(b)?;
    let log_norm = tape.sub(lg_s, lg_a)?;
    let log_norm = tape.sub(log_norm, lg_b)?;
    let psi_s = tape.digamma(s)?;
    let mut total = log_norm;
    for g in [a, b] {
        let psi = tape.digamma(g)?;
        let diff = tape.sub(psi, psi_s)?;
        let gm1 = tape.add_scalar(g, -1.0)?;
        let term = tape.mul(gm1, diff)?;
        total = tape.add(total, term)?;
    }
    Ok(total)
}

fn labels_as_tensor(labels: &LabelMatrix) -> Tensor {
    let data = labels.data().iter().map(|&v| f64::from(v)).collect();
    Tensor::matrix(labels.rows(), labels.classes(), data).expect("non-empty labels")
}

fn check_labels(tape: &Tape, logits: Var, labels: &LabelMatrix) -> Result<(), LossError> {
    let (rows, width) = tape.value(logits).dims2();
    if labels.rows() != rows {
        return Err(LossError::LabelRows(labels.rows(), rows));
    }
    if 2 * labels.classes() != width {
        return Err(LossError::LabelClasses(labels.classes(), width / 2));
    }
    Ok(())
}

/// Evidential supervised loss of `batch × 2K` logits; `lambda_t` weights the KL term.
pub fn esup_on_tape(
    tape: &mut Tape,
    logits: Var,
    labels: &LabelMatrix,
    lambda_t: f64,
) -> Result<Var, LossError> {
    check_labels(tape, logits, labels)?;
    let ev = evidence_on_tape(tape, logits)?;
    let y_pos = labels_as_tensor(labels);
    let target_pos = tape.constant(y_pos.clone());
    let target_neg = tape.constant(y_pos.map(|v| 1.0 - v));
    let err = err_on_tape(tape, (target_pos, target_neg), (ev.p_pos, ev.p_neg))?;
    let var = var_on_tape(tape, &ev)?;
    let kl = kl_on_tape(tape, &ev, &y_pos)?;
    let kl = tape.scale(kl, lambda_t)?;
    let risk = tape.add(err, var)?;
    let per_class = tape.add(risk, kl)?;
    Ok(tape.mean(per_class)?)
}

/// Per-element consistency `L_err(p̂₁, p̂₂) + L_var(p̂₁, α₁) + L_var(p̂₂, α₂)`, `batch × K`.
pub fn consistency_on_tape(
    tape: &mut Tape,
    first: &Evidence,
    second: &Evidence,
) -> Result<Var, LossError> {
    let err = err_on_tape(
        tape,
        (first.p_pos, first.p_neg),
        (second.p_pos, second.p_neg),
    )?;
    let v1 = var_on_tape(tape, first)?;
    let v2 = var_on_tape(tape, second)?;
    let sum = tape.add(err, v1)?;
    Ok(tape.add(sum, v2)?)
}

/// Evidential supervised loss of a logit tensor (`batch × K × 2` or `batch × 2K`).
pub fn esup_loss(logits: &Tensor, labels: &LabelMatrix, epoch: usize) -> Result<f64, LossError> {
    let lambda_t = anneal_coefficient(epoch)?;
    let (rows, _) = logits.dims2();
    let flat = Tensor::matrix(rows, logits.len() / rows, logits.data().to_vec())?;
    let mut tape = Tape::new();
    let v = tape.constant(flat);
    let loss = esup_on_tape(&mut tape, v, labels, lambda_t)?;
    Ok(tape.value(loss).data()[0])
}

/// A network whose parameters have been registered on a tape.
#[derive(Debug, Clone)]
pub struct TapeNet<'a> {
    pub spec: &'a ClassifierSpec,
    pub weights: Vec<Var>,
}

impl<'a> TapeNet<'a> {
    pub fn new(
        tape: &mut Tape,
        spec: &'a ClassifierSpec,
        params: &ParamSet,
        trainable: bool,
    ) -> Self {
        Self {
            spec,
            weights: params.register(tape, trainable),
        }
    }

    /// Drives the network from a single flattened parameter column.
    pub fn from_flat(
        tape: &mut Tape,
        spec: &'a ClassifierSpec,
        layout: &ParamSet,
        flat: Var,
    ) -> Result<Self, LossError> {
        Ok(Self {
            spec,
            weights: layout.split_on_tape(tape, flat)?,
        })
    }

    pub fn logits(&self, tape: &mut Tape, x: &Tensor, mode: Mode) -> Result<Var, LossError> {
        let input = tape.constant(x.clone());
        Ok(forward_on_tape(
            tape,
            self.spec,
            &self.weights,
            input,
            mode,
        )?)
    }

    pub fn logits_of(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var, LossError> {
        Ok(forward_on_tape(tape, self.spec, &self.weights, x, mode)?)
    }
}

/// Dropout seeds for the individual forward passes of one loss evaluation.
/// `None` runs every pass in eval mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PassSeeds(pub Option<u64>);

impl PassSeeds {
    pub const EVAL: PassSeeds = PassSeeds(None);

    pub fn mode(&self, pass: u64) -> Mode {
        match self.0 {
            None => Mode::Eval,
            Some(seed) => Mode::Train {
                seed: seed ^ pass.wrapping_mul(0x9E37_79B9_7F4A_7C15),
            },
        }
    }
}

/// A labelled batch: inputs (already augmented) and their labels.
#[derive(Debug, Clone, Copy)]
pub struct Labelled<'a> {
    pub x: &'a Tensor,
    pub y: &'a LabelMatrix,
}

/// Hard pseudo-labels: positive iff `p̂⁺ ≥ 0.5`, i.e. `α ≥ β`.
pub fn pseudo_labels(tape: &Tape, ev: &Evidence) -> LabelMatrix {
    let alpha = tape.value(ev.alpha);
    let beta = tape.value(ev.beta);
    let (rows, classes) = alpha.dims2();
    let data = alpha
        .data()
        .iter()
        .zip(beta.data())
        .map(|(a, b)| u8::from(a / (a + b) >= 0.5))
        .collect();
    LabelMatrix::new(rows, classes, data)
}

/// ePSU: supervised loss plus the supervised loss against pseudo-labels
/// inferred from the model's own predictive mean on the unlabelled batch.
pub fn epsu_loss(
    tape: &mut Tape,
    net: &TapeNet<'_>,
    labelled: Labelled<'_>,
    unlabelled: Option<&Tensor>,
    weights: &LossWeights,
    epoch: usize,
    seeds: PassSeeds,
) -> Result<Var, LossError> {
    let lambda_t = anneal_coefficient(epoch)?;
    let logits = net.logits(tape, labelled.x, seeds.mode(0))?;
    let sup = esup_on_tape(tape, logits, labelled.y, lambda_t)?;
    let sup = tape.scale(sup, weights.lambda_sup)?;
    let Some(x_u) = unlabelled else {
        return Ok(sup);
    };
    let logits_u = net.logits(tape, x_u, seeds.mode(1))?;
    let ev_u = evidence_on_tape(tape, logits_u)?;
    let targets = pseudo_labels(tape, &ev_u);
    let pseudo = esup_on_tape(tape, logits_u, &targets, lambda_t)?;
    let pseudo = tape.scale(pseudo, weights.lambda_sup)?;
    Ok(tape.add(sup, pseudo)?)
}

/// Result of the adversarial direction search.
#[derive(Debug, Clone)]
pub struct VatPerturbation {
    pub r_adv: Tensor,
    /// Rows whose gradient vanished and kept the random direction.
    pub fallback_rows: usize,
}

fn normalize_rows(t: &mut Tensor) -> Vec<bool> {
    let (rows, cols) = t.dims2();
    let data = t.data_mut();
    (0..rows)
        .map(|r| {
            let row = &mut data[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 && norm.is_finite() {
                row.iter_mut().for_each(|v| *v /= norm);
                true
            } else {
                false
            }
        })
        .collect()
}

/// Power iteration for the per-sample direction that most increases the
/// eVAT consistency term; returns `ε · d` with `‖d‖ = 1` per row.
pub fn vat_perturbation(
    spec: &ClassifierSpec,
    params: &ParamSet,
    x_u: &Tensor,
    cfg: &VatConfig,
    seed: u64,
    mode: Mode,
) -> Result<VatPerturbation, LossError> {
    cfg.validate()?;
    let (rows, cols) = x_u.dims2();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let random: Vec<f64> = (0..rows * cols)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let mut random = Tensor::matrix(rows, cols, random)?;
    normalize_rows(&mut random);
    let mut direction = random.clone();

    let mut fallback_rows = 0;
    for _ in 0..cfg.power_iterations {
        let mut tape = Tape::new();
        let net = TapeNet::new(&mut tape, spec, params, false);
        let clean = net.logits(&mut tape, x_u, mode)?;
        let clean = tape.detach(clean)?;
        let clean_ev = evidence_on_tape(&mut tape, clean)?;
        let x = tape.constant(x_u.clone());
        let d = tape.param(direction.clone());
        let step = tape.scale(d, cfg.xi)?;
        let shifted = tape.add(x, step)?;
        let adv = net.logits_of(&mut tape, shifted, mode)?;
        let adv_ev = evidence_on_tape(&mut tape, adv)?;
        let cons = consistency_on_tape(&mut tape, &clean_ev, &adv_ev)?;
        let total = tape.sum(cons)?;
        let grads = tape.backward(total)?;
        let mut next = grads.wrt(d)?.clone();
        let ok = normalize_rows(&mut next);
        for (r, fine) in ok.iter().enumerate() {
            if !fine {
                next.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(random.row(r));
                fallback_rows += 1;
            }
        }
        direction = next;
    }
    if fallback_rows > 0 {
        log::debug!("vat: {fallback_rows} rows fell back to the random direction");
    }
    Ok(VatPerturbation {
        r_adv: direction.map(|v| v * cfg.epsilon),
        fallback_rows,
    })
}

/// eVAT: supervised loss plus `λ_cons` times the consistency between the
/// clean prediction and the prediction at `x_u + r_adv`. The clean branch is
/// taken from `anchor`, which holds the same weights as `net` registered as
/// constants, so no gradient flows through it.
#[allow(clippy::too_many_arguments)]
pub fn evat_loss(
    tape: &mut Tape,
    net: &TapeNet<'_>,
    anchor: &TapeNet<'_>,
    labelled: Labelled<'_>,
    unlabelled: Option<(&Tensor, &Tensor)>,
    weights: &LossWeights,
    epoch: usize,
    seeds: PassSeeds,
) -> Result<Var, LossError> {
    let lambda_t = anneal_coefficient(epoch)?;
    let logits = net.logits(tape, labelled.x, seeds.mode(0))?;
    let sup = esup_on_tape(tape, logits, labelled.y, lambda_t)?;
    let sup = tape.scale(sup, weights.lambda_sup)?;
    let Some((x_u, r_adv)) = unlabelled else {
        return Ok(sup);
    };
    // Both branches share one dropout mask so the perturbation is the only difference.
    let clean = anchor.logits(tape, x_u, seeds.mode(1))?;
    let clean = tape.detach(clean)?;
    let clean_ev = evidence_on_tape(tape, clean)?;
    let x = tape.constant(x_u.clone());
    let r = tape.constant(r_adv.clone());
    let shifted = tape.add(x, r)?;
    let adv = net.logits_of(tape, shifted, seeds.mode(1))?;
    let adv_ev = evidence_on_tape(tape, adv)?;
    let cons = consistency_on_tape(tape, &clean_ev, &adv_ev)?;
    let cons = tape.mean(cons)?;
    let cons = tape.scale(cons, weights.lambda_cons)?;
    Ok(tape.add(sup, cons)?)
}

/// Two views of the same inputs, one per network.
#[derive(Debug, Clone, Copy)]
pub struct Views<'a> {
    pub first: &'a Tensor,
    pub second: &'a Tensor,
}

/// eMT: supervised loss on the student plus `λ_cons` times the student–teacher
/// consistency averaged over the unlabelled inputs and, if
/// `consistency_on_labelled`, the labelled inputs too. Teacher outputs are
/// detached.
#[allow(clippy::too_many_arguments)]
pub fn emt_loss(
    tape: &mut Tape,
    student: &TapeNet<'_>,
    teacher: &TapeNet<'_>,
    labelled: Views<'_>,
    labels: &LabelMatrix,
    unlabelled: Option<Views<'_>>,
    weights: &LossWeights,
    epoch: usize,
    seeds: PassSeeds,
    consistency_on_labelled: bool,
) -> Result<Var, LossError> {
    let lambda_t = anneal_coefficient(epoch)?;
    let s_logits = student.logits(tape, labelled.first, seeds.mode(0))?;
    let sup = esup_on_tape(tape, s_logits, labels, lambda_t)?;
    let sup = tape.scale(sup, weights.lambda_sup)?;

    let mut parts: Vec<(Var, usize)> = Vec::new();
    let mut pair =
        |tape: &mut Tape, s: Var, views: Views<'_>, pass: u64| -> Result<(), LossError> {
            let t = teacher.logits(tape, views.second, seeds.mode(pass))?;
            let t = tape.detach(t)?;
            let s_ev = evidence_on_tape(tape, s)?;
            let t_ev = evidence_on_tape(tape, t)?;
            let cons = consistency_on_tape(tape, &s_ev, &t_ev)?;
            let n = tape.value(cons).len();
            parts.push((tape.sum(cons)?, n));
            Ok(())
        };
    if consistency_on_labelled {
        pair(tape, s_logits, labelled, 1)?;
    }
    if let Some(views) = unlabelled {
        let s_u = student.logits(tape, views.first, seeds.mode(2))?;
        pair(tape, s_u, views, 3)?;
    }
    if parts.is_empty() {
        return Ok(sup);
    }
    let count: usize = parts.iter().map(|p| p.1).sum();
    let mut total = parts[0].0;
    for &(v, _) in &parts[1..] {
        total = tape.add(total, v)?;
    }
    let cons = tape.scale(total, weights.lambda_cons / count as f64)?;
    Ok(tape.add(sup, cons)?)
}

/// eNoT: weighted supervised losses of both networks on their own views plus
/// labelled and unlabelled consistency between the two networks. Gradients
/// reach both networks.
#[allow(clippy::too_many_arguments)]
pub fn enot_loss(
    tape: &mut Tape,
    net1: &TapeNet<'_>,
    net2: &TapeNet<'_>,
    labelled: Views<'_>,
    labels: &LabelMatrix,
    unlabelled: Option<Views<'_>>,
    weights: &LossWeights,
    epoch: usize,
    seeds: PassSeeds,
) -> Result<Var, LossError> {
    let lambda_t = anneal_coefficient(epoch)?;
    let l1 = net1.logits(tape, labelled.first, seeds.mode(0))?;
    let l2 = net2.logits(tape, labelled.second, seeds.mode(1))?;
    let sup1 = esup_on_tape(tape, l1, labels, lambda_t)?;
    let sup2 = esup_on_tape(tape, l2, labels, lambda_t)?;
    let sup1 = tape.scale(sup1, weights.lambda_sup_1)?;
    let sup2 = tape.scale(sup2, weights.lambda_sup_2)?;
    let mut total = tape.add(sup1, sup2)?;

    let ev1 = evidence_on_tape(tape, l1)?;
    let ev2 = evidence_on_tape(tape, l2)?;
    let cons_l = consistency_on_tape(tape, &ev1, &ev2)?;
    let cons_l = tape.mean(cons_l)?;
    let cons_l = tape.scale(cons_l, weights.lambda_cons_l)?;
    total = tape.add(total, cons_l)?;

    if let Some(views) = unlabelled {
        let u1 = net1.logits(tape, views.first, seeds.mode(2))?;
        let u2 = net2.logits(tape, views.second, seeds.mode(3))?;
        let ev1 = evidence_on_tape(tape, u1)?;
        let ev2 = evidence_on_tape(tape, u2)?;
        let cons_u = consistency_on_tape(tape, &ev1, &ev2)?;
        let cons_u = tape.mean(cons_u)?;
        let cons_u = tape.scale(cons_u, weights.lambda_cons_u)?;
        total = tape.add(total, cons_u)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evidential::{adjust_params, evidence_from_logits, kl_to_uniform, predictive_mean};
    use crate::model::init;

    #[test]
    fn anneal_schedule() {
        assert_eq!(anneal_coefficient(5).unwrap(), 0.5);
        assert_eq!(anneal_coefficient(10).unwrap(), 1.0);
        assert_eq!(anneal_coefficient(200).unwrap(), 1.0);
        assert!(matches!(
            anneal_coefficient(0),
            Err(LossError::InvalidEpoch(0))
        ));
    }

    #[test]
    fn scalar_terms() {
        let p = |a: f64| ClassPredictor {
            p_pos: a,
            p_neg: 1.0 - a,
        };
        assert_eq!(loss_err(LabelPair::POSITIVE, p(1.0)), 0.0);
        assert!((loss_err(LabelPair::POSITIVE, p(0.8)) - 0.08).abs() < 1e-15);
        assert_eq!(loss_err(LabelPair::NEGATIVE, p(0.5)), 0.5);
        assert!((loss_var(p(0.5), 2.0) - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(loss_var(p(1.0), 7.0), 0.0);
        assert!((loss_var(p(0.5), 999.0) - 0.0005).abs() < 1e-15);
    }

    #[test]
    fn esup_single_head_example() {
        let logits = Tensor::new(vec![1, 1, 2], vec![0.0, 0.0]).unwrap();
        let y = LabelMatrix::new(1, 1, vec![1]);
        let got = esup_loss(&logits, &y, 10).unwrap();
        // p̂ = (0.5, 0.5), E = 4, adjusted params (1, 2)
        let expect = 0.5 + 0.5 / 5.0 + kl_to_uniform(1.0, 2.0).unwrap();
        assert!((got - expect).abs() < 1e-12);
        // KL(Beta(1, 2) || Beta(1, 1)) = ln 2 - 1/2
        assert!((got - (0.6 + std::f64::consts::LN_2 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn esup_matches_scalar_composition() {
        let raw = [0.3, -1.2, 2.5, 0.1, -0.4, -0.9];
        let logits = Tensor::matrix(1, 6, raw.to_vec()).unwrap();
        let y = LabelMatrix::new(1, 3, vec![1, 0, 1]);
        for epoch in [1, 4, 12] {
            let lambda_t = anneal_coefficient(epoch).unwrap();
            let mut expect = 0.0;
            for k in 0..3 {
                let bp = evidence_from_logits(raw[2 * k], raw[2 * k + 1]).unwrap();
                let yk = LabelPair::from_bool(y.get(0, k) == 1);
                let adj = adjust_params(bp, yk);
                expect += loss_err(yk, predictive_mean(bp))
                    + loss_var(predictive_mean(bp), bp.total())
                    + lambda_t * kl_to_uniform(adj.alpha(), adj.beta()).unwrap();
            }
            expect /= 3.0;
            assert!((esup_loss(&logits, &y, epoch).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn esup_duplicated_heads_equal_single_head() {
        let one = Tensor::matrix(2, 2, vec![0.4, -0.3, 1.1, 0.2]).unwrap();
        let two = Tensor::matrix(2, 4, vec![0.4, -0.3, 0.4, -0.3, 1.1, 0.2, 1.1, 0.2]).unwrap();
        let y1 = LabelMatrix::new(2, 1, vec![1, 0]);
        let y2 = LabelMatrix::new(2, 2, vec![1, 1, 0, 0]);
        let a = esup_loss(&one, &y1, 3).unwrap();
        let b = esup_loss(&two, &y2, 3).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn esup_checks_label_shape() {
        let logits = Tensor::matrix(2, 4, vec![0.0; 8]).unwrap();
        assert!(matches!(
            esup_loss(&logits, &LabelMatrix::new(3, 2, vec![0; 6]), 1),
            Err(LossError::LabelRows(3, 2))
        ));
        assert!(matches!(
            esup_loss(&logits, &LabelMatrix::new(2, 1, vec![0; 2]), 1),
            Err(LossError::LabelClasses(1, 2))
        ));
    }

    #[test]
    fn pseudo_label_threshold_ties_positive() {
        let mut tape = Tape::new();
        // per class (pos, neg): p̂⁺ = 0.5 exactly, p̂⁺ > 0.5, p̂⁺ < 0.5
        let logits =
            tape.constant(Tensor::matrix(1, 6, vec![0.0, 0.0, 1.0, 0.2, -1.0, 0.5]).unwrap());
        let ev = evidence_on_tape(&mut tape, logits).unwrap();
        assert_eq!(pseudo_labels(&tape, &ev).row(0), &[1, 1, 0]);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("vat".parse::<Method>().is_err());
    }

    #[test]
    fn default_weights() {
        assert_eq!(LossWeights::for_method(Method::Esup).lambda_sup, 1.0);
        assert_eq!(LossWeights::for_method(Method::Evat).lambda_cons, 1.0);
        assert_eq!(LossWeights::for_method(Method::Emt).lambda_cons, 196.0);
        let enot = LossWeights::for_method(Method::Enot);
        assert_eq!(
            (
                enot.lambda_sup_1,
                enot.lambda_sup_2,
                enot.lambda_cons_l,
                enot.lambda_cons_u
            ),
            (0.67, 0.67, 0.67, 1.0)
        );
    }

    #[test]
    fn vat_perturbation_has_radius_epsilon() {
        let spec = ClassifierSpec::new(6, vec![5], 2, 0.0);
        let m = init(&spec, 2).unwrap();
        let x = Tensor::matrix(3, 6, (0..18).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap();
        let cfg = VatConfig {
            epsilon: 2.5,
            ..VatConfig::default()
        };
        let p = vat_perturbation(&spec, &m.params, &x, &cfg, 4, Mode::Eval).unwrap();
        for r in 0..3 {
            let norm = p.r_adv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 2.5).abs() < 1e-9);
        }
        let zero = VatConfig {
            epsilon: 0.0,
            ..cfg
        };
        let p = vat_perturbation(&spec, &m.params, &x, &zero, 4, Mode::Eval).unwrap();
        assert!(p.r_adv.data().iter().all(|&v| v == 0.0));
        assert!(VatConfig {
            power_iterations: 0,
            ..cfg
        }
        .validate()
        .is_err());
    }
}
