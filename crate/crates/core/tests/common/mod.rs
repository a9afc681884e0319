#![allow(dead_code)]

use evidal_core::autodiff::{grad_check, AutodiffError, Tape, Tensor, Var};
use evidal_core::data::LabelMatrix;
use evidal_core::losses::{
    emt_loss, enot_loss, epsu_loss, esup_on_tape, evat_loss, vat_perturbation, Labelled, LossError,
    LossWeights, Method, PassSeeds, TapeNet, VatConfig, Views,
};
use evidal_core::model::{init, ClassifierSpec, Mode, ParamSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small two-network problem for finite-difference checks.
pub struct GradFixture {
    pub spec: ClassifierSpec,
    pub first: ParamSet,
    pub second: ParamSet,
    pub x_l: Tensor,
    pub x_l_view: Tensor,
    pub y: LabelMatrix,
    pub x_u: Tensor,
    pub x_u_view: Tensor,
    pub r_adv: Tensor,
    pub epoch: usize,
    pub seeds: PassSeeds,
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn grad_fixture(seed: u64) -> GradFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ClassifierSpec::new(5, vec![4], 3, 0.3);
    let first = init(&spec, seed).unwrap().params;
    let second = init(&spec, seed + 1000).unwrap().params;
    // scale the head up a little so logits are not all near zero
    let first = first
        .unflatten(&first.flatten().map(|v| 2.0 * v).into_data())
        .unwrap();
    let x_l = random_matrix(&mut rng, 4, 5, 2.0);
    let x_l_view = random_matrix(&mut rng, 4, 5, 2.0);
    let x_u = random_matrix(&mut rng, 3, 5, 2.0);
    let x_u_view = random_matrix(&mut rng, 3, 5, 2.0);
    let y = LabelMatrix::new(
        4,
        3,
        (0..12).map(|_| u8::from(rng.random_bool(0.4))).collect(),
    );
    let cfg = VatConfig {
        epsilon: 0.5,
        ..VatConfig::default()
    };
    let r_adv = vat_perturbation(&spec, &first, &x_u, &cfg, seed, Mode::Eval)
        .unwrap()
        .r_adv;
    GradFixture {
        spec,
        first,
        second,
        x_l,
        x_l_view,
        y,
        x_u,
        x_u_view,
        r_adv,
        epoch: 1 + (seed as usize % 14),
        seeds: PassSeeds(Some(seed * 31 + 7)),
    }
}

fn unwrap_autodiff(e: LossError) -> AutodiffError {
    match e {
        LossError::Autodiff(a) => a,
        other => panic!("loss failed: {other}"),
    }
}

/// Which network's flattened parameters are perturbed.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Wrt {
    First,
    Second,
}

/// Records the method's loss with the chosen network driven by `flat`.
pub fn record_loss(
    fx: &GradFixture,
    method: Method,
    wrt: Wrt,
    tape: &mut Tape,
    flat: Var,
) -> Result<Var, LossError> {
    let weights = LossWeights::for_method(method);
    let (layout_flat, other) = match wrt {
        Wrt::First => (&fx.first, &fx.second),
        Wrt::Second => (&fx.second, &fx.first),
    };
    let driven = TapeNet::from_flat(tape, &fx.spec, layout_flat, flat)?;
    let fixed = TapeNet::new(tape, &fx.spec, other, false);
    let (net1, net2) = match wrt {
        Wrt::First => (driven, fixed),
        Wrt::Second => (fixed, driven),
    };
    let labelled = Labelled {
        x: &fx.x_l,
        y: &fx.y,
    };
    let lv = Views {
        first: &fx.x_l,
        second: &fx.x_l_view,
    };
    let uv = Views {
        first: &fx.x_u,
        second: &fx.x_u_view,
    };
    match method {
        Method::Esup => {
            let logits = net1.logits(tape, &fx.x_l, fx.seeds.mode(0))?;
            let lambda_t = evidal_core::losses::anneal_coefficient(fx.epoch)?;
            esup_on_tape(tape, logits, &fx.y, lambda_t)
        }
        Method::Epsu => epsu_loss(
            tape,
            &net1,
            labelled,
            Some(&fx.x_u),
            &weights,
            fx.epoch,
            fx.seeds,
        ),
        Method::Evat => {
            let anchor = TapeNet::new(tape, &fx.spec, &fx.first, false);
            evat_loss(
                tape,
                &net1,
                &anchor,
                labelled,
                Some((&fx.x_u, &fx.r_adv)),
                &weights,
                fx.epoch,
                fx.seeds,
            )
        }
        Method::Emt => emt_loss(
            tape,
            &net1,
            &net2,
            lv,
            &fx.y,
            Some(uv),
            &weights,
            fx.epoch,
            fx.seeds,
            true,
        ),
        Method::Enot => enot_loss(
            tape,
            &net1,
            &net2,
            lv,
            &fx.y,
            Some(uv),
            &weights,
            fx.epoch,
            fx.seeds,
        ),
    }
}

/// Worst relative finite-difference error of the method's loss gradient.
pub fn loss_grad_error(fx: &GradFixture, method: Method, wrt: Wrt) -> f64 {
    let x = match wrt {
        Wrt::First => fx.first.flatten(),
        Wrt::Second => fx.second.flatten(),
    };
    grad_check(
        |tape, flat| record_loss(fx, method, wrt, tape, flat).map_err(unwrap_autodiff),
        &x,
        1e-6,
    )
    .unwrap()
}

/// Gradient reaching the eMT teacher when it is registered as trainable.
pub fn teacher_gradient_norm(fx: &GradFixture) -> f64 {
    let mut tape = Tape::new();
    let student = TapeNet::new(&mut tape, &fx.spec, &fx.first, true);
    let teacher_flat = tape.param(fx.second.flatten());
    let teacher = TapeNet::from_flat(&mut tape, &fx.spec, &fx.second, teacher_flat).unwrap();
    let lv = Views {
        first: &fx.x_l,
        second: &fx.x_l_view,
    };
    let uv = Views {
        first: &fx.x_u,
        second: &fx.x_u_view,
    };
    let weights = LossWeights::for_method(Method::Emt);
    let loss = emt_loss(
        &mut tape,
        &student,
        &teacher,
        lv,
        &fx.y,
        Some(uv),
        &weights,
        fx.epoch,
        fx.seeds,
        true,
    )
    .unwrap();
    let grads = tape.backward(loss).unwrap();
    grads.wrt(teacher_flat).unwrap().l2_norm()
}

/// Pairwise AUROC, ties worth one half. `None` when a label is missing.
pub fn brute_auroc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1;
                twice += if si > sj {
                    2
                } else if si == sj {
                    1
                } else {
                    0
                };
            }
        }
    }
    (pairs > 0).then(|| twice as f64 / (2 * pairs) as f64)
}

/// Average precision by counting, for each positive in index order, the
/// samples scored at least as high.
pub fn brute_auprc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    if n_pos == 0 {
        return None;
    }
    let mut total = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        let above = scores.iter().filter(|&&s| s >= si).count();
        let pos_above = scores
            .iter()
            .zip(labels)
            .filter(|(&s, &l)| s >= si && l == 1)
            .count();
        total += pos_above as f64 / above as f64;
    }
    Some(total / n_pos as f64)
}

/// Scores drawn from a coarse grid so ties are frequent.
pub fn random_metric_instance(rng: &mut impl Rng, max_len: usize) -> (Vec<f64>, Vec<u8>) {
    let n = rng.random_range(1..=max_len);
    let levels = rng.random_range(1..=8);
    let scores = (0..n)
        .map(|_| rng.random_range(0..levels) as f64 / 8.0)
        .collect();
    let labels = (0..n).map(|_| rng.random_range(0..2u8)).collect();
    (scores, labels)
}
