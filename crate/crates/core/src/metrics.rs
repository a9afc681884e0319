//! Multi-label ranking metrics and report emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::active::{RunKey, RunRecord};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{scores} scores for {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("AUROC needs both a positive and a negative label")]
    SingleClass,
    #[error("AUPRC needs at least one positive label")]
    NoPositives,
    #[error("no class has both labels present")]
    NoEvaluableClass,
    #[error("score matrix has {got} classes, labels have {expected}")]
    ClassCount { expected: usize, got: usize },
    #[error("runs disagree: {0}")]
    MismatchedRuns(String),
    #[error("nothing to report")]
    Empty,
    #[error("cannot write reports: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot serialize summary: {0}")]
    Json(#[from] serde_json::Error),
}

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<(), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    Ok(())
}

/// Indices sorted by descending score, grouped into runs of equal scores.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Mann–Whitney AUROC: the fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricsError> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    // Twice the Mann–Whitney U, kept in integers so the result is exact.
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = n_neg as u128;
    for group in tie_groups(scores) {
        let pos = group.iter().filter(|&&i| labels[i] != 0).count() as u128;
        let neg = group.len() as u128 - pos;
        neg_below -= neg;
        twice_u += pos * (2 * neg_below + neg);
    }
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// Average precision: the mean over positives of the precision at the
/// threshold equal to that positive's score.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricsError> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    if n_pos == 0 {
        return Err(MetricsError::NoPositives);
    }
    let mut precision = vec![0.0; scores.len()];
    let (mut seen, mut seen_pos) = (0usize, 0usize);
    for group in tie_groups(scores) {
        seen += group.len();
        seen_pos += group.iter().filter(|&&i| labels[i] != 0).count();
        for &i in &group {
            precision[i] = seen_pos as f64 / seen as f64;
        }
    }
    let total: f64 = (0..scores.len())
        .filter(|&i| labels[i] != 0)
        .map(|i| precision[i])
        .sum();
    Ok(total / n_pos as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    /// `None` for skipped classes.
    pub per_class_auroc: Vec<Option<f64>>,
    pub per_class_auprc: Vec<Option<f64>>,
    pub macro_auroc: f64,
    pub macro_auprc: f64,
    pub skipped_classes: Vec<usize>,
}

impl MetricsBundle {
    /// Metrics of per-class `scores[k][i]` against `labels[k][i]`. Classes
    /// lacking either label are skipped and left out of the macro means.
    pub fn compute(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<Self, MetricsError> {
        if scores.len() != labels.len() {
            return Err(MetricsError::ClassCount {
                expected: labels.len(),
                got: scores.len(),
            });
        }
        let mut per_class_auroc = Vec::with_capacity(scores.len());
        let mut per_class_auprc = Vec::with_capacity(scores.len());
        let mut skipped_classes = Vec::new();
        for (k, (s, y)) in scores.iter().zip(labels).enumerate() {
            match auroc(s, y) {
                Ok(a) => {
                    per_class_auroc.push(Some(a));
                    per_class_auprc.push(Some(auprc(s, y)?));
                }
                Err(MetricsError::SingleClass) => {
                    per_class_auroc.push(None);
                    per_class_auprc.push(None);
                    skipped_classes.push(k);
                }
                Err(e) => return Err(e),
            }
        }
        let mean = |v: &[Option<f64>]| {
            let kept: Vec<f64> = v.iter().flatten().copied().collect();
            kept.iter().sum::<f64>() / kept.len() as f64
        };
        if skipped_classes.len() == scores.len() {
            return Err(MetricsError::NoEvaluableClass);
        }
        Ok(Self {
            macro_auroc: mean(&per_class_auroc),
            macro_auprc: mean(&per_class_auprc),
            per_class_auroc,
            per_class_auprc,
            skipped_classes,
        })
    }
}

/// Per-class AUROC gains (percentage points) over a baseline run at the final
/// budget, averaged over matched seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainTable {
    /// Class indices in display order.
    pub classes: Vec<usize>,
    pub prevalence: Vec<f64>,
    pub columns: Vec<RunKey>,
    /// `gains[row][column]`; `None` where the class was skipped in every seed.
    pub gains: Vec<Vec<Option<f64>>>,
}

fn final_round_by_seed(runs: &[RunRecord], key: &RunKey) -> BTreeMap<u64, (f64, Vec<Option<f64>>)> {
    runs.iter()
        .filter(|r| &r.key() == key)
        .filter_map(|r| {
            r.rounds.last().map(|last| {
                (
                    r.seed,
                    (last.budget_fraction, last.test.per_class_auroc.clone()),
                )
            })
        })
        .collect()
}

/// Builds the gain matrix of every run key against `baseline`. Rows follow
/// test-set `prevalence`, descending unless `ascending`.
pub fn class_gain_table(
    runs: &[RunRecord],
    baseline: &RunKey,
    prevalence: &[f64],
    ascending: bool,
) -> Result<GainTable, MetricsError> {
    let base = final_round_by_seed(runs, baseline);
    if base.is_empty() {
        return Err(MetricsError::MismatchedRuns(format!(
            "no runs for baseline {baseline}"
        )));
    }
    let mut columns: Vec<RunKey> = runs.iter().map(RunRecord::key).collect();
    columns.sort();
    columns.dedup();

    let k = prevalence.len();
    let mut classes: Vec<usize> = (0..k).collect();
    classes.sort_by(|&a, &b| {
        let ord = prevalence[a].total_cmp(&prevalence[b]);
        if ascending { ord } else { ord.reverse() }.then(a.cmp(&b))
    });

    let mut per_column = Vec::with_capacity(columns.len());
    for key in &columns {
        let runs_for_key = final_round_by_seed(runs, key);
        let mut sums = vec![(0.0, 0usize); k];
        for (seed, (budget, aurocs)) in &runs_for_key {
            let Some((base_budget, base_aurocs)) = base.get(seed) else {
                return Err(MetricsError::MismatchedRuns(format!(
                    "{key} has seed {seed}, {baseline} does not"
                )));
            };
            if (budget - base_budget).abs() > 1e-12 {
                return Err(MetricsError::MismatchedRuns(format!(
                    "final budget {budget} of {key} differs from {base_budget} of {baseline}"
                )));
            }
            if aurocs.len() != k || base_aurocs.len() != k {
                return Err(MetricsError::ClassCount {
                    expected: k,
                    got: aurocs.len(),
                });
            }
            for c in 0..k {
                if let (Some(m), Some(b)) = (aurocs[c], base_aurocs[c]) {
                    sums[c].0 += (m - b) * 100.0;
                    sums[c].1 += 1;
                }
            }
        }
        per_column.push(sums);
    }
    let gains = classes
        .iter()
        .map(|&c| {
            per_column
                .iter()
                .map(|sums| (sums[c].1 > 0).then(|| sums[c].0 / sums[c].1 as f64))
                .collect()
        })
        .collect();
    Ok(GainTable {
        prevalence: classes.iter().map(|&c| prevalence[c]).collect(),
        classes,
        columns,
        gains,
    })
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetSummary {
    pub budget: f64,
    pub macro_auroc: MeanStd,
    pub macro_auprc: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub sampler: String,
    pub seeds: Vec<u64>,
    pub budgets: Vec<BudgetSummary>,
    /// Final-budget macro AUROC gain over the baseline in percentage points,
    /// averaged over matched seeds.
    pub final_auroc_gain: Option<f64>,
    pub final_auprc_gain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub baseline: String,
    pub runs: Vec<RunSummary>,
}

fn final_macro_gain(
    runs: &[RunRecord],
    key: &RunKey,
    baseline: &RunKey,
    auprc: bool,
) -> Option<f64> {
    let pick = |r: &RunRecord| {
        r.rounds.last().map(|l| {
            if auprc {
                l.test.macro_auprc
            } else {
                l.test.macro_auroc
            }
        })
    };
    let base: BTreeMap<u64, f64> = runs
        .iter()
        .filter(|r| &r.key() == baseline)
        .filter_map(|r| pick(r).map(|v| (r.seed, v)))
        .collect();
    let gains: Vec<f64> = runs
        .iter()
        .filter(|r| &r.key() == key)
        .filter_map(|r| Some((pick(r)? - base.get(&r.seed)?) * 100.0))
        .collect();
    (!gains.is_empty()).then(|| gains.iter().sum::<f64>() / gains.len() as f64)
}

/// Aggregates runs into per-(method, sampler, budget) mean ± std.
pub fn summarize(runs: &[RunRecord], baseline: &RunKey) -> Result<Summary, MetricsError> {
    if runs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut grouped: BTreeMap<RunKey, Vec<&RunRecord>> = BTreeMap::new();
    for r in runs {
        grouped.entry(r.key()).or_default().push(r);
    }
    let mut out = Vec::new();
    for (key, mut group) in grouped {
        group.sort_by_key(|r| r.seed);
        let mut by_budget: BTreeMap<u64, (f64, Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for r in &group {
            for round in &r.rounds {
                // budgets are multiples of 0.1%, so a micro-unit key is exact enough
                let slot = by_budget
                    .entry((round.budget_fraction * 1e6).round() as u64)
                    .or_insert((round.budget_fraction, Vec::new(), Vec::new()));
                slot.1.push(round.test.macro_auroc);
                slot.2.push(round.test.macro_auprc);
            }
        }
        out.push(RunSummary {
            method: key.method.to_string(),
            sampler: key.sampler.to_string(),
            seeds: group.iter().map(|r| r.seed).collect(),
            budgets: by_budget
                .into_values()
                .map(|(budget, a, p)| BudgetSummary {
                    budget,
                    macro_auroc: MeanStd::of(&a),
                    macro_auprc: MeanStd::of(&p),
                })
                .collect(),
            final_auroc_gain: final_macro_gain(runs, &key, baseline, false),
            final_auprc_gain: final_macro_gain(runs, &key, baseline, true),
        });
    }
    Ok(Summary {
        baseline: baseline.to_string(),
        runs: out,
    })
}

fn fmt_real(v: f64) -> String {
    format!("{v:.6}")
}

/// Budget-curve table, one row per (method, sampler, seed, budget).
pub fn budget_curves_csv(runs: &[RunRecord]) -> String {
    let mut rows: Vec<(RunKey, u64, f64, f64, f64)> = runs
        .iter()
        .flat_map(|r| {
            r.rounds.iter().map(move |round| {
                (
                    r.key(),
                    r.seed,
                    round.budget_fraction,
                    round.test.macro_auroc,
                    round.test.macro_auprc,
                )
            })
        })
        .collect();
    rows.sort_by(|a, b| (&a.0, a.1).cmp(&(&b.0, b.1)).then(a.2.total_cmp(&b.2)));
    let mut out = String::from("method,sampler,seed,budget,macro_auroc,macro_auprc\n");
    for (key, seed, budget, auroc, auprc) in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            key.method,
            key.sampler,
            seed,
            fmt_real(budget),
            fmt_real(auroc),
            fmt_real(auprc)
        );
    }
    out
}

pub fn class_gains_csv(table: &GainTable) -> String {
    let mut out = String::from("class,prevalence");
    for key in &table.columns {
        let _ = write!(out, ",{key}");
    }
    out.push('\n');
    for (row, &class) in table.classes.iter().enumerate() {
        let _ = write!(out, "{class},{}", fmt_real(table.prevalence[row]));
        for g in &table.gains[row] {
            match g {
                Some(v) => {
                    let _ = write!(out, ",{}", fmt_real(*v));
                }
                None => out.push_str(",nan"),
            }
        }
        out.push('\n');
    }
    out
}

/// Writes `budget_curves.csv`, `class_gains.csv` and `summary.json` into
/// `out_dir`. Output is a pure function of the inputs.
pub fn emit_reports(
    runs: &[RunRecord],
    baseline: &RunKey,
    test_prevalence: &[f64],
    out_dir: &Path,
) -> Result<Summary, MetricsError> {
    if runs.is_empty() {
        return Err(MetricsError::Empty);
    }
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("budget_curves.csv"), budget_curves_csv(runs))?;
    let gains = class_gain_table(runs, baseline, test_prevalence, false)?;
    fs::write(out_dir.join("class_gains.csv"), class_gains_csv(&gains))?;
    let summary = summarize(runs, baseline)?;
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    fs::write(out_dir.join("summary.json"), json)?;
    Ok(summary)
}
