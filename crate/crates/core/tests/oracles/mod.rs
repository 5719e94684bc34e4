//! Brute-force reference implementations used by the property tests and the
//! acceptance suite. Each is written for clarity, not speed.
#![allow(dead_code)]

use proq_core::model::{self, Batch, ModelConfig, ModelParams, Objective};
use proq_core::DateTime;

/// P(s_pos > s_neg) + P(tie) / 2 by counting every positive/negative pair.
pub fn roc_auc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &yi) in labels.iter().enumerate() {
        for (j, &yj) in labels.iter().enumerate() {
            if yi == 1 && yj == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Area under the precision-recall steps: every distinct score is tried as a
/// threshold (predict positive when score >= t), highest first, and each
/// recall increase is weighted by the precision at that threshold.
pub fn pr_auc_exhaustive(scores: &[f64], labels: &[u8]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let n_pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for t in thresholds {
        let tp = scores.iter().zip(labels).filter(|(s, y)| **s >= t && **y == 1).count() as f64;
        let predicted = scores.iter().filter(|s| **s >= t).count() as f64;
        let recall = tp / n_pos;
        area += (recall - prev_recall) * (tp / predicted);
        prev_recall = recall;
    }
    area
}

/// (tp, fp, tn, fn) at `score >= threshold`.
pub fn confusion_counts(scores: &[f64], labels: &[u8], threshold: f64) -> (usize, usize, usize, usize) {
    let mut c = (0, 0, 0, 0);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, false) => c.2 += 1,
            (false, true) => c.3 += 1,
        }
    }
    c
}

/// Earliest i such that measurements i..=j all satisfy `holds` and span at
/// least `days`, checking every (i, j) pair.
pub fn persistence_all_pairs(series: &[(DateTime, f64)], days: i64, holds: impl Fn(f64) -> bool) -> Option<DateTime> {
    for i in 0..series.len() {
        for j in i..series.len() {
            let all = series[i..=j].iter().all(|&(_, v)| holds(v));
            if all && series[j].0 - series[i].0 >= chrono::TimeDelta::days(days) {
                return Some(series[i].0);
            }
        }
    }
    None
}

/// Nearest-rank 10th..90th percentiles from a fresh sort.
pub fn decile_cuts(values: &[f64]) -> [f64; 9] {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut cuts = [0.0; 9];
    for (k, c) in cuts.iter_mut().enumerate() {
        let rank = ((10 * (k + 1) * n) as f64 / 100.0).ceil().max(1.0) as usize;
        *c = sorted[rank - 1];
    }
    cuts
}

pub fn bucket_of(cuts: &[f64; 9], value: f64) -> u8 {
    1 + cuts.iter().filter(|&&c| c < value).count() as u8
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Central differences on every coordinate. Relative error is
/// |a - n| / max(|a|, |n|, floor).
pub fn gradient_check(params: &ModelParams, batch: &Batch, objective: Objective, eps: f64, floor: f64) -> GradCheck {
    let analytic = model::backward(params, batch, objective).expect("backward");
    let mut probe = params.clone();
    let mut out = GradCheck { max_rel_err: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0, checked: 0 };
    for i in 0..params.values.len() {
        let x = params.values[i];
        probe.values[i] = x + eps;
        let up = model::forward(&probe, batch, objective).expect("forward").loss;
        probe.values[i] = x - eps;
        let down = model::forward(&probe, batch, objective).expect("forward").loss;
        probe.values[i] = x;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        if rel > out.max_rel_err {
            out = GradCheck { max_rel_err: rel, worst_index: i, analytic: a, numeric, checked: out.checked };
        }
        out.checked += 1;
    }
    out
}

/// Desk-scale width at sequence length 12, batch 2, with LayerNorm and bias
/// vectors moved off their trivial init so their gradients are exercised.
pub fn gradient_fixture(tie: bool) -> (ModelParams, Batch) {
    let cfg = ModelConfig { max_len: 12, dropout_p: 0.0, tie_mlm_weights: tie, ..ModelConfig::desk_scale(24) };
    let mut params = ModelParams::init(&cfg, 11).expect("valid config");
    for spec in params.layout.tensors.clone() {
        if spec.rows == 1 {
            for i in spec.range() {
                params.values[i] += 0.3 * (1.7 * i as f64 + 0.3).sin();
            }
        }
    }
    let row = |ids: &[u32], real: usize| {
        let mut ids = ids.to_vec();
        ids.resize(12, 0);
        let mask: Vec<u8> = (0..12).map(|i| u8::from(i < real)).collect();
        (ids, mask)
    };
    let a = row(&[1, 7, 2, 9, 3, 11, 14, 5, 20, 6, 8, 23], 12);
    let b = row(&[1, 6, 2, 3, 13, 17, 4, 22], 8);
    let batch = Batch::from_rows(&[(&a.0, &a.1), (&b.0, &b.1)]).expect("valid rows");
    let mut targets = vec![None; 24];
    targets[4] = Some(10);
    targets[9] = Some(6);
    targets[12 + 3] = Some(15);
    (params, batch.with_targets(targets).with_labels(vec![1, 0]))
}
