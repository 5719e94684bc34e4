//! Discrimination and confusion-matrix metrics for binary classifiers.

use alloc::vec::Vec;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("roc-auc needs both classes (positives {n_pos}, negatives {n_neg})")]
    SingleClass { n_pos: usize, n_neg: usize },
    #[error("pr-auc needs at least one positive")]
    NoPositives,
    #[error("scores must be finite")]
    NonFinite,
    #[error("labels must be 0 or 1")]
    BadLabel,
}

fn check(scores: &[f64], labels: &[u8]) -> Result<(usize, usize), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(MetricError::BadLabel);
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    Ok((n_pos, labels.len() - n_pos))
}

/// Indices sorted by ascending score.
fn ascending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    order
}

/// Mann-Whitney form: P(s_pos > s_neg) + P(tie) / 2, from mid-ranks.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    let (n_pos, n_neg) = check(scores, labels)?;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass { n_pos, n_neg });
    }
    let order = ascending(scores);
    // Sum of doubled mid-ranks keeps everything integral.
    let mut doubled_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1, mid-rank (i + j + 2) / 2.
        let doubled_mid = (i + j + 2) as u64;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        doubled_rank_sum += doubled_mid * pos_in_group;
        i = j + 1;
    }
    let n_pos_u = n_pos as u64;
    let doubled_u = doubled_rank_sum - n_pos_u * (n_pos_u + 1);
    Ok(doubled_u as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Step-integrated area under the precision-recall curve: the sum over
/// distinct score thresholds (descending) of ΔRecall × precision.
pub fn pr_auc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    let (n_pos, _) = check(scores, labels)?;
    if n_pos == 0 {
        return Err(MetricError::NoPositives);
    }
    let mut order = ascending(scores);
    order.reverse();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

/// Ratios that hit 0/0 and were reported as 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Degenerate {
    pub accuracy: bool,
    pub specificity: bool,
    pub precision: bool,
    pub recall: bool,
    pub f1: bool,
}

impl Degenerate {
    pub fn any(&self) -> bool {
        self.accuracy || self.specificity || self.precision || self.recall || self.f1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub threshold: f64,
    pub accuracy: f64,
    pub specificity: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: Degenerate,
}

fn ratio(num: f64, den: f64, flag: &mut bool) -> f64 {
    if den == 0.0 {
        *flag = true;
        0.0
    } else {
        num / den
    }
}

/// Predicts positive iff `score >= threshold`.
pub fn confusion_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Confusion, MetricError> {
    check(scores, labels)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let mut d = Degenerate::default();
    let n = (tp + fp + tn + fn_) as f64;
    let accuracy = ratio((tp + tn) as f64, n, &mut d.accuracy);
    let specificity = ratio(tn as f64, (tn + fp) as f64, &mut d.specificity);
    let precision = ratio(tp as f64, (tp + fp) as f64, &mut d.precision);
    let recall = ratio(tp as f64, (tp + fn_) as f64, &mut d.recall);
    let f1 = ratio(2.0 * precision * recall, precision + recall, &mut d.f1);
    Ok(Confusion { tp, fp, tn, fn_, threshold, accuracy, specificity, precision, recall, f1, degenerate: d })
}

/// One row of an evaluation table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub roc_auc: f64,
    pub pr_auc: f64,
    pub accuracy: f64,
    pub specificity: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub degenerate: bool,
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

impl MetricReport {
    pub fn compute(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Self, MetricError> {
        let (n_pos, n_neg) = check(scores, labels)?;
        let c = confusion_metrics(scores, labels, threshold)?;
        Ok(MetricReport {
            roc_auc: roc_auc(scores, labels)?,
            pr_auc: pr_auc(scores, labels)?,
            accuracy: c.accuracy,
            specificity: c.specificity,
            precision: c.precision,
            recall: c.recall,
            f1: c.f1,
            threshold,
            n_pos,
            n_neg,
            degenerate: c.degenerate.any(),
        })
    }

    /// Element-wise mean of several reports; counts are summed.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        let n = reports.len() as f64;
        let first = reports.first()?;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(MetricReport {
            roc_auc: avg(|r| r.roc_auc),
            pr_auc: avg(|r| r.pr_auc),
            accuracy: avg(|r| r.accuracy),
            specificity: avg(|r| r.specificity),
            precision: avg(|r| r.precision),
            recall: avg(|r| r.recall),
            f1: avg(|r| r.f1),
            threshold: first.threshold,
            n_pos: reports.iter().map(|r| r.n_pos).sum(),
            n_neg: reports.iter().map(|r| r.n_neg).sum(),
            degenerate: reports.iter().any(|r| r.degenerate),
        })
    }
}
