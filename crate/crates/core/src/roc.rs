//! Empirical AUROC, DeLong comparisons and operating-point metrics.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{AuditError, Result};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959964;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMode {
    /// Paired scores from two models on one population.
    Correlated,
    /// Scores from two independent samples.
    Uncorrelated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocComparison {
    pub auc_a: f64,
    pub auc_b: f64,
    pub diff: f64,
    pub variance: f64,
    pub z: f64,
    pub p_value: f64,
    pub ci95: (f64, f64),
    pub mode: CorrelationMode,
}

impl RocComparison {
    fn from_variance(auc_a: f64, auc_b: f64, variance: f64, mode: CorrelationMode) -> Self {
        let diff = auc_a - auc_b;
        let variance = variance.max(0.0);
        let (z, p_value) = if variance < 1e-15 && diff == 0.0 {
            (0.0, 1.0)
        } else if variance == 0.0 {
            (diff.signum() * f64::INFINITY, 0.0)
        } else {
            let z = diff / variance.sqrt();
            (z, two_sided_p(z))
        };
        let half = Z_95 * variance.sqrt();
        RocComparison {
            auc_a,
            auc_b,
            diff,
            variance,
            z,
            p_value,
            ci95: (diff - half, diff + half),
            mode,
        }
    }
}

/// `2·(1 − Φ(|z|))`, evaluated through `erfc` to keep precision in the tail.
pub fn two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

/// Significance band used by the comparison tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignificanceBand {
    Significant,
    Marginal,
    None,
}

impl SignificanceBand {
    pub fn of(p: f64) -> Self {
        if p < 0.05 {
            SignificanceBand::Significant
        } else if p <= 0.1 {
            SignificanceBand::Marginal
        } else {
            SignificanceBand::None
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SignificanceBand::Significant => "significant",
            SignificanceBand::Marginal => "marginal",
            SignificanceBand::None => "",
        }
    }
}

fn check_aligned(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(AuditError::LengthMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    Ok(())
}

fn split_by_class(scores: &[f64], labels: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_aligned(scores, labels)?;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (&s, &y) in scores.iter().zip(labels) {
        if y {
            pos.push(s);
        } else {
            neg.push(s);
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(AuditError::DegenerateLabels);
    }
    Ok((pos, neg))
}

/// Number of elements of the sorted slice below `x`, plus half of those equal to it.
fn below_plus_half_ties(sorted: &[f64], x: f64) -> f64 {
    let lo = sorted.partition_point(|&v| v < x);
    let hi = sorted.partition_point(|&v| v <= x);
    lo as f64 + 0.5 * (hi - lo) as f64
}

/// Empirical AUROC (the normalized Mann-Whitney U statistic) with ties counted
/// as one half. Runs in O(N log N) via midranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_aligned(scores, labels)?;
    let m = labels.iter().filter(|&&y| y).count();
    let n = labels.len() - m;
    if m == 0 || n == 0 {
        return Err(AuditError::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_tie = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum_pos += mid * pos_in_tie as f64;
        i = j + 1;
    }
    let (m, n) = (m as f64, n as f64);
    Ok((rank_sum_pos - m * (m + 1.0) / 2.0) / (m * n))
}

/// DeLong structural components: `v10` per positive (fraction of negatives
/// it outranks) and `v01` per negative (fraction of positives outranking it).
pub fn structural_components(scores: &[f64], labels: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (pos, neg) = split_by_class(scores, labels)?;
    let mut pos_sorted = pos.clone();
    pos_sorted.sort_by(f64::total_cmp);
    let mut neg_sorted = neg.clone();
    neg_sorted.sort_by(f64::total_cmp);
    let (m, n) = (pos.len() as f64, neg.len() as f64);
    let v10 = pos
        .iter()
        .map(|&x| below_plus_half_ties(&neg_sorted, x) / n)
        .collect();
    // positives above y plus half ties = m − (below + half ties)
    let v01 = neg
        .iter()
        .map(|&y| (m - below_plus_half_ties(&pos_sorted, y)) / m)
        .collect();
    Ok((v10, v01))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample covariance with the n − 1 denominator.
fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() - 1) as f64
}

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let m = labels.iter().filter(|&&y| y).count();
    (m, labels.len() - m)
}

fn require_two_per_class(labels: &[bool]) -> Result<()> {
    let (m, n) = class_counts(labels);
    if m == 0 || n == 0 {
        return Err(AuditError::DegenerateLabels);
    }
    if m < 2 || n < 2 {
        return Err(AuditError::TooFewPerClass {
            positives: m,
            negatives: n,
        });
    }
    Ok(())
}

/// DeLong's test for two models scored on the same subjects.
pub fn delong_correlated(scores_a: &[f64], scores_b: &[f64], labels: &[bool]) -> Result<RocComparison> {
    if scores_a.len() != scores_b.len() {
        return Err(AuditError::LengthMismatch(format!(
            "{} vs {} paired scores",
            scores_a.len(),
            scores_b.len()
        )));
    }
    check_aligned(scores_a, labels)?;
    require_two_per_class(labels)?;
    let (v10_a, v01_a) = structural_components(scores_a, labels)?;
    let (v10_b, v01_b) = structural_components(scores_b, labels)?;
    let (m, n) = (v10_a.len() as f64, v01_a.len() as f64);
    let s10 = covariance(&v10_a, &v10_a) + covariance(&v10_b, &v10_b) - 2.0 * covariance(&v10_a, &v10_b);
    let s01 = covariance(&v01_a, &v01_a) + covariance(&v01_b, &v01_b) - 2.0 * covariance(&v01_a, &v01_b);
    let variance = s10 / m + s01 / n;
    Ok(RocComparison::from_variance(
        mean(&v10_a),
        mean(&v10_b),
        variance,
        CorrelationMode::Correlated,
    ))
}

/// AUROC and its DeLong variance for a single sample.
pub fn auroc_with_variance(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    check_aligned(scores, labels)?;
    require_two_per_class(labels)?;
    let (v10, v01) = structural_components(scores, labels)?;
    let var = covariance(&v10, &v10) / v10.len() as f64 + covariance(&v01, &v01) / v01.len() as f64;
    Ok((mean(&v10), var))
}

/// DeLong's test for AUROCs estimated on two independent samples.
pub fn delong_uncorrelated(
    scores_a: &[f64],
    labels_a: &[bool],
    scores_b: &[f64],
    labels_b: &[bool],
) -> Result<RocComparison> {
    let (auc_a, var_a) = auroc_with_variance(scores_a, labels_a)?;
    let (auc_b, var_b) = auroc_with_variance(scores_b, labels_b)?;
    Ok(RocComparison::from_variance(
        auc_a,
        auc_b,
        var_a + var_b,
        CorrelationMode::Uncorrelated,
    ))
}

/// Decision rule: predict positive iff `score >= threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
}

/// The largest threshold among observed scores (and 0) whose sensitivity on
/// this population reaches `target_sens`.
pub fn operating_threshold(scores: &[f64], labels: &[bool], target_sens: f64) -> Result<OperatingPoint> {
    check_aligned(scores, labels)?;
    if !(target_sens > 0.0 && target_sens <= 1.0) {
        return Err(AuditError::InvalidArgument(format!(
            "target sensitivity {target_sens} outside (0, 1]"
        )));
    }
    let mut pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() {
        return Err(AuditError::DegenerateLabels);
    }
    pos.sort_by(|a, b| b.total_cmp(a));
    let m = pos.len();
    // smallest count of captured positives meeting the target
    let k = (1..=m)
        .find(|&k| k as f64 / m as f64 >= target_sens)
        .unwrap_or(m);
    // the k-th largest positive score is the largest cut capturing k positives;
    // tied scores only raise the capture count
    Ok(OperatingPoint {
        threshold: pos[k - 1],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionSummary {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionSummary {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    /// `None` when the subgroup has no positives.
    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `None` when the subgroup has no negatives.
    pub fn specificity(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn confusion_at(scores: &[f64], labels: &[bool], op: OperatingPoint) -> Result<ConfusionSummary> {
    check_aligned(scores, labels)?;
    let mut c = ConfusionSummary {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= op.threshold, y) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labeled(pos: &[f64], neg: &[f64]) -> (Vec<f64>, Vec<bool>) {
        let scores = pos.iter().chain(neg).copied().collect();
        let labels = pos.iter().map(|_| true).chain(neg.iter().map(|_| false)).collect();
        (scores, labels)
    }

    #[test]
    fn auroc_examples() {
        let (s, y) = labeled(&[0.9, 0.8], &[0.2, 0.1]);
        assert_eq!(auroc(&s, &y).unwrap(), 1.0);
        let (s, y) = labeled(&[0.5, 0.5, 0.5], &[0.5, 0.5]);
        assert_eq!(auroc(&s, &y).unwrap(), 0.5);
        // pairs: (0.8,0.6)=1 (0.8,0.2)=1 (0.4,0.6)=0 (0.4,0.2)=1 -> 3/4
        let (s, y) = labeled(&[0.8, 0.4], &[0.6, 0.2]);
        assert_eq!(auroc(&s, &y).unwrap(), 0.75);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(AuditError::DegenerateLabels)));
    }

    #[test]
    fn components_examples() {
        let (s, y) = labeled(&[0.9, 0.8], &[0.2, 0.1]);
        let (v10, v01) = structural_components(&s, &y).unwrap();
        assert_eq!(v10, [1.0, 1.0]);
        assert_eq!(v01, [1.0, 1.0]);
        let (s, y) = labeled(&[0.8, 0.4], &[0.6, 0.2]);
        let (v10, v01) = structural_components(&s, &y).unwrap();
        assert_eq!(v10, [1.0, 0.5]);
        assert_eq!(v01, [0.5, 1.0]);
    }

    #[test]
    fn self_comparison_is_null() {
        let (s, y) = labeled(&[0.9, 0.3, 0.7], &[0.4, 0.1, 0.35]);
        let c = delong_correlated(&s, &s, &y).unwrap();
        assert_eq!(c.diff, 0.0);
        assert_eq!(c.p_value, 1.0);
        assert_eq!(c.z, 0.0);
    }

    #[test]
    fn delong_requires_two_per_class() {
        let (s, y) = labeled(&[0.9], &[0.4, 0.1]);
        assert!(matches!(
            delong_correlated(&s, &s, &y),
            Err(AuditError::TooFewPerClass { positives: 1, negatives: 2 })
        ));
        assert!(matches!(
            delong_uncorrelated(&s, &y, &s, &y),
            Err(AuditError::TooFewPerClass { .. })
        ));
    }

    #[test]
    fn uncorrelated_copy_is_null() {
        let (s, y) = labeled(&[0.9, 0.3, 0.7], &[0.4, 0.1, 0.35]);
        let c = delong_uncorrelated(&s, &y, &s, &y).unwrap();
        assert_eq!(c.diff, 0.0);
        assert_eq!(c.p_value, 1.0);
    }

    #[test]
    fn threshold_examples() {
        // candidate cuts 0.9 (sens 1/3), 0.8 (2/3), 0.7 (1.0): only 0.7 reaches 0.95
        let (s, y) = labeled(&[0.9, 0.8, 0.7], &[0.1, 0.75]);
        assert_eq!(operating_threshold(&s, &y, 0.95).unwrap().threshold, 0.7);
        assert_eq!(operating_threshold(&s, &y, 1.0).unwrap().threshold, 0.7);

        let mut pos = vec![0.9; 19];
        pos.push(0.1);
        let (s, y) = labeled(&pos, &[0.5, 0.05]);
        let op = operating_threshold(&s, &y, 0.95).unwrap();
        assert_eq!(op.threshold, 0.9);
        assert_eq!(confusion_at(&s, &y, op).unwrap().sensitivity(), Some(0.95));
    }

    #[test]
    fn confusion_boundaries() {
        let (s, y) = labeled(&[0.9, 0.6], &[0.4, 0.1, 0.7]);
        let all = confusion_at(&s, &y, OperatingPoint { threshold: 0.0 }).unwrap();
        assert_eq!(all.fp, 3);
        assert_eq!(all.specificity(), Some(0.0));
        let none = confusion_at(&s, &y, OperatingPoint { threshold: 1.5 }).unwrap();
        assert_eq!(none.fp, 0);
        assert_eq!(none.sensitivity(), Some(0.0));
        assert_eq!(none.total(), 5);
        let no_pos = confusion_at(&[0.3], &[false], OperatingPoint { threshold: 0.5 }).unwrap();
        assert_eq!(no_pos.sensitivity(), None);
    }

    #[test]
    fn bands() {
        assert_eq!(SignificanceBand::of(0.049), SignificanceBand::Significant);
        assert_eq!(SignificanceBand::of(0.05), SignificanceBand::Marginal);
        assert_eq!(SignificanceBand::of(0.1), SignificanceBand::Marginal);
        assert_eq!(SignificanceBand::of(0.1000001), SignificanceBand::None);
    }
}
