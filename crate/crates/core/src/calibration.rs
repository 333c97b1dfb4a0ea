//! Strong-calibration audit: a score-based CUSUM statistic over an ensemble of
//! residual models, Monte Carlo p-values under a perfect-calibration null, and
//! permutation variable importance.
//!
//! For residual model `k` with predicted residuals `ĝ_k(x) = p̂0_k(x) − p̂_δ(x)`
//! the underestimation statistic is
//!
//! ```text
//! T_k = (1/n2) Σ_i (Y_i − p̂_δ(x_i)) · ĝ_k(x_i) · 1{ĝ_k(x_i) > 0}
//! ```
//!
//! and the overestimation statistic is its mirror over rows with `ĝ_k < 0`,
//! `(1/n2) Σ_i (p̂_δ(x_i) − Y_i) · (−ĝ_k(x_i)) · 1{ĝ_k(x_i) < 0}`. The test
//! statistic is `max_k T_k`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{design_matrix, ColumnOrigin, AuditDataset, FeatureBlocks, FeatureMatrix};
use crate::error::{AuditError, Result};
use crate::residual::{default_grid, ResidualEnsemble, ResidualModelConfig};
use crate::rng::{substream, Purpose};

/// Significance level of the audit.
pub const ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Predicted risk above the true risk for some subgroup.
    Overestimation,
    /// Predicted risk below the true risk for some subgroup.
    Underestimation,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::Overestimation, Direction::Underestimation];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Overestimation => "overestimation",
            Direction::Underestimation => "underestimation",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "over" | "overestimation" => Ok(Direction::Overestimation),
            "under" | "underestimation" => Ok(Direction::Underestimation),
            other => Err(AuditError::InvalidArgument(format!("unknown direction `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Fit residual models on a fraction of the rows, evaluate on the rest.
    Split { n1_fraction: f64 },
    /// Fit on fold complements, evaluate every held-out fold.
    CvScore { folds: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    /// Tolerance δ added to (under) or subtracted from (over) the scores.
    pub delta: f64,
    pub direction: Direction,
    pub variant: Variant,
    pub mc_replicates: usize,
    pub vi_permutations: usize,
    pub seed: u64,
    pub configs: Vec<ResidualModelConfig>,
    /// Feed embeddings to the residual models when the dataset has them.
    pub use_embeddings: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            delta: 0.0,
            direction: Direction::Overestimation,
            variant: Variant::CvScore { folds: 5 },
            mc_replicates: 1000,
            vi_permutations: 50,
            seed: 0,
            configs: default_grid(),
            use_embeddings: true,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AuditError::InvalidConfig(m));
        if !(0.0..1.0).contains(&self.delta) {
            return bad(format!("delta {} outside [0, 1)", self.delta));
        }
        match self.variant {
            Variant::Split { n1_fraction } if !(n1_fraction > 0.0 && n1_fraction < 1.0) => {
                return bad(format!("n1_fraction {n1_fraction} outside (0, 1)"));
            }
            Variant::CvScore { folds } if folds < 2 => {
                return bad(format!("folds {folds} < 2"));
            }
            _ => {}
        }
        if self.mc_replicates < 100 {
            return bad(format!("mc_replicates {} < 100", self.mc_replicates));
        }
        if self.vi_permutations < 10 {
            return bad(format!("vi_permutations {} < 10", self.vi_permutations));
        }
        if self.configs.is_empty() {
            return bad("empty residual model grid".into());
        }
        for c in &self.configs {
            c.validate()?;
        }
        Ok(())
    }

    fn blocks(&self, ds: &AuditDataset) -> FeatureBlocks {
        FeatureBlocks::residual_inputs(self.use_embeddings && ds.embedding_dim().is_some_and(|d| d > 0))
    }
}

/// `score + δ` (under) or `score − δ` (over), clipped to [0, 1].
pub fn shifted_prediction(score: f64, delta: f64, direction: Direction) -> f64 {
    match direction {
        Direction::Underestimation => (score + delta).clamp(0.0, 1.0),
        Direction::Overestimation => (score - delta).clamp(0.0, 1.0),
    }
}

/// `ĝ_k(x_i) = p̂0_k(x_i) − shifted_i` for every member of the ensemble.
pub fn residual_scores(ens: &ResidualEnsemble, rows: &FeatureMatrix, shifted: &[f64]) -> Result<Vec<Vec<f64>>> {
    if shifted.len() != rows.n_rows() {
        return Err(AuditError::LengthMismatch(format!(
            "{} shifted scores for {} rows",
            shifted.len(),
            rows.n_rows()
        )));
    }
    let rates = ens.predict(rows)?;
    Ok(subtract_shifted(rates, shifted))
}

fn subtract_shifted(rates: Vec<Vec<f64>>, shifted: &[f64]) -> Vec<Vec<f64>> {
    rates
        .into_iter()
        .map(|r| r.into_iter().zip(shifted).map(|(p, s)| p - s).collect())
        .collect()
}

/// Running CUSUM of one residual model over the evaluation rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CusumTrajectory {
    pub member_id: usize,
    /// One entry per evaluation row; rows outside the indicator add 0.
    pub partial_sums: Vec<f64>,
    /// Last partial sum divided by the number of evaluation rows.
    pub final_stat: f64,
}

#[inline]
fn term(y: bool, s: f64, g: f64, direction: Direction) -> f64 {
    let y = if y { 1.0 } else { 0.0 };
    match direction {
        Direction::Underestimation if g > 0.0 => (y - s) * g,
        Direction::Overestimation if g < 0.0 => (s - y) * (-g),
        _ => 0.0,
    }
}

fn member_sum(outcomes: &[bool], shifted: &[f64], g: &[f64], direction: Direction) -> f64 {
    let mut acc = 0.0;
    for ((&y, &s), &gi) in outcomes.iter().zip(shifted).zip(g) {
        acc += term(y, s, gi, direction);
    }
    acc
}

fn max_stat_of(outcomes: &[bool], shifted: &[f64], ghat: &[Vec<f64>], direction: Direction) -> f64 {
    let n = outcomes.len() as f64;
    ghat.iter()
        .map(|g| member_sum(outcomes, shifted, g, direction) / n)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn check_lengths(outcomes: &[bool], shifted: &[f64], ghat: &[Vec<f64>]) -> Result<()> {
    if outcomes.is_empty() {
        return Err(AuditError::EmptyEvaluationSet);
    }
    if ghat.is_empty() {
        return Err(AuditError::InvalidArgument("no residual scores".into()));
    }
    if shifted.len() != outcomes.len() || ghat.iter().any(|g| g.len() != outcomes.len()) {
        return Err(AuditError::LengthMismatch(
            "outcomes, shifted scores and residuals must be aligned".into(),
        ));
    }
    Ok(())
}

/// Per-member CUSUM trajectories and the max statistic over members.
pub fn cusum_statistic(
    outcomes: &[bool],
    shifted: &[f64],
    ghat: &[Vec<f64>],
    direction: Direction,
) -> Result<(Vec<CusumTrajectory>, f64)> {
    check_lengths(outcomes, shifted, ghat)?;
    let n2 = outcomes.len() as f64;
    let trajectories: Vec<CusumTrajectory> = ghat
        .iter()
        .enumerate()
        .map(|(k, g)| {
            let mut acc = 0.0;
            let partial_sums: Vec<f64> = outcomes
                .iter()
                .zip(shifted)
                .zip(g)
                .map(|((&y, &s), &gi)| {
                    acc += term(y, s, gi, direction);
                    acc
                })
                .collect();
            CusumTrajectory {
                member_id: k,
                final_stat: acc / n2,
                partial_sums,
            }
        })
        .collect();
    let max_stat = trajectories
        .iter()
        .map(|t| t.final_stat)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((trajectories, max_stat))
}

/// Add-one Monte Carlo p-value: `(#{T_b ≥ observed} + 1) / (B + 1)`.
pub fn monte_carlo_pvalue(observed: f64, null_statistics: &[f64]) -> f64 {
    let exceed = null_statistics.iter().filter(|&&t| t >= observed).count();
    (exceed + 1) as f64 / (null_statistics.len() + 1) as f64
}

/// Null distribution of the max statistic under perfect calibration: each
/// replicate redraws `Y*_i ~ Bernoulli(shifted_i)` with the residual scores
/// held fixed. Replicate `b` uses its own random stream.
pub fn simulate_null(
    shifted: &[f64],
    ghat: &[Vec<f64>],
    direction: Direction,
    replicates: usize,
    seed: u64,
) -> Vec<f64> {
    (0..replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(seed, Purpose::NullReplicate, b as u64);
            let ystar: Vec<bool> = shifted.iter().map(|&s| rng.random::<f64>() < s).collect();
            max_stat_of(&ystar, shifted, ghat, direction)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableImportance {
    pub feature: String,
    pub importance: f64,
    /// The feature is an embedding dimension rather than metadata or score.
    #[serde(default)]
    pub embedding: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationVerdict {
    pub direction: Direction,
    pub max_stat: f64,
    pub member_stats: Vec<f64>,
    pub p_value: f64,
    pub reject: bool,
    pub vi_ranking: Vec<VariableImportance>,
    pub n_eval: usize,
    pub mc_replicates: usize,
    #[serde(skip)]
    pub trajectories: Vec<CusumTrajectory>,
}

impl CalibrationVerdict {
    /// Trajectories as CSV rows `row_index,member_id,cumulative_score`.
    pub fn trajectories_csv(&self) -> String {
        trajectories_csv(&self.trajectories)
    }

    /// 1-based rank of a feature in the VI ranking.
    pub fn vi_rank(&self, feature: &str) -> Option<usize> {
        self.vi_ranking.iter().position(|v| v.feature == feature).map(|i| i + 1)
    }
}

pub fn trajectories_csv(trajectories: &[CusumTrajectory]) -> String {
    let mut out = String::from("row_index,member_id,cumulative_score\n");
    for t in trajectories {
        for (i, v) in t.partial_sums.iter().enumerate() {
            out.push_str(&format!("{i},{},{v}\n", t.member_id + 1));
        }
    }
    out
}

/// One fitted ensemble with the rows it evaluates.
#[derive(Debug, Clone)]
struct Segment {
    ensemble: ResidualEnsemble,
    features: FeatureMatrix,
    /// Predicted event rates per member on `features`.
    rates: Vec<Vec<f64>>,
}

/// Residual ensembles fitted for an audit together with their evaluation
/// rows, in chart order. Independent of the direction being tested.
#[derive(Debug, Clone)]
pub struct FittedAudit {
    segments: Vec<Segment>,
    outcomes: Vec<bool>,
    scores: Vec<f64>,
    /// Dataset row index of every evaluation row, in chart order.
    pub eval_rows: Vec<usize>,
}

impl FittedAudit {
    fn shifted(&self, delta: f64, direction: Direction) -> Vec<f64> {
        self.scores
            .iter()
            .map(|&s| shifted_prediction(s, delta, direction))
            .collect()
    }

    fn ghat(&self, shifted: &[f64]) -> Vec<Vec<f64>> {
        let k = self.segments[0].rates.len();
        let mut ghat = vec![Vec::with_capacity(shifted.len()); k];
        let mut offset = 0;
        for seg in &self.segments {
            let len = seg.features.n_rows();
            for (g, r) in ghat.iter_mut().zip(&seg.rates) {
                g.extend(r.iter().zip(&shifted[offset..offset + len]).map(|(p, s)| p - s));
            }
            offset += len;
        }
        ghat
    }

    pub fn ensembles(&self) -> impl Iterator<Item = &ResidualEnsemble> {
        self.segments.iter().map(|s| &s.ensemble)
    }

    /// Observed statistic, Monte Carlo p-value and VI for one direction.
    pub fn verdict(&self, cfg: &CalibrationConfig, direction: Direction) -> Result<CalibrationVerdict> {
        let shifted = self.shifted(cfg.delta, direction);
        let ghat = self.ghat(&shifted);
        let (trajectories, max_stat) = cusum_statistic(&self.outcomes, &shifted, &ghat, direction)?;
        let nulls = simulate_null(&shifted, &ghat, direction, cfg.mc_replicates, cfg.seed);
        let p_value = monte_carlo_pvalue(max_stat, &nulls);
        let vi_ranking = self.variable_importance(&shifted, direction, max_stat, cfg.vi_permutations, cfg.seed)?;
        Ok(CalibrationVerdict {
            direction,
            max_stat,
            member_stats: trajectories.iter().map(|t| t.final_stat).collect(),
            p_value,
            reject: p_value < ALPHA,
            vi_ranking,
            n_eval: self.outcomes.len(),
            mc_replicates: cfg.mc_replicates,
            trajectories,
        })
    }

    /// Drop in the max statistic when one feature group is permuted across
    /// the evaluation rows of each segment, averaged over `permutations`
    /// draws. Sorted by decreasing importance, ties by name.
    pub fn variable_importance(
        &self,
        shifted: &[f64],
        direction: Direction,
        observed: f64,
        permutations: usize,
        seed: u64,
    ) -> Result<Vec<VariableImportance>> {
        let base = &self.segments[0].features;
        let groups = base.groups();
        let jobs: Vec<(usize, usize)> = (0..groups.len())
            .flat_map(|g| (0..permutations).map(move |r| (g, r)))
            .collect();
        let stats = jobs
            .par_iter()
            .map(|&(g, r)| {
                let mut rng = substream(seed, Purpose::Permutation, (g * permutations + r) as u64);
                let cols = &groups[g].1;
                let mut rates: Vec<Vec<f64>> = vec![Vec::with_capacity(shifted.len()); self.segments[0].rates.len()];
                for seg in &self.segments {
                    let n = seg.features.n_rows();
                    let mut perm: Vec<usize> = (0..n).collect();
                    perm.shuffle(&mut rng);
                    let mut permuted = seg.features.clone();
                    for &j in cols {
                        let src = seg.features.column(j);
                        let dst = permuted.column_mut(j);
                        for (d, &p) in dst.iter_mut().zip(&perm) {
                            *d = src[p];
                        }
                    }
                    for (acc, r) in rates.iter_mut().zip(seg.ensemble.predict(&permuted)?) {
                        acc.extend(r);
                    }
                }
                let ghat = subtract_shifted(rates, shifted);
                let st = max_stat_of(&self.outcomes, shifted, &ghat, direction);
                Ok(st)
            })
            .collect::<Result<Vec<f64>>>()?;
        let mut ranking: Vec<VariableImportance> = groups
            .iter()
            .enumerate()
            .map(|(g, (name, cols))| {
                let permuted = &stats[g * permutations..(g + 1) * permutations];
                let mean = permuted.iter().sum::<f64>() / permutations as f64;
                VariableImportance {
                    feature: name.clone(),
                    importance: observed - mean,
                    embedding: cols.iter().any(|&j| matches!(base.columns()[j].origin, ColumnOrigin::Embedding { .. })),
                }
            })
            .collect();
        ranking.sort_by(|a, b| {
            b.importance
                .total_cmp(&a.importance)
                .then_with(|| a.feature.cmp(&b.feature))
        });
        Ok(ranking)
    }
}

fn has_both_classes(ds: &AuditDataset, rows: &[usize]) -> bool {
    let recs = ds.records();
    rows.iter().any(|&i| recs[i].outcome) && rows.iter().any(|&i| !recs[i].outcome)
}

fn fit_segment(
    ds: &AuditDataset,
    cfg: &CalibrationConfig,
    fit_rows: &[usize],
    eval_rows: &[usize],
) -> Result<Segment> {
    let blocks = cfg.blocks(ds);
    let train = ds.subset(fit_rows);
    let fit_fm = design_matrix(&train, blocks, None)?;
    let ensemble = ResidualEnsemble::fit(&fit_fm, &train.outcomes(), &cfg.configs, blocks)?;
    let features = design_matrix(&ds.subset(eval_rows), blocks, Some(fit_fm.stats()))?;
    let rates = ensemble.predict(&features)?;
    Ok(Segment {
        ensemble,
        features,
        rates,
    })
}

/// Fits the split variant on explicit fit/evaluation rows.
pub fn fit_split(ds: &AuditDataset, cfg: &CalibrationConfig, fit_rows: &[usize], eval_rows: &[usize]) -> Result<FittedAudit> {
    cfg.validate()?;
    if fit_rows.len() < 2 {
        return Err(AuditError::SplitTooSmall(format!("{} fitting rows", fit_rows.len())));
    }
    if eval_rows.is_empty() {
        return Err(AuditError::SplitTooSmall("no evaluation rows".into()));
    }
    if !has_both_classes(ds, fit_rows) {
        return Err(AuditError::SplitTooSmall("fitting rows contain a single class".into()));
    }
    let segment = fit_segment(ds, cfg, fit_rows, eval_rows)?;
    let recs = ds.records();
    Ok(FittedAudit {
        segments: vec![segment],
        outcomes: eval_rows.iter().map(|&i| recs[i].outcome).collect(),
        scores: eval_rows.iter().map(|&i| recs[i].score).collect(),
        eval_rows: eval_rows.to_vec(),
    })
}

/// Seeded shuffle followed by the `n1_fraction` cut.
pub fn split_rows(n: usize, n1_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, Purpose::Split, 0));
    let n1 = ((n as f64) * n1_fraction).round() as usize;
    let eval = order.split_off(n1.min(n));
    (order, eval)
}

/// Seeded balanced fold labels.
pub fn fold_labels(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, Purpose::Folds, 0));
    let mut labels = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        labels[i] = pos % folds;
    }
    labels
}

/// Fits the cross-validated variant with explicit fold labels. Evaluation
/// rows are charted fold by fold, in dataset order within a fold.
pub fn fit_cv(ds: &AuditDataset, cfg: &CalibrationConfig, fold_of: &[usize]) -> Result<FittedAudit> {
    cfg.validate()?;
    if fold_of.len() != ds.len() {
        return Err(AuditError::LengthMismatch(format!(
            "{} fold labels for {} rows",
            fold_of.len(),
            ds.len()
        )));
    }
    let folds = fold_of.iter().max().map_or(0, |m| m + 1);
    if folds < 2 {
        return Err(AuditError::InvalidConfig("at least two folds are required".into()));
    }
    let mut plans = Vec::with_capacity(folds);
    for f in 0..folds {
        let held: Vec<usize> = (0..ds.len()).filter(|&i| fold_of[i] == f).collect();
        let train: Vec<usize> = (0..ds.len()).filter(|&i| fold_of[i] != f).collect();
        if held.is_empty() || train.len() < 2 || !has_both_classes(ds, &train) {
            return Err(AuditError::FoldDegenerate { fold: f });
        }
        plans.push((train, held));
    }
    let segments = plans
        .par_iter()
        .map(|(train, held)| fit_segment(ds, cfg, train, held))
        .collect::<Result<Vec<_>>>()?;
    let eval_rows: Vec<usize> = plans.iter().flat_map(|(_, held)| held.iter().copied()).collect();
    let recs = ds.records();
    Ok(FittedAudit {
        segments,
        outcomes: eval_rows.iter().map(|&i| recs[i].outcome).collect(),
        scores: eval_rows.iter().map(|&i| recs[i].score).collect(),
        eval_rows,
    })
}

/// Fits residual ensembles as `cfg.variant` prescribes.
pub fn fit_audit(ds: &AuditDataset, cfg: &CalibrationConfig) -> Result<FittedAudit> {
    cfg.validate()?;
    match cfg.variant {
        Variant::Split { n1_fraction } => {
            let (fit_rows, eval_rows) = split_rows(ds.len(), n1_fraction, cfg.seed);
            fit_split(ds, cfg, &fit_rows, &eval_rows)
        }
        Variant::CvScore { folds } => {
            if folds > ds.len() {
                return Err(AuditError::InvalidConfig(format!(
                    "{folds} folds for {} rows",
                    ds.len()
                )));
            }
            fit_cv(ds, cfg, &fold_labels(ds.len(), folds, cfg.seed))
        }
    }
}

/// Split-variant audit in `cfg.direction`.
pub fn run_split_audit(ds: &AuditDataset, cfg: &CalibrationConfig) -> Result<CalibrationVerdict> {
    let n1_fraction = match cfg.variant {
        Variant::Split { n1_fraction } => n1_fraction,
        Variant::CvScore { .. } => 0.5,
    };
    let cfg = CalibrationConfig {
        variant: Variant::Split { n1_fraction },
        ..cfg.clone()
    };
    fit_audit(ds, &cfg)?.verdict(&cfg, cfg.direction)
}

/// Cross-validated audit in `cfg.direction`.
pub fn run_cv_audit(ds: &AuditDataset, cfg: &CalibrationConfig) -> Result<CalibrationVerdict> {
    let folds = match cfg.variant {
        Variant::CvScore { folds } => folds,
        Variant::Split { .. } => 5,
    };
    let cfg = CalibrationConfig {
        variant: Variant::CvScore { folds },
        ..cfg.clone()
    };
    fit_audit(ds, &cfg)?.verdict(&cfg, cfg.direction)
}

/// Audits the given directions, sharing the residual fits between them.
pub fn run_audit(ds: &AuditDataset, cfg: &CalibrationConfig, directions: &[Direction]) -> Result<Vec<CalibrationVerdict>> {
    let fitted = fit_audit(ds, cfg)?;
    directions.iter().map(|&d| fitted.verdict(cfg, d)).collect()
}
