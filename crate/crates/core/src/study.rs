//! Seeded power and type-I studies over synthetic populations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{run_audit, CalibrationConfig};
use crate::data::{matching_rows, SubgroupFilter};
use crate::error::{AuditError, Result};
use crate::roc::delong_uncorrelated;
use crate::rng::{derive_seed, Purpose};
use crate::synth::{generate, planted_miscalibration_truth, PopulationSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyTest {
    /// Calibration audit of the primary model in `audit.direction`; the
    /// audit seed is replaced by the trial seed.
    Calibration {
        #[serde(default)]
        audit: CalibrationConfig,
    },
    /// Uncorrelated DeLong test between `filter` and its complement.
    Discrimination {
        filter: SubgroupFilter,
        #[serde(default)]
        model: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub population: PopulationSpec,
    pub trials: usize,
    pub test: StudyTest,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    0.05
}

impl StudyConfig {
    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AuditError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub p_value: f64,
    pub reject: bool,
    /// Whether an attribute of the planted subgroup is among the three most
    /// important features; calibration studies with a planted bias only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub planted_in_top3: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSummary {
    pub trials: usize,
    pub rejections: usize,
    pub rejection_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub planted_top3: Option<usize>,
    pub results: Vec<TrialResult>,
}

/// Seed of trial `t`; used both for the population and the audit.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    derive_seed(seed, Purpose::Trial, trial as u64)
}

fn run_trial(study: &StudyConfig, seed: u64, trial: usize) -> Result<TrialResult> {
    let trial_seed = trial_seed(seed, trial);
    let spec = PopulationSpec {
        seed: trial_seed,
        ..study.population.clone()
    };
    let generated = generate(&spec)?;
    let ds = &generated.dataset;
    match &study.test {
        StudyTest::Calibration { audit } => {
            let cfg = CalibrationConfig {
                seed: trial_seed,
                ..audit.clone()
            };
            let verdict = run_audit(ds, &cfg, &[cfg.direction])?.remove(0);
            let planted_in_top3 = match planted_miscalibration_truth(&spec) {
                Ok((filter, _)) => {
                    let attrs: Vec<&str> = filter.attributes().collect();
                    Some(verdict.vi_ranking.iter().take(3).any(|v| attrs.contains(&v.feature.as_str())))
                }
                Err(_) => None,
            };
            Ok(TrialResult {
                trial,
                seed: trial_seed,
                p_value: verdict.p_value,
                reject: verdict.p_value < study.alpha,
                planted_in_top3,
            })
        }
        StudyTest::Discrimination { filter, model } => {
            filter.validate(ds.attribute_schema())?;
            let model = model.clone().unwrap_or_else(|| ds.score_column().to_string());
            let scores = ds.model_scores(&model)?;
            let labels = ds.outcomes();
            let inside = matching_rows(ds, filter);
            let mut mask = vec![false; ds.len()];
            for &i in &inside {
                mask[i] = true;
            }
            let pick = |want: bool| -> (Vec<f64>, Vec<bool>) {
                (0..ds.len())
                    .filter(|&i| mask[i] == want)
                    .map(|i| (scores[i], labels[i]))
                    .unzip()
            };
            let (sa, ya) = pick(true);
            let (sb, yb) = pick(false);
            let cmp = delong_uncorrelated(&sa, &ya, &sb, &yb)?;
            Ok(TrialResult {
                trial,
                seed: trial_seed,
                p_value: cmp.p_value,
                reject: cmp.p_value < study.alpha,
                planted_in_top3: None,
            })
        }
    }
}

/// Runs every trial (in parallel) and tallies rejections.
pub fn run_study(study: &StudyConfig, seed: u64) -> Result<PowerSummary> {
    if study.trials == 0 {
        return Err(AuditError::InvalidConfig("a study needs at least one trial".into()));
    }
    if let StudyTest::Calibration { audit } = &study.test {
        audit.validate()?;
    }
    let results = (0..study.trials)
        .into_par_iter()
        .map(|t| run_trial(study, seed, t))
        .collect::<Result<Vec<_>>>()?;
    let rejections = results.iter().filter(|r| r.reject).count();
    let planted_top3 = results
        .iter()
        .map(|r| r.planted_in_top3)
        .collect::<Option<Vec<bool>>>()
        .map(|v| v.into_iter().filter(|&b| b).count());
    Ok(PowerSummary {
        trials: study.trials,
        rejections,
        rejection_rate: rejections as f64 / study.trials as f64,
        planted_top3,
        results,
    })
}
