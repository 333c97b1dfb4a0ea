//! Seeded synthetic populations with known true risks, plus brute-force
//! oracles used by the test suite.
//!
//! Generation draws from one ChaCha8 stream (`Purpose::Generate`, index 0).
//! Rows are produced in order; for every row the draws are, in sequence:
//! one per attribute in name order (categorical: one uniform against the
//! cumulative level probabilities; normal: one standard normal; uniform: one
//! uniform), one standard normal for the latent risk term, one uniform for
//! the outcome (`Y = 1` iff `u < p0`), one standard
//! normal for the primary model and then for each extra model in name order,
//! and finally one standard normal per embedding dimension.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::calibration::Direction;
use crate::data::{AttributeKind, AttributeValue, AuditDataset, AuditRecord, SubgroupFilter};
use crate::error::{AuditError, Result};
use crate::rng::{substream, Purpose};

/// Largest evaluation set accepted by [`exhaustive_null_statistic`].
pub const EXHAUSTIVE_MAX_ROWS: usize = 12;

const MAX_LOGIT: f64 = 35.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeSpec {
    Categorical { levels: Vec<String>, probs: Vec<f64> },
    Normal { mean: f64, sd: f64 },
    Uniform { low: f64, high: f64 },
}

impl AttributeSpec {
    fn kind(&self) -> AttributeKind {
        match self {
            AttributeSpec::Categorical { levels, .. } => AttributeKind::Categorical { levels: levels.clone() },
            _ => AttributeKind::Numeric,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskTerm {
    /// `coef · 1{attribute = level}`
    Level { attribute: String, level: String, coef: f64 },
    /// `coef · (attribute − center)`
    Linear {
        attribute: String,
        coef: f64,
        #[serde(default)]
        center: f64,
    },
}

/// Additive-logit true risk: `logit p0 = intercept + Σ terms + latent_sd · U`
/// with an unobserved `U ~ N(0, 1)` per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskFormula {
    pub intercept: f64,
    #[serde(default)]
    pub terms: Vec<RiskTerm>,
    #[serde(default)]
    pub latent_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreLaw {
    /// Score equals the true risk.
    TrueRisk,
    /// True risk shifted by `logit_shift` on the logit scale inside `filter`.
    Biased { filter: SubgroupFilter, logit_shift: f64 },
    /// Gaussian noise with standard deviation `sd` on the logit scale.
    Noisy { sd: f64 },
    /// Logit noise with standard deviation `noise_sd` inside `filter` only.
    DegradedAuc { filter: SubgroupFilter, noise_sd: f64 },
}

/// Embedding dimension 0 carries `signal · logit p0`; every dimension gets
/// independent `N(0, noise_sd²)` noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSpec {
    pub dim: usize,
    #[serde(default)]
    pub signal: f64,
    pub noise_sd: f64,
}

fn default_model_name() -> String {
    "model".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub n: usize,
    pub seed: u64,
    pub attributes: BTreeMap<String, AttributeSpec>,
    pub true_risk: RiskFormula,
    pub model_score_law: ScoreLaw,
    #[serde(default = "default_model_name")]
    pub model_name: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra_models: BTreeMap<String, ScoreLaw>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingSpec>,
}

impl PopulationSpec {
    /// Demographic template with sex, age and a six-level skin type.
    pub fn default_template(n: usize, seed: u64) -> Self {
        let levels = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let mut attributes = BTreeMap::new();
        attributes.insert(
            "sex".to_string(),
            AttributeSpec::Categorical {
                levels: levels(&["F", "M"]),
                probs: vec![0.5, 0.5],
            },
        );
        attributes.insert("age".to_string(), AttributeSpec::Normal { mean: 55.0, sd: 15.0 });
        attributes.insert(
            "fst".to_string(),
            AttributeSpec::Categorical {
                levels: levels(&["1", "2", "3", "4", "5", "6"]),
                probs: vec![0.1, 0.3, 0.3, 0.15, 0.1, 0.05],
            },
        );
        PopulationSpec {
            n,
            seed,
            attributes,
            true_risk: RiskFormula {
                intercept: -1.5,
                terms: vec![
                    RiskTerm::Linear {
                        attribute: "age".into(),
                        coef: 0.04,
                        center: 55.0,
                    },
                    RiskTerm::Level {
                        attribute: "sex".into(),
                        level: "M".into(),
                        coef: 0.3,
                    },
                ],
                latent_sd: 1.0,
            },
            model_score_law: ScoreLaw::TrueRisk,
            model_name: default_model_name(),
            extra_models: BTreeMap::new(),
            embedding: None,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AuditError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn attribute_kinds(&self) -> BTreeMap<String, AttributeKind> {
        self.attributes.iter().map(|(k, v)| (k.clone(), v.kind())).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AuditError::InvalidSpec(m));
        if self.n < 2 {
            return bad(format!("n = {} < 2", self.n));
        }
        for (name, attr) in &self.attributes {
            match attr {
                AttributeSpec::Categorical { levels, probs } => {
                    if levels.is_empty() || levels.len() != probs.len() {
                        return bad(format!("`{name}`: levels and probs must be nonempty and aligned"));
                    }
                    let mut sorted = levels.clone();
                    sorted.sort();
                    sorted.dedup();
                    if sorted.len() != levels.len() {
                        return bad(format!("`{name}`: duplicate levels"));
                    }
                    if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                        return bad(format!("`{name}`: probabilities must be non-negative"));
                    }
                    if (probs.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                        return bad(format!("`{name}`: probabilities must sum to 1"));
                    }
                }
                AttributeSpec::Normal { mean, sd } => {
                    if !mean.is_finite() || !(sd.is_finite() && *sd >= 0.0) {
                        return bad(format!("`{name}`: invalid normal parameters"));
                    }
                }
                AttributeSpec::Uniform { low, high } => {
                    if !(low.is_finite() && high.is_finite() && low < high) {
                        return bad(format!("`{name}`: invalid uniform bounds"));
                    }
                }
            }
        }
        if !self.true_risk.intercept.is_finite() || !(self.true_risk.latent_sd.is_finite() && self.true_risk.latent_sd >= 0.0) {
            return bad("invalid intercept or latent sd".into());
        }
        for term in &self.true_risk.terms {
            match term {
                RiskTerm::Level { attribute, level, coef } => match self.attributes.get(attribute) {
                    Some(AttributeSpec::Categorical { levels, .. }) if levels.contains(level) && coef.is_finite() => {}
                    _ => return bad(format!("risk term on `{attribute}={level}` is invalid")),
                },
                RiskTerm::Linear { attribute, coef, center } => match self.attributes.get(attribute) {
                    Some(AttributeSpec::Normal { .. } | AttributeSpec::Uniform { .. })
                        if coef.is_finite() && center.is_finite() => {}
                    _ => return bad(format!("linear risk term on `{attribute}` is invalid")),
                },
            }
        }
        let kinds = self.attribute_kinds();
        for (name, law) in std::iter::once((&self.model_name, &self.model_score_law)).chain(self.extra_models.iter()) {
            if name.is_empty() || ["id", "outcome"].contains(&name.as_str()) || self.attributes.contains_key(name) {
                return bad(format!("model name `{name}` collides with another column"));
            }
            match law {
                ScoreLaw::TrueRisk => {}
                ScoreLaw::Biased { filter, logit_shift } => {
                    filter.validate(&kinds).map_err(|e| AuditError::InvalidSpec(e.to_string()))?;
                    if !logit_shift.is_finite() {
                        return bad(format!("`{name}`: non-finite logit shift"));
                    }
                }
                ScoreLaw::Noisy { sd } => {
                    if !(sd.is_finite() && *sd >= 0.0) {
                        return bad(format!("`{name}`: invalid noise sd"));
                    }
                }
                ScoreLaw::DegradedAuc { filter, noise_sd } => {
                    filter.validate(&kinds).map_err(|e| AuditError::InvalidSpec(e.to_string()))?;
                    if !(noise_sd.is_finite() && *noise_sd >= 0.0) {
                        return bad(format!("`{name}`: invalid noise sd"));
                    }
                }
            }
        }
        if self.extra_models.contains_key(&self.model_name) {
            return bad(format!("model `{}` declared twice", self.model_name));
        }
        if let Some(e) = &self.embedding {
            if e.dim == 0 || !e.signal.is_finite() || !(e.noise_sd.is_finite() && e.noise_sd >= 0.0) {
                return bad("invalid embedding spec".into());
            }
        }
        Ok(())
    }
}

/// A generated dataset together with the true risks behind its outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedDataset {
    pub dataset: AuditDataset,
    pub true_risks: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn score_for(law: &ScoreLaw, eta: f64, attrs: &BTreeMap<String, AttributeValue>, z: f64) -> f64 {
    match law {
        ScoreLaw::TrueRisk => sigmoid(eta),
        ScoreLaw::Biased { filter, logit_shift } => {
            if filter.matches(attrs) {
                sigmoid(eta + logit_shift)
            } else {
                sigmoid(eta)
            }
        }
        ScoreLaw::Noisy { sd } => sigmoid(eta + sd * z),
        ScoreLaw::DegradedAuc { filter, noise_sd } => {
            if filter.matches(attrs) {
                sigmoid(eta + noise_sd * z)
            } else {
                sigmoid(eta)
            }
        }
    }
}

/// Draws a population as documented in the module header.
pub fn generate(spec: &PopulationSpec) -> Result<GeneratedDataset> {
    spec.validate()?;
    let mut rng = substream(spec.seed, Purpose::Generate, 0);
    let mut records = Vec::with_capacity(spec.n);
    let mut true_risks = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let mut attrs = BTreeMap::new();
        for (name, attr) in &spec.attributes {
            let value = match attr {
                AttributeSpec::Categorical { levels, probs } => {
                    let u: f64 = rng.random();
                    let mut cum = 0.0;
                    let mut pick = levels.len() - 1;
                    for (k, p) in probs.iter().enumerate() {
                        cum += p;
                        if u < cum {
                            pick = k;
                            break;
                        }
                    }
                    AttributeValue::Categorical(levels[pick].clone())
                }
                AttributeSpec::Normal { mean, sd } => {
                    let z: f64 = rng.sample(StandardNormal);
                    AttributeValue::Numeric(mean + sd * z)
                }
                AttributeSpec::Uniform { low, high } => {
                    let u: f64 = rng.random();
                    AttributeValue::Numeric(low + (high - low) * u)
                }
            };
            attrs.insert(name.clone(), value);
        }
        let mut eta = spec.true_risk.intercept;
        for term in &spec.true_risk.terms {
            eta += match term {
                RiskTerm::Level { attribute, level, coef } => match &attrs[attribute] {
                    AttributeValue::Categorical(v) if v == level => *coef,
                    _ => 0.0,
                },
                RiskTerm::Linear { attribute, coef, center } => match &attrs[attribute] {
                    AttributeValue::Numeric(x) => coef * (x - center),
                    AttributeValue::Categorical(_) => 0.0,
                },
            };
        }
        let u: f64 = rng.sample(StandardNormal);
        let eta = (eta + spec.true_risk.latent_sd * u).clamp(-MAX_LOGIT, MAX_LOGIT);
        let p0 = sigmoid(eta);
        let outcome = rng.random::<f64>() < p0;
        let z: f64 = rng.sample(StandardNormal);
        let score = score_for(&spec.model_score_law, eta, &attrs, z);
        let mut other_scores = BTreeMap::new();
        for (name, law) in &spec.extra_models {
            let z: f64 = rng.sample(StandardNormal);
            other_scores.insert(name.clone(), score_for(law, eta, &attrs, z));
        }
        let embedding = spec.embedding.as_ref().map(|e| {
            (0..e.dim)
                .map(|k| {
                    let z: f64 = rng.sample(StandardNormal);
                    let signal = if k == 0 { e.signal * eta } else { 0.0 };
                    signal + e.noise_sd * z
                })
                .collect()
        });
        records.push(AuditRecord {
            id: i.to_string(),
            outcome,
            score,
            other_scores,
            attributes: attrs,
            embedding,
        });
        true_risks.push(p0);
    }
    let dataset = AuditDataset::from_records(records, spec.attribute_kinds())?;
    let dataset = if spec.model_name == dataset.score_column() {
        dataset
    } else {
        dataset.with_score_column_name(&spec.model_name)?
    };
    Ok(GeneratedDataset { dataset, true_risks })
}

/// The planted subgroup and the direction in which its scores are off.
pub fn planted_miscalibration_truth(spec: &PopulationSpec) -> Result<(SubgroupFilter, Direction)> {
    match &spec.model_score_law {
        ScoreLaw::Biased { filter, logit_shift } if *logit_shift != 0.0 => {
            let direction = if *logit_shift > 0.0 {
                Direction::Overestimation
            } else {
                Direction::Underestimation
            };
            Ok((filter.clone(), direction))
        }
        _ => Err(AuditError::NoPlantedBias),
    }
}

/// AUROC by explicit comparison of every positive-negative pair.
pub fn brute_force_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(AuditError::LengthMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut wins = 0.0;
    let mut pairs = 0usize;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    if pairs == 0 {
        return Err(AuditError::DegenerateLabels);
    }
    Ok(wins / pairs as f64)
}

/// Exact distribution of a statistic, as `(value, probability)` pairs sorted
/// by value with equal values merged.
#[derive(Debug, Clone, PartialEq)]
pub struct NullTable {
    pub points: Vec<(f64, f64)>,
}

impl NullTable {
    pub fn total_probability(&self) -> f64 {
        self.points.iter().map(|p| p.1).sum()
    }

    pub fn mean(&self) -> f64 {
        self.points.iter().map(|(v, p)| v * p).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.points.iter().map(|(v, p)| p * (v - m) * (v - m)).sum()
    }
}

/// Exact null distribution of the max-over-members statistic, enumerating
/// all `2^n` outcome vectors with Bernoulli(`shifted_i`) weights.
pub fn exhaustive_null_statistic(shifted: &[f64], ghat: &[Vec<f64>], direction: Direction) -> Result<NullTable> {
    let n = shifted.len();
    if n > EXHAUSTIVE_MAX_ROWS {
        return Err(AuditError::TooLarge {
            n,
            max: EXHAUSTIVE_MAX_ROWS,
        });
    }
    if n == 0 {
        return Err(AuditError::EmptyEvaluationSet);
    }
    if ghat.is_empty() || ghat.iter().any(|g| g.len() != n) {
        return Err(AuditError::LengthMismatch("residuals must match shifted scores".into()));
    }
    let mut raw = Vec::with_capacity(1 << n);
    for pattern in 0u32..(1u32 << n) {
        let mut prob = 1.0;
        let mut best = f64::NEG_INFINITY;
        for (i, &s) in shifted.iter().enumerate() {
            let y = (pattern >> i) & 1 == 1;
            prob *= if y { s } else { 1.0 - s };
        }
        for g in ghat {
            let mut total = 0.0;
            for i in 0..n {
                let y = if (pattern >> i) & 1 == 1 { 1.0 } else { 0.0 };
                let keep = match direction {
                    Direction::Underestimation => g[i] > 0.0,
                    Direction::Overestimation => g[i] < 0.0,
                };
                if keep {
                    total += (y - shifted[i]) * g[i];
                }
            }
            best = best.max(total / n as f64);
        }
        raw.push((best, prob));
    }
    raw.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut points: Vec<(f64, f64)> = Vec::new();
    for (v, p) in raw {
        match points.last_mut() {
            Some(last) if last.0 == v => last.1 += p,
            _ => points.push((v, p)),
        }
    }
    Ok(NullTable { points })
}

/// Paths written by [`write_generated`].
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedFiles {
    pub data: PathBuf,
    pub schema: PathBuf,
    pub truth: PathBuf,
}

/// Writes `<stem>.csv`, its `<stem>.schema.json` sidecar and the true risks
/// in `<stem>.truth.csv` (`id,true_risk`).
pub fn write_generated(gen: &GeneratedDataset, dir: &Path, stem: &str) -> Result<GeneratedFiles> {
    let files = GeneratedFiles {
        data: dir.join(format!("{stem}.csv")),
        schema: dir.join(format!("{stem}.schema.json")),
        truth: dir.join(format!("{stem}.truth.csv")),
    };
    gen.dataset.write_csv_file(&files.data)?;
    let schema = serde_json::to_string_pretty(&gen.dataset.schema())? + "\n";
    std::fs::write(&files.schema, schema).map_err(|e| AuditError::io(&files.schema, e))?;
    let mut truth = String::from("id,true_risk\n");
    for (r, p) in gen.dataset.records().iter().zip(&gen.true_risks) {
        truth.push_str(&format!("{},{p}\n", r.id));
    }
    std::fs::write(&files.truth, truth).map_err(|e| AuditError::io(&files.truth, e))?;
    Ok(files)
}
