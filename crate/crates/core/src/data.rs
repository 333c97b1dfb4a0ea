//! Prediction datasets: ingestion, validation, stratification and design
//! matrices for the residual models.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};

/// Group label of the audited model's score column in feature matrices and
/// variable-importance rankings.
pub const SCORE_GROUP: &str = "Prediction";

#[derive(Debug, Clone, PartialEq)]
pub enum AttributeValue {
    Categorical(String),
    Numeric(f64),
}

impl fmt::Display for AttributeValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttributeValue::Categorical(label) => f.write_str(label),
            AttributeValue::Numeric(x) => write!(f, "{x}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeKind {
    Categorical { levels: Vec<String> },
    Numeric,
}

/// One audited subject.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditRecord {
    pub id: String,
    pub outcome: bool,
    pub score: f64,
    /// Scores of additional models on the same subject, keyed by column name.
    pub other_scores: BTreeMap<String, f64>,
    pub attributes: BTreeMap<String, AttributeValue>,
    pub embedding: Option<Vec<f64>>,
}

impl AuditRecord {
    pub fn outcome_f64(&self) -> f64 {
        if self.outcome {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttributeType {
    /// `"categorical"` or `"numeric"`; categorical levels are inferred from data.
    Named(String),
    /// `{"categorical": ["F", "M"]}` fixes the level set and order.
    Levels { categorical: Vec<String> },
}

/// Column roles of a prediction CSV. Stored as a JSON sidecar next to the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub id: String,
    pub outcome: String,
    pub score: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_scores: Vec<String>,
    #[serde(default)]
    pub attributes: BTreeMap<String, AttributeType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_prefix: Option<String>,
}

impl DatasetSchema {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AuditError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Provenance {
    pub source: Option<PathBuf>,
    /// Seconds since the Unix epoch at load time.
    pub loaded_at: u64,
}

/// An ordered collection of records sharing one attribute schema.
#[derive(Debug, Clone)]
pub struct AuditDataset {
    records: Vec<AuditRecord>,
    attribute_schema: BTreeMap<String, AttributeKind>,
    score_column: String,
    extra_scores: Vec<String>,
    embedding_prefix: Option<String>,
    embedding_dim: Option<usize>,
    pub provenance: Provenance,
}

/// Content equality; provenance is ignored.
impl PartialEq for AuditDataset {
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records
            && self.attribute_schema == other.attribute_schema
            && self.score_column == other.score_column
            && self.extra_scores == other.extra_scores
            && self.embedding_prefix == other.embedding_prefix
            && self.embedding_dim == other.embedding_dim
    }
}

impl AuditDataset {
    /// Builds a dataset from in-memory records, checking every record
    /// invariant. The score column is named `score` and embeddings `emb_<k>`.
    pub fn from_records(
        records: Vec<AuditRecord>,
        attribute_schema: BTreeMap<String, AttributeKind>,
    ) -> Result<Self> {
        let extra_scores = records
            .first()
            .map(|r| r.other_scores.keys().cloned().collect())
            .unwrap_or_default();
        let embedding_dim = records.first().and_then(|r| r.embedding.as_ref().map(Vec::len));
        let ds = AuditDataset {
            embedding_dim,
            records,
            attribute_schema,
            score_column: "score".to_string(),
            extra_scores,
            embedding_prefix: embedding_dim.map(|_| "emb".to_string()),
            provenance: Provenance::default(),
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let mut ids = HashSet::with_capacity(self.records.len());
        for (i, r) in self.records.iter().enumerate() {
            let row = i + 1;
            if !(0.0..=1.0).contains(&r.score) {
                return Err(AuditError::ScoreOutOfRange { row });
            }
            if r.other_scores.len() != self.extra_scores.len()
                || !self.extra_scores.iter().all(|k| r.other_scores.contains_key(k))
            {
                return Err(AuditError::MissingColumn(format!(
                    "row {row}: model scores {:?}",
                    self.extra_scores
                )));
            }
            if r.other_scores.values().any(|s| !(0.0..=1.0).contains(s)) {
                return Err(AuditError::ScoreOutOfRange { row });
            }
            if !ids.insert(r.id.as_str()) {
                return Err(AuditError::DuplicateId { row });
            }
            if r.embedding.as_ref().map(Vec::len) != self.embedding_dim {
                return Err(AuditError::RaggedEmbedding { row });
            }
            if let Some(e) = &r.embedding {
                if e.iter().any(|x| !x.is_finite()) {
                    return Err(AuditError::InvalidNumber {
                        row,
                        column: "embedding".into(),
                    });
                }
            }
            if r.attributes.len() != self.attribute_schema.len() {
                let missing = self
                    .attribute_schema
                    .keys()
                    .find(|k| !r.attributes.contains_key(*k))
                    .cloned()
                    .unwrap_or_default();
                return Err(AuditError::MissingValue { row, column: missing });
            }
            for (name, kind) in &self.attribute_schema {
                let value = r.attributes.get(name).ok_or_else(|| AuditError::MissingValue {
                    row,
                    column: name.clone(),
                })?;
                match (kind, value) {
                    (AttributeKind::Categorical { levels }, AttributeValue::Categorical(v)) => {
                        if !levels.contains(v) {
                            return Err(AuditError::AttributeMismatch {
                                attribute: name.clone(),
                                reason: format!("row {row}: level `{v}` not in schema"),
                            });
                        }
                    }
                    (AttributeKind::Numeric, AttributeValue::Numeric(x)) if x.is_finite() => {}
                    _ => {
                        return Err(AuditError::AttributeMismatch {
                            attribute: name.clone(),
                            reason: format!("row {row}: value does not match declared type"),
                        })
                    }
                }
            }
        }
        Ok(())
    }

    pub fn records(&self) -> &[AuditRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn attribute_schema(&self) -> &BTreeMap<String, AttributeKind> {
        &self.attribute_schema
    }

    pub fn embedding_dim(&self) -> Option<usize> {
        self.embedding_dim
    }

    pub fn score_column(&self) -> &str {
        &self.score_column
    }

    /// Names of all model score columns, the primary one first.
    pub fn model_names(&self) -> Vec<String> {
        std::iter::once(self.score_column.clone())
            .chain(self.extra_scores.iter().cloned())
            .collect()
    }

    pub fn outcomes(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.outcome).collect()
    }

    /// Scores of the primary model.
    pub fn scores(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.score).collect()
    }

    /// Scores of the named model column.
    pub fn model_scores(&self, model: &str) -> Result<Vec<f64>> {
        if model == self.score_column {
            return Ok(self.scores());
        }
        if !self.extra_scores.iter().any(|m| m == model) {
            return Err(AuditError::MissingColumn(model.to_string()));
        }
        Ok(self.records.iter().map(|r| r.other_scores[model]).collect())
    }

    /// A dataset holding the given rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> AuditDataset {
        AuditDataset {
            records: rows.iter().map(|&i| self.records[i].clone()).collect(),
            attribute_schema: self.attribute_schema.clone(),
            score_column: self.score_column.clone(),
            extra_scores: self.extra_scores.clone(),
            embedding_prefix: self.embedding_prefix.clone(),
            embedding_dim: self.embedding_dim,
            provenance: self.provenance.clone(),
        }
    }

    /// Renames the primary score column.
    pub fn with_score_column_name(mut self, name: &str) -> Result<AuditDataset> {
        if self.extra_scores.iter().any(|m| m == name) || self.attribute_schema.contains_key(name) {
            return Err(AuditError::InvalidSchema(format!("column `{name}` already in use")));
        }
        self.score_column = name.to_string();
        Ok(self)
    }

    /// A copy whose primary score is the named model column; the previous
    /// primary score becomes an extra column.
    pub fn with_primary_model(&self, model: &str) -> Result<AuditDataset> {
        if model == self.score_column {
            return Ok(self.clone());
        }
        let scores = self.model_scores(model)?;
        let mut out = self.clone();
        out.extra_scores = self
            .model_names()
            .into_iter()
            .filter(|m| m != model)
            .collect();
        for (r, s) in out.records.iter_mut().zip(scores) {
            let old = r.score;
            r.other_scores.remove(model);
            r.other_scores.insert(self.score_column.clone(), old);
            r.score = s;
        }
        out.score_column = model.to_string();
        Ok(out)
    }

    /// Schema sidecar describing this dataset, with explicit categorical levels.
    pub fn schema(&self) -> DatasetSchema {
        DatasetSchema {
            id: "id".into(),
            outcome: "outcome".into(),
            score: self.score_column.clone(),
            extra_scores: self.extra_scores.clone(),
            attributes: self
                .attribute_schema
                .iter()
                .map(|(name, kind)| {
                    let ty = match kind {
                        AttributeKind::Categorical { levels } => AttributeType::Levels {
                            categorical: levels.clone(),
                        },
                        AttributeKind::Numeric => AttributeType::Named("numeric".into()),
                    };
                    (name.clone(), ty)
                })
                .collect(),
            embedding_prefix: self.embedding_dim.map(|_| self.embedding_prefix_or_default()),
        }
    }

    fn embedding_prefix_or_default(&self) -> String {
        self.embedding_prefix.clone().unwrap_or_else(|| "emb".into())
    }

    /// Serializes the dataset as CSV in the layout described by [`Self::schema`].
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["id".to_string(), "outcome".to_string(), self.score_column.clone()];
        header.extend(self.extra_scores.iter().cloned());
        header.extend(self.attribute_schema.keys().cloned());
        let prefix = self.embedding_prefix_or_default();
        if let Some(dim) = self.embedding_dim {
            header.extend((0..dim).map(|k| format!("{prefix}_{k}")));
        }
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.id.clone(),
                if r.outcome { "1".into() } else { "0".into() },
                r.score.to_string(),
            ];
            row.extend(self.extra_scores.iter().map(|m| r.other_scores[m].to_string()));
            row.extend(self.attribute_schema.keys().map(|k| r.attributes[k].to_string()));
            if let Some(e) = &r.embedding {
                row.extend(e.iter().map(f64::to_string));
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| AuditError::io("<csv>", e))?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| AuditError::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

fn parse_f64(cell: &str, row: usize, column: &str) -> Result<f64> {
    cell.trim()
        .parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| AuditError::InvalidNumber {
            row,
            column: column.to_string(),
        })
}

fn sort_levels(levels: &mut [String]) {
    let numeric: Option<Vec<f64>> = levels.iter().map(|l| l.parse::<f64>().ok()).collect();
    match numeric {
        Some(_) => levels.sort_by(|a, b| {
            a.parse::<f64>()
                .unwrap()
                .total_cmp(&b.parse::<f64>().unwrap())
                .then_with(|| a.cmp(b))
        }),
        None => levels.sort(),
    }
}

/// Loads a prediction CSV whose column roles are given by `schema`.
pub fn load_dataset(path: &Path, schema: &DatasetSchema) -> Result<AuditDataset> {
    let file = std::fs::File::open(path).map_err(|e| AuditError::io(path, e))?;
    let mut ds = read_dataset(std::io::BufReader::new(file), schema)?;
    ds.provenance = Provenance {
        source: Some(path.to_path_buf()),
        loaded_at: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    Ok(ds)
}

/// Parses a prediction CSV from any reader; see [`load_dataset`].
pub fn read_dataset<R: std::io::Read>(input: R, schema: &DatasetSchema) -> Result<AuditDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = reader.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| AuditError::MissingColumn(name.to_string()))
    };
    let id_col = find(&schema.id)?;
    let outcome_col = find(&schema.outcome)?;
    let score_col = find(&schema.score)?;
    let extra_cols = schema
        .extra_scores
        .iter()
        .map(|m| find(m))
        .collect::<Result<Vec<_>>>()?;
    let mut attr_cols = Vec::with_capacity(schema.attributes.len());
    for (name, ty) in &schema.attributes {
        let numeric = match ty {
            AttributeType::Named(t) if t == "numeric" => true,
            AttributeType::Named(t) if t == "categorical" => false,
            AttributeType::Levels { .. } => false,
            AttributeType::Named(other) => {
                return Err(AuditError::InvalidSchema(format!(
                    "attribute `{name}` has unknown type `{other}`"
                )))
            }
        };
        attr_cols.push((name.clone(), find(name)?, numeric));
    }

    let emb_cols: Vec<usize> = match &schema.embedding_prefix {
        None => Vec::new(),
        Some(prefix) => {
            let mut found: Vec<(usize, usize)> = header
                .iter()
                .enumerate()
                .filter_map(|(col, h)| {
                    h.strip_prefix(prefix.as_str())
                        .and_then(|rest| rest.strip_prefix('_'))
                        .and_then(|k| k.parse::<usize>().ok())
                        .map(|k| (k, col))
                })
                .collect();
            found.sort_unstable();
            if found.iter().enumerate().any(|(i, &(k, _))| i != k) {
                return Err(AuditError::InvalidSchema(format!(
                    "embedding columns `{prefix}_<k>` are not contiguous from 0"
                )));
            }
            found.into_iter().map(|(_, col)| col).collect()
        }
    };

    let mut records = Vec::new();
    let mut ids = HashSet::new();
    let mut embedding_dim: Option<Option<usize>> = None;
    let mut observed_levels: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let cell = |col: usize| rec.get(col).unwrap_or("").trim();

        let id = cell(id_col).to_string();
        let outcome = match cell(outcome_col) {
            "1" | "1.0" => true,
            "0" | "0.0" => false,
            _ => return Err(AuditError::NonBinaryOutcome { row }),
        };
        let score = parse_f64(cell(score_col), row, &schema.score)?;
        if !(0.0..=1.0).contains(&score) {
            return Err(AuditError::ScoreOutOfRange { row });
        }
        let mut other_scores = BTreeMap::new();
        for (name, &col) in schema.extra_scores.iter().zip(&extra_cols) {
            let s = parse_f64(cell(col), row, name)?;
            if !(0.0..=1.0).contains(&s) {
                return Err(AuditError::ScoreOutOfRange { row });
            }
            other_scores.insert(name.clone(), s);
        }
        if !ids.insert(id.clone()) {
            return Err(AuditError::DuplicateId { row });
        }

        let mut attributes = BTreeMap::new();
        for (name, col, numeric) in &attr_cols {
            let raw = cell(*col);
            if raw.is_empty() {
                return Err(AuditError::MissingValue {
                    row,
                    column: name.clone(),
                });
            }
            let value = if *numeric {
                AttributeValue::Numeric(parse_f64(raw, row, name)?)
            } else {
                let levels = observed_levels.entry(name.clone()).or_default();
                if !levels.iter().any(|l| l == raw) {
                    levels.push(raw.to_string());
                }
                AttributeValue::Categorical(raw.to_string())
            };
            attributes.insert(name.clone(), value);
        }

        let present = emb_cols.iter().filter(|&&c| !cell(c).is_empty()).count();
        let embedding = if present == 0 {
            None
        } else if present == emb_cols.len() {
            let prefix = schema.embedding_prefix.as_deref().unwrap_or("emb");
            Some(
                emb_cols
                    .iter()
                    .enumerate()
                    .map(|(k, &c)| parse_f64(cell(c), row, &format!("{prefix}_{k}")))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            return Err(AuditError::RaggedEmbedding { row });
        };
        let dim = embedding.as_ref().map(Vec::len);
        match embedding_dim {
            None => embedding_dim = Some(dim),
            Some(d) if d != dim => return Err(AuditError::RaggedEmbedding { row }),
            _ => {}
        }

        records.push(AuditRecord {
            id,
            outcome,
            score,
            other_scores,
            attributes,
            embedding,
        });
    }

    if records.len() < 2 {
        return Err(AuditError::TooFewRecords {
            need: 2,
            found: records.len(),
        });
    }

    let mut attribute_schema = BTreeMap::new();
    for (name, ty) in &schema.attributes {
        let kind = match ty {
            AttributeType::Named(t) if t == "numeric" => AttributeKind::Numeric,
            AttributeType::Levels { categorical } => AttributeKind::Categorical {
                levels: categorical.clone(),
            },
            _ => {
                let mut levels = observed_levels.remove(name).unwrap_or_default();
                sort_levels(&mut levels);
                AttributeKind::Categorical { levels }
            }
        };
        attribute_schema.insert(name.clone(), kind);
    }

    let ds = AuditDataset {
        records,
        attribute_schema,
        score_column: schema.score.clone(),
        extra_scores: schema.extra_scores.clone(),
        embedding_prefix: schema.embedding_prefix.clone(),
        embedding_dim: embedding_dim.flatten(),
        provenance: Provenance::default(),
    };
    ds.validate()?;
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Subgroup filters

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NumericRange {
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub lo_closed: bool,
    pub hi_closed: bool,
}

impl NumericRange {
    pub fn contains(&self, x: f64) -> bool {
        let above = match self.lo {
            None => true,
            Some(lo) if self.lo_closed => x >= lo,
            Some(lo) => x > lo,
        };
        let below = match self.hi {
            None => true,
            Some(hi) if self.hi_closed => x <= hi,
            Some(hi) => x < hi,
        };
        above && below
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predicate {
    Equals(String),
    InSet(Vec<String>),
    Range(NumericRange),
}

impl Predicate {
    fn matches(&self, value: &AttributeValue) -> bool {
        let label_eq = |label: &str| match value {
            AttributeValue::Categorical(v) => v == label,
            AttributeValue::Numeric(x) => label.parse::<f64>().is_ok_and(|l| l == *x),
        };
        match self {
            Predicate::Equals(label) => label_eq(label),
            Predicate::InSet(labels) => labels.iter().any(|l| label_eq(l)),
            Predicate::Range(range) => match value {
                AttributeValue::Numeric(x) => range.contains(*x),
                AttributeValue::Categorical(_) => false,
            },
        }
    }
}

/// A conjunction of per-attribute predicates. The empty filter selects
/// everyone.
///
/// Text form: conjuncts joined by `&`, each one of `name=label`,
/// `name in {a,b}`, `name>=x`, `name>x`, `name<=x`, `name<x`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SubgroupFilter {
    pub conjuncts: Vec<(String, Predicate)>,
}

impl SubgroupFilter {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn equals(attribute: &str, label: &str) -> Self {
        SubgroupFilter {
            conjuncts: vec![(attribute.to_string(), Predicate::Equals(label.to_string()))],
        }
    }

    pub fn and(mut self, attribute: &str, predicate: Predicate) -> Self {
        self.conjuncts.push((attribute.to_string(), predicate));
        self
    }

    pub fn attributes(&self) -> impl Iterator<Item = &str> {
        self.conjuncts.iter().map(|(a, _)| a.as_str())
    }

    /// Checks that every referenced attribute exists with a compatible kind.
    pub fn validate(&self, schema: &BTreeMap<String, AttributeKind>) -> Result<()> {
        for (name, pred) in &self.conjuncts {
            let kind = schema
                .get(name)
                .ok_or_else(|| AuditError::UnknownAttribute(name.clone()))?;
            if matches!(pred, Predicate::Range(_)) && !matches!(kind, AttributeKind::Numeric) {
                return Err(AuditError::AttributeMismatch {
                    attribute: name.clone(),
                    reason: "range predicate on a categorical attribute".into(),
                });
            }
        }
        Ok(())
    }

    /// Whether the attribute map satisfies every conjunct. Missing attributes
    /// never match.
    pub fn matches(&self, attributes: &BTreeMap<String, AttributeValue>) -> bool {
        self.conjuncts.iter().all(|(name, pred)| {
            attributes.get(name).is_some_and(|value| pred.matches(value))
        })
    }
}

impl fmt::Display for SubgroupFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.conjuncts.is_empty() {
            return f.write_str("*");
        }
        for (i, (name, pred)) in self.conjuncts.iter().enumerate() {
            if i > 0 {
                f.write_str(" & ")?;
            }
            match pred {
                Predicate::Equals(label) => write!(f, "{name}={label}")?,
                Predicate::InSet(labels) => write!(f, "{name} in {{{}}}", labels.join(","))?,
                Predicate::Range(r) => {
                    let mut parts = Vec::new();
                    if let Some(lo) = r.lo {
                        parts.push(format!("{name}{}{lo}", if r.lo_closed { ">=" } else { ">" }));
                    }
                    if let Some(hi) = r.hi {
                        parts.push(format!("{name}{}{hi}", if r.hi_closed { "<=" } else { "<" }));
                    }
                    f.write_str(&parts.join(" & "))?;
                }
            }
        }
        Ok(())
    }
}

impl FromStr for SubgroupFilter {
    type Err = AuditError;

    fn from_str(text: &str) -> Result<Self> {
        let text = text.trim();
        if text.is_empty() || text == "*" {
            return Ok(SubgroupFilter::all());
        }
        let bad = || AuditError::InvalidFilter(text.to_string());
        let mut filter = SubgroupFilter::default();
        for part in text.split('&').map(str::trim) {
            if part.is_empty() {
                return Err(bad());
            }
            if let Some((name, rest)) = part.split_once(" in ") {
                let rest = rest.trim();
                let inner = rest
                    .strip_prefix('{')
                    .and_then(|r| r.strip_suffix('}'))
                    .ok_or_else(bad)?;
                let labels: Vec<String> = inner
                    .split(',')
                    .map(|l| l.trim().to_string())
                    .filter(|l| !l.is_empty())
                    .collect();
                if labels.is_empty() {
                    return Err(bad());
                }
                filter.conjuncts.push((name.trim().to_string(), Predicate::InSet(labels)));
                continue;
            }
            let ops = [(">=", true, true), ("<=", false, true), (">", true, false), ("<", false, false)];
            let mut handled = false;
            for (op, lower, closed) in ops {
                if let Some((name, value)) = part.split_once(op) {
                    let x: f64 = value.trim().parse().map_err(|_| bad())?;
                    let range = if lower {
                        NumericRange { lo: Some(x), hi: None, lo_closed: closed, hi_closed: false }
                    } else {
                        NumericRange { lo: None, hi: Some(x), lo_closed: false, hi_closed: closed }
                    };
                    filter.conjuncts.push((name.trim().to_string(), Predicate::Range(range)));
                    handled = true;
                    break;
                }
            }
            if handled {
                continue;
            }
            let (name, label) = part.split_once('=').ok_or_else(bad)?;
            let (name, label) = (name.trim(), label.trim());
            if name.is_empty() || label.is_empty() {
                return Err(bad());
            }
            filter
                .conjuncts
                .push((name.to_string(), Predicate::Equals(label.to_string())));
        }
        Ok(filter)
    }
}

impl Serialize for SubgroupFilter {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SubgroupFilter {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Records satisfying every conjunct of `filter`, in dataset order.
pub fn stratify(ds: &AuditDataset, filter: &SubgroupFilter) -> Result<AuditDataset> {
    filter.validate(&ds.attribute_schema)?;
    Ok(ds.subset(&matching_rows(ds, filter)))
}

/// Indices of the records satisfying `filter` (unvalidated).
pub fn matching_rows(ds: &AuditDataset, filter: &SubgroupFilter) -> Vec<usize> {
    ds.records
        .iter()
        .enumerate()
        .filter(|(_, r)| filter.matches(&r.attributes))
        .map(|(i, _)| i)
        .collect()
}

// ---------------------------------------------------------------------------
// Design matrices

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnOrigin {
    OneHot { attribute: String, level: String },
    Numeric { attribute: String },
    Embedding { dim: usize },
    Score,
    /// Product of base columns (indices into the unexpanded matrix, with repetition).
    Monomial { factors: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub name: String,
    pub origin: ColumnOrigin,
    /// Permutation group for variable importance.
    pub group: String,
    /// Standardized column whose fit-split values were all equal.
    pub constant: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    /// Sample standard deviation (n − 1); zero marks a constant column.
    pub sd: f64,
}

/// Standardization parameters of a fit split, keyed by column name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    pub columns: BTreeMap<String, ColumnStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureBlocks {
    pub attributes: bool,
    pub score: bool,
    pub embeddings: bool,
}

impl FeatureBlocks {
    /// Attributes and score, plus embeddings when requested.
    pub fn residual_inputs(embeddings: bool) -> Self {
        FeatureBlocks {
            attributes: true,
            score: true,
            embeddings,
        }
    }
}

/// Dense column-major real matrix with per-column bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n_rows: usize,
    data: Vec<f64>,
    columns: Vec<ColumnMeta>,
    stats: FitStats,
}

impl FeatureMatrix {
    pub fn new(n_rows: usize, columns: Vec<ColumnMeta>, data: Vec<f64>, stats: FitStats) -> Self {
        assert_eq!(data.len(), n_rows * columns.len(), "matrix data length");
        FeatureMatrix {
            n_rows,
            data,
            columns,
            stats,
        }
    }

    /// Plain numeric columns, each its own permutation group.
    pub fn from_columns(columns: Vec<(String, Vec<f64>)>) -> Self {
        let n_rows = columns.first().map_or(0, |(_, v)| v.len());
        let mut data = Vec::with_capacity(n_rows * columns.len());
        let mut meta = Vec::with_capacity(columns.len());
        for (name, values) in columns {
            assert_eq!(values.len(), n_rows, "ragged columns");
            data.extend(values);
            meta.push(ColumnMeta {
                origin: ColumnOrigin::Numeric {
                    attribute: name.clone(),
                },
                group: name.clone(),
                name,
                constant: false,
            });
        }
        FeatureMatrix::new(n_rows, meta, data, FitStats::default())
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.n_rows..(j + 1) * self.n_rows]
    }

    pub(crate) fn column_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.n_rows..(j + 1) * self.n_rows]
    }

    /// Column-major backing storage.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[col * self.n_rows + row]
    }

    pub fn columns(&self) -> &[ColumnMeta] {
        &self.columns
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    pub fn stats(&self) -> &FitStats {
        &self.stats
    }

    /// Permutation groups in first-appearance order with their column indices.
    pub fn groups(&self) -> Vec<(String, Vec<usize>)> {
        let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
        for (j, c) in self.columns.iter().enumerate() {
            match groups.iter_mut().find(|(g, _)| *g == c.group) {
                Some((_, cols)) => cols.push(j),
                None => groups.push((c.group.clone(), vec![j])),
            }
        }
        groups
    }

    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.n_cols());
        for j in 0..self.n_cols() {
            let col = self.column(j);
            data.extend(rows.iter().map(|&i| col[i]));
        }
        FeatureMatrix::new(rows.len(), self.columns.clone(), data, self.stats.clone())
    }
}

fn standardize(
    name: &str,
    values: &mut [f64],
    fit: Option<&FitStats>,
    stats: &mut FitStats,
) -> Result<bool> {
    let s = match fit {
        Some(fs) => *fs.columns.get(name).ok_or_else(|| {
            AuditError::SchemaMismatch(format!("fit statistics lack column `{name}`"))
        })?,
        None => {
            let n = values.len();
            let constant = n < 2 || values.iter().all(|&x| x == values[0]);
            if constant {
                ColumnStats {
                    mean: values.first().copied().unwrap_or(0.0),
                    sd: 0.0,
                }
            } else {
                let mean = values.iter().sum::<f64>() / n as f64;
                let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                ColumnStats {
                    mean,
                    sd: var.sqrt(),
                }
            }
        }
    };
    stats.columns.insert(name.to_string(), s);
    if s.sd > 0.0 {
        for x in values.iter_mut() {
            *x = (*x - s.mean) / s.sd;
        }
        Ok(false)
    } else {
        values.fill(0.0);
        Ok(true)
    }
}

/// Numeric encoding of `ds` for the residual models.
///
/// Categorical attributes become one indicator column per level (no level is
/// dropped). Numeric attributes and embedding dimensions are z-standardized,
/// with `fit_stats` when given and statistics of `ds` otherwise; constant
/// columns become zeros. The raw score is appended last.
pub fn design_matrix(
    ds: &AuditDataset,
    blocks: FeatureBlocks,
    fit_stats: Option<&FitStats>,
) -> Result<FeatureMatrix> {
    if blocks.attributes && ds.attribute_schema.is_empty() {
        return Err(AuditError::MissingBlock("attributes".into()));
    }
    if blocks.embeddings && ds.embedding_dim.is_none() {
        return Err(AuditError::MissingBlock("embeddings".into()));
    }
    let n = ds.len();
    let mut columns = Vec::new();
    let mut data = Vec::new();
    let mut stats = FitStats::default();

    if blocks.attributes {
        for (name, kind) in &ds.attribute_schema {
            match kind {
                AttributeKind::Categorical { levels } => {
                    for level in levels {
                        data.extend(ds.records.iter().map(|r| match &r.attributes[name] {
                            AttributeValue::Categorical(v) if v == level => 1.0,
                            _ => 0.0,
                        }));
                        columns.push(ColumnMeta {
                            name: format!("{name}={level}"),
                            origin: ColumnOrigin::OneHot {
                                attribute: name.clone(),
                                level: level.clone(),
                            },
                            group: name.clone(),
                            constant: false,
                        });
                    }
                }
                AttributeKind::Numeric => {
                    let mut values: Vec<f64> = ds
                        .records
                        .iter()
                        .map(|r| match r.attributes[name] {
                            AttributeValue::Numeric(x) => x,
                            AttributeValue::Categorical(_) => f64::NAN,
                        })
                        .collect();
                    let constant = standardize(name, &mut values, fit_stats, &mut stats)?;
                    data.extend(values);
                    columns.push(ColumnMeta {
                        name: name.clone(),
                        origin: ColumnOrigin::Numeric {
                            attribute: name.clone(),
                        },
                        group: name.clone(),
                        constant,
                    });
                }
            }
        }
    }

    if blocks.embeddings {
        let dim = ds.embedding_dim.unwrap_or(0);
        let prefix = ds.embedding_prefix_or_default();
        for k in 0..dim {
            let name = format!("{prefix}_{k}");
            let mut values: Vec<f64> = ds
                .records
                .iter()
                .map(|r| r.embedding.as_ref().map_or(f64::NAN, |e| e[k]))
                .collect();
            let constant = standardize(&name, &mut values, fit_stats, &mut stats)?;
            data.extend(values);
            columns.push(ColumnMeta {
                name: name.clone(),
                origin: ColumnOrigin::Embedding { dim: k },
                group: name,
                constant,
            });
        }
    }

    if blocks.score {
        data.extend(ds.records.iter().map(|r| r.score));
        columns.push(ColumnMeta {
            name: ds.score_column.clone(),
            origin: ColumnOrigin::Score,
            group: SCORE_GROUP.to_string(),
            constant: false,
        });
    }

    Ok(FeatureMatrix::new(n, columns, data, stats))
}
