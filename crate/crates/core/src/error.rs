use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the audit toolkit.
///
/// Row numbers are 1-based data rows (the CSV header is not counted).
#[derive(Debug, Error)]
pub enum AuditError {
    // --- ingestion and stratification ---
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: outcome is not 0 or 1")]
    NonBinaryOutcome { row: usize },
    #[error("row {row}: score outside [0, 1]")]
    ScoreOutOfRange { row: usize },
    #[error("row {row}: duplicate id")]
    DuplicateId { row: usize },
    #[error("row {row}: embedding length differs from the rest of the dataset")]
    RaggedEmbedding { row: usize },
    #[error("row {row}: missing value in column `{column}`")]
    MissingValue { row: usize, column: String },
    #[error("row {row}: column `{column}` is not a finite number")]
    InvalidNumber { row: usize, column: String },
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("attribute `{attribute}`: {reason}")]
    AttributeMismatch { attribute: String, reason: String },
    #[error("requested feature block `{0}` is not present in the dataset")]
    MissingBlock(String),
    #[error("dataset needs at least {need} records, found {found}")]
    TooFewRecords { need: usize, found: usize },
    #[error("invalid subgroup filter `{0}`")]
    InvalidFilter(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    // --- ROC analysis ---
    #[error("labels contain a single class")]
    DegenerateLabels,
    #[error("each class needs at least 2 members (positives {positives}, negatives {negatives})")]
    TooFewPerClass { positives: usize, negatives: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    // --- residual models ---
    #[error("invalid residual model configuration: {0}")]
    InvalidConfig(String),
    #[error("polynomial expansion would create {width} columns (cap {cap})")]
    DimensionBlowup { width: usize, cap: usize },
    #[error("residual model target contains a single class")]
    SingleClassTarget,
    #[error("non-finite value in feature column `{column}`")]
    NonFiniteFeature { column: String },
    #[error("feature schema mismatch: {0}")]
    SchemaMismatch(String),

    // --- calibration audit ---
    #[error("evaluation set is empty")]
    EmptyEvaluationSet,
    #[error("split too small: {0}")]
    SplitTooSmall(String),
    #[error("fold {fold}: training complement lacks one of the classes")]
    FoldDegenerate { fold: usize },

    // --- synthetic populations ---
    #[error("invalid population spec: {0}")]
    InvalidSpec(String),
    #[error("population spec has no planted bias")]
    NoPlantedBias,
    #[error("exhaustive enumeration over {n} rows is too large (max {max})")]
    TooLarge { n: usize, max: usize },

    // --- reports ---
    #[error("no trajectories to chart")]
    EmptyTrajectory,
    #[error("variable importance ranking is empty")]
    EmptyRanking,

    // --- plumbing ---
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl AuditError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AuditError::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error reflects a fault in the toolkit or its environment
    /// rather than in the caller's inputs.
    pub fn is_internal(&self) -> bool {
        matches!(self, AuditError::Io { .. })
    }
}

pub type Result<T, E = AuditError> = std::result::Result<T, E>;
