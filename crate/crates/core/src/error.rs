use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numeric => 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("bad magic bytes {found:?}, expected \"LATC\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u8),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(u64),
    #[error("non-finite element at row {row}, column {col}")]
    NonFiniteElement { row: usize, col: usize },
    #[error("expected {expected} container, found {found}")]
    DtypeMismatch {
        expected: &'static str,
        found: &'static str,
    },
    #[error("empty matrix ({rows}x{cols})")]
    EmptyMatrix { rows: usize, cols: usize },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("row count mismatch: {what} has {found} rows, expected {expected}")]
    RowCountMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("label {label} at row {row} outside [0, {classes})")]
    LabelOutOfRange {
        row: usize,
        label: i64,
        classes: usize,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("query has zero norm")]
    ZeroNormQuery,
    #[error("pool row {0} has zero norm")]
    ZeroNormRow(usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("k = {k} outside [1, {n}]")]
    KOutOfRange { k: usize, n: usize },
    #[error("pool has no labels")]
    MissingPoolLabels,
    #[error("permutations cover different index domains")]
    PermutationDomainMismatch,
    #[error("ideal DCG is not positive")]
    NonPositiveIdealDCG,
    #[error("no foundation models selected")]
    EmptyModelList,
    #[error("unknown foundation model {0:?}")]
    UnknownModel(String),
    #[error("need at least {needed} elements, found {found}")]
    TooFewElements { needed: usize, found: usize },
    #[error("zero variance input")]
    ZeroVariance,
    #[error("degenerate features: {0}")]
    DegenerateFeatures(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite logit at row {row}")]
    NonFiniteLogit { row: usize },
    #[error("empty validation set")]
    EmptyValidationSet,
    #[error("degenerate logits: every row is constant")]
    DegenerateLogits,

    #[error("predicted class {0} has no pool samples")]
    MissingClassInPool(usize),
    #[error("correctness has a single class; AUROC undefined")]
    SingleClassDegenerate,
    #[error("pool size {size} outside [1, {available}]")]
    SizeOutOfRange { size: usize, available: usize },

    #[error("construction violated: {0}")]
    ConstructionViolated(String),
    #[error("resample budget of {0} attempts exceeded")]
    ResampleBudgetExceeded(usize),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wraps an I/O failure on `path`; a missing file maps to [`Error::MissingFile`].
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "Io",
            Error::MissingFile(_) => "MissingFile",
            Error::BadMagic { .. } => "BadMagic",
            Error::UnsupportedVersion(_) => "UnsupportedVersion",
            Error::UnsupportedDtype(_) => "UnsupportedDtype",
            Error::MalformedHeader(_) => "MalformedHeader",
            Error::TruncatedPayload { .. } => "TruncatedPayload",
            Error::TrailingBytes(_) => "TrailingBytes",
            Error::NonFiniteElement { .. } => "NonFiniteElement",
            Error::DtypeMismatch { .. } => "DtypeMismatch",
            Error::EmptyMatrix { .. } => "EmptyMatrix",
            Error::InvalidManifest(_) => "InvalidManifest",
            Error::RowCountMismatch { .. } => "RowCountMismatch",
            Error::LabelOutOfRange { .. } => "LabelOutOfRange",
            Error::Parse { .. } => "ParseError",
            Error::ZeroNormQuery => "ZeroNormQuery",
            Error::ZeroNormRow(_) => "ZeroNormRow",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::KOutOfRange { .. } => "KOutOfRange",
            Error::MissingPoolLabels => "MissingPoolLabels",
            Error::PermutationDomainMismatch => "PermutationDomainMismatch",
            Error::NonPositiveIdealDCG => "NonPositiveIdealDCG",
            Error::EmptyModelList => "EmptyModelList",
            Error::UnknownModel(_) => "UnknownModel",
            Error::TooFewElements { .. } => "TooFewElements",
            Error::ZeroVariance => "ZeroVariance",
            Error::DegenerateFeatures(_) => "DegenerateFeatures",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::InvalidParameter(_) => "InvalidParameter",
            Error::NonFiniteLogit { .. } => "NonFiniteLogit",
            Error::EmptyValidationSet => "EmptyValidationSet",
            Error::DegenerateLogits => "DegenerateLogits",
            Error::MissingClassInPool(_) => "MissingClassInPool",
            Error::SingleClassDegenerate => "SingleClassDegenerate",
            Error::SizeOutOfRange { .. } => "SizeOutOfRange",
            Error::ConstructionViolated(_) => "ConstructionViolated",
            Error::ResampleBudgetExceeded(_) => "ResampleBudgetExceeded",
            Error::Json(_) => "Json",
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::MissingFile(_)
            | Error::InvalidManifest(_)
            | Error::KOutOfRange { .. }
            | Error::SizeOutOfRange { .. }
            | Error::EmptyModelList
            | Error::UnknownModel(_)
            | Error::InvalidParameter(_)
            | Error::Json(_) => ErrorClass::Config,
            Error::ZeroVariance
            | Error::NonPositiveIdealDCG
            | Error::DegenerateFeatures(_)
            | Error::DegenerateLogits
            | Error::SingleClassDegenerate
            | Error::ZeroNormQuery
            | Error::ConstructionViolated(_)
            | Error::ResampleBudgetExceeded(_) => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}
