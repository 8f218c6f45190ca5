use thiserror::Error;

/// Every failure the analysis stack can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid schema: {0}")]
    SchemaInvalid(String),
    #[error("image {image_id}: missing attribute {attribute}")]
    MissingAttribute { image_id: String, attribute: String },
    #[error("pair {pair_id}: unresolved image {image_id}")]
    UnresolvedImage { pair_id: String, image_id: String },
    #[error("degenerate pairs: need at least one positive and one negative pair")]
    DegeneratePairs,
    #[error("no groups to aggregate")]
    NoGroups,
    #[error("diversity needs at least two categories, got {0}")]
    DegenerateSupport(usize),
    #[error("subset is empty")]
    EmptySubset,
    #[error("column {0} is constant")]
    ConstantColumn(String),
    #[error("quasi-separation detected at iteration {iteration}: {detail}")]
    QuasiSeparation { iteration: usize, detail: String },
    #[error("information matrix is singular")]
    SingularInformation,
    #[error("model did not converge")]
    NotConverged,
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("insufficient candidates in cell {cell}: have {have}, need {need}")]
    InsufficientCandidates {
        cell: String,
        have: usize,
        need: usize,
    },
    #[error("{n} identities cannot be split evenly over {cells} cells")]
    NotDivisible { n: usize, cells: usize },
    #[error("insufficient styles for segment {0}")]
    InsufficientStyles(String),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short machine-readable name used in structured CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "Io",
            Error::Parse(_) => "ParseError",
            Error::SchemaInvalid(_) => "SchemaInvalid",
            Error::MissingAttribute { .. } => "MissingAttribute",
            Error::UnresolvedImage { .. } => "UnresolvedImage",
            Error::DegeneratePairs => "DegeneratePairs",
            Error::NoGroups => "NoGroups",
            Error::DegenerateSupport(_) => "DegenerateSupport",
            Error::EmptySubset => "EmptySubset",
            Error::ConstantColumn(_) => "ConstantColumn",
            Error::QuasiSeparation { .. } => "QuasiSeparation",
            Error::SingularInformation => "SingularInformation",
            Error::NotConverged => "NotConverged",
            Error::Precondition(_) => "Precondition",
            Error::InsufficientCandidates { .. } => "InsufficientCandidates",
            Error::NotDivisible { .. } => "NotDivisible",
            Error::InsufficientStyles(_) => "InsufficientStyles",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
