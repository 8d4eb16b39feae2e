use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the dissection, training and evaluation pipeline.
#[derive(Debug, Error)]
pub enum CfdError {
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("both masks are empty; IoU is undefined")]
    DegenerateMasks,
    #[error("invalid threshold policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid upsample target {target:?} for mask of {from:?}")]
    InvalidTarget {
        from: (usize, usize),
        target: (usize, usize),
    },
    #[error("block {0} has no feature maps")]
    EmptyBlock(usize),
    #[error("invalid mask or map: {0}")]
    InvalidShape(String),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("snapshot has no classifier head")]
    MissingClassifierHead,
    #[error("invalid occlusion config: {0}")]
    InvalidOcclusion(String),

    #[error("ground truth mask for image {0} is empty")]
    DegenerateGroundTruth(String),
    #[error("need at least two blocks to locate a drop, got {0}")]
    TooFewBlocks(usize),
    #[error("sample set is empty")]
    EmptySampleSet,
    #[error("image {image_id}: {source}")]
    InImage {
        image_id: String,
        #[source]
        source: Box<CfdError>,
    },

    #[error("invalid descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("token {0:?} already in vocabulary")]
    DuplicateToken(String),
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("step {step} is not a probability distribution (sum {sum})")]
    NonDistribution { step: usize, sum: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid block index {0}")]
    InvalidBlock(usize),
    #[error("critical freezing needs F >= 2, got {0}")]
    InvalidF(usize),
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
    #[error("task has no training records")]
    EmptyTask,
    #[error("training diverged at epoch {0}")]
    DivergedTraining(usize),

    #[error("manifest parse error at line {line}: {msg}")]
    ManifestParseError { line: usize, msg: String },
    #[error("missing image {0}")]
    MissingImage(String),
    #[error("unknown shape {0:?}")]
    UnknownShape(String),
    #[error("classes overlap: {0}")]
    OverlappingClasses(String),
    #[error("class {0:?} has no records")]
    MissingClass(String),

    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("corpus needs at least 2 items, got {0}")]
    CorpusTooSmall(usize),

    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("archive format error: {0}")]
    Archive(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("image codec error: {0}")]
    Image(String),
}

impl CfdError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CfdError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_image(image_id: &str, err: CfdError) -> Self {
        CfdError::InImage {
            image_id: image_id.to_string(),
            source: Box::new(err),
        }
    }
}

pub type Result<T, E = CfdError> = std::result::Result<T, E>;
