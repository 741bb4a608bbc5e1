//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // --- NIfTI parsing / IO ---
    #[error("not a single-file NIfTI-1 image (magic != \"n+1\\0\")")]
    BadMagic,
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("corrupt NIfTI header: {0}")]
    CorruptHeader(String),
    #[error("voxel payload shorter than the header-declared extent")]
    TruncatedData,
    #[error("NaN voxel values after intensity scaling")]
    NaNInData,
    #[error("only 3-D volumes are supported (got rank {0} with non-unit trailing extents)")]
    UnsupportedRank(i16),
    #[error("I/O failure: {0}")]
    Io(#[from] std::io::Error),

    // --- geometry / tensors ---
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("pad_to target {target:?} is smaller than the input shape {shape:?}")]
    ShrinkRequested { shape: [usize; 3], target: [usize; 3] },
    #[error("spatial dimensions must be even for 2x pooling, got {0:?}")]
    OddSpatialDim([usize; 3]),
    #[error("batch normalization needs at least 2 values per channel")]
    DegenerateBatch,

    // --- clustering ---
    #[error("fewer distinct intensity values than requested clusters")]
    DegenerateData,

    // --- losses / labels ---
    #[error("target label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },

    // --- tiling ---
    #[error("patch plan does not match the supplied data: {0}")]
    PlanMismatch(String),

    // --- model / training ---
    #[error("invalid network configuration: {0}")]
    BadConfig(String),
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at {phase} epoch {epoch}")]
    NonFiniteLoss { phase: &'static str, epoch: usize },
    #[error("checkpoint is not a valid model container: {0}")]
    BadCheckpoint(String),

    // --- metrics ---
    #[error("label {0} is empty in one of the masks; surface distance undefined")]
    EmptyStructure(u8),
    #[error("all paired differences are zero; signed-rank test undefined")]
    AllZeroDifferences,

    // --- phantom ---
    #[error("structure '{0}' extends outside its designated region box")]
    StructureOutsideRegion(String),

    // --- configuration files ---
    #[error("config parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    InvalidConfig(String),
}
