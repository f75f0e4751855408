use std::path::PathBuf;

use thiserror::Error;

/// Pipeline stage a failure is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Load,
    Skeleton,
    PelvisRoi,
    InitialRoi,
    Refinement,
    SliceGrading,
    CaseGrading,
    Training,
    Evaluation,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Stage::Load => "load",
            Stage::Skeleton => "skeleton segmentation",
            Stage::PelvisRoi => "pelvis ROI",
            Stage::InitialRoi => "initial SIJ ROI",
            Stage::Refinement => "ROI refinement",
            Stage::SliceGrading => "slice grading",
            Stage::CaseGrading => "case grading",
            Stage::Training => "training",
            Stage::Evaluation => "evaluation",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed container {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("model is not trained: {0}")]
    Untrained(&'static str),
    #[error("pelvis not found")]
    PelvisNotFound,
    #[error("coccyx ambiguous: neither candidate yields SIJ voxels")]
    CoccyxAmbiguous,
    #[error("SIJ not found")]
    SijNotFound,
    #[error("{0}")]
    Config(String),
    #[error("stage `{stage}` failed: {source}")]
    InStage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Attach a stage unless the error already carries one.
    pub fn in_stage(self, stage: Stage) -> Self {
        match self {
            e @ Error::InStage { .. } => e,
            other => Error::InStage {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// The innermost error, with stage wrappers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::InStage { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            Error::InStage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Attach a stage to the error of a `Result`.
pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
