use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FobError>;

#[derive(Debug, Error)]
pub enum FobError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("mask is empty")]
    EmptyMask,

    #[error("sampling region is empty (widen r or shrink the mask)")]
    EmptyRing,

    #[error("pooling weights sum to zero")]
    ZeroWeight,

    #[error("degenerate prototype: {0}")]
    DegeneratePrototype(String),

    #[error("degenerate graph: row {row} of the adjacency matrix sums to zero")]
    DegenerateGraph { row: usize },

    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("no foreground prompts supplied")]
    EmptyPrompt,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("episode generation failed: {0}")]
    Generation(String),

    #[error("failed to load {path}: {msg}")]
    Load { path: PathBuf, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged: non-finite {term} at iteration {iter}")]
    Divergence { term: String, iter: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("segmentation backend error: {0}")]
    Backend(String),

    #[error("episode stream is empty")]
    EmptyStream,

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<FobError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl FobError {
    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        FobError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
