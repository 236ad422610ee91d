use thiserror::Error;

/// Failure classes shared by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("grid error: {0}")]
    Grid(String),
    #[error("numerical budget exceeded in {stage}: {detail}")]
    Budget { stage: String, detail: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(String),
}

impl LabError {
    pub fn budget(stage: &str, detail: impl Into<String>) -> Self {
        LabError::Budget {
            stage: stage.to_string(),
            detail: detail.into(),
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) | LabError::Geometry(_) | LabError::Serde(_) => 1,
            LabError::Grid(_) | LabError::Budget { .. } | LabError::Io(_) => 2,
        }
    }
}

impl From<serde_json::Error> for LabError {
    fn from(e: serde_json::Error) -> Self {
        LabError::Serde(e.to_string())
    }
}

impl From<csv::Error> for LabError {
    fn from(e: csv::Error) -> Self {
        LabError::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
