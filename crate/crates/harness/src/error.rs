use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("column `{0}` not found in the CSV header")]
    MissingColumn(String),

    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    NonNumeric { row: usize, column: String, value: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<HarnessError>,
    },

    #[error(transparent)]
    Core(#[from] ctk_core::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    pub fn is_numerical(&self) -> bool {
        match self {
            HarnessError::Core(e) => e.is_numerical(),
            HarnessError::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    /// Process exit code: 3 for numerical failures, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.is_numerical() {
            3
        } else {
            2
        }
    }

    pub fn stage(stage: &str, source: impl Into<HarnessError>) -> Self {
        HarnessError::Stage {
            stage: stage.to_string(),
            source: Box::new(source.into()),
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
