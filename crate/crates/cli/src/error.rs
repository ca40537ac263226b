use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Runtime {
        context: String,
        #[source]
        source: featlab::Error,
    },
}

impl CliError {
    pub fn runtime(context: impl Into<String>, source: featlab::Error) -> Self {
        CliError::Runtime {
            context: context.into(),
            source,
        }
    }

    /// 2 for usage and config problems, 3 for everything that failed while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime { .. } => 3,
        }
    }
}
