use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing data file {0}")]
    MissingData(PathBuf),
    #[error("gradient check failed: max relative error {max_rel_error:e} at {param}")]
    GradCheck { max_rel_error: f64, param: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] forgetnet_core::Error),
}

#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub error: &'static str,
    pub message: String,
    pub exit_code: i32,
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        use forgetnet_core::Error as E;
        match self {
            CliError::Config(_) => "invalid_config",
            CliError::MissingData(_) => "missing_data",
            CliError::GradCheck { .. } => "gradcheck_failed",
            CliError::Io { .. } => "io",
            CliError::Core(e) => match e {
                E::InvalidConfig(_) | E::InvalidArgument(_) => "invalid_config",
                E::DigestMismatch { .. } => "digest_mismatch",
                E::Diverged { .. } | E::NonFiniteGradient { .. } => "diverged",
                E::BadMagic(_) | E::Truncated { .. } => "bad_data",
                _ => "internal",
            },
        }
    }

    /// 2 invalid config, 3 missing data, 4 digest mismatch, 5 divergence,
    /// 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "invalid_config" => 2,
            "missing_data" => 3,
            "digest_mismatch" => 4,
            "diverged" => 5,
            _ => 1,
        }
    }

    pub fn report(&self) -> ErrorReport {
        ErrorReport {
            error: self.kind(),
            message: self.to_string(),
            exit_code: self.exit_code(),
        }
    }
}
