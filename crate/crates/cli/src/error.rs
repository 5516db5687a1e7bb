use thiserror::Error;

/// Failure of a command, mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] ynet_core::Error),

    #[error("gradient check failed for: {}", .0.join(", "))]
    Gradcheck(Vec<String>),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub mod exit {
    pub const OK: i32 = 0;
    pub const GENERAL: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const NUMERIC: i32 = 4;
    pub const ARCHITECTURE: i32 = 5;
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use ynet_core::Error as E;
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Gradcheck(_) => exit::NUMERIC,
            CliError::Io(_) => exit::GENERAL,
            CliError::Core(e) => match e {
                E::Dataset(_) | E::Decode { .. } => exit::DATA,
                E::NonFinite(_) => exit::NUMERIC,
                E::ArchitectureMismatch(_) => exit::ARCHITECTURE,
                E::InvalidArgument(_) => exit::CONFIG,
                _ => exit::GENERAL,
            },
        }
    }
}
