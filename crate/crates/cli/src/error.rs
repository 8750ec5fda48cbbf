use ppac::data::DataError;
use ppac::engine::EngineError;
use ppac::evaluate::EvalError;
use ppac::models::ModelError;
use ppac::numerics::NumericsError;
use ppac::popularity::PopularityError;
use thiserror::Error;

/// Every failure a command can report, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Exit code 1.
    #[error("configuration error: {0}")]
    Config(String),
    /// Exit code 2.
    #[error("{stage}: {message}")]
    Data { stage: &'static str, message: String },
    /// Exit code 3.
    #[error("{stage}: numeric failure: {message}")]
    Numeric { stage: &'static str, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data { .. } => 2,
            CliError::Numeric { .. } => 3,
        }
    }

    /// The message without the category prefix.
    pub fn message(&self) -> String {
        match self {
            CliError::Config(m) => m.clone(),
            CliError::Data { message, .. } | CliError::Numeric { message, .. } => message.clone(),
        }
    }

    pub fn data(stage: &'static str, e: impl std::fmt::Display) -> Self {
        CliError::Data {
            stage,
            message: e.to_string(),
        }
    }

    pub fn io(stage: &'static str, path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Data {
            stage,
            message: format!("{}: {e}", path.display()),
        }
    }

    pub fn data_err(stage: &'static str, e: DataError) -> Self {
        match e {
            DataError::InvalidFractions { .. } => CliError::Config(format!("{stage}: {e}")),
            e => CliError::data(stage, e),
        }
    }

    pub fn popularity(stage: &'static str, e: PopularityError) -> Self {
        match e {
            PopularityError::ZeroK => CliError::Config(format!("{stage}: {e}")),
            e => CliError::data(stage, e),
        }
    }

    pub fn eval(stage: &'static str, e: EvalError) -> Self {
        match e {
            EvalError::InvalidArgument(_) => CliError::Config(format!("{stage}: {e}")),
            e => CliError::data(stage, e),
        }
    }

    pub fn model(stage: &'static str, e: ModelError) -> Self {
        match e {
            ModelError::Numerics(n) if is_non_finite(&n) => CliError::Numeric {
                stage,
                message: n.to_string(),
            },
            e @ (ModelError::MissingHead(_) | ModelError::UnknownKind(_)) => CliError::Config(format!("{stage}: {e}")),
            e => CliError::data(stage, e),
        }
    }

    pub fn engine(stage: &'static str, e: EngineError) -> Self {
        match e {
            EngineError::Config(m) => CliError::Config(format!("{stage}: {m}")),
            e @ EngineError::NonFinite { .. } => CliError::Numeric {
                stage,
                message: e.to_string(),
            },
            EngineError::Model(m) => CliError::model(stage, m),
            EngineError::Data(d) => CliError::data_err(stage, d),
            EngineError::Numerics(n) => CliError::Numeric {
                stage,
                message: n.to_string(),
            },
        }
    }
}

fn is_non_finite(e: &NumericsError) -> bool {
    matches!(e, NumericsError::NonFinite { .. } | NumericsError::NonFiniteGrad { .. })
}
