use std::fmt;

use stvcm::accessibility::AccessError;
use stvcm::basis::BasisError;
use stvcm::inference::InferenceError;
use stvcm::mixedmodel::MixedModelError;
use stvcm::multilevel::MultilevelError;
use stvcm::simulate::SimulationError;

/// Process exit codes.
pub mod code {
    pub const USAGE: u8 = 2;
    pub const DATA: u8 = 3;
    pub const RANK: u8 = 4;
    pub const NOT_CONVERGED: u8 = 5;
    pub const IDENTIFIABILITY: u8 = 6;
    pub const VERSION: u8 = 7;
    pub const NUMERIC: u8 = 8;
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(code::USAGE, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(code::DATA, message)
    }

    pub fn context(self, what: &str) -> Self {
        Self {
            code: self.code,
            message: format!("{what}: {}", self.message),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn basis_code(e: &BasisError) -> u8 {
    match e {
        BasisError::Identifiability(_) | BasisError::InfeasibleSeparation(_) => code::IDENTIFIABILITY,
        BasisError::Version { .. } => code::VERSION,
        BasisError::NonFinite => code::NUMERIC,
        _ => code::DATA,
    }
}

fn model_code(e: &MixedModelError) -> u8 {
    match e {
        MixedModelError::RankDeficient { .. } => code::RANK,
        MixedModelError::NotConverged { .. } => code::NOT_CONVERGED,
        MixedModelError::Version { .. } => code::VERSION,
        MixedModelError::Singular | MixedModelError::NonFinite => code::NUMERIC,
        MixedModelError::PredictorOutOfRange { .. } | MixedModelError::NegativePenalty => code::USAGE,
        MixedModelError::Basis(b) => basis_code(b),
        _ => code::DATA,
    }
}

fn inference_code(e: &InferenceError) -> u8 {
    match e {
        InferenceError::SingularCovariance => code::NUMERIC,
        InferenceError::NullFit(m) | InferenceError::Model(m) => model_code(m),
        InferenceError::Basis(b) => basis_code(b),
        _ => code::USAGE,
    }
}

impl From<BasisError> for CliError {
    fn from(e: BasisError) -> Self {
        Self::new(basis_code(&e), e.to_string())
    }
}

impl From<MixedModelError> for CliError {
    fn from(e: MixedModelError) -> Self {
        Self::new(model_code(&e), e.to_string())
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        Self::new(inference_code(&e), e.to_string())
    }
}

impl From<MultilevelError> for CliError {
    fn from(e: MultilevelError) -> Self {
        let code = match &e {
            MultilevelError::Basis(b) => basis_code(b),
            MultilevelError::Model(m) => model_code(m),
            MultilevelError::Inference(i) => inference_code(i),
            MultilevelError::InvalidLevel(_) | MultilevelError::ProviderOutOfRange { .. } => code::USAGE,
            _ => code::DATA,
        };
        Self::new(code, e.to_string())
    }
}

impl From<AccessError> for CliError {
    fn from(e: AccessError) -> Self {
        let code = match e {
            AccessError::DegenerateCosts => code::NUMERIC,
            AccessError::ZeroQ => code::USAGE,
            _ => code::DATA,
        };
        Self::new(code, e.to_string())
    }
}

impl From<SimulationError> for CliError {
    fn from(e: SimulationError) -> Self {
        let code = if matches!(e, SimulationError::Version { .. }) {
            code::VERSION
        } else {
            code::DATA
        };
        Self::new(code, e.to_string())
    }
}
