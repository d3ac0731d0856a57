use thiserror::Error;

/// Every failure the estimators can report. `code()` and `module()` feed the
/// CLI's JSON error payload.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PanelError {
    #[error("unbalanced panel: {0}")]
    Balance(String),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("missing data: {0}")]
    MissingData(String),
    #[error("rank deficiency: {0}")]
    Rank(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("perfect separation: {0}")]
    Separation(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("working correlation not positive definite: {0}")]
    Clamp(String),
    #[error("evaluation point outside the data support: {0}")]
    Support(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl PanelError {
    pub fn code(&self) -> &'static str {
        match self {
            PanelError::Balance(_) => "BalanceError",
            PanelError::Schema(_) => "SchemaError",
            PanelError::MissingData(_) => "MissingDataError",
            PanelError::Rank(_) => "RankError",
            PanelError::Domain(_) => "DomainError",
            PanelError::Degenerate(_) => "DegenerateError",
            PanelError::Separation(_) => "SeparationError",
            PanelError::Shape(_) => "ShapeError",
            PanelError::Clamp(_) => "ClampError",
            PanelError::Support(_) => "SupportError",
            PanelError::Unsupported(_) => "UnsupportedError",
            PanelError::Config(_) => "ConfigError",
            PanelError::Io(_) => "IoError",
        }
    }

    /// Library module that typically raises this error.
    pub fn module(&self) -> &'static str {
        match self {
            PanelError::Balance(_) | PanelError::Schema(_) | PanelError::MissingData(_) => {
                "core_model"
            }
            PanelError::Rank(_) | PanelError::Degenerate(_) => "reduced_form",
            PanelError::Separation(_) | PanelError::Clamp(_) => "second_stage",
            PanelError::Shape(_) => "control_functions",
            PanelError::Support(_) => "effects",
            PanelError::Unsupported(_) => "alternative_estimators",
            PanelError::Config(_) => "mc_harness",
            PanelError::Domain(_) => "numerics",
            PanelError::Io(_) => "cli_frontend",
        }
    }
}

impl From<std::io::Error> for PanelError {
    fn from(e: std::io::Error) -> Self {
        PanelError::Io(e.to_string())
    }
}

impl From<csv::Error> for PanelError {
    fn from(e: csv::Error) -> Self {
        PanelError::Schema(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, PanelError>;
