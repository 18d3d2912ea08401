use thiserror::Error;

/// Errors raised by model construction, fitting and scoring.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("covariance of component {component} is not invertible")]
    SingularCovariance { component: usize },

    #[error("slope system for item {item} is singular")]
    SingularSlopeSystem { item: usize },

    #[error("component collapse: component {component} has effective size {size:e}")]
    ComponentCollapse { component: usize, size: f64 },

    #[error("degenerate model: observation {observation} has zero likelihood under every component")]
    DegenerateRow { observation: usize },

    #[error("every random start failed: {0}")]
    AllStartsFailed(String),

    #[error("quadrature grid too large: {nodes} nodes exceeds the cap of {cap}; reduce nodes per dimension")]
    GridTooLarge { nodes: u128, cap: u128 },
}

impl Error {
    /// Whether the failure is numerical (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularCovariance { .. }
                | Error::SingularSlopeSystem { .. }
                | Error::ComponentCollapse { .. }
                | Error::DegenerateRow { .. }
                | Error::AllStartsFailed(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
