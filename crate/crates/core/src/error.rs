use nalgebra::DVector;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("value out of integer range: {0}")]
    Range(String),

    #[error("graph is not strongly connected: agent {to} is unreachable from agent {from}")]
    Topology { from: usize, to: usize },

    /// The local Newton solver stopped before reaching its residual tolerance.
    #[error("local solve did not converge{} after {iterations} iterations (residual {residual:.3e})",
        agent.map(|a| format!(" for agent {a}")).unwrap_or_default())]
    Convergence {
        agent: Option<usize>,
        iterations: usize,
        residual: f64,
        best: DVector<f64>,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("diagnostic unavailable: {0}")]
    DiagnosticUnavailable(String),

    #[error("reference solution failed: {0}")]
    Oracle(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("trace schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Attach an agent index to a local-solver convergence error.
    pub(crate) fn for_agent(self, index: usize) -> Self {
        match self {
            Error::Convergence {
                iterations,
                residual,
                best,
                ..
            } => Error::Convergence {
                agent: Some(index),
                iterations,
                residual,
                best,
            },
            other => other,
        }
    }
}
