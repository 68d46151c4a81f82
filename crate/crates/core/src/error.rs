use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("edge ({0}, {1}) is not in the graph")]
    MissingEdge(usize, usize),

    #[error("node {node} is out of range for a graph with {num_nodes} nodes")]
    OutOfRange { node: usize, num_nodes: usize },

    #[error("self-loop on node {0}; the normalized operator adds the identity itself")]
    SelfLoop(usize),

    #[error("training did not converge: gradient norm {grad_norm:e} after {iters} iterations")]
    NonConvergence { iters: usize, grad_norm: f64 },

    #[error("conjugate gradients stalled at relative residual {residual:e} after {iters} iterations")]
    SolverStall { iters: usize, residual: f64 },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("bound denominator is not positive: {0}")]
    DegenerateDenominator(f64),

    #[error("{}:{line}: {message}", file.display())]
    Parse {
        file: PathBuf,
        line: u64,
        message: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonConvergence { .. } | Error::SolverStall { .. } => 3,
            Error::MissingEdge(..)
            | Error::OutOfRange { .. }
            | Error::SelfLoop(_)
            | Error::DegenerateInput(_)
            | Error::DegenerateDenominator(_)
            | Error::Parse { .. }
            | Error::Validation(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => 2,
        }
    }
}
