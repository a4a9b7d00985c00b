use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A transition table is not a square row-stochastic matrix.
    #[error("malformed transition matrix: {0}")]
    MalformedMatrix(String),

    /// The chain is well formed but not irreducible and aperiodic.
    #[error("chain is not ergodic: {0}")]
    NotErgodic(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An iterative solver ran out of budget.
    #[error("{what} did not converge (residual {residual:.3e} after {iterations} iterations)")]
    NonConvergence {
        what: &'static str,
        residual: f64,
        iterations: usize,
    },

    /// The active/passive preference is not monotone in the subsidy.
    #[error("indexability violation at state {sigma}, elapsed {elapsed}: {detail}")]
    Indexability {
        sigma: usize,
        elapsed: usize,
        detail: String,
    },

    /// An observation has zero likelihood under every candidate of an arm.
    #[error("arm {arm}: observation {observed} from state {sigma} after {elapsed} steps is impossible under every candidate")]
    Misspecified {
        arm: usize,
        sigma: usize,
        elapsed: usize,
        observed: usize,
    },

    /// An enumeration would exceed its state budget.
    #[error("state space of {states} exceeds budget {budget}")]
    StateBudget { states: usize, budget: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
