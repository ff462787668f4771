//! Error types shared by the whole crate.

use std::fmt;

/// A rank that can make no further progress, together with a description of
/// the call it is waiting in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockedRank {
    pub rank: usize,
    pub waiting_in: String,
}

/// Produced when the scheduler finds no runnable task while some tasks are
/// still blocked. Lists every stuck rank and the call it is parked in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeadlockReport {
    pub blocked: Vec<BlockedRank>,
}

impl fmt::Display for DeadlockReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "no runnable task; ")?;
        for (i, b) in self.blocked.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "rank {} blocked in {}", b.rank, b.waiting_in)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum SimError {
    /// The cluster description or run plan is malformed.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was called with arguments that violate its contract
    /// (bad bounds, wrong communicator, mismatched counts, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// The simulated program can make no progress.
    #[error("deadlock: {0}")]
    Deadlock(DeadlockReport),

    /// Reading or writing a real file (config, results, charts) failed.
    #[error("i/o error: {0}")]
    Io(String),

    /// Another rank failed first and the run is being torn down. Programs
    /// surface this by propagating errors from simulator calls; the original
    /// failure is what `Simulation::run` reports.
    #[error("simulation aborted by a failure on another rank")]
    Aborted,
}

pub type Result<T> = std::result::Result<T, SimError>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(SimError::Config(msg.into()))
}

pub(crate) fn usage_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(SimError::Usage(msg.into()))
}
