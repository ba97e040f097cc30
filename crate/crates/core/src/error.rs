use thiserror::Error;

/// Errors raised by model construction, numerical routines and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("covariance not positive definite{}: min eigenvalue {min_eig:e} (max {max_eig:e})", group_suffix(*.group))]
    NotSpd {
        group: Option<usize>,
        min_eig: f64,
        max_eig: f64,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("parameter out of range: {0}")]
    ParamRange(String),

    #[error("group {0} has no observed coordinates")]
    EmptyGroup(usize),

    #[error("enumeration budget exceeded: {needed} supports requested, budget is {budget}")]
    Budget { needed: f64, budget: f64 },

    #[error("matrix is rank deficient: numerical rank {rank} < {cols} columns")]
    RankDeficient { rank: usize, cols: usize },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

fn group_suffix(group: Option<usize>) -> String {
    match group {
        Some(g) => format!(" in group {g}"),
        None => String::new(),
    }
}

impl Error {
    /// True for failures of the numerics (as opposed to bad input or I/O).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotSpd { .. }
                | Error::RankDeficient { .. }
                | Error::Singular(_)
                | Error::NonFinite(_)
        )
    }

    /// Attach a group index to a positive-definiteness failure.
    pub fn in_group(self, index: usize) -> Self {
        match self {
            Error::NotSpd {
                min_eig, max_eig, ..
            } => Error::NotSpd {
                group: Some(index),
                min_eig,
                max_eig,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
