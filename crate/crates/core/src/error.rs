use serde::Serialize;
use thiserror::Error;

/// Which identifiability condition a configuration violated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Theorem {
    /// Kruskal-type k-rank condition for the 4-way decomposition.
    Kruskal,
    /// Multidimensional harmonic retrieval bound.
    Imdf,
    /// Compressed-pilot smoothing bound.
    Ctd,
}

impl std::fmt::Display for Theorem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Theorem::Kruskal => "kruskal",
            Theorem::Imdf => "imdf",
            Theorem::Ctd => "ctd",
        };
        f.write_str(name)
    }
}

#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("inconsistent phases: asin argument {arg} exceeds 1 ({what})")]
    InconsistentPhase { what: &'static str, arg: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("rank-deficient manifolds: estimated paths {0} and {1} collide")]
    CollidingPaths(usize, usize),

    #[error("rank-deficient manifolds: {0}")]
    RankDeficient(String),

    #[error("degenerate path {0}: factor column is numerically zero")]
    DegeneratePath(usize),

    #[error("infeasible: K={k} exceeds Kmax={kmax} under the {theorem} bound")]
    Infeasible { theorem: Theorem, k: usize, kmax: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;
