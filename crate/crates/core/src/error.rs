use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("integration diverged at t = {time} (|value| exceeded {bound:e}){}", trajectory_suffix(.trajectory))]
    Instability {
        time: f64,
        bound: f64,
        trajectory: Option<usize>,
    },

    #[error("snapshot matrix has numerical rank {achievable}, fewer than the {requested} requested modes")]
    RankDeficient { requested: usize, achievable: usize },

    #[error("component {component} has zero variance and cannot be whitened")]
    ZeroVariance { component: usize },

    #[error("point is outside dictionary coverage{}", snapshot_suffix(.snapshot))]
    OutOfCoverage { snapshot: Option<usize> },

    #[error("all points are collinear; no triangulation exists")]
    Collinear,

    #[error("query ({0}, {1}) lies outside the convex hull of the interpolation data")]
    OutsideHull(f64, f64),

    #[error("no eigenvalue pair within tolerance: the approximation generated by EDMD is not accurate enough to be useful")]
    NoMatch,

    #[error("registration impossible: eigenfunction {index} vanishes at every joint point; choose a different joint measurement")]
    Registration { index: usize },

    #[error("spectrum has no qualifying {0} eigenvalue")]
    NoQualifyingTuple(&'static str),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn trajectory_suffix(t: &Option<usize>) -> String {
    t.map(|i| format!(" in trajectory {i}")).unwrap_or_default()
}

fn snapshot_suffix(s: &Option<usize>) -> String {
    s.map(|i| format!(" (snapshot {i})")).unwrap_or_default()
}

impl Error {
    /// True for failures of the numerics themselves, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Instability { .. }
                | Error::RankDeficient { .. }
                | Error::Collinear
                | Error::NoMatch
                | Error::Registration { .. }
                | Error::NoQualifyingTuple(_)
                | Error::Numerical(_)
                | Error::OutOfCoverage { .. }
                | Error::OutsideHull(..)
        )
    }
}
