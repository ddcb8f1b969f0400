use thiserror::Error;

#[derive(Debug, Error)]
pub enum BbmError {
    #[error("invalid space: {0}")]
    InvalidSpace(String),

    #[error("triangle violation ({i},{j},{k}): d({i},{k}) = {dik} > d({i},{j}) + d({j},{k}) = {via}")]
    TriangleViolation {
        i: usize,
        j: usize,
        k: usize,
        dik: f64,
        via: f64,
    },

    #[error("asymmetric distance ({i},{j}): {dij} vs {dji}")]
    Asymmetric { i: usize, j: usize, dij: f64, dji: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{what} = {value} is below the resolution floor {floor}")]
    Resolution { what: String, value: f64, floor: f64 },

    #[error("regions overlap at atom {0}")]
    OverlappingRegions(usize),

    #[error("candidate {index} is {distance} away from the field in L^p, tolerance {tol}")]
    CandidateTooFar { index: usize, distance: f64, tol: f64 },

    #[error("expression error: {0}")]
    Expression(String),

    #[error("config error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, BbmError>;
