use thiserror::Error;

pub type Result<T> = std::result::Result<T, TdsError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TdsError {
    #[error("invalid system: {0}")]
    InvalidSystem(String),

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("singular pivot at row {row}: |{pivot:e}| below floor {floor:e}")]
    SingularPivot { row: usize, pivot: f64, floor: f64 },

    #[error("singular Sherman-Morrison correction: |{denominator:e}| below floor {floor:e}")]
    SingularCorrection { denominator: f64, floor: f64 },

    #[error("singular matrix at column {column}")]
    SingularMatrix { column: usize },

    #[error("dense oracle limited to n <= {max}, got {n}")]
    TooLarge { n: usize, max: usize },

    #[error("truncated coupling {max_dropped:e} exceeds threshold {threshold:e}")]
    TruncationUnsafe { max_dropped: f64, threshold: f64 },

    #[error("system is not diagonally dominant at row {row} (margin {margin:e})")]
    NotDominant { row: usize, margin: f64 },

    #[error("singular boundary pair: |det| = {det:e}")]
    SingularPair { det: f64 },

    #[error("index ({i}, {j}, {k}) outside extents ({nx}, {ny}, {nz})")]
    OutOfBounds {
        i: usize,
        j: usize,
        k: usize,
        nx: usize,
        ny: usize,
        nz: usize,
    },

    #[error("transverse size {transverse} is not divisible by sz = {sz}")]
    Divisibility { transverse: usize, sz: usize },

    #[error("rank {rank} has no {side} neighbor")]
    NoNeighbor { rank: usize, side: &'static str },

    #[error("rank {rank}: expected {expected}, received {received}")]
    TagMismatch {
        rank: usize,
        expected: String,
        received: String,
    },

    #[error("rank {rank}: channel disconnected")]
    Disconnected { rank: usize },

    #[error("rank {rank} panicked: {message}")]
    RankPanic { rank: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("correctness check failed: {0}")]
    CheckFailed(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for TdsError {
    fn from(e: std::io::Error) -> Self {
        TdsError::Io(e.to_string())
    }
}

impl From<csv::Error> for TdsError {
    fn from(e: csv::Error) -> Self {
        TdsError::Io(e.to_string())
    }
}
