use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grid too coarse for a dyadic partition: j_max = {j_max} (need at least 2)")]
    GridTooCoarse { j_max: i32 },
    #[error("block index {j} outside [-1, {j_max}]")]
    BlockOutOfRange { j: i32, j_max: i32 },
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("time meshes differ")]
    MeshMismatch,
    #[error("negative time {0}")]
    NegativeTime(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dyadic sums do not settle (level differences {0:?})")]
    Divergence(Vec<f64>),
    #[error("fixed point failed to contract on [{t_left}, {t_right}] (last factor {factor})")]
    NonContraction { t_left: f64, t_right: f64, factor: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("positivity floor violated at t = {t}, x = {x} (value {value})")]
    Positivity { t: f64, x: f64, value: f64 },
    #[error("transition kernel rejected: normalization residual {0:e}")]
    KernelRejected(f64),
    #[error("controller mismatch: the paracontrolled function was built on different data")]
    ControllerMismatch,
    #[error("malformed input: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
