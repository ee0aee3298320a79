use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("time ordering violated: {0}")]
    Ordering(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("time {time} is not a node of the fine grid")]
    OffGrid { time: f64 },

    #[error("index {index} out of range (limit {limit})")]
    OutOfRange { index: usize, limit: usize },

    #[error("level-{0} lift is not available on this signal")]
    MissingLift(usize),

    #[error("field is complex valued (max imaginary part {max_imag:e})")]
    ComplexValued { max_imag: f64 },

    #[error("dyadic refinement does not contract (fitted rate {rate:.3}, measured mu {measured_mu:.3})")]
    Divergence { rate: f64, measured_mu: f64 },

    #[error("solution blew up at t = {time} (norm {norm:e} > ceiling {ceiling:e})")]
    BlowUp { time: f64, norm: f64, ceiling: f64 },

    #[error("fixed-point iteration did not contract on [{start}, {end}] (factor {factor:.3})")]
    NoContraction { start: f64, end: f64, factor: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch")]
    Checksum,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
