use thiserror::Error;

/// Errors raised anywhere in the monitoring pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("degenerate geometry: frame {frame} observes only {visible} landmarks")]
    DegenerateGeometry { frame: u64, visible: usize },
    #[error("behind camera: depth {depth}")]
    BehindCamera { depth: f64 },
    #[error("insufficient parallax: triangulation condition number {condition:.3e}")]
    InsufficientParallax { condition: f64 },
    #[error("rank deficient: landmark {landmark} information block is singular")]
    RankDeficient { landmark: u64 },
    #[error("diverged at frame {frame}: {reason}")]
    Diverged { frame: u64, reason: String },
    #[error("window underflow: {0} poses remain")]
    WindowUnderflow(usize),
    #[error("pose block singular")]
    PoseBlockSingular,
    #[error("zero Jacobian")]
    ZeroJacobian,
    #[error("insufficient calibration data: {0} samples, need at least 20")]
    InsufficientCalibrationData(usize),
    #[error("single-class input")]
    SingleClass,
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("asymmetric matrix at line {line}: relative asymmetry {asymmetry:.3e}")]
    AsymmetricMatrix { line: usize, asymmetry: f64 },
    #[error("unsupported schema {found}, expected {expected}")]
    UnsupportedSchema { found: String, expected: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
