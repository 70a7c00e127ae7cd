use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong between reading a volume and writing a report.
///
/// Variants are split into data problems (bad files, bad labels, bad specs)
/// and numerical failures (non-invertible maps, optimizer divergence); the CLI
/// maps the two groups onto different exit codes via [`Error::is_numerical`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed NIfTI header: field `{field}`: {message}")]
    Format { field: &'static str, message: String },

    #[error("unsupported datatype {0} (supported: 2 uint8, 4 int16, 16 float32)")]
    UnsupportedDatatype(i16),

    #[error("affine is not invertible")]
    NonInvertibleAffine,

    #[error("oblique affine is not supported: {0}")]
    ObliqueAffine(String),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("insufficient landmarks: {found} found, at least 2 required")]
    InsufficientLandmarks { found: usize },

    #[error("non-anatomical label ordering: level {upper} (z={upper_z:.3} mm) is not superior to level {lower} (z={lower_z:.3} mm)")]
    NonAnatomicalOrdering {
        upper: u8,
        upper_z: f64,
        lower: u8,
        lower_z: f64,
    },

    #[error("disc label {value} appears on {count} voxels, expected exactly one")]
    DuplicateDisc { value: u8, count: usize },

    #[error("crossing landmarks: level order differs between subject and template near level {level}")]
    CrossingLandmarks { level: u8 },

    #[error("cord too short: {slices} nonempty axial slices, at least {required} required")]
    CordTooShort { slices: usize, required: usize },

    #[error("centerline not monotone along z near t={t:.4}")]
    CenterlineNotMonotone { t: f64 },

    #[error("degenerate centerline frame at arc length {s:.2} mm")]
    FrameDegenerate { s: f64 },

    #[error("incompatible warp chain at boundary {boundary}: {message}")]
    IncompatibleChain { boundary: usize, message: String },

    #[error("space mismatch: {0}")]
    SpaceMismatch(String),

    #[error("field is not z-only: {0}")]
    NotZOnly(String),

    #[error("non-invertible z-map: total map not increasing on [{z_lo:.3}, {z_hi:.3}] mm")]
    NonInvertibleZMap { z_lo: f64, z_hi: f64 },

    #[error("non-finite value in deformation field at voxel {0}")]
    NonFiniteField(usize),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("optimizer diverged: similarity decreased on {steps} consecutive accepted steps (pyramid level {level}, NCC {from:.5} -> {to:.5})")]
    OptimizerDivergence {
        level: usize,
        steps: usize,
        from: f64,
        to: f64,
    },

    #[error("registration produced a non-monotone z-map near z={z:.3} mm (slope {slope:.4})")]
    NonMonotoneField { z: f64, slope: f64 },

    #[error("scale factor {scale:.3} at z={z:.2} mm outside [0.5, 2.0]")]
    ScaleOutOfBounds { z: f64, scale: f64 },

    #[error("scale profile jumps by {jump:.1}% between adjacent slices at z={z:.2} mm")]
    ScaleDiscontinuity { z: f64, jump: f64 },

    #[error("empty range: {0}")]
    EmptyRange(String),

    #[error("normalization window [{lo}, {hi}] outside profile of length {len}")]
    WindowOutOfRange { lo: i64, hi: i64, len: usize },

    #[error("normalization window mean is zero")]
    ZeroWindowMean,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("png encoding error: {0}")]
    Png(String),

    #[error("step {step}: {source}")]
    Step {
        step: u8,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// Attribute an error to one of the seven pipeline steps.
    pub fn at_step(self, step: u8) -> Self {
        match self {
            e @ Error::Step { .. } => e,
            e => Error::Step {
                step,
                source: Box::new(e),
            },
        }
    }

    /// True for failures of the numerics rather than of the input data.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Step { source, .. } => source.is_numerical(),
            Error::CenterlineNotMonotone { .. }
            | Error::FrameDegenerate { .. }
            | Error::NonInvertibleZMap { .. }
            | Error::NonFiniteField(_)
            | Error::OptimizerDivergence { .. }
            | Error::NonMonotoneField { .. }
            | Error::ScaleOutOfBounds { .. }
            | Error::ScaleDiscontinuity { .. } => true,
            _ => false,
        }
    }
}
