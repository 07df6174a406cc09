use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("volume dimensions must all be >= 1, got {0:?}")]
    InvalidDims([usize; 3]),
    #[error("voxel spacing must be finite and positive, got {0:?}")]
    InvalidSpacing([f64; 3]),
    #[error("voxel buffer holds {actual} samples, dims require {expected}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("{what} out of bounds: {detail}")]
    OutOfBounds { what: &'static str, detail: String },
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("needle does not intersect the scan region")]
    NeedleOutsideScan,
    #[error("line fit needs at least 2 distinct points, got {0}")]
    TooFewPoints(usize),
    #[error("point set has zero spread")]
    ZeroSpread,
    #[error("no confident needle pixels after filtering")]
    EmptyMask,
    #[error("needle pixels do not form an elongated structure (spread ratio {0:.3})")]
    DegenerateFit(f64),
    #[error("plane does not intersect the volume")]
    PlaneMissesVolume,
    #[error("plane must be vertical (normal z-component {0:e})")]
    NonVerticalPlane(f64),
    #[error("needle is horizontal; insertion line never crosses the tip plane")]
    HorizontalNeedle,
    #[error("target lies behind the needle tip (advance {0:.3} µm); retraction is not planned")]
    TargetBehindTip(f64),
    #[error("path z range [{start:.3}, {end:.3}] µm leaves the media stack range [{top:.3}, {bottom:.3}] µm")]
    OutsideMediaStack {
        start: f64,
        end: f64,
        top: f64,
        bottom: f64,
    },
    #[error("no valid layer boundaries near the target column")]
    NoLayerBoundaries,
}
