use thiserror::Error;

/// Errors produced anywhere in the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point lies on the principal plane of camera {0}")]
    DegenerateProjection(usize),
    #[error("camera {0}: left 3x3 block of the projection matrix is singular")]
    SingularCamera(usize),
    #[error("cameras {0} and {1} share the same centre")]
    CoincidentCentres(usize, usize),
    #[error("need observations from at least two distinct views, got {0}")]
    TooFewViews(usize),
    #[error("triangulation is ill-conditioned (condition number {0:.3e})")]
    IllConditioned(f64),
    #[error("camera {camera} is underdetermined: {count} correspondences, need at least {needed}")]
    Underdetermined {
        camera: usize,
        count: usize,
        needed: usize,
    },
    #[error("view index {0} has no camera")]
    UnknownView(usize),
    #[error("curve parameter {0} outside [0, 1]")]
    ParameterOutOfRange(f64),
    #[error("first derivative vanishes at t = {0}")]
    VanishingDerivative(f64),
    #[error("polyline needs at least two distinct points, got {0}")]
    TooFewPoints(usize),
    #[error("degenerate leaf frame: {0}")]
    DegenerateFrame(&'static str),
    #[error("skeleton is empty")]
    EmptySkeleton,
    #[error("unknown holdout plant {0}")]
    UnknownHoldout(u64),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("no leaf tips found")]
    ZeroTips,
    #[error("leaf database is empty")]
    EmptyDatabase,
    #[error("malformed input: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
