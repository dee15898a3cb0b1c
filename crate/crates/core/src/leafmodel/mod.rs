//! Leaf axis curves, the leaf database, and placement into a scene.

pub mod bspline;
pub mod curve;
pub mod database;
pub mod fit;
pub mod place;

pub use curve::{CurveSample, LeafCurve};
pub use database::{augment, AugmentConfig, LeafDatabase, LeafRecord};
pub use fit::{spline_from_polyline, FitConfig};
pub use place::{place_leaf, place_points};
