//! Anchoring database leaves at a scene's tip and base.

use nalgebra::{Matrix3, Point3, Vector3};

use super::curve::LeafCurve;
use super::database::LeafRecord;
use super::fit::spline_from_polyline;
use crate::error::{Error, Result};

/// Minimum tip–base separation for a usable anchor, in mm.
pub const MIN_ANCHOR_SPAN: f64 = 10.0;

/// `x ↦ target + scale · R (x − source)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    pub source: Point3<f64>,
    pub target: Point3<f64>,
}

impl Similarity {
    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        self.target + self.rotation * (p - self.source) * self.scale
    }
}

/// Columns `(d, u, d × u)` with `d` along base→tip and `u` the part of `up`
/// orthogonal to `d`.
pub fn anchor_frame(base: &Point3<f64>, tip: &Point3<f64>, up: &Vector3<f64>) -> Result<Matrix3<f64>> {
    let d = (tip - base)
        .try_normalize(1e-12)
        .ok_or(Error::DegenerateFrame("tip coincides with base"))?;
    let up = up.try_normalize(1e-12).ok_or(Error::DegenerateFrame("zero up vector"))?;
    if d.cross(&up).norm() <= 1e-6 {
        return Err(Error::DegenerateFrame("up vector parallel to base-to-tip direction"));
    }
    let u = (up - d * up.dot(&d)).normalize();
    Ok(Matrix3::from_columns(&[d, u, d.cross(&u)]))
}

pub fn anchor_transform(
    source_base: &Point3<f64>,
    source_tip: &Point3<f64>,
    target_base: &Point3<f64>,
    target_tip: &Point3<f64>,
    up: &Vector3<f64>,
) -> Result<Similarity> {
    let target_span = (target_tip - target_base).norm();
    if target_span <= MIN_ANCHOR_SPAN {
        return Err(Error::DegenerateFrame("tip and base closer than 10 mm"));
    }
    let source_span = (source_tip - source_base).norm();
    if source_span <= 1e-9 {
        return Err(Error::DegenerateFrame("database leaf has coincident tip and base"));
    }
    let from = anchor_frame(source_base, source_tip, up)?;
    let to = anchor_frame(target_base, target_tip, up)?;
    Ok(Similarity {
        rotation: to * from.transpose(),
        scale: target_span / source_span,
        source: *source_base,
        target: *target_base,
    })
}

/// The record's polyline mapped so its base and tip land on the targets.
pub fn place_points(
    record: &LeafRecord,
    tip: &Point3<f64>,
    base: &Point3<f64>,
    up: &Vector3<f64>,
) -> Result<Vec<Point3<f64>>> {
    record.validate()?;
    let map = anchor_transform(&record.base(), &record.tip(), base, tip, up)?;
    let mut pts: Vec<Point3<f64>> = record.points.iter().map(|p| map.apply(&Point3::from(*p))).collect();
    // Pin the anchors exactly; the map reproduces them only up to rounding.
    pts[0] = *tip;
    *pts.last_mut().unwrap() = *base;
    Ok(pts)
}

pub fn place_leaf(
    record: &LeafRecord,
    tip: &Point3<f64>,
    base: &Point3<f64>,
    up: &Vector3<f64>,
) -> Result<LeafCurve> {
    spline_from_polyline(&place_points(record, tip, base, up)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> LeafRecord {
        LeafRecord {
            id: "a".into(),
            plant: "p".into(),
            points: vec![[150.0, 0.0, 120.0], [90.0, 0.0, 130.0], [40.0, 0.0, 90.0], [0.0, 0.0, 0.0]],
        }
    }

    #[test]
    fn identity_anchor_keeps_curve() {
        let r = record();
        let placed = place_leaf(&r, &r.tip(), &r.base(), &Vector3::z()).unwrap();
        let direct = spline_from_polyline(&r.polyline()).unwrap();
        for i in 0..=10 {
            let t = i as f64 / 10.0;
            assert!((placed.evaluate(t).unwrap() - direct.evaluate(t).unwrap()).norm() < 1e-6);
        }
    }

    #[test]
    fn doubling_the_span_doubles_length() {
        let r = record();
        let tip = Point3::new(300.0, 0.0, 240.0);
        let placed = place_points(&r, &tip, &Point3::origin(), &Vector3::z()).unwrap();
        let src = r.polyline();
        for (a, b) in placed.windows(2).zip(src.windows(2)) {
            assert!(((a[1] - a[0]).norm() - 2.0 * (b[1] - b[0]).norm()).abs() < 1e-9);
        }
        // The refit picks its control-point count from the new length, so the
        // spline lengths agree only approximately.
        let curve = place_leaf(&r, &tip, &Point3::origin(), &Vector3::z()).unwrap();
        let direct = spline_from_polyline(&src).unwrap();
        assert!((curve.arc_length() / direct.arc_length() - 2.0).abs() < 0.02);
    }

    #[test]
    fn endpoints_land_exactly() {
        let r = record();
        let tip = Point3::new(-40.0, 77.0, 210.0);
        let base = Point3::new(3.0, -2.0, 5.0);
        let c = place_leaf(&r, &tip, &base, &Vector3::z()).unwrap();
        assert!((c.tip() - tip).norm() < 1e-6);
        assert!((c.base() - base).norm() < 1e-6);
    }

    #[test]
    fn degenerate_frames() {
        let r = record();
        let base = Point3::origin();
        assert!(place_leaf(&r, &Point3::new(0.0, 0.0, 100.0), &base, &Vector3::z()).is_err());
        assert!(place_leaf(&r, &Point3::new(5.0, 0.0, 0.0), &base, &Vector3::z()).is_err());
    }
}
