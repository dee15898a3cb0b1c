//! Least-squares B-spline fitting of leaf polylines.

use nalgebra::{DMatrix, Point3};

use super::bspline::{basis_derivatives, clamped_uniform_knots, find_span, BSplineSegment, DEGREE};
use super::curve::LeafCurve;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    /// Polyline vertices turning by more than this start a new segment.
    pub break_angle_deg: f64,
    /// Arc length covered per control point.
    pub control_spacing_mm: f64,
    pub min_control_points: usize,
    /// Upper bound on the spacing of the dense resample used for fitting.
    pub resample_step_mm: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            break_angle_deg: 45.0,
            control_spacing_mm: 30.0,
            min_control_points: 4,
            resample_step_mm: 2.0,
        }
    }
}

pub fn spline_from_polyline(points: &[Point3<f64>]) -> Result<LeafCurve> {
    spline_from_polyline_with(points, &FitConfig::default())
}

pub fn spline_from_polyline_with(points: &[Point3<f64>], config: &FitConfig) -> Result<LeafCurve> {
    let mut pts: Vec<Point3<f64>> = Vec::with_capacity(points.len());
    for p in points {
        if pts.last().is_none_or(|q| (p - q).norm() > 1e-9) {
            pts.push(*p);
        }
    }
    if pts.len() < 2 {
        return Err(Error::TooFewPoints(pts.len()));
    }
    let corners = corner_indices(&pts, config.break_angle_deg);
    let mut cuts = vec![0];
    cuts.extend(corners);
    cuts.push(pts.len() - 1);

    let mut segments = Vec::with_capacity(cuts.len() - 1);
    let mut lengths = Vec::with_capacity(cuts.len() - 1);
    for w in cuts.windows(2) {
        let run = &pts[w[0]..=w[1]];
        let len = polyline_length(run);
        let count = ((len / config.control_spacing_mm).ceil() as usize)
            .max(config.min_control_points)
            .max(DEGREE + 1);
        segments.push(fit_run(run, len, count, config.resample_step_mm));
        lengths.push(len);
    }
    let total: f64 = lengths.iter().sum();
    let mut bounds = Vec::with_capacity(lengths.len() + 1);
    let mut acc = 0.0;
    bounds.push(0.0);
    for len in &lengths[..lengths.len() - 1] {
        acc += len;
        bounds.push(acc / total);
    }
    bounds.push(1.0);
    LeafCurve::new(segments, bounds)
}

/// Indices of interior vertices whose turn angle exceeds `angle_deg`.
pub fn corner_indices(points: &[Point3<f64>], angle_deg: f64) -> Vec<usize> {
    let limit = angle_deg.to_radians();
    (1..points.len().saturating_sub(1))
        .filter(|&i| {
            let a = points[i] - points[i - 1];
            let b = points[i + 1] - points[i];
            a.angle(&b) > limit
        })
        .collect()
}

pub fn polyline_length(points: &[Point3<f64>]) -> f64 {
    points.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// Evenly spaced (in arc length) points along a polyline, with their
/// arc-length fraction.
fn resample(run: &[Point3<f64>], len: f64, n: usize) -> Vec<(f64, Point3<f64>)> {
    let mut out = Vec::with_capacity(n);
    let mut edge = 0;
    let mut edge_start = 0.0;
    for i in 0..n {
        let s = len * i as f64 / (n - 1) as f64;
        loop {
            let e = (run[edge + 1] - run[edge]).norm();
            if s <= edge_start + e || edge + 2 == run.len() {
                let f = if e > 0.0 { ((s - edge_start) / e).clamp(0.0, 1.0) } else { 0.0 };
                out.push((s / len, run[edge] + (run[edge + 1] - run[edge]) * f));
                break;
            }
            edge_start += e;
            edge += 1;
        }
    }
    out
}

/// Clamped cubic fit with both endpoints pinned to the run's endpoints.
fn fit_run(run: &[Point3<f64>], len: f64, count: usize, step: f64) -> BSplineSegment {
    let samples_n = ((len / step).ceil() as usize + 1).max(4 * count);
    let samples = resample(run, len, samples_n);
    let knots = clamped_uniform_knots(count);
    let first = run[0];
    let last = *run.last().unwrap();
    let unknown = count - 2;

    let mut ata = DMatrix::<f64>::zeros(unknown, unknown);
    let mut atb = DMatrix::<f64>::zeros(unknown, 3);
    for (u, p) in &samples {
        let span = find_span(count, *u);
        let basis = basis_derivatives(span, *u, &knots)[0];
        let mut rhs = p.coords;
        let mut cols = [(0usize, 0.0f64); 4];
        let mut used = 0;
        for (j, b) in basis.iter().enumerate() {
            let idx = span - DEGREE + j;
            if idx == 0 {
                rhs -= first.coords * *b;
            } else if idx == count - 1 {
                rhs -= last.coords * *b;
            } else {
                cols[used] = (idx - 1, *b);
                used += 1;
            }
        }
        for &(r, br) in &cols[..used] {
            for &(c, bc) in &cols[..used] {
                ata[(r, c)] += br * bc;
            }
            for d in 0..3 {
                atb[(r, d)] += br * rhs[d];
            }
        }
    }
    let solution = ata
        .cholesky()
        .map(|ch| ch.solve(&atb))
        .expect("dense resample makes the normal matrix positive definite");
    let mut control = Vec::with_capacity(count);
    control.push(first);
    for i in 0..unknown {
        control.push(Point3::new(solution[(i, 0)], solution[(i, 1)], solution[(i, 2)]));
    }
    control.push(last);
    BSplineSegment::new(control).expect("count ≥ 4")
}
