//! Piecewise B-spline leaf axis parameterized on a global `t ∈ [0, 1]`.

use nalgebra::{Point3, Vector3};

use super::bspline::BSplineSegment;
use crate::error::{Error, Result};

// 8-point Gauss–Legendre nodes and weights on [-1, 1].
const GL_NODES: [f64; 8] = [
    -0.960_289_856_497_536_3,
    -0.796_666_477_413_626_7,
    -0.525_532_409_916_329,
    -0.183_434_642_495_649_8,
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL_WEIGHTS: [f64; 8] = [
    0.101_228_536_290_376_26,
    0.222_381_034_453_374_47,
    0.313_706_645_877_887_3,
    0.362_683_783_378_362,
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_47,
    0.101_228_536_290_376_26,
];

/// Quadrature pieces per knot span for arc-length tables.
const PIECES_PER_SPAN: usize = 8;

fn gauss_legendre(seg: &BSplineSegment, a: f64, b: f64) -> f64 {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    GL_NODES
        .iter()
        .zip(GL_WEIGHTS)
        .map(|(x, w)| w * seg.first_derivative(mid + half * x).norm())
        .sum::<f64>()
        * half
}

/// A point on the curve at a given arc length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveSample {
    pub t: f64,
    pub arc: f64,
    pub point: Point3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeafCurve {
    segments: Vec<BSplineSegment>,
    /// `segments.len() + 1` increasing values from 0 to 1.
    bounds: Vec<f64>,
}

impl LeafCurve {
    pub fn new(segments: Vec<BSplineSegment>, bounds: Vec<f64>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::TooFewPoints(0));
        }
        if bounds.len() != segments.len() + 1
            || bounds[0] != 0.0
            || *bounds.last().unwrap() != 1.0
            || bounds.windows(2).any(|w| !(w[1] > w[0]))
        {
            return Err(Error::Format("segment bounds must increase from 0 to 1".into()));
        }
        for pair in segments.windows(2) {
            let end = *pair[0].control().last().unwrap();
            let start = pair[1].control()[0];
            if (end - start).norm() > 1e-9 {
                return Err(Error::Format("adjacent segments do not share an endpoint".into()));
            }
        }
        Ok(Self { segments, bounds })
    }

    /// Rebuilds a curve from its de-duplicated control points, as produced by
    /// [`LeafCurve::unique_control_points`].
    pub fn from_unique_control_points(
        points: &[Point3<f64>],
        counts: &[usize],
        bounds: Vec<f64>,
    ) -> Result<Self> {
        let expected: usize = counts.iter().sum::<usize>() + 1 - counts.len();
        if counts.is_empty() || points.len() != expected {
            return Err(Error::Format(format!(
                "expected {expected} control points for segment counts {counts:?}, got {}",
                points.len()
            )));
        }
        let mut segments = Vec::with_capacity(counts.len());
        let mut start = 0;
        for &c in counts {
            segments.push(BSplineSegment::new(points[start..start + c].to_vec())?);
            start += c - 1;
        }
        Self::new(segments, bounds)
    }

    pub fn segments(&self) -> &[BSplineSegment] {
        &self.segments
    }

    pub fn bounds(&self) -> &[f64] {
        &self.bounds
    }

    /// Global parameters where one spline segment hands over to the next.
    pub fn breaks(&self) -> &[f64] {
        &self.bounds[1..self.bounds.len() - 1]
    }

    pub fn segment_control_counts(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.control().len()).collect()
    }

    /// All control points with shared junction points listed once.
    pub fn unique_control_points(&self) -> Vec<Point3<f64>> {
        let mut out = Vec::new();
        for (k, seg) in self.segments.iter().enumerate() {
            let skip = usize::from(k > 0);
            out.extend_from_slice(&seg.control()[skip..]);
        }
        out
    }

    /// Applies `f` to every control point. Affine maps commute with B-spline
    /// evaluation, so this transforms the curve itself.
    pub fn map_control_points(&self, f: impl Fn(&Point3<f64>) -> Point3<f64>) -> Self {
        let segments = self
            .segments
            .iter()
            .map(|s| BSplineSegment::new(s.control().iter().map(&f).collect()).expect("same size"))
            .collect();
        Self { segments, bounds: self.bounds.clone() }
    }

    /// Segment index and local parameter for a global `t`. A `t` exactly on an
    /// interior bound belongs to the later segment.
    pub fn locate(&self, t: f64) -> (usize, f64) {
        let n = self.segments.len();
        let k = self.bounds[1..n].partition_point(|b| *b <= t);
        let (lo, hi) = (self.bounds[k], self.bounds[k + 1]);
        (k, ((t - lo) / (hi - lo)).clamp(0.0, 1.0))
    }

    pub fn global_t(&self, segment: usize, u: f64) -> f64 {
        let (lo, hi) = (self.bounds[segment], self.bounds[segment + 1]);
        lo + u * (hi - lo)
    }

    fn check(t: f64) -> Result<()> {
        if (0.0..=1.0).contains(&t) {
            Ok(())
        } else {
            Err(Error::ParameterOutOfRange(t))
        }
    }

    pub fn evaluate(&self, t: f64) -> Result<Point3<f64>> {
        Self::check(t)?;
        let (k, u) = self.locate(t);
        Ok(self.segments[k].point(u))
    }

    /// Position and first two derivatives with respect to global `t`.
    pub fn derivatives(&self, t: f64) -> Result<[Vector3<f64>; 3]> {
        Self::check(t)?;
        let (k, u) = self.locate(t);
        let scale = 1.0 / (self.bounds[k + 1] - self.bounds[k]);
        let [p, d1, d2] = self.segments[k].derivatives(u);
        Ok([p, d1 * scale, d2 * (scale * scale)])
    }

    pub fn derivative(&self, t: f64, order: u8) -> Result<Vector3<f64>> {
        match order {
            1 | 2 => Ok(self.derivatives(t)?[order as usize]),
            _ => Err(Error::Format(format!("derivative order {order} not supported"))),
        }
    }

    pub fn curvature(&self, t: f64) -> Result<f64> {
        let [_, d1, d2] = self.derivatives(t)?;
        curvature_from(&d1, &d2).ok_or(Error::VanishingDerivative(t))
    }

    pub fn tip(&self) -> Point3<f64> {
        self.segments[0].control()[0]
    }

    pub fn base(&self) -> Point3<f64> {
        *self.segments.last().unwrap().control().last().unwrap()
    }

    /// Cumulative arc-length table for one segment: `(u, s)` pairs at
    /// quadrature piece boundaries.
    fn arc_table(seg: &BSplineSegment) -> Vec<(f64, f64)> {
        let pieces = (seg.control().len() - 3) * PIECES_PER_SPAN;
        let mut table = Vec::with_capacity(pieces + 1);
        table.push((0.0, 0.0));
        let mut s = 0.0;
        for i in 0..pieces {
            let a = i as f64 / pieces as f64;
            let b = (i + 1) as f64 / pieces as f64;
            s += gauss_legendre(seg, a, b);
            table.push((b, s));
        }
        table
    }

    pub fn segment_lengths(&self) -> Vec<f64> {
        self.segments
            .iter()
            .map(|s| Self::arc_table(s).last().unwrap().1)
            .collect()
    }

    pub fn arc_length(&self) -> f64 {
        self.segment_lengths().iter().sum()
    }

    /// Points spaced evenly in arc length, tip first, `round(L / spacing) + 1`
    /// of them (at least two).
    pub fn sample_points(&self, spacing: f64) -> Vec<CurveSample> {
        let n = ((self.arc_length() / spacing).round() as usize + 1).max(2);
        self.sample_evenly(n)
    }

    /// `n ≥ 2` points evenly spaced in arc length from tip to base.
    pub fn sample_evenly(&self, n: usize) -> Vec<CurveSample> {
        let n = n.max(2);
        let tables: Vec<_> = self.segments.iter().map(Self::arc_table).collect();
        let lengths: Vec<f64> = tables.iter().map(|t| t.last().unwrap().1).collect();
        let total: f64 = lengths.iter().sum();
        let mut out = Vec::with_capacity(n);
        let mut seg = 0;
        let mut seg_start = 0.0;
        for i in 0..n {
            let target = if i + 1 == n { total } else { total * i as f64 / (n - 1) as f64 };
            while seg + 1 < self.segments.len() && target >= seg_start + lengths[seg] {
                seg_start += lengths[seg];
                seg += 1;
            }
            let local = (target - seg_start).clamp(0.0, lengths[seg]);
            let u = invert_arc(&self.segments[seg], &tables[seg], local);
            out.push(CurveSample {
                t: self.global_t(seg, u),
                arc: target,
                point: self.segments[seg].point(u),
            });
        }
        out
    }

    /// Polyline through points roughly `step` apart in each segment's parameter.
    pub fn dense_points(&self, step: f64) -> Vec<Point3<f64>> {
        let mut out = Vec::new();
        for (k, seg) in self.segments.iter().enumerate() {
            let table = Self::arc_table(seg);
            let len = table.last().unwrap().1;
            let n = ((len / step).ceil() as usize).max(1);
            let skip = usize::from(k > 0);
            for i in skip..=n {
                let u = invert_arc(seg, &table, len * i as f64 / n as f64);
                out.push(seg.point(u));
            }
        }
        out
    }
}

pub(crate) fn curvature_from(d1: &Vector3<f64>, d2: &Vector3<f64>) -> Option<f64> {
    let speed = d1.norm();
    if speed <= 1e-9 {
        return None;
    }
    Some(d1.cross(d2).norm() / (speed * speed * speed))
}

/// Local parameter at arc length `s` from the segment start.
fn invert_arc(seg: &BSplineSegment, table: &[(f64, f64)], s: f64) -> f64 {
    let total = table.last().unwrap().1;
    if s <= 0.0 {
        return 0.0;
    }
    if s >= total {
        return 1.0;
    }
    let i = table.partition_point(|(_, acc)| *acc <= s).clamp(1, table.len() - 1);
    let (u0, s0) = table[i - 1];
    let (u1, s1) = table[i];
    let mut u = if s1 > s0 { u0 + (u1 - u0) * (s - s0) / (s1 - s0) } else { u0 };
    for _ in 0..8 {
        let f = s0 + gauss_legendre(seg, u0, u) - s;
        let speed = seg.first_derivative(u).norm();
        if speed <= 1e-12 {
            break;
        }
        let next = (u - f / speed).clamp(u0, u1);
        if (next - u).abs() < 1e-14 {
            u = next;
            break;
        }
        u = next;
    }
    u
}
