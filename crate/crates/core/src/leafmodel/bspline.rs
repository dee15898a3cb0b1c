//! Clamped uniform cubic B-spline segments.

use nalgebra::{Point3, Vector3};

use crate::error::{Error, Result};

pub const DEGREE: usize = 3;

/// `[0,0,0,0, 1/(n-3), …, 1,1,1,1]` for `n` control points.
pub fn clamped_uniform_knots(count: usize) -> Vec<f64> {
    assert!(count > DEGREE);
    let spans = count - DEGREE;
    let mut knots = Vec::with_capacity(count + DEGREE + 1);
    knots.extend(std::iter::repeat_n(0.0, DEGREE + 1));
    for j in 1..spans {
        knots.push(j as f64 / spans as f64);
    }
    knots.extend(std::iter::repeat_n(1.0, DEGREE + 1));
    knots
}

/// Knot span containing `u` for uniform clamped knots; `u = 1` maps to the last span.
pub fn find_span(count: usize, u: f64) -> usize {
    let spans = count - DEGREE;
    let k = (u * spans as f64).floor();
    let k = if k < 0.0 { 0 } else { (k as usize).min(spans - 1) };
    k + DEGREE
}

/// Non-zero basis functions `N_{span-3..=span}` and their first two
/// derivatives at `u` (The NURBS Book, A2.3).
pub fn basis_derivatives(span: usize, u: f64, knots: &[f64]) -> [[f64; 4]; 3] {
    const P: usize = DEGREE;
    const N: usize = 2;
    let mut ndu = [[0.0f64; P + 1]; P + 1];
    let mut left = [0.0f64; P + 1];
    let mut right = [0.0f64; P + 1];
    ndu[0][0] = 1.0;
    for j in 1..=P {
        left[j] = u - knots[span + 1 - j];
        right[j] = knots[span + j] - u;
        let mut saved = 0.0;
        for r in 0..j {
            ndu[j][r] = right[r + 1] + left[j - r];
            let temp = ndu[r][j - 1] / ndu[j][r];
            ndu[r][j] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        ndu[j][j] = saved;
    }

    let mut ders = [[0.0f64; P + 1]; N + 1];
    for j in 0..=P {
        ders[0][j] = ndu[j][P];
    }
    let mut a = [[0.0f64; P + 1]; 2];
    for r in 0..=P {
        let (mut s1, mut s2) = (0usize, 1usize);
        a[0][0] = 1.0;
        for k in 1..=N {
            let mut d = 0.0;
            let rk = r as isize - k as isize;
            let pk = P - k;
            if r >= k {
                a[s2][0] = a[s1][0] / ndu[pk + 1][rk as usize];
                d = a[s2][0] * ndu[rk as usize][pk];
            }
            let j1: usize = if rk >= -1 { 1 } else { (-rk) as usize };
            let j2: usize = if r as isize - 1 <= pk as isize { k - 1 } else { P - r };
            for j in j1..=j2 {
                let idx = (rk + j as isize) as usize;
                a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][idx];
                d += a[s2][j] * ndu[idx][pk];
            }
            if r <= pk {
                a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                d += a[s2][k] * ndu[r][pk];
            }
            ders[k][r] = d;
            std::mem::swap(&mut s1, &mut s2);
        }
    }
    let mut factor = P as f64;
    for (k, row) in ders.iter_mut().enumerate().skip(1) {
        for v in row.iter_mut() {
            *v *= factor;
        }
        factor *= (P - k) as f64;
    }
    ders
}

/// One cubic B-spline piece parameterized on `u ∈ [0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BSplineSegment {
    control: Vec<Point3<f64>>,
    knots: Vec<f64>,
}

impl BSplineSegment {
    pub fn new(control: Vec<Point3<f64>>) -> Result<Self> {
        if control.len() <= DEGREE {
            return Err(Error::TooFewPoints(control.len()));
        }
        let knots = clamped_uniform_knots(control.len());
        Ok(Self { control, knots })
    }

    pub fn control(&self) -> &[Point3<f64>] {
        &self.control
    }

    pub fn control_mut(&mut self) -> &mut [Point3<f64>] {
        &mut self.control
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn span(&self, u: f64) -> usize {
        find_span(self.control.len(), u)
    }

    /// Position, first and second derivative with respect to `u`.
    pub fn derivatives(&self, u: f64) -> [Vector3<f64>; 3] {
        let span = self.span(u);
        let basis = basis_derivatives(span, u, &self.knots);
        let mut out = [Vector3::zeros(); 3];
        for (k, row) in basis.iter().enumerate() {
            for (j, b) in row.iter().enumerate() {
                out[k] += self.control[span - DEGREE + j].coords * *b;
            }
        }
        out
    }

    pub fn point(&self, u: f64) -> Point3<f64> {
        let span = self.span(u);
        let basis = basis_derivatives(span, u, &self.knots);
        let mut p = Vector3::zeros();
        for (j, b) in basis[0].iter().enumerate() {
            p += self.control[span - DEGREE + j].coords * *b;
        }
        Point3::from(p)
    }

    pub fn first_derivative(&self, u: f64) -> Vector3<f64> {
        self.derivatives(u)[1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_of_unity() {
        let knots = clamped_uniform_knots(7);
        for i in 0..=50 {
            let u = i as f64 / 50.0;
            let span = find_span(7, u);
            let d = basis_derivatives(span, u, &knots);
            let sum: f64 = d[0].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            let dsum: f64 = d[1].iter().sum();
            assert!(dsum.abs() < 1e-9);
        }
    }

    #[test]
    fn clamped_endpoints() {
        let pts: Vec<_> = (0..6)
            .map(|i| Point3::new(i as f64, (i * i) as f64, 0.5 * i as f64))
            .collect();
        let seg = BSplineSegment::new(pts.clone()).unwrap();
        assert!((seg.point(0.0) - pts[0]).norm() < 1e-12);
        assert!((seg.point(1.0) - pts[5]).norm() < 1e-12);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let pts: Vec<_> = (0..8)
            .map(|i| {
                let a = i as f64 * 0.7;
                Point3::new(a.cos() * 50.0, a.sin() * 40.0, i as f64 * 9.0)
            })
            .collect();
        let seg = BSplineSegment::new(pts).unwrap();
        let h = 1e-6;
        for i in 1..40 {
            let u = i as f64 / 40.0 + 0.003;
            let d = seg.derivatives(u);
            let fd1 = (seg.point(u + h) - seg.point(u - h)) / (2.0 * h);
            assert!((fd1 - d[1]).norm() < 1e-5 * d[1].norm().max(1.0));
            let fd2 = (seg.derivatives(u + h)[1] - seg.derivatives(u - h)[1]) / (2.0 * h);
            assert!((fd2 - d[2]).norm() < 1e-4 * d[2].norm().max(1.0));
        }
    }
}
