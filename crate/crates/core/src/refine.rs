//! Scoring placed leaves against skeleton distance fields and refining their
//! control points with Levenberg–Marquardt.
//!
//! The leaf cost is a Riemann sum over points sampled about 7.5 mm apart on
//! the reference curve. Sample `i` with arc-length weight `Δs_i` contributes
//!
//! ```text
//! Δs_i · ( Σ_v d_v(b(t_i)) / max(1, n_i)  +  α (κ(t_i) − κ₀(t_i))² )
//! ```
//!
//! where `d_v` is the skeleton distance in view `v` (bilinear), summed over
//! the `n_i` views in which the point is visible. The least-squares residuals
//! are the square roots of these addends, so the LM cost equals the score.

use nalgebra::{DMatrix, Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Scene;
use crate::error::Result;
use crate::leafmodel::bspline::{basis_derivatives, DEGREE};
use crate::leafmodel::curve::curvature_from;
use crate::leafmodel::{place_leaf, LeafCurve, LeafDatabase};
use crate::lm::{self, LmConfig, Residuals};
use crate::silhouette::{distance_transform, DistanceField, SkeletonImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub alpha: f64,
    pub sample_spacing_mm: f64,
    pub top_k: usize,
    pub lm_max_iters: usize,
    pub lm_relative_tolerance: f64,
    pub jacobian_step_mm: f64,
    /// Samples closer than this (in arc length) to a segment break carry no
    /// curvature penalty.
    pub break_margin_mm: f64,
    /// Keep the tip and base control points fixed during refinement.
    pub pin_endpoints: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            alpha: 2e-7,
            sample_spacing_mm: 7.5,
            top_k: 200,
            lm_max_iters: 100,
            lm_relative_tolerance: 1e-6,
            jacobian_step_mm: 1e-4,
            break_margin_mm: 1.0,
            pin_endpoints: true,
        }
    }
}

/// Skeleton distance fields, capped at the image diagonal so empty skeletons
/// give finite costs.
pub fn skeleton_fields(skeletons: &[SkeletonImage]) -> Vec<DistanceField> {
    skeletons
        .iter()
        .map(|s| {
            let (w, h) = (s.pixels.width() as f64, s.pixels.height() as f64);
            distance_transform(&s.pixels).capped(w.hypot(h))
        })
        .collect()
}

#[derive(Debug, Clone)]
struct FrozenSample {
    t: f64,
    weight: f64,
    basis: [[f64; 4]; 3],
    /// Indices into the unique control-point list.
    controls: [usize; 4],
    kappa0: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeafScore {
    pub value: f64,
    /// Weighted cost of each sample (data plus curvature).
    pub per_sample: Vec<f64>,
    pub visible_view_counts: Vec<usize>,
}

/// The discretized leaf cost around a fixed reference curve.
#[derive(Debug, Clone)]
pub struct LeafObjective<'a> {
    scene: &'a Scene,
    fields: &'a [DistanceField],
    reference: LeafCurve,
    alpha: f64,
    samples: Vec<FrozenSample>,
    counts: Vec<usize>,
    controls: Vec<Point3<f64>>,
    /// Indices of the control points being optimized, in parameter order.
    free: Vec<usize>,
    /// For each unique control point, the samples it influences and its basis slot there.
    support: Vec<Vec<(usize, usize)>>,
}

impl<'a> LeafObjective<'a> {
    pub fn new(
        scene: &'a Scene,
        fields: &'a [DistanceField],
        reference: LeafCurve,
        config: &RefineConfig,
    ) -> Self {
        let (alpha, spacing, break_margin) = (config.alpha, config.sample_spacing_mm, config.break_margin_mm);
        let counts = reference.segment_control_counts();
        let mut offsets = Vec::with_capacity(counts.len());
        let mut acc = 0;
        for c in &counts {
            offsets.push(acc);
            acc += c - 1;
        }
        let n_controls = acc + 1;

        let seg_lengths = reference.segment_lengths();
        let mut break_arcs = Vec::new();
        let mut s = 0.0;
        for len in &seg_lengths[..seg_lengths.len() - 1] {
            s += len;
            break_arcs.push(s);
        }

        let controls = reference.unique_control_points();
        let free = if config.pin_endpoints {
            (1..n_controls - 1).collect()
        } else {
            (0..n_controls).collect()
        };
        let raw = reference.sample_points(spacing);
        let n = raw.len();
        let mut samples = Vec::with_capacity(n);
        let mut support = vec![Vec::new(); n_controls];
        for (i, cs) in raw.iter().enumerate() {
            let prev = if i == 0 { cs.arc } else { raw[i - 1].arc };
            let next = if i + 1 == n { cs.arc } else { raw[i + 1].arc };
            let weight = 0.5 * (next - prev);
            let (seg, u) = reference.locate(cs.t);
            let segment = &reference.segments()[seg];
            let span = segment.span(u);
            let basis = basis_derivatives(span, u, segment.knots());
            let mut indices = [0usize; 4];
            for (j, c) in indices.iter_mut().enumerate() {
                *c = offsets[seg] + span - DEGREE + j;
                support[*c].push((i, j));
            }
            let near_break = break_arcs.iter().any(|b| (cs.arc - b).abs() < break_margin);
            let kappa0 = if near_break {
                None
            } else {
                let [_, d1, d2] = combine(&basis, &indices, &controls);
                curvature_from(&d1, &d2)
            };
            samples.push(FrozenSample { t: cs.t, weight, basis, controls: indices, kappa0 });
        }
        Self { scene, fields, reference, alpha, samples, counts, controls, free, support }
    }

    pub fn reference(&self) -> &LeafCurve {
        &self.reference
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    pub fn sample_parameters(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    pub fn sample_weights(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.weight).collect()
    }

    /// Residuals per sample: one per view, then the curvature term.
    pub fn block_size(&self) -> usize {
        self.fields.len().min(self.scene.cameras.len()) + 1
    }

    /// Coordinates of the free control points of `curve`, which must share
    /// the reference's structure.
    pub fn params_of(&self, curve: &LeafCurve) -> Vec<f64> {
        let pts = curve.unique_control_points();
        self.free.iter().flat_map(|&k| [pts[k].x, pts[k].y, pts[k].z]).collect()
    }

    fn points_from(&self, params: &[f64]) -> Vec<Point3<f64>> {
        let mut pts = self.controls.clone();
        for (&k, c) in self.free.iter().zip(params.chunks_exact(3)) {
            pts[k] = Point3::new(c[0], c[1], c[2]);
        }
        pts
    }

    pub fn curve_from(&self, params: &[f64]) -> Result<LeafCurve> {
        LeafCurve::from_unique_control_points(&self.points_from(params), &self.counts, self.reference.bounds().to_vec())
    }

    fn same_structure(&self, curve: &LeafCurve) -> bool {
        curve.segment_control_counts() == self.counts && curve.bounds() == self.reference.bounds()
    }

    /// Per-sample point, first and second derivative, from control points.
    fn evaluate_points(&self, pts: &[Point3<f64>]) -> Vec<[Vector3<f64>; 3]> {
        self.samples
            .iter()
            .map(|s| combine(&s.basis, &s.controls, pts))
            .collect()
    }

    /// Skeleton distance of `p` in view `v`, or `None` when the point is
    /// behind the camera or hidden by the pot. Points projecting outside the
    /// frame read the border value plus their distance past the border, so
    /// a leaf cannot lower its cost by leaving the image.
    fn view_distance(&self, v: usize, p: &Point3<f64>) -> Option<f64> {
        let cam = &self.scene.cameras[v];
        if !cam.is_in_front(p) || self.scene.pot.intersects_segment(&cam.centre(), p) {
            return None;
        }
        let px = cam.project(p).ok()?;
        let field = &self.fields[v];
        let (w, h) = ((field.width() - 1) as f64, (field.height() - 1) as f64);
        let outside = (px.x.clamp(0.0, w) - px.x).hypot(px.y.clamp(0.0, h) - px.y);
        Some(field.bilinear(px.x, px.y) + outside)
    }

    /// Fills one sample's residual block and returns its visible-view count.
    fn sample_block(&self, i: usize, geom: &[Vector3<f64>; 3], out: &mut [f64]) -> usize {
        let s = &self.samples[i];
        let p = Point3::from(geom[0]);
        let views = out.len() - 1;
        let mut visible = 0;
        if self.scene.pot.contains(&p) {
            // Inside the solid pot nothing can be seen, but a leaf cannot be
            // there either: charge the worst distance in every view.
            for (v, slot) in out[..views].iter_mut().enumerate() {
                let f = &self.fields[v];
                *slot = (f.width() as f64).hypot(f.height() as f64);
            }
            visible = views;
        } else {
            for (v, slot) in out[..views].iter_mut().enumerate() {
                *slot = match self.view_distance(v, &p) {
                    Some(d) => {
                        visible += 1;
                        d
                    }
                    None => -1.0,
                };
            }
        }
        let norm = s.weight / visible.max(1) as f64;
        for slot in &mut out[..views] {
            *slot = if *slot >= 0.0 { (norm * *slot).sqrt() } else { 0.0 };
        }
        out[views] = match s.kappa0 {
            Some(k0) if self.alpha > 0.0 => {
                let k = curvature_from(&geom[1], &geom[2]).unwrap_or(k0);
                (self.alpha * s.weight).sqrt() * (k - k0)
            }
            _ => 0.0,
        };
        visible
    }

    fn residuals_with_counts(&self, pts: &[Point3<f64>], out: &mut [f64]) -> Vec<usize> {
        let b = self.block_size();
        self.evaluate_points(pts)
            .iter()
            .enumerate()
            .map(|(i, g)| self.sample_block(i, g, &mut out[i * b..(i + 1) * b]))
            .collect()
    }

    pub fn score(&self, curve: &LeafCurve) -> LeafScore {
        let b = self.block_size();
        let mut r = vec![0.0; self.samples.len() * b];
        let counts = if self.same_structure(curve) {
            self.residuals_with_counts(&curve.unique_control_points(), &mut r)
        } else {
            self.samples
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let g = curve.derivatives(s.t).expect("sample parameters lie in [0, 1]");
                    self.sample_block(i, &g, &mut r[i * b..(i + 1) * b])
                })
                .collect()
        };
        let per_sample: Vec<f64> = r.chunks_exact(b).map(|c| c.iter().map(|v| v * v).sum()).collect();
        LeafScore {
            value: per_sample.iter().sum(),
            per_sample,
            visible_view_counts: counts,
        }
    }

    /// Least-squares view of the objective with its control points as parameters.
    pub fn problem(&self, step: f64) -> LeafProblem<'_, 'a> {
        LeafProblem { objective: self, step }
    }
}

fn combine(basis: &[[f64; 4]; 3], controls: &[usize; 4], pts: &[Point3<f64>]) -> [Vector3<f64>; 3] {
    let mut out = [Vector3::zeros(); 3];
    for (k, row) in basis.iter().enumerate() {
        for j in 0..4 {
            out[k] += pts[controls[j]].coords * row[j];
        }
    }
    out
}

pub struct LeafProblem<'o, 'a> {
    objective: &'o LeafObjective<'a>,
    step: f64,
}

impl Residuals for LeafProblem<'_, '_> {
    fn residual_count(&self) -> usize {
        self.objective.samples.len() * self.objective.block_size()
    }

    fn residuals(&self, params: &[f64], out: &mut [f64]) {
        let pts = self.objective.points_from(params);
        self.objective.residuals_with_counts(&pts, out);
    }

    /// Forward differences that only re-evaluate the samples a control point
    /// actually moves.
    fn jacobian(&self, params: &[f64], residuals: &[f64], jac: &mut DMatrix<f64>) {
        let obj = self.objective;
        let b = obj.block_size();
        let h = self.step;
        let geom = obj.evaluate_points(&obj.points_from(params));
        let mut block = vec![0.0; b];
        jac.fill(0.0);
        for (slot, &k) in obj.free.iter().enumerate() {
            for axis in 0..3 {
                let col = 3 * slot + axis;
                // Perturb exactly as a parameter step would, including rounding.
                let shifted = params[col] + h;
                let dp = shifted - params[col];
                for &(i, j) in &obj.support[k] {
                    let s = &obj.samples[i];
                    let mut g = geom[i];
                    for (d, row) in g.iter_mut().zip(&s.basis) {
                        d[axis] += row[j] * dp;
                    }
                    obj.sample_block(i, &g, &mut block);
                    for (r, v) in block.iter().enumerate() {
                        jac[(i * b + r, col)] = (v - residuals[i * b + r]) / dp;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Refinement {
    pub curve: LeafCurve,
    pub initial_score: f64,
    pub score: f64,
    pub iterations: usize,
    pub cost_history: Vec<f64>,
}

/// Refines `objective.reference()`'s control points.
pub fn refine_leaf(objective: &LeafObjective<'_>, config: &RefineConfig) -> Refinement {
    let x0 = objective.params_of(objective.reference());
    let problem = objective.problem(config.jacobian_step_mm);
    let lm_config = LmConfig {
        max_iterations: config.lm_max_iters,
        relative_tolerance: config.lm_relative_tolerance,
        ..LmConfig::default()
    };
    let out = lm::minimize(&problem, &x0, &lm_config);
    let curve = objective
        .curve_from(&out.params)
        .unwrap_or_else(|_| objective.reference().clone());
    Refinement {
        curve,
        initial_score: out.initial_cost,
        score: out.cost,
        iterations: out.iterations,
        cost_history: out.cost_history,
    }
}

/// A database leaf placed at a tip, with its score.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub record_id: String,
    pub curve: LeafCurve,
    pub score: f64,
}

/// Places every database record at `tip`/`base`, scores it with `α = 0`, and keeps the
/// best `top_k` by (score, id).
pub fn rank_candidates(
    db: &LeafDatabase,
    tip: &Point3<f64>,
    base: &Point3<f64>,
    scene: &Scene,
    fields: &[DistanceField],
    config: &RefineConfig,
) -> Vec<Candidate> {
    let unpenalized = RefineConfig { alpha: 0.0, ..*config };
    let mut ranked: Vec<Candidate> = db
        .par_all()
        .filter_map(|record| match place_leaf(record, tip, base, &scene.up) {
            Ok(curve) => {
                let objective = LeafObjective::new(scene, fields, curve.clone(), &unpenalized);
                let score = objective.score(&curve).value;
                Some(Candidate { record_id: record.id.clone(), curve, score })
            }
            Err(e) => {
                log::debug!("skipping {}: {e}", record.id);
                None
            }
        })
        .collect();
    sort_candidates(&mut ranked);
    ranked.truncate(config.top_k);
    ranked
}

pub fn sort_candidates(c: &mut [Candidate]) {
    c.sort_by(|a, b| a.score.total_cmp(&b.score).then_with(|| a.record_id.cmp(&b.record_id)));
}

/// Refines each candidate with the curvature penalty anchored at its own
/// placed shape. Output order matches input order.
///
/// The returned score is the distance measure re-evaluated on samples taken
/// along the refined curve. The solver only sees samples frozen on the
/// placed curve, and a short segment can swing far out between them.
pub fn refine_candidates(
    candidates: &[Candidate],
    scene: &Scene,
    fields: &[DistanceField],
    config: &RefineConfig,
) -> Vec<Candidate> {
    candidates
        .par_iter()
        .map(|c| {
            let objective = LeafObjective::new(scene, fields, c.curve.clone(), config);
            let r = refine_leaf(&objective, config);
            let score = LeafObjective::new(scene, fields, r.curve.clone(), config).score(&r.curve).value;
            Candidate { record_id: c.record_id.clone(), curve: r.curve, score }
        })
        .collect()
}

/// Mean distance between two curves at `n + 1` matched arc-length fractions.
pub fn mean_curve_distance(a: &LeafCurve, b: &LeafCurve, n: usize) -> f64 {
    let pa = a.sample_evenly(n + 1);
    let pb = b.sample_evenly(n + 1);
    pa.iter().zip(&pb).map(|(x, y)| (x.point - y.point).norm()).sum::<f64>() / pa.len() as f64
}

/// Best `count` candidates by score, skipping any within `min_distance` mean
/// distance of one already chosen.
pub fn select_distinct(candidates: &[Candidate], count: usize, min_distance: f64) -> Vec<Candidate> {
    let mut sorted = candidates.to_vec();
    sort_candidates(&mut sorted);
    let mut out: Vec<Candidate> = Vec::with_capacity(count);
    for c in sorted {
        if out.len() == count {
            break;
        }
        if out.iter().all(|o| mean_curve_distance(&o.curve, &c.curve, 20) >= min_distance) {
            out.push(c);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::leafmodel::spline_from_polyline;
    use crate::synth::RenderConfig;

    fn setup(value: f64) -> (Scene, Vec<DistanceField>) {
        let scene = RenderConfig::default().scene().unwrap();
        let fields = scene
            .cameras
            .iter()
            .map(|c| {
                let n = (c.width() * c.height()) as usize;
                DistanceField::from_values(c.width() as usize, c.height() as usize, vec![value; n])
            })
            .collect();
        (scene, fields)
    }

    #[test]
    fn constant_field_scores_length_times_value() {
        let (scene, fields) = setup(3.0);
        let curve = spline_from_polyline(&[Point3::new(0.0, 0.0, 104.0), Point3::new(0.0, 0.0, 100.0)]).unwrap();
        // A 4 mm curve at 7.5 mm spacing gives two samples with Δs = 2 each.
        let obj = LeafObjective::new(&scene, &fields, curve.clone(), &RefineConfig { alpha: 0.0, ..Default::default() });
        assert_eq!(obj.sample_count(), 2);
        let s = obj.score(&curve);
        assert_eq!(s.visible_view_counts, vec![4, 4]);
        assert!((s.value - 12.0).abs() < 1e-9, "{}", s.value);
        assert!((s.per_sample[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn reference_is_a_fixed_point_on_a_zero_field() {
        let (scene, fields) = setup(0.0);
        let curve = spline_from_polyline(&[
            Point3::new(0.0, 0.0, 210.0),
            Point3::new(50.0, 30.0, 150.0),
            Point3::new(80.0, 0.0, 100.0),
        ])
        .unwrap();
        let obj = LeafObjective::new(&scene, &fields, curve.clone(), &RefineConfig { sample_spacing_mm: 2.0, ..Default::default() });
        assert_eq!(obj.score(&curve).value, 0.0);
        let r = refine_leaf(&obj, &RefineConfig::default());
        assert_eq!(r.score, 0.0);
        assert_eq!(r.curve, curve);
    }

    #[test]
    fn analytic_and_basis_paths_agree() {
        let (scene, fields) = setup(1.5);
        let curve = spline_from_polyline(&[
            Point3::new(0.0, 0.0, 210.0),
            Point3::new(50.0, 30.0, 150.0),
            Point3::new(120.0, 0.0, 100.0),
        ])
        .unwrap();
        let obj = LeafObjective::new(&scene, &fields, curve.clone(), &RefineConfig::default());
        let moved = curve.map_control_points(|p| p + Vector3::new(1.0, -2.0, 0.5));
        let direct = obj.score(&moved).value;
        let resampled = spline_from_polyline(&moved.dense_points(1.0)).unwrap();
        let other = obj.score(&resampled).value;
        assert!((direct - other).abs() < 1e-3 * direct, "{direct} vs {other}");
    }
}
