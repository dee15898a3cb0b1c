//! Choosing one leaf per tip so the projected model explains the skeletons.
//!
//! For a leaf set `L` the quality is
//!
//! ```text
//! q(L) = Σ_v |i_v| − β |e_v| − γ o_v
//! ```
//!
//! where `i_v` are skeleton pixels within `τ` of some projected leaf, `e_v`
//! are rendered leaf pixels farther than `τ` from every skeleton pixel and
//! `o_v = Σ_{i ∈ i_v} (a_v(i) − 1)` counts extra leaves over interior pixels.
//! Each leaf's contribution is precomputed as a footprint, so adding a leaf
//! to a running selection only touches the pixels it covers.

use std::collections::HashMap;

use nalgebra::Point2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Scene;
use crate::leafmodel::LeafCurve;
use crate::silhouette::{distance_transform, DistanceField, Mask, SkeletonImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QualityParams {
    pub tau_px: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Width of the rendered leaf used for exterior pixels.
    pub stroke_width_px: f64,
    /// Spacing of the 3D points projected to rasterize a leaf.
    pub raster_step_mm: f64,
}

impl Default for QualityParams {
    fn default() -> Self {
        Self { tau_px: 10.0, beta: 1.4, gamma: 0.3, stroke_width_px: 3.0, raster_step_mm: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewStats {
    pub interior: u64,
    pub exterior: u64,
    pub overlap: u64,
}

pub fn quality_from_stats(stats: &[ViewStats], params: &QualityParams) -> f64 {
    stats
        .iter()
        .map(|s| s.interior as f64 - params.beta * s.exterior as f64 - params.gamma * s.overlap as f64)
        .sum()
}

/// Pixels one leaf contributes in one view, as row-major indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ViewFootprint {
    pub interior: Vec<u32>,
    pub exterior: Vec<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LeafFootprint {
    pub views: Vec<ViewFootprint>,
}

/// The 1-px raster of the leaf's visible projection in one view.
pub fn rasterize(curve: &LeafCurve, scene: &Scene, view: usize, step_mm: f64) -> Vec<(i64, i64)> {
    let cam = &scene.cameras[view];
    let projected: Vec<Option<Point2<f64>>> = curve
        .dense_points(step_mm)
        .iter()
        .map(|p| scene.visible_pixel(cam, p))
        .collect();
    let mut out = Vec::new();
    for (i, p) in projected.iter().enumerate() {
        let Some(p) = p else { continue };
        let a = (p.x.round() as i64, p.y.round() as i64);
        match projected.get(i + 1).copied().flatten() {
            Some(q) => line(a, (q.x.round() as i64, q.y.round() as i64), &mut out),
            None => out.push(a),
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Bresenham from `a` to `b`, excluding `b`.
fn line(a: (i64, i64), b: (i64, i64), out: &mut Vec<(i64, i64)>) {
    let (dx, dy) = ((b.0 - a.0).abs(), -(b.1 - a.1).abs());
    let (sx, sy) = ((b.0 - a.0).signum(), (b.1 - a.1).signum());
    let (mut x, mut y, mut err) = (a.0, a.1, dx + dy);
    while (x, y) != b {
        out.push((x, y));
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    if a == b {
        out.push(a);
    }
}

pub fn view_footprint(
    raster: &[(i64, i64)],
    skeleton: &SkeletonImage,
    field: &DistanceField,
    params: &QualityParams,
) -> ViewFootprint {
    let (w, h) = (skeleton.pixels.width() as i64, skeleton.pixels.height() as i64);
    if raster.is_empty() {
        return ViewFootprint::default();
    }
    let reach = params.tau_px.max(params.stroke_width_px / 2.0).ceil() as i64 + 1;
    let x0 = raster.iter().map(|p| p.0).min().unwrap() - reach;
    let x1 = raster.iter().map(|p| p.0).max().unwrap() + reach;
    let y0 = raster.iter().map(|p| p.1).min().unwrap() - reach;
    let y1 = raster.iter().map(|p| p.1).max().unwrap() + reach;
    let (lw, lh) = ((x1 - x0 + 1) as usize, (y1 - y0 + 1) as usize);
    let mut local = Mask::new(lw, lh);
    for &(x, y) in raster {
        local.set((x - x0) as usize, (y - y0) as usize, true);
    }
    let near = distance_transform(&local);
    let half = params.stroke_width_px / 2.0;
    let mut fp = ViewFootprint::default();
    for ly in 0..lh {
        let y = y0 + ly as i64;
        if y < 0 || y >= h {
            continue;
        }
        for lx in 0..lw {
            let x = x0 + lx as i64;
            if x < 0 || x >= w {
                continue;
            }
            let d = near.at(lx, ly);
            let idx = (y * w + x) as u32;
            if d < params.tau_px && skeleton.pixels.get(x as usize, y as usize) {
                fp.interior.push(idx);
            }
            if d <= half && field.at(x as usize, y as usize) > params.tau_px {
                fp.exterior.push(idx);
            }
        }
    }
    fp.interior.sort_unstable();
    fp.exterior.sort_unstable();
    fp
}

pub fn leaf_footprint(
    curve: &LeafCurve,
    scene: &Scene,
    skeletons: &[SkeletonImage],
    fields: &[DistanceField],
    params: &QualityParams,
) -> LeafFootprint {
    let views = (0..skeletons.len())
        .map(|v| {
            let raster = rasterize(curve, scene, v, params.raster_step_mm);
            view_footprint(&raster, &skeletons[v], &fields[v], params)
        })
        .collect();
    LeafFootprint { views }
}

/// Per-view stats of a leaf set, counted on full-image arrays.
pub fn stats_from_footprints(footprints: &[&LeafFootprint], pixel_counts: &[usize]) -> Vec<ViewStats> {
    pixel_counts
        .iter()
        .enumerate()
        .map(|(v, &n)| {
            let mut a = vec![0u32; n];
            let mut e = vec![false; n];
            for fp in footprints {
                let Some(view) = fp.views.get(v) else { continue };
                for &i in &view.interior {
                    a[i as usize] += 1;
                }
                for &i in &view.exterior {
                    e[i as usize] = true;
                }
            }
            ViewStats {
                interior: a.iter().filter(|&&c| c > 0).count() as u64,
                exterior: e.iter().filter(|&&x| x).count() as u64,
                overlap: a.iter().map(|&c| u64::from(c.saturating_sub(1))).sum(),
            }
        })
        .collect()
}

/// `(i_v, e_v, o_v)` for a leaf set in one view, as masks.
pub fn coverage_masks(
    leaves: &[LeafCurve],
    scene: &Scene,
    view: usize,
    skeleton: &SkeletonImage,
    field: &DistanceField,
    params: &QualityParams,
) -> (Mask, Mask, u64) {
    let (w, h) = (skeleton.pixels.width(), skeleton.pixels.height());
    let mut counts = vec![0u32; w * h];
    let mut exterior = Mask::new(w, h);
    for leaf in leaves {
        let fp = view_footprint(&rasterize(leaf, scene, view, params.raster_step_mm), skeleton, field, params);
        for i in fp.interior {
            counts[i as usize] += 1;
        }
        for i in fp.exterior {
            exterior.set(i as usize % w, i as usize / w, true);
        }
    }
    let interior = Mask::from_fn(w, h, |x, y| counts[y * w + x] > 0);
    let overlap = counts.iter().map(|&c| u64::from(c.saturating_sub(1))).sum();
    (interior, exterior, overlap)
}

/// `q(L)` recomputed from scratch.
pub fn quality(
    leaves: &[LeafCurve],
    scene: &Scene,
    skeletons: &[SkeletonImage],
    fields: &[DistanceField],
    params: &QualityParams,
) -> (f64, Vec<ViewStats>) {
    let fps: Vec<LeafFootprint> = leaves
        .iter()
        .map(|l| leaf_footprint(l, scene, skeletons, fields, params))
        .collect();
    let refs: Vec<&LeafFootprint> = fps.iter().collect();
    let sizes: Vec<usize> = skeletons.iter().map(|s| s.pixels.width() * s.pixels.height()).collect();
    let stats = stats_from_footprints(&refs, &sizes);
    (quality_from_stats(&stats, params), stats)
}

/// Footprints of every candidate, re-indexed onto the pixels that any
/// candidate touches so per-run counters stay small.
#[derive(Debug, Clone)]
pub struct CompactCandidates {
    /// `[tip][candidate][view]`.
    footprints: Vec<Vec<Vec<ViewFootprint>>>,
    interior_sizes: Vec<usize>,
    exterior_sizes: Vec<usize>,
}

impl CompactCandidates {
    pub fn new(candidates: &[Vec<LeafFootprint>]) -> Self {
        let views = candidates
            .iter()
            .flatten()
            .map(|f| f.views.len())
            .max()
            .unwrap_or(0);
        let mut interior_ids: Vec<HashMap<u32, u32>> = vec![HashMap::new(); views];
        let mut exterior_ids: Vec<HashMap<u32, u32>> = vec![HashMap::new(); views];
        let remap = |ids: &mut HashMap<u32, u32>, pixels: &[u32]| -> Vec<u32> {
            pixels
                .iter()
                .map(|p| {
                    let next = ids.len() as u32;
                    *ids.entry(*p).or_insert(next)
                })
                .collect()
        };
        let footprints = candidates
            .iter()
            .map(|tip| {
                tip.iter()
                    .map(|fp| {
                        fp.views
                            .iter()
                            .enumerate()
                            .map(|(v, vf)| ViewFootprint {
                                interior: remap(&mut interior_ids[v], &vf.interior),
                                exterior: remap(&mut exterior_ids[v], &vf.exterior),
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self {
            footprints,
            interior_sizes: interior_ids.iter().map(HashMap::len).collect(),
            exterior_sizes: exterior_ids.iter().map(HashMap::len).collect(),
        }
    }

    pub fn tip_count(&self) -> usize {
        self.footprints.len()
    }

    pub fn candidate_count(&self, tip: usize) -> usize {
        self.footprints[tip].len()
    }
}

/// Running per-pixel counts for a partial selection.
#[derive(Debug, Clone)]
pub struct CoverageState<'c> {
    candidates: &'c CompactCandidates,
    interior: Vec<Vec<u32>>,
    exterior: Vec<Vec<u32>>,
    stats: Vec<ViewStats>,
    selected: Vec<(usize, usize)>,
}

impl<'c> CoverageState<'c> {
    pub fn new(candidates: &'c CompactCandidates) -> Self {
        Self {
            candidates,
            interior: candidates.interior_sizes.iter().map(|&n| vec![0; n]).collect(),
            exterior: candidates.exterior_sizes.iter().map(|&n| vec![0; n]).collect(),
            stats: vec![ViewStats::default(); candidates.interior_sizes.len()],
            selected: Vec::new(),
        }
    }

    pub fn stats(&self) -> &[ViewStats] {
        &self.stats
    }

    pub fn selected(&self) -> &[(usize, usize)] {
        &self.selected
    }

    pub fn quality(&self, params: &QualityParams) -> f64 {
        quality_from_stats(&self.stats, params)
    }

    /// Stats after adding candidate `(tip, index)`, without changing the state.
    pub fn stats_with(&self, tip: usize, index: usize) -> Vec<ViewStats> {
        let mut out = self.stats.clone();
        for (v, vf) in self.candidates.footprints[tip][index].iter().enumerate() {
            let s = &mut out[v];
            for &i in &vf.interior {
                if self.interior[v][i as usize] == 0 {
                    s.interior += 1;
                } else {
                    s.overlap += 1;
                }
            }
            for &i in &vf.exterior {
                if self.exterior[v][i as usize] == 0 {
                    s.exterior += 1;
                }
            }
        }
        out
    }

    pub fn quality_with(&self, tip: usize, index: usize, params: &QualityParams) -> f64 {
        quality_from_stats(&self.stats_with(tip, index), params)
    }

    pub fn add(&mut self, tip: usize, index: usize) {
        self.stats = self.stats_with(tip, index);
        for (v, vf) in self.candidates.footprints[tip][index].iter().enumerate() {
            for &i in &vf.interior {
                self.interior[v][i as usize] += 1;
            }
            for &i in &vf.exterior {
                self.exterior[v][i as usize] += 1;
            }
        }
        self.selected.push((tip, index));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// `(tip, candidate)` pairs in the order they were accepted.
    pub chosen: Vec<(usize, usize)>,
    pub quality: f64,
    pub per_view: Vec<ViewStats>,
    pub run: usize,
}

/// One randomized greedy pass with its own RNG.
pub fn greedy_run<'c>(candidates: &'c CompactCandidates, params: &QualityParams, seed: u64) -> CoverageState<'c> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<(usize, usize)> = (0..candidates.tip_count())
        .flat_map(|t| (0..candidates.candidate_count(t)).map(move |c| (t, c)))
        .collect();
    let mut state = CoverageState::new(candidates);
    let mut q = 0.0;
    while !pool.is_empty() {
        let (tip, index) = pool.swap_remove(rng.random_range(0..pool.len()));
        let trial = state.quality_with(tip, index, params);
        if trial > q {
            state.add(tip, index);
            q = trial;
            pool.retain(|&(t, _)| t != tip);
        }
    }
    state
}

/// Best of `runs` greedy passes; run `r` is seeded with `seed + r` and ties
/// go to the lowest run.
pub fn greedy_select(candidates: &CompactCandidates, params: &QualityParams, runs: usize, seed: u64) -> Selection {
    let empty = Selection {
        chosen: Vec::new(),
        quality: 0.0,
        per_view: vec![ViewStats::default(); candidates.interior_sizes.len()],
        run: 0,
    };
    (0..runs)
        .into_par_iter()
        .map(|run| {
            let state = greedy_run(candidates, params, seed.wrapping_add(run as u64));
            Selection {
                quality: state.quality(params),
                per_view: state.stats().to_vec(),
                chosen: state.selected().to_vec(),
                run,
            }
        })
        .reduce_with(better)
        .unwrap_or(empty)
}

fn better(a: Selection, b: Selection) -> Selection {
    if b.quality > a.quality || (b.quality == a.quality && b.run < a.run) {
        b
    } else {
        a
    }
}
