//! Skeleton pixel graphs, 2D tip detection, cross-view tip matching and the
//! path-novelty tip filter.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::{Matrix3, Point2, Point3};
use serde::{Deserialize, Serialize};

use crate::camera::{fundamental_matrix, line_through, line_distance, triangulate, Scene};
use crate::error::{Error, Result};
use crate::silhouette::{DistanceField, SkeletonImage};

const NONE: u32 = u32::MAX;

/// Pixel graph over a skeleton. Nodes are listed in row-major pixel order.
#[derive(Debug, Clone)]
pub struct SkeletonGraph {
    view: usize,
    width: usize,
    height: usize,
    nodes: Vec<(u32, u32)>,
    lookup: Vec<u32>,
    offsets: Vec<usize>,
    targets: Vec<u32>,
    weights: Vec<f64>,
    bridges: Vec<(usize, usize, f64)>,
}

#[derive(Clone, Copy)]
struct HeapItem {
    dist: f64,
    node: u32,
}

impl PartialEq for HeapItem {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapItem {}
impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapItem {
    // Reversed so the max-heap pops the nearest node first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

/// Single-source shortest paths over a graph.
#[derive(Debug, Clone)]
pub struct ShortestPaths {
    pub dist: Vec<f64>,
    pub pred: Vec<u32>,
}

impl ShortestPaths {
    /// Nodes from `target` back to the source, inclusive; empty if unreachable.
    pub fn path_to(&self, target: usize) -> Vec<usize> {
        if !self.dist[target].is_finite() {
            return Vec::new();
        }
        let mut out = vec![target];
        let mut cur = target;
        while self.pred[cur] != NONE {
            cur = self.pred[cur] as usize;
            out.push(cur);
        }
        out
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut a: usize) -> usize {
        while self.0[a] != a {
            self.0[a] = self.0[self.0[a]];
            a = self.0[a];
        }
        a
    }
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.0[ra.max(rb)] = ra.min(rb);
        true
    }
}

impl SkeletonGraph {
    pub fn build(skeleton: &SkeletonImage) -> Result<Self> {
        let mask = &skeleton.pixels;
        let (w, h) = (mask.width(), mask.height());
        let nodes: Vec<(u32, u32)> = mask.pixels().map(|(x, y)| (x as u32, y as u32)).collect();
        if nodes.is_empty() {
            return Err(Error::EmptySkeleton);
        }
        let mut lookup = vec![NONE; w * h];
        for (i, (x, y)) in nodes.iter().enumerate() {
            lookup[*y as usize * w + *x as usize] = i as u32;
        }

        let mut adjacency: Vec<Vec<(u32, f64)>> = vec![Vec::new(); nodes.len()];
        for (i, &(x, y)) in nodes.iter().enumerate() {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = lookup[ny as usize * w + nx as usize];
                    if j != NONE {
                        let len = if dx != 0 && dy != 0 { std::f64::consts::SQRT_2 } else { 1.0 };
                        adjacency[i].push((j, len));
                    }
                }
            }
        }

        let bridges = bridge_components(&nodes, &adjacency);
        for &(a, b, len) in &bridges {
            adjacency[a].push((b as u32, len));
            adjacency[b].push((a as u32, len));
        }

        let mut offsets = Vec::with_capacity(nodes.len() + 1);
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for adj in &adjacency {
            for (t, l) in adj {
                targets.push(*t);
                weights.push(*l);
            }
            offsets.push(targets.len());
        }
        Ok(Self {
            view: skeleton.view,
            width: w,
            height: h,
            nodes,
            lookup,
            offsets,
            targets,
            weights,
            bridges,
        })
    }

    pub fn view(&self) -> usize {
        self.view
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn pixel(&self, node: usize) -> (u32, u32) {
        self.nodes[node]
    }

    pub fn node_at(&self, x: usize, y: usize) -> Option<usize> {
        if x >= self.width || y >= self.height {
            return None;
        }
        let n = self.lookup[y * self.width + x];
        (n != NONE).then_some(n as usize)
    }

    pub fn neighbours(&self, node: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.offsets[node]..self.offsets[node + 1];
        self.targets[range.clone()]
            .iter()
            .zip(&self.weights[range])
            .map(|(t, w)| (*t as usize, *w))
    }

    /// Bridging edges `(a, b, length)` added to join skeleton components.
    pub fn bridges(&self) -> &[(usize, usize, f64)] {
        &self.bridges
    }

    /// Node whose pixel is nearest to `p`; ties go to the lower node index.
    pub fn nearest_node(&self, p: &Point2<f64>) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, (x, y)) in self.nodes.iter().enumerate() {
            let d = (*x as f64 - p.x).powi(2) + (*y as f64 - p.y).powi(2);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    pub fn dijkstra(&self, source: usize) -> ShortestPaths {
        let n = self.nodes.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut pred = vec![NONE; n];
        let mut heap = BinaryHeap::new();
        dist[source] = 0.0;
        heap.push(HeapItem { dist: 0.0, node: source as u32 });
        while let Some(HeapItem { dist: d, node }) = heap.pop() {
            let u = node as usize;
            if d > dist[u] {
                continue;
            }
            for (v, w) in self.neighbours(u) {
                let nd = d + w;
                if nd < dist[v] {
                    dist[v] = nd;
                    pred[v] = node;
                    heap.push(HeapItem { dist: nd, node: v as u32 });
                }
            }
        }
        ShortestPaths { dist, pred }
    }

    /// Minimum-eccentricity node, ties broken by row-major pixel order.
    ///
    /// Uses eccentricity bounds from a few sweeps instead of all-pairs
    /// distances: after a sweep from `v`, every `w` satisfies
    /// `max(d(v,w), ecc(v) - d(v,w)) ≤ ecc(w) ≤ ecc(v) + d(v,w)`.
    pub fn centre(&self) -> usize {
        const TIE: f64 = 1e-9;
        let n = self.nodes.len();
        let mut lower = vec![0.0f64; n];
        let mut upper = vec![f64::INFINITY; n];
        let mut exact: Vec<Option<f64>> = vec![None; n];
        let mut active: Vec<usize> = (0..n).collect();
        let mut pick_low = true;
        while !active.is_empty() {
            let v = if pick_low {
                *active
                    .iter()
                    .min_by(|a, b| lower[**a].total_cmp(&lower[**b]).then(a.cmp(b)))
                    .unwrap()
            } else {
                *active
                    .iter()
                    .max_by(|a, b| upper[**a].total_cmp(&upper[**b]).then(b.cmp(a)))
                    .unwrap()
            };
            pick_low = !pick_low;
            let sp = self.dijkstra(v);
            let ecc = sp.dist.iter().copied().fold(0.0, f64::max);
            exact[v] = Some(ecc);
            for w in 0..n {
                let d = sp.dist[w];
                lower[w] = lower[w].max(d).max(ecc - d);
                upper[w] = upper[w].min(ecc + d);
                if exact[w].is_none() && upper[w] - lower[w] <= TIE * 0.01 {
                    exact[w] = Some(upper[w]);
                }
            }
            let radius_bound = upper.iter().copied().fold(f64::INFINITY, f64::min);
            active.retain(|&w| exact[w].is_none() && lower[w] <= radius_bound + TIE);
        }
        let radius = exact.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        (0..n)
            .find(|&w| exact[w].is_some_and(|e| e <= radius + TIE))
            .expect("some node attains the radius")
    }

    /// Every node's eccentricity by running Dijkstra from each node.
    pub fn eccentricities_brute_force(&self) -> Vec<f64> {
        (0..self.nodes.len())
            .map(|v| self.dijkstra(v).dist.iter().copied().fold(0.0, f64::max))
            .collect()
    }
}

/// Kruskal over minimum pixel-pair distances between components.
fn bridge_components(nodes: &[(u32, u32)], adjacency: &[Vec<(u32, f64)>]) -> Vec<(usize, usize, f64)> {
    let n = nodes.len();
    let mut comp = vec![usize::MAX; n];
    let mut count = 0;
    for s in 0..n {
        if comp[s] != usize::MAX {
            continue;
        }
        comp[s] = count;
        let mut stack = vec![s];
        while let Some(u) = stack.pop() {
            for (v, _) in &adjacency[u] {
                if comp[*v as usize] == usize::MAX {
                    comp[*v as usize] = count;
                    stack.push(*v as usize);
                }
            }
        }
        count += 1;
    }
    if count < 2 {
        return Vec::new();
    }
    // Closest pixel pair for every component pair, first found wins ties.
    let mut best = vec![(u64::MAX, 0usize, 0usize); count * count];
    for i in 0..n {
        let (xi, yi) = (nodes[i].0 as i64, nodes[i].1 as i64);
        for j in (i + 1)..n {
            let (ci, cj) = (comp[i], comp[j]);
            if ci == cj {
                continue;
            }
            let (dx, dy) = (nodes[j].0 as i64 - xi, nodes[j].1 as i64 - yi);
            let d2 = (dx * dx + dy * dy) as u64;
            let key = ci.min(cj) * count + ci.max(cj);
            if d2 < best[key].0 {
                best[key] = (d2, i, j);
            }
        }
    }
    let mut pairs: Vec<(u64, usize, usize)> = best.into_iter().filter(|e| e.0 != u64::MAX).collect();
    pairs.sort_unstable();
    let mut uf = UnionFind((0..count).collect());
    let mut out = Vec::with_capacity(count - 1);
    for (d2, i, j) in pairs {
        if uf.union(comp[i], comp[j]) {
            out.push((i, j, (d2 as f64).sqrt()));
            if out.len() == count - 1 {
                break;
            }
        }
    }
    out
}

pub fn build_graph(skeleton: &SkeletonImage) -> Result<SkeletonGraph> {
    SkeletonGraph::build(skeleton)
}

// ---------------------------------------------------------------------------
// Tips

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TipCandidate2D {
    pub pixel: Point2<f64>,
    pub node: usize,
    pub view: usize,
    /// Graph distance to the centre node, px.
    pub eccentric_distance: f64,
}

/// Local maxima of graph distance to the centre.
pub fn detect_tips_2d(graph: &SkeletonGraph, radius: f64) -> Vec<TipCandidate2D> {
    let centre = graph.centre();
    let from_centre = graph.dijkstra(centre).dist;
    let n = graph.node_count();
    let mut local = vec![f64::INFINITY; n];
    let mut touched = Vec::new();
    let mut heap = BinaryHeap::new();
    let mut out = Vec::new();

    'nodes: for v in 0..n {
        let dv = from_centre[v];
        if graph.neighbours(v).any(|(u, _)| from_centre[u] > dv) {
            continue;
        }
        for &t in &touched {
            local[t] = f64::INFINITY;
        }
        touched.clear();
        heap.clear();
        local[v] = 0.0;
        touched.push(v);
        heap.push(HeapItem { dist: 0.0, node: v as u32 });
        let mut strictly_above_one = false;
        while let Some(HeapItem { dist: d, node }) = heap.pop() {
            let u = node as usize;
            if d > local[u] {
                continue;
            }
            if u != v {
                if from_centre[u] > dv {
                    continue 'nodes;
                }
                if from_centre[u] < dv {
                    strictly_above_one = true;
                }
            }
            for (w, len) in graph.neighbours(u) {
                let nd = d + len;
                if nd <= radius + 1e-12 && nd < local[w] {
                    if local[w].is_infinite() {
                        touched.push(w);
                    }
                    local[w] = nd;
                    heap.push(HeapItem { dist: nd, node: w as u32 });
                }
            }
        }
        if strictly_above_one {
            let (x, y) = graph.pixel(v);
            out.push(TipCandidate2D {
                pixel: Point2::new(x as f64, y as f64),
                node: v,
                view: graph.view(),
                eccentric_distance: dv,
            });
        }
    }
    out
}

/// Triangulated tip with its per-view supporting pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Tip3D {
    pub position: Point3<f64>,
    pub supports: Vec<(usize, Point2<f64>)>,
    pub reprojection_rms: f64,
}

impl Tip3D {
    pub fn support(&self, view: usize) -> Option<Point2<f64>> {
        self.supports.iter().find(|(v, _)| *v == view).map(|(_, p)| *p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TipConfig {
    /// Graph radius for the local-maximum test, px.
    pub local_radius_px: f64,
    pub epipolar_gate_px: f64,
    pub reprojection_gate_px: f64,
    pub merge_radius_mm: f64,
    /// Novel path pixels a tip needs in at least one view.
    pub novelty_px: usize,
    /// Largest silhouette distance allowed for a tip's projection, px.
    pub silhouette_gate_px: f64,
}

impl Default for TipConfig {
    fn default() -> Self {
        Self {
            local_radius_px: 5.0,
            epipolar_gate_px: 8.0,
            reprojection_gate_px: 12.0,
            merge_radius_mm: 10.0,
            novelty_px: 150,
            silhouette_gate_px: 5.0,
        }
    }
}

fn nearest_candidate(cands: &[TipCandidate2D], p: &Point2<f64>, gate: f64) -> Option<Point2<f64>> {
    let mut best: Option<(f64, Point2<f64>)> = None;
    for c in cands {
        let d = (c.pixel - p).norm();
        if d <= gate && best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, c.pixel));
        }
    }
    best.map(|(_, p)| p)
}

/// Matches 2D tip candidates across views and triangulates them.
pub fn match_tips(candidates: &[Vec<TipCandidate2D>], scene: &Scene, config: &TipConfig) -> Vec<Tip3D> {
    let cameras = &scene.cameras;
    let views = candidates.len().min(cameras.len());
    let mut found: Vec<Tip3D> = Vec::new();
    for a in 0..views {
        for b in (a + 1)..views {
            let Ok(f) = fundamental_matrix(&cameras[a], &cameras[b]) else {
                continue;
            };
            for ca in &candidates[a] {
                let Ok(line) = line_through(&f, &ca.pixel) else {
                    continue;
                };
                for cb in &candidates[b] {
                    if line_distance(&line, &cb.pixel) > config.epipolar_gate_px {
                        continue;
                    }
                    if let Some(tip) = grow_match(candidates, scene, config, a, ca.pixel, b, cb.pixel) {
                        found.push(tip);
                    }
                }
            }
        }
    }
    merge_tips(found, config.merge_radius_mm)
}

#[allow(clippy::too_many_arguments)]
fn grow_match(
    candidates: &[Vec<TipCandidate2D>],
    scene: &Scene,
    config: &TipConfig,
    a: usize,
    pa: Point2<f64>,
    b: usize,
    pb: Point2<f64>,
) -> Option<Tip3D> {
    let cameras = &scene.cameras;
    let seed = triangulate(&[(a, pa), (b, pb)], cameras).ok()?;
    if !cameras[a].is_in_front(&seed.point) || !cameras[b].is_in_front(&seed.point) {
        return None;
    }
    let mut supports = vec![(a, pa), (b, pb)];
    for (w, cands) in candidates.iter().enumerate().take(cameras.len()) {
        if w == a || w == b || !cameras[w].is_in_front(&seed.point) {
            continue;
        }
        let Ok(proj) = cameras[w].project(&seed.point) else {
            continue;
        };
        if let Some(p) = nearest_candidate(cands, &proj, config.reprojection_gate_px) {
            supports.push((w, p));
        }
    }
    supports.sort_by_key(|(v, _)| *v);
    let mut tri = triangulate(&supports, cameras).ok()?;
    // Drop supports the joint solution cannot explain, then re-solve.
    let before = supports.len();
    supports.retain(|(v, p)| {
        cameras[*v]
            .project(&tri.point)
            .is_ok_and(|q| (q - p).norm() <= config.reprojection_gate_px)
    });
    if supports.len() < 2 {
        return None;
    }
    if supports.len() != before {
        tri = triangulate(&supports, cameras).ok()?;
    }
    Some(Tip3D {
        position: tri.point,
        supports,
        reprojection_rms: tri.rms,
    })
}

/// Keeps the lowest-rms tip of every cluster closer than `radius`.
pub fn merge_tips(mut tips: Vec<Tip3D>, radius: f64) -> Vec<Tip3D> {
    tips.sort_by(|x, y| {
        x.reprojection_rms
            .total_cmp(&y.reprojection_rms)
            .then(y.supports.len().cmp(&x.supports.len()))
            .then(x.position.x.total_cmp(&y.position.x))
            .then(x.position.y.total_cmp(&y.position.y))
            .then(x.position.z.total_cmp(&y.position.z))
    });
    let mut kept: Vec<Tip3D> = Vec::new();
    for t in tips {
        if kept.iter().all(|k| (k.position - t.position).norm() >= radius) {
            kept.push(t);
        }
    }
    kept
}

/// Splits the base point off the tip list: the tip nearest the pot centre.
/// Falls back to the pot centre itself when no tip lies within `max_offset`.
pub fn select_base(tips: &mut Vec<Tip3D>, scene: &Scene, max_offset: f64) -> Point3<f64> {
    let nearest = tips
        .iter()
        .enumerate()
        .map(|(i, t)| (i, (t.position - scene.pot_centre).norm()))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    match nearest {
        Some((i, d)) if d <= max_offset => tips.remove(i).position,
        _ => scene.pot_centre,
    }
}

/// Removes tips that are off-silhouette in some view or whose skeleton paths
/// to the base add too little beyond those of farther tips.
pub fn filter_tips(
    tips: &[Tip3D],
    base: &Point3<f64>,
    graphs: &[SkeletonGraph],
    silhouette_fields: &[DistanceField],
    scene: &Scene,
    config: &TipConfig,
) -> Vec<Tip3D> {
    let mut order: Vec<usize> = (0..tips.len()).collect();
    order.sort_by(|&i, &j| {
        let di = (tips[i].position - base).norm();
        let dj = (tips[j].position - base).norm();
        dj.total_cmp(&di).then(i.cmp(&j))
    });

    let views = graphs.len().min(scene.cameras.len());
    let trees: Vec<Option<ShortestPaths>> = (0..views)
        .map(|v| {
            let pixel = scene.visible_pixel(&scene.cameras[v], base)?;
            Some(graphs[v].dijkstra(graphs[v].nearest_node(&pixel)))
        })
        .collect();
    let mut covered: Vec<Vec<bool>> = graphs.iter().map(|g| vec![false; g.node_count()]).collect();

    let mut kept = Vec::new();
    for i in order {
        let tip = &tips[i];
        let mut off_silhouette = false;
        let mut paths = Vec::new();
        for v in 0..views {
            let cam = &scene.cameras[v];
            if scene.pot.intersects_segment(&cam.centre(), &tip.position) {
                continue;
            }
            // A view whose frame misses the tip cannot vouch for it.
            let proj = match cam.project(&tip.position) {
                Ok(p) if cam.is_in_front(&tip.position) && cam.contains(&p) => p,
                _ => {
                    off_silhouette = true;
                    break;
                }
            };
            if let Some(field) = silhouette_fields.get(v) {
                if field.bilinear(proj.x, proj.y) > config.silhouette_gate_px {
                    off_silhouette = true;
                    break;
                }
            }
            let Some(tree) = &trees[v] else { continue };
            let pixel = tip.support(v).unwrap_or(proj);
            let path = tree.path_to(graphs[v].nearest_node(&pixel));
            if !path.is_empty() {
                paths.push((v, path));
            }
        }
        if off_silhouette {
            continue;
        }
        let novel = paths
            .iter()
            .any(|(v, path)| path.iter().filter(|n| !covered[*v][**n]).count() >= config.novelty_px);
        if novel {
            for (v, path) in paths {
                for n in path {
                    covered[v][n] = true;
                }
            }
            kept.push(tip.clone());
        }
    }
    kept
}

// ---------------------------------------------------------------------------
// Debug dump

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TipJson {
    pub p: [f64; 3],
    pub rms: f64,
    pub supports: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TipsFile {
    pub base: [f64; 3],
    pub tips: Vec<TipJson>,
}

impl TipsFile {
    pub fn new(base: &Point3<f64>, tips: &[Tip3D]) -> Self {
        Self {
            base: [base.x, base.y, base.z],
            tips: tips
                .iter()
                .map(|t| TipJson {
                    p: [t.position.x, t.position.y, t.position.z],
                    rms: t.reprojection_rms,
                    supports: t.supports.iter().map(|(v, p)| [*v as f64, p.x, p.y]).collect(),
                })
                .collect(),
        }
    }

    pub fn base_point(&self) -> Point3<f64> {
        Point3::from(self.base)
    }

    pub fn to_tips(&self) -> Result<Vec<Tip3D>> {
        self.tips
            .iter()
            .map(|t| {
                let supports = t
                    .supports
                    .iter()
                    .map(|s| {
                        if s[0] < 0.0 || s[0].fract() != 0.0 {
                            return Err(Error::Format(format!("bad view index {}", s[0])));
                        }
                        Ok((s[0] as usize, Point2::new(s[1], s[2])))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Tip3D {
                    position: Point3::from(t.p),
                    supports,
                    reprojection_rms: t.rms,
                })
            })
            .collect()
    }
}

/// Fundamental matrices for all view pairs `a < b`.
pub fn pairwise_fundamentals(scene: &Scene) -> Result<Vec<(usize, usize, Matrix3<f64>)>> {
    let n = scene.cameras.len();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for a in 0..n {
        for b in (a + 1)..n {
            out.push((a, b, fundamental_matrix(&scene.cameras[a], &scene.cameras[b])?));
        }
    }
    Ok(out)
}
