//! Binary masks, topology-preserving thinning and exact Euclidean distance
//! transforms.
//!
//! Foreground connectivity is 8-neighbour, background 4-neighbour.

use std::collections::VecDeque;
use std::path::Path;

use image::{GrayImage, Luma};

use crate::error::Result;

/// Default grey level at or above which a PNG pixel counts as plant.
pub const DEFAULT_MASK_THRESHOLD: u8 = 128;

const INF_SQ: f64 = 1e20;

/// Row-major binary image; `true` is foreground.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Out-of-range coordinates read as background.
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            false
        } else {
            self.bits[y as usize * self.width + x as usize]
        }
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        let i = self.index(x, y);
        self.bits[i] = value;
    }

    pub fn set_signed(&mut self, x: i64, y: i64, value: bool) {
        if x >= 0 && y >= 0 && x < self.width as i64 && y < self.height as i64 {
            let i = y as usize * self.width + x as usize;
            self.bits[i] = value;
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// Foreground pixels `(x, y)` in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(move |(i, _)| (i % w, i / w))
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }

    /// Labels 8-connected foreground components; background pixels get `u32::MAX`.
    pub fn label_components(&self) -> (Vec<u32>, usize) {
        let mut labels = vec![u32::MAX; self.bits.len()];
        let mut next = 0u32;
        let mut queue = VecDeque::new();
        for start in 0..self.bits.len() {
            if !self.bits[start] || labels[start] != u32::MAX {
                continue;
            }
            labels[start] = next;
            queue.push_back(start);
            while let Some(i) = queue.pop_front() {
                let (x, y) = ((i % self.width) as i64, (i / self.width) as i64);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (nx, ny) = (x + dx, y + dy);
                        if self.get_signed(nx, ny) {
                            let j = ny as usize * self.width + nx as usize;
                            if labels[j] == u32::MAX {
                                labels[j] = next;
                                queue.push_back(j);
                            }
                        }
                    }
                }
            }
            next += 1;
        }
        (labels, next as usize)
    }

    pub fn component_count(&self) -> usize {
        self.label_components().1
    }

    pub fn from_gray(image: &GrayImage, threshold: u8) -> Self {
        let (w, h) = image.dimensions();
        Self::from_fn(w as usize, h as usize, |x, y| {
            image.get_pixel(x as u32, y as u32).0[0] >= threshold
        })
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(x as usize, y as usize) { 255 } else { 0 }])
        })
    }

    pub fn load_png(path: &Path, threshold: u8) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        Ok(Self::from_gray(&img, threshold))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray().save(path)?;
        Ok(())
    }
}

/// One-pixel-wide skeleton of the silhouette seen in `view`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkeletonImage {
    pub pixels: Mask,
    pub view: usize,
}

impl SkeletonImage {
    pub fn from_mask(mask: &Mask, view: usize) -> Self {
        Self {
            pixels: thin(mask),
            view,
        }
    }
}

// Neighbours in Zhang–Suen order P2..P9: N, NE, E, SE, S, SW, W, NW.
const ZS_OFFSETS: [(i64, i64); 8] = [
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
];

fn neighbourhood(mask: &Mask, x: usize, y: usize) -> [bool; 8] {
    let mut n = [false; 8];
    for (k, (dx, dy)) in ZS_OFFSETS.iter().enumerate() {
        n[k] = mask.get_signed(x as i64 + dx, y as i64 + dy);
    }
    n
}

/// Yokoi 8-connectivity number; a pixel is 8-simple iff this is 1.
fn connectivity_number(n: &[bool; 8]) -> i32 {
    // Yokoi order starting east, counter-clockwise: E, NE, N, NW, W, SW, S, SE
    let order = [2usize, 1, 0, 7, 6, 5, 4, 3];
    let c = |k: usize| i32::from(!n[order[k % 8]]);
    [0usize, 2, 4, 6]
        .iter()
        .map(|&k| c(k) - c(k) * c(k + 1) * c(k + 2))
        .sum()
}

fn zhang_suen_candidate(n: &[bool; 8], first: bool) -> bool {
    let b = n.iter().filter(|v| **v).count();
    if !(2..=6).contains(&b) {
        return false;
    }
    let transitions = (0..8).filter(|&k| !n[k] && n[(k + 1) % 8]).count();
    if transitions != 1 {
        return false;
    }
    let (p2, p4, p6, p8) = (n[0], n[2], n[4], n[6]);
    if first {
        !(p2 && p4 && p6) && !(p4 && p6 && p8)
    } else {
        !(p2 && p4 && p8) && !(p2 && p6 && p8)
    }
}

/// Zhang–Suen thinning, iterated to a fixed point.
///
/// Each sub-iteration marks candidates on a snapshot as in the classic
/// algorithm, then deletes them in raster order only while they still pass the
/// Zhang–Suen test and remain simple points. This keeps the number of
/// 8-connected components (and holes) unchanged; plain parallel Zhang–Suen
/// erases 2×2 blocks entirely.
pub fn thin(mask: &Mask) -> Mask {
    let mut out = mask.clone();
    let mut candidates = Vec::new();
    loop {
        let mut changed = false;
        for first in [true, false] {
            candidates.clear();
            for (x, y) in out.pixels() {
                if zhang_suen_candidate(&neighbourhood(&out, x, y), first) {
                    candidates.push((x, y));
                }
            }
            for &(x, y) in &candidates {
                let n = neighbourhood(&out, x, y);
                if zhang_suen_candidate(&n, first) && connectivity_number(&n) == 1 {
                    out.set(x, y, false);
                    changed = true;
                }
            }
        }
        if !changed {
            return out;
        }
    }
}

/// Per-pixel Euclidean distance to the nearest feature pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl DistanceField {
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width * height, "field size mismatch");
        Self { width, height, values }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max_finite(&self) -> Option<f64> {
        self.values
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .reduce(f64::max)
    }

    /// Replaces non-finite values with `cap`.
    pub fn capped(mut self, cap: f64) -> Self {
        for v in &mut self.values {
            if !v.is_finite() {
                *v = cap;
            }
        }
        self
    }

    /// Bilinear read; coordinates are clamped to the image.
    pub fn bilinear(&self, x: f64, y: f64) -> f64 {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        let x = x.clamp(0.0, max_x);
        let y = y.clamp(0.0, max_y);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.at(x0, y0) * (1.0 - fx) + self.at(x1, y0) * fx;
        let bottom = self.at(x0, y1) * (1.0 - fx) + self.at(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn nearest(&self, x: f64, y: f64) -> f64 {
        let xi = x.round().clamp(0.0, (self.width - 1) as f64) as usize;
        let yi = y.round().clamp(0.0, (self.height - 1) as f64) as usize;
        self.at(xi, yi)
    }
}

/// Squared distances along one line via the lower envelope of parabolas.
fn edt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let parabola = |q: usize, p: usize| {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf)
    };
    for q in 1..n {
        let mut s = parabola(q, v[k]);
        // z[0] is -inf, so k never underflows
        while s <= z[k] {
            k -= 1;
            s = parabola(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let diff = q as f64 - v[k] as f64;
        *out = diff * diff + f[v[k]];
    }
}

/// Exact Euclidean distance transform (separable, two passes over squared
/// distances). Values are `+∞` everywhere when the mask has no foreground.
pub fn distance_transform(feature: &Mask) -> DistanceField {
    let (w, h) = (feature.width, feature.height);
    let mut sq: Vec<f64> = feature
        .bits
        .iter()
        .map(|b| if *b { 0.0 } else { INF_SQ })
        .collect();
    let n = w.max(h);
    let mut f = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];

    for x in 0..w {
        for y in 0..h {
            f[y] = sq[y * w + x];
        }
        edt_1d(&f[..h], &mut d[..h], &mut v, &mut z);
        for y in 0..h {
            sq[y * w + x] = d[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&sq[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut d[..w], &mut v, &mut z);
        sq[y * w..(y + 1) * w].copy_from_slice(&d[..w]);
    }
    let values = sq
        .into_iter()
        .map(|s| if s >= INF_SQ * 0.5 { f64::INFINITY } else { s.sqrt() })
        .collect();
    DistanceField {
        width: w,
        height: h,
        values,
    }
}
