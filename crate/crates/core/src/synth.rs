//! Synthetic grass plants, a camera ring, and a silhouette rasterizer.
//!
//! Everything here is deterministic in the seed, so generated datasets serve
//! as ground truth for the rest of the pipeline.

use std::f64::consts::TAU;
use std::path::Path;

use nalgebra::{Matrix3, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, PotModel, Scene};
use crate::error::{Error, Result};
use crate::leafmodel::fit::polyline_length;
use crate::leafmodel::{AugmentConfig, LeafDatabase, LeafRecord};
use crate::silhouette::Mask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub image_size: u32,
    pub camera_count: usize,
    pub ring_radius_mm: f64,
    pub camera_height_mm: f64,
    pub target_height_mm: f64,
    pub focal_px: f64,
    /// Stroke width at the distance of the pot centre.
    pub leaf_width_px: f64,
    /// Scale stroke width inversely with depth.
    pub perspective_width: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            image_size: 1024,
            camera_count: 4,
            ring_radius_mm: 1000.0,
            camera_height_mm: 400.0,
            target_height_mm: 150.0,
            focal_px: 1500.0,
            leaf_width_px: 4.0,
            perspective_width: true,
        }
    }
}

impl RenderConfig {
    /// Cameras evenly spaced on a horizontal ring around the pot, camera 0 on
    /// the +x axis.
    pub fn scene(&self) -> Result<Scene> {
        if self.camera_count < 2 {
            return Err(Error::InvalidScene("need at least two cameras".into()));
        }
        let c = (f64::from(self.image_size) - 1.0) / 2.0;
        let k = Matrix3::new(self.focal_px, 0.0, c, 0.0, self.focal_px, c, 0.0, 0.0, 1.0);
        let target = Point3::new(0.0, 0.0, self.target_height_mm);
        let cameras = (0..self.camera_count)
            .map(|i| {
                let a = TAU * i as f64 / self.camera_count as f64;
                let eye = Point3::new(
                    self.ring_radius_mm * a.cos(),
                    self.ring_radius_mm * a.sin(),
                    self.camera_height_mm,
                );
                Camera::look_at(i, &k, &eye, &target, &Vector3::z(), self.image_size, self.image_size)
            })
            .collect::<Result<Vec<_>>>()?;
        Scene::new(cameras, Point3::origin(), Vector3::z(), default_pot())
    }
}

/// Pot whose rim centre is the world origin.
pub fn default_pot() -> PotModel {
    PotModel {
        axis_base: Point3::new(0.0, 0.0, -150.0),
        axis_dir: Vector3::z(),
        r_bottom: 60.0,
        r_top: 80.0,
        height: 150.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantConfig {
    pub base_height_mm: f64,
    pub stem_mm: [f64; 2],
    pub blade_mm: [f64; 2],
    pub elevation_deg: [f64; 2],
    pub droop_deg: [f64; 2],
    /// Lowest height a blade may reach, mm.
    pub min_blade_height_mm: f64,
    /// Spacing of the dense ground-truth polyline, mm.
    pub step_mm: f64,
    /// Points per database record, including tip, stem node and base.
    pub record_points: usize,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            base_height_mm: 5.0,
            stem_mm: [20.0, 50.0],
            blade_mm: [160.0, 330.0],
            elevation_deg: [35.0, 65.0],
            droop_deg: [20.0, 70.0],
            min_blade_height_mm: 30.0,
            step_mm: 1.0,
            record_points: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLeaf {
    /// Dense axis polyline from tip to base, mm.
    pub points: Vec<[f64; 3]>,
    /// Index in `points` where the blade meets the stem.
    pub node_index: usize,
    /// Blade arc length from tip to the stem node.
    pub length_mm: f64,
}

impl SyntheticLeaf {
    pub fn polyline(&self) -> Vec<Point3<f64>> {
        self.points.iter().map(|p| Point3::from(*p)).collect()
    }

    pub fn tip(&self) -> Point3<f64> {
        Point3::from(self.points[0])
    }

    /// Sparse tip-first trace in the style of a hand-annotated record:
    /// `n - 1` blade points evenly spaced in arc length, then the base.
    pub fn record_points(&self, n: usize) -> Vec<[f64; 3]> {
        let blade: Vec<Point3<f64>> = self.polyline()[..=self.node_index].to_vec();
        let mut out: Vec<[f64; 3]> = resample_polyline(&blade, n.max(3) - 1)
            .into_iter()
            .map(|p| [p.x, p.y, p.z])
            .collect();
        out.push(*self.points.last().unwrap());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPlant {
    pub seed: u64,
    pub base: [f64; 3],
    pub leaves: Vec<SyntheticLeaf>,
}

fn resample_polyline(points: &[Point3<f64>], n: usize) -> Vec<Point3<f64>> {
    let total = polyline_length(points);
    let mut out = Vec::with_capacity(n);
    let mut edge = 0;
    let mut start = 0.0;
    for i in 0..n {
        let s = total * i as f64 / (n - 1) as f64;
        while edge + 2 < points.len() && start + (points[edge + 1] - points[edge]).norm() < s {
            start += (points[edge + 1] - points[edge]).norm();
            edge += 1;
        }
        let e = (points[edge + 1] - points[edge]).norm();
        let f = if e > 0.0 { ((s - start) / e).clamp(0.0, 1.0) } else { 0.0 };
        out.push(points[edge] + (points[edge + 1] - points[edge]) * f);
    }
    out
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

/// A plant of `leaf_count` leaves sharing one stem. Each blade leaves the stem
/// node at its own azimuth and elevation, then droops quadratically in arc
/// length.
pub fn generate_plant(seed: u64, leaf_count: usize, config: &PlantConfig) -> SyntheticPlant {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = Point3::new(0.0, 0.0, config.base_height_mm);
    let stem = uniform(&mut rng, config.stem_mm);
    let node = base + Vector3::z() * stem;
    let phase = rng.random_range(0.0..TAU);
    let sector = TAU / leaf_count.max(1) as f64;
    let mut leaves = Vec::with_capacity(leaf_count);
    for k in 0..leaf_count {
        let azimuth = phase + sector * k as f64 + rng.random_range(-0.25..0.25) * sector;
        let horizontal = Vector3::new(azimuth.cos(), azimuth.sin(), 0.0);
        let blade = loop {
            let length = uniform(&mut rng, config.blade_mm);
            let elevation = uniform(&mut rng, config.elevation_deg).to_radians();
            let droop = uniform(&mut rng, config.droop_deg).to_radians();
            let steps = (length / config.step_mm).ceil() as usize;
            let ds = length / steps as f64;
            let mut p = node;
            let mut pts = vec![p];
            for i in 0..steps {
                let s = (i as f64 + 0.5) * ds;
                let theta = elevation - droop * (s / length).powi(2);
                p += (horizontal * theta.cos() + Vector3::z() * theta.sin()) * ds;
                pts.push(p);
            }
            if pts.iter().all(|q| q.z >= config.min_blade_height_mm.min(node.z)) {
                break (pts, length);
            }
        };
        let (mut blade_pts, length) = blade;
        blade_pts.reverse();
        let node_index = blade_pts.len() - 1;
        let stem_steps = (stem / config.step_mm).ceil() as usize;
        for i in 1..=stem_steps {
            let q = node + (base - node) * (i as f64 / stem_steps as f64);
            blade_pts.push(q);
        }
        leaves.push(SyntheticLeaf {
            points: blade_pts.iter().map(|p| [p.x, p.y, p.z]).collect(),
            node_index,
            length_mm: length,
        });
    }
    SyntheticPlant {
        seed,
        base: [base.x, base.y, base.z],
        leaves,
    }
}

/// Leaf count in `[lo, hi]` drawn from the plant seed.
pub fn leaf_count_for(seed: u64, lo: usize, hi: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.random_range(lo..=hi)
}

fn stamp_disk(mask: &mut Mask, cx: f64, cy: f64, r: f64) {
    let (x0, x1) = ((cx - r).floor() as i64, (cx + r).ceil() as i64);
    let (y0, y1) = ((cy - r).floor() as i64, (cy + r).ceil() as i64);
    let r2 = r * r;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            if dx * dx + dy * dy <= r2 {
                mask.set_signed(x, y, true);
            }
        }
    }
}

/// Stamps a disk brush along each leaf. Samples hidden by the pot or
/// outside the frame draw nothing.
pub fn render_view(plant: &SyntheticPlant, scene: &Scene, view: usize, config: &RenderConfig) -> Result<Mask> {
    let cam = scene.camera(view)?;
    let mut mask = Mask::new(cam.width() as usize, cam.height() as usize);
    let centre = cam.centre();
    let reference = (scene.pot_centre - centre).norm();
    for leaf in &plant.leaves {
        let pts = leaf.polyline();
        for w in pts.windows(2) {
            let seg = w[1] - w[0];
            let n = (seg.norm() / 0.25).ceil().max(1.0) as usize;
            for i in 0..n {
                let p = w[0] + seg * (i as f64 / n as f64);
                let Some(px) = scene.visible_pixel(cam, &p) else {
                    continue;
                };
                let width = if config.perspective_width {
                    config.leaf_width_px * reference / (p - centre).norm()
                } else {
                    config.leaf_width_px
                };
                stamp_disk(&mut mask, px.x, px.y, 0.5 * width);
            }
        }
        if let Some(last) = pts.last() {
            if let Some(px) = scene.visible_pixel(cam, last) {
                stamp_disk(&mut mask, px.x, px.y, 0.5 * config.leaf_width_px);
            }
        }
    }
    Ok(mask)
}

pub fn render_silhouettes(plant: &SyntheticPlant, scene: &Scene, config: &RenderConfig) -> Result<Vec<Mask>> {
    (0..scene.cameras.len()).map(|v| render_view(plant, scene, v, config)).collect()
}

/// Database records for every leaf of every plant except `holdout`, each
/// augmented `augment.count` times.
pub fn build_synthetic_database(
    plants: &[SyntheticPlant],
    holdout: u64,
    plant_config: &PlantConfig,
    augment: &AugmentConfig,
    seed: u64,
) -> Result<LeafDatabase> {
    if !plants.iter().any(|p| p.seed == holdout) {
        return Err(Error::UnknownHoldout(holdout));
    }
    let records = plants
        .iter()
        .filter(|p| p.seed != holdout)
        .flat_map(|p| {
            p.leaves.iter().enumerate().map(move |(k, leaf)| LeafRecord {
                id: format!("plant{}-leaf{k}", p.seed),
                plant: format!("plant{}", p.seed),
                points: leaf.record_points(plant_config.record_points),
            })
        })
        .collect();
    let mut db = LeafDatabase::new(records)?;
    db.augment_all(augment, seed, &Vector3::z());
    Ok(db)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthLeaf {
    pub id: usize,
    pub tip: [f64; 3],
    pub length_mm: f64,
    pub points: Vec<[f64; 3]>,
}

/// Ground truth written next to a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthFile {
    pub seed: u64,
    pub base: [f64; 3],
    pub leaves: Vec<TruthLeaf>,
}

impl TruthFile {
    pub fn from_plant(plant: &SyntheticPlant) -> Self {
        Self {
            seed: plant.seed,
            base: plant.base,
            leaves: plant
                .leaves
                .iter()
                .enumerate()
                .map(|(id, l)| TruthLeaf {
                    id,
                    tip: l.points[0],
                    length_mm: l.length_mm,
                    points: l.points.clone(),
                })
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// A complete rendered dataset for one plant.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub scene: Scene,
    pub plant: SyntheticPlant,
    pub masks: Vec<Mask>,
}

impl SyntheticDataset {
    pub fn generate(plant: SyntheticPlant, config: &RenderConfig) -> Result<Self> {
        let scene = config.scene()?;
        let masks = render_silhouettes(&plant, &scene, config)?;
        Ok(Self { scene, plant, masks })
    }

    /// Writes `cameras.json`, `mask_<v>.png` and `truth.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("cameras.json"), self.scene.to_json()?)?;
        for (v, m) in self.masks.iter().enumerate() {
            m.save_png(&dir.join(format!("mask_{v}.png")))?;
        }
        let truth = serde_json::to_string_pretty(&TruthFile::from_plant(&self.plant))?;
        std::fs::write(dir.join("truth.json"), truth)?;
        Ok(())
    }
}

/// Angle between consecutive polyline edges, radians.
pub fn max_turn_angle(points: &[Point3<f64>]) -> f64 {
    points
        .windows(3)
        .map(|w| (w[1] - w[0]).angle(&(w[2] - w[1])))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;
    use crate::silhouette::{distance_transform, thin};

    #[test]
    fn plants_are_deterministic_and_bounded() {
        let cfg = PlantConfig::default();
        let a = generate_plant(9, 6, &cfg);
        assert_eq!(a, generate_plant(9, 6, &cfg));
        for leaf in &a.leaves {
            let pts = leaf.polyline();
            assert!((pts.last().unwrap() - Point3::from(a.base)).norm() < 1.0);
            let full = polyline_length(&pts);
            assert!((100.0..=400.0).contains(&full), "{full}");
            let blade = &pts[..=leaf.node_index];
            assert!(max_turn_angle(blade) < PI / 4.0);
            assert!((polyline_length(blade) - leaf.length_mm).abs() < 1e-6);
        }
    }

    #[test]
    fn vertical_leaf_renders_on_centre_column() {
        let cfg = RenderConfig { perspective_width: false, ..RenderConfig::default() };
        let scene = cfg.scene().unwrap();
        let pts: Vec<[f64; 3]> = (0..=200).map(|i| [0.0, 0.0, 5.0 + i as f64]).collect();
        let plant = SyntheticPlant {
            seed: 0,
            base: [0.0, 0.0, 5.0],
            leaves: vec![SyntheticLeaf { points: pts, node_index: 200, length_mm: 200.0 }],
        };
        let mask = render_view(&plant, &scene, 0, &cfg).unwrap();
        assert!(!mask.is_empty());
        for (x, _) in mask.pixels() {
            assert!((x as f64 - 511.5).abs() <= 2.5, "column {x}");
        }
    }

    #[test]
    fn rendered_skeleton_follows_projection() {
        let cfg = RenderConfig::default();
        let scene = cfg.scene().unwrap();
        let plant = generate_plant(3, 1, &PlantConfig::default());
        let mask = render_view(&plant, &scene, 1, &cfg).unwrap();
        let skeleton = thin(&mask);
        let mut proj = Mask::new(mask.width(), mask.height());
        for p in plant.leaves[0].polyline() {
            if let Some(px) = scene.visible_pixel(&scene.cameras[1], &p) {
                proj.set_signed(px.x.round() as i64, px.y.round() as i64, true);
            }
        }
        let field = distance_transform(&proj);
        let mean = skeleton.pixels().map(|(x, y)| field.at(x, y)).sum::<f64>() / skeleton.count() as f64;
        assert!(mean < 2.0, "mean {mean}");
    }

    #[test]
    fn database_excludes_holdout() {
        let cfg = PlantConfig::default();
        let plants: Vec<_> = (0..10).map(|s| generate_plant(s, 5, &cfg)).collect();
        let db = build_synthetic_database(&plants, 1, &cfg, &AugmentConfig::default(), 0).unwrap();
        assert_eq!(db.records.len(), 45);
        assert_eq!(db.augmented.len(), 4500);
        assert!(matches!(
            build_synthetic_database(&plants, 99, &cfg, &AugmentConfig::default(), 0),
            Err(Error::UnknownHoldout(99))
        ));
    }
}
