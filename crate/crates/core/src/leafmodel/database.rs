//! Leaf database records, the JSON exchange format, and stretch augmentation.

use std::path::Path;

use nalgebra::{Matrix3, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A traced leaf axis, tip first, in millimetres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeafRecord {
    pub id: String,
    pub plant: String,
    pub points: Vec<[f64; 3]>,
}

impl LeafRecord {
    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 {
            return Err(Error::TooFewPoints(self.points.len()));
        }
        if self.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("leaf {} has non-finite coordinates", self.id)));
        }
        Ok(())
    }

    pub fn tip(&self) -> Point3<f64> {
        Point3::from(self.points[0])
    }

    pub fn base(&self) -> Point3<f64> {
        Point3::from(*self.points.last().expect("validated record"))
    }

    pub fn polyline(&self) -> Vec<Point3<f64>> {
        self.points.iter().map(|p| Point3::from(*p)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub count: usize,
    pub min_scale: f64,
    pub max_scale: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { count: 100, min_scale: 0.9, max_scale: 1.1 }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatabaseFile {
    leaves: Vec<LeafRecord>,
}

/// Base records plus their augmented variants. Only base records are
/// persisted; variants are regenerated deterministically.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LeafDatabase {
    pub records: Vec<LeafRecord>,
    pub augmented: Vec<LeafRecord>,
}

impl LeafDatabase {
    pub fn new(records: Vec<LeafRecord>) -> Result<Self> {
        for r in &records {
            r.validate()?;
        }
        Ok(Self { records, augmented: Vec::new() })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: DatabaseFile = serde_json::from_str(text)?;
        Self::new(file.leaves)
    }

    pub fn to_json(&self) -> String {
        let file = DatabaseFile { leaves: self.records.clone() };
        serde_json::to_string_pretty(&file).expect("records serialize")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Replaces the augmented set with `config.count` variants per record.
    /// Record `k` uses seed `seed + k`.
    pub fn augment_all(&mut self, config: &AugmentConfig, seed: u64, up: &Vector3<f64>) {
        self.augmented = self
            .records
            .iter()
            .enumerate()
            .flat_map(|(k, r)| augment(r, config, seed.wrapping_add(k as u64), up))
            .collect();
    }

    /// Every record the search may place: base records, then variants.
    pub fn all(&self) -> impl Iterator<Item = &LeafRecord> {
        self.records.iter().chain(self.augmented.iter())
    }

    pub fn par_all(&self) -> impl IndexedParallelIterator<Item = &LeafRecord> {
        self.records.par_iter().chain(self.augmented.par_iter())
    }

    pub fn len(&self) -> usize {
        self.records.len() + self.augmented.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Orthonormal leaf frame: columns are the base→tip direction, `up × d`, and
/// `d × (up × d)`.
pub fn stretch_axes(record: &LeafRecord, up: &Vector3<f64>) -> Matrix3<f64> {
    let d = (record.tip() - record.base()).try_normalize(1e-12).unwrap_or(*up);
    let side = up
        .cross(&d)
        .try_normalize(1e-9)
        .unwrap_or_else(|| d.cross(&Vector3::x()).try_normalize(1e-9).unwrap_or(Vector3::y()));
    let third = d.cross(&side);
    Matrix3::from_columns(&[d, side, third])
}

/// Scales the record about its base by `factors` along [`stretch_axes`].
pub fn stretch(record: &LeafRecord, up: &Vector3<f64>, factors: [f64; 3], id: String) -> LeafRecord {
    let axes = stretch_axes(record, up);
    let map = axes * Matrix3::from_diagonal(&Vector3::from(factors)) * axes.transpose();
    let base = record.base();
    let points = record
        .points
        .iter()
        .map(|p| {
            let q = base + map * (Point3::from(*p) - base);
            [q.x, q.y, q.z]
        })
        .collect();
    LeafRecord { id, plant: record.plant.clone(), points }
}

pub fn augment(record: &LeafRecord, config: &AugmentConfig, seed: u64, up: &Vector3<f64>) -> Vec<LeafRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..config.count)
        .map(|k| {
            let mut f = [1.0; 3];
            for v in &mut f {
                *v = rng.random_range(config.min_scale..=config.max_scale);
            }
            stretch(record, up, f, format!("{}#aug{k}", record.id))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> LeafRecord {
        LeafRecord {
            id: "p0-l1".into(),
            plant: "p0".into(),
            points: vec![[120.0, 10.0, 150.0], [60.0, 5.0, 110.0], [20.0, 1.0, 60.0], [0.0, 0.0, 5.0]],
        }
    }

    #[test]
    fn unit_factors_are_identity() {
        let r = record();
        let s = stretch(&r, &Vector3::z(), [1.0; 3], r.id.clone());
        for (a, b) in r.points.iter().zip(&s.points) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tip_displacement_is_bounded() {
        let r = record();
        let reach = (r.tip() - r.base()).norm();
        for v in augment(&r, &AugmentConfig::default(), 3, &Vector3::z()) {
            assert!((v.tip() - r.tip()).norm() <= 0.1 * reach + 1e-9);
            assert!((v.base() - r.base()).norm() < 1e-12);
        }
    }

    #[test]
    fn augmentation_is_deterministic() {
        let r = record();
        let a = augment(&r, &AugmentConfig::default(), 42, &Vector3::z());
        let b = augment(&r, &AugmentConfig::default(), 42, &Vector3::z());
        assert_eq!(a.len(), 100);
        assert_eq!(a, b);
        assert_eq!(a[7].id, "p0-l1#aug7");
    }

    #[test]
    fn json_round_trip_is_byte_identical() {
        let db = LeafDatabase::new(vec![record()]).unwrap();
        let text = db.to_json();
        assert_eq!(LeafDatabase::from_json(&text).unwrap().to_json(), text);
    }

    #[test]
    fn rejects_short_records() {
        let mut r = record();
        r.points.truncate(1);
        assert!(LeafDatabase::new(vec![r]).is_err());
    }
}
