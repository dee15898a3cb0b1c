//! End-to-end reconstruction of one dataset directory, with every stage's
//! output written to disk so later stages can resume from it.
//!
//! A dataset directory holds `cameras.json`, `mask_<v>.png` for each camera
//! and optionally `truth.json` and `database.json`.

use std::path::{Path, PathBuf};

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::assemble::{greedy_select, leaf_footprint, CompactCandidates, LeafFootprint, ViewStats};
use crate::camera::{CalibrationFile, Scene};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::leafmodel::{LeafCurve, LeafDatabase};
use crate::measure::{measure_all, Measurement, Report};
use crate::refine::{rank_candidates, refine_candidates, select_distinct, skeleton_fields, Candidate};
use crate::silhouette::{distance_transform, DistanceField, Mask, SkeletonImage};
use crate::skelgraph::{
    build_graph, detect_tips_2d, filter_tips, match_tips, pairwise_fundamentals, select_base, Tip3D, TipsFile,
};
use crate::synth::TruthFile;

pub const TIPS_FILE: &str = "tips.json";
pub const CANDIDATES_FILE: &str = "candidates.json";
pub const MODEL_FILE: &str = "model.json";
pub const REPORT_FILE: &str = "report.csv";

pub fn mask_path(dir: &Path, view: usize) -> PathBuf {
    dir.join(format!("mask_{view}.png"))
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub scene: Scene,
    pub masks: Vec<Mask>,
    pub truth: Option<TruthFile>,
}

impl Dataset {
    pub fn load(dir: &Path, mask_threshold: u8) -> Result<Self> {
        let cameras = dir.join("cameras.json");
        if !cameras.is_file() {
            return Err(Error::MissingInput(cameras.display().to_string()));
        }
        let scene = Scene::load(&cameras)?;
        let masks = (0..scene.cameras.len())
            .map(|v| {
                let path = mask_path(dir, v);
                if !path.is_file() {
                    return Err(Error::MissingInput(path.display().to_string()));
                }
                let mask = Mask::load_png(&path, mask_threshold)?;
                let cam = &scene.cameras[v];
                if (mask.width(), mask.height()) != (cam.width() as usize, cam.height() as usize) {
                    return Err(Error::Format(format!(
                        "{}: {}x{} image for a {}x{} camera",
                        path.display(),
                        mask.width(),
                        mask.height(),
                        cam.width(),
                        cam.height()
                    )));
                }
                Ok(mask)
            })
            .collect::<Result<Vec<_>>>()?;
        let truth_path = dir.join("truth.json");
        let truth = if truth_path.is_file() { Some(TruthFile::load(&truth_path)?) } else { None };
        Ok(Self { scene, masks, truth })
    }
}

pub fn skeletonize(masks: &[Mask]) -> Vec<SkeletonImage> {
    use rayon::prelude::*;
    masks.par_iter().enumerate().map(|(v, m)| SkeletonImage::from_mask(m, v)).collect()
}

/// Detected tips and the base point. Fails with [`Error::ZeroTips`] when
/// nothing survives filtering.
pub fn find_tips(
    scene: &Scene,
    masks: &[Mask],
    skeletons: &[SkeletonImage],
    config: &PipelineConfig,
) -> Result<TipsFile> {
    let mut graphs = Vec::with_capacity(skeletons.len());
    for s in skeletons {
        match build_graph(s) {
            Ok(g) => graphs.push(g),
            Err(Error::EmptySkeleton) => return Err(Error::ZeroTips),
            Err(e) => return Err(e),
        }
    }
    let candidates: Vec<_> = graphs.iter().map(|g| detect_tips_2d(g, config.tips.local_radius_px)).collect();
    let mut tips = match_tips(&candidates, scene, &config.tips);
    let base = select_base(&mut tips, scene, config.base_max_offset_mm);
    let silhouettes: Vec<DistanceField> = masks.iter().map(distance_transform).collect();
    let kept = filter_tips(&tips, &base, &graphs, &silhouettes, scene, &config.tips);
    if kept.is_empty() {
        return Err(Error::ZeroTips);
    }
    Ok(TipsFile::new(&base, &kept))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveJson {
    pub control_points: Vec<[f64; 3]>,
    pub segment_control_counts: Vec<usize>,
    pub bounds: Vec<f64>,
}

impl CurveJson {
    pub fn new(curve: &LeafCurve) -> Self {
        Self {
            control_points: curve.unique_control_points().iter().map(|p| [p.x, p.y, p.z]).collect(),
            segment_control_counts: curve.segment_control_counts(),
            bounds: curve.bounds().to_vec(),
        }
    }

    pub fn to_curve(&self) -> Result<LeafCurve> {
        let pts: Vec<Point3<f64>> = self.control_points.iter().map(|p| Point3::from(*p)).collect();
        let expected = 1 + self.segment_control_counts.iter().map(|c| c.saturating_sub(1)).sum::<usize>();
        if pts.len() != expected || self.segment_control_counts.is_empty() {
            return Err(Error::Format(format!(
                "{} control points do not match segment counts {:?}",
                pts.len(),
                self.segment_control_counts
            )));
        }
        LeafCurve::from_unique_control_points(&pts, &self.segment_control_counts, self.bounds.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateJson {
    pub record_id: String,
    pub score: f64,
    #[serde(flatten)]
    pub curve: CurveJson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidatesFile {
    /// Per tip, in tip order.
    pub tips: Vec<Vec<CandidateJson>>,
}

impl CandidatesFile {
    pub fn new(sets: &[Vec<Candidate>]) -> Self {
        let tips = sets
            .iter()
            .map(|set| {
                set.iter()
                    .map(|c| CandidateJson { record_id: c.record_id.clone(), score: c.score, curve: CurveJson::new(&c.curve) })
                    .collect()
            })
            .collect();
        Self { tips }
    }

    pub fn to_candidates(&self) -> Result<Vec<Vec<Candidate>>> {
        self.tips
            .iter()
            .map(|set| {
                set.iter()
                    .map(|c| Ok(Candidate { record_id: c.record_id.clone(), score: c.score, curve: c.curve.to_curve()? }))
                    .collect()
            })
            .collect()
    }
}

/// Ranks, refines and thins the database placements for every tip.
pub fn generate_candidates(
    scene: &Scene,
    fields: &[DistanceField],
    db: &LeafDatabase,
    tips: &[Tip3D],
    base: &Point3<f64>,
    config: &PipelineConfig,
) -> Result<Vec<Vec<Candidate>>> {
    if db.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    Ok(tips
        .iter()
        .enumerate()
        .map(|(i, tip)| {
            let ranked = rank_candidates(db, &tip.position, base, scene, fields, &config.refine);
            let refined = refine_candidates(&ranked, scene, fields, &config.refine);
            let chosen = select_distinct(&refined, config.candidates_per_tip, config.candidate_min_distance_mm);
            log::info!(
                "tip {i}: {} placements ranked, best refined score {:.2}",
                ranked.len(),
                chosen.first().map_or(f64::NAN, |c| c.score)
            );
            chosen
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelLeaf {
    pub tip_id: usize,
    pub record_id: String,
    pub control_points: Vec<[f64; 3]>,
    pub segment_control_counts: Vec<usize>,
    pub breaks: Vec<f64>,
    pub length_mm: f64,
}

impl ModelLeaf {
    pub fn curve(&self) -> Result<LeafCurve> {
        let mut bounds = Vec::with_capacity(self.breaks.len() + 2);
        bounds.push(0.0);
        bounds.extend_from_slice(&self.breaks);
        bounds.push(1.0);
        CurveJson {
            control_points: self.control_points.clone(),
            segment_control_counts: self.segment_control_counts.clone(),
            bounds,
        }
        .to_curve()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantModel {
    pub quality: f64,
    pub base: [f64; 3],
    pub leaves: Vec<ModelLeaf>,
    pub per_view: Vec<ViewStats>,
}

impl PlantModel {
    pub fn curves(&self) -> Result<Vec<LeafCurve>> {
        self.leaves.iter().map(ModelLeaf::curve).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Footprints of every candidate and the best greedy selection among them.
pub fn assemble_model(
    scene: &Scene,
    skeletons: &[SkeletonImage],
    fields: &[DistanceField],
    base: &Point3<f64>,
    sets: &[Vec<Candidate>],
    config: &PipelineConfig,
) -> PlantModel {
    use rayon::prelude::*;
    let footprints: Vec<Vec<LeafFootprint>> = sets
        .iter()
        .map(|set| {
            set.par_iter()
                .map(|c| leaf_footprint(&c.curve, scene, skeletons, fields, &config.quality))
                .collect()
        })
        .collect();
    let compact = CompactCandidates::new(&footprints);
    let mut selection = greedy_select(&compact, &config.quality, config.runs, config.seed);
    // Report leaves in tip order rather than acceptance order.
    selection.chosen.sort_unstable();
    let curves: Vec<LeafCurve> = selection.chosen.iter().map(|&(t, c)| sets[t][c].curve.clone()).collect();
    let lengths = measure_all(&curves, &config.measure);
    let leaves = selection
        .chosen
        .iter()
        .zip(&curves)
        .zip(&lengths)
        .map(|((&(t, c), curve), m)| ModelLeaf {
            tip_id: t,
            record_id: sets[t][c].record_id.clone(),
            control_points: curve.unique_control_points().iter().map(|p| [p.x, p.y, p.z]).collect(),
            segment_control_counts: curve.segment_control_counts(),
            breaks: curve.breaks().to_vec(),
            length_mm: m.length_mm,
        })
        .collect();
    PlantModel { quality: selection.quality, base: [base.x, base.y, base.z], leaves, per_view: selection.per_view }
}

/// Model leaf lengths against the truth file, matched by tip position.
pub fn compare_with_truth(model: &PlantModel, truth: &TruthFile, config: &PipelineConfig) -> Result<Report> {
    let curves = model.curves()?;
    let measured: Vec<_> = model
        .leaves
        .iter()
        .zip(&curves)
        .map(|(leaf, curve)| {
            let m = Measurement { leaf: leaf.tip_id, length_mm: leaf.length_mm, full_curve_length_mm: curve.arc_length() };
            (curve.tip(), m)
        })
        .collect();
    let reference: Vec<_> = truth.leaves.iter().map(|l| (Point3::from(l.tip), l.length_mm)).collect();
    Ok(Report::compare(&measured, &reference, &config.measure))
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub dataset: PathBuf,
    pub out: PathBuf,
    /// Defaults to `database.json` in the dataset directory.
    pub database: Option<PathBuf>,
    /// Reuse `tips.json` and `candidates.json` already present in `out`.
    pub resume: bool,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub model: PlantModel,
    pub report: Option<Report>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn run_pipeline(options: &RunOptions, config: &PipelineConfig) -> Result<PipelineOutput> {
    let data = Dataset::load(&options.dataset, config.mask_threshold)?;
    std::fs::create_dir_all(&options.out)?;
    let skeletons = skeletonize(&data.masks);
    for s in &skeletons {
        s.pixels.save_png(&options.out.join(format!("skeleton_{}.png", s.view)))?;
    }
    let fields = skeleton_fields(&skeletons);

    let tips_path = options.out.join(TIPS_FILE);
    let tips_file = if options.resume && tips_path.is_file() {
        read_json::<TipsFile>(&tips_path)?
    } else {
        let t = find_tips(&data.scene, &data.masks, &skeletons, config)?;
        write_json(&tips_path, &t)?;
        t
    };
    let tips = tips_file.to_tips()?;
    if tips.is_empty() {
        return Err(Error::ZeroTips);
    }
    let base = tips_file.base_point();
    log::info!("{} tips", tips.len());

    let cand_path = options.out.join(CANDIDATES_FILE);
    let sets = if options.resume && cand_path.is_file() {
        read_json::<CandidatesFile>(&cand_path)?.to_candidates()?
    } else {
        let db_path = options.database.clone().unwrap_or_else(|| options.dataset.join("database.json"));
        let mut db = LeafDatabase::load(&db_path)?;
        if db.is_empty() {
            return Err(Error::EmptyDatabase);
        }
        db.augment_all(&config.augment, config.seed, &data.scene.up);
        let sets = generate_candidates(&data.scene, &fields, &db, &tips, &base, config)?;
        let file = CandidatesFile::new(&sets);
        write_json(&cand_path, &file)?;
        // Continue from the serialized form so a resumed run sees identical input.
        file.to_candidates()?
    };

    let model = assemble_model(&data.scene, &skeletons, &fields, &base, &sets, config);
    std::fs::write(options.out.join(MODEL_FILE), model.to_json())?;

    let report = match &data.truth {
        Some(truth) => {
            let r = compare_with_truth(&model, truth, config)?;
            std::fs::write(options.out.join(REPORT_FILE), r.to_csv())?;
            Some(r)
        }
        None => None,
    };
    Ok(PipelineOutput { model, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionView {
    pub id: usize,
    pub mask: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FundamentalJson {
    pub a: usize,
    pub b: usize,
    /// Row-major; `x_bᵀ F x_a = 0` for corresponding pixels.
    #[serde(rename = "F")]
    pub f: [[f64; 3]; 3],
}

/// Everything the annotation tool needs to open a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionFile {
    pub views: Vec<SessionView>,
    pub calibration: CalibrationFile,
    pub fundamentals: Vec<FundamentalJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub database: Option<String>,
}

pub fn export_session(dataset: &Path) -> Result<SessionFile> {
    let cameras = dataset.join("cameras.json");
    if !cameras.is_file() {
        return Err(Error::MissingInput(cameras.display().to_string()));
    }
    let scene = Scene::load(&cameras)?;
    let views = scene
        .cameras
        .iter()
        .enumerate()
        .map(|(v, c)| SessionView { id: v, mask: format!("mask_{v}.png"), width: c.width(), height: c.height() })
        .collect();
    let fundamentals = pairwise_fundamentals(&scene)?
        .into_iter()
        .map(|(a, b, f)| FundamentalJson { a, b, f: [0, 1, 2].map(|r| [0, 1, 2].map(|c| f[(r, c)])) })
        .collect();
    let database = dataset.join("database.json").is_file().then(|| "database.json".to_string());
    Ok(SessionFile { views, calibration: CalibrationFile::from_scene(&scene), fundamentals, database })
}
