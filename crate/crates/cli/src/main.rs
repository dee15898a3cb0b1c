use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use plantstruct::camera::{refine_calibration, CalibrationFile, Correspondence, PosePrior, Scene};
use plantstruct::config::PipelineConfig;
use plantstruct::leafmodel::{AugmentConfig, LeafDatabase};
use plantstruct::pipeline::{self, Dataset, PlantModel, RunOptions};
use plantstruct::synth::{self, PlantConfig, RenderConfig, SyntheticDataset, TruthFile};
use plantstruct::Error;
use serde::Deserialize;

/// Leaf-level structure recovery for grass-like plants from calibrated
/// silhouettes.
#[derive(Parser, Debug)]
#[command(name = "plantstruct", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML configuration; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Greedy assembly runs (default 1000, a desk-scale value; large searches
    /// use tens of thousands).
    #[arg(long, global = true)]
    runs: Option<usize>,
    /// Output directory (or file, for single-file outputs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Grey level above which a mask pixel is foreground.
    #[arg(long, global = true)]
    mask_threshold: Option<u8>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic plant dataset and a leaf database built from the
    /// other plants of its pool.
    Synth {
        /// First and last seed of the plant pool; the dataset plant is held out.
        #[arg(long, num_args = 2, default_values_t = [1, 10])]
        pool: Vec<u64>,
        #[arg(long, default_value_t = 4)]
        min_leaves: usize,
        #[arg(long, default_value_t = 6)]
        max_leaves: usize,
    },
    /// Thin each mask of a dataset and write skeleton PNGs.
    Skeletonize { dataset: PathBuf },
    /// Detect leaf tips and the base point; writes tips.json.
    Tips { dataset: PathBuf },
    /// Run the full pipeline: tips, candidates, assembly and measurement.
    Reconstruct {
        dataset: PathBuf,
        /// Leaf database JSON (default: database.json in the dataset).
        #[arg(long)]
        database: Option<PathBuf>,
        /// Reuse tips.json and candidates.json already in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Compare a model's leaf lengths with a truth file.
    Measure {
        model: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Write the session JSON read by the annotation tool.
    ExportSession { dataset: PathBuf },
    /// Refine camera poses from known world-to-pixel correspondences.
    CalibrateRefine {
        calibration: PathBuf,
        /// JSON list of `{ "world": [x,y,z], "pixel": [u,v], "view": i }`.
        #[arg(long)]
        correspondences: PathBuf,
        /// JSON list with one `{ "value": [...6], "weight": [...6] }` or null per camera.
        #[arg(long)]
        priors: Option<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::MissingInput(_)) => 2,
        Some(Error::ZeroTips) => 3,
        Some(Error::EmptyDatabase) => 4,
        Some(Error::Config(_)) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(global: &GlobalArgs) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &global.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if let Some(runs) = global.runs {
        cfg.runs = runs;
    }
    if let Some(t) = global.mask_threshold {
        cfg.mask_threshold = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(global: &GlobalArgs, default: &str) -> PathBuf {
    global.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Synth { pool, min_leaves, max_leaves } => {
            let out = out_dir(&cli.global, "dataset");
            synth_dataset(&out, cfg.seed, pool[0], pool[1], min_leaves, max_leaves, &cfg.augment)
        }
        Command::Skeletonize { dataset } => {
            let data = Dataset::load(&dataset, cfg.mask_threshold)?;
            let out = out_dir(&cli.global, "out");
            std::fs::create_dir_all(&out)?;
            for s in pipeline::skeletonize(&data.masks) {
                s.pixels.save_png(&out.join(format!("skeleton_{}.png", s.view)))?;
            }
            Ok(())
        }
        Command::Tips { dataset } => {
            let data = Dataset::load(&dataset, cfg.mask_threshold)?;
            let skeletons = pipeline::skeletonize(&data.masks);
            let tips = pipeline::find_tips(&data.scene, &data.masks, &skeletons, &cfg)?;
            let out = out_dir(&cli.global, "out");
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join(pipeline::TIPS_FILE), serde_json::to_string_pretty(&tips)?)?;
            println!("{} tips", tips.tips.len());
            Ok(())
        }
        Command::Reconstruct { dataset, database, resume } => {
            let options = RunOptions { dataset, out: out_dir(&cli.global, "out"), database, resume };
            let result = pipeline::run_pipeline(&options, &cfg)?;
            println!("{} leaves, quality {:.1}", result.model.leaves.len(), result.model.quality);
            if let Some(report) = result.report {
                print!("{}", report.to_table());
            }
            Ok(())
        }
        Command::Measure { model, truth } => {
            let model = PlantModel::load(&model)?;
            let truth = TruthFile::load(&truth)?;
            let report = pipeline::compare_with_truth(&model, &truth, &cfg)?;
            print!("{}", report.to_table());
            if let Some(out) = &cli.global.out {
                std::fs::write(out, report.to_csv())?;
            }
            Ok(())
        }
        Command::ExportSession { dataset } => {
            let session = pipeline::export_session(&dataset)?;
            let out = cli.global.out.clone().unwrap_or_else(|| dataset.join("session.json"));
            std::fs::write(&out, serde_json::to_string_pretty(&session)?)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::CalibrateRefine { calibration, correspondences, priors } => {
            calibrate(&calibration, &correspondences, priors.as_deref(), cli.global.out.as_deref())
        }
    }
}

fn synth_dataset(
    out: &Path,
    seed: u64,
    first: u64,
    last: u64,
    min_leaves: usize,
    max_leaves: usize,
    augment: &AugmentConfig,
) -> anyhow::Result<()> {
    if first > last || !(first..=last).contains(&seed) {
        bail!("seed {seed} is not in the pool {first}..={last}");
    }
    if min_leaves == 0 || min_leaves > max_leaves {
        bail!("leaf count range {min_leaves}..={max_leaves} is empty");
    }
    let plant_cfg = PlantConfig::default();
    let plants: Vec<_> = (first..=last)
        .map(|s| synth::generate_plant(s, synth::leaf_count_for(s, min_leaves, max_leaves), &plant_cfg))
        .collect();
    let target = plants.iter().find(|p| p.seed == seed).expect("seed is in the pool").clone();
    let dataset = SyntheticDataset::generate(target, &RenderConfig::default())?;
    dataset.write(out)?;
    let db = synth::build_synthetic_database(&plants, seed, &plant_cfg, augment, seed)?;
    let base_only = LeafDatabase::new(db.records)?;
    if !base_only.is_empty() {
        base_only.save(&out.join("database.json"))?;
    }
    println!(
        "plant {seed}: {} leaves, database of {} leaves written to {}",
        dataset.plant.leaves.len(),
        base_only.records.len(),
        out.display()
    );
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn calibrate(calibration: &Path, correspondences: &Path, priors: Option<&Path>, out: Option<&Path>) -> anyhow::Result<()> {
    let file: CalibrationFile = read_json(calibration)?;
    let scene = file.into_scene()?;
    let corr: Vec<Correspondence> = read_json(correspondences)?;
    let priors: Vec<Option<PosePrior>> = match priors {
        Some(p) => read_json(p)?,
        None => vec![None; scene.cameras.len()],
    };
    let refined = refine_calibration(&scene.cameras, &corr, &priors)?;
    println!("reprojection cost {:.6} -> {:.6}", refined.initial_cost(), refined.final_cost());
    let new_scene = Scene::new(refined.cameras, scene.pot_centre, scene.up, scene.pot)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| calibration.with_file_name("cameras_refined.json"));
    std::fs::write(&out, new_scene.to_json()?)?;
    println!("wrote {}", out.display());
    Ok(())
}
