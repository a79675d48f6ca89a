//! Pipeline commands behind the `umbra` binary: synthesize, render, extract, evaluate.

pub mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::Serialize;
use thiserror::Error;
use umbra_core::geometry::{frusta, ProjectionConstraint, Vec3};
use umbra_core::imageio::{dice, iou, load_binary_image, load_mask, save_overlay, BinaryImage, TargetImage};
use umbra_core::reconstruct::{evaluate_grid, marching_cubes, mesh_silhouette, ExtractedMesh, MeshMetrics};
use umbra_core::registration::{render_shadow, RigidTransform2D};
use umbra_core::trainer::{train, EpochStats, TrainOutputs};
use umbra_core::{Checkpoint, OccupancyField};

pub use config::{ConstraintSpec, JobConfig, CONFIG_VERSION};

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input: config, images, indices. Reported before any compute where possible.
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(#[from] umbra_core::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            _ => EXIT_RUNTIME,
        }
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

fn invalid(e: umbra_core::Error) -> CliError {
    CliError::Validation(e.to_string())
}

/// Overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct SynthesizeOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub debug_overlays: bool,
}

/// One line of `report.jsonl`.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum ReportRecord {
    Job {
        version: u32,
        seed: u64,
        epochs: usize,
        constraints: usize,
        grid_resolution: usize,
    },
    Epoch(EpochStats),
    Constraint {
        index: usize,
        image: PathBuf,
        iou: f64,
        dice: f64,
        initial_light: Vec3,
        optimized_light: Vec3,
        initial_screen: Vec3,
        optimized_screen: Vec3,
        registration: RigidTransform2D,
        /// Mesh silhouette against the field render.
        mesh_iou: f64,
    },
    Mesh(MeshMetrics),
    Summary {
        mean_iou: f64,
        mean_dice: f64,
    },
}

/// What `synthesize` produced.
#[derive(Debug, Clone)]
pub struct SynthesisOutcome {
    pub out_dir: PathBuf,
    pub records: Vec<ReportRecord>,
    pub field: OccupancyField,
    pub constraints: Vec<ProjectionConstraint>,
    pub targets: Vec<BinaryImage>,
    pub mesh: ExtractedMesh,
    pub epochs: Vec<EpochStats>,
}

impl SynthesisOutcome {
    pub fn ious(&self) -> Vec<f64> {
        self.epochs.last().map(|e| e.iou.clone()).unwrap_or_default()
    }
}

#[derive(Serialize)]
struct Timing {
    train_seconds: f64,
    total_seconds: f64,
}

/// Load the target images of a config, resolving paths against `base`.
pub fn load_targets(cfg: &JobConfig, base: &Path) -> Result<Vec<TargetImage>, CliError> {
    cfg.specs()
        .enumerate()
        .map(|(i, spec)| {
            let path = base.join(&spec.image);
            load_binary_image(&path, cfg.image_threshold)
                .map_err(|e| CliError::Validation(format!("constraint {i}: {}: {e}", path.display())))
        })
        .collect()
}

pub fn synthesize(config_path: &Path, opts: &SynthesizeOptions) -> Result<SynthesisOutcome, CliError> {
    let mut cfg = JobConfig::load(config_path)?;
    if let Some(seed) = opts.seed {
        cfg.train.seed = seed;
    }
    if let Some(epochs) = opts.epochs {
        cfg.train.epochs = epochs;
        cfg.train.validate().map_err(invalid)?;
    }
    let base = config_path.parent().unwrap_or(Path::new("."));
    let targets = load_targets(&cfg, base)?;
    let out_dir = match &opts.out {
        Some(dir) => dir.clone(),
        None => base.join(&cfg.output_dir),
    };
    run_job(&cfg, &targets, &out_dir, opts.debug_overlays)
}

/// Train, extract and write every artifact of a job under `out_dir`.
pub fn run_job(
    cfg: &JobConfig,
    targets: &[TargetImage],
    out_dir: &Path,
    debug_overlays: bool,
) -> Result<SynthesisOutcome, CliError> {
    let start = Instant::now();
    let constraints: Vec<ProjectionConstraint> = cfg
        .specs()
        .zip(targets)
        .map(|(spec, t)| spec.constraint(t.width(), t.height()))
        .collect();
    std::fs::create_dir_all(out_dir).map_err(io_err(format!("creating {}", out_dir.display())))?;
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml()).map_err(io_err("writing config.toml"))?;

    let outputs = TrainOutputs {
        checkpoint: Some(out_dir.join("checkpoint.json")),
        abort_checkpoint: Some(out_dir.join("abort_checkpoint.json")),
        batch_log: Some(out_dir.join("batches.jsonl")),
    };
    let trained = train(targets, &constraints, &cfg.train, &outputs)?;
    let train_seconds = start.elapsed().as_secs_f64();
    let tau = cfg.train.weights.tau;

    info!("extracting mesh on a {}^3 grid", cfg.grid_resolution);
    let prisms = frusta(&trained.constraints)?;
    let grid = evaluate_grid(&trained.field, cfg.grid_resolution, &prisms)?;
    let mesh = marching_cubes(&grid, tau);
    mesh.save_obj(&out_dir.join("mesh.obj"))?;
    let metrics = mesh.metrics();

    let report = &trained.report;
    let mut records = vec![ReportRecord::Job {
        version: cfg.version,
        seed: cfg.train.seed,
        epochs: cfg.train.epochs,
        constraints: constraints.len(),
        grid_resolution: cfg.grid_resolution,
    }];
    records.extend(report.epochs.iter().cloned().map(ReportRecord::Epoch));

    let (mut iou_sum, mut dice_sum) = (0.0, 0.0);
    for (i, spec) in cfg.specs().enumerate() {
        let shadow = render_shadow(&trained.field, &trained.constraints, i, tau)?.image;
        let target = &trained.targets[i];
        let from_mesh = mesh_silhouette(&mesh, &trained.constraints[i])?;
        shadow.save_png(&out_dir.join(format!("shadow_{i}.png")))?;
        target.save_png(&out_dir.join(format!("target_{i}.png")))?;
        save_overlay(&shadow, target, &out_dir.join(format!("overlay_{i}.png")))?;
        if debug_overlays {
            save_overlay(&shadow, targets[i].image(), &out_dir.join(format!("overlay_original_{i}.png")))?;
            from_mesh.save_png(&out_dir.join(format!("mesh_shadow_{i}.png")))?;
            save_overlay(&from_mesh, &shadow, &out_dir.join(format!("overlay_mesh_{i}.png")))?;
        }
        let (a, d) = (iou(&shadow, target)?, dice(&shadow, target)?);
        iou_sum += a;
        dice_sum += d;
        records.push(ReportRecord::Constraint {
            index: i,
            image: spec.image.clone(),
            iou: a,
            dice: d,
            initial_light: report.initial_lights[i],
            optimized_light: report.final_lights[i],
            initial_screen: report.initial_screens[i],
            optimized_screen: report.final_screens[i],
            registration: report.transforms[i],
            mesh_iou: iou(&from_mesh, &shadow)?,
        });
    }
    records.push(ReportRecord::Mesh(metrics));
    let m = constraints.len() as f64;
    records.push(ReportRecord::Summary {
        mean_iou: iou_sum / m,
        mean_dice: dice_sum / m,
    });
    write_records(&out_dir.join("report.jsonl"), &records)?;

    let timing = Timing {
        train_seconds,
        total_seconds: start.elapsed().as_secs_f64(),
    };
    std::fs::write(out_dir.join("timing.json"), serde_json::to_vec_pretty(&timing).expect("timing serializes"))
        .map_err(io_err("writing timing.json"))?;

    Ok(SynthesisOutcome {
        out_dir: out_dir.to_path_buf(),
        records,
        field: trained.field,
        constraints: trained.constraints,
        targets: trained.targets,
        mesh,
        epochs: trained.report.epochs,
    })
}

pub fn write_records(path: &Path, records: &[ReportRecord]) -> Result<(), CliError> {
    let file = File::create(path).map_err(io_err(format!("creating {}", path.display())))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(umbra_core::Error::from)?;
        w.write_all(b"\n").map_err(io_err("writing report"))?;
    }
    w.flush().map_err(io_err("writing report"))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// Thresholded shadow of a stored constraint, optionally at another image size.
pub fn render(
    checkpoint: &Path,
    index: usize,
    dims: Option<(usize, usize)>,
    tau: f64,
    out: &Path,
) -> Result<BinaryImage, CliError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let mut constraints = ckpt.constraints.clone();
    let Some(c) = constraints.get_mut(index) else {
        return Err(CliError::Validation(format!(
            "constraint index {index} out of range (checkpoint has {})",
            ckpt.constraints.len()
        )));
    };
    if let Some((w, h)) = dims {
        if w == 0 || h == 0 {
            return Err(CliError::Validation("render dimensions must be positive".into()));
        }
        c.width = w;
        c.height = h;
    }
    let shadow = render_shadow(&ckpt.field, &constraints, index, tau)?.image;
    shadow.save(out)?;
    Ok(shadow)
}

/// Masked grid evaluation, marching cubes and OBJ export.
pub fn extract(checkpoint: &Path, resolution: usize, tau: f64, out: &Path) -> Result<MeshMetrics, CliError> {
    let ckpt = load_checkpoint(checkpoint)?;
    if resolution < umbra_core::reconstruct::MIN_RESOLUTION {
        return Err(CliError::Validation(format!("resolution {resolution} is too small")));
    }
    let grid = evaluate_grid(&ckpt.field, resolution, &frusta(&ckpt.constraints)?)?;
    let mesh = marching_cubes(&grid, tau);
    mesh.save_obj(out)?;
    Ok(mesh.metrics())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub iou: f64,
    pub dice: f64,
}

pub fn evaluate(shadow: &Path, target: &Path, threshold: f64) -> Result<Evaluation, CliError> {
    let a = load_mask(shadow, threshold).map_err(invalid)?;
    let b = load_mask(target, threshold).map_err(invalid)?;
    Ok(Evaluation {
        iou: iou(&a, &b).map_err(invalid)?,
        dice: dice(&a, &b).map_err(invalid)?,
    })
}
