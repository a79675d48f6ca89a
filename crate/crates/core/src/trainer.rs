//! Epoch and batch loop: rebuild the ray dataset, step Adam over the network and the
//! light/screen vectors, keep the vectors on the unit sphere, register targets
//! periodically, checkpoint.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{AdamConfig, AdamState, Checkpoint, FieldConfig, OccupancyField};
use crate::geometry::{check_facing, GeometryAdjoint, ProjectionConstraint, RayGeometry, Vec3};
use crate::imageio::{alpha_factor, alpha_of, dice, iou, BinaryImage, TargetImage};
use crate::losses::{total_loss, Betas, Diagnostics, LossBreakdown, LossGrad, LossWeights, RayBatch};
use crate::registration::{registration_round, render_shadow, IcpConfig, RigidTransform2D, RoundOutcome};
use crate::sampler::{build_dataset, SampledRay};

/// Points per recorded forward/backward chunk.
const TAPE_CHUNK: usize = 4096;

/// How the rendering weight α is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaMode {
    /// One α for all images: the largest frame-to-bbox area ratio.
    #[default]
    Global,
    /// Each image's rays weighted by that image's own ratio.
    PerImage,
    /// Use `LossWeights::alpha` as given.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds the network initialisation and every epoch's dataset.
    pub seed: u64,
    pub lr_field: f64,
    pub lr_lights: f64,
    pub lr_screens: f64,
    /// All three learning rates decay geometrically, epoch by epoch, to this
    /// fraction of their base value at the last epoch. 1 keeps them constant.
    pub lr_final_scale: f64,
    pub weights: LossWeights,
    pub alpha_mode: AlphaMode,
    pub optimize_lights: bool,
    pub optimize_screens: bool,
    pub enable_registration: bool,
    pub registration_period: usize,
    /// A light/screen update that leaves `<l, s>` at or above this is rolled back.
    pub facing_guard: f64,
    /// Start the field at the uniform value that gives a full-length ray this
    /// occupancy. `None` keeps the network's own start of 0.5 everywhere.
    pub initial_ray_occupancy: Option<f64>,
    pub field: FieldConfig,
    pub icp: IcpConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4096,
            seed: 0,
            lr_field: 5e-4,
            lr_lights: 1e-3,
            lr_screens: 1e-3,
            lr_final_scale: 1.0,
            weights: LossWeights::default(),
            alpha_mode: AlphaMode::Global,
            optimize_lights: true,
            optimize_screens: true,
            enable_registration: true,
            registration_period: 5,
            facing_guard: -0.05,
            initial_ray_occupancy: Some(0.5),
            field: FieldConfig::default(),
            icp: IcpConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Learning-rate multiplier for `epoch`.
    pub fn lr_scale(&self, epoch: usize) -> f64 {
        if self.epochs < 2 || self.lr_final_scale == 1.0 {
            return 1.0;
        }
        self.lr_final_scale.powf(epoch as f64 / (self.epochs - 1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_owned()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.registration_period == 0 {
            return bad("registration_period must be at least 1");
        }
        for (name, lr) in [
            ("lr_field", self.lr_field),
            ("lr_lights", self.lr_lights),
            ("lr_screens", self.lr_screens),
        ] {
            if !(lr.is_finite() && lr >= 0.0) {
                return bad(&format!("{name} must be finite and non-negative"));
            }
        }
        if !(self.lr_final_scale > 0.0 && self.lr_final_scale <= 1.0) {
            return bad("lr_final_scale must lie in (0, 1]");
        }
        if !(self.facing_guard < 0.0 && self.facing_guard > -1.0) {
            return bad("facing_guard must lie in (-1, 0)");
        }
        if let Some(o) = self.initial_ray_occupancy {
            if !(o > 0.0 && o < 1.0) {
                return bad("initial_ray_occupancy must lie in (0, 1)");
            }
        }
        if self.field.depth == 0 || self.field.width == 0 {
            return bad("field depth and width must be positive");
        }
        if !(self.icp.trim >= 0.0 && self.icp.trim < 1.0) {
            return bad("icp.trim must lie in [0, 1)");
        }
        self.weights.validate()
    }
}

/// Loss and gradients of one batch.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub loss: LossBreakdown,
    pub diagnostics: Diagnostics,
    pub rays: usize,
    pub samples: usize,
    pub d_field: Vec<f64>,
    pub d_lights: Vec<Vec3>,
    pub d_screens: Vec<Vec3>,
}

impl BatchOutput {
    fn gradients_finite(&self) -> bool {
        self.d_field.iter().all(|g| g.is_finite())
            && self.d_lights.iter().chain(&self.d_screens).all(|g| g.is_finite())
    }
}

/// Where each batch sample came from, for mapping position adjoints back to `(l, s)`.
struct SampleOrigin {
    constraint: usize,
    a: f64,
    b: f64,
}

/// Loss of the rays `rays[indices]` under the current field and constraints, with
/// gradients for the network parameters and every light and screen vector.
///
/// `ray_weights[i]` multiplies the rendering residual of constraint `i`'s rays.
pub fn batch_objective(
    field: &OccupancyField,
    constraints: &[ProjectionConstraint],
    rays: &[SampledRay],
    indices: &[usize],
    ray_weights: &[f64],
    weights: &LossWeights,
    betas: &Betas,
) -> Result<BatchOutput> {
    let geoms: Vec<RayGeometry> = constraints.iter().map(RayGeometry::new).collect::<Result<_>>()?;
    let mut batch = RayBatch::default();
    let mut origins: Vec<(usize, &SampledRay)> = Vec::with_capacity(indices.len());
    let mut sample_origin = Vec::new();
    for &i in indices {
        let ray = &rays[i];
        let g = &geoms[ray.constraint];
        let (a, b) = g.offsets(ray.px, ray.py);
        let t = ray.surviving();
        if t.is_empty() {
            continue;
        }
        let length = g.ray_length() * (ray.t_hi - ray.t_lo);
        batch.push_weighted_ray(
            t.iter().map(|&t| g.point(a, b, t)),
            ray.target(),
            g.width,
            length,
            ray_weights[ray.constraint],
        );
        origins.push((i, ray));
        sample_origin.extend(t.iter().map(|_| SampleOrigin {
            constraint: ray.constraint,
            a,
            b,
        }));
    }
    if batch.rays.is_empty() {
        return Err(Error::EmptyBatch);
    }

    let values = field.occupancy_batch(&batch.points);
    let mut grad = LossGrad::zeros(&batch);
    let mut diagnostics = Diagnostics::default();
    let loss = total_loss(&batch, &values, weights, betas, &mut grad, &mut diagnostics)?;

    // Recompute the forward pass chunk by chunk with a tape, so memory stays bounded.
    let chunks: Vec<(Vec<f64>, Vec<Vec3>)> = batch
        .points
        .par_chunks(TAPE_CHUNK)
        .zip(grad.d_values.par_chunks(TAPE_CHUNK))
        .map(|(pts, dv)| {
            let tape = field.forward(pts);
            field.backward(&tape, dv).map(|g| (g.params, g.points))
        })
        .collect::<Result<_>>()?;
    let mut d_field = vec![0.0; field.params.len()];
    let mut d_points = Vec::with_capacity(batch.sample_count());
    for (params, points) in chunks {
        for (d, g) in d_field.iter_mut().zip(params) {
            *d += g;
        }
        d_points.extend(points);
    }

    let mut adjoints = vec![GeometryAdjoint::default(); constraints.len()];
    let mut k = 0;
    for (j, (&(_, ray), br)) in origins.iter().zip(&batch.rays).enumerate() {
        let t = ray.surviving();
        for &tk in t {
            let o = &sample_origin[k];
            adjoints[o.constraint].push(o.a, o.b, tk, d_points[k] + grad.d_points[k]);
            k += 1;
        }
        let dlen = grad.d_length[j];
        if dlen != 0.0 {
            let o = &sample_origin[br.start];
            let dir = geoms[o.constraint].light.normalized() * dlen;
            adjoints[o.constraint].push(o.a, o.b, ray.t_hi, dir);
            adjoints[o.constraint].push(o.a, o.b, ray.t_lo, -dir);
        }
    }
    let (d_lights, d_screens) = adjoints.iter().zip(&geoms).map(|(adj, g)| adj.finalize(g)).unzip();

    Ok(BatchOutput {
        loss,
        diagnostics,
        rays: batch.ray_count(),
        samples: batch.sample_count(),
        d_field,
        d_lights,
        d_screens,
    })
}

/// Per-epoch summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub betas: Betas,
    /// Mean over batches of the unweighted terms and the weighted total.
    pub loss: LossBreakdown,
    pub batches: usize,
    pub unsatisfiable_rays: usize,
    pub empty_rays: usize,
    pub surface_points: usize,
    pub rank_deficient: usize,
    /// Light/screen updates rolled back by the facing guard.
    pub rejected_updates: usize,
    /// Rendered shadow against the current (possibly registered) target, per constraint.
    pub iou: Vec<f64>,
    pub dice: Vec<f64>,
    /// Registration outcome per constraint, when a round ran after this epoch.
    pub registration: Option<Vec<Option<RigidTransform2D>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub initial_lights: Vec<Vec3>,
    pub final_lights: Vec<Vec3>,
    pub initial_screens: Vec<Vec3>,
    pub final_screens: Vec<Vec3>,
    /// Cumulative registration transform per constraint.
    pub transforms: Vec<RigidTransform2D>,
    /// Kept out of serialized reports so reruns compare byte for byte.
    #[serde(skip)]
    pub wall_clock: Duration,
}

impl TrainReport {
    pub fn final_iou(&self) -> &[f64] {
        self.epochs.last().map_or(&[], |e| &e.iou)
    }

    pub fn final_dice(&self) -> &[f64] {
        self.epochs.last().map_or(&[], |e| &e.dice)
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub field: OccupancyField,
    pub constraints: Vec<ProjectionConstraint>,
    /// Targets after the last registration round.
    pub targets: Vec<BinaryImage>,
    pub report: TrainReport,
}

/// Optional on-disk outputs of a training run.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    /// Rewritten after every epoch.
    pub checkpoint: Option<PathBuf>,
    /// Written when training aborts on a non-finite loss.
    pub abort_checkpoint: Option<PathBuf>,
    /// One JSON record per batch.
    pub batch_log: Option<PathBuf>,
}

#[derive(Serialize)]
struct BatchRecord<'a> {
    epoch: usize,
    batch: usize,
    rays: usize,
    samples: usize,
    betas: &'a Betas,
    loss: &'a LossBreakdown,
}

struct Optimizers {
    field: AdamState,
    lights: AdamState,
    screens: AdamState,
}

fn flatten(v: &[Vec3]) -> Vec<f64> {
    v.iter().flat_map(|p| p.to_array()).collect()
}

fn unflatten(v: &[f64]) -> Vec<Vec3> {
    v.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

/// Per-constraint rendering weights and the global α they are multiplied by.
fn rendering_weights(targets: &[TargetImage], config: &TrainConfig) -> (LossWeights, Vec<f64>) {
    let mut weights = config.weights;
    let per_ray = match config.alpha_mode {
        AlphaMode::Global => {
            weights.alpha = alpha_factor(targets);
            vec![1.0; targets.len()]
        }
        AlphaMode::PerImage => {
            weights.alpha = 1.0;
            targets.iter().map(alpha_of).collect()
        }
        AlphaMode::Fixed => vec![1.0; targets.len()],
    };
    (weights, per_ray)
}

/// One Adam step on the light and screen vectors. Returns how many constraints had
/// their update rolled back by the facing guard.
fn step_directions(
    constraints: &mut [ProjectionConstraint],
    out: &BatchOutput,
    opt: &mut Optimizers,
    config: &TrainConfig,
) -> Result<usize> {
    if !config.optimize_lights && !config.optimize_screens {
        return Ok(0);
    }
    let before: Vec<(Vec3, Vec3)> = constraints.iter().map(|c| (c.light, c.screen)).collect();
    if config.optimize_lights {
        let mut l = flatten(&before.iter().map(|p| p.0).collect::<Vec<_>>());
        opt.lights.step(&mut l, &flatten(&out.d_lights))?;
        for (c, v) in constraints.iter_mut().zip(unflatten(&l)) {
            c.light = v.normalized();
        }
    }
    if config.optimize_screens {
        let mut s = flatten(&before.iter().map(|p| p.1).collect::<Vec<_>>());
        opt.screens.step(&mut s, &flatten(&out.d_screens))?;
        for (c, v) in constraints.iter_mut().zip(unflatten(&s)) {
            c.screen = v.normalized();
        }
    }
    let mut rejected = 0;
    for (c, &(l, s)) in constraints.iter_mut().zip(&before) {
        let ok = c.light.is_finite() && c.screen.is_finite() && c.light.dot(c.screen) < config.facing_guard;
        if !ok {
            c.light = l;
            c.screen = s;
            rejected += 1;
        }
    }
    Ok(rejected)
}

/// Shadow-vs-target IoU and Dice for every constraint.
pub fn shadow_metrics(
    field: &OccupancyField,
    constraints: &[ProjectionConstraint],
    targets: &[BinaryImage],
    tau: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut ious = Vec::with_capacity(targets.len());
    let mut dices = Vec::with_capacity(targets.len());
    for (i, target) in targets.iter().enumerate() {
        let shadow = render_shadow(field, constraints, i, tau)?;
        ious.push(iou(&shadow.image, target)?);
        dices.push(dice(&shadow.image, target)?);
    }
    Ok((ious, dices))
}

fn save_checkpoint(
    path: &Path,
    epoch: usize,
    field: &OccupancyField,
    constraints: &[ProjectionConstraint],
    opt: &Optimizers,
) -> Result<()> {
    Checkpoint::new(
        epoch,
        field.clone(),
        constraints.to_vec(),
        opt.field.clone(),
        opt.lights.clone(),
        opt.screens.clone(),
    )
    .save(path)
}

/// The untrained field for this configuration and these constraints.
pub fn initial_field(config: &TrainConfig, constraints: &[ProjectionConstraint]) -> OccupancyField {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut field = OccupancyField::new(config.field, &mut rng);
    if let Some(o) = config.initial_ray_occupancy {
        // n samples of value f give 1 - (1 - f)^n.
        let n = constraints.iter().map(|c| c.width).max().unwrap_or(1) as f64;
        field.set_uniform_output(1.0 - (1.0 - o).powf(1.0 / n));
    }
    field
}

/// Train a field for the given targets from the initial constraints.
pub fn train(
    targets: &[TargetImage],
    constraints: &[ProjectionConstraint],
    config: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<Trained> {
    config.validate()?;
    if targets.is_empty() {
        return Err(Error::InvalidConfig("at least one target is required".into()));
    }
    if targets.len() != constraints.len() {
        return Err(Error::ShapeMismatch {
            expected: constraints.len(),
            actual: targets.len(),
        });
    }
    check_facing(constraints)?;
    let start = Instant::now();
    let field = initial_field(config, constraints);
    train_from(field, targets, constraints, config, outputs, start)
}

fn train_from(
    mut field: OccupancyField,
    targets: &[TargetImage],
    initial: &[ProjectionConstraint],
    config: &TrainConfig,
    outputs: &TrainOutputs,
    start: Instant,
) -> Result<Trained> {
    let m = initial.len();
    let mut constraints = initial.to_vec();
    let mut current: Vec<BinaryImage> = targets.iter().map(|t| t.image().clone()).collect();
    let mut transforms = vec![RigidTransform2D::IDENTITY; m];
    let (weights, ray_weights) = rendering_weights(targets, config);
    let mut opt = Optimizers {
        field: AdamState::new(field.params.len(), AdamConfig::with_lr(config.lr_field)),
        lights: AdamState::new(3 * m, AdamConfig::with_lr(config.lr_lights)),
        screens: AdamState::new(3 * m, AdamConfig::with_lr(config.lr_screens)),
    };
    let mut log = outputs
        .batch_log
        .as_ref()
        .map(|p| File::create(p).map(BufWriter::new))
        .transpose()?;
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let dataset = build_dataset(&constraints, &current, config.seed, epoch)?;
        let betas = config.weights.schedule.betas(epoch);
        let scale = config.lr_scale(epoch);
        opt.field.config.lr = config.lr_field * scale;
        opt.lights.config.lr = config.lr_lights * scale;
        opt.screens.config.lr = config.lr_screens * scale;
        let mut mean = LossBreakdown::default();
        let (mut batches, mut surface_points, mut rank_deficient, mut rejected) = (0, 0, 0, 0);

        for (b, indices) in dataset.batches(config.batch_size).enumerate() {
            let out = match batch_objective(&field, &constraints, &dataset.rays, indices, &ray_weights, &weights, &betas)
            {
                Ok(out) => out,
                Err(Error::EmptyBatch) => continue,
                Err(e) => return Err(e),
            };
            if !out.loss.is_finite() || !out.gradients_finite() {
                if let Some(path) = &outputs.abort_checkpoint {
                    save_checkpoint(path, epoch, &field, &constraints, &opt)?;
                }
                warn!("non-finite loss at epoch {epoch}, batch {b}: {:?}", out.loss);
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            opt.field.step(&mut field.params.data, &out.d_field)?;
            rejected += step_directions(&mut constraints, &out, &mut opt, config)?;

            batches += 1;
            mean.accumulate(&out.loss, batches);
            surface_points += out.diagnostics.surface_points;
            rank_deficient += out.diagnostics.rank_deficient;
            if let Some(w) = log.as_mut() {
                let rec = BatchRecord {
                    epoch,
                    batch: b,
                    rays: out.rays,
                    samples: out.samples,
                    betas: &betas,
                    loss: &out.loss,
                };
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n")?;
            }
        }

        let registration = if config.enable_registration && (epoch + 1) % config.registration_period == 0 {
            let (_, outcomes) = registration_round(
                &field,
                &constraints,
                targets,
                &mut transforms,
                &mut current,
                weights.tau,
                &config.icp,
            )?;
            Some(
                outcomes
                    .into_iter()
                    .map(|o| match o {
                        RoundOutcome::Updated { step, .. } => Some(step),
                        RoundOutcome::Skipped(why) => {
                            info!("registration after epoch {epoch}: {why}");
                            None
                        }
                    })
                    .collect(),
            )
        } else {
            None
        };

        let (iou, dice) = shadow_metrics(&field, &constraints, &current, weights.tau)?;
        info!(
            "epoch {epoch}: total {:.5} ren {:.5} iou {:?}",
            mean.total, mean.rendering, iou
        );
        history.push(EpochStats {
            epoch,
            betas,
            loss: mean,
            batches,
            unsatisfiable_rays: dataset.unsatisfiable,
            empty_rays: dataset.empty,
            surface_points,
            rank_deficient,
            rejected_updates: rejected,
            iou,
            dice,
            registration,
        });
        if let Some(path) = &outputs.checkpoint {
            save_checkpoint(path, epoch, &field, &constraints, &opt)?;
        }
    }
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }

    let report = TrainReport {
        epochs: history,
        initial_lights: initial.iter().map(|c| c.light).collect(),
        final_lights: constraints.iter().map(|c| c.light).collect(),
        initial_screens: initial.iter().map(|c| c.screen).collect(),
        final_screens: constraints.iter().map(|c| c.screen).collect(),
        transforms,
        wall_clock: start.elapsed(),
    };
    Ok(Trained {
        field,
        constraints,
        targets: current,
        report,
    })
}

#[cfg(test)]
mod tests;
