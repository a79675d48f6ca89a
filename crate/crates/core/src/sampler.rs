//! Per-epoch ray dataset: one ray per target pixel, stratified jittered samples along
//! each ray, truncation to the intersection of all shadow prisms, and occupancy labels.
//!
//! Rays store sample *parameters* `t in [0, 1]` rather than points so positions can
//! be recomputed from the current light and screen vectors inside every batch.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::geometry::{frusta, Frustum, ProjectionConstraint, RayGeometry};
use crate::imageio::BinaryImage;

/// Guard band (in `t`) that keeps boundary samples strictly inside the prisms.
const CLIP_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct SampledRay {
    pub constraint: usize,
    pub px: usize,
    pub py: usize,
    /// True when the target pixel is shadow, i.e. the ray must be blocked.
    pub label: bool,
    /// Strictly increasing sample parameters, one per segment `[(k-1)/n, k/n)`.
    pub t: Vec<f64>,
    pub t_lo: f64,
    pub t_hi: f64,
}

impl SampledRay {
    /// Index range of the samples inside `[t_lo, t_hi]`.
    pub fn surviving_range(&self) -> std::ops::Range<usize> {
        let lo = self.t.partition_point(|&t| t < self.t_lo);
        let hi = self.t.partition_point(|&t| t <= self.t_hi);
        lo..hi.max(lo)
    }

    pub fn surviving(&self) -> &[f64] {
        &self.t[self.surviving_range()]
    }

    pub fn surviving_count(&self) -> usize {
        self.surviving_range().len()
    }

    pub fn target(&self) -> f64 {
        if self.label {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochDataset {
    pub rays: Vec<SampledRay>,
    pub seed: u64,
    pub epoch: usize,
    /// Shuffled visiting order over `rays`.
    pub order: Vec<usize>,
    /// Shadow pixels whose ray lies entirely outside the prism intersection.
    pub unsatisfiable: usize,
    /// Rays with no surviving samples (either label).
    pub empty: usize,
}

impl EpochDataset {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    /// Consecutive chunks of the shuffled order; together they cover every ray once.
    pub fn batches(&self, batch_size: usize) -> std::slice::Chunks<'_, usize> {
        self.order.chunks(batch_size.max(1))
    }

    /// Debug dump: `constraint px py label t_lo t_hi` per line.
    pub fn dump(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.rays {
            writeln!(out, "{} {} {} {} {} {}", r.constraint, r.px, r.py, r.label as u8, r.t_lo, r.t_hi)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Stratified sample parameters: `t_k` uniform in `[(k-1)/n, k/n)`.
pub fn stratified(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let step = 1.0 / n as f64;
    (0..n)
        .map(|k| (k as f64 + rng.random::<f64>()) * step)
        .collect()
}

/// Segment midpoints, used for deterministic renders.
pub fn midpoints(n: usize) -> Vec<f64> {
    (0..n).map(|k| (k as f64 + 0.5) / n as f64).collect()
}

/// The part `[t_lo, t_hi]` of a pixel ray inside every prism, or `None` when empty.
pub fn truncate(geom: &RayGeometry, a: f64, b: f64, frusta: &[Frustum]) -> Option<(f64, f64)> {
    let origin = geom.point(a, b, 0.0);
    let dir = geom.point(a, b, 1.0) - origin;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for f in frusta {
        let (l, h) = f.clip_line(origin, dir)?;
        lo = lo.max(l);
        hi = hi.min(h);
    }
    lo += CLIP_EPS;
    hi -= CLIP_EPS;
    (lo <= hi).then_some((lo, hi))
}

pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Build the ray dataset for one epoch from the current constraints and targets.
pub fn build_dataset(
    constraints: &[ProjectionConstraint],
    targets: &[BinaryImage],
    seed: u64,
    epoch: usize,
) -> Result<EpochDataset> {
    if constraints.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            expected: constraints.len(),
            actual: targets.len(),
        });
    }
    let prisms = frusta(constraints)?;
    let mut rng = epoch_rng(seed, epoch);
    let mut rays = Vec::with_capacity(targets.iter().map(|t| t.width() * t.height()).sum());
    let (mut unsatisfiable, mut empty) = (0, 0);

    for (ci, (c, target)) in constraints.iter().zip(targets).enumerate() {
        if (c.width, c.height) != target.dims() {
            return Err(Error::DimensionMismatch {
                left: (c.width, c.height),
                right: target.dims(),
            });
        }
        let geom = RayGeometry::new(c)?;
        let n = c.width;
        for py in 0..c.height {
            for px in 0..c.width {
                let label = target.get(px, py);
                let t = stratified(n, &mut rng);
                let (a, b) = geom.offsets(px, py);
                // An empty interval keeps the ray with zero surviving samples.
                let (t_lo, t_hi) = truncate(&geom, a, b, &prisms).unwrap_or((1.0, 0.0));
                let ray = SampledRay {
                    constraint: ci,
                    px,
                    py,
                    label,
                    t,
                    t_lo,
                    t_hi,
                };
                if ray.surviving_count() == 0 {
                    empty += 1;
                    if label {
                        unsatisfiable += 1;
                    }
                }
                rays.push(ray);
            }
        }
    }

    let mut order: Vec<usize> = (0..rays.len()).collect();
    order.shuffle(&mut rng);
    Ok(EpochDataset {
        rays,
        seed,
        epoch,
        order,
        unsatisfiable,
        empty,
    })
}
