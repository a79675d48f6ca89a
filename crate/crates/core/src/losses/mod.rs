//! Loss terms over one batch of truncated rays.
//!
//! Every term reads the occupancy values of the batch samples (and, where the
//! term depends on geometry, their positions) and accumulates its scaled adjoint
//! into a [`LossGrad`]. The trainer pulls those adjoints back through the network
//! and the ray geometry.

mod gradient;
mod knn;

pub use gradient::{estimate_gradient, estimate_gradient_adjoint, GradientAdjoint, GradientEstimate, RANK_DAMPING};
pub use knn::{auto_cell_size, SpatialHash};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::sigmoid;
use crate::geometry::Vec3;

/// Pairs of surface points closer than this are skipped by the smoothness term.
pub const MIN_PAIR_DISTANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Rendering weight; the global maximum over targets unless set per image.
    pub alpha: f64,
    pub tau: f64,
    pub temperature: f64,
    pub theta: f64,
    pub k1: usize,
    pub k2: usize,
    pub schedule: Schedule,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            tau: 0.5,
            temperature: 0.1,
            theta: 0.4,
            k1: 26,
            k2: 6,
            schedule: Schedule::default(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha > 0.0
            && self.tau > 0.0
            && self.tau < 1.0
            && self.temperature > 0.0
            && self.theta > 0.0
            && self.k1 >= 3
            && self.k2 >= 1
            && self.schedule.validate();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid loss weights: {self:?}")))
        }
    }
}

/// Epoch-dependent term weights.
///
/// `coh_base` and `bin_base` double each epoch up to `2^ramp_cap`; `smo` and `vol`
/// switch on once `epoch > activate_after`. Setting a base to zero ablates the term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub coh_base: f64,
    pub smo: f64,
    pub vol: f64,
    pub bin_base: f64,
    pub ramp_cap: u32,
    pub activate_after: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            coh_base: 1e-3,
            smo: 1e-4,
            vol: 1e-4,
            bin_base: 5e-2,
            ramp_cap: 3,
            activate_after: 3,
        }
    }
}

impl Schedule {
    fn validate(&self) -> bool {
        [self.coh_base, self.smo, self.vol, self.bin_base]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
    }

    pub fn betas(&self, epoch: usize) -> Betas {
        let ramp = 2f64.powi(epoch.min(self.ramp_cap as usize) as i32);
        let late = epoch > self.activate_after;
        Betas {
            ren: 1.0,
            coh: self.coh_base * ramp,
            smo: if late { self.smo } else { 0.0 },
            vol: if late { self.vol } else { 0.0 },
            bin: self.bin_base * ramp,
        }
    }
}

/// Weights applied to each term in one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Betas {
    pub ren: f64,
    pub coh: f64,
    pub smo: f64,
    pub vol: f64,
    pub bin: f64,
}

impl Betas {
    /// Only the named term with weight one; used for per-term gradient checks.
    pub fn only(term: Term) -> Self {
        let mut b = Betas {
            ren: 0.0,
            coh: 0.0,
            smo: 0.0,
            vol: 0.0,
            bin: 0.0,
        };
        match term {
            Term::Rendering => b.ren = 1.0,
            Term::Cohesion => b.coh = 1.0,
            Term::Smoothness => b.smo = 1.0,
            Term::Volume => b.vol = 1.0,
            Term::Binarization => b.bin = 1.0,
        }
        b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Term {
    Rendering,
    Cohesion,
    Smoothness,
    Volume,
    Binarization,
}

impl Term {
    pub const ALL: [Term; 5] = [
        Term::Rendering,
        Term::Cohesion,
        Term::Smoothness,
        Term::Volume,
        Term::Binarization,
    ];
}

/// One ray of a batch: its samples are `points[start..start + len]`, in
/// increasing `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchRay {
    pub start: usize,
    pub len: usize,
    /// 1 for shadow pixels, 0 otherwise.
    pub target: f64,
    /// Width of the owning image, for the surface threshold.
    pub width: usize,
    /// Length of the truncated segment; the volume weight of a lone sample.
    pub length: f64,
    /// Extra factor on this ray's rendering residual (per-image alpha mode).
    pub weight: f64,
}

impl BatchRay {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Sample positions of a batch, grouped by ray. Rays without samples are not stored.
#[derive(Debug, Clone, Default)]
pub struct RayBatch {
    pub points: Vec<Vec3>,
    pub rays: Vec<BatchRay>,
}

impl RayBatch {
    pub fn push_ray(&mut self, points: impl IntoIterator<Item = Vec3>, target: f64, width: usize, length: f64) {
        self.push_weighted_ray(points, target, width, length, 1.0);
    }

    pub fn push_weighted_ray(
        &mut self,
        points: impl IntoIterator<Item = Vec3>,
        target: f64,
        width: usize,
        length: f64,
        weight: f64,
    ) {
        let start = self.points.len();
        self.points.extend(points);
        let len = self.points.len() - start;
        if len == 0 {
            self.points.truncate(start);
            return;
        }
        self.rays.push(BatchRay {
            start,
            len,
            target,
            width,
            length,
            weight,
        });
    }

    pub fn ray_count(&self) -> usize {
        self.rays.len()
    }

    pub fn sample_count(&self) -> usize {
        self.points.len()
    }

    /// Owning ray of every sample.
    pub fn sample_rays(&self) -> Vec<usize> {
        let mut out = vec![0; self.points.len()];
        for (j, r) in self.rays.iter().enumerate() {
            out[r.range()].fill(j);
        }
        out
    }
}

/// Adjoints accumulated by the loss terms.
#[derive(Debug, Clone)]
pub struct LossGrad {
    /// Per sample, with respect to its occupancy value.
    pub d_values: Vec<f64>,
    /// Per sample, with respect to its position (terms that see geometry).
    pub d_points: Vec<Vec3>,
    /// Per ray, with respect to the truncated segment length.
    pub d_length: Vec<f64>,
}

impl LossGrad {
    pub fn zeros(batch: &RayBatch) -> Self {
        Self {
            d_values: vec![0.0; batch.sample_count()],
            d_points: vec![Vec3::ZERO; batch.sample_count()],
            d_length: vec![0.0; batch.ray_count()],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub surface_points: usize,
    pub rank_deficient: usize,
    pub skipped_pairs: usize,
}

/// Unweighted term values and the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rendering: f64,
    pub cohesion: f64,
    pub smoothness: f64,
    pub volume: f64,
    pub binarization: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn term(&self, t: Term) -> f64 {
        match t {
            Term::Rendering => self.rendering,
            Term::Cohesion => self.cohesion,
            Term::Smoothness => self.smoothness,
            Term::Volume => self.volume,
            Term::Binarization => self.binarization,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.rendering, self.cohesion, self.smoothness, self.volume, self.binarization, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Running mean: fold `other` in as the `n`-th observation.
    pub fn accumulate(&mut self, other: &LossBreakdown, n: usize) {
        let w = 1.0 / n as f64;
        let mix = |a: &mut f64, b: f64| *a += (b - *a) * w;
        mix(&mut self.rendering, other.rendering);
        mix(&mut self.cohesion, other.cohesion);
        mix(&mut self.smoothness, other.smoothness);
        mix(&mut self.volume, other.volume);
        mix(&mut self.binarization, other.binarization);
        mix(&mut self.total, other.total);
    }
}

fn check(batch: &RayBatch, values: &[f64]) -> Result<()> {
    if batch.rays.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if values.len() != batch.sample_count() {
        return Err(Error::ShapeMismatch {
            expected: batch.sample_count(),
            actual: values.len(),
        });
    }
    Ok(())
}

/// `1 - prod(1 - f)` over the samples of one ray.
pub fn ray_occupancy(values: &[f64]) -> f64 {
    1.0 - values.iter().map(|f| 1.0 - f).product::<f64>()
}

/// `d O / d f_k = prod_{i != k} (1 - f_i)`, via prefix and suffix products.
pub fn ray_occupancy_grad(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut out = vec![1.0; n];
    let mut acc = 1.0;
    for k in 0..n {
        out[k] = acc;
        acc *= 1.0 - values[k];
    }
    acc = 1.0;
    for k in (0..n).rev() {
        out[k] *= acc;
        acc *= 1.0 - values[k];
    }
    out
}

pub fn rendering_loss(batch: &RayBatch, values: &[f64], alpha: f64, grad: &mut LossGrad, scale: f64) -> Result<f64> {
    check(batch, values)?;
    let inv = alpha / batch.ray_count() as f64;
    let mut total = 0.0;
    for ray in &batch.rays {
        let f = &values[ray.range()];
        let resid = ray.target - ray_occupancy(f);
        total += ray.weight * resid * resid;
        if scale != 0.0 {
            let c = -2.0 * ray.weight * resid * inv * scale;
            for (d, g) in grad.d_values[ray.range()].iter_mut().zip(ray_occupancy_grad(f)) {
                *d += c * g;
            }
        }
    }
    Ok(total * inv)
}

pub fn cohesion_loss(batch: &RayBatch, values: &[f64], grad: &mut LossGrad, scale: f64) -> Result<f64> {
    check(batch, values)?;
    let inv_b = 1.0 / batch.ray_count() as f64;
    let mut total = 0.0;
    for ray in &batch.rays {
        let f = &values[ray.range()];
        let inv_n = 1.0 / ray.len as f64;
        let mut sum = 0.0;
        for k in 1..f.len() {
            let diff = f[k] - f[k - 1];
            sum += diff * diff;
            if scale != 0.0 {
                let c = 2.0 * diff * inv_n * inv_b * scale;
                grad.d_values[ray.start + k] += c;
                grad.d_values[ray.start + k - 1] -= c;
            }
        }
        total += sum * inv_n;
    }
    Ok(total * inv_b)
}

pub fn binarization_loss(batch: &RayBatch, values: &[f64], grad: &mut LossGrad, scale: f64) -> Result<f64> {
    check(batch, values)?;
    let inv_b = 1.0 / batch.ray_count() as f64;
    let mut total = 0.0;
    for ray in &batch.rays {
        let inv_n = 1.0 / ray.len as f64;
        let mut sum = 0.0;
        for i in ray.range() {
            let f = values[i];
            // Ties at 0.5 take the f² branch, pulling a fresh field towards empty.
            let (v, dv) = if f <= 0.5 { (f * f, 2.0 * f) } else { ((1.0 - f) * (1.0 - f), -2.0 * (1.0 - f)) };
            sum += v;
            if scale != 0.0 {
                grad.d_values[i] += dv * inv_n * inv_b * scale;
            }
        }
        total += sum * inv_n;
    }
    Ok(total * inv_b)
}

/// Volume weight of each sample of one ray: trapezoid spacing, full spacing at the
/// ends, the truncated length for a single sample.
pub fn volume_weights(points: &[Vec3], length: f64) -> Vec<f64> {
    let n = points.len();
    if n == 1 {
        return vec![length];
    }
    let gaps: Vec<f64> = points.windows(2).map(|w| (w[1] - w[0]).norm()).collect();
    (0..n)
        .map(|k| {
            if k == 0 {
                gaps[0]
            } else if k == n - 1 {
                gaps[n - 2]
            } else {
                0.5 * (gaps[k - 1] + gaps[k])
            }
        })
        .collect()
}

pub fn volume_loss(
    batch: &RayBatch,
    values: &[f64],
    tau: f64,
    temperature: f64,
    grad: &mut LossGrad,
    scale: f64,
) -> Result<f64> {
    check(batch, values)?;
    let inv_b = 1.0 / batch.ray_count() as f64;
    let mut total = 0.0;
    for (j, ray) in batch.rays.iter().enumerate() {
        let pts = &batch.points[ray.range()];
        let omega = volume_weights(pts, ray.length);
        let mut switch = Vec::with_capacity(ray.len);
        for (k, i) in ray.range().enumerate() {
            let s = sigmoid((values[i] - tau) / temperature);
            total += omega[k] * s;
            switch.push(s);
            if scale != 0.0 {
                grad.d_values[i] += omega[k] * s * (1.0 - s) / temperature * inv_b * scale;
            }
        }
        if scale == 0.0 {
            continue;
        }
        if ray.len == 1 {
            grad.d_length[j] += switch[0] * inv_b * scale;
            continue;
        }
        // d omega / d gap: gap k feeds omega_k and omega_{k+1} with weight 1/2 each,
        // plus the full end weights.
        let n = ray.len;
        for k in 0..n - 1 {
            let mut dgap = 0.5 * (switch[k] + switch[k + 1]);
            if k == 0 {
                dgap += 0.5 * switch[0];
            }
            if k == n - 2 {
                dgap += 0.5 * switch[n - 1];
            }
            let diff = pts[k + 1] - pts[k];
            let dist = diff.norm();
            if dist > 0.0 {
                let e = diff * (dgap / dist * inv_b * scale);
                grad.d_points[ray.start + k + 1] += e;
                grad.d_points[ray.start + k] -= e;
            }
        }
    }
    Ok(total * inv_b)
}

/// Gradient estimates for every batch sample, with the neighbour lists used.
#[derive(Debug, Clone)]
pub struct GradientField {
    pub estimates: Vec<GradientEstimate>,
    pub neighbors: Vec<Vec<usize>>,
}

impl GradientField {
    pub fn rank_deficient(&self) -> usize {
        self.estimates.iter().filter(|e| e.rank_deficient).count()
    }
}

/// Least-squares gradient at every sample from its `k1` nearest batch samples.
pub fn estimate_gradients(batch: &RayBatch, values: &[f64], k1: usize) -> GradientField {
    let hash = SpatialHash::auto(&batch.points, k1);
    let (estimates, neighbors) = (0..batch.points.len())
        .into_par_iter()
        .map(|i| {
            let nb: Vec<usize> = hash.knn(batch.points[i], k1, Some(i)).into_iter().map(|(j, _)| j).collect();
            let pts: Vec<Vec3> = nb.iter().map(|&j| batch.points[j]).collect();
            let vals: Vec<f64> = nb.iter().map(|&j| values[j]).collect();
            (estimate_gradient(batch.points[i], values[i], &pts, &vals), nb)
        })
        .unzip();
    GradientField { estimates, neighbors }
}

/// Indices of samples whose estimated gradient norm exceeds `theta * w`.
/// Rank-deficient estimates are left out: their norm is set by the damping,
/// not by the field.
pub fn detect_surface_points(batch: &RayBatch, field: &GradientField, theta: f64) -> Vec<usize> {
    let owner = batch.sample_rays();
    (0..batch.points.len())
        .filter(|&i| {
            let e = &field.estimates[i];
            !e.rank_deficient && e.grad.norm() > theta * batch.rays[owner[i]].width as f64
        })
        .collect()
}

/// Smoothness over explicit surface points with known gradients.
#[derive(Debug, Clone)]
pub struct SurfaceSmoothness {
    pub value: f64,
    /// Adjoints of the gradient estimates and the positions, scaled by the caller's weight.
    pub d_grads: Vec<Vec3>,
    pub d_points: Vec<Vec3>,
    pub skipped_pairs: usize,
}

/// Mean over points of the mean, over their `k2` nearest neighbours in the set,
/// of `|g(p) - g(q)| / |p - q|`.
pub fn surface_smoothness(points: &[Vec3], grads: &[Vec3], k2: usize, scale: f64) -> SurfaceSmoothness {
    let mut out = SurfaceSmoothness {
        value: 0.0,
        d_grads: vec![Vec3::ZERO; points.len()],
        d_points: vec![Vec3::ZERO; points.len()],
        skipped_pairs: 0,
    };
    if points.len() < 2 {
        return out;
    }
    let hash = SpatialHash::auto(points, k2);
    let inv_p = 1.0 / points.len() as f64;
    for a in 0..points.len() {
        let nb = hash.knn(points[a], k2, Some(a));
        let inv_n = 1.0 / nb.len() as f64;
        let mut sum = 0.0;
        for &(b, _) in &nb {
            let dp = points[a] - points[b];
            let dist = dp.norm();
            if dist < MIN_PAIR_DISTANCE {
                out.skipped_pairs += 1;
                continue;
            }
            let dg = grads[a] - grads[b];
            let gnorm = dg.norm();
            sum += gnorm / dist;
            if scale != 0.0 {
                let c = inv_p * inv_n * scale;
                if gnorm > 0.0 {
                    let e = dg * (c / (gnorm * dist));
                    out.d_grads[a] += e;
                    out.d_grads[b] -= e;
                }
                let e = dp * (-c * gnorm / (dist * dist * dist));
                out.d_points[a] += e;
                out.d_points[b] -= e;
            }
        }
        out.value += sum * inv_n;
    }
    out.value *= inv_p;
    out
}

/// Smoothness of the detected surface samples of a batch, differentiated through
/// the gradient estimates into values and positions.
pub fn smoothness_loss(
    batch: &RayBatch,
    values: &[f64],
    weights: &LossWeights,
    grad: &mut LossGrad,
    scale: f64,
    diag: &mut Diagnostics,
) -> Result<f64> {
    check(batch, values)?;
    let field = estimate_gradients(batch, values, weights.k1);
    diag.rank_deficient += field.rank_deficient();
    let surface = detect_surface_points(batch, &field, weights.theta);
    diag.surface_points += surface.len();
    let surf_pts: Vec<Vec3> = surface.iter().map(|&i| batch.points[i]).collect();
    let surf_grads: Vec<Vec3> = surface.iter().map(|&i| field.estimates[i].grad).collect();
    let smooth = surface_smoothness(&surf_pts, &surf_grads, weights.k2, scale);
    diag.skipped_pairs += smooth.skipped_pairs;

    if scale != 0.0 {
        for (a, &i) in surface.iter().enumerate() {
            grad.d_points[i] += smooth.d_points[a];
            if smooth.d_grads[a] == Vec3::ZERO {
                continue;
            }
            let nb = &field.neighbors[i];
            let pts: Vec<Vec3> = nb.iter().map(|&j| batch.points[j]).collect();
            let vals: Vec<f64> = nb.iter().map(|&j| values[j]).collect();
            let adj = estimate_gradient_adjoint(
                &field.estimates[i],
                batch.points[i],
                values[i],
                &pts,
                &vals,
                smooth.d_grads[a],
            );
            grad.d_values[i] += adj.d_f0;
            grad.d_points[i] += adj.d_p0;
            for (k, &j) in nb.iter().enumerate() {
                grad.d_values[j] += adj.d_values[k];
                grad.d_points[j] += adj.d_neighbors[k];
            }
        }
    }
    Ok(smooth.value)
}

/// Weighted sum of all terms. Terms with zero weight are still evaluated for
/// reporting but contribute no gradient.
pub fn total_loss(
    batch: &RayBatch,
    values: &[f64],
    weights: &LossWeights,
    betas: &Betas,
    grad: &mut LossGrad,
    diag: &mut Diagnostics,
) -> Result<LossBreakdown> {
    let rendering = rendering_loss(batch, values, weights.alpha, grad, betas.ren)?;
    let cohesion = cohesion_loss(batch, values, grad, betas.coh)?;
    let smoothness = smoothness_loss(batch, values, weights, grad, betas.smo, diag)?;
    let volume = volume_loss(batch, values, weights.tau, weights.temperature, grad, betas.vol)?;
    let binarization = binarization_loss(batch, values, grad, betas.bin)?;
    let total = betas.ren * rendering
        + betas.coh * cohesion
        + betas.smo * smoothness
        + betas.vol * volume
        + betas.bin * binarization;
    Ok(LossBreakdown {
        rendering,
        cohesion,
        smoothness,
        volume,
        binarization,
        total,
    })
}

#[cfg(test)]
mod tests;
