//! Shadow rendering from the field and rigid 2D registration of targets to renders.

use std::collections::HashMap;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Occupancy, OccupancyField};
use crate::geometry::{frusta, ProjectionConstraint, RayGeometry};
use crate::imageio::{boundary_points, BinaryImage, TargetImage};
use crate::losses::ray_occupancy;
use crate::sampler::{midpoints, truncate};

/// Occupancy at the surviving midpoint samples of every pixel ray of one constraint,
/// row-major. Rays outside the prism intersection get an empty profile.
pub fn midpoint_profiles<F: Occupancy + ?Sized>(
    field: &F,
    constraints: &[ProjectionConstraint],
    index: usize,
) -> Result<Vec<Vec<f64>>> {
    let c = constraints
        .get(index)
        .ok_or_else(|| Error::InvalidConfig(format!("constraint index {index} out of range")))?;
    let prisms = frusta(constraints)?;
    let geom = RayGeometry::new(c)?;
    let ts = midpoints(c.width);
    let mut points = Vec::new();
    let mut spans = Vec::with_capacity(c.width * c.height);
    for py in 0..c.height {
        for px in 0..c.width {
            let (a, b) = geom.offsets(px, py);
            let start = points.len();
            if let Some((lo, hi)) = truncate(&geom, a, b, &prisms) {
                points.extend(ts.iter().filter(|&&t| t >= lo && t <= hi).map(|&t| geom.point(a, b, t)));
            }
            spans.push(start..points.len());
        }
    }
    let values = field.occupancy_at(&points);
    Ok(spans.into_iter().map(|r| values[r].to_vec()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedShadow {
    pub image: BinaryImage,
    pub constraint: usize,
    pub threshold: f64,
}

/// Pixel is shadow iff the ray occupancy over its midpoint samples exceeds `tau`.
pub fn render_shadow<F: Occupancy + ?Sized>(
    field: &F,
    constraints: &[ProjectionConstraint],
    index: usize,
    tau: f64,
) -> Result<RenderedShadow> {
    let profiles = midpoint_profiles(field, constraints, index)?;
    let c = &constraints[index];
    let mask = profiles.iter().map(|f| !f.is_empty() && ray_occupancy(f) > tau).collect();
    Ok(RenderedShadow {
        image: BinaryImage::new(c.width, c.height, mask)?,
        constraint: index,
        threshold: tau,
    })
}

/// Rotation by `angle` (radians, counter-clockwise in pixel axes) followed by a
/// translation, in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidTransform2D {
    pub angle: f64,
    pub tx: f64,
    pub ty: f64,
}

impl RigidTransform2D {
    pub const IDENTITY: RigidTransform2D = RigidTransform2D {
        angle: 0.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn new(angle: f64, tx: f64, ty: f64) -> Self {
        Self { angle, tx, ty }
    }

    /// Rotation by `angle` about `centre`, then a shift by `(tx, ty)`.
    pub fn about(centre: [f64; 2], angle: f64, tx: f64, ty: f64) -> Self {
        let rot = Self::new(angle, 0.0, 0.0).apply(centre);
        Self::new(angle, centre[0] - rot[0] + tx, centre[1] - rot[1] + ty)
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.angle.sin_cos();
        [c * p[0] - s * p[1] + self.tx, s * p[0] + c * p[1] + self.ty]
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform2D) -> Self {
        let t = self.apply([other.tx, other.ty]);
        Self::new(wrap_angle(self.angle + other.angle), t[0], t[1])
    }

    pub fn inverse(&self) -> Self {
        let back = Self::new(-self.angle, 0.0, 0.0).apply([self.tx, self.ty]);
        Self::new(-self.angle, -back[0], -back[1])
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

fn wrap_angle(a: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let w = a.rem_euclid(tau);
    if w > std::f64::consts::PI {
        w - tau
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcpConfig {
    pub max_iter: usize,
    /// Stop when the residual improves by less than this (pixels).
    pub tol: f64,
    /// Fraction of the worst correspondences dropped every iteration.
    pub trim: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iter: 20,
            tol: 1e-3,
            trim: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcpResult {
    pub transform: RigidTransform2D,
    /// Root-mean-square distance of the kept correspondences, one per iteration,
    /// measured before that iteration's fit (first entry is the starting residual).
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub degenerate: bool,
}

/// Bucketed nearest-neighbour lookup over a fixed 2D point set.
struct Grid2 {
    cell: f64,
    points: Vec<[f64; 2]>,
    cells: HashMap<(i64, i64), Vec<u32>>,
    lo: (i64, i64),
    hi: (i64, i64),
}

impl Grid2 {
    fn new(points: &[[f64; 2]], cell: f64) -> Self {
        let mut cells: HashMap<(i64, i64), Vec<u32>> = HashMap::new();
        let (mut lo, mut hi) = ((i64::MAX, i64::MAX), (i64::MIN, i64::MIN));
        for (i, p) in points.iter().enumerate() {
            let k = ((p[0] / cell).floor() as i64, (p[1] / cell).floor() as i64);
            lo = (lo.0.min(k.0), lo.1.min(k.1));
            hi = (hi.0.max(k.0), hi.1.max(k.1));
            cells.entry(k).or_default().push(i as u32);
        }
        Self {
            cell,
            points: points.to_vec(),
            cells,
            lo,
            hi,
        }
    }

    /// Nearest point index and squared distance; ties go to the lower index.
    fn nearest(&self, q: [f64; 2]) -> (usize, f64) {
        let c = ((q[0] / self.cell).floor() as i64, (q[1] / self.cell).floor() as i64);
        let max_ring = (c.0 - self.lo.0)
            .abs()
            .max((self.hi.0 - c.0).abs())
            .max((c.1 - self.lo.1).abs())
            .max((self.hi.1 - c.1).abs());
        let mut best = (usize::MAX, f64::INFINITY);
        let mut r = 0i64;
        loop {
            for dx in -r..=r {
                for dy in -r..=r {
                    if dx.abs() != r && dy.abs() != r {
                        continue;
                    }
                    if let Some(ids) = self.cells.get(&(c.0 + dx, c.1 + dy)) {
                        for &i in ids {
                            let p = self.points[i as usize];
                            let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
                            if d2 < best.1 || (d2 == best.1 && (i as usize) < best.0) {
                                best = (i as usize, d2);
                            }
                        }
                    }
                }
            }
            let reach = r as f64 * self.cell;
            if best.0 != usize::MAX && best.1 < reach * reach {
                break;
            }
            if r >= max_ring {
                break;
            }
            r += 1;
        }
        best
    }

    /// Indices of points within `radius` of `q`.
    fn within(&self, q: [f64; 2], radius: f64) -> Vec<usize> {
        let r = (radius / self.cell).ceil() as i64;
        let c = ((q[0] / self.cell).floor() as i64, (q[1] / self.cell).floor() as i64);
        let mut out = Vec::new();
        for dx in -r..=r {
            for dy in -r..=r {
                if let Some(ids) = self.cells.get(&(c.0 + dx, c.1 + dy)) {
                    for &i in ids {
                        let p = self.points[i as usize];
                        if (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) <= radius * radius {
                            out.push(i as usize);
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Closest point to `q` on the local boundary curve: segments joining the
    /// nearest stored point to its 8-neighbours. Matching against these segments
    /// instead of the pixel centres removes the lattice snapping that stalls
    /// plain point-to-point matching.
    fn closest_on_curve(&self, q: [f64; 2]) -> ([f64; 2], f64) {
        let (i, d2) = self.nearest(q);
        let p = self.points[i];
        let mut best = (p, d2);
        for j in self.within(p, 1.5) {
            if j == i {
                continue;
            }
            let e = self.points[j];
            let (vx, vy) = (e[0] - p[0], e[1] - p[1]);
            let len2 = vx * vx + vy * vy;
            let t = (((q[0] - p[0]) * vx + (q[1] - p[1]) * vy) / len2).clamp(0.0, 1.0);
            let c = [p[0] + t * vx, p[1] + t * vy];
            let cd = (c[0] - q[0]).powi(2) + (c[1] - q[1]).powi(2);
            if cd < best.1 {
                best = (c, cd);
            }
        }
        best
    }
}

/// True when all points lie on one line (within 1e-9 in the spread's minor axis).
fn collinear(points: &[[f64; 2]]) -> bool {
    if points.len() < 3 {
        return true;
    }
    let n = points.len() as f64;
    let (mx, my) = points.iter().fold((0.0, 0.0), |a, p| (a.0 + p[0] / n, a.1 + p[1] / n));
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p[0] - mx, p[1] - my);
        sxx += dx * dx / n;
        syy += dy * dy / n;
        sxy += dx * dy / n;
    }
    let half_tr = 0.5 * (sxx + syy);
    let det = sxx * syy - sxy * sxy;
    let minor = half_tr - (half_tr * half_tr - det).max(0.0).sqrt();
    minor.max(0.0).sqrt() < 1e-9
}

/// Closed-form least-squares rigid motion taking `src[i]` to `dst[i]`.
pub fn fit_rigid(src: &[[f64; 2]], dst: &[[f64; 2]]) -> RigidTransform2D {
    let n = src.len() as f64;
    let (mut ms, mut md) = ([0.0; 2], [0.0; 2]);
    for (s, d) in src.iter().zip(dst) {
        for a in 0..2 {
            ms[a] += s[a] / n;
            md[a] += d[a] / n;
        }
    }
    let (mut dot, mut cross) = (0.0, 0.0);
    for (s, d) in src.iter().zip(dst) {
        let (sx, sy) = (s[0] - ms[0], s[1] - ms[1]);
        let (dx, dy) = (d[0] - md[0], d[1] - md[1]);
        dot += sx * dx + sy * dy;
        cross += sx * dy - sy * dx;
    }
    let angle = cross.atan2(dot);
    let r = RigidTransform2D::new(angle, 0.0, 0.0).apply(ms);
    RigidTransform2D::new(angle, md[0] - r[0], md[1] - r[1])
}

/// Trimmed point-to-point ICP moving `src` onto `dst`.
pub fn icp_register(src: &[[f64; 2]], dst: &[[f64; 2]], config: &IcpConfig) -> Result<IcpResult> {
    if src.len() < 3 || dst.len() < 3 {
        return Err(Error::InvalidConfig(format!(
            "registration needs at least 3 points per cloud, got {} and {}",
            src.len(),
            dst.len()
        )));
    }
    if collinear(src) || collinear(dst) {
        warn!("degenerate registration cloud; keeping identity");
        return Ok(IcpResult {
            transform: RigidTransform2D::IDENTITY,
            residuals: Vec::new(),
            iterations: 0,
            degenerate: true,
        });
    }
    let grid = Grid2::new(dst, 4.0);
    let keep = ((src.len() as f64 * (1.0 - config.trim)).ceil() as usize).clamp(3, src.len());

    let correspond = |t: &RigidTransform2D| {
        let mut pairs: Vec<(f64, usize, [f64; 2])> = src
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let (c, d2) = grid.closest_on_curve(t.apply(p));
                (d2, i, c)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        pairs.truncate(keep);
        let rms = (pairs.iter().map(|p| p.0).sum::<f64>() / keep as f64).sqrt();
        (pairs, rms)
    };

    let mut transform = RigidTransform2D::IDENTITY;
    let (mut pairs, mut rms) = correspond(&transform);
    let mut residuals = vec![rms];
    let mut iterations = 0;
    for _ in 0..config.max_iter {
        iterations += 1;
        let s: Vec<[f64; 2]> = pairs.iter().map(|p| src[p.1]).collect();
        let d: Vec<[f64; 2]> = pairs.iter().map(|p| p.2).collect();
        let candidate = fit_rigid(&s, &d);
        let (next_pairs, next_rms) = correspond(&candidate);
        if next_rms > rms {
            // Rounding can undo a converged fit; keep the better one.
            break;
        }
        transform = candidate;
        residuals.push(next_rms);
        let improvement = rms - next_rms;
        pairs = next_pairs;
        rms = next_rms;
        if improvement < config.tol {
            break;
        }
    }
    Ok(IcpResult {
        transform,
        residuals,
        iterations,
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Warp {
    Accepted(BinaryImage),
    /// Too much of the shadow left the frame.
    Rejected { kept_fraction: f64 },
}

/// Resample `original` so that `out(x) = original(T⁻¹ x)`; outside the frame is white.
pub fn warp_mask(original: &BinaryImage, transform: &RigidTransform2D) -> BinaryImage {
    if transform.is_identity() {
        return original.clone();
    }
    let inv = transform.inverse();
    let (w, h) = original.dims();
    BinaryImage::from_fn(w, h, |x, y| {
        let p = inv.apply([x as f64 + 0.5, y as f64 + 0.5]);
        let (sx, sy) = (p[0].floor(), p[1].floor());
        sx >= 0.0 && sy >= 0.0 && (sx as usize) < w && (sy as usize) < h && original.get(sx as usize, sy as usize)
    })
}

/// Warp the original target by a cumulative transform, rejecting motions that push
/// more than 10% of the shadow out of frame.
pub fn warp_target(original: &TargetImage, transform: &RigidTransform2D) -> Warp {
    let before = original.count();
    // Count how many source shadow pixels land inside the frame.
    let (w, h) = original.dims();
    let inside = original
        .shadow_pixels()
        .filter(|&(x, y)| {
            let p = transform.apply([x as f64 + 0.5, y as f64 + 0.5]);
            p[0] >= 0.0 && p[1] >= 0.0 && p[0] < w as f64 && p[1] < h as f64
        })
        .count();
    let kept_fraction = inside as f64 / before.max(1) as f64;
    if kept_fraction < 0.9 {
        return Warp::Rejected { kept_fraction };
    }
    Warp::Accepted(warp_mask(original, transform))
}

#[derive(Debug, Clone, PartialEq)]
pub enum RoundOutcome {
    Updated {
        step: RigidTransform2D,
        cumulative: RigidTransform2D,
        icp: IcpResult,
    },
    Skipped(String),
}

/// One registration pass: render every constraint, register its current target to
/// the render, and rewarp the original image by the composed transform.
///
/// `targets[i]` holds the current (possibly already warped) target and is replaced
/// in place when the round succeeds for that constraint.
pub fn registration_round(
    field: &OccupancyField,
    constraints: &[ProjectionConstraint],
    originals: &[TargetImage],
    cumulative: &mut [RigidTransform2D],
    targets: &mut [BinaryImage],
    tau: f64,
    icp: &IcpConfig,
) -> Result<(Vec<RenderedShadow>, Vec<RoundOutcome>)> {
    let renders: Vec<RenderedShadow> = (0..constraints.len())
        .into_par_iter()
        .map(|i| render_shadow(field, constraints, i, tau))
        .collect::<Result<_>>()?;
    let mut outcomes = Vec::with_capacity(constraints.len());
    for (i, render) in renders.iter().enumerate() {
        let dst = boundary_points(&render.image);
        let src = boundary_points(&targets[i]);
        if dst.len() < 3 || src.len() < 3 {
            outcomes.push(RoundOutcome::Skipped(format!("constraint {i}: empty render or target")));
            continue;
        }
        let result = icp_register(&src, &dst, icp)?;
        if result.degenerate {
            outcomes.push(RoundOutcome::Skipped(format!("constraint {i}: degenerate boundary")));
            continue;
        }
        let next = result.transform.compose(&cumulative[i]);
        match warp_target(&originals[i], &next) {
            Warp::Accepted(img) => {
                targets[i] = img;
                cumulative[i] = next;
                outcomes.push(RoundOutcome::Updated {
                    step: result.transform,
                    cumulative: next,
                    icp: result,
                });
            }
            Warp::Rejected { kept_fraction } => outcomes.push(RoundOutcome::Skipped(format!(
                "constraint {i}: motion keeps only {:.1}% of the shadow",
                100.0 * kept_fraction
            ))),
        }
    }
    Ok((renders, outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Analytic, EncodingConfig, FieldConfig};
    use crate::geometry::Vec3;
    use crate::imageio::{disk, iou, rectangle};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn deg(d: f64) -> f64 {
        d.to_radians()
    }

    fn tiny_field(bias: f64) -> OccupancyField {
        let cfg = FieldConfig {
            encoding: EncodingConfig::new(1),
            depth: 1,
            width: 4,
        };
        let mut f = OccupancyField::new(cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let (_, b) = f.params.layer_ranges(1);
        f.params.data[b][0] = bias;
        f
    }

    fn front(n: usize) -> ProjectionConstraint {
        ProjectionConstraint::new(Vec3::new(0.0, 0.0, -1.0), Vec3::new(0.0, 0.0, 1.0), 0.5, n, n)
    }

    #[test]
    fn low_field_renders_white() {
        let r = render_shadow(&tiny_field(-20.0), &[front(16)], 0, 0.5).unwrap();
        assert_eq!(r.image.count(), 0);
        let r = render_shadow(&tiny_field(20.0), &[front(16)], 0, 0.5).unwrap();
        assert_eq!(r.image.count(), 256);
    }

    #[test]
    fn box_field_renders_its_square() {
        // Central cube |x|, |y|, |z| <= 0.25 seen head-on covers pixels [16, 48)^2.
        let cube = Analytic(|p: Vec3| {
            if p.x.abs() <= 0.25 && p.y.abs() <= 0.25 && p.z.abs() <= 0.25 {
                1.0
            } else {
                0.0
            }
        });
        let r = render_shadow(&cube, &[front(64)], 0, 0.5).unwrap();
        assert_eq!(r.image, rectangle(64, 64, 16, 16, 48, 48));
        assert!(render_shadow(&cube, &[front(64)], 1, 0.5).is_err());
    }

    /// Boundary of an asymmetric silhouette: an L-shaped block with an offset disk.
    fn silhouette() -> BinaryImage {
        let l_block = rectangle(64, 64, 14, 12, 24, 50);
        let foot = rectangle(64, 64, 14, 40, 44, 50);
        let blob = disk(64, 64, 7.0);
        BinaryImage::from_fn(64, 64, |x, y| {
            l_block.get(x, y) || foot.get(x, y) || (blob.get((x + 64 - 10) % 64, (y + 64 + 12) % 64) && x > 30)
        })
    }

    fn cloud() -> Vec<[f64; 2]> {
        boundary_points(&silhouette())
    }

    #[test]
    fn identical_clouds_give_identity() {
        let c = cloud();
        let r = icp_register(&c, &c, &IcpConfig::default()).unwrap();
        assert!(r.transform.angle.abs() < 1e-9);
        assert!(r.transform.tx.abs() < 1e-9 && r.transform.ty.abs() < 1e-9);
    }

    #[test]
    fn recovers_rotation_and_shift() {
        let src = cloud();
        let truth = RigidTransform2D::about([32.0, 32.0], deg(5.0), 2.0, -1.0);
        let dst: Vec<[f64; 2]> = src.iter().map(|&p| truth.apply(p)).collect();
        let r = icp_register(&src, &dst, &IcpConfig::default()).unwrap();
        assert!((r.transform.angle - truth.angle).abs() < deg(0.1), "{r:?} {truth:?}");
        assert!((r.transform.tx - truth.tx).abs() < 0.1, "{:?} vs {truth:?}", r.transform);
        assert!((r.transform.ty - truth.ty).abs() < 0.1);
        assert!(r.residuals.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn outliers_are_trimmed() {
        let src = cloud();
        let mut dst = src.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..src.len() / 100 + 1 {
            dst.push([rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)]);
        }
        let mut noisy_src = src.clone();
        for _ in 0..src.len() / 100 + 1 {
            noisy_src.push([rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)]);
        }
        let r = icp_register(&noisy_src, &dst, &IcpConfig::default()).unwrap();
        assert!(*r.residuals.last().unwrap() < 0.5);
    }

    #[test]
    fn collinear_cloud_is_degenerate() {
        let line: Vec<[f64; 2]> = (0..10).map(|i| [i as f64, 2.0 * i as f64]).collect();
        let r = icp_register(&line, &cloud(), &IcpConfig::default()).unwrap();
        assert!(r.degenerate);
        assert!(r.transform.is_identity());
        assert!(icp_register(&line[..2], &cloud(), &IcpConfig::default()).is_err());
    }

    #[test]
    fn compose_and_inverse() {
        let a = RigidTransform2D::new(0.3, 1.0, -2.0);
        let b = RigidTransform2D::new(-0.1, 0.5, 4.0);
        let p = [3.0, 7.0];
        let ab = a.compose(&b).apply(p);
        let seq = a.apply(b.apply(p));
        assert!((ab[0] - seq[0]).abs() < 1e-12 && (ab[1] - seq[1]).abs() < 1e-12);
        let back = a.inverse().apply(a.apply(p));
        assert!((back[0] - p[0]).abs() < 1e-12 && (back[1] - p[1]).abs() < 1e-12);
    }

    #[test]
    fn warp_examples() {
        let sq = TargetImage::new(rectangle(32, 32, 8, 8, 24, 24)).unwrap();
        assert_eq!(warp_target(&sq, &RigidTransform2D::IDENTITY), Warp::Accepted(sq.image().clone()));
        assert_eq!(
            warp_target(&sq, &RigidTransform2D::new(0.0, 3.0, -2.0)),
            Warp::Accepted(rectangle(32, 32, 11, 6, 27, 22))
        );
        let quarter = RigidTransform2D::about([16.0, 16.0], std::f64::consts::FRAC_PI_2, 0.0, 0.0);
        assert_eq!(warp_target(&sq, &quarter), Warp::Accepted(sq.image().clone()));
        assert!(matches!(
            warp_target(&sq, &RigidTransform2D::new(0.0, 12.0, 0.0)),
            Warp::Rejected { .. }
        ));
    }

    #[test]
    fn warp_preserves_area_and_composes() {
        let d = TargetImage::new(disk(64, 64, 12.0)).unwrap();
        let t1 = RigidTransform2D::about([32.0, 32.0], deg(7.0), 1.5, -0.7);
        let t2 = RigidTransform2D::about([32.0, 32.0], deg(-3.0), -2.2, 1.1);
        let Warp::Accepted(once) = warp_target(&d, &t2.compose(&t1)) else { panic!() };
        let ratio = once.count() as f64 / d.count() as f64;
        assert!((ratio - 1.0).abs() < 0.02, "{ratio}");
        let Warp::Accepted(step1) = warp_target(&d, &t1) else { panic!() };
        let step2 = warp_mask(&step1, &t2);
        // Sequential resampling differs from the single warp by at most one pixel.
        assert!(hausdorff(&once, &step2) <= 1.5);
    }

    fn hausdorff(a: &BinaryImage, b: &BinaryImage) -> f64 {
        let pa = boundary_points(a);
        let pb = boundary_points(b);
        let one_way = |x: &[[f64; 2]], y: &[[f64; 2]]| {
            x.iter()
                .map(|p| y.iter().map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()).fold(f64::INFINITY, f64::min))
                .fold(0.0, f64::max)
        };
        one_way(&pa, &pb).max(one_way(&pb, &pa))
    }

    #[test]
    fn round_with_empty_render_skips() {
        let c = front(16);
        let originals = vec![TargetImage::new(disk(16, 16, 5.0)).unwrap()];
        let mut cumulative = vec![RigidTransform2D::IDENTITY];
        let mut targets = vec![originals[0].image().clone()];
        let (_, out) = registration_round(
            &tiny_field(-20.0),
            &[c],
            &originals,
            &mut cumulative,
            &mut targets,
            0.5,
            &IcpConfig::default(),
        )
        .unwrap();
        assert!(matches!(out[0], RoundOutcome::Skipped(_)));
        assert_eq!(targets[0], *originals[0].image());
    }

    #[test]
    fn shifted_target_follows_render() {
        // Register a target to a render that is the same disk shifted by 3 px.
        let original = TargetImage::new(disk(48, 48, 10.0)).unwrap();
        let render = warp_mask(&original, &RigidTransform2D::new(0.0, 3.0, 0.0));
        let r = icp_register(&boundary_points(&original), &boundary_points(&render), &IcpConfig::default()).unwrap();
        assert!((r.transform.tx - 3.0).abs() < 0.5, "{:?}", r.transform);
        let Warp::Accepted(updated) = warp_target(&original, &r.transform) else { panic!() };
        assert!(iou(&updated, &render).unwrap() >= 0.98);
    }
}
