//! Directional-light projection geometry.
//!
//! Scene coordinates are normalized so the region of interest is `[-0.5, 0.5]^3`.
//! Every shadow constraint owns a screen plane `{p : <p, s> = -d}` whose normal
//! `s` points toward the object, a light direction `l` pointing from the object
//! toward the screen, and a `w x h` target image centred on the point `J` where
//! the line through the origin along `l` meets the screen.
//!
//! The image spans `w/h` scene units along `c` and one unit along `r`, so pixel
//! `(px, py)` sits at `J + (px - w/2)/h * c + (py/h - 1/2) * r`.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    #[inline]
    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    #[inline]
    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    /// Unit vector in the same direction. Zero stays zero.
    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        if n == 0.0 {
            self
        } else {
            self / n
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Rotate by `angle` radians about the unit `axis` (Rodrigues).
    pub fn rotated(self, axis: Vec3, angle: f64) -> Vec3 {
        let k = axis.normalized();
        let (sin, cos) = angle.sin_cos();
        self * cos + k.cross(self) * sin + k * (k.dot(self) * (1.0 - cos))
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        v.to_array()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    #[inline]
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    #[inline]
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn mul(self, k: f64) -> Vec3 {
        Vec3::new(self.x * k, self.y * k, self.z * k)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn div(self, k: f64) -> Vec3 {
        Vec3::new(self.x / k, self.y / k, self.z / k)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    #[inline]
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl AddAssign for Vec3 {
    #[inline]
    fn add_assign(&mut self, o: Vec3) {
        self.x += o.x;
        self.y += o.y;
        self.z += o.z;
    }
}

impl SubAssign for Vec3 {
    #[inline]
    fn sub_assign(&mut self, o: Vec3) {
        self.x -= o.x;
        self.y -= o.y;
        self.z -= o.z;
    }
}

/// In-plane screen basis `(c, r)` for the screen normal `s`.
///
/// `c` is the horizontal direction `(-s_y, s_x, 0)` normalized and `r = c x s`.
/// At the poles `s = (0, 0, +-1)` the horizontal direction vanishes and `c = (0, 1, 0)`.
pub fn screen_basis(s: Vec3) -> (Vec3, Vec3) {
    let c = match horizontal(s) {
        Some((q, n)) => q / n,
        None => Vec3::new(0.0, 1.0, 0.0),
    };
    (c, c.cross(s))
}

/// `(-s_y, s_x, 0)` and its norm, or `None` at the poles.
fn horizontal(s: Vec3) -> Option<(Vec3, f64)> {
    let q = Vec3::new(-s.y, s.x, 0.0);
    let n = q.norm();
    if n > POLE_EPS {
        Some((q, n))
    } else {
        None
    }
}

const POLE_EPS: f64 = 1e-12;

/// Distance `|OJ|` from the origin to the image centre along `l`.
pub fn oj_distance(l: Vec3, s: Vec3, d: f64) -> Result<f64> {
    let dot = l.dot(s);
    if dot < 0.0 {
        Ok(-d / dot)
    } else {
        Err(Error::ConstraintViolation { index: 0, dot })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScreenFrame {
    /// Screen normal, pointing toward the object.
    pub s: Vec3,
    pub c: Vec3,
    pub r: Vec3,
    /// Distance from the origin to the screen plane.
    pub d: f64,
}

impl ScreenFrame {
    pub fn new(s: Vec3, d: f64) -> Self {
        let (c, r) = screen_basis(s);
        Self { s, c, r, d }
    }
}

/// Start and end point of the ray through continuous pixel coordinates `(px, py)`.
///
/// `r_e` lies on the screen plane and `r_s = r_e - 2|OJ| l`.
pub fn ray_endpoints(
    frame: &ScreenFrame,
    l: Vec3,
    w: usize,
    h: usize,
    px: f64,
    py: f64,
) -> Result<(Vec3, Vec3)> {
    let oj = oj_distance(l, frame.s, frame.d)?;
    let (a, b) = pixel_offsets(w, h, px, py);
    let end = l * oj + frame.c * a + frame.r * b;
    let start = end - l * (2.0 * oj);
    Ok((start, end))
}

/// In-plane offsets `(a, b)` of pixel coordinates from the image centre, in scene units.
#[inline]
pub fn pixel_offsets(w: usize, h: usize, px: f64, py: f64) -> (f64, f64) {
    let (w, h) = (w as f64, h as f64);
    ((w / h) * (px / w - 0.5), py / h - 0.5)
}

/// One light/screen pair plus the pixel extent of its target image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConstraint {
    pub light: Vec3,
    pub screen: Vec3,
    pub distance: f64,
    pub width: usize,
    pub height: usize,
}

impl ProjectionConstraint {
    pub fn new(light: Vec3, screen: Vec3, distance: f64, width: usize, height: usize) -> Self {
        Self {
            light,
            screen,
            distance,
            width,
            height,
        }
    }

    pub fn facing(&self) -> f64 {
        self.light.dot(self.screen)
    }

    pub fn frame(&self) -> ScreenFrame {
        ScreenFrame::new(self.screen, self.distance)
    }

    pub fn frustum(&self) -> Result<Frustum> {
        Frustum::new(self)
    }

    /// Ray endpoints for the centre of pixel `(i, j)`.
    pub fn pixel_ray(&self, i: usize, j: usize) -> Result<(Vec3, Vec3)> {
        ray_endpoints(
            &self.frame(),
            self.light,
            self.width,
            self.height,
            i as f64 + 0.5,
            j as f64 + 0.5,
        )
    }
}

/// Validate a set of constraints, naming the first one whose light does not face its screen.
pub fn check_facing(constraints: &[ProjectionConstraint]) -> Result<()> {
    for (index, c) in constraints.iter().enumerate() {
        let dot = c.facing();
        if !(dot < 0.0) {
            return Err(Error::ConstraintViolation { index, dot });
        }
    }
    Ok(())
}

/// The prism swept by translating a target image along its light direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frustum {
    pub light: Vec3,
    pub frame: ScreenFrame,
    pub width: usize,
    pub height: usize,
    oj: f64,
    facing: f64,
}

impl Frustum {
    pub fn new(c: &ProjectionConstraint) -> Result<Self> {
        let frame = c.frame();
        let oj = oj_distance(c.light, frame.s, frame.d)?;
        Ok(Self {
            light: c.light,
            frame,
            width: c.width,
            height: c.height,
            oj,
            facing: c.light.dot(frame.s),
        })
    }

    pub fn oj_distance(&self) -> f64 {
        self.oj
    }

    /// Continuous pixel coordinates where the light ray through `p` meets the screen.
    pub fn project_to_pixel(&self, p: Vec3) -> (f64, f64) {
        let f = &self.frame;
        let t = (-f.d - p.dot(f.s)) / self.facing;
        let q = p + self.light * t - self.light * self.oj;
        let (w, h) = (self.width as f64, self.height as f64);
        (q.dot(f.c) * h + 0.5 * w, (q.dot(f.r) + 0.5) * h)
    }

    pub fn contains(&self, p: Vec3) -> bool {
        let (px, py) = self.project_to_pixel(p);
        (0.0..=self.width as f64).contains(&px) && (0.0..=self.height as f64).contains(&py)
    }

    /// Parameter interval `[lo, hi]` of `origin + t * dir` inside this prism, or `None`.
    pub fn clip_line(&self, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
        let (x0, y0) = self.project_to_pixel(origin);
        let (x1, y1) = self.project_to_pixel(origin + dir);
        let (lo_x, hi_x) = slab(x0, x1 - x0, self.width as f64)?;
        let (lo_y, hi_y) = slab(y0, y1 - y0, self.height as f64)?;
        let lo = lo_x.max(lo_y);
        let hi = hi_x.min(hi_y);
        (lo <= hi).then_some((lo, hi))
    }
}

/// Solve `0 <= start + t * slope <= extent` for `t`.
fn slab(start: f64, slope: f64, extent: f64) -> Option<(f64, f64)> {
    // Pixel coordinates of points travelling along their own light barely move;
    // treat tiny slopes as parallel.
    if slope.abs() < 1e-12 {
        return (0.0..=extent)
            .contains(&start)
            .then_some((f64::NEG_INFINITY, f64::INFINITY));
    }
    let t0 = -start / slope;
    let t1 = (extent - start) / slope;
    Some((t0.min(t1), t0.max(t1)))
}

/// Convenience wrapper over [`Frustum::project_to_pixel`].
pub fn project_to_pixel(p: Vec3, constraint: &ProjectionConstraint) -> Result<(f64, f64)> {
    Ok(Frustum::new(constraint)?.project_to_pixel(p))
}

pub fn point_in_frustum_intersection(p: Vec3, frusta: &[Frustum]) -> bool {
    frusta.iter().all(|f| f.contains(p))
}

pub fn frusta(constraints: &[ProjectionConstraint]) -> Result<Vec<Frustum>> {
    constraints
        .iter()
        .enumerate()
        .map(|(i, c)| {
            Frustum::new(c).map_err(|e| match e {
                Error::ConstraintViolation { dot, .. } => Error::ConstraintViolation { index: i, dot },
                other => other,
            })
        })
        .collect()
}

/// Sample positions along pixel rays as a differentiable function of `(l, s)`.
///
/// A sample at parameter `t` on the ray with in-plane offsets `(a, b)` is
/// `p = |OJ| (2t - 1) l + a c + b r`.
#[derive(Debug, Clone, Copy)]
pub struct RayGeometry {
    pub light: Vec3,
    pub screen: Vec3,
    pub distance: f64,
    pub c: Vec3,
    pub r: Vec3,
    pub oj: f64,
    pub width: usize,
    pub height: usize,
}

impl RayGeometry {
    pub fn new(constraint: &ProjectionConstraint) -> Result<Self> {
        let oj = oj_distance(constraint.light, constraint.screen, constraint.distance)?;
        let (c, r) = screen_basis(constraint.screen);
        Ok(Self {
            light: constraint.light,
            screen: constraint.screen,
            distance: constraint.distance,
            c,
            r,
            oj,
            width: constraint.width,
            height: constraint.height,
        })
    }

    /// In-plane offsets of the centre of pixel `(i, j)`.
    pub fn offsets(&self, i: usize, j: usize) -> (f64, f64) {
        pixel_offsets(self.width, self.height, i as f64 + 0.5, j as f64 + 0.5)
    }

    #[inline]
    pub fn point(&self, a: f64, b: f64, t: f64) -> Vec3 {
        self.light * (self.oj * (2.0 * t - 1.0)) + self.c * a + self.r * b
    }

    /// Length of the full ray segment, `2|OJ| |l|`.
    pub fn ray_length(&self) -> f64 {
        2.0 * self.oj * self.light.norm()
    }
}

/// Accumulated vector-Jacobian products of sample positions for one constraint.
#[derive(Debug, Clone, Copy, Default)]
pub struct GeometryAdjoint {
    along: Vec3,
    across_c: Vec3,
    across_r: Vec3,
}

impl GeometryAdjoint {
    /// Record the adjoint `dp` of the sample `point(a, b, t)`.
    #[inline]
    pub fn push(&mut self, a: f64, b: f64, t: f64, dp: Vec3) {
        self.along += dp * (2.0 * t - 1.0);
        self.across_c += dp * a;
        self.across_r += dp * b;
    }

    pub fn merge(&mut self, other: &GeometryAdjoint) {
        self.along += other.along;
        self.across_c += other.across_c;
        self.across_r += other.across_r;
    }

    /// Gradients with respect to the light direction and screen normal.
    pub fn finalize(&self, g: &RayGeometry) -> (Vec3, Vec3) {
        let l = g.light;
        let s = g.screen;
        let dot = l.dot(s);

        let mut dl = self.along * g.oj;
        let d_oj = l.dot(self.along);
        // |OJ| = -d / <l, s>
        let d_dot = d_oj * g.distance / (dot * dot);
        dl += s * d_dot;
        let mut ds = l * d_dot;

        // r = c x s
        let dr = self.across_r;
        let dc = self.across_c + s.cross(dr);
        ds += dr.cross(g.c);

        if let Some((_, n)) = horizontal(s) {
            let dq = (dc - g.c * g.c.dot(dc)) / n;
            ds.x += dq.y;
            ds.y -= dq.x;
        }
        (dl, ds)
    }
}
