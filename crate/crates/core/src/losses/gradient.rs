//! Least-squares occupancy gradient from neighbouring samples, and its adjoint.

use crate::geometry::Vec3;

/// Diagonal damping added to `KᵀK` when the neighbour offsets do not span 3D.
pub const RANK_DAMPING: f64 = 1e-8;
/// `det(KᵀK) / (tr/3)³` below this counts as rank deficient. Batch neighbourhoods
/// are often strung along a single ray, and a looser test lets near-collinear
/// offsets through with gradient estimates inflated by the inverse of the thin
/// singular value.
const RANK_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Sym3 {
    m: [[f64; 3]; 3],
}

impl Sym3 {
    fn gram(rows: impl Iterator<Item = Vec3>) -> Self {
        let mut m = [[0.0; 3]; 3];
        for r in rows {
            let a = r.to_array();
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] += a[i] * a[j];
                }
            }
        }
        Self { m }
    }

    fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    fn trace(&self) -> f64 {
        self.m[0][0] + self.m[1][1] + self.m[2][2]
    }

    fn solve(&self, b: Vec3) -> Vec3 {
        let m = &self.m;
        let det = self.det();
        let b = b.to_array();
        let mut x = [0.0; 3];
        // Cramer's rule; the matrix is small and symmetric positive (semi)definite.
        for (col, out) in x.iter_mut().enumerate() {
            let mut mc = *m;
            for row in 0..3 {
                mc[row][col] = b[row];
            }
            *out = Sym3 { m: mc }.det() / det;
        }
        x.into()
    }
}

/// Gradient estimate at one sample. `system` is kept for the backward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientEstimate {
    pub grad: Vec3,
    pub rank_deficient: bool,
    system: Sym3,
}

/// Solve `K g = b` in the least-squares sense, where row `i` of `K` is
/// `neighbors[i] - p0` and `b_i = values[i] - f0`.
pub fn estimate_gradient(p0: Vec3, f0: f64, neighbors: &[Vec3], values: &[f64]) -> GradientEstimate {
    debug_assert_eq!(neighbors.len(), values.len());
    let mut system = Sym3::gram(neighbors.iter().map(|&q| q - p0));
    let scale = system.trace() / 3.0;
    let rank_deficient = scale <= 0.0 || system.det() <= RANK_TOL * scale * scale * scale;
    if rank_deficient {
        for i in 0..3 {
            system.m[i][i] += RANK_DAMPING;
        }
    }
    let mut rhs = Vec3::default();
    for (&q, &v) in neighbors.iter().zip(values) {
        rhs += (q - p0) * (v - f0);
    }
    GradientEstimate {
        grad: system.solve(rhs),
        rank_deficient,
        system,
    }
}

/// Adjoint of [`estimate_gradient`] for an incoming `dgrad`.
///
/// Differentiates through both `b` and `K`: with `u = M⁻¹ dgrad` and residual
/// `r = b - K g`, `db = K u` and `dK = r uᵀ - (K u) gᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientAdjoint {
    pub d_f0: f64,
    pub d_values: Vec<f64>,
    pub d_p0: Vec3,
    pub d_neighbors: Vec<Vec3>,
}

pub fn estimate_gradient_adjoint(
    est: &GradientEstimate,
    p0: Vec3,
    f0: f64,
    neighbors: &[Vec3],
    values: &[f64],
    dgrad: Vec3,
) -> GradientAdjoint {
    let u = est.system.solve(dgrad);
    let g = est.grad;
    let mut d_f0 = 0.0;
    let mut d_p0 = Vec3::default();
    let mut d_values = Vec::with_capacity(neighbors.len());
    let mut d_neighbors = Vec::with_capacity(neighbors.len());
    for (&q, &v) in neighbors.iter().zip(values) {
        let k = q - p0;
        let ku = k.dot(u);
        let r = (v - f0) - k.dot(g);
        d_values.push(ku);
        d_f0 -= ku;
        let dk = u * r - g * ku;
        d_neighbors.push(dk);
        d_p0 -= dk;
    }
    GradientAdjoint {
        d_f0,
        d_values,
        d_p0,
        d_neighbors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, p0: Vec3, n: usize, h: f64) -> Vec<Vec3> {
        (0..n)
            .map(|_| {
                p0 + Vec3::new(
                    rng.random_range(-h..h),
                    rng.random_range(-h..h),
                    rng.random_range(-h..h),
                )
            })
            .collect()
    }

    #[test]
    fn constant_field_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p0 = Vec3::new(0.1, 0.2, 0.3);
        let nb = cloud(&mut rng, p0, 26, 0.05);
        let est = estimate_gradient(p0, 0.7, &nb, &[0.7; 26]);
        assert_eq!(est.grad, Vec3::default());
        assert!(!est.rank_deficient);
    }

    #[test]
    fn quadratic_on_a_shell() {
        // f = |p|^2 at p0 = (0.1, 0, 0): true gradient (0.2, 0, 0); the symmetric
        // shell cancels the second-order term, leaving an O(h) error at most.
        let p0 = Vec3::new(0.1, 0.0, 0.0);
        for &h in &[0.02, 0.01, 0.005] {
            let mut nb = Vec::new();
            for i in -1i32..=1 {
                for j in -1i32..=1 {
                    for k in -1i32..=1 {
                        if (i, j, k) != (0, 0, 0) {
                            let d = Vec3::new(i as f64, j as f64, k as f64).normalized() * h;
                            nb.push(p0 + d);
                        }
                    }
                }
            }
            let vals: Vec<f64> = nb.iter().map(|q| q.norm_squared()).collect();
            let est = estimate_gradient(p0, p0.norm_squared(), &nb, &vals);
            let err = (est.grad - Vec3::new(0.2, 0.0, 0.0)).norm();
            assert!(err <= 2.0 * h, "h={h}: err {err}");
        }
    }

    #[test]
    fn collinear_neighbours_are_damped() {
        let p0 = Vec3::new(0.0, 0.0, 0.0);
        let nb: Vec<Vec3> = (1..=6).map(|i| Vec3::new(0.01 * i as f64, 0.0, 0.0)).collect();
        let vals: Vec<f64> = nb.iter().map(|q| 3.0 * q.x).collect();
        let est = estimate_gradient(p0, 0.0, &nb, &vals);
        assert!(est.rank_deficient);
        assert!((est.grad.x - 3.0).abs() < 1e-4);
        assert!(est.grad.y.abs() < 1e-12 && est.grad.z.abs() < 1e-12);
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p0 = Vec3::new(0.05, -0.1, 0.2);
        let nb = cloud(&mut rng, p0, 26, 0.03);
        let f0 = 0.4;
        let vals: Vec<f64> = (0..26).map(|_| rng.random_range(0.0..1.0)).collect();
        let w = Vec3::new(0.3, -1.2, 0.7);
        let obj = |p0: Vec3, f0: f64, nb: &[Vec3], vals: &[f64]| estimate_gradient(p0, f0, nb, vals).grad.dot(w);

        let est = estimate_gradient(p0, f0, &nb, &vals);
        let adj = estimate_gradient_adjoint(&est, p0, f0, &nb, &vals, w);
        let h = 1e-6;
        let rel = |num: f64, ana: f64| (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);

        let num = (obj(p0, f0 + h, &nb, &vals) - obj(p0, f0 - h, &nb, &vals)) / (2.0 * h);
        assert!(rel(num, adj.d_f0) < 1e-6);
        for i in 0..26 {
            let mut vp = vals.clone();
            let mut vm = vals.clone();
            vp[i] += h;
            vm[i] -= h;
            let num = (obj(p0, f0, &nb, &vp) - obj(p0, f0, &nb, &vm)) / (2.0 * h);
            assert!(rel(num, adj.d_values[i]) < 1e-6);
            for axis in 0..3 {
                let mut d = [0.0; 3];
                d[axis] = h;
                let mut np = nb.clone();
                let mut nm = nb.clone();
                np[i] += d.into();
                nm[i] -= d.into();
                let num = (obj(p0, f0, &np, &vals) - obj(p0, f0, &nm, &vals)) / (2.0 * h);
                assert!(rel(num, adj.d_neighbors[i].to_array()[axis]) < 1e-5, "{num} vs {:?}", adj.d_neighbors[i]);
            }
        }
        for axis in 0..3 {
            let mut d = [0.0; 3];
            d[axis] = h;
            let num = (obj(p0 + d.into(), f0, &nb, &vals) - obj(p0 - d.into(), f0, &nb, &vals)) / (2.0 * h);
            assert!(rel(num, adj.d_p0.to_array()[axis]) < 1e-5);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn affine_fields_are_exact(
            seed in any::<u64>(),
            a in (-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0),
            c in -1.0f64..1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Vec3::new(a.0, a.1, a.2);
            let p0 = Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            let nb = cloud(&mut rng, p0, 26, 0.02);
            let f = |p: Vec3| c + a.dot(p);
            let vals: Vec<f64> = nb.iter().map(|&q| f(q)).collect();
            let est = estimate_gradient(p0, f(p0), &nb, &vals);
            prop_assert!(!est.rank_deficient);
            prop_assert!((est.grad - a).norm() < 1e-9 * (1.0 + a.norm()));
        }
    }
}
