use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn line_ray(batch: &mut RayBatch, origin: Vec3, dir: Vec3, n: usize, target: f64, width: usize) {
    let pts = (0..n).map(|k| origin + dir * ((k as f64 + 0.5) / n as f64));
    batch.push_ray(pts, target, width, dir.norm());
}

fn single(values: &[f64], target: f64) -> RayBatch {
    let mut b = RayBatch::default();
    line_ray(&mut b, Vec3::new(0.0, 0.0, -0.5), Vec3::new(0.0, 0.0, 1.0), values.len(), target, 16);
    b
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12
}

#[test]
fn ray_occupancy_examples() {
    assert_eq!(ray_occupancy(&[0.0, 0.0, 0.0]), 0.0);
    assert_eq!(ray_occupancy(&[0.2, 1.0, 0.3]), 1.0);
    assert!(close(ray_occupancy(&[0.5, 0.5]), 0.75));
}

#[test]
fn rendering_examples() {
    let b = RayBatch::default();
    let mut g = LossGrad::zeros(&b);
    assert!(matches!(rendering_loss(&b, &[], 1.0, &mut g, 1.0), Err(Error::EmptyBatch)));

    let b = single(&[0.0], 1.0);
    let mut g = LossGrad::zeros(&b);
    assert!(close(rendering_loss(&b, &[0.0], 1.0, &mut g, 0.0).unwrap(), 1.0));

    let b = single(&[0.5, 0.5], 1.0);
    let mut g = LossGrad::zeros(&b);
    assert_eq!(rendering_loss(&b, &[1.0, 0.3], 1.0, &mut g, 0.0).unwrap(), 0.0);

    // O = 0.75 against M = 1 and O = 0.25 against M = 0, alpha = 4.
    let mut b = RayBatch::default();
    line_ray(&mut b, Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0), 2, 1.0, 16);
    line_ray(&mut b, Vec3::ZERO, Vec3::new(0.0, 1.0, 0.0), 1, 0.0, 16);
    let mut g = LossGrad::zeros(&b);
    assert!(close(rendering_loss(&b, &[0.5, 0.5, 0.25], 4.0, &mut g, 0.0).unwrap(), 0.25));
}

#[test]
fn cohesion_examples() {
    let mut g = LossGrad::zeros(&single(&[0.0; 3], 0.0));
    assert_eq!(cohesion_loss(&single(&[0.3; 3], 0.0), &[0.3; 3], &mut g, 0.0).unwrap(), 0.0);
    assert!(close(cohesion_loss(&single(&[0.0; 3], 0.0), &[0.0, 1.0, 0.0], &mut g, 0.0).unwrap(), 2.0 / 3.0));

    let mut g = LossGrad::zeros(&single(&[0.0; 5], 0.0));
    let b = single(&[0.0; 5], 1.0);
    let block = cohesion_loss(&b, &[0.0, 0.0, 1.0, 1.0, 0.0], &mut g, 0.0).unwrap();
    let alternating = cohesion_loss(&b, &[0.0, 1.0, 0.0, 1.0, 0.0], &mut g, 0.0).unwrap();
    assert!(close(block, 2.0 / 5.0));
    assert!(close(alternating, 4.0 / 5.0));
    assert!(block < alternating);
}

#[test]
fn binarization_examples() {
    let b = single(&[0.0; 4], 0.0);
    let mut g = LossGrad::zeros(&b);
    assert_eq!(binarization_loss(&b, &[0.0, 1.0, 1.0, 0.0], &mut g, 0.0).unwrap(), 0.0);
    assert!(close(binarization_loss(&b, &[0.5; 4], &mut g, 0.0).unwrap(), 0.25));
    let b = single(&[0.0], 0.0);
    let mut g = LossGrad::zeros(&b);
    assert!(close(binarization_loss(&b, &[0.1], &mut g, 0.0).unwrap(), 0.01));
}

#[test]
fn volume_examples() {
    // Switch off: f = 0 with a very low temperature.
    let b = single(&[0.0; 8], 0.0);
    let mut g = LossGrad::zeros(&b);
    assert!(volume_loss(&b, &[0.0; 8], 0.5, 1e-3, &mut g, 0.0).unwrap() < 1e-100);

    // Lone sample at the threshold: omega * 1/2 with omega = truncated length.
    let mut b = RayBatch::default();
    b.push_ray([Vec3::ZERO], 1.0, 16, 0.37);
    let mut g = LossGrad::zeros(&b);
    assert!(close(volume_loss(&b, &[0.5], 0.5, 0.1, &mut g, 0.0).unwrap(), 0.185));

    // Full unit-length ray with f = 1: the weights telescope to the ray length.
    for n in [48usize, 100, 256] {
        let b = single(&vec![0.0; n], 1.0);
        let mut g = LossGrad::zeros(&b);
        let v = volume_loss(&b, &vec![1.0; n], 0.5, 0.01, &mut g, 0.0).unwrap();
        // Midpoints span (n-1)/n; the two full end weights add another 1/n.
        assert!(close(v, 1.0), "n={n}: {v}");
    }
}

#[test]
fn schedule_examples() {
    let s = Schedule::default();
    let b0 = s.betas(0);
    assert_eq!((b0.coh, b0.smo, b0.vol, b0.bin), (1e-3, 0.0, 0.0, 5e-2));
    let b3 = s.betas(3);
    assert_eq!((b3.coh, b3.smo, b3.vol, b3.bin), (8e-3, 0.0, 0.0, 4e-1));
    let b4 = s.betas(4);
    assert_eq!((b4.coh, b4.smo, b4.vol, b4.bin), (8e-3, 1e-4, 1e-4, 4e-1));
    assert_eq!(s.betas(29), b4);
}

#[test]
fn total_of_zero_terms_is_zero() {
    // Binary, constant, matching field: every term except volume is exactly zero,
    // and volume vanishes when f = 0 is far below the threshold.
    let b = single(&[0.0; 6], 0.0);
    for epoch in [0, 3, 10] {
        let mut g = LossGrad::zeros(&b);
        let mut d = Diagnostics::default();
        let w = LossWeights {
            temperature: 1e-4,
            ..LossWeights::default()
        };
        let out = total_loss(&b, &[0.0; 6], &w, &w.schedule.betas(epoch), &mut g, &mut d).unwrap();
        assert_eq!(out.total, 0.0);
    }
}

#[test]
fn smoothness_examples() {
    let pts = [Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.1, 0.0, 0.0)];
    let same = [Vec3::new(3.0, 1.0, 0.0); 2];
    assert_eq!(surface_smoothness(&pts, &same, 6, 0.0).value, 0.0);
    let grads = [Vec3::new(20.0, 0.0, 0.0), Vec3::new(20.0, 0.2, 0.0)];
    assert!(close(surface_smoothness(&pts, &grads, 6, 0.0).value, 2.0));
    assert_eq!(surface_smoothness(&pts[..1], &grads[..1], 6, 0.0).value, 0.0);

    let dup = [Vec3::ZERO, Vec3::ZERO];
    let s = surface_smoothness(&dup, &grads, 6, 1.0);
    assert_eq!(s.value, 0.0);
    assert_eq!(s.skipped_pairs, 2);
}

#[test]
fn affine_clusters_have_exact_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let centres = [Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.1, 0.0, 0.0)];
    let slopes = [Vec3::new(20.0, 0.0, 0.0), Vec3::new(20.0, 0.2, 0.0)];
    let mut b = RayBatch::default();
    let mut values = Vec::new();
    for (c, a) in centres.iter().zip(&slopes) {
        let pts: Vec<Vec3> = (0..31)
            .map(|_| *c + Vec3::new(rng.random_range(-1e-3..1e-3), rng.random_range(-1e-3..1e-3), rng.random_range(-1e-3..1e-3)))
            .collect();
        values.extend(pts.iter().map(|p| 0.5 + a.dot(*p - *c)));
        b.push_ray(pts, 1.0, 16, 1.0);
    }
    let field = estimate_gradients(&b, &values, 26);
    assert_eq!(field.rank_deficient(), 0);
    for (i, e) in field.estimates.iter().enumerate() {
        let a = if i < 31 { slopes[0] } else { slopes[1] };
        assert!((e.grad - a).norm() < 1e-9);
    }
    assert_eq!(detect_surface_points(&b, &field, 1.0).len(), 62);
    assert!(detect_surface_points(&b, &field, 1.3).is_empty());
    let flat = vec![0.5; values.len()];
    assert!(detect_surface_points(&b, &estimate_gradients(&b, &flat, 26), 1e-6).is_empty());
}

#[test]
fn step_field_surface_detection() {
    // Lattice with spacing 1/64 and a unit step at x = 0: gradient estimates near
    // the step are about 64 * (fraction of neighbours across), far away zero.
    let w = 64usize;
    let h = 1.0 / w as f64;
    let mut b = RayBatch::default();
    let mut values = Vec::new();
    for j in -4i32..4 {
        for k in -4i32..4 {
            let pts: Vec<Vec3> = (-8i32..8)
                .map(|i| Vec3::new((i as f64 + 0.5) * h, (j as f64 + 0.5) * h, (k as f64 + 0.5) * h))
                .collect();
            values.extend(pts.iter().map(|p| if p.x > 0.0 { 1.0 } else { 0.0 }));
            b.push_ray(pts, 1.0, w, 1.0);
        }
    }
    let field = estimate_gradients(&b, &values, 26);
    let surface = detect_surface_points(&b, &field, 0.4);
    assert!(!surface.is_empty());
    for &i in &surface {
        assert!(b.points[i].x.abs() < 1.5 * h, "non-adjacent detection at {:?}", b.points[i]);
    }
    // Interior samples two cells from the step are never detected.
    let far: Vec<usize> = (0..b.points.len()).filter(|&i| b.points[i].x.abs() > 2.5 * h).collect();
    assert!(far.iter().all(|i| !surface.contains(i)));

    // Scaling the step down flips detection off once the slope drops below 0.4 w.
    let slope = |s: f64| {
        let vals: Vec<f64> = values.iter().map(|v| v * s).collect();
        detect_surface_points(&b, &estimate_gradients(&b, &vals, 26), 0.4).len()
    };
    assert!(slope(1.0) > 0);
    let max_norm = surface.iter().map(|&i| field.estimates[i].grad.norm()).fold(0.0, f64::max);
    let cut = 0.4 * w as f64 / max_norm;
    assert!(slope(cut * 0.99) == 0);
    assert!(slope(cut * 1.01) > 0);
}

#[test]
fn planar_interface_is_smoother_than_bumpy() {
    let w = 32usize;
    let h = 1.0 / w as f64;
    let make = |f: &dyn Fn(Vec3) -> f64| {
        let mut b = RayBatch::default();
        let mut values = Vec::new();
        for j in -10i32..10 {
            for k in -10i32..10 {
                let pts: Vec<Vec3> = (-6i32..6)
                    .map(|i| Vec3::new((i as f64 + 0.5) * h, (j as f64 + 0.5) * h, (k as f64 + 0.5) * h))
                    .collect();
                values.extend(pts.iter().map(|&p| f(p)));
                b.push_ray(pts, 1.0, w, 1.0);
            }
        }
        let weights = LossWeights {
            theta: 0.2,
            ..LossWeights::default()
        };
        let mut g = LossGrad::zeros(&b);
        let mut d = Diagnostics::default();
        let v = smoothness_loss(&b, &values, &weights, &mut g, 0.0, &mut d).unwrap();
        (v, d.surface_points)
    };
    let soft = |x: f64| sigmoid(x / (0.5 * h));
    let (plane, n_plane) = make(&|p| soft(p.x));
    let (bumpy, n_bumpy) = make(&|p| soft(p.x - 0.08 * (p.y * 25.0).sin() * (p.z * 25.0).cos()));
    assert!(n_plane > 0 && n_bumpy > 0);
    assert!(plane < bumpy, "{plane} vs {bumpy}");
}

/// Random batch of a few rays through a small box with a smooth synthetic field.
fn random_batch(seed: u64) -> (RayBatch, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = RayBatch::default();
    for r in 0..12 {
        let n = if r == 0 { 1 } else { rng.random_range(2..14) };
        let origin = Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), -0.2);
        let dir = Vec3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), 0.4);
        let pts: Vec<Vec3> = (0..n)
            .map(|k| origin + dir * ((k as f64 + rng.random_range(0.0..1.0)) / n as f64))
            .collect();
        b.push_ray(pts, if rng.random_bool(0.5) { 1.0 } else { 0.0 }, 8, 0.3 + 0.01 * r as f64);
    }
    let values = b
        .points
        .iter()
        .map(|p| sigmoid(8.0 * (p.x + 0.7 * p.y - 0.3 * p.z) + (12.0 * p.y).sin()))
        .collect();
    (b, values)
}

/// Central finite differences of one term with respect to values, positions and lengths.
fn check_term(term: Term) {
    let (batch, values) = random_batch(21);
    let weights = LossWeights {
        alpha: 2.5,
        theta: 0.05,
        k1: 12,
        k2: 3,
        ..LossWeights::default()
    };
    let betas = Betas::only(term);
    let eval = |b: &RayBatch, v: &[f64]| {
        let mut g = LossGrad::zeros(b);
        let mut d = Diagnostics::default();
        total_loss(b, v, &weights, &betas, &mut g, &mut d).unwrap().total
    };
    let mut grad = LossGrad::zeros(&batch);
    let mut diag = Diagnostics::default();
    total_loss(&batch, &values, &weights, &betas, &mut grad, &mut diag).unwrap();
    if term == Term::Smoothness {
        assert!(diag.surface_points >= 10, "test needs surface points");
    }
    // Smoothness has high curvature in positions (inverse cube of pair
    // distances), so the step is small.
    let h = 1e-7;
    // Relative error with an absolute floor for entries at finite-difference noise level.
    let rel = |num: f64, ana: f64| (num - ana).abs() / (num.abs().max(ana.abs()) + 1e-3);
    for i in 0..values.len() {
        let mut vp = values.clone();
        let mut vm = values.clone();
        vp[i] += h;
        vm[i] -= h;
        let num = (eval(&batch, &vp) - eval(&batch, &vm)) / (2.0 * h);
        assert!(rel(num, grad.d_values[i]) < 1e-5, "{term:?} value {i}: {num} vs {}", grad.d_values[i]);
        for axis in 0..3 {
            let mut d = [0.0; 3];
            d[axis] = h;
            let mut bp = batch.clone();
            let mut bm = batch.clone();
            bp.points[i] += d.into();
            bm.points[i] -= d.into();
            let num = (eval(&bp, &values) - eval(&bm, &values)) / (2.0 * h);
            let ana = grad.d_points[i].to_array()[axis];
            assert!(rel(num, ana) < 1e-5, "{term:?} point {i}/{axis}: {num} vs {ana}");
        }
    }
    for j in 0..batch.ray_count() {
        let mut bp = batch.clone();
        let mut bm = batch.clone();
        bp.rays[j].length += h;
        bm.rays[j].length -= h;
        let num = (eval(&bp, &values) - eval(&bm, &values)) / (2.0 * h);
        assert!(rel(num, grad.d_length[j]) < 1e-5);
    }
}

#[test]
fn rendering_gradient() {
    check_term(Term::Rendering);
}

#[test]
fn cohesion_gradient() {
    check_term(Term::Cohesion);
}

#[test]
fn smoothness_gradient() {
    check_term(Term::Smoothness);
}

#[test]
fn volume_gradient() {
    check_term(Term::Volume);
}

#[test]
fn binarization_gradient() {
    check_term(Term::Binarization);
}

fn unit_values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-6f64..1.0 - 1e-6, n)
}

proptest! {
    #[test]
    fn occupancy_in_open_interval_and_log_space(f in prop::collection::vec(1e-6f64..0.8, 1..20)) {
        // Bounded so the product of (1 - f) stays well above machine epsilon.
        let o = ray_occupancy(&f);
        prop_assert!(o > 0.0 && o < 1.0);
        let log = 1.0 - f.iter().map(|v| (1.0 - v).ln()).sum::<f64>().exp();
        prop_assert!((o - log).abs() < 1e-12);
        for g in ray_occupancy_grad(&f) {
            prop_assert!(g >= 0.0);
        }
    }

    #[test]
    fn terms_are_nonnegative(f in unit_values(10), target in 0u8..2) {
        let b = single(&f, target as f64);
        let mut g = LossGrad::zeros(&b);
        let mut d = Diagnostics::default();
        let w = LossWeights::default();
        let out = total_loss(&b, &f, &w, &w.schedule.betas(5), &mut g, &mut d).unwrap();
        for t in Term::ALL {
            prop_assert!(out.term(t) >= 0.0);
        }
        prop_assert!(out.total >= 0.0);
    }

    #[test]
    fn volume_is_strictly_monotone(f in unit_values(12), k in 0usize..12, drop in 1e-3f64..0.5) {
        let b = single(&f, 1.0);
        let mut g = LossGrad::zeros(&b);
        let before = volume_loss(&b, &f, 0.5, 0.1, &mut g, 0.0).unwrap();
        let mut lower = f.clone();
        lower[k] = (lower[k] - drop).max(0.0);
        prop_assume!(lower[k] < f[k]);
        let after = volume_loss(&b, &lower, 0.5, 0.1, &mut g, 0.0).unwrap();
        prop_assert!(after < before);
    }

    #[test]
    fn cohesion_zero_iff_constant(f in unit_values(6), c in 0.0f64..1.0, constant in any::<bool>()) {
        let values = if constant { vec![c; 6] } else { f.clone() };
        let b = single(&values, 1.0);
        let mut g = LossGrad::zeros(&b);
        let v = cohesion_loss(&b, &values, &mut g, 0.0).unwrap();
        let is_const = values.windows(2).all(|w| w[0] == w[1]);
        prop_assert_eq!(v == 0.0, is_const);
    }
}

