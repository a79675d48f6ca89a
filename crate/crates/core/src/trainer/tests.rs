use super::*;
use crate::field::EncodingConfig;
use crate::imageio::{disk, rectangle};
use crate::losses::Term;
use rand::Rng;

fn side(l: Vec3, s: Vec3, n: usize) -> ProjectionConstraint {
    ProjectionConstraint::new(l, s, 0.5, n, n)
}

/// Two equatorial views, slightly tilted so no vector sits on an axis.
fn tilted_pair(n: usize) -> Vec<ProjectionConstraint> {
    let l0 = Vec3::new(-1.0, 0.1, 0.05).normalized();
    let s0 = Vec3::new(0.95, -0.05, 0.1).normalized();
    let l1 = Vec3::new(0.08, -1.0, -0.06).normalized();
    let s1 = Vec3::new(-0.1, 0.97, 0.04).normalized();
    vec![side(l0, s0, n), side(l1, s1, n)]
}

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 64,
        seed: 3,
        lr_field: 5e-3,
        field: FieldConfig {
            encoding: EncodingConfig::new(2),
            depth: 2,
            width: 16,
        },
        ..TrainConfig::default()
    }
}

fn disk_target(n: usize) -> TargetImage {
    TargetImage::new(disk(n, n, n as f64 * 0.3)).unwrap()
}

fn square_target(n: usize) -> TargetImage {
    TargetImage::new(rectangle(n, n, n / 4, n / 4, 3 * n / 4, 3 * n / 4)).unwrap()
}

fn objective_value(
    field: &OccupancyField,
    constraints: &[ProjectionConstraint],
    rays: &[SampledRay],
    idx: &[usize],
    weights: &LossWeights,
    betas: &Betas,
) -> f64 {
    batch_objective(field, constraints, rays, idx, &[1.0, 1.3], weights, betas)
        .unwrap()
        .loss
        .total
}

#[test]
fn batch_gradients_match_finite_differences() {
    let n = 10;
    let constraints = tilted_pair(n);
    let targets = vec![disk(n, n, 3.0), rectangle(n, n, 2, 3, 8, 7)];
    let data = build_dataset(&constraints, &targets, 5, 0).unwrap();
    // A mix of labels, with ample surviving samples.
    let idx: Vec<usize> = data.order.iter().copied().filter(|&i| data.rays[i].surviving_count() > 0).take(40).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut field = OccupancyField::new(
        FieldConfig {
            encoding: EncodingConfig::new(2),
            depth: 2,
            width: 16,
        },
        &mut rng,
    );
    // The output layer starts at zero; randomise everything so every path carries signal.
    for w in &mut field.params.data {
        *w = rng.random_range(-1.0..1.0);
    }
    let weights = LossWeights {
        alpha: 2.0,
        theta: 0.02,
        k1: 12,
        k2: 3,
        ..LossWeights::default()
    };
    let h = 1e-6;
    let rel = |num: f64, ana: f64| (num - ana).abs() / (num.abs().max(ana.abs()) + 1e-4);

    for term in Term::ALL {
        let betas = Betas::only(term);
        let out = batch_objective(&field, &constraints, &data.rays, &idx, &[1.0, 1.3], &weights, &betas).unwrap();
        if term == Term::Smoothness {
            assert!(out.diagnostics.surface_points > 0, "no surface points to test");
        }
        for _ in 0..12 {
            let k = rng.random_range(0..field.params.len());
            let mut fp = field.clone();
            let mut fm = field.clone();
            fp.params.data[k] += h;
            fm.params.data[k] -= h;
            let num = (objective_value(&fp, &constraints, &data.rays, &idx, &weights, &betas)
                - objective_value(&fm, &constraints, &data.rays, &idx, &weights, &betas))
                / (2.0 * h);
            assert!(rel(num, out.d_field[k]) < 1e-4, "{term:?} param {k}: fd {num} vs {}", out.d_field[k]);
        }
        for ci in 0..constraints.len() {
            for axis in 0..3 {
                for screen in [false, true] {
                    let bump = |sign: f64| {
                        let mut c = constraints.clone();
                        let mut d = [0.0; 3];
                        d[axis] = sign * h;
                        if screen {
                            c[ci].screen += d.into();
                        } else {
                            c[ci].light += d.into();
                        }
                        objective_value(&field, &c, &data.rays, &idx, &weights, &betas)
                    };
                    let num = (bump(1.0) - bump(-1.0)) / (2.0 * h);
                    let ana = if screen { out.d_screens[ci] } else { out.d_lights[ci] }.to_array()[axis];
                    assert!(
                        rel(num, ana) < 1e-4,
                        "{term:?} constraint {ci} {} axis {axis}: fd {num} vs {ana}",
                        if screen { "screen" } else { "light" }
                    );
                }
            }
        }
    }
}

#[test]
fn frozen_directions_are_bit_identical() {
    let constraints = tilted_pair(12);
    let targets = vec![disk_target(12), square_target(12)];
    let config = TrainConfig {
        optimize_lights: false,
        optimize_screens: false,
        enable_registration: false,
        ..small_config()
    };
    let out = train(&targets, &constraints, &config, &TrainOutputs::default()).unwrap();
    assert_eq!(out.constraints, constraints);
    assert_eq!(out.report.final_lights, out.report.initial_lights);
}

#[test]
fn zero_learning_rates_leave_everything_unchanged() {
    let constraints = tilted_pair(12);
    let targets = vec![disk_target(12), square_target(12)];
    let config = TrainConfig {
        lr_field: 0.0,
        lr_lights: 0.0,
        lr_screens: 0.0,
        enable_registration: false,
        ..small_config()
    };
    let out = train(&targets, &constraints, &config, &TrainOutputs::default()).unwrap();
    assert_eq!(out.field, initial_field(&config, &constraints));
    // Renormalising an already unit vector may move it by an ulp; nothing more.
    for (a, b) in out.constraints.iter().zip(&constraints) {
        assert!((a.light - b.light).norm() < 1e-15 && (a.screen - b.screen).norm() < 1e-15);
    }
    assert!(out.report.epochs.iter().all(|e| e.loss.rendering > 0.0));
}

#[test]
fn training_is_reproducible() {
    let constraints = tilted_pair(12);
    let targets = vec![disk_target(12), square_target(12)];
    let config = TrainConfig {
        registration_period: 1,
        ..small_config()
    };
    let a = train(&targets, &constraints, &config, &TrainOutputs::default()).unwrap();
    let b = train(&targets, &constraints, &config, &TrainOutputs::default()).unwrap();
    assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
    assert_eq!(a.field, b.field);
    assert_eq!(a.report.epochs.len(), config.epochs);
    assert!(a.report.epochs.iter().all(|e| e.registration.is_some()));
}

#[test]
fn directions_stay_unit_and_facing() {
    let constraints = tilted_pair(12);
    let targets = vec![disk_target(12), square_target(12)];
    let config = TrainConfig {
        lr_lights: 0.05,
        lr_screens: 0.05,
        enable_registration: false,
        ..small_config()
    };
    let out = train(&targets, &constraints, &config, &TrainOutputs::default()).unwrap();
    assert_ne!(out.constraints, constraints);
    for c in &out.constraints {
        assert!((c.light.norm() - 1.0).abs() < 1e-9);
        assert!((c.screen.norm() - 1.0).abs() < 1e-9);
        assert!(c.facing() < config.facing_guard);
    }
}

#[test]
fn facing_guard_rolls_back_the_pair() {
    let mut constraints = vec![side(
        Vec3::new(-0.06, 0.0, 0.0) + Vec3::new(0.0, 0.998, 0.0),
        Vec3::new(1.0, 0.0, 0.0),
        8,
    )];
    constraints[0].light = constraints[0].light.normalized();
    let before = constraints.clone();
    let out = BatchOutput {
        loss: LossBreakdown::default(),
        diagnostics: Diagnostics::default(),
        rays: 1,
        samples: 1,
        d_field: vec![],
        // Descending this pushes l toward +x, i.e. toward facing the screen's back.
        d_lights: vec![Vec3::new(-1.0, 0.0, 0.0)],
        d_screens: vec![Vec3::ZERO],
    };
    let config = TrainConfig {
        lr_lights: 0.1,
        ..TrainConfig::default()
    };
    let mut opt = Optimizers {
        field: AdamState::new(0, AdamConfig::default()),
        lights: AdamState::new(3, AdamConfig::with_lr(0.1)),
        screens: AdamState::new(3, AdamConfig::with_lr(0.1)),
    };
    let rejected = step_directions(&mut constraints, &out, &mut opt, &config).unwrap();
    assert_eq!(rejected, 1);
    assert_eq!(constraints, before);
}

#[test]
fn one_batch_when_batch_exceeds_rays() {
    let constraints = tilted_pair(10);
    let targets = vec![disk_target(10), square_target(10)];
    let config = TrainConfig {
        epochs: 1,
        batch_size: 1000,
        enable_registration: false,
        ..small_config()
    };
    let out = train(&targets, &constraints, &config, &TrainOutputs::default()).unwrap();
    assert_eq!(out.report.epochs[0].batches, 1);
}

#[test]
fn outputs_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let outputs = TrainOutputs {
        checkpoint: Some(dir.path().join("ckpt.json")),
        abort_checkpoint: Some(dir.path().join("abort.json")),
        batch_log: Some(dir.path().join("batches.jsonl")),
    };
    let constraints = tilted_pair(10);
    let targets = vec![disk_target(10), square_target(10)];
    let config = TrainConfig {
        enable_registration: false,
        ..small_config()
    };
    let out = train(&targets, &constraints, &config, &outputs).unwrap();
    let ckpt = Checkpoint::load(&dir.path().join("ckpt.json")).unwrap();
    assert_eq!(ckpt.epoch, config.epochs - 1);
    assert_eq!(ckpt.field, out.field);
    assert_eq!(ckpt.constraints, out.constraints);
    let log = std::fs::read_to_string(dir.path().join("batches.jsonl")).unwrap();
    let batches: usize = out.report.epochs.iter().map(|e| e.batches).sum();
    assert_eq!(log.lines().count(), batches);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["epoch"], 0);
    assert!(first["loss"]["rendering"].is_number());
    assert!(!dir.path().join("abort.json").exists());
}

#[test]
fn non_finite_loss_aborts_with_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let outputs = TrainOutputs {
        abort_checkpoint: Some(dir.path().join("abort.json")),
        ..TrainOutputs::default()
    };
    let constraints = tilted_pair(10);
    let targets = vec![disk_target(10), square_target(10)];
    let config = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut field = OccupancyField::new(config.field, &mut rng);
    field.params.data[0] = f64::NAN;
    let err = train_from(field, &targets, &constraints, &config, &outputs, Instant::now()).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { epoch: 0, batch: 0 }));
    assert!(dir.path().join("abort.json").exists());
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { epochs: 0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { registration_period: 0, ..TrainConfig::default() },
        TrainConfig { lr_field: -1.0, ..TrainConfig::default() },
        TrainConfig { facing_guard: 0.1, ..TrainConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
    }
    let flipped = vec![side(Vec3::new(1.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), 8)];
    let t = vec![disk_target(8)];
    assert!(matches!(
        train(&t, &flipped, &small_config(), &TrainOutputs::default()),
        Err(Error::ConstraintViolation { index: 0, .. })
    ));
}

#[test]
fn initial_field_gives_half_occupied_rays() {
    let constraints = tilted_pair(12);
    let field = initial_field(&small_config(), &constraints);
    let f = field.occupancy(Vec3::new(0.1, -0.2, 0.05));
    assert!((crate::losses::ray_occupancy(&[f; 12]) - 0.5).abs() < 1e-12);
    let plain = initial_field(&TrainConfig { initial_ray_occupancy: None, ..small_config() }, &constraints);
    assert_eq!(plain.occupancy(Vec3::ZERO), 0.5);
}

#[test]
fn alpha_modes() {
    let targets = vec![TargetImage::new(rectangle(20, 20, 0, 0, 10, 10)).unwrap(), disk_target(20)];
    let global = rendering_weights(&targets, &TrainConfig::default());
    assert_eq!(global.0.alpha, 4.0);
    assert_eq!(global.1, vec![1.0, 1.0]);
    let per = rendering_weights(&targets, &TrainConfig { alpha_mode: AlphaMode::PerImage, ..TrainConfig::default() });
    assert_eq!(per.0.alpha, 1.0);
    assert_eq!(per.1[0], 4.0);
    assert!(per.1[1] < 4.0);
}
