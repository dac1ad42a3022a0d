mod common;

use common::{disc_case, random_image};
use ndarray::Array2;
use nucseg::embednet::{forward_semantic, MlpModel, PixelFeaturizer};
use nucseg::losses::{
    discriminative_loss_rows, finite_difference_check, partial_cross_entropy,
    partial_cross_entropy_logits, PixelRole,
};
use nucseg::{Grid, PipelineConfig, RasterImage, SemanticLabel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn disc_total(x: &Array2<f64>, roles: &[PixelRole], cfg: &PipelineConfig) -> f64 {
    discriminative_loss_rows(x.view(), roles, cfg)
        .unwrap()
        .0
        .total
}

#[test]
fn discriminative_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = PipelineConfig::default();
    for _ in 0..50 {
        let (x, roles) = disc_case(&mut rng, &cfg, 1e-3);
        let (_, grad) = discriminative_loss_rows(x.view(), &roles, &cfg).unwrap();
        let shape = x.dim();
        let report = finite_difference_check(
            |flat| {
                disc_total(
                    &Array2::from_shape_vec(shape, flat.to_vec()).unwrap(),
                    &roles,
                    &cfg,
                )
            },
            x.as_slice().unwrap(),
            grad.as_slice().unwrap(),
            1e-6,
        );
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
}

#[test]
fn cross_entropy_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..50 {
        let n = rng.gen_range(1..=100);
        let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let mut targets: Vec<Option<f64>> = (0..n)
            .map(|_| match rng.gen_range(0..3) {
                0 => Some(0.0),
                1 => Some(1.0),
                _ => None,
            })
            .collect();
        targets[0] = Some(1.0);
        let (_, grad) = partial_cross_entropy_logits(&logits, &targets).unwrap();
        let report = finite_difference_check(
            |z| partial_cross_entropy_logits(z, &targets).unwrap().0,
            &logits,
            grad.as_slice().unwrap(),
            1e-6,
        );
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
}

/// Parameters on a 2^-12 grid so `w ± 2^-12` stays exact at single precision.
fn grid_model(sizes: &[usize], rng: &mut impl Rng) -> MlpModel {
    let mut model = MlpModel::new(sizes, rng.gen()).unwrap();
    let params: Vec<f64> = (0..model.param_count())
        .map(|_| (rng.gen_range(-0.9f64..0.9) * 4096.0).round() / 4096.0)
        .collect();
    model.set_params(&params).unwrap();
    model
}

/// True when every hidden pre-activation is at least `margin` from zero.
fn clear_of_relu_kinks(model: &MlpModel, x: &Array2<f64>, margin: f64) -> bool {
    let mut a = x.clone();
    let layers = model.layers();
    for layer in &layers[..layers.len() - 1] {
        let z = a.dot(&layer.weights) + &layer.bias;
        if z.iter().any(|v| v.abs() < margin) {
            return false;
        }
        a = z.mapv(|v| v.max(0.0));
    }
    true
}

#[test]
fn mlp_backward_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let eps = 1.0 / 4096.0;
    let mut checked = 0;
    for sizes in [
        vec![3, 1],
        vec![4, 5, 2],
        vec![5, 6, 4, 3],
        vec![77, 16, 16, 1],
    ] {
        let mut accepted = 0;
        while accepted < 5 {
            let model = grid_model(&sizes, &mut rng);
            let n = rng.gen_range(1..=6);
            let x = Array2::from_shape_fn((n, sizes[0]), |_| rng.gen_range(0.0..1.0));
            if !clear_of_relu_kinks(&model, &x, 0.05) {
                continue;
            }
            accepted += 1;
            let weights =
                Array2::from_shape_fn((n, *sizes.last().unwrap()), |_| rng.gen_range(-1.0..1.0));
            // Smooth scalar head: sum of w * out + 0.5 * out^2.
            let head = |out: &Array2<f64>| (out * &weights + out.mapv(|o| 0.5 * o * o)).sum();
            let cache = model.forward(x.view()).unwrap();
            let out_grad = &weights + &cache.output;
            let grads = model.backward(&cache, out_grad.view()).unwrap();

            let params = model.flatten_params();
            let report = finite_difference_check(
                |p| {
                    let mut m = model.clone();
                    m.set_params(p).unwrap();
                    head(&m.predict(x.view()).unwrap())
                },
                &params,
                &grads.flatten(),
                eps,
            );
            assert!(report.max_relative_error < 1e-4, "{sizes:?}: {report:?}");

            let report = finite_difference_check(
                |flat| {
                    head(
                        &model
                            .predict(
                                Array2::from_shape_vec(x.dim(), flat.to_vec())
                                    .unwrap()
                                    .view(),
                            )
                            .unwrap(),
                    )
                },
                x.as_slice().unwrap(),
                &grads.input.iter().copied().collect::<Vec<_>>(),
                1e-6,
            );
            assert!(
                report.max_relative_error < 1e-4,
                "{sizes:?} input: {report:?}"
            );
            checked += 1;
        }
    }
    assert_eq!(checked, 20);
}

#[test]
fn probability_gradient_is_taken_at_the_logit() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let codes = [
        SemanticLabel::Background,
        SemanticLabel::Foreground,
        SemanticLabel::Unlabeled,
    ];
    let labels = Grid::from_fn(6, 7, |_, _| codes[rng.gen_range(0..3)]);
    let logits: Vec<f64> = (0..42).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let prob = Grid::from_vec(
        6,
        7,
        logits
            .iter()
            .map(|&z| nucseg::embednet::sigmoid(z) as f32)
            .collect(),
    )
    .unwrap();
    let targets: Vec<Option<f64>> = labels.as_slice().iter().map(|l| l.target()).collect();
    let (_, from_logits) = partial_cross_entropy_logits(&logits, &targets).unwrap();
    let (_, from_prob) = partial_cross_entropy(&prob, &labels).unwrap();
    for (a, b) in from_logits.iter().zip(from_prob.as_slice()) {
        assert!((a - b).abs() < 1e-6);
    }
}

fn random_roles(rng: &mut impl Rng, n: usize, n_inst: u32) -> Vec<PixelRole> {
    (0..n)
        .map(|_| match rng.gen_range(0..=n_inst + 1) {
            0 => PixelRole::Ignore,
            1 => PixelRole::Background,
            k => PixelRole::Instance(k - 1),
        })
        .collect()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_ignores_instance_ids(seed: u64, n in 2usize..60, d in 1usize..5, n_inst in 1u32..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = PipelineConfig::default();
        let roles = random_roles(&mut rng, n, n_inst);
        let x = Array2::from_shape_fn((n, d), |_| rng.gen_range(-3.0..3.0));
        let Ok((a, _)) = discriminative_loss_rows(x.view(), &roles, &cfg) else { return Ok(()); };
        let offset = rng.gen_range(1..1000u32);
        let relabeled: Vec<PixelRole> = roles
            .iter()
            .map(|r| match r {
                PixelRole::Instance(k) => PixelRole::Instance((n_inst + 1 - k) * 7 + offset),
                other => *other,
            })
            .collect();
        let (b, _) = discriminative_loss_rows(x.view(), &relabeled, &cfg).unwrap();
        prop_assert!(close(a.total, b.total), "{} vs {}", a.total, b.total);
    }

    #[test]
    fn translation_changes_only_the_regularizer(seed: u64, n in 2usize..60, d in 1usize..5, n_inst in 1u32..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = PipelineConfig::default();
        let roles = random_roles(&mut rng, n, n_inst);
        let x = Array2::from_shape_fn((n, d), |_| rng.gen_range(-3.0..3.0));
        let Ok((a, _)) = discriminative_loss_rows(x.view(), &roles, &cfg) else { return Ok(()); };
        let shift: Vec<f64> = (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let moved = Array2::from_shape_fn((n, d), |(i, j)| x[[i, j]] + shift[j]);
        let (b, _) = discriminative_loss_rows(moved.view(), &roles, &cfg).unwrap();
        prop_assert!(close(a.intra, b.intra));
        prop_assert!(close(a.inter, b.inter));
    }

    #[test]
    fn loss_parts_are_nonnegative(seed: u64, n in 1usize..60, d in 1usize..5, n_inst in 1u32..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = PipelineConfig::default();
        let roles = random_roles(&mut rng, n, n_inst);
        let x = Array2::from_shape_fn((n, d), |_| rng.gen_range(-3.0..3.0));
        if let Ok((b, grad)) = discriminative_loss_rows(x.view(), &roles, &cfg) {
            prop_assert!(b.intra >= 0.0 && b.inter >= 0.0 && b.total >= 0.0);
            for (row, role) in grad.rows().into_iter().zip(&roles) {
                if *role == PixelRole::Ignore {
                    prop_assert!(row.iter().all(|&g| g == 0.0));
                }
            }
        }
    }

    #[test]
    fn tight_separated_instances_cost_nothing(seed: u64, d in 1usize..5, n_inst in 1usize..5, with_bg: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = PipelineConfig { gamma: 0.0, ..PipelineConfig::default() };
        let groups = n_inst + usize::from(with_bg);
        let mut rows = Vec::new();
        let mut roles = Vec::new();
        for g in 0..groups {
            // Centers on one axis, delta_inter + 0.5 apart; members within delta_intra / 2.
            let mut center = vec![0.0; d];
            center[0] = g as f64 * (cfg.delta_inter + 0.5);
            for _ in 0..rng.gen_range(1..8) {
                rows.extend(center.iter().map(|c| c + rng.gen_range(-0.1..0.1) * cfg.delta_intra / d as f64));
                roles.push(if g < n_inst { PixelRole::Instance(g as u32 + 1) } else { PixelRole::Background });
            }
        }
        let x = Array2::from_shape_vec((roles.len(), d), rows).unwrap();
        let (b, grad) = discriminative_loss_rows(x.view(), &roles, &cfg).unwrap();
        prop_assert_eq!(b.total, 0.0);
        prop_assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn cross_entropy_ignores_unlabeled_logits(seed: u64, n in 2usize..80) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut targets: Vec<Option<f64>> = (0..n)
            .map(|_| if rng.gen_bool(0.5) { Some(f64::from(rng.gen_range(0..2u8))) } else { None })
            .collect();
        targets[0] = Some(0.0);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let b: Vec<f64> = a
            .iter()
            .zip(&targets)
            .map(|(&z, t)| if t.is_some() { z } else { rng.gen_range(-50.0..50.0) })
            .collect();
        let (la, ga) = partial_cross_entropy_logits(&a, &targets).unwrap();
        let (lb, gb) = partial_cross_entropy_logits(&b, &targets).unwrap();
        prop_assert_eq!(la, lb);
        prop_assert_eq!(ga, gb);
    }

    #[test]
    fn semantic_output_is_translation_consistent(seed: u64, dr in 0usize..6, dc in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let featurizer = PixelFeaturizer { patch_radius: 2, dilation: 1, include_coords: false };
        let model = MlpModel::new(&[featurizer.feature_len(), 8, 1], rng.gen()).unwrap();
        let (h, w) = (20, 18);
        let image = random_image(&mut rng, h, w);
        let mut shifted = RasterImage::filled(h + dr, w + dc, [0, 0, 0]).unwrap();
        for r in 0..h {
            for c in 0..w {
                shifted.set_pixel(r + dr, c + dc, image.pixel(r, c));
            }
        }
        let run = |img: &RasterImage| {
            let f = featurizer.featurize(img);
            forward_semantic(&model, f.view(), img.height(), img.width()).unwrap()
        };
        let (a, b) = (run(&image), run(&shifted));
        for r in 2..h - 2 {
            for c in 2..w - 2 {
                prop_assert_eq!(a.get(r, c).to_bits(), b.get(r + dr, c + dc).to_bits());
                prop_assert!(*a.get(r, c) > 0.0 && *a.get(r, c) < 1.0);
            }
        }
    }

    #[test]
    fn forward_is_pure(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = MlpModel::new(&[5, 7, 3], rng.gen()).unwrap();
        let x = Array2::from_shape_fn((9, 5), |_| rng.gen_range(-1.0..1.0));
        let a = model.predict(x.view()).unwrap();
        let b = model.forward(x.view()).unwrap().output;
        prop_assert_eq!(a, b);
    }
}

#[test]
fn hand_case_total() {
    // One foreground instance at 0 and background at 1 in D = 1:
    // intra 0; inter 2 * 1 * (3 - 1)^2 / (2 * 1) = 4; reg 0.001 / 2 * (0 + 1).
    let cfg = PipelineConfig {
        delta_intra: 0.5,
        delta_inter: 3.0,
        alpha: 1.0,
        gamma: 0.001,
        ..PipelineConfig::default()
    };
    let x = Array2::from_shape_vec((2, 1), vec![0.0, 1.0]).unwrap();
    let (b, _) = discriminative_loss_rows(
        x.view(),
        &[PixelRole::Instance(1), PixelRole::Background],
        &cfg,
    )
    .unwrap();
    assert!((b.total - 4.0005).abs() < 1e-9);
}
