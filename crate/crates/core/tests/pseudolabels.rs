mod common;

use common::{brute_sigma_k, brute_voronoi, random_image, random_points};
use nucseg::geometry::voronoi_regions;
use nucseg::pseudolabel::{
    build_cluster_features, compute_sigma_k, instance_pseudo_labels, kmeans, voronoi_label,
    voronoi_ridges, ClusterFeatures,
};
use nucseg::{Grid, PipelineConfig, PointSet, RasterImage, SemanticLabel};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn sigma_k_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let (h, w) = (rng.gen_range(9..40), rng.gen_range(9..40));
        let image = random_image(&mut rng, h, w);
        let n = rng.gen_range(1..6);
        let points = random_points(&mut rng, h, w, n);
        let patch = rng.gen_range(9..20);
        let got = compute_sigma_k(&image, &points, patch, 1e-6).unwrap();
        let want = brute_sigma_k(&image, &points, patch, 1e-6);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}

#[test]
fn sigma_k_floor_on_constant_image() {
    let image = RasterImage::filled(20, 20, [40, 90, 200]).unwrap();
    let points = PointSet::from_coords(&[(3, 3), (15, 10)]).unwrap();
    assert_eq!(compute_sigma_k(&image, &points, 9, 0.01).unwrap(), 0.01);
}

#[test]
fn sigma_k_rejects_small_patch() {
    let image = RasterImage::filled(20, 20, [0, 0, 0]).unwrap();
    let points = PointSet::from_coords(&[(3, 3)]).unwrap();
    assert!(compute_sigma_k(&image, &points, 8, 0.01).is_err());
}

#[test]
fn voronoi_label_on_a_row() {
    let points = PointSet::from_coords(&[(0, 0), (0, 10)]).unwrap();
    let labels = voronoi_label(&points, 1, 11).unwrap();
    for c in 0..11 {
        let want = match c {
            0..=2 | 8..=10 => SemanticLabel::Foreground,
            5 => SemanticLabel::Background,
            _ => SemanticLabel::Unlabeled,
        };
        assert_eq!(*labels.get(0, c), want, "col {c}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sigma_k_ignores_point_order(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = random_image(&mut rng, 30, 30);
        let points = random_points(&mut rng, 30, 30, 6);
        let mut shuffled = points.as_slice().to_vec();
        shuffled.shuffle(&mut rng);
        let a = compute_sigma_k(&image, &points, 11, 1e-6).unwrap();
        let b = compute_sigma_k(&image, &PointSet::new(shuffled).unwrap(), 11, 1e-6).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(a > 0.0);
    }

    #[test]
    fn voronoi_background_is_ridges_minus_disks(h in 2usize..40, w in 2usize..40, n in 1usize..12, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = random_points(&mut rng, h, w, n);
        let labels = voronoi_label(&points, h, w).unwrap();
        let regions = brute_voronoi(&points, h, w);
        for r in 0..h {
            for c in 0..w {
                let own = regions[r * w + c];
                let neighbors = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)];
                let ridge = neighbors
                    .iter()
                    .any(|&(rr, cc)| rr < h && cc < w && regions[rr * w + cc] > own);
                let near_point = points.iter().any(|p| {
                    (p.row as i64 - r as i64).pow(2) + (p.col as i64 - c as i64).pow(2) <= 4
                });
                let want = if near_point {
                    SemanticLabel::Foreground
                } else if ridge {
                    SemanticLabel::Background
                } else {
                    SemanticLabel::Unlabeled
                };
                prop_assert_eq!(*labels.get(r, c), want);
            }
        }
    }

    #[test]
    fn ridges_separate_every_region_pair(h in 2usize..40, w in 2usize..40, n in 1usize..12, seed: u64) {
        // Every 4-adjacent pair of different regions has at least one ridge pixel.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = random_points(&mut rng, h, w, n);
        let regions = voronoi_regions(&points, h, w).unwrap();
        let ridges = voronoi_ridges(&regions);
        for r in 0..h {
            for c in 0..w {
                for (rr, cc) in [(r + 1, c), (r, c + 1)] {
                    if rr < h && cc < w && regions.get(r, c) != regions.get(rr, cc) {
                        prop_assert!(*ridges.get(r, c) || *ridges.get(rr, cc));
                    }
                }
            }
        }
    }

    #[test]
    fn instance_ids_stay_inside_one_region(h in 4usize..40, w in 4usize..40, n in 1usize..10, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = random_points(&mut rng, h, w, n);
        let regions = voronoi_regions(&points, h, w).unwrap();
        let prob = Grid::from_fn(h, w, |_, _| rng.gen::<f32>());
        let cfg = PipelineConfig { min_instance_size: 1, ..PipelineConfig::default() };
        let labels = instance_pseudo_labels(&prob, &regions, &cfg).unwrap();
        let mut region_of = vec![None; labels.foreground.count() + 1];
        for i in 0..h * w {
            let id = labels.foreground.as_slice()[i] as usize;
            let p = f64::from(prob.as_slice()[i]);
            prop_assert_eq!(id > 0, p >= cfg.t_fg);
            prop_assert_eq!(labels.background.as_slice()[i], p < cfg.t_bg);
            prop_assert!(!(id > 0 && labels.background.as_slice()[i]));
            if id > 0 {
                let reg = regions.as_slice()[i];
                prop_assert_eq!(*region_of[id].get_or_insert(reg), reg);
            }
        }
    }
}

#[test]
fn small_fragments_are_dropped() {
    let points = PointSet::from_coords(&[(2, 2), (2, 17)]).unwrap();
    let regions = voronoi_regions(&points, 5, 20).unwrap();
    let prob = Grid::from_fn(5, 20, |r, c| {
        if c < 6 || (r == 2 && c == 17) {
            0.9f32
        } else {
            0.1
        }
    });
    let cfg = PipelineConfig {
        min_instance_size: 2,
        ..PipelineConfig::default()
    };
    let labels = instance_pseudo_labels(&prob, &regions, &cfg).unwrap();
    assert_eq!(labels.foreground.count(), 1);
    assert_eq!(labels.foreground.get(2, 17), 0);
}

#[test]
fn color_channels_scale_linearly_in_lambda() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let image = random_image(&mut rng, 24, 24);
    let points = random_points(&mut rng, 24, 24, 4);
    let base = PipelineConfig {
        patch_size: 9,
        ..PipelineConfig::default()
    };
    let a = build_cluster_features(&image, &points, &base).unwrap();
    let b = build_cluster_features(
        &image,
        &points,
        &PipelineConfig {
            lambda: base.lambda * 3.0,
            ..base.clone()
        },
    )
    .unwrap();
    for (x, y) in a.values().iter().zip(b.values()) {
        assert_eq!(x[0], y[0]);
        assert!(x[0] >= 0.0 && x[0] <= base.d_star);
        for k in 1..4 {
            assert!((3.0 * x[k] - y[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn kmeans_partition_survives_color_scaling_when_separated() {
    // Three well separated blobs in all four channels.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let centers = [
        [0.0, 0.0, 0.0, 0.0],
        [10.0, 5.0, 5.0, 5.0],
        [20.0, 10.0, 0.0, 10.0],
    ];
    let values: Vec<[f64; 4]> = (0..600)
        .map(|i| {
            let c = centers[i % 3];
            std::array::from_fn(|k| c[k] + rng.gen_range(-0.5..0.5))
        })
        .collect();
    let features = ClusterFeatures::from_values(20, 30, values).unwrap();
    let scaled = features.scale_color(2.5);
    let a = kmeans(features.values(), 3, 4).unwrap();
    let b = kmeans(scaled.values(), 3, 4).unwrap();
    assert_eq!(a.assignments, b.assignments);
    let truth: Vec<u32> = (0..600).map(|i| (i % 3) as u32).collect();
    for k in 0..3 {
        let members: Vec<u32> = (0..600)
            .filter(|&i| a.assignments[i] == k)
            .map(|i| truth[i])
            .collect();
        assert!(members.windows(2).all(|p| p[0] == p[1]));
    }
}
