//! Inference: candidate mask, mean-shift over the selected embeddings,
//! background-cluster removal and instance finalization.
//!
//! Both mean-shift routes share one contract. Flat kernel, window
//! `dist2 <= bandwidth^2`, window means summed in ascending input order, stop
//! when the shift drops below `tol` or after `max_iter` iterations. Converged
//! modes are merged in seed order: a mode closer than `bandwidth / 2` to an
//! already kept mode is dropped. Every input is assigned to its nearest kept
//! mode (lowest mode index on ties).
//!
//! The fast route answers window queries with a KD-tree and memoizes
//! trajectories by the exact bit pattern of the current position. Both are
//! exact, so its output is bit-identical to the reference.

use std::collections::{HashMap, HashSet};

use ndarray::{Array2, ArrayView2};

use crate::config::PipelineConfig;
use crate::embednet::{embed_rows, forward_semantic, MlpModel, PixelFeaturizer};
use crate::error::{Error, Result};
use crate::geometry::{label_regions, Connectivity};
use crate::kdtree::{dist2, KdTree};
use crate::par::Execution;
use crate::raster::{Grid, InstanceLabelMap, Mask, ProbabilityMap, RasterImage};

const SEED_CHUNK: usize = 256;
/// Bitmap words kept by one chunk's window-mean cache before it is reset.
const MEAN_CACHE_WORDS: usize = 1 << 21;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanShiftParams {
    pub bandwidth: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl MeanShiftParams {
    /// `tol = 1e-3 * bandwidth`, `max_iter = 300`.
    pub fn new(bandwidth: f64) -> Self {
        Self {
            bandwidth,
            tol: 1e-3 * bandwidth,
            max_iter: 300,
        }
    }

    pub fn from_config(cfg: &PipelineConfig) -> Self {
        Self {
            bandwidth: cfg.bandwidth,
            tol: cfg.meanshift_tol(),
            max_iter: cfg.meanshift_max_iter,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "bandwidth must be positive, got {}",
                self.bandwidth
            )));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "tol must be >= 0, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

/// Options of the accelerated route that do not change its contract, except
/// `bin_seeding`, which seeds one point per `bandwidth / 2` grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FastOptions {
    pub execution: Execution,
    pub bin_seeding: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanShiftResult {
    /// Mode index per input vector.
    pub assignments: Vec<usize>,
    pub modes: Vec<Vec<f64>>,
    /// Iterations spent per seed (per input vector unless bin seeding).
    pub iterations: Vec<usize>,
}

impl MeanShiftResult {
    pub fn cluster_count(&self) -> usize {
        self.modes.len()
    }
}

/// Row-major copy of the points, validated.
fn flatten(points: ArrayView2<f64>) -> Result<(Vec<f64>, usize)> {
    if points.nrows() == 0 {
        return Err(Error::EmptyInput("mean-shift needs at least one vector"));
    }
    if points.ncols() == 0 {
        return Err(Error::dims("at least one dimension", "0"));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::OutOfRange("non-finite embedding value".into()));
    }
    Ok((points.iter().copied().collect(), points.ncols()))
}

#[derive(Debug, Clone)]
struct Trajectory {
    mode: Vec<f64>,
    iterations: usize,
}

/// Mean of the window rows (ascending indices) into `out`; false when empty.
fn window_mean(data: &[f64], dim: usize, window: &[usize], out: &mut [f64]) -> bool {
    if window.is_empty() {
        return false;
    }
    out.fill(0.0);
    for &i in window {
        for (o, v) in out.iter_mut().zip(&data[i * dim..(i + 1) * dim]) {
            *o += v;
        }
    }
    let n = window.len() as f64;
    for o in out.iter_mut() {
        *o /= n;
    }
    true
}

/// Runs one seed. `step` writes the mean of the window around its first
/// argument into the second and returns false for an empty window. `memo`
/// (if given) maps exact positions to their remaining trajectory.
fn shift_seed(
    start: &[f64],
    params: &MeanShiftParams,
    mut step: impl FnMut(&[f64], &mut [f64]) -> bool,
    mut memo: Option<&mut HashMap<Vec<u64>, Trajectory>>,
) -> Trajectory {
    let mut x = start.to_vec();
    let mut next = vec![0.0; x.len()];
    let mut visited: Vec<Vec<u64>> = Vec::new();
    let mut iterations = 0;
    let mut natural = false;
    while iterations < params.max_iter {
        if let Some(memo) = memo.as_deref() {
            let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
            if let Some(t) = memo.get(&key) {
                if iterations + t.iterations <= params.max_iter {
                    x.clone_from(&t.mode);
                    iterations += t.iterations;
                    natural = true;
                    break;
                }
            }
            visited.push(key);
        }
        iterations += 1;
        if !step(&x, &mut next) {
            natural = true;
            break;
        }
        let shift = dist2(&next, &x).sqrt();
        std::mem::swap(&mut x, &mut next);
        if shift < params.tol {
            natural = true;
            break;
        }
    }
    if natural {
        if let Some(memo) = memo.as_deref_mut() {
            // visited[j] was reached after j iterations of this seed.
            for (j, key) in visited.into_iter().enumerate() {
                memo.entry(key).or_insert_with(|| Trajectory {
                    mode: x.clone(),
                    iterations: iterations - j,
                });
            }
        }
    }
    Trajectory {
        mode: x,
        iterations,
    }
}

/// Keeps modes in seed order, dropping any closer than `bandwidth / 2` to a
/// kept one.
fn merge_modes(converged: &[Vec<f64>], bandwidth: f64) -> Vec<Vec<f64>> {
    let half = bandwidth / 2.0;
    let half2 = half * half;
    let mut seen = HashSet::new();
    let mut kept: Vec<Vec<f64>> = Vec::new();
    for m in converged {
        let key: Vec<u64> = m.iter().map(|v| v.to_bits()).collect();
        if !seen.insert(key) {
            continue;
        }
        if kept.iter().all(|k| dist2(k, m) >= half2) {
            kept.push(m.clone());
        }
    }
    kept
}

fn nearest_mode(p: &[f64], modes: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, m) in modes.iter().enumerate() {
        let d = dist2(p, m);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

fn assign(data: &[f64], dim: usize, modes: &[Vec<f64>], exec: Execution) -> Vec<usize> {
    let n = data.len() / dim;
    exec.map_chunks(n, 4096, |r| {
        r.map(|i| nearest_mode(&data[i * dim..(i + 1) * dim], modes))
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Brute-force mean-shift: every input is a seed and every window is a full
/// linear scan.
pub fn mean_shift_reference(
    points: ArrayView2<f64>,
    params: &MeanShiftParams,
) -> Result<MeanShiftResult> {
    params.validate()?;
    let (data, dim) = flatten(points)?;
    let n = data.len() / dim;
    let r2 = params.bandwidth * params.bandwidth;
    let mut converged = Vec::with_capacity(n);
    let mut iterations = Vec::with_capacity(n);
    for s in 0..n {
        let mut window = Vec::new();
        let t = shift_seed(
            &data[s * dim..(s + 1) * dim],
            params,
            |x, next| {
                window.clear();
                for i in 0..n {
                    if dist2(x, &data[i * dim..(i + 1) * dim]) <= r2 {
                        window.push(i);
                    }
                }
                window_mean(&data, dim, &window, next)
            },
            None,
        );
        converged.push(t.mode);
        iterations.push(t.iterations);
    }
    let modes = merge_modes(&converged, params.bandwidth);
    let assignments = assign(&data, dim, &modes, Execution::Sequential);
    Ok(MeanShiftResult {
        assignments,
        modes,
        iterations,
    })
}

/// Appends the set bits in ascending order and clears them.
fn drain_bits(bits: &mut [u64], out: &mut Vec<usize>) {
    for (w, word) in bits.iter_mut().enumerate() {
        let mut v = *word;
        while v != 0 {
            out.push(w * 64 + v.trailing_zeros() as usize);
            v &= v - 1;
        }
        *word = 0;
    }
}

/// First input index per occupied `bandwidth / 2` cell, ascending.
fn bin_seeds(data: &[f64], dim: usize, bandwidth: f64) -> Vec<usize> {
    let cell = bandwidth / 2.0;
    let mut seen = HashSet::new();
    let mut seeds = Vec::new();
    for i in 0..data.len() / dim {
        let key: Vec<i64> = data[i * dim..(i + 1) * dim]
            .iter()
            .map(|v| (v / cell).floor() as i64)
            .collect();
        if seen.insert(key) {
            seeds.push(i);
        }
    }
    seeds
}

/// KD-tree accelerated mean-shift with the reference contract.
pub fn mean_shift_fast(
    points: ArrayView2<f64>,
    params: &MeanShiftParams,
) -> Result<MeanShiftResult> {
    mean_shift_fast_with(points, params, FastOptions::default())
}

pub fn mean_shift_fast_with(
    points: ArrayView2<f64>,
    params: &MeanShiftParams,
    options: FastOptions,
) -> Result<MeanShiftResult> {
    params.validate()?;
    let (data, dim) = flatten(points)?;
    let n = data.len() / dim;
    let r2 = params.bandwidth * params.bandwidth;
    let tree = KdTree::new(&data, dim);
    let seeds: Vec<usize> = if options.bin_seeding {
        bin_seeds(&data, dim, params.bandwidth)
    } else {
        (0..n).collect()
    };

    let chunks = options
        .execution
        .map_chunks(seeds.len(), SEED_CHUNK, |range| {
            let mut memo = HashMap::new();
            // Window bitmap -> window mean; many seeds share a window.
            let mut means: HashMap<Vec<u64>, Option<Vec<f64>>> = HashMap::new();
            let mut bits = vec![0u64; n.div_ceil(64)];
            let mean_cache_limit = (MEAN_CACHE_WORDS / bits.len()).max(64);
            let mut window = Vec::new();
            range
                .map(|k| {
                    let s = seeds[k];
                    shift_seed(
                        &data[s * dim..(s + 1) * dim],
                        params,
                        |x, next| {
                            tree.within_bits(x, r2, &mut bits);
                            if let Some(mean) = means.get(&bits) {
                                bits.fill(0);
                                return match mean {
                                    Some(m) => {
                                        next.copy_from_slice(m);
                                        true
                                    }
                                    None => false,
                                };
                            }
                            let key = bits.clone();
                            window.clear();
                            drain_bits(&mut bits, &mut window);
                            let found = window_mean(&data, dim, &window, next);
                            if means.len() >= mean_cache_limit {
                                means.clear();
                            }
                            means.insert(key, found.then(|| next.to_vec()));
                            found
                        },
                        Some(&mut memo),
                    )
                })
                .collect::<Vec<_>>()
        });
    let mut converged = Vec::with_capacity(seeds.len());
    let mut iterations = Vec::with_capacity(seeds.len());
    for t in chunks.into_iter().flatten() {
        converged.push(t.mode);
        iterations.push(t.iterations);
    }
    let modes = merge_modes(&converged, params.bandwidth);
    let assignments = assign(&data, dim, &modes, options.execution);
    Ok(MeanShiftResult {
        assignments,
        modes,
        iterations,
    })
}

/// Gaussian blobs with well separated centers, for benchmarking.
pub fn blob_scene(n_points: usize, n_blobs: usize, dim: usize, seed: u64) -> Array2<f64> {
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let side = 12.0 * (n_blobs.max(1) as f64).powf(1.0 / dim as f64).max(1.0);
    let mut centers: Vec<Vec<f64>> = Vec::new();
    while centers.len() < n_blobs.max(1) {
        let c: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.0..side)).collect();
        if centers.iter().all(|o| dist2(o, &c) >= 64.0) {
            centers.push(c);
        }
    }
    let noise = Normal::new(0.0, 0.1).expect("valid std");
    Array2::from_shape_fn((n_points, dim), |(i, d)| {
        centers[i % centers.len()][d] + noise.sample(&mut rng)
    })
}

/// Wall-clock comparison of the two mean-shift routes.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BenchReport {
    pub points: usize,
    pub bandwidth: f64,
    pub reference_ms: f64,
    pub fast_ms: f64,
    pub speedup: f64,
    pub identical: bool,
}

pub fn bench_mean_shift(
    points: ArrayView2<f64>,
    params: &MeanShiftParams,
    exec: Execution,
) -> Result<BenchReport> {
    let t = std::time::Instant::now();
    let reference = mean_shift_reference(points, params)?;
    let reference_ms = t.elapsed().as_secs_f64() * 1e3;
    let t = std::time::Instant::now();
    let fast = mean_shift_fast_with(
        points,
        params,
        FastOptions {
            execution: exec,
            bin_seeding: false,
        },
    )?;
    let fast_ms = t.elapsed().as_secs_f64() * 1e3;
    Ok(BenchReport {
        points: points.nrows(),
        bandwidth: params.bandwidth,
        reference_ms,
        fast_ms,
        speedup: reference_ms / fast_ms.max(1e-9),
        identical: reference.assignments == fast.assignments,
    })
}

/// Pixels with `prob >= t_0`.
pub fn foreground_candidates(prob: &ProbabilityMap, t_0: f64) -> Mask {
    prob.map(|&p| f64::from(p) >= t_0)
}

/// Writes `assignments` (one per mask pixel in raster order) into a map where
/// 0 is outside the mask and cluster `k` is stored as `k + 1`.
pub fn cluster_map(mask: &Mask, assignments: &[usize]) -> Result<Grid<u32>> {
    let selected = mask.as_slice().iter().filter(|&&m| m).count();
    if selected != assignments.len() {
        return Err(Error::dims(
            format!("{selected} assignments"),
            assignments.len(),
        ));
    }
    let mut it = assignments.iter();
    Ok(mask.map(|&m| if m { *it.next().unwrap() as u32 + 1 } else { 0 }))
}

/// Drops the cluster with the most 8-connected components (ties: more pixels,
/// then lower index). Returns the surviving map and the removed cluster index.
pub fn remove_background_cluster(clusters: &Grid<u32>) -> Result<(Grid<u32>, usize)> {
    let n_clusters = clusters.as_slice().iter().copied().max().unwrap_or(0) as usize;
    if n_clusters == 0 {
        return Err(Error::EmptyInput(
            "no clusters to remove the background from",
        ));
    }
    let components = label_regions(clusters, Connectivity::Eight);
    let mut comp_count = vec![0usize; n_clusters];
    let mut pixels = vec![0usize; n_clusters];
    let mut comp_cluster = vec![0u32; components.count()];
    for (&c, &comp) in clusters.as_slice().iter().zip(components.as_slice()) {
        if c > 0 {
            pixels[c as usize - 1] += 1;
            comp_cluster[comp as usize - 1] = c;
        }
    }
    for &c in &comp_cluster {
        comp_count[c as usize - 1] += 1;
    }
    let removed = (0..n_clusters)
        .filter(|&k| pixels[k] > 0)
        .max_by(|&a, &b| {
            comp_count[a]
                .cmp(&comp_count[b])
                .then(pixels[a].cmp(&pixels[b]))
                .then(b.cmp(&a))
        })
        .ok_or(Error::EmptyInput(
            "no clusters to remove the background from",
        ))?;
    let tag = removed as u32 + 1;
    Ok((clusters.map(|&c| if c == tag { 0 } else { c }), removed))
}

/// Splits every cluster into 8-connected components, drops components below
/// `min_instance_size` and numbers the rest in raster order.
pub fn finalize_instances(clusters: &Grid<u32>, min_instance_size: usize) -> InstanceLabelMap {
    let components = label_regions(clusters, Connectivity::Eight);
    let areas = components.areas();
    let kept = components.ids().map(|&id| {
        if id > 0 && areas[id as usize - 1] >= min_instance_size {
            id
        } else {
            0
        }
    });
    InstanceLabelMap::from_raw(kept).canonical()
}

/// Mean-shift grouping of precomputed embeddings (rows in raster order over
/// the whole image) under a candidate mask.
pub fn group_embeddings(
    embeddings: ArrayView2<f64>,
    mask: &Mask,
    cfg: &PipelineConfig,
    exec: Execution,
) -> Result<InstanceLabelMap> {
    let (h, w) = mask.shape();
    if embeddings.nrows() != h * w {
        return Err(Error::dims(format!("{} rows", h * w), embeddings.nrows()));
    }
    let selected: Vec<usize> = (0..h * w).filter(|&i| mask.as_slice()[i]).collect();
    if selected.is_empty() {
        return Ok(InstanceLabelMap::empty(h, w));
    }
    let rows = embeddings.select(ndarray::Axis(0), &selected);
    let ms = mean_shift_fast_with(
        rows.view(),
        &MeanShiftParams::from_config(cfg),
        FastOptions {
            execution: exec,
            bin_seeding: false,
        },
    )?;
    let clusters = cluster_map(mask, &ms.assignments)?;
    let (surviving, _) = remove_background_cluster(&clusters)?;
    Ok(finalize_instances(&surviving, cfg.min_instance_size))
}

/// Full inference from an image and the two trained models.
pub fn infer(
    image: &RasterImage,
    spn: &MlpModel,
    ien: &MlpModel,
    cfg: &PipelineConfig,
) -> Result<InstanceLabelMap> {
    let featurizer = PixelFeaturizer::from_config(cfg);
    let features = featurizer.featurize(image);
    let (h, w) = image.shape();
    let prob = forward_semantic(spn, features.view(), h, w)?;
    infer_with_probability(&features, &prob, ien, cfg)
}

/// Inference when the probability map is already known.
pub fn infer_with_probability(
    features: &Array2<f64>,
    prob: &ProbabilityMap,
    ien: &MlpModel,
    cfg: &PipelineConfig,
) -> Result<InstanceLabelMap> {
    let (h, w) = prob.shape();
    let mask = foreground_candidates(prob, cfg.t_0);
    if !mask.as_slice().iter().any(|&m| m) {
        return Ok(InstanceLabelMap::empty(h, w));
    }
    let selected: Vec<usize> = (0..h * w).filter(|&i| mask.as_slice()[i]).collect();
    let rows = features.select(ndarray::Axis(0), &selected);
    let emb = embed_rows(ien, rows.view())?;
    let ms = mean_shift_fast(emb.view(), &MeanShiftParams::from_config(cfg))?;
    let clusters = cluster_map(&mask, &ms.assignments)?;
    let (surviving, _) = remove_background_cluster(&clusters)?;
    Ok(finalize_instances(&surviving, cfg.min_instance_size))
}

/// Baseline without embeddings: connected components of `prob >= t_fg`.
pub fn connected_component_baseline(
    prob: &ProbabilityMap,
    cfg: &PipelineConfig,
) -> InstanceLabelMap {
    let mask = prob.map(|&p| f64::from(p) >= cfg.t_fg);
    let cc = crate::geometry::connected_components(&mask, Connectivity::Eight);
    finalize_instances(&cc.ids().clone(), cfg.min_instance_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn both(points: ArrayView2<f64>, bw: f64) -> MeanShiftResult {
        let p = MeanShiftParams::new(bw);
        let r = mean_shift_reference(points, &p).unwrap();
        let f = mean_shift_fast(points, &p).unwrap();
        assert_eq!(r, f);
        r
    }

    #[test]
    fn identical_vectors() {
        let pts = Array2::from_elem((20, 3), 0.7);
        let r = both(pts.view(), 1.5);
        assert_eq!(r.cluster_count(), 1);
        assert!(r.iterations.iter().all(|&i| i == 1));
    }

    #[test]
    fn two_pairs_one_dim() {
        let pts = array![[0.0], [0.1], [10.0], [10.1]];
        let r = both(pts.view(), 1.5);
        assert_eq!(r.assignments, vec![0, 0, 1, 1]);
        assert!((r.modes[0][0] - 0.05).abs() < 1e-12);
        assert!((r.modes[1][0] - 10.05).abs() < 1e-12);
    }

    #[test]
    fn single_vector() {
        let pts = array![[1.0, -2.0]];
        let r = both(pts.view(), 0.5);
        assert_eq!(r.modes, vec![vec![1.0, -2.0]]);
        assert_eq!(r.assignments, vec![0]);
    }

    #[test]
    fn empty_input_errors_identically() {
        let pts = Array2::<f64>::zeros((0, 2));
        let p = MeanShiftParams::new(1.0);
        let a = mean_shift_reference(pts.view(), &p)
            .unwrap_err()
            .to_string();
        let b = mean_shift_fast(pts.view(), &p).unwrap_err().to_string();
        assert_eq!(a, b);
    }

    #[test]
    fn max_iter_is_respected() {
        // A long chain drifts slowly; one iteration only.
        let pts = Array2::from_shape_fn((50, 1), |(i, _)| (i * i) as f64 * 0.01);
        let p = MeanShiftParams {
            max_iter: 1,
            ..MeanShiftParams::new(1.0)
        };
        let r = mean_shift_reference(pts.view(), &p).unwrap();
        let f = mean_shift_fast(pts.view(), &p).unwrap();
        assert_eq!(r, f);
        assert!(r.iterations.iter().all(|&i| i == 1));
    }

    #[test]
    fn candidates_threshold() {
        let prob = Grid::from_vec(1, 2, vec![0.2f32, 0.4]).unwrap();
        assert_eq!(foreground_candidates(&prob, 0.3).as_slice(), &[false, true]);
        assert!(foreground_candidates(&prob, 0.0)
            .as_slice()
            .iter()
            .all(|&m| m));
        assert!(!foreground_candidates(&prob, 0.41)
            .as_slice()
            .iter()
            .any(|&m| m));
    }

    #[test]
    fn scattered_cluster_is_background() {
        // Cluster 1: compact 5x5 block. Cluster 2: 50 isolated pixels.
        let mut g = Grid::filled(30, 30, 0u32);
        for r in 0..5 {
            for c in 0..5 {
                g.set(r, c, 1);
            }
        }
        let mut placed = 0;
        'outer: for r in (8..30).step_by(2) {
            for c in (0..30).step_by(2) {
                g.set(r, c, 2);
                placed += 1;
                if placed == 50 {
                    break 'outer;
                }
            }
        }
        let (out, removed) = remove_background_cluster(&g).unwrap();
        assert_eq!(removed, 1);
        assert_eq!(out.as_slice().iter().filter(|&&v| v == 2).count(), 0);
        assert_eq!(out.as_slice().iter().filter(|&&v| v == 1).count(), 25);
    }

    #[test]
    fn single_cluster_is_removed() {
        let g = Grid::filled(4, 4, 1u32);
        let (out, removed) = remove_background_cluster(&g).unwrap();
        assert_eq!(removed, 0);
        assert!(out.as_slice().iter().all(|&v| v == 0));
        assert_eq!(finalize_instances(&out, 1).count(), 0);
    }

    #[test]
    fn tie_removes_larger_cluster() {
        let mut g = Grid::filled(20, 20, 0u32);
        for i in 0..100 {
            g.set(i / 10, i % 10, 1);
        }
        for i in 0..40 {
            g.set(12 + i / 10, i % 10, 2);
        }
        let (_, removed) = remove_background_cluster(&g).unwrap();
        assert_eq!(removed, 0);
        let swapped = g.map(|&v| match v {
            1 => 2,
            2 => 1,
            v => v,
        });
        let (_, removed) = remove_background_cluster(&swapped).unwrap();
        assert_eq!(removed, 1);
        let mut equal = Grid::filled(20, 20, 0u32);
        for i in 0..40 {
            equal.set(i / 10, i % 10, 2);
            equal.set(12 + i / 10, i % 10, 1);
        }
        let (_, removed) = remove_background_cluster(&equal).unwrap();
        assert_eq!(removed, 0);
    }

    #[test]
    fn zero_clusters_error() {
        assert!(remove_background_cluster(&Grid::filled(3, 3, 0u32)).is_err());
    }

    #[test]
    fn finalize_splits_and_filters() {
        let mut g = Grid::filled(10, 20, 0u32);
        for r in 0..5 {
            for c in 0..5 {
                g.set(r, c, 1);
                g.set(r, c + 10, 1);
            }
        }
        let out = finalize_instances(&g, 16);
        assert_eq!(out.count(), 2);
        let mut small = Grid::filled(10, 10, 0u32);
        for c in 0..5 {
            small.set(0, c, 3);
        }
        assert_eq!(finalize_instances(&small, 16).count(), 0);
        assert_eq!(finalize_instances(&Grid::filled(0, 0, 0), 16).count(), 0);
    }

    #[test]
    fn zero_probability_gives_empty_map() {
        let cfg = PipelineConfig {
            hidden_sizes: vec![4],
            ..PipelineConfig::default()
        };
        let img = RasterImage::filled(8, 8, [1, 2, 3]).unwrap();
        let fz = PixelFeaturizer::from_config(&cfg);
        let ien = MlpModel::new(&[fz.feature_len(), 4, 16], 1).unwrap();
        let prob = Grid::filled(8, 8, 0.0f32);
        let out = infer_with_probability(&fz.featurize(&img), &prob, &ien, &cfg).unwrap();
        assert_eq!(out.count(), 0);
        assert_eq!(out.shape(), (8, 8));
    }
}
