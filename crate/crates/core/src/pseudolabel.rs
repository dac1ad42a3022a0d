//! Pseudo-labels from point annotations.
//!
//! Stage one supervision comes from two partial label maps: a cluster label
//! (k-means over truncated distance and image-normalized color) and a Voronoi
//! label (ridges as background, dilated points as foreground). Stage two
//! supervision splits the thresholded semantic prediction along Voronoi
//! regions into per-nucleus instances plus one background instance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::geometry::{truncated_distance_map, voronoi_regions};
use crate::par::Execution;
use crate::raster::{
    Grid, InstanceLabelMap, Mask, PointSet, ProbabilityMap, RasterImage, RegionMap, SemanticLabel,
    SemanticLabelMap,
};

/// Side of the neighborhood compared against each patch pixel.
pub const SIGMA_NEIGHBORHOOD: usize = 9;
/// Radius of the foreground disk drawn around each point in the Voronoi label.
pub const POINT_DILATION_RADIUS: usize = 2;

const KMEANS_TOL: f64 = 1e-6;
const KMEANS_MAX_ITER: usize = 300;
const KMEANS_CHUNK: usize = 4096;

/// Compensated (Neumaier) accumulator.
#[derive(Debug, Clone, Copy, Default)]
struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    #[inline]
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn merge(&mut self, other: KahanSum) {
        self.add(other.sum);
        self.add(other.comp);
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Inclusive-exclusive bounds of a window of `size` centered at `center`,
/// clipped to `[0, limit)`.
fn centered_window(center: usize, size: usize, limit: usize) -> (usize, usize) {
    let start = center as isize - (size / 2) as isize;
    let end = start + size as isize;
    (start.max(0) as usize, end.min(limit as isize) as usize)
}

fn unit_rgb(image: &RasterImage) -> Vec<[f64; 3]> {
    let (h, w) = image.shape();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            out.push(image.pixel_unit(r, c));
        }
    }
    out
}

#[inline]
fn color_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d0 = a[0] - b[0];
    let d1 = a[1] - b[1];
    let d2 = a[2] - b[2];
    (d0 * d0 + d1 * d1 + d2 * d2).sqrt()
}

/// Image-specific color scale σ_k.
///
/// For every point, the `patch_size`² patch centered on it (clipped to the
/// image) is visited; each patch pixel contributes its RGB distance (channels
/// in `[0, 1]`) to every pixel of its 9×9 neighborhood inside the image,
/// itself included. The population standard deviation of all contributions is
/// returned, floored at `sigma_floor`. Overlapping patches count their shared
/// pixels once per patch.
pub fn compute_sigma_k(
    image: &RasterImage,
    points: &PointSet,
    patch_size: usize,
    sigma_floor: f64,
) -> Result<f64> {
    points.require_nonempty()?;
    let (h, w) = image.shape();
    points.check_bounds(h, w)?;
    if patch_size < SIGMA_NEIGHBORHOOD {
        return Err(Error::InvalidConfig(format!(
            "patch_size {patch_size} is smaller than the {SIGMA_NEIGHBORHOOD}x{SIGMA_NEIGHBORHOOD} neighborhood"
        )));
    }
    let rgb = unit_rgb(image);
    let per_point = Execution::default().map_range(points.len(), |i| {
        let p = points.as_slice()[i];
        let (r0, r1) = centered_window(p.row, patch_size, h);
        let (c0, c1) = centered_window(p.col, patch_size, w);
        let mut n = 0u64;
        let mut s = KahanSum::default();
        let mut s2 = KahanSum::default();
        for r in r0..r1 {
            let (nr0, nr1) = centered_window(r, SIGMA_NEIGHBORHOOD, h);
            for c in c0..c1 {
                let (nc0, nc1) = centered_window(c, SIGMA_NEIGHBORHOOD, w);
                let center = &rgb[r * w + c];
                for nr in nr0..nr1 {
                    for nc in nc0..nc1 {
                        let d = color_distance(center, &rgb[nr * w + nc]);
                        s.add(d);
                        s2.add(d * d);
                        n += 1;
                    }
                }
            }
        }
        (n, s, s2)
    });
    let mut n = 0u64;
    let mut s = KahanSum::default();
    let mut s2 = KahanSum::default();
    for (pn, ps, ps2) in per_point {
        n += pn;
        s.merge(ps);
        s2.merge(ps2);
    }
    let mean = s.value() / n as f64;
    let var = (s2.value() / n as f64 - mean * mean).max(0.0);
    Ok(var.sqrt().max(sigma_floor))
}

/// Per-pixel clustering features `(d, r̂, ĝ, b̂)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterFeatures {
    height: usize,
    width: usize,
    values: Vec<[f64; 4]>,
    sigma_k: f64,
}

impl ClusterFeatures {
    pub fn from_values(height: usize, width: usize, values: Vec<[f64; 4]>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::dims(height * width, values.len()));
        }
        Ok(Self {
            height,
            width,
            values,
            sigma_k: f64::NAN,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn at(&self, row: usize, col: usize) -> [f64; 4] {
        self.values[row * self.width + col]
    }

    pub fn values(&self) -> &[[f64; 4]] {
        &self.values
    }

    /// The σ_k the color channels were divided by (NaN for hand-built features).
    pub fn sigma_k(&self) -> f64 {
        self.sigma_k
    }

    /// Multiplies the three color channels by `factor`.
    pub fn scale_color(&self, factor: f64) -> Self {
        let values = self
            .values
            .iter()
            .map(|v| [v[0], v[1] * factor, v[2] * factor, v[3] * factor])
            .collect();
        Self {
            values,
            ..self.clone()
        }
    }
}

pub fn build_cluster_features(
    image: &RasterImage,
    points: &PointSet,
    cfg: &PipelineConfig,
) -> Result<ClusterFeatures> {
    let sigma_k = compute_sigma_k(image, points, cfg.patch_size, cfg.sigma_floor)?;
    let (h, w) = image.shape();
    let dist = truncated_distance_map(points, h, w, cfg.d_star)?;
    let scale = cfg.lambda / sigma_k;
    let mut values = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let [red, green, blue] = image.pixel_unit(r, c);
            values.push([
                *dist.get(r, c) as f64,
                scale * red,
                scale * green,
                scale * blue,
            ]);
        }
    }
    Ok(ClusterFeatures {
        height: h,
        width: w,
        values,
        sigma_k,
    })
}

/// Result of Lloyd's algorithm.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centroids: Vec<[f64; 4]>,
    pub assignments: Vec<u32>,
    pub iterations: usize,
}

#[inline]
fn sq_dist4(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let mut s = 0.0;
    for i in 0..4 {
        let d = a[i] - b[i];
        s += d * d;
    }
    s
}

fn nearest_centroid(x: &[f64; 4], centroids: &[[f64; 4]]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist4(x, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Lloyd's k-means with farthest-point seeding: the first centroid is a
/// uniformly drawn sample, each further centroid is the sample farthest from
/// those already chosen (ties to the lowest index).
pub fn kmeans(data: &[[f64; 4]], k: usize, seed: u64) -> Result<KMeansFit> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("k = {k} must be at least 2")));
    }
    if data.len() < k {
        return Err(Error::DegenerateClustering(format!(
            "{} samples for {k} clusters",
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.gen_range(0..data.len());
    let mut centroids = vec![data[first]];
    let mut min_d: Vec<f64> = data.iter().map(|x| sq_dist4(x, &data[first])).collect();
    while centroids.len() < k {
        let (idx, &far) = min_d
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |best, cur| {
                if cur.1 > best.1 {
                    cur
                } else {
                    best
                }
            });
        if far <= 0.0 {
            return Err(Error::DegenerateClustering(format!(
                "only {} distinct feature vectors for {k} clusters",
                centroids.len()
            )));
        }
        let c = data[idx];
        for (m, x) in min_d.iter_mut().zip(data) {
            *m = m.min(sq_dist4(x, &c));
        }
        centroids.push(c);
    }

    let exec = Execution::default();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let partials = exec.map_chunks(data.len(), KMEANS_CHUNK, |range| {
            let mut sums = vec![[0.0f64; 4]; k];
            let mut counts = vec![0usize; k];
            for x in &data[range] {
                let j = nearest_centroid(x, &centroids);
                for d in 0..4 {
                    sums[j][d] += x[d];
                }
                counts[j] += 1;
            }
            (sums, counts)
        });
        let mut sums = vec![[0.0f64; 4]; k];
        let mut counts = vec![0usize; k];
        for (psum, pcount) in partials {
            for j in 0..k {
                for d in 0..4 {
                    sums[j][d] += psum[j][d];
                }
                counts[j] += pcount[j];
            }
        }
        let mut shift = 0.0f64;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let mut next = [0.0; 4];
            for d in 0..4 {
                next[d] = sums[j][d] / counts[j] as f64;
            }
            shift = shift.max(sq_dist4(&next, &centroids[j]).sqrt());
            centroids[j] = next;
        }
        if shift < KMEANS_TOL || iterations >= KMEANS_MAX_ITER {
            break;
        }
    }
    // Final assignment against the converged centroids.
    let labels = exec.map_chunks(data.len(), KMEANS_CHUNK, |range| {
        data[range]
            .iter()
            .map(|x| nearest_centroid(x, &centroids) as u32)
            .collect::<Vec<_>>()
    });
    let assignments: Vec<u32> = labels.into_iter().flatten().collect();
    Ok(KMeansFit {
        centroids,
        assignments,
        iterations,
    })
}

/// Cluster label: the cluster nearest the points (smallest mean distance
/// channel) is foreground, the farthest is background, any others unlabeled.
pub fn kmeans_cluster_labels(
    features: &ClusterFeatures,
    k: usize,
    seed: u64,
) -> Result<SemanticLabelMap> {
    let fit = kmeans(features.values(), k, seed)?;
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        fit.centroids[a][0]
            .total_cmp(&fit.centroids[b][0])
            .then(a.cmp(&b))
    });
    let mut role = vec![SemanticLabel::Unlabeled; k];
    role[order[0]] = SemanticLabel::Foreground;
    role[order[k - 1]] = SemanticLabel::Background;
    let (h, w) = features.shape();
    Grid::from_vec(
        h,
        w,
        fit.assignments.iter().map(|&a| role[a as usize]).collect(),
    )
}

/// Ridge pixels of a region map: pixels with a 4-neighbor in a region of
/// larger index. This yields a one-pixel ridge on the lower-index side.
pub fn voronoi_ridges(regions: &RegionMap) -> Mask {
    let (h, w) = regions.shape();
    Grid::from_fn(h, w, |r, c| {
        let own = *regions.get(r, c);
        let higher = |rr: usize, cc: usize| *regions.get(rr, cc) > own;
        (r > 0 && higher(r - 1, c))
            || (r + 1 < h && higher(r + 1, c))
            || (c > 0 && higher(r, c - 1))
            || (c + 1 < w && higher(r, c + 1))
    })
}

/// Voronoi label: ridges are background, points dilated to a radius-2 disk
/// are foreground (winning over ridges), everything else unlabeled.
pub fn voronoi_label(points: &PointSet, height: usize, width: usize) -> Result<SemanticLabelMap> {
    let regions = voronoi_regions(points, height, width)?;
    let ridges = voronoi_ridges(&regions);
    let mut labels = ridges.map(|&ridge| {
        if ridge {
            SemanticLabel::Background
        } else {
            SemanticLabel::Unlabeled
        }
    });
    let rad = POINT_DILATION_RADIUS as isize;
    for p in points {
        for dr in -rad..=rad {
            for dc in -rad..=rad {
                if dr * dr + dc * dc > rad * rad {
                    continue;
                }
                let (r, c) = (p.row as isize + dr, p.col as isize + dc);
                if r >= 0 && c >= 0 && (r as usize) < height && (c as usize) < width {
                    labels.set(r as usize, c as usize, SemanticLabel::Foreground);
                }
            }
        }
    }
    Ok(labels)
}

/// Stage-two supervision: per-nucleus foreground instances and a background
/// instance. Pixels in neither are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct InstancePseudoLabels {
    pub foreground: InstanceLabelMap,
    pub background: Mask,
}

impl InstancePseudoLabels {
    pub fn shape(&self) -> (usize, usize) {
        self.foreground.shape()
    }

    pub fn has_background(&self) -> bool {
        self.background.as_slice().iter().any(|&b| b)
    }

    /// Foreground instances plus the background instance when present.
    pub fn instance_count(&self) -> usize {
        self.foreground.count() + usize::from(self.has_background())
    }
}

/// Thresholds `prob` at `t_fg` and splits the foreground by Voronoi region;
/// pixels below `t_bg` form the background instance. Fragments smaller than
/// `min_instance_size` are dropped.
pub fn instance_pseudo_labels(
    prob: &ProbabilityMap,
    regions: &RegionMap,
    cfg: &PipelineConfig,
) -> Result<InstancePseudoLabels> {
    let (h, w) = prob.shape();
    regions.ensure_shape(h, w)?;
    if cfg.t_bg >= cfg.t_fg {
        return Err(Error::InvalidConfig(format!(
            "t_bg ({}) must be less than t_fg ({})",
            cfg.t_bg, cfg.t_fg
        )));
    }
    let n_regions = regions
        .as_slice()
        .iter()
        .max()
        .map_or(0, |&m| m as usize + 1);
    let mut sizes = vec![0usize; n_regions];
    for (&p, &reg) in prob.as_slice().iter().zip(regions.as_slice()) {
        if p as f64 >= cfg.t_fg {
            sizes[reg as usize] += 1;
        }
    }
    let raw: Vec<u32> = prob
        .as_slice()
        .iter()
        .zip(regions.as_slice())
        .map(|(&p, &reg)| {
            if p as f64 >= cfg.t_fg && sizes[reg as usize] >= cfg.min_instance_size {
                reg + 1
            } else {
                0
            }
        })
        .collect();
    let foreground = InstanceLabelMap::from_raw(Grid::from_vec(h, w, raw)?).canonical();
    let background = prob.map(|&p| (p as f64) < cfg.t_bg);
    Ok(InstancePseudoLabels {
        foreground,
        background,
    })
}
