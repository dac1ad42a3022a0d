//! Brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array2;
use nucseg::losses::PixelRole;
use nucseg::{Grid, InstanceLabelMap, Mask, PointSet, RasterImage};
use rand::seq::SliceRandom;
use rand::Rng;

pub fn random_points(rng: &mut impl Rng, h: usize, w: usize, n: usize) -> PointSet {
    let mut all: Vec<(usize, usize)> = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).collect();
    all.shuffle(rng);
    all.truncate(n.clamp(1, h * w));
    PointSet::from_coords(&all).unwrap()
}

pub fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> RasterImage {
    let data = (0..h * w * 3).map(|_| rng.gen()).collect();
    RasterImage::new(h, w, data).unwrap()
}

/// Nearest-point distance by scanning every point, truncated at `d_star`.
pub fn brute_distance(points: &PointSet, h: usize, w: usize, d_star: f64) -> Vec<f32> {
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let mut best = f64::INFINITY;
            for p in points {
                let dr = r as f64 - p.row as f64;
                let dc = c as f64 - p.col as f64;
                best = best.min((dr * dr + dc * dc).sqrt());
            }
            out.push(best.min(d_star) as f32);
        }
    }
    out
}

/// Index of the nearest point, lowest index on ties.
pub fn brute_voronoi(points: &PointSet, h: usize, w: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let mut best = (i64::MAX, 0u32);
            for (k, p) in points.iter().enumerate() {
                let dr = r as i64 - p.row as i64;
                let dc = c as i64 - p.col as i64;
                let d = dr * dr + dc * dc;
                if d < best.0 {
                    best = (d, k as u32);
                }
            }
            out.push(best.1);
        }
    }
    out
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Union-find labelling of equal nonzero neighbors, renumbered in raster
/// order of first pixel.
pub fn union_find_regions(values: &Grid<u32>, eight: bool) -> Vec<u32> {
    let (h, w) = values.shape();
    let v = values.as_slice();
    let mut parent: Vec<usize> = (0..h * w).collect();
    let mut offsets = vec![(0isize, 1isize), (1, 0)];
    if eight {
        offsets.extend([(1, 1), (1, -1)]);
    }
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if v[i] == 0 {
                continue;
            }
            for &(dr, dc) in &offsets {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                    continue;
                }
                let j = rr as usize * w + cc as usize;
                if v[j] == v[i] {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut ids = vec![0u32; h * w];
    let mut root_id = std::collections::HashMap::new();
    for i in 0..h * w {
        if v[i] == 0 {
            continue;
        }
        let root = find(&mut parent, i);
        let next = root_id.len() as u32 + 1;
        ids[i] = *root_id.entry(root).or_insert(next);
    }
    ids
}

/// Every distance of a patch pixel to its 9x9 neighborhood, over all point
/// patches, then a two-pass population standard deviation.
pub fn brute_sigma_k(image: &RasterImage, points: &PointSet, patch: usize, floor: f64) -> f64 {
    let (h, w) = image.shape();
    let lo = |center: usize, size: usize| center as i64 - (size / 2) as i64;
    let mut all = Vec::new();
    for p in points {
        for r in lo(p.row, patch)..lo(p.row, patch) + patch as i64 {
            for c in lo(p.col, patch)..lo(p.col, patch) + patch as i64 {
                if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
                    continue;
                }
                let a = image.pixel(r as usize, c as usize);
                for nr in r - 4..=r + 4 {
                    for nc in c - 4..=c + 4 {
                        if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                            continue;
                        }
                        let b = image.pixel(nr as usize, nc as usize);
                        let d2: f64 = (0..3)
                            .map(|k| {
                                let d = f64::from(a[k]) / 255.0 - f64::from(b[k]) / 255.0;
                                d * d
                            })
                            .sum();
                        all.push(d2.sqrt());
                    }
                }
            }
        }
    }
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    var.sqrt().max(floor)
}

/// Random instance map with up to `max_inst` rectangles (later ones on top).
pub fn random_instances(
    rng: &mut impl Rng,
    h: usize,
    w: usize,
    max_inst: usize,
) -> InstanceLabelMap {
    let mut g = Grid::filled(h, w, 0u32);
    let n = rng.gen_range(0..=max_inst);
    for id in 1..=n as u32 {
        let r0 = rng.gen_range(0..h);
        let c0 = rng.gen_range(0..w);
        let r1 = rng.gen_range(r0..h.min(r0 + h / 2 + 1));
        let c1 = rng.gen_range(c0..w.min(c0 + w / 2 + 1));
        for r in r0..=r1 {
            for c in c0..=c1 {
                g.set(r, c, id);
            }
        }
    }
    InstanceLabelMap::from_raw(g)
}

pub fn random_mask(rng: &mut impl Rng, h: usize, w: usize, p: f64) -> Mask {
    Grid::from_fn(h, w, |_, _| rng.gen_bool(p))
}

/// AJI maximized over every injective gt -> pred assignment (brute force).
pub fn best_assignment_aji(pred: &InstanceLabelMap, gt: &InstanceLabelMap) -> f64 {
    let (np, ng) = (pred.count(), gt.count());
    let mut inter = vec![vec![0usize; np + 1]; ng + 1];
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        inter[g as usize][p as usize] += 1;
    }
    let ga = gt.areas();
    let pa = pred.areas();
    fn rec(
        g: usize,
        used: &mut Vec<bool>,
        num: usize,
        den: usize,
        ctx: &(Vec<Vec<usize>>, Vec<usize>, Vec<usize>),
        best: &mut f64,
    ) {
        let (inter, ga, pa) = ctx;
        if g == ga.len() {
            let extra: usize = pa
                .iter()
                .enumerate()
                .filter(|(p, _)| !used[*p])
                .map(|(_, a)| a)
                .sum();
            let v = if den + extra == 0 {
                1.0
            } else {
                num as f64 / (den + extra) as f64
            };
            *best = best.max(v);
            return;
        }
        rec(g + 1, used, num, den + ga[g], ctx, best);
        for p in 0..pa.len() {
            let n = inter[g + 1][p + 1];
            if !used[p] && n > 0 {
                used[p] = true;
                rec(g + 1, used, num + n, den + ga[g] + pa[p] - n, ctx, best);
                used[p] = false;
            }
        }
    }
    let mut best = 0.0;
    rec(0, &mut vec![false; np], 0, 0, &(inter, ga, pa), &mut best);
    best
}

/// Random embedding rows and roles with every pixel-to-mean distance and
/// mean-to-mean distance kept `margin` away from the hinge kinks.
pub fn disc_case(
    rng: &mut impl Rng,
    cfg: &nucseg::PipelineConfig,
    margin: f64,
) -> (Array2<f64>, Vec<PixelRole>) {
    use nucseg::losses::discriminative_loss_rows;
    loop {
        let n = rng.gen_range(4..=100);
        let d = rng.gen_range(1..=4);
        let n_inst = rng.gen_range(1..=3u32);
        let roles: Vec<PixelRole> = (0..n)
            .map(|_| match rng.gen_range(0..=n_inst + 1) {
                0 => PixelRole::Ignore,
                1 => PixelRole::Background,
                k => PixelRole::Instance(k - 1),
            })
            .collect();
        let x = Array2::from_shape_fn((n, d), |_| rng.gen_range(-2.5..2.5));
        let Ok((b, _)) = discriminative_loss_rows(x.view(), &roles, cfg) else {
            continue;
        };
        let mut ids: Vec<u32> = roles
            .iter()
            .filter_map(|r| match r {
                PixelRole::Instance(k) => Some(*k),
                _ => None,
            })
            .collect();
        ids.sort_unstable();
        ids.dedup();
        let mut ok = true;
        for (row, role) in x.rows().into_iter().zip(&roles) {
            let slot = match role {
                PixelRole::Ignore => continue,
                PixelRole::Background => b.means.len() - 1,
                PixelRole::Instance(k) => ids.binary_search(k).unwrap(),
            };
            let mu = &b.means[slot];
            let dist: f64 = row
                .iter()
                .zip(mu)
                .map(|(a, m)| (a - m).powi(2))
                .sum::<f64>()
                .sqrt();
            ok &= (dist - cfg.delta_intra).abs() > margin;
        }
        for i in 0..b.means.len() {
            for j in 0..i {
                let dist: f64 = b.means[i]
                    .iter()
                    .zip(&b.means[j])
                    .map(|(a, m)| (a - m).powi(2))
                    .sum::<f64>()
                    .sqrt();
                ok &= (dist - cfg.delta_inter).abs() > margin && dist > margin;
            }
            ok &= b.means[i].iter().map(|v| v * v).sum::<f64>().sqrt() > margin;
        }
        if ok {
            return (x, roles);
        }
    }
}
