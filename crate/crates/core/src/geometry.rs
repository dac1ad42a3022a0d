//! Geometric primitives: truncated distance to annotations, Voronoi regions
//! and connected components.

use crate::error::Result;
use crate::raster::{DistanceMap, Grid, InstanceLabelMap, Mask, Point, PointSet, RegionMap};

/// Pixel adjacency used by component labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl Connectivity {
    pub fn from_count(n: u8) -> Option<Self> {
        match n {
            4 => Some(Self::Four),
            8 => Some(Self::Eight),
            _ => None,
        }
    }

    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Self::Four => &[(-1, 0), (0, -1), (0, 1), (1, 0)],
            Self::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

/// Uniform bucket grid over annotation points for exact nearest-point queries.
struct PointBuckets<'a> {
    points: &'a [Point],
    cell: usize,
    rows: usize,
    cols: usize,
    buckets: Vec<Vec<u32>>,
}

impl<'a> PointBuckets<'a> {
    fn new(points: &'a [Point], height: usize, width: usize) -> Self {
        // Roughly a handful of points per cell.
        let area = (height * width) as f64;
        let cell = ((area * 4.0 / points.len().max(1) as f64).sqrt() as usize).clamp(4, 256);
        let rows = height.div_ceil(cell).max(1);
        let cols = width.div_ceil(cell).max(1);
        let mut buckets = vec![Vec::new(); rows * cols];
        for (i, p) in points.iter().enumerate() {
            let br = (p.row / cell).min(rows - 1);
            let bc = (p.col / cell).min(cols - 1);
            buckets[br * cols + bc].push(i as u32);
        }
        Self {
            points,
            cell,
            rows,
            cols,
            buckets,
        }
    }

    /// Nearest point `(index, squared distance)`; ties go to the lowest index.
    /// Searching stops once no point can be closer than `give_up2`.
    fn nearest(&self, row: usize, col: usize, give_up2: Option<i64>) -> Option<(u32, i64)> {
        let br = (row / self.cell).min(self.rows - 1) as isize;
        let bc = (col / self.cell).min(self.cols - 1) as isize;
        let max_ring = self.rows.max(self.cols) as isize;
        let mut best: Option<(u32, i64)> = None;
        for ring in 0..=max_ring {
            if ring > 0 {
                // Any point in this ring is at least (ring-1)*cell+1 away along one axis.
                let lb = ((ring - 1) as i64) * self.cell as i64 + 1;
                let lb2 = lb * lb;
                if let Some((_, d2)) = best {
                    if lb2 > d2 {
                        break;
                    }
                }
                if let Some(g) = give_up2 {
                    if lb2 > g {
                        break;
                    }
                }
            }
            for r in (br - ring)..=(br + ring) {
                if r < 0 || r >= self.rows as isize {
                    continue;
                }
                let on_edge_row = r == br - ring || r == br + ring;
                let step = if on_edge_row { 1 } else { (2 * ring).max(1) };
                let mut c = bc - ring;
                while c <= bc + ring {
                    if c >= 0 && c < self.cols as isize {
                        for &i in &self.buckets[r as usize * self.cols + c as usize] {
                            let d2 = self.points[i as usize].dist2(row, col);
                            let better = match best {
                                None => true,
                                Some((bi, bd)) => d2 < bd || (d2 == bd && i < bi),
                            };
                            if better {
                                best = Some((i, d2));
                            }
                        }
                    }
                    c += step;
                }
            }
        }
        best
    }
}

/// Euclidean distance from every pixel to its nearest annotation, truncated
/// at `d_star`.
pub fn truncated_distance_map(
    points: &PointSet,
    height: usize,
    width: usize,
    d_star: f64,
) -> Result<DistanceMap> {
    points.require_nonempty()?;
    points.check_bounds(height, width)?;
    let buckets = PointBuckets::new(points.as_slice(), height, width);
    let give_up = (d_star.ceil() as i64 + 1).pow(2);
    Ok(Grid::from_fn(height, width, |r, c| {
        match buckets.nearest(r, c, Some(give_up)) {
            Some((_, d2)) => (d2 as f64).sqrt().min(d_star) as f32,
            None => d_star as f32,
        }
    }))
}

/// Index of the nearest annotation for every pixel; ties break to the
/// lowest point index.
pub fn voronoi_regions(points: &PointSet, height: usize, width: usize) -> Result<RegionMap> {
    points.require_nonempty()?;
    points.check_bounds(height, width)?;
    let buckets = PointBuckets::new(points.as_slice(), height, width);
    Ok(Grid::from_fn(height, width, |r, c| {
        buckets.nearest(r, c, None).expect("non-empty point set").0
    }))
}

/// Labels maximal connected true-regions `1..=N` in raster order of their
/// first pixel.
pub fn connected_components(mask: &Mask, connectivity: Connectivity) -> InstanceLabelMap {
    let values = mask.map(|&m| u32::from(m));
    label_regions(&values, connectivity)
}

/// Connected components of a label raster: neighboring pixels join when they
/// carry the same nonzero value. Components are numbered `1..=N` in raster
/// order of their first pixel.
pub fn label_regions(values: &Grid<u32>, connectivity: Connectivity) -> InstanceLabelMap {
    let (h, w) = values.shape();
    let src = values.as_slice();
    let mut out = vec![0u32; h * w];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        let v = src[start];
        if v == 0 || out[start] != 0 {
            continue;
        }
        next += 1;
        out[start] = next;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            let (r, c) = ((idx / w) as isize, (idx % w) as isize);
            for &(dr, dc) in connectivity.offsets() {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let n = nr as usize * w + nc as usize;
                if src[n] == v && out[n] == 0 {
                    out[n] = next;
                    stack.push(n);
                }
            }
        }
    }
    let grid = Grid::from_vec(h, w, out).expect("same shape");
    InstanceLabelMap::from_contiguous(grid, next)
}
