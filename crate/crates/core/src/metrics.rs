//! Pixel-level (IoU, F1) and object-level (object Dice, AJI) evaluation.
//!
//! Object metrics first renumber both maps in raster order, so "lowest id"
//! tie-breaks refer to the instance whose first pixel comes first and every
//! metric is invariant to how the ids were assigned.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::InstanceLabelMap;

fn check_shapes(pred: &InstanceLabelMap, gt: &InstanceLabelMap) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::dims(
            format!("{:?}", gt.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    Ok(())
}

/// (|P ∩ G|, |P|, |G|) of the binarized maps.
fn binary_counts(pred: &InstanceLabelMap, gt: &InstanceLabelMap) -> (usize, usize, usize) {
    let mut inter = 0;
    let mut p = 0;
    let mut g = 0;
    for (&a, &b) in pred.as_slice().iter().zip(gt.as_slice()) {
        p += usize::from(a > 0);
        g += usize::from(b > 0);
        inter += usize::from(a > 0 && b > 0);
    }
    (inter, p, g)
}

/// Foreground IoU; 1 when both maps are empty.
pub fn pixel_iou(pred: &InstanceLabelMap, gt: &InstanceLabelMap) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (i, p, g) = binary_counts(pred, gt);
    let union = p + g - i;
    Ok(if union == 0 {
        1.0
    } else {
        i as f64 / union as f64
    })
}

/// Foreground F1 (pixel Dice); 1 when both maps are empty.
pub fn pixel_f1(pred: &InstanceLabelMap, gt: &InstanceLabelMap) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (i, p, g) = binary_counts(pred, gt);
    Ok(if p + g == 0 {
        1.0
    } else {
        2.0 * i as f64 / (p + g) as f64
    })
}

/// Instance overlap table of two canonical maps.
struct Overlaps {
    gt_area: Vec<usize>,
    pred_area: Vec<usize>,
    /// Per gt instance: (pred index, intersection), ascending pred index.
    by_gt: Vec<Vec<(usize, usize)>>,
    by_pred: Vec<Vec<(usize, usize)>>,
}

impl Overlaps {
    fn new(pred: &InstanceLabelMap, gt: &InstanceLabelMap) -> Self {
        let pred = pred.canonical();
        let gt = gt.canonical();
        let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
            if p > 0 && g > 0 {
                *table.entry((g as usize - 1, p as usize - 1)).or_default() += 1;
            }
        }
        let mut by_gt = vec![Vec::new(); gt.count()];
        let mut by_pred = vec![Vec::new(); pred.count()];
        for (&(g, p), &n) in &table {
            by_gt[g].push((p, n));
            by_pred[p].push((g, n));
        }
        for list in &mut by_pred {
            list.sort_unstable();
        }
        Self {
            gt_area: gt.areas(),
            pred_area: pred.areas(),
            by_gt,
            by_pred,
        }
    }
}

fn dice(inter: usize, a: usize, b: usize) -> f64 {
    2.0 * inter as f64 / (a + b) as f64
}

/// Area-weighted Dice of each object against its most-overlapping
/// counterpart, averaged over both directions.
pub fn object_dice(pred: &InstanceLabelMap, gt: &InstanceLabelMap) -> Result<f64> {
    check_shapes(pred, gt)?;
    let o = Overlaps::new(pred, gt);
    match (o.gt_area.is_empty(), o.pred_area.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let side = |areas: &[usize], other: &[usize], lists: &[Vec<(usize, usize)>]| {
        let total: usize = areas.iter().sum();
        let mut s = 0.0;
        for (i, list) in lists.iter().enumerate() {
            // First maximum wins, i.e. the lowest counterpart id.
            let best = list
                .iter()
                .fold(None, |acc: Option<(usize, usize)>, &(j, n)| match acc {
                    Some((_, m)) if m >= n => acc,
                    _ => Some((j, n)),
                });
            if let Some((j, n)) = best {
                s += areas[i] as f64 * dice(n, areas[i], other[j]);
            }
        }
        // Weighting after the sum keeps a perfect match at exactly 1.
        s / total as f64
    };
    let g = side(&o.gt_area, &o.pred_area, &o.by_gt);
    let p = side(&o.pred_area, &o.gt_area, &o.by_pred);
    Ok(0.5 * (g + p))
}

/// Aggregated Jaccard Index with exclusive greedy matching: gt instances in
/// order each take the unused prediction of highest IoU; unused predictions
/// count toward the denominator.
pub fn aji(pred: &InstanceLabelMap, gt: &InstanceLabelMap) -> Result<f64> {
    check_shapes(pred, gt)?;
    let o = Overlaps::new(pred, gt);
    if o.gt_area.is_empty() {
        return Ok(if o.pred_area.is_empty() { 1.0 } else { 0.0 });
    }
    let mut used = vec![false; o.pred_area.len()];
    let mut num = 0usize;
    let mut den = 0usize;
    for (g, list) in o.by_gt.iter().enumerate() {
        let ga = o.gt_area[g];
        let mut best: Option<(usize, usize, usize)> = None;
        for &(p, n) in list {
            if used[p] {
                continue;
            }
            let u = ga + o.pred_area[p] - n;
            // n/u > bn/bu, compared exactly.
            let better = match best {
                None => true,
                Some((_, bn, bu)) => (n as u128) * (bu as u128) > (bn as u128) * (u as u128),
            };
            if better {
                best = Some((p, n, u));
            }
        }
        match best {
            Some((p, n, u)) => {
                used[p] = true;
                num += n;
                den += u;
            }
            None => den += ga,
        }
    }
    for (p, &a) in o.pred_area.iter().enumerate() {
        if !used[p] {
            den += a;
        }
    }
    Ok(num as f64 / den as f64)
}

/// Metrics of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub iou: f64,
    pub f1: f64,
    pub object_dice: f64,
    pub aji: f64,
}

pub fn evaluate(
    name: &str,
    pred: &InstanceLabelMap,
    gt: &InstanceLabelMap,
) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        name: name.to_string(),
        iou: pixel_iou(pred, gt)?,
        f1: pixel_f1(pred, gt)?,
        object_dice: object_dice(pred, gt)?,
        aji: aji(pred, gt)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricMeans {
    pub iou: f64,
    pub f1: f64,
    pub object_dice: f64,
    pub aji: f64,
}

/// Per-image rows plus their arithmetic means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: Vec<ImageMetrics>,
    pub mean: MetricMeans,
}

impl EvalReport {
    pub fn new(images: Vec<ImageMetrics>) -> Self {
        let n = images.len().max(1) as f64;
        let mut mean = MetricMeans::default();
        for m in &images {
            mean.iou += m.iou;
            mean.f1 += m.f1;
            mean.object_dice += m.object_dice;
            mean.aji += m.aji;
        }
        mean.iou /= n;
        mean.f1 /= n;
        mean.object_dice /= n;
        mean.aji /= n;
        Self { images, mean }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
