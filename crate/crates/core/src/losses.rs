//! Training objectives with analytic gradients.
//!
//! The discriminative loss for one image, with `C` instances (foreground
//! instances plus the background instance when present):
//!
//! ```text
//! L     = intra / C + inter / (C (C - 1)) + (gamma / C) * sum_c |mu_c|
//! intra = sum_{c != bg} mean_{i in c} h+(mu_c, x_i)^2 + alpha * mean_{i in bg} h+(mu_bg, x_i)^2
//! inter = sum_{a != b, both fg} h-(mu_a, mu_b)^2 + 2 alpha sum_{c != bg} h-(mu_c, mu_bg)^2
//! h+(a, b) = max(0, |a - b| - delta_intra),  h-(a, b) = max(0, delta_inter - |a - b|)
//! ```
//!
//! The foreground pair sum runs over ordered pairs. With `C < 2` the inter
//! term is zero. Means are functions of their members, so gradients flow
//! through both `x_i` and every `mu_c`.

use ndarray::{Array1, Array2, ArrayView2};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::pseudolabel::InstancePseudoLabels;
use crate::raster::{EmbeddingField, Grid, ProbabilityMap, SemanticLabelMap};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `max(0, |a - b| - delta_intra)`
pub fn hinge_pull(a: &[f64], b: &[f64], delta_intra: f64) -> f64 {
    (distance(a, b) - delta_intra).max(0.0)
}

/// `max(0, delta_inter - |a - b|)`
pub fn hinge_push(a: &[f64], b: &[f64], delta_inter: f64) -> f64 {
    (delta_inter - distance(a, b)).max(0.0)
}

/// Supervision role of one embedding row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelRole {
    Ignore,
    Background,
    /// Foreground instance with an arbitrary id.
    Instance(u32),
}

/// Loss value and its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscLossBreakdown {
    pub total: f64,
    /// Unnormalized intra sum.
    pub intra: f64,
    /// Unnormalized inter sum.
    pub inter: f64,
    /// Weighted regularizer `(gamma / C) * sum_c |mu_c|`.
    pub reg: f64,
    /// Instance means: foreground instances in ascending id order, then the
    /// background mean when present.
    pub means: Vec<Vec<f64>>,
    pub instance_count: usize,
    pub has_background: bool,
}

/// Discriminative loss over embedding rows with per-row roles.
///
/// Returns the breakdown and `dL/dx` with the shape of `embeddings`; ignored
/// rows receive zero gradient. Hinges use the zero subgradient at their kink.
pub fn discriminative_loss_rows(
    embeddings: ArrayView2<f64>,
    roles: &[PixelRole],
    cfg: &PipelineConfig,
) -> Result<(DiscLossBreakdown, Array2<f64>)> {
    let (n, dim) = embeddings.dim();
    if roles.len() != n {
        return Err(Error::dims(n, roles.len()));
    }

    // Dense instance slots: foreground ids in ascending order, then background.
    let mut fg_ids: Vec<u32> = roles
        .iter()
        .filter_map(|r| match r {
            PixelRole::Instance(id) => Some(*id),
            _ => None,
        })
        .collect();
    fg_ids.sort_unstable();
    fg_ids.dedup();
    let n_fg = fg_ids.len();
    let has_bg = roles.iter().any(|r| *r == PixelRole::Background);
    let c_total = n_fg + usize::from(has_bg);
    if c_total == 0 {
        return Err(Error::NoSupervision);
    }
    let slot_of = |role: &PixelRole| -> Option<usize> {
        match role {
            PixelRole::Ignore => None,
            PixelRole::Background => Some(n_fg),
            PixelRole::Instance(id) => Some(fg_ids.binary_search(id).expect("collected")),
        }
    };
    let slots: Vec<Option<usize>> = roles.iter().map(slot_of).collect();

    let mut means = Array2::<f64>::zeros((c_total, dim));
    let mut counts = vec![0usize; c_total];
    for (i, slot) in slots.iter().enumerate() {
        if let Some(s) = *slot {
            counts[s] += 1;
            let mut m = means.row_mut(s);
            m += &embeddings.row(i);
        }
    }
    for (s, &cnt) in counts.iter().enumerate() {
        means.row_mut(s).mapv_inplace(|v| v / cnt as f64);
    }

    let c = c_total as f64;
    let pair_norm = if c_total >= 2 {
        1.0 / (c * (c - 1.0))
    } else {
        0.0
    };
    let weight = |s: usize| -> f64 {
        if has_bg && s == n_fg {
            cfg.alpha / counts[s] as f64
        } else {
            1.0 / counts[s] as f64
        }
    };

    let mut grad = Array2::<f64>::zeros((n, dim));
    let mut grad_means = Array2::<f64>::zeros((c_total, dim));
    let mut diff = vec![0.0; dim];

    // Pull term.
    let mut intra = 0.0;
    for (i, slot) in slots.iter().enumerate() {
        let Some(s) = *slot else { continue };
        let x = embeddings.row(i);
        let mu = means.row(s);
        for d in 0..dim {
            diff[d] = x[d] - mu[d];
        }
        let dist = norm(&diff);
        let h = dist - cfg.delta_intra;
        if h <= 0.0 {
            continue;
        }
        let w = weight(s);
        intra += w * h * h;
        // d/dx of w h^2 = 2 w h (x - mu) / |x - mu|, scaled by 1/C.
        let coef = 2.0 * w * h / dist / c;
        for d in 0..dim {
            let g = coef * diff[d];
            grad[[i, d]] += g;
            grad_means[[s, d]] -= g;
        }
    }

    // Push term over ordered foreground pairs and foreground-background pairs.
    let mut inter = 0.0;
    let mut push = |a: usize, b: usize, scale: f64, grad_means: &mut Array2<f64>| -> f64 {
        let ma = means.row(a);
        let mb = means.row(b);
        for d in 0..dim {
            diff[d] = ma[d] - mb[d];
        }
        let dist = norm(&diff);
        let h = cfg.delta_inter - dist;
        if h <= 0.0 {
            return 0.0;
        }
        if dist > 0.0 {
            let coef = -2.0 * scale * h / dist * pair_norm;
            for d in 0..dim {
                let g = coef * diff[d];
                grad_means[[a, d]] += g;
                grad_means[[b, d]] -= g;
            }
        }
        scale * h * h
    };
    for a in 0..n_fg {
        for b in 0..n_fg {
            if a != b {
                inter += push(a, b, 1.0, &mut grad_means);
            }
        }
    }
    if has_bg {
        for a in 0..n_fg {
            inter += push(a, n_fg, 2.0 * cfg.alpha, &mut grad_means);
        }
    }

    // Regularizer.
    let mut norm_sum = 0.0;
    for s in 0..c_total {
        let mu = means.row(s);
        let nm = norm(mu.as_slice().expect("contiguous row"));
        norm_sum += nm;
        if nm > 0.0 {
            let coef = cfg.gamma / c / nm;
            for d in 0..dim {
                grad_means[[s, d]] += coef * mu[d];
            }
        }
    }
    let reg = cfg.gamma / c * norm_sum;

    // Chain rule through the means: d mu_s / d x_i = I / N_s.
    for (i, slot) in slots.iter().enumerate() {
        if let Some(s) = *slot {
            let inv = 1.0 / counts[s] as f64;
            for d in 0..dim {
                grad[[i, d]] += grad_means[[s, d]] * inv;
            }
        }
    }

    let total = intra / c + inter * pair_norm + reg;
    let breakdown = DiscLossBreakdown {
        total,
        intra,
        inter,
        reg,
        means: means.rows().into_iter().map(|r| r.to_vec()).collect(),
        instance_count: c_total,
        has_background: has_bg,
    };
    Ok((breakdown, grad))
}

/// Per-pixel roles from instance pseudo-labels.
pub fn pixel_roles(labels: &InstancePseudoLabels) -> Vec<PixelRole> {
    labels
        .foreground
        .as_slice()
        .iter()
        .zip(labels.background.as_slice())
        .map(|(&id, &bg)| {
            if id > 0 {
                PixelRole::Instance(id)
            } else if bg {
                PixelRole::Background
            } else {
                PixelRole::Ignore
            }
        })
        .collect()
}

/// Discriminative loss of a full embedding field. The gradient has one row
/// per pixel in raster order.
pub fn discriminative_loss(
    embeddings: &EmbeddingField,
    labels: &InstancePseudoLabels,
    cfg: &PipelineConfig,
) -> Result<(DiscLossBreakdown, Array2<f64>)> {
    let (h, w) = embeddings.shape();
    if labels.shape() != (h, w) {
        return Err(Error::dims(
            format!("{h}x{w}"),
            format!("{:?}", labels.shape()),
        ));
    }
    let rows = Array2::from_shape_vec(
        (h * w, embeddings.dim()),
        embeddings.as_slice().iter().map(|&v| v as f64).collect(),
    )
    .expect("field shape");
    discriminative_loss_rows(rows.view(), &pixel_roles(labels), cfg)
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
fn exact_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy over labeled rows given logits. Returns the loss
/// and `dL/dz` per row (zero where unlabeled).
pub fn partial_cross_entropy_logits(
    logits: &[f64],
    targets: &[Option<f64>],
) -> Result<(f64, Array1<f64>)> {
    if logits.len() != targets.len() {
        return Err(Error::dims(logits.len(), targets.len()));
    }
    let labeled = targets.iter().filter(|t| t.is_some()).count();
    if labeled == 0 {
        return Err(Error::NoLabeledPixels);
    }
    let inv = 1.0 / labeled as f64;
    let mut loss = 0.0;
    let mut grad = Array1::zeros(logits.len());
    for (i, (&z, t)) in logits.iter().zip(targets).enumerate() {
        if let Some(y) = *t {
            loss += softplus(z) - y * z;
            grad[i] = (exact_sigmoid(z) - y) * inv;
        }
    }
    Ok((loss * inv, grad))
}

/// Mean binary cross-entropy of a probability map over its FG/BG pixels.
/// The gradient is taken at the pre-sigmoid logit, `(p - y) / N_labeled`.
pub fn partial_cross_entropy(
    prob: &ProbabilityMap,
    label: &SemanticLabelMap,
) -> Result<(f64, Grid<f64>)> {
    let (h, w) = prob.shape();
    label.ensure_shape(h, w)?;
    let labeled = label
        .as_slice()
        .iter()
        .filter(|l| l.target().is_some())
        .count();
    if labeled == 0 {
        return Err(Error::NoLabeledPixels);
    }
    let inv = 1.0 / labeled as f64;
    let mut loss = 0.0;
    let grad = prob
        .as_slice()
        .iter()
        .zip(label.as_slice())
        .map(|(&p, l)| match l.target() {
            Some(y) => {
                let p = p as f64;
                loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
                (p - y) * inv
            }
            None => 0.0,
        })
        .collect();
    Ok((loss * inv, Grid::from_vec(h, w, grad)?))
}

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDifferenceReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub numeric: Vec<f64>,
}

/// Denominator floor for relative errors, so coordinates whose true
/// derivative is near zero are judged on absolute error. Central differences
/// of a loss of size ~10 at epsilon 1e-6 carry ~2e-9 of rounding noise, so
/// smaller derivatives cannot be resolved relatively.
pub const FD_SCALE_FLOOR: f64 = 1e-4;

/// Compares `analytic` with central differences of `loss` at `point`.
/// The relative error of a coordinate is
/// `|a - n| / max(|a|, |n|, FD_SCALE_FLOOR)`.
pub fn finite_difference_check(
    mut loss: impl FnMut(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
    epsilon: f64,
) -> FiniteDifferenceReport {
    assert_eq!(point.len(), analytic.len(), "gradient length");
    let mut x = point.to_vec();
    let mut numeric = Vec::with_capacity(point.len());
    let mut worst = (0.0f64, 0usize);
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + epsilon;
        let up = loss(&x);
        x[i] = orig - epsilon;
        let down = loss(&x);
        x[i] = orig;
        let num = (up - down) / (2.0 * epsilon);
        let a = analytic[i];
        let rel = (a - num).abs() / a.abs().max(num.abs()).max(FD_SCALE_FLOOR);
        if rel > worst.0 {
            worst = (rel, i);
        }
        numeric.push(num);
    }
    FiniteDifferenceReport {
        max_relative_error: worst.0,
        worst_index: worst.1,
        numeric,
    }
}
