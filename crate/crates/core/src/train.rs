//! Two-stage training: the semantic model on partial cluster/Voronoi labels,
//! then the embedding model on instance pseudo-labels.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::embednet::{MlpModel, PixelFeaturizer};
use crate::error::{Error, Result};
use crate::losses::{discriminative_loss_rows, partial_cross_entropy_logits, PixelRole};
use crate::pseudolabel::InstancePseudoLabels;
use crate::raster::{RasterImage, SemanticLabelMap};

const SPN_STREAM: u64 = 0x5350_4e00;
const IEN_STREAM: u64 = 0x4945_4e00;
/// Extra pixels drawn for instances under-represented in a uniform batch.
const MIN_INSTANCE_SAMPLES: usize = 8;

/// Adam optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != state.len() || grads.len() != state.len() {
        return Err(Error::dims(
            format!("{} parameters", state.len()),
            format!("{} params / {} grads", params.len(), grads.len()),
        ));
    }
    if let Some(g) = grads.iter().find(|g| !g.is_finite()) {
        return Err(Error::Divergence(format!("non-finite gradient {g}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Loss history of one training run, written next to the model as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: String,
    pub epochs: usize,
    pub seed: u64,
    pub learning_rate: f64,
    /// Mean per-image batch loss for every epoch.
    pub loss_trace: Vec<f64>,
    pub final_loss: Option<f64>,
    pub config: PipelineConfig,
}

impl TrainReport {
    fn new(stage: &str, cfg: &PipelineConfig, lr: f64) -> Self {
        Self {
            stage: stage.to_string(),
            epochs: 0,
            seed: cfg.seed,
            learning_rate: lr,
            loss_trace: Vec::new(),
            final_loss: None,
            config: cfg.clone(),
        }
    }

    fn push(&mut self, loss: f64) {
        self.loss_trace.push(loss);
        self.epochs = self.loss_trace.len();
        self.final_loss = Some(loss);
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Training data for the semantic model.
#[derive(Debug, Clone, Copy)]
pub struct SpnSample<'a> {
    pub image: &'a RasterImage,
    pub cluster: &'a SemanticLabelMap,
    pub voronoi: &'a SemanticLabelMap,
}

/// Training data for the embedding model.
#[derive(Debug, Clone, Copy)]
pub struct IenSample<'a> {
    pub image: &'a RasterImage,
    pub labels: &'a InstancePseudoLabels,
}

fn layer_sizes(input: usize, cfg: &PipelineConfig, output: usize) -> Vec<usize> {
    let mut sizes = vec![input];
    sizes.extend(&cfg.hidden_sizes);
    sizes.push(output);
    sizes
}

/// Sorted uniform sample of at most `k` entries of `pool`.
fn sample_sorted(pool: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if pool.len() <= k {
        return pool.to_vec();
    }
    let mut picked: Vec<usize> = sample(rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    picked.sort_unstable();
    picked
}

fn step_model(
    model: &mut MlpModel,
    adam: &mut AdamState,
    features: &Array2<f64>,
    loss_and_grad: impl FnOnce(&Array2<f64>) -> Result<(f64, Array2<f64>)>,
) -> Result<f64> {
    let cache = model.forward(features.view())?;
    let (loss, out_grad) = loss_and_grad(&cache.output)?;
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("loss became {loss}")));
    }
    let grads = model.backward(&cache, out_grad.view())?;
    let mut params = model.flatten_params();
    adam_step(&mut params, &grads.flatten(), adam)?;
    model.set_params(&params)?;
    Ok(loss)
}

/// Fits the semantic model with partial cross-entropy on the cluster label
/// plus partial cross-entropy on the Voronoi label, one Adam step per image
/// per epoch.
pub fn train_spn(
    samples: &[SpnSample<'_>],
    cfg: &PipelineConfig,
    epochs: usize,
    lr: f64,
) -> Result<(MlpModel, TrainReport)> {
    let featurizer = PixelFeaturizer::from_config(cfg);
    let sizes = layer_sizes(featurizer.feature_len(), cfg, 1);
    let mut model = MlpModel::new(&sizes, cfg.seed ^ SPN_STREAM)?;
    let mut report = TrainReport::new("spn", cfg, lr);

    let mut pools = Vec::with_capacity(samples.len());
    for s in samples {
        let (h, w) = s.image.shape();
        s.cluster.ensure_shape(h, w)?;
        s.voronoi.ensure_shape(h, w)?;
        let pool: Vec<usize> = (0..h * w)
            .filter(|&i| {
                s.cluster.as_slice()[i].target().is_some()
                    || s.voronoi.as_slice()[i].target().is_some()
            })
            .collect();
        pools.push(pool);
    }
    if pools.iter().all(|p| p.is_empty()) {
        return Err(Error::NoLabeledPixels);
    }

    let mut adam = AdamState::new(model.param_count(), lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SPN_STREAM);
    for _ in 0..epochs {
        let mut total = 0.0;
        let mut used = 0usize;
        for (s, pool) in samples.iter().zip(&pools) {
            if pool.is_empty() {
                continue;
            }
            let batch = sample_sorted(pool, cfg.batch_pixels, &mut rng);
            let features = featurizer.featurize_pixels(s.image, &batch);
            let cluster: Vec<_> = batch
                .iter()
                .map(|&i| s.cluster.as_slice()[i].target())
                .collect();
            let voronoi: Vec<_> = batch
                .iter()
                .map(|&i| s.voronoi.as_slice()[i].target())
                .collect();
            let loss = step_model(&mut model, &mut adam, &features, |out| {
                let logits: Vec<f64> = out.column(0).to_vec();
                let mut loss = 0.0;
                let mut grad = Array2::zeros((logits.len(), 1));
                for targets in [&cluster, &voronoi] {
                    match partial_cross_entropy_logits(&logits, targets) {
                        Ok((l, g)) => {
                            loss += l;
                            grad.column_mut(0).scaled_add(1.0, &g);
                        }
                        Err(Error::NoLabeledPixels) => {}
                        Err(e) => return Err(e),
                    }
                }
                Ok((loss, grad))
            })?;
            total += loss;
            used += 1;
        }
        report.push(total / used as f64);
    }
    Ok((model, report))
}

/// Roles and a stratified batch for one image.
fn ien_batch(
    labels: &InstancePseudoLabels,
    pool: &[usize],
    members: &[Vec<usize>],
    batch_pixels: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut batch = sample_sorted(pool, batch_pixels, rng);
    if batch.len() == pool.len() {
        return batch;
    }
    let mut counts = vec![0usize; members.len()];
    for &i in &batch {
        let id = labels.foreground.as_slice()[i];
        if id > 0 {
            counts[id as usize - 1] += 1;
        }
    }
    let mut extra = Vec::new();
    for (c, m) in members.iter().enumerate() {
        if counts[c] < MIN_INSTANCE_SAMPLES.min(m.len()) {
            extra.extend(sample_sorted(m, MIN_INSTANCE_SAMPLES, rng));
        }
    }
    if !extra.is_empty() {
        batch.extend(extra);
        batch.sort_unstable();
        batch.dedup();
    }
    batch
}

/// Fits the embedding model with the discriminative loss, computed per image
/// on a sampled pixel subset (instance means taken over the subset).
pub fn train_ien(
    samples: &[IenSample<'_>],
    cfg: &PipelineConfig,
    epochs: usize,
    lr: f64,
) -> Result<(MlpModel, TrainReport)> {
    let featurizer = PixelFeaturizer::from_config(cfg);
    let sizes = layer_sizes(featurizer.feature_len(), cfg, cfg.embed_dim);
    let mut model = MlpModel::new(&sizes, cfg.seed ^ IEN_STREAM)?;
    let mut report = TrainReport::new("ien", cfg, lr);

    let mut pools = Vec::with_capacity(samples.len());
    let mut members = Vec::with_capacity(samples.len());
    for s in samples {
        let (h, w) = s.image.shape();
        if s.labels.shape() != (h, w) {
            return Err(Error::dims(
                format!("{h}x{w}"),
                format!("{:?}", s.labels.shape()),
            ));
        }
        if s.labels.instance_count() == 0 {
            return Err(Error::NoSupervision);
        }
        let fg = s.labels.foreground.as_slice();
        let bg = s.labels.background.as_slice();
        let pool: Vec<usize> = (0..h * w).filter(|&i| fg[i] > 0 || bg[i]).collect();
        let mut per_instance = vec![Vec::new(); s.labels.foreground.count()];
        for (i, &id) in fg.iter().enumerate() {
            if id > 0 {
                per_instance[id as usize - 1].push(i);
            }
        }
        pools.push(pool);
        members.push(per_instance);
    }

    let mut adam = AdamState::new(model.param_count(), lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ IEN_STREAM);
    for _ in 0..epochs {
        let mut total = 0.0;
        for ((s, pool), per_instance) in samples.iter().zip(&pools).zip(&members) {
            let batch = ien_batch(s.labels, pool, per_instance, cfg.batch_pixels, &mut rng);
            let roles: Vec<PixelRole> = batch
                .iter()
                .map(|&i| match s.labels.foreground.as_slice()[i] {
                    0 => PixelRole::Background,
                    id => PixelRole::Instance(id),
                })
                .collect();
            let features = featurizer.featurize_pixels(s.image, &batch);
            total += step_model(&mut model, &mut adam, &features, |out| {
                let (b, g) = discriminative_loss_rows(out.view(), &roles, cfg)?;
                Ok((b.total, g))
            })?;
        }
        report.push(total / samples.len().max(1) as f64);
    }
    Ok((model, report))
}
