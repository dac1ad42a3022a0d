//! Per-pixel surrogate networks.
//!
//! A [`PixelFeaturizer`] turns every pixel into a fixed-length vector (a
//! clamp-to-edge RGB patch plus normalized row/column coordinates), and an
//! [`MlpModel`] maps those vectors to either a foreground logit (semantic
//! head, sigmoid applied by [`forward_semantic`]) or a D-dimensional
//! embedding (identity head, [`forward_embed`]).

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::raster::{EmbeddingField, Grid, ProbabilityMap, RasterImage};

pub const MODEL_MAGIC: &[u8; 4] = b"NWM1";

/// Rows per block when evaluating a whole image.
const FORWARD_BLOCK: usize = 4096;

/// Patch + coordinate pixel features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelFeaturizer {
    pub patch_radius: usize,
    /// Spacing between sampled patch pixels; 1 is a dense patch.
    pub dilation: usize,
    pub include_coords: bool,
}

impl Default for PixelFeaturizer {
    fn default() -> Self {
        Self {
            patch_radius: 2,
            dilation: 1,
            include_coords: true,
        }
    }
}

impl PixelFeaturizer {
    pub fn from_config(cfg: &PipelineConfig) -> Self {
        Self {
            patch_radius: cfg.patch_radius,
            dilation: cfg.patch_dilation.max(1),
            include_coords: cfg.include_coords,
        }
    }

    pub fn feature_len(&self) -> usize {
        let side = 2 * self.patch_radius + 1;
        3 * side * side + if self.include_coords { 2 } else { 0 }
    }

    fn write_row(&self, image: &RasterImage, row: usize, col: usize, out: &mut [f64]) {
        let (h, w) = image.shape();
        let rad = self.patch_radius as isize;
        let step = self.dilation as isize;
        let mut k = 0;
        for dr in -rad..=rad {
            let r = (row as isize + dr * step).clamp(0, h as isize - 1) as usize;
            for dc in -rad..=rad {
                let c = (col as isize + dc * step).clamp(0, w as isize - 1) as usize;
                let px = image.pixel_unit(r, c);
                out[k..k + 3].copy_from_slice(&px);
                k += 3;
            }
        }
        if self.include_coords {
            out[k] = row as f64 / h as f64;
            out[k + 1] = col as f64 / w as f64;
        }
    }

    /// Features for the pixels at the given flat indices, one row each.
    pub fn featurize_pixels(&self, image: &RasterImage, pixels: &[usize]) -> Array2<f64> {
        let w = image.width();
        let mut out = Array2::zeros((pixels.len(), self.feature_len()));
        for (mut row, &idx) in out.axis_iter_mut(Axis(0)).zip(pixels) {
            let slice = row.as_slice_mut().expect("standard layout");
            self.write_row(image, idx / w, idx % w, slice);
        }
        out
    }

    /// Features for every pixel in raster order.
    pub fn featurize(&self, image: &RasterImage) -> Array2<f64> {
        let all: Vec<usize> = (0..image.height() * image.width()).collect();
        self.featurize_pixels(image, &all)
    }
}

/// Fully connected layer computing `x · weights + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `fan_in × fan_out`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    pub fn fan_in(&self) -> usize {
        self.weights.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.ncols()
    }
}

/// Multilayer perceptron with ReLU hidden layers and a linear output layer.
///
/// Parameters are kept at single precision (every stored value is exactly
/// representable as `f32`) so the model file round-trips bit-exactly; the
/// arithmetic itself runs in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<DenseLayer>,
}

/// Activations retained by [`MlpModel::forward`] for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input followed by every hidden activation.
    inputs: Vec<Array2<f64>>,
    /// Linear output of the last layer.
    pub output: Array2<f64>,
}

/// Gradients of a scalar loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<DenseLayer>,
    pub input: Array2<f64>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }
}

#[inline]
fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

impl MlpModel {
    /// Glorot-uniform initialization, zero biases.
    pub fn new(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "layer sizes {layer_sizes:?} need at least two positive entries"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_sizes
            .windows(2)
            .map(|pair| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights = Array2::from_shape_fn((fan_in, fan_out), |_| {
                    round_f32(rng.gen_range(-limit..=limit))
                });
                DenseLayer {
                    weights,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    /// Builds a model from explicit layers; parameters are rounded to `f32`.
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig(
                "model needs at least one layer".into(),
            ));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.fan_out() {
                return Err(Error::dims(
                    format!("bias of length {} in layer {i}", l.fan_out()),
                    l.bias.len(),
                ));
            }
            if i > 0 && layers[i - 1].fan_out() != l.fan_in() {
                return Err(Error::dims(
                    format!("fan-in {} for layer {i}", layers[i - 1].fan_out()),
                    l.fan_in(),
                ));
            }
        }
        let mut model = Self { layers };
        model.map_params(round_f32);
        model.check_finite()?;
        Ok(model)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(|l| l.fan_out()));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").fan_out()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    /// Overwrites all parameters from a flat vector (rounded to `f32`).
    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::dims(self.param_count(), flat.len()));
        }
        let mut it = flat.iter();
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = round_f32(*it.next().expect("length checked"));
            }
        }
        self.check_finite()
    }

    fn map_params(&mut self, f: impl Fn(f64) -> f64) {
        for l in &mut self.layers {
            l.weights.mapv_inplace(&f);
            l.bias.mapv_inplace(&f);
        }
    }

    fn check_finite(&self) -> Result<()> {
        let bad = self.layers.iter().any(|l| {
            l.weights
                .iter()
                .chain(l.bias.iter())
                .any(|v| !v.is_finite())
        });
        if bad {
            Err(Error::Divergence("non-finite model parameter".into()))
        } else {
            Ok(())
        }
    }

    fn check_input(&self, features: &ArrayView2<f64>) -> Result<()> {
        if features.ncols() != self.input_dim() {
            return Err(Error::dims(
                format!("{} input features", self.input_dim()),
                format!("{} features", features.ncols()),
            ));
        }
        Ok(())
    }

    /// Forward pass keeping the activations needed by [`MlpModel::backward`].
    pub fn forward(&self, features: ArrayView2<f64>) -> Result<ForwardCache> {
        self.check_input(&features)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = features.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = x.dot(&layer.weights);
            z += &layer.bias;
            inputs.push(x);
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            x = z;
        }
        Ok(ForwardCache { inputs, output: x })
    }

    /// Linear output without retaining activations.
    pub fn predict(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&features)?;
        let mut x = features.dot(&self.layers[0].weights);
        x += &self.layers[0].bias;
        for layer in &self.layers[1..] {
            x.mapv_inplace(|v| v.max(0.0));
            let mut z = x.dot(&layer.weights);
            z += &layer.bias;
            x = z;
        }
        Ok(x)
    }

    /// Reverse-mode gradients of a scalar loss given `dL/d(output)`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: ArrayView2<f64>,
    ) -> Result<Gradients> {
        if output_grad.dim() != cache.output.dim() {
            return Err(Error::dims(
                format!("{:?}", cache.output.dim()),
                format!("{:?}", output_grad.dim()),
            ));
        }
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::dims(
                format!("cache for {} layers", self.layers.len()),
                cache.inputs.len(),
            ));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = output_grad.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.inputs[i];
            let dw = x.t().dot(&g);
            let db = g.sum_axis(Axis(0));
            let mut gx = g.dot(&layer.weights.t());
            if i > 0 {
                // `x` is the ReLU output of the previous layer.
                gx.zip_mut_with(x, |gv, &xv| {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                });
            }
            grads.push(DenseLayer {
                weights: dw,
                bias: db,
            });
            g = gx;
        }
        grads.reverse();
        Ok(Gradients {
            layers: grads,
            input: g,
        })
    }

    /// Serializes to the `NWM1` format: magic, layer count, `(fan_in,
    /// fan_out)` per layer as u32 LE, then per layer the row-major
    /// `fan_in × fan_out` weights followed by the bias, all f32 LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.layers.len() + 4 * self.param_count());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.fan_in() as u32).to_le_bytes());
            out.extend_from_slice(&(l.fan_out() as u32).to_le_bytes());
        }
        for l in &self.layers {
            for v in l.weights.iter().chain(l.bias.iter()) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = |msg: &str| Error::MalformedHeader(msg.to_string());
        if bytes.len() < 8 || &bytes[..4] != MODEL_MAGIC {
            return Err(header("missing NWM1 magic"));
        }
        let word = |i: usize| -> Result<usize> {
            bytes
                .get(i..i + 4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
                .ok_or_else(|| header("truncated layer table"))
        };
        let n_layers = word(4)?;
        if n_layers == 0 {
            return Err(header("model has no layers"));
        }
        let mut dims = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            dims.push((word(8 + 8 * i)?, word(12 + 8 * i)?));
        }
        let expected: usize = dims.iter().map(|(i, o)| i * o + o).sum();
        let payload = &bytes[8 + 8 * n_layers..];
        if payload.len() != 4 * expected {
            return Err(Error::PayloadSizeMismatch {
                expected,
                actual: payload.len() / 4,
            });
        }
        let mut vals = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
        let mut layers = Vec::with_capacity(n_layers);
        for &(fan_in, fan_out) in &dims {
            let w: Vec<f64> = vals.by_ref().take(fan_in * fan_out).collect();
            let b: Vec<f64> = vals.by_ref().take(fan_out).collect();
            layers.push(DenseLayer {
                weights: Array2::from_shape_vec((fan_in, fan_out), w).expect("sized"),
                bias: Array1::from(b),
            });
        }
        Self::from_layers(layers)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Sigmoid that stays strictly inside `(0, 1)` after rounding to `f32`.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    const LO: f64 = 1e-7;
    const HI: f64 = 1.0 - 1.0 / (1u64 << 24) as f64;
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    p.clamp(LO, HI)
}

fn blocked_predict(model: &MlpModel, features: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
    let n = features.nrows();
    let blocks = Execution::default().map_chunks(n, FORWARD_BLOCK, |range| {
        model.predict(features.slice(ndarray::s![range, ..]))
    });
    blocks.into_iter().collect()
}

/// Foreground probability per pixel from a semantic (single-output) model.
pub fn forward_semantic(
    model: &MlpModel,
    features: ArrayView2<f64>,
    height: usize,
    width: usize,
) -> Result<ProbabilityMap> {
    if model.output_dim() != 1 {
        return Err(Error::dims(
            "semantic model with 1 output",
            model.output_dim(),
        ));
    }
    if features.nrows() != height * width {
        return Err(Error::dims(height * width, features.nrows()));
    }
    let blocks = blocked_predict(model, features)?;
    let values = blocks
        .iter()
        .flat_map(|b| b.column(0).to_vec())
        .map(|z| sigmoid(z) as f32)
        .collect();
    Grid::from_vec(height, width, values)
}

/// Embedding rows for an arbitrary set of feature rows.
pub fn embed_rows(model: &MlpModel, features: ArrayView2<f64>) -> Result<Array2<f64>> {
    let blocks = blocked_predict(model, features)?;
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    if views.is_empty() {
        return Ok(Array2::zeros((0, model.output_dim())));
    }
    Ok(ndarray::concatenate(Axis(0), &views).expect("same width"))
}

/// Per-pixel embedding field from an embedding model.
pub fn forward_embed(
    model: &MlpModel,
    features: ArrayView2<f64>,
    height: usize,
    width: usize,
) -> Result<EmbeddingField> {
    if features.nrows() != height * width {
        return Err(Error::dims(height * width, features.nrows()));
    }
    let rows = embed_rows(model, features)?;
    let dim = model.output_dim();
    EmbeddingField::new(height, width, dim, rows.iter().map(|&v| v as f32).collect())
}

/// Image-level convenience: featurize then run the semantic model.
pub fn predict_probability(
    model: &MlpModel,
    featurizer: &PixelFeaturizer,
    image: &RasterImage,
) -> Result<ProbabilityMap> {
    let features = featurizer.featurize(image);
    forward_semantic(model, features.view(), image.height(), image.width())
}
