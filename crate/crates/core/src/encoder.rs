//! MLP encoder with a final L2-normalization layer.
//!
//! Parameters live in one flat [`ParameterVector`]. The layout is layer-major:
//! for each linear layer `z = W h + b` (input layer first, projection to the
//! embedding last) the weight matrix `W` of shape `fan_out x fan_in` is stored
//! row-major, followed by the `fan_out` biases.
//!
//! Hidden layers apply the configured activation; the last linear layer is
//! followed only by `f = z / ||z||`. Gradients are derived by hand; the
//! normalization Jacobian is `(I - f f^T) / ||z||`.

use std::io::{Read, Write};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pre-normalization norms below this are rejected as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

const PARAMS_MAGIC: &[u8; 8] = b"INFPAR01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    /// Exact GELU, `x * Phi(x)` with the Gaussian CDF `Phi`.
    Gelu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Gelu => x * gaussian_cdf(x),
        }
    }

    /// d/dx. For GELU: `Phi(x) + x * phi(x)`.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Gelu => gaussian_cdf(x) + x * gaussian_pdf(x),
        }
    }
}

fn gaussian_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gaussian_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    /// May be empty, giving a linear encoder.
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
    pub init_seed: u64,
    /// Weight standard deviation multiplier; weights ~ N(0, (init_scale / sqrt(fan_in))^2).
    pub init_scale: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::ConfigInvalid("encoder dimensions must be >= 1".into()));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::ConfigInvalid(format!(
                "init_scale must be finite and non-negative, got {}",
                self.init_scale
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each linear layer, input side first.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.embed_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        param_count(self)
    }

    /// Same architecture, different seed.
    pub fn with_seed(&self, seed: u64) -> EncoderConfig {
        EncoderConfig { init_seed: seed, ..self.clone() }
    }
}

pub fn param_count(config: &EncoderConfig) -> usize {
    config
        .layer_shapes()
        .iter()
        .map(|&(fan_in, fan_out)| fan_in * fan_out + fan_out)
        .sum()
}

/// Location of one layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerSlot {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

pub(crate) fn layer_slots(config: &EncoderConfig) -> Vec<LayerSlot> {
    let mut offset = 0;
    config
        .layer_shapes()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let slot = LayerSlot {
                fan_in,
                fan_out,
                weight_offset: offset,
                bias_offset: offset + fan_in * fan_out,
            };
            offset += fan_in * fan_out + fan_out;
            slot
        })
        .collect()
}

/// Flat encoder parameters in the documented layer-major layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParameterVector(values)
    }

    pub fn zeros(len: usize) -> Self {
        ParameterVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Euclidean distance to `other`.
    pub fn distance(&self, other: &ParameterVector) -> Result<f64> {
        check_len(self.len(), other.len())?;
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, scale: f64, other: &ParameterVector) -> Result<()> {
        check_len(self.len(), other.len())?;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn check_for(&self, config: &EncoderConfig) -> Result<()> {
        check_len(param_count(config), self.len())
    }

    /// Writes the `params.bin` format: magic, u64 count, then little-endian f64 values.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(PARAMS_MAGIC)?;
        w.write_all(&(self.0.len() as u64).to_le_bytes())?;
        for v in &self.0 {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != PARAMS_MAGIC {
            return Err(Error::Format("params file: bad magic".into()));
        }
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let n = u64::from_le_bytes(word) as usize;
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut word)?;
            values.push(f64::from_le_bytes(word));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("params file: trailing bytes".into()));
        }
        Ok(ParameterVector(values))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(file)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(file)
    }
}

pub(crate) fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::LengthMismatch { expected, actual });
    }
    Ok(())
}

/// Unit-norm encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

pub fn init_params(config: &EncoderConfig) -> ParameterVector {
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let mut values = Vec::with_capacity(param_count(config));
    for (fan_in, fan_out) in config.layer_shapes() {
        let std = config.init_scale / (fan_in as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            let g: f64 = StandardNormal.sample(&mut rng);
            values.push(g * std);
        }
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParameterVector(values)
}

fn weight_view<'a>(params: &'a [f64], slot: &LayerSlot) -> ArrayView2<'a, f64> {
    let w = &params[slot.weight_offset..slot.bias_offset];
    ArrayView2::from_shape((slot.fan_out, slot.fan_in), w).expect("layer slot matches layout")
}

fn bias_view<'a>(params: &'a [f64], slot: &LayerSlot) -> ArrayView1<'a, f64> {
    ArrayView1::from(&params[slot.bias_offset..slot.bias_offset + slot.fan_out])
}

/// Activations retained by a batched forward pass for the backward pass.
pub struct ForwardTrace {
    /// Layer inputs: `inputs[0]` is the batch, `inputs[l]` the activated output of layer `l-1`.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre_activations: Vec<Array2<f64>>,
    /// Row norms of the last linear output.
    norms: Array1<f64>,
    /// Normalized embeddings, `batch x embed_dim`.
    pub embeddings: Array2<f64>,
}

fn check_batch(config: &EncoderConfig, params: &ParameterVector, x: &ArrayView2<f64>) -> Result<()> {
    params.check_for(config)?;
    if x.ncols() != config.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "input has {} columns, encoder expects {}",
            x.ncols(),
            config.input_dim
        )));
    }
    Ok(())
}

/// Batched forward pass keeping the intermediate activations.
pub fn forward_trace(
    params: &ParameterVector,
    config: &EncoderConfig,
    x: ArrayView2<f64>,
) -> Result<ForwardTrace> {
    check_batch(config, params, &x)?;
    let slots = layer_slots(config);
    let p = params.as_slice();
    let mut inputs = vec![x.to_owned()];
    let mut pre_activations = Vec::with_capacity(slots.len() - 1);
    let mut z = Array2::zeros((0, 0));
    for (l, slot) in slots.iter().enumerate() {
        let mut a = inputs[l].dot(&weight_view(p, slot).t());
        a += &bias_view(p, slot);
        if l + 1 < slots.len() {
            let act = config.activation;
            let h = a.mapv(|v| act.apply(v));
            pre_activations.push(a);
            inputs.push(h);
        } else {
            z = a;
        }
    }
    let norms = z.map_axis(Axis(1), |row| row.dot(&row).sqrt());
    for (row, &norm) in norms.iter().enumerate() {
        if norm.is_nan() || norm < DEGENERATE_NORM {
            return Err(Error::DegenerateEmbedding { row, norm });
        }
    }
    let mut embeddings = z;
    for (mut row, &norm) in embeddings.outer_iter_mut().zip(norms.iter()) {
        row /= norm;
    }
    Ok(ForwardTrace { inputs, pre_activations, norms, embeddings })
}

/// Normalized embeddings for every row of `x`.
pub fn forward_batch(
    params: &ParameterVector,
    config: &EncoderConfig,
    x: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    Ok(forward_trace(params, config, x)?.embeddings)
}

pub fn forward(params: &ParameterVector, config: &EncoderConfig, x: &[f64]) -> Result<EmbeddingVector> {
    let batch = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
    let out = forward_batch(params, config, batch)?;
    Ok(EmbeddingVector(out.row(0).to_vec()))
}

/// Gradient of a scalar loss with respect to all parameters, given the
/// loss gradient on the normalized embeddings (`batch x embed_dim`), summed over the batch.
pub fn backward_trace(
    params: &ParameterVector,
    config: &EncoderConfig,
    trace: &ForwardTrace,
    upstream: ArrayView2<f64>,
) -> Result<ParameterVector> {
    if upstream.dim() != trace.embeddings.dim() {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient {:?} vs embeddings {:?}",
            upstream.dim(),
            trace.embeddings.dim()
        )));
    }
    let slots = layer_slots(config);
    let p = params.as_slice();
    let mut grad = vec![0.0; params.len()];

    // Through the normalization: dz = (g - f (f.g)) / ||z||.
    let mut delta = upstream.to_owned();
    for ((mut d, f), &norm) in delta
        .outer_iter_mut()
        .zip(trace.embeddings.outer_iter())
        .zip(trace.norms.iter())
    {
        let fg = f.dot(&d);
        d.scaled_add(-fg, &f);
        d /= norm;
    }

    for l in (0..slots.len()).rev() {
        let slot = &slots[l];
        let dw = delta.t().dot(&trace.inputs[l]);
        grad[slot.weight_offset..slot.bias_offset]
            .copy_from_slice(dw.as_slice().expect("standard layout"));
        let db = delta.sum_axis(Axis(0));
        grad[slot.bias_offset..slot.bias_offset + slot.fan_out]
            .copy_from_slice(db.as_slice().expect("standard layout"));
        if l > 0 {
            let mut dh = delta.dot(&weight_view(p, slot));
            let act = config.activation;
            dh.zip_mut_with(&trace.pre_activations[l - 1], |g, &a| *g *= act.derivative(a));
            delta = dh;
        }
    }
    Ok(ParameterVector(grad))
}

pub fn backward(
    params: &ParameterVector,
    config: &EncoderConfig,
    x: ArrayView2<f64>,
    upstream: ArrayView2<f64>,
) -> Result<ParameterVector> {
    let trace = forward_trace(params, config, x)?;
    backward_trace(params, config, &trace, upstream)
}

/// Copies the listed rows of `data` into a new matrix.
pub fn gather_rows(data: ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), data.ncols()));
    for (mut dst, &r) in out.outer_iter_mut().zip(rows) {
        dst.assign(&data.slice(s![r, ..]));
    }
    out
}
