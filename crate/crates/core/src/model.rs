//! MLP forecasters with last-value normalization and a Student-T head.
//!
//! The backbone maps a length-`C` context (after subtracting its last
//! value) through the shape's hidden layers to `horizon * d` features.
//! Three affine maps `d -> 1`, shared across timesteps, turn each
//! timestep's feature row into raw location, scale and degrees-of-freedom;
//! softplus links keep `sigma > 0` and `nu > 2`, and the subtracted last
//! value is added back to the location only.
//!
//! Everything is plain f64 with explicit loops: forward, exact analytic
//! backward, and Adam with decoupled weight decay. Given the same spec,
//! seed and data the whole pipeline is bit-reproducible.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StudentT};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};
use thiserror::Error;

/// Floor added to the softplus-linked scale.
pub const SCALE_EPS: f64 = 1e-6;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("non-finite input value")]
    NonFiniteInput,
    #[error("input length {found} does not match context length {expected}")]
    ContextMismatch { expected: usize, found: usize },
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),
}

/// The six backbone shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shape {
    Base,
    Diamond,
    Contracting,
    Square,
    Funnel,
    Expanding,
}

impl Shape {
    pub const ALL: [Shape; 6] = [
        Shape::Base,
        Shape::Diamond,
        Shape::Contracting,
        Shape::Square,
        Shape::Funnel,
        Shape::Expanding,
    ];

    /// Hidden layer widths between the context and the output layer.
    pub fn hidden_widths(&self) -> &'static [usize] {
        match self {
            Shape::Base => &[],
            Shape::Diamond => &[32, 64, 32],
            Shape::Contracting => &[128, 64, 32],
            Shape::Square => &[64, 64, 64],
            Shape::Funnel => &[64, 32, 64],
            Shape::Expanding => &[32, 64, 128],
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Shape::Base => "Base",
            Shape::Diamond => "Diamond",
            Shape::Contracting => "Contracting",
            Shape::Square => "Square",
            Shape::Funnel => "Funnel",
            Shape::Expanding => "Expanding",
        }
    }

    pub fn parse(s: &str) -> Option<Shape> {
        Shape::ALL.iter().copied().find(|x| x.as_str().eq_ignore_ascii_case(s))
    }

    /// Activation recorded in the metadataset configuration schema.
    pub fn activation(&self) -> &'static str {
        match self {
            Shape::Base => "linear",
            _ => "elu",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub shape: Shape,
    pub context: usize,
    pub horizon: usize,
    /// Width of the per-timestep distribution feature row.
    pub dist_hidden: usize,
}

impl ArchitectureSpec {
    /// Backbone layer dimensions chained from context to `horizon * d`.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.context];
        widths.extend_from_slice(self.shape.hidden_widths());
        widths.push(self.horizon * self.dist_hidden);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Exact number of trainable parameters including the head maps.
    pub fn param_count(&self) -> usize {
        let backbone: usize = self.layer_dims().iter().map(|(i, o)| i * o + o).sum();
        backbone + 3 * (self.dist_hidden + 1)
    }
}

/// One affine backbone layer; `weight` is row-major `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(in_dim: usize, out_dim: usize) -> Layer {
        Layer { in_dim, out_dim, weight: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim] }
    }

    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(input.len(), self.in_dim);
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias[o];
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            out.push(acc);
        }
    }
}

/// Affine map from a `d`-wide feature row to one scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMap {
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl HeadMap {
    fn zeros(d: usize) -> HeadMap {
        HeadMap { weight: vec![0.0; d], bias: 0.0 }
    }

    fn apply(&self, row: &[f64]) -> f64 {
        self.bias + self.weight.iter().zip(row).map(|(w, x)| w * x).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParameters {
    pub arch: ArchitectureSpec,
    pub backbone: Vec<Layer>,
    pub head_loc: HeadMap,
    pub head_scale: HeadMap,
    pub head_dof: HeadMap,
}

/// Gradient of the mean NLL w.r.t. every parameter; mirrors the parameter
/// block structure so the two can be traversed in lockstep.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTensor {
    pub blocks: MlpParameters,
}

impl MlpParameters {
    pub fn zeros(arch: ArchitectureSpec) -> MlpParameters {
        MlpParameters {
            arch,
            backbone: arch.layer_dims().into_iter().map(|(i, o)| Layer::zeros(i, o)).collect(),
            head_loc: HeadMap::zeros(arch.dist_hidden),
            head_scale: HeadMap::zeros(arch.dist_hidden),
            head_dof: HeadMap::zeros(arch.dist_hidden),
        }
    }

    /// Named flat views over every tensor, in canonical order.
    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (i, l) in self.backbone.iter().enumerate() {
            out.push((format!("backbone{i}.weight"), &l.weight));
            out.push((format!("backbone{i}.bias"), &l.bias));
        }
        out.push(("head_loc.weight".into(), &self.head_loc.weight));
        out.push(("head_loc.bias".into(), std::slice::from_ref(&self.head_loc.bias)));
        out.push(("head_scale.weight".into(), &self.head_scale.weight));
        out.push(("head_scale.bias".into(), std::slice::from_ref(&self.head_scale.bias)));
        out.push(("head_dof.weight".into(), &self.head_dof.weight));
        out.push(("head_dof.bias".into(), std::slice::from_ref(&self.head_dof.bias)));
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.backbone {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.head_loc.weight);
        out.push(std::slice::from_mut(&mut self.head_loc.bias));
        out.push(&mut self.head_scale.weight);
        out.push(std::slice::from_mut(&mut self.head_scale.bias));
        out.push(&mut self.head_dof.weight);
        out.push(std::slice::from_mut(&mut self.head_dof.bias));
        out
    }

    /// Layer-wise flat views for gradient statistics: backbone layers by
    /// index, then the three head maps, each pooling weight and bias.
    pub fn layer_views(&self) -> Vec<(String, Vec<&[f64]>)> {
        let mut out: Vec<(String, Vec<&[f64]>)> = Vec::new();
        for (i, l) in self.backbone.iter().enumerate() {
            out.push((format!("backbone{i}"), vec![&l.weight[..], &l.bias[..]]));
        }
        out.push(("head_loc".into(), vec![&self.head_loc.weight[..], std::slice::from_ref(&self.head_loc.bias)]));
        out.push(("head_scale".into(), vec![&self.head_scale.weight[..], std::slice::from_ref(&self.head_scale.bias)]));
        out.push(("head_dof".into(), vec![&self.head_dof.weight[..], std::slice::from_ref(&self.head_dof.bias)]));
        out
    }
}

/// Deterministic Glorot-uniform initialization. Biases start at zero
/// except the dof head, whose bias puts the initial `nu` at 10 for a
/// near-Gaussian start.
pub fn build(arch: ArchitectureSpec, seed: u64) -> MlpParameters {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = MlpParameters::zeros(arch);
    for layer in &mut params.backbone {
        let a = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
        for w in &mut layer.weight {
            *w = rng.random_range(-a..a);
        }
    }
    let a = (6.0 / (arch.dist_hidden + 1) as f64).sqrt();
    for w in &mut params.head_loc.weight {
        *w = rng.random_range(-a..a);
    }
    // Scale and dof head weights start near zero: every timestep then
    // opens with sigma ~ softplus(0) and the early feature gradient is
    // carried by the location path. Full-scale init here lets timesteps
    // with a tiny initial sigma resolve the shared-feature tug-of-war by
    // inflating sigma against the location, which stalls the mean fit.
    for head in [&mut params.head_scale, &mut params.head_dof] {
        for w in &mut head.weight {
            *w = rng.random_range(-a..a) / 64.0;
        }
    }
    // softplus(bias) = 8 so that nu = 2 + softplus(bias) = 10.
    params.head_dof.bias = (8f64.exp() - 1.0).ln();
    params
}

/// Per-timestep Student-T parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionParams {
    pub location: Vec<f64>,
    pub scale: Vec<f64>,
    pub dof: Vec<f64>,
}

impl DistributionParams {
    pub fn horizon(&self) -> usize {
        self.location.len()
    }
}

/// Intermediate state of one forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each backbone layer; `layer_inputs[0]` is the normalized x.
    layer_inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each backbone layer.
    pre_acts: Vec<Vec<f64>>,
    raw_scale: Vec<f64>,
    raw_dof: Vec<f64>,
    dist: DistributionParams,
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

fn elu_deriv(pre: f64) -> f64 {
    if pre > 0.0 {
        1.0
    } else {
        pre.exp()
    }
}

pub fn forward(params: &MlpParameters, x: &[f64]) -> Result<(DistributionParams, ForwardCache), ModelError> {
    let arch = params.arch;
    if x.len() != arch.context {
        return Err(ModelError::ContextMismatch { expected: arch.context, found: x.len() });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFiniteInput);
    }
    let last = x[arch.context - 1];
    let z: Vec<f64> = x.iter().map(|v| v - last).collect();

    let n_layers = params.backbone.len();
    let mut layer_inputs = Vec::with_capacity(n_layers);
    let mut pre_acts = Vec::with_capacity(n_layers);
    let mut current = z;
    for (i, layer) in params.backbone.iter().enumerate() {
        let mut pre = Vec::new();
        layer.apply(&current, &mut pre);
        layer_inputs.push(current);
        // ELU after every hidden layer; the final layer stays affine.
        current = if i + 1 < n_layers { pre.iter().map(|&a| elu(a)).collect() } else { pre.clone() };
        pre_acts.push(pre);
    }
    let features = current;
    debug_assert_eq!(features.len(), arch.horizon * arch.dist_hidden);

    let d = arch.dist_hidden;
    let horizon = arch.horizon;
    let mut location = Vec::with_capacity(horizon);
    let mut scale = Vec::with_capacity(horizon);
    let mut dof = Vec::with_capacity(horizon);
    let mut raw_scale = Vec::with_capacity(horizon);
    let mut raw_dof = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let row = &features[t * d..(t + 1) * d];
        let mu_raw = params.head_loc.apply(row);
        let s_raw = params.head_scale.apply(row);
        let n_raw = params.head_dof.apply(row);
        location.push(mu_raw + last);
        scale.push(softplus(s_raw) + SCALE_EPS);
        dof.push(2.0 + softplus(n_raw));
        raw_scale.push(s_raw);
        raw_dof.push(n_raw);
    }
    let dist = DistributionParams { location, scale, dof };
    let cache = ForwardCache { layer_inputs, pre_acts, raw_scale, raw_dof, dist: dist.clone() };
    Ok((dist, cache))
}

/// Negative log likelihood of one observation under a location-scale
/// Student-T.
pub fn student_t_nll_single(mu: f64, sigma: f64, nu: f64, y: f64) -> f64 {
    let r = (y - mu) / sigma;
    -ln_gamma((nu + 1.0) / 2.0)
        + ln_gamma(nu / 2.0)
        + 0.5 * (nu * std::f64::consts::PI).ln()
        + sigma.ln()
        + 0.5 * (nu + 1.0) * (r * r / nu).ln_1p()
}

/// Mean NLL over the horizon.
pub fn student_t_nll(dist: &DistributionParams, y: &[f64]) -> f64 {
    debug_assert_eq!(dist.horizon(), y.len());
    let mut acc = 0.0;
    for t in 0..y.len() {
        acc += student_t_nll_single(dist.location[t], dist.scale[t], dist.dof[t], y[t]);
    }
    acc / y.len() as f64
}

/// Exact gradient of the mean NLL w.r.t. every parameter.
///
/// The location re-add (`mu = mu_raw + x_C`) only routes input values, so
/// it contributes nothing to parameter gradients.
pub fn backward(params: &MlpParameters, cache: &ForwardCache, y: &[f64]) -> GradientTensor {
    let arch = params.arch;
    let d = arch.dist_hidden;
    let horizon = arch.horizon;
    debug_assert_eq!(y.len(), horizon);
    let mut grads = MlpParameters::zeros(arch);

    let n_layers = params.backbone.len();
    let features = if n_layers == 0 { &cache.layer_inputs[0] } else { cache.pre_acts.last().unwrap() };
    // Backbone output gradient, filled from the head chain below.
    let mut g_features = vec![0.0; horizon * d];
    let weight = 1.0 / horizon as f64;
    for t in 0..horizon {
        let mu = cache.dist.location[t];
        let sigma = cache.dist.scale[t];
        let nu = cache.dist.dof[t];
        let r = (y[t] - mu) / sigma;
        let u = 1.0 + r * r / nu;

        let d_mu = -(nu + 1.0) * r / (nu * u * sigma) * weight;
        let d_sigma = (1.0 / sigma - (nu + 1.0) * r * r / (nu * u * sigma)) * weight;
        let d_nu = (-0.5 * digamma((nu + 1.0) / 2.0) + 0.5 * digamma(nu / 2.0)
            + 0.5 / nu
            + 0.5 * (r * r / nu).ln_1p()
            - (nu + 1.0) * r * r / (2.0 * nu * nu * u))
            * weight;

        let d_raw_loc = d_mu;
        let d_raw_scale = d_sigma * sigmoid(cache.raw_scale[t]);
        let d_raw_dof = d_nu * sigmoid(cache.raw_dof[t]);

        let row = &features[t * d..(t + 1) * d];
        for j in 0..d {
            grads.head_loc.weight[j] += d_raw_loc * row[j];
            grads.head_scale.weight[j] += d_raw_scale * row[j];
            grads.head_dof.weight[j] += d_raw_dof * row[j];
            g_features[t * d + j] = d_raw_loc * params.head_loc.weight[j]
                + d_raw_scale * params.head_scale.weight[j]
                + d_raw_dof * params.head_dof.weight[j];
        }
        grads.head_loc.bias += d_raw_loc;
        grads.head_scale.bias += d_raw_scale;
        grads.head_dof.bias += d_raw_dof;
    }

    let mut g_out = g_features;
    for i in (0..n_layers).rev() {
        let layer = &params.backbone[i];
        // Convert post-activation gradient to pre-activation space; the
        // final layer has no activation.
        let g_pre: Vec<f64> = if i + 1 < n_layers {
            g_out.iter().zip(&cache.pre_acts[i]).map(|(g, &a)| g * elu_deriv(a)).collect()
        } else {
            g_out
        };
        let input = &cache.layer_inputs[i];
        let gl = &mut grads.backbone[i];
        for o in 0..layer.out_dim {
            let gp = g_pre[o];
            gl.bias[o] += gp;
            let row = &mut gl.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
            for (w, x) in row.iter_mut().zip(input) {
                *w += gp * x;
            }
        }
        let mut g_in = vec![0.0; layer.in_dim];
        for o in 0..layer.out_dim {
            let gp = g_pre[o];
            let row = &layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
            for (gi, w) in g_in.iter_mut().zip(row) {
                *gi += gp * w;
            }
        }
        g_out = g_in;
    }

    GradientTensor { blocks: grads }
}

/// Accumulates gradients over a batch (simple elementwise mean).
pub fn accumulate(total: &mut GradientTensor, one: &GradientTensor) {
    for (dst, src) in total.blocks.blocks_mut().into_iter().zip(one.blocks.blocks()) {
        for (a, b) in dst.iter_mut().zip(src.1) {
            *a += b;
        }
    }
}

pub fn scale_gradient(g: &mut GradientTensor, factor: f64) {
    for block in g.blocks.blocks_mut() {
        for v in block {
            *v *= factor;
        }
    }
}

pub fn gradient_is_finite(g: &GradientTensor) -> bool {
    g.blocks.blocks().iter().all(|(_, b)| b.iter().all(|v| v.is_finite()))
}

/// First and second moment buffers for Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: MlpParameters,
    v: MlpParameters,
    pub step: u64,
}

impl AdamState {
    pub fn new(arch: ArchitectureSpec) -> AdamState {
        AdamState { m: MlpParameters::zeros(arch), v: MlpParameters::zeros(arch), step: 0 }
    }
}

/// One Adam update with decoupled weight decay (`theta -= lr * wd * theta`
/// before the moment update). Returns the number of entries updated.
pub fn adam_step(
    params: &mut MlpParameters,
    grads: &GradientTensor,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> usize {
    assert!(lr > 0.0 && weight_decay >= 0.0);
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    let mut updated = 0usize;
    let g_blocks = grads.blocks.blocks();
    let mut m_blocks = state.m.blocks_mut();
    let mut v_blocks = state.v.blocks_mut();
    for (bi, p_block) in params.blocks_mut().into_iter().enumerate() {
        let g_block = g_blocks[bi].1;
        let m_block = &mut m_blocks[bi];
        let v_block = &mut v_blocks[bi];
        for i in 0..p_block.len() {
            let g = g_block[i];
            p_block[i] -= lr * weight_decay * p_block[i];
            m_block[i] = ADAM_BETA1 * m_block[i] + (1.0 - ADAM_BETA1) * g;
            v_block[i] = ADAM_BETA2 * v_block[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m_block[i] / bc1;
            let v_hat = v_block[i] / bc2;
            p_block[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            updated += 1;
        }
    }
    updated
}

/// Draw `n` forecast paths; entry `(i, t)` is an independent draw from the
/// timestep-`t` location-scale Student-T.
pub fn sample_forecast(dist: &DistributionParams, n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    assert!(n >= 1);
    let horizon = dist.horizon();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut row = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let t_dist = StudentT::new(dist.dof[t]).expect("dof > 2 by construction");
            row.push(dist.location[t] + dist.scale[t] * t_dist.sample(rng));
        }
        out.push(row);
    }
    out
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"TSBMLP01";

/// Serialize parameters: magic, little-endian u32 JSON-header length, the
/// header (spec plus tensor manifest), then all tensors as little-endian
/// f64 in manifest order.
pub fn checkpoint_to_bytes(params: &MlpParameters) -> Vec<u8> {
    #[derive(Serialize)]
    struct Header<'a> {
        arch: &'a ArchitectureSpec,
        tensors: Vec<(String, usize)>,
    }
    let blocks = params.blocks();
    let header = Header {
        arch: &params.arch,
        tensors: blocks.iter().map(|(n, b)| (n.clone(), b.len())).collect(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, block) in blocks {
        for v in block {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<MlpParameters, ModelError> {
    #[derive(Deserialize)]
    struct Header {
        arch: ArchitectureSpec,
        tensors: Vec<(String, usize)>,
    }
    let bad = |m: &str| ModelError::InvalidCheckpoint(m.to_string());
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12 + header_len;
    if bytes.len() < header_end {
        return Err(bad("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&bytes[12..header_end]).map_err(|e| ModelError::InvalidCheckpoint(e.to_string()))?;
    let mut params = MlpParameters::zeros(header.arch);
    let mut offset = header_end;
    {
        let mut blocks = params.blocks_mut();
        if blocks.len() != header.tensors.len() {
            return Err(bad("tensor manifest does not match architecture"));
        }
        for (bi, (name, len)) in header.tensors.iter().enumerate() {
            let block = &mut blocks[bi];
            if block.len() != *len {
                return Err(ModelError::InvalidCheckpoint(format!("tensor {name} has wrong length")));
            }
            for v in block.iter_mut() {
                let end = offset + 8;
                if bytes.len() < end {
                    return Err(bad("truncated payload"));
                }
                *v = f64::from_le_bytes(bytes[offset..end].try_into().unwrap());
                offset = end;
            }
        }
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &MlpParameters, path: &std::path::Path) -> std::io::Result<()> {
    std::fs::write(path, checkpoint_to_bytes(params))
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<MlpParameters, ModelError> {
    let bytes = std::fs::read(path).map_err(|e| ModelError::InvalidCheckpoint(e.to_string()))?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(shape: Shape, context: usize, horizon: usize, d: usize) -> ArchitectureSpec {
        ArchitectureSpec { shape, context, horizon, dist_hidden: d }
    }

    #[test]
    fn layer_dims_base_and_diamond() {
        assert_eq!(spec(Shape::Base, 24, 12, 1).layer_dims(), vec![(24, 12)]);
        assert_eq!(
            spec(Shape::Diamond, 7, 2, 2).layer_dims(),
            vec![(7, 32), (32, 64), (64, 32), (32, 4)]
        );
    }

    #[test]
    fn param_counts() {
        assert_eq!(spec(Shape::Base, 24, 12, 1).param_count(), 306);
        assert_eq!(spec(Shape::Base, 1, 1, 1).param_count(), 8);
        assert_eq!(spec(Shape::Square, 10, 5, 1).param_count(), 9355);
    }

    #[test]
    fn build_is_deterministic() {
        let a = build(spec(Shape::Funnel, 7, 3, 2), 100);
        let b = build(spec(Shape::Funnel, 7, 3, 2), 100);
        assert_eq!(a, b);
        let c = build(spec(Shape::Funnel, 7, 3, 2), 101);
        assert_ne!(a, c);
    }

    #[test]
    fn build_initial_dof_near_ten() {
        let p = build(spec(Shape::Base, 3, 2, 1), 100);
        let nu0 = 2.0 + softplus(p.head_dof.bias);
        assert!((nu0 - 10.0).abs() < 1e-9);
    }

    #[test]
    fn forward_zero_weights_reproduces_last_value() {
        let arch = spec(Shape::Base, 3, 4, 1);
        let params = MlpParameters::zeros(arch);
        let (dist, _) = forward(&params, &[5.0, 5.0, 5.0]).unwrap();
        for t in 0..4 {
            assert_eq!(dist.location[t], 5.0);
            assert!((dist.scale[t] - (softplus(0.0) + SCALE_EPS)).abs() < 1e-15);
            assert!((dist.dof[t] - (2.0 + softplus(0.0))).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_shift_equivariance() {
        // Dyadic inputs and shift keep the IEEE subtraction exact, so the
        // normalized input is bitwise identical for x and x + c.
        let params = build(spec(Shape::Diamond, 5, 3, 2), 42);
        let x: Vec<f64> = (0..5).map(|i| (i as f64 * 3.0 + 1.0) / 16.0).collect();
        let c = 7.25;
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        let (d0, _) = forward(&params, &x).unwrap();
        let (d1, _) = forward(&params, &shifted).unwrap();
        for t in 0..3 {
            assert!((d1.location[t] - d0.location[t] - c).abs() < 1e-9);
            assert_eq!(d1.scale[t], d0.scale[t]);
            assert_eq!(d1.dof[t], d0.dof[t]);
        }
    }

    #[test]
    fn forward_rejects_non_finite() {
        let params = build(spec(Shape::Base, 2, 1, 1), 1);
        assert_eq!(forward(&params, &[1.0, f64::NAN]).unwrap_err(), ModelError::NonFiniteInput);
    }

    #[test]
    fn forward_hand_computed_network() {
        let arch = spec(Shape::Base, 2, 2, 1);
        let mut p = MlpParameters::zeros(arch);
        p.backbone[0].weight = vec![0.5, -0.25, 0.1, 0.3];
        p.backbone[0].bias = vec![0.05, -0.02];
        p.head_loc = HeadMap { weight: vec![2.0], bias: 0.1 };
        p.head_scale = HeadMap { weight: vec![-1.0], bias: 0.2 };
        p.head_dof = HeadMap { weight: vec![0.5], bias: 1.0 };
        let (dist, _) = forward(&p, &[1.0, 3.0]).unwrap();
        // z = [-2, 0]; features = [0.5*-2 + 0.05, 0.1*-2 - 0.02] = [-0.95, -0.22].
        let f = [-0.95, -0.22];
        for t in 0..2 {
            let mu = 2.0 * f[t] + 0.1 + 3.0;
            let sigma = softplus(-f[t] + 0.2) + SCALE_EPS;
            let nu = 2.0 + softplus(0.5 * f[t] + 1.0);
            assert!((dist.location[t] - mu).abs() < 1e-12);
            assert!((dist.scale[t] - sigma).abs() < 1e-12);
            assert!((dist.dof[t] - nu).abs() < 1e-12);
        }
    }

    #[test]
    fn nll_closed_forms() {
        // Cauchy at the mode: density 1/pi.
        let d = DistributionParams { location: vec![0.0], scale: vec![1.0], dof: vec![1.0] };
        assert!((student_t_nll(&d, &[0.0]) - std::f64::consts::PI.ln()).abs() < 1e-12);
        // Scale shifts the NLL by ln sigma.
        let d2 = DistributionParams { location: vec![0.0], scale: vec![2.0], dof: vec![1.0] };
        assert!((student_t_nll(&d2, &[0.0]) - (std::f64::consts::PI.ln() + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn nll_matches_gaussian_at_large_dof() {
        let mu = 0.3;
        let sigma = 1.7;
        for y in [0.3, 1.0, -2.5] {
            let d = DistributionParams { location: vec![mu], scale: vec![sigma], dof: vec![1e6] };
            let t_nll = student_t_nll(&d, &[y]);
            let g_nll = 0.5 * (2.0 * std::f64::consts::PI).ln() + sigma.ln()
                + (y - mu) * (y - mu) / (2.0 * sigma * sigma);
            assert!((t_nll - g_nll).abs() < 1e-4, "y={y}: {t_nll} vs {g_nll}");
        }
    }

    /// Central finite differences over every parameter entry.
    fn finite_difference(params: &MlpParameters, x: &[f64], y: &[f64], h: f64) -> Vec<Vec<f64>> {
        let mut fd = Vec::new();
        let n_blocks = params.blocks().len();
        for bi in 0..n_blocks {
            let len = params.blocks()[bi].1.len();
            let mut block = Vec::with_capacity(len);
            for i in 0..len {
                let mut plus = params.clone();
                plus.blocks_mut()[bi][i] += h;
                let mut minus = params.clone();
                minus.blocks_mut()[bi][i] -= h;
                let (dp, _) = forward(&plus, x).unwrap();
                let (dm, _) = forward(&minus, x).unwrap();
                block.push((student_t_nll(&dp, y) - student_t_nll(&dm, y)) / (2.0 * h));
            }
            fd.push(block);
        }
        fd
    }

    fn max_rel_err(analytic: &GradientTensor, fd: &[Vec<f64>]) -> f64 {
        let mut worst = 0.0f64;
        for (bi, (_, block)) in analytic.blocks.blocks().iter().enumerate() {
            for (i, &a) in block.iter().enumerate() {
                let b = fd[bi][i];
                let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-2);
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (shape, d) in [(Shape::Base, 1), (Shape::Diamond, 2), (Shape::Funnel, 10)] {
            let params = build(spec(shape, 5, 3, d), 7);
            let x = [0.4, -1.2, 0.9, 2.0, 0.3];
            let y = [1.5, -0.2, 0.8];
            let (_, cache) = forward(&params, &x).unwrap();
            let grads = backward(&params, &cache, &y);
            let fd = finite_difference(&params, &x, &y, 1e-5);
            let err = max_rel_err(&grads, &fd);
            assert!(err < 1e-4, "{shape:?} d={d}: max rel err {err}");
        }
    }

    #[test]
    fn backward_zero_residual_location_gradient_vanishes() {
        let params = build(spec(Shape::Base, 3, 2, 1), 3);
        let x = [1.0, 2.0, 3.0];
        let (dist, cache) = forward(&params, &x).unwrap();
        let grads = backward(&params, &cache, &dist.location);
        // At the mode the location score is zero, so nothing flows into the
        // location head.
        assert!(grads.blocks.head_loc.bias.abs() < 1e-15);
        for w in &grads.blocks.head_loc.weight {
            assert!(w.abs() < 1e-15);
        }
    }

    #[test]
    fn backward_scale_link_gradient_at_zero_residual() {
        // With y = mu the scale gradient reduces to the ln(sigma) term:
        // d NLL / d s_raw = sigmoid(s_raw) / sigma, averaged over timesteps.
        let arch = spec(Shape::Base, 2, 1, 1);
        let mut p = MlpParameters::zeros(arch);
        p.head_scale.bias = 0.3;
        let x = [2.0, 2.0];
        let (dist, cache) = forward(&p, &x).unwrap();
        let grads = backward(&p, &cache, &dist.location);
        let expected = sigmoid(0.3) / dist.scale[0];
        assert!((grads.blocks.head_scale.bias - expected).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_magnitude() {
        let arch = spec(Shape::Base, 1, 1, 1);
        let mut params = MlpParameters::zeros(arch);
        let mut grads = GradientTensor { blocks: MlpParameters::zeros(arch) };
        grads.blocks.backbone[0].weight[0] = 0.37;
        let mut state = AdamState::new(arch);
        let updated = adam_step(&mut params, &grads, &mut state, 0.01, 0.0);
        assert_eq!(updated, arch.param_count());
        // Bias-corrected first step moves by ~lr against the gradient sign.
        assert!((params.backbone[0].weight[0] + 0.01).abs() < 1e-6);
        // Entries with zero gradient stay put.
        assert_eq!(params.backbone[0].bias[0], 0.0);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let arch = spec(Shape::Base, 2, 1, 1);
        let mut params = build(arch, 11);
        let before = params.clone();
        let grads = GradientTensor { blocks: MlpParameters::zeros(arch) };
        let mut state = AdamState::new(arch);
        adam_step(&mut params, &grads, &mut state, 0.01, 0.0);
        assert_eq!(params, before);
    }

    #[test]
    fn adam_decay_only() {
        let arch = spec(Shape::Base, 1, 1, 1);
        let mut params = MlpParameters::zeros(arch);
        params.backbone[0].weight[0] = 2.0;
        let grads = GradientTensor { blocks: MlpParameters::zeros(arch) };
        let mut state = AdamState::new(arch);
        adam_step(&mut params, &grads, &mut state, 0.01, 0.1);
        assert!((params.backbone[0].weight[0] - 2.0 * (1.0 - 0.001)).abs() < 1e-15);
    }

    #[test]
    fn sampling_degenerate_scale_concentrates_on_location() {
        let dist = DistributionParams {
            location: vec![3.0, -1.0],
            scale: vec![SCALE_EPS, SCALE_EPS],
            dof: vec![5.0, 5.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for row in sample_forecast(&dist, 100, &mut rng) {
            assert!((row[0] - 3.0).abs() < 1e-3);
            assert!((row[1] + 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn sampling_variance_matches_student_t() {
        let dist = DistributionParams { location: vec![0.0], scale: vec![1.0], dof: vec![5.0] };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let samples = sample_forecast(&dist, 200_000, &mut rng);
        let mean: f64 = samples.iter().map(|r| r[0]).sum::<f64>() / samples.len() as f64;
        let var: f64 =
            samples.iter().map(|r| (r[0] - mean) * (r[0] - mean)).sum::<f64>() / samples.len() as f64;
        let expected = 5.0 / 3.0;
        assert!((var - expected).abs() / expected < 0.03, "var {var}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let dist = DistributionParams { location: vec![1.0], scale: vec![0.5], dof: vec![4.0] };
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(sample_forecast(&dist, 50, &mut r1), sample_forecast(&dist, 50, &mut r2));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let params = build(spec(Shape::Contracting, 7, 3, 10), 123);
        let bytes = checkpoint_to_bytes(&params);
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back, params);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(checkpoint_from_bytes(b"not a checkpoint").is_err());
    }
}
