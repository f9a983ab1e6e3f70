//! The denoiser `p_{1|t}(x_1^d | x_t)`: a small tanh MLP with hand-written
//! forward and backward passes, an Adam optimizer, frozen reference
//! snapshots and a JSON checkpoint format.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctmc::{Alphabet, Sequence};
use crate::error::{Error, Result};

/// Anything that maps a noisy sequence and a time to per-dimension
/// categorical distributions over the `S` real tokens.
pub trait Denoiser {
    fn alphabet(&self) -> Alphabet;
    fn num_dims(&self) -> usize;
    fn predict(&self, xt: &Sequence, t: f64) -> DenoiserOutput;
}

/// A denoiser whose parameters can be differentiated.
///
/// `backward` accumulates into `grads` the parameter gradient of a scalar
/// whose gradient with respect to the logits of `trace` is `dlogits`.
pub trait Differentiable: Denoiser {
    fn num_params(&self) -> usize;
    fn forward_trace(&self, xt: &Sequence, t: f64) -> (DenoiserOutput, Trace);
    fn backward(&self, trace: &Trace, dlogits: &[f64], grads: &mut GradAccumulator) -> Result<()>;
}

/// Per-dimension logits, log-probabilities and probabilities, each `D x S`
/// row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserOutput {
    dims: usize,
    tokens: usize,
    logits: Vec<f64>,
    log_probs: Vec<f64>,
    probs: Vec<f64>,
}

impl DenoiserOutput {
    pub fn from_logits(dims: usize, tokens: usize, logits: Vec<f64>) -> Self {
        assert_eq!(logits.len(), dims * tokens);
        let mut log_probs = vec![0.0; logits.len()];
        let mut probs = vec![0.0; logits.len()];
        for d in 0..dims {
            let row = &logits[d * tokens..(d + 1) * tokens];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            for j in 0..tokens {
                let lp = row[j] - lse;
                log_probs[d * tokens + j] = lp;
                probs[d * tokens + j] = lp.exp();
            }
        }
        Self {
            dims,
            tokens,
            logits,
            log_probs,
            probs,
        }
    }

    /// Wrap an explicit probability table. Logits are `ln p`, so zero
    /// entries become `-inf`.
    pub fn from_probs(dims: usize, tokens: usize, probs: Vec<f64>) -> Self {
        assert_eq!(probs.len(), dims * tokens);
        let log_probs: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        Self {
            dims,
            tokens,
            logits: log_probs.clone(),
            log_probs,
            probs,
        }
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn row(&self, d: usize) -> &[f64] {
        &self.probs[d * self.tokens..(d + 1) * self.tokens]
    }

    pub fn prob(&self, d: usize, j: usize) -> f64 {
        self.probs[d * self.tokens + j]
    }

    pub fn log_prob(&self, d: usize, j: usize) -> f64 {
        self.log_probs[d * self.tokens + j]
    }
}

/// A denoiser that returns the same table for every input.
#[derive(Clone, Debug)]
pub struct TableDenoiser {
    alphabet: Alphabet,
    dims: usize,
    probs: Vec<f64>,
}

impl TableDenoiser {
    pub fn new(alphabet: Alphabet, dims: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != dims * alphabet.size() {
            return Err(Error::Shape(format!(
                "table has {} entries, expected {dims} x {}",
                probs.len(),
                alphabet.size()
            )));
        }
        Ok(Self {
            alphabet,
            dims,
            probs,
        })
    }

    pub fn uniform(alphabet: Alphabet, dims: usize) -> Self {
        let s = alphabet.size();
        Self {
            alphabet,
            dims,
            probs: vec![1.0 / s as f64; dims * s],
        }
    }

    /// One-hot on `target[d]` in every dimension.
    pub fn constant(alphabet: Alphabet, target: &[usize]) -> Self {
        let s = alphabet.size();
        let mut probs = vec![0.0; target.len() * s];
        for (d, &j) in target.iter().enumerate() {
            probs[d * s + j] = 1.0;
        }
        Self {
            alphabet,
            dims: target.len(),
            probs,
        }
    }
}

impl Denoiser for TableDenoiser {
    fn alphabet(&self) -> Alphabet {
        self.alphabet
    }

    fn num_dims(&self) -> usize {
        self.dims
    }

    fn predict(&self, _xt: &Sequence, _t: f64) -> DenoiserOutput {
        DenoiserOutput::from_probs(self.dims, self.alphabet.size(), self.probs.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub n_dims: usize,
    pub n_tokens: usize,
    pub hidden: Vec<usize>,
}

impl Architecture {
    /// One-hot over `S + 1` symbols per dimension, plus `[t, 1 - t]`.
    pub fn input_width(&self) -> usize {
        self.n_dims * (self.n_tokens + 1) + 2
    }

    pub fn output_width(&self) -> usize {
        self.n_dims * self.n_tokens
    }

    /// `(fan_in, fan_out)` of every affine layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_width()];
        widths.extend(&self.hidden);
        widths.push(self.output_width());
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|(i, o)| i * o + o)
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_dims == 0 {
            return Err(Error::Config("architecture needs at least one dimension".into()));
        }
        Alphabet::new(self.n_tokens)?;
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LayerSlot {
    fan_in: usize,
    fan_out: usize,
    /// Weights are `fan_out x fan_in`, row-major, starting here.
    weight: usize,
    bias: usize,
}

fn layout(arch: &Architecture) -> Vec<LayerSlot> {
    let mut offset = 0;
    arch.layer_shapes()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let slot = LayerSlot {
                fan_in,
                fan_out,
                weight: offset,
                bias: offset + fan_in * fan_out,
            };
            offset += fan_in * fan_out + fan_out;
            slot
        })
        .collect()
}

/// Tanh MLP denoiser. All parameters live in one flat vector so optimizers
/// and gradient checks can address them uniformly.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    arch: Architecture,
    alphabet: Alphabet,
    layers: Vec<LayerSlot>,
    params: Vec<f64>,
}

impl Mlp {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let n = arch.num_params();
        Self::from_parts(arch, vec![0.0; n])
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut mlp = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for slot in mlp.layers.clone() {
            let a = (6.0 / (slot.fan_in + slot.fan_out) as f64).sqrt();
            for w in &mut mlp.params[slot.weight..slot.bias] {
                *w = rng.gen_range(-a..a);
            }
        }
        Ok(mlp)
    }

    pub fn from_parts(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.num_params() {
            return Err(Error::Shape(format!(
                "{} parameters supplied, architecture needs {}",
                params.len(),
                arch.num_params()
            )));
        }
        Ok(Self {
            alphabet: Alphabet::new(arch.n_tokens)?,
            layers: layout(&arch),
            arch,
            params,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Human-readable name of the block holding flat parameter `index`.
    pub fn block_name(&self, index: usize) -> String {
        for (l, slot) in self.layers.iter().enumerate() {
            if index < slot.bias {
                return format!("layer{l}.weight");
            }
            if index < slot.bias + slot.fan_out {
                return format!("layer{l}.bias");
            }
        }
        "out-of-range".into()
    }

    /// Flat index ranges of every weight and bias block, in layer order.
    pub fn blocks(&self) -> Vec<(String, std::ops::Range<usize>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, s)| {
                [
                    (format!("layer{l}.weight"), s.weight..s.bias),
                    (format!("layer{l}.bias"), s.bias..s.bias + s.fan_out),
                ]
            })
            .collect()
    }

    /// Output-layer bias, `D x S` row-major.
    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let last = *self.layers.last().expect("at least one layer");
        &mut self.params[last.bias..last.bias + last.fan_out]
    }

    pub fn encode_input(&self, xt: &Sequence, t: f64) -> Vec<f64> {
        let width = self.arch.n_tokens + 1;
        let mut input = vec![0.0; self.arch.input_width()];
        for (d, &tok) in xt.tokens().iter().enumerate() {
            input[d * width + tok] = 1.0;
        }
        let n = input.len();
        input[n - 2] = t;
        input[n - 1] = 1.0 - t;
        input
    }

    fn affine(&self, slot: &LayerSlot, input: &[f64]) -> Vec<f64> {
        let w = &self.params[slot.weight..slot.bias];
        let b = &self.params[slot.bias..slot.bias + slot.fan_out];
        (0..slot.fan_out)
            .map(|o| {
                let row = &w[o * slot.fan_in..(o + 1) * slot.fan_in];
                b[o] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect()
    }

    fn run(&self, xt: &Sequence, t: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
        assert_eq!(xt.len(), self.arch.n_dims, "sequence length mismatch");
        let mut activations = vec![self.encode_input(xt, t)];
        let last = self.layers.len() - 1;
        for (l, slot) in self.layers.iter().enumerate() {
            let mut z = self.affine(slot, activations.last().unwrap());
            if l == last {
                return (z, activations);
            }
            z.iter_mut().for_each(|v| *v = v.tanh());
            activations.push(z);
        }
        unreachable!("layer loop returns at the output layer")
    }
}

/// Layer inputs recorded by a forward pass, consumed by `backward`.
#[derive(Clone, Debug)]
pub struct Trace {
    activations: Vec<Vec<f64>>,
}

impl Denoiser for Mlp {
    fn alphabet(&self) -> Alphabet {
        self.alphabet
    }

    fn num_dims(&self) -> usize {
        self.arch.n_dims
    }

    fn predict(&self, xt: &Sequence, t: f64) -> DenoiserOutput {
        let (logits, _) = self.run(xt, t);
        DenoiserOutput::from_logits(self.arch.n_dims, self.arch.n_tokens, logits)
    }
}

impl Differentiable for Mlp {
    fn num_params(&self) -> usize {
        self.params.len()
    }

    fn forward_trace(&self, xt: &Sequence, t: f64) -> (DenoiserOutput, Trace) {
        let (logits, activations) = self.run(xt, t);
        (
            DenoiserOutput::from_logits(self.arch.n_dims, self.arch.n_tokens, logits),
            Trace { activations },
        )
    }

    fn backward(&self, trace: &Trace, dlogits: &[f64], grads: &mut GradAccumulator) -> Result<()> {
        if dlogits.len() != self.arch.output_width() {
            return Err(Error::Shape(format!(
                "logit gradient has {} entries, expected {}",
                dlogits.len(),
                self.arch.output_width()
            )));
        }
        if grads.len() != self.params.len() || trace.activations.len() != self.layers.len() {
            return Err(Error::Shape("gradient buffer or trace does not match the network".into()));
        }
        let g = &mut grads.values;
        let mut delta = dlogits.to_vec();
        for l in (0..self.layers.len()).rev() {
            let slot = self.layers[l];
            let input = &trace.activations[l];
            for o in 0..slot.fan_out {
                let dz = delta[o];
                if dz == 0.0 {
                    continue;
                }
                g[slot.bias + o] += dz;
                let row = &mut g[slot.weight + o * slot.fan_in..slot.weight + (o + 1) * slot.fan_in];
                for (gw, x) in row.iter_mut().zip(input) {
                    *gw += dz * x;
                }
            }
            if l == 0 {
                break;
            }
            let w = &self.params[slot.weight..slot.bias];
            let mut upstream = vec![0.0; slot.fan_in];
            for o in 0..slot.fan_out {
                let dz = delta[o];
                if dz == 0.0 {
                    continue;
                }
                let row = &w[o * slot.fan_in..(o + 1) * slot.fan_in];
                for (u, wv) in upstream.iter_mut().zip(row) {
                    *u += dz * wv;
                }
            }
            // `input` is tanh output of the previous layer.
            for (u, a) in upstream.iter_mut().zip(input) {
                *u *= 1.0 - a * a;
            }
            delta = upstream;
        }
        Ok(())
    }
}

/// Flat gradient buffer congruent with a network's parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GradAccumulator {
    values: Vec<f64>,
}

impl GradAccumulator {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn for_model<M: Differentiable + ?Sized>(model: &M) -> Self {
        Self::zeros(model.num_params())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn zero(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn add(&mut self, other: &GradAccumulator) {
        assert_eq!(self.len(), other.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. Non-finite gradients are rejected before
/// any parameter is touched.
pub fn optimizer_step(
    model: &mut Mlp,
    grads: &GradAccumulator,
    state: &mut AdamState,
    hyper: &AdamConfig,
) -> Result<()> {
    if grads.len() != model.params.len() || state.m.len() != model.params.len() {
        return Err(Error::Shape("optimizer buffers do not match the network".into()));
    }
    if let Some(i) = grads.values.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            block: model.block_name(i),
        });
    }
    state.step += 1;
    let bc1 = 1.0 - hyper.beta1.powi(state.step as i32);
    let bc2 = 1.0 - hyper.beta2.powi(state.step as i32);
    for (i, &g) in grads.values.iter().enumerate() {
        let m = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        let v = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        model.params[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}

/// Frozen copy of a denoiser used as the DPO reference. There is no way to
/// mutate it after construction.
#[derive(Clone, Debug)]
pub struct RefModel {
    inner: Mlp,
}

pub fn snapshot_ref(model: &Mlp) -> RefModel {
    RefModel {
        inner: model.clone(),
    }
}

impl RefModel {
    pub fn params(&self) -> &Mlp {
        &self.inner
    }
}

impl Denoiser for RefModel {
    fn alphabet(&self) -> Alphabet {
        self.inner.alphabet()
    }

    fn num_dims(&self) -> usize {
        self.inner.num_dims()
    }

    fn predict(&self, xt: &Sequence, t: f64) -> DenoiserOutput {
        self.inner.predict(xt, t)
    }
}

pub const CHECKPOINT_FORMAT: &str = "d2dpo-denoiser";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    architecture: Architecture,
    params: Vec<f64>,
}

impl Mlp {
    pub fn to_checkpoint_json(&self) -> String {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            architecture: self.arch.clone(),
            params: self.params.clone(),
        };
        serde_json::to_string(&file).expect("checkpoint serialises")
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {} is not supported (expected {CHECKPOINT_VERSION})",
                file.version
            )));
        }
        if file.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Self::from_parts(file.architecture, file.params)
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_checkpoint_json(&text)
    }
}
