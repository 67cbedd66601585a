//! Small fully connected Q-network with hand-written backpropagation.
//!
//! Parameters live in one flat vector. Layer `l` maps `dims[l]` inputs to
//! `dims[l + 1]` outputs; its weights are stored input-major (`w[i * out + o]`)
//! followed by its biases. Hidden layers use ReLU, the output layer is linear.
//!
//! Networks are generic over their scalar type (`f64` by default, `f32` for
//! lighter storage). Hyperparameters such as learning and target rates are
//! always `f64`.
//!
//! Batched passes run through a register-blocked matrix product.

use std::fmt;
use std::io::{self, Read, Write};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gemm::{gemm_acc, Lhs};

/// Hidden width of every Q-network in the simulator.
pub const HIDDEN: usize = 64;

/// Floating-point scalar a network can be built from.
pub trait Real:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Leading bytes of a binary checkpoint holding this scalar type.
    const CHECKPOINT_MAGIC: [u8; 8];

    /// Nearest representable value.
    fn cast(x: f64) -> Self;

    /// Exact widening to `f64`.
    fn into_f64(self) -> f64;

    fn write_le<W: Write>(self, out: &mut W) -> io::Result<()>;

    fn read_le<R: Read>(input: &mut R) -> io::Result<Self>;
}

impl Real for f64 {
    const CHECKPOINT_MAGIC: [u8; 8] = *b"MFQNET01";

    fn cast(x: f64) -> Self {
        x
    }

    fn into_f64(self) -> f64 {
        self
    }

    fn write_le<W: Write>(self, out: &mut W) -> io::Result<()> {
        out.write_all(&self.to_le_bytes())
    }

    fn read_le<R: Read>(input: &mut R) -> io::Result<Self> {
        let mut bytes = [0u8; 8];
        input.read_exact(&mut bytes)?;
        Ok(f64::from_le_bytes(bytes))
    }
}

impl Real for f32 {
    const CHECKPOINT_MAGIC: [u8; 8] = *b"MFQNET32";

    fn cast(x: f64) -> Self {
        x as f32
    }

    fn into_f64(self) -> f64 {
        f64::from(self)
    }

    fn write_le<W: Write>(self, out: &mut W) -> io::Result<()> {
        out.write_all(&self.to_le_bytes())
    }

    fn read_le<R: Read>(input: &mut R) -> io::Result<Self> {
        let mut bytes = [0u8; 4];
        input.read_exact(&mut bytes)?;
        Ok(f32::from_le_bytes(bytes))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerShape {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    biases: usize,
}

fn layer_shapes(dims: &[usize]) -> (Vec<LayerShape>, usize) {
    let mut offset = 0;
    let shapes = dims
        .windows(2)
        .map(|w| {
            let shape = LayerShape {
                fan_in: w[0],
                fan_out: w[1],
                weights: offset,
                biases: offset + w[0] * w[1],
            };
            offset += w[0] * w[1] + w[1];
            shape
        })
        .collect();
    (shapes, offset)
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::InvalidConfig(format!(
            "network dims {dims:?} need at least two entries, all >= 1"
        )));
    }
    Ok(())
}

/// Multilayer perceptron `dims[0] -> .. -> dims[last]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork<T = f64> {
    dims: Vec<usize>,
    layers: Vec<LayerShape>,
    params: Vec<T>,
}

/// Parameter gradients, laid out exactly like [`QNetwork`] parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T = f64>(Vec<T>);

impl<T: Real> Gradients<T> {
    pub fn from_vec(values: Vec<T>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn fill_zero(&mut self) {
        self.0.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn scale(&mut self, factor: f64) {
        let factor = T::cast(factor);
        self.0.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }
}

/// Per-layer activations of a batched forward pass, reused between calls.
#[derive(Debug, Clone, Default)]
pub struct BatchActivations<T = f64> {
    batch: usize,
    /// `acts[0]` is the input; `acts[l + 1]` is the output of layer `l`.
    acts: Vec<Vec<T>>,
    delta: Vec<T>,
    delta_prev: Vec<T>,
    w_t: Vec<T>,
}

impl<T: Real> BatchActivations<T> {
    pub fn new() -> Self {
        Self {
            batch: 0,
            acts: Vec::new(),
            delta: Vec::new(),
            delta_prev: Vec::new(),
            w_t: Vec::new(),
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Row `b` of the network output.
    pub fn output(&self, b: usize) -> &[T] {
        let out = self.acts.last().expect("forward has not been run");
        let width = out.len() / self.batch;
        &out[b * width..(b + 1) * width]
    }
}

impl<T: Real> QNetwork<T> {
    /// All-zero network with the given layer widths.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        let (layers, n) = layer_shapes(dims);
        Ok(Self {
            dims: dims.to_vec(),
            layers,
            params: vec![T::zero(); n],
        })
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero. The draws are made
    /// in `f64`, so networks of either precision built from one seed agree up
    /// to rounding.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in net.layers.clone() {
            let bound = 1.0 / (layer.fan_in as f64).sqrt();
            for w in &mut net.params[layer.weights..layer.biases] {
                *w = T::cast(rng.gen_range(-bound..=bound));
            }
        }
        Ok(net)
    }

    pub fn from_params(dims: &[usize], params: Vec<T>) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        if params.len() != net.params.len() {
            return Err(Error::Shape(format!(
                "{} parameters supplied for dims {dims:?} which need {}",
                params.len(),
                net.params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn zero_gradients(&self) -> Gradients<T> {
        Gradients(vec![T::zero(); self.params.len()])
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn same_shape(&self, other: &QNetwork<T>) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "architectures differ: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        let mut acts = BatchActivations::new();
        self.forward_batch(x, 1, &mut acts)?;
        Ok(acts.output(0).to_vec())
    }

    /// Forward pass over `batch` row-major inputs, keeping every layer's
    /// activations in `acts` for a subsequent [`QNetwork::backward_batch`].
    pub fn forward_batch(&self, inputs: &[T], batch: usize, acts: &mut BatchActivations<T>) -> Result<()> {
        if batch == 0 || inputs.len() != batch * self.input_dim() {
            return Err(Error::Shape(format!(
                "expected {batch} x {} inputs, got {}",
                self.input_dim(),
                inputs.len()
            )));
        }
        acts.batch = batch;
        acts.acts.resize_with(self.dims.len(), Vec::new);
        acts.acts[0].clear();
        acts.acts[0].extend_from_slice(inputs);

        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (before, after) = acts.acts.split_at_mut(l + 1);
            let x = &before[l];
            let y = &mut after[0];
            y.resize(batch * layer.fan_out, T::zero());
            let w = &self.params[layer.weights..layer.biases];
            let bias = &self.params[layer.biases..layer.biases + layer.fan_out];
            for yrow in y.chunks_exact_mut(layer.fan_out) {
                yrow.copy_from_slice(bias);
            }
            gemm_acc(batch, layer.fan_out, layer.fan_in, Lhs::normal(x, layer.fan_in), w, y);
            if l != last {
                y.iter_mut().for_each(|v| *v = v.max(T::zero()));
            }
        }
        Ok(())
    }

    /// Accumulates into `grads` the gradient of `sum_b <d_output[b], f(x_b)>`
    /// with respect to every parameter, using the activations recorded by the
    /// preceding [`QNetwork::forward_batch`] call on this network.
    pub fn backward_batch(
        &self,
        acts: &mut BatchActivations<T>,
        d_output: &[T],
        grads: &mut Gradients<T>,
    ) -> Result<()> {
        let batch = acts.batch;
        if acts.acts.len() != self.dims.len() || batch == 0 {
            return Err(Error::Shape("backward called without a matching forward pass".into()));
        }
        if d_output.len() != batch * self.output_dim() {
            return Err(Error::Shape(format!(
                "expected {batch} x {} output gradients, got {}",
                self.output_dim(),
                d_output.len()
            )));
        }
        if grads.len() != self.params.len() {
            return Err(Error::Shape("gradient buffer does not match network".into()));
        }

        let BatchActivations {
            acts: layer_acts,
            delta,
            delta_prev,
            w_t,
            ..
        } = acts;
        delta.clear();
        delta.extend_from_slice(d_output);

        for (l, layer) in self.layers.iter().enumerate().rev() {
            let (fi, fo) = (layer.fan_in, layer.fan_out);
            let x = &layer_acts[l];
            let w = &self.params[layer.weights..layer.biases];
            let (gw, gb) = grads.0[layer.weights..layer.biases + fo].split_at_mut(fi * fo);
            for drow in delta.chunks_exact(fo) {
                for (g, &d) in gb.iter_mut().zip(drow) {
                    *g += d;
                }
            }
            gemm_acc(fi, fo, batch, Lhs::transposed(x, fi), delta, gw);
            if l == 0 {
                break;
            }
            // Propagate to the previous layer's output through its ReLU.
            w_t.clear();
            w_t.resize(fo * fi, T::zero());
            for (i, wrow) in w.chunks_exact(fo).enumerate() {
                for (o, &v) in wrow.iter().enumerate() {
                    w_t[o * fi + i] = v;
                }
            }
            delta_prev.clear();
            delta_prev.resize(batch * fi, T::zero());
            gemm_acc(batch, fi, fo, Lhs::normal(delta, fo), w_t, delta_prev);
            for (p, &xi) in delta_prev.iter_mut().zip(x) {
                if xi <= T::zero() {
                    *p = T::zero();
                }
            }
            std::mem::swap(delta, delta_prev);
        }
        Ok(())
    }

    /// Gradient of `<d_output, f(x)>` for a single input.
    pub fn backward(&self, x: &[T], d_output: &[T]) -> Result<Gradients<T>> {
        let mut acts = BatchActivations::new();
        self.forward_batch(x, 1, &mut acts)?;
        let mut grads = self.zero_gradients();
        self.backward_batch(&mut acts, d_output, &mut grads)?;
        Ok(grads)
    }

    /// Moves every parameter toward `source`: `p <- tau * source + (1 - tau) * p`.
    pub fn soft_update_from(&mut self, source: &QNetwork<T>, tau: f64) -> Result<()> {
        self.same_shape(source)?;
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::InvalidConfig(format!("tau {tau} not in (0, 1]")));
        }
        if tau == 1.0 {
            self.params.copy_from_slice(&source.params);
            return Ok(());
        }
        // t + tau * (s - t) leaves t bit-identical when s == t.
        let tau = T::cast(tau);
        for (t, &s) in self.params.iter_mut().zip(&source.params) {
            *t += tau * (s - *t);
        }
        Ok(())
    }

    /// Serializes as a little-endian binary blob: magic (which also names the
    /// scalar type), layer count, dims, then every parameter's raw bits.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(&T::CHECKPOINT_MAGIC)?;
        out.write_all(&(self.dims.len() as u64).to_le_bytes())?;
        for &d in &self.dims {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for &p in &self.params {
            p.write_le(&mut out)?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if magic != T::CHECKPOINT_MAGIC {
            return Err(Error::Shape("not a network checkpoint of this precision".into()));
        }
        let next = |input: &mut R| -> Result<usize> {
            let mut word = [0u8; 8];
            input.read_exact(&mut word)?;
            Ok(u64::from_le_bytes(word) as usize)
        };
        let n_dims = next(&mut input)?;
        if n_dims > 64 {
            return Err(Error::Shape(format!("implausible layer count {n_dims}")));
        }
        let dims = (0..n_dims).map(|_| next(&mut input)).collect::<Result<Vec<_>>>()?;
        let mut net = Self::zeros(&dims)?;
        for p in &mut net.params {
            *p = T::read_le(&mut input)?;
        }
        Ok(net)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint {
            dims: self.dims.clone(),
            params: self.params.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint<T> = serde_json::from_str(text)?;
        Self::from_params(&ck.dims, ck.params)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Real")]
struct Checkpoint<T> {
    dims: Vec<usize>,
    params: Vec<T>,
}

/// `target <- tau * source + (1 - tau) * target`.
pub fn soft_update_params<T: Real>(target: &mut QNetwork<T>, source: &QNetwork<T>, tau: f64) -> Result<()> {
    target.soft_update_from(source, tau)
}

/// Adam moments for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T = f64> {
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
    learning_rate: f64,
}

impl<T: Real> OptimizerState<T> {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPSILON: f64 = 1e-8;

    pub fn new(net: &QNetwork<T>, learning_rate: f64) -> Self {
        Self {
            m: vec![T::zero(); net.n_params()],
            v: vec![T::zero(); net.n_params()],
            step: 0,
            learning_rate,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn first_moment(&self) -> &[T] {
        &self.m
    }

    pub fn second_moment(&self) -> &[T] {
        &self.v
    }

    /// One bias-corrected Adam update. Non-finite gradients are rejected
    /// before anything is modified.
    pub fn apply(&mut self, net: &mut QNetwork<T>, grads: &Gradients<T>) -> Result<()> {
        if grads.len() != net.n_params() || self.m.len() != net.n_params() {
            return Err(Error::Shape("optimizer state does not match network".into()));
        }
        if !grads.is_finite() {
            return Err(Error::InvalidCall("non-finite gradient".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - Self::BETA1.powi(t);
        let bc2 = 1.0 - Self::BETA2.powi(t);
        // Bias corrections folded into the step size and epsilon:
        // lr * (m / bc1) / (sqrt(v / bc2) + eps) == step * m / (sqrt(v) + eps_hat).
        let step = T::cast(self.learning_rate * bc2.sqrt() / bc1);
        let eps_hat = T::cast(Self::EPSILON * bc2.sqrt());
        let (b1, b2) = (T::cast(Self::BETA1), T::cast(Self::BETA2));
        let (c1, c2) = (T::cast(1.0 - Self::BETA1), T::cast(1.0 - Self::BETA2));
        let n = net.params.len();
        let (p, m, v, g) = (
            &mut net.params[..n],
            &mut self.m[..n],
            &mut self.v[..n],
            &grads.as_slice()[..n],
        );
        for i in 0..n {
            m[i] = b1 * m[i] + c1 * g[i];
            v[i] = b2 * v[i] + c2 * g[i] * g[i];
            p[i] -= step * m[i] / (v[i].sqrt() + eps_hat);
        }
        Ok(())
    }
}

pub fn optimizer_step<T: Real>(
    net: &mut QNetwork<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    state.apply(net, grads)
}

/// Loss used by [`gradient_check`] and the on/off state of every hidden ReLU.
fn probe_loss(net: &QNetwork, x: &[f64], acts: &mut BatchActivations) -> Result<(f64, Vec<bool>)> {
    net.forward_batch(x, 1, acts)?;
    let loss = 0.5 * acts.output(0).iter().map(|o| o * o).sum::<f64>();
    let pattern = acts.acts[1..acts.acts.len() - 1]
        .iter()
        .flatten()
        .map(|&a| a > 0.0)
        .collect();
    Ok((loss, pattern))
}

/// Worst relative disagreement between [`QNetwork::backward`] and central
/// finite differences (step `1e-5`) of `0.5 * |f(x)|^2`, over all parameters.
///
/// Within a fixed ReLU pattern the loss is quadratic in any single parameter,
/// so the central difference is exact up to rounding. When a `±h` probe flips
/// a ReLU, the derivative is taken from the side that keeps the pattern, with
/// the second-order one-sided stencil. Pairs where both values are below
/// `1e-12` are compared absolutely, so two zero gradients score zero.
pub fn gradient_check(net: &QNetwork, x: &[f64]) -> Result<f64> {
    const H: f64 = 1e-5;
    let mut acts = BatchActivations::new();
    let out = net.forward(x)?;
    let analytic = net.backward(x, &out)?;
    let (base, pattern) = probe_loss(net, x, &mut acts)?;

    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for i in 0..net.n_params() {
        let orig = net.params[i];
        let mut at = |offset: f64| -> Result<(f64, bool)> {
            probe.params[i] = orig + offset;
            let (l, p) = probe_loss(&probe, x, &mut acts)?;
            probe.params[i] = orig;
            Ok((l, p == pattern))
        };
        let (up, up_same) = at(H)?;
        let (down, down_same) = at(-H)?;
        let numeric = if up_same && down_same {
            (up - down) / (2.0 * H)
        } else if let ((up2, true), true) = (at(2.0 * H)?, up_same) {
            (-3.0 * base + 4.0 * up - up2) / (2.0 * H)
        } else if let ((down2, true), true) = (at(-2.0 * H)?, down_same) {
            (3.0 * base - 4.0 * down + down2) / (2.0 * H)
        } else {
            (up - down) / (2.0 * H)
        };
        let a = analytic.0[i];
        let scale = a.abs().max(numeric.abs());
        let err = if scale < 1e-12 {
            (a - numeric).abs()
        } else {
            (a - numeric).abs() / scale
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Two evaluation networks and their Polyak-averaged targets.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetworkPair<T = f64> {
    pub eval_1: QNetwork<T>,
    pub eval_2: QNetwork<T>,
    pub target_1: QNetwork<T>,
    pub target_2: QNetwork<T>,
}

impl<T: Real> QNetworkPair<T> {
    /// Independent evaluation networks seeded from `seed_1` and `seed_2`;
    /// targets start as exact copies.
    pub fn new(dims: &[usize], seed_1: u64, seed_2: u64) -> Result<Self> {
        let eval_1 = QNetwork::new(dims, seed_1)?;
        let eval_2 = QNetwork::new(dims, seed_2)?;
        Ok(Self {
            target_1: eval_1.clone(),
            target_2: eval_2.clone(),
            eval_1,
            eval_2,
        })
    }

    pub fn from_parts(
        eval_1: QNetwork<T>,
        eval_2: QNetwork<T>,
        target_1: QNetwork<T>,
        target_2: QNetwork<T>,
    ) -> Result<Self> {
        for other in [&eval_2, &target_1, &target_2] {
            eval_1.same_shape(other)?;
        }
        Ok(Self {
            eval_1,
            eval_2,
            target_1,
            target_2,
        })
    }

    pub fn soft_update_targets(&mut self, tau: f64) -> Result<()> {
        self.target_1.soft_update_from(&self.eval_1, tau)?;
        self.target_2.soft_update_from(&self.eval_2, tau)
    }

    pub fn is_finite(&self) -> bool {
        self.eval_1.is_finite() && self.eval_2.is_finite() && self.target_1.is_finite() && self.target_2.is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    // The checks below run in double precision.
    type QNetwork = super::QNetwork<f64>;
    type QNetworkPair = super::QNetworkPair<f64>;
    type OptimizerState = super::OptimizerState<f64>;
    type BatchActivations = super::BatchActivations<f64>;

    const ARCH_MF: [usize; 4] = [20, 64, 64, 10];
    const ARCH_IDQL: [usize; 4] = [10, 64, 64, 10];

    fn sample_input(dim: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    // Straight-line matrix arithmetic over nested weight matrices, indexed
    // independently of the flat layout used by the network.
    fn reference_forward(net: &QNetwork, x: &[f64]) -> Vec<f64> {
        let dims = net.dims();
        let mut offset = 0;
        let mut a = x.to_vec();
        for l in 0..dims.len() - 1 {
            let (fi, fo) = (dims[l], dims[l + 1]);
            let w: Vec<Vec<f64>> = (0..fo)
                .map(|o| (0..fi).map(|i| net.params()[offset + i * fo + o]).collect())
                .collect();
            let b = &net.params()[offset + fi * fo..offset + fi * fo + fo];
            offset += fi * fo + fo;
            let mut z: Vec<f64> = (0..fo)
                .map(|o| b[o] + (0..fi).map(|i| w[o][i] * a[i]).sum::<f64>())
                .collect();
            if l + 2 < dims.len() {
                for v in &mut z {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            a = z;
        }
        a
    }

    #[test]
    fn init_is_deterministic() {
        let a = QNetwork::new(&ARCH_MF, 7).unwrap();
        let b = QNetwork::new(&ARCH_MF, 7).unwrap();
        let c = QNetwork::new(&ARCH_MF, 8).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        assert_eq!(a.n_params(), 20 * 64 + 64 + 64 * 64 + 64 + 64 * 10 + 10);
    }

    #[test]
    fn init_scale_bound() {
        for seed in 0..20 {
            let net = QNetwork::new(&[1, 1], seed).unwrap();
            assert!(net.params()[0].abs() <= 1.0);
            assert_eq!(net.params()[1], 0.0);
        }
        let net = QNetwork::new(&ARCH_MF, 3).unwrap();
        let bound = 1.0 / 20f64.sqrt();
        assert!(net.params()[..20 * 64].iter().all(|w| w.abs() <= bound));
        assert!(net.params()[20 * 64..20 * 64 + 64].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(matches!(QNetwork::new(&[], 0), Err(Error::InvalidConfig(_))));
        assert!(QNetwork::new(&[4], 0).is_err());
        assert!(QNetwork::new(&[4, 0, 2], 0).is_err());
    }

    #[test]
    fn forward_zero_net() {
        let net = QNetwork::zeros(&ARCH_MF).unwrap();
        let out = net.forward(&sample_input(20, 1)).unwrap();
        assert_eq!(out, vec![0.0; 10]);
    }

    #[test]
    fn forward_identity_chain_clamps() {
        let net = QNetwork::from_params(&[1, 1, 1, 1], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(net.forward(&[-3.0]).unwrap(), vec![0.0]);
        assert_eq!(net.forward(&[2.5]).unwrap(), vec![2.5]);
    }

    #[test]
    fn forward_matches_reference() {
        for seed in 0..5 {
            let net = QNetwork::new(&ARCH_MF, seed).unwrap();
            let x = sample_input(20, 100 + seed);
            let got = net.forward(&x).unwrap();
            let want = reference_forward(&net, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn forward_shape_error() {
        let net = QNetwork::new(&ARCH_MF, 0).unwrap();
        assert!(matches!(net.forward(&[0.0; 10]), Err(Error::Shape(_))));
    }

    #[test]
    fn batch_forward_matches_single() {
        let net = QNetwork::new(&ARCH_MF, 4).unwrap();
        let inputs: Vec<f64> = (0..5).flat_map(|s| sample_input(20, s)).collect();
        let mut acts = BatchActivations::new();
        net.forward_batch(&inputs, 5, &mut acts).unwrap();
        for b in 0..5 {
            assert_eq!(acts.output(b), net.forward(&inputs[b * 20..(b + 1) * 20]).unwrap());
        }
    }

    #[test]
    fn batch_backward_is_sum_of_singles() {
        let net = QNetwork::new(&ARCH_IDQL, 9).unwrap();
        let inputs: Vec<f64> = (0..4).flat_map(|s| sample_input(10, 50 + s)).collect();
        let d_out: Vec<f64> = sample_input(40, 77);
        let mut acts = BatchActivations::new();
        net.forward_batch(&inputs, 4, &mut acts).unwrap();
        let mut batched = net.zero_gradients();
        net.backward_batch(&mut acts, &d_out, &mut batched).unwrap();

        let mut summed = net.zero_gradients();
        for b in 0..4 {
            let g = net
                .backward(&inputs[b * 10..(b + 1) * 10], &d_out[b * 10..(b + 1) * 10])
                .unwrap();
            for (s, v) in summed.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *s += v;
            }
        }
        for (a, b) in batched.as_slice().iter().zip(summed.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_zero_upstream() {
        let net = QNetwork::new(&ARCH_MF, 1).unwrap();
        let g = net.backward(&sample_input(20, 2), &[0.0; 10]).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_single_linear_layer() {
        let net = QNetwork::new(&[3, 1], 5).unwrap();
        let x = [0.5, -2.0, 3.0];
        let g = net.backward(&x, &[1.0]).unwrap();
        assert_eq!(&g.as_slice()[..3], &x);
        assert_eq!(g.as_slice()[3], 1.0);
    }

    #[test]
    fn backward_shape_error() {
        let net = QNetwork::new(&ARCH_MF, 1).unwrap();
        assert!(matches!(
            net.backward(&sample_input(20, 2), &[0.0; 9]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn gradient_check_architectures() {
        for (arch, seed) in [(&ARCH_MF[..], 11), (&ARCH_IDQL[..], 12)] {
            let net = QNetwork::new(arch, seed).unwrap();
            let err = gradient_check(&net, &sample_input(arch[0], seed)).unwrap();
            assert!(err < 1e-4, "{arch:?}: {err}");
        }
    }

    #[test]
    fn gradient_check_zero_net() {
        let net = QNetwork::zeros(&ARCH_MF).unwrap();
        assert_eq!(gradient_check(&net, &[0.0; 20]).unwrap(), 0.0);
    }

    #[test]
    fn gradient_check_handles_relu_kink() {
        // Hidden pre-activation 3e-6: a -1e-5 probe on its bias switches the unit off.
        let net = QNetwork::from_params(&[1, 1, 1], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(gradient_check(&net, &[3e-6]).unwrap() < 1e-6);
    }

    #[test]
    fn gradient_check_linear() {
        let net = QNetwork::new(&[1, 1], 3).unwrap();
        assert!(gradient_check(&net, &[0.7]).unwrap() < 1e-7);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut net = QNetwork::new(&ARCH_IDQL, 2).unwrap();
        let before = net.clone();
        let mut opt = OptimizerState::new(&net, 1e-3);
        let zeros = net.zero_gradients();
        optimizer_step(&mut net, &zeros, &mut opt).unwrap();
        assert_eq!(net, before);
        assert!(opt.first_moment().iter().all(|&m| m == 0.0));
        assert!(opt.second_moment().iter().all(|&v| v == 0.0));
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adam_moves_against_constant_gradient() {
        let mut net = QNetwork::from_params(&[1, 1], vec![0.0, 0.0]).unwrap();
        let grads = Gradients::from_vec(vec![0.3, -2.0]);
        let mut opt = OptimizerState::new(&net, 1e-3);
        for _ in 0..200 {
            optimizer_step(&mut net, &grads, &mut opt).unwrap();
        }
        assert!(net.params()[0] < 0.0);
        assert!(net.params()[1] > 0.0);
    }

    #[test]
    fn adam_first_step_closed_form() {
        // m_hat = g and v_hat = g^2 after one step, so the move is lr * g / (|g| + eps).
        let lr = 1e-3;
        let g = [0.25, -4.0];
        let mut net = QNetwork::from_params(&[1, 1], vec![1.0, 1.0]).unwrap();
        let mut opt = OptimizerState::new(&net, lr);
        optimizer_step(&mut net, &Gradients::from_vec(g.to_vec()), &mut opt).unwrap();
        for (p, gi) in net.params().iter().zip(g) {
            let expected = 1.0 - lr * gi / (gi.abs() + 1e-8);
            assert!((p - expected).abs() < 1e-15);
            assert!(((1.0 - p).abs() - lr).abs() < 1e-9);
        }
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut net = QNetwork::from_params(&[1, 1], vec![1.0, 1.0]).unwrap();
        let mut opt = OptimizerState::new(&net, 1e-3);
        let err = optimizer_step(&mut net, &Gradients::from_vec(vec![f64::NAN, 0.0]), &mut opt);
        assert!(err.is_err());
        assert_eq!(net.params(), &[1.0, 1.0]);
    }

    #[test]
    fn soft_update_examples() {
        let source = QNetwork::new(&ARCH_IDQL, 1).unwrap();
        let mut target = QNetwork::new(&ARCH_IDQL, 2).unwrap();
        soft_update_params(&mut target, &source, 1.0).unwrap();
        assert_eq!(target, source);

        let mut same = source.clone();
        soft_update_params(&mut same, &source, 0.3).unwrap();
        assert_eq!(same, source);

        let mut t = QNetwork::from_params(&[1, 1], vec![0.0, 0.0]).unwrap();
        let s = QNetwork::from_params(&[1, 1], vec![2.0, 2.0]).unwrap();
        soft_update_params(&mut t, &s, 0.5).unwrap();
        assert_eq!(t.params(), &[1.0, 1.0]);

        let mut wrong = QNetwork::new(&ARCH_MF, 0).unwrap();
        assert!(matches!(
            soft_update_params(&mut wrong, &source, 0.5),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn soft_update_contracts_geometrically() {
        let source = QNetwork::new(&ARCH_IDQL, 1).unwrap();
        let mut target = QNetwork::new(&ARCH_IDQL, 2).unwrap();
        let tau = 0.1;
        let dist = |t: &QNetwork| -> f64 {
            t.params()
                .iter()
                .zip(source.params())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let mut prev = dist(&target);
        for _ in 0..20 {
            soft_update_params(&mut target, &source, tau).unwrap();
            let d = dist(&target);
            assert!((d - (1.0 - tau) * prev).abs() <= 1e-12 + 1e-9 * prev);
            prev = d;
        }
    }

    #[test]
    fn pair_targets_start_as_copies() {
        let pair = QNetworkPair::new(&ARCH_MF, 1, 2).unwrap();
        assert_eq!(pair.eval_1, pair.target_1);
        assert_eq!(pair.eval_2, pair.target_2);
        assert_ne!(pair.eval_1, pair.eval_2);
    }

    #[test]
    fn checkpoint_binary_and_json_are_bit_exact() {
        let net = QNetwork::new(&ARCH_MF, 21).unwrap();
        let mut buf = Vec::new();
        net.write_binary(&mut buf).unwrap();
        let back = QNetwork::read_binary(buf.as_slice()).unwrap();
        assert_eq!(back, net);

        let json = net.to_json().unwrap();
        let back = QNetwork::from_json(&json).unwrap();
        assert!(back
            .params()
            .iter()
            .zip(net.params())
            .all(|(a, b)| a.to_bits() == b.to_bits()));

        assert!(QNetwork::read_binary(&b"garbage!"[..]).is_err());
    }

    #[test]
    fn single_precision_network_matches_and_roundtrips() {
        let wide = QNetwork::new(&ARCH_MF, 4).unwrap();
        let narrow = super::QNetwork::<f32>::new(&ARCH_MF, 4).unwrap();
        let x: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let xn: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        for (a, b) in wide.forward(&x).unwrap().iter().zip(narrow.forward(&xn).unwrap()) {
            assert!((a - b as f64).abs() < 1e-5);
        }

        let mut buf = Vec::new();
        narrow.write_binary(&mut buf).unwrap();
        assert_eq!(super::QNetwork::<f32>::read_binary(buf.as_slice()).unwrap(), narrow);
        // Checkpoints of one precision are not readable as the other.
        assert!(QNetwork::read_binary(buf.as_slice()).is_err());
        let json = narrow.to_json().unwrap();
        assert_eq!(super::QNetwork::<f32>::from_json(&json).unwrap(), narrow);
    }

    proptest! {
        #[test]
        fn json_checkpoint_roundtrips(params in proptest::collection::vec(-1e6f64..1e6, 7)) {
            let net = QNetwork::from_params(&[1, 2, 1], params.clone()).unwrap();
            let back = QNetwork::from_json(&net.to_json().unwrap()).unwrap();
            for (a, b) in back.params().iter().zip(&params) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn forward_is_deterministic(seed: u64, xs in proptest::collection::vec(-5.0f64..5.0, 10)) {
            let net = QNetwork::new(&ARCH_IDQL, seed).unwrap();
            prop_assert_eq!(net.forward(&xs).unwrap(), net.forward(&xs).unwrap());
        }
    }
}
