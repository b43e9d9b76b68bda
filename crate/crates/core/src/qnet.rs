//! Multilayer perceptron Q-network with backprop, Adam and Huber TD updates.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::NUM_ACTIONS;
use crate::{Error, Result};

/// Shared, immutable network input (features followed by the action history).
pub type StateVec = Arc<[f32]>;

/// One replayed environment step.
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: StateVec,
    pub action: usize,
    pub reward: f64,
    pub next_state: StateVec,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    inputs: usize,
    outputs: usize,
    /// `outputs × inputs`, row-major.
    w: Vec<f64>,
    b: Vec<f64>,
}

/// Fixed affine standardization of the leading input components.
///
/// Components past `mean.len()` pass through unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct InputNormalizer {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl InputNormalizer {
    /// Per-component mean and variance of `samples`; each std is floored at
    /// `std_floor` so near-constant components are not blown up.
    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a [f32]>, dim: usize, std_floor: f64) -> Self {
        let mut n = 0usize;
        let mut mean = vec![0f64; dim];
        let mut m2 = vec![0f64; dim];
        for s in samples {
            n += 1;
            for i in 0..dim {
                let x = s[i] as f64;
                let d = x - mean[i];
                mean[i] += d / n as f64;
                m2[i] += d * (x - mean[i]);
            }
        }
        let inv_std = m2
            .iter()
            .map(|&q| {
                let var = if n > 1 { q / n as f64 } else { 0.0 };
                1.0 / var.sqrt().max(std_floor)
            })
            .collect();
        InputNormalizer { mean, inv_std }
    }

    fn apply(&self, row: &mut [f64]) {
        for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.inv_std) {
            *x = (*x - m) * s;
        }
    }
}

/// Rectifier MLP emitting one Q-value per action.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    normalizer: Option<InputNormalizer>,
}

/// Parameter gradients, shaped like the network's layers.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Mlp {
    /// He-initialized network: weights ~ N(0, 2/fan_in), zero biases.
    pub fn new(input_dim: usize, hidden: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Mlp::zeros(input_dim, hidden);
        for layer in &mut net.layers {
            let normal = Normal::new(0.0, (2.0 / layer.inputs as f64).sqrt()).expect("finite std");
            layer.w.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
        }
        net
    }

    pub fn zeros(input_dim: usize, hidden: &[usize]) -> Self {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(NUM_ACTIONS);
        let layers = sizes
            .windows(2)
            .map(|p| Dense {
                inputs: p[0],
                outputs: p[1],
                w: vec![0.0; p[0] * p[1]],
                b: vec![0.0; p[1]],
            })
            .collect();
        Mlp {
            layers,
            normalizer: None,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    /// `[input, hidden.., 9]`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.outputs));
        s
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn normalizer(&self) -> Option<&InputNormalizer> {
        self.normalizer.as_ref()
    }

    pub fn set_normalizer(&mut self, n: Option<InputNormalizer>) -> Result<()> {
        if let Some(n) = &n {
            if n.mean.len() != n.inv_std.len() || n.mean.len() > self.input_dim() {
                return Err(Error::Contract(format!(
                    "normalizer of length {} does not fit input dim {}",
                    n.mean.len(),
                    self.input_dim()
                )));
            }
        }
        self.normalizer = n;
        Ok(())
    }

    /// Flat view of every parameter (layer by layer, weights then biases).
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(&l.b).copied())
            .collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.w.iter_mut().chain(l.b.iter_mut()).for_each(|p| *p = it.next().unwrap());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(&l.b).all(|p| p.is_finite()))
    }

    fn prepare(&self, inputs: &[&[f32]]) -> Result<Vec<f64>> {
        let d = self.input_dim();
        let mut x = Vec::with_capacity(inputs.len() * d);
        for row in inputs {
            if row.len() != d {
                return Err(Error::Contract(format!(
                    "network expects input of length {d}, got {}",
                    row.len()
                )));
            }
            let start = x.len();
            x.extend(row.iter().map(|&v| v as f64));
            if let Some(n) = &self.normalizer {
                n.apply(&mut x[start..]);
            }
        }
        Ok(x)
    }

    /// Q-values for one input.
    pub fn forward(&self, x: &[f32]) -> Result<[f64; NUM_ACTIONS]> {
        let q = self.forward_batch(&[x])?;
        let mut out = [0.0; NUM_ACTIONS];
        out.copy_from_slice(&q);
        Ok(out)
    }

    /// Q-values for a batch, `batch × 9` row-major.
    pub fn forward_batch(&self, inputs: &[&[f32]]) -> Result<Vec<f64>> {
        let x = self.prepare(inputs)?;
        Ok(self.run(x, inputs.len(), None))
    }

    /// Runs the layers; stores each layer's input when `cache` is given.
    fn run(&self, mut x: Vec<f64>, batch: usize, mut cache: Option<&mut Vec<Vec<f64>>>) -> Vec<f64> {
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            let mut z = vec![0f64; batch * l.outputs];
            if batch == 1 {
                for (j, zj) in z.iter_mut().enumerate() {
                    *zj = l.b[j] + dot(&l.w[j * l.inputs..(j + 1) * l.inputs], &x);
                }
                if li != last {
                    z.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                if let Some(c) = cache.as_deref_mut() {
                    c.push(x);
                }
                x = z;
                continue;
            }
            for r in 0..batch {
                z[r * l.outputs..(r + 1) * l.outputs].copy_from_slice(&l.b);
            }
            // z (B×out) += x (B×in) · wᵀ (in×out)
            unsafe {
                matrixmultiply::dgemm(
                    batch,
                    l.inputs,
                    l.outputs,
                    1.0,
                    x.as_ptr(),
                    l.inputs as isize,
                    1,
                    l.w.as_ptr(),
                    1,
                    l.inputs as isize,
                    1.0,
                    z.as_mut_ptr(),
                    l.outputs as isize,
                    1,
                );
            }
            if li != last {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            if let Some(c) = cache.as_deref_mut() {
                c.push(x);
            }
            x = z;
        }
        x
    }

    /// Mean Huber loss of `Q(s, a) − y` over the batch and its gradient.
    pub fn loss_and_grad(
        &self,
        inputs: &[&[f32]],
        actions: &[usize],
        targets: &[f64],
    ) -> Result<(f64, Gradients)> {
        let batch = inputs.len();
        if batch == 0 || actions.len() != batch || targets.len() != batch {
            return Err(Error::Contract(format!(
                "batch of {batch} inputs, {} actions, {} targets",
                actions.len(),
                targets.len()
            )));
        }
        if let Some(a) = actions.iter().find(|&&a| a >= NUM_ACTIONS) {
            return Err(Error::Contract(format!("action index {a} out of range")));
        }
        let x = self.prepare(inputs)?;
        let mut acts = Vec::with_capacity(self.layers.len());
        let q = self.run(x, batch, Some(&mut acts));

        let mut loss = 0.0;
        let mut delta = vec![0f64; batch * NUM_ACTIONS];
        for i in 0..batch {
            let d = q[i * NUM_ACTIONS + actions[i]] - targets[i];
            loss += huber(d);
            delta[i * NUM_ACTIONS + actions[i]] = d.clamp(-1.0, 1.0) / batch as f64;
        }
        loss /= batch as f64;

        let mut grads = vec![(Vec::new(), Vec::new()); self.layers.len()];
        for li in (0..self.layers.len()).rev() {
            let l = &self.layers[li];
            let input = &acts[li];
            let mut gw = vec![0f64; l.w.len()];
            // gw (out×in) = deltaᵀ (out×B) · input (B×in)
            unsafe {
                matrixmultiply::dgemm(
                    l.outputs,
                    batch,
                    l.inputs,
                    1.0,
                    delta.as_ptr(),
                    1,
                    l.outputs as isize,
                    input.as_ptr(),
                    l.inputs as isize,
                    1,
                    0.0,
                    gw.as_mut_ptr(),
                    l.inputs as isize,
                    1,
                );
            }
            let mut gb = vec![0f64; l.outputs];
            for r in 0..batch {
                for (g, d) in gb.iter_mut().zip(&delta[r * l.outputs..(r + 1) * l.outputs]) {
                    *g += d;
                }
            }
            if li > 0 {
                let mut prev = vec![0f64; batch * l.inputs];
                // prev (B×in) = delta (B×out) · w (out×in)
                unsafe {
                    matrixmultiply::dgemm(
                        batch,
                        l.outputs,
                        l.inputs,
                        1.0,
                        delta.as_ptr(),
                        l.outputs as isize,
                        1,
                        l.w.as_ptr(),
                        l.inputs as isize,
                        1,
                        0.0,
                        prev.as_mut_ptr(),
                        l.inputs as isize,
                        1,
                    );
                }
                // rectifier derivative: the stored input is the activated output
                for (p, a) in prev.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
            grads[li] = (gw, gb);
        }
        Ok((loss, Gradients { layers: grads }))
    }
}

/// Dot product with four independent accumulators (vectorizes without fast-math).
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (p, q) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += p[k] * q[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(p, q)| p * q).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn huber(d: f64) -> f64 {
    let a = d.abs();
    if a <= 1.0 {
        0.5 * d * d
    } else {
        a - 0.5
    }
}

/// Adam optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<(Vec<f64>, Vec<f64>)>,
    v: Vec<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamState {
    pub fn new(net: &Mlp, cfg: AdamConfig) -> Self {
        let zeros: Vec<_> = net
            .layers
            .iter()
            .map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()]))
            .collect();
        AdamState {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn apply(&mut self, net: &mut Mlp, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (li, layer) in net.layers.iter_mut().enumerate() {
            let (gw, gb) = &grads.layers[li];
            let (mw, mb) = &mut self.m[li];
            let (vw, vb) = &mut self.v[li];
            for (p, g, m, v) in [
                (&mut layer.w, gw, mw, vw),
                (&mut layer.b, gb, mb, vb),
            ] {
                for i in 0..p.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            }
        }
    }

    fn shaped_like(&self, net: &Mlp) -> bool {
        self.m.len() == net.layers.len()
            && net
                .layers
                .iter()
                .zip(&self.m)
                .zip(&self.v)
                .all(|((l, m), v)| {
                    m.0.len() == l.w.len()
                        && m.1.len() == l.b.len()
                        && v.0.len() == l.w.len()
                        && v.1.len() == l.b.len()
                })
    }
}

/// One Adam step on the Huber TD error of `batch`; returns the pre-step loss.
///
/// Targets are `r` for terminal transitions and `r + gamma · max_a' Q_target(s', a')`
/// otherwise.
pub fn td_batch_update(
    net: &mut Mlp,
    adam: &mut AdamState,
    batch: &[&Transition],
    gamma: f64,
    target: &Mlp,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("empty TD batch".into()));
    }
    let live: Vec<&[f32]> = batch
        .iter()
        .filter(|t| !t.terminal)
        .map(|t| &*t.next_state)
        .collect();
    let next_q = if live.is_empty() {
        Vec::new()
    } else {
        target.forward_batch(&live)?
    };
    let mut next = next_q.chunks(NUM_ACTIONS);
    let targets: Vec<f64> = batch
        .iter()
        .map(|t| {
            if t.terminal {
                t.reward
            } else {
                let q = next.next().expect("one row per live transition");
                t.reward + gamma * q.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            }
        })
        .collect();
    let inputs: Vec<&[f32]> = batch.iter().map(|t| &*t.state).collect();
    let actions: Vec<usize> = batch.iter().map(|t| t.action).collect();
    let (loss, grads) = net.loss_and_grad(&inputs, &actions, &targets)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            loss,
            context: "TD update".into(),
        });
    }
    adam.apply(net, &grads);
    if !net.all_finite() {
        return Err(Error::NonFiniteLoss {
            loss: f64::NAN,
            context: "parameters after Adam step".into(),
        });
    }
    Ok(loss)
}

/// Copies the online network into the target network.
pub fn sync_target(net: &Mlp, target: &mut Mlp) {
    target.clone_from(net);
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DQNCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializes network and optimizer into the versioned little-endian container.
///
/// Layout: magic (8 bytes), version u32, layer-size count u32, sizes u64 each,
/// normalizer length u64 then its means and inverse stds as f64, each layer's
/// weights then biases as f64, Adam lr/beta1/beta2/eps f64 and step u64, then
/// first and second moments in parameter order.
pub fn encode_checkpoint(net: &Mlp, adam: &AdamState) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * (3 * net.param_count() + 16));
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let sizes = net.sizes();
    out.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
    for s in sizes {
        out.extend_from_slice(&(s as u64).to_le_bytes());
    }
    let put = |out: &mut Vec<u8>, vals: &[f64]| {
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    match &net.normalizer {
        Some(n) => {
            out.extend_from_slice(&(n.mean.len() as u64).to_le_bytes());
            put(&mut out, &n.mean);
            put(&mut out, &n.inv_std);
        }
        None => out.extend_from_slice(&0u64.to_le_bytes()),
    }
    for l in &net.layers {
        put(&mut out, &l.w);
        put(&mut out, &l.b);
    }
    put(&mut out, &[adam.lr, adam.beta1, adam.beta2, adam.eps]);
    out.extend_from_slice(&adam.step.to_le_bytes());
    for moments in [&adam.m, &adam.v] {
        for (w, b) in moments {
            put(&mut out, w);
            put(&mut out, b);
        }
    }
    out
}

pub fn save_checkpoint(net: &Mlp, adam: &AdamState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(net, adam)).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn f64s(&mut self, n: usize) -> Option<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8)?)?;
        Some(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(Mlp, AdamState)> {
    let fail = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let truncated = || fail(format!("truncated (format version {CHECKPOINT_VERSION})"));
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fail(format!(
            "bad magic bytes; not a format version {CHECKPOINT_VERSION} checkpoint"
        )));
    }
    let mut c = Cursor { buf: bytes, pos: 8 };
    let version = c.u32().ok_or_else(truncated)?;
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!(
            "format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let n = c.u32().ok_or_else(truncated)? as usize;
    if !(2..=64).contains(&n) {
        return Err(fail(format!("implausible layer count {n}")));
    }
    let sizes: Vec<usize> = (0..n)
        .map(|_| c.u64().map(|s| s as usize))
        .collect::<Option<_>>()
        .ok_or_else(truncated)?;
    if sizes.last() != Some(&NUM_ACTIONS) || sizes.contains(&0) {
        return Err(fail(format!("invalid layer sizes {sizes:?}")));
    }
    let mut net = Mlp::zeros(sizes[0], &sizes[1..n - 1]);
    let norm_len = c.u64().ok_or_else(truncated)? as usize;
    if norm_len > sizes[0] {
        return Err(fail(format!("normalizer length {norm_len} exceeds input dim")));
    }
    if norm_len > 0 {
        let mean = c.f64s(norm_len).ok_or_else(truncated)?;
        let inv_std = c.f64s(norm_len).ok_or_else(truncated)?;
        net.normalizer = Some(InputNormalizer { mean, inv_std });
    }
    for l in &mut net.layers {
        l.w = c.f64s(l.w.len()).ok_or_else(truncated)?;
        l.b = c.f64s(l.b.len()).ok_or_else(truncated)?;
    }
    let h = c.f64s(4).ok_or_else(truncated)?;
    let mut adam = AdamState::new(
        &net,
        AdamConfig {
            lr: h[0],
            beta1: h[1],
            beta2: h[2],
            eps: h[3],
        },
    );
    adam.step = c.u64().ok_or_else(truncated)?;
    for moments in [&mut adam.m, &mut adam.v] {
        for (w, b) in moments.iter_mut() {
            *w = c.f64s(w.len()).ok_or_else(truncated)?;
            *b = c.f64s(b.len()).ok_or_else(truncated)?;
        }
    }
    if c.pos != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    debug_assert!(adam.shaped_like(&net));
    Ok((net, adam))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Mlp, AdamState)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sv(v: &[f32]) -> StateVec {
        Arc::from(v)
    }

    fn random_input(rng: &mut impl Rng, d: usize) -> Vec<f32> {
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_net_gives_zero_q() {
        let net = Mlp::zeros(5, &[4, 3]);
        assert_eq!(net.forward(&[1.0, -2.0, 3.0, 0.5, 7.0]).unwrap(), [0.0; 9]);
    }

    #[test]
    fn hand_computed_forward() {
        // 2 inputs -> 2 hidden (ReLU) -> 9 outputs; only outputs 0 and 1 wired
        let mut net = Mlp::zeros(2, &[2]);
        net.layers[0].w = vec![1.0, -1.0, 0.5, 2.0];
        net.layers[0].b = vec![0.0, -1.0];
        net.layers[1].w[0] = 1.0; // q0 = h0
        net.layers[1].w[3] = 3.0; // q1 = 3·h1
        net.layers[1].b[1] = 0.25;
        // x = (2, 1): h0 = relu(2 − 1) = 1, h1 = relu(1 + 2 − 1) = 2
        let q = net.forward(&[2.0, 1.0]).unwrap();
        assert_eq!(q[0], 1.0);
        assert_eq!(q[1], 6.25);
        assert!(q[2..].iter().all(|&v| v == 0.0));
        // x = (0, 1): h0 = relu(−1) = 0
        assert_eq!(net.forward(&[0.0, 1.0]).unwrap()[0], 0.0);
    }

    #[test]
    fn forward_is_deterministic_and_checks_dims() {
        let net = Mlp::new(6, &[8], 3);
        let x = [0.1f32, 0.2, -0.3, 0.4, 0.5, -0.6];
        assert_eq!(net.forward(&x).unwrap(), net.forward(&x).unwrap());
        assert!(matches!(net.forward(&x[..5]), Err(Error::Contract(_))));
    }

    #[test]
    fn batch_forward_matches_single() {
        let net = Mlp::new(7, &[5, 4], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xs: Vec<Vec<f32>> = (0..6).map(|_| random_input(&mut rng, 7)).collect();
        let refs: Vec<&[f32]> = xs.iter().map(|v| v.as_slice()).collect();
        let batch = net.forward_batch(&refs).unwrap();
        for (i, x) in xs.iter().enumerate() {
            let q = net.forward(x).unwrap();
            for a in 0..9 {
                assert!((batch[i * 9 + a] - q[a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn huber_values() {
        assert_eq!(huber(3.0), 2.5);
        assert_eq!(huber(-0.5), 0.125);
        assert_eq!(huber(1.0), 0.5);
    }

    #[test]
    fn terminal_zero_reward_zero_loss() {
        let mut net = Mlp::zeros(3, &[4]);
        let target = net.clone();
        let mut adam = AdamState::new(&net, AdamConfig::default());
        let t = Transition {
            state: sv(&[1.0, 2.0, 3.0]),
            action: 2,
            reward: 0.0,
            next_state: sv(&[0.0, 0.0, 0.0]),
            terminal: true,
        };
        let loss = td_batch_update(&mut net, &mut adam, &[&t, &t], 0.9, &target).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn terminal_reward_three_gives_huber_three() {
        let mut net = Mlp::zeros(3, &[4]);
        let target = net.clone();
        let mut adam = AdamState::new(&net, AdamConfig::default());
        let t = Transition {
            state: sv(&[1.0, 2.0, 3.0]),
            action: 8,
            reward: 3.0,
            next_state: sv(&[0.0, 0.0, 0.0]),
            terminal: true,
        };
        let loss = td_batch_update(&mut net, &mut adam, &[&t], 0.9, &target).unwrap();
        assert_eq!(loss, 2.5);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn bootstrap_target_uses_target_net() {
        // zero online net; target net with bias 2 on action 4 -> y = 1 + 0.5·2 = 2
        let net = Mlp::zeros(2, &[]);
        let mut target = Mlp::zeros(2, &[]);
        target.layers[0].b[4] = 2.0;
        let t = Transition {
            state: sv(&[0.0, 0.0]),
            action: 0,
            reward: 1.0,
            next_state: sv(&[0.0, 0.0]),
            terminal: false,
        };
        let mut online = net.clone();
        let mut adam = AdamState::new(&online, AdamConfig::default());
        let loss = td_batch_update(&mut online, &mut adam, &[&t], 0.5, &target).unwrap();
        assert_eq!(loss, huber(2.0));
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mut net = Mlp::zeros(2, &[]);
        let target = net.clone();
        let mut adam = AdamState::new(&net, AdamConfig::default());
        assert!(td_batch_update(&mut net, &mut adam, &[], 0.9, &target).is_err());
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut net = Mlp::zeros(2, &[]);
        let target = net.clone();
        let mut adam = AdamState::new(&net, AdamConfig::default());
        let t = Transition {
            state: sv(&[0.0, 0.0]),
            action: 0,
            reward: f64::INFINITY,
            next_state: sv(&[0.0, 0.0]),
            terminal: true,
        };
        assert!(matches!(
            td_batch_update(&mut net, &mut adam, &[&t], 0.9, &target),
            Err(Error::NonFiniteLoss { .. })
        ));
    }

    /// Central finite differences of the batch loss w.r.t. every parameter.
    fn numeric_grad(net: &Mlp, xs: &[&[f32]], acts: &[usize], ys: &[f64], h: f64) -> Vec<f64> {
        let base = net.params();
        let mut probe = net.clone();
        (0..base.len())
            .map(|i| {
                let mut p = base.clone();
                p[i] = base[i] + h;
                probe.set_params(&p);
                let up = probe.loss_and_grad(xs, acts, ys).unwrap().0;
                p[i] = base[i] - h;
                probe.set_params(&p);
                let down = probe.loss_and_grad(xs, acts, ys).unwrap().0;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // 1 input, no hidden layer: 9 weights + 9 biases
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::new(1, &[], 2);
        let xs: Vec<Vec<f32>> = (0..4).map(|_| random_input(&mut rng, 1)).collect();
        let refs: Vec<&[f32]> = xs.iter().map(|v| v.as_slice()).collect();
        let acts = [0usize, 3, 8, 3];
        let ys = [0.3, -0.2, 0.1, 0.4];
        let (_, g) = net.loss_and_grad(&refs, &acts, &ys).unwrap();
        let analytic: Vec<f64> = g.layers.iter().flat_map(|(w, b)| w.iter().chain(b).copied()).collect();
        let numeric = numeric_grad(&net, &refs, &acts, &ys, 1e-5);
        for (a, n) in analytic.iter().zip(&numeric) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            assert!(rel < 1e-4 || (a - n).abs() < 1e-10, "{a} vs {n}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let mut net = Mlp::new(12, &[16, 8], 9);
        net.set_normalizer(Some(InputNormalizer {
            mean: vec![0.5; 10],
            inv_std: vec![2.0; 10],
        }))
        .unwrap();
        let mut adam = AdamState::new(&net, AdamConfig::default());
        let target = net.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Transition {
            state: random_input(&mut rng, 12).into(),
            action: 1,
            reward: 1.0,
            next_state: random_input(&mut rng, 12).into(),
            terminal: false,
        };
        td_batch_update(&mut net, &mut adam, &[&t], 0.9, &target).unwrap();
        save_checkpoint(&net, &adam, &path).unwrap();
        let (net2, adam2) = load_checkpoint(&path).unwrap();
        assert_eq!(net2, net);
        assert_eq!(adam2, adam);
        for _ in 0..100 {
            let x = random_input(&mut rng, 12);
            assert_eq!(net.forward(&x).unwrap(), net2.forward(&x).unwrap());
        }
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"NOTACKPT\x01\x00\x00\x00").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version 1"), "{err}");

        let net = Mlp::zeros(2, &[]);
        let mut bytes = encode_checkpoint(&net, &AdamState::new(&net, AdamConfig::default()));
        bytes[8] = 7;
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("format version 7"), "{err}");

        bytes[8] = 1;
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn sync_then_mutate_leaves_target() {
        let mut net = Mlp::new(4, &[3], 0);
        let mut target = Mlp::zeros(4, &[3]);
        sync_target(&net, &mut target);
        assert_eq!(target, net);
        let snapshot = target.clone();
        let mut p = net.params();
        p[0] += 1.0;
        net.set_params(&p);
        assert_eq!(target, snapshot);
        assert_ne!(target, net);
    }

    #[test]
    fn normalizer_fit_and_floor() {
        let rows: Vec<Vec<f32>> = vec![vec![1.0, 5.0], vec![3.0, 5.0]];
        let n = InputNormalizer::fit(rows.iter().map(|r| r.as_slice()), 2, 0.5);
        assert_eq!(n.mean, vec![2.0, 5.0]);
        assert_eq!(n.inv_std, vec![1.0, 2.0]);
    }

    #[test]
    fn adam_fits_a_random_linear_q_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = 6;
        let truth: Vec<f64> = (0..d * NUM_ACTIONS).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q_true = |x: &[f32], a: usize| (0..d).map(|j| truth[a * d + j] * x[j] as f64).sum::<f64>();
        let mut net = Mlp::new(d, &[32], 3);
        let mut adam = AdamState::new(
            &net,
            AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
        );
        let eval_x: Vec<Vec<f32>> = (0..256).map(|_| random_input(&mut rng, d)).collect();
        let eval_a: Vec<usize> = (0..256).map(|i| i % NUM_ACTIONS).collect();
        let eval_y: Vec<f64> = eval_x.iter().zip(&eval_a).map(|(x, &a)| q_true(x, a)).collect();
        let eval_in: Vec<&[f32]> = eval_x.iter().map(|x| x.as_slice()).collect();
        let loss = |net: &Mlp| net.loss_and_grad(&eval_in, &eval_a, &eval_y).unwrap().0;
        let initial = loss(&net);
        for _ in 0..1000 {
            let xs: Vec<Vec<f32>> = (0..32).map(|_| random_input(&mut rng, d)).collect();
            let acts: Vec<usize> = (0..32).map(|_| rng.random_range(0..NUM_ACTIONS)).collect();
            let ys: Vec<f64> = xs.iter().zip(&acts).map(|(x, &a)| q_true(x, a)).collect();
            let inputs: Vec<&[f32]> = xs.iter().map(|x| x.as_slice()).collect();
            let (_, g) = net.loss_and_grad(&inputs, &acts, &ys).unwrap();
            adam.apply(&mut net, &g);
        }
        let last = loss(&net);
        assert!(last * 10.0 <= initial, "loss {initial} -> {last}");
    }
}
