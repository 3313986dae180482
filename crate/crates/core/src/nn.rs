//! A small fully connected ReLU network with hand-written backpropagation.
//!
//! Parameters live in one flat vector. Each layer contributes its weight
//! matrix (`out x in`, row-major) followed by its bias vector, so gradients
//! and optimizer buffers share the same layout.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::envs::{EmbeddingTable, MiniBatch, StateId};
use crate::qlinear::greedy_action;
use crate::{Error, GradMode, Result};

/// Layer sizes of the two-layer network with a scalar input.
pub const SMALL_NET_DIMS: [usize; 3] = [1, 100, 2];

/// Hidden widths of the grid-world network.
pub const GRIDWORLD_HIDDEN: [usize; 3] = [128, 128, 128];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MlpInit {
    /// Every first-layer weight 1.6, second-layer weight 0.01, all biases
    /// -0.001. Only defined for [`SMALL_NET_DIMS`].
    Deterministic,
    /// Weights and biases uniform in `±1/sqrt(fan_in)`, drawn layer by layer
    /// from `Xoshiro256PlusPlus::seed_from_u64(seed)`.
    Seeded(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    params: Vec<f64>,
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::precondition(format!(
            "layer dims {dims:?} need at least two positive entries"
        )));
    }
    Ok(())
}

/// Activations of one forward pass, kept for the backward pass.
struct Cache {
    /// `acts[0]` is the input, `acts[l]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn new(dims: &[usize], init: MlpInit) -> Result<Self> {
        check_dims(dims)?;
        let mut params = Vec::with_capacity(param_count(dims));
        match init {
            MlpInit::Deterministic => {
                if dims != SMALL_NET_DIMS {
                    return Err(Error::precondition(format!(
                        "the deterministic initialization needs dims {SMALL_NET_DIMS:?}, got {dims:?}"
                    )));
                }
                for (w, n_in, n_out) in [(1.6, dims[0], dims[1]), (0.01, dims[1], dims[2])] {
                    params.extend(std::iter::repeat_n(w, n_in * n_out));
                    params.extend(std::iter::repeat_n(-0.001, n_out));
                }
            }
            MlpInit::Seeded(seed) => {
                let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
                for w in dims.windows(2) {
                    let bound = 1.0 / (w[0] as f64).sqrt();
                    for _ in 0..w[1] * (w[0] + 1) {
                        params.push(rng.random_range(-bound..bound));
                    }
                }
            }
        }
        Ok(Mlp { dims: dims.to_vec(), params })
    }

    pub fn from_params(dims: &[usize], params: Vec<f64>) -> Result<Self> {
        check_dims(dims)?;
        let expected = param_count(dims);
        if params.len() != expected {
            return Err(Error::DimensionMismatch { expected, found: params.len() });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::precondition("network parameters must be finite"));
        }
        Ok(Mlp { dims: dims.to_vec(), params })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("dims are non-empty")
    }

    fn forward_cached(&self, x: &[f64]) -> Result<Cache> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), found: x.len() });
        }
        let n_layers = self.dims.len() - 1;
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(x.to_vec());
        let mut off = 0;
        for l in 0..n_layers {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            off += n_out * (n_in + 1);
            let input = &acts[l];
            let mut out: Vec<f64> = w
                .chunks_exact(n_in)
                .zip(b)
                .map(|(row, bias)| bias + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            if l + 1 < n_layers {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(out);
        }
        Ok(Cache { acts })
    }

    /// Adds `∂(dout · output)/∂params` to `grad`.
    fn backward(&self, cache: &Cache, dout: &[f64], grad: &mut [f64]) {
        let n_layers = self.dims.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in 0..n_layers {
            offsets.push(off);
            off += self.dims[l + 1] * (self.dims[l] + 1);
        }
        let mut delta = dout.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let off = offsets[l];
            let input = &cache.acts[l];
            let (gw, gb) = grad[off..off + n_out * (n_in + 1)].split_at_mut(n_in * n_out);
            for ((row, gbias), &d) in gw.chunks_exact_mut(n_in).zip(gb.iter_mut()).zip(&delta) {
                if d == 0.0 {
                    continue;
                }
                *gbias += d;
                for (g, x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            if l == 0 {
                break;
            }
            let w = &self.params[off..off + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for (row, &d) in w.chunks_exact(n_in).zip(&delta) {
                if d == 0.0 {
                    continue;
                }
                for (p, wij) in prev.iter_mut().zip(row) {
                    *p += d * wij;
                }
            }
            // ReLU derivative, taken as 0 at the kink
            for (p, a) in prev.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }
}

/// Action values `Q(s, ·)` for one embedding vector.
pub fn q_forward(net: &Mlp, x: &[f64]) -> Result<Vec<f64>> {
    Ok(net.forward_cached(x)?.acts.pop().expect("at least one layer"))
}

/// Forward passes for every state a batch touches; terminal states are
/// skipped and valued 0.
struct BatchPass {
    caches: Vec<Option<Cache>>,
}

impl BatchPass {
    fn new(net: &Mlp, batch: &MiniBatch, emb: &EmbeddingTable) -> Result<Self> {
        if emb.dim() != net.input_dim() {
            return Err(Error::DimensionMismatch { expected: net.input_dim(), found: emb.dim() });
        }
        let mut caches: Vec<Option<Cache>> = (0..emb.n_states()).map(|_| None).collect();
        for x in batch.samples() {
            if x.a.0 >= net.output_dim() {
                return Err(Error::UnknownAction(x.a.to_string()));
            }
            for s in [x.s, x.s_next] {
                emb.get(s)?;
                if !emb.is_terminal(s) && caches[s.0].is_none() {
                    caches[s.0] = Some(net.forward_cached(emb.get(s)?)?);
                }
            }
        }
        Ok(BatchPass { caches })
    }

    fn q(&self, s: StateId) -> Option<&[f64]> {
        self.caches[s.0].as_ref().map(|c| c.acts.last().expect("output layer").as_slice())
    }

    /// TD error of every sample and the greedy next action (if any).
    fn td_errors<'a>(
        &'a self,
        batch: &'a MiniBatch,
        gamma: f64,
    ) -> impl Iterator<Item = (f64, Option<usize>)> + 'a {
        batch.samples().iter().map(move |x| {
            let q = self.q(x.s).map_or(0.0, |q| q[x.a.0]);
            let (target, next) = match self.q(x.s_next) {
                Some(qn) => {
                    let a = greedy_action(qn);
                    (qn[a], Some(a))
                }
                None => (0.0, None),
            };
            (q - x.r - gamma * target, next)
        })
    }
}

/// Mean squared TD error of the network on a batch.
pub fn bellman_loss(net: &Mlp, batch: &MiniBatch, emb: &EmbeddingTable, gamma: f64) -> Result<f64> {
    let pass = BatchPass::new(net, batch, emb)?;
    let sum: f64 = pass.td_errors(batch, gamma).map(|(d, _)| d * d).sum();
    Ok(sum / batch.len() as f64)
}

/// Gradient of the mean squared TD error in parameter layout.
///
/// `Semi` holds the target `r + γ max Q(s', ·)` fixed; `Residual` also
/// differentiates through the greedy next action (lowest index on ties).
pub fn batch_gradient(
    net: &Mlp,
    batch: &MiniBatch,
    emb: &EmbeddingTable,
    gamma: f64,
    mode: GradMode,
) -> Result<Vec<f64>> {
    let pass = BatchPass::new(net, batch, emb)?;
    let n_out = net.output_dim();
    // The gradient is linear in the output sensitivities, so they are summed
    // per state and each state is backpropagated once.
    let mut dout = vec![vec![0.0; n_out]; emb.n_states()];
    let scale = 2.0 / batch.len() as f64;
    for (x, (delta, next)) in batch.samples().iter().zip(pass.td_errors(batch, gamma)) {
        if pass.q(x.s).is_some() {
            dout[x.s.0][x.a.0] += scale * delta;
        }
        if let (GradMode::Residual, Some(a)) = (mode, next) {
            dout[x.s_next.0][a] -= scale * gamma * delta;
        }
    }
    let mut grad = vec![0.0; net.n_params()];
    for (cache, d) in pass.caches.iter().zip(&dout) {
        if let Some(cache) = cache {
            net.backward(cache, d, &mut grad);
        }
    }
    Ok(grad)
}

/// Momentum SGD with dampening:
/// `v <- momentum v + (1 - damping) g`, `p <- p - lr v`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub damping: f64,
}

impl SgdConfig {
    pub fn plain(lr: f64) -> Self {
        SgdConfig { lr, momentum: 0.0, damping: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::precondition(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::precondition(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if !(0.0..=1.0).contains(&self.damping) {
            return Err(Error::precondition(format!("damping {} must lie in [0, 1]", self.damping)));
        }
        Ok(())
    }
}

/// Velocity buffer of [`sgd_update`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState {
    velocity: Vec<f64>,
}

impl SgdState {
    pub fn new(n: usize) -> Self {
        SgdState { velocity: vec![0.0; n] }
    }
}

/// One optimizer step on a raw parameter slice.
pub fn sgd_update(params: &mut [f64], grad: &[f64], cfg: &SgdConfig, state: &mut SgdState) -> Result<()> {
    if grad.len() != params.len() {
        return Err(Error::DimensionMismatch { expected: params.len(), found: grad.len() });
    }
    if state.velocity.len() != params.len() {
        state.velocity = vec![0.0; params.len()];
    }
    let keep = 1.0 - cfg.damping;
    for ((p, v), g) in params.iter_mut().zip(&mut state.velocity).zip(grad) {
        *v = cfg.momentum * *v + keep * g;
        *p -= cfg.lr * *v;
    }
    Ok(())
}

pub fn sgd_step(net: &mut Mlp, grad: &[f64], cfg: &SgdConfig, state: &mut SgdState) -> Result<()> {
    cfg.validate()?;
    sgd_update(&mut net.params, grad, cfg, state)
}

/// JSON form of a network: `{"dims": [...], "params": [...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpDocument {
    pub dims: Vec<usize>,
    pub params: Vec<f64>,
}

impl From<&Mlp> for MlpDocument {
    fn from(net: &Mlp) -> Self {
        MlpDocument { dims: net.dims.clone(), params: net.params.clone() }
    }
}

impl TryFrom<MlpDocument> for Mlp {
    type Error = Error;

    fn try_from(doc: MlpDocument) -> Result<Self> {
        Mlp::from_params(&doc.dims, doc.params)
    }
}

impl Mlp {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&MlpDocument::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<MlpDocument>(text)?.try_into()
    }
}
