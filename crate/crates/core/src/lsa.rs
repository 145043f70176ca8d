//! Linear self-attention transformer.
//!
//! One layer maps a prompt `E` of shape `(d+1) x (n+1)` to
//!
//! ```text
//! E + W_O W_V E ((W_K E)^T (W_Q E) / sqrt(d))
//! ```
//!
//! and layers are chained. The model is pre-trained to predict the masked
//! query label at entry `[d, n]` (zero-based) of the final output. Gradients
//! are derived by hand for this fixed graph.
//!
//! # FLOP accounting
//!
//! A matrix product of shapes `m x k` and `k x p` costs `2 m k p`. With
//! `r = d + 1` and `c = n + 1`, one layer's forward pass on one prompt costs
//!
//! ```text
//! 3 * 2 r^2 c     projections W_K E, W_Q E, W_V E
//! 2 c^2 r         Gram product (W_K E)^T (W_Q E)
//! c^2             scaling by 1/sqrt(d)
//! 2 r c^2         value mixing (W_V E) G
//! 2 r^2 c         output projection W_O (.)
//! r c             residual add
//! ```
//!
//! The squared error on the query costs 3 FLOPs per prompt. The backward pass
//! is counted as twice the forward pass, and an Adam update as 10 FLOPs per
//! parameter. One optimizer step therefore costs
//! `batch * (3 * L * layer + 3) + 10 * N` with `N = 4 L r^2`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Error, Result};
use crate::taskgen::{sample_batch, BatchItem, GenConfig, TokenMatrix};

/// Weights of one attention layer, each `(d+1) x (d+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LsaLayer {
    pub w_k: DMatrix<f64>,
    pub w_q: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
    pub w_o: DMatrix<f64>,
}

impl LsaLayer {
    pub fn zeros(d: usize) -> Self {
        let z = DMatrix::zeros(d + 1, d + 1);
        Self {
            w_k: z.clone(),
            w_q: z.clone(),
            w_v: z.clone(),
            w_o: z,
        }
    }

    /// Matrices in checkpoint order: K, Q, V, O.
    pub fn matrices(&self) -> [&DMatrix<f64>; 4] {
        [&self.w_k, &self.w_q, &self.w_v, &self.w_o]
    }

    pub fn matrices_mut(&mut self) -> [&mut DMatrix<f64>; 4] {
        [&mut self.w_k, &mut self.w_q, &mut self.w_v, &mut self.w_o]
    }
}

/// Parameters of an `L`-layer LSA model for inputs of dimension `d`.
///
/// The same structure holds gradients and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct LsaParams {
    pub d: usize,
    pub layers: Vec<LsaLayer>,
}

impl LsaParams {
    pub fn zeros(d: usize, num_layers: usize) -> Self {
        Self {
            d,
            layers: (0..num_layers).map(|_| LsaLayer::zeros(d)).collect(),
        }
    }

    /// I.i.d. Gaussian entries with standard deviation `scale`.
    pub fn random<R: Rng + ?Sized>(d: usize, num_layers: usize, scale: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(d, num_layers);
        p.for_each_mut(|v| {
            let g: f64 = StandardNormal.sample(rng);
            *v = scale * g;
        });
        p
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Parameter count `4 L (d+1)^2`.
    pub fn num_params(&self) -> usize {
        param_count(self.d, self.num_layers())
    }

    pub fn same_shape(&self, other: &LsaParams) -> bool {
        self.d == other.d && self.num_layers() == other.num_layers()
    }

    /// Visits every entry in layer order, then K, Q, V, O, column-major.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for layer in &mut self.layers {
            for m in layer.matrices_mut() {
                m.iter_mut().for_each(&mut f);
            }
        }
    }

    pub fn values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            for m in layer.matrices() {
                out.extend(m.iter().copied());
            }
        }
        out
    }

    pub fn from_values(d: usize, num_layers: usize, values: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(d, num_layers);
        if values.len() != p.num_params() {
            return dim_err(format!(
                "expected {} parameters, got {}",
                p.num_params(),
                values.len()
            ));
        }
        let mut it = values.iter();
        p.for_each_mut(|v| *v = *it.next().unwrap());
        Ok(p)
    }

    fn zip_mut(&mut self, other: &LsaParams, mut f: impl FnMut(&mut f64, f64)) {
        for (la, lb) in self.layers.iter_mut().zip(&other.layers) {
            for (ma, mb) in la.matrices_mut().into_iter().zip(lb.matrices()) {
                for (a, b) in ma.iter_mut().zip(mb.iter()) {
                    f(a, *b);
                }
            }
        }
    }

    fn add_assign(&mut self, other: &LsaParams) {
        self.zip_mut(other, |a, b| *a += b);
    }

    pub fn max_abs(&self) -> f64 {
        self.values().iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `4 L (d+1)^2`.
pub fn param_count(d: usize, num_layers: usize) -> usize {
    4 * num_layers * (d + 1) * (d + 1)
}

fn check_shape(params: &LsaParams, e: &TokenMatrix) -> Result<()> {
    if params.layers.is_empty() {
        return arg_err("model has no layers");
    }
    if e.0.nrows() != params.d + 1 || e.0.ncols() < 1 {
        return dim_err(format!(
            "prompt has {} rows, model expects d + 1 = {}",
            e.0.nrows(),
            params.d + 1
        ));
    }
    Ok(())
}

fn attn_scale(d: usize) -> f64 {
    (d as f64).sqrt()
}

/// Intermediate values of one layer, kept for the backward pass.
struct LayerCache {
    input: DMatrix<f64>,
    k: DMatrix<f64>,
    q: DMatrix<f64>,
    v: DMatrix<f64>,
    /// Scaled attention matrix `K^T Q / sqrt(d)`.
    g: DMatrix<f64>,
    /// `V G`.
    p: DMatrix<f64>,
}

fn layer_forward(layer: &LsaLayer, e: &DMatrix<f64>, scale: f64) -> (DMatrix<f64>, LayerCache) {
    let k = &layer.w_k * e;
    let q = &layer.w_q * e;
    let v = &layer.w_v * e;
    let g = (k.transpose() * &q) / scale;
    let p = &v * &g;
    let out = e + &layer.w_o * &p;
    (
        out,
        LayerCache {
            input: e.clone(),
            k,
            q,
            v,
            g,
            p,
        },
    )
}

/// Applies every layer in sequence. The output has the shape of the input.
pub fn lsa_forward(params: &LsaParams, e: &TokenMatrix) -> Result<TokenMatrix> {
    check_shape(params, e)?;
    let scale = attn_scale(params.d);
    let mut cur = e.0.clone();
    for layer in &params.layers {
        cur = layer_forward(layer, &cur, scale).0;
    }
    Ok(TokenMatrix(cur))
}

/// Label row of the forward output: predictions for the `n` context points
/// followed by the query prediction.
pub fn predict_labels(params: &LsaParams, e: &TokenMatrix) -> Result<Vec<f64>> {
    let out = lsa_forward(params, e)?;
    let d = params.d;
    Ok(out.0.row(d).iter().copied().collect())
}

fn check_batch(params: &LsaParams, batch: &[BatchItem]) -> Result<()> {
    if batch.is_empty() {
        return arg_err("empty batch");
    }
    batch.iter().try_for_each(|b| check_shape(params, &b.tokens))
}

fn query_prediction(params: &LsaParams, e: &TokenMatrix) -> Result<f64> {
    let out = lsa_forward(params, e)?;
    Ok(out.0[(params.d, out.0.ncols() - 1)])
}

/// Mean squared error between the query prediction and the held-out label.
pub fn pretrain_loss(params: &LsaParams, batch: &[BatchItem]) -> Result<f64> {
    check_batch(params, batch)?;
    let mut sum = 0.0;
    for item in batch {
        let r = query_prediction(params, &item.tokens)? - item.target;
        sum += r * r;
    }
    Ok(sum / batch.len() as f64)
}

/// Loss and gradient of a single prompt's squared error, scaled by `weight`.
fn sample_grad(params: &LsaParams, item: &BatchItem, weight: f64) -> (f64, LsaParams) {
    let d = params.d;
    let scale = attn_scale(d);
    let mut caches = Vec::with_capacity(params.num_layers());
    let mut cur = item.tokens.0.clone();
    for layer in &params.layers {
        let (out, cache) = layer_forward(layer, &cur, scale);
        caches.push(cache);
        cur = out;
    }
    let last = cur.ncols() - 1;
    let resid = cur[(d, last)] - item.target;

    let mut grads = LsaParams::zeros(d, params.num_layers());
    let mut dy = DMatrix::zeros(cur.nrows(), cur.ncols());
    dy[(d, last)] = 2.0 * resid * weight;
    for (li, layer) in params.layers.iter().enumerate().rev() {
        let c = &caches[li];
        let g = &mut grads.layers[li];
        g.w_o = &dy * c.p.transpose();
        let dp = layer.w_o.transpose() * &dy;
        let dv = &dp * c.g.transpose();
        let dg = c.v.transpose() * &dp;
        let dk = (&c.q * dg.transpose()) / scale;
        let dq = (&c.k * &dg) / scale;
        let et = c.input.transpose();
        g.w_v = &dv * &et;
        g.w_k = &dk * &et;
        g.w_q = &dq * &et;
        if li > 0 {
            dy = &dy
                + layer.w_v.transpose() * &dv
                + layer.w_k.transpose() * &dk
                + layer.w_q.transpose() * &dq;
        }
    }
    (resid * resid, grads)
}

/// Loss and exact gradient of [`pretrain_loss`].
///
/// Per-prompt gradients are computed in parallel and summed in batch order.
pub fn loss_and_grad(params: &LsaParams, batch: &[BatchItem]) -> Result<(f64, LsaParams)> {
    check_batch(params, batch)?;
    let weight = 1.0 / batch.len() as f64;
    let parts: Vec<(f64, LsaParams)> = batch
        .par_iter()
        .map(|item| sample_grad(params, item, weight))
        .collect();
    let mut total = LsaParams::zeros(params.d, params.num_layers());
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add_assign(g);
    }
    Ok((loss * weight, total))
}

/// Gradient of [`pretrain_loss`] with respect to every weight entry.
pub fn grad_pretrain_loss(params: &LsaParams, batch: &[BatchItem]) -> Result<LsaParams> {
    loss_and_grad(params, batch).map(|(_, g)| g)
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: LsaParams,
    pub v: LsaParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &LsaParams) -> Self {
        Self {
            m: LsaParams::zeros(params.d, params.num_layers()),
            v: LsaParams::zeros(params.d, params.num_layers()),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut LsaParams,
    grads: &LsaParams,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&state.m) || !params.same_shape(&state.v)
    {
        return dim_err("parameter, gradient and optimizer shapes differ");
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    state.m.zip_mut(grads, |m, g| *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g);
    state.v.zip_mut(grads, |v, g| *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g);
    let mut idx = 0usize;
    let m = state.m.values();
    let v = state.v.values();
    params.for_each_mut(|p| {
        let m_hat = m[idx] / bc1;
        let v_hat = v[idx] / bc2;
        *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        idx += 1;
    });
    Ok(())
}

/// Pre-training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Training stops before a step that would push cumulative FLOPs past
    /// this cap.
    pub flop_budget: Option<u64>,
    /// Standard deviation of the initial weights; `0.02 / sqrt(d + 1)` when
    /// unset.
    pub init_scale: Option<f64>,
    pub layers: usize,
    #[serde(skip)]
    pub gen: GenConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch_size: 64,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            flop_budget: None,
            init_scale: None,
            layers: 2,
            gen: GenConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        if self.steps < 1 {
            return Err(Error::Argument("steps must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Argument("batch_size must be >= 1".into()));
        }
        if self.layers < 1 {
            return Err(Error::Argument("layers must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.flop_budget == Some(0) {
            return Err(Error::Config("flop_budget must be > 0 when set".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn init_std(&self) -> f64 {
        self.init_scale
            .unwrap_or(0.02 / ((self.gen.d + 1) as f64).sqrt())
    }
}

/// Outcome of [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub final_params: LsaParams,
    /// Batch loss before each executed update.
    pub loss_curve: Vec<(usize, f64)>,
    pub flops_total: u64,
    pub steps_executed: usize,
    /// Parameter count.
    pub n_params: usize,
    /// Training targets consumed, `steps_executed * batch_size`.
    pub n_targets: u64,
}

/// Pre-trains an LSA model with Adam on freshly sampled batches.
///
/// Initial weights are drawn from `rng` first; every batch follows from the
/// same stream.
pub fn train<R: Rng + ?Sized>(cfg: &TrainConfig, rng: &mut R) -> Result<TrainReport> {
    cfg.validate()?;
    let d = cfg.gen.d;
    let per_step = count_flops_per_step(d, cfg.gen.n, cfg.layers, cfg.batch_size)?;
    if let Some(budget) = cfg.flop_budget {
        if per_step > budget {
            return Err(Error::Budget(format!(
                "one step costs {per_step} FLOPs, budget is {budget}"
            )));
        }
    }
    let mut params = LsaParams::random(d, cfg.layers, cfg.init_std(), rng);
    let mut state = AdamState::new(&params);
    let adam = cfg.adam();
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    let mut flops_total = 0u64;
    let mut executed = 0usize;
    for step in 0..cfg.steps {
        if let Some(budget) = cfg.flop_budget {
            if flops_total + per_step > budget {
                break;
            }
        }
        let batch = sample_batch(&cfg.gen, cfg.batch_size, rng)?;
        let (loss, grads) = loss_and_grad(&params, &batch)?;
        if !loss.is_finite() {
            return Err(Error::FitFailure(format!("non-finite loss at step {step}")));
        }
        adam_step(&mut params, &grads, &mut state, &adam)?;
        loss_curve.push((step, loss));
        flops_total += per_step;
        executed += 1;
    }
    Ok(TrainReport {
        n_params: params.num_params(),
        final_params: params,
        loss_curve,
        flops_total,
        steps_executed: executed,
        n_targets: (executed * cfg.batch_size) as u64,
    })
}

/// Forward FLOPs of one layer on one prompt; see the module docs.
pub fn layer_forward_flops(d: usize, n: usize) -> u64 {
    let r = (d + 1) as u64;
    let c = (n + 1) as u64;
    3 * 2 * r * r * c + 2 * c * c * r + c * c + 2 * r * c * c + 2 * r * r * c + r * c
}

/// FLOPs of one training step: forward, backward and the Adam update.
pub fn count_flops_per_step(d: usize, n: usize, layers: usize, batch_size: usize) -> Result<u64> {
    if d == 0 || n == 0 || layers == 0 || batch_size == 0 {
        return arg_err("count_flops_per_step needs positive d, n, L and batch size");
    }
    Ok(data_flops_per_step(d, n, layers, batch_size) + 10 * param_count(d, layers) as u64)
}

/// Batch-dependent part of [`count_flops_per_step`].
pub fn data_flops_per_step(d: usize, n: usize, layers: usize, batch_size: usize) -> u64 {
    batch_size as u64 * (3 * layers as u64 * layer_forward_flops(d, n) + 3)
}

/// Inference-only form of the model.
///
/// Uses the reassociation
/// `W_O W_V E (E^T W_K^T W_Q E) = (W_O W_V)(E E^T)(W_K^T W_Q) E`, which costs
/// `O(d^2 n)` per layer instead of `O(d n^2)`. The two fused products are
/// computed once per model.
#[derive(Debug, Clone)]
pub struct InferenceModel {
    d: usize,
    /// Per layer: `W_O W_V` and `W_K^T W_Q / sqrt(d)`.
    fused: Vec<(DMatrix<f64>, DMatrix<f64>)>,
}

impl InferenceModel {
    pub fn new(params: &LsaParams) -> Self {
        let scale = attn_scale(params.d);
        let fused = params
            .layers
            .iter()
            .map(|l| (&l.w_o * &l.w_v, (l.w_k.transpose() * &l.w_q) / scale))
            .collect();
        Self { d: params.d, fused }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Runs every layer on `e` in place.
    pub fn forward_in_place(&self, e: &mut DMatrix<f64>) -> Result<()> {
        let r = self.d + 1;
        if e.nrows() != r {
            return dim_err(format!("prompt has {} rows, model expects {r}", e.nrows()));
        }
        let c = e.ncols();
        let mut gram = DMatrix::<f64>::zeros(r, r);
        let mut col = vec![0.0; r];
        for (out_proj, attn) in &self.fused {
            gram.fill(0.0);
            {
                let data = e.as_slice();
                let g = gram.as_mut_slice();
                for j in 0..c {
                    let cj = &data[j * r..(j + 1) * r];
                    for k in 0..r {
                        let v = cj[k];
                        let gk = &mut g[k * r..(k + 1) * r];
                        for i in 0..r {
                            gk[i] += cj[i] * v;
                        }
                    }
                }
            }
            let t = out_proj * &gram * attn;
            let ts = t.as_slice();
            let data = e.as_mut_slice();
            for j in 0..c {
                let cj = &mut data[j * r..(j + 1) * r];
                col.iter_mut().for_each(|x| *x = 0.0);
                for k in 0..r {
                    let v = cj[k];
                    let tk = &ts[k * r..(k + 1) * r];
                    for i in 0..r {
                        col[i] += tk[i] * v;
                    }
                }
                for i in 0..r {
                    cj[i] += col[i];
                }
            }
        }
        Ok(())
    }

    /// Label row of the output.
    pub fn predict_labels(&self, e: &TokenMatrix) -> Result<Vec<f64>> {
        let mut m = e.0.clone();
        self.forward_in_place(&mut m)?;
        Ok(m.row(self.d).iter().copied().collect())
    }
}
