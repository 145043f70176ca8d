//! Compute scaling law `f(N, D) = E + A / N^alpha + B / D^beta` for the
//! interval-quality loss, its asymmetric-MAE fit and the compute-optimal
//! allocation of parameters `N` and training examples `D`.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::icl_predictor;
use crate::error::{arg_err, Error, Result};
use crate::eval::{run_coverage_experiment, EvalResult, ExperimentConfig, Method};
use crate::lsa::{layer_forward_flops, train, TrainConfig};
use crate::optim::{bfgs, golden_section, nelder_mead};
use crate::report::fmt_f64;
use crate::rng;
use crate::stats::mean;

/// Penalty weight of over-fitting residuals used by default.
pub const DEFAULT_LAMBDA_ASYM: f64 = 0.1;
/// Restarts used by default.
pub const DEFAULT_STARTS: usize = 64;

/// One trained model: parameters, training examples, loss and FLOPs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingDatapoint {
    #[serde(rename = "N")]
    pub n_params: f64,
    #[serde(rename = "D")]
    pub n_data: f64,
    pub loss: f64,
    pub flops: f64,
}

impl ScalingDatapoint {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.n_params, self.n_data, self.loss, self.flops]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if ok {
            Ok(())
        } else {
            arg_err(format!("datapoint fields must be positive and finite: {self:?}"))
        }
    }
}

/// Outcome of one restart of the fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartDiagnostic {
    /// `(alpha, beta, ln A, ln B, ln E)` at the start.
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub alpha: f64,
    pub beta: f64,
    #[serde(rename = "A")]
    pub a_coef: f64,
    #[serde(rename = "B")]
    pub b_coef: f64,
    #[serde(rename = "E")]
    pub e_coef: f64,
    /// Exponent of `N` in the optimal allocation, `beta / (alpha + beta)`.
    pub a: f64,
    /// Exponent of `D` in the optimal allocation, `alpha / (alpha + beta)`.
    pub b: f64,
    pub fit_loss: f64,
    #[serde(default)]
    pub diagnostics: Vec<RestartDiagnostic>,
}

/// Allocation exponents `(a, b)` for loss exponents `(alpha, beta)`.
pub fn allocation_exponents(alpha: f64, beta: f64) -> (f64, f64) {
    let a = beta / (alpha + beta);
    (a, 1.0 - a)
}

impl ScalingFit {
    /// Builds a fit from the five law parameters.
    pub fn from_params(alpha: f64, beta: f64, a_coef: f64, b_coef: f64, e_coef: f64) -> Self {
        let (a, b) = allocation_exponents(alpha, beta);
        Self {
            alpha,
            beta,
            a_coef,
            b_coef,
            e_coef,
            a,
            b,
            fit_loss: 0.0,
            diagnostics: Vec::new(),
        }
    }

    pub fn predict(&self, n_params: f64, n_data: f64) -> f64 {
        predicted_loss(self, n_params, n_data)
    }
}

/// `y - y_hat` when positive, otherwise `lambda * |y - y_hat|`.
pub fn asymmetric_mae(y: f64, y_hat: f64, lambda: f64) -> f64 {
    let r = y - y_hat;
    if r > 0.0 {
        r
    } else {
        lambda * r.abs()
    }
}

pub fn predicted_loss(fit: &ScalingFit, n_params: f64, n_data: f64) -> f64 {
    fit.e_coef + fit.a_coef / n_params.powf(fit.alpha) + fit.b_coef / n_data.powf(fit.beta)
}

fn log_sum_exp3(a: f64, b: f64, c: f64) -> f64 {
    let m = a.max(b).max(c);
    if !m.is_finite() {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp() + (c - m).exp()).ln()
}

/// Mean asymmetric loss between `ln f` and `ln loss` at parameters
/// `(alpha, beta, ln A, ln B, ln E)`.
pub fn fit_objective(theta: &[f64], data: &[ScalingDatapoint], lambda: f64) -> f64 {
    let (alpha, beta, la, lb, le) = (theta[0], theta[1], theta[2], theta[3], theta[4]);
    let total: f64 = data
        .iter()
        .map(|p| {
            let lf = log_sum_exp3(le, la - alpha * p.n_params.ln(), lb - beta * p.n_data.ln());
            asymmetric_mae(lf, p.loss.ln(), lambda)
        })
        .sum();
    total / data.len() as f64
}

fn initial_points(data: &[ScalingDatapoint], n_starts: usize) -> Vec<[f64; 5]> {
    let losses: Vec<f64> = data.iter().map(|p| p.loss).collect();
    let min_loss = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let ln_mid = |v: Vec<f64>| mean(&v.iter().map(|x| x.ln()).collect::<Vec<_>>());
    let ln_n = ln_mid(data.iter().map(|p| p.n_params).collect());
    let ln_d = ln_mid(data.iter().map(|p| p.n_data).collect());
    let ln_loss = ln_mid(losses);

    let exps = crate::eval::log_grid(0.1, 1.2, 4);
    let mut out = Vec::new();
    'outer: for &share in &[0.5, 0.1] {
        for &e_frac in &[0.5, 0.9] {
            for &alpha in &exps {
                for &beta in &exps {
                    if out.len() == n_starts {
                        break 'outer;
                    }
                    let ls = ln_loss + f64::ln(share);
                    out.push([
                        alpha,
                        beta,
                        ls + alpha * ln_n,
                        ls + beta * ln_d,
                        (e_frac * min_loss).ln(),
                    ]);
                }
            }
        }
    }
    let mut k = 0;
    while out.len() < n_starts {
        let mut p = out[k % 64];
        p[4] -= 1.0 + (k / 64) as f64;
        out.push(p);
        k += 1;
    }
    out
}

/// Fits the scaling law by minimizing the mean asymmetric MAE between
/// `ln f(N_i, D_i)` and `ln loss_i`.
///
/// Each restart runs BFGS from a grid-spread start, then a Nelder-Mead
/// polish; the fit with the lowest objective and positive exponents wins,
/// ties going to the earliest restart.
pub fn fit_scaling_law(
    data: &[ScalingDatapoint],
    lambda_asym: f64,
    n_starts: usize,
) -> Result<ScalingFit> {
    if data.len() < 5 {
        return arg_err(format!("need at least 5 datapoints, got {}", data.len()));
    }
    if !(lambda_asym > 0.0) {
        return arg_err("lambda_asym must be positive");
    }
    if n_starts == 0 {
        return arg_err("n_starts must be >= 1");
    }
    for p in data {
        p.validate()?;
    }
    let obj = |t: &[f64]| fit_objective(t, data, lambda_asym);
    let starts = initial_points(data, n_starts);
    let diagnostics: Vec<RestartDiagnostic> = starts
        .par_iter()
        .map(|s| {
            let q = bfgs(&obj, s, 500, 1e-10);
            let p = nelder_mead(&obj, &q.x, 0.05, 4000, 1e-14);
            let best = if p.value <= q.value { p.x } else { q.x };
            RestartDiagnostic {
                start: s.to_vec(),
                objective: obj(&best),
                end: best,
                iterations: q.iterations + p.iterations,
            }
        })
        .collect();
    let best = diagnostics
        .iter()
        .filter(|d| d.objective.is_finite() && d.end[0] > 0.0 && d.end[1] > 0.0)
        .min_by(|a, b| a.objective.total_cmp(&b.objective));
    let Some(best) = best else {
        let summary: Vec<String> = diagnostics
            .iter()
            .map(|d| format!("obj={} end={:?}", d.objective, d.end))
            .collect();
        return Err(Error::FitFailure(format!(
            "no restart converged to positive exponents: {}",
            summary.join("; ")
        )));
    };
    let t = &best.end;
    let mut fit = ScalingFit::from_params(t[0], t[1], t[2].exp(), t[3].exp(), t[4].exp());
    fit.fit_loss = best.objective;
    fit.diagnostics = diagnostics;
    Ok(fit)
}

/// Training cost as a function of parameters and training examples.
pub trait FlopsModel: Sync {
    fn flops(&self, n_params: f64, n_data: f64) -> f64;

    /// Smallest admissible parameter count.
    fn min_params(&self) -> f64 {
        1.0
    }

    /// Smallest admissible number of training examples.
    fn min_data(&self) -> f64 {
        1.0
    }

    /// `D` with `flops(N, D) = budget`, found by bisection in `ln D`.
    fn data_for_budget(&self, n_params: f64, budget: f64) -> f64 {
        let g = |ld: f64| self.flops(n_params, ld.exp()) - budget;
        let mut lo = self.min_data().ln();
        let mut hi = lo + 1.0;
        while g(hi) < 0.0 && hi < 700.0 {
            hi += 2.0 * (hi - lo);
        }
        for _ in 0..200 {
            let m = 0.5 * (lo + hi);
            if g(m) < 0.0 {
                lo = m;
            } else {
                hi = m;
            }
        }
        (0.5 * (lo + hi)).exp()
    }
}

/// `flops = k * N * D`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BilinearFlops {
    pub k: f64,
}

impl FlopsModel for BilinearFlops {
    fn flops(&self, n_params: f64, n_data: f64) -> f64 {
        self.k * n_params * n_data
    }

    fn data_for_budget(&self, n_params: f64, budget: f64) -> f64 {
        budget / (self.k * n_params)
    }
}

/// Analytic training cost of the LSA model at fixed `d`, `n` and batch
/// size, with depth `L = N / (4 (d+1)^2)` treated as continuous.
///
/// Per training example: `3 L F_layer + 3`, plus the optimizer's
/// `10 N` per step spread over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LsaFlopsModel {
    pub d: usize,
    pub n: usize,
    pub batch_size: usize,
}

impl LsaFlopsModel {
    fn per_example(&self, n_params: f64) -> f64 {
        let per_layer_param = (4 * (self.d + 1) * (self.d + 1)) as f64;
        let layers = n_params / per_layer_param;
        3.0 * layers * layer_forward_flops(self.d, self.n) as f64
            + 3.0
            + 10.0 * n_params / self.batch_size as f64
    }
}

impl FlopsModel for LsaFlopsModel {
    fn flops(&self, n_params: f64, n_data: f64) -> f64 {
        n_data * self.per_example(n_params)
    }

    fn min_params(&self) -> f64 {
        (4 * (self.d + 1) * (self.d + 1)) as f64
    }

    fn data_for_budget(&self, n_params: f64, budget: f64) -> f64 {
        budget / self.per_example(n_params)
    }
}

/// Largest `N` for which the budget still buys `min_data` examples.
fn max_params(model: &dyn FlopsModel, budget: f64) -> Result<f64> {
    let (n0, d0) = (model.min_params(), model.min_data());
    if !(budget > 0.0) || model.flops(n0, d0) > budget {
        return arg_err(format!("budget {budget} cannot train the smallest model"));
    }
    let g = |ln: f64| model.flops(ln.exp(), d0) - budget;
    let mut lo = n0.ln();
    let mut hi = lo + 1.0;
    while g(hi) < 0.0 {
        hi += 2.0 * (hi - lo);
        if hi > 700.0 {
            return arg_err("flops model does not grow with N");
        }
    }
    for _ in 0..200 {
        let m = 0.5 * (lo + hi);
        if g(m) < 0.0 {
            lo = m;
        } else {
            hi = m;
        }
    }
    Ok(lo.exp())
}

/// Compute-optimal `(N, D)` for `budget`: minimizes the fitted loss along
/// `flops(N, D) = budget` by a scan over `ln N` refined with golden-section
/// search.
pub fn optimal_allocation(
    fit: &ScalingFit,
    budget: f64,
    model: &dyn FlopsModel,
) -> Result<(f64, f64)> {
    let n_hi = max_params(model, budget)?;
    let (lo, hi) = (model.min_params().ln(), n_hi.ln());
    let loss_at = |ln: f64| {
        let n = ln.exp();
        fit.predict(n, model.data_for_budget(n, budget))
    };
    if hi - lo < 1e-12 {
        let n = n_hi;
        return Ok((n, model.data_for_budget(n, budget)));
    }
    let steps = 400;
    let h = (hi - lo) / steps as f64;
    let k = (0..=steps)
        .min_by(|&i, &j| loss_at(lo + i as f64 * h).total_cmp(&loss_at(lo + j as f64 * h)))
        .unwrap_or(0);
    let a = (lo + (k as f64 - 1.0) * h).max(lo);
    let b = (lo + (k as f64 + 1.0) * h).min(hi);
    let ln = golden_section(&loss_at, a, b, 1e-12);
    let n = ln.exp();
    Ok((n, model.data_for_budget(n, budget)))
}

/// Point on an isoFLOP contour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContourPoint {
    #[serde(rename = "N")]
    pub n_params: f64,
    #[serde(rename = "D")]
    pub n_data: f64,
    pub loss: f64,
}

/// `n_points` points of `flops(N, D) = budget`, log-spaced in `N` over the
/// feasible range, with predicted losses.
pub fn isoflop_contour(
    fit: &ScalingFit,
    budget: f64,
    model: &dyn FlopsModel,
    n_points: usize,
) -> Result<Vec<ContourPoint>> {
    if n_points == 0 {
        return arg_err("n_points must be >= 1");
    }
    let n_hi = max_params(model, budget)?;
    let ns = crate::eval::log_grid(model.min_params(), n_hi, n_points);
    Ok(ns
        .into_iter()
        .map(|n| {
            let d = model.data_for_budget(n, budget);
            ContourPoint {
                n_params: n,
                n_data: d,
                loss: fit.predict(n, d),
            }
        })
        .collect())
}

/// Mean interval width over all runs.
pub fn mean_width(r: &EvalResult) -> f64 {
    mean(&r.runs.iter().map(|x| x.width).collect::<Vec<_>>())
}

/// Trains every configuration, evaluates its full-CP intervals under
/// `eval_cfg` and records `(N, D, loss, flops)`.
///
/// Config `i` trains on `rng::training_stream(seed, i)`. A failed config yields
/// an `Err` in its slot and does not abort the others.
pub fn collect_scaling_data(
    train_cfgs: &[TrainConfig],
    eval_cfg: &ExperimentConfig,
    seed: u64,
    metric: &(dyn Fn(&EvalResult) -> f64 + Sync),
) -> Result<Vec<Result<ScalingDatapoint>>> {
    if train_cfgs.is_empty() {
        return arg_err("no training configurations");
    }
    Ok(train_cfgs
        .par_iter()
        .enumerate()
        .map(|(i, cfg)| {
            let report = train(cfg, &mut rng::training_stream(seed, i as u64))?;
            let predictor = icl_predictor(report.final_params);
            let mut ecfg = eval_cfg.clone();
            ecfg.gen.d = cfg.gen.d;
            let result = run_coverage_experiment(&ecfg, Method::FullCp(&predictor))?;
            let point = ScalingDatapoint {
                n_params: report.n_params as f64,
                n_data: report.n_targets as f64,
                loss: metric(&result),
                flops: report.flops_total as f64,
            };
            point.validate()?;
            Ok(point)
        })
        .collect())
}

pub const DATAPOINT_HEADER: [&str; 4] = ["N", "D", "loss", "flops"];

pub fn write_datapoints<W: Write>(w: W, data: &[ScalingDatapoint]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(DATAPOINT_HEADER)?;
    for p in data {
        out.write_record([p.n_params, p.n_data, p.loss, p.flops].map(fmt_f64))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_datapoints<R: Read>(r: R) -> Result<Vec<ScalingDatapoint>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, rec) in rd.deserialize().enumerate() {
        let row = |e: &dyn std::fmt::Display| Error::Argument(format!("datapoint row {}: {e}", i + 1));
        let p: ScalingDatapoint = rec.map_err(|e| row(&e))?;
        p.validate().map_err(|e| row(&e))?;
        out.push(p);
    }
    Ok(out)
}
