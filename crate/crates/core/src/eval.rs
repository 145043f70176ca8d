//! Experiment harnesses: coverage, Wasserstein distance between predictive
//! distributions, inference-time distribution shift and timing.
//!
//! Every run draws its own task from stream `run` of the experiment seed, so
//! results do not depend on the number of worker threads.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{build_grid, full_cp, split_cp, Grid, PredictionSet, Predictor};
use crate::error::{arg_err, dim_err, Error, Result};
use crate::ridge::bayes_lambda;
use crate::rng;
use crate::stats::{mean, Summary};
use crate::taskgen::{sample_points, GenConfig, TaskSample};

/// Interval construction method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    CpIcl,
    CpRidge,
    SplitCpRidge,
}

impl MethodKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MethodKind::CpIcl => "cp_icl",
            MethodKind::CpRidge => "cp_ridge",
            MethodKind::SplitCpRidge => "split_cp_ridge",
        }
    }
}

/// How two prediction sets are compared by the Wasserstein harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WdistMode {
    /// Typicalness curves normalized into pmfs over the shared grid.
    #[default]
    GridPmf,
    /// Empirical distributions of the raw typicalness values.
    TypicalnessValues,
}

/// Inference-time overrides of the task distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shift {
    pub a_inf: Option<f64>,
    pub sigma_w_inf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub runs: usize,
    pub tests_per_run: usize,
    pub alpha: f64,
    pub method: MethodKind,
    pub grid_size: usize,
    /// Ridge regularizer; `sigma_w^2 / sigma_n^2` when unset (0 for
    /// noiseless data).
    pub lambda: Option<f64>,
    /// Fraction of the context used for calibration by split CP.
    pub cal_fraction: f64,
    pub shift: Option<Shift>,
    /// Context sizes for sweeps.
    pub context_sizes: Vec<usize>,
    pub ood_a: Vec<f64>,
    pub ood_sigma_w: Vec<f64>,
    pub wdist_mode: WdistMode,
    pub bench_repetitions: usize,
    pub bench_warmup: usize,
    #[serde(skip)]
    pub gen: GenConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            runs: 1000,
            tests_per_run: 100,
            alpha: 0.1,
            method: MethodKind::CpRidge,
            grid_size: crate::conformal::DEFAULT_GRID_SIZE,
            lambda: None,
            cal_fraction: 0.5,
            shift: None,
            context_sizes: vec![10, 20, 50, 100],
            ood_a: log_grid(0.25, 4.0, 9),
            ood_sigma_w: log_grid(0.25, 4.0, 9),
            wdist_mode: WdistMode::GridPmf,
            bench_repetitions: 30,
            bench_warmup: 5,
            gen: GenConfig::default(),
        }
    }
}

/// `count` log-spaced values from `lo` to `hi`.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        if self.runs < 1 || self.tests_per_run < 1 {
            return Err(Error::Config("runs and tests_per_run must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.grid_size < 2 {
            return Err(Error::Config("grid_size must be >= 2".into()));
        }
        if !(self.cal_fraction > 0.0 && self.cal_fraction < 1.0) {
            return Err(Error::Config("cal_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Task distribution at inference time, with any shift applied.
    pub fn inference_gen(&self) -> GenConfig {
        let mut g = self.gen.clone();
        if let Some(s) = self.shift {
            if let Some(a) = s.a_inf {
                g.a = a;
            }
            if let Some(sw) = s.sigma_w_inf {
                g.sigma_w = sw;
            }
        }
        g
    }

    /// The ridge regularizer for this experiment.
    pub fn ridge_lambda(&self) -> Result<f64> {
        if let Some(l) = self.lambda {
            return Ok(l);
        }
        let g = self.inference_gen();
        if g.sigma_n == 0.0 {
            Ok(0.0)
        } else {
            bayes_lambda(g.sigma_w, g.sigma_n)
        }
    }

    fn with_n(&self, n: usize) -> Self {
        let mut c = self.clone();
        c.gen.n = n;
        c
    }
}

/// Interval construction used by a coverage run.
#[derive(Clone, Copy)]
pub enum Method<'a> {
    FullCp(&'a dyn Predictor),
    SplitCp { lambda: f64, cal_fraction: f64 },
}

/// Per-run outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub coverage: f64,
    /// Median interval width over the run's test points.
    pub width: f64,
    pub seconds: f64,
    /// Test points whose prediction set was empty.
    pub empty_sets: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub runs: Vec<RunRecord>,
    pub coverage: Summary,
    pub width: Summary,
    pub seconds: Summary,
}

impl EvalResult {
    pub fn from_runs(runs: Vec<RunRecord>) -> Self {
        let pick = |f: fn(&RunRecord) -> f64| runs.iter().map(f).collect::<Vec<_>>();
        Self {
            coverage: Summary::of(&pick(|r| r.coverage)),
            width: Summary::of(&pick(|r| r.width)),
            seconds: Summary::of(&pick(|r| r.seconds)),
            runs,
        }
    }

    pub fn coverages(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.coverage).collect()
    }
}

/// A sampled run: context plus test points from one task.
pub struct RunData {
    pub task: TaskSample,
    pub n: usize,
}

impl RunData {
    pub fn sample(gen: &GenConfig, tests: usize, seed: u64, run: u64) -> Result<Self> {
        let mut r = rng::stream(seed, run);
        let task = sample_points(gen, gen.n + tests, &mut r)?;
        Ok(Self { task, n: gen.n })
    }

    pub fn x_ctx(&self) -> DMatrix<f64> {
        self.task.x.rows(0, self.n).into_owned()
    }

    pub fn y_ctx(&self) -> DVector<f64> {
        self.task.y.rows(0, self.n).into_owned()
    }

    pub fn tests(&self) -> impl Iterator<Item = (DVector<f64>, f64)> + '_ {
        (self.n..self.task.x.nrows()).map(move |i| (self.task.x.row(i).transpose(), self.task.y[i]))
    }
}

fn check_predictor(p: &dyn Predictor, d: usize) -> Result<()> {
    match p.input_dim() {
        Some(pd) if pd != d => dim_err(format!("predictor expects d = {pd}, experiment has d = {d}")),
        _ => Ok(()),
    }
}

fn run_once(cfg: &ExperimentConfig, method: Method<'_>, run: u64) -> Result<RunRecord> {
    let gen = cfg.inference_gen();
    let data = RunData::sample(&gen, cfg.tests_per_run, gen.seed, run)?;
    let x_ctx = data.x_ctx();
    let y_ctx = data.y_ctx();
    let start = Instant::now();
    let mut covered = 0usize;
    let mut empty = 0usize;
    let mut widths = Vec::with_capacity(cfg.tests_per_run);
    match method {
        Method::FullCp(p) => {
            let grid = build_grid(y_ctx.as_slice(), cfg.grid_size)?;
            for (x, y) in data.tests() {
                let set = full_cp(p, &x_ctx, &y_ctx, &x, cfg.alpha, &grid)?;
                covered += set.covers(y) as usize;
                empty += set.is_empty() as usize;
                widths.push(set.hull_width());
            }
        }
        Method::SplitCp {
            lambda,
            cal_fraction,
        } => {
            let n = data.n;
            let n_cal = ((n as f64) * cal_fraction).round() as usize;
            let n_cal = n_cal.clamp(1, n.saturating_sub(1).max(1));
            let n_train = n - n_cal;
            if n_train == 0 {
                return arg_err("split CP needs at least two context points");
            }
            let xtr = x_ctx.rows(0, n_train).into_owned();
            let ytr = y_ctx.rows(0, n_train).into_owned();
            let xcal = x_ctx.rows(n_train, n_cal).into_owned();
            let ycal = y_ctx.rows(n_train, n_cal).into_owned();
            for (x, y) in data.tests() {
                let s = split_cp(&xtr, &ytr, &xcal, &ycal, &x, cfg.alpha, lambda)?;
                covered += s.covers(y) as usize;
                widths.push(s.width());
            }
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(RunRecord {
        coverage: covered as f64 / cfg.tests_per_run as f64,
        width: crate::stats::median(&widths),
        seconds,
        empty_sets: empty,
    })
}

/// Empirical coverage and interval width over independent runs.
///
/// Each run samples a fresh task, a context of `n` points and
/// `tests_per_run` test points from the same task.
pub fn run_coverage_experiment(cfg: &ExperimentConfig, method: Method<'_>) -> Result<EvalResult> {
    cfg.validate()?;
    if let Method::FullCp(p) = method {
        check_predictor(p, cfg.gen.d)?;
    }
    let runs: Vec<RunRecord> = (0..cfg.runs as u64)
        .into_par_iter()
        .map(|r| run_once(cfg, method, r))
        .collect::<Result<_>>()?;
    Ok(EvalResult::from_runs(runs))
}

/// A probability mass function on a grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Pmf {
    pub grid: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Typicalness curve normalized to a pmf over the candidate grid.
pub fn predictive_pmf(set: &PredictionSet) -> Result<Pmf> {
    let total: f64 = set.typicalness.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("typicalness is zero on the whole grid".into()));
    }
    Ok(Pmf {
        grid: set.grid.values().to_vec(),
        weights: set.typicalness.iter().map(|t| t / total).collect(),
    })
}

fn check_pmf(p: &Pmf) -> Result<()> {
    if p.grid.len() != p.weights.len() || p.grid.is_empty() {
        return dim_err("pmf grid and weights differ in length");
    }
    if p.weights.iter().any(|w| !(*w >= 0.0)) {
        return arg_err("pmf weights must be non-negative");
    }
    let s: f64 = p.weights.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return arg_err(format!("pmf weights sum to {s}, not 1"));
    }
    Ok(())
}

/// Wasserstein-1 distance between two pmfs on the same grid,
/// `sum_k |F_a(z_k) - F_b(z_k)| (z_{k+1} - z_k)`.
pub fn wasserstein_1d(a: &Pmf, b: &Pmf) -> Result<f64> {
    check_pmf(a)?;
    check_pmf(b)?;
    if a.grid != b.grid {
        return arg_err("pmfs are defined on different grids");
    }
    let mut fa = 0.0;
    let mut fb = 0.0;
    let mut w = 0.0;
    for k in 0..a.grid.len() - 1 {
        fa += a.weights[k];
        fb += b.weights[k];
        w += (fa - fb).abs() * (a.grid[k + 1] - a.grid[k]);
    }
    Ok(w)
}

/// Wasserstein-1 distance between the empirical distributions of two samples.
pub fn wasserstein_samples(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return arg_err("empty sample");
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.total_cmp(y));
    sb.sort_by(|x, y| x.total_cmp(y));
    let mut pts: Vec<f64> = sa.iter().chain(&sb).copied().collect();
    pts.sort_by(|x, y| x.total_cmp(y));
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut w = 0.0;
    for k in 0..pts.len() - 1 {
        while ia < sa.len() && sa[ia] <= pts[k] {
            ia += 1;
        }
        while ib < sb.len() && sb[ib] <= pts[k] {
            ib += 1;
        }
        w += (ia as f64 / na - ib as f64 / nb).abs() * (pts[k + 1] - pts[k]);
    }
    Ok(w)
}

/// Distance between two prediction sets on the same grid under `mode`.
pub fn set_distance(a: &PredictionSet, b: &PredictionSet, mode: WdistMode) -> Result<f64> {
    match mode {
        WdistMode::GridPmf => wasserstein_1d(&predictive_pmf(a)?, &predictive_pmf(b)?),
        WdistMode::TypicalnessValues => wasserstein_samples(&a.typicalness, &b.typicalness),
    }
}

/// Per-run result of a paired ICL/ridge comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedRecord {
    /// Coverage of the first predictor.
    pub coverage: f64,
    /// Mean distance over test points with non-degenerate pmfs.
    pub w1: f64,
    pub skipped: usize,
}

fn paired_run(
    cfg: &ExperimentConfig,
    icl: &dyn Predictor,
    ridge: &dyn Predictor,
    run: u64,
) -> Result<PairedRecord> {
    let gen = cfg.inference_gen();
    let data = RunData::sample(&gen, cfg.tests_per_run, gen.seed, run)?;
    let x_ctx = data.x_ctx();
    let y_ctx = data.y_ctx();
    let grid = build_grid(y_ctx.as_slice(), cfg.grid_size)?;
    let mut covered = 0usize;
    let mut dists = Vec::with_capacity(cfg.tests_per_run);
    let mut skipped = 0usize;
    for (x, y) in data.tests() {
        let a = full_cp(icl, &x_ctx, &y_ctx, &x, cfg.alpha, &grid)?;
        let b = full_cp(ridge, &x_ctx, &y_ctx, &x, cfg.alpha, &grid)?;
        covered += a.covers(y) as usize;
        match set_distance(&a, &b, cfg.wdist_mode) {
            Ok(w) => dists.push(w),
            Err(Error::Degenerate(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(PairedRecord {
        coverage: covered as f64 / cfg.tests_per_run as f64,
        w1: if dists.is_empty() { f64::NAN } else { mean(&dists) },
        skipped,
    })
}

fn paired_runs(
    cfg: &ExperimentConfig,
    icl: &dyn Predictor,
    ridge: &dyn Predictor,
) -> Result<Vec<PairedRecord>> {
    cfg.validate()?;
    check_predictor(icl, cfg.gen.d)?;
    check_predictor(ridge, cfg.gen.d)?;
    (0..cfg.runs as u64)
        .into_par_iter()
        .map(|r| paired_run(cfg, icl, ridge, r))
        .collect()
}

fn finite_mean(v: &[f64]) -> f64 {
    let f: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    mean(&f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WdistRow {
    pub d: usize,
    pub n: usize,
    pub ratio: f64,
    pub mean_w1: f64,
    /// Spread of per-run mean distances.
    pub w1: Summary,
    pub skipped: usize,
}

/// Mean Wasserstein distance between the two predictors' predictive
/// distributions for every context size in `cfg.context_sizes`.
pub fn run_wdist_experiment(
    cfg: &ExperimentConfig,
    icl: &dyn Predictor,
    ridge: &dyn Predictor,
) -> Result<Vec<WdistRow>> {
    if cfg.context_sizes.is_empty() {
        return arg_err("no context sizes configured");
    }
    cfg.context_sizes
        .iter()
        .map(|&n| {
            let c = cfg.with_n(n);
            let recs = paired_runs(&c, icl, ridge)?;
            let w: Vec<f64> = recs.iter().map(|r| r.w1).filter(|x| x.is_finite()).collect();
            Ok(WdistRow {
                d: c.gen.d,
                n,
                ratio: c.gen.d as f64 / n as f64,
                mean_w1: finite_mean(&w),
                w1: Summary::of(&w),
                skipped: recs.iter().map(|r| r.skipped).sum(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodRow {
    /// `"a"` or `"sigma_w"`.
    pub parameter: String,
    pub value: f64,
    pub coverage: Summary,
    pub mean_w1: f64,
}

/// Sweeps the inference-time input range and weight scale.
///
/// Context and test points of each run come from the same shifted
/// distribution; the predictor parameters stay fixed.
pub fn run_ood_experiment(
    cfg: &ExperimentConfig,
    icl: &dyn Predictor,
    ridge_for: &dyn Fn(&ExperimentConfig) -> Result<Box<dyn Predictor>>,
) -> Result<Vec<OodRow>> {
    if cfg.ood_a.is_empty() && cfg.ood_sigma_w.is_empty() {
        return arg_err("empty distribution-shift sweep");
    }
    let sweeps = cfg
        .ood_a
        .iter()
        .map(|&v| ("a", v, Shift { a_inf: Some(v), sigma_w_inf: None }))
        .chain(
            cfg.ood_sigma_w
                .iter()
                .map(|&v| ("sigma_w", v, Shift { a_inf: None, sigma_w_inf: Some(v) })),
        );
    let mut rows = Vec::new();
    for (name, value, shift) in sweeps {
        let mut c = cfg.clone();
        c.shift = Some(shift);
        let ridge = ridge_for(&c)?;
        let recs = paired_runs(&c, icl, ridge.as_ref())?;
        let cov: Vec<f64> = recs.iter().map(|r| r.coverage).collect();
        let w: Vec<f64> = recs.iter().map(|r| r.w1).collect();
        rows.push(OodRow {
            parameter: name.to_string(),
            value,
            coverage: Summary::of(&cov),
            mean_w1: finite_mean(&w),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    pub n: usize,
    pub seconds: Summary,
}

/// Context sizes timed by default.
pub const BENCH_CONTEXT_SIZES: [usize; 3] = [50, 100, 300];

/// Wall-clock time to build prediction sets for one batch of
/// `tests_per_run` test points, per method and context size.
///
/// Each measurement follows `bench_warmup` untimed repetitions.
pub fn benchmark_time(
    cfg: &ExperimentConfig,
    methods: &[(MethodKind, Method<'_>)],
    context_sizes: &[usize],
) -> Result<Vec<BenchRow>> {
    if methods.is_empty() {
        return arg_err("no methods to benchmark");
    }
    if cfg.bench_repetitions == 0 {
        return arg_err("bench_repetitions must be >= 1");
    }
    let mut rows = Vec::new();
    for &n in context_sizes {
        let c = cfg.with_n(n);
        c.validate()?;
        for (kind, method) in methods {
            if let Method::FullCp(p) = method {
                check_predictor(*p, c.gen.d)?;
            }
            for w in 0..cfg.bench_warmup {
                run_once(&c, *method, w as u64)?;
            }
            let mut times = Vec::with_capacity(cfg.bench_repetitions);
            for r in 0..cfg.bench_repetitions {
                times.push(run_once(&c, *method, (cfg.bench_warmup + r) as u64)?.seconds);
            }
            rows.push(BenchRow {
                method: kind.as_str().to_string(),
                n,
                seconds: Summary::of(&times),
            });
        }
    }
    Ok(rows)
}

/// Typicalness curves of two predictors for one test input.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointCurves {
    pub grid: Grid,
    pub pi_icl: Vec<f64>,
    pub pi_ridge: Vec<f64>,
    pub y_true: f64,
}

/// Samples one run and returns both predictors' typicalness over the grid
/// for its first test point.
pub fn point_curves(
    cfg: &ExperimentConfig,
    icl: &dyn Predictor,
    ridge: &dyn Predictor,
) -> Result<PointCurves> {
    cfg.validate()?;
    check_predictor(icl, cfg.gen.d)?;
    let gen = cfg.inference_gen();
    let data = RunData::sample(&gen, 1, gen.seed, 0)?;
    let x_ctx = data.x_ctx();
    let y_ctx = data.y_ctx();
    let grid = build_grid(y_ctx.as_slice(), cfg.grid_size)?;
    let (x, y) = data.tests().next().expect("one test point");
    let a = full_cp(icl, &x_ctx, &y_ctx, &x, cfg.alpha, &grid)?;
    let b = full_cp(ridge, &x_ctx, &y_ctx, &x, cfg.alpha, &grid)?;
    Ok(PointCurves {
        grid,
        pi_icl: a.typicalness,
        pi_ridge: b.typicalness,
        y_true: y,
    })
}
