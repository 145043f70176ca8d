//! Full and split conformal prediction for regression.
//!
//! Full conformal prediction scans a grid of candidate labels `z`. For each
//! candidate a [`Predictor`] returns predictions for all `n + 1` points of the
//! augmented dataset, the absolute residuals are ranked, and `z` is kept when
//! its typicalness `1 - rank / (n + 1)` is at least `alpha`. The rank counts
//! every score `<=` the candidate's own score, itself included.
//!
//! Two predictors are provided: [`IclPredictor`] runs one forward pass of a
//! pre-trained LSA model per candidate, and [`RidgeOraclePredictor`] refits
//! ridge regression on every augmented dataset.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{arg_err, dim_err, Error, Result};
use crate::lsa::{InferenceModel, LsaParams};
use crate::ridge::{ridge_fit, ridge_fit_augmented, ridge_predict, AffineRefit};
use crate::taskgen::tokenize;

/// Tolerance on `typicalness >= alpha`, absorbing the rounding of `alpha`
/// and of `rank / (n + 1)`. Typicalness values are `1 / (n + 1)` apart.
pub const ACCEPT_TOL: f64 = 1e-12;

/// Default number of candidate labels.
pub const DEFAULT_GRID_SIZE: usize = 1000;

/// Produces in-context predictions for an augmented dataset.
///
/// Implementations must be deterministic and symmetric in the `n` context
/// pairs.
pub trait Predictor: Send + Sync {
    /// Predictions for the `n` context points followed by the query, with the
    /// query labelled `z`.
    fn predict(
        &self,
        x_ctx: &DMatrix<f64>,
        y_ctx: &DVector<f64>,
        x_new: &DVector<f64>,
        z: f64,
    ) -> Result<Vec<f64>>;

    /// Calls `visit(k, predictions)` for every candidate in `grid`, in order.
    fn for_each_candidate(
        &self,
        x_ctx: &DMatrix<f64>,
        y_ctx: &DVector<f64>,
        x_new: &DVector<f64>,
        grid: &[f64],
        visit: &mut dyn FnMut(usize, &[f64]),
    ) -> Result<()> {
        for (k, &z) in grid.iter().enumerate() {
            let p = self.predict(x_ctx, y_ctx, x_new, z)?;
            visit(k, &p);
        }
        Ok(())
    }

    /// Input dimension the predictor is bound to, if any.
    fn input_dim(&self) -> Option<usize> {
        None
    }
}

impl<P: Predictor + ?Sized> Predictor for Arc<P> {
    fn predict(
        &self,
        x_ctx: &DMatrix<f64>,
        y_ctx: &DVector<f64>,
        x_new: &DVector<f64>,
        z: f64,
    ) -> Result<Vec<f64>> {
        (**self).predict(x_ctx, y_ctx, x_new, z)
    }

    fn for_each_candidate(
        &self,
        x_ctx: &DMatrix<f64>,
        y_ctx: &DVector<f64>,
        x_new: &DVector<f64>,
        grid: &[f64],
        visit: &mut dyn FnMut(usize, &[f64]),
    ) -> Result<()> {
        (**self).for_each_candidate(x_ctx, y_ctx, x_new, grid, visit)
    }

    fn input_dim(&self) -> Option<usize> {
        (**self).input_dim()
    }
}

/// In-context predictions of a pre-trained LSA model: one forward pass per
/// candidate label, no refitting.
#[derive(Debug, Clone)]
pub struct IclPredictor {
    params: LsaParams,
    model: InferenceModel,
}

impl IclPredictor {
    pub fn new(params: LsaParams) -> Self {
        let model = InferenceModel::new(&params);
        Self { params, model }
    }

    pub fn params(&self) -> &LsaParams {
        &self.params
    }

    fn check(&self, x_ctx: &DMatrix<f64>) -> Result<()> {
        if x_ctx.ncols() != self.params.d {
            return dim_err(format!(
                "model trained for d = {}, context has d = {}",
                self.params.d,
                x_ctx.ncols()
            ));
        }
        Ok(())
    }
}

/// Wraps trained parameters as a predictor.
pub fn icl_predictor(params: LsaParams) -> IclPredictor {
    IclPredictor::new(params)
}

impl Predictor for IclPredictor {
    fn predict(
        &self,
        x_ctx: &DMatrix<f64>,
        y_ctx: &DVector<f64>,
        x_new: &DVector<f64>,
        z: f64,
    ) -> Result<Vec<f64>> {
        self.check(x_ctx)?;
        let e = tokenize(x_ctx, y_ctx, x_new, z)?;
        self.model.predict_labels(&e)
    }

    fn for_each_candidate(
        &self,
        x_ctx: &DMatrix<f64>,
        y_ctx: &DVector<f64>,
        x_new: &DVector<f64>,
        grid: &[f64],
        visit: &mut dyn FnMut(usize, &[f64]),
    ) -> Result<()> {
        self.check(x_ctx)?;
        let base = tokenize(x_ctx, y_ctx, x_new, 0.0)?;
        let (d, n) = (base.d(), base.n());
        let mut work = base.0.clone();
        let mut labels = vec![0.0; n + 1];
        for (k, &z) in grid.iter().enumerate() {
            work.copy_from(&base.0);
            work[(d, n)] = z;
            self.model.forward_in_place(&mut work)?;
            for (j, l) in labels.iter_mut().enumerate() {
                *l = work[(d, j)];
            }
            visit(k, &labels);
        }
        Ok(())
    }

    fn input_dim(&self) -> Option<usize> {
        Some(self.params.d)
    }
}

/// Ridge refit on every augmented dataset: the exact conformal oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RidgeOraclePredictor {
    pub lambda: f64,
}

pub fn ridge_oracle_predictor(lambda: f64) -> Result<RidgeOraclePredictor> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return arg_err(format!("lambda must be >= 0, got {lambda}"));
    }
    Ok(RidgeOraclePredictor { lambda })
}

impl Predictor for RidgeOraclePredictor {
    fn predict(
        &self,
        x_ctx: &DMatrix<f64>,
        y_ctx: &DVector<f64>,
        x_new: &DVector<f64>,
        z: f64,
    ) -> Result<Vec<f64>> {
        let model = ridge_fit_augmented(x_ctx, y_ctx, x_new, z, self.lambda)?;
        let n = x_ctx.nrows();
        let mut xa = x_ctx.clone().insert_row(n, 0.0);
        xa.row_mut(n).copy_from(&x_new.transpose());
        Ok(ridge_predict(&model, &xa)?.iter().copied().collect())
    }

    /// Uses one factorization for the whole grid; see [`AffineRefit`].
    fn for_each_candidate(
        &self,
        x_ctx: &DMatrix<f64>,
        y_ctx: &DVector<f64>,
        x_new: &DVector<f64>,
        grid: &[f64],
        visit: &mut dyn FnMut(usize, &[f64]),
    ) -> Result<()> {
        let refit = AffineRefit::new(x_ctx, y_ctx, x_new, self.lambda)?;
        let mut out = vec![0.0; x_ctx.nrows() + 1];
        for (k, &z) in grid.iter().enumerate() {
            refit.predict_into(z, &mut out);
            visit(k, &out);
        }
        Ok(())
    }
}

/// Strictly increasing candidate labels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Grid {
    values: Vec<f64>,
}

impl Grid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return arg_err("grid needs at least 2 values");
        }
        if values.windows(2).any(|w| !(w[1] > w[0])) || values.iter().any(|v| !v.is_finite()) {
            return arg_err("grid values must be finite and strictly increasing");
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn lo(&self) -> f64 {
        self.values[0]
    }

    pub fn hi(&self) -> f64 {
        self.values[self.values.len() - 1]
    }
}

/// `k` equally spaced candidates over the label range widened by a quarter of
/// its span on each side. Constant labels `c` give `[c - 1, c + 1]`.
pub fn build_grid(y_ctx: &[f64], k: usize) -> Result<Grid> {
    if k < 2 {
        return arg_err(format!("grid size must be >= 2, got {k}"));
    }
    if y_ctx.is_empty() {
        return arg_err("grid needs at least one label");
    }
    let y_min = y_ctx.iter().copied().fold(f64::INFINITY, f64::min);
    let y_max = y_ctx.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let delta = y_max - y_min;
    let (lo, hi) = if delta > 0.0 {
        (y_min - 0.25 * delta, y_max + 0.25 * delta)
    } else {
        (y_min - 1.0, y_min + 1.0)
    };
    let step = (hi - lo) / (k - 1) as f64;
    let mut values: Vec<f64> = (0..k).map(|i| lo + step * i as f64).collect();
    values[k - 1] = hi;
    Grid::new(values)
}

/// Absolute residuals: `|y_i - pred_i|` for the context, `|z - pred_{n+1}|`
/// for the candidate.
pub fn conformity_scores(y_ctx: &[f64], y_pred: &[f64], z: f64) -> Result<Vec<f64>> {
    if y_pred.len() != y_ctx.len() + 1 {
        return dim_err(format!(
            "{} labels need {} predictions, got {}",
            y_ctx.len(),
            y_ctx.len() + 1,
            y_pred.len()
        ));
    }
    let n = y_ctx.len();
    let mut s: Vec<f64> = y_ctx
        .iter()
        .zip(y_pred)
        .map(|(y, p)| (y - p).abs())
        .collect();
    s.push((z - y_pred[n]).abs());
    Ok(s)
}

/// Number of scores `<=` the last one, the last one included.
pub fn rank_of_last(scores: &[f64]) -> usize {
    match scores.last() {
        Some(&last) => scores.iter().filter(|&&r| r <= last).count(),
        None => 0,
    }
}

/// `1 - rank / (n + 1)` for the last score.
pub fn typicalness(scores: &[f64]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    1.0 - rank_of_last(scores) as f64 / scores.len() as f64
}

fn rank_from_predictions(y_ctx: &[f64], pred: &[f64], z: f64) -> usize {
    let n = y_ctx.len();
    let last = (z - pred[n]).abs();
    1 + y_ctx
        .iter()
        .zip(pred)
        .filter(|(y, p)| (*y - *p).abs() <= last)
        .count()
}

/// Whether a typicalness value passes the level `alpha`.
pub fn is_accepted(typicalness: f64, alpha: f64) -> bool {
    typicalness >= alpha - ACCEPT_TOL
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return arg_err(format!("alpha must lie in (0, 1), got {alpha}"));
    }
    Ok(())
}

/// Full conformal prediction set over a candidate grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionSet {
    pub grid: Grid,
    pub typicalness: Vec<f64>,
    pub alpha: f64,
    pub accepted: Vec<bool>,
    /// Smallest and largest accepted candidate.
    pub interval: Option<(f64, f64)>,
    /// Whether the accepted candidates form one run on the grid.
    pub contiguous: bool,
}

impl PredictionSet {
    pub fn is_empty(&self) -> bool {
        self.interval.is_none()
    }

    /// Whether `y` lies in the hull of the accepted candidates.
    pub fn covers(&self, y: f64) -> bool {
        matches!(self.interval, Some((lo, hi)) if lo <= y && y <= hi)
    }

    /// Width of the hull of accepted candidates.
    pub fn hull_width(&self) -> f64 {
        self.interval.map_or(0.0, |(lo, hi)| hi - lo)
    }

    /// Accepted grid cells times the grid spacing.
    pub fn set_measure(&self) -> f64 {
        let g = self.grid.values();
        let step = (g[g.len() - 1] - g[0]) / (g.len() - 1) as f64;
        self.accepted.iter().filter(|&&a| a).count() as f64 * step
    }
}

/// Runs full conformal prediction for one test input.
///
/// An empty accepted set is a valid outcome; it occurs when
/// `alpha > n / (n + 1)`.
pub fn full_cp(
    predictor: &dyn Predictor,
    x_ctx: &DMatrix<f64>,
    y_ctx: &DVector<f64>,
    x_new: &DVector<f64>,
    alpha: f64,
    grid: &Grid,
) -> Result<PredictionSet> {
    check_alpha(alpha)?;
    let n = x_ctx.nrows();
    if y_ctx.len() != n {
        return dim_err(format!("x_ctx has {n} rows but y_ctx has {}", y_ctx.len()));
    }
    if x_new.len() != x_ctx.ncols() {
        return dim_err("x_new length differs from the context dimension");
    }
    let ys = y_ctx.as_slice();
    let n1 = (n + 1) as f64;
    let mut typ = vec![0.0; grid.len()];
    let mut bad_len = false;
    predictor.for_each_candidate(x_ctx, y_ctx, x_new, grid.values(), &mut |k, pred| {
        if pred.len() != n + 1 {
            bad_len = true;
            return;
        }
        let rank = rank_from_predictions(ys, pred, grid.values()[k]);
        typ[k] = 1.0 - rank as f64 / n1;
    })?;
    if bad_len {
        return Err(Error::Dimension("predictor returned the wrong number of labels".into()));
    }
    Ok(assemble(grid.clone(), typ, alpha))
}

/// Builds a prediction set from typicalness values.
pub fn assemble(grid: Grid, typicalness: Vec<f64>, alpha: f64) -> PredictionSet {
    let accepted: Vec<bool> = typicalness.iter().map(|&t| is_accepted(t, alpha)).collect();
    let first = accepted.iter().position(|&a| a);
    let last = accepted.iter().rposition(|&a| a);
    let (interval, contiguous) = match (first, last) {
        (Some(i), Some(j)) => (
            Some((grid.values()[i], grid.values()[j])),
            accepted[i..=j].iter().all(|&a| a),
        ),
        _ => (None, true),
    };
    PredictionSet {
        grid,
        typicalness,
        alpha,
        accepted,
        interval,
        contiguous,
    }
}

/// Typicalness of a single candidate label.
pub fn typicalness_at(
    predictor: &dyn Predictor,
    x_ctx: &DMatrix<f64>,
    y_ctx: &DVector<f64>,
    x_new: &DVector<f64>,
    z: f64,
) -> Result<f64> {
    let pred = predictor.predict(x_ctx, y_ctx, x_new, z)?;
    Ok(typicalness(&conformity_scores(y_ctx.as_slice(), &pred, z)?))
}

/// Split conformal interval `center +- q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SplitInterval {
    pub center: f64,
    /// Calibration quantile; infinite when too few calibration points exist
    /// for the requested level.
    pub q: f64,
    pub lo: f64,
    pub hi: f64,
}

impl SplitInterval {
    pub fn width(&self) -> f64 {
        2.0 * self.q
    }

    pub fn is_unbounded(&self) -> bool {
        self.q.is_infinite()
    }

    pub fn covers(&self, y: f64) -> bool {
        self.lo <= y && y <= self.hi
    }
}

/// One-based index `ceil((1 - alpha)(n_cal + 1))` of the calibration quantile.
pub fn split_quantile_index(n_cal: usize, alpha: f64) -> usize {
    let raw = (1.0 - alpha) * (n_cal + 1) as f64;
    (raw - 1e-9).ceil().max(1.0) as usize
}

/// Ridge fitted on the training split, residual quantile from the calibration
/// split.
pub fn split_cp(
    x_train: &DMatrix<f64>,
    y_train: &DVector<f64>,
    x_cal: &DMatrix<f64>,
    y_cal: &DVector<f64>,
    x_new: &DVector<f64>,
    alpha: f64,
    lambda: f64,
) -> Result<SplitInterval> {
    check_alpha(alpha)?;
    let n_cal = x_cal.nrows();
    if n_cal == 0 {
        return arg_err("split_cp needs at least one calibration point");
    }
    if y_cal.len() != n_cal {
        return dim_err("x_cal and y_cal lengths differ");
    }
    let model = ridge_fit(x_train, y_train, lambda)?;
    let cal_pred = ridge_predict(&model, x_cal)?;
    let mut resid: Vec<f64> = y_cal
        .iter()
        .zip(cal_pred.iter())
        .map(|(y, p)| (y - p).abs())
        .collect();
    resid.sort_by(|a, b| a.total_cmp(b));
    let k = split_quantile_index(n_cal, alpha);
    let q = if k > n_cal { f64::INFINITY } else { resid[k - 1] };
    if x_new.len() != model.w_hat.len() {
        return dim_err("x_new length differs from the training dimension");
    }
    let center = x_new.dot(&model.w_hat);
    Ok(SplitInterval {
        center,
        q,
        lo: center - q,
        hi: center + q,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::taskgen::{sample_task, GenConfig};

    #[test]
    fn grid_rule() {
        let g = build_grid(&[0.0, 4.0], 5).unwrap();
        assert_eq!(g.values(), &[-1.0, 0.5, 2.0, 3.5, 5.0]);
        let c = build_grid(&[3.0, 3.0], 3).unwrap();
        assert_eq!(c.values(), &[2.0, 3.0, 4.0]);
        assert!(build_grid(&[1.0, 2.0], 1).is_err());
        assert_eq!(build_grid(&[1.0, 2.0], DEFAULT_GRID_SIZE).unwrap().len(), 1000);
    }

    #[test]
    fn grid_validation() {
        assert!(Grid::new(vec![0.0]).is_err());
        assert!(Grid::new(vec![0.0, 0.0]).is_err());
        assert!(Grid::new(vec![1.0, 0.0]).is_err());
        assert!(Grid::new(vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn scores() {
        let y = [1.0, -2.0, 3.0];
        assert_eq!(conformity_scores(&y, &[1.0, -2.0, 3.0, 0.5], 0.5).unwrap(), vec![0.0; 4]);
        assert_eq!(conformity_scores(&y, &[0.0; 4], -4.0).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        assert!(conformity_scores(&y, &[0.0; 3], 0.0).is_err());
    }

    #[test]
    fn typicalness_rank_arithmetic() {
        let mut s: Vec<f64> = (0..9).map(|i| i as f64).collect();
        s.push(100.0);
        assert_eq!(rank_of_last(&s), 10);
        assert_eq!(typicalness(&s), 0.0);
        *s.last_mut().unwrap() = -1.0;
        assert_eq!(rank_of_last(&s), 1);
        assert!((typicalness(&s) - 0.9).abs() < 1e-15);
        assert_eq!(rank_of_last(&[2.0; 4]), 4);
        assert_eq!(typicalness(&[2.0; 4]), 0.0);
    }

    #[test]
    fn typicalness_steps_by_one_over_n_plus_one() {
        // Scores 1..=9 plus a candidate placed just above the k-th of them.
        let base: Vec<f64> = (1..=9).map(|i| i as f64).collect();
        let mut prev: Option<f64> = None;
        for k in 0..=9 {
            let mut s = base.clone();
            s.push(k as f64 + 0.5);
            let t = typicalness(&s);
            if let Some(p) = prev {
                assert!((p - t - 0.1f64).abs() < 1e-12);
            }
            prev = Some(t);
        }
    }

    fn small_task(d: usize, n: usize, seed: u64) -> crate::taskgen::TaskSample {
        let gen = GenConfig { d, n, ..GenConfig::default() };
        sample_task(&gen, &mut rng::from_seed(seed)).unwrap()
    }

    #[test]
    fn alpha_extremes() {
        let t = small_task(2, 6, 1);
        let p = ridge_oracle_predictor(0.5).unwrap();
        let grid = build_grid(t.y_ctx().as_slice(), 50).unwrap();
        let all = full_cp(&p, &t.x_ctx(), &t.y_ctx(), &t.x_query(), 1e-9, &grid).unwrap();
        for (tv, a) in all.typicalness.iter().zip(&all.accepted) {
            assert_eq!(*a, *tv > 0.0);
        }
        let kept = all.accepted.iter().filter(|&&a| a).count();
        assert!(kept > 10, "{kept}");
        let none = full_cp(&p, &t.x_ctx(), &t.y_ctx(), &t.x_query(), 6.5 / 7.0, &grid).unwrap();
        assert!(none.is_empty());
        assert!(none.accepted.iter().all(|&a| !a));
        for bad in [0.0, 1.0, -0.2] {
            assert!(full_cp(&p, &t.x_ctx(), &t.y_ctx(), &t.x_query(), bad, &grid).is_err());
        }
    }

    #[test]
    fn typicalness_bounds_and_acceptance() {
        let t = small_task(3, 9, 2);
        let p = ridge_oracle_predictor(1.0).unwrap();
        let grid = build_grid(t.y_ctx().as_slice(), 101).unwrap();
        let set = full_cp(&p, &t.x_ctx(), &t.y_ctx(), &t.x_query(), 0.2, &grid).unwrap();
        for (tv, a) in set.typicalness.iter().zip(&set.accepted) {
            assert!(*tv >= 0.0 && *tv <= 0.9 + 1e-15);
            assert_eq!(*a, *tv >= 0.2 - ACCEPT_TOL);
        }
        let (lo, hi) = set.interval.unwrap();
        assert!(lo <= hi);
        assert!(set.set_measure() <= set.hull_width() + 1e-9 + (grid.hi() - grid.lo()) / 100.0);
    }

    #[test]
    fn zero_weight_icl_rejects_everything() {
        // Zero weights echo the labels, so every context score is 0 and the
        // candidate's rank is n + 1.
        let t = small_task(2, 5, 3);
        let p = icl_predictor(LsaParams::zeros(2, 2));
        let pred = p.predict(&t.x_ctx(), &t.y_ctx(), &t.x_query(), 1.3).unwrap();
        assert_eq!(pred.len(), 6);
        assert_eq!(pred[5], 1.3);
        let s = conformity_scores(t.y_ctx().as_slice(), &pred, 1.3).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
        assert_eq!(typicalness(&s), 0.0);
        let again = p.predict(&t.x_ctx(), &t.y_ctx(), &t.x_query(), 1.3).unwrap();
        assert_eq!(pred, again);
        let wrong = small_task(3, 5, 3);
        assert!(p.predict(&wrong.x_ctx(), &wrong.y_ctx(), &wrong.x_query(), 0.0).is_err());
    }

    #[test]
    fn icl_grid_path_matches_single_calls() {
        let mut r = rng::from_seed(4);
        let params = LsaParams::random(2, 2, 0.3, &mut r);
        let p = icl_predictor(params);
        let t = small_task(2, 7, 5);
        let grid = build_grid(t.y_ctx().as_slice(), 9).unwrap();
        let mut seen = 0;
        p.for_each_candidate(&t.x_ctx(), &t.y_ctx(), &t.x_query(), grid.values(), &mut |k, pred| {
            let single = p.predict(&t.x_ctx(), &t.y_ctx(), &t.x_query(), grid.values()[k]).unwrap();
            assert_eq!(pred, single.as_slice());
            seen += 1;
        })
        .unwrap();
        assert_eq!(seen, 9);
    }

    #[test]
    fn ridge_oracle_interpolates_noiseless_data() {
        let gen = GenConfig { d: 3, n: 40, sigma_n: 0.0, ..GenConfig::default() };
        let t = sample_task(&gen, &mut rng::from_seed(6)).unwrap();
        let p = ridge_oracle_predictor(0.0).unwrap();
        let z = t.y_query();
        let pred = p.predict(&t.x_ctx(), &t.y_ctx(), &t.x_query(), z).unwrap();
        for (a, b) in pred.iter().zip(t.y.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn ridge_oracle_two_point_closed_form() {
        // d = 1: w(z) = (x1 y1 + x2 y2 + x3 z) / (x1^2 + x2^2 + x3^2 + lambda).
        let x = DMatrix::from_row_slice(2, 1, &[0.5, -1.0]);
        let y = DVector::from_vec(vec![1.0, 2.0]);
        let xn = DVector::from_vec(vec![0.25]);
        let (z, lambda) = (3.0, 0.5);
        let w = (0.5 * 1.0 - 2.0 + 0.25 * 3.0) / (0.25 + 1.0 + 0.0625 + 0.5);
        let p = ridge_oracle_predictor(lambda).unwrap();
        let pred = p.predict(&x, &y, &xn, z).unwrap();
        let expected = [0.5 * w, -w, 0.25 * w];
        for (a, b) in pred.iter().zip(expected) {
            assert!((a - b).abs() < 1e-14);
        }
        let manual = ridge_fit_augmented(&x, &y, &xn, z, lambda).unwrap();
        assert!((manual.w_hat[0] - w).abs() < 1e-14);
    }

    #[test]
    fn contiguity_flag() {
        let grid = Grid::new(vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let s = assemble(grid.clone(), vec![0.5, 0.0, 0.5, 0.0], 0.3);
        assert_eq!(s.interval, Some((0.0, 2.0)));
        assert!(!s.contiguous);
        let s = assemble(grid, vec![0.0, 0.5, 0.5, 0.0], 0.3);
        assert!(s.contiguous);
        assert!(s.covers(1.5));
        assert!(!s.covers(2.5));
    }

    #[test]
    fn split_quantile_rule() {
        assert_eq!(split_quantile_index(9, 0.1), 9);
        assert_eq!(split_quantile_index(19, 0.1), 18);
        assert_eq!(split_quantile_index(5, 0.1), 6);
    }

    #[test]
    fn split_cp_cases() {
        let gen = GenConfig { d: 2, n: 19, sigma_n: 0.0, ..GenConfig::default() };
        let t = sample_task(&gen, &mut rng::from_seed(7)).unwrap();
        let xtr = t.x.rows(0, 10).into_owned();
        let ytr = t.y.rows(0, 10).into_owned();
        let xcal = t.x.rows(10, 9).into_owned();
        let ycal = t.y.rows(10, 9).into_owned();
        let q = t.x_query();
        // Noiseless data with lambda = 0: calibration residuals vanish.
        let s = split_cp(&xtr, &ytr, &xcal, &ycal, &q, 0.1, 0.0).unwrap();
        assert!(s.q < 1e-12);
        assert!((s.hi - s.lo - s.width()).abs() < 1e-15);

        // Noisy: with 9 calibration points at alpha = 0.1, q is the largest residual.
        let gen = GenConfig { d: 2, n: 19, ..GenConfig::default() };
        let t = sample_task(&gen, &mut rng::from_seed(8)).unwrap();
        let xtr = t.x.rows(0, 10).into_owned();
        let ytr = t.y.rows(0, 10).into_owned();
        let xcal = t.x.rows(10, 9).into_owned();
        let ycal = t.y.rows(10, 9).into_owned();
        let s = split_cp(&xtr, &ytr, &xcal, &ycal, &q, 0.1, 0.2).unwrap();
        let m = ridge_fit(&xtr, &ytr, 0.2).unwrap();
        let max_resid = (0..9)
            .map(|i| (ycal[i] - xcal.row(i).transpose().dot(&m.w_hat)).abs())
            .fold(0.0, f64::max);
        assert_eq!(s.q, max_resid);
        assert!((s.width() - 2.0 * s.q).abs() < 1e-15);

        // Five calibration points cannot certify 90%.
        let xcal5 = xcal.rows(0, 5).into_owned();
        let ycal5 = ycal.rows(0, 5).into_owned();
        let s = split_cp(&xtr, &ytr, &xcal5, &ycal5, &q, 0.1, 0.2).unwrap();
        assert!(s.is_unbounded());
        assert!(s.covers(1e300));
        let empty = DMatrix::zeros(0, 2);
        assert!(split_cp(&xtr, &ytr, &empty, &DVector::zeros(0), &q, 0.1, 0.2).is_err());
    }
}
