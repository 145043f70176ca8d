//! Closed-form ridge regression.
//!
//! `w_hat = argmin sum_i (y_i - w.x_i)^2 + lambda |w|^2`, solved through a
//! Cholesky factorization of `X^T X + lambda I`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{dim_err, Error, Result};

/// Relative pivot size below which the normal matrix is treated as singular.
const PIVOT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    pub w_hat: DVector<f64>,
    pub lambda: f64,
}

fn factor(gram: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let max_diag = gram.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let chol = Cholesky::new(gram)
        .ok_or_else(|| Error::RankDeficient("normal matrix is not positive definite".into()))?;
    let l = chol.l_dirty();
    let min_pivot = (0..l.nrows()).fold(f64::INFINITY, |m, i| m.min(l[(i, i)] * l[(i, i)]));
    if !(min_pivot > PIVOT_TOL * max_diag.max(f64::MIN_POSITIVE)) {
        return Err(Error::RankDeficient(format!(
            "pivot {min_pivot:e} relative to scale {max_diag:e}"
        )));
    }
    Ok(chol)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Argument(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(())
}

fn normal_matrix(x: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let d = x.ncols();
    x.transpose() * x + DMatrix::identity(d, d) * lambda
}

/// Fits ridge regression on `m` rows. `lambda = 0` requires full column rank.
pub fn ridge_fit(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<RidgeModel> {
    check_lambda(lambda)?;
    let (m, d) = x.shape();
    if m == 0 || d == 0 {
        return dim_err("ridge_fit needs at least one row and one column");
    }
    if y.len() != m {
        return dim_err(format!("X has {m} rows but y has {}", y.len()));
    }
    let chol = factor(normal_matrix(x, lambda))?;
    let w_hat = chol.solve(&(x.transpose() * y));
    Ok(RidgeModel { w_hat, lambda })
}

/// Fits ridge regression on the context augmented with the point `(x_new, z)`.
pub fn ridge_fit_augmented(
    x_ctx: &DMatrix<f64>,
    y_ctx: &DVector<f64>,
    x_new: &DVector<f64>,
    z: f64,
    lambda: f64,
) -> Result<RidgeModel> {
    let (xa, ya) = augment(x_ctx, y_ctx, x_new, z)?;
    ridge_fit(&xa, &ya, lambda)
}

fn augment(
    x_ctx: &DMatrix<f64>,
    y_ctx: &DVector<f64>,
    x_new: &DVector<f64>,
    z: f64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let (n, d) = x_ctx.shape();
    if x_new.len() != d {
        return dim_err(format!("x_new has length {}, expected {d}", x_new.len()));
    }
    if y_ctx.len() != n {
        return dim_err(format!("x_ctx has {n} rows but y_ctx has {}", y_ctx.len()));
    }
    let mut xa = x_ctx.clone().insert_row(n, 0.0);
    xa.row_mut(n).copy_from(&x_new.transpose());
    let ya = y_ctx.clone().push(z);
    Ok((xa, ya))
}

/// Row-wise predictions `X w_hat`.
pub fn ridge_predict(model: &RidgeModel, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    if x.ncols() != model.w_hat.len() {
        return dim_err(format!(
            "X has {} columns, model has {} weights",
            x.ncols(),
            model.w_hat.len()
        ));
    }
    Ok(x * &model.w_hat)
}

/// The regularizer `sigma_w^2 / sigma_n^2`.
///
/// Noiseless data has no finite value; callers use `lambda = 0` instead.
pub fn bayes_lambda(sigma_w: f64, sigma_n: f64) -> Result<f64> {
    if !(sigma_n > 0.0) {
        return Err(Error::Argument(
            "sigma_n must be > 0; use lambda = 0 for noiseless targets".into(),
        ));
    }
    Ok(sigma_w * sigma_w / (sigma_n * sigma_n))
}

/// Augmented-refit predictions as an affine function of the candidate label.
///
/// The normal matrix of the augmented fit does not depend on `z`, so
/// `w_hat(z) = A^{-1}(X^T y + x_new z)` and every prediction is
/// `intercept_i + slope_i * z`. One factorization serves the whole grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineRefit {
    /// Predictions at `z = 0` for the `n` context rows then the query.
    pub intercepts: Vec<f64>,
    /// Derivative of each prediction with respect to `z`.
    pub slopes: Vec<f64>,
}

impl AffineRefit {
    pub fn new(
        x_ctx: &DMatrix<f64>,
        y_ctx: &DVector<f64>,
        x_new: &DVector<f64>,
        lambda: f64,
    ) -> Result<Self> {
        check_lambda(lambda)?;
        let (xa, _) = augment(x_ctx, y_ctx, x_new, 0.0)?;
        let chol = factor(normal_matrix(&xa, lambda))?;
        let base = chol.solve(&(x_ctx.transpose() * y_ctx));
        let dir = chol.solve(x_new);
        Ok(Self {
            intercepts: (&xa * base).iter().copied().collect(),
            slopes: (&xa * dir).iter().copied().collect(),
        })
    }

    pub fn predict_into(&self, z: f64, out: &mut [f64]) {
        for ((o, a), b) in out.iter_mut().zip(&self.intercepts).zip(&self.slopes) {
            *o = a + b * z;
        }
    }
}
