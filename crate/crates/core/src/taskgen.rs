//! Synthetic noisy linear-regression tasks and the prompt layout fed to the
//! LSA model.
//!
//! A task draws `w ~ N(0, sigma_w^2 I)`, inputs `x ~ U(-a, a)^d` and labels
//! `y = x.w + eps` with `eps ~ N(0, sigma_n^2)`. A context of `n` labelled
//! points plus a query `x_{n+1}` is laid out as a `(d+1) x (n+1)` matrix whose
//! columns are `[x_i; y_i]`, with the query label replaced by a candidate `z`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Sampling hyperparameters of a task family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    /// Input dimension.
    pub d: usize,
    /// Context size.
    pub n: usize,
    /// Half-range of the uniform input distribution.
    pub a: f64,
    /// Standard deviation of the weight prior.
    pub sigma_w: f64,
    /// Standard deviation of the label noise.
    pub sigma_n: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            d: 5,
            n: 30,
            a: 1.0,
            sigma_w: 1.0,
            sigma_n: 0.25,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 1 {
            return Err(Error::Config("d must be >= 1".into()));
        }
        if self.n < 1 {
            return Err(Error::Config("n must be >= 1".into()));
        }
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(Error::Config(format!("a must be > 0, got {}", self.a)));
        }
        if !(self.sigma_w > 0.0 && self.sigma_w.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_w must be > 0, got {}",
                self.sigma_w
            )));
        }
        if !(self.sigma_n >= 0.0 && self.sigma_n.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_n must be >= 0, got {}",
                self.sigma_n
            )));
        }
        Ok(())
    }
}

/// One regression task: `n + 1` rows of inputs, their labels and the latent
/// weights. The last row is the query point.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSample {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub w: DVector<f64>,
    /// Noise draws, `y - x w`.
    pub noise: DVector<f64>,
}

impl TaskSample {
    /// Number of context points (rows minus the query).
    pub fn n(&self) -> usize {
        self.x.nrows() - 1
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    /// Context inputs, the first `n` rows.
    pub fn x_ctx(&self) -> DMatrix<f64> {
        self.x.rows(0, self.n()).into_owned()
    }

    pub fn y_ctx(&self) -> DVector<f64> {
        self.y.rows(0, self.n()).into_owned()
    }

    pub fn x_query(&self) -> DVector<f64> {
        self.x.row(self.n()).transpose()
    }

    pub fn y_query(&self) -> f64 {
        self.y[self.n()]
    }
}

/// Draws a task with `rows` input points from the family described by `cfg`.
///
/// The draw order is fixed: weights, then inputs row by row, then noise.
pub fn sample_points<R: Rng + ?Sized>(
    cfg: &GenConfig,
    rows: usize,
    rng: &mut R,
) -> Result<TaskSample> {
    cfg.validate()?;
    let d = cfg.d;
    let w = DVector::from_fn(d, |_, _| {
        let g: f64 = StandardNormal.sample(rng);
        cfg.sigma_w * g
    });
    let unif = Uniform::new(-cfg.a, cfg.a).map_err(|e| Error::Config(e.to_string()))?;
    let mut x = DMatrix::zeros(rows, d);
    for i in 0..rows {
        for j in 0..d {
            x[(i, j)] = unif.sample(rng);
        }
    }
    let noise = DVector::from_fn(rows, |_, _| {
        let g: f64 = StandardNormal.sample(rng);
        cfg.sigma_n * g
    });
    let y = &x * &w + &noise;
    Ok(TaskSample { x, y, w, noise })
}

/// Draws one task with `n + 1` points (context plus query).
pub fn sample_task<R: Rng + ?Sized>(cfg: &GenConfig, rng: &mut R) -> Result<TaskSample> {
    sample_points(cfg, cfg.n + 1, rng)
}

/// Prompt matrix of shape `(d+1) x (n+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix(pub DMatrix<f64>);

impl TokenMatrix {
    /// Input dimension `d`.
    pub fn d(&self) -> usize {
        self.0.nrows() - 1
    }

    /// Context size `n`.
    pub fn n(&self) -> usize {
        self.0.ncols() - 1
    }

    /// Candidate label in the query slot.
    pub fn z(&self) -> f64 {
        self.0[(self.d(), self.n())]
    }

    pub fn set_z(&mut self, z: f64) {
        let (d, n) = (self.d(), self.n());
        self.0[(d, n)] = z;
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Lays out a context and a query as a prompt with candidate label `z`.
pub fn tokenize(
    x_ctx: &DMatrix<f64>,
    y_ctx: &DVector<f64>,
    x_query: &DVector<f64>,
    z: f64,
) -> Result<TokenMatrix> {
    let (n, d) = x_ctx.shape();
    if y_ctx.len() != n {
        return dim_err(format!("x_ctx has {n} rows but y_ctx has {}", y_ctx.len()));
    }
    if x_query.len() != d {
        return dim_err(format!("x_ctx has {d} columns but x_query has {}", x_query.len()));
    }
    let mut e = DMatrix::zeros(d + 1, n + 1);
    for i in 0..n {
        for j in 0..d {
            e[(j, i)] = x_ctx[(i, j)];
        }
        e[(d, i)] = y_ctx[i];
    }
    for j in 0..d {
        e[(j, n)] = x_query[j];
    }
    e[(d, n)] = z;
    Ok(TokenMatrix(e))
}

/// Masked prompt (`z = 0`) for a sampled task.
pub fn tokenize_task(task: &TaskSample) -> TokenMatrix {
    let n = task.n();
    let d = task.d();
    let mut e = task.x.transpose().insert_row(d, 0.0);
    for i in 0..n {
        e[(d, i)] = task.y[i];
    }
    TokenMatrix(e)
}

/// A pre-training example: masked prompt and the held-out query label.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub tokens: TokenMatrix,
    pub target: f64,
}

/// Draws `batch_size` independent tasks as masked prompts.
pub fn sample_batch<R: Rng + ?Sized>(
    cfg: &GenConfig,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<BatchItem>> {
    cfg.validate()?;
    if batch_size == 0 {
        return Err(Error::Argument("batch_size must be >= 1".into()));
    }
    (0..batch_size)
        .map(|_| {
            let task = sample_task(cfg, rng)?;
            Ok(BatchItem {
                tokens: tokenize_task(&task),
                target: task.y_query(),
            })
        })
        .collect()
}
