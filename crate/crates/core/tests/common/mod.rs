//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use cpicl::lsa::{pretrain_loss, LsaParams};
use cpicl::taskgen::BatchItem;
use nalgebra::{DMatrix, DVector};

/// Central finite-difference gradient of the pre-training loss.
pub fn fd_gradient(params: &LsaParams, batch: &[BatchItem], h: f64) -> Vec<f64> {
    let base = params.values();
    let (d, l) = (params.d, params.num_layers());
    (0..base.len())
        .map(|i| {
            let mut v = base.clone();
            v[i] = base[i] + h;
            let fp = pretrain_loss(&LsaParams::from_values(d, l, &v).unwrap(), batch).unwrap();
            v[i] = base[i] - h;
            let fm = pretrain_loss(&LsaParams::from_values(d, l, &v).unwrap(), batch).unwrap();
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// `||a - b||_inf / max(||a||_inf, ||b||_inf)`.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|x| x.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            let (top, bottom) = a.split_at_mut(row);
            for (dst, src) in bottom[0][col..].iter_mut().zip(&top[col][col..]) {
                *dst -= f * src;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Ridge weights from the normal equations, built entry by entry.
pub fn naive_ridge(rows: &[Vec<f64>], y: &[f64], lambda: f64) -> Vec<f64> {
    let d = rows[0].len();
    let mut a = vec![vec![0.0; d]; d];
    let mut b = vec![0.0; d];
    for (r, &yi) in rows.iter().zip(y) {
        for i in 0..d {
            b[i] += r[i] * yi;
            for j in 0..d {
                a[i][j] += r[i] * r[j];
            }
        }
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += lambda;
    }
    gauss_solve(a, b)
}

/// Accepted candidates of full conformal prediction with a ridge refit on
/// every augmented dataset.
pub fn brute_force_accepted(
    x_ctx: &[Vec<f64>],
    y_ctx: &[f64],
    x_new: &[f64],
    grid: &[f64],
    alpha: f64,
    lambda: f64,
) -> Vec<bool> {
    let n = y_ctx.len();
    grid.iter()
        .map(|&z| {
            let mut rows = x_ctx.to_vec();
            rows.push(x_new.to_vec());
            let mut ys = y_ctx.to_vec();
            ys.push(z);
            let w = naive_ridge(&rows, &ys, lambda);
            let scores: Vec<f64> = rows
                .iter()
                .zip(&ys)
                .map(|(r, yi)| (yi - r.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()).abs())
                .collect();
            let last = scores[n];
            let rank = scores.iter().filter(|&&s| s <= last).count();
            let pi = 1.0 - rank as f64 / (n + 1) as f64;
            pi >= alpha - 1e-12
        })
        .collect()
}

/// Optimal transport cost between two pmfs on a common support, found by
/// enumerating every basic solution of the transportation polytope.
pub fn transport_lp(points: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let m = points.len();
    let cells: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..m).map(move |j| (i, j))).collect();
    let basis = 2 * m - 1;
    let mut best = f64::INFINITY;
    let mut choose = vec![0usize; basis];
    fn next(c: &mut [usize], total: usize) -> bool {
        let k = c.len();
        let mut i = k;
        while i > 0 {
            i -= 1;
            if c[i] < total - k + i {
                c[i] += 1;
                for j in i + 1..k {
                    c[j] = c[j - 1] + 1;
                }
                return true;
            }
        }
        false
    }
    for (i, c) in choose.iter_mut().enumerate() {
        *c = i;
    }
    loop {
        let mut mat = DMatrix::zeros(2 * m, basis);
        for (col, &ci) in choose.iter().enumerate() {
            let (i, j) = cells[ci];
            mat[(i, col)] = 1.0;
            mat[(m + j, col)] = 1.0;
        }
        let rhs = DVector::from_iterator(2 * m, a.iter().chain(b).copied());
        let svd = mat.clone().svd(true, true);
        if svd.rank(1e-10) == basis {
            if let Ok(g) = svd.solve(&rhs, 1e-12) {
                let resid = (&mat * &g - &rhs).amax();
                if resid < 1e-12 && g.iter().all(|&v| v >= -1e-12) {
                    let cost: f64 = choose
                        .iter()
                        .zip(g.iter())
                        .map(|(&ci, &gv)| {
                            let (i, j) = cells[ci];
                            gv * (points[i] - points[j]).abs()
                        })
                        .sum();
                    best = best.min(cost);
                }
            }
        }
        if !next(&mut choose, cells.len()) {
            break;
        }
    }
    best
}
