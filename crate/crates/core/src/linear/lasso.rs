//! L1-penalized least squares by cyclic coordinate descent.
//!
//! Minimizes (1/2N)||y - X b - b0||^2 + lambda ||b||_1 with an unpenalized
//! intercept. The Gram matrix of the centered design is formed once, and the
//! gradient vector is updated only for coordinates that move, so sweeps over
//! a sparse solution are cheap.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed;

pub const DEFAULT_TOL: f64 = 1e-7;
pub const DEFAULT_MAX_ITER: usize = 100_000;
pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_GRID_LEN: usize = 50;
pub const DEFAULT_GRID_RATIO: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub coefficients: DVector<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub converged: bool,
    /// Coordinate sweeps performed.
    pub iterations: usize,
}

impl LassoFit {
    pub fn predict(&self, x: &DMatrix<f64>) -> DVector<f64> {
        (x * &self.coefficients).add_scalar(self.intercept)
    }
}

#[inline]
pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// Precomputed centered Gram system shared across a lambda path.
struct Problem {
    x_mean: DVector<f64>,
    y_mean: f64,
    /// X_c'X_c / N
    gram: DMatrix<f64>,
    /// X_c'y_c / N
    xty: DVector<f64>,
    /// y_c'y_c / N
    yty: f64,
}

impl Problem {
    fn new(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self> {
        let (n, _) = x.shape();
        if y.len() != n {
            return Err(Error::Dimension(format!("design has {n} rows, outcome {}", y.len())));
        }
        if n == 0 {
            return Err(Error::InvalidArgument("lasso needs at least one row".into()));
        }
        let nf = n as f64;
        let x_mean = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / nf));
        let y_mean = y.sum() / nf;
        let mut xc = x.clone();
        for (j, mut col) in xc.column_iter_mut().enumerate() {
            col.add_scalar_mut(-x_mean[j]);
        }
        let yc = y.add_scalar(-y_mean);
        let gram = xc.tr_mul(&xc) / nf;
        let xty = xc.tr_mul(&yc) / nf;
        let yty = yc.norm_squared() / nf;
        Ok(Problem { x_mean, y_mean, gram, xty, yty })
    }

    fn objective(&self, beta: &DVector<f64>, lambda: f64) -> f64 {
        let quad = self.yty - 2.0 * beta.dot(&self.xty) + (&self.gram * beta).dot(beta);
        0.5 * quad + lambda * beta.lp_norm(1)
    }

    /// Coordinate descent from `beta`, which is updated in place.
    fn solve(
        &self,
        beta: &mut DVector<f64>,
        lambda: f64,
        tol: f64,
        max_iter: usize,
        mut trace: Option<&mut Vec<f64>>,
    ) -> (bool, usize) {
        let p = beta.len();
        // grad[j] = x_j'(y - X beta) / N on centered data.
        let mut grad = &self.xty - &self.gram * &*beta;
        let mut iterations = 0;
        let mut full_sweep = true;
        let mut active: Vec<usize> = Vec::with_capacity(p);
        if let Some(t) = trace.as_deref_mut() {
            t.push(self.objective(beta, lambda));
        }
        while iterations < max_iter {
            iterations += 1;
            let mut max_change = 0.0f64;
            let coords: Vec<usize> = if full_sweep { (0..p).collect() } else { active.clone() };
            for j in coords {
                let a = self.gram[(j, j)];
                if a <= 0.0 {
                    continue;
                }
                let old = beta[j];
                let new = soft_threshold(grad[j] + a * old, lambda) / a;
                let delta = new - old;
                if delta != 0.0 {
                    beta[j] = new;
                    grad.axpy(-delta, &self.gram.column(j), 1.0);
                    max_change = max_change.max(delta.abs());
                }
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(self.objective(beta, lambda));
            }
            if max_change < tol {
                if full_sweep {
                    return (true, iterations);
                }
                // Active set settled; confirm with a sweep over every coordinate.
                full_sweep = true;
            } else if full_sweep {
                active.clear();
                active.extend((0..p).filter(|&j| beta[j] != 0.0));
                full_sweep = false;
            }
        }
        (false, iterations)
    }

    fn intercept(&self, beta: &DVector<f64>) -> f64 {
        self.y_mean - self.x_mean.dot(beta)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    Ok(())
}

/// Fits the lasso at a single `lambda`. Columns of `x` are expected to be
/// standardized; the fit itself only centers them.
///
/// Reaching `max_iter` sweeps is reported through `converged = false`.
pub fn lasso_fit(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64, tol: f64, max_iter: usize) -> Result<LassoFit> {
    lasso_fit_traced(x, y, lambda, tol, max_iter).map(|(fit, _)| fit)
}

/// As [`lasso_fit`], also returning the objective before the first sweep
/// and after every sweep.
pub fn lasso_fit_traced(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(LassoFit, Vec<f64>)> {
    check_lambda(lambda)?;
    let problem = Problem::new(x, y)?;
    let mut beta = DVector::zeros(x.ncols());
    let mut trace = Vec::new();
    let (converged, iterations) = problem.solve(&mut beta, lambda, tol, max_iter, Some(&mut trace));
    let intercept = problem.intercept(&beta);
    Ok((
        LassoFit {
            coefficients: beta,
            intercept,
            lambda,
            converged,
            iterations,
        },
        trace,
    ))
}

/// Fits every lambda in `lambdas` with warm starts, in descending order of
/// lambda. Results are returned in the order given.
pub fn lasso_path(x: &DMatrix<f64>, y: &DVector<f64>, lambdas: &[f64], tol: f64, max_iter: usize) -> Result<Vec<LassoFit>> {
    for &l in lambdas {
        check_lambda(l)?;
    }
    let problem = Problem::new(x, y)?;
    let mut order: Vec<usize> = (0..lambdas.len()).collect();
    order.sort_by(|&a, &b| lambdas[b].total_cmp(&lambdas[a]));
    let mut beta = DVector::zeros(x.ncols());
    let mut fits: Vec<Option<LassoFit>> = vec![None; lambdas.len()];
    for i in order {
        let (converged, iterations) = problem.solve(&mut beta, lambdas[i], tol, max_iter, None);
        fits[i] = Some(LassoFit {
            coefficients: beta.clone(),
            intercept: problem.intercept(&beta),
            lambda: lambdas[i],
            converged,
            iterations,
        });
    }
    Ok(fits.into_iter().map(|f| f.expect("every lambda fitted")).collect())
}

/// Smallest lambda at which every slope is zero: max_j |x_j'(y - mean y)| / N
/// on centered columns.
pub fn lambda_max(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    let p = Problem::new(x, y)?;
    Ok(p.xty.amax())
}

/// `len` log-spaced values from `lambda_max` down to `ratio * lambda_max`.
pub fn log_grid(lambda_max: f64, ratio: f64, len: usize) -> Vec<f64> {
    match len {
        0 => vec![],
        1 => vec![lambda_max],
        _ => {
            let (hi, lo) = (lambda_max.ln(), (lambda_max * ratio).ln());
            (0..len)
                .map(|i| (hi + (lo - hi) * i as f64 / (len - 1) as f64).exp())
                .collect()
        }
    }
}

/// The default 50-point grid from lambda_max to 1e-4 lambda_max.
pub fn default_grid(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Vec<f64>> {
    let lmax = lambda_max(x, y)?;
    if lmax <= 0.0 {
        return Ok(vec![0.0]);
    }
    Ok(log_grid(lmax, DEFAULT_GRID_RATIO, DEFAULT_GRID_LEN))
}

/// K-fold cross-validation over `grid`; returns the lambda with the smallest
/// mean out-of-fold squared error. Ties go to the larger lambda.
pub fn lasso_lambda_cv(x: &DMatrix<f64>, y: &DVector<f64>, folds: usize, grid: &[f64], seed: u64) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("lambda grid is empty".into()));
    }
    if folds < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {folds}")));
    }
    let n = x.nrows();
    if n < folds {
        return Err(Error::TooSmall(format!("{n} rows cannot form {folds} folds")));
    }
    if grid.len() == 1 {
        check_lambda(grid[0])?;
        return Ok(grid[0]);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng_for(seed, seed::stream::LASSO_CV));
    let mut fold_of = vec![0; n];
    for (pos, &i) in idx.iter().enumerate() {
        fold_of[i] = pos % folds;
    }
    let mut sse = vec![0.0; grid.len()];
    for f in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
        let x_tr = x.select_rows(&train);
        let y_tr = DVector::from_iterator(train.len(), train.iter().map(|&i| y[i]));
        let x_te = x.select_rows(&test);
        let fits = lasso_path(&x_tr, &y_tr, grid, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
        for (g, fit) in fits.iter().enumerate() {
            let pred = fit.predict(&x_te);
            sse[g] += test.iter().zip(pred.iter()).map(|(&i, p)| (y[i] - p).powi(2)).sum::<f64>();
        }
    }
    let mut best = 0;
    for g in 1..grid.len() {
        let better = sse[g] < sse[best] || (sse[g] == sse[best] && grid[g] > grid[best]);
        if better {
            best = g;
        }
    }
    Ok(grid[best])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::ols_fit;
    use rand::Rng;

    fn standardized(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = crate::seed::rng(seed);
        let mut x = DMatrix::from_fn(n, p, |_, _| rng.gen_range(-1.0f64..1.0));
        for mut c in x.column_iter_mut() {
            let m = c.mean();
            c.add_scalar_mut(-m);
            let sd = (c.norm_squared() / (n as f64 - 1.0)).sqrt();
            c /= sd;
        }
        x
    }

    #[test]
    fn zero_lambda_matches_ols() {
        let x = standardized(50, 4, 1);
        let mut rng = crate::seed::rng(2);
        let y = DVector::from_fn(50, |i, _| 1.5 + x[(i, 0)] - 0.5 * x[(i, 2)] + rng.gen_range(-0.5..0.5));
        let fit = lasso_fit(&x, &y, 0.0, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let design = DMatrix::from_fn(50, 5, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
        let ols = ols_fit(&design, &y).unwrap();
        assert!((fit.intercept - ols.coefficients[0]).abs() < 1e-6);
        for j in 0..4 {
            assert!((fit.coefficients[j] - ols.coefficients[j + 1]).abs() < 1e-6);
        }
        assert!(fit.converged);
    }

    #[test]
    fn lambda_max_zeroes_every_slope() {
        let x = standardized(40, 6, 3);
        let y = DVector::from_fn(40, |i, _| x[(i, 1)] * 2.0 + (i as f64).sin());
        let lmax = lambda_max(&x, &y).unwrap();
        let fit = lasso_fit(&x, &y, lmax, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!(fit.coefficients.iter().all(|&b| b == 0.0));
        assert!((fit.intercept - y.mean()).abs() < 1e-12);
        let below = lasso_fit(&x, &y, 0.99 * lmax, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!(below.coefficients.iter().any(|&b| b != 0.0));
    }

    #[test]
    fn univariate_closed_form() {
        let x = standardized(30, 1, 4);
        let y = DVector::from_fn(30, |i, _| 0.8 * x[(i, 0)] + 0.1 * (i as f64).cos());
        let lambda = 0.2;
        let fit = lasso_fit(&x, &y, lambda, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let xc = x.column(0).add_scalar(-x.column(0).mean());
        let yc = y.add_scalar(-y.mean());
        let expected = soft_threshold(xc.dot(&yc) / 30.0, lambda) / (xc.norm_squared() / 30.0);
        assert!((fit.coefficients[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn objective_never_increases() {
        let x = standardized(60, 8, 5);
        let y = DVector::from_fn(60, |i, _| x[(i, 0)] - x[(i, 3)] + 0.3 * (i as f64 * 0.7).sin());
        let (_, trace) = lasso_fit_traced(&x, &y, 0.05, 1e-10, 10_000).unwrap();
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-14);
        }
    }

    #[test]
    fn path_norm_decreases_in_lambda() {
        let x = standardized(60, 8, 6);
        let y = DVector::from_fn(60, |i, _| x[(i, 0)] - 2.0 * x[(i, 3)] + 0.5 * (i as f64).cos());
        let grid = default_grid(&x, &y).unwrap();
        let fits = lasso_path(&x, &y, &grid, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        for w in fits.windows(2) {
            assert!(w[0].lambda > w[1].lambda);
            assert!(w[0].coefficients.lp_norm(1) <= w[1].coefficients.lp_norm(1) + 1e-9);
        }
    }

    #[test]
    fn unconverged_is_flagged_not_fatal() {
        let x = standardized(40, 5, 7);
        let y = DVector::from_fn(40, |i, _| x[(i, 0)] + x[(i, 1)]);
        let fit = lasso_fit(&x, &y, 0.0, 0.0, 3).unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.iterations, 3);
    }

    #[test]
    fn cv_edge_cases() {
        let x = standardized(30, 3, 8);
        let y = DVector::from_fn(30, |i, _| x[(i, 0)]);
        assert_eq!(lasso_lambda_cv(&x, &y, 5, &[0.3], 0).unwrap(), 0.3);
        assert!(lasso_lambda_cv(&x, &y, 5, &[], 0).is_err());
        assert!(lasso_lambda_cv(&x, &y, 1, &[0.1, 0.2], 0).is_err());
        assert!(lasso_fit(&x, &y, -1.0, DEFAULT_TOL, 10).is_err());
    }

    #[test]
    fn cv_is_deterministic() {
        let x = standardized(50, 5, 9);
        let y = DVector::from_fn(50, |i, _| x[(i, 2)] + (i as f64).sin());
        let grid = default_grid(&x, &y).unwrap();
        assert_eq!(
            lasso_lambda_cv(&x, &y, 5, &grid, 4).unwrap(),
            lasso_lambda_cv(&x, &y, 5, &grid, 4).unwrap()
        );
    }
}
