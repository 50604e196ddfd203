//! Trust-region update rules and how their step size scales with dimension.
//!
//! For gradient g and curvature (Fisher) F, the KL-constrained update is
//!
//!   dtheta = sqrt(2 delta / (g' F^-1 g)) F^-1 g,
//!
//! which self-normalizes: its predicted KL is exactly delta. The fixed-penalty
//! surrogate dtheta = (1/beta) F^-1 g has no such normalization. When a
//! parameter head is shared across d identical output dimensions the Fisher
//! aggregates as F_d = d * F_1 (eigenvalues grow linearly in d), so the
//! constrained step length shrinks like d^-1/2 while the penalty step shrinks
//! like d^-1. `scaling_experiment` measures both exponents by log-log fit.

use crate::error::{check_finite, check_finite_scalar, Error, Result};
use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::{Rng, RngExt};
use rand_distr::StandardNormal;

/// Parameter count above which curvature solves default to conjugate
/// gradients instead of a dense factorization.
pub const CG_DEFAULT_THRESHOLD: usize = 500;

/// Symmetric curvature model. Stored dense; all solves go through Cholesky,
/// so positive-definiteness is checked where it matters.
#[derive(Debug, Clone)]
pub struct FisherModel {
    matrix: DMatrix<f64>,
}

impl FisherModel {
    /// Builds from a row-major flat matrix; rejects non-square, non-finite or
    /// non-symmetric (beyond 1e-9 relative) input.
    pub fn from_flat(n: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                got: flat.len(),
            });
        }
        check_finite(flat, "fisher")?;
        let matrix = DMatrix::from_row_slice(n, n, flat);
        let scale = matrix.amax().max(1.0);
        for i in 0..n {
            for j in (i + 1)..n {
                if (matrix[(i, j)] - matrix[(j, i)]).abs() > 1e-9 * scale {
                    return Err(Error::RejectedInput(format!(
                        "fisher matrix is not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(Self { matrix })
    }

    /// Diagonal curvature; entries must be positive and finite.
    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        check_finite(diag, "diagonal")?;
        if diag.is_empty() {
            return Err(Error::RejectedInput("empty diagonal".into()));
        }
        if let Some((i, d)) = diag.iter().enumerate().find(|(_, d)| **d <= 0.0) {
            return Err(Error::RejectedInput(format!(
                "diagonal[{i}] must be positive (got {d})"
            )));
        }
        let mut matrix = DMatrix::zeros(diag.len(), diag.len());
        for (i, d) in diag.iter().enumerate() {
            matrix[(i, i)] = *d;
        }
        Ok(Self { matrix })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        let out = &self.matrix * DVector::from_column_slice(v);
        Ok(out.as_slice().to_vec())
    }

    /// Solves F x = b by Cholesky; fails on non-SPD curvature.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: b.len(),
            });
        }
        let chol = Cholesky::new(self.matrix.clone()).ok_or(Error::NotPositiveDefinite)?;
        let x = chol.solve(&DVector::from_column_slice(b));
        Ok(x.as_slice().to_vec())
    }

    /// Eigendecomposition F = Q diag(lambda) Q'. Eigenpairs are sorted by
    /// ascending eigenvalue so results are deterministic.
    pub fn eigen(&self) -> (Vec<f64>, DMatrix<f64>) {
        let eig = SymmetricEigen::new(self.matrix.clone());
        let n = self.dim();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let mut vectors = DMatrix::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            vectors.set_column(dst, &eig.eigenvectors.column(src));
        }
        (values, vectors)
    }

    /// Returns c * F.
    pub fn scaled(&self, c: f64) -> FisherModel {
        FisherModel {
            matrix: &self.matrix * c,
        }
    }
}

/// A proposed parameter step with its diagnostics.
#[derive(Debug, Clone)]
pub struct UpdateResult {
    pub delta_theta: Vec<f64>,
    pub norm: f64,
    /// Quadratic-form KL of the step: dtheta' F dtheta / 2.
    pub predicted_kl: f64,
    /// Iterations used by the iterative solver, if one ran.
    pub solver_iterations: Option<usize>,
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn validate_gradient(g: &[f64], n: usize) -> Result<()> {
    if g.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: g.len(),
        });
    }
    check_finite(g, "gradient")?;
    if norm2(g) == 0.0 {
        return Err(Error::ZeroGradient);
    }
    Ok(())
}

/// KL-constrained natural-gradient step:
/// dtheta = sqrt(2 delta / (g' F^-1 g)) F^-1 g.
pub fn trpo_update(g: &[f64], fisher: &FisherModel, delta: f64) -> Result<UpdateResult> {
    validate_gradient(g, fisher.dim())?;
    check_finite_scalar(delta, "delta")?;
    if delta <= 0.0 {
        return Err(Error::RejectedInput(format!(
            "delta must be positive (got {delta})"
        )));
    }
    let x = fisher.solve(g)?;
    let s = dot(g, &x);
    if s <= 0.0 {
        return Err(Error::NotPositiveDefinite);
    }
    let scale = (2.0 * delta / s).sqrt();
    let delta_theta: Vec<f64> = x.iter().map(|v| v * scale).collect();
    let f_dt = fisher.matvec(&delta_theta)?;
    Ok(UpdateResult {
        predicted_kl: 0.5 * dot(&delta_theta, &f_dt),
        norm: norm2(&delta_theta),
        delta_theta,
        solver_iterations: None,
    })
}

/// Same step, but F^-1 g comes from conjugate gradients against a
/// Fisher-vector-product closure; the dense matrix is never formed.
/// Converges when the residual drops below `tol * ||g||`; otherwise fails
/// carrying the final residual.
pub fn trpo_update_cg<F>(
    g: &[f64],
    fisher_vec: F,
    delta: f64,
    max_iters: usize,
    tol: f64,
) -> Result<UpdateResult>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    check_finite(g, "gradient")?;
    if norm2(g) == 0.0 {
        return Err(Error::ZeroGradient);
    }
    check_finite_scalar(delta, "delta")?;
    if delta <= 0.0 || tol <= 0.0 || max_iters == 0 {
        return Err(Error::RejectedInput(
            "delta, tol must be positive and max_iters nonzero".into(),
        ));
    }
    let n = g.len();
    let g_norm = norm2(g);
    let target = tol * g_norm;

    let mut x = vec![0.0; n];
    let mut r = g.to_vec();
    let mut p = g.to_vec();
    let mut rs_old = dot(&r, &r);
    let mut iters = 0usize;
    while rs_old.sqrt() > target {
        if iters >= max_iters {
            return Err(Error::CgDidNotConverge {
                iterations: iters,
                residual: rs_old.sqrt(),
            });
        }
        let fp = fisher_vec(&p);
        if fp.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: fp.len(),
            });
        }
        let p_fp = dot(&p, &fp);
        if p_fp <= 0.0 {
            return Err(Error::NotPositiveDefinite);
        }
        let alpha = rs_old / p_fp;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * fp[i];
        }
        let rs_new = dot(&r, &r);
        let beta = rs_new / rs_old;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rs_old = rs_new;
        iters += 1;
    }

    let s = dot(g, &x);
    if s <= 0.0 {
        return Err(Error::NotPositiveDefinite);
    }
    let scale = (2.0 * delta / s).sqrt();
    let delta_theta: Vec<f64> = x.iter().map(|v| v * scale).collect();
    let f_dt = fisher_vec(&delta_theta);
    Ok(UpdateResult {
        predicted_kl: 0.5 * dot(&delta_theta, &f_dt),
        norm: norm2(&delta_theta),
        delta_theta,
        solver_iterations: Some(iters),
    })
}

/// Fixed-penalty surrogate step: dtheta = (1/beta) F^-1 g.
pub fn beta_update(g: &[f64], fisher: &FisherModel, beta: f64) -> Result<UpdateResult> {
    validate_gradient(g, fisher.dim())?;
    check_finite_scalar(beta, "beta")?;
    if beta <= 0.0 {
        return Err(Error::RejectedInput(format!(
            "beta must be positive (got {beta})"
        )));
    }
    let x = fisher.solve(g)?;
    let delta_theta: Vec<f64> = x.iter().map(|v| v / beta).collect();
    let f_dt = fisher.matvec(&delta_theta)?;
    Ok(UpdateResult {
        predicted_kl: 0.5 * dot(&delta_theta, &f_dt),
        norm: norm2(&delta_theta),
        delta_theta,
        solver_iterations: None,
    })
}

/// Step length of the constrained update straight from the eigenbasis:
/// with alpha = Q' g,
///
///   ||dtheta|| = sqrt( 2 delta * (alpha' L^-2 alpha) / (alpha' L^-1 alpha) ).
///
/// An algebraically independent route to the same number as
/// `trpo_update(...).norm`; used to cross-check it.
pub fn update_norm_eigen(alpha: &[f64], eigenvalues: &[f64], delta: f64) -> Result<f64> {
    if alpha.len() != eigenvalues.len() {
        return Err(Error::DimensionMismatch {
            expected: alpha.len(),
            got: eigenvalues.len(),
        });
    }
    check_finite(alpha, "alpha")?;
    check_finite(eigenvalues, "eigenvalues")?;
    check_finite_scalar(delta, "delta")?;
    if delta <= 0.0 {
        return Err(Error::RejectedInput(format!(
            "delta must be positive (got {delta})"
        )));
    }
    if eigenvalues.iter().any(|l| *l <= 0.0) {
        return Err(Error::NotPositiveDefinite);
    }
    let mut inv1 = 0.0;
    let mut inv2 = 0.0;
    for (a, l) in alpha.iter().zip(eigenvalues) {
        inv1 += a * a / l;
        inv2 += a * a / (l * l);
    }
    if inv1 == 0.0 {
        return Err(Error::ZeroGradient);
    }
    Ok((2.0 * delta * inv2 / inv1).sqrt())
}

/// Curvature of a head shared across `dim` identical output dimensions:
/// each dimension contributes one copy of the per-marginal block, so
/// F_dim = dim * block (eigenvalues scale linearly in dim).
pub fn synthesize_factorized_fisher(dim: usize, block: &FisherModel) -> Result<FisherModel> {
    if dim == 0 {
        return Err(Error::RejectedInput("dim must be at least 1".into()));
    }
    Ok(block.scaled(dim as f64))
}

/// One measured row of a scaling experiment.
#[derive(Debug, Clone)]
pub struct ScalingRow {
    pub dim: usize,
    pub trpo_norm: f64,
    pub beta_norm: f64,
}

/// Step norms across dimensions plus fitted log-log slopes.
#[derive(Debug, Clone)]
pub struct ScalingTable {
    pub rows: Vec<ScalingRow>,
    /// OLS slope of log ||dtheta_trpo|| against log dim; None for < 2 dims.
    pub trpo_slope: Option<f64>,
    pub beta_slope: Option<f64>,
}

/// Ordinary least squares slope of y against x; None when fewer than two
/// distinct x values.
pub fn fit_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (xi, yi) in x.iter().zip(y) {
        sxx += (xi - mx) * (xi - mx);
        sxy += (xi - mx) * (yi - my);
    }
    if sxx == 0.0 {
        return None;
    }
    Some(sxy / sxx)
}

fn table_from_rows(rows: Vec<ScalingRow>) -> ScalingTable {
    let lx: Vec<f64> = rows.iter().map(|r| (r.dim as f64).ln()).collect();
    let lt: Vec<f64> = rows.iter().map(|r| r.trpo_norm.ln()).collect();
    let lb: Vec<f64> = rows.iter().map(|r| r.beta_norm.ln()).collect();
    ScalingTable {
        trpo_slope: fit_slope(&lx, &lt),
        beta_slope: fit_slope(&lx, &lb),
        rows,
    }
}

/// Step norms of both update rules against dimension, using the factorized
/// synthetic curvature F_d = d * base. The solver is chosen by size: dense
/// Cholesky up to [`CG_DEFAULT_THRESHOLD`] parameters, CG above.
pub fn scaling_experiment(
    dims: &[usize],
    base_fisher: &FisherModel,
    g: &[f64],
    delta: f64,
    beta: f64,
) -> Result<ScalingTable> {
    if dims.is_empty() {
        return Err(Error::RejectedInput("dims must be non-empty".into()));
    }
    let mut rows = Vec::with_capacity(dims.len());
    for &d in dims {
        let fisher = synthesize_factorized_fisher(d, base_fisher)?;
        let trpo = if fisher.dim() > CG_DEFAULT_THRESHOLD {
            trpo_update_cg(g, |v| fisher.matvec(v).expect("dims fixed"), delta, 10 * fisher.dim(), 1e-10)?
        } else {
            trpo_update(g, &fisher, delta)?
        };
        let beta_res = beta_update(g, &fisher, beta)?;
        rows.push(ScalingRow {
            dim: d,
            trpo_norm: trpo.norm,
            beta_norm: beta_res.norm,
        });
    }
    Ok(table_from_rows(rows))
}

/// Same experiment with empirical curvature: for each dimension d the Fisher
/// of a (mean, log_std) head shared across a d-dimensional diagonal Gaussian
/// is estimated from `samples` score outer products. The scores are
/// s_mean = sum_i z_i / sigma and s_log_std = sum_i (z_i^2 - 1), whose exact
/// second-moment matrix is d * diag(1/sigma^2, 2); sampling noise is what the
/// slope tolerance absorbs.
pub fn scaling_experiment_mc<R: Rng>(
    dims: &[usize],
    sigma: f64,
    g: &[f64; 2],
    delta: f64,
    beta: f64,
    samples: usize,
    rng: &mut R,
) -> Result<ScalingTable> {
    if dims.is_empty() {
        return Err(Error::RejectedInput("dims must be non-empty".into()));
    }
    check_finite_scalar(sigma, "sigma")?;
    if sigma <= 0.0 || samples < 2 {
        return Err(Error::RejectedInput(
            "sigma must be positive and samples at least 2".into(),
        ));
    }
    let mut rows = Vec::with_capacity(dims.len());
    for &d in dims {
        let mut f00 = 0.0;
        let mut f01 = 0.0;
        let mut f11 = 0.0;
        for _ in 0..samples {
            let mut s_mean = 0.0;
            let mut s_ls = 0.0;
            for _ in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                s_mean += z / sigma;
                s_ls += z * z - 1.0;
            }
            f00 += s_mean * s_mean;
            f01 += s_mean * s_ls;
            f11 += s_ls * s_ls;
        }
        let n = samples as f64;
        let fisher = FisherModel::from_flat(2, &[f00 / n, f01 / n, f01 / n, f11 / n])?;
        let trpo = trpo_update(g, &fisher, delta)?;
        let beta_res = beta_update(g, &fisher, beta)?;
        rows.push(ScalingRow {
            dim: d,
            trpo_norm: trpo.norm,
            beta_norm: beta_res.norm,
        });
    }
    Ok(table_from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn trpo_update_hand_computed() {
        // F = diag(1, 4), g = (1, 1), delta = 0.5:
        // x = (1, 0.25), g'x = 1.25, scale = sqrt(1/1.25).
        let f = FisherModel::from_diagonal(&[1.0, 4.0]).unwrap();
        let r = trpo_update(&[1.0, 1.0], &f, 0.5).unwrap();
        let scale = (1.0f64 / 1.25).sqrt();
        assert!(close(r.delta_theta[0], scale, 1e-12));
        assert!(close(r.delta_theta[1], 0.25 * scale, 1e-12));
        assert!(close(r.predicted_kl, 0.5, 1e-12));
    }

    #[test]
    fn trpo_kl_saturates_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = 5;
            // Random SPD matrix A'A + I.
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let spd = &a.transpose() * &a + DMatrix::identity(n, n);
            let flat: Vec<f64> = (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .map(|(i, j)| spd[(i, j)])
                .collect();
            let f = FisherModel::from_flat(n, &flat).unwrap();
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let delta = rng.random_range(0.001..0.5);
            let r = trpo_update(&g, &f, delta).unwrap();
            assert!(
                (r.predicted_kl - delta).abs() <= 1e-8 * delta,
                "kl {} vs delta {delta}",
                r.predicted_kl
            );
        }
    }

    #[test]
    fn beta_update_hand_computed() {
        // F = diag(1, 4), beta = 2, g = (1, 1): dtheta = (0.5, 0.125).
        let f = FisherModel::from_diagonal(&[1.0, 4.0]).unwrap();
        let r = beta_update(&[1.0, 1.0], &f, 2.0).unwrap();
        assert!(close(r.delta_theta[0], 0.5, 1e-15));
        assert!(close(r.delta_theta[1], 0.125, 1e-15));
    }

    #[test]
    fn update_norm_eigen_hand_computed() {
        // alpha = (1, 1), lambda = (1, 4), delta = 0.5 -> sqrt(0.85).
        let norm = update_norm_eigen(&[1.0, 1.0], &[1.0, 4.0], 0.5).unwrap();
        assert!(close(norm, 0.85f64.sqrt(), 1e-12));
    }

    /// Dual-route identity: the eigenbasis formula must reproduce the norm of
    /// the directly solved step on random SPD systems.
    #[test]
    fn eigen_norm_matches_direct_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let n = rng.random_range(2..8);
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let spd = &a.transpose() * &a + DMatrix::identity(n, n) * 0.5;
            let flat: Vec<f64> = (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .map(|(i, j)| spd[(i, j)])
                .collect();
            let f = FisherModel::from_flat(n, &flat).unwrap();
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let delta = 0.01;
            let direct = trpo_update(&g, &f, delta).unwrap().norm;
            let (vals, vecs) = f.eigen();
            let gv = DVector::from_column_slice(&g);
            let alpha = vecs.transpose() * gv;
            let via_eigen = update_norm_eigen(alpha.as_slice(), &vals, delta).unwrap();
            assert!(
                (direct - via_eigen).abs() <= 1e-8 * direct.abs().max(1e-12),
                "direct {direct} vs eigen {via_eigen}"
            );
        }
    }

    #[test]
    fn cg_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 40;
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let spd = &a.transpose() * &a + DMatrix::identity(n, n);
        let flat: Vec<f64> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| spd[(i, j)])
            .collect();
        let f = FisherModel::from_flat(n, &flat).unwrap();
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let tol = 1e-10;
        let dense = trpo_update(&g, &f, 0.01).unwrap();
        let cg = trpo_update_cg(&g, |v| f.matvec(v).unwrap(), 0.01, 10 * n, tol).unwrap();
        let diff: f64 = dense
            .delta_theta
            .iter()
            .zip(&cg.delta_theta)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(diff <= 1e-6 * dense.norm, "diff {diff}");
        // Exact-arithmetic CG terminates in n steps; rounding pushes a dense
        // random system somewhat past that before the residual hits 1e-10.
        assert!(cg.solver_iterations.unwrap() <= 3 * n);
    }

    #[test]
    fn cg_reports_non_convergence() {
        // One iteration cannot solve a generic 3-d system.
        let f = FisherModel::from_diagonal(&[1.0, 10.0, 100.0]).unwrap();
        let err = trpo_update_cg(&[1.0, 1.0, 1.0], |v| f.matvec(v).unwrap(), 0.01, 1, 1e-14)
            .unwrap_err();
        match err {
            Error::CgDidNotConverge { residual, .. } => assert!(residual > 0.0),
            other => panic!("expected convergence failure, got {other:?}"),
        }
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let f = FisherModel::from_diagonal(&[1.0, 1.0]).unwrap();
        assert!(matches!(
            trpo_update(&[0.0, 0.0], &f, 0.1),
            Err(Error::ZeroGradient)
        ));
        assert!(matches!(
            beta_update(&[0.0, 0.0], &f, 2.0),
            Err(Error::ZeroGradient)
        ));
        // Indefinite curvature.
        let indef = FisherModel::from_flat(2, &[1.0, 0.0, 0.0, -1.0]).unwrap();
        assert!(matches!(
            trpo_update(&[1.0, 1.0], &indef, 0.1),
            Err(Error::NotPositiveDefinite)
        ));
        assert!(FisherModel::from_flat(2, &[1.0, 0.5, 0.4, 1.0]).is_err());
        assert!(FisherModel::from_diagonal(&[1.0, 0.0]).is_err());
        assert!(trpo_update(&[1.0, 1.0], &f, -0.1).is_err());
    }

    #[test]
    fn factorized_fisher_scales_eigenvalues() {
        let block = FisherModel::from_flat(2, &[2.0, 0.3, 0.3, 1.0]).unwrap();
        let f4 = synthesize_factorized_fisher(4, &block).unwrap();
        let (v1, _) = block.eigen();
        let (v4, _) = f4.eigen();
        for (a, b) in v1.iter().zip(&v4) {
            assert!(close(4.0 * a, *b, 1e-12));
        }
        let id = FisherModel::from_diagonal(&[1.0, 1.0]).unwrap();
        let f9 = synthesize_factorized_fisher(9, &id).unwrap();
        assert!(close(f9.matrix()[(0, 0)], 9.0, 1e-15));
    }

    #[test]
    fn synthetic_slopes_are_exact() {
        let base = FisherModel::from_flat(2, &[1.0, 0.2, 0.2, 2.0]).unwrap();
        let table = scaling_experiment(&[1, 2, 4, 8, 16, 32], &base, &[0.7, -0.4], 0.01, 10.0)
            .unwrap();
        assert!(close(table.trpo_slope.unwrap(), -0.5, 1e-6));
        assert!(close(table.beta_slope.unwrap(), -1.0, 1e-6));
        // And the norms themselves follow the closed forms.
        let r1 = &table.rows[0];
        let r4 = &table.rows[2];
        assert!(close(r4.trpo_norm, r1.trpo_norm / 2.0, 1e-10));
        assert!(close(r4.beta_norm, r1.beta_norm / 4.0, 1e-10));
    }

    #[test]
    fn monte_carlo_slope_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let table = scaling_experiment_mc(
            &[1, 2, 4, 8, 16, 32],
            1.0,
            &[1.0, 0.5],
            0.01,
            10.0,
            20_000,
            &mut rng,
        )
        .unwrap();
        let slope = table.trpo_slope.unwrap();
        assert!(
            (slope + 0.5).abs() < 0.1,
            "monte-carlo trpo slope {slope} not within 0.1 of -0.5"
        );
        let beta_slope = table.beta_slope.unwrap();
        assert!((beta_slope + 1.0).abs() < 0.15);
    }

    #[test]
    fn slope_fit_is_exact_on_power_laws() {
        let x: Vec<f64> = [1.0f64, 2.0, 4.0, 8.0].iter().map(|v| v.ln()).collect();
        let y: Vec<f64> = [3.0f64, 1.5, 0.75, 0.375].iter().map(|v| v.ln()).collect();
        assert!(close(fit_slope(&x, &y).unwrap(), -1.0, 1e-12));
        assert!(fit_slope(&x[..1], &y[..1]).is_none());
    }
}
