//! Multivariate Gaussian component family.
//!
//! Parameters are stored as a flat vector `[mean; packed lower Cholesky]`
//! where diagonal entries of the factor are kept in log-space, so the factor
//! stays strictly positive definite under unconstrained gradient updates.
//! Densities and gradients use triangular solves only.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::math::tri_len;

pub const LN_2PI: f64 = 1.8378770664093453;

/// Typed view of one Gaussian component: mean and lower Cholesky factor of
/// the covariance (strictly positive diagonal).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mean: DVector<f64>,
    pub chol_cov: DMatrix<f64>,
}

impl GaussianParams {
    pub fn new(mean: DVector<f64>, chol_cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if chol_cov.nrows() != d || chol_cov.ncols() != d {
            return Err(Error::validation("Cholesky factor shape does not match mean"));
        }
        for r in 0..d {
            for c in 0..d {
                let v = chol_cov[(r, c)];
                if !v.is_finite() {
                    return Err(Error::validation("non-finite entry in Cholesky factor"));
                }
                if c > r && v != 0.0 {
                    return Err(Error::validation("Cholesky factor must be lower triangular"));
                }
            }
            if chol_cov[(r, r)] <= 0.0 {
                return Err(Error::validation("Cholesky factor must have a strictly positive diagonal"));
            }
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("non-finite entry in mean"));
        }
        Ok(Self { mean, chol_cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.chol_cov * self.chol_cov.transpose()
    }

    /// Flat layout: `[mean_0..mean_{D-1}, row-major packed lower triangle]`
    /// with `ln L_dd` in place of each diagonal entry.
    pub fn to_flat(&self) -> DVector<f64> {
        let d = self.dim();
        let mut out = DVector::zeros(flat_len(d));
        out.rows_mut(0, d).copy_from(&self.mean);
        let mut idx = d;
        for r in 0..d {
            for c in 0..=r {
                out[idx] = if r == c {
                    self.chol_cov[(r, r)].ln()
                } else {
                    self.chol_cov[(r, c)]
                };
                idx += 1;
            }
        }
        out
    }

    pub fn from_flat(dim: usize, eta: &DVector<f64>) -> Result<Self> {
        if eta.len() != flat_len(dim) {
            return Err(Error::validation(format!(
                "Gaussian parameter block has length {}, expected {}",
                eta.len(),
                flat_len(dim)
            )));
        }
        let mean = DVector::from_iterator(dim, eta.rows(0, dim).iter().copied());
        let mut chol = DMatrix::zeros(dim, dim);
        let mut idx = dim;
        for r in 0..dim {
            for c in 0..=r {
                chol[(r, c)] = if r == c { eta[idx].exp() } else { eta[idx] };
                idx += 1;
            }
        }
        GaussianParams::new(mean, chol)
    }
}

pub fn flat_len(dim: usize) -> usize {
    dim + tri_len(dim)
}

pub fn validate_flat(dim: usize, eta: &DVector<f64>) -> Result<()> {
    if eta.len() != flat_len(dim) {
        return Err(Error::validation(format!(
            "Gaussian parameter block has length {}, expected {}",
            eta.len(),
            flat_len(dim)
        )));
    }
    if eta.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("non-finite Gaussian parameter"));
    }
    Ok(())
}

/// log N(x; mu, L L^T) evaluated with two triangular solves.
pub fn log_density(p: &GaussianParams, x: &DVector<f64>) -> f64 {
    let d = p.dim() as f64;
    let r = x - &p.mean;
    let u = p
        .chol_cov
        .solve_lower_triangular(&r)
        .expect("strictly positive diagonal");
    let sum_log_diag: f64 = (0..p.dim()).map(|i| p.chol_cov[(i, i)].ln()).sum();
    -0.5 * d * LN_2PI - sum_log_diag - 0.5 * u.norm_squared()
}

/// Gradient of the log-density with respect to the flat parameter layout.
pub fn grad_log_density(p: &GaussianParams, x: &DVector<f64>) -> DVector<f64> {
    let d = p.dim();
    let r = x - &p.mean;
    let u = p
        .chol_cov
        .solve_lower_triangular(&r)
        .expect("strictly positive diagonal");
    // w = L^{-T} u = Sigma^{-1} (x - mu)
    let w = p
        .chol_cov
        .tr_solve_lower_triangular(&u)
        .expect("strictly positive diagonal");
    let mut g = DVector::zeros(flat_len(d));
    g.rows_mut(0, d).copy_from(&w);
    let mut idx = d;
    for row in 0..d {
        for col in 0..=row {
            g[idx] = if row == col {
                // d/d(ln L_dd) = L_dd * (w_d u_d - 1/L_dd)
                w[row] * u[row] * p.chol_cov[(row, row)] - 1.0
            } else {
                w[row] * u[col]
            };
            idx += 1;
        }
    }
    g
}
