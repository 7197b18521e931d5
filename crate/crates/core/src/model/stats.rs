//! Exponential-family sufficient statistics for Gaussian components.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::gaussian::GaussianParams;

/// Zeroth/first/second moments: expected count, sum of x, sum of x x^T.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SufficientStats {
    pub s0: f64,
    pub s1: DVector<f64>,
    pub s2: DMatrix<f64>,
}

impl SufficientStats {
    pub fn zeros(dim: usize) -> Self {
        Self {
            s0: 0.0,
            s1: DVector::zeros(dim),
            s2: DMatrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.s1.len()
    }

    /// Statistics of a single point: (1, x, x x^T).
    pub fn of_point(x: &DVector<f64>) -> Self {
        let mut s = Self::zeros(x.len());
        s.accumulate(x, 1.0);
        s
    }

    /// Adds `w * (1, x, x x^T)`.
    pub fn accumulate(&mut self, x: &DVector<f64>, w: f64) {
        self.s0 += w;
        self.s1.axpy(w, x, 1.0);
        // symmetric rank-1 update
        self.s2.ger(w, x, x, 1.0);
    }

    pub fn scale(&mut self, c: f64) {
        self.s0 *= c;
        self.s1 *= c;
        self.s2 *= c;
    }

    /// Stochastic-approximation blend `s <- s + gamma (batch - s)`.
    /// `gamma == 1` replaces exactly.
    pub fn blend(&mut self, batch: &Self, gamma: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::validation(format!("step size {gamma} outside [0, 1]")));
        }
        if gamma == 1.0 {
            self.s0 = batch.s0;
            self.s1.copy_from(&batch.s1);
            self.s2.copy_from(&batch.s2);
            return Ok(());
        }
        self.s0 += gamma * (batch.s0 - self.s0);
        let dim = self.dim();
        for i in 0..dim {
            self.s1[i] += gamma * (batch.s1[i] - self.s1[i]);
            for j in 0..dim {
                self.s2[(i, j)] += gamma * (batch.s2[(i, j)] - self.s2[(i, j)]);
            }
        }
        Ok(())
    }

    /// Statistics a Gaussian component with the given weight share would
    /// produce in expectation; used to seed stochastic-approximation state so
    /// that extraction reproduces the initial parameters.
    pub fn self_consistent(params: &GaussianParams, mass: f64) -> Self {
        let sigma = params.covariance();
        let mean_outer = &params.mean * params.mean.transpose();
        Self {
            s0: mass,
            s1: &params.mean * mass,
            s2: (sigma + mean_outer) * mass,
        }
    }
}

/// Mean/covariance extraction with the diagonal regularization floor
/// `eps = max(1e-6 * trace(Sigma) / D, 1e-9)`.
///
/// Returns the component parameters and the weight share `s0`.
pub fn gaussian_params_from(stats: &SufficientStats) -> Result<(GaussianParams, f64)> {
    if stats.s0 <= 0.0 {
        return Err(Error::EmptyComponent);
    }
    let dim = stats.dim();
    let mean = &stats.s1 / stats.s0;
    let mut sigma = &stats.s2 / stats.s0 - &mean * mean.transpose();
    // enforce symmetry before factorizing
    for i in 0..dim {
        for j in 0..i {
            let v = 0.5 * (sigma[(i, j)] + sigma[(j, i)]);
            sigma[(i, j)] = v;
            sigma[(j, i)] = v;
        }
    }
    let eps = (1e-6 * sigma.trace() / dim as f64).max(1e-9);
    for i in 0..dim {
        sigma[(i, i)] += eps;
    }
    let chol = nalgebra::Cholesky::new(sigma).ok_or(Error::DegenerateStats { component: 0 })?;
    Ok((GaussianParams::new(mean, chol.l())?, stats.s0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn single_point_yields_point_mass_with_floor() {
        let x = DVector::from_vec(vec![2.0, -1.0]);
        let stats = SufficientStats::of_point(&x);
        let (p, share) = gaussian_params_from(&stats).unwrap();
        assert_relative_eq!(p.mean, x, max_relative = 1e-15);
        assert_relative_eq!(p.covariance(), DMatrix::identity(2, 2) * 1e-9, max_relative = 1e-9);
        assert_eq!(share, 1.0);
    }

    #[test]
    fn two_symmetric_points_in_1d() {
        let mut stats = SufficientStats::zeros(1);
        stats.accumulate(&DVector::from_element(1, -1.0), 1.0);
        stats.accumulate(&DVector::from_element(1, 1.0), 1.0);
        let (p, share) = gaussian_params_from(&stats).unwrap();
        assert_eq!(share, 2.0);
        assert_relative_eq!(p.mean[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(p.covariance()[(0, 0)], 1.0 + 1e-6, max_relative = 1e-12);
    }

    #[test]
    fn matches_direct_moment_computation() {
        // Batch update of a 1-component model equals plain sample moments.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<DVector<f64>> = (0..10)
            .map(|_| DVector::from_fn(3, |_, _| rng.random::<f64>() * 4.0 - 2.0))
            .collect();
        let mut stats = SufficientStats::zeros(3);
        for x in &xs {
            stats.accumulate(x, 1.0);
        }
        let (p, _) = gaussian_params_from(&stats).unwrap();

        let n = xs.len() as f64;
        let mean: DVector<f64> = xs.iter().fold(DVector::zeros(3), |acc, x| acc + x) / n;
        let mut cov = DMatrix::zeros(3, 3);
        for x in &xs {
            let d = x - &mean;
            cov += &d * d.transpose();
        }
        cov /= n;
        assert_relative_eq!(p.mean, mean, max_relative = 1e-12);
        for i in 0..3 {
            cov[(i, i)] += (1e-6 * cov.trace() / 3.0).max(1e-9);
        }
        assert_relative_eq!(p.covariance(), cov, max_relative = 1e-9);
    }

    #[test]
    fn empty_component_is_reported() {
        let stats = SufficientStats::zeros(2);
        assert!(matches!(gaussian_params_from(&stats), Err(Error::EmptyComponent)));
    }

    #[test]
    fn blend_examples() {
        let mut a = SufficientStats::zeros(1);
        a.s0 = 10.0;
        let mut b = SufficientStats::zeros(1);
        b.s0 = 20.0;
        a.blend(&b, 0.3).unwrap();
        assert_relative_eq!(a.s0, 13.0, max_relative = 1e-15);
        let keep = a.clone();
        a.blend(&b, 0.0).unwrap();
        assert_eq!(a, keep);
        a.blend(&b, 1.0).unwrap();
        assert_eq!(a.s0, 20.0);
        assert!(a.blend(&b, 1.5).is_err());
    }
}
