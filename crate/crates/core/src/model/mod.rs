//! Mixture parameterization, component families and exact probabilistic
//! primitives (joint, marginal, posterior responsibilities).

pub mod gaussian;
pub mod sinh_arcsinh;
pub mod stats;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{log_sum_exp, softmax};

pub use gaussian::GaussianParams;
pub use sinh_arcsinh::SinhArcsinhParams;
pub use stats::{gaussian_params_from, SufficientStats};

/// Behavioral interface of a component family: log-density and its gradient
/// with respect to a flat, family-defined parameter layout.
pub trait ComponentFamily {
    fn family_id(&self) -> &'static str;
    fn dim(&self) -> usize;
    fn param_len(&self) -> usize;
    fn validate_params(&self, eta: &DVector<f64>) -> Result<()>;
    fn log_density(&self, eta: &DVector<f64>, x: &DVector<f64>) -> f64;
    fn grad_log_density(&self, eta: &DVector<f64>, x: &DVector<f64>) -> DVector<f64>;
    /// Whether the family admits the closed-form sufficient-statistics
    /// maximization path.
    fn supports_suffstats(&self) -> bool;
}

/// The shipped component families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case")]
pub enum Family {
    Gaussian { dim: usize },
    SinhArcsinh { dim: usize },
}

impl Family {
    pub fn from_id(id: &str, dim: usize) -> Result<Self> {
        match id {
            "gaussian" => Ok(Family::Gaussian { dim }),
            "sinh_arcsinh" => Ok(Family::SinhArcsinh { dim }),
            other => Err(Error::validation(format!("unknown family id '{other}'"))),
        }
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self, Family::Gaussian { .. })
    }
}

impl ComponentFamily for Family {
    fn family_id(&self) -> &'static str {
        match self {
            Family::Gaussian { .. } => "gaussian",
            Family::SinhArcsinh { .. } => "sinh_arcsinh",
        }
    }

    fn dim(&self) -> usize {
        match self {
            Family::Gaussian { dim } | Family::SinhArcsinh { dim } => *dim,
        }
    }

    fn param_len(&self) -> usize {
        match self {
            Family::Gaussian { dim } => gaussian::flat_len(*dim),
            Family::SinhArcsinh { dim } => sinh_arcsinh::flat_len(*dim),
        }
    }

    fn validate_params(&self, eta: &DVector<f64>) -> Result<()> {
        match self {
            Family::Gaussian { dim } => gaussian::validate_flat(*dim, eta),
            Family::SinhArcsinh { dim } => sinh_arcsinh::validate_flat(*dim, eta),
        }
    }

    fn log_density(&self, eta: &DVector<f64>, x: &DVector<f64>) -> f64 {
        match self {
            Family::Gaussian { dim } => {
                let p = GaussianParams::from_flat(*dim, eta).expect("validated parameters");
                gaussian::log_density(&p, x)
            }
            Family::SinhArcsinh { dim } => {
                let p = SinhArcsinhParams::from_flat(*dim, eta).expect("validated parameters");
                sinh_arcsinh::log_density(&p, x)
            }
        }
    }

    fn grad_log_density(&self, eta: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Family::Gaussian { dim } => {
                let p = GaussianParams::from_flat(*dim, eta).expect("validated parameters");
                gaussian::grad_log_density(&p, x)
            }
            Family::SinhArcsinh { dim } => {
                let p = SinhArcsinhParams::from_flat(*dim, eta).expect("validated parameters");
                sinh_arcsinh::grad_log_density(&p, x)
            }
        }
    }

    fn supports_suffstats(&self) -> bool {
        self.is_gaussian()
    }
}

/// Immutable snapshot of mixture parameters: unconstrained log-weights `nu`
/// (weights are `softmax(nu)`) plus one flat parameter block per component.
///
/// Component indices are 1-based at all documented interfaces and in
/// serialized artifacts; in-memory storage is 0-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub family: Family,
    pub nu: DVector<f64>,
    pub components: Vec<DVector<f64>>,
}

impl MixtureParams {
    pub fn new(family: Family, nu: DVector<f64>, components: Vec<DVector<f64>>) -> Result<Self> {
        let params = Self { family, nu, components };
        params.validate()?;
        Ok(params)
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.family.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::validation("mixture must have K >= 1 components"));
        }
        if self.nu.len() != self.components.len() {
            return Err(Error::validation(format!(
                "nu has length {}, expected K = {}",
                self.nu.len(),
                self.components.len()
            )));
        }
        if self.nu.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("non-finite log-weight parameter"));
        }
        for eta in &self.components {
            self.family.validate_params(eta)?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.nu.iter().all(|v| v.is_finite())
            && self.components.iter().all(|eta| eta.iter().all(|v| v.is_finite()))
    }

    /// Mixing weights `softmax(nu)` on the K-simplex.
    pub fn weights(&self) -> DVector<f64> {
        softmax(&self.nu)
    }

    /// `log softmax(nu)`.
    pub fn log_weights(&self) -> DVector<f64> {
        let lse = log_sum_exp(self.nu.as_slice());
        self.nu.map(|v| v - lse)
    }

    fn check_index(&self, z: usize) -> Result<usize> {
        if z == 0 || z > self.k() {
            return Err(Error::ComponentIndex { index: z, k: self.k() });
        }
        Ok(z - 1)
    }
}

/// Per-snapshot prepared state for density evaluations: parsed component
/// parameters and normalized log-weights. Read-only and shareable across
/// worker threads.
pub struct Prepared<'a> {
    pub theta: &'a MixtureParams,
    log_w: DVector<f64>,
    comps: Vec<PreparedComponent>,
}

enum PreparedComponent {
    Gaussian { p: GaussianParams, sum_log_diag: f64 },
    SinhArcsinh { p: SinhArcsinhParams },
}

impl<'a> Prepared<'a> {
    pub fn new(theta: &'a MixtureParams) -> Result<Self> {
        theta.validate()?;
        let log_w = theta.log_weights();
        let comps = theta
            .components
            .iter()
            .map(|eta| match theta.family {
                Family::Gaussian { dim } => {
                    let p = GaussianParams::from_flat(dim, eta)?;
                    let sum_log_diag = (0..dim).map(|i| p.chol_cov[(i, i)].ln()).sum();
                    Ok(PreparedComponent::Gaussian { p, sum_log_diag })
                }
                Family::SinhArcsinh { dim } => {
                    Ok(PreparedComponent::SinhArcsinh { p: SinhArcsinhParams::from_flat(dim, eta)? })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { theta, log_w, comps })
    }

    pub fn k(&self) -> usize {
        self.comps.len()
    }

    pub fn dim(&self) -> usize {
        self.theta.dim()
    }

    pub fn log_weight0(&self, k0: usize) -> f64 {
        self.log_w[k0]
    }

    /// Component log-density, 0-based index.
    pub fn log_density0(&self, k0: usize, x: &DVector<f64>) -> f64 {
        match &self.comps[k0] {
            PreparedComponent::Gaussian { p, sum_log_diag } => {
                let r = x - &p.mean;
                let u = p
                    .chol_cov
                    .solve_lower_triangular(&r)
                    .expect("strictly positive diagonal");
                -0.5 * p.dim() as f64 * gaussian::LN_2PI - sum_log_diag - 0.5 * u.norm_squared()
            }
            PreparedComponent::SinhArcsinh { p } => sinh_arcsinh::log_density(p, x),
        }
    }

    /// `log p(x, z)` with 0-based `k0`, counting one family evaluation.
    pub fn log_joint0(&self, k0: usize, x: &DVector<f64>, evals: &mut u64) -> f64 {
        *evals += 1;
        self.log_density0(k0, x) + self.log_w[k0]
    }

    /// Log-joints for all K components, counting K family evaluations.
    pub fn log_joints(&self, x: &DVector<f64>, evals: &mut u64) -> DVector<f64> {
        *evals += self.k() as u64;
        DVector::from_fn(self.k(), |k0, _| self.log_density0(k0, x) + self.log_w[k0])
    }

    pub fn log_marginal(&self, x: &DVector<f64>) -> f64 {
        let mut evals = 0;
        log_sum_exp(self.log_joints(x, &mut evals).as_slice())
    }

    pub fn responsibilities(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut evals = 0;
        softmax(&self.log_joints(x, &mut evals))
    }

    /// Tempered posterior row `softmax(beta * log_joint)`, together with the
    /// untempered log-joints it was derived from.
    pub fn tempered_row(&self, x: &DVector<f64>, beta: f64, evals: &mut u64) -> (DVector<f64>, DVector<f64>) {
        let lj = self.log_joints(x, evals);
        let row = softmax(&(&lj * beta));
        (row, lj)
    }
}

fn check_point(theta: &MixtureParams, x: &DVector<f64>) -> Result<()> {
    if x.len() != theta.dim() {
        return Err(Error::validation(format!(
            "datapoint has dimension {}, expected {}",
            x.len(),
            theta.dim()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("non-finite datapoint"));
    }
    Ok(())
}

/// `log p(x, z) = log p(x | z) + log pi_z` for a 1-based component index.
pub fn log_joint(theta: &MixtureParams, x: &DVector<f64>, z: usize) -> Result<f64> {
    check_point(theta, x)?;
    let k0 = theta.check_index(z)?;
    let prep = Prepared::new(theta)?;
    let mut evals = 0;
    Ok(prep.log_joint0(k0, x, &mut evals))
}

/// `log p(x) = logsumexp_z log p(x, z)`.
pub fn log_marginal(theta: &MixtureParams, x: &DVector<f64>) -> Result<f64> {
    check_point(theta, x)?;
    Ok(Prepared::new(theta)?.log_marginal(x))
}

/// Posterior over components, `p(z | x)`.
pub fn responsibilities(theta: &MixtureParams, x: &DVector<f64>) -> Result<DVector<f64>> {
    check_point(theta, x)?;
    Ok(Prepared::new(theta)?.responsibilities(x))
}

/// Full-data log-likelihood `sum_i log p(x_i)`. Rows are evaluated in
/// parallel; the reduction order is fixed so the result is deterministic.
pub fn dataset_loglik(theta: &MixtureParams, data: &crate::data::Dataset) -> Result<f64> {
    use rayon::prelude::*;
    let prep = Prepared::new(theta)?;
    let per_row: Vec<f64> = data.rows().par_iter().map(|x| prep.log_marginal(x)).collect();
    Ok(per_row.iter().sum())
}

/// Component log-density through the family interface (1-based index not
/// required here; `eta` is a single block).
pub fn family_log_density(family: &Family, eta: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
    family.validate_params(eta)?;
    Ok(family.log_density(eta, x))
}

/// Gradient of the component log-density in the flat layout of `eta`.
pub fn family_grad_log_density(
    family: &Family,
    eta: &DVector<f64>,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    family.validate_params(eta)?;
    Ok(family.grad_log_density(eta, x))
}

/// Statistics of a single datapoint, `(1, x, x x^T)`.
pub fn gaussian_stats_of(x: &DVector<f64>) -> SufficientStats {
    SufficientStats::of_point(x)
}
