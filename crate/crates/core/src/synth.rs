//! Synthetic Gaussian mixture generation with a controlled maximum pairwise
//! overlap, measured as the two-sided misclassification probability between
//! component pairs and tuned by bisecting a global covariance scale.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::math::sample_categorical;
use crate::model::{Family, GaussianParams, MixtureParams};
use crate::rng::{RunRng, StreamDomain};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    pub dim: usize,
    pub k: usize,
    pub n: usize,
    /// Target maximum pairwise overlap, in (0, 1).
    pub omega: f64,
    pub seed: u64,
    /// Monte-Carlo draws per direction of every pair estimate.
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    /// Relative tolerance on the achieved overlap.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_mc_samples() -> usize {
    10_000
}

fn default_tolerance() -> f64 {
    0.1
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.k == 0 || self.n == 0 {
            return Err(Error::validation("dim, K and N must be >= 1"));
        }
        if !(self.omega > 0.0 && self.omega < 1.0) {
            return Err(Error::validation(format!("omega {} outside (0, 1)", self.omega)));
        }
        if self.mc_samples == 0 {
            return Err(Error::validation("mc_samples must be >= 1"));
        }
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(Error::validation("tolerance must be positive"));
        }
        Ok(())
    }
}

/// Monte-Carlo overlap estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// Two-sided misclassification probability between components `k` and `l`
/// (1-based):
/// `P_{x~k}[pi_l p_l(x) > pi_k p_k(x)] + P_{x~l}[pi_k p_k(x) > pi_l p_l(x)]`.
///
/// Bit-identical component pairs are rejected: on the tie set the strict
/// inequality never fires and the estimate would silently read zero.
pub fn pairwise_overlap<R: Rng>(
    theta: &MixtureParams,
    k: usize,
    l: usize,
    mc_samples: usize,
    rng: &mut R,
) -> Result<OverlapEstimate> {
    let dim = match theta.family {
        Family::Gaussian { dim } => dim,
        _ => return Err(Error::Unsupported("overlap estimation requires the Gaussian family".into())),
    };
    let kk = component_index(theta, k)?;
    let ll = component_index(theta, l)?;
    if kk == ll {
        return Err(Error::validation("overlap requires two distinct components"));
    }
    if theta.components[kk] == theta.components[ll] && theta.nu[kk] == theta.nu[ll] {
        return Err(Error::validation(
            "overlap is undefined for bit-identical components (tie set)",
        ));
    }
    let pk = GaussianParams::from_flat(dim, &theta.components[kk])?;
    let pl = GaussianParams::from_flat(dim, &theta.components[ll])?;
    let log_w = theta.log_weights();

    let mut draw_misclass = |own: &GaussianParams, other: &GaussianParams, lw_own: f64, lw_other: f64| {
        let mut hits = 0usize;
        for _ in 0..mc_samples {
            let u = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = &own.mean + &own.chol_cov * u;
            let own_score = lw_own + crate::model::gaussian::log_density(own, &x);
            let other_score = lw_other + crate::model::gaussian::log_density(other, &x);
            if other_score > own_score {
                hits += 1;
            }
        }
        hits as f64 / mc_samples as f64
    };

    let p_kl = draw_misclass(&pk, &pl, log_w[kk], log_w[ll]);
    let p_lk = draw_misclass(&pl, &pk, log_w[ll], log_w[kk]);
    let var = p_kl * (1.0 - p_kl) / mc_samples as f64 + p_lk * (1.0 - p_lk) / mc_samples as f64;
    Ok(OverlapEstimate { value: p_kl + p_lk, std_error: var.sqrt() })
}

fn component_index(theta: &MixtureParams, z: usize) -> Result<usize> {
    if z == 0 || z > theta.k() {
        return Err(Error::ComponentIndex { index: z, k: theta.k() });
    }
    Ok(z - 1)
}

/// A generated ground-truth mixture with its dataset.
#[derive(Clone, Debug)]
pub struct Generated {
    pub theta: MixtureParams,
    pub data: Dataset,
    /// 1-based component labels per datapoint.
    pub labels: Vec<usize>,
    pub achieved_omega: f64,
}

struct BaseModel {
    means: Vec<DVector<f64>>,
    chols: Vec<DMatrix<f64>>,
    nu: DVector<f64>,
}

impl BaseModel {
    fn at_scale(&self, family: Family, c: f64) -> MixtureParams {
        let root = c.sqrt();
        let components = self
            .means
            .iter()
            .zip(&self.chols)
            .map(|(mean, chol)| {
                GaussianParams::new(mean.clone(), chol * root)
                    .expect("scaled factor stays valid")
                    .to_flat()
            })
            .collect();
        MixtureParams { family, nu: self.nu.clone(), components }
    }
}

/// Draws mixture parameters (means uniform in the unit cube, covariances as
/// random rotations of log-uniform eigenvalues, Dirichlet(5) weights),
/// bisects a global covariance scale until the maximum pairwise overlap
/// matches `spec.omega` within tolerance, and samples the dataset.
/// Deterministic given the seed.
pub fn generate(spec: &GenSpec) -> Result<Generated> {
    spec.validate()?;
    let rng = RunRng::new(spec.seed);
    let family = Family::Gaussian { dim: spec.dim };

    // base parameters, scale-free
    let mut mean_stream = rng.stream(StreamDomain::GenMeans, 0, 0);
    let means: Vec<DVector<f64>> = (0..spec.k)
        .map(|_| DVector::from_fn(spec.dim, |_, _| mean_stream.random::<f64>()))
        .collect();

    let mut cov_stream = rng.stream(StreamDomain::GenCov, 0, 0);
    let chols: Vec<DMatrix<f64>> = (0..spec.k)
        .map(|_| {
            let sigma = random_base_covariance(spec.dim, &mut cov_stream);
            nalgebra::Cholesky::new(sigma)
                .expect("constructed covariance is positive definite")
                .l()
        })
        .collect();

    let mut weight_stream = rng.stream(StreamDomain::GenWeights, 0, 0);
    let gamma = Gamma::new(5.0, 1.0).expect("valid shape");
    let raw: Vec<f64> = (0..spec.k).map(|_| gamma.sample(&mut weight_stream)).collect();
    let total: f64 = raw.iter().sum();
    let nu = DVector::from_iterator(spec.k, raw.iter().map(|w| (w / total).ln()));

    let base = BaseModel { means, chols, nu };

    let (scale, achieved) = if spec.k == 1 {
        (1.0, 0.0)
    } else {
        calibrate_scale(&base, family, spec, &rng)?
    };

    let theta = base.at_scale(family, scale);
    let weights = theta.weights();
    let comps: Vec<GaussianParams> = theta
        .components
        .iter()
        .map(|eta| GaussianParams::from_flat(spec.dim, eta))
        .collect::<Result<_>>()?;

    let mut data_stream = rng.stream(StreamDomain::GenData, 0, 0);
    let mut rows = Vec::with_capacity(spec.n);
    let mut labels = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let z = sample_categorical(&mut data_stream, weights.as_slice());
        let u = DVector::from_fn(spec.dim, |_, _| data_stream.sample::<f64, _>(StandardNormal));
        rows.push(&comps[z].mean + &comps[z].chol_cov * u);
        labels.push(z + 1);
    }

    Ok(Generated { theta, data: Dataset::new(rows)?, labels, achieved_omega: achieved })
}

/// Eigenvalues log-uniform in [0.5, 2] under a random rotation.
fn random_base_covariance<R: Rng>(dim: usize, rng: &mut R) -> DMatrix<f64> {
    let lo = 0.5f64.ln();
    let hi = 2.0f64.ln();
    let eigs = DVector::from_fn(dim, |_, _| (lo + rng.random::<f64>() * (hi - lo)).exp());
    if dim == 1 {
        return DMatrix::from_element(1, 1, eigs[0]);
    }
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = g.qr().q();
    &q * DMatrix::from_diagonal(&eigs) * q.transpose()
}

/// Maximum pairwise overlap at a given covariance scale. Pairs are
/// estimated concurrently, each from its own stream, and each pair re-uses
/// the same stream at every scale, so the estimate is a deterministic and
/// monotone function of the scale.
fn max_overlap(base: &BaseModel, family: Family, spec: &GenSpec, rng: &RunRng, c: f64) -> Result<f64> {
    let theta = base.at_scale(family, c);
    let pairs: Vec<(usize, usize)> =
        (1..=spec.k).flat_map(|a| ((a + 1)..=spec.k).map(move |b| (a, b))).collect();
    let estimates: Vec<f64> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let mut stream = rng.stream(StreamDomain::GenOverlap, a as u64, b as u64);
            pairwise_overlap(&theta, a, b, spec.mc_samples, &mut stream).map(|e| e.value)
        })
        .collect::<Result<_>>()?;
    Ok(estimates.into_iter().fold(0.0, f64::max))
}

fn calibrate_scale(
    base: &BaseModel,
    family: Family,
    spec: &GenSpec,
    rng: &RunRng,
) -> Result<(f64, f64)> {
    let tol = spec.tolerance * spec.omega;

    // bracket: grow the scale until the overlap exceeds the target
    let mut lo = 0.0;
    let mut lo_val = 0.0;
    let mut hi = 1.0;
    let mut hi_val = max_overlap(base, family, spec, rng, hi)?;
    let mut grow = 0;
    while hi_val < spec.omega {
        grow += 1;
        if grow > 60 {
            return Err(Error::Generation(format!(
                "could not bracket overlap {} within 60 doublings (reached {hi_val:.4} at scale {hi:.3e})",
                spec.omega
            )));
        }
        lo = hi;
        lo_val = hi_val;
        hi *= 2.0;
        hi_val = max_overlap(base, family, spec, rng, hi)?;
    }
    if (hi_val - spec.omega).abs() <= tol {
        return Ok((hi, hi_val));
    }

    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let val = max_overlap(base, family, spec, rng, mid)?;
        if (val - spec.omega).abs() <= tol {
            return Ok((mid, val));
        }
        if val < spec.omega {
            lo = mid;
            lo_val = val;
        } else {
            hi = mid;
            hi_val = val;
        }
    }
    Err(Error::Generation(format!(
        "bisection did not reach overlap {} +- {tol:.4} within 60 steps (bracket [{lo_val:.4}, {hi_val:.4}])",
        spec.omega
    )))
}
