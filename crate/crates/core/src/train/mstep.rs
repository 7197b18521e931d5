//! Maximization steps: closed-form sufficient-statistics updates for the
//! Gaussian family and the generic sparse gradient path.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{gaussian_params_from, ComponentFamily, MixtureParams, SufficientStats};
use crate::train::estep::Occupancy;

/// Batch statistics per component, scaled to full-data scale.
/// Components with no occupancy are absent.
pub fn batch_stats(
    data: &Dataset,
    batch: &[usize],
    occ: &Occupancy,
    scale: f64,
) -> BTreeMap<usize, SufficientStats> {
    let dim = data.dim();
    match occ {
        Occupancy::Dense(rows) => {
            let k = rows[0].len();
            let stats: Vec<SufficientStats> = (0..k)
                .into_par_iter()
                .map(|kk| {
                    let mut s = SufficientStats::zeros(dim);
                    for (pos, &i) in batch.iter().enumerate() {
                        s.accumulate(data.row(i), rows[pos][kk]);
                    }
                    s.scale(scale);
                    s
                })
                .collect();
            stats.into_iter().enumerate().collect()
        }
        Occupancy::Sparse(map) => {
            let entries: Vec<(usize, SufficientStats)> = map
                .par_iter()
                .map(|(&kk, contribs)| {
                    let mut s = SufficientStats::zeros(dim);
                    for &(pos, w) in contribs {
                        s.accumulate(data.row(batch[pos]), w);
                    }
                    s.scale(scale);
                    (kk, s)
                })
                .collect();
            entries.into_iter().collect()
        }
    }
}

/// Stochastic-approximation blend `s_k <- s_k + gamma (batch_k - s_k)`, for
/// the occupied components only. Untouched components keep their previous
/// statistics.
pub fn sa_update_stats(
    stats: &mut [SufficientStats],
    batch: &BTreeMap<usize, SufficientStats>,
    gamma: f64,
) -> Result<()> {
    for (&k, b) in batch {
        if b.s0 <= 0.0 {
            // no mass landed on this component; keep the previous state
            continue;
        }
        stats[k].blend(b, gamma)?;
    }
    Ok(())
}

/// Rewrites the parameters of the given components from their current
/// statistics: mean/covariance from the moments, unnormalized log-weight
/// `nu_k = ln s0_k`. Components whose statistics are degenerate keep their
/// previous parameters.
pub fn extract_components(
    theta: &mut MixtureParams,
    stats: &[SufficientStats],
    touched: &[usize],
) -> Result<()> {
    for &k in touched {
        match gaussian_params_from(&stats[k]) {
            Ok((p, share)) => {
                theta.components[k] = p.to_flat();
                theta.nu[k] = share.ln();
            }
            Err(Error::EmptyComponent) | Err(Error::DegenerateStats { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

/// Seeds stochastic-approximation state so that extraction reproduces the
/// initial parameters (up to the regularization floor), and re-expresses the
/// log-weights on the unnormalized `ln s0` scale used from then on.
pub fn init_sa_state(theta: &mut MixtureParams, n: usize) -> Result<Vec<SufficientStats>> {
    let dim = theta.dim();
    let weights = theta.weights();
    let mut out = Vec::with_capacity(theta.k());
    for k in 0..theta.k() {
        let p = crate::model::GaussianParams::from_flat(dim, &theta.components[k])?;
        let mass = n as f64 * weights[k];
        out.push(SufficientStats::self_consistent(&p, mass));
        theta.nu[k] = mass.ln();
    }
    Ok(out)
}

/// Sparse objective gradient: per-component blocks in the flat family
/// layout plus log-weight entries, restricted to the touched set.
#[derive(Clone, Debug)]
pub struct AssembledGradient {
    pub touched: Vec<usize>,
    pub eta: Vec<Option<DVector<f64>>>,
    pub nu: Vec<Option<f64>>,
}

impl AssembledGradient {
    pub fn is_finite(&self) -> bool {
        self.eta
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
            && self.nu.iter().flatten().all(|v| v.is_finite())
    }

    /// Squared l2 distance to another gradient over the full layout,
    /// treating absent blocks as zero.
    pub fn squared_distance(&self, other: &AssembledGradient) -> f64 {
        let k = self.eta.len();
        let mut acc = 0.0;
        for kk in 0..k {
            match (&self.eta[kk], &other.eta[kk]) {
                (Some(a), Some(b)) => acc += (a - b).norm_squared(),
                (Some(a), None) | (None, Some(a)) => acc += a.norm_squared(),
                (None, None) => {}
            }
            let da = self.nu[kk].unwrap_or(0.0);
            let db = other.nu[kk].unwrap_or(0.0);
            acc += (da - db) * (da - db);
        }
        acc
    }
}

/// Assembles `grad Q` of the tempered, scaled minibatch objective
///
/// `Q = scale * beta * sum_i sum_k occ_ik (log p_eta_k(x_i) + log pi_k)`
///
/// for the occupied components only (all K when the occupancy is dense).
pub fn assemble_gradient(
    theta: &MixtureParams,
    data: &Dataset,
    batch: &[usize],
    occ: &Occupancy,
    beta: f64,
    scale: f64,
) -> AssembledGradient {
    let k = theta.k();
    let coeff = scale * beta;
    let weights = theta.weights();
    let mass = occ.component_mass(k);
    let total_mass: f64 = mass.iter().sum();
    let touched = occ.touched(k);

    let blocks: Vec<(usize, DVector<f64>)> = match occ {
        Occupancy::Dense(rows) => touched
            .par_iter()
            .map(|&kk| {
                let eta = &theta.components[kk];
                let mut g = DVector::zeros(eta.len());
                for (pos, &i) in batch.iter().enumerate() {
                    let w = rows[pos][kk];
                    g.axpy(coeff * w, &theta.family.grad_log_density(eta, data.row(i)), 1.0);
                }
                (kk, g)
            })
            .collect(),
        Occupancy::Sparse(map) => map
            .par_iter()
            .map(|(&kk, contribs)| {
                let eta = &theta.components[kk];
                let mut g = DVector::zeros(eta.len());
                for &(pos, w) in contribs {
                    g.axpy(coeff * w, &theta.family.grad_log_density(eta, data.row(batch[pos])), 1.0);
                }
                (kk, g)
            })
            .collect(),
    };

    let mut eta = vec![None; k];
    let mut nu = vec![None; k];
    for (kk, g) in blocks {
        eta[kk] = Some(g);
    }
    for &kk in &touched {
        nu[kk] = Some(coeff * (mass[kk] - weights[kk] * total_mass));
    }
    AssembledGradient { touched, eta, nu }
}

/// Value of the same objective; the finite-difference oracle for
/// `assemble_gradient`.
pub fn objective_value(
    theta: &MixtureParams,
    data: &Dataset,
    batch: &[usize],
    occ: &Occupancy,
    beta: f64,
    scale: f64,
) -> f64 {
    let log_w = theta.log_weights();
    let coeff = scale * beta;
    let mut acc = 0.0;
    match occ {
        Occupancy::Dense(rows) => {
            for (pos, &i) in batch.iter().enumerate() {
                for kk in 0..theta.k() {
                    let w = rows[pos][kk];
                    if w != 0.0 {
                        acc += w
                            * (theta.family.log_density(&theta.components[kk], data.row(i))
                                + log_w[kk]);
                    }
                }
            }
        }
        Occupancy::Sparse(map) => {
            for (&kk, contribs) in map {
                for &(pos, w) in contribs {
                    acc += w
                        * (theta.family.log_density(&theta.components[kk], data.row(batch[pos]))
                            + log_w[kk]);
                }
            }
        }
    }
    coeff * acc
}

/// First-order optimizers for the gradient maximization path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Plain,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn adam_default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Per-parameter first and second moment estimates with per-block step
/// counts, so components absent from an iteration stay frozen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m_eta: Vec<DVector<f64>>,
    pub v_eta: Vec<DVector<f64>>,
    pub steps_eta: Vec<u64>,
    pub m_nu: DVector<f64>,
    pub v_nu: DVector<f64>,
    pub steps_nu: Vec<u64>,
}

impl AdamState {
    pub fn new(theta: &MixtureParams) -> Self {
        let k = theta.k();
        Self {
            m_eta: theta.components.iter().map(|c| DVector::zeros(c.len())).collect(),
            v_eta: theta.components.iter().map(|c| DVector::zeros(c.len())).collect(),
            steps_eta: vec![0; k],
            m_nu: DVector::zeros(k),
            v_nu: DVector::zeros(k),
            steps_nu: vec![0; k],
        }
    }
}

/// Ascent step on the touched blocks; everything else is untouched.
pub fn apply_gradient_step(
    theta: &mut MixtureParams,
    grad: &AssembledGradient,
    gamma: f64,
    optimizer: &OptimizerKind,
    adam: &mut Option<AdamState>,
) {
    match optimizer {
        OptimizerKind::Plain => {
            for &k in &grad.touched {
                if let Some(g) = &grad.eta[k] {
                    theta.components[k].axpy(gamma, g, 1.0);
                }
                if let Some(g) = grad.nu[k] {
                    theta.nu[k] += gamma * g;
                }
            }
        }
        OptimizerKind::Adam { beta1, beta2, epsilon } => {
            let state = adam.as_mut().expect("adam optimizer requires adam state");
            for &k in &grad.touched {
                if let Some(g) = &grad.eta[k] {
                    state.steps_eta[k] += 1;
                    let t = state.steps_eta[k] as i32;
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    let m = &mut state.m_eta[k];
                    let v = &mut state.v_eta[k];
                    for j in 0..g.len() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        theta.components[k][j] += gamma * mh / (vh.sqrt() + epsilon);
                    }
                }
                if let Some(g) = grad.nu[k] {
                    state.steps_nu[k] += 1;
                    let t = state.steps_nu[k] as i32;
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    state.m_nu[k] = beta1 * state.m_nu[k] + (1.0 - beta1) * g;
                    state.v_nu[k] = beta2 * state.v_nu[k] + (1.0 - beta2) * g * g;
                    let mh = state.m_nu[k] / bc1;
                    let vh = state.v_nu[k] / bc2;
                    theta.nu[k] += gamma * mh / (vh.sqrt() + epsilon);
                }
            }
        }
    }
}
