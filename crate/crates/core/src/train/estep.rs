//! Expectation/selection steps shared by the trainers: exact tempered
//! responsibilities, minibatch sampling, top-M and distance-truncated
//! component selection, and direct posterior sampling.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::math::sample_categorical;
use crate::model::{GaussianParams, MixtureParams, Prepared};
use crate::rng::{RunRng, StreamDomain};

/// Uniform sample of `b` distinct indices from `0..n`, returned sorted so
/// downstream reductions are order-stable.
pub fn sample_minibatch(rng: &RunRng, t: u64, n: usize, b: usize) -> Vec<usize> {
    let mut stream = rng.stream(StreamDomain::Minibatch, t, 0);
    let mut idx: Vec<usize> = rand::seq::index::sample(&mut stream, n, b).into_vec();
    idx.sort_unstable();
    idx
}

/// Tempered posterior rows `softmax(beta * log_joint)` for a set of rows,
/// evaluated in parallel (K family evaluations per row).
pub fn exact_rows(
    prep: &Prepared,
    data: &Dataset,
    batch: &[usize],
    beta: f64,
    evals: &mut u64,
) -> Vec<DVector<f64>> {
    let rows: Vec<DVector<f64>> = batch
        .par_iter()
        .map(|&i| {
            let mut local = 0u64;
            prep.tempered_row(data.row(i), beta, &mut local).0
        })
        .collect();
    *evals += (batch.len() * prep.k()) as u64;
    rows
}

/// Tempered posterior row for one datapoint (the exact E-step of one term).
pub fn exact_e_step(theta: &MixtureParams, x: &DVector<f64>, beta: f64) -> Result<DVector<f64>> {
    if beta <= 0.0 {
        return Err(Error::validation("inverse temperature must be positive"));
    }
    let prep = Prepared::new(theta)?;
    let mut evals = 0;
    Ok(prep.tempered_row(x, beta, &mut evals).0)
}

/// Indices (1-based, ascending) of the M largest responsibilities, ties
/// broken toward the lower index, together with the renormalized weights.
pub fn ssaem_select(row: &DVector<f64>, m: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let k = row.len();
    if m == 0 || m > k {
        return Err(Error::validation(format!("selection size {m} outside 1..={k}")));
    }
    let mut order: Vec<usize> = (0..k).collect();
    if m < k {
        // partial selection: the top M land in the first M slots
        order.select_nth_unstable_by(m - 1, |&a, &b| {
            row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b))
        });
        order.truncate(m);
    }
    order.sort_unstable();
    let total: f64 = order.iter().map(|&j| row[j]).sum();
    let weights: Vec<f64> = order.iter().map(|&j| row[j] / total).collect();
    Ok((order.iter().map(|&j| j + 1).collect(), weights))
}

/// Distance structure for truncated selection: component means and, per
/// component, the other components ordered by mean-to-mean distance
/// (K^2 distance operations, built once per iteration).
pub struct MeanDistanceIndex {
    means: Vec<DVector<f64>>,
    neighbors: Vec<Vec<usize>>,
}

impl MeanDistanceIndex {
    pub fn new(theta: &MixtureParams) -> Result<Self> {
        let dim = match theta.family {
            crate::model::Family::Gaussian { dim } => dim,
            _ => {
                return Err(Error::Unsupported(
                    "distance-truncated selection requires the Gaussian family".into(),
                ))
            }
        };
        let means: Vec<DVector<f64>> = theta
            .components
            .iter()
            .map(|eta| GaussianParams::from_flat(dim, eta).map(|p| p.mean))
            .collect::<Result<_>>()?;
        let k = means.len();
        let neighbors = (0..k)
            .map(|a| {
                let mut others: Vec<usize> = (0..k).filter(|&b| b != a).collect();
                others.sort_by(|&p, &q| {
                    let dp = (&means[p] - &means[a]).norm_squared();
                    let dq = (&means[q] - &means[a]).norm_squared();
                    dp.partial_cmp(&dq).unwrap().then(p.cmp(&q))
                });
                others
            })
            .collect();
        Ok(Self { means, neighbors })
    }

    /// Candidate components (0-based, ascending) for one datapoint: the
    /// `mbar` means nearest to `x` plus the `m` nearest neighbors of the
    /// single closest component.
    pub fn candidates(&self, x: &DVector<f64>, m: usize, mbar: usize) -> Vec<usize> {
        let k = self.means.len();
        let mut by_dist: Vec<usize> = (0..k).collect();
        by_dist.sort_by(|&p, &q| {
            let dp = (&self.means[p] - x).norm_squared();
            let dq = (&self.means[q] - x).norm_squared();
            dp.partial_cmp(&dq).unwrap().then(p.cmp(&q))
        });
        let mut set: Vec<usize> = by_dist.iter().take(mbar.min(k)).copied().collect();
        let closest = by_dist[0];
        set.extend(self.neighbors[closest].iter().take(m));
        set.sort_unstable();
        set.dedup();
        set
    }
}

/// Candidate set of the distance-truncated selection rule, 1-based and
/// ascending. Gaussian mixtures only.
pub fn tsaem_select(
    theta: &MixtureParams,
    x: &DVector<f64>,
    m: usize,
    mbar: usize,
) -> Result<Vec<usize>> {
    if m == 0 || mbar == 0 {
        return Err(Error::validation("selection sizes must be >= 1"));
    }
    let index = MeanDistanceIndex::new(theta)?;
    Ok(index.candidates(x, m, mbar).into_iter().map(|j| j + 1).collect())
}

/// M direct draws per datapoint from the exact tempered posterior, through
/// the same categorical sampler and per-datapoint streams the
/// Metropolis-Hastings sweep uses with the optimal proposal.
pub fn direct_posterior_samples(
    prep: &Prepared,
    data: &Dataset,
    batch: &[usize],
    m: usize,
    beta: f64,
    rng: &RunRng,
    t: u64,
    evals: &mut u64,
) -> Vec<Vec<usize>> {
    let out: Vec<Vec<usize>> = batch
        .par_iter()
        .map(|&i| {
            let mut local = rng.stream(StreamDomain::MhStep, t, i as u64);
            let mut discard = 0u64;
            let (row, _) = prep.tempered_row(data.row(i), beta, &mut discard);
            (0..m).map(|_| sample_categorical(&mut local, row.as_slice())).collect()
        })
        .collect();
    *evals += (batch.len() * prep.k()) as u64;
    out
}

/// Per-minibatch component occupancies: how much posterior mass (or sample
/// mass) each batch entry assigns to each component.
pub enum Occupancy {
    /// One full row per batch entry.
    Dense(Vec<DVector<f64>>),
    /// `component -> [(batch position, weight)]`, components ascending.
    Sparse(std::collections::BTreeMap<usize, Vec<(usize, f64)>>),
}

impl Occupancy {
    /// Builds sparse occupancy from M sampled assignments per batch entry,
    /// weighting each component by its visit fraction `count / M`.
    pub fn from_samples(samples: &[Vec<usize>], m: usize) -> Self {
        let mut map: std::collections::BTreeMap<usize, Vec<(usize, f64)>> =
            std::collections::BTreeMap::new();
        for (pos, zs) in samples.iter().enumerate() {
            let mut counts: std::collections::BTreeMap<usize, u32> = std::collections::BTreeMap::new();
            for &z in zs {
                *counts.entry(z).or_insert(0) += 1;
            }
            for (k, c) in counts {
                map.entry(k).or_default().push((pos, c as f64 / m as f64));
            }
        }
        Occupancy::Sparse(map)
    }

    /// Builds sparse occupancy from per-entry (1-based index, weight) lists.
    pub fn from_selections(selections: &[(Vec<usize>, Vec<f64>)]) -> Self {
        let mut map: std::collections::BTreeMap<usize, Vec<(usize, f64)>> =
            std::collections::BTreeMap::new();
        for (pos, (idx, w)) in selections.iter().enumerate() {
            for (&z1, &wi) in idx.iter().zip(w) {
                map.entry(z1 - 1).or_default().push((pos, wi));
            }
        }
        Occupancy::Sparse(map)
    }

    /// Components with positive mass, ascending.
    pub fn touched(&self, k: usize) -> Vec<usize> {
        match self {
            Occupancy::Dense(_) => (0..k).collect(),
            Occupancy::Sparse(map) => map.keys().copied().collect(),
        }
    }

    /// Total mass per component.
    pub fn component_mass(&self, k: usize) -> DVector<f64> {
        let mut mass = DVector::zeros(k);
        match self {
            Occupancy::Dense(rows) => {
                for row in rows {
                    mass += row;
                }
            }
            Occupancy::Sparse(map) => {
                for (&kk, entries) in map {
                    mass[kk] = entries.iter().map(|(_, w)| w).sum();
                }
            }
        }
        mass
    }
}
