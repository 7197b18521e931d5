//! Per-datapoint Metropolis-Hastings kernel over component assignments.
//!
//! Each datapoint carries one persistent chain state; a sweep advances the
//! chains of a minibatch by M accept/reject steps against the (optionally
//! tempered) joint `p(x_i, z)^beta` and returns every visited state. All
//! proposal distributions are independent of the incumbent state, so the
//! forward/backward proposal terms are simple categorical log-masses.

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::math::sample_categorical;
use crate::model::{MixtureParams, Prepared};
use crate::rng::{RunRng, StreamDomain};

/// Persistent per-datapoint assignments plus a refreshable cache of
/// `log p(x_i, z_i)` under the current parameter snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainState {
    z: Vec<usize>,
    cached_log_joint: Vec<f64>,
    cache_valid: Vec<bool>,
}

impl ChainState {
    /// Uniformly random initial assignments.
    pub fn init_random<R: Rng>(n: usize, k: usize, rng: &mut R) -> Self {
        let z = (0..n).map(|_| rng.random_range(0..k)).collect();
        Self { z, cached_log_joint: vec![0.0; n], cache_valid: vec![false; n] }
    }

    /// Restores a chain from 0-based assignments.
    pub fn from_assignments(z: Vec<usize>, k: usize) -> Result<Self> {
        if z.iter().any(|&zi| zi >= k) {
            return Err(Error::validation("chain assignment outside 1..=K"));
        }
        let n = z.len();
        Ok(Self { z, cached_log_joint: vec![0.0; n], cache_valid: vec![false; n] })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// Current assignments, 0-based. Serialized artifacts store them 1-based.
    pub fn assignments(&self) -> &[usize] {
        &self.z
    }

    /// Drops every cached log-joint; call whenever the parameters change.
    pub fn invalidate(&mut self) {
        self.cache_valid.fill(false);
    }

    /// Recomputes every cached log-joint under the given snapshot.
    pub fn refresh(&mut self, prep: &Prepared, data: &Dataset) {
        let mut evals = 0;
        for i in 0..self.z.len() {
            self.cached_log_joint[i] = prep.log_joint0(self.z[i], data.row(i), &mut evals);
            self.cache_valid[i] = true;
        }
    }

    pub fn cached_log_joint(&self, i: usize) -> Option<f64> {
        self.cache_valid[i].then(|| self.cached_log_joint[i])
    }
}

/// Proposal distribution kinds. `Tabular` keeps cumulative visit counts;
/// `TabularForgetting` discounts them with the step-size sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalKind {
    Uniform,
    Optimal,
    Tabular,
    TabularForgetting,
}

/// A proposal distribution, owning the N x K weight table for the tabular
/// kinds. Rows are floored before normalization so the chain stays
/// irreducible.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalModel {
    pub kind: ProposalKind,
    table: Option<Vec<DVector<f64>>>,
    floor: f64,
}

impl ProposalModel {
    pub fn new(kind: ProposalKind, n: usize, k: usize) -> Self {
        let table = match kind {
            ProposalKind::Tabular | ProposalKind::TabularForgetting => {
                Some(vec![DVector::from_element(k, 1.0 / k as f64); n])
            }
            _ => None,
        };
        Self { kind, table, floor: 1e-6 / k as f64 }
    }

    pub fn uniform() -> Self {
        Self { kind: ProposalKind::Uniform, table: None, floor: 0.0 }
    }

    pub fn optimal() -> Self {
        Self { kind: ProposalKind::Optimal, table: None, floor: 0.0 }
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn table(&self) -> Option<&[DVector<f64>]> {
        self.table.as_deref()
    }

    /// Rebuilds a tabular model from serialized rows.
    pub fn from_table(kind: ProposalKind, rows: Vec<DVector<f64>>, floor: f64) -> Result<Self> {
        match kind {
            ProposalKind::Tabular | ProposalKind::TabularForgetting => {
                if rows.iter().any(|r| r.iter().any(|&v| !(v >= 0.0) || !v.is_finite())) {
                    return Err(Error::validation("proposal table entries must be finite and nonnegative"));
                }
                Ok(Self { kind, table: Some(rows), floor })
            }
            _ => Err(Error::validation("only tabular proposal kinds carry a table")),
        }
    }

    /// Floored, normalized sampling weights of row `i` (tabular kinds only).
    pub fn row_probs(&self, i: usize) -> DVector<f64> {
        let row = &self.table.as_ref().expect("tabular proposal has a table")[i];
        let sum: f64 = row.iter().sum();
        let k = row.len() as f64;
        row.map(|v| (v / sum + self.floor) / (1.0 + k * self.floor))
    }

    /// The proposal distribution for datapoint `i` given the current
    /// snapshot. For the optimal kind this is the tempered posterior and
    /// costs K family evaluations.
    pub fn probabilities(
        &self,
        i: usize,
        theta: &MixtureParams,
        x: &DVector<f64>,
        beta: f64,
    ) -> Result<DVector<f64>> {
        let prep = Prepared::new(theta)?;
        let k = theta.k();
        Ok(match self.kind {
            ProposalKind::Uniform => DVector::from_element(k, 1.0 / k as f64),
            ProposalKind::Optimal => {
                let mut evals = 0;
                prep.tempered_row(x, beta, &mut evals).0
            }
            ProposalKind::Tabular | ProposalKind::TabularForgetting => self.row_probs(i),
        })
    }

    /// Draws a candidate state for datapoint `i`; returns the 1-based state
    /// and the forward/backward log-proposal masses.
    pub fn propose<R: Rng>(
        &self,
        i: usize,
        zbar: usize,
        theta: &MixtureParams,
        x: &DVector<f64>,
        beta: f64,
        rng: &mut R,
    ) -> Result<(usize, f64, f64)> {
        let k = theta.k();
        if zbar == 0 || zbar > k {
            return Err(Error::ComponentIndex { index: zbar, k });
        }
        let prep = Prepared::new(theta)?;
        let mut evals = 0;
        let (z0, lqf, lqb) = self.propose0(i, zbar - 1, &prep, x, beta, rng, &mut evals);
        Ok((z0 + 1, lqf, lqb))
    }

    /// 0-based proposal draw against a prepared snapshot.
    fn propose0<R: Rng>(
        &self,
        i: usize,
        zbar0: usize,
        prep: &Prepared,
        x: &DVector<f64>,
        beta: f64,
        rng: &mut R,
        evals: &mut u64,
    ) -> (usize, f64, f64) {
        let k = prep.k();
        match self.kind {
            ProposalKind::Uniform => {
                let z = rng.random_range(0..k);
                let lq = -(k as f64).ln();
                (z, lq, lq)
            }
            ProposalKind::Optimal => {
                let (row, _) = prep.tempered_row(x, beta, evals);
                let z = sample_categorical(rng, row.as_slice());
                (z, row[z].ln(), row[zbar0].ln())
            }
            ProposalKind::Tabular | ProposalKind::TabularForgetting => {
                let probs = self.row_probs(i);
                let z = sample_categorical(rng, probs.as_slice());
                (z, probs[z].ln(), probs[zbar0].ln())
            }
        }
    }

    /// Table-with-forgetting row update for 0-based `z_new`:
    /// `n <- (1 - e_z gamma) .* n + gamma e_z`.
    pub fn tf_update(&mut self, i: usize, z_new0: usize, gamma: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::validation(format!("forgetting factor {gamma} outside [0, 1]")));
        }
        let row = &mut self.table.as_mut().ok_or_else(|| {
            Error::validation("tf_update requires a tabular proposal")
        })?[i];
        row[z_new0] = (1.0 - gamma) * row[z_new0] + gamma;
        Ok(())
    }

    /// Folds one observed sample into the proposal state. Kind dispatch:
    /// cumulative count for `Tabular`, discounted update for
    /// `TabularForgetting`, no-op otherwise.
    pub fn record_sample(&mut self, i: usize, z0: usize, gamma: f64) -> Result<()> {
        match self.kind {
            ProposalKind::Uniform | ProposalKind::Optimal => Ok(()),
            ProposalKind::Tabular => {
                let row = &mut self.table.as_mut().expect("tabular proposal has a table")[i];
                row[z0] += 1.0;
                Ok(())
            }
            ProposalKind::TabularForgetting => self.tf_update(i, z0, gamma),
        }
    }
}

/// Acceptance probability
/// `min(1, exp(beta (log p(x,z) - log p(x,zbar)) + log q(zbar) - log q(z)))`
/// for 1-based states, evaluating the joints under `theta`.
pub fn acceptance_ratio(
    theta: &MixtureParams,
    x: &DVector<f64>,
    zbar: usize,
    z: usize,
    log_q_forward: f64,
    log_q_backward: f64,
    beta: f64,
) -> Result<f64> {
    if beta <= 0.0 {
        return Err(Error::validation("inverse temperature must be positive"));
    }
    let lj_new = crate::model::log_joint(theta, x, z)?;
    let lj_cur = crate::model::log_joint(theta, x, zbar)?;
    Ok(accept_prob(beta * (lj_new - lj_cur) + log_q_backward - log_q_forward))
}

fn accept_prob(log_ratio: f64) -> f64 {
    if log_ratio >= 0.0 {
        1.0
    } else {
        log_ratio.exp()
    }
}

/// Everything a sweep produced for one minibatch.
#[derive(Clone, Debug)]
pub struct SweepResult {
    /// Per batch entry, the M visited states (0-based), accepted or repeated.
    pub samples: Vec<Vec<usize>>,
    /// Acceptance ratios in batch-then-step order.
    pub alphas: Vec<f64>,
    pub accept_count: u64,
    /// Fresh component log-density evaluations spent by the sweep.
    pub eval_count: u64,
}

struct PerPoint {
    final_z: usize,
    final_lj: f64,
    samples: Vec<usize>,
    alphas: Vec<f64>,
    evals: u64,
    accepts: u64,
}

/// Advances the chains of `batch` by `m` Metropolis-Hastings steps each.
///
/// Datapoints are processed in parallel; each one draws from its own
/// counter-keyed stream, so the result is independent of scheduling. The
/// optimal proposal short-circuits the accept test (its acceptance ratio is
/// identically one) and draws through the same categorical sampler used for
/// direct posterior sampling, at K evaluations per datapoint. The other
/// kinds spend one evaluation per proposed state plus one refresh of the
/// incumbent when the cache is cold.
pub fn mh_sweep(
    chain: &mut ChainState,
    prep: &Prepared,
    data: &Dataset,
    batch: &[usize],
    m: usize,
    proposal: &ProposalModel,
    beta: f64,
    rng: &RunRng,
    t: u64,
) -> Result<SweepResult> {
    if m == 0 {
        return Err(Error::validation("samples per datapoint must be >= 1"));
    }
    if batch.is_empty() {
        return Err(Error::validation("minibatch must be nonempty"));
    }
    if beta <= 0.0 {
        return Err(Error::validation("inverse temperature must be positive"));
    }
    {
        let mut seen = std::collections::BTreeSet::new();
        for &i in batch {
            if i >= chain.len() {
                return Err(Error::validation(format!("minibatch index {i} out of range")));
            }
            if !seen.insert(i) {
                return Err(Error::validation("minibatch indices must be distinct"));
            }
        }
    }

    let per_point: Vec<PerPoint> = batch
        .par_iter()
        .map(|&i| {
            let mut local = rng.stream(StreamDomain::MhStep, t, i as u64);
            let x = data.row(i);
            let mut evals = 0u64;
            match proposal.kind {
                ProposalKind::Optimal => {
                    let (row, lj) = prep.tempered_row(x, beta, &mut evals);
                    let mut samples = Vec::with_capacity(m);
                    for _ in 0..m {
                        samples.push(sample_categorical(&mut local, row.as_slice()));
                    }
                    let final_z = *samples.last().expect("m >= 1");
                    PerPoint {
                        final_z,
                        final_lj: lj[final_z],
                        alphas: vec![1.0; m],
                        accepts: m as u64,
                        samples,
                        evals,
                    }
                }
                _ => {
                    let mut zbar = chain.z[i];
                    let mut lj_bar = match chain.cached_log_joint(i) {
                        Some(v) => v,
                        None => prep.log_joint0(zbar, x, &mut evals),
                    };
                    let mut samples = Vec::with_capacity(m);
                    let mut alphas = Vec::with_capacity(m);
                    let mut accepts = 0u64;
                    for _ in 0..m {
                        let (z_prop, lqf, lqb) =
                            proposal.propose0(i, zbar, prep, x, beta, &mut local, &mut evals);
                        let lj_prop = prep.log_joint0(z_prop, x, &mut evals);
                        let alpha = accept_prob(beta * (lj_prop - lj_bar) + lqb - lqf);
                        let u: f64 = local.random();
                        if u < alpha {
                            zbar = z_prop;
                            lj_bar = lj_prop;
                            accepts += 1;
                        }
                        samples.push(zbar);
                        alphas.push(alpha);
                    }
                    PerPoint { final_z: zbar, final_lj: lj_bar, samples, alphas, evals, accepts }
                }
            }
        })
        .collect();

    let mut result = SweepResult {
        samples: Vec::with_capacity(batch.len()),
        alphas: Vec::with_capacity(batch.len() * m),
        accept_count: 0,
        eval_count: 0,
    };
    for (&i, pp) in batch.iter().zip(per_point) {
        chain.z[i] = pp.final_z;
        chain.cached_log_joint[i] = pp.final_lj;
        chain.cache_valid[i] = true;
        result.alphas.extend_from_slice(&pp.alphas);
        result.accept_count += pp.accepts;
        result.eval_count += pp.evals;
        result.samples.push(pp.samples);
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Family;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::SeedableRng;

    fn two_identical_components() -> MixtureParams {
        let eta = crate::model::GaussianParams::new(DVector::zeros(2), DMatrix::identity(2, 2))
            .unwrap()
            .to_flat();
        MixtureParams::new(
            Family::Gaussian { dim: 2 },
            DVector::from_element(2, 0.3),
            vec![eta.clone(), eta],
        )
        .unwrap()
    }

    #[test]
    fn uniform_proposal_log_masses() {
        let theta = crate::model::MixtureParams::new(
            Family::Gaussian { dim: 1 },
            DVector::zeros(10),
            vec![
                crate::model::GaussianParams::new(DVector::zeros(1), DMatrix::identity(1, 1))
                    .unwrap()
                    .to_flat();
                10
            ],
        )
        .unwrap();
        let p = ProposalModel::uniform();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let (z, lqf, lqb) = p
            .propose(0, 3, &theta, &DVector::zeros(1), 1.0, &mut rng)
            .unwrap();
        assert!((1..=10).contains(&z));
        assert_relative_eq!(lqf, -(10f64).ln(), max_relative = 1e-15);
        assert_eq!(lqf, lqb);
    }

    #[test]
    fn optimal_proposal_on_symmetric_mixture() {
        let theta = two_identical_components();
        let p = ProposalModel::optimal();
        let probs = p
            .probabilities(0, &theta, &DVector::from_vec(vec![0.4, -1.0]), 1.0)
            .unwrap();
        assert_relative_eq!(probs[0], 0.5, max_relative = 1e-12);
        assert_relative_eq!(probs[1], 0.5, max_relative = 1e-12);
    }

    #[test]
    fn tabular_row_without_floor_matches_counts() {
        let mut p = ProposalModel::new(ProposalKind::TabularForgetting, 1, 2);
        p.floor = 0.0;
        p.table.as_mut().unwrap()[0] = DVector::from_vec(vec![3.0, 1.0]);
        let probs = p.row_probs(0);
        assert_relative_eq!(probs[0], 0.75, max_relative = 1e-15);
        assert_relative_eq!(probs[1], 0.25, max_relative = 1e-15);

        // empirical frequency over 1e5 draws within +-0.01
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mut c0 = 0usize;
        for _ in 0..n {
            if sample_categorical(&mut rng, probs.as_slice()) == 0 {
                c0 += 1;
            }
        }
        let f0 = c0 as f64 / n as f64;
        assert!((f0 - 0.75).abs() < 0.01, "f0 = {f0}");
    }

    #[test]
    fn tf_update_examples() {
        let mut p = ProposalModel::new(ProposalKind::TabularForgetting, 2, 2);
        // gamma = 1: the sampled entry forgets its history entirely and
        // becomes 1; the recursion leaves the other entries untouched
        p.table.as_mut().unwrap()[0] = DVector::from_vec(vec![0.4, 0.6]);
        p.tf_update(0, 1, 1.0).unwrap();
        assert_eq!(p.table().unwrap()[0], DVector::from_vec(vec![0.4, 1.0]));
        // gamma = 0: unchanged
        let before = p.table().unwrap()[1].clone();
        p.tf_update(1, 0, 0.0).unwrap();
        assert_eq!(p.table().unwrap()[1], before);
        // asymmetric case from the recursion
        p.table.as_mut().unwrap()[0] = DVector::from_vec(vec![2.0, 1.0]);
        p.tf_update(0, 1, 0.5).unwrap();
        assert_eq!(p.table().unwrap()[0], DVector::from_vec(vec![2.0, 1.0]));
        // symmetric case: n = (1,1), either update leaves (1,1) at gamma = 0.1
        p.table.as_mut().unwrap()[0] = DVector::from_vec(vec![1.0, 1.0]);
        p.tf_update(0, 0, 0.1).unwrap();
        assert_relative_eq!(p.table().unwrap()[0][0], 1.0, max_relative = 1e-15);
        assert_relative_eq!(p.table().unwrap()[0][1], 1.0, max_relative = 1e-15);
        assert!(p.tf_update(0, 0, 1.5).is_err());
    }

    #[test]
    fn tf_rows_stay_positive_and_bounded() {
        let mut p = ProposalModel::new(ProposalKind::TabularForgetting, 1, 3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut prev_sum: f64 = p.table().unwrap()[0].iter().sum();
        for _ in 0..1000 {
            let z = rng.random_range(0..3);
            let gamma: f64 = rng.random();
            p.tf_update(0, z, gamma).unwrap();
            let row = &p.table().unwrap()[0];
            let sum: f64 = row.iter().sum();
            assert!(sum > 0.0 && sum <= prev_sum + gamma + 1e-12);
            let probs = p.row_probs(0);
            assert!(probs.iter().all(|&q| q > 0.0));
            assert_relative_eq!(probs.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            prev_sum = sum;
        }
    }

    #[test]
    fn acceptance_is_one_for_identical_states_and_optimal_pairs() {
        let theta = two_identical_components();
        let x = DVector::from_vec(vec![0.3, 0.8]);
        // z == zbar
        let a = acceptance_ratio(&theta, &x, 2, 2, -0.7, -0.7, 0.8).unwrap();
        assert_eq!(a, 1.0);
        // optimal proposal: plug in the tempered posterior masses
        let p = ProposalModel::optimal();
        let probs = p.probabilities(0, &theta, &x, 1.0).unwrap();
        for zbar in 1..=2usize {
            for z in 1..=2usize {
                let a = acceptance_ratio(&theta, &x, zbar, z, probs[z - 1].ln(), probs[zbar - 1].ln(), 1.0)
                    .unwrap();
                assert_relative_eq!(a, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn single_component_sweep_is_identity() {
        let eta = crate::model::GaussianParams::new(DVector::zeros(1), DMatrix::identity(1, 1))
            .unwrap()
            .to_flat();
        let theta =
            MixtureParams::new(Family::Gaussian { dim: 1 }, DVector::zeros(1), vec![eta]).unwrap();
        let prep = Prepared::new(&theta).unwrap();
        let data = Dataset::new(vec![DVector::from_element(1, 0.2)]).unwrap();
        let mut chain = ChainState::from_assignments(vec![0], 1).unwrap();
        let rng = RunRng::new(9);
        let res = mh_sweep(&mut chain, &prep, &data, &[0], 5, &ProposalModel::uniform(), 1.0, &rng, 1)
            .unwrap();
        assert_eq!(chain.assignments(), &[0]);
        assert!(res.samples[0].iter().all(|&z| z == 0));
        assert_eq!(res.accept_count, 5);
        assert!(res.alphas.iter().all(|&a| a == 1.0));
    }

    #[test]
    fn eval_count_cold_then_warm() {
        let theta = two_identical_components();
        let prep = Prepared::new(&theta).unwrap();
        let data = Dataset::new(vec![
            DVector::from_vec(vec![0.0, 0.0]),
            DVector::from_vec(vec![1.0, -1.0]),
            DVector::from_vec(vec![0.5, 2.0]),
        ])
        .unwrap();
        let rng = RunRng::new(4);
        let mut chain = ChainState::init_random(3, 2, &mut rng.stream(StreamDomain::Init, 0, 0));
        let batch = [0usize, 1, 2];
        let m = 3;
        // cold cache: one incumbent refresh per datapoint plus one per step
        let res = mh_sweep(&mut chain, &prep, &data, &batch, m, &ProposalModel::uniform(), 1.0, &rng, 1)
            .unwrap();
        assert_eq!(res.eval_count, (batch.len() * (m + 1)) as u64);
        // warm cache: exactly B * M
        let res2 = mh_sweep(&mut chain, &prep, &data, &batch, m, &ProposalModel::uniform(), 1.0, &rng, 2)
            .unwrap();
        assert_eq!(res2.eval_count, (batch.len() * m) as u64);
        // optimal proposal costs exactly B * K
        chain.invalidate();
        let res3 = mh_sweep(&mut chain, &prep, &data, &batch, m, &ProposalModel::optimal(), 1.0, &rng, 3)
            .unwrap();
        assert_eq!(res3.eval_count, (batch.len() * theta.k()) as u64);
    }

    #[test]
    fn chain_entries_stay_in_range_under_fuzz() {
        let theta = two_identical_components();
        let prep = Prepared::new(&theta).unwrap();
        let data = Dataset::new(vec![DVector::from_vec(vec![0.1, 0.2]); 4]).unwrap();
        let rng = RunRng::new(11);
        let mut chain = ChainState::init_random(4, 2, &mut rng.stream(StreamDomain::Init, 0, 0));
        let kinds = [
            ProposalModel::uniform(),
            ProposalModel::optimal(),
            ProposalModel::new(ProposalKind::Tabular, 4, 2),
            ProposalModel::new(ProposalKind::TabularForgetting, 4, 2),
        ];
        for t in 0..2_000u64 {
            let p = &kinds[(t % 4) as usize];
            mh_sweep(&mut chain, &prep, &data, &[0, 1, 2, 3], 2, p, 1.0, &rng, t).unwrap();
            assert!(chain.assignments().iter().all(|&z| z < 2));
        }
    }

    #[test]
    fn sweep_rejects_bad_batches() {
        let theta = two_identical_components();
        let prep = Prepared::new(&theta).unwrap();
        let data = Dataset::new(vec![DVector::from_vec(vec![0.1, 0.2]); 2]).unwrap();
        let rng = RunRng::new(1);
        let mut chain = ChainState::init_random(2, 2, &mut rng.stream(StreamDomain::Init, 0, 0));
        let p = ProposalModel::uniform();
        assert!(mh_sweep(&mut chain, &prep, &data, &[], 1, &p, 1.0, &rng, 1).is_err());
        assert!(mh_sweep(&mut chain, &prep, &data, &[0, 0], 1, &p, 1.0, &rng, 1).is_err());
        assert!(mh_sweep(&mut chain, &prep, &data, &[0], 0, &p, 1.0, &rng, 1).is_err());
        assert!(mh_sweep(&mut chain, &prep, &data, &[5], 1, &p, 1.0, &rng, 1).is_err());
    }
}
