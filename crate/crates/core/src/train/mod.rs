//! The six training algorithms over one iteration loop.
//!
//! Every iteration takes a read-only parameter snapshot, runs the per-
//! datapoint expectation/selection/sampling work (in parallel where the
//! algorithm allows), reduces into either blended sufficient statistics or a
//! sparse gradient, and produces the next snapshot. Metric evaluation is
//! timed separately from training so recorded wall time reflects training
//! cost only.

pub mod estep;
pub mod mstep;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diag::{average_acceptance, gradient_bias, IterationRecord};
use crate::error::{Error, Result};
use crate::mh::{mh_sweep, ChainState, ProposalKind, ProposalModel};
use crate::model::{dataset_loglik, ComponentFamily, Family, MixtureParams, Prepared, SufficientStats};
use crate::rng::{derive_seed, RunRng, StreamDomain};
use crate::schedule::{AnnealSchedule, StepSchedule};

pub use estep::{
    exact_e_step, sample_minibatch, ssaem_select, tsaem_select, MeanDistanceIndex, Occupancy,
};
pub use mstep::{
    apply_gradient_step, assemble_gradient, batch_stats, extract_components, init_sa_state,
    objective_value, sa_update_stats, AdamState, AssembledGradient, OptimizerKind,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Em,
    Saem,
    Mcsaem,
    Ssaem,
    Tsaem,
    Mhsaem,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Em => "em",
            Algorithm::Saem => "saem",
            Algorithm::Mcsaem => "mcsaem",
            Algorithm::Ssaem => "ssaem",
            Algorithm::Tsaem => "tsaem",
            Algorithm::Mhsaem => "mhsaem",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Ok(match s {
            "em" => Algorithm::Em,
            "saem" => Algorithm::Saem,
            "mcsaem" => Algorithm::Mcsaem,
            "ssaem" => Algorithm::Ssaem,
            "tsaem" => Algorithm::Tsaem,
            "mhsaem" => Algorithm::Mhsaem,
            other => return Err(Error::validation(format!("unknown algorithm '{other}'"))),
        })
    }

    /// Whether the algorithm draws component samples (and so reports an
    /// acceptance ratio and supports the bias diagnostic).
    pub fn is_sampling(&self) -> bool {
        matches!(self, Algorithm::Mcsaem | Algorithm::Mhsaem)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MStepKind {
    Suffstats,
    Gradient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub algorithm: Algorithm,
    /// Minibatch size B. The full-batch EM algorithm ignores it.
    pub batch_size: usize,
    /// Samples (or selection points) per datapoint, M.
    #[serde(default = "default_one")]
    pub samples_per_point: usize,
    pub iterations: u64,
    /// Proposal kind; required for (and only for) MHSAEM.
    #[serde(default)]
    pub proposal: Option<ProposalKind>,
    /// Nearest-mean count of the truncated selection rule; defaults to
    /// `samples_per_point`.
    #[serde(default)]
    pub tsaem_neighbors: Option<usize>,
    #[serde(default = "default_m_step")]
    pub m_step: MStepKind,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    pub step_schedule: StepSchedule,
    #[serde(default = "default_anneal")]
    pub anneal: AnnealSchedule,
    pub seed: u64,
    /// Record the full-data log-likelihood every this many iterations.
    /// Default: every iteration for N <= 20000, else every 10th.
    #[serde(default)]
    pub loglik_every: Option<u64>,
    /// Record the gradient-estimator bias every this many iterations
    /// (sampling algorithms only). Off by default.
    #[serde(default)]
    pub bias_every: Option<u64>,
    /// Scale minibatch objectives and statistics by N/B so stochastic
    /// approximation targets full-data quantities.
    #[serde(default = "default_true")]
    pub scale_by_dataset: bool,
}

fn default_one() -> usize {
    1
}
fn default_m_step() -> MStepKind {
    MStepKind::Suffstats
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Plain
}
fn default_anneal() -> AnnealSchedule {
    AnnealSchedule::None
}
fn default_true() -> bool {
    true
}

impl TrainerConfig {
    pub fn validate(&self, n: usize, k: usize, family: &Family) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > n {
            return Err(Error::validation(format!(
                "batch size {} outside 1..={n}",
                self.batch_size
            )));
        }
        if self.samples_per_point == 0 || self.samples_per_point > k {
            return Err(Error::validation(format!(
                "samples per datapoint {} outside 1..={k}",
                self.samples_per_point
            )));
        }
        if self.iterations == 0 {
            return Err(Error::validation("iteration count must be >= 1"));
        }
        self.step_schedule.validate()?;
        self.anneal.validate(self.iterations)?;
        match (self.algorithm, self.proposal) {
            (Algorithm::Mhsaem, None) => {
                return Err(Error::validation("mhsaem requires a proposal kind"))
            }
            (Algorithm::Mhsaem, Some(_)) => {}
            (_, Some(_)) => {
                return Err(Error::validation("only mhsaem takes a proposal kind"))
            }
            _ => {}
        }
        if self.m_step == MStepKind::Gradient && self.algorithm != Algorithm::Mhsaem {
            return Err(Error::Unsupported(format!(
                "the gradient maximization path is only available for mhsaem, not {}",
                self.algorithm.name()
            )));
        }
        if self.m_step == MStepKind::Suffstats && !family.is_gaussian() {
            return Err(Error::Unsupported(format!(
                "{} with closed-form statistics requires the Gaussian family; \
                 the {} family needs mhsaem with the gradient path",
                self.algorithm.name(),
                family.family_id()
            )));
        }
        if let Some(mbar) = self.tsaem_neighbors {
            if self.algorithm != Algorithm::Tsaem {
                return Err(Error::validation("tsaem_neighbors applies to tsaem only"));
            }
            if mbar == 0 || mbar > k {
                return Err(Error::validation(format!("tsaem_neighbors {mbar} outside 1..={k}")));
            }
        }
        if self.bias_every == Some(0) || self.loglik_every == Some(0) {
            return Err(Error::validation("recording intervals must be >= 1"));
        }
        if self.bias_every.is_some() && !self.algorithm.is_sampling() {
            return Err(Error::validation(
                "the bias diagnostic requires a sampling algorithm (mcsaem or mhsaem)",
            ));
        }
        Ok(())
    }

    fn loglik_interval(&self, n: usize) -> u64 {
        self.loglik_every.unwrap_or(if n <= 20_000 { 1 } else { 10 })
    }
}

/// Mutable training state; everything a checkpoint must capture to resume a
/// run bit-exactly (random streams are re-derived from the seed and the
/// iteration counter).
#[derive(Clone, Debug)]
pub struct RunState {
    pub theta: MixtureParams,
    pub chain: ChainState,
    pub proposal: Option<ProposalModel>,
    pub sa_stats: Option<Vec<SufficientStats>>,
    pub adam: Option<AdamState>,
    pub t_done: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RunOutcome {
    Completed,
    Aborted { t: u64, reason: String },
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub records: Vec<IterationRecord>,
    pub outcome: RunOutcome,
}

/// Default initialization: means uniform in the unit hypercube, identity
/// scales, weights uniform on (0,1) then normalized.
pub fn default_init(family: &Family, k: usize, seed: u64) -> Result<MixtureParams> {
    use rand::Rng;
    if k == 0 {
        return Err(Error::validation("K must be >= 1"));
    }
    let rng = RunRng::new(seed);
    let mut stream = rng.stream(StreamDomain::Init, 1, 0);
    let dim = family.dim();
    let components = (0..k)
        .map(|_| {
            let mut eta = nalgebra::DVector::zeros(family.param_len());
            for d in 0..dim {
                eta[d] = stream.random::<f64>();
            }
            // remaining entries stay zero: identity covariance factor for the
            // Gaussian layout, identity transform for the flow layout
            eta
        })
        .collect();
    let raw: Vec<f64> = (0..k).map(|_| stream.random::<f64>().max(1e-12)).collect();
    let total: f64 = raw.iter().sum();
    let nu = nalgebra::DVector::from_iterator(k, raw.iter().map(|w| (w / total).ln()));
    MixtureParams::new(*family, nu, components)
}

fn fresh_state(
    data: &Dataset,
    config: &TrainerConfig,
    mut theta: MixtureParams,
    rng: &RunRng,
) -> Result<RunState> {
    let n = data.len();
    let k = theta.k();
    let sa_stats = if config.m_step == MStepKind::Suffstats {
        Some(init_sa_state(&mut theta, n)?)
    } else {
        None
    };
    let chain = ChainState::init_random(n, k, &mut rng.stream(StreamDomain::Init, 0, 0));
    let proposal = if config.algorithm == Algorithm::Mhsaem {
        Some(ProposalModel::new(config.proposal.expect("validated"), n, k))
    } else {
        None
    };
    let adam = if config.m_step == MStepKind::Gradient
        && matches!(config.optimizer, OptimizerKind::Adam { .. })
    {
        Some(AdamState::new(&theta))
    } else {
        None
    };
    Ok(RunState { theta, chain, proposal, sa_stats, adam, t_done: 0 })
}

/// Sparse gradient maximization step: assembles `grad Q` from the sampled
/// assignments (0-based) and advances the touched blocks. Blocks of
/// components absent from the samples are bit-identical afterwards.
#[allow(clippy::too_many_arguments)]
pub fn gradient_m_step(
    theta: &MixtureParams,
    data: &Dataset,
    batch: &[usize],
    samples: &[Vec<usize>],
    m: usize,
    gamma: f64,
    beta: f64,
    scale: f64,
    optimizer: &OptimizerKind,
    adam: &mut Option<AdamState>,
) -> Result<MixtureParams> {
    let k = theta.k();
    if samples.len() != batch.len() {
        return Err(Error::validation("one sample set per minibatch entry required"));
    }
    if samples.iter().flatten().any(|&z| z >= k) {
        return Err(Error::validation("sampled assignment outside 1..=K"));
    }
    let occ = Occupancy::from_samples(samples, m);
    let grad = assemble_gradient(theta, data, batch, &occ, beta, scale);
    if !grad.is_finite() {
        return Err(Error::Numerical { t: 0, reason: "non-finite gradient".into() });
    }
    let mut next = theta.clone();
    apply_gradient_step(&mut next, &grad, gamma, optimizer, adam);
    Ok(next)
}

/// Runs `config.iterations` training iterations (continuing after
/// `resume.t_done` when a resume state is given) and returns the metric
/// records plus the final state.
///
/// Non-finite parameters or gradients abort the run with a diagnostic
/// record at the offending iteration rather than an error.
pub fn run(
    data: &Dataset,
    config: &TrainerConfig,
    init: MixtureParams,
    resume: Option<RunState>,
    mut on_iter: impl FnMut(&IterationRecord),
) -> Result<(RunResult, RunState)> {
    let n = data.len();
    init.validate()?;
    if init.dim() != data.dim() {
        return Err(Error::validation(format!(
            "model dimension {} does not match data dimension {}",
            init.dim(),
            data.dim()
        )));
    }
    let k = init.k();
    config.validate(n, k, &init.family)?;

    let rng = RunRng::new(config.seed);
    // independent root so diagnostic probes never perturb training streams
    let probe_rng = RunRng::new(derive_seed(&[config.seed, StreamDomain::BiasProbe as u64]));

    let mut state = match resume {
        Some(s) => {
            if s.theta.k() != k || s.chain.len() != n {
                return Err(Error::validation("resume state does not match data/model shape"));
            }
            if s.t_done > config.iterations {
                return Err(Error::validation("resume state is past the configured iteration count"));
            }
            s
        }
        None => fresh_state(data, config, init, &rng)?,
    };

    let m = config.samples_per_point;
    let mbar = config.tsaem_neighbors.unwrap_or(m);
    let scale = |b: usize| if config.scale_by_dataset { n as f64 / b as f64 } else { 1.0 };
    let loglik_every = config.loglik_interval(n);
    let diag_batch: Option<Vec<usize>> = config.bias_every.map(|_| {
        let b = config.batch_size.min(n);
        let mut stream = rng.stream(StreamDomain::DiagBatch, 0, 0);
        let mut idx: Vec<usize> = rand::seq::index::sample(&mut stream, n, b).into_vec();
        idx.sort_unstable();
        idx
    });

    let mut records: Vec<IterationRecord> = Vec::new();
    let mut outcome = RunOutcome::Completed;
    let mut train_secs = 0.0f64;

    for t in (state.t_done + 1)..=config.iterations {
        let gamma_sched = config.step_schedule.eval(t)?;
        // classic EM performs the full maximization; there is no damping
        let gamma = if config.algorithm == Algorithm::Em { 1.0 } else { gamma_sched };
        let beta = config.anneal.eval(t, config.iterations)?;

        let timer = Instant::now();
        let mut evals = 0u64;
        let mut alphas: Option<Vec<f64>> = None;
        let mut grad_finite = true;

        {
            let prep = Prepared::new(&state.theta)?;
            match config.algorithm {
                Algorithm::Em | Algorithm::Saem => {
                    let (batch, sc) = if config.algorithm == Algorithm::Em {
                        ((0..n).collect::<Vec<_>>(), 1.0)
                    } else {
                        let b = estep::sample_minibatch(&rng, t, n, config.batch_size);
                        let sc = scale(b.len());
                        (b, sc)
                    };
                    let rows = estep::exact_rows(&prep, data, &batch, beta, &mut evals);
                    let occ = Occupancy::Dense(rows);
                    let bs = batch_stats(data, &batch, &occ, sc);
                    let stats = state.sa_stats.as_mut().expect("suffstats state");
                    sa_update_stats(stats, &bs, gamma)?;
                    extract_components(&mut state.theta, stats, &occ.touched(k))?;
                }
                Algorithm::Mcsaem => {
                    let batch = estep::sample_minibatch(&rng, t, n, config.batch_size);
                    let samples = estep::direct_posterior_samples(
                        &prep, data, &batch, m, beta, &rng, t, &mut evals,
                    );
                    // direct draws from the target accept with probability one
                    alphas = Some(vec![1.0; batch.len() * m]);
                    let occ = Occupancy::from_samples(&samples, m);
                    let bs = batch_stats(data, &batch, &occ, scale(batch.len()));
                    let stats = state.sa_stats.as_mut().expect("suffstats state");
                    sa_update_stats(stats, &bs, gamma)?;
                    extract_components(&mut state.theta, stats, &occ.touched(k))?;
                }
                Algorithm::Ssaem => {
                    let batch = estep::sample_minibatch(&rng, t, n, config.batch_size);
                    let rows = estep::exact_rows(&prep, data, &batch, beta, &mut evals);
                    let selections: Vec<(Vec<usize>, Vec<f64>)> = rows
                        .iter()
                        .map(|row| estep::ssaem_select(row, m))
                        .collect::<Result<_>>()?;
                    let occ = Occupancy::from_selections(&selections);
                    let bs = batch_stats(data, &batch, &occ, scale(batch.len()));
                    let stats = state.sa_stats.as_mut().expect("suffstats state");
                    sa_update_stats(stats, &bs, gamma)?;
                    extract_components(&mut state.theta, stats, &occ.touched(k))?;
                }
                Algorithm::Tsaem => {
                    let batch = estep::sample_minibatch(&rng, t, n, config.batch_size);
                    let index = estep::MeanDistanceIndex::new(&state.theta)?;
                    let selections: Vec<(Vec<usize>, Vec<f64>)> = batch
                        .iter()
                        .map(|&i| {
                            let x = data.row(i);
                            let cand = index.candidates(x, m, mbar);
                            let lj: Vec<f64> = cand
                                .iter()
                                .map(|&kk| prep.log_joint0(kk, x, &mut evals) * beta)
                                .collect();
                            let lse = crate::math::log_sum_exp(&lj);
                            let weights: Vec<f64> = lj.iter().map(|v| (v - lse).exp()).collect();
                            (cand.iter().map(|&kk| kk + 1).collect(), weights)
                        })
                        .collect();
                    let occ = Occupancy::from_selections(&selections);
                    let bs = batch_stats(data, &batch, &occ, scale(batch.len()));
                    let stats = state.sa_stats.as_mut().expect("suffstats state");
                    sa_update_stats(stats, &bs, gamma)?;
                    extract_components(&mut state.theta, stats, &occ.touched(k))?;
                }
                Algorithm::Mhsaem => {
                    let batch = estep::sample_minibatch(&rng, t, n, config.batch_size);
                    let proposal = state.proposal.as_ref().expect("mhsaem proposal");
                    let sweep =
                        mh_sweep(&mut state.chain, &prep, data, &batch, m, proposal, beta, &rng, t)?;
                    evals += sweep.eval_count;
                    alphas = Some(sweep.alphas.clone());
                    let proposal = state.proposal.as_mut().expect("mhsaem proposal");
                    for (pos, &i) in batch.iter().enumerate() {
                        for &z in &sweep.samples[pos] {
                            proposal.record_sample(i, z, gamma)?;
                        }
                    }
                    let occ = Occupancy::from_samples(&sweep.samples, m);
                    match config.m_step {
                        MStepKind::Suffstats => {
                            let bs = batch_stats(data, &batch, &occ, scale(batch.len()));
                            let stats = state.sa_stats.as_mut().expect("suffstats state");
                            sa_update_stats(stats, &bs, gamma)?;
                            extract_components(&mut state.theta, stats, &occ.touched(k))?;
                        }
                        MStepKind::Gradient => {
                            let grad = assemble_gradient(
                                &state.theta,
                                data,
                                &batch,
                                &occ,
                                beta,
                                scale(batch.len()),
                            );
                            if grad.is_finite() {
                                apply_gradient_step(
                                    &mut state.theta,
                                    &grad,
                                    gamma,
                                    &config.optimizer,
                                    &mut state.adam,
                                );
                            } else {
                                grad_finite = false;
                            }
                        }
                    }
                }
            }
        }
        // the snapshot changed; cached log-joints are stale
        state.chain.invalidate();
        train_secs += timer.elapsed().as_secs_f64();
        state.t_done = t;

        let numerical_failure = if !grad_finite {
            Some("non-finite gradient".to_string())
        } else if !state.theta.is_finite() {
            Some("non-finite parameters".to_string())
        } else {
            None
        };

        // metric evaluation: excluded from training time and eval_count
        let aar = match &alphas {
            Some(a) => Some(average_acceptance(a)?),
            None => None,
        };
        let loglik = if numerical_failure.is_none()
            && (t % loglik_every == 0 || t == config.iterations)
        {
            Some(dataset_loglik(&state.theta, data)?)
        } else {
            None
        };
        let bias = match (&diag_batch, config.bias_every) {
            (Some(probe), Some(every)) if numerical_failure.is_none() && t % every == 0 => {
                let prep = Prepared::new(&state.theta)?;
                let samples = match config.algorithm {
                    Algorithm::Mhsaem => {
                        // side-effect free: the probe advances a copy of the
                        // chain rows and discards it
                        let mut probe_chain = state.chain.clone();
                        let proposal = state.proposal.as_ref().expect("mhsaem proposal");
                        mh_sweep(
                            &mut probe_chain, &prep, data, probe, m, proposal, beta, &probe_rng, t,
                        )?
                        .samples
                    }
                    Algorithm::Mcsaem => {
                        let mut discard = 0u64;
                        estep::direct_posterior_samples(
                            &prep, data, probe, m, beta, &probe_rng, t, &mut discard,
                        )
                    }
                    _ => unreachable!("validated: bias needs a sampling algorithm"),
                };
                Some(gradient_bias(
                    &state.theta,
                    data,
                    probe,
                    &samples,
                    m,
                    beta,
                    scale(probe.len()),
                )?)
            }
            _ => None,
        };

        let record = IterationRecord {
            t,
            wall_time_s: train_secs,
            loglik,
            aar,
            bias,
            eval_count: evals,
            beta,
            gamma,
        };
        on_iter(&record);
        records.push(record);

        if let Some(reason) = numerical_failure {
            outcome = RunOutcome::Aborted { t, reason };
            break;
        }
    }

    Ok((RunResult { records, outcome }, state))
}
