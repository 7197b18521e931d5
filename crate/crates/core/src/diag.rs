//! Run diagnostics: per-iteration records, gradient-estimator bias, average
//! acceptance ratio, iteration/time to 95% of peak likelihood, and the
//! metrics CSV / summary documents.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::MixtureParams;
use crate::train::estep::{exact_rows, Occupancy};
use crate::train::mstep::assemble_gradient;

/// One training iteration worth of metrics. `wall_time_s` is cumulative
/// training time; metric evaluation (full-data log-likelihood, bias probes)
/// is timed separately and excluded, as is its cost from `eval_count`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: u64,
    pub wall_time_s: f64,
    pub loglik: Option<f64>,
    pub aar: Option<f64>,
    pub bias: Option<f64>,
    pub eval_count: u64,
    pub beta: f64,
    pub gamma: f64,
}

/// Arithmetic mean of the iteration's acceptance ratios. Minibatch runs
/// average over the minibatch (`aar_scope = "minibatch"` in run metadata).
pub fn average_acceptance(alphas: &[f64]) -> Result<f64> {
    if alphas.is_empty() {
        return Err(Error::validation("average acceptance of an empty set"));
    }
    Ok(alphas.iter().sum::<f64>() / alphas.len() as f64)
}

/// Squared l2 distance between the sampled sparse objective gradient and the
/// exact tempered-responsibility gradient on the same minibatch.
///
/// The sampled estimator weights each visited component by its visit
/// fraction and is assembled only on the sampled components; the exact
/// estimator runs over all components. Both use the same `scale * beta`
/// normalization, so the value is exactly zero for a single-component model.
pub fn gradient_bias(
    theta: &MixtureParams,
    data: &Dataset,
    batch: &[usize],
    samples: &[Vec<usize>],
    m: usize,
    beta: f64,
    scale: f64,
) -> Result<f64> {
    if samples.len() != batch.len() {
        return Err(Error::validation("one sample set per minibatch entry required"));
    }
    let sparse = Occupancy::from_samples(samples, m);
    let g_sampled = assemble_gradient(theta, data, batch, &sparse, beta, scale);

    let prep = crate::model::Prepared::new(theta)?;
    let mut evals = 0;
    let rows = exact_rows(&prep, data, batch, beta, &mut evals);
    let g_exact = assemble_gradient(theta, data, batch, &Occupancy::Dense(rows), beta, scale);

    Ok(g_sampled.squared_distance(&g_exact))
}

/// Iteration and cumulative training time of first reaching 95% of the
/// min-max normalized peak of the recorded log-likelihood trace, plus the
/// absolute error against a reference log-likelihood when one is given.
pub fn t95_and_ae(
    trace: &[(u64, f64, f64)],
    loglik_true: Option<f64>,
) -> Result<(u64, f64, Option<f64>)> {
    if trace.is_empty() {
        return Err(Error::validation("log-likelihood trace is empty"));
    }
    let lo = trace.iter().map(|&(_, _, l)| l).fold(f64::INFINITY, f64::min);
    let hi = trace.iter().map(|&(_, _, l)| l).fold(f64::NEG_INFINITY, f64::max);
    let threshold = lo + 0.95 * (hi - lo);
    let &(t95, time95, l95) = trace
        .iter()
        .find(|&&(_, _, l)| l >= threshold)
        .expect("the maximum itself crosses the threshold");
    Ok((t95, time95, loglik_true.map(|lt| (l95 - lt).abs())))
}

/// End-of-run summary document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub t95: u64,
    pub time95_s: f64,
    pub ae: Option<f64>,
    pub final_loglik: f64,
    pub total_evals: u64,
}

/// Builds the summary from iteration records (using the recorded
/// log-likelihood trace) and an optional reference log-likelihood.
pub fn summarize(records: &[IterationRecord], loglik_true: Option<f64>) -> Result<Summary> {
    let trace: Vec<(u64, f64, f64)> = records
        .iter()
        .filter_map(|r| r.loglik.map(|l| (r.t, r.wall_time_s, l)))
        .collect();
    let (t95, time95_s, ae) = t95_and_ae(&trace, loglik_true)?;
    let final_loglik = trace.last().expect("nonempty by t95_and_ae").2;
    let total_evals = records.iter().map(|r| r.eval_count).sum();
    Ok(Summary { t95, time95_s, ae, final_loglik, total_evals })
}

pub fn write_metrics_csv(path: impl AsRef<Path>, records: &[IterationRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<IterationRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec.map_err(|e| Error::csv(path, e))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Family, GaussianParams, SinhArcsinhParams};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};

    #[test]
    fn acceptance_mean() {
        assert_eq!(average_acceptance(&[1.0, 0.0, 0.5]).unwrap(), 0.5);
        assert_eq!(average_acceptance(&[1.0; 8]).unwrap(), 1.0);
        assert!(average_acceptance(&[]).is_err());
    }

    #[test]
    fn t95_examples() {
        // monotone trace from -100 to 0: threshold -5
        let trace: Vec<(u64, f64, f64)> =
            (1..=101).map(|t| (t, t as f64 * 0.1, -100.0 + (t - 1) as f64)).collect();
        let (t95, _, ae) = t95_and_ae(&trace, Some(0.0)).unwrap();
        assert_eq!(t95, 96); // first loglik >= -5
        assert_relative_eq!(ae.unwrap(), 5.0, max_relative = 1e-12);

        // max at t = 1
        let trace = vec![(1, 0.1, 3.0), (2, 0.2, 1.0), (3, 0.3, 2.0)];
        assert_eq!(t95_and_ae(&trace, None).unwrap().0, 1);

        // constant trace
        let trace = vec![(1, 0.1, -2.0), (2, 0.2, -2.0)];
        assert_eq!(t95_and_ae(&trace, None).unwrap().0, 1);

        assert!(t95_and_ae(&[], None).is_err());
    }

    #[test]
    fn t95_is_stable_under_truncation() {
        // On traces whose minimum is the first entry (every training trace
        // starts at its worst value): truncating at or past the argmax
        // preserves both extremes and therefore t95, and truncating at any
        // point >= t95 can only move t95 earlier (the peak shrinks, so the
        // threshold drops).
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let n = rng.random_range(3..40u64);
            let mut trace = Vec::new();
            let start = -50.0;
            let mut l = start;
            for t in 1..=n {
                if t > 1 {
                    l = (l + rng.random::<f64>() * 3.0 - 0.5).max(start + 0.001 * t as f64);
                }
                trace.push((t, t as f64, l));
            }
            let (t95, _, _) = t95_and_ae(&trace, None).unwrap();
            let t_max = trace
                .iter()
                .max_by(|a, b| a.2.partial_cmp(&b.2).unwrap())
                .unwrap()
                .0;
            for cut_at in [t_max, (t_max + n) / 2, n] {
                let cut: Vec<_> = trace.iter().copied().filter(|&(t, _, _)| t <= cut_at).collect();
                assert_eq!(t95_and_ae(&cut, None).unwrap().0, t95);
            }
            for cut_at in t95..=n {
                let cut: Vec<_> = trace.iter().copied().filter(|&(t, _, _)| t <= cut_at).collect();
                assert!(t95_and_ae(&cut, None).unwrap().0 <= t95);
            }
        }
    }

    #[test]
    fn bias_is_exactly_zero_for_single_component() {
        let theta = MixtureParams::new(
            Family::SinhArcsinh { dim: 2 },
            DVector::from_element(1, 0.4),
            vec![SinhArcsinhParams::identity(2).to_flat()],
        )
        .unwrap();
        let data = Dataset::new(vec![
            DVector::from_vec(vec![0.3, -1.0]),
            DVector::from_vec(vec![1.2, 0.7]),
        ])
        .unwrap();
        let b = gradient_bias(&theta, &data, &[0, 1], &[vec![0, 0], vec![0, 0]], 2, 1.0, 3.0).unwrap();
        assert_eq!(b, 0.0);
    }

    #[test]
    fn bias_decays_with_sample_count() {
        // With samples drawn from the exact posterior the estimator is
        // unbiased, so the squared deviation decays like 1/M.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let comps: Vec<DVector<f64>> = (0..3)
            .map(|j| {
                GaussianParams::new(
                    DVector::from_vec(vec![j as f64, -(j as f64)]),
                    DMatrix::identity(2, 2),
                )
                .unwrap()
                .to_flat()
            })
            .collect();
        let theta =
            MixtureParams::new(Family::Gaussian { dim: 2 }, DVector::zeros(3), comps).unwrap();
        let data = Dataset::new(
            (0..16)
                .map(|_| DVector::from_fn(2, |_, _| rng.random::<f64>() * 3.0 - 1.0))
                .collect(),
        )
        .unwrap();
        let batch: Vec<usize> = (0..16).collect();
        let prep = crate::model::Prepared::new(&theta).unwrap();

        let mut med = Vec::new();
        for &m in &[1usize, 4, 16, 64] {
            let mut vals = Vec::new();
            for _ in 0..40 {
                let samples: Vec<Vec<usize>> = batch
                    .iter()
                    .map(|&i| {
                        let mut evals = 0;
                        let (row, _) = prep.tempered_row(data.row(i), 1.0, &mut evals);
                        (0..m)
                            .map(|_| crate::math::sample_categorical(&mut rng, row.as_slice()))
                            .collect()
                    })
                    .collect();
                vals.push(gradient_bias(&theta, &data, &batch, &samples, m, 1.0, 1.0).unwrap());
            }
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            med.push(vals[vals.len() / 2]);
        }
        assert!(med[0] > med[1] && med[1] > med[2] && med[2] > med[3], "medians {med:?}");
        // slope of log(bias) vs log(M) should sit near -1
        let slope = (med[3].ln() - med[0].ln()) / ((64f64).ln() - (1f64).ln());
        assert!(slope < -0.6 && slope > -1.4, "slope {slope}");
    }

    #[test]
    fn bias_is_invariant_to_log_weight_shifts() {
        let comps: Vec<DVector<f64>> = (0..3)
            .map(|j| {
                GaussianParams::new(DVector::from_element(1, j as f64), DMatrix::identity(1, 1))
                    .unwrap()
                    .to_flat()
            })
            .collect();
        let nu = DVector::from_vec(vec![0.2, -0.5, 0.9]);
        let theta =
            MixtureParams::new(Family::Gaussian { dim: 1 }, nu.clone(), comps.clone()).unwrap();
        let shifted = MixtureParams::new(Family::Gaussian { dim: 1 }, nu.map(|v| v + 11.0), comps)
            .unwrap();
        let data = Dataset::new(vec![
            DVector::from_element(1, 0.4),
            DVector::from_element(1, 1.6),
        ])
        .unwrap();
        let samples = vec![vec![0, 1], vec![2, 2]];
        let a = gradient_bias(&theta, &data, &[0, 1], &samples, 2, 0.9, 2.0).unwrap();
        let b = gradient_bias(&shifted, &data, &[0, 1], &samples, 2, 0.9, 2.0).unwrap();
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }

    #[test]
    fn metrics_csv_round_trip_is_bit_exact() {
        let records = vec![
            IterationRecord {
                t: 1,
                wall_time_s: 0.125,
                loglik: Some(-3.5e2),
                aar: None,
                bias: Some(0.1 + 1e-16),
                eval_count: 200,
                beta: 0.1,
                gamma: 1.0,
            },
            IterationRecord {
                t: 2,
                wall_time_s: 0.25,
                loglik: None,
                aar: Some(0.09375),
                bias: None,
                eval_count: 200,
                beta: 0.2,
                gamma: 0.05,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.csv");
        write_metrics_csv(&p, &records).unwrap();
        let back = read_metrics_csv(&p).unwrap();
        assert_eq!(back, records);
        let p2 = dir.path().join("metrics2.csv");
        write_metrics_csv(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }
}
