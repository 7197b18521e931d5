//! Small numeric helpers: stable log-sum-exp, softmax, categorical sampling.

use nalgebra::DVector;
use rand::Rng;

/// Numerically stable log(sum(exp(v))). Returns -inf for an all-(-inf) input.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = v.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Softmax of a logit vector.
pub fn softmax(logits: &DVector<f64>) -> DVector<f64> {
    let lse = log_sum_exp(logits.as_slice());
    logits.map(|x| (x - lse).exp())
}

/// Draws an index from an (approximately normalized) probability vector with a
/// single uniform variate. Falls through to the last index on rounding slack.
pub fn sample_categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    debug_assert!(!probs.is_empty());
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Index pairs (r, c) with c <= r of the packed lower-triangular layout.
pub fn tri_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn lse_matches_naive_for_small_values() {
        let v = [0.1f64, -0.3, 1.7];
        let naive = v.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert_relative_eq!(log_sum_exp(&v), naive, max_relative = 1e-14);
    }

    #[test]
    fn lse_handles_large_magnitudes() {
        let v = [700.0f64, 699.0];
        let got = log_sum_exp(&v);
        assert!(got.is_finite());
        assert_relative_eq!(got, 700.0 + (1.0 + (-1.0f64).exp()).ln(), max_relative = 1e-14);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn categorical_frequencies_track_probabilities() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let probs = [0.75, 0.25];
        let n = 100_000;
        let mut counts = [0usize; 2];
        for _ in 0..n {
            counts[sample_categorical(&mut rng, &probs)] += 1;
        }
        let f0 = counts[0] as f64 / n as f64;
        assert!((f0 - 0.75).abs() < 0.01, "f0 = {f0}");
    }
}
