use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{Error, Result};

pub fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("values to average".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Percentile bootstrap interval of the mean.
pub fn bootstrap_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("bootstrap input".into()));
    }
    if resamples == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid("bootstrap needs resamples > 0 and a level in (0, 1)"));
    }
    if values.iter().all(|&v| v == values[0]) {
        return Ok((values[0], values[0]));
    }
    let n = values.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let lo = ((alpha * resamples as f64).floor() as usize).min(resamples - 1);
    let hi = (((1.0 - alpha) * resamples as f64).ceil() as usize).clamp(1, resamples) - 1;
    Ok((means[lo], means[hi]))
}

/// Two-sided paired sign test on differences; zero differences are dropped.
/// Returns `(p_value, positives, negatives)`.
pub fn sign_test(differences: &[f64]) -> Result<(f64, usize, usize)> {
    let pos = differences.iter().filter(|&&d| d > 0.0).count();
    let neg = differences.iter().filter(|&&d| d < 0.0).count();
    let n = pos + neg;
    if n == 0 {
        return Ok((1.0, 0, 0));
    }
    let b = Binomial::new(0.5, n as u64).map_err(|e| Error::invalid(e.to_string()))?;
    let p = (2.0 * b.cdf(pos.min(neg) as u64)).min(1.0);
    Ok((p, pos, neg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn constant_values_give_degenerate_interval() {
        assert_eq!(bootstrap_ci(&[0.1; 7], 1000, 0.95, 1).unwrap(), (0.1, 0.1));
        assert!(bootstrap_ci(&[], 1000, 0.95, 1).is_err());
    }

    #[test]
    fn normal_draws_match_standard_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let m = mean(&v).unwrap();
        let (lo, hi) = bootstrap_ci(&v, 1000, 0.95, 4).unwrap();
        let half = 1.96 / (v.len() as f64).sqrt();
        assert!(lo < m && m < hi);
        assert!(lo < 0.0 && hi > 0.0);
        // the bootstrap half width agrees with the closed form within sampling noise
        assert!(((hi - lo) / 2.0 - half).abs() < 0.25 * half);
        assert_eq!((lo, hi), bootstrap_ci(&v, 1000, 0.95, 4).unwrap());
    }

    #[test]
    fn sign_test_against_exact_binomial() {
        // 9 of 10 positive: p = 2 · (1 + 10) / 1024
        let d = [1.0, 2.0, 0.5, 0.1, 3.0, 1.0, 1.0, 2.0, 0.3, -1.0, 0.0];
        let (p, pos, neg) = sign_test(&d).unwrap();
        assert_eq!((pos, neg), (9, 1));
        assert!((p - 22.0 / 1024.0).abs() < 1e-12);
        assert_eq!(sign_test(&[0.0, 0.0]).unwrap().0, 1.0);
        // balanced signs cap at 1
        assert_eq!(sign_test(&[1.0, -1.0]).unwrap().0, 1.0);
    }
}
