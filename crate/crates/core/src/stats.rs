//! Estimators for correlated Monte-Carlo output: compensated sums, batch
//! means, integrated autocorrelation time and Kolmogorov–Smirnov distance.

use serde::{Deserialize, Serialize};

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn sum(values: &[f64]) -> f64 {
    let mut s = CompensatedSum::new();
    values.iter().for_each(|&v| s.add(v));
    s.value()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    sum(values) / values.len() as f64
}

/// Unbiased sample variance.
pub fn variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    let mut s = CompensatedSum::new();
    values.iter().for_each(|&v| s.add((v - m) * (v - m)));
    s.value() / (n - 1) as f64
}

/// Mean with standard error and effective sample size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FunctionalEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_eff: f64,
}

impl FunctionalEstimate {
    /// Estimate from independent draws.
    pub fn iid(values: &[f64]) -> Self {
        let n = values.len() as f64;
        Self {
            mean: mean(values),
            stderr: (variance(values) / n).sqrt(),
            n_eff: n,
        }
    }

    /// Estimate from `chains` equal-length consecutive blocks of a Markov
    /// chain output: batch-means standard error with about `√N` batches that
    /// never straddle a chain boundary, and `n_eff = N / τ_int`.
    pub fn correlated(values: &[f64], chains: usize) -> Self {
        let n = values.len();
        let chains = chains.max(1);
        let m = mean(values);
        if n < 4 || n % chains != 0 {
            return Self::iid(values);
        }
        let per_chain = n / chains;
        let tau = integrated_autocorr_time(values, chains);
        let n_eff = (n as f64 / tau).min(n as f64);
        let stderr = batch_means_stderr(values, chains, per_chain);
        Self { mean: m, stderr, n_eff }
    }

    /// `|mean - target| / stderr`, infinite when the standard error is zero
    /// and the means differ.
    pub fn z_score(&self, target: f64) -> f64 {
        let d = (self.mean - target).abs();
        if d == 0.0 {
            0.0
        } else {
            d / self.stderr
        }
    }

    pub fn within(&self, target: f64, k: f64) -> bool {
        self.z_score(target) <= k
    }
}

fn batch_means_stderr(values: &[f64], chains: usize, per_chain: usize) -> f64 {
    let n = values.len();
    let target = (n as f64).sqrt().round().max(2.0) as usize;
    let per_chain_batches = (target / chains).max(1);
    let size = per_chain / per_chain_batches;
    if size == 0 {
        return (variance(values) / n as f64).sqrt();
    }
    let mut batch_means = Vec::with_capacity(chains * per_chain_batches);
    for c in 0..chains {
        let chain = &values[c * per_chain..(c + 1) * per_chain];
        for b in 0..per_chain_batches {
            let start = b * size;
            let end = if b + 1 == per_chain_batches { per_chain } else { start + size };
            batch_means.push(mean(&chain[start..end]));
        }
    }
    let nb = batch_means.len();
    if nb < 2 {
        return (variance(values) / n as f64).sqrt();
    }
    let bm_var = variance(&batch_means);
    // Batches are near equal in size; scale by the average batch length.
    let avg = n as f64 / nb as f64;
    (bm_var * avg / n as f64).sqrt()
}

/// Integrated autocorrelation time `1 + 2 Σ ρ(k)` pooled over chains, with
/// Sokal's self-consistent window `M ≥ 5 τ(M)`.
pub fn integrated_autocorr_time(values: &[f64], chains: usize) -> f64 {
    let n = values.len();
    let chains = chains.max(1);
    if n < 4 || n % chains != 0 {
        return 1.0;
    }
    let per = n / chains;
    let m = mean(values);
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
    if var == 0.0 {
        return 1.0;
    }
    let mut tau = 1.0;
    let max_lag = (per / 2).min(5000);
    for k in 1..max_lag {
        let mut acc = 0.0;
        let mut count = 0usize;
        for c in 0..chains {
            let chain = &values[c * per..(c + 1) * per];
            for i in 0..per - k {
                acc += (chain[i] - m) * (chain[i + k] - m);
            }
            count += per - k;
        }
        let rho = acc / count as f64 / var;
        tau += 2.0 * rho;
        if (k as f64) >= 5.0 * tau {
            break;
        }
    }
    tau.max(1.0)
}

/// `sup_x |F_n(x) - F(x)|` for the empirical distribution of `samples`.
pub fn ks_distance<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut s: Vec<f64> = samples.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in s.iter().enumerate() {
        let f = cdf(x);
        d = d.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs());
    }
    d
}

/// Empirical quantile by linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut s: Vec<f64> = values.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    if s.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseSource;

    fn ar1(phi: f64, n: usize, stream: u64) -> Vec<f64> {
        let mut src = NoiseSource::new(5, stream, 1);
        let mut z = [0.0];
        let mut x = 0.0;
        let innov = (1.0 - phi * phi).sqrt();
        (0..n)
            .map(|k| {
                src.standard_normals(k as u64, &mut z);
                x = phi * x + innov * z[0];
                x
            })
            .collect()
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut s = CompensatedSum::new();
        s.add(1e16);
        for _ in 0..1000 {
            s.add(1.0);
        }
        s.add(-1e16);
        assert_eq!(s.value(), 1000.0);
    }

    #[test]
    fn constant_series_has_zero_stderr() {
        let e = FunctionalEstimate::correlated(&vec![1.0; 400], 4);
        assert_eq!(e.mean, 1.0);
        assert_eq!(e.stderr, 0.0);
        assert!(e.z_score(1.0) == 0.0);
    }

    #[test]
    fn ar1_autocorrelation_time() {
        // τ = (1 + φ)/(1 - φ) = 3 for φ = 0.5.
        let x = ar1(0.5, 200_000, 0);
        let tau = integrated_autocorr_time(&x, 1);
        assert!((tau - 3.0).abs() < 0.15, "{tau}");
        let e = FunctionalEstimate::correlated(&x, 1);
        let expected = (3.0 / 200_000.0f64).sqrt();
        assert!((e.stderr / expected - 1.0).abs() < 0.2, "{} vs {expected}", e.stderr);
        assert!(e.n_eff < 200_000.0 / 2.5);
    }

    #[test]
    fn batches_respect_chain_boundaries() {
        // Two chains with different constant levels: within-chain batches are
        // constant but the batch means still see the between-chain spread.
        let mut v = vec![0.0; 100];
        v.extend(vec![1.0; 100]);
        let e = FunctionalEstimate::correlated(&v, 2);
        assert!(e.stderr > 0.1);
    }

    #[test]
    fn ks_against_uniform() {
        let s: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        assert!(ks_distance(&s, |x| x) <= 0.0005 + 1e-12);
        assert!((ks_distance(&s, |x| x * x) - 0.25).abs() < 1e-3);
    }

    #[test]
    fn quantiles() {
        let v = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert_eq!(quantile(&v, 0.5), 2.5);
    }
}
