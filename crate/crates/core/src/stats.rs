//! Statistical helpers: goodness-of-fit tests, regressions, bootstrap, and
//! order-independent sufficient statistics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::rng::StreamRng;

/// Kolmogorov survival function `P(K > x)`.
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * x * x).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// One-sample KS statistic of `samples` against the continuous `cdf`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    d
}

/// Two-sample KS test; returns `(D, asymptotic p-value)`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len(), y.len());
    if n == 0 || m == 0 {
        return (0.0, 1.0);
    }
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let v = x[i].min(y[j]);
        while i < n && x[i] <= v {
            i += 1;
        }
        while j < m && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let en = ((n * m) as f64 / (n + m) as f64).sqrt();
    let p = kolmogorov_sf((en + 0.12 + 0.11 / en) * d);
    (d, p)
}

/// Pearson chi-square test of observed counts against equal expected cells.
pub fn chi_square_uniform(counts: &[u64]) -> (f64, f64) {
    let total: u64 = counts.iter().sum();
    let k = counts.len() as f64;
    let e = total as f64 / k;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    let dist = ChiSquared::new(k - 1.0).expect("at least two cells");
    (stat, 1.0 - dist.cdf(stat))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
    pub slope_stderr: f64,
    pub r_squared: f64,
    pub residual_rms: f64,
}

/// Weighted least squares `y = a + b x` with weights `w`.
pub fn weighted_linear_fit(x: &[f64], y: &[f64], w: &[f64]) -> Option<LinearFit> {
    let n = x.len();
    if n < 2 || y.len() != n || w.len() != n {
        return None;
    }
    let sw: f64 = w.iter().sum();
    if !(sw > 0.0) {
        return None;
    }
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for i in 0..n {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        sxx += w[i] * dx * dx;
        sxy += w[i] * dx * dy;
        syy += w[i] * dy * dy;
    }
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let mut ssr = 0.0;
    let mut ssr_unweighted = 0.0;
    for i in 0..n {
        let r = y[i] - intercept - slope * x[i];
        ssr += w[i] * r * r;
        ssr_unweighted += r * r;
    }
    let r_squared = if syy > 0.0 { 1.0 - ssr / syy } else { 1.0 };
    let slope_stderr = if n > 2 {
        (ssr / (n as f64 - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Some(LinearFit {
        intercept,
        slope,
        slope_stderr,
        r_squared,
        residual_rms: (ssr_unweighted / n as f64).sqrt(),
    })
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<LinearFit> {
    weighted_linear_fit(x, y, &vec![1.0; x.len()])
}

/// Percentile interval of `values` at two-sided level `1 - alpha`.
pub fn percentile_interval(values: &mut [f64], alpha: f64) -> (f64, f64) {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let q = |p: f64| {
        let pos = p * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let f = pos - lo as f64;
        values[lo] * (1.0 - f) + values[hi] * f
    };
    (q(alpha / 2.0), q(1.0 - alpha / 2.0))
}

/// Bootstrap resample indices `0..n` with replacement.
pub fn resample_indices(n: usize, rng: &mut StreamRng) -> Vec<usize> {
    (0..n)
        .map(|_| ((rng.open01() * n as f64) as usize).min(n - 1))
        .collect()
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let denom = 1.0 + z * z / n;
    let center = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64
}

/// Standard error of the mean.
pub fn stderr_of_mean(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    (variance(xs) / xs.len() as f64).sqrt()
}

const FIXED_SCALE: f64 = (1u128 << 64) as f64;

/// Sum of values of magnitude below `2^62` held in signed 64.64 fixed point.
///
/// Integer addition is associative and commutative, so merged sums are
/// bit-identical whatever the grouping or order of the summands.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExactSum(#[serde(with = "i128_string")] pub i128);

impl ExactSum {
    #[inline]
    pub fn add(&mut self, v: f64) {
        debug_assert!(v.is_finite(), "ExactSum takes finite values, got {v}");
        self.0 += (v * FIXED_SCALE).round() as i128;
    }

    pub fn merge(&mut self, o: &ExactSum) {
        self.0 += o.0;
    }

    pub fn value(&self) -> f64 {
        let hi = (self.0 >> 64) as f64;
        let lo = (self.0 & u64::MAX as i128) as f64 / FIXED_SCALE;
        hi + lo
    }
}

mod i128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &i128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<i128, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Count, sum and sum of squares of samples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Moments {
    pub count: u64,
    pub sum: ExactSum,
    pub sum_sq: ExactSum,
}

impl Moments {
    pub fn push(&mut self, v: f64) {
        self.count += 1;
        self.sum.add(v);
        self.sum_sq.add(v * v);
    }

    pub fn merge(&mut self, o: &Moments) {
        self.count += o.count;
        self.sum.merge(&o.sum);
        self.sum_sq.merge(&o.sum_sq);
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            return f64::NAN;
        }
        self.sum.value() / self.count as f64
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        let n = self.count as f64;
        let m = self.mean();
        ((self.sum_sq.value() - n * m * m) / (n - 1.0)).max(0.0)
    }

    pub fn stderr(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        (self.variance() / self.count as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    #[test]
    fn exact_linear_fit() {
        let x: Vec<f64> = (1..=5).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.6 * v).collect();
        let f = linear_fit(&x, &y).unwrap();
        assert!((f.slope + 0.6).abs() < 1e-12);
        assert!(f.residual_rms < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kolmogorov_reference_values() {
        // Classical critical values: P(K > 1.358) = 0.05, P(K > 1.628) = 0.01.
        assert!((kolmogorov_sf(1.358) - 0.05).abs() < 1e-3);
        assert!((kolmogorov_sf(1.628) - 0.01).abs() < 5e-4);
    }

    #[test]
    fn ks_two_sample_same_law() {
        let mut r = RngStream::new(3, 3).rng();
        let a: Vec<f64> = (0..2000).map(|_| r.normal()).collect();
        let b: Vec<f64> = (0..2000).map(|_| r.normal()).collect();
        let c: Vec<f64> = (0..2000).map(|_| r.normal() + 0.3).collect();
        assert!(ks_two_sample(&a, &b).1 > 0.01);
        assert!(ks_two_sample(&a, &c).1 < 1e-6);
    }

    #[test]
    fn wilson_contains_truth() {
        let (lo, hi) = wilson_interval(30, 100, 1.96);
        assert!(lo < 0.3 && 0.3 < hi);
        assert_eq!(wilson_interval(0, 100, 1.96).0, 0.0);
    }

    proptest! {
        #[test]
        fn exact_sum_order_independent(v in proptest::collection::vec(-1.0..1.0f64, 1..50), split in 0usize..50) {
            let split = split.min(v.len());
            let mut a = Moments::default();
            v.iter().for_each(|x| a.push(*x));
            let mut l = Moments::default();
            let mut r = Moments::default();
            v[..split].iter().for_each(|x| l.push(*x));
            v[split..].iter().rev().for_each(|x| r.push(*x));
            let mut rl = r;
            rl.merge(&l);
            l.merge(&r);
            prop_assert_eq!(a, l);
            prop_assert_eq!(a, rl);
            prop_assert!((a.mean() - mean(&v)).abs() < 1e-12);
        }
    }
}
