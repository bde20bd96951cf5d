//! Photon-number probability mass functions evaluated in log space.

use crate::scalar::Real;

/// `ln k!` for `k = 0..=max`, by cumulative summation.
pub fn ln_factorials<T: Real>(max: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(max + 1);
    let mut acc = T::zero();
    out.push(acc);
    for k in 1..=max {
        acc += T::from_usize_lossy(k).ln();
        out.push(acc);
    }
    out
}

/// `ln P(X = k)` for `X ~ Poisson(mean)`; `ln_fact` must cover `k`.
pub fn poisson_ln_pmf<T: Real>(mean: T, k: usize, ln_fact: &[T]) -> T {
    if mean == T::zero() {
        return if k == 0 { T::zero() } else { T::neg_infinity() };
    }
    T::from_usize_lossy(k) * mean.ln() - mean - ln_fact[k]
}

/// Poisson pmf over `0..=max` without renormalization.
pub fn poisson_pmf<T: Real>(mean: T, max: usize) -> Vec<T> {
    let ln_fact = ln_factorials::<T>(max);
    (0..=max)
        .map(|k| poisson_ln_pmf(mean, k, &ln_fact).exp())
        .collect()
}

/// `P(X <= n)` for `X ~ Poisson(mean)`.
pub fn poisson_cdf(mean: f64, n: usize) -> f64 {
    let ln_fact = ln_factorials::<f64>(n);
    (0..=n)
        .map(|k| poisson_ln_pmf(mean, k, &ln_fact).exp())
        .sum::<f64>()
        .min(1.0)
}

/// Bose-Einstein pmf `mean^k / (1 + mean)^(k+1)` over `0..=max`.
pub fn thermal_pmf<T: Real>(mean: T, max: usize) -> Vec<T> {
    if mean == T::zero() {
        let mut v = vec![T::zero(); max + 1];
        v[0] = T::one();
        return v;
    }
    let ln_ratio = (mean / (T::one() + mean)).ln();
    let ln_norm = -(T::one() + mean).ln();
    (0..=max)
        .map(|k| (ln_norm + T::from_usize_lossy(k) * ln_ratio).exp())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn poisson_matches_closed_form() {
        let p = poisson_pmf(1.0f64, 2);
        let e = (-1.0f64).exp();
        assert_relative_eq!(p[0], e, epsilon = 1e-15);
        assert_relative_eq!(p[1], e, epsilon = 1e-15);
        assert_relative_eq!(p[2], 0.5 * e, epsilon = 1e-15);
    }

    #[test]
    fn poisson_large_argument_stays_finite() {
        let p = poisson_pmf(500.0f64, 700);
        assert!(p.iter().all(|x| x.is_finite()));
        assert_relative_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn thermal_mean_one() {
        let t = thermal_pmf(1.0f64, 3);
        assert_relative_eq!(t[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(t[1], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn cdf_small_cases() {
        assert_relative_eq!(poisson_cdf(3.0, 0), (-3.0f64).exp(), epsilon = 1e-15);
        let m = 6.0f64;
        assert_relative_eq!(
            poisson_cdf(m, 2),
            (-m).exp() * (1.0 + m + m * m / 2.0),
            epsilon = 1e-14
        );
    }
}
