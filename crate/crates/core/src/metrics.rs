//! Distances between photon-number distributions, normalized factorial
//! moments and reference distributions.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pmf::{poisson_pmf, thermal_pmf};
use crate::reconstruction::Pnd;
use crate::scalar::Real;

fn same_len<T>(a: &[T], b: &[T]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "distributions have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `(Σ_k √(f_k g_k))²`, clipped to `[0, 1]`.
pub fn fidelity<T: Real>(f: &[T], truth: &[T]) -> Result<T> {
    same_len(f, truth)?;
    let s: T = f
        .iter()
        .zip(truth)
        .map(|(&a, &b)| (a.max(T::zero()) * b.max(T::zero())).sqrt())
        .sum();
    Ok((s * s).min(T::one()))
}

/// `½ Σ_k |f_k − g_k|`.
pub fn tvd<T: Real>(f: &[T], truth: &[T]) -> Result<T> {
    same_len(f, truth)?;
    Ok(T::lit(0.5) * f.iter().zip(truth).map(|(&a, &b)| (a - b).abs()).sum::<T>())
}

pub fn mean<T: Real>(f: &[T]) -> T {
    f.iter()
        .enumerate()
        .map(|(k, &p)| T::from_usize_lossy(k) * p)
        .sum()
}

fn factorial_moment<T: Real>(f: &[T], order: usize) -> T {
    f.iter()
        .enumerate()
        .skip(order)
        .map(|(k, &p)| {
            let falling = (0..order).fold(T::one(), |acc, j| acc * T::from_usize_lossy(k - j));
            falling * p
        })
        .sum()
}

fn normalized_moment<T: Real>(f: &[T], order: usize) -> Result<T> {
    let m = mean(f);
    if !(m > T::zero()) {
        return Err(Error::UndefinedMoment);
    }
    Ok(factorial_moment(f, order) / m.powi(order as i32))
}

/// `Σ k(k−1) f_k / ⟨n⟩²`.
pub fn g2<T: Real>(f: &[T]) -> Result<T> {
    normalized_moment(f, 2)
}

/// `Σ k(k−1)(k−2) f_k / ⟨n⟩³`.
pub fn g3<T: Real>(f: &[T]) -> Result<T> {
    normalized_moment(f, 3)
}

/// Poisson distribution truncated at `truncation` and renormalized.
pub fn poisson_pnd<T: Real>(mean: T, truncation: usize) -> Pnd<T> {
    Pnd::normalized(poisson_pmf(mean, truncation)).expect("Poisson mass at the mode is positive")
}

/// Bose-Einstein distribution truncated at `truncation` and renormalized.
pub fn thermal_pnd<T: Real>(mean: T, truncation: usize) -> Pnd<T> {
    Pnd::normalized(thermal_pmf(mean, truncation)).expect("thermal mass at zero is positive")
}

/// Summary of a reconstruction against its reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fidelity: f64,
    pub tvd: f64,
    pub g2: f64,
    pub g3: f64,
    pub mean: f64,
}

impl MetricReport {
    /// Compares `f` with `truth`, zero-padding the shorter one. The moments
    /// are those of `f`; zero-mean inputs report NaN moments.
    pub fn compute<T: Real>(f: &[T], truth: &[T]) -> Result<Self> {
        let len = f.len().max(truth.len());
        let pad = |v: &[T]| {
            let mut out = v.to_vec();
            out.resize(len, T::zero());
            out
        };
        let (f, truth) = (pad(f), pad(truth));
        Ok(Self {
            fidelity: fidelity(&f, &truth)?.as_f64(),
            tvd: tvd(&f, &truth)?.as_f64(),
            g2: g2(&f).map_or(f64::NAN, |v| v.as_f64()),
            g3: g3(&f).map_or(f64::NAN, |v| v.as_f64()),
            mean: mean(&f).as_f64(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub const CSV_HEADER: [&'static str; 5] = ["fidelity", "tvd", "g2", "g3", "mean"];

    /// Writes one CSV row, preceded by the header when `header` is set.
    pub fn write_csv_row<W: Write>(&self, w: W, header: bool) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().has_headers(header).from_writer(w);
        wr.serialize(self)?;
        wr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn fidelity_examples() {
        let f = [0.5, 0.5];
        let t = [0.9, 0.1];
        assert_relative_eq!(fidelity(&f, &t).unwrap(), 0.8, epsilon = 1e-15);
        assert_eq!(fidelity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(fidelity(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn tvd_examples() {
        assert_relative_eq!(tvd(&[0.5, 0.5], &[0.9, 0.1]).unwrap(), 0.4, epsilon = 1e-15);
        assert_eq!(tvd(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(tvd(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
    }

    #[test]
    fn coherent_and_thermal_moments() {
        for m in [0.5, 5.0, 20.0] {
            let trunc = crate::probe::choose_truncation(m).unwrap() + 40;
            let p = poisson_pnd(m, trunc);
            assert!((g2(p.probs()).unwrap() - 1.0).abs() < 1e-4);
            assert!((g3(p.probs()).unwrap() - 1.0).abs() < 1e-4);
            let t = thermal_pnd(m, 2000);
            assert!((g2(t.probs()).unwrap() - 2.0).abs() < 1e-4);
            assert!((g3(t.probs()).unwrap() - 6.0).abs() < 1e-3);
        }
    }

    #[test]
    fn single_photon_has_no_correlations() {
        let f = [0.0, 1.0, 0.0];
        assert_eq!(g2(&f).unwrap(), 0.0);
        assert_eq!(g3(&f).unwrap(), 0.0);
        assert!(matches!(g2(&[1.0, 0.0]), Err(Error::UndefinedMoment)));
    }

    #[test]
    fn reference_distributions() {
        assert_eq!(poisson_pnd(0.0f64, 4).probs(), &[1.0, 0.0, 0.0, 0.0, 0.0]);
        let raw = thermal_pmf(1.0f64, 3);
        assert_eq!(&raw[..2], &[0.5, 0.25]);
        let e = (-1.0f64).exp();
        let raw = poisson_pmf(1.0f64, 2);
        assert_relative_eq!(raw[2], 0.5 * e, epsilon = 1e-16);
        let p = poisson_pnd(1.0f64, 10);
        assert_relative_eq!(p.probs().iter().sum::<f64>(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn report_round_trip() {
        let r = MetricReport::compute(&[0.25, 0.5, 0.25], &[0.2, 0.6, 0.2]).unwrap();
        assert_relative_eq!(r.mean, 1.0);
        let back: MetricReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        let mut buf = Vec::new();
        r.write_csv_row(&mut buf, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), MetricReport::CSV_HEADER.join(","));
        assert_eq!(text.lines().count(), 2);
    }

    fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, len).prop_filter_map("needs mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn self_comparison_is_exact(f in distribution(8)) {
            prop_assert_eq!(tvd(&f, &f).unwrap(), 0.0);
            prop_assert!((fidelity(&f, &f).unwrap() - 1.0).abs() < 1e-14);
        }

        #[test]
        fn symmetry_and_triangle(a in distribution(6), b in distribution(6), c in distribution(6)) {
            prop_assert!((fidelity(&a, &b).unwrap() - fidelity(&b, &a).unwrap()).abs() < 1e-15);
            let ab = tvd(&a, &b).unwrap();
            prop_assert_eq!(ab, tvd(&b, &a).unwrap());
            prop_assert!(ab <= tvd(&a, &c).unwrap() + tvd(&c, &b).unwrap() + 1e-15);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((0.0..=1.0).contains(&fidelity(&a, &b).unwrap()));
        }

        #[test]
        fn moments_ignore_zero_padding(f in distribution(7), extra in 1usize..20) {
            let mut padded = f.clone();
            padded.resize(f.len() + extra, 0.0);
            prop_assume!(mean(&f) > 1e-9);
            prop_assert_eq!(g2(&f).unwrap(), g2(&padded).unwrap());
            prop_assert_eq!(g3(&f).unwrap(), g3(&padded).unwrap());
        }
    }
}
