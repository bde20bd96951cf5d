//! Coherent probe sets, Fock-space truncation and the probe matrix `F`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::NoiseModel;
use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;
use crate::pmf::{ln_factorials, poisson_cdf, poisson_ln_pmf};
use crate::scalar::Real;

pub const DEFAULT_ALPHA_THRESHOLD: f64 = 0.9;
pub const TRUNCATION_PMF_BOUND: f64 = 1e-5;

/// Lower bound on row sums of `F` when `M` comes from [`choose_truncation`].
pub const PROBE_ROW_SUM_FLOOR: f64 = 1.0 - 1e-4;

/// Smallest integer mean `m >= 1` with `P(Poisson(m) > n_pixels) >= threshold`.
pub fn choose_alpha_max(n_pixels: usize, threshold: f64) -> Result<u64> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(invalid(format!("threshold must lie in [0, 1), got {threshold}")));
    }
    let mut m = 1u64;
    loop {
        if 1.0 - poisson_cdf(m as f64, n_pixels) >= threshold {
            return Ok(m);
        }
        m += 1;
    }
}

/// Smallest integer mean `m >= 1` at which an ideal uniform detector with
/// total efficiency `efficiency` fires all `n_pixels` pixels with probability
/// at least `threshold`.
///
/// Under Poisson thinning each pixel fires independently with probability
/// `1 - exp(-m * efficiency / N)`. This probes deep into saturation, far
/// beyond [`choose_alpha_max`].
pub fn choose_alpha_max_saturating(n_pixels: usize, efficiency: f64, threshold: f64) -> Result<u64> {
    if n_pixels == 0 {
        return Err(invalid("saturating rule needs at least one pixel"));
    }
    if !(efficiency > 0.0 && efficiency <= 1.0) {
        return Err(invalid(format!("efficiency must lie in (0, 1], got {efficiency}")));
    }
    if !(0.0..1.0).contains(&threshold) {
        return Err(invalid(format!("threshold must lie in [0, 1), got {threshold}")));
    }
    let n = n_pixels as f64;
    let all_fire = |m: f64| n * (-(-m * efficiency / n).exp()).ln_1p();
    let target = threshold.ln();
    let mut m = 1u64;
    while all_fire(m as f64) < target {
        m += 1;
    }
    Ok(m)
}

/// Smallest integer `M > alpha_sq_max` with Poisson pmf at `M` at most 1e-5.
pub fn choose_truncation(alpha_sq_max: f64) -> Result<usize> {
    if !(alpha_sq_max > 0.0 && alpha_sq_max.is_finite()) {
        return Err(invalid(format!("alpha_sq_max must be positive, got {alpha_sq_max}")));
    }
    let bound = TRUNCATION_PMF_BOUND.ln();
    let mut m = alpha_sq_max.floor() as usize + 1;
    let mut ln_fact = ln_factorials::<f64>(m);
    loop {
        while ln_fact.len() <= m {
            let next = ln_fact[ln_fact.len() - 1] + (ln_fact.len() as f64).ln();
            ln_fact.push(next);
        }
        if poisson_ln_pmf(alpha_sq_max, m, &ln_fact) <= bound {
            return Ok(m);
        }
        m += 1;
    }
}

/// Probe set `{|α_d|²}`, truncation `M` and pulses per probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbePlan {
    pub alpha_sq_values: Vec<f64>,
    pub truncation: usize,
    pub pulses_per_probe: u64,
}

impl ProbePlan {
    pub fn new(alpha_sq_values: Vec<f64>, truncation: usize, pulses_per_probe: u64) -> Result<Self> {
        let plan = Self {
            alpha_sq_values,
            truncation,
            pulses_per_probe,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Integer grid `1..=alpha_max` with `alpha_max` from [`choose_alpha_max`]
    /// at the default threshold and `M` from [`choose_truncation`].
    pub fn standard(n_pixels: usize, pulses_per_probe: u64) -> Result<Self> {
        let alpha_max = choose_alpha_max(n_pixels, DEFAULT_ALPHA_THRESHOLD)?;
        Self::from_alpha_max(alpha_max, pulses_per_probe)
    }

    /// Same grid construction with `alpha_max` from the saturation rule.
    pub fn saturating(n_pixels: usize, efficiency: f64, pulses_per_probe: u64) -> Result<Self> {
        let alpha_max = choose_alpha_max_saturating(n_pixels, efficiency, DEFAULT_ALPHA_THRESHOLD)?;
        Self::from_alpha_max(alpha_max, pulses_per_probe)
    }

    pub fn from_alpha_max(alpha_max: u64, pulses_per_probe: u64) -> Result<Self> {
        let alpha_max = alpha_max.max(2);
        let values: Vec<f64> = (1..=alpha_max).map(|m| m as f64).collect();
        let truncation = choose_truncation(alpha_max as f64)?;
        Self::new(values, truncation, pulses_per_probe)
    }

    pub fn n_probes(&self) -> usize {
        self.alpha_sq_values.len()
    }

    pub fn alpha_sq_max(&self) -> f64 {
        self.alpha_sq_values.last().copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha_sq_values.len() < 2 {
            return Err(invalid("a probe plan needs at least two probes"));
        }
        if self.alpha_sq_values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid("probe means must be finite and nonnegative"));
        }
        if self.alpha_sq_values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("probe means must be strictly increasing"));
        }
        if (self.truncation as f64) <= self.alpha_sq_max() {
            return Err(invalid(format!(
                "truncation {} must exceed the largest probe mean {}",
                self.truncation,
                self.alpha_sq_max()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(s)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Probe matrix `F`, one truncated photon-number distribution per row.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeMatrix<T> {
    values: Matrix<T>,
    alpha_sq: Vec<f64>,
}

impl<T: Real> ProbeMatrix<T> {
    pub fn from_parts(values: Matrix<T>, alpha_sq: Vec<f64>) -> Result<Self> {
        if values.rows() != alpha_sq.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} probe rows but {} probe means",
                values.rows(),
                alpha_sq.len()
            )));
        }
        if values.as_slice().iter().any(|v| !(*v >= T::zero())) {
            return Err(invalid("probe matrix entries must be nonnegative"));
        }
        Ok(Self { values, alpha_sq })
    }

    pub fn values(&self) -> &Matrix<T> {
        &self.values
    }

    pub fn alpha_sq(&self) -> &[f64] {
        &self.alpha_sq
    }

    pub fn n_probes(&self) -> usize {
        self.values.rows()
    }

    pub fn truncation(&self) -> usize {
        self.values.cols() - 1
    }

    pub fn min_row_sum(&self) -> T {
        self.values
            .row_sums()
            .into_iter()
            .fold(T::infinity(), |a, b| a.min(b))
    }

    /// CSV with header `alpha_sq,k0,k1,...`, one probe per row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["alpha_sq".to_string()];
        header.extend((0..self.values.cols()).map(|k| format!("k{k}")));
        wr.write_record(&header)?;
        for (d, m) in self.alpha_sq.iter().enumerate() {
            let mut rec = vec![m.to_string()];
            rec.extend(self.values.row(d).iter().map(|v| v.as_f64().to_string()));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut alpha = Vec::new();
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let mut fields = rec.iter().map(|f| f.trim().parse::<f64>());
            let m = fields
                .next()
                .ok_or_else(|| invalid("empty probe row"))?
                .map_err(|e| invalid(e.to_string()))?;
            let row: Vec<T> = fields
                .map(|f| f.map(T::lit).map_err(|e| invalid(e.to_string())))
                .collect::<Result<_>>()?;
            alpha.push(m);
            rows.push(row);
        }
        Self::from_parts(Matrix::from_rows(&rows)?, alpha)
    }
}

/// Ideal Poisson probe rows over `0..=M`, evaluated in log space and not
/// renormalized. Fails if any row loses more than 1e-4 of its mass to the
/// truncated tail.
pub fn build_probe_matrix<T: Real>(plan: &ProbePlan) -> Result<ProbeMatrix<T>> {
    plan.validate()?;
    let m = plan.truncation;
    let ln_fact = ln_factorials::<f64>(m);
    let rows: Vec<Vec<T>> = plan
        .alpha_sq_values
        .iter()
        .map(|&a| {
            (0..=m)
                .map(|k| T::lit(poisson_ln_pmf(a, k, &ln_fact).exp()))
                .collect()
        })
        .collect();
    finish_probe_matrix(rows, plan)
}

/// Probe rows averaged over the pulse-energy jitter of `noise`: the mean
/// photon number is drawn from `N(m, (σ m)²)` clipped at zero.
pub fn build_noisy_probe_matrix<T: Real>(plan: &ProbePlan, noise: &NoiseModel) -> Result<ProbeMatrix<T>> {
    plan.validate()?;
    let sigma_rel = noise.sigma_rel;
    if sigma_rel == 0.0 {
        return build_probe_matrix(plan);
    }
    let m = plan.truncation;
    let ln_fact = ln_factorials::<f64>(m);
    const NODES: usize = 801;
    const SPAN: f64 = 8.0;
    let rows: Vec<Vec<T>> = plan
        .alpha_sq_values
        .iter()
        .map(|&a| {
            let sd = sigma_rel * a;
            let mut row = vec![0.0f64; m + 1];
            if sd == 0.0 {
                for (k, r) in row.iter_mut().enumerate() {
                    *r = poisson_ln_pmf(a, k, &ln_fact).exp();
                }
            } else {
                // Clipped mass at zero contributes vacuum.
                row[0] += normal_cdf(-a / sd);
                let lo = (a - SPAN * sd).max(0.0);
                let hi = a + SPAN * sd;
                let h = (hi - lo) / (NODES - 1) as f64;
                let mut wsum = 0.0;
                let mut acc = vec![0.0f64; m + 1];
                for i in 0..NODES {
                    let x = lo + h * i as f64;
                    let z = (x - a) / sd;
                    let trap = if i == 0 || i == NODES - 1 { 0.5 } else { 1.0 };
                    let w = trap * (-0.5 * z * z).exp();
                    wsum += w;
                    for (k, slot) in acc.iter_mut().enumerate() {
                        *slot += w * poisson_ln_pmf(x, k, &ln_fact).exp();
                    }
                }
                let mass = 1.0 - normal_cdf(-a / sd);
                for (r, v) in row.iter_mut().zip(acc) {
                    *r += mass * v / wsum;
                }
            }
            row.into_iter().map(T::lit).collect()
        })
        .collect();
    finish_probe_matrix(rows, plan)
}

fn finish_probe_matrix<T: Real>(rows: Vec<Vec<T>>, plan: &ProbePlan) -> Result<ProbeMatrix<T>> {
    let f = ProbeMatrix::from_parts(Matrix::from_rows(&rows)?, plan.alpha_sq_values.clone())?;
    let min_sum = f.min_row_sum().as_f64();
    if min_sum < PROBE_ROW_SUM_FLOOR {
        return Err(invalid(format!(
            "truncation {} leaves a probe row with mass {min_sum:.6}; raise the truncation",
            plan.truncation
        )));
    }
    Ok(f)
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn alpha_max_examples() {
        assert_eq!(choose_alpha_max(0, 0.9).unwrap(), 3);
        assert_eq!(choose_alpha_max(2, 0.9).unwrap(), 6);
        assert_eq!(choose_alpha_max(5, 0.0).unwrap(), 1);
        assert!(choose_alpha_max(3, 1.0).is_err());
    }

    #[test]
    fn alpha_max_is_minimal() {
        for n in [1usize, 4, 10, 20, 40] {
            let m = choose_alpha_max(n, 0.9).unwrap();
            assert!(1.0 - poisson_cdf(m as f64, n) >= 0.9);
            assert!(1.0 - poisson_cdf((m - 1) as f64, n) < 0.9);
        }
    }

    #[test]
    fn saturating_rule_reaches_deep_saturation() {
        let m = choose_alpha_max_saturating(10, 0.9, 0.9).unwrap();
        let p = |m: f64| (1.0 - (-m * 0.9 / 10.0).exp()).powi(10);
        assert!(p(m as f64) >= 0.9);
        assert!(p((m - 1) as f64) < 0.9);
        assert!(m > choose_alpha_max(10, 0.9).unwrap());
    }

    #[test]
    fn truncation_examples() {
        assert_eq!(choose_truncation(5.0).unwrap(), 18);
        let m = choose_truncation(0.1).unwrap();
        assert!(m >= 1);
        assert_eq!(m, 4);
        assert!(choose_truncation(0.0).is_err());
    }

    #[test]
    fn truncation_is_monotone() {
        let mut prev = 0;
        for i in 1..400 {
            let m = choose_truncation(i as f64 * 0.25).unwrap();
            assert!(m >= prev);
            prev = m;
        }
    }

    #[test]
    fn probe_rows_are_poisson() {
        let plan = ProbePlan::new(vec![0.0, 1.0, 2.0], 10, 100).unwrap();
        let f = build_probe_matrix::<f64>(&plan).unwrap();
        assert_eq!(f.values().row(0)[0], 1.0);
        assert!(f.values().row(0)[1..].iter().all(|&v| v == 0.0));
        let e = (-1.0f64).exp();
        let r = f.values().row(1);
        assert_relative_eq!(r[0], e, epsilon = 1e-15);
        assert_relative_eq!(r[1], e, epsilon = 1e-15);
        assert_relative_eq!(r[2], 0.5 * e, epsilon = 1e-15);
    }

    #[test]
    fn rule_based_rows_keep_their_mass() {
        for n in [2usize, 10, 20] {
            let plan = ProbePlan::standard(n, 1).unwrap();
            let f = build_probe_matrix::<f64>(&plan).unwrap();
            assert!(f.min_row_sum() >= PROBE_ROW_SUM_FLOOR);
            assert!(f.values().row_sums().iter().all(|&s| s <= 1.0 + 1e-12));
        }
    }

    #[test]
    fn plan_validation() {
        assert!(ProbePlan::new(vec![1.0], 5, 1).is_err());
        assert!(ProbePlan::new(vec![2.0, 1.0], 5, 1).is_err());
        assert!(ProbePlan::new(vec![1.0, 2.0], 2, 1).is_err());
        let p = ProbePlan::standard(10, 1000).unwrap();
        assert_eq!(p.alpha_sq_values.len(), 16);
        assert_eq!(p.truncation, 36);
        let back = ProbePlan::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn short_truncation_is_rejected() {
        let plan = ProbePlan::new(vec![1.0, 5.0], 6, 1).unwrap();
        assert!(build_probe_matrix::<f64>(&plan).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let plan = ProbePlan::standard(2, 1).unwrap();
        let f = build_probe_matrix::<f64>(&plan).unwrap();
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let back = ProbeMatrix::<f64>::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn noisy_rows_broaden_and_keep_mass() {
        let plan = ProbePlan::standard(4, 1).unwrap();
        let ideal = build_probe_matrix::<f64>(&plan).unwrap();
        let noisy = build_noisy_probe_matrix::<f64>(&plan, &NoiseModel::laser()).unwrap();
        for d in 0..plan.n_probes() {
            let (ri, rn) = (ideal.values().row(d), noisy.values().row(d));
            assert_relative_eq!(rn.iter().sum::<f64>(), ri.iter().sum::<f64>(), epsilon = 1e-6);
            let mean = |r: &[f64]| r.iter().enumerate().map(|(k, p)| k as f64 * p).sum::<f64>();
            let var = |r: &[f64]| {
                let m = mean(r);
                r.iter().enumerate().map(|(k, p)| (k as f64 - m).powi(2) * p).sum::<f64>()
            };
            // Variance grows by (σ m)² for a Gaussian mixture of Poissons.
            let a = plan.alpha_sq_values[d];
            let extra = (0.0188 * a).powi(2);
            assert_relative_eq!(var(rn) - var(ri), extra, epsilon = 1e-3);
        }
    }

    #[test]
    fn normal_cdf_reference_values() {
        assert_relative_eq!(normal_cdf(0.0), 0.5, epsilon = 1e-15);
        assert_relative_eq!(normal_cdf(1.0), 0.841_344_746_068_542_9, max_relative = 1e-13);
        assert_relative_eq!(normal_cdf(-3.0), 1.349_898_031_630_094_6e-3, max_relative = 1e-12);
    }
}
