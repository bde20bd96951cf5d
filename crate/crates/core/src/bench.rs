//! Solve-time and memory scaling of detector tomography, with power-law fits.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::detector::{sample_detector, simulate_coherent_probe, NoiseModel, PulseStream};
use crate::error::{invalid, Error, Result};
use crate::probe::{build_probe_matrix, ProbePlan};
use crate::qp::SolverOptions;
use crate::tomography::{solve, MeasurementMatrix, Method, DEFAULT_GAMMA};

/// One (pixel count, method) measurement, medians over repetitions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub n_pixels: usize,
    pub method: Method,
    #[serde(rename = "time_s")]
    pub solve_time: f64,
    #[serde(rename = "mem_bytes")]
    pub peak_memory: u64,
    pub masked_fraction: f64,
    #[serde(rename = "M")]
    pub truncation: usize,
    pub assembly_time_s: f64,
    pub iterations: usize,
    pub repetitions: usize,
    /// Peak memory from the tracking allocator rather than explicit accounting.
    pub memory_measured: bool,
    /// The solve failed or exceeded the memory limit; excluded from fits.
    pub failed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalingOptions {
    pub solver: SolverOptions,
    pub repetitions: usize,
    pub gamma: f64,
    pub pulses_per_probe: u64,
    pub seed: u64,
    /// Skip pixel counts whose estimated dense problem exceeds this many bytes.
    pub memory_limit: Option<u64>,
}

impl Default for ScalingOptions {
    fn default() -> Self {
        Self {
            solver: SolverOptions::default(),
            repetitions: 3,
            gamma: DEFAULT_GAMMA,
            pulses_per_probe: 100_000,
            seed: 0,
            memory_limit: None,
        }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Upper estimate of the standard problem's dense storage: one Hessian per
/// outcome plus the Schur complement and factor copies.
fn estimated_bytes(n_pixels: usize, truncation: usize) -> u64 {
    let m = (truncation + 1) as u64;
    let blocks = (n_pixels + 1) as u64;
    8 * m * m * (2 * blocks + 3)
}

/// Peak resident set size of the process in bytes, where the platform
/// exposes it.
pub fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Simulates a detector per pixel count and times both solvers.
///
/// Runs sequentially so that allocation high-water marks belong to a single
/// solve.
pub fn run_scaling(pixels: &[usize], opts: &ScalingOptions) -> Result<Vec<ScalingRecord>> {
    if opts.repetitions == 0 {
        return Err(invalid("repetitions must be at least 1"));
    }
    if let Some(&n) = pixels.iter().find(|&&n| n < 2) {
        return Err(invalid(format!("scaling runs need at least 2 pixels, got {n}")));
    }
    let mut records = Vec::with_capacity(2 * pixels.len());
    for &n in pixels {
        let config = sample_detector(n, opts.seed.wrapping_add(n as u64))?;
        let plan = ProbePlan::standard(n, opts.pulses_per_probe)?;
        let f = build_probe_matrix::<f64>(&plan)?;
        let stats = plan
            .alpha_sq_values
            .iter()
            .enumerate()
            .map(|(d, &a)| {
                simulate_coherent_probe::<f64>(
                    &config,
                    a,
                    NoiseModel::laser(),
                    plan.pulses_per_probe,
                    PulseStream::new(opts.seed, d as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let p = MeasurementMatrix::from_statistics(&stats)?;
        let over_limit = opts
            .memory_limit
            .is_some_and(|lim| estimated_bytes(n, plan.truncation) > lim);
        for method in [Method::Sdt, Method::Mdt] {
            let mut rec = ScalingRecord {
                n_pixels: n,
                method,
                solve_time: f64::NAN,
                peak_memory: 0,
                masked_fraction: 0.0,
                truncation: plan.truncation,
                assembly_time_s: f64::NAN,
                iterations: 0,
                repetitions: 0,
                memory_measured: false,
                failed: true,
            };
            if over_limit {
                log::warn!("N = {n}: estimated problem size exceeds the memory limit, skipped");
                records.push(rec);
                continue;
            }
            let mut times = Vec::new();
            let mut assembly = Vec::new();
            let mut mems = Vec::new();
            for _ in 0..opts.repetitions {
                match solve(method, &p, &f, opts.gamma, &opts.solver) {
                    Ok(sol) if sol.converged() => {
                        times.push(sol.wall_time);
                        assembly.push(sol.assembly_time);
                        mems.push(sol.peak_memory as f64);
                        rec.masked_fraction = sol.masked_fraction;
                        rec.iterations = sol.iterations;
                        rec.memory_measured = sol.peak_memory_measured;
                    }
                    Ok(sol) => log::warn!("N = {n} {method}: solver status {:?}", sol.status),
                    Err(e) => log::warn!("N = {n} {method}: {e}"),
                }
            }
            if !times.is_empty() {
                rec.repetitions = times.len();
                rec.solve_time = median(&mut times);
                rec.assembly_time_s = median(&mut assembly);
                rec.peak_memory = median(&mut mems) as u64;
                rec.failed = false;
            }
            log::info!(
                "N = {n} {method}: {:.4}s, {} bytes, masked {:.3}",
                rec.solve_time,
                rec.peak_memory,
                rec.masked_fraction
            );
            records.push(rec);
        }
        if let Some(rss) = peak_rss_bytes() {
            log::info!("process peak RSS after N = {n}: {rss} bytes");
        }
    }
    Ok(records)
}

pub fn write_records_csv<W: Write>(records: &[ScalingRecord], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in records {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    /// Weights `1/y²`, so residuals are relative errors.
    #[default]
    Relative,
    Uniform,
}

/// Fit of `y = a N^b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub a: f64,
    pub b: f64,
    /// Weighted RMS residual.
    pub residual: f64,
}

fn weighted_rms(points: &[(f64, f64)], w: &[f64], a: f64, b: f64) -> f64 {
    let ss: f64 = points
        .iter()
        .zip(w)
        .map(|(&(x, y), &wi)| wi * (a * x.powf(b) - y).powi(2))
        .sum();
    (ss / points.len() as f64).sqrt()
}

/// Weighted nonlinear least squares for `y = a N^b`, started from ordinary
/// least squares on `(ln N, ln y)` and refined by Levenberg-Marquardt.
pub fn fit_power_law(points: &[(f64, f64)], weights: WeightScheme) -> Result<FitResult> {
    if points.len() < 3 {
        return Err(Error::Underdetermined(points.len()));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite())) {
        return Err(invalid("power-law fits need positive finite data"));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.total_cmp(&q.1)));
    if pts.windows(2).all(|w| w[0].0 == w[1].0) {
        return Err(invalid("power-law fits need at least two distinct abscissae"));
    }
    let w: Vec<f64> = pts
        .iter()
        .map(|&(_, y)| match weights {
            WeightScheme::Relative => 1.0 / (y * y),
            WeightScheme::Uniform => 1.0,
        })
        .collect();

    // Log-log ordinary least squares.
    let n = pts.len() as f64;
    let lx: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let mut b = sxy / sxx;
    let mut a = (my - b * mx).exp();

    // Levenberg-Marquardt in (ln a, b) keeps a positive.
    let mut la = a.ln();
    let mut mu = 1e-3;
    let mut cost = weighted_rms(&pts, &w, a, b);
    for _ in 0..200 {
        let (mut jtj, mut jtr) = ([[0.0f64; 2]; 2], [0.0f64; 2]);
        for (i, &(x, y)) in pts.iter().enumerate() {
            let model = (la + b * x.ln()).exp();
            let r = model - y;
            let j = [model, model * x.ln()];
            for p in 0..2 {
                jtr[p] += w[i] * j[p] * r;
                for q in 0..2 {
                    jtj[p][q] += w[i] * j[p] * j[q];
                }
            }
        }
        let mut improved = false;
        for _ in 0..30 {
            let a11 = jtj[0][0] * (1.0 + mu);
            let a22 = jtj[1][1] * (1.0 + mu);
            let a12 = jtj[0][1];
            let det = a11 * a22 - a12 * a12;
            if det == 0.0 || !det.is_finite() {
                mu *= 10.0;
                continue;
            }
            let d0 = -(a22 * jtr[0] - a12 * jtr[1]) / det;
            let d1 = -(a11 * jtr[1] - a12 * jtr[0]) / det;
            let (na, nb) = (la + d0, b + d1);
            let c = weighted_rms(&pts, &w, na.exp(), nb);
            if c <= cost {
                let small = d0.abs() < 1e-15 * (1.0 + la.abs()) && d1.abs() < 1e-15 * (1.0 + b.abs());
                la = na;
                b = nb;
                cost = c;
                mu = (mu * 0.1).max(1e-12);
                improved = !small;
                break;
            }
            mu *= 10.0;
        }
        if !improved {
            break;
        }
    }
    a = la.exp();
    Ok(FitResult {
        a,
        b,
        residual: weighted_rms(&pts, &w, a, b),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    Time,
    Memory,
}

/// Fits one method's time or memory over the non-failed records.
pub fn fit_records(
    records: &[ScalingRecord],
    method: Method,
    quantity: Quantity,
    weights: WeightScheme,
) -> Result<FitResult> {
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.method == method && !r.failed)
        .map(|r| {
            let y = match quantity {
                Quantity::Time => r.solve_time,
                Quantity::Memory => r.peak_memory as f64,
            };
            (r.n_pixels as f64, y)
        })
        .collect();
    fit_power_law(&pts, weights)
}

/// Largest integer `N` with `a N^b <= budget`, or `None` when even `N = 1`
/// exceeds the budget.
pub fn extrapolate(fit: &FitResult, budget: f64) -> Result<Option<u64>> {
    if !(fit.b > 0.0) || !(fit.a > 0.0) {
        return Err(invalid("extrapolation needs a > 0 and b > 0"));
    }
    if !(budget >= 0.0) {
        return Err(invalid("budget must be nonnegative"));
    }
    let cost = |n: u64| fit.a * (n as f64).powf(fit.b);
    if cost(1) > budget {
        return Ok(None);
    }
    let mut n = (budget / fit.a).powf(1.0 / fit.b).floor() as u64;
    while n > 1 && cost(n) > budget {
        n -= 1;
    }
    while cost(n + 1) <= budget {
        n += 1;
    }
    Ok(Some(n))
}

/// Time and memory fits for both methods.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFits {
    pub time_sdt: FitResult,
    pub time_mdt: FitResult,
    pub memory_sdt: FitResult,
    pub memory_mdt: FitResult,
    pub weights: WeightScheme,
}

impl ScalingFits {
    pub fn from_records(records: &[ScalingRecord], weights: WeightScheme) -> Result<Self> {
        Ok(Self {
            time_sdt: fit_records(records, Method::Sdt, Quantity::Time, weights)?,
            time_mdt: fit_records(records, Method::Mdt, Quantity::Time, weights)?,
            memory_sdt: fit_records(records, Method::Sdt, Quantity::Memory, weights)?,
            memory_mdt: fit_records(records, Method::Mdt, Quantity::Memory, weights)?,
            weights,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn exact_power_law_is_recovered() {
        let pts: Vec<(f64, f64)> = [10.0, 20.0, 30.0, 40.0, 60.0].iter().map(|&n| (n, 2.0 * n * n * n)).collect();
        let fit = fit_power_law(&pts, WeightScheme::Relative).unwrap();
        assert!((fit.a - 2.0).abs() < 1e-10);
        assert!((fit.b - 3.0).abs() < 1e-10);
        let uniform = fit_power_law(&pts, WeightScheme::Uniform).unwrap();
        assert!((uniform.b - 3.0).abs() < 1e-10);
    }

    #[test]
    fn perturbed_exponent_stays_close() {
        let eps = [0.01, -0.01, 0.005, -0.008, 0.01, -0.003];
        let pts: Vec<(f64, f64)> = [5.0f64, 10.0, 20.0, 40.0, 80.0, 160.0]
            .iter()
            .zip(eps)
            .map(|(&n, e)| (n, 2.0 * n.powi(3) * (1.0 + e)))
            .collect();
        let fit = fit_power_law(&pts, WeightScheme::Relative).unwrap();
        assert!((2.9..=3.1).contains(&fit.b), "b = {}", fit.b);
    }

    #[test]
    fn order_does_not_matter() {
        let pts = vec![(10.0, 3.1), (20.0, 19.0), (40.0, 170.0), (30.0, 62.0)];
        let mut rev = pts.clone();
        rev.reverse();
        assert_eq!(
            fit_power_law(&pts, WeightScheme::Relative).unwrap(),
            fit_power_law(&rev, WeightScheme::Relative).unwrap()
        );
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(
            fit_power_law(&[(1.0, 1.0), (2.0, 4.0)], WeightScheme::Relative),
            Err(Error::Underdetermined(2))
        ));
    }

    #[test]
    fn extrapolation_examples() {
        let fit = FitResult {
            a: 0.85e-6,
            b: 3.58,
            residual: 0.0,
        };
        let n = extrapolate(&fit, 1024.0).unwrap().unwrap();
        assert!((320..=360).contains(&n), "{n}");
        assert!(fit.a * (n as f64).powf(fit.b) <= 1024.0);
        assert!(fit.a * ((n + 1) as f64).powf(fit.b) > 1024.0);
        assert_eq!(extrapolate(&fit, 1e-7).unwrap(), None);
        let doubled = extrapolate(&fit, 2048.0).unwrap().unwrap() as f64;
        assert_relative_eq!(doubled / n as f64, 2f64.powf(1.0 / 3.58), max_relative = 0.01);
        let bad = FitResult { b: 0.0, ..fit };
        assert!(extrapolate(&bad, 1.0).is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn single_pixel_count_gives_two_records() {
        let opts = ScalingOptions {
            repetitions: 1,
            pulses_per_probe: 2000,
            ..Default::default()
        };
        let recs = run_scaling(&[3], &opts).unwrap();
        assert_eq!(recs.len(), 2);
        assert!(recs.iter().all(|r| !r.failed && r.solve_time > 0.0 && r.peak_memory > 0));
        let mut buf = Vec::new();
        write_records_csv(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("n_pixels,method,time_s,mem_bytes,masked_fraction,M"));
        assert!(run_scaling(&[1], &opts).is_err());
    }

    #[test]
    fn memory_limit_flags_records() {
        let opts = ScalingOptions {
            repetitions: 1,
            pulses_per_probe: 100,
            memory_limit: Some(1),
            ..Default::default()
        };
        let recs = run_scaling(&[2], &opts).unwrap();
        assert!(recs.iter().all(|r| r.failed));
    }
}
