//! Photon-number reconstruction by expectation maximization with an entropy
//! correction.
//!
//! One step maps `f` to
//!
//! ```text
//! f_k ← R_k f_k − λ (ln f_k + S) f_k
//! R_k = Σ_n p_n Π[k,n] / Σ_k' Π[k',n] f_k'
//! S   = −Σ_k f_k ln f_k
//! ```
//!
//! followed by flooring at `floor_eps` and renormalization.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::detector::ClickStatistics;
use crate::error::{invalid, Error, Result};
use crate::metrics::fidelity;
use crate::scalar::{l1_norm, Real};
use crate::tomography::PovmMatrix;

/// Tolerance on the total mass of a valid distribution.
pub const PND_SUM_TOL: f64 = 1e-10;

/// Photon-number distribution over `0..=M`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pnd<T> {
    probs: Vec<T>,
}

impl<T: Real> Pnd<T> {
    pub fn new(probs: Vec<T>) -> Result<Self> {
        if probs.is_empty() {
            return Err(invalid("a distribution needs at least one entry"));
        }
        if let Some(p) = probs.iter().find(|p| !(**p >= T::zero())) {
            return Err(invalid(format!("distribution entry {p} is negative")));
        }
        let total: T = probs.iter().copied().sum();
        let tol = T::lit(PND_SUM_TOL).max(T::eps() * T::from_usize_lossy(8 * probs.len()));
        if !((total - T::one()).abs() <= tol) {
            return Err(invalid(format!("distribution sums to {total}, expected 1")));
        }
        Ok(Self { probs })
    }

    /// Divides by the total mass before validating.
    pub fn normalized(mut probs: Vec<T>) -> Result<Self> {
        let total: T = probs.iter().copied().sum();
        if !(total > T::zero()) {
            return Err(invalid("distribution has no mass"));
        }
        probs.iter_mut().for_each(|p| *p /= total);
        Self::new(probs)
    }

    /// Point mass on `k` photons within `0..=truncation`.
    pub fn fock(k: usize, truncation: usize) -> Result<Self> {
        if k > truncation {
            return Err(invalid(format!("photon number {k} exceeds truncation {truncation}")));
        }
        let mut probs = vec![T::zero(); truncation + 1];
        probs[k] = T::one();
        Ok(Self { probs })
    }

    pub fn uniform(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(invalid("a distribution needs at least one entry"));
        }
        Ok(Self {
            probs: vec![T::one() / T::from_usize_lossy(len); len],
        })
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn into_vec(self) -> Vec<T> {
        self.probs
    }

    pub fn truncation(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn mean(&self) -> T {
        self.probs
            .iter()
            .enumerate()
            .map(|(k, &p)| T::from_usize_lossy(k) * p)
            .sum()
    }

    /// Extends the support with zeros up to `truncation`.
    pub fn zero_padded(&self, truncation: usize) -> Self {
        let mut probs = self.probs.clone();
        if probs.len() < truncation + 1 {
            probs.resize(truncation + 1, T::zero());
        }
        Self { probs }
    }

    /// CSV with header `k,probability`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["k", "probability"])?;
        for (k, p) in self.probs.iter().enumerate() {
            wr.write_record([k.to_string(), p.as_f64().to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut probs = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec?;
            let p: f64 = rec
                .get(1)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| invalid(format!("row {i}: bad probability column")))?;
            probs.push(T::lit(p));
        }
        Self::new(probs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmeOptions {
    pub lambda: f64,
    pub max_iter: usize,
    /// Stop once the L1 change between iterates drops below this.
    pub convergence_tol: f64,
    /// Entries are kept at or above this value so `ln f` stays finite.
    pub floor_eps: f64,
}

impl Default for EmeOptions {
    fn default() -> Self {
        Self {
            lambda: 0.02,
            max_iter: 100_000,
            convergence_tol: 1e-9,
            floor_eps: 1e-12,
        }
    }
}

impl EmeOptions {
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if !(self.floor_eps > 0.0 && self.floor_eps <= 1e-8) {
            return Err(invalid(format!("floor_eps must lie in (0, 1e-8], got {}", self.floor_eps)));
        }
        if !(self.convergence_tol > 0.0) || self.max_iter == 0 {
            return Err(invalid("convergence_tol must be positive and max_iter at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmeDiagnostics {
    pub iterations: usize,
    pub final_change: f64,
    pub lambda: f64,
    pub converged: bool,
    pub log_likelihood: f64,
}

impl EmeDiagnostics {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Clone, Debug)]
pub struct EmeResult<T> {
    pub pnd: Pnd<T>,
    pub diagnostics: EmeDiagnostics,
}

/// Validated view of the inputs shared by every iteration.
struct EmeProblem<'a, T> {
    p: &'a [T],
    /// Column-major copy of `Π` with round-off negatives clamped.
    columns: Vec<Vec<T>>,
    outcomes: Vec<usize>,
}

impl<'a, T: Real> EmeProblem<'a, T> {
    fn new(p: &'a [T], povm: &PovmMatrix<T>) -> Result<Self> {
        let pi = povm.values();
        if p.len() != pi.cols() {
            return Err(Error::ShapeMismatch(format!(
                "{} click outcomes but the POVM has {}",
                p.len(),
                pi.cols()
            )));
        }
        let total: T = p.iter().copied().sum();
        let tol = T::lit(1e-10).max(T::eps() * T::from_usize_lossy(8 * p.len()));
        if !((total - T::one()).abs() <= tol) || p.iter().any(|v| !(*v >= T::zero())) {
            return Err(invalid(format!("click probabilities must form a distribution (sum {total})")));
        }
        let columns: Vec<Vec<T>> = (0..pi.cols())
            .map(|n| pi.column(n).into_iter().map(|v| v.max(T::zero())).collect())
            .collect();
        let outcomes: Vec<usize> = (0..p.len()).filter(|&n| p[n] > T::zero()).collect();
        for &n in &outcomes {
            if columns[n].iter().all(|&v| v == T::zero()) {
                return Err(Error::ModelMismatch {
                    outcome: n,
                    probability: p[n].as_f64(),
                });
            }
        }
        Ok(Self { p, columns, outcomes })
    }

    fn predicted(&self, f: &[T], n: usize) -> T {
        self.columns[n].iter().zip(f).map(|(&a, &b)| a * b).sum()
    }

    fn step(&self, f: &[T], lambda: T, floor: T) -> Result<Vec<T>> {
        let mut r = vec![T::zero(); f.len()];
        for &n in &self.outcomes {
            let q = self.predicted(f, n);
            if !(q > T::zero()) {
                return Err(Error::ModelMismatch {
                    outcome: n,
                    probability: self.p[n].as_f64(),
                });
            }
            let w = self.p[n] / q;
            for (rk, &pik) in r.iter_mut().zip(&self.columns[n]) {
                *rk += w * pik;
            }
        }
        let mut next: Vec<T> = if lambda > T::zero() {
            let s = -f
                .iter()
                .filter(|&&v| v > T::zero())
                .map(|&v| v * v.ln())
                .sum::<T>();
            f.iter()
                .zip(&r)
                .map(|(&fk, &rk)| rk * fk - lambda * (fk.ln() + s) * fk)
                .collect()
        } else {
            f.iter().zip(&r).map(|(&fk, &rk)| rk * fk).collect()
        };
        for v in next.iter_mut() {
            if !(*v >= floor) {
                *v = floor;
            }
        }
        let total: T = next.iter().copied().sum();
        next.iter_mut().for_each(|v| *v /= total);
        Ok(next)
    }

    fn log_likelihood(&self, f: &[T]) -> T {
        self.outcomes
            .iter()
            .map(|&n| self.p[n] * self.predicted(f, n).ln())
            .sum()
    }
}

/// One iteration from `f`, including flooring and renormalization.
pub fn eme_step<T: Real>(
    p: &ClickStatistics<T>,
    povm: &PovmMatrix<T>,
    f: &[T],
    lambda: f64,
    floor_eps: f64,
) -> Result<Vec<T>> {
    let problem = EmeProblem::new(&p.probs, povm)?;
    if f.len() != povm.values().rows() {
        return Err(Error::ShapeMismatch(format!(
            "distribution has {} entries, the POVM {} rows",
            f.len(),
            povm.values().rows()
        )));
    }
    problem.step(f, T::lit(lambda), T::lit(floor_eps))
}

/// `Σ_n p_n ln(Σ_k Π[k,n] f_k)` over outcomes with `p_n > 0`.
pub fn log_likelihood<T: Real>(p: &ClickStatistics<T>, povm: &PovmMatrix<T>, f: &[T]) -> Result<T> {
    let problem = EmeProblem::new(&p.probs, povm)?;
    Ok(problem.log_likelihood(f))
}

/// Runs the iteration from the uniform distribution.
pub fn eme_reconstruct<T: Real>(
    p: &ClickStatistics<T>,
    povm: &PovmMatrix<T>,
    opts: &EmeOptions,
) -> Result<EmeResult<T>> {
    opts.validate()?;
    let problem = EmeProblem::new(&p.probs, povm)?;
    let len = povm.values().rows();
    let lambda = T::lit(opts.lambda);
    let floor = T::lit(opts.floor_eps);
    let tol = T::lit(opts.convergence_tol);
    let mut f = vec![T::one() / T::from_usize_lossy(len); len];
    let mut change = T::infinity();
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let next = problem.step(&f, lambda, floor)?;
        change = l1_norm(&next.iter().zip(&f).map(|(&a, &b)| a - b).collect::<Vec<T>>());
        f = next;
        iterations += 1;
        if change < tol {
            break;
        }
    }
    let converged = change < tol;
    if !converged {
        log::warn!(
            "reconstruction stopped after {iterations} iterations with L1 change {:.3e}",
            change.as_f64()
        );
    }
    let diagnostics = EmeDiagnostics {
        iterations,
        final_change: change.as_f64(),
        lambda: opts.lambda,
        converged,
        log_likelihood: problem.log_likelihood(&f).as_f64(),
    };
    Ok(EmeResult {
        pnd: Pnd::normalized(f)?,
        diagnostics,
    })
}

/// Click statistics paired with the distribution that produced them.
#[derive(Clone, Debug)]
pub struct LabeledStatistics<T> {
    pub clicks: ClickStatistics<T>,
    pub truth: Pnd<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSweepRow {
    pub lambda: f64,
    pub mean_fidelity: f64,
    pub min_fidelity: f64,
    pub max_iterations: usize,
}

/// Mean reconstruction fidelity over `cases` for each `λ`.
pub fn lambda_sweep<T: Real>(
    cases: &[LabeledStatistics<T>],
    povm: &PovmMatrix<T>,
    lambdas: &[f64],
    base: &EmeOptions,
) -> Result<Vec<LambdaSweepRow>> {
    if cases.is_empty() || lambdas.is_empty() {
        return Err(invalid("lambda sweep needs at least one case and one lambda"));
    }
    lambdas
        .iter()
        .map(|&lambda| {
            let opts = EmeOptions { lambda, ..base.clone() };
            let mut fids = Vec::with_capacity(cases.len());
            let mut max_iterations = 0;
            for case in cases {
                let res = eme_reconstruct(&case.clicks, povm, &opts)?;
                let width = res.pnd.truncation().max(case.truth.truncation());
                let fid = fidelity(
                    res.pnd.zero_padded(width).probs(),
                    case.truth.zero_padded(width).probs(),
                )?;
                fids.push(fid.as_f64());
                max_iterations = max_iterations.max(res.diagnostics.iterations);
            }
            Ok(LambdaSweepRow {
                lambda,
                mean_fidelity: fids.iter().sum::<f64>() / fids.len() as f64,
                min_fidelity: fids.iter().cloned().fold(f64::INFINITY, f64::min),
                max_iterations,
            })
        })
        .collect()
}

pub fn write_lambda_sweep_csv<W: Write>(rows: &[LambdaSweepRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{exact_povm, sample_detector};
    use crate::linalg::Matrix;
    use crate::metrics::poisson_pnd;
    use approx::assert_relative_eq;

    fn identity_povm(n: usize) -> PovmMatrix<f64> {
        PovmMatrix::from_matrix(Matrix::identity(n + 1)).unwrap()
    }

    #[test]
    fn identity_povm_recovers_click_distribution() {
        let p = ClickStatistics::new(vec![0.1, 0.6, 0.3], 1).unwrap();
        let res = eme_reconstruct(&p, &identity_povm(2), &EmeOptions::with_lambda(0.0)).unwrap();
        for (a, b) in res.pnd.probs().iter().zip(&p.probs) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        assert!(res.diagnostics.converged);
        assert!(res.diagnostics.iterations <= 3);
    }

    #[test]
    fn uniform_input_stays_uniform() {
        let p = ClickStatistics::new(vec![0.25; 4], 1).unwrap();
        let povm = identity_povm(3);
        let f = vec![0.25; 4];
        let next = eme_step(&p, &povm, &f, 0.0, 1e-12).unwrap();
        assert_eq!(next, f);
    }

    #[test]
    fn zero_probability_outcomes_floor_and_renormalize() {
        let p = ClickStatistics::new(vec![0.0, 1.0], 1).unwrap();
        let res = eme_reconstruct(&p, &identity_povm(1), &EmeOptions::default()).unwrap();
        let f = res.pnd.probs();
        assert!(f[0] >= 0.999e-12 && f[0] < 1e-9);
        assert_relative_eq!(f.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn em_likelihood_is_nondecreasing() {
        let cfg = sample_detector(4, 3).unwrap();
        let povm = exact_povm::<f64>(&cfg, 12).unwrap();
        // Exact click distribution of a Poisson(3) input.
        let truth = poisson_pnd(3.0f64, 12);
        let mut p = vec![0.0; 5];
        for (k, fk) in truth.probs().iter().enumerate() {
            for (n, pn) in p.iter_mut().enumerate() {
                *pn += fk * povm.values()[(k, n)];
            }
        }
        let p = ClickStatistics::new(p, 1).unwrap();
        let mut f = vec![1.0 / 13.0; 13];
        let mut prev = log_likelihood(&p, &povm, &f).unwrap();
        for _ in 0..200 {
            f = eme_step(&p, &povm, &f, 0.0, 1e-12).unwrap();
            let ll = log_likelihood(&p, &povm, &f).unwrap();
            assert!(ll >= prev - 1e-13, "{ll} < {prev}");
            prev = ll;
        }
    }

    #[test]
    fn iterates_stay_in_simplex_with_entropy_term() {
        let cfg = sample_detector(3, 5).unwrap();
        let povm = exact_povm::<f64>(&cfg, 10).unwrap();
        let p = ClickStatistics::new(vec![0.2, 0.3, 0.3, 0.2], 1).unwrap();
        let mut f = vec![1.0 / 11.0; 11];
        for _ in 0..50 {
            f = eme_step(&p, &povm, &f, 0.5, 1e-12).unwrap();
            assert!(f.iter().all(|&v| v >= 1e-12));
            assert_relative_eq!(f.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn impossible_outcome_is_model_mismatch() {
        // Outcome 1 has probability but no photon number can produce it.
        let povm = PovmMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let p = ClickStatistics::new(vec![0.5, 0.5], 1).unwrap();
        match eme_reconstruct(&p, &povm, &EmeOptions::default()) {
            Err(Error::ModelMismatch { outcome, .. }) => assert_eq!(outcome, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn deterministic_and_validated() {
        let cfg = sample_detector(3, 9).unwrap();
        let povm = exact_povm::<f64>(&cfg, 8).unwrap();
        let p = ClickStatistics::new(vec![0.1, 0.4, 0.4, 0.1], 1).unwrap();
        let a = eme_reconstruct(&p, &povm, &EmeOptions::default()).unwrap();
        let b = eme_reconstruct(&p, &povm, &EmeOptions::default()).unwrap();
        assert_eq!(a.pnd, b.pnd);
        let bad = EmeOptions {
            floor_eps: 1e-3,
            ..EmeOptions::default()
        };
        assert!(eme_reconstruct(&p, &povm, &bad).is_err());
        let short = ClickStatistics::new(vec![0.5, 0.5], 1).unwrap();
        assert!(eme_reconstruct(&short, &povm, &EmeOptions::default()).is_err());
    }

    #[test]
    fn pnd_validation_and_csv() {
        assert!(Pnd::new(vec![0.5, 0.4]).is_err());
        assert!(Pnd::new(vec![1.1, -0.1]).is_err());
        let f = Pnd::new(vec![0.25, 0.5, 0.25]).unwrap();
        assert_relative_eq!(f.mean(), 1.0);
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("k,probability"));
        assert_eq!(Pnd::<f64>::read_csv(buf.as_slice()).unwrap(), f);
    }

    #[test]
    fn single_lambda_sweep_row() {
        let povm = identity_povm(2);
        let truth = Pnd::new(vec![0.2, 0.5, 0.3]).unwrap();
        let cases = vec![LabeledStatistics {
            clicks: ClickStatistics::new(truth.probs().to_vec(), 1).unwrap(),
            truth,
        }];
        let rows = lambda_sweep(&cases, &povm, &[0.0], &EmeOptions::default()).unwrap();
        assert_eq!(rows.len(), 1);
        assert_relative_eq!(rows[0].mean_fidelity, 1.0, epsilon = 1e-10);
    }
}
