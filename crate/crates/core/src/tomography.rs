//! Detector tomography: recover the diagonal POVM `Π` from probe statistics.
//!
//! Both solvers minimize
//!
//! ```text
//! ½‖P − FΠ‖²_F + (γ/2) Σ_n Σ_k (Π[k,n] − Π[k+1,n])²
//! ```
//!
//! subject to `Π·1 = 1` and `Π >= 0`. The modified solver additionally fixes
//! to zero every entry where the unconstrained minimizer
//! `Π̃ = (FᵀF + γU)⁻¹ FᵀP` is nonpositive.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detector::ClickStatistics;
use crate::error::{invalid, Error, Result};
use crate::linalg::{symmetric_eigenvalues, Cholesky, Matrix};
use crate::memory::PeakScope;
use crate::probe::ProbeMatrix;
use crate::qp::{qp_solve, Coupling, IterationLog, QpBlock, QpProblem, QpStatus, SolverOptions};
use crate::scalar::Real;

/// Row-sum tolerance of a valid POVM.
pub const POVM_ROW_SUM_TOL: f64 = 1e-8;
/// Most negative entry a valid POVM may carry before clamping.
pub const POVM_NEGATIVE_TOL: f64 = 1e-10;
/// Row-sum tolerance of a measurement matrix.
pub const MEASUREMENT_ROW_SUM_TOL: f64 = 1e-12;
pub const DEFAULT_GAMMA: f64 = 1e-4;

fn scaled_tol<T: Real>(base: f64, len: usize) -> T {
    T::lit(base).max(T::eps() * T::from_usize_lossy(8 * len.max(1)))
}

/// Diagonal POVM, rows indexed by photon number `k = 0..=M`, columns by
/// click outcome `n = 0..=N`.
#[derive(Clone, Debug, PartialEq)]
pub struct PovmMatrix<T> {
    values: Matrix<T>,
}

impl<T: Real> PovmMatrix<T> {
    pub fn from_matrix(values: Matrix<T>) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(invalid("a POVM needs at least one row and one outcome"));
        }
        let tol: T = scaled_tol(POVM_ROW_SUM_TOL, values.cols());
        for (k, s) in values.row_sums().into_iter().enumerate() {
            if !((s - T::one()).abs() <= tol) {
                return Err(invalid(format!("POVM row {k} sums to {s}, expected 1")));
            }
        }
        let neg: T = scaled_tol(POVM_NEGATIVE_TOL, 1);
        if let Some(v) = values.as_slice().iter().find(|&&v| !(v >= -neg)) {
            return Err(invalid(format!("POVM entry {v} is negative")));
        }
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        Self::from_matrix(Matrix::from_rows(rows)?)
    }

    /// Wraps solver output that may violate the invariants, such as the best
    /// iterate of a solve that did not converge.
    pub(crate) fn from_matrix_unchecked(values: Matrix<T>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &Matrix<T> {
        &self.values
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.values
    }

    pub fn n_pixels(&self) -> usize {
        self.values.cols() - 1
    }

    pub fn truncation(&self) -> usize {
        self.values.rows() - 1
    }

    pub fn max_row_sum_deviation(&self) -> T {
        self.values
            .row_sums()
            .into_iter()
            .fold(T::zero(), |m, s| m.max((s - T::one()).abs()))
    }

    /// Copy with small negative entries set to zero.
    pub fn clamped(&self) -> Self {
        Self {
            values: self.values.map(|v| v.max(T::zero())),
        }
    }

    /// CSV with header `k,n0,...,nN`, negative entries clamped to zero.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["k".to_string()];
        header.extend((0..self.values.cols()).map(|n| format!("n{n}")));
        wr.write_record(&header)?;
        for k in 0..self.values.rows() {
            let mut rec = vec![k.to_string()];
            rec.extend(
                self.values
                    .row(k)
                    .iter()
                    .map(|v| v.max(T::zero()).as_f64().to_string()),
            );
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut rows = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec?;
            let k: usize = rec
                .get(0)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| invalid(format!("row {i}: bad photon-number column")))?;
            if k != i {
                return Err(invalid(format!("row {i}: expected k = {i}, got {k}")));
            }
            let row = rec
                .iter()
                .skip(1)
                .map(|f| f.trim().parse::<f64>().map(T::lit).map_err(|e| invalid(format!("row {i}: {e}"))))
                .collect::<Result<Vec<T>>>()?;
            rows.push(row);
        }
        Self::from_rows(&rows)
    }

    /// Reads the `values` field of a JSON document written by
    /// [`QpSolution::to_json`] (or any object with that field).
    pub fn from_json(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            values: Vec<Vec<f64>>,
        }
        let doc: Doc = serde_json::from_str(s)?;
        let rows: Vec<Vec<T>> = doc
            .values
            .into_iter()
            .map(|r| r.into_iter().map(T::lit).collect())
            .collect();
        Self::from_rows(&rows)
    }

    fn rows_f64(&self) -> Vec<Vec<f64>> {
        (0..self.values.rows())
            .map(|k| self.values.row(k).iter().map(|v| v.max(T::zero()).as_f64()).collect())
            .collect()
    }
}

/// Measured click statistics `P`, one probe per row.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementMatrix<T> {
    values: Matrix<T>,
}

impl<T: Real> MeasurementMatrix<T> {
    pub fn new(values: Matrix<T>) -> Result<Self> {
        if values.rows() == 0 || values.cols() < 2 {
            return Err(invalid("measurements need at least one probe and two outcomes"));
        }
        if values.as_slice().iter().any(|v| !(*v >= T::zero())) {
            return Err(invalid("measured probabilities must be nonnegative"));
        }
        let tol: T = scaled_tol(MEASUREMENT_ROW_SUM_TOL, values.cols());
        for (d, s) in values.row_sums().into_iter().enumerate() {
            if !((s - T::one()).abs() <= tol) {
                return Err(invalid(format!("measurement row {d} sums to {s}, expected 1")));
            }
        }
        Ok(Self { values })
    }

    /// Rescales every row to unit sum before validating.
    pub fn normalized(mut values: Matrix<T>) -> Result<Self> {
        for d in 0..values.rows() {
            let row = values.row_mut(d);
            let s: T = row.iter().copied().sum();
            if !(s > T::zero()) {
                return Err(invalid(format!("measurement row {d} has no mass")));
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        Self::new(values)
    }

    pub fn from_statistics(stats: &[ClickStatistics<T>]) -> Result<Self> {
        let rows: Vec<Vec<T>> = stats.iter().map(|s| s.probs.clone()).collect();
        Self::new(Matrix::from_rows(&rows)?)
    }

    pub fn values(&self) -> &Matrix<T> {
        &self.values
    }

    pub fn n_probes(&self) -> usize {
        self.values.rows()
    }

    pub fn n_pixels(&self) -> usize {
        self.values.cols() - 1
    }

    /// CSV with header `alpha_sq,n0,...,nN`.
    pub fn write_csv<W: Write>(&self, alpha_sq: &[f64], w: W) -> Result<()> {
        if alpha_sq.len() != self.values.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} probe means for {} measurement rows",
                alpha_sq.len(),
                self.values.rows()
            )));
        }
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["alpha_sq".to_string()];
        header.extend((0..self.values.cols()).map(|n| format!("n{n}")));
        wr.write_record(&header)?;
        for (d, a) in alpha_sq.iter().enumerate() {
            let mut rec = vec![a.to_string()];
            rec.extend(self.values.row(d).iter().map(|v| v.as_f64().to_string()));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Inverse of [`Self::write_csv`]; returns the probe means alongside.
    pub fn read_csv<R: Read>(r: R) -> Result<(Self, Vec<f64>)> {
        let mut rd = csv::Reader::from_reader(r);
        let mut alpha = Vec::new();
        let mut rows = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec?;
            let vals = rec
                .iter()
                .map(|f| f.trim().parse::<f64>().map_err(|e| invalid(format!("row {i}: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            if vals.len() < 3 {
                return Err(invalid(format!("row {i}: too few columns")));
            }
            alpha.push(vals[0]);
            rows.push(vals[1..].iter().map(|&v| T::lit(v)).collect::<Vec<T>>());
        }
        Ok((Self::new(Matrix::from_rows(&rows)?)?, alpha))
    }
}

/// Path-graph Laplacian `U = Σ_k (e_k − e_{k+1})(e_k − e_{k+1})ᵀ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SmoothingOperator {
    size: usize,
}

impl SmoothingOperator {
    pub fn new(size: usize) -> Self {
        Self { size }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn to_matrix<T: Real>(&self) -> Matrix<T> {
        let n = self.size;
        let mut u = Matrix::zeros(n, n);
        for k in 0..n.saturating_sub(1) {
            u[(k, k)] += T::one();
            u[(k + 1, k + 1)] += T::one();
            u[(k, k + 1)] -= T::one();
            u[(k + 1, k)] -= T::one();
        }
        u
    }

    /// `Σ_k (v_k − v_{k+1})²`.
    pub fn quadratic_form<T: Real>(&self, v: &[T]) -> T {
        v.windows(2).map(|w| (w[0] - w[1]) * (w[0] - w[1])).sum()
    }
}

/// `FᵀF + γU`.
pub fn normal_matrix<T: Real>(f: &ProbeMatrix<T>, gamma: T) -> Result<Matrix<T>> {
    let mut q = f.values().transpose_matmul(f.values())?;
    q.add_scaled(&SmoothingOperator::new(q.rows()).to_matrix(), gamma)?;
    Ok(q)
}

/// Smallest eigenvalue of `FᵀF + γU`; positive means the unconstrained
/// problem is well posed.
pub fn smallest_normal_eigenvalue<T: Real>(f: &ProbeMatrix<T>, gamma: T) -> Result<T> {
    let q = normal_matrix(f, gamma)?;
    Ok(symmetric_eigenvalues(&q).first().copied().unwrap_or(T::zero()))
}

fn check_shapes<T: Real>(p: &MeasurementMatrix<T>, f: &ProbeMatrix<T>) -> Result<()> {
    if p.n_probes() != f.n_probes() {
        return Err(Error::ShapeMismatch(format!(
            "{} measurement rows but {} probes",
            p.n_probes(),
            f.n_probes()
        )));
    }
    Ok(())
}

/// Closed-form minimizer without constraints.
#[derive(Clone, Debug)]
pub struct UnconstrainedSolution<T> {
    pub values: Matrix<T>,
    /// `‖(FᵀF+γU)Π̃ − FᵀP‖_F / ‖FᵀP‖_F`.
    pub relative_residual: T,
    /// Largest `|(Π̃·1)_k − 1|`.
    pub max_row_sum_deviation: T,
}

/// `Π̃ = (FᵀF + γU)⁻¹ FᵀP` by Cholesky factorization.
///
/// The row sums of `Π̃` equal one whenever every row of `F` sums to one. With
/// truncated probe rows they deviate by about the truncated mass; the
/// deviation is reported and logged above 1e-6 rather than rejected.
pub fn unconstrained_solution<T: Real>(
    p: &MeasurementMatrix<T>,
    f: &ProbeMatrix<T>,
    gamma: T,
) -> Result<UnconstrainedSolution<T>> {
    if !(gamma > T::zero()) {
        return Err(invalid(format!("gamma must be positive, got {gamma}")));
    }
    check_shapes(p, f)?;
    let q = normal_matrix(f, gamma)?;
    let b = f.values().transpose_matmul(p.values())?;
    let chol = Cholesky::factor(&q).map_err(|_| Error::Conditioning {
        min_eigenvalue: symmetric_eigenvalues(&q).first().map_or(0.0, |v| v.as_f64()),
    })?;
    let mut x = chol.solve_matrix(&b);
    // One refinement step against the original system.
    let r = b.sub(&q.matmul(&x)?)?;
    x.add_scaled(&chol.solve_matrix(&r), T::one())?;
    let resid = b.sub(&q.matmul(&x)?)?.frobenius_norm();
    let b_norm = b.frobenius_norm();
    let relative_residual = if b_norm > T::zero() { resid / b_norm } else { resid };
    let limit = T::lit(1e-8).max(T::eps() * T::lit(100.0));
    if !(relative_residual <= limit) {
        return Err(Error::Conditioning {
            min_eigenvalue: symmetric_eigenvalues(&q).first().map_or(0.0, |v| v.as_f64()),
        });
    }
    let max_row_sum_deviation = x
        .row_sums()
        .into_iter()
        .fold(T::zero(), |m, s| m.max((s - T::one()).abs()));
    if max_row_sum_deviation.as_f64() > 1e-6 {
        log::info!(
            "unconstrained solution rows deviate from unit sum by {:.3e} (probe rows are truncated)",
            max_row_sum_deviation.as_f64()
        );
    }
    Ok(UnconstrainedSolution {
        values: x,
        relative_residual,
        max_row_sum_deviation,
    })
}

/// Entries fixed to zero by the modified solver.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityMask {
    rows: usize,
    cols: usize,
    fixed: Vec<bool>,
    /// Rows that were fully masked and released again.
    pub fallback_rows: Vec<usize>,
}

impl SparsityMask {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            fixed: vec![false; rows * cols],
            fallback_rows: Vec::new(),
        }
    }

    /// Masks `Π̃[k,n] <= 0`, releasing any row that would be fully masked.
    pub fn with_fallback<T: Real>(unconstrained: &Matrix<T>) -> Self {
        let (rows, cols) = unconstrained.shape();
        let mut fixed: Vec<bool> = unconstrained.as_slice().iter().map(|&v| v <= T::zero()).collect();
        let mut fallback_rows = Vec::new();
        for k in 0..rows {
            let row = &mut fixed[k * cols..(k + 1) * cols];
            if row.iter().all(|&f| f) {
                row.iter_mut().for_each(|f| *f = false);
                fallback_rows.push(k);
            }
        }
        if !fallback_rows.is_empty() {
            log::warn!("rows {:?} were fully masked; solving them unmasked", fallback_rows);
        }
        Self {
            rows,
            cols,
            fixed,
            fallback_rows,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_fixed(&self, k: usize, n: usize) -> bool {
        self.fixed[k * self.cols + n]
    }

    pub fn n_masked(&self) -> usize {
        self.fixed.iter().filter(|&&f| f).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        if self.fixed.is_empty() {
            0.0
        } else {
            self.n_masked() as f64 / self.fixed.len() as f64
        }
    }
}

/// Strict mask `Π̃[k,n] <= 0`; fails if some row would lose every variable.
pub fn sparsity_mask<T: Real>(unconstrained: &Matrix<T>) -> Result<SparsityMask> {
    let mask = SparsityMask::with_fallback(unconstrained);
    if mask.fallback_rows.is_empty() {
        Ok(mask)
    } else {
        Err(Error::DegenerateMask {
            rows: mask.fallback_rows,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sdt,
    Mdt,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Sdt => "sdt",
            Method::Mdt => "mdt",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sdt" => Ok(Method::Sdt),
            "mdt" => Ok(Method::Mdt),
            other => Err(invalid(format!("unknown method {other:?}, expected sdt or mdt"))),
        }
    }
}

/// Tomography result with solver diagnostics.
#[derive(Clone, Debug)]
pub struct QpSolution<T> {
    pub method: Method,
    pub gamma: f64,
    pub povm: PovmMatrix<T>,
    pub objective: T,
    pub kkt_primal_residual: f64,
    pub kkt_dual_residual: f64,
    pub kkt_complementarity: f64,
    pub iterations: usize,
    pub status: QpStatus,
    /// Seconds spent in the QP solve, excluding problem assembly.
    pub wall_time: f64,
    pub assembly_time: f64,
    /// Peak heap bytes of assembly plus solve.
    pub peak_memory: usize,
    /// True when `peak_memory` comes from the tracking allocator rather than
    /// explicit accounting.
    pub peak_memory_measured: bool,
    pub n_variables: usize,
    pub masked_fraction: f64,
    pub fallback_rows: Vec<usize>,
    pub residual_history: Vec<IterationLog>,
}

#[derive(Serialize)]
struct SolutionDoc<'a> {
    method: Method,
    gamma: f64,
    n_pixels: usize,
    truncation: usize,
    objective: f64,
    kkt_primal_residual: f64,
    kkt_dual_residual: f64,
    kkt_complementarity: f64,
    iterations: usize,
    status: &'a QpStatus,
    wall_time: f64,
    peak_memory: usize,
    n_variables: usize,
    masked_fraction: f64,
    values: Vec<Vec<f64>>,
}

impl<T: Real> QpSolution<T> {
    pub fn converged(&self) -> bool {
        self.status == QpStatus::Converged
    }

    /// POVM plus metadata and solver statistics.
    pub fn to_json(&self) -> Result<String> {
        let doc = SolutionDoc {
            method: self.method,
            gamma: self.gamma,
            n_pixels: self.povm.n_pixels(),
            truncation: self.povm.truncation(),
            objective: self.objective.as_f64(),
            kkt_primal_residual: self.kkt_primal_residual,
            kkt_dual_residual: self.kkt_dual_residual,
            kkt_complementarity: self.kkt_complementarity,
            iterations: self.iterations,
            status: &self.status,
            wall_time: self.wall_time,
            peak_memory: self.peak_memory,
            n_variables: self.n_variables,
            masked_fraction: self.masked_fraction,
            values: self.povm.rows_f64(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }
}

/// `½‖P − FΠ‖²_F + (γ/2) Σ_n Σ_k (Π[k,n] − Π[k+1,n])²`.
pub fn tomography_objective<T: Real>(
    p: &MeasurementMatrix<T>,
    f: &ProbeMatrix<T>,
    gamma: T,
    povm: &Matrix<T>,
) -> Result<T> {
    let fit = p.values().sub(&f.values().matmul(povm)?)?.frobenius_norm();
    Ok(T::lit(0.5) * (fit * fit + gamma * roughness(povm)))
}

/// `Σ_n Σ_k (Π[k,n] − Π[k+1,n])²`; large values flag spiky POVM elements.
pub fn roughness<T: Real>(povm: &Matrix<T>) -> T {
    let u = SmoothingOperator::new(povm.rows());
    (0..povm.cols()).map(|n| u.quadratic_form(&povm.column(n))).sum()
}

pub fn solve_sdt<T: Real>(
    p: &MeasurementMatrix<T>,
    f: &ProbeMatrix<T>,
    gamma: T,
    opts: &SolverOptions,
) -> Result<QpSolution<T>> {
    solve_masked(p, f, gamma, None, Method::Sdt, opts)
}

/// Masks from [`SparsityMask::with_fallback`] applied to `Π̃`, then solves the
/// reduced problem.
pub fn solve_mdt<T: Real>(
    p: &MeasurementMatrix<T>,
    f: &ProbeMatrix<T>,
    gamma: T,
    opts: &SolverOptions,
) -> Result<QpSolution<T>> {
    let scope_start = Instant::now();
    let tilde = unconstrained_solution(p, f, gamma)?;
    let mask = SparsityMask::with_fallback(&tilde.values);
    log::info!(
        "masked {} of {} variables ({:.1}%) in {:.3}s",
        mask.n_masked(),
        tilde.values.rows() * tilde.values.cols(),
        100.0 * mask.masked_fraction(),
        scope_start.elapsed().as_secs_f64()
    );
    solve_masked(p, f, gamma, Some(&mask), Method::Mdt, opts)
}

/// Solves the tomography QP with an optional mask of entries fixed to zero.
pub fn solve_masked<T: Real>(
    p: &MeasurementMatrix<T>,
    f: &ProbeMatrix<T>,
    gamma: T,
    mask: Option<&SparsityMask>,
    method: Method,
    opts: &SolverOptions,
) -> Result<QpSolution<T>> {
    if !(gamma >= T::zero()) {
        return Err(invalid(format!("gamma must be nonnegative, got {gamma}")));
    }
    check_shapes(p, f)?;
    let rows = f.truncation() + 1;
    let cols = p.n_pixels() + 1;
    if let Some(m) = mask {
        if m.shape() != (rows, cols) {
            return Err(Error::ShapeMismatch(format!(
                "mask is {:?}, POVM is {:?}",
                m.shape(),
                (rows, cols)
            )));
        }
        let empty: Vec<usize> = (0..rows).filter(|&k| (0..cols).all(|n| m.is_fixed(k, n))).collect();
        if !empty.is_empty() {
            return Err(Error::DegenerateMask { rows: empty });
        }
    }

    let scope = PeakScope::start();
    let t0 = Instant::now();
    let q = normal_matrix(f, gamma)?;
    let b = f.values().transpose_matmul(p.values())?;
    let keeps: Vec<Vec<usize>> = (0..cols)
        .map(|n| (0..rows).filter(|&k| mask.is_none_or(|m| !m.is_fixed(k, n))).collect())
        .collect();
    let blocks: Vec<QpBlock<T>> = keeps
        .iter()
        .enumerate()
        .map(|(n, keep)| QpBlock {
            hessian: q.principal_submatrix(keep),
            linear: keep.iter().map(|&k| -b[(k, n)]).collect(),
            coupling: Coupling::Selection(keep.clone()),
            nonneg: vec![true; keep.len()],
        })
        .collect();
    let problem = QpProblem {
        blocks,
        rhs: vec![T::one(); rows],
    };
    let assembly_time = t0.elapsed().as_secs_f64();
    let n_variables = problem.n_vars();
    let result = qp_solve(&problem, opts)?;
    let measured_peak = scope.finish();
    let peak_memory_measured = measured_peak.is_some();
    let peak_memory = measured_peak.unwrap_or_else(|| {
        let elem = std::mem::size_of::<T>();
        problem.bytes() + result.workspace_bytes + (q.rows() * q.cols() + b.rows() * b.cols()) * elem
    });

    let mut values = Matrix::zeros(rows, cols);
    for (n, (keep, xb)) in keeps.iter().zip(&result.x).enumerate() {
        for (&k, &v) in keep.iter().zip(xb) {
            values[(k, n)] = v;
        }
    }
    let povm = if result.converged() {
        PovmMatrix::from_matrix(values.clone()).unwrap_or_else(|e| {
            log::warn!("converged POVM fails validation: {e}");
            PovmMatrix::from_matrix_unchecked(values.clone())
        })
    } else {
        log::warn!("tomography solve returned a non-converged iterate ({:?})", result.status);
        PovmMatrix::from_matrix_unchecked(values.clone())
    };
    let objective = tomography_objective(p, f, gamma, &values)?;
    let masked_fraction = mask.map_or(0.0, SparsityMask::masked_fraction);
    Ok(QpSolution {
        method,
        gamma: gamma.as_f64(),
        povm,
        objective,
        kkt_primal_residual: result.residuals.primal,
        kkt_dual_residual: result.residuals.dual,
        kkt_complementarity: result.residuals.complementarity,
        iterations: result.iterations,
        status: result.status,
        wall_time: result.solve_seconds,
        assembly_time,
        peak_memory,
        peak_memory_measured,
        n_variables,
        masked_fraction,
        fallback_rows: mask.map(|m| m.fallback_rows.clone()).unwrap_or_default(),
        residual_history: result.history,
    })
}

pub fn solve<T: Real>(
    method: Method,
    p: &MeasurementMatrix<T>,
    f: &ProbeMatrix<T>,
    gamma: T,
    opts: &SolverOptions,
) -> Result<QpSolution<T>> {
    match method {
        Method::Sdt => solve_sdt(p, f, gamma, opts),
        Method::Mdt => solve_mdt(p, f, gamma, opts),
    }
}

/// Single-click probability with no incident photons, `Π[0,1]`.
pub fn dark_count_probability<T: Real>(povm: &PovmMatrix<T>) -> Result<T> {
    if povm.n_pixels() == 0 {
        return Err(invalid("dark counts need at least one pixel"));
    }
    Ok(povm.values()[(0, 1)])
}

/// `‖A − B‖_F / ‖B‖_F`.
pub fn povm_relative_error<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let denom = b.frobenius_norm();
    if denom == T::zero() {
        return Err(invalid("reference POVM has zero norm"));
    }
    Ok(a.sub(b)?.frobenius_norm() / denom)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaSweepRow {
    pub gamma: f64,
    pub p_dark: f64,
    pub objective: f64,
    pub roughness: f64,
    pub masked_fraction: f64,
    pub iterations: usize,
    pub converged: bool,
    pub wall_time: f64,
}

/// Runs [`solve_mdt`] for each `γ`.
pub fn gamma_sweep<T: Real>(
    p: &MeasurementMatrix<T>,
    f: &ProbeMatrix<T>,
    gammas: &[f64],
    opts: &SolverOptions,
) -> Result<Vec<GammaSweepRow>> {
    if gammas.is_empty() {
        return Err(invalid("gamma sweep needs at least one value"));
    }
    gammas
        .iter()
        .map(|&g| {
            let sol = solve_mdt(p, f, T::lit(g), opts)?;
            Ok(GammaSweepRow {
                gamma: g,
                p_dark: dark_count_probability(&sol.povm)?.as_f64(),
                objective: sol.objective.as_f64(),
                roughness: roughness(sol.povm.values()).as_f64(),
                masked_fraction: sol.masked_fraction,
                iterations: sol.iterations,
                converged: sol.converged(),
                wall_time: sol.wall_time,
            })
        })
        .collect()
}

pub fn write_gamma_sweep_csv<W: Write>(rows: &[GammaSweepRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}
