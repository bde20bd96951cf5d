//! Convex quadratic programs with block-separable objectives.
//!
//! Solves
//!
//! ```text
//! minimize    sum_b  ½ x_bᵀ H_b x_b + c_bᵀ x_b
//! subject to  sum_b  A_b x_b = rhs
//!             x_b[i] >= 0   for every variable flagged nonnegative
//! ```
//!
//! The only coupling between blocks is the shared equality constraint. Each
//! Newton step therefore needs one Cholesky factorization per block plus one
//! factorization of the `m x m` Schur complement `sum_b A_b K_b⁻¹ A_bᵀ`.
//!
//! The method is a Mehrotra predictor-corrector interior point iteration.
//! Once the barrier parameter is small the solver guesses the active set,
//! solves the equality-constrained problem on the remaining variables and
//! accepts that point if it passes the KKT check. The reported residual
//! triple is always recomputed from the returned point.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{Cholesky, Matrix};
use crate::scalar::{dot, inf_norm, Real};

/// How a block's variables enter the shared equality constraints.
#[derive(Clone, Debug)]
pub enum Coupling<T> {
    /// Dense `m x n_b` coefficient matrix.
    Dense(Matrix<T>),
    /// Variable `i` enters constraint row `rows[i]` with coefficient one.
    Selection(Vec<usize>),
}

impl<T: Real> Coupling<T> {
    fn n_vars(&self) -> usize {
        match self {
            Coupling::Dense(a) => a.cols(),
            Coupling::Selection(rows) => rows.len(),
        }
    }

    /// `out += A[:, keep] * v` where `v` is indexed like `keep`.
    fn apply_add(&self, keep: &[usize], v: &[T], out: &mut [T]) {
        match self {
            Coupling::Dense(a) => {
                for (r, o) in out.iter_mut().enumerate() {
                    let row = a.row(r);
                    *o += keep.iter().zip(v).map(|(&i, &x)| row[i] * x).sum::<T>();
                }
            }
            Coupling::Selection(rows) => {
                for (&i, &x) in keep.iter().zip(v) {
                    out[rows[i]] += x;
                }
            }
        }
    }

    /// `A[:, keep]ᵀ y`.
    fn transpose_apply(&self, keep: &[usize], y: &[T]) -> Vec<T> {
        match self {
            Coupling::Dense(a) => keep
                .iter()
                .map(|&i| (0..a.rows()).map(|r| a[(r, i)] * y[r]).sum())
                .collect(),
            Coupling::Selection(rows) => keep.iter().map(|&i| y[rows[i]]).collect(),
        }
    }

    fn coefficient(&self, row: usize, var: usize) -> T {
        match self {
            Coupling::Dense(a) => a[(row, var)],
            Coupling::Selection(rows) => {
                if rows[var] == row {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

/// One separable block of the objective.
#[derive(Clone, Debug)]
pub struct QpBlock<T> {
    pub hessian: Matrix<T>,
    pub linear: Vec<T>,
    pub coupling: Coupling<T>,
    pub nonneg: Vec<bool>,
}

impl<T: Real> QpBlock<T> {
    pub fn n_vars(&self) -> usize {
        self.linear.len()
    }

    fn objective(&self, x: &[T]) -> T {
        let hx = self.hessian.mul_vec(x);
        T::lit(0.5) * dot(x, &hx) + dot(&self.linear, x)
    }
}

#[derive(Clone, Debug)]
pub struct QpProblem<T> {
    pub blocks: Vec<QpBlock<T>>,
    pub rhs: Vec<T>,
}

impl<T: Real> QpProblem<T> {
    /// Single-block problem with a dense constraint matrix.
    pub fn dense(
        hessian: Matrix<T>,
        linear: Vec<T>,
        eq_matrix: Matrix<T>,
        eq_rhs: Vec<T>,
        nonneg: Vec<bool>,
    ) -> Result<Self> {
        let p = Self {
            blocks: vec![QpBlock {
                hessian,
                linear,
                coupling: Coupling::Dense(eq_matrix),
                nonneg,
            }],
            rhs: eq_rhs,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn n_constraints(&self) -> usize {
        self.rhs.len()
    }

    pub fn n_vars(&self) -> usize {
        self.blocks.iter().map(QpBlock::n_vars).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.rhs.len();
        for (b, blk) in self.blocks.iter().enumerate() {
            let n = blk.n_vars();
            if blk.hessian.shape() != (n, n) || blk.nonneg.len() != n || blk.coupling.n_vars() != n {
                return Err(Error::ShapeMismatch(format!("block {b} has inconsistent sizes")));
            }
            match &blk.coupling {
                Coupling::Dense(a) if a.rows() != m => {
                    return Err(Error::ShapeMismatch(format!(
                        "block {b} coupling has {} rows, expected {m}",
                        a.rows()
                    )))
                }
                Coupling::Selection(rows) if rows.iter().any(|&r| r >= m) => {
                    return Err(Error::ShapeMismatch(format!(
                        "block {b} selects a constraint row out of range"
                    )))
                }
                _ => {}
            }
            let scale = blk.hessian.max_abs().max(T::one());
            if !blk.hessian.is_symmetric(T::lit(1e-12) * scale) {
                return Err(invalid(format!("block {b} Hessian is not symmetric")));
            }
        }
        Ok(())
    }

    /// Bytes held by the problem data.
    pub fn bytes(&self) -> usize {
        let elem = std::mem::size_of::<T>();
        let blocks: usize = self
            .blocks
            .iter()
            .map(|b| {
                let n = b.n_vars();
                let coupling = match &b.coupling {
                    Coupling::Dense(a) => a.rows() * a.cols() * elem,
                    Coupling::Selection(r) => r.len() * std::mem::size_of::<usize>(),
                };
                n * n * elem + n * elem + n + coupling
            })
            .sum();
        blocks + self.rhs.len() * elem
    }

    pub fn objective(&self, x: &[Vec<T>]) -> T {
        self.blocks
            .iter()
            .zip(x)
            .map(|(b, xb)| b.objective(xb))
            .sum()
    }

    /// Farkas certificate for rows that cannot be satisfied by sign alone:
    /// every variable in the row is nonnegative with coefficients of one sign
    /// opposite to the right-hand side (or the row is empty).
    fn structural_infeasibility(&self) -> Option<(usize, Vec<T>)> {
        let m = self.rhs.len();
        let mut has_pos = vec![false; m];
        let mut has_neg = vec![false; m];
        for blk in &self.blocks {
            for var in 0..blk.n_vars() {
                let rows: Vec<usize> = match &blk.coupling {
                    Coupling::Selection(rows) => vec![rows[var]],
                    Coupling::Dense(_) => (0..m).collect(),
                };
                for r in rows {
                    let a = blk.coupling.coefficient(r, var);
                    if a == T::zero() {
                        continue;
                    }
                    if !blk.nonneg[var] {
                        has_pos[r] = true;
                        has_neg[r] = true;
                    } else if a > T::zero() {
                        has_pos[r] = true;
                    } else {
                        has_neg[r] = true;
                    }
                }
            }
        }
        for r in 0..m {
            let b = self.rhs[r];
            // y = ±e_r satisfies Aᵀy <= 0 on the row's variables and bᵀy > 0.
            if b > T::zero() && !has_pos[r] {
                let mut y = vec![T::zero(); m];
                y[r] = T::one();
                return Some((r, y));
            }
            if b < T::zero() && !has_neg[r] {
                let mut y = vec![T::zero(); m];
                y[r] = -T::one();
                return Some((r, y));
            }
        }
        None
    }
}

/// Solver settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Bound on each KKT residual (absolute, infinity norm).
    pub tol: f64,
    /// Target for the total complementarity gap relative to `max(1, |obj|)`.
    /// Iteration continues past the `tol` certificate until this is met or
    /// progress stalls.
    pub gap_tol: f64,
    pub max_iter: usize,
    /// Worker threads for the per-block kernels; `None` uses the ambient pool.
    pub threads: Option<usize>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            gap_tol: 1e-13,
            max_iter: 200,
            threads: None,
        }
    }
}

impl SolverOptions {
    pub fn from_json(s: &str) -> Result<Self> {
        let o: Self = serde_json::from_str(s)?;
        if !(o.tol > 0.0) || !(o.gap_tol > 0.0) || o.max_iter == 0 {
            return Err(invalid("solver options need tol > 0, gap_tol > 0 and max_iter >= 1"));
        }
        Ok(o)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Converged,
    MaxIterations,
    Infeasible,
    NumericalFailure,
}

/// Residuals at one interior-point iterate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub mu: f64,
    pub step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    pub primal: f64,
    pub dual: f64,
    /// Largest `|x_i s_i|`.
    pub complementarity: f64,
    /// `Σ |x_i s_i|`, which bounds the objective gap of a feasible point.
    pub gap: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.complementarity)
    }

    /// All residuals within `tol` and the total gap within `tol` relative to
    /// the objective magnitude (floored at one).
    pub fn certified(&self, tol: f64, objective: f64) -> bool {
        self.max() <= tol && self.gap <= tol * objective.abs().max(1.0)
    }

    fn score(&self, objective: f64) -> f64 {
        self.max().max(self.gap / objective.abs().max(1.0))
    }
}

#[derive(Clone, Debug)]
pub struct QpResult<T> {
    pub status: QpStatus,
    /// Primal solution, one vector per block.
    pub x: Vec<Vec<T>>,
    /// Multipliers of the equality constraints.
    pub y: Vec<T>,
    /// Multipliers of the nonnegativity bounds, zero on free variables.
    pub s: Vec<Vec<T>>,
    pub objective: T,
    pub residuals: KktResiduals,
    pub iterations: usize,
    pub polished: bool,
    pub history: Vec<IterationLog>,
    /// Farkas vector `y` with `Aᵀy <= 0` on nonnegative variables, `Aᵀy = 0`
    /// on free ones and `rhsᵀy > 0`, when infeasibility was detected.
    pub certificate: Option<Vec<T>>,
    pub solve_seconds: f64,
    /// Bytes held by the solver's factorizations and iterates.
    pub workspace_bytes: usize,
}

impl<T: Real> QpResult<T> {
    pub fn converged(&self) -> bool {
        self.status == QpStatus::Converged
    }
}

struct BlockFactor<T> {
    keep: Vec<usize>,
    chol: Cholesky<T>,
}

struct KktFactor<T> {
    blocks: Vec<BlockFactor<T>>,
    schur: Option<Cholesky<T>>,
}

fn factor_with_shift<T: Real>(mut k: Matrix<T>) -> Option<Cholesky<T>> {
    if let Ok(c) = Cholesky::factor(&k) {
        return Some(c);
    }
    let n = k.rows();
    let scale = (0..n).fold(T::zero(), |m, i| m.max(k[(i, i)].abs())).max(T::one());
    let mut shift = T::eps() * T::lit(10.0) * scale;
    let mut applied = T::zero();
    for _ in 0..12 {
        for i in 0..n {
            k[(i, i)] += shift - applied;
        }
        applied = shift;
        if let Ok(c) = Cholesky::factor(&k) {
            log::debug!("Cholesky needed a diagonal shift of {}", shift);
            return Some(c);
        }
        shift *= T::lit(100.0);
    }
    None
}

impl<T: Real> KktFactor<T> {
    /// Factorizes `(H_b + diag_b)` restricted to `keep_b` and the Schur
    /// complement of the equality constraints.
    fn new(problem: &QpProblem<T>, diag: &[Vec<T>], keep: Vec<Vec<usize>>) -> Option<Self> {
        let m = problem.n_constraints();
        let parts: Vec<Option<(BlockFactor<T>, Matrix<T>)>> = problem
            .blocks
            .par_iter()
            .zip(diag.par_iter())
            .zip(keep.into_par_iter())
            .map(|((blk, d), keep)| {
                let mut k = blk.hessian.principal_submatrix(&keep);
                for (i, &gi) in keep.iter().enumerate() {
                    k[(i, i)] += d[gi];
                }
                let chol = factor_with_shift(k)?;
                let contrib = schur_contribution(&blk.coupling, &keep, &chol, m);
                Some((BlockFactor { keep, chol }, contrib))
            })
            .collect();
        let mut blocks = Vec::with_capacity(parts.len());
        let mut schur = Matrix::zeros(m, m);
        for part in parts {
            let (bf, contrib) = part?;
            schur
                .add_scaled(&contrib, T::one())
                .expect("schur contributions share a shape");
            blocks.push(bf);
        }
        let schur = if m > 0 {
            Some(factor_with_shift(schur)?)
        } else {
            None
        };
        Some(Self { blocks, schur })
    }

    /// Solves `(H + D) dx - Aᵀ dy = g`, `A dx = r` with eliminated variables
    /// held at zero.
    fn solve(&self, problem: &QpProblem<T>, g: &[Vec<T>], r: &[T]) -> (Vec<Vec<T>>, Vec<T>) {
        let m = problem.n_constraints();
        let u: Vec<Vec<T>> = self
            .blocks
            .par_iter()
            .zip(g.par_iter())
            .map(|(bf, gb)| {
                let mut v: Vec<T> = bf.keep.iter().map(|&i| gb[i]).collect();
                bf.chol.solve_in_place(&mut v);
                v
            })
            .collect();
        let mut dy = r.to_vec();
        let mut au = vec![T::zero(); m];
        for ((bf, blk), ub) in self.blocks.iter().zip(&problem.blocks).zip(&u) {
            blk.coupling.apply_add(&bf.keep, ub, &mut au);
        }
        for (d, a) in dy.iter_mut().zip(&au) {
            *d -= *a;
        }
        if let Some(s) = &self.schur {
            s.solve_in_place(&mut dy);
        }
        let dx = self
            .blocks
            .par_iter()
            .zip(problem.blocks.par_iter())
            .zip(u.into_par_iter())
            .map(|((bf, blk), ub)| {
                let mut w = blk.coupling.transpose_apply(&bf.keep, &dy);
                bf.chol.solve_in_place(&mut w);
                let mut full = vec![T::zero(); blk.n_vars()];
                for ((&i, a), b) in bf.keep.iter().zip(ub).zip(w) {
                    full[i] = a + b;
                }
                full
            })
            .collect();
        (dx, dy)
    }

    fn bytes(&self) -> usize {
        let elem = std::mem::size_of::<T>();
        let blocks: usize = self
            .blocks
            .iter()
            .map(|b| b.keep.len() * b.keep.len() * elem + b.keep.len() * 8)
            .sum();
        blocks + self.schur.as_ref().map_or(0, |s| s.dim() * s.dim() * elem)
    }
}

/// `A[:, keep] K⁻¹ A[:, keep]ᵀ` for one block.
fn schur_contribution<T: Real>(
    coupling: &Coupling<T>,
    keep: &[usize],
    chol: &Cholesky<T>,
    m: usize,
) -> Matrix<T> {
    let mut out = Matrix::zeros(m, m);
    let n = keep.len();
    if m == 0 || n == 0 {
        return out;
    }
    match coupling {
        Coupling::Selection(rows) => {
            let kinv = spd_inverse_from_factor(chol);
            for i in 0..n {
                let ri = rows[keep[i]];
                for j in 0..n {
                    out[(ri, rows[keep[j]])] += kinv[(i, j)];
                }
            }
        }
        Coupling::Dense(a) => {
            // W = L⁻¹ A[:, keep]ᵀ, contribution = WᵀW.
            let mut w = Matrix::zeros(m, n);
            for r in 0..m {
                let row = w.row_mut(r);
                for (j, &i) in keep.iter().enumerate() {
                    row[j] = a[(r, i)];
                }
                chol.forward_substitute(row);
            }
            for r1 in 0..m {
                for r2 in 0..=r1 {
                    let v = dot(w.row(r1), w.row(r2));
                    out[(r1, r2)] = v;
                    out[(r2, r1)] = v;
                }
            }
        }
    }
    out
}

/// Inverse of `L Lᵀ` via the triangular inverse of `L`.
fn spd_inverse_from_factor<T: Real>(chol: &Cholesky<T>) -> Matrix<T> {
    let n = chol.dim();
    let l = chol.factor_matrix();
    // Row-major lower-triangular inverse.
    let mut linv = Matrix::zeros(n, n);
    for i in 0..n {
        linv[(i, i)] = T::one() / l[(i, i)];
        for j in 0..i {
            let mut s = T::zero();
            for k in j..i {
                s += l[(i, k)] * linv[(k, j)];
            }
            linv[(i, j)] = -s / l[(i, i)];
        }
    }
    let mut inv = Matrix::zeros(n, n);
    for k in 0..n {
        let row = linv.row(k);
        for i in 0..=k {
            let a = row[i];
            if a == T::zero() {
                continue;
            }
            for j in 0..=i {
                inv[(i, j)] += a * row[j];
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            inv[(j, i)] = inv[(i, j)];
        }
    }
    inv
}

struct Iterate<T> {
    x: Vec<Vec<T>>,
    y: Vec<T>,
    s: Vec<Vec<T>>,
}

fn primal_residual<T: Real>(problem: &QpProblem<T>, x: &[Vec<T>]) -> Vec<T> {
    let mut r: Vec<T> = problem.rhs.iter().map(|&b| -b).collect();
    for (blk, xb) in problem.blocks.iter().zip(x) {
        let all: Vec<usize> = (0..blk.n_vars()).collect();
        blk.coupling.apply_add(&all, xb, &mut r);
    }
    r
}

fn dual_residual<T: Real>(problem: &QpProblem<T>, it: &Iterate<T>) -> Vec<Vec<T>> {
    problem
        .blocks
        .par_iter()
        .zip(it.x.par_iter())
        .zip(it.s.par_iter())
        .map(|((blk, xb), sb)| {
            let all: Vec<usize> = (0..blk.n_vars()).collect();
            let aty = blk.coupling.transpose_apply(&all, &it.y);
            let hx = blk.hessian.mul_vec(xb);
            (0..blk.n_vars())
                .map(|i| hx[i] + blk.linear[i] - aty[i] - sb[i])
                .collect()
        })
        .collect()
}

/// Recomputes the residual triple at `(x, y, s)`, counting sign violations
/// of `x` and `s` on nonnegative variables as infeasibility.
fn kkt_residuals<T: Real>(problem: &QpProblem<T>, it: &Iterate<T>) -> KktResiduals {
    let rp = primal_residual(problem, &it.x);
    let rd = dual_residual(problem, it);
    let mut primal = inf_norm(&rp).as_f64();
    let mut dual = rd.iter().map(|v| inf_norm(v).as_f64()).fold(0.0, f64::max);
    let mut comp = 0.0f64;
    let mut gap = 0.0f64;
    for (blk, (xb, sb)) in problem.blocks.iter().zip(it.x.iter().zip(&it.s)) {
        for i in 0..blk.n_vars() {
            if blk.nonneg[i] {
                primal = primal.max((-xb[i]).as_f64());
                dual = dual.max((-sb[i]).as_f64());
                let c = (xb[i] * sb[i]).abs().as_f64();
                comp = comp.max(c);
                gap += c;
            }
        }
    }
    KktResiduals {
        primal,
        dual,
        complementarity: comp,
        gap,
    }
}

/// Solves the QP; see the module documentation for the method.
/// Iterations allowed past the `tol` certificate while chasing `gap_tol`.
const STALL_ITERATIONS: usize = 8;

pub fn qp_solve<T: Real>(problem: &QpProblem<T>, opts: &SolverOptions) -> Result<QpResult<T>> {
    problem.validate()?;
    match opts.threads {
        Some(n) if n > 0 => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| invalid(e.to_string()))?
            .install(|| solve_inner(problem, opts)),
        _ => solve_inner(problem, opts),
    }
}

fn solve_inner<T: Real>(problem: &QpProblem<T>, opts: &SolverOptions) -> Result<QpResult<T>> {
    let start = Instant::now();
    let m = problem.n_constraints();
    let shapes: Vec<usize> = problem.blocks.iter().map(QpBlock::n_vars).collect();
    let zeros = || -> Vec<Vec<T>> { shapes.iter().map(|&n| vec![T::zero(); n]).collect() };

    if let Some((row, cert)) = problem.structural_infeasibility() {
        log::warn!("equality row {row} cannot be satisfied with nonnegative variables");
        let it = Iterate {
            x: zeros(),
            y: vec![T::zero(); m],
            s: zeros(),
        };
        return Ok(QpResult {
            status: QpStatus::Infeasible,
            objective: problem.objective(&it.x),
            residuals: kkt_residuals(problem, &it),
            x: it.x,
            y: it.y,
            s: it.s,
            iterations: 0,
            polished: false,
            history: Vec::new(),
            certificate: Some(cert),
            solve_seconds: start.elapsed().as_secs_f64(),
            workspace_bytes: 0,
        });
    }

    let tol = opts.tol;
    let n_nonneg: usize = problem
        .blocks
        .iter()
        .map(|b| b.nonneg.iter().filter(|&&f| f).count())
        .sum();
    let all_keep: Vec<Vec<usize>> = shapes.iter().map(|&n| (0..n).collect()).collect();

    let mut it = Iterate {
        x: problem
            .blocks
            .iter()
            .map(|b| b.nonneg.iter().map(|&f| if f { T::one() } else { T::zero() }).collect())
            .collect(),
        y: vec![T::zero(); m],
        s: problem
            .blocks
            .iter()
            .map(|b| b.nonneg.iter().map(|&f| if f { T::one() } else { T::zero() }).collect())
            .collect(),
    };

    let mut history = Vec::new();
    let mut best: Option<(f64, Iterate<T>, KktResiduals)> = None;
    let mut workspace = 0usize;
    let mut last_active: Vec<Vec<usize>> = Vec::new();
    let mut status = QpStatus::MaxIterations;
    let mut iterations = 0;
    let mut polished = false;
    let mut last_step = 0.0;
    let mut certified_for = 0usize;

    for iter in 0..opts.max_iter {
        iterations = iter;
        let rp = primal_residual(problem, &it.x);
        let rd = dual_residual(problem, &it);
        let mu = if n_nonneg > 0 {
            it.x.iter()
                .zip(&it.s)
                .map(|(xb, sb)| dot(xb, sb))
                .sum::<T>()
                / T::from_usize_lossy(n_nonneg)
        } else {
            T::zero()
        };
        let res = kkt_residuals(problem, &it);
        history.push(IterationLog {
            iteration: iter,
            primal_residual: res.primal,
            dual_residual: res.dual,
            mu: mu.as_f64(),
            step: last_step,
        });
        let obj = problem.objective(&it.x).as_f64();
        let score = res.score(obj);
        if !score.is_finite() {
            status = QpStatus::NumericalFailure;
            break;
        }
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((
                score,
                Iterate {
                    x: it.x.clone(),
                    y: it.y.clone(),
                    s: it.s.clone(),
                },
                res.clone(),
            ));
        }
        if res.certified(tol, obj) {
            // |obj| can dwarf the part of the objective a caller cares about,
            // so keep tightening the gap while the steps still make progress.
            let accurate = res.gap <= opts.gap_tol * obj.abs().max(1.0);
            certified_for += 1;
            if accurate || certified_for > STALL_ITERATIONS || (certified_for > 1 && last_step < 1e-3) {
                status = QpStatus::Converged;
                break;
            }
        }
        if n_nonneg > 0 && mu.as_f64() < 1e-5_f64.max(tol) {
            if let Some((cand, cres)) = polish(problem, &it, tol, &mut last_active) {
                it = cand;
                let obj = problem.objective(&it.x).as_f64();
                best = Some((
                    cres.score(obj),
                    Iterate {
                        x: it.x.clone(),
                        y: it.y.clone(),
                        s: it.s.clone(),
                    },
                    cres,
                ));
                polished = true;
                status = QpStatus::Converged;
                iterations = iter + 1;
                break;
            }
        }
        let y_norm = inf_norm(&it.y).as_f64();
        if y_norm > 1e14 {
            status = QpStatus::Infeasible;
            break;
        }

        // Newton system with D = S X⁻¹ on nonnegative variables.
        let diag: Vec<Vec<T>> = problem
            .blocks
            .iter()
            .zip(it.x.iter().zip(&it.s))
            .map(|(b, (xb, sb))| {
                (0..b.n_vars())
                    .map(|i| if b.nonneg[i] { sb[i] / xb[i] } else { T::zero() })
                    .collect()
            })
            .collect();
        let Some(factor) = KktFactor::new(problem, &diag, all_keep.clone()) else {
            status = QpStatus::NumericalFailure;
            break;
        };
        workspace = workspace.max(factor.bytes());
        let neg_rp: Vec<T> = rp.iter().map(|&v| -v).collect();

        // Predictor.
        let rc_aff: Vec<Vec<T>> = it
            .x
            .iter()
            .zip(&it.s)
            .map(|(xb, sb)| xb.iter().zip(sb).map(|(&a, &b)| -a * b).collect())
            .collect();
        let (dx_a, dy_a, ds_a) = newton_direction(problem, &factor, &it, &rd, &rc_aff, &neg_rp);
        let alpha_aff = max_step(problem, &it, &dx_a, &ds_a, T::one());
        let mu_aff = if n_nonneg > 0 {
            let mut acc = T::zero();
            for (b, blk) in problem.blocks.iter().enumerate() {
                for i in 0..blk.n_vars() {
                    if blk.nonneg[i] {
                        acc += (it.x[b][i] + alpha_aff * dx_a[b][i]) * (it.s[b][i] + alpha_aff * ds_a[b][i]);
                    }
                }
            }
            acc / T::from_usize_lossy(n_nonneg)
        } else {
            T::zero()
        };
        let (dx, dy, ds) = if n_nonneg > 0 {
            let sigma = if mu > T::zero() {
                let ratio = (mu_aff / mu).max(T::zero()).min(T::one());
                ratio * ratio * ratio
            } else {
                T::zero()
            };
            let target = sigma * mu;
            let rc: Vec<Vec<T>> = problem
                .blocks
                .iter()
                .enumerate()
                .map(|(b, blk)| {
                    (0..blk.n_vars())
                        .map(|i| {
                            if blk.nonneg[i] {
                                target - it.x[b][i] * it.s[b][i] - dx_a[b][i] * ds_a[b][i]
                            } else {
                                T::zero()
                            }
                        })
                        .collect()
                })
                .collect();
            newton_direction(problem, &factor, &it, &rd, &rc, &neg_rp)
        } else {
            (dx_a, dy_a, ds_a)
        };

        let alpha = max_step(problem, &it, &dx, &ds, T::lit(0.99));
        last_step = alpha.as_f64();
        for b in 0..shapes.len() {
            for i in 0..shapes[b] {
                it.x[b][i] += alpha * dx[b][i];
                it.s[b][i] += alpha * ds[b][i];
            }
        }
        for (y, d) in it.y.iter_mut().zip(&dy) {
            *y += alpha * *d;
        }
        iterations = iter + 1;
    }

    let (x, y, s, residuals) = match status {
        QpStatus::Converged => {
            let res = kkt_residuals(problem, &it);
            (it.x, it.y, it.s, res)
        }
        _ => match best {
            Some((_, b, res)) => (b.x, b.y, b.s, res),
            None => {
                let res = kkt_residuals(problem, &it);
                (it.x, it.y, it.s, res)
            }
        },
    };
    if status == QpStatus::MaxIterations && residuals.certified(tol, problem.objective(&x).as_f64()) {
        status = QpStatus::Converged;
    }
    if status != QpStatus::Converged {
        log::warn!(
            "QP solve ended with status {:?} after {} iterations (residuals {:?})",
            status,
            iterations,
            residuals
        );
    }
    let elem = std::mem::size_of::<T>();
    let iterate_bytes = 4 * problem.n_vars() * elem + 2 * m * elem;
    Ok(QpResult {
        status,
        objective: problem.objective(&x),
        x,
        y,
        s,
        residuals,
        iterations,
        polished,
        history,
        certificate: None,
        solve_seconds: start.elapsed().as_secs_f64(),
        workspace_bytes: workspace + iterate_bytes,
    })
}

type Direction<T> = (Vec<Vec<T>>, Vec<T>, Vec<Vec<T>>);

/// Newton direction for complementarity target `rc` (per variable).
fn newton_direction<T: Real>(
    problem: &QpProblem<T>,
    factor: &KktFactor<T>,
    it: &Iterate<T>,
    rd: &[Vec<T>],
    rc: &[Vec<T>],
    neg_rp: &[T],
) -> Direction<T> {
    let g: Vec<Vec<T>> = problem
        .blocks
        .iter()
        .enumerate()
        .map(|(b, blk)| {
            (0..blk.n_vars())
                .map(|i| {
                    let mut v = -rd[b][i];
                    if blk.nonneg[i] {
                        v += rc[b][i] / it.x[b][i];
                    }
                    v
                })
                .collect()
        })
        .collect();
    let (dx, dy) = factor.solve(problem, &g, neg_rp);
    let ds = problem
        .blocks
        .iter()
        .enumerate()
        .map(|(b, blk)| {
            (0..blk.n_vars())
                .map(|i| {
                    if blk.nonneg[i] {
                        (rc[b][i] - it.s[b][i] * dx[b][i]) / it.x[b][i]
                    } else {
                        T::zero()
                    }
                })
                .collect()
        })
        .collect();
    (dx, dy, ds)
}

/// Largest step in `(0, 1]` keeping `x` and `s` positive, scaled by `frac`.
fn max_step<T: Real>(
    problem: &QpProblem<T>,
    it: &Iterate<T>,
    dx: &[Vec<T>],
    ds: &[Vec<T>],
    frac: T,
) -> T {
    let mut alpha = T::one();
    for (b, blk) in problem.blocks.iter().enumerate() {
        for i in 0..blk.n_vars() {
            if !blk.nonneg[i] {
                continue;
            }
            if dx[b][i] < T::zero() {
                alpha = alpha.min(-frac * it.x[b][i] / dx[b][i]);
            }
            if ds[b][i] < T::zero() {
                alpha = alpha.min(-frac * it.s[b][i] / ds[b][i]);
            }
        }
    }
    alpha.min(T::one())
}

/// Solves the equality-constrained problem on the variables the current
/// iterate considers inactive and returns it if it satisfies the KKT
/// conditions to `tol`.
///
/// `last_keep` remembers the previous guess so an unchanged active set is
/// not refactorized.
fn polish<T: Real>(
    problem: &QpProblem<T>,
    it: &Iterate<T>,
    tol: f64,
    last_keep: &mut Vec<Vec<usize>>,
) -> Option<(Iterate<T>, KktResiduals)> {
    let keep: Vec<Vec<usize>> = problem
        .blocks
        .iter()
        .enumerate()
        .map(|(b, blk)| {
            (0..blk.n_vars())
                .filter(|&i| !blk.nonneg[i] || it.x[b][i] > it.s[b][i])
                .collect()
        })
        .collect();
    if keep == *last_keep {
        return None;
    }
    *last_keep = keep.clone();
    let zero_diag: Vec<Vec<T>> = problem.blocks.iter().map(|b| vec![T::zero(); b.n_vars()]).collect();
    let factor = KktFactor::new(problem, &zero_diag, keep)?;
    // Minimizer of the reduced problem: H x - Aᵀy = -c, A x = rhs.
    let g: Vec<Vec<T>> = problem
        .blocks
        .iter()
        .map(|b| b.linear.iter().map(|&c| -c).collect())
        .collect();
    let (mut x, y) = factor.solve(problem, &g, &problem.rhs);
    // One step of iterative refinement on the reduced system.
    let probe = Iterate {
        x: x.clone(),
        y: y.clone(),
        s: problem.blocks.iter().map(|b| vec![T::zero(); b.n_vars()]).collect(),
    };
    let rd = dual_residual(problem, &probe);
    let rp = primal_residual(problem, &probe.x);
    let g2: Vec<Vec<T>> = factor
        .blocks
        .iter()
        .zip(&rd)
        .map(|(bf, r)| {
            let mut v = vec![T::zero(); r.len()];
            for &i in &bf.keep {
                v[i] = -r[i];
            }
            v
        })
        .collect();
    let neg_rp: Vec<T> = rp.iter().map(|&v| -v).collect();
    let (cx, cy) = factor.solve(problem, &g2, &neg_rp);
    for (xb, cb) in x.iter_mut().zip(&cx) {
        for (a, b) in xb.iter_mut().zip(cb) {
            *a += *b;
        }
    }
    let y: Vec<T> = y.iter().zip(&cy).map(|(&a, &b)| a + b).collect();

    let tol_t = T::lit(tol);
    for (blk, xb) in problem.blocks.iter().zip(x.iter_mut()) {
        #[allow(clippy::needless_range_loop)]
        for i in 0..blk.n_vars() {
            if blk.nonneg[i] && xb[i] < T::zero() {
                if xb[i] < -tol_t {
                    return None;
                }
                xb[i] = T::zero();
            }
        }
    }
    let mut cand = Iterate {
        x,
        y,
        s: problem.blocks.iter().map(|b| vec![T::zero(); b.n_vars()]).collect(),
    };
    // Bound multipliers from stationarity on the eliminated variables.
    let rd = dual_residual(problem, &cand);
    for (b, (bf, blk)) in factor.blocks.iter().zip(&problem.blocks).enumerate() {
        let mut inactive = vec![false; blk.n_vars()];
        for &i in &bf.keep {
            inactive[i] = true;
        }
        for i in 0..blk.n_vars() {
            if !inactive[i] {
                let si = rd[b][i];
                if si < -tol_t {
                    return None;
                }
                cand.s[b][i] = si.max(T::zero());
            }
        }
    }
    let res = kkt_residuals(problem, &cand);
    if res.certified(tol, problem.objective(&cand.x).as_f64()) {
        Some((cand, res))
    } else {
        log::debug!("polish rejected with residuals {:?}", res);
        None
    }
}
