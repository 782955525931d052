//! Abstract conic-program contract and the default solver backend.
//!
//! The planning engine only ever talks to [`ConicSolver`]: a linear
//! objective, linear equalities and inequalities, and second-order cone
//! blocks, with duals required for every row group. Any conforming solver
//! can be plugged in; the shipped backend is Clarabel.
//!
//! Dual sign convention: duals are the multipliers of the Lagrangian
//! `c'x + y'(A_eq x - b_eq) + z'(A_in x - b_in) + w'(A_soc x - b_soc)`,
//! so stationarity reads `c + Aᵀ(y,z,w) = 0`, inequality duals satisfy
//! `z ≥ 0`, and the sensitivity of the optimum to a right-hand side is the
//! negated dual.

use std::io::Write;
use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sparse row: list of (variable, coefficient) pairs.
pub type RowCoeffs = Vec<(usize, f64)>;

/// A second-order cone block: the vector `(rhs_0 - a_0·x, ..., rhs_d - a_d·x)`
/// must satisfy `s_0 ≥ ||(s_1, ..., s_d)||₂`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SocBlock {
    pub coeffs: Vec<RowCoeffs>,
    pub rhs: Vec<f64>,
}

impl SocBlock {
    pub fn dim(&self) -> usize {
        self.rhs.len()
    }
}

/// Conic program: minimize `objective · x` subject to equality rows,
/// inequality rows (`a·x ≤ rhs`), and second-order cone blocks.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ConicProblem {
    pub num_vars: usize,
    pub objective: Vec<f64>,
    pub eq_coeffs: Vec<RowCoeffs>,
    pub eq_rhs: Vec<f64>,
    pub ineq_coeffs: Vec<RowCoeffs>,
    pub ineq_rhs: Vec<f64>,
    pub soc_blocks: Vec<SocBlock>,
}

impl ConicProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, obj_coeff: f64) -> usize {
        self.num_vars += 1;
        self.objective.push(obj_coeff);
        self.num_vars - 1
    }

    /// Adds `coeffs · x = rhs`; returns the row index within the equality group.
    pub fn add_eq(&mut self, coeffs: RowCoeffs, rhs: f64) -> usize {
        self.eq_coeffs.push(coeffs);
        self.eq_rhs.push(rhs);
        self.eq_rhs.len() - 1
    }

    /// Adds `coeffs · x ≤ rhs`; returns the row index within the inequality group.
    pub fn add_ineq(&mut self, coeffs: RowCoeffs, rhs: f64) -> usize {
        self.ineq_coeffs.push(coeffs);
        self.ineq_rhs.push(rhs);
        self.ineq_rhs.len() - 1
    }

    /// Adds a second-order cone block; returns the block index.
    pub fn add_soc(&mut self, block: SocBlock) -> usize {
        assert!(block.dim() >= 2, "a second-order cone needs dimension >= 2");
        assert_eq!(block.coeffs.len(), block.rhs.len());
        self.soc_blocks.push(block);
        self.soc_blocks.len() - 1
    }

    pub fn num_rows(&self) -> usize {
        self.eq_rhs.len()
            + self.ineq_rhs.len()
            + self.soc_blocks.iter().map(SocBlock::dim).sum::<usize>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    /// Converged slightly short of the requested tolerances.
    NearOptimal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConicSolution {
    pub status: SolveStatus,
    pub objective: f64,
    pub x: Vec<f64>,
    /// Equality duals (free sign).
    pub eq_duals: Vec<f64>,
    /// Inequality duals (nonnegative).
    pub ineq_duals: Vec<f64>,
    /// Dual vector per cone block (lies in the cone).
    pub soc_duals: Vec<Vec<f64>>,
    pub iterations: u32,
    pub solve_time_s: f64,
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("problem is primal infeasible")]
    Infeasible,
    #[error("problem is unbounded (dual infeasible)")]
    Unbounded,
    #[error("iteration limit reached after {0} iterations")]
    IterationLimit(u32),
    #[error("time limit reached")]
    TimeLimit,
    #[error("solver numerical failure: {0}")]
    Numerical(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    pub tol_feas: f64,
    pub tol_gap_abs: f64,
    pub tol_gap_rel: f64,
    pub max_iterations: u32,
    pub time_limit_s: f64,
    pub verbose: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol_feas: 1e-9,
            tol_gap_abs: 1e-9,
            tol_gap_rel: 1e-9,
            max_iterations: 200,
            time_limit_s: 600.0,
            verbose: false,
        }
    }
}

/// A conic solver that returns primal and dual solutions.
pub trait ConicSolver: Sync {
    fn solve(&self, problem: &ConicProblem, config: &SolverConfig)
        -> Result<ConicSolution, SolveError>;
    fn name(&self) -> &'static str;
}

/// Clarabel interior-point backend.
#[derive(Debug, Default, Clone, Copy)]
pub struct ClarabelSolver;

impl ConicSolver for ClarabelSolver {
    fn solve(
        &self,
        problem: &ConicProblem,
        config: &SolverConfig,
    ) -> Result<ConicSolution, SolveError> {
        let started = Instant::now();
        let n = problem.num_vars;
        let m_eq = problem.eq_rhs.len();
        let m_in = problem.ineq_rhs.len();

        // Stack rows: equalities, inequalities, then cone blocks.
        let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
        let mut b = Vec::with_capacity(problem.num_rows());
        let mut row = 0usize;
        for (coeffs, rhs) in problem.eq_coeffs.iter().zip(&problem.eq_rhs) {
            for &(col, val) in coeffs {
                triplets.push((row, col, val));
            }
            b.push(*rhs);
            row += 1;
        }
        for (coeffs, rhs) in problem.ineq_coeffs.iter().zip(&problem.ineq_rhs) {
            for &(col, val) in coeffs {
                triplets.push((row, col, val));
            }
            b.push(*rhs);
            row += 1;
        }
        let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
        if m_eq > 0 {
            cones.push(SupportedConeT::ZeroConeT(m_eq));
        }
        if m_in > 0 {
            cones.push(SupportedConeT::NonnegativeConeT(m_in));
        }
        for block in &problem.soc_blocks {
            for (coeffs, rhs) in block.coeffs.iter().zip(&block.rhs) {
                for &(col, val) in coeffs {
                    triplets.push((row, col, val));
                }
                b.push(*rhs);
                row += 1;
            }
            cones.push(SupportedConeT::SecondOrderConeT(block.dim()));
        }
        let a = csc_from_triplets(row, n, &mut triplets);
        let p = CscMatrix::<f64>::zeros((n, n));

        let settings = DefaultSettings {
            verbose: config.verbose,
            max_iter: config.max_iterations,
            time_limit: config.time_limit_s,
            tol_feas: config.tol_feas,
            tol_gap_abs: config.tol_gap_abs,
            tol_gap_rel: config.tol_gap_rel,
            ..DefaultSettings::default()
        };

        let mut solver = DefaultSolver::new(&p, &problem.objective, &a, &b, &cones, settings);
        solver.solve();

        let status = match solver.solution.status {
            SolverStatus::Solved => SolveStatus::Optimal,
            SolverStatus::AlmostSolved => SolveStatus::NearOptimal,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                return Err(SolveError::Infeasible)
            }
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
                return Err(SolveError::Unbounded)
            }
            SolverStatus::MaxIterations => {
                return Err(SolveError::IterationLimit(solver.solution.iterations))
            }
            SolverStatus::MaxTime => return Err(SolveError::TimeLimit),
            other => return Err(SolveError::Numerical(format!("{other:?}"))),
        };

        let z = &solver.solution.z;
        let mut soc_duals = Vec::with_capacity(problem.soc_blocks.len());
        let mut offset = m_eq + m_in;
        for block in &problem.soc_blocks {
            soc_duals.push(z[offset..offset + block.dim()].to_vec());
            offset += block.dim();
        }

        Ok(ConicSolution {
            status,
            objective: solver.solution.obj_val,
            x: solver.solution.x.clone(),
            eq_duals: z[..m_eq].to_vec(),
            ineq_duals: z[m_eq..m_eq + m_in].to_vec(),
            soc_duals,
            iterations: solver.solution.iterations,
            solve_time_s: started.elapsed().as_secs_f64(),
        })
    }

    fn name(&self) -> &'static str {
        "clarabel"
    }
}

fn csc_from_triplets(m: usize, n: usize, triplets: &mut [(usize, usize, f64)]) -> CscMatrix<f64> {
    triplets.sort_unstable_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
    let mut colptr = vec![0usize; n + 1];
    let mut rowval = Vec::with_capacity(triplets.len());
    let mut nzval = Vec::with_capacity(triplets.len());
    let mut idx = 0;
    while idx < triplets.len() {
        let (r, c, v) = triplets[idx];
        // Merge duplicate entries for the same (row, col).
        let mut val = v;
        let mut next = idx + 1;
        while next < triplets.len() && triplets[next].0 == r && triplets[next].1 == c {
            val += triplets[next].2;
            next += 1;
        }
        rowval.push(r);
        nzval.push(val);
        colptr[c + 1] += 1;
        idx = next;
    }
    for c in 0..n {
        colptr[c + 1] += colptr[c];
    }
    CscMatrix::new(m, n, colptr, rowval, nzval)
}

// ---------------------------------------------------------------------------
// KKT verification
// ---------------------------------------------------------------------------

/// Residuals of the KKT system at a reported solution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KktResiduals {
    /// `max_i |a_i·x - b_i|` over equality rows.
    pub primal_eq: f64,
    /// `max_i (a_i·x - b_i)₊` over inequality rows.
    pub primal_ineq: f64,
    /// Worst cone-membership violation of the primal slacks.
    pub primal_cone: f64,
    /// `||c + Aᵀ(y,z,w)||_∞`.
    pub stationarity: f64,
    /// `max_i (-z_i)₊`: negative part of inequality duals.
    pub dual_ineq: f64,
    /// Worst cone-membership violation of the cone duals.
    pub dual_cone: f64,
    /// `max_i |z_i (b_i - a_i·x)|` over inequality rows.
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max_residual(&self) -> f64 {
        [
            self.primal_eq,
            self.primal_ineq,
            self.primal_cone,
            self.stationarity,
            self.dual_ineq,
            self.dual_cone,
            self.complementarity,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// Recomputes KKT residuals from scratch (one pass over the problem data).
pub fn verify_kkt(problem: &ConicProblem, solution: &ConicSolution) -> KktResiduals {
    let dot = |coeffs: &RowCoeffs| -> f64 {
        coeffs.iter().map(|&(col, v)| v * solution.x[col]).sum()
    };

    let mut primal_eq = 0.0f64;
    for (coeffs, rhs) in problem.eq_coeffs.iter().zip(&problem.eq_rhs) {
        primal_eq = primal_eq.max((dot(coeffs) - rhs).abs());
    }
    let mut primal_ineq = 0.0f64;
    let mut complementarity = 0.0f64;
    for ((coeffs, rhs), z) in problem
        .ineq_coeffs
        .iter()
        .zip(&problem.ineq_rhs)
        .zip(&solution.ineq_duals)
    {
        let slack = rhs - dot(coeffs);
        primal_ineq = primal_ineq.max(-slack);
        complementarity = complementarity.max((z * slack).abs());
    }
    let mut primal_cone = 0.0f64;
    let mut dual_cone = 0.0f64;
    for (block, dual) in problem.soc_blocks.iter().zip(&solution.soc_duals) {
        let s: Vec<f64> = block
            .coeffs
            .iter()
            .zip(&block.rhs)
            .map(|(coeffs, rhs)| rhs - dot(coeffs))
            .collect();
        let tail = |v: &[f64]| v[1..].iter().map(|e| e * e).sum::<f64>().sqrt();
        primal_cone = primal_cone.max(tail(&s) - s[0]);
        dual_cone = dual_cone.max(tail(dual) - dual[0]);
    }

    // Stationarity: c + A_eqᵀ y + A_inᵀ z + A_socᵀ w.
    let mut grad = problem.objective.clone();
    for (coeffs, y) in problem.eq_coeffs.iter().zip(&solution.eq_duals) {
        for &(col, v) in coeffs {
            grad[col] += v * y;
        }
    }
    for (coeffs, z) in problem.ineq_coeffs.iter().zip(&solution.ineq_duals) {
        for &(col, v) in coeffs {
            grad[col] += v * z;
        }
    }
    for (block, dual) in problem.soc_blocks.iter().zip(&solution.soc_duals) {
        for (coeffs, w) in block.coeffs.iter().zip(dual) {
            for &(col, v) in coeffs {
                grad[col] += v * w;
            }
        }
    }
    let stationarity = grad.iter().fold(0.0f64, |acc, g| acc.max(g.abs()));
    let dual_ineq = solution
        .ineq_duals
        .iter()
        .fold(0.0f64, |acc, z| acc.max(-z));

    KktResiduals {
        primal_eq,
        primal_ineq,
        primal_cone,
        stationarity,
        dual_ineq,
        dual_cone,
        complementarity,
    }
}

// ---------------------------------------------------------------------------
// Conic benchmark export
// ---------------------------------------------------------------------------

/// Writes the problem in conic benchmark format (CBF version 3) so it can be
/// cross-checked with external solvers.
pub fn write_cbf(problem: &ConicProblem, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "VER\n3\n")?;
    writeln!(out, "OBJSENSE\nMIN\n")?;
    writeln!(out, "VAR\n{} 1\nF {}\n", problem.num_vars, problem.num_vars)?;

    let m = problem.num_rows();
    let mut domains: Vec<(String, usize)> = Vec::new();
    if !problem.eq_rhs.is_empty() {
        domains.push(("L=".into(), problem.eq_rhs.len()));
    }
    if !problem.ineq_rhs.is_empty() {
        domains.push(("L+".into(), problem.ineq_rhs.len()));
    }
    for block in &problem.soc_blocks {
        domains.push(("Q".into(), block.dim()));
    }
    writeln!(out, "CON\n{} {}", m, domains.len())?;
    for (name, dim) in &domains {
        writeln!(out, "{name} {dim}")?;
    }
    writeln!(out)?;

    let obj_nnz = problem.objective.iter().filter(|c| **c != 0.0).count();
    writeln!(out, "OBJACOORD\n{obj_nnz}")?;
    for (j, c) in problem.objective.iter().enumerate() {
        if *c != 0.0 {
            writeln!(out, "{j} {c:.17e}")?;
        }
    }
    writeln!(out)?;

    // Constraint rows are written as (A x + b) in domain. Equalities keep
    // their sign (a·x - rhs = 0); inequalities and cones are flipped so the
    // slack (rhs - a·x) lands in L+ / Q.
    let mut a_entries: Vec<(usize, usize, f64)> = Vec::new();
    let mut b_entries: Vec<(usize, f64)> = Vec::new();
    let mut row = 0usize;
    for (coeffs, rhs) in problem.eq_coeffs.iter().zip(&problem.eq_rhs) {
        for &(col, v) in coeffs {
            a_entries.push((row, col, v));
        }
        if *rhs != 0.0 {
            b_entries.push((row, -rhs));
        }
        row += 1;
    }
    for (coeffs, rhs) in problem.ineq_coeffs.iter().zip(&problem.ineq_rhs) {
        for &(col, v) in coeffs {
            a_entries.push((row, col, -v));
        }
        if *rhs != 0.0 {
            b_entries.push((row, *rhs));
        }
        row += 1;
    }
    for block in &problem.soc_blocks {
        for (coeffs, rhs) in block.coeffs.iter().zip(&block.rhs) {
            for &(col, v) in coeffs {
                a_entries.push((row, col, -v));
            }
            if *rhs != 0.0 {
                b_entries.push((row, *rhs));
            }
            row += 1;
        }
    }

    writeln!(out, "ACOORD\n{}", a_entries.len())?;
    for (r, c, v) in &a_entries {
        writeln!(out, "{r} {c} {v:.17e}")?;
    }
    writeln!(out)?;
    writeln!(out, "BCOORD\n{}", b_entries.len())?;
    for (r, v) in &b_entries {
        writeln!(out, "{r} {v:.17e}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equality_lp_with_duals() {
        // min x s.t. x = 3: dual satisfies 1 + y = 0.
        let mut pb = ConicProblem::new();
        let x = pb.add_var(1.0);
        pb.add_eq(vec![(x, 1.0)], 3.0);
        let sol = ClarabelSolver.solve(&pb, &SolverConfig::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.x[x] - 3.0).abs() < 1e-7);
        assert!((sol.eq_duals[0] + 1.0).abs() < 1e-7);
        let kkt = verify_kkt(&pb, &sol);
        assert!(kkt.max_residual() < 1e-6, "{kkt:?}");
    }

    #[test]
    fn inequality_dual_is_nonnegative_multiplier() {
        // min x s.t. -x <= -3 (i.e. x >= 3): multiplier 1.
        let mut pb = ConicProblem::new();
        let x = pb.add_var(1.0);
        pb.add_ineq(vec![(x, -1.0)], -3.0);
        let sol = ClarabelSolver.solve(&pb, &SolverConfig::default()).unwrap();
        assert!((sol.x[x] - 3.0).abs() < 1e-7);
        assert!((sol.ineq_duals[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn soc_block_reaches_boundary() {
        // max y s.t. ||(x, y)|| <= 2.
        let mut pb = ConicProblem::new();
        let _x = pb.add_var(0.0);
        let y = pb.add_var(-1.0);
        pb.add_soc(SocBlock {
            coeffs: vec![vec![], vec![(0, -1.0)], vec![(y, -1.0)]],
            rhs: vec![2.0, 0.0, 0.0],
        });
        let sol = ClarabelSolver.solve(&pb, &SolverConfig::default()).unwrap();
        assert!((sol.x[y] - 2.0).abs() < 1e-6);
        let kkt = verify_kkt(&pb, &sol);
        assert!(kkt.max_residual() < 1e-6, "{kkt:?}");
    }

    #[test]
    fn infeasible_and_unbounded_are_distinguished() {
        let mut pb = ConicProblem::new();
        let x = pb.add_var(1.0);
        pb.add_ineq(vec![(x, 1.0)], 0.0);
        pb.add_ineq(vec![(x, -1.0)], -1.0); // x >= 1 contradicts x <= 0
        assert!(matches!(
            ClarabelSolver.solve(&pb, &SolverConfig::default()),
            Err(SolveError::Infeasible)
        ));

        let mut pb2 = ConicProblem::new();
        let x2 = pb2.add_var(1.0);
        pb2.add_ineq(vec![(x2, 1.0)], 0.0); // min x, x <= 0: unbounded below
        assert!(matches!(
            ClarabelSolver.solve(&pb2, &SolverConfig::default()),
            Err(SolveError::Unbounded)
        ));
    }

    #[test]
    fn duplicate_triplets_are_merged() {
        // Row with x appearing twice: coefficients must sum (2x = 4).
        let mut pb = ConicProblem::new();
        let x = pb.add_var(1.0);
        pb.add_eq(vec![(x, 1.0), (x, 1.0)], 4.0);
        let sol = ClarabelSolver.solve(&pb, &SolverConfig::default()).unwrap();
        assert!((sol.x[x] - 2.0).abs() < 1e-7);
    }

    #[test]
    fn cbf_export_structure() {
        let mut pb = ConicProblem::new();
        let x = pb.add_var(1.5);
        let y = pb.add_var(0.0);
        pb.add_eq(vec![(x, 1.0), (y, 2.0)], 3.0);
        pb.add_ineq(vec![(y, 1.0)], 1.0);
        pb.add_soc(SocBlock {
            coeffs: vec![vec![], vec![(x, -1.0)]],
            rhs: vec![2.0, 0.0],
        });
        let mut buf = Vec::new();
        write_cbf(&pb, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("VER\n3\n"));
        assert!(text.contains("OBJSENSE\nMIN"));
        assert!(text.contains("VAR\n2 1\nF 2"));
        assert!(text.contains("CON\n4 3"));
        assert!(text.contains("L= 1"));
        assert!(text.contains("L+ 1"));
        assert!(text.contains("Q 2"));
    }
}
