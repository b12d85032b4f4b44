//! Linear programs of the form `min c'x  s.t.  A x <= b, x >= 0` with
//! `b >= 0`, so the origin is always feasible. Two interchangeable backends
//! are registered by name.

use std::sync::Arc;

use thiserror::Error;

use crate::registry::Registry;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("right-hand side must be non-negative (row {row})")]
    NegativeRhs { row: usize },
    #[error("variable index {index} out of range for {n} variables")]
    BadIndex { index: usize, n: usize },
    #[error("problem is unbounded")]
    Unbounded,
    #[error("iteration cap {cap} exceeded ({rows} rows, {cols} columns)")]
    IterationCap { cap: usize, rows: usize, cols: usize },
    #[error("solver failure: {0}")]
    Solver(String),
}

#[derive(Clone, Debug, Default)]
pub struct LpProblem {
    pub cost: Vec<f64>,
    /// Sparse rows `(variable, coefficient)`.
    pub rows: Vec<Vec<(usize, f64)>>,
    pub rhs: Vec<f64>,
}

impl LpProblem {
    pub fn new(cost: Vec<f64>) -> Self {
        Self { cost, rows: Vec::new(), rhs: Vec::new() }
    }

    pub fn n_vars(&self) -> usize {
        self.cost.len()
    }

    pub fn add_le(&mut self, row: Vec<(usize, f64)>, rhs: f64) {
        self.rows.push(row);
        self.rhs.push(rhs);
    }

    pub fn validate(&self) -> Result<(), LpError> {
        let n = self.n_vars();
        for (i, (row, b)) in self.rows.iter().zip(&self.rhs).enumerate() {
            if !(*b >= 0.0) {
                return Err(LpError::NegativeRhs { row: i });
            }
            if let Some(&(index, _)) = row.iter().find(|(j, _)| *j >= n) {
                return Err(LpError::BadIndex { index, n });
            }
        }
        Ok(())
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        self.cost.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    /// Largest constraint violation of `x`.
    pub fn violation(&self, x: &[f64]) -> f64 {
        let mut worst = x.iter().map(|v| (-v).max(0.0)).fold(0.0, f64::max);
        for (row, b) in self.rows.iter().zip(&self.rhs) {
            let lhs: f64 = row.iter().map(|(j, a)| a * x[*j]).sum();
            worst = worst.max(lhs - b);
        }
        worst
    }
}

#[derive(Clone, Debug)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
}

pub trait LpSolver: Send + Sync {
    fn name(&self) -> &'static str;
    fn solve(&self, lp: &LpProblem) -> Result<LpSolution, LpError>;
}

pub struct Minilp;

impl LpSolver for Minilp {
    fn name(&self) -> &'static str {
        "minilp"
    }

    fn solve(&self, lp: &LpProblem) -> Result<LpSolution, LpError> {
        use minilp::{ComparisonOp, LinearExpr, OptimizationDirection, Problem};
        lp.validate()?;
        let mut p = Problem::new(OptimizationDirection::Minimize);
        let vars: Vec<_> = lp.cost.iter().map(|c| p.add_var(*c, (0.0, f64::INFINITY))).collect();
        for (row, b) in lp.rows.iter().zip(&lp.rhs) {
            let mut e = LinearExpr::empty();
            for &(j, a) in row {
                e.add(vars[j], a);
            }
            p.add_constraint(e, ComparisonOp::Le, *b);
        }
        let sol = p.solve().map_err(|e| match e {
            minilp::Error::Unbounded => LpError::Unbounded,
            other => LpError::Solver(other.to_string()),
        })?;
        let x: Vec<f64> = vars.iter().map(|v| sol[*v].max(0.0)).collect();
        Ok(LpSolution { objective: lp.objective(&x), x })
    }
}

/// Dense tableau primal simplex. Dantzig pricing, switching to Bland's rule
/// after a run of degenerate pivots. Meant for small problems.
pub struct DenseSimplex {
    pub max_iterations: usize,
}

impl Default for DenseSimplex {
    fn default() -> Self {
        Self { max_iterations: 100_000 }
    }
}

impl LpSolver for DenseSimplex {
    fn name(&self) -> &'static str {
        "simplex"
    }

    fn solve(&self, lp: &LpProblem) -> Result<LpSolution, LpError> {
        lp.validate()?;
        let n = lp.n_vars();
        let m = lp.rows.len();
        let w = n + m + 1;
        let eps = 1e-11;
        // rows 0..m constraints, row m objective (reduced costs, -objective in last column)
        let mut t = vec![0.0; (m + 1) * w];
        for (i, (row, b)) in lp.rows.iter().zip(&lp.rhs).enumerate() {
            for &(j, a) in row {
                t[i * w + j] += a;
            }
            t[i * w + n + i] = 1.0;
            t[i * w + w - 1] = *b;
        }
        t[m * w..m * w + n].copy_from_slice(&lp.cost);
        let mut basis: Vec<usize> = (n..n + m).collect();
        let mut degenerate_run = 0;
        for _ in 0..self.max_iterations {
            let obj = &t[m * w..m * w + w - 1];
            let entering = if degenerate_run > 50 {
                obj.iter().position(|r| *r < -eps)
            } else {
                let (j, r) = obj.iter().enumerate().fold((usize::MAX, -eps), |acc, (j, r)| if *r < acc.1 { (j, *r) } else { acc });
                (r < -eps).then_some(j)
            };
            let Some(e) = entering else {
                let mut x = vec![0.0; n];
                for (i, &b) in basis.iter().enumerate() {
                    if b < n {
                        x[b] = t[i * w + w - 1].max(0.0);
                    }
                }
                return Ok(LpSolution { objective: lp.objective(&x), x });
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..m {
                let a = t[i * w + e];
                if a > eps {
                    let ratio = t[i * w + w - 1] / a;
                    match leave {
                        Some((li, lr)) if ratio > lr + 1e-12 || (ratio > lr - 1e-12 && basis[i] >= basis[li]) => {}
                        _ => leave = Some((i, ratio)),
                    }
                }
            }
            let Some((l, ratio)) = leave else { return Err(LpError::Unbounded) };
            degenerate_run = if ratio <= 1e-12 { degenerate_run + 1 } else { 0 };
            let piv = t[l * w + e];
            for v in &mut t[l * w..(l + 1) * w] {
                *v /= piv;
            }
            let pivot_row: Vec<f64> = t[l * w..(l + 1) * w].to_vec();
            for i in 0..=m {
                if i == l {
                    continue;
                }
                let f = t[i * w + e];
                if f != 0.0 {
                    for (v, p) in t[i * w..(i + 1) * w].iter_mut().zip(&pivot_row) {
                        *v -= f * p;
                    }
                }
            }
            basis[l] = e;
        }
        Err(LpError::IterationCap { cap: self.max_iterations, rows: m, cols: n })
    }
}

pub fn solver_registry() -> Registry<Arc<dyn LpSolver>> {
    let mut r: Registry<Arc<dyn LpSolver>> = Registry::new("lp solver");
    r.register("minilp", Arc::new(Minilp));
    r.register("simplex", Arc::new(DenseSimplex::default()));
    r
}
