//! Dense bounded-variable primal simplex with Bland's rule.
//!
//! Solves `max c.x  s.t.  a_i.x >= r_i,  l <= x <= u` with finite box bounds.
//! Phase 1 drives artificial variables to zero, then their upper bounds are
//! pinned at zero and phase 2 optimizes the real objective from the feasible
//! basis. Nonbasic variables always sit at one of their bounds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const COST_TOL: f64 = 1e-10;
const PIVOT_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpProblem {
    /// Maximized.
    pub objective: Vec<f64>,
    /// Constraint rows `a_i` with `a_i . x >= rhs_i`.
    pub rows: Vec<Vec<f64>>,
    pub rhs: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl LpProblem {
    pub fn boxed(objective: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        Self {
            objective,
            rows: Vec::new(),
            rhs: Vec::new(),
            lower,
            upper,
        }
    }

    /// Adds `row . x >= rhs`.
    pub fn with_row(mut self, row: Vec<f64>, rhs: f64) -> Self {
        self.rows.push(row);
        self.rhs.push(rhs);
        self
    }

    fn check(&self) -> Result<()> {
        let n = self.objective.len();
        let bad = |m: &str| Err(Error::Domain(format!("malformed LP: {m}")));
        if self.lower.len() != n || self.upper.len() != n {
            return bad("bound vectors differ from objective length");
        }
        if self.rows.len() != self.rhs.len() || self.rows.iter().any(|r| r.len() != n) {
            return bad("constraint rows do not match");
        }
        if self
            .lower
            .iter()
            .zip(&self.upper)
            .any(|(l, u)| !l.is_finite() || !u.is_finite() || l > u)
        {
            return bad("variable bounds must be finite with lower <= upper");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpSolution {
    pub value: f64,
    pub witness: Vec<f64>,
}

pub fn solve_bounded_lp(problem: &LpProblem) -> Result<LpSolution> {
    problem.check()?;
    let witness = if problem.rows.is_empty() {
        problem
            .objective
            .iter()
            .zip(problem.lower.iter().zip(&problem.upper))
            .map(|(&c, (&l, &u))| if c > 0.0 { u } else { l })
            .collect()
    } else {
        Tableau::new(problem).solve(&problem.objective)?
    };
    let value = problem.objective.iter().zip(&witness).map(|(c, x)| c * x).sum();
    Ok(LpSolution { value, witness })
}

struct Tableau {
    m: usize,
    n_struct: usize,
    cols: usize,
    /// `B^-1 A`, row-major `m x cols`.
    t: Vec<f64>,
    /// `B^-1 r`.
    rhs: Vec<f64>,
    basis: Vec<usize>,
    is_basic: Vec<bool>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    x: Vec<f64>,
    pivots: usize,
}

impl Tableau {
    fn new(p: &LpProblem) -> Self {
        let m = p.rows.len();
        let n = p.objective.len();
        // columns: structural | slack (a.x - s = r) | artificial
        let cols = n + 2 * m;
        let mut lo = p.lower.clone();
        let mut hi = p.upper.clone();
        lo.extend(std::iter::repeat_n(0.0, 2 * m));
        hi.extend(std::iter::repeat_n(f64::INFINITY, m));
        hi.extend(std::iter::repeat_n(0.0, m));
        let mut x = lo.clone();
        let mut t = vec![0.0; m * cols];
        let mut rhs = vec![0.0; m];
        let mut basis = vec![0; m];
        let mut is_basic = vec![false; cols];
        for (i, row) in p.rows.iter().enumerate() {
            let r = &mut t[i * cols..(i + 1) * cols];
            r[..n].copy_from_slice(row);
            r[n + i] = -1.0;
            r[n + m + i] = 1.0;
            let activity: f64 = row.iter().zip(&p.lower).map(|(a, l)| a * l).sum();
            if activity - p.rhs[i] >= 0.0 {
                // slack is basic; normalize its coefficient to +1
                r.iter_mut().for_each(|v| *v = -*v);
                rhs[i] = -p.rhs[i];
                basis[i] = n + i;
                x[n + i] = activity - p.rhs[i];
            } else {
                rhs[i] = p.rhs[i];
                basis[i] = n + m + i;
                hi[n + m + i] = f64::INFINITY;
                x[n + m + i] = p.rhs[i] - activity;
            }
            is_basic[basis[i]] = true;
        }
        Self {
            m,
            n_struct: n,
            cols,
            t,
            rhs,
            basis,
            is_basic,
            lo,
            hi,
            x,
            pivots: 0,
        }
    }

    fn solve(mut self, objective: &[f64]) -> Result<Vec<f64>> {
        let (n, m) = (self.n_struct, self.m);
        let mut phase1 = vec![0.0; self.cols];
        let mut needs_phase1 = false;
        for i in 0..m {
            let art = n + m + i;
            if self.hi[art].is_infinite() {
                phase1[art] = -1.0;
                needs_phase1 = true;
            }
        }
        if needs_phase1 {
            self.optimize(&phase1)?;
            let infeasibility: f64 = (n + m..self.cols).map(|j| self.x[j]).sum();
            if infeasibility > FEAS_TOL * (1.0 + self.rhs.iter().map(|r| r.abs()).sum::<f64>()) {
                return Err(Error::Infeasible);
            }
            for j in n + m..self.cols {
                self.hi[j] = 0.0;
                if !self.is_basic[j] {
                    self.x[j] = 0.0;
                }
            }
            self.refresh_basic_values();
        }
        let mut cost = vec![0.0; self.cols];
        cost[..n].copy_from_slice(objective);
        self.optimize(&cost)?;
        Ok(self.x[..n]
            .iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(&v, (&l, &u))| v.clamp(l, u))
            .collect())
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.t[i * self.cols..(i + 1) * self.cols]
    }

    fn refresh_basic_values(&mut self) {
        for i in 0..self.m {
            let row = self.row(i);
            let mut v = self.rhs[i];
            for (j, &a) in row.iter().enumerate() {
                if !self.is_basic[j] && a != 0.0 {
                    v -= a * self.x[j];
                }
            }
            let b = self.basis[i];
            self.x[b] = v;
        }
    }

    fn optimize(&mut self, cost: &[f64]) -> Result<()> {
        let limit = 10_000 + 50 * (self.m + self.cols);
        loop {
            if self.pivots > limit {
                return Err(Error::IterationLimit(self.pivots));
            }
            // Bland: lowest-index improving column
            let mut entering = None;
            for j in 0..self.cols {
                if self.is_basic[j] || self.lo[j] == self.hi[j] {
                    continue;
                }
                let d = cost[j]
                    - (0..self.m)
                        .map(|i| cost[self.basis[i]] * self.t[i * self.cols + j])
                        .sum::<f64>();
                if d > COST_TOL && self.x[j] < self.hi[j] {
                    entering = Some((j, 1.0));
                    break;
                }
                if d < -COST_TOL && self.x[j] > self.lo[j] {
                    entering = Some((j, -1.0));
                    break;
                }
            }
            let Some((j, dir)) = entering else {
                return Ok(());
            };

            let mut theta = self.hi[j] - self.lo[j];
            let mut leave: Option<(usize, bool)> = None; // (row, leaves at upper)
            for i in 0..self.m {
                let alpha = self.t[i * self.cols + j] * dir;
                let b = self.basis[i];
                let (lim, at_upper) = if alpha > PIVOT_TOL {
                    ((self.x[b] - self.lo[b]) / alpha, false)
                } else if alpha < -PIVOT_TOL && self.hi[b].is_finite() {
                    ((self.hi[b] - self.x[b]) / -alpha, true)
                } else {
                    continue;
                };
                let lim = lim.max(0.0);
                let better = match leave {
                    None => lim <= theta + PIVOT_TOL,
                    Some((r, _)) => {
                        lim < theta - PIVOT_TOL
                            || (lim <= theta + PIVOT_TOL && b < self.basis[r])
                    }
                };
                if better {
                    theta = if leave.is_none() { lim.min(theta) } else { lim };
                    leave = Some((i, at_upper));
                }
            }
            if theta.is_infinite() {
                return Err(Error::Domain("LP objective is unbounded".into()));
            }

            self.x[j] += dir * theta;
            for i in 0..self.m {
                let b = self.basis[i];
                self.x[b] -= self.t[i * self.cols + j] * dir * theta;
            }
            if let Some((r, at_upper)) = leave {
                let out = self.basis[r];
                self.x[out] = if at_upper { self.hi[out] } else { self.lo[out] };
                self.pivot(r, j);
                self.refresh_basic_values();
            }
            self.pivots += 1;
        }
    }

    fn pivot(&mut self, r: usize, j: usize) {
        let cols = self.cols;
        let p = self.t[r * cols + j];
        for v in &mut self.t[r * cols..(r + 1) * cols] {
            *v /= p;
        }
        self.rhs[r] /= p;
        let pivot_row: Vec<f64> = self.t[r * cols..(r + 1) * cols].to_vec();
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = self.t[i * cols + j];
            if f == 0.0 {
                continue;
            }
            for (v, &pr) in self.t[i * cols..(i + 1) * cols].iter_mut().zip(&pivot_row) {
                *v -= f * pr;
            }
            self.t[i * cols + j] = 0.0;
            self.rhs[i] -= f * self.rhs[r];
        }
        self.is_basic[self.basis[r]] = false;
        self.basis[r] = j;
        self.is_basic[j] = true;
    }
}

/// Maximizes over `{x in box : g . x >= 0 for every g in constraints}` by
/// constraint generation: solve with a working subset, add the most violated
/// rows, repeat until the witness satisfies all of them.
pub(crate) fn maximize_with_cuts(
    objective: &[f64],
    constraints: &[Vec<f64>],
    lower: &[f64],
    upper: &[f64],
) -> Result<LpSolution> {
    const BATCH: usize = 6;
    let mut working: Vec<usize> = Vec::new();
    let mut in_set = vec![false; constraints.len()];
    loop {
        let mut problem = LpProblem::boxed(objective.to_vec(), lower.to_vec(), upper.to_vec());
        for &i in &working {
            problem = problem.with_row(constraints[i].clone(), 0.0);
        }
        let sol = solve_bounded_lp(&problem)?;
        let mut violated: Vec<(f64, usize)> = constraints
            .iter()
            .enumerate()
            .filter(|(i, _)| !in_set[*i])
            .map(|(i, g)| (g.iter().zip(&sol.witness).map(|(a, b)| a * b).sum::<f64>(), i))
            .filter(|(v, _)| *v < -FEAS_TOL)
            .collect();
        if violated.is_empty() {
            return Ok(sol);
        }
        violated.sort_by(|a, b| a.0.total_cmp(&b.0));
        for &(_, i) in violated.iter().take(BATCH) {
            in_set[i] = true;
            working.push(i);
        }
    }
}
