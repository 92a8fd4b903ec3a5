//! Linear programs in a small canonical container, and a dense two-phase
//! primal simplex with bounded variables.
//!
//! Problems are always maximizations with `0 <= x <= upper`. Constraint rows
//! are stored sparsely as `(column, coefficient)` pairs. The tableau itself is
//! dense, which is fine up to a few thousand columns.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LpError {
    #[error("linear program is infeasible")]
    Infeasible,
    #[error("linear program is unbounded")]
    Unbounded,
    #[error("simplex iteration limit ({0}) reached")]
    IterationLimit(usize),
    #[error("malformed linear program: {0}")]
    Malformed(String),
}

/// One linear constraint row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Row {
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl Row {
    pub fn new(coeffs: Vec<(usize, f64)>, rhs: f64) -> Self {
        Row { coeffs, rhs }
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().map(|&(j, a)| a * x[j]).sum()
    }
}

/// `maximize c.x  s.t.  eq rows = rhs, le rows <= rhs, 0 <= x <= upper`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LpProblem {
    pub num_vars: usize,
    pub objective: Vec<f64>,
    pub equalities: Vec<Row>,
    pub inequalities: Vec<Row>,
    /// Per-variable upper bound; `f64::INFINITY` when unbounded above.
    pub upper: Vec<f64>,
}

impl LpProblem {
    pub fn new(num_vars: usize) -> Self {
        LpProblem {
            num_vars,
            objective: vec![0.0; num_vars],
            equalities: Vec::new(),
            inequalities: Vec::new(),
            upper: vec![f64::INFINITY; num_vars],
        }
    }

    /// Checks that every row and vector agrees with `num_vars`.
    pub fn validate(&self) -> Result<(), LpError> {
        let n = self.num_vars;
        if self.objective.len() != n || self.upper.len() != n {
            return Err(LpError::Malformed("vector length differs from variable count".into()));
        }
        for row in self.equalities.iter().chain(&self.inequalities) {
            if let Some(&(j, _)) = row.coeffs.iter().find(|&&(j, _)| j >= n) {
                return Err(LpError::Malformed(format!("column {j} out of range")));
            }
            if !row.rhs.is_finite() || row.coeffs.iter().any(|(_, a)| !a.is_finite()) {
                return Err(LpError::Malformed("non-finite coefficient".into()));
            }
        }
        if self.objective.iter().any(|c| !c.is_finite()) {
            return Err(LpError::Malformed("non-finite objective".into()));
        }
        if self.upper.iter().any(|u| u.is_nan() || *u < 0.0) {
            return Err(LpError::Malformed("negative or NaN upper bound".into()));
        }
        Ok(())
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    /// Largest violation of each constraint family at `x`.
    pub fn residuals(&self, x: &[f64]) -> Residuals {
        let eq = self
            .equalities
            .iter()
            .map(|r| (r.dot(x) - r.rhs).abs())
            .fold(0.0, f64::max);
        let le = self
            .inequalities
            .iter()
            .map(|r| r.dot(x) - r.rhs)
            .fold(0.0, f64::max);
        let bounds = x
            .iter()
            .zip(&self.upper)
            .map(|(&v, &u)| (-v).max(v - u))
            .fold(0.0, f64::max);
        Residuals { eq, le, bounds }
    }
}

/// Maximum constraint violations; zero means exactly feasible.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Residuals {
    pub eq: f64,
    pub le: f64,
    pub bounds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

const COST_TOL: f64 = 1e-10;
const PIVOT_TOL: f64 = 1e-10;
const FEAS_TOL: f64 = 1e-8;
// Consecutive degenerate pivots before switching to Bland's rule.
const DEGENERATE_LIMIT: usize = 50;

struct Tableau {
    rows: usize,
    width: usize,
    a: Vec<f64>,
    rhs: Vec<f64>,
    upper: Vec<f64>,
    basis: Vec<usize>,
    is_basic: Vec<bool>,
    at_upper: Vec<bool>,
    iterations: usize,
    max_iterations: usize,
}

impl Tableau {
    fn row(&self, i: usize) -> &[f64] {
        &self.a[i * self.width..(i + 1) * self.width]
    }

    fn reduced_costs(&self, cost: &[f64]) -> Vec<f64> {
        let mut d = cost.to_vec();
        for i in 0..self.rows {
            let cb = cost[self.basis[i]];
            if cb != 0.0 {
                for (dj, aij) in d.iter_mut().zip(self.row(i)) {
                    *dj -= cb * aij;
                }
            }
        }
        d
    }

    fn pivot(&mut self, r: usize, j: usize, d: &mut [f64]) {
        let w = self.width;
        let p = self.a[r * w + j];
        for v in &mut self.a[r * w..(r + 1) * w] {
            *v /= p;
        }
        let (before, rest) = self.a.split_at_mut(r * w);
        let (prow, after) = rest.split_at_mut(w);
        for other in before.chunks_exact_mut(w).chain(after.chunks_exact_mut(w)) {
            let f = other[j];
            if f != 0.0 {
                for (o, pv) in other.iter_mut().zip(prow.iter()) {
                    *o -= f * pv;
                }
                other[j] = 0.0;
            }
        }
        let f = d[j];
        if f != 0.0 {
            for (dv, pv) in d.iter_mut().zip(prow.iter()) {
                *dv -= f * pv;
            }
            d[j] = 0.0;
        }
        self.is_basic[self.basis[r]] = false;
        self.basis[r] = j;
        self.is_basic[j] = true;
    }

    /// Runs primal simplex iterations for `cost` until optimal.
    fn optimize(&mut self, cost: &[f64], allowed: usize) -> Result<(), LpError> {
        let mut d = self.reduced_costs(cost);
        let mut degenerate = 0usize;
        loop {
            let bland = degenerate >= DEGENERATE_LIMIT;
            let mut entering = None;
            let mut best = 0.0;
            #[allow(clippy::needless_range_loop)]
            for j in 0..allowed {
                if self.is_basic[j] {
                    continue;
                }
                let gain = if self.at_upper[j] { -d[j] } else { d[j] };
                if gain > COST_TOL && (entering.is_none() || (!bland && gain > best)) {
                    entering = Some(j);
                    best = gain;
                    if bland {
                        break;
                    }
                }
            }
            let Some(j) = entering else { return Ok(()) };

            if self.iterations >= self.max_iterations {
                return Err(LpError::IterationLimit(self.max_iterations));
            }
            self.iterations += 1;

            let dir = if self.at_upper[j] { -1.0 } else { 1.0 };
            let mut step = self.upper[j];
            // (row, leaves at upper bound, |pivot|)
            let mut leave: Option<(usize, bool, f64)> = None;
            for i in 0..self.rows {
                let a = dir * self.a[i * self.width + j];
                let (limit, to_upper) = if a > PIVOT_TOL {
                    (self.rhs[i].max(0.0) / a, false)
                } else if a < -PIVOT_TOL && self.upper[self.basis[i]].is_finite() {
                    ((self.upper[self.basis[i]] - self.rhs[i]).max(0.0) / -a, true)
                } else {
                    continue;
                };
                let better = match leave {
                    _ if limit < step - 1e-12 => true,
                    Some((r, _, mag)) if limit <= step + 1e-12 => {
                        if bland {
                            self.basis[i] < self.basis[r]
                        } else {
                            a.abs() > mag
                        }
                    }
                    None if limit <= step + 1e-12 && step.is_finite() => {
                        // Prefer a pivot over a bound flip at equal step.
                        true
                    }
                    _ => false,
                };
                if better {
                    step = limit.min(step);
                    leave = Some((i, to_upper, a.abs()));
                }
            }
            if !step.is_finite() {
                return Err(LpError::Unbounded);
            }
            if step <= 1e-12 {
                degenerate += 1;
            } else {
                degenerate = 0;
            }

            if step > 0.0 {
                for i in 0..self.rows {
                    let a = self.a[i * self.width + j];
                    if a != 0.0 {
                        self.rhs[i] -= dir * step * a;
                    }
                }
            }
            match leave {
                None => {
                    self.at_upper[j] = !self.at_upper[j];
                }
                Some((r, to_upper, _)) => {
                    let q = self.basis[r];
                    self.at_upper[q] = to_upper;
                    let start = if self.at_upper[j] { self.upper[j] } else { 0.0 };
                    self.at_upper[j] = false;
                    self.rhs[r] = start + dir * step;
                    self.pivot(r, j, &mut d);
                }
            }
        }
    }

    fn value(&self, j: usize) -> f64 {
        if self.is_basic[j] {
            let r = self.basis.iter().position(|&b| b == j).unwrap();
            self.rhs[r]
        } else if self.at_upper[j] {
            self.upper[j]
        } else {
            0.0
        }
    }
}

/// Solves `problem` to optimality.
///
/// The result is deterministic for a given input: pricing uses the largest
/// reduced cost with lowest-index tie-breaking, falling back to Bland's rule
/// after a run of degenerate pivots.
pub fn solve_lp(problem: &LpProblem) -> Result<LpSolution, LpError> {
    problem.validate()?;
    let n = problem.num_vars;
    let m_eq = problem.equalities.len();
    let m_le = problem.inequalities.len();
    let m = m_eq + m_le;

    // Columns: originals, one slack per <= row, then artificials.
    let mut needs_artificial = Vec::with_capacity(m);
    let mut signs = Vec::with_capacity(m);
    for (i, row) in problem.equalities.iter().chain(&problem.inequalities).enumerate() {
        let sign = if row.rhs < 0.0 { -1.0 } else { 1.0 };
        signs.push(sign);
        needs_artificial.push(i < m_eq || sign < 0.0);
    }
    let n_art = needs_artificial.iter().filter(|&&b| b).count();
    let width = n + m_le + n_art;

    let mut a = vec![0.0; m * width];
    let mut rhs = vec![0.0; m];
    let mut basis = vec![0; m];
    let mut art_col = n + m_le;
    for (i, row) in problem.equalities.iter().chain(&problem.inequalities).enumerate() {
        let sign = signs[i];
        let line = &mut a[i * width..(i + 1) * width];
        for &(j, v) in &row.coeffs {
            line[j] += sign * v;
        }
        rhs[i] = sign * row.rhs;
        if i >= m_eq {
            line[n + (i - m_eq)] = sign;
        }
        if needs_artificial[i] {
            line[art_col] = 1.0;
            basis[i] = art_col;
            art_col += 1;
        } else {
            basis[i] = n + (i - m_eq);
        }
    }
    let mut upper = problem.upper.clone();
    upper.resize(width, f64::INFINITY);
    let mut is_basic = vec![false; width];
    for &b in &basis {
        is_basic[b] = true;
    }

    let mut t = Tableau {
        rows: m,
        width,
        a,
        rhs,
        upper,
        basis,
        is_basic,
        at_upper: vec![false; width],
        iterations: 0,
        max_iterations: 50 * (m + width) + 10_000,
    };

    if n_art > 0 {
        let mut phase1 = vec![0.0; width];
        for c in &mut phase1[n + m_le..] {
            *c = -1.0;
        }
        t.optimize(&phase1, width)?;
        let infeasibility: f64 = (n + m_le..width).map(|j| t.value(j)).sum();
        let scale = 1.0 + problem.equalities.iter().chain(&problem.inequalities).map(|r| r.rhs.abs()).fold(0.0, f64::max);
        if infeasibility > FEAS_TOL * scale {
            return Err(LpError::Infeasible);
        }
        // Artificials stay pinned at zero from here on.
        for j in n + m_le..width {
            t.upper[j] = 0.0;
            t.at_upper[j] = false;
        }
    }

    let mut cost = problem.objective.clone();
    cost.resize(width, 0.0);
    t.optimize(&cost, n + m_le)?;

    let mut x = vec![0.0; n];
    for (j, r) in t.basis.iter().enumerate().map(|(r, &j)| (j, r)) {
        if j < n {
            x[j] = t.rhs[r];
        }
    }
    for (j, xj) in x.iter_mut().enumerate() {
        if !t.is_basic[j] && t.at_upper[j] {
            *xj = t.upper[j];
        }
        *xj = xj.clamp(0.0, problem.upper[j]);
    }
    Ok(LpSolution {
        objective: problem.objective_value(&x),
        x,
        iterations: t.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_step_bounded() {
        // max x  s.t. x + y = 1, x <= 0.5
        let mut p = LpProblem::new(2);
        p.objective = vec![1.0, 0.0];
        p.equalities.push(Row::new(vec![(0, 1.0), (1, 1.0)], 1.0));
        p.inequalities.push(Row::new(vec![(0, 1.0)], 0.5));
        let s = solve_lp(&p).unwrap();
        assert!((s.x[0] - 0.5).abs() < 1e-12);
        assert!((s.x[1] - 0.5).abs() < 1e-12);
        assert!((s.objective - 0.5).abs() < 1e-12);
    }

    #[test]
    fn upper_bounds_are_respected() {
        // max 3a + 2b, a + b <= 4, a <= 1.5 (bound), b <= 10
        let mut p = LpProblem::new(2);
        p.objective = vec![3.0, 2.0];
        p.inequalities.push(Row::new(vec![(0, 1.0), (1, 1.0)], 4.0));
        p.upper = vec![1.5, 10.0];
        let s = solve_lp(&p).unwrap();
        assert!((s.x[0] - 1.5).abs() < 1e-12);
        assert!((s.x[1] - 2.5).abs() < 1e-12);
        assert!((s.objective - 9.5).abs() < 1e-12);
    }

    #[test]
    fn textbook_problem() {
        // max 3x + 5y, x <= 4, 2y <= 12, 3x + 2y <= 18  -> (2, 6), 36
        let mut p = LpProblem::new(2);
        p.objective = vec![3.0, 5.0];
        p.inequalities.push(Row::new(vec![(0, 1.0)], 4.0));
        p.inequalities.push(Row::new(vec![(1, 2.0)], 12.0));
        p.inequalities.push(Row::new(vec![(0, 3.0), (1, 2.0)], 18.0));
        let s = solve_lp(&p).unwrap();
        assert!((s.objective - 36.0).abs() < 1e-9);
        assert!((s.x[0] - 2.0).abs() < 1e-9 && (s.x[1] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn negative_rhs_inequality() {
        // max -x s.t. -x <= -2 (x >= 2)
        let mut p = LpProblem::new(1);
        p.objective = vec![-1.0];
        p.inequalities.push(Row::new(vec![(0, -1.0)], -2.0));
        let s = solve_lp(&p).unwrap();
        assert!((s.x[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn detects_infeasible_and_unbounded() {
        let mut p = LpProblem::new(1);
        p.equalities.push(Row::new(vec![(0, 1.0)], 2.0));
        p.upper = vec![1.0];
        assert_eq!(solve_lp(&p), Err(LpError::Infeasible));

        let mut p = LpProblem::new(2);
        p.objective = vec![1.0, 0.0];
        p.inequalities.push(Row::new(vec![(0, 1.0), (1, -1.0)], 1.0));
        assert_eq!(solve_lp(&p), Err(LpError::Unbounded));
    }

    #[test]
    fn rejects_malformed() {
        let mut p = LpProblem::new(1);
        p.equalities.push(Row::new(vec![(3, 1.0)], 1.0));
        assert!(matches!(solve_lp(&p), Err(LpError::Malformed(_))));
    }

    #[test]
    fn redundant_equalities() {
        // Same equality twice leaves an artificial basic at zero.
        let mut p = LpProblem::new(2);
        p.objective = vec![1.0, 2.0];
        p.equalities.push(Row::new(vec![(0, 1.0), (1, 1.0)], 1.0));
        p.equalities.push(Row::new(vec![(0, 2.0), (1, 2.0)], 2.0));
        p.upper = vec![1.0, 0.25];
        let s = solve_lp(&p).unwrap();
        assert!((s.x[1] - 0.25).abs() < 1e-12);
        assert!((s.objective - 1.25).abs() < 1e-12);
        let r = p.residuals(&s.x);
        assert!(r.eq < 1e-12 && r.le <= 0.0 && r.bounds <= 0.0);
    }
}
