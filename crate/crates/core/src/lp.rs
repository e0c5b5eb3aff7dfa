//! Dense two-phase simplex for desk-scale linear programs.
//!
//! Bland's rule throughout, so the iteration is deterministic and cannot
//! cycle. Free variables are split, bounded variables shifted; everything
//! runs on one full tableau. Intended for the small certificate systems this
//! crate generates (tens of rows), not for large instances.

use crate::error::{Error, Result};

const PIVOT_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cmp {
    Le,
    Ge,
    Eq,
}

/// `optimize c'x subject to rows, bounds`. Bounds default to free.
#[derive(Debug, Clone)]
pub struct LinearProgram {
    pub minimize: bool,
    pub objective: Vec<f64>,
    pub rows: Vec<(Vec<f64>, Cmp, f64)>,
    pub lower: Vec<Option<f64>>,
    pub upper: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub enum LpOutcome {
    Optimal { x: Vec<f64>, value: f64 },
    /// Feasible base point plus an improving recession direction.
    Unbounded { x: Vec<f64>, ray: Vec<f64> },
    Infeasible,
}

impl LinearProgram {
    pub fn new(num_vars: usize, minimize: bool, objective: Vec<f64>) -> LinearProgram {
        assert_eq!(objective.len(), num_vars);
        LinearProgram {
            minimize,
            objective,
            rows: Vec::new(),
            lower: vec![None; num_vars],
            upper: vec![None; num_vars],
        }
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn add_row(&mut self, coeffs: Vec<f64>, cmp: Cmp, rhs: f64) {
        assert_eq!(coeffs.len(), self.num_vars());
        self.rows.push((coeffs, cmp, rhs));
    }

    pub fn set_lower(&mut self, var: usize, bound: f64) {
        self.lower[var] = Some(bound);
    }

    pub fn set_upper(&mut self, var: usize, bound: f64) {
        self.upper[var] = Some(bound);
    }

    pub fn solve(&self) -> Result<LpOutcome> {
        Solver::build(self)?.run()
    }
}

#[derive(Debug, Clone, Copy)]
enum VarMap {
    /// std var = sign * (orig - shift)
    Shifted { orig: usize, shift: f64, sign: f64 },
    SplitPos(usize),
    SplitNeg(usize),
}

struct Solver {
    table: Vec<Vec<f64>>,
    basis: Vec<usize>,
    n_std: usize,
    n_art: usize,
    cost_std: Vec<f64>,
    map: Vec<VarMap>,
    n_orig: usize,
    orig_objective: Vec<f64>,
}

impl Solver {
    fn build(lp: &LinearProgram) -> Result<Solver> {
        let n = lp.num_vars();
        let mut map: Vec<VarMap> = Vec::new();
        // per original var: list of (std_idx, coeff multiplier) and rhs shift contribution
        let mut var_cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let mut var_shift: Vec<f64> = vec![0.0; n];

        for j in 0..n {
            match (lp.lower[j], lp.upper[j]) {
                (Some(l), up) => {
                    let idx = map.len();
                    map.push(VarMap::Shifted { orig: j, shift: l, sign: 1.0 });
                    var_cols[j].push((idx, 1.0));
                    var_shift[j] = l;
                    if let Some(u) = up {
                        if u < l - FEAS_TOL {
                            return Err(Error::InvalidInput(format!(
                                "variable {j} has empty bound interval"
                            )));
                        }
                    }
                }
                (None, Some(u)) => {
                    // x = u - y, y >= 0
                    let idx = map.len();
                    map.push(VarMap::Shifted { orig: j, shift: u, sign: -1.0 });
                    var_cols[j].push((idx, -1.0));
                    var_shift[j] = u;
                }
                (None, None) => {
                    let ip = map.len();
                    map.push(VarMap::SplitPos(j));
                    let im = map.len();
                    map.push(VarMap::SplitNeg(j));
                    var_cols[j].push((ip, 1.0));
                    var_cols[j].push((im, -1.0));
                }
            }
        }
        let n_split = map.len();

        // assemble rows in std vars; upper bounds of shifted vars become rows
        struct RawRow {
            coeffs: Vec<f64>,
            cmp: Cmp,
            rhs: f64,
        }
        let mut raw: Vec<RawRow> = Vec::new();
        for (coeffs, cmp, rhs) in &lp.rows {
            let mut c = vec![0.0; n_split];
            let mut b = *rhs;
            for j in 0..n {
                if coeffs[j] != 0.0 {
                    b -= coeffs[j] * var_shift[j];
                    for &(idx, mult) in &var_cols[j] {
                        c[idx] += coeffs[j] * mult;
                    }
                }
            }
            raw.push(RawRow { coeffs: c, cmp: *cmp, rhs: b });
        }
        for j in 0..n {
            if let (Some(l), Some(u)) = (lp.lower[j], lp.upper[j]) {
                let mut c = vec![0.0; n_split];
                for &(idx, mult) in &var_cols[j] {
                    c[idx] += mult;
                }
                raw.push(RawRow { coeffs: c, cmp: Cmp::Le, rhs: u - l });
            }
        }

        // normalize rhs >= 0, then add slacks and artificials
        let m = raw.len();
        let mut n_slack = 0usize;
        for r in raw.iter_mut() {
            if r.rhs < 0.0 {
                for c in r.coeffs.iter_mut() {
                    *c = -*c;
                }
                r.rhs = -r.rhs;
                r.cmp = match r.cmp {
                    Cmp::Le => Cmp::Ge,
                    Cmp::Ge => Cmp::Le,
                    Cmp::Eq => Cmp::Eq,
                };
            }
            if !matches!(r.cmp, Cmp::Eq) {
                n_slack += 1;
            }
        }
        let n_std = n_split + n_slack;
        let mut table: Vec<Vec<f64>> = Vec::with_capacity(m);
        let mut basis: Vec<usize> = Vec::with_capacity(m);
        let mut slack_at = n_split;
        let mut art_cols: Vec<usize> = Vec::new();
        // first pass to count artificials: Ge and Eq rows need one each
        let n_art = raw
            .iter()
            .filter(|r| matches!(r.cmp, Cmp::Ge | Cmp::Eq))
            .count();
        let width = n_std + n_art + 1;
        let mut art_at = n_std;
        for r in &raw {
            let mut row = vec![0.0; width];
            row[..n_split].copy_from_slice(&r.coeffs);
            row[width - 1] = r.rhs;
            match r.cmp {
                Cmp::Le => {
                    row[slack_at] = 1.0;
                    basis.push(slack_at);
                    slack_at += 1;
                }
                Cmp::Ge => {
                    row[slack_at] = -1.0;
                    slack_at += 1;
                    row[art_at] = 1.0;
                    basis.push(art_at);
                    art_cols.push(art_at);
                    art_at += 1;
                }
                Cmp::Eq => {
                    row[art_at] = 1.0;
                    basis.push(art_at);
                    art_cols.push(art_at);
                    art_at += 1;
                }
            }
            table.push(row);
        }

        // std objective (minimization)
        let mut cost_std = vec![0.0; n_std];
        for j in 0..n {
            let c = if lp.minimize { lp.objective[j] } else { -lp.objective[j] };
            if c != 0.0 {
                for &(idx, mult) in &var_cols[j] {
                    cost_std[idx] += c * mult;
                }
            }
        }

        Ok(Solver {
            table,
            basis,
            n_std,
            n_art,
            cost_std,
            map,
            n_orig: n,
            orig_objective: lp.objective.clone(),
        })
    }

    fn width(&self) -> usize {
        self.n_std + self.n_art + 1
    }

    fn pivot(&mut self, cost: &mut [f64], row: usize, col: usize) {
        let piv = self.table[row][col];
        let w = self.width();
        for v in self.table[row].iter_mut() {
            *v /= piv;
        }
        for r in 0..self.table.len() {
            if r != row {
                let f = self.table[r][col];
                if f != 0.0 {
                    for j in 0..w {
                        let upd = self.table[row][j];
                        self.table[r][j] -= f * upd;
                    }
                }
            }
        }
        let f = cost[col];
        if f != 0.0 {
            for j in 0..w {
                cost[j] -= f * self.table[row][j];
            }
        }
        self.basis[row] = col;
    }

    /// Runs simplex with Bland's rule on the given reduced-cost row.
    /// Returns `Some(col)` when unbounded in column `col`, `None` at optimum.
    fn iterate(&mut self, cost: &mut [f64], allow_art: bool) -> Option<usize> {
        let w = self.width();
        let limit = if allow_art { w - 1 } else { self.n_std };
        loop {
            let mut entering = None;
            for j in 0..limit {
                if cost[j] < -PIVOT_TOL && !self.basis.contains(&j) {
                    entering = Some(j);
                    break;
                }
            }
            let Some(col) = entering else { return None };
            let mut leave: Option<(usize, f64)> = None;
            for r in 0..self.table.len() {
                let a = self.table[r][col];
                if a > PIVOT_TOL {
                    let ratio = self.table[r][w - 1] / a;
                    match leave {
                        None => leave = Some((r, ratio)),
                        Some((br, brat)) => {
                            if ratio < brat - PIVOT_TOL
                                || ((ratio - brat).abs() <= PIVOT_TOL
                                    && self.basis[r] < self.basis[br])
                            {
                                leave = Some((r, ratio));
                            }
                        }
                    }
                }
            }
            match leave {
                Some((r, _)) => self.pivot(cost, r, col),
                None => return Some(col),
            }
        }
    }

    fn std_solution(&self) -> Vec<f64> {
        let w = self.width();
        let mut x = vec![0.0; self.n_std + self.n_art];
        for (r, &b) in self.basis.iter().enumerate() {
            x[b] = self.table[r][w - 1];
        }
        x
    }

    fn to_original(&self, x_std: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n_orig];
        for (idx, vm) in self.map.iter().enumerate() {
            match *vm {
                VarMap::Shifted { orig, shift, sign } => x[orig] = shift + sign * x_std[idx],
                VarMap::SplitPos(orig) => x[orig] += x_std[idx],
                VarMap::SplitNeg(orig) => x[orig] -= x_std[idx],
            }
        }
        x
    }

    fn ray_to_original(&self, d_std: &[f64]) -> Vec<f64> {
        let mut d = vec![0.0; self.n_orig];
        for (idx, vm) in self.map.iter().enumerate() {
            match *vm {
                VarMap::Shifted { orig, sign, .. } => d[orig] += sign * d_std[idx],
                VarMap::SplitPos(orig) => d[orig] += d_std[idx],
                VarMap::SplitNeg(orig) => d[orig] -= d_std[idx],
            }
        }
        d
    }

    fn run(mut self) -> Result<LpOutcome> {
        let w = self.width();

        // phase 1: minimize the artificial sum
        if self.n_art > 0 {
            let mut cost = vec![0.0; w];
            for j in self.n_std..self.n_std + self.n_art {
                cost[j] = 1.0;
            }
            for r in 0..self.table.len() {
                if self.basis[r] >= self.n_std {
                    let f = cost[self.basis[r]];
                    for j in 0..w {
                        cost[j] -= f * self.table[r][j];
                    }
                }
            }
            if self.iterate(&mut cost, true).is_some() {
                return Err(Error::Internal("phase-1 objective unbounded".into()));
            }
            let infeas: f64 = (self.n_std..self.n_std + self.n_art)
                .map(|j| {
                    self.basis
                        .iter()
                        .position(|&b| b == j)
                        .map_or(0.0, |r| self.table[r][w - 1])
                })
                .sum();
            if infeas > FEAS_TOL {
                return Ok(LpOutcome::Infeasible);
            }
            // drive basic artificials out, or drop redundant rows
            let mut r = 0;
            while r < self.table.len() {
                if self.basis[r] >= self.n_std {
                    let mut pivoted = false;
                    for j in 0..self.n_std {
                        if self.table[r][j].abs() > 1e-7 {
                            let mut dummy = vec![0.0; w];
                            self.pivot(&mut dummy, r, j);
                            pivoted = true;
                            break;
                        }
                    }
                    if !pivoted {
                        self.table.remove(r);
                        self.basis.remove(r);
                        continue;
                    }
                }
                r += 1;
            }
        }

        // phase 2
        let mut cost = vec![0.0; w];
        cost[..self.n_std].copy_from_slice(&self.cost_std);
        for r in 0..self.table.len() {
            let f = cost[self.basis[r]];
            if f != 0.0 {
                for j in 0..w {
                    cost[j] -= f * self.table[r][j];
                }
            }
        }
        if let Some(col) = self.iterate(&mut cost, false) {
            let x_std = self.std_solution();
            let mut d_std = vec![0.0; self.n_std + self.n_art];
            d_std[col] = 1.0;
            for (r, &b) in self.basis.iter().enumerate() {
                d_std[b] = -self.table[r][col];
            }
            return Ok(LpOutcome::Unbounded {
                x: self.to_original(&x_std),
                ray: self.ray_to_original(&d_std),
            });
        }
        let x_std = self.std_solution();
        let x = self.to_original(&x_std);
        let value = x
            .iter()
            .zip(&self.orig_objective)
            .map(|(v, c)| v * c)
            .sum();
        Ok(LpOutcome::Optimal { x, value })
    }
}

/// Convenience: pure feasibility of `rows` over variables with the given
/// bounds. Returns a feasible point if one exists.
pub fn feasible_point(
    num_vars: usize,
    rows: &[(Vec<f64>, Cmp, f64)],
    lower: &[Option<f64>],
    upper: &[Option<f64>],
) -> Result<Option<Vec<f64>>> {
    let mut lp = LinearProgram::new(num_vars, true, vec![0.0; num_vars]);
    for (c, cmp, b) in rows {
        lp.add_row(c.clone(), *cmp, *b);
    }
    lp.lower = lower.to_vec();
    lp.upper = upper.to_vec();
    match lp.solve()? {
        LpOutcome::Optimal { x, .. } => Ok(Some(x)),
        LpOutcome::Unbounded { x, .. } => Ok(Some(x)),
        LpOutcome::Infeasible => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounded_maximum() {
        // max x + 2y, x + y <= 4, 2x + y >= 2, 0 <= x, 0 <= y <= 3
        let mut lp = LinearProgram::new(2, false, vec![1.0, 2.0]);
        lp.add_row(vec![1.0, 1.0], Cmp::Le, 4.0);
        lp.add_row(vec![2.0, 1.0], Cmp::Ge, 2.0);
        lp.set_lower(0, 0.0);
        lp.set_lower(1, 0.0);
        lp.set_upper(1, 3.0);
        match lp.solve().unwrap() {
            LpOutcome::Optimal { x, value } => {
                assert!((value - 7.0).abs() < 1e-9);
                assert!((x[0] - 1.0).abs() < 1e-9 && (x[1] - 3.0).abs() < 1e-9);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn free_variables_and_equalities() {
        // min x - y s.t. x + y = 1, x - y = 3  => x = 2, y = -1
        let mut lp = LinearProgram::new(2, true, vec![1.0, -1.0]);
        lp.add_row(vec![1.0, 1.0], Cmp::Eq, 1.0);
        lp.add_row(vec![1.0, -1.0], Cmp::Eq, 3.0);
        match lp.solve().unwrap() {
            LpOutcome::Optimal { x, value } => {
                assert!((x[0] - 2.0).abs() < 1e-9);
                assert!((x[1] + 1.0).abs() < 1e-9);
                assert!((value - 3.0).abs() < 1e-9);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unbounded_with_ray() {
        // min -w, w free
        let lp = LinearProgram::new(1, true, vec![-1.0]);
        match lp.solve().unwrap() {
            LpOutcome::Unbounded { ray, .. } => {
                assert!(ray[0] > 0.5);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn infeasible_system() {
        // y <= -1 and -y <= -1 cannot both hold
        let mut lp = LinearProgram::new(1, true, vec![0.0]);
        lp.add_row(vec![1.0], Cmp::Le, -1.0);
        lp.add_row(vec![-1.0], Cmp::Le, -1.0);
        assert!(matches!(lp.solve().unwrap(), LpOutcome::Infeasible));
    }

    #[test]
    fn degenerate_and_redundant_rows() {
        // redundant equality pair plus a dominated inequality
        let mut lp = LinearProgram::new(2, true, vec![1.0, 1.0]);
        lp.add_row(vec![1.0, 1.0], Cmp::Eq, 2.0);
        lp.add_row(vec![2.0, 2.0], Cmp::Eq, 4.0);
        lp.add_row(vec![1.0, 0.0], Cmp::Le, 10.0);
        lp.set_lower(0, 0.0);
        lp.set_lower(1, 0.0);
        match lp.solve().unwrap() {
            LpOutcome::Optimal { value, .. } => assert!((value - 2.0).abs() < 1e-9),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn negative_rhs_normalization() {
        // min x s.t. -x <= -5  (x >= 5)
        let mut lp = LinearProgram::new(1, true, vec![1.0]);
        lp.add_row(vec![-1.0], Cmp::Le, -5.0);
        match lp.solve().unwrap() {
            LpOutcome::Optimal { x, value } => {
                assert!((x[0] - 5.0).abs() < 1e-9);
                assert!((value - 5.0).abs() < 1e-9);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
