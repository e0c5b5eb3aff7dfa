//! Problem containers: single-level programs, bilevel programs, lower-level
//! value/solution/multiplier maps, and KKT residuals.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expr::{Expr, Point, VarSpace};
use crate::poly::{Polyhedron, VertexEnumeration};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvexityTag {
    Convex,
    Unknown,
}

/// A single-level nonlinear program over one variable space.
///
/// Inequalities are `q_i(w) <= 0`, equalities `q_j(w) = 0`. The convexity
/// tag is computed structurally on construction and cannot be asserted by
/// the caller: for a minimization it certifies the objective and every
/// inequality convex (equalities affine); for a maximization it certifies
/// the negated objective instead.
#[derive(Debug, Clone)]
pub struct Nlp {
    pub space: Arc<VarSpace>,
    pub objective: Expr,
    pub inequalities: Vec<Expr>,
    pub equalities: Vec<Expr>,
    pub sense: Sense,
    pub convexity: ConvexityTag,
}

impl Nlp {
    pub fn new(
        space: Arc<VarSpace>,
        objective: Expr,
        inequalities: Vec<Expr>,
        equalities: Vec<Expr>,
        sense: Sense,
    ) -> Result<Nlp> {
        if objective.space() != &space {
            return Err(Error::SpaceMismatch);
        }
        for e in inequalities.iter().chain(equalities.iter()) {
            if e.space() != &space {
                return Err(Error::SpaceMismatch);
            }
        }
        let obj_for_cert = match sense {
            Sense::Minimize => objective.clone(),
            Sense::Maximize => Expr::neg(objective.clone()),
        };
        let convex = certify_convex(&obj_for_cert)
            && inequalities.iter().all(certify_convex)
            && equalities.iter().all(|e| e.degree() <= 1);
        Ok(Nlp {
            space,
            objective,
            inequalities,
            equalities,
            sense,
            convexity: if convex { ConvexityTag::Convex } else { ConvexityTag::Unknown },
        })
    }

    /// Number of constraints t (inequalities first, then equalities).
    pub fn num_constraints(&self) -> usize {
        self.inequalities.len() + self.equalities.len()
    }

    /// Largest constraint violation at `pt` (0 when feasible).
    pub fn max_violation(&self, pt: &Point) -> Result<f64> {
        let mut v: f64 = 0.0;
        for q in &self.inequalities {
            v = v.max(q.eval(pt)?);
        }
        for q in &self.equalities {
            v = v.max(q.eval(pt)?.abs());
        }
        Ok(v)
    }

    pub fn is_feasible(&self, pt: &Point, tol: f64) -> Result<bool> {
        Ok(self.max_violation(pt)? <= tol)
    }

    /// Objective as seen by a minimizing solver.
    pub(crate) fn min_objective(&self) -> Expr {
        match self.sense {
            Sense::Minimize => self.objective.clone(),
            Sense::Maximize => Expr::neg(self.objective.clone()),
        }
    }
}

/// Structural convexity certificate for an expression over its whole space:
/// affine, quadratic with positive semidefinite (constant) Hessian, an even
/// power of an affine expression, or a nonnegative combination of certified
/// pieces. Anything else is not certified.
pub fn certify_convex(e: &Expr) -> bool {
    if e.degree() <= 1 {
        return true;
    }
    if e.degree() == 2 {
        if let Some((h, _, _)) = crate::expr::quadratic_form(e) {
            return psd(&h, 1e-10);
        }
    }
    certify_convex_rec(e)
}

fn certify_convex_rec(e: &Expr) -> bool {
    // decomposition fallback for higher-degree sums of convex pieces
    use crate::expr::ExprView;
    if e.degree() <= 1 {
        return true;
    }
    match e.view() {
        ExprView::Add(parts) => parts.iter().all(certify_convex),
        ExprView::Mul(parts) => match parts {
            [head, rest @ ..] if rest.len() == 1 => match head.as_constant() {
                Some(c) if c >= 0.0 => certify_convex(&rest[0]),
                _ => false,
            },
            _ => false,
        },
        ExprView::Pow(base, k) => k % 2 == 0 && base.degree() <= 1,
        _ => false,
    }
}

/// Convexity of `e` in one block, uniformly over the other blocks: affine in
/// the block, or quadratic in the block with a constant PSD Hessian.
pub fn certify_convex_in_block(e: &Expr, block: &str) -> bool {
    let d = e.degree_in_block(block);
    if d <= 1 {
        return true;
    }
    if d == 2 {
        let dim = match e.space().block_dim(block) {
            Ok(d) => d,
            Err(_) => return false,
        };
        let mut h = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            let di = match e.deriv(block, i) {
                Ok(d) => d,
                Err(_) => return false,
            };
            for j in 0..dim {
                let dij = match di.deriv(block, j) {
                    Ok(d) => d,
                    Err(_) => return false,
                };
                match dij.as_constant() {
                    Some(c) => h[(i, j)] = c,
                    // Hessian varies with the other blocks: not uniform
                    None => {
                        if dij.degree() > 0 {
                            return false;
                        }
                        h[(i, j)] = dij.eval_flat(&vec![0.0; e.space().total_dim()]);
                    }
                }
            }
        }
        return psd(&h, 1e-10);
    }
    false
}

fn psd(h: &DMatrix<f64>, tol: f64) -> bool {
    if h.nrows() == 0 {
        return true;
    }
    let sym = (h + h.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    eig.eigenvalues.iter().all(|&l| l >= -tol)
}

/// Dimensions of a bilevel problem: upper decision n, lower decision m,
/// lower inequality count p, upper inequality count q.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub q: usize,
}

/// Optimistic bilevel problem: upper data `(F, G)` over blocks `(x, y)` and
/// `x`, lower data `(f, g)` over `(x, y)`.
#[derive(Debug)]
pub struct BilevelProblem {
    pub dims: Dims,
    pub space: Arc<VarSpace>,
    pub upper_objective: Expr,
    pub upper_constraints: Vec<Expr>,
    pub lower_objective: Expr,
    pub lower_constraints: Vec<Expr>,
    /// Structural certificate that `f(x,.)` and every `g_i(x,.)` are convex
    /// for each x. Duality-based reformulations require this to hold.
    pub lower_convex_in_y: bool,
}

impl BilevelProblem {
    pub fn new(
        n: usize,
        m: usize,
        upper_objective: Expr,
        upper_constraints: Vec<Expr>,
        lower_objective: Expr,
        lower_constraints: Vec<Expr>,
    ) -> Result<Arc<BilevelProblem>> {
        let space = VarSpace::new(vec![("x", n), ("y", m)])?;
        let upper_objective = upper_objective.lift_to(&space)?;
        let lower_objective = lower_objective.lift_to(&space)?;
        let upper_constraints = upper_constraints
            .into_iter()
            .map(|e| e.lift_to(&space))
            .collect::<Result<Vec<_>>>()?;
        let lower_constraints = lower_constraints
            .into_iter()
            .map(|e| e.lift_to(&space))
            .collect::<Result<Vec<_>>>()?;
        for g in &upper_constraints {
            if g.uses_block("y") {
                return Err(Error::InvalidInput(
                    "upper-level constraints may only use block x".into(),
                ));
            }
        }
        let lower_convex_in_y = certify_convex_in_block(&lower_objective, "y")
            && lower_constraints
                .iter()
                .all(|g| certify_convex_in_block(g, "y"));
        let dims = Dims { n, m, p: lower_constraints.len(), q: upper_constraints.len() };
        Ok(Arc::new(BilevelProblem {
            dims,
            space,
            upper_objective,
            upper_constraints,
            lower_objective,
            lower_constraints,
            lower_convex_in_y,
        }))
    }

    /// Space `(x, y, u)` with `u` of dimension p (p >= 1).
    pub fn space_xyu(&self) -> Result<Arc<VarSpace>> {
        if self.dims.p == 0 {
            return VarSpace::new(vec![("x", self.dims.n), ("y", self.dims.m)]);
        }
        VarSpace::new(vec![("x", self.dims.n), ("y", self.dims.m), ("u", self.dims.p)])
    }

    /// Space `(x, y, z, u)`.
    pub fn space_xyzu(&self) -> Result<Arc<VarSpace>> {
        let mut blocks = vec![("x", self.dims.n), ("y", self.dims.m), ("z", self.dims.m)];
        if self.dims.p > 0 {
            blocks.push(("u", self.dims.p));
        }
        VarSpace::new(blocks)
    }

    /// The lower-level problem at a fixed upper decision, over block `y`.
    pub fn lower_level_at(&self, x: &[f64]) -> Result<Nlp> {
        if x.len() != self.dims.n {
            return Err(Error::DimensionMismatch { expected: self.dims.n, got: x.len() });
        }
        let space_y = VarSpace::new(vec![("y", self.dims.m)])?;
        let obj = self
            .lower_objective
            .substitute_block("x", x)?
            .lift_to(&space_y)?;
        let ineqs = self
            .lower_constraints
            .iter()
            .map(|g| g.substitute_block("x", x)?.lift_to(&space_y))
            .collect::<Result<Vec<_>>>()?;
        Nlp::new(space_y, obj, ineqs, Vec::new(), Sense::Minimize)
    }

    /// Membership of `x` in the upper-level set `X = {x | G(x) <= 0}`.
    pub fn in_upper_set(&self, x: &[f64], tol: f64) -> Result<bool> {
        let mut pt = Point::zeros(self.space.clone());
        pt.set_block("x", x)?;
        for gk in &self.upper_constraints {
            if gk.eval(&pt)? > tol {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Lower-level Lagrangian `L(x, y, u) = f(x,y) + sum u_i g_i(x,y)` over the
/// space `(x, y, u)`; reduces to `f` when there are no lower constraints.
pub fn lagrangian(bp: &BilevelProblem) -> Result<Expr> {
    let space = bp.space_xyu()?;
    let f = bp.lower_objective.lift_to(&space)?;
    let mut terms = vec![f];
    for (i, g) in bp.lower_constraints.iter().enumerate() {
        let u_i = Expr::var(space.clone(), "u", i)?;
        terms.push(Expr::mul(vec![u_i, g.lift_to(&space)?])?);
    }
    Expr::add(terms)
}

/// KKT residual of `(w, v)` for an NLP: the max of stationarity (infinity
/// norm), primal feasibility, multiplier sign, and complementarity terms.
/// Zero (up to tolerance) exactly at KKT points.
pub fn kkt_residual(nlp: &Nlp, w: &Point, v: &[f64]) -> Result<f64> {
    let t = nlp.num_constraints();
    if v.len() != t {
        return Err(Error::DimensionMismatch { expected: t, got: v.len() });
    }
    let obj = nlp.min_objective();
    let mut stat = obj.grad_full(w)?;
    for (i, q) in nlp.inequalities.iter().chain(nlp.equalities.iter()).enumerate() {
        if v[i] != 0.0 {
            for (s, gqs) in stat.iter_mut().zip(q.grad_full(w)?) {
                *s += v[i] * gqs;
            }
        }
    }
    let mut r: f64 = stat.iter().fold(0.0, |a, s| a.max(s.abs()));
    for (i, q) in nlp.inequalities.iter().enumerate() {
        let qi = q.eval(w)?;
        r = r.max(qi.max(0.0));
        r = r.max((-v[i]).max(0.0));
        r = r.max((v[i] * qi).abs());
    }
    for (j, q) in nlp.equalities.iter().enumerate() {
        let _ = j;
        r = r.max(q.eval(w)?.abs());
    }
    Ok(r)
}

/// Extended-real value of an infimum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExtReal {
    Finite(f64),
    PlusInfinity,
    MinusInfinity,
}

impl ExtReal {
    pub fn finite(&self) -> Option<f64> {
        match self {
            ExtReal::Finite(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> f64 {
        match self {
            ExtReal::Finite(v) => *v,
            ExtReal::PlusInfinity => f64::INFINITY,
            ExtReal::MinusInfinity => f64::NEG_INFINITY,
        }
    }
}

/// Lower-level optimal value `phi(x)`; +inf when infeasible, -inf when
/// unbounded below.
pub fn value_function(bp: &BilevelProblem, x: &[f64], tol: f64) -> Result<ExtReal> {
    if !bp.lower_convex_in_y {
        return Err(Error::InvalidInput(
            "value function requires a lower level certified convex in y".into(),
        ));
    }
    let nlp = bp.lower_level_at(x)?;
    let start = Point::zeros(nlp.space.clone());
    let report = crate::solve::solve_convex(&nlp, &start, tol, 200)?;
    Ok(match report.status {
        SolveStatus::Infeasible => ExtReal::PlusInfinity,
        SolveStatus::Unbounded => ExtReal::MinusInfinity,
        _ => ExtReal::Finite(report.value),
    })
}

/// Membership `y in Psi(x)`: lower-level feasibility plus optimality of the
/// objective value against `phi(x)`, both within `tol`.
pub fn solution_membership(bp: &BilevelProblem, x: &[f64], y: &[f64], tol: f64) -> Result<bool> {
    if y.len() != bp.dims.m {
        return Err(Error::DimensionMismatch { expected: bp.dims.m, got: y.len() });
    }
    let mut pt = Point::zeros(bp.space.clone());
    pt.set_block("x", x)?;
    pt.set_block("y", y)?;
    for g in &bp.lower_constraints {
        if g.eval(&pt)? > tol {
            return Ok(false);
        }
    }
    let fval = bp.lower_objective.eval(&pt)?;
    match value_function(bp, x, tol.min(1e-8))? {
        ExtReal::Finite(phi) => Ok(fval <= phi + tol),
        ExtReal::PlusInfinity => Ok(false),
        ExtReal::MinusInfinity => Ok(false),
    }
}

/// The multiplier set `Lambda(x, y)` as an explicit polyhedron in u:
/// stationarity of the Lagrangian in y, nonnegativity, and zero entries for
/// inactive constraints.
#[derive(Debug, Clone)]
pub struct MultiplierPolyhedron {
    pub dim: usize,
    pub active: Vec<usize>,
    pub zero: Vec<usize>,
    /// Stationarity rows: `eq_matrix * u = eq_rhs` (m rows, p columns).
    pub eq_matrix: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub tol_act: f64,
}

impl MultiplierPolyhedron {
    pub fn to_polyhedron(&self) -> Polyhedron {
        let mut poly = Polyhedron::new(self.dim);
        for r in 0..self.eq_matrix.nrows() {
            let row: Vec<f64> = (0..self.dim).map(|c| self.eq_matrix[(r, c)]).collect();
            poly.add_eq(row, self.eq_rhs[r]);
        }
        for &i in &self.zero {
            let mut row = vec![0.0; self.dim];
            row[i] = 1.0;
            poly.add_eq(row, 0.0);
        }
        for i in 0..self.dim {
            poly.add_nonneg(i);
        }
        poly
    }

    pub fn contains(&self, u: &[f64], tol: f64) -> bool {
        u.len() == self.dim && self.to_polyhedron().max_violation(u) <= tol
    }

    pub fn is_empty(&self) -> Result<bool> {
        self.to_polyhedron().is_empty()
    }
}

/// Builds `Lambda(x, y)`; `y` must be feasible for the lower level at `x`
/// within `tol_act`.
pub fn multiplier_set(
    bp: &BilevelProblem,
    x: &[f64],
    y: &[f64],
    tol_act: f64,
) -> Result<MultiplierPolyhedron> {
    let mut pt = Point::zeros(bp.space.clone());
    pt.set_block("x", x)?;
    pt.set_block("y", y)?;
    let p = bp.dims.p;
    let mut active = Vec::new();
    let mut zero = Vec::new();
    for (i, g) in bp.lower_constraints.iter().enumerate() {
        let gi = g.eval(&pt)?;
        if gi > tol_act {
            return Err(Error::InvalidInput(format!(
                "y is infeasible for the lower level: g_{}(x,y) = {gi:.3e}",
                i + 1
            )));
        }
        if gi >= -tol_act {
            active.push(i);
        } else {
            zero.push(i);
        }
    }
    let m = bp.dims.m;
    let mut a = DMatrix::zeros(m, p);
    for (i, g) in bp.lower_constraints.iter().enumerate() {
        for (j, d) in g.grad("y", &pt)?.into_iter().enumerate() {
            a[(j, i)] = d;
        }
    }
    let grad_f = bp.lower_objective.grad("y", &pt)?;
    let b = DVector::from_iterator(m, grad_f.into_iter().map(|v| -v));
    Ok(MultiplierPolyhedron { dim: p, active, zero, eq_matrix: a, eq_rhs: b, tol_act })
}

/// All vertices (and recession rays) of a multiplier polyhedron. The free
/// dimension (active-set size) must not exceed `dim_cap`.
pub fn polyhedron_vertices(
    mp: &MultiplierPolyhedron,
    dim_cap: usize,
) -> Result<VertexEnumeration> {
    if mp.active.len() > dim_cap {
        return Err(Error::Capability(format!(
            "free dimension {} exceeds cap {dim_cap}",
            mp.active.len()
        )));
    }
    mp.to_polyhedron().enumerate(mp.dim.max(1).max(dim_cap))
}

/// Solver outcome classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Unbounded,
    Infeasible,
    ToleranceReached,
}

/// Result of a solve or a grid scan.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub point: Option<Point>,
    pub value: f64,
    pub kkt_residual: Option<f64>,
    pub multipliers: Option<Vec<f64>>,
    /// Recession certificate when unbounded: feasible direction with
    /// strictly decreasing objective.
    pub ray: Option<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtin;

    #[test]
    fn lagrangian_running_example() {
        let bp = builtin::running_example();
        let l = lagrangian(&bp).unwrap();
        // -y + u1(x+y-1) + u2(-x+y-1) at a few points
        let s = bp.space_xyu().unwrap();
        let at = |x: f64, y: f64, u1: f64, u2: f64| {
            Point::new(s.clone(), vec![x, y, u1, u2]).unwrap()
        };
        let f = |x: f64, y: f64, u1: f64, u2: f64| {
            -y + u1 * (x + y - 1.0) + u2 * (-x + y - 1.0)
        };
        for (x, y, u1, u2) in [(0.0, 1.0, 0.0, 1.0), (0.5, 0.5, 1.0, 0.0), (0.2, -0.3, 0.4, 0.7)] {
            assert!((l.eval(&at(x, y, u1, u2)).unwrap() - f(x, y, u1, u2)).abs() < 1e-12);
        }
    }

    #[test]
    fn lagrangian_no_constraints_is_objective() {
        let s = VarSpace::new(vec![("x", 1), ("y", 1)]).unwrap();
        let f = Expr::pow(Expr::var(s.clone(), "y", 0).unwrap(), 2);
        let bp = BilevelProblem::new(1, 1, f.clone(), vec![], f.clone(), vec![]).unwrap();
        let l = lagrangian(&bp).unwrap();
        let pt = Point::new(bp.space_xyu().unwrap(), vec![0.3, 2.0]).unwrap();
        assert_eq!(l.eval(&pt).unwrap(), 4.0);
    }

    #[test]
    fn lagrangian_cubic_example() {
        // y + u1(y^3 - x) + u2(-y)
        let bp = builtin::wolfe_counterexample();
        let l = lagrangian(&bp).unwrap();
        let s = bp.space_xyu().unwrap();
        let pt = Point::new(s, vec![8.0, -3.0, 0.1, 3.7]).unwrap();
        let expect = -3.0 + 0.1 * ((-27.0) - 8.0) - 3.7 * (-3.0);
        assert!((l.eval(&pt).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 4.6).abs() < 1e-12);
    }

    #[test]
    fn kkt_residual_cases() {
        let bp = builtin::running_example();
        let nlp = bp.lower_level_at(&[0.5]).unwrap();
        let w = Point::new(nlp.space.clone(), vec![0.5]).unwrap();
        let r = kkt_residual(&nlp, &w, &[1.0, 0.0]).unwrap();
        assert!(r <= 1e-12, "expected KKT point, residual {r}");

        // min w^2 unconstrained
        let s = VarSpace::new(vec![("w", 1)]).unwrap();
        let obj = Expr::pow(Expr::var(s.clone(), "w", 0).unwrap(), 2);
        let nlp = Nlp::new(s.clone(), obj, vec![], vec![], Sense::Minimize).unwrap();
        let at0 = Point::new(s.clone(), vec![0.0]).unwrap();
        let at1 = Point::new(s.clone(), vec![1.0]).unwrap();
        assert_eq!(kkt_residual(&nlp, &at0, &[]).unwrap(), 0.0);
        assert_eq!(kkt_residual(&nlp, &at1, &[]).unwrap(), 2.0);
    }

    #[test]
    fn kkt_residual_dimension_check() {
        let bp = builtin::running_example();
        let nlp = bp.lower_level_at(&[0.5]).unwrap();
        let w = Point::new(nlp.space.clone(), vec![0.5]).unwrap();
        assert!(matches!(
            kkt_residual(&nlp, &w, &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn convexity_certificates() {
        let s = VarSpace::new(vec![("x", 1), ("y", 1)]).unwrap();
        let x = Expr::var(s.clone(), "x", 0).unwrap();
        let y = Expr::var(s.clone(), "y", 0).unwrap();
        // (x-1)^2 + (y-1)^2: quadratic, PSD
        let q = Expr::add(vec![
            Expr::pow(Expr::add(vec![x.clone(), Expr::constant(s.clone(), -1.0)]).unwrap(), 2),
            Expr::pow(Expr::add(vec![y.clone(), Expr::constant(s.clone(), -1.0)]).unwrap(), 2),
        ])
        .unwrap();
        assert!(certify_convex(&q));
        // y^3 is not certified
        assert!(!certify_convex(&Expr::pow(y.clone(), 3)));
        // x*y is quadratic but indefinite
        assert!(!certify_convex(&Expr::mul(vec![x.clone(), y.clone()]).unwrap()));
        // x*(y1+y2)-style: affine in y although bilinear overall
        assert!(certify_convex_in_block(
            &Expr::mul(vec![x, y.clone()]).unwrap(),
            "y"
        ));
        assert!(!certify_convex_in_block(&Expr::pow(y, 3), "y"));
    }

    #[test]
    fn value_function_running_example() {
        let bp = builtin::running_example();
        for (x, expect) in [(0.0, -1.0), (0.5, -0.5), (-0.25, -0.75)] {
            let v = value_function(&bp, &[x], 1e-9).unwrap();
            assert!((v.finite().unwrap() - expect).abs() <= 1e-8, "phi({x})");
        }
    }

    #[test]
    fn value_function_infeasible_flag() {
        // lower level with contradictory constraints: y <= -1, -y <= -1
        let s = VarSpace::new(vec![("x", 1), ("y", 1)]).unwrap();
        let y = Expr::var(s.clone(), "y", 0).unwrap();
        let one = Expr::constant(s.clone(), 1.0);
        let bp = BilevelProblem::new(
            1,
            1,
            y.clone(),
            vec![],
            y.clone(),
            vec![
                Expr::add(vec![y.clone(), one.clone()]).unwrap(),
                Expr::add(vec![Expr::neg(y), one]).unwrap(),
            ],
        )
        .unwrap();
        assert_eq!(value_function(&bp, &[0.0], 1e-9).unwrap(), ExtReal::PlusInfinity);
    }

    #[test]
    fn solution_membership_running_example() {
        let bp = builtin::running_example();
        assert!(solution_membership(&bp, &[0.0], &[1.0], 1e-7).unwrap());
        assert!(!solution_membership(&bp, &[0.0], &[0.0], 1e-7).unwrap());
        assert!(solution_membership(&bp, &[0.5], &[0.5], 1e-7).unwrap());
    }

    #[test]
    fn multiplier_set_examples() {
        let bp = builtin::running_example();
        // at (0,1): {u >= 0 | u1+u2 = 1}
        let mp = multiplier_set(&bp, &[0.0], &[1.0], 1e-7).unwrap();
        assert_eq!(mp.active, vec![0, 1]);
        let e = polyhedron_vertices(&mp, 6).unwrap();
        assert_eq!(e.vertices, vec![vec![0.0, 1.0], vec![1.0, 0.0]]);

        // at (1/2,1/2): singleton {(1,0)}
        let mp = multiplier_set(&bp, &[0.5], &[0.5], 1e-7).unwrap();
        assert_eq!(mp.active, vec![0]);
        assert_eq!(mp.zero, vec![1]);
        let e = polyhedron_vertices(&mp, 6).unwrap();
        assert_eq!(e.vertices, vec![vec![1.0, 0.0]]);
        assert!(e.rays.is_empty());

        // infeasible y rejected
        assert!(multiplier_set(&bp, &[0.0], &[2.0], 1e-7).is_err());
    }

    #[test]
    fn multiplier_set_zero_dim() {
        // p = 0 with stationary / nonstationary y
        let s = VarSpace::new(vec![("x", 1), ("y", 1)]).unwrap();
        let y = Expr::var(s.clone(), "y", 0).unwrap();
        let f = Expr::pow(y, 2);
        let bp = BilevelProblem::new(1, 1, f.clone(), vec![], f, vec![]).unwrap();
        let mp = multiplier_set(&bp, &[0.0], &[0.0], 1e-7).unwrap();
        let e = polyhedron_vertices(&mp, 6).unwrap();
        assert_eq!(e.vertices, vec![Vec::<f64>::new()]);
        let mp = multiplier_set(&bp, &[0.0], &[1.0], 1e-7).unwrap();
        let e = polyhedron_vertices(&mp, 6).unwrap();
        assert!(e.vertices.is_empty());
    }

    #[test]
    fn multiplier_vertices_kkt_consistency() {
        // every vertex of Lambda(x,y) yields lower-level KKT residual ~ 0
        let bp = builtin::running_example();
        for (x, y) in [(0.0, 1.0), (0.5, 0.5), (-0.5, 0.5)] {
            let nlp = bp.lower_level_at(&[x]).unwrap();
            let w = Point::new(nlp.space.clone(), vec![y]).unwrap();
            let mp = multiplier_set(&bp, &[x], &[y], 1e-7).unwrap();
            let e = polyhedron_vertices(&mp, 6).unwrap();
            assert!(!e.vertices.is_empty());
            for v in &e.vertices {
                let r = kkt_residual(&nlp, &w, v).unwrap();
                assert!(r <= 1e-8, "vertex {v:?} residual {r}");
            }
        }
    }
}
