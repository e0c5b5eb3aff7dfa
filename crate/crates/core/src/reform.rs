//! Single-level reformulations of the bilevel problem and their size
//! summaries.
//!
//! Six kinds: value-function, KKT, generalized-equation (feasibility test
//! only), Lagrange-dual, Wolfe-dual, and Mond-Weir-dual. Value-function
//! style constraints that have no algebraic form are carried as callable
//! implicit constraints with an evaluation budget; the Lagrange-dual
//! reformulation emits a fully algebraic system whenever the lower-level
//! Lagrangian is affine in `y`.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::duality::{unconstrained_infimum, Infimum};
use crate::error::{Error, Result};
use crate::expr::{Expr, Point};
use crate::lp::{Cmp, LinearProgram, LpOutcome};
use crate::model::{lagrangian, value_function, BilevelProblem, Dims, ExtReal, Nlp, Sense};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ReformKind {
    Vf,
    Kkt,
    Ge,
    Ld,
    Wd,
    Mwd,
}

impl ReformKind {
    pub fn name(&self) -> &'static str {
        match self {
            ReformKind::Vf => "vf",
            ReformKind::Kkt => "kkt",
            ReformKind::Ge => "ge",
            ReformKind::Ld => "ld",
            ReformKind::Wd => "wd",
            ReformKind::Mwd => "mwd",
        }
    }

    pub fn parse(s: &str) -> Result<ReformKind> {
        Ok(match s {
            "vf" => ReformKind::Vf,
            "kkt" => ReformKind::Kkt,
            "ge" => ReformKind::Ge,
            "ld" => ReformKind::Ld,
            "wd" => ReformKind::Wd,
            "mwd" => ReformKind::Mwd,
            other => {
                return Err(Error::InvalidInput(format!(
                    "unknown reformulation kind `{other}` (expected vf|kkt|ge|ld|wd|mwd)"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Original,
    Implicit,
}

/// A constraint only available through evaluation (no gradients). The
/// violation value is `<= 0` when satisfied and may be `+inf`.
pub struct ImplicitConstraint {
    pub name: String,
    /// Marked true for value-function style constraints, which are not
    /// locally Lipschitz in general; gradient-based checks must refuse them.
    pub lipschitz_unreliable: bool,
    eval_fn: Arc<dyn Fn(&Point) -> Result<f64> + Send + Sync>,
    budget: u64,
    used: AtomicU64,
}

impl std::fmt::Debug for ImplicitConstraint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImplicitConstraint")
            .field("name", &self.name)
            .field("budget", &self.budget)
            .field("used", &self.used.load(Ordering::Relaxed))
            .finish()
    }
}

impl ImplicitConstraint {
    pub fn violation(&self, pt: &Point) -> Result<f64> {
        let used = self.used.fetch_add(1, Ordering::Relaxed);
        if used >= self.budget {
            return Err(Error::Capability(format!(
                "evaluation budget of implicit constraint `{}` exhausted ({})",
                self.name, self.budget
            )));
        }
        (self.eval_fn)(pt)
    }

    pub fn evaluations_used(&self) -> u64 {
        self.used.load(Ordering::Relaxed)
    }
}

const DEFAULT_IMPLICIT_BUDGET: u64 = 200_000_000;

/// A reformulated single-level program, tagged with its kind and the
/// provenance of each variable block.
#[derive(Debug)]
pub struct ReformulatedNlp {
    pub kind: ReformKind,
    pub nlp: Nlp,
    pub provenance: BTreeMap<String, Provenance>,
    pub implicit_constraints: Vec<ImplicitConstraint>,
    /// True when a Lagrange-dual value constraint was emitted algebraically;
    /// the emission then carries `m` extra domain equalities over the
    /// canonical count.
    pub closed_form: bool,
    /// True when the special LP-structure elimination removed all
    /// occurrences of `z` from the Wolfe-dual emission.
    pub z_eliminated: bool,
    pub source: Arc<BilevelProblem>,
}

impl ReformulatedNlp {
    /// Number of emitted constraints (algebraic rows plus callable rows).
    pub fn emitted_constraint_count(&self) -> usize {
        self.nlp.inequalities.len() + self.nlp.equalities.len() + self.implicit_constraints.len()
    }

    /// Largest violation over algebraic and implicit constraints.
    pub fn max_violation(&self, pt: &Point) -> Result<f64> {
        let mut v = self.nlp.max_violation(pt)?;
        for ic in &self.implicit_constraints {
            v = v.max(ic.violation(pt)?);
            if v.is_infinite() {
                return Ok(v);
            }
        }
        Ok(v)
    }

    pub fn is_feasible(&self, pt: &Point, tol: f64) -> Result<bool> {
        Ok(self.max_violation(pt)? <= tol)
    }
}

/// Variable/constraint counts of a reformulation, per the standard
/// comparison formulas (counted on the canonical formulation, with the
/// generalized-equation equilibrium constraint taken m-dimensional).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CountSummary {
    pub kind: ReformKind,
    pub n_vars: usize,
    pub n_implicit_vars: usize,
    pub n_constraints: usize,
}

pub fn count_summary(dims: Dims, kind: ReformKind) -> CountSummary {
    let Dims { n, m, p, q } = dims;
    let (n_vars, n_implicit_vars, n_constraints) = match kind {
        ReformKind::Vf => (n + m, 0, p + q + 1),
        ReformKind::Kkt => (n + m + p, p, m + 2 * p + q + 1),
        ReformKind::Ge => (n + m, 0, m + q),
        ReformKind::Ld => (n + m + p, p, 2 * p + q + 1),
        ReformKind::Wd => (n + 2 * m + p, m + p, m + 2 * p + q + 1),
        ReformKind::Mwd => (n + 2 * m + p, m + p, m + 2 * p + q + 2),
    };
    CountSummary { kind, n_vars, n_implicit_vars, n_constraints }
}

fn base_provenance(implicit_blocks: &[&str]) -> BTreeMap<String, Provenance> {
    let mut map = BTreeMap::new();
    map.insert("x".to_string(), Provenance::Original);
    map.insert("y".to_string(), Provenance::Original);
    for b in implicit_blocks {
        map.insert(b.to_string(), Provenance::Implicit);
    }
    map
}

fn require_convex_lower(bp: &BilevelProblem) -> Result<()> {
    if !bp.lower_convex_in_y {
        return Err(Error::InvalidInput(
            "this reformulation requires a lower level certified convex in y".into(),
        ));
    }
    Ok(())
}

/// Value-function reformulation: `min F s.t. G(x) <= 0, g(x,y) <= 0,
/// f(x,y) <= phi(x)`. The value constraint is callable: `phi` is piecewise
/// only and has no polynomial form even for linear lower levels.
pub fn build_vf_ref(bp: &Arc<BilevelProblem>) -> Result<ReformulatedNlp> {
    let space = bp.space.clone();
    let mut ineqs = bp.upper_constraints.clone();
    ineqs.extend(bp.lower_constraints.iter().cloned());
    let nlp = Nlp::new(space, bp.upper_objective.clone(), ineqs, Vec::new(), Sense::Minimize)?;
    let bp_c = bp.clone();
    let f = bp.lower_objective.clone();
    let value_constraint = ImplicitConstraint {
        name: "value: f(x,y) - phi(x) <= 0".into(),
        lipschitz_unreliable: true,
        eval_fn: Arc::new(move |pt: &Point| {
            let x = pt.block("x")?;
            let fval = f.eval(pt)?;
            Ok(match value_function(&bp_c, x, 1e-9)? {
                ExtReal::Finite(phi) => fval - phi,
                // empty or unbounded lower level: declared infeasible
                ExtReal::PlusInfinity | ExtReal::MinusInfinity => f64::INFINITY,
            })
        }),
        budget: DEFAULT_IMPLICIT_BUDGET,
        used: AtomicU64::new(0),
    };
    Ok(ReformulatedNlp {
        kind: ReformKind::Vf,
        nlp,
        provenance: base_provenance(&[]),
        implicit_constraints: vec![value_constraint],
        closed_form: false,
        z_eliminated: false,
        source: bp.clone(),
    })
}

/// How the KKT reformulation encodes complementarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Complementarity {
    /// One scalar row `u' g(x,y) = 0` (the printed form).
    Aggregated,
    /// One row `u_i g_i(x,y) = 0` per constraint.
    PerComponent,
}

/// KKT reformulation: `g <= 0, u >= 0, u'g = 0, grad_y L = 0`.
pub fn build_kkt_ref(bp: &Arc<BilevelProblem>, compl: Complementarity) -> Result<ReformulatedNlp> {
    require_convex_lower(bp)?;
    let space = bp.space_xyu()?;
    let p = bp.dims.p;
    let mut ineqs: Vec<Expr> = Vec::new();
    for gk in &bp.upper_constraints {
        ineqs.push(gk.lift_to(&space)?);
    }
    for g in &bp.lower_constraints {
        ineqs.push(g.lift_to(&space)?);
    }
    for i in 0..p {
        ineqs.push(Expr::neg(Expr::var(space.clone(), "u", i)?));
    }
    let mut eqs: Vec<Expr> = Vec::new();
    if p > 0 {
        match compl {
            Complementarity::Aggregated => {
                let mut terms = Vec::with_capacity(p);
                for (i, g) in bp.lower_constraints.iter().enumerate() {
                    let ui = Expr::var(space.clone(), "u", i)?;
                    terms.push(Expr::mul(vec![ui, g.lift_to(&space)?])?);
                }
                eqs.push(Expr::add(terms)?);
            }
            Complementarity::PerComponent => {
                for (i, g) in bp.lower_constraints.iter().enumerate() {
                    let ui = Expr::var(space.clone(), "u", i)?;
                    eqs.push(Expr::mul(vec![ui, g.lift_to(&space)?])?);
                }
            }
        }
    }
    let lag = lagrangian(bp)?.lift_to(&space)?;
    for j in 0..bp.dims.m {
        eqs.push(lag.deriv("y", j)?);
    }
    let nlp = Nlp::new(space.clone(), bp.upper_objective.lift_to(&space)?, ineqs, eqs, Sense::Minimize)?;
    Ok(ReformulatedNlp {
        kind: ReformKind::Kkt,
        nlp,
        provenance: base_provenance(&["u"]),
        implicit_constraints: Vec::new(),
        closed_form: false,
        z_eliminated: false,
        source: bp.clone(),
    })
}

/// Lagrange-dual reformulation: `g <= 0, u >= 0, f(x,y) <= psi_l(x,u)`.
/// When the Lagrangian is affine in `y`, `psi_l` has the closed form
/// "L(x,0,u) on the stationarity domain", and the emission is algebraic:
/// the m domain equalities plus an affine value inequality. Otherwise the
/// value constraint is callable (analytic infimum, quadratic in y only).
pub fn build_ld_ref(bp: &Arc<BilevelProblem>) -> Result<ReformulatedNlp> {
    require_convex_lower(bp)?;
    let space = bp.space_xyu()?;
    let p = bp.dims.p;
    let mut ineqs: Vec<Expr> = Vec::new();
    for gk in &bp.upper_constraints {
        ineqs.push(gk.lift_to(&space)?);
    }
    for g in &bp.lower_constraints {
        ineqs.push(g.lift_to(&space)?);
    }
    for i in 0..p {
        ineqs.push(Expr::neg(Expr::var(space.clone(), "u", i)?));
    }
    let lag = lagrangian(bp)?.lift_to(&space)?;
    let f_lift = bp.lower_objective.lift_to(&space)?;

    let affine_in_y = lag.degree_in_block("y") <= 1;
    let mut eqs: Vec<Expr> = Vec::new();
    let mut implicit = Vec::new();
    let closed_form = affine_in_y;
    if affine_in_y {
        // domain: the y-coefficients of L vanish; value: f <= L(x, 0, u)
        let m = bp.dims.m;
        for j in 0..m {
            eqs.push(lag.deriv("y", j)?);
        }
        let l_at_zero = lag.substitute_block("y", &vec![0.0; m])?;
        ineqs.push(Expr::sub(f_lift, l_at_zero)?);
    } else {
        let bp_c = bp.clone();
        let lag_c = lagrangian(bp)?;
        implicit.push(ImplicitConstraint {
            name: "value: f(x,y) - psi_l(x,u) <= 0".into(),
            lipschitz_unreliable: true,
            eval_fn: Arc::new(move |pt: &Point| {
                let x = pt.block("x")?.to_vec();
                let u = pt.block("u")?.to_vec();
                if u.iter().any(|&ui| ui < 0.0) {
                    return Ok(f64::INFINITY);
                }
                let mut pt_f = Point::zeros(bp_c.space.clone());
                pt_f.set_block("x", &x)?;
                pt_f.set_block("y", pt.block("y")?)?;
                let fval = bp_c.lower_objective.eval(&pt_f)?;
                // psi_l(x, u) by analytic infimum over y
                let fixed = lag_c.substitute_block("x", &x)?.substitute_block("u", &u)?;
                let space_y = crate::expr::VarSpace::new(vec![("y", bp_c.dims.m)])?;
                let in_y = fixed.lift_to(&space_y)?;
                Ok(match unconstrained_infimum(&in_y, 1e-10)? {
                    Infimum::Finite { value, .. } => fval - value,
                    Infimum::MinusInfinity { .. } => f64::INFINITY,
                })
            }),
            budget: DEFAULT_IMPLICIT_BUDGET,
            used: AtomicU64::new(0),
        });
    }
    let nlp = Nlp::new(
        space.clone(),
        bp.upper_objective.lift_to(&space)?,
        ineqs,
        eqs,
        Sense::Minimize,
    )?;
    Ok(ReformulatedNlp {
        kind: ReformKind::Ld,
        nlp,
        provenance: base_provenance(&["u"]),
        implicit_constraints: implicit,
        closed_form,
        z_eliminated: false,
        source: bp.clone(),
    })
}

/// Checks the special structure `f = f1(x) + c'y`, `g = Ay - b(x)` with
/// constant `c` and `A`, under which the Wolfe-dual emission does not need
/// the variable `z`.
fn lp_structure_in_y(bp: &BilevelProblem) -> Result<bool> {
    let m = bp.dims.m;
    for j in 0..m {
        if bp.lower_objective.deriv("y", j)?.degree() > 0 {
            return Ok(false);
        }
        for g in &bp.lower_constraints {
            if g.deriv("y", j)?.degree() > 0 {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Wolfe-dual reformulation: `g(x,y) <= 0, u >= 0, f(x,y) <= L(x,z,u),
/// grad_z L(x,z,u) = 0` over blocks `(x,y,z,u)`. Under the special LP
/// structure in `y`, the emitted constraints contain no `z` (the block is
/// kept so variable counts are unchanged).
pub fn build_wd_ref(bp: &Arc<BilevelProblem>) -> Result<ReformulatedNlp> {
    require_convex_lower(bp)?;
    let space = bp.space_xyzu()?;
    let p = bp.dims.p;
    let m = bp.dims.m;
    let mut ineqs: Vec<Expr> = Vec::new();
    for gk in &bp.upper_constraints {
        ineqs.push(gk.lift_to(&space)?);
    }
    for g in &bp.lower_constraints {
        ineqs.push(g.lift_to(&space)?);
    }
    for i in 0..p {
        ineqs.push(Expr::neg(Expr::var(space.clone(), "u", i)?));
    }
    let mut eqs: Vec<Expr> = Vec::new();
    let f_lift = bp.lower_objective.lift_to(&space)?;
    let z_eliminated = lp_structure_in_y(bp)?;
    if z_eliminated {
        let lag = lagrangian(bp)?.lift_to(&space)?;
        for j in 0..m {
            eqs.push(lag.deriv("y", j)?);
        }
        let l_at_zero = lag.substitute_block("y", &vec![0.0; m])?;
        ineqs.push(Expr::sub(f_lift, l_at_zero)?);
    } else {
        let lag_z = lagrangian(bp)?.rename_block("y", "z", &space)?;
        ineqs.push(Expr::sub(f_lift, lag_z.clone())?);
        for j in 0..m {
            eqs.push(lag_z.deriv("z", j)?);
        }
    }
    let nlp = Nlp::new(
        space.clone(),
        bp.upper_objective.lift_to(&space)?,
        ineqs,
        eqs,
        Sense::Minimize,
    )?;
    Ok(ReformulatedNlp {
        kind: ReformKind::Wd,
        nlp,
        provenance: base_provenance(&["z", "u"]),
        implicit_constraints: Vec::new(),
        closed_form: false,
        z_eliminated,
        source: bp.clone(),
    })
}

/// Mond-Weir-dual reformulation: `g(x,y) <= 0, u >= 0, f(x,y) <= f(x,z),
/// u'g(x,z) >= 0, grad_z L(x,z,u) = 0`; one scalar inequality more than the
/// Wolfe-dual emission.
pub fn build_mwd_ref(bp: &Arc<BilevelProblem>) -> Result<ReformulatedNlp> {
    require_convex_lower(bp)?;
    let space = bp.space_xyzu()?;
    let p = bp.dims.p;
    let m = bp.dims.m;
    let mut ineqs: Vec<Expr> = Vec::new();
    for gk in &bp.upper_constraints {
        ineqs.push(gk.lift_to(&space)?);
    }
    for g in &bp.lower_constraints {
        ineqs.push(g.lift_to(&space)?);
    }
    for i in 0..p {
        ineqs.push(Expr::neg(Expr::var(space.clone(), "u", i)?));
    }
    let f_lift = bp.lower_objective.lift_to(&space)?;
    let f_z = bp.lower_objective.rename_block("y", "z", &space)?;
    ineqs.push(Expr::sub(f_lift, f_z)?);
    if p > 0 {
        let mut terms = Vec::with_capacity(p);
        for (i, g) in bp.lower_constraints.iter().enumerate() {
            let gi_z = g.rename_block("y", "z", &space)?;
            let ui = Expr::var(space.clone(), "u", i)?;
            terms.push(Expr::mul(vec![ui, gi_z])?);
        }
        ineqs.push(Expr::neg(Expr::add(terms)?));
    } else {
        ineqs.push(Expr::constant(space.clone(), 0.0));
    }
    let lag_z = lagrangian(bp)?.rename_block("y", "z", &space)?;
    let mut eqs: Vec<Expr> = Vec::new();
    for j in 0..m {
        eqs.push(lag_z.deriv("z", j)?);
    }
    let nlp = Nlp::new(
        space.clone(),
        bp.upper_objective.lift_to(&space)?,
        ineqs,
        eqs,
        Sense::Minimize,
    )?;
    Ok(ReformulatedNlp {
        kind: ReformKind::Mwd,
        nlp,
        provenance: base_provenance(&["z", "u"]),
        implicit_constraints: Vec::new(),
        closed_form: false,
        z_eliminated: false,
        source: bp.clone(),
    })
}

pub fn build_reformulation(bp: &Arc<BilevelProblem>, kind: ReformKind) -> Result<ReformulatedNlp> {
    match kind {
        ReformKind::Vf => build_vf_ref(bp),
        ReformKind::Kkt => build_kkt_ref(bp, Complementarity::Aggregated),
        ReformKind::Ld => build_ld_ref(bp),
        ReformKind::Wd => build_wd_ref(bp),
        ReformKind::Mwd => build_mwd_ref(bp),
        ReformKind::Ge => Err(Error::Capability(
            "the generalized-equation reformulation is exposed as a feasibility test only".into(),
        )),
    }
}

/// Generalized-equation membership test at `(x, y)`: whether
/// `-grad_y f(x,y)` lies in the cone of active constraint gradients
/// (nonnegative combinations), decided by LP.
pub fn ge_ref_feasibility(bp: &BilevelProblem, x: &[f64], y: &[f64], tol: f64) -> Result<bool> {
    if !bp.in_upper_set(x, tol)? {
        return Err(Error::InvalidInput("x violates the upper-level constraints".into()));
    }
    let mut pt = Point::zeros(bp.space.clone());
    pt.set_block("x", x)?;
    pt.set_block("y", y)?;
    let mut active: Vec<usize> = Vec::new();
    for (i, g) in bp.lower_constraints.iter().enumerate() {
        let gi = g.eval(&pt)?;
        if gi > tol {
            return Err(Error::InvalidInput(format!(
                "y infeasible for the lower level: g_{}(x,y) = {gi:.3e}",
                i + 1
            )));
        }
        if gi >= -1e-7 {
            active.push(i);
        }
    }
    let m = bp.dims.m;
    let target: Vec<f64> = bp
        .lower_objective
        .grad("y", &pt)?
        .into_iter()
        .map(|v| -v)
        .collect();
    if active.is_empty() {
        return Ok(target.iter().all(|v| v.abs() <= tol));
    }
    let k = active.len();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    for &i in &active {
        cols.push(bp.lower_constraints[i].grad("y", &pt)?);
    }
    // minimized L1 residual of `sum u_i grad g_i = target` over u >= 0,
    // through slack splitting; membership iff the residual is within tol
    let nv = k + 2 * m;
    let mut obj = vec![0.0; nv];
    for o in obj.iter_mut().skip(k) {
        *o = 1.0;
    }
    let mut lp = LinearProgram::new(nv, true, obj);
    for r in 0..m {
        let mut coeffs = vec![0.0; nv];
        for (c, col) in cols.iter().enumerate() {
            coeffs[c] = col[r];
        }
        coeffs[k + 2 * r] = 1.0;
        coeffs[k + 2 * r + 1] = -1.0;
        lp.add_row(coeffs, Cmp::Eq, target[r]);
    }
    for j in 0..nv {
        lp.set_lower(j, 0.0);
    }
    match lp.solve()? {
        LpOutcome::Optimal { x: u, .. } => {
            let mut res = 0.0f64;
            for r in 0..m {
                let mut s = 0.0;
                for (c, col) in cols.iter().enumerate() {
                    s += col[r] * u[c];
                }
                res = res.max((s - target[r]).abs());
            }
            Ok(res <= tol)
        }
        other => Err(Error::Internal(format!(
            "residual minimization cannot be {other:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtin;
    use crate::expr::VarSpace;

    fn pt(r: &ReformulatedNlp, vals: &[f64]) -> Point {
        Point::new(r.nlp.space.clone(), vals.to_vec()).unwrap()
    }

    #[test]
    fn vf_ref_running_example() {
        let bp = builtin::running_example();
        let r = build_vf_ref(&bp).unwrap();
        assert_eq!(r.emitted_constraint_count(), 3);
        assert_eq!(r.implicit_constraints.len(), 1);
        // phi(x) = |x| - 1 on [-1, 1]: (0, 1) feasible, (0, 0.5) not optimal
        assert!(r.is_feasible(&pt(&r, &[0.0, 1.0]), 1e-7).unwrap());
        let v = r.max_violation(&pt(&r, &[0.0, 0.5])).unwrap();
        assert!((v - 0.5).abs() <= 1e-7, "violation {v}");
        assert!(r.is_feasible(&pt(&r, &[0.5, 0.5]), 1e-7).unwrap());
    }

    #[test]
    fn vf_ref_infeasible_lower_level() {
        // contradictory lower-level constraints: value row reports +inf
        let s = VarSpace::new(vec![("x", 1), ("y", 1)]).unwrap();
        let y = Expr::var(s.clone(), "y", 0).unwrap();
        let one = Expr::constant(s.clone(), 1.0);
        let bp = crate::model::BilevelProblem::new(
            1,
            1,
            Expr::pow(y.clone(), 2),
            vec![],
            y.clone(),
            vec![
                Expr::add(vec![y.clone(), one.clone()]).unwrap(),
                Expr::sub(one, y).unwrap(),
            ],
        )
        .unwrap();
        let r = build_vf_ref(&bp).unwrap();
        let viol = r.implicit_constraints[0]
            .violation(&pt(&r, &[0.0, 0.0]))
            .unwrap();
        assert!(viol.is_infinite());
    }

    #[test]
    fn vf_ref_trivial_when_f_ignores_y() {
        let s = VarSpace::new(vec![("x", 1), ("y", 1)]).unwrap();
        let x = Expr::var(s.clone(), "x", 0).unwrap();
        let y = Expr::var(s.clone(), "y", 0).unwrap();
        let bp = crate::model::BilevelProblem::new(
            1,
            1,
            Expr::pow(y, 2),
            vec![],
            Expr::pow(x, 2),
            vec![],
        )
        .unwrap();
        let r = build_vf_ref(&bp).unwrap();
        assert!(r.is_feasible(&pt(&r, &[3.0, -2.0]), 1e-7).unwrap());
    }

    #[test]
    fn kkt_ref_running_example() {
        let bp = builtin::running_example();
        let r = build_kkt_ref(&bp, Complementarity::Aggregated).unwrap();
        assert_eq!(r.nlp.space.total_dim(), 4);
        assert_eq!(r.emitted_constraint_count(), 6);
        let cs = count_summary(bp.dims, ReformKind::Kkt);
        assert_eq!(cs.n_constraints, 6);
        assert_eq!(r.emitted_constraint_count(), cs.n_constraints);
        // (0, 1, (0.3, 0.7)) is KKT-feasible; (0, 1, (1, 2)) is not
        assert!(r.is_feasible(&pt(&r, &[0.0, 1.0, 0.3, 0.7]), 1e-9).unwrap());
        let v = r.max_violation(&pt(&r, &[0.0, 1.0, 1.0, 2.0])).unwrap();
        assert!((v - 2.0).abs() <= 1e-12);
        assert_eq!(r.provenance["u"], Provenance::Implicit);
    }

    #[test]
    fn kkt_ref_reduces_to_stationarity_when_unconstrained() {
        let s = VarSpace::new(vec![("x", 1), ("y", 1)]).unwrap();
        let y = Expr::var(s.clone(), "y", 0).unwrap();
        let f = Expr::pow(y, 2);
        let bp = crate::model::BilevelProblem::new(1, 1, f.clone(), vec![], f, vec![]).unwrap();
        let r = build_kkt_ref(&bp, Complementarity::Aggregated).unwrap();
        assert_eq!(r.nlp.equalities.len(), 1);
        assert!(r.nlp.inequalities.is_empty());
        assert!(r.is_feasible(&pt(&r, &[0.4, 0.0]), 1e-9).unwrap());
        assert!(!r.is_feasible(&pt(&r, &[0.4, 1.0]), 1e-9).unwrap());
    }

    #[test]
    fn ld_ref_closed_form_running_example() {
        let bp = builtin::running_example();
        let r = build_ld_ref(&bp).unwrap();
        assert!(r.closed_form);
        assert!(r.implicit_constraints.is_empty());
        // canonical count 5 plus m = 1 domain equality
        let cs = count_summary(bp.dims, ReformKind::Ld);
        assert_eq!(cs.n_constraints, 5);
        assert_eq!(r.emitted_constraint_count(), cs.n_constraints + bp.dims.m);
        // feasibility matches the multiplier set on vertices of the simplex
        assert!(r.is_feasible(&pt(&r, &[0.0, 1.0, 0.0, 1.0]), 1e-9).unwrap());
        assert!(r.is_feasible(&pt(&r, &[0.0, 1.0, 1.0, 0.0]), 1e-9).unwrap());
        assert!(r.is_feasible(&pt(&r, &[0.0, 1.0, 0.5, 0.5]), 1e-9).unwrap());
        assert!(r.is_feasible(&pt(&r, &[0.5, 0.5, 1.0, 0.0]), 1e-9).unwrap());
        // y optimal but u not in Lambda(x, y)
        assert!(!r.is_feasible(&pt(&r, &[0.1, 0.9, 0.0, 1.0]), 1e-9).unwrap());
        // u on the simplex but y not optimal
        assert!(!r.is_feasible(&pt(&r, &[0.0, 0.0, 0.5, 0.5]), 1e-9).unwrap());
    }

    #[test]
    fn ld_ref_closed_form_bcq_fails_instance() {
        // psi_l = -2 u1 on { x + u1 + u2 = 0, x + u1 - u2 = 0 }
        let bp = builtin::bcq_fails_example();
        let r = build_ld_ref(&bp).unwrap();
        assert!(r.closed_form);
        assert_eq!(r.nlp.equalities.len(), 2);
        // the reference point (0, (0,1), (0,0)) is feasible
        assert!(r.is_feasible(&pt(&r, &[0.0, 0.0, 1.0, 0.0, 0.0]), 1e-9).unwrap());
        // domain equalities pin x + u1 +- u2 = 0
        assert!(!r.is_feasible(&pt(&r, &[0.5, 0.0, 1.0, 0.0, 0.0]), 1e-9).unwrap());
    }

    #[test]
    fn ld_ref_callable_on_quadratic_lower_level() {
        // lower: min_y (y - x)^2 s.t. -y <= 0; Lagrangian quadratic in y
        let s = VarSpace::new(vec![("x", 1), ("y", 1)]).unwrap();
        let x = Expr::var(s.clone(), "x", 0).unwrap();
        let y = Expr::var(s.clone(), "y", 0).unwrap();
        let f = Expr::pow(Expr::sub(y.clone(), x).unwrap(), 2);
        let bp = crate::model::BilevelProblem::new(
            1,
            1,
            Expr::pow(y.clone(), 2),
            vec![],
            f,
            vec![Expr::neg(y)],
        )
        .unwrap();
        let r = build_ld_ref(&bp).unwrap();
        assert!(!r.closed_form);
        assert_eq!(r.implicit_constraints.len(), 1);
        // at x = 1: optimum y = 1, u = 0; psi_l(1, 0) = 0
        assert!(r.is_feasible(&pt(&r, &[1.0, 1.0, 0.0]), 1e-7).unwrap());
        // y = 0.5 is suboptimal: f = 0.25 > psi_l(1,0) = 0
        assert!(!r.is_feasible(&pt(&r, &[1.0, 0.5, 0.0]), 1e-7).unwrap());
    }

    #[test]
    fn wd_ref_running_example_is_z_free() {
        let bp = builtin::running_example();
        let r = build_wd_ref(&bp).unwrap();
        assert!(r.z_eliminated);
        assert_eq!(r.nlp.space.total_dim(), 5);
        let cs = count_summary(bp.dims, ReformKind::Wd);
        assert_eq!(cs.n_vars, 5);
        assert_eq!(cs.n_constraints, 6);
        assert_eq!(r.emitted_constraint_count(), cs.n_constraints);
        for e in r.nlp.inequalities.iter().chain(r.nlp.equalities.iter()) {
            assert!(!e.uses_block("z"), "z occurs in emitted row {e}");
        }
        // (0, 1, z, (0,1)) feasible for any z
        for z in [-3.0, 0.0, 1.0, 7.5] {
            assert!(r.is_feasible(&pt(&r, &[0.0, 1.0, z, 0.0, 1.0]), 1e-9).unwrap());
        }
        // y >= 1 - (u1-u2)x binds: (0.2, 0.9, ., (0,1)) infeasible
        assert!(!r.is_feasible(&pt(&r, &[0.2, 0.9, 0.0, 0.0, 1.0]), 1e-9).unwrap());
    }

    #[test]
    fn wd_ref_general_form_keeps_z() {
        // quadratic lower objective: no elimination
        let s = VarSpace::new(vec![("x", 1), ("y", 1)]).unwrap();
        let x = Expr::var(s.clone(), "x", 0).unwrap();
        let y = Expr::var(s.clone(), "y", 0).unwrap();
        let f = Expr::pow(Expr::sub(y.clone(), x).unwrap(), 2);
        let bp = crate::model::BilevelProblem::new(
            1,
            1,
            Expr::pow(y.clone(), 2),
            vec![],
            f,
            vec![Expr::neg(y)],
        )
        .unwrap();
        let r = build_wd_ref(&bp).unwrap();
        assert!(!r.z_eliminated);
        assert!(r.nlp.inequalities.iter().any(|e| e.uses_block("z")));
        // stationarity: 2(z - x) - u = 0; at x = 1: (y,z,u) = (1,1,0) feasible
        assert!(r.is_feasible(&pt(&r, &[1.0, 1.0, 1.0, 0.0]), 1e-9).unwrap());
    }

    #[test]
    fn mwd_ref_running_example() {
        let bp = builtin::running_example();
        let r = build_mwd_ref(&bp).unwrap();
        let cs = count_summary(bp.dims, ReformKind::Mwd);
        assert_eq!(cs.n_constraints, 7);
        assert_eq!(r.emitted_constraint_count(), 7);
        let wd = build_wd_ref(&bp).unwrap();
        assert_eq!(r.emitted_constraint_count(), wd.emitted_constraint_count() + 1);
        // (0,1,1,(0,1)) feasible; z must sit at 1 when u = (0,1), x = 0
        assert!(r.is_feasible(&pt(&r, &[0.0, 1.0, 1.0, 0.0, 1.0]), 1e-9).unwrap());
        assert!(!r.is_feasible(&pt(&r, &[0.0, 1.0, 0.5, 0.0, 1.0]), 1e-9).unwrap());
        // Mond-Weir feasible set lies inside the Wolfe feasible set
        let mut hits = 0;
        for k in 0..4000 {
            let xs = ((k % 20) as f64) * 0.1 - 1.0;
            let ys = (((k / 20) % 20) as f64) * 0.1 - 0.5;
            let zs = (((k / 400) % 10) as f64) * 0.2 - 0.2;
            let u1 = ((k % 7) as f64) / 6.0;
            let flat = vec![xs, ys, zs, u1, 1.0 - u1];
            let pm = pt(&r, &flat);
            if r.is_feasible(&pm, 1e-9).unwrap() {
                hits += 1;
                let pw = Point::new(wd.nlp.space.clone(), flat).unwrap();
                assert!(wd.is_feasible(&pw, 1e-9).unwrap());
            }
        }
        assert!(hits > 0, "sweep never hit the Mond-Weir feasible set");
    }

    #[test]
    fn ge_feasibility_examples() {
        let bp = builtin::running_example();
        assert!(ge_ref_feasibility(&bp, &[0.0], &[1.0], 1e-9).unwrap());
        assert!(!ge_ref_feasibility(&bp, &[0.0], &[0.0], 1e-9).unwrap());
        assert!(ge_ref_feasibility(&bp, &[0.5], &[0.5], 1e-9).unwrap());
        assert!(ge_ref_feasibility(&bp, &[0.0], &[2.0], 1e-9).is_err());

        // unconstrained stationary point
        let s = VarSpace::new(vec![("x", 1), ("y", 1)]).unwrap();
        let y = Expr::var(s.clone(), "y", 0).unwrap();
        let f = Expr::pow(y, 2);
        let bp2 = crate::model::BilevelProblem::new(1, 1, f.clone(), vec![], f, vec![]).unwrap();
        assert!(ge_ref_feasibility(&bp2, &[0.0], &[0.0], 1e-9).unwrap());
        assert!(!ge_ref_feasibility(&bp2, &[0.0], &[1.0], 1e-9).unwrap());
    }

    #[test]
    fn count_summaries_match_worked_numbers() {
        let dims = Dims { n: 1, m: 1, p: 2, q: 0 };
        let cases = [
            (ReformKind::Vf, (2, 0, 3)),
            (ReformKind::Kkt, (4, 2, 6)),
            (ReformKind::Ge, (2, 0, 1)),
            (ReformKind::Ld, (4, 2, 5)),
            (ReformKind::Wd, (5, 3, 6)),
            (ReformKind::Mwd, (5, 3, 7)),
        ];
        for (kind, (nv, ni, nc)) in cases {
            let cs = count_summary(dims, kind);
            assert_eq!(
                (cs.n_vars, cs.n_implicit_vars, cs.n_constraints),
                (nv, ni, nc),
                "{kind:?}"
            );
        }
        let dims = Dims { n: 2, m: 3, p: 4, q: 1 };
        let cs = count_summary(dims, ReformKind::Kkt);
        assert_eq!(cs.n_vars, 9);
        assert_eq!(cs.n_constraints, 3 + 8 + 1 + 1);
    }

    #[test]
    fn per_component_complementarity_option() {
        let bp = builtin::running_example();
        let agg = build_kkt_ref(&bp, Complementarity::Aggregated).unwrap();
        let per = build_kkt_ref(&bp, Complementarity::PerComponent).unwrap();
        assert_eq!(per.nlp.equalities.len(), agg.nlp.equalities.len() + 1);
        // same feasible set on samples
        for k in 0..500 {
            let flat = vec![
                ((k % 10) as f64) * 0.2 - 1.0,
                (((k / 10) % 10) as f64) * 0.2 - 0.2,
                ((k % 3) as f64) * 0.5,
                (((k / 3) % 3) as f64) * 0.5,
            ];
            let pa = pt(&agg, &flat);
            let pp = pt(&per, &flat);
            assert_eq!(
                agg.is_feasible(&pa, 1e-9).unwrap(),
                per.is_feasible(&pp, 1e-9).unwrap()
            );
        }
    }

    #[test]
    fn rejects_uncertified_lower_level() {
        let bp = builtin::wolfe_counterexample();
        assert!(build_kkt_ref(&bp, Complementarity::Aggregated).is_err());
        assert!(build_ld_ref(&bp).is_err());
        assert!(build_wd_ref(&bp).is_err());
        assert!(build_mwd_ref(&bp).is_err());
        // the value-function reformulation does not need convexity
        assert!(build_vf_ref(&bp).is_ok());
    }
}
