//! Lagrange, Wolfe, and Mond-Weir duals of a convex program, with checkers
//! for the weak/strong/converse duality relations between them.
//!
//! The dual builders are syntactic: the Wolfe dual of `min p s.t. q <= 0`
//! maximizes the Lagrangian subject to its vanishing primal gradient, the
//! Mond-Weir dual maximizes the primal objective with the extra aggregated
//! constraint-value inequality. The public builders insist on a certified
//! convex primal; the weak-duality checker deliberately does not, because
//! refuting a broken instance requires running the check on it.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expr::{quadratic_form, Expr, Point, VarSpace};
use crate::model::{kkt_residual, ConvexityTag, ExtReal, Nlp, Sense};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DualKind {
    Lagrange,
    Wolfe,
    MondWeir,
}

impl DualKind {
    pub fn name(&self) -> &'static str {
        match self {
            DualKind::Lagrange => "lagrange",
            DualKind::Wolfe => "wolfe",
            DualKind::MondWeir => "mond-weir",
        }
    }
}

/// Outcome of a weak-duality comparison at a fixed primal/dual point pair.
#[derive(Debug, Clone)]
pub struct DualityReport {
    pub kind: DualKind,
    pub primal_value: f64,
    /// Dual objective value; `-inf` for a Lagrange multiplier outside the
    /// domain of the Lagrange value function.
    pub dual_value: f64,
    /// `primal_value - dual_value`.
    pub gap: f64,
    /// Weak duality asks `gap >= -tol`; false is a genuine refutation on
    /// convexity-uncertified data and an error indicator otherwise.
    pub weak_duality_ok: bool,
    pub convexity_certified: bool,
    pub certificate: Option<(Vec<f64>, Vec<f64>)>,
}

/// Value and certificate of an unconstrained polynomial infimum.
#[derive(Debug, Clone)]
pub enum Infimum {
    Finite { value: f64, argmin: Vec<f64> },
    MinusInfinity { ray: Vec<f64> },
}

/// Exact infimum of a degree <= 2 polynomial over its whole space, by
/// stationary solve plus recession analysis on the eigenstructure.
pub fn unconstrained_infimum(e: &Expr, tol: f64) -> Result<Infimum> {
    let tol = tol.max(1e-12);
    if e.degree() > 2 {
        return Err(Error::Capability(
            "analytic infimum needs an affine or quadratic function".into(),
        ));
    }
    let n = e.space().total_dim();
    let (h, g, c) = quadratic_form(e).ok_or_else(|| Error::Internal("degree checked".into()))?;
    let h = (h.clone() + h.transpose()) * 0.5;
    let g = DVector::from_vec(g);
    if h.amax() <= tol {
        // affine case
        let slope = g.amax();
        if slope > tol {
            let ray: Vec<f64> = g.iter().map(|v| -v / slope).collect();
            return Ok(Infimum::MinusInfinity { ray });
        }
        return Ok(Infimum::Finite { value: c, argmin: vec![0.0; n] });
    }
    let eig = nalgebra::SymmetricEigen::new(h.clone());
    for (i, &ev) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        if ev < -tol {
            // negative curvature: descend along +/- v
            let slope = g.dot(&v);
            let dir = if slope > 0.0 { -1.0 } else { 1.0 };
            return Ok(Infimum::MinusInfinity { ray: v.iter().map(|x| x * dir).collect() });
        }
        if ev.abs() <= tol {
            let slope = g.dot(&v);
            if slope.abs() > tol {
                let dir = -slope.signum();
                return Ok(Infimum::MinusInfinity { ray: v.iter().map(|x| x * dir).collect() });
            }
        }
    }
    // PSD with consistent gradient: w* = -H^+ g
    let mut wstar = DVector::zeros(n);
    for (i, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev > tol {
            let v = eig.eigenvectors.column(i);
            wstar += v * (-g.dot(&v) / ev);
        }
    }
    let value = 0.5 * (h.clone() * &wstar).dot(&wstar) + g.dot(&wstar) + c;
    Ok(Infimum::Finite { value, argmin: wstar.iter().copied().collect() })
}

/// Lagrange value function `phi_l(v) = inf_w L(w, v)` for `v >= 0`, `-inf`
/// otherwise. Returns the recession ray certifying `-inf` when one exists.
pub fn lagrange_value_fn(nlp: &Nlp, v: &[f64], tol: f64) -> Result<(ExtReal, Option<Vec<f64>>)> {
    if !nlp.equalities.is_empty() {
        return Err(Error::Capability(
            "the Lagrange dual here covers inequality-constrained programs only".into(),
        ));
    }
    let t = nlp.inequalities.len();
    if v.len() != t {
        return Err(Error::DimensionMismatch { expected: t, got: v.len() });
    }
    if v.iter().any(|&vi| vi < 0.0) {
        return Ok((ExtReal::MinusInfinity, None));
    }
    let lag = lagrangian_with_fixed_multiplier(nlp, v)?;
    match unconstrained_infimum(&lag, tol)? {
        Infimum::Finite { value, .. } => Ok((ExtReal::Finite(value), None)),
        Infimum::MinusInfinity { ray } => Ok((ExtReal::MinusInfinity, Some(ray))),
    }
}

fn lagrangian_with_fixed_multiplier(nlp: &Nlp, v: &[f64]) -> Result<Expr> {
    let mut terms = vec![nlp.min_objective()];
    for (qi, &vi) in nlp.inequalities.iter().zip(v) {
        if vi != 0.0 {
            terms.push(Expr::scale(vi, qi.clone())?);
        }
    }
    Expr::add(terms)
}

/// Naming convention for the dual decision blocks: the primal block `y`
/// becomes `z` (the usual choice for lower-level duals), any other primal
/// block keeps its name; multipliers live in `u`, or `v` on a clash.
fn dual_space(nlp: &Nlp) -> Result<(Arc<VarSpace>, String, String)> {
    let blocks: Vec<(String, usize)> =
        nlp.space.blocks().map(|(b, d)| (b.to_string(), d)).collect();
    if blocks.len() != 1 {
        return Err(Error::Capability(
            "dual builders expect a single primal decision block".into(),
        ));
    }
    let (pname, pdim) = blocks.into_iter().next().unwrap();
    let zname = if pname == "y" { "z".to_string() } else { pname.clone() };
    let uname = if zname == "u" { "v".to_string() } else { "u".to_string() };
    let t = nlp.inequalities.len();
    let mut bl = vec![(zname.clone(), pdim)];
    if t > 0 {
        bl.push((uname.clone(), t));
    }
    Ok((VarSpace::new(bl)?, zname, uname))
}

fn build_dual_inner(nlp: &Nlp, kind: DualKind) -> Result<Nlp> {
    if nlp.sense != Sense::Minimize {
        return Err(Error::InvalidInput("dual builders expect a minimization".into()));
    }
    if !nlp.equalities.is_empty() {
        return Err(Error::Capability(
            "dual builders cover inequality-constrained programs only".into(),
        ));
    }
    let (space, zname, uname) = dual_space(nlp)?;
    let pblock: String = nlp.space.blocks().next().unwrap().0.to_string();
    let pdim = nlp.space.total_dim();
    let t = nlp.inequalities.len();

    let p_hat = nlp.objective.rename_block(&pblock, &zname, &space)?;
    let mut lag_terms = vec![p_hat.clone()];
    let mut q_hats = Vec::with_capacity(t);
    for (i, q) in nlp.inequalities.iter().enumerate() {
        let q_hat = q.rename_block(&pblock, &zname, &space)?;
        let ui = Expr::var(space.clone(), &uname, i)?;
        lag_terms.push(Expr::mul(vec![ui, q_hat.clone()])?);
        q_hats.push(q_hat);
    }
    let lag = Expr::add(lag_terms)?;

    let mut equalities = Vec::with_capacity(pdim);
    for j in 0..pdim {
        equalities.push(lag.deriv(&zname, j)?);
    }
    let mut inequalities = Vec::with_capacity(t + 1);
    for i in 0..t {
        inequalities.push(Expr::neg(Expr::var(space.clone(), &uname, i)?));
    }

    let objective = match kind {
        DualKind::Wolfe => lag,
        DualKind::MondWeir => {
            // extra row: - sum u_i q_i(z) <= 0
            let mut terms = Vec::with_capacity(t);
            for (i, qh) in q_hats.iter().enumerate() {
                let ui = Expr::var(space.clone(), &uname, i)?;
                terms.push(Expr::mul(vec![ui, qh.clone()])?);
            }
            if !terms.is_empty() {
                inequalities.push(Expr::neg(Expr::add(terms)?));
            }
            p_hat
        }
        DualKind::Lagrange => {
            return Err(Error::InvalidInput(
                "the Lagrange dual is evaluated through lagrange_value_fn".into(),
            ))
        }
    };
    Nlp::new(space, objective, inequalities, equalities, Sense::Maximize)
}

/// Wolfe dual `max L(z, u) s.t. grad_z L = 0, u >= 0` of a certified
/// convex minimization.
pub fn build_wolfe_dual(nlp: &Nlp) -> Result<Nlp> {
    if nlp.convexity != ConvexityTag::Convex {
        return Err(Error::InvalidInput(
            "Wolfe dual requires a structurally certified convex primal".into(),
        ));
    }
    build_dual_inner(nlp, DualKind::Wolfe)
}

/// Same construction without the convexity gate; duality relations are not
/// guaranteed for the result.
pub fn build_wolfe_dual_unchecked(nlp: &Nlp) -> Result<Nlp> {
    build_dual_inner(nlp, DualKind::Wolfe)
}

/// Mond-Weir dual `max p(z) s.t. grad_z L = 0, u'q(z) >= 0, u >= 0`.
pub fn build_mond_weir_dual(nlp: &Nlp) -> Result<Nlp> {
    if nlp.convexity != ConvexityTag::Convex {
        return Err(Error::InvalidInput(
            "Mond-Weir dual requires a structurally certified convex primal".into(),
        ));
    }
    build_dual_inner(nlp, DualKind::MondWeir)
}

pub fn build_mond_weir_dual_unchecked(nlp: &Nlp) -> Result<Nlp> {
    build_dual_inner(nlp, DualKind::MondWeir)
}

/// Dual point for the weak-duality check: a bare multiplier for the
/// Lagrange dual, a (primal copy, multiplier) pair for Wolfe and Mond-Weir.
#[derive(Debug, Clone)]
pub enum DualPoint {
    Multiplier(Vec<f64>),
    PrimalDual { w: Vec<f64>, v: Vec<f64> },
}

/// Compares primal and dual objective values at explicitly given feasible
/// points. Infeasible inputs are input errors carrying the violation; a
/// failed comparison on an uncertified instance is a reported refutation.
pub fn check_weak_duality(
    nlp: &Nlp,
    primal_pt: &Point,
    dual_pt: &DualPoint,
    kind: DualKind,
    tol: f64,
) -> Result<DualityReport> {
    if nlp.sense != Sense::Minimize {
        return Err(Error::InvalidInput("weak duality is stated for minimizations".into()));
    }
    let viol = nlp.max_violation(primal_pt)?;
    if viol > tol {
        return Err(Error::InvalidInput(format!(
            "primal point infeasible: max violation {viol:.3e} > {tol:.1e}"
        )));
    }
    let primal_value = nlp.objective.eval(primal_pt)?;

    let (dual_value, dual_flat) = match (kind, dual_pt) {
        (DualKind::Lagrange, DualPoint::Multiplier(v)) => {
            if v.iter().any(|&vi| vi < -tol) {
                return Err(Error::InvalidInput(
                    "Lagrange dual point must be componentwise nonnegative".into(),
                ));
            }
            let (val, _) = lagrange_value_fn(nlp, v, tol)?;
            (val.as_f64(), v.clone())
        }
        (DualKind::Wolfe | DualKind::MondWeir, DualPoint::PrimalDual { w, v }) => {
            let dual = build_dual_inner(nlp, kind)?;
            let mut flat = w.clone();
            flat.extend_from_slice(v);
            let pt = Point::new(dual.space.clone(), flat.clone())?;
            let dviol = dual.max_violation(&pt)?;
            if dviol > tol {
                return Err(Error::InvalidInput(format!(
                    "dual point infeasible: max violation {dviol:.3e} > {tol:.1e}"
                )));
            }
            (dual.objective.eval(&pt)?, flat)
        }
        _ => {
            return Err(Error::InvalidInput(
                "dual point shape does not match the requested dual kind".into(),
            ))
        }
    };

    let gap = primal_value - dual_value;
    Ok(DualityReport {
        kind,
        primal_value,
        dual_value,
        gap,
        weak_duality_ok: gap >= -tol,
        convexity_certified: nlp.convexity == ConvexityTag::Convex,
        certificate: Some((primal_pt.values().to_vec(), dual_flat)),
    })
}

/// Saddle-point test through the KKT equivalence: `(w, v)` is a saddle point
/// of the Lagrangian exactly when it is a KKT point.
pub fn check_saddle_point(nlp: &Nlp, w: &Point, v: &[f64], tol: f64) -> Result<(bool, f64)> {
    let r = kkt_residual(nlp, w, v)?;
    Ok((r <= tol, r))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConverseApplicability {
    Applies,
    NotApplicable,
}

/// Verdict of a converse-duality certificate at a dual-feasible point.
#[derive(Debug, Clone)]
pub struct ConverseReport {
    pub kind: DualKind,
    pub applicability: ConverseApplicability,
    pub reason: String,
    /// Populated when the certificate applies but the conclusion fails
    /// numerically, which would refute the underlying assumptions.
    pub counterexample: Option<String>,
}

/// Checks the matrix conditions under which a dual maximizer yields a primal
/// minimizer: a regular Lagrangian Hessian for Wolfe, a positive definite
/// one plus a nonvanishing objective gradient (or the caller vouching for a
/// regular primal minimizer) for Mond-Weir.
pub fn converse_duality_certificate(
    nlp: &Nlp,
    w_hat: &[f64],
    v_hat: &[f64],
    kind: DualKind,
    tol: f64,
    caller_asserts_regular_minimizer: bool,
) -> Result<ConverseReport> {
    if kind == DualKind::Lagrange {
        return Err(Error::InvalidInput(
            "converse certificates are stated for the Wolfe and Mond-Weir duals".into(),
        ));
    }
    let dual = build_dual_inner(nlp, kind)?;
    let mut flat = w_hat.to_vec();
    flat.extend_from_slice(v_hat);
    let dual_pt = Point::new(dual.space.clone(), flat)?;
    let dviol = dual.max_violation(&dual_pt)?;
    if dviol > tol.max(1e-8) {
        return Err(Error::InvalidInput(format!(
            "dual point infeasible: max violation {dviol:.3e}"
        )));
    }

    // Hessian of L(., v_hat) at w_hat on the primal space
    let w_pt = Point::new(nlp.space.clone(), w_hat.to_vec())?;
    let lag = lagrangian_with_fixed_multiplier(nlp, v_hat)?;
    let pblock: String = nlp.space.blocks().next().unwrap().0.to_string();
    let h = lag.hessian(&pblock, &pblock, &w_pt)?;
    let h = (h.clone() + h.transpose()) * 0.5;

    let (applies, reason) = match kind {
        DualKind::Wolfe => {
            let smin = smallest_singular_value(&h);
            if smin >= tol.max(1e-8) {
                (true, format!("Lagrangian Hessian regular (sigma_min = {smin:.3e})"))
            } else {
                (false, format!("Lagrangian Hessian singular (sigma_min = {smin:.3e})"))
            }
        }
        DualKind::MondWeir => {
            let eig = nalgebra::SymmetricEigen::new(h.clone());
            let lmin = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            if lmin < tol.max(1e-8) {
                (
                    false,
                    format!("Lagrangian Hessian not positive definite (lambda_min = {lmin:.3e})"),
                )
            } else {
                let gp = DVector::from_vec(nlp.min_objective().grad_full(&w_pt)?);
                let gn = gp.norm();
                if gn >= tol.max(1e-8) {
                    (
                        true,
                        format!(
                            "positive definite Hessian and nonvanishing objective gradient (norm {gn:.3e})"
                        ),
                    )
                } else if caller_asserts_regular_minimizer {
                    (
                        true,
                        "positive definite Hessian; caller asserts a primal minimizer under GCQ"
                            .into(),
                    )
                } else {
                    (
                        false,
                        format!(
                            "objective gradient vanishes (norm {gn:.3e}) and no primal-minimizer assertion given"
                        ),
                    )
                }
            }
        }
        DualKind::Lagrange => unreachable!(),
    };

    let mut counterexample = None;
    if applies {
        let pviol = nlp.max_violation(&w_pt)?;
        let res = kkt_residual(nlp, &w_pt, v_hat)?;
        if pviol > tol.max(1e-8) || res > tol.max(1e-8) {
            counterexample = Some(format!(
                "certificate applies but the dual point is not a primal KKT point \
                 (feasibility violation {pviol:.3e}, KKT residual {res:.3e})"
            ));
        }
    }
    Ok(ConverseReport {
        kind,
        applicability: if applies {
            ConverseApplicability::Applies
        } else {
            ConverseApplicability::NotApplicable
        },
        reason,
        counterexample,
    })
}

fn smallest_singular_value(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}
