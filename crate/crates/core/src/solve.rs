//! Convex solvers behind `value_function`, the duality checks, and the CLI.
//!
//! Dispatch by structure: linear programs go to the simplex, quadratic
//! programs with affine constraints to a primal active-set method working on
//! the reduced KKT systems, and convex polynomial constraints to a log-barrier
//! scheme with Newton steps and decade reduction of the barrier parameter.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expr::{affine_form, quadratic_form, Expr, Point};
use crate::lp::{Cmp, LinearProgram, LpOutcome};
use crate::model::{kkt_residual, ConvexityTag, Nlp, Sense, SolveReport, SolveStatus};
use crate::poly::null_space;

const ACT_TOL: f64 = 1e-8;

/// Solves a structurally certified convex program.
///
/// `status == Optimal` guarantees `kkt_residual <= tol`; an unbounded
/// problem returns a feasible point and an improving ray as certificate;
/// hitting `max_iter` returns `ToleranceReached` with the best iterate.
pub fn solve_convex(nlp: &Nlp, start: &Point, tol: f64, max_iter: usize) -> Result<SolveReport> {
    if nlp.convexity != ConvexityTag::Convex {
        return Err(Error::InvalidInput(
            "solve_convex requires a structurally certified convex program".into(),
        ));
    }
    if start.space() != &nlp.space {
        return Err(Error::SpaceMismatch);
    }
    let obj = nlp.min_objective();
    let affine_constraints = nlp
        .inequalities
        .iter()
        .chain(nlp.equalities.iter())
        .all(|e| e.degree() <= 1);
    let mut report = if affine_constraints && obj.degree() <= 1 {
        solve_lp(nlp, &obj)?
    } else if affine_constraints && obj.degree() == 2 {
        solve_qp_active_set(nlp, &obj, start, tol, max_iter)?
    } else {
        solve_barrier(nlp, &obj, start, tol, max_iter)?
    };
    if nlp.sense == Sense::Maximize {
        report.value = -report.value;
    }
    Ok(report)
}

struct AffineRows {
    // a' w <= b
    ineq: Vec<(Vec<f64>, f64)>,
    // a' w = b
    eq: Vec<(Vec<f64>, f64)>,
}

fn affine_rows(nlp: &Nlp) -> Result<AffineRows> {
    let mut ineq = Vec::with_capacity(nlp.inequalities.len());
    for q in &nlp.inequalities {
        let (a, c0) =
            affine_form(q).ok_or_else(|| Error::Internal("expected affine row".into()))?;
        ineq.push((a, -c0));
    }
    let mut eq = Vec::with_capacity(nlp.equalities.len());
    for q in &nlp.equalities {
        let (a, c0) =
            affine_form(q).ok_or_else(|| Error::Internal("expected affine row".into()))?;
        eq.push((a, -c0));
    }
    Ok(AffineRows { ineq, eq })
}

fn solve_lp(nlp: &Nlp, obj: &Expr) -> Result<SolveReport> {
    let n = nlp.space.total_dim();
    let (c, c0) = affine_form(obj).ok_or_else(|| Error::Internal("affine objective".into()))?;
    let rows = affine_rows(nlp)?;
    let mut lp = LinearProgram::new(n, true, c.clone());
    for (a, b) in &rows.ineq {
        lp.add_row(a.clone(), Cmp::Le, *b);
    }
    for (a, b) in &rows.eq {
        lp.add_row(a.clone(), Cmp::Eq, *b);
    }
    match lp.solve()? {
        LpOutcome::Optimal { x, value } => {
            let point = Point::new(nlp.space.clone(), x)?;
            let (mult, residual) = recover_multipliers(nlp, &point)?;
            Ok(SolveReport {
                status: SolveStatus::Optimal,
                value: value + c0,
                point: Some(point),
                kkt_residual: Some(residual),
                multipliers: mult,
                ray: None,
            })
        }
        LpOutcome::Unbounded { x, ray } => Ok(SolveReport {
            status: SolveStatus::Unbounded,
            point: Some(Point::new(nlp.space.clone(), x)?),
            value: f64::NEG_INFINITY,
            kkt_residual: None,
            multipliers: None,
            ray: Some(ray),
        }),
        LpOutcome::Infeasible => Ok(SolveReport {
            status: SolveStatus::Infeasible,
            point: None,
            value: f64::INFINITY,
            kkt_residual: None,
            multipliers: None,
            ray: None,
        }),
    }
}

/// Least-squares multiplier recovery on the active set, with an LP
/// feasibility fallback guaranteeing sign constraints.
fn recover_multipliers(nlp: &Nlp, w: &Point) -> Result<(Option<Vec<f64>>, f64)> {
    let n = nlp.space.total_dim();
    let obj = nlp.min_objective();
    let grad = obj.grad_full(w)?;
    let mut active: Vec<usize> = Vec::new();
    for (i, q) in nlp.inequalities.iter().enumerate() {
        if q.eval(w)? >= -1e-7 {
            active.push(i);
        }
    }
    let n_act = active.len();
    let n_eq = nlp.equalities.len();
    if n_act + n_eq == 0 {
        let r = kkt_residual(nlp, w, &[])?;
        return Ok((Some(Vec::new()), r));
    }
    // stationarity: grad + sum v_i grad q_i + sum mu_j grad e_j = 0
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n_act + n_eq);
    for &i in &active {
        cols.push(nlp.inequalities[i].grad_full(w)?);
    }
    for e in &nlp.equalities {
        cols.push(e.grad_full(w)?);
    }
    let a = DMatrix::from_fn(n, n_act + n_eq, |r, c| cols[c][r]);
    let rhs = DVector::from_iterator(n, grad.iter().map(|v| -v));
    let svd = a.clone().svd(true, true);
    let sol = svd
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::Internal(e.to_string()))?;
    let mut lam: Vec<f64> = sol.iter().copied().collect();
    let lstsq_ok = (&a * &sol - &rhs).amax() <= 1e-7
        && lam[..n_act].iter().all(|&v| v >= -1e-7);
    if !lstsq_ok {
        // LP: find v >= 0 (active), mu free with exact stationarity
        let nv = n_act + n_eq;
        let mut lp = LinearProgram::new(nv, true, vec![0.0; nv]);
        for r in 0..n {
            let coeffs: Vec<f64> = (0..nv).map(|c| cols[c][r]).collect();
            lp.add_row(coeffs, Cmp::Eq, -grad[r]);
        }
        for j in 0..n_act {
            lp.set_lower(j, 0.0);
        }
        match lp.solve()? {
            LpOutcome::Optimal { x, .. } | LpOutcome::Unbounded { x, .. } => lam = x,
            LpOutcome::Infeasible => {
                let r = best_effort_residual(nlp, w)?;
                return Ok((None, r));
            }
        }
    }
    for v in lam[..n_act].iter_mut() {
        if *v < 0.0 && *v > -1e-9 {
            *v = 0.0;
        }
    }
    let mut full = vec![0.0; nlp.num_constraints()];
    for (k, &i) in active.iter().enumerate() {
        full[i] = lam[k];
    }
    for j in 0..n_eq {
        full[nlp.inequalities.len() + j] = lam[n_act + j];
    }
    let r = kkt_residual(nlp, w, &full)?;
    Ok((Some(full), r))
}

fn best_effort_residual(nlp: &Nlp, w: &Point) -> Result<f64> {
    let zero = vec![0.0; nlp.num_constraints()];
    kkt_residual(nlp, w, &zero)
}

fn solve_qp_active_set(
    nlp: &Nlp,
    obj: &Expr,
    start: &Point,
    tol: f64,
    max_iter: usize,
) -> Result<SolveReport> {
    let n = nlp.space.total_dim();
    let (h, c, c0) =
        quadratic_form(obj).ok_or_else(|| Error::Internal("quadratic objective".into()))?;
    let h = (h.clone() + h.transpose()) * 0.5;
    let rows = affine_rows(nlp)?;

    // feasible start
    let mut w: DVector<f64> = if nlp.max_violation(start)? <= 1e-9 {
        DVector::from_column_slice(start.values())
    } else {
        let lp_rows: Vec<(Vec<f64>, Cmp, f64)> = rows
            .ineq
            .iter()
            .map(|(a, b)| (a.clone(), Cmp::Le, *b))
            .chain(rows.eq.iter().map(|(a, b)| (a.clone(), Cmp::Eq, *b)))
            .collect();
        match crate::lp::feasible_point(n, &lp_rows, &vec![None; n], &vec![None; n])? {
            Some(x) => DVector::from_vec(x),
            None => {
                return Ok(SolveReport {
                    status: SolveStatus::Infeasible,
                    point: None,
                    value: f64::INFINITY,
                    kkt_residual: None,
                    multipliers: None,
                    ray: None,
                })
            }
        }
    };

    let eval_row = |a: &[f64], w: &DVector<f64>| -> f64 {
        a.iter().zip(w.iter()).map(|(x, y)| x * y).sum()
    };

    let mut working: Vec<usize> = (0..rows.ineq.len())
        .filter(|&i| (eval_row(&rows.ineq[i].0, &w) - rows.ineq[i].1).abs() <= ACT_TOL)
        .collect();

    for _ in 0..max_iter.max(20) {
        // stack working rows: equalities always in
        let n_w = working.len() + rows.eq.len();
        let mut a_w = DMatrix::zeros(n_w, n);
        for (r, &i) in working.iter().enumerate() {
            for (cix, v) in rows.ineq[i].0.iter().enumerate() {
                a_w[(r, cix)] = *v;
            }
        }
        for (r, (a, _)) in rows.eq.iter().enumerate() {
            for (cix, v) in a.iter().enumerate() {
                a_w[(working.len() + r, cix)] = *v;
            }
        }
        let z_basis = if n_w == 0 {
            (0..n)
                .map(|i| {
                    let mut e = vec![0.0; n];
                    e[i] = 1.0;
                    e
                })
                .collect::<Vec<_>>()
        } else {
            null_space(&a_w)
        };
        let g = &h * &w + DVector::from_column_slice(&c);

        let step: StepKind = if z_basis.is_empty() {
            StepKind::Zero
        } else {
            let nz = z_basis.len();
            let z = DMatrix::from_fn(n, nz, |r, cix| z_basis[cix][r]);
            let hz = z.transpose() * &h * &z;
            let gz = z.transpose() * &g;
            let hz_sym = (hz.clone() + hz.transpose()) * 0.5;
            let eig = nalgebra::SymmetricEigen::new(hz_sym);
            // PSD reduced Hessian: null directions with gradient component
            // give linear descent rays
            let mut ray_dir: Option<DVector<f64>> = None;
            for (i, &ev) in eig.eigenvalues.iter().enumerate() {
                if ev.abs() <= 1e-9 {
                    let v = eig.eigenvectors.column(i).clone_owned();
                    let comp = gz.dot(&v);
                    if comp.abs() > 1e-9 {
                        ray_dir = Some(&z * v * (-comp.signum()));
                        break;
                    }
                }
            }
            match ray_dir {
                Some(d) => StepKind::LinearDescent(d),
                None => {
                    // solve Hz pz = -gz on the positive eigenspace
                    let mut pz = DVector::zeros(nz);
                    for (i, &ev) in eig.eigenvalues.iter().enumerate() {
                        if ev > 1e-9 {
                            let v = eig.eigenvectors.column(i);
                            pz += v * (-gz.dot(&v) / ev);
                        }
                    }
                    let p = &z * pz;
                    if p.amax() <= 1e-10 {
                        StepKind::Zero
                    } else {
                        StepKind::Newton(p)
                    }
                }
            }
        };

        match step {
            StepKind::Zero => {
                // multipliers on the working set
                let rhs = -&g;
                let lam = if n_w == 0 {
                    DVector::zeros(0)
                } else {
                    let svd = a_w.transpose().svd(true, true);
                    svd.solve(&rhs, 1e-12)
                        .map_err(|e| Error::Internal(e.to_string()))?
                };
                let stat_res = if n_w == 0 {
                    g.amax()
                } else {
                    (a_w.transpose() * &lam - rhs).amax()
                };
                let mut worst: Option<(usize, f64)> = None;
                for (k, &i) in working.iter().enumerate() {
                    if lam[k] < -1e-9 {
                        match worst {
                            None => worst = Some((k, lam[k])),
                            Some((_, wv)) if lam[k] < wv => worst = Some((k, lam[k])),
                            _ => {}
                        }
                    }
                    let _ = i;
                }
                if stat_res <= 1e-7 {
                    if let Some((k, _)) = worst {
                        working.remove(k);
                        continue;
                    }
                }
                // assemble full multipliers and report
                let mut full = vec![0.0; nlp.num_constraints()];
                for (k, &i) in working.iter().enumerate() {
                    full[i] = lam[k].max(0.0);
                }
                for j in 0..rows.eq.len() {
                    full[nlp.inequalities.len() + j] = lam[working.len() + j];
                }
                let point = Point::new(nlp.space.clone(), w.iter().copied().collect())?;
                let res = kkt_residual(nlp, &point, &full)?;
                let value = 0.5 * (&w.transpose() * &h * &w)[(0, 0)]
                    + DVector::from_column_slice(&c).dot(&w)
                    + c0;
                let status = if res <= tol {
                    SolveStatus::Optimal
                } else {
                    SolveStatus::ToleranceReached
                };
                return Ok(SolveReport {
                    status,
                    point: Some(point),
                    value,
                    kkt_residual: Some(res),
                    multipliers: Some(full),
                    ray: None,
                });
            }
            StepKind::LinearDescent(d) => {
                match blocking_step(&rows, &working, &w, &d, f64::INFINITY) {
                    Some((alpha, idx)) => {
                        w += &d * alpha;
                        working.push(idx);
                        working.sort_unstable();
                    }
                    None => {
                        let point =
                            Point::new(nlp.space.clone(), w.iter().copied().collect())?;
                        return Ok(SolveReport {
                            status: SolveStatus::Unbounded,
                            point: Some(point),
                            value: f64::NEG_INFINITY,
                            kkt_residual: None,
                            multipliers: None,
                            ray: Some(d.iter().copied().collect()),
                        });
                    }
                }
            }
            StepKind::Newton(p) => match blocking_step(&rows, &working, &w, &p, 1.0) {
                Some((alpha, idx)) => {
                    w += &p * alpha;
                    working.push(idx);
                    working.sort_unstable();
                }
                None => {
                    w += &p;
                }
            },
        }
    }

    let point = Point::new(nlp.space.clone(), w.iter().copied().collect())?;
    let (mult, res) = recover_multipliers(nlp, &point)?;
    let value = obj.eval(&point)?;
    Ok(SolveReport {
        status: SolveStatus::ToleranceReached,
        point: Some(point),
        value,
        kkt_residual: Some(res),
        multipliers: mult,
        ray: None,
    })
}

enum StepKind {
    Zero,
    Newton(DVector<f64>),
    LinearDescent(DVector<f64>),
}

/// Largest step along `d` from `w` before a non-working inequality blocks;
/// `None` when the full `cap` step is free.
fn blocking_step(
    rows: &AffineRows,
    working: &[usize],
    w: &DVector<f64>,
    d: &DVector<f64>,
    cap: f64,
) -> Option<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (i, (a, b)) in rows.ineq.iter().enumerate() {
        if working.contains(&i) {
            continue;
        }
        let ad: f64 = a.iter().zip(d.iter()).map(|(x, y)| x * y).sum();
        if ad > 1e-12 {
            let aw: f64 = a.iter().zip(w.iter()).map(|(x, y)| x * y).sum();
            let alpha = (b - aw) / ad;
            let alpha = alpha.max(0.0);
            match best {
                None => best = Some((alpha, i)),
                Some((ba, bi)) => {
                    if alpha < ba - 1e-12 || (alpha <= ba + 1e-12 && i < bi) {
                        best = Some((alpha, i));
                    }
                }
            }
        }
    }
    match best {
        Some((alpha, i)) if alpha < cap => Some((alpha, i)),
        _ => None,
    }
}

/// Log-barrier interior scheme for convex polynomial inequality constraints
/// and affine equalities. Newton steps on the centering problem, barrier
/// parameter reduced by decades.
fn solve_barrier(
    nlp: &Nlp,
    obj: &Expr,
    start: &Point,
    tol: f64,
    max_iter: usize,
) -> Result<SolveReport> {
    for e in &nlp.equalities {
        if e.degree() > 1 {
            return Err(Error::Capability(
                "nonlinear equality constraints are not supported".into(),
            ));
        }
    }
    let n = nlp.space.total_dim();
    let m_in = nlp.inequalities.len();

    // strictly feasible start via the epigraph problem when needed
    let mut w = DVector::from_column_slice(start.values());
    let strict = |w: &DVector<f64>| -> Result<bool> {
        let pt = Point::new(nlp.space.clone(), w.iter().copied().collect())?;
        for q in &nlp.inequalities {
            if q.eval(&pt)? >= -1e-10 {
                return Ok(false);
            }
        }
        for e in &nlp.equalities {
            if e.eval(&pt)?.abs() > 1e-9 {
                return Ok(false);
            }
        }
        Ok(true)
    };
    if !strict(&w)? {
        match phase_one_strict(nlp, &w, max_iter)? {
            Some(w0) => w = w0,
            None => {
                return Ok(SolveReport {
                    status: SolveStatus::Infeasible,
                    point: None,
                    value: f64::INFINITY,
                    kkt_residual: None,
                    multipliers: None,
                    ray: None,
                })
            }
        }
    }

    let eq_rows = {
        let mut rows = Vec::new();
        for e in &nlp.equalities {
            let (a, c0) = affine_form(e).expect("checked affine");
            rows.push((DVector::from_vec(a), -c0));
        }
        rows
    };
    let n_eq = eq_rows.len();

    let mut mu = 1.0f64;
    let mut best: Option<(DVector<f64>, f64)> = None;
    for _outer in 0..40 {
        // Newton centering
        for _inner in 0..max_iter.max(25) {
            let pt = Point::new(nlp.space.clone(), w.iter().copied().collect())?;
            let mut grad = DVector::from_vec(obj.grad_full(&pt)?);
            let mut hess = full_hessian(obj, &pt)?;
            for q in &nlp.inequalities {
                let qv = q.eval(&pt)?;
                let qg = DVector::from_vec(q.grad_full(&pt)?);
                let qh = full_hessian(q, &pt)?;
                grad += &qg * (mu / (-qv));
                hess += qh * (mu / (-qv)) + (&qg * qg.transpose()) * (mu / (qv * qv));
            }
            // KKT system with equality rows
            let dim = n + n_eq;
            let mut kkt = DMatrix::zeros(dim, dim);
            kkt.view_mut((0, 0), (n, n)).copy_from(&hess);
            for (j, (a, _)) in eq_rows.iter().enumerate() {
                for i in 0..n {
                    kkt[(n + j, i)] = a[i];
                    kkt[(i, n + j)] = a[i];
                }
            }
            // regularize lightly for safety
            for i in 0..n {
                kkt[(i, i)] += 1e-12;
            }
            let mut rhs = DVector::zeros(dim);
            for i in 0..n {
                rhs[i] = -grad[i];
            }
            let lu = kkt.lu();
            let sol = match lu.solve(&rhs) {
                Some(s) => s,
                None => break,
            };
            let dw = sol.rows(0, n).clone_owned();
            let decrement = grad.dot(&dw).abs();
            if dw.amax() <= 1e-12 || decrement <= 1e-16 {
                break;
            }
            // backtracking: stay strictly feasible, Armijo on the barrier value
            let barrier_val = |w: &DVector<f64>| -> Result<Option<f64>> {
                let pt = Point::new(nlp.space.clone(), w.iter().copied().collect())?;
                let mut v = obj.eval(&pt)?;
                for q in &nlp.inequalities {
                    let qv = q.eval(&pt)?;
                    if qv >= 0.0 {
                        return Ok(None);
                    }
                    v -= mu * (-qv).ln();
                }
                Ok(Some(v))
            };
            let f0 = barrier_val(&w)?.ok_or_else(|| Error::Internal("left interior".into()))?;
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let wn = &w + &dw * alpha;
                if let Some(fv) = barrier_val(&wn)? {
                    if fv <= f0 - 1e-4 * alpha * decrement {
                        w = wn;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }
            if decrement.sqrt() <= (mu * 0.1).max(1e-12) {
                break;
            }
        }
        // barrier multipliers
        let pt = Point::new(nlp.space.clone(), w.iter().copied().collect())?;
        let mut full = vec![0.0; nlp.num_constraints()];
        for (i, q) in nlp.inequalities.iter().enumerate() {
            full[i] = mu / (-q.eval(&pt)?);
        }
        if n_eq > 0 {
            // equality multipliers from least squares on stationarity
            let mut resid = DVector::from_vec(obj.grad_full(&pt)?);
            for (i, q) in nlp.inequalities.iter().enumerate() {
                resid += DVector::from_vec(q.grad_full(&pt)?) * full[i];
            }
            let a = DMatrix::from_fn(n, n_eq, |r, c| eq_rows[c].0[r]);
            if let Ok(sol) = a.clone().svd(true, true).solve(&(-resid), 1e-12) {
                for j in 0..n_eq {
                    full[m_in + j] = sol[j];
                }
            }
        }
        let res = kkt_residual(nlp, &pt, &full)?;
        if best.as_ref().map_or(true, |(_, r)| res < *r) {
            best = Some((w.clone(), res));
        }
        if res <= tol {
            let value = obj.eval(&pt)?;
            return Ok(SolveReport {
                status: SolveStatus::Optimal,
                point: Some(pt),
                value,
                kkt_residual: Some(res),
                multipliers: Some(full),
                ray: None,
            });
        }
        // crossover: once the active set is visible, Newton on the KKT
        // system drives the residual to machine precision
        if mu <= 1e-3 {
            if let Some((wp, vp, rp)) = kkt_polish(nlp, obj, &w, mu)? {
                if rp <= tol {
                    let pt = Point::new(nlp.space.clone(), wp.iter().copied().collect())?;
                    let value = obj.eval(&pt)?;
                    return Ok(SolveReport {
                        status: SolveStatus::Optimal,
                        point: Some(pt),
                        value,
                        kkt_residual: Some(rp),
                        multipliers: Some(vp),
                        ray: None,
                    });
                }
            }
        }
        mu *= 0.1;
        if mu < 1e-14 {
            break;
        }
    }
    let (wb, res) = best.ok_or_else(|| Error::Internal("barrier produced no iterate".into()))?;
    let pt = Point::new(nlp.space.clone(), wb.iter().copied().collect())?;
    let value = obj.eval(&pt)?;
    Ok(SolveReport {
        status: SolveStatus::ToleranceReached,
        point: Some(pt),
        value,
        kkt_residual: Some(res),
        multipliers: None,
        ray: None,
    })
}

/// Newton iteration on the active-set KKT equations
/// `grad obj + sum v grad q_act + sum mu grad e = 0`, `q_act = 0`, `e = 0`.
/// Returns the polished `(w, full multipliers, residual)` when the signs and
/// inactive constraints come out consistent.
fn kkt_polish(
    nlp: &Nlp,
    obj: &Expr,
    w: &DVector<f64>,
    mu: f64,
) -> Result<Option<(DVector<f64>, Vec<f64>, f64)>> {
    let n = nlp.space.total_dim();
    let act_band = mu.sqrt().max(1e-6);
    let pt0 = Point::new(nlp.space.clone(), w.iter().copied().collect())?;
    let mut active: Vec<usize> = Vec::new();
    for (i, q) in nlp.inequalities.iter().enumerate() {
        if q.eval(&pt0)? >= -act_band {
            active.push(i);
        }
    }
    let n_act = active.len();
    let n_eq = nlp.equalities.len();
    let dim = n + n_act + n_eq;
    let mut z = DVector::zeros(dim);
    for i in 0..n {
        z[i] = w[i];
    }
    for (k, &i) in active.iter().enumerate() {
        z[n + k] = mu / (-nlp.inequalities[i].eval(&pt0)?.min(-1e-12));
    }
    for _ in 0..25 {
        let pt = Point::new(nlp.space.clone(), z.rows(0, n).iter().copied().collect())?;
        let mut f = DVector::zeros(dim);
        let mut stat = DVector::from_vec(obj.grad_full(&pt)?);
        for (k, &i) in active.iter().enumerate() {
            stat += DVector::from_vec(nlp.inequalities[i].grad_full(&pt)?) * z[n + k];
        }
        for (j, e) in nlp.equalities.iter().enumerate() {
            stat += DVector::from_vec(e.grad_full(&pt)?) * z[n + n_act + j];
        }
        for i in 0..n {
            f[i] = stat[i];
        }
        for (k, &i) in active.iter().enumerate() {
            f[n + k] = nlp.inequalities[i].eval(&pt)?;
        }
        for (j, e) in nlp.equalities.iter().enumerate() {
            f[n + n_act + j] = e.eval(&pt)?;
        }
        if f.amax() <= 1e-13 {
            break;
        }
        // Jacobian
        let mut jac = DMatrix::zeros(dim, dim);
        let mut hl = full_hessian(obj, &pt)?;
        for (k, &i) in active.iter().enumerate() {
            hl += full_hessian(&nlp.inequalities[i], &pt)? * z[n + k];
        }
        jac.view_mut((0, 0), (n, n)).copy_from(&hl);
        for (k, &i) in active.iter().enumerate() {
            let g = nlp.inequalities[i].grad_full(&pt)?;
            for r in 0..n {
                jac[(r, n + k)] = g[r];
                jac[(n + k, r)] = g[r];
            }
        }
        for (j, e) in nlp.equalities.iter().enumerate() {
            let g = e.grad_full(&pt)?;
            for r in 0..n {
                jac[(r, n + n_act + j)] = g[r];
                jac[(n + n_act + j, r)] = g[r];
            }
        }
        let step = match jac.svd(true, true).solve(&(-f), 1e-12) {
            Ok(s) => s,
            Err(_) => return Ok(None),
        };
        z += step;
    }
    let pt = Point::new(nlp.space.clone(), z.rows(0, n).iter().copied().collect())?;
    let mut full = vec![0.0; nlp.num_constraints()];
    for (k, &i) in active.iter().enumerate() {
        if z[n + k] < -1e-9 {
            return Ok(None);
        }
        full[i] = z[n + k].max(0.0);
    }
    for j in 0..n_eq {
        full[nlp.inequalities.len() + j] = z[n + n_act + j];
    }
    let res = kkt_residual(nlp, &pt, &full)?;
    let w_out = z.rows(0, n).clone_owned();
    Ok(Some((w_out, full, res)))
}

fn full_hessian(e: &Expr, pt: &Point) -> Result<DMatrix<f64>> {
    let space = pt.space();
    let n = space.total_dim();
    let names: Vec<(String, usize)> = space.blocks().map(|(b, d)| (b.to_string(), d)).collect();
    let mut h = DMatrix::zeros(n, n);
    let mut row = 0usize;
    for (bi, di) in &names {
        for i in 0..*di {
            let dei = e.deriv(bi, i)?;
            let mut col = 0usize;
            for (bj, dj) in &names {
                for j in 0..*dj {
                    h[(row, col)] = dei.deriv(bj, j)?.eval(pt)?;
                    col += 1;
                }
            }
            row += 1;
        }
    }
    Ok(h)
}

/// Finds a strictly feasible point by minimizing the epigraph variable `t`
/// over `g_i(w) <= t` with the equalities carried along. Returns `None`
/// when the strict interior is (numerically) empty.
fn phase_one_strict(
    nlp: &Nlp,
    start: &DVector<f64>,
    max_iter: usize,
) -> Result<Option<DVector<f64>>> {
    let n = nlp.space.total_dim();
    // project the start onto the affine equalities first
    let mut w0 = start.clone();
    if !nlp.equalities.is_empty() {
        let n_eq = nlp.equalities.len();
        let mut a = DMatrix::zeros(n_eq, n);
        let mut b = DVector::zeros(n_eq);
        for (j, e) in nlp.equalities.iter().enumerate() {
            let (row, c0) = affine_form(e).expect("checked affine");
            for i in 0..n {
                a[(j, i)] = row[i];
            }
            b[j] = -c0;
        }
        let r = &a * &w0 - &b;
        let svd = a.clone().svd(true, true);
        if let Ok(corr) = svd.solve(&r, 1e-12) {
            w0 -= corr;
        }
        // inconsistent equality system: no feasible point exists
        if (&a * &w0 - &b).amax() > 1e-9 {
            return Ok(None);
        }
    }

    // epigraph program over (w, t)
    let mut blocks: Vec<(String, usize)> = nlp.space.blocks().map(|(b, d)| (b.to_string(), d)).collect();
    blocks.push(("_t".to_string(), 1));
    let epi_space = crate::expr::VarSpace::new(blocks)?;
    let t = Expr::var(epi_space.clone(), "_t", 0)?;
    let mut ineqs = Vec::with_capacity(nlp.inequalities.len());
    for q in &nlp.inequalities {
        ineqs.push(Expr::sub(q.lift_to(&epi_space)?, t.clone())?);
    }
    let eqs = nlp
        .equalities
        .iter()
        .map(|e| e.lift_to(&epi_space))
        .collect::<Result<Vec<_>>>()?;
    let epi = Nlp::new(epi_space.clone(), t.clone(), ineqs, eqs, Sense::Minimize)?;
    if epi.convexity != ConvexityTag::Convex {
        return Err(Error::Capability(
            "phase one requires certified convex constraints".into(),
        ));
    }
    // start strictly feasible for the epigraph: t above the worst violation
    let pt0 = Point::new(nlp.space.clone(), w0.iter().copied().collect())?;
    let mut worst = f64::NEG_INFINITY;
    for q in &nlp.inequalities {
        worst = worst.max(q.eval(&pt0)?);
    }
    let mut vals: Vec<f64> = w0.iter().copied().collect();
    vals.push(worst + 1.0);
    let epi_start = Point::new(epi_space, vals)?;
    let report = solve_barrier(&epi, &epi.objective.clone(), &epi_start, 1e-9, max_iter)?;
    let Some(p) = report.point else { return Ok(None) };
    let tv = p.block("_t")?[0];
    if tv >= -1e-9 {
        return Ok(None);
    }
    let mut w = DVector::zeros(n);
    for (i, v) in p.values()[..n].iter().enumerate() {
        w[i] = *v;
    }
    Ok(Some(w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtin;
    use crate::expr::VarSpace;

    #[test]
    fn lp_lower_level_running_example() {
        // phi(1/2) = -1/2 at y = 1/2. Oracle: dense scan over y.
        let bp = builtin::running_example();
        let nlp = bp.lower_level_at(&[0.5]).unwrap();
        let mut oracle = f64::INFINITY;
        let mut k = -20000;
        while k <= 20000 {
            let y = k as f64 * 1e-4;
            if y <= 0.5 + 1e-12 && y <= 1.5 + 1e-12 {
                oracle = oracle.min(-y);
            }
            k += 1;
        }
        let start = Point::zeros(nlp.space.clone());
        let rep = solve_convex(&nlp, &start, 1e-9, 100).unwrap();
        assert_eq!(rep.status, SolveStatus::Optimal);
        assert!((rep.value - oracle).abs() <= 1e-8);
        assert!((rep.value + 0.5).abs() <= 1e-9);
        assert!((rep.point.unwrap().values()[0] - 0.5).abs() <= 1e-9);
        assert!(rep.kkt_residual.unwrap() <= 1e-9);
    }

    #[test]
    fn unconstrained_qp() {
        let nlp = builtin::min_square();
        let start = Point::new(nlp.space.clone(), vec![3.0]).unwrap();
        let rep = solve_convex(&nlp, &start, 1e-10, 50).unwrap();
        assert_eq!(rep.status, SolveStatus::Optimal);
        assert!(rep.value.abs() <= 1e-12);
        assert!(rep.point.unwrap().values()[0].abs() <= 1e-9);
    }

    #[test]
    fn unbounded_lp_with_ray() {
        let s = VarSpace::new(vec![("w", 1)]).unwrap();
        let w = Expr::var(s.clone(), "w", 0).unwrap();
        let nlp = Nlp::new(s.clone(), Expr::neg(w), vec![], vec![], Sense::Minimize).unwrap();
        let rep = solve_convex(&nlp, &Point::zeros(s), 1e-9, 50).unwrap();
        assert_eq!(rep.status, SolveStatus::Unbounded);
        let ray = rep.ray.unwrap();
        assert!(ray[0] > 0.5, "expected +1 direction, got {ray:?}");
    }

    #[test]
    fn constrained_qp_with_multipliers() {
        // min (w1-2)^2 + (w2+1)^2 s.t. w1 + w2 <= 0, w1 >= -1
        let s = VarSpace::new(vec![("w", 2)]).unwrap();
        let w1 = Expr::var(s.clone(), "w", 0).unwrap();
        let w2 = Expr::var(s.clone(), "w", 1).unwrap();
        let obj = Expr::add(vec![
            Expr::pow(Expr::sub(w1.clone(), Expr::constant(s.clone(), 2.0)).unwrap(), 2),
            Expr::pow(Expr::add(vec![w2.clone(), Expr::constant(s.clone(), 1.0)]).unwrap(), 2),
        ])
        .unwrap();
        let q1 = Expr::add(vec![w1.clone(), w2.clone()]).unwrap();
        let q2 = Expr::sub(Expr::constant(s.clone(), -1.0), w1.clone()).unwrap();
        let nlp = Nlp::new(s.clone(), obj, vec![q1, q2], vec![], Sense::Minimize).unwrap();
        let rep = solve_convex(&nlp, &Point::zeros(s), 1e-9, 100).unwrap();
        assert_eq!(rep.status, SolveStatus::Optimal);
        // optimum at (1.5, -1.5) by stationarity on the active cut
        let p = rep.point.unwrap();
        assert!((p.values()[0] - 1.5).abs() <= 1e-8);
        assert!((p.values()[1] + 1.5).abs() <= 1e-8);
        assert!(rep.kkt_residual.unwrap() <= 1e-9);
        let v = rep.multipliers.unwrap();
        assert!(v[0] > 0.0 && v[1].abs() <= 1e-9);
    }

    #[test]
    fn qp_equality_constrained() {
        // min w1^2 + w2^2 s.t. w1 + w2 = 2 -> (1,1)
        let s = VarSpace::new(vec![("w", 2)]).unwrap();
        let w1 = Expr::var(s.clone(), "w", 0).unwrap();
        let w2 = Expr::var(s.clone(), "w", 1).unwrap();
        let obj = Expr::add(vec![Expr::pow(w1.clone(), 2), Expr::pow(w2.clone(), 2)]).unwrap();
        let eq = Expr::add(vec![w1, w2, Expr::constant(s.clone(), -2.0)]).unwrap();
        let nlp = Nlp::new(s.clone(), obj, vec![], vec![eq], Sense::Minimize).unwrap();
        let rep = solve_convex(&nlp, &Point::zeros(s), 1e-9, 100).unwrap();
        assert_eq!(rep.status, SolveStatus::Optimal);
        let p = rep.point.unwrap();
        assert!((p.values()[0] - 1.0).abs() <= 1e-8 && (p.values()[1] - 1.0).abs() <= 1e-8);
    }

    #[test]
    fn infeasible_reported() {
        let s = VarSpace::new(vec![("w", 1)]).unwrap();
        let w = Expr::var(s.clone(), "w", 0).unwrap();
        let one = Expr::constant(s.clone(), 1.0);
        let nlp = Nlp::new(
            s.clone(),
            Expr::pow(w.clone(), 2),
            vec![
                Expr::add(vec![w.clone(), one.clone()]).unwrap(),
                Expr::sub(one, w).unwrap(),
            ],
            vec![],
            Sense::Minimize,
        )
        .unwrap();
        // w <= -1 and w >= 1
        let rep = solve_convex(&nlp, &Point::zeros(s), 1e-9, 100).unwrap();
        assert_eq!(rep.status, SolveStatus::Infeasible);
    }

    #[test]
    fn barrier_on_quadratic_constraint() {
        // min w1 + w2 s.t. w1^2 + w2^2 <= 1: optimum -sqrt(2)
        let s = VarSpace::new(vec![("w", 2)]).unwrap();
        let w1 = Expr::var(s.clone(), "w", 0).unwrap();
        let w2 = Expr::var(s.clone(), "w", 1).unwrap();
        let obj = Expr::add(vec![w1.clone(), w2.clone()]).unwrap();
        let ball = Expr::add(vec![
            Expr::pow(w1, 2),
            Expr::pow(w2, 2),
            Expr::constant(s.clone(), -1.0),
        ])
        .unwrap();
        let nlp = Nlp::new(s.clone(), obj, vec![ball], vec![], Sense::Minimize).unwrap();
        let rep = solve_convex(&nlp, &Point::zeros(s), 1e-8, 100).unwrap();
        assert_eq!(rep.status, SolveStatus::Optimal);
        assert!((rep.value + 2.0f64.sqrt()).abs() <= 1e-6, "value {}", rep.value);
    }

    #[test]
    fn rejects_uncertified() {
        let nlp = builtin::wolfe_counterexample_lower(8.0).unwrap();
        let start = Point::zeros(nlp.space.clone());
        assert!(solve_convex(&nlp, &start, 1e-9, 50).is_err());
    }

    #[test]
    fn maximize_sense_handled() {
        // max -(w-3)^2 -> value 0 at w = 3
        let s = VarSpace::new(vec![("w", 1)]).unwrap();
        let w = Expr::var(s.clone(), "w", 0).unwrap();
        let obj = Expr::neg(Expr::pow(
            Expr::sub(w, Expr::constant(s.clone(), 3.0)).unwrap(),
            2,
        ));
        let nlp = Nlp::new(s.clone(), obj, vec![], vec![], Sense::Maximize).unwrap();
        let rep = solve_convex(&nlp, &Point::zeros(s), 1e-9, 50).unwrap();
        assert_eq!(rep.status, SolveStatus::Optimal);
        assert!(rep.value.abs() <= 1e-10);
        assert!((rep.point.unwrap().values()[0] - 3.0).abs() <= 1e-7);
    }
}
