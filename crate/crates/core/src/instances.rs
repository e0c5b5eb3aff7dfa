//! Deterministic families of random test instances: convex QPs for the
//! duality property suites and bilevel problems with LP/QP lower levels for
//! the qualification theorems. Every family is seeded, so repeated runs see
//! identical instances.

use std::sync::Arc;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::Result;
use crate::expr::{Expr, VarSpace};
use crate::model::{BilevelProblem, Nlp, Sense};

/// A convex quadratic program `min 0.5 w'Qw + c'w s.t. Aw <= b` with a
/// built-in strictly feasible anchor (Slater point by construction).
#[derive(Debug, Clone)]
pub struct RandomQp {
    pub nlp: Nlp,
    pub anchor: Vec<f64>,
    /// Smallest constraint slack at the anchor (> 0).
    pub slack: f64,
    pub strictly_convex: bool,
}

fn rng_for(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

fn uniform(rng: &mut StdRng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Random convex QP with `dim <= 4` variables and `rows <= 4` constraints.
/// Even seeds give strictly convex objectives, odd seeds may be rank
/// deficient (LP-like directions included).
pub fn random_convex_qp(seed: u64) -> Result<RandomQp> {
    let mut rng = rng_for(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(seed));
    let dim = rng.random_range(1..=4usize);
    let rows = rng.random_range(1..=4usize);
    let strictly_convex = seed % 2 == 0;

    let space = VarSpace::new(vec![("w", dim)])?;
    let wv: Vec<Expr> = (0..dim)
        .map(|i| Expr::var(space.clone(), "w", i))
        .collect::<Result<Vec<_>>>()?;

    // Q = M'M (+ delta I when strictly convex)
    let mut mmat = vec![vec![0.0f64; dim]; dim];
    let keep = if strictly_convex { dim } else { rng.random_range(0..=dim) };
    for r in 0..keep {
        for c in 0..dim {
            mmat[r][c] = uniform(&mut rng, -1.0, 1.0);
        }
    }
    let mut qmat = vec![vec![0.0f64; dim]; dim];
    for i in 0..dim {
        for j in 0..dim {
            let mut s = 0.0;
            for r in 0..dim {
                s += mmat[r][i] * mmat[r][j];
            }
            qmat[i][j] = s;
            if strictly_convex && i == j {
                qmat[i][j] += 0.3;
            }
        }
    }
    let cvec: Vec<f64> = (0..dim).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();

    let mut terms: Vec<Expr> = Vec::new();
    for i in 0..dim {
        for j in 0..dim {
            if qmat[i][j] != 0.0 {
                terms.push(Expr::scale(
                    0.5 * qmat[i][j],
                    Expr::mul(vec![wv[i].clone(), wv[j].clone()])?,
                )?);
            }
        }
        if cvec[i] != 0.0 {
            terms.push(Expr::scale(cvec[i], wv[i].clone())?);
        }
    }
    if terms.is_empty() {
        terms.push(Expr::constant(space.clone(), 0.0));
    }
    let objective = Expr::add(terms)?;

    // rows a'w <= a'anchor + slack, so the anchor is strictly feasible;
    // box rows keep the feasible set bounded for the LP-like instances
    let anchor: Vec<f64> = (0..dim).map(|_| uniform(&mut rng, -0.5, 0.5)).collect();
    let mut slack = f64::INFINITY;
    let mut ineqs: Vec<Expr> = Vec::new();
    for _ in 0..rows {
        let a: Vec<f64> = (0..dim).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
        let s = uniform(&mut rng, 0.3, 1.2);
        slack = slack.min(s);
        let rhs: f64 = a.iter().zip(&anchor).map(|(ai, xi)| ai * xi).sum::<f64>() + s;
        let mut row = vec![Expr::constant(space.clone(), -rhs)];
        for i in 0..dim {
            if a[i] != 0.0 {
                row.push(Expr::scale(a[i], wv[i].clone())?);
            }
        }
        ineqs.push(Expr::add(row)?);
    }
    if !strictly_convex {
        let width = 3.0;
        for i in 0..dim {
            slack = slack.min(width - anchor[i].abs());
            ineqs.push(Expr::add(vec![
                wv[i].clone(),
                Expr::constant(space.clone(), -width),
            ])?);
            ineqs.push(Expr::add(vec![
                Expr::neg(wv[i].clone()),
                Expr::constant(space.clone(), -width),
            ])?);
        }
    }

    let nlp = Nlp::new(space, objective, ineqs, Vec::new(), Sense::Minimize)?;
    Ok(RandomQp { nlp, anchor, slack, strictly_convex })
}

/// A bilevel instance with an LP or strictly convex QP lower level, a
/// Slater anchor for the lower level at every `x` in the sample box, and
/// upper-level box constraints.
#[derive(Debug, Clone)]
pub struct RandomBilevel {
    pub bp: Arc<BilevelProblem>,
    /// Upper decisions to sample; all lie in `X` with a solvable lower level.
    pub sample_x: Vec<Vec<f64>>,
    pub lower_is_lp: bool,
}

/// Random instance with `n, m <= 2` and `p <= 3`, alternating LP and QP
/// lower levels by seed parity.
pub fn random_bilevel(seed: u64) -> Result<RandomBilevel> {
    let mut rng = rng_for(seed.wrapping_mul(0xd134_2543_de82_ef95).wrapping_add(7));
    let n = rng.random_range(1..=2usize);
    let lower_is_lp = seed % 2 == 0;
    // LP lower levels need a bounded feasible set: m = 1 with two caps or
    // m = 2 with a triangle
    let (m, p) = if lower_is_lp {
        if rng.random_bool(0.5) {
            (1usize, 2usize)
        } else {
            (2usize, 3usize)
        }
    } else {
        (rng.random_range(1..=2usize), rng.random_range(1..=3usize))
    };
    let space = VarSpace::new(vec![("x", n), ("y", m)])?;
    let xv: Vec<Expr> = (0..n)
        .map(|i| Expr::var(space.clone(), "x", i))
        .collect::<Result<Vec<_>>>()?;
    let yv: Vec<Expr> = (0..m)
        .map(|j| Expr::var(space.clone(), "y", j))
        .collect::<Result<Vec<_>>>()?;

    // upper objective: strictly convex tracking of a random target
    let mut fterms = Vec::new();
    for e in xv.iter().chain(yv.iter()) {
        let t = uniform(&mut rng, -1.0, 1.0);
        fterms.push(Expr::pow(
            Expr::add(vec![e.clone(), Expr::constant(space.clone(), -t)])?,
            2,
        ));
    }
    let upper_objective = Expr::add(fterms)?;

    // X = [-0.2, 0.2]^n via 2n rows when q > 0 is drawn, else no rows
    let with_box = rng.random_bool(0.7);
    let mut upper_constraints = Vec::new();
    if with_box {
        for e in &xv {
            upper_constraints.push(Expr::add(vec![
                e.clone(),
                Expr::constant(space.clone(), -0.2),
            ])?);
            upper_constraints.push(Expr::add(vec![
                Expr::neg(e.clone()),
                Expr::constant(space.clone(), -0.2),
            ])?);
        }
    }

    // lower objective
    let lower_objective = if lower_is_lp {
        let mut terms = Vec::new();
        for y in &yv {
            terms.push(Expr::scale(uniform(&mut rng, -1.0, 1.0), y.clone())?);
        }
        for x in &xv {
            terms.push(Expr::scale(uniform(&mut rng, -0.5, 0.5), x.clone())?);
        }
        Expr::add(terms)?
    } else {
        // strictly convex in y with a linear x coupling
        let mut terms = Vec::new();
        for y in &yv {
            terms.push(Expr::scale(uniform(&mut rng, 0.5, 1.5), Expr::pow(y.clone(), 2))?);
            let mut cross = vec![Expr::scale(uniform(&mut rng, -1.0, 1.0), y.clone())?];
            for x in &xv {
                cross.push(Expr::scale(
                    uniform(&mut rng, -0.6, 0.6),
                    Expr::mul(vec![x.clone(), y.clone()])?,
                )?);
            }
            terms.push(Expr::add(cross)?);
        }
        Expr::add(terms)?
    };

    // lower constraints: a'y <= a'y0 + s + d'x with y0 = 0 anchor, small
    // x coupling so Slater survives on the sample box
    let mut lower_constraints = Vec::new();
    if lower_is_lp && m == 1 {
        // y <= c1 + d1 x, -y <= c2 + d2 x
        for sgn in [1.0, -1.0] {
            let s = uniform(&mut rng, 0.4, 1.0);
            let mut row = vec![
                Expr::scale(sgn, yv[0].clone())?,
                Expr::constant(space.clone(), -s),
            ];
            for x in &xv {
                row.push(Expr::scale(uniform(&mut rng, -0.3, 0.3), x.clone())?);
            }
            lower_constraints.push(Expr::add(row)?);
        }
    } else if lower_is_lp {
        // triangle: y1 + y2 <= c, -y1 <= c, -y2 <= c (+ x coupling)
        let dirs = [[1.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];
        for a in dirs {
            let s = uniform(&mut rng, 0.4, 1.0);
            let mut row = vec![Expr::constant(space.clone(), -s)];
            for (j, y) in yv.iter().enumerate() {
                if a[j] != 0.0 {
                    row.push(Expr::scale(a[j], y.clone())?);
                }
            }
            for x in &xv {
                row.push(Expr::scale(uniform(&mut rng, -0.3, 0.3), x.clone())?);
            }
            lower_constraints.push(Expr::add(row)?);
        }
    } else {
        for _ in 0..p {
            let s = uniform(&mut rng, 0.4, 1.0);
            let mut row = vec![Expr::constant(space.clone(), -s)];
            for y in &yv {
                row.push(Expr::scale(uniform(&mut rng, -1.0, 1.0), y.clone())?);
            }
            for x in &xv {
                row.push(Expr::scale(uniform(&mut rng, -0.3, 0.3), x.clone())?);
            }
            lower_constraints.push(Expr::add(row)?);
        }
    }

    let bp = BilevelProblem::new(
        n,
        m,
        upper_objective,
        upper_constraints,
        lower_objective,
        lower_constraints,
    )?;
    debug_assert!(bp.lower_convex_in_y);

    let mut sample_x = Vec::new();
    for _ in 0..3 {
        sample_x.push((0..n).map(|_| uniform(&mut rng, -0.15, 0.15)).collect());
    }
    Ok(RandomBilevel { bp, sample_x, lower_is_lp })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConvexityTag;

    #[test]
    fn qp_family_is_certified_and_anchored() {
        for seed in 0..40 {
            let qp = random_convex_qp(seed).unwrap();
            assert_eq!(qp.nlp.convexity, ConvexityTag::Convex, "seed {seed}");
            assert!(qp.slack > 0.0);
            let pt = crate::expr::Point::new(qp.nlp.space.clone(), qp.anchor.clone()).unwrap();
            for g in &qp.nlp.inequalities {
                assert!(g.eval(&pt).unwrap() <= -qp.slack + 1e-9, "seed {seed}");
            }
        }
    }

    #[test]
    fn bilevel_family_is_convex_and_solvable() {
        for seed in 0..30 {
            let inst = random_bilevel(seed).unwrap();
            assert!(inst.bp.lower_convex_in_y, "seed {seed}");
            for x in &inst.sample_x {
                let nlp = inst.bp.lower_level_at(x).unwrap();
                let start = crate::expr::Point::zeros(nlp.space.clone());
                let rep = crate::solve::solve_convex(&nlp, &start, 1e-9, 200).unwrap();
                assert_eq!(
                    rep.status,
                    crate::model::SolveStatus::Optimal,
                    "seed {seed} x {x:?}"
                );
            }
        }
    }

    #[test]
    fn determinism_by_seed() {
        let a = random_convex_qp(11).unwrap();
        let b = random_convex_qp(11).unwrap();
        assert_eq!(a.anchor, b.anchor);
        assert_eq!(a.nlp.objective.to_string(), b.nlp.objective.to_string());
    }
}
