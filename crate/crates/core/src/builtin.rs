//! Built-in demonstration instances used by the CLI `examples` command and
//! the test suites.

use std::sync::Arc;

use crate::error::Result;
use crate::expr::{Expr, VarSpace};
use crate::model::{BilevelProblem, Nlp, Sense};

/// Names accepted by the CLI `examples` subcommand.
pub const EXAMPLE_NAMES: [&str; 6] = [
    "lagrange-running",
    "bcq-holds",
    "bcq-fails",
    "wolfe-running",
    "wolfe-counterexample",
    "mondweir-running",
];

/// The linear-lower-level instance used throughout:
/// upper `min (x-1)^2 + (y-1)^2`, lower `min_y { -y | x+y <= 1, -x+y <= 1 }`.
/// Unique global minimizer (1/2, 1/2).
pub fn running_example() -> Arc<BilevelProblem> {
    let s = VarSpace::new(vec![("x", 1), ("y", 1)]).unwrap();
    let x = Expr::var(s.clone(), "x", 0).unwrap();
    let y = Expr::var(s.clone(), "y", 0).unwrap();
    let m1 = Expr::constant(s.clone(), -1.0);
    let upper = Expr::add(vec![
        Expr::pow(Expr::add(vec![x.clone(), m1.clone()]).unwrap(), 2),
        Expr::pow(Expr::add(vec![y.clone(), m1.clone()]).unwrap(), 2),
    ])
    .unwrap();
    let lower = Expr::neg(y.clone());
    let g1 = Expr::add(vec![x.clone(), y.clone(), m1.clone()]).unwrap();
    let g2 = Expr::add(vec![Expr::neg(x), y, m1]).unwrap();
    BilevelProblem::new(1, 1, upper, vec![], lower, vec![g1, g2]).unwrap()
}

/// Instance whose Lagrange-dual reformulation has a point where the
/// cone-intersection qualification fails:
/// lower `min_y { x(y1+y2) | y1+y2 <= 2, y1-y2 <= 0 }`.
/// The upper objective is an arbitrary smooth tracking term; the checks of
/// interest are independent of it.
pub fn bcq_fails_example() -> Arc<BilevelProblem> {
    let s = VarSpace::new(vec![("x", 1), ("y", 2)]).unwrap();
    let x = Expr::var(s.clone(), "x", 0).unwrap();
    let y1 = Expr::var(s.clone(), "y", 0).unwrap();
    let y2 = Expr::var(s.clone(), "y", 1).unwrap();
    let upper = Expr::add(vec![
        Expr::pow(x.clone(), 2),
        Expr::pow(y1.clone(), 2),
        Expr::pow(Expr::add(vec![y2.clone(), Expr::constant(s.clone(), -1.0)]).unwrap(), 2),
    ])
    .unwrap();
    let lower = Expr::mul(vec![x, Expr::add(vec![y1.clone(), y2.clone()]).unwrap()]).unwrap();
    let g1 = Expr::add(vec![y1.clone(), y2.clone(), Expr::constant(s.clone(), -2.0)]).unwrap();
    let g2 = Expr::sub(y1, y2).unwrap();
    BilevelProblem::new(1, 2, upper, vec![], lower, vec![g1, g2]).unwrap()
}

/// The published Wolfe-duality counterexample instance:
/// lower `min_y { y | y^3 <= x, y >= 0 }`. Not convex in y, so weak Wolfe
/// duality genuinely fails for x in [0, 54); duality-based reformulation
/// builders refuse it, while the weak-duality checker still accepts it.
pub fn wolfe_counterexample() -> Arc<BilevelProblem> {
    let s = VarSpace::new(vec![("x", 1), ("y", 1)]).unwrap();
    let x = Expr::var(s.clone(), "x", 0).unwrap();
    let y = Expr::var(s.clone(), "y", 0).unwrap();
    let upper = Expr::add(vec![
        Expr::pow(Expr::sub(x.clone(), Expr::constant(s.clone(), 8.0)).unwrap(), 2),
        Expr::pow(y.clone(), 2),
    ])
    .unwrap();
    let lower = y.clone();
    let g1 = Expr::sub(Expr::pow(y.clone(), 3), x).unwrap();
    let g2 = Expr::neg(y);
    BilevelProblem::new(1, 1, upper, vec![], lower, vec![g1, g2]).unwrap()
}

/// The counterexample's lower level at a fixed parameter value, as an NLP in
/// `y` alone (convexity tag ends up `Unknown`).
pub fn wolfe_counterexample_lower(x: f64) -> Result<Nlp> {
    wolfe_counterexample().lower_level_at(&[x])
}

/// Simple strictly convex unconstrained program `min w^2`.
pub fn min_square() -> Nlp {
    let s = VarSpace::new(vec![("w", 1)]).unwrap();
    let w = Expr::var(s.clone(), "w", 0).unwrap();
    Nlp::new(s, Expr::pow(w, 2), vec![], vec![], Sense::Minimize).unwrap()
}
