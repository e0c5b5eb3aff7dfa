//! Modeling and verification toolkit for optimistic bilevel optimization
//! problems with a convex lower level.
//!
//! The crate provides:
//! - a small polynomial expression language with exact derivatives ([`expr`]),
//! - problem containers, KKT machinery, and convex solvers ([`model`], [`solve`]),
//! - Lagrange, Wolfe, and Mond-Weir duals of a convex program ([`duality`]),
//! - the six single-level reformulations and their size summaries ([`reform`]),
//! - constraint-qualification checks with numeric certificates ([`cq`]),
//! - brute-force grid oracles and fiber enumeration ([`verify`]),
//! - the built-in instance suite ([`builtin`]) and deterministic random
//!   instance families ([`instances`]).

pub mod error;
pub mod expr;
pub mod lp;
pub mod poly;
pub mod model;
pub mod solve;
pub mod duality;
pub mod reform;
pub mod cq;
pub mod verify;
pub mod builtin;
pub mod instances;

pub use error::{Error, Result};
pub use expr::{parse, Expr, Point, VarSpace};
