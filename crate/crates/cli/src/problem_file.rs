//! Line-oriented problem files: `key = value` pairs, expressions as
//! s-expression strings over blocks `x` (dim n) and `y` (dim m).
//!
//! ```text
//! # comment
//! name = running-example
//! n = 1
//! m = 1
//! p = 2
//! q = 0
//! F = (+ (pow (+ (var x 0) (const -1)) 2) (pow (+ (var y 0) (const -1)) 2))
//! f = (neg (var y 0))
//! g1 = (+ (var x 0) (var y 0) (const -1))
//! g2 = (+ (neg (var x 0)) (var y 0) (const -1))
//! ```
//!
//! Optional metadata: `tol`, `tol_act`, `step`, `radius` (floats).

use std::collections::BTreeMap;
use std::sync::Arc;

use bilevel_core::expr::{parse, VarSpace};
use bilevel_core::model::BilevelProblem;
use bilevel_core::{Error, Result};

#[derive(Debug, Clone)]
pub struct ProblemFile {
    pub name: String,
    pub bp: Arc<BilevelProblem>,
    pub tol: Option<f64>,
    pub tol_act: Option<f64>,
    pub step: Option<f64>,
    pub radius: Option<f64>,
    /// Canonicalized content for the report digest.
    pub canonical: String,
}

pub fn parse_problem(text: &str) -> Result<ProblemFile> {
    let mut kv: BTreeMap<String, String> = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::InvalidInput(format!(
                "line {}: expected `key = value`, got `{line}`",
                lineno + 1
            )));
        };
        let key = k.trim().to_string();
        if kv.contains_key(&key) {
            return Err(Error::InvalidInput(format!("duplicate key `{key}`")));
        }
        kv.insert(key, v.trim().to_string());
    }

    let dim = |key: &str| -> Result<usize> {
        kv.get(key)
            .ok_or_else(|| Error::InvalidInput(format!("missing key `{key}`")))?
            .parse()
            .map_err(|_| Error::InvalidInput(format!("`{key}` must be a nonnegative integer")))
    };
    let n = dim("n")?;
    let m = dim("m")?;
    let p = dim("p")?;
    let q = dim("q")?;
    if n == 0 || m == 0 {
        return Err(Error::InvalidInput("n and m must be positive".into()));
    }
    let space = VarSpace::new(vec![("x", n), ("y", m)])?;
    let expr = |key: &str| -> Result<bilevel_core::Expr> {
        let text = kv
            .get(key)
            .ok_or_else(|| Error::InvalidInput(format!("missing expression `{key}`")))?;
        parse(text, &space)
            .map_err(|e| Error::InvalidInput(format!("in `{key}`: {e}")))
    };
    let upper = expr("F")?;
    let lower = expr("f")?;
    let mut g = Vec::with_capacity(p);
    for i in 1..=p {
        g.push(expr(&format!("g{i}"))?);
    }
    let mut gg = Vec::with_capacity(q);
    for k in 1..=q {
        gg.push(expr(&format!("G{k}"))?);
    }
    let float = |key: &str| -> Result<Option<f64>> {
        match kv.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::InvalidInput(format!("`{key}` must be a float"))),
        }
    };

    let bp = BilevelProblem::new(n, m, upper, gg, lower, g)?;
    let name = kv.get("name").cloned().unwrap_or_else(|| "unnamed".into());
    let mut canonical = format!("name={name};n={n};m={m};p={p};q={q};F={};f={}",
        bp.upper_objective, bp.lower_objective);
    for (i, g) in bp.lower_constraints.iter().enumerate() {
        canonical.push_str(&format!(";g{}={g}", i + 1));
    }
    for (k, g) in bp.upper_constraints.iter().enumerate() {
        canonical.push_str(&format!(";G{}={g}", k + 1));
    }
    Ok(ProblemFile {
        name,
        bp,
        tol: float("tol")?,
        tol_act: float("tol_act")?,
        step: float("step")?,
        radius: float("radius")?,
        canonical,
    })
}

pub fn load_problem(path: &str) -> Result<ProblemFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidInput(format!("cannot read `{path}`: {e}")))?;
    parse_problem(&text)
}
