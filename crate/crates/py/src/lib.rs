//! Python bindings: expressions with exact derivatives, bilevel problems,
//! their single-level reformulations, and the verification toolbox.

use std::sync::Arc;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use bilevel_core::builtin;
use bilevel_core::cq::{
    check_bcq_closed_form, check_mfcq_reform, check_nsmfcq_ld, check_slater, CqVerdict,
};
use bilevel_core::duality::{check_weak_duality, DualKind, DualPoint};
use bilevel_core::expr::{parse, Expr, Point, VarSpace};
use bilevel_core::model::{
    multiplier_set, polyhedron_vertices, solution_membership, value_function, BilevelProblem,
    SolveStatus,
};
use bilevel_core::reform::{build_reformulation, count_summary, ge_ref_feasibility, ReformKind};
use bilevel_core::verify::{
    brute_force_global, enumerate_k, local_min_certificate, BilevelGrid, FiberKind, GridBox,
    LocalVerdict, ReformGrid,
};

fn err(e: bilevel_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_kind(kind: &str) -> PyResult<ReformKind> {
    ReformKind::parse(kind).map_err(err)
}

fn fiber_kind(kind: &str) -> PyResult<FiberKind> {
    Ok(match kind {
        "ld" | "ell" => FiberKind::Ell,
        "wd" | "w" => FiberKind::W,
        "mwd" | "mw" => FiberKind::Mw,
        other => {
            return Err(PyValueError::new_err(format!(
                "fiber kind must be ld|wd|mwd, got `{other}`"
            )))
        }
    })
}

/// A polynomial expression over named variable blocks.
#[pyclass(name = "Expression")]
struct PyExpression {
    expr: Expr,
}

#[pymethods]
impl PyExpression {
    /// Parse an s-expression over the given `(block, dim)` list.
    #[new]
    fn new(text: &str, blocks: Vec<(String, usize)>) -> PyResult<Self> {
        let space = VarSpace::new(blocks).map_err(err)?;
        Ok(PyExpression { expr: parse(text, &space).map_err(err)? })
    }

    fn eval(&self, values: Vec<f64>) -> PyResult<f64> {
        let pt = Point::new(self.expr.space().clone(), values).map_err(err)?;
        self.expr.eval(&pt).map_err(err)
    }

    fn grad(&self, block: &str, values: Vec<f64>) -> PyResult<Vec<f64>> {
        let pt = Point::new(self.expr.space().clone(), values).map_err(err)?;
        self.expr.grad(block, &pt).map_err(err)
    }

    fn hessian(&self, block_a: &str, block_b: &str, values: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let pt = Point::new(self.expr.space().clone(), values).map_err(err)?;
        let h = self.expr.hessian(block_a, block_b, &pt).map_err(err)?;
        Ok((0..h.nrows())
            .map(|i| (0..h.ncols()).map(|j| h[(i, j)]).collect())
            .collect())
    }

    fn __str__(&self) -> String {
        self.expr.to_string()
    }

    fn __repr__(&self) -> String {
        format!("Expression({})", self.expr)
    }
}

/// An optimistic bilevel problem with a convex lower level.
#[pyclass(name = "Problem")]
struct PyProblem {
    bp: Arc<BilevelProblem>,
}

#[pymethods]
impl PyProblem {
    /// Build from s-expression strings over blocks `x` (dim n), `y` (dim m).
    #[new]
    #[pyo3(signature = (n, m, upper_objective, lower_objective, lower_constraints, upper_constraints=vec![]))]
    fn new(
        n: usize,
        m: usize,
        upper_objective: &str,
        lower_objective: &str,
        lower_constraints: Vec<String>,
        upper_constraints: Vec<String>,
    ) -> PyResult<Self> {
        let space = VarSpace::new(vec![("x", n), ("y", m)]).map_err(err)?;
        let parse_one = |t: &str| parse(t, &space).map_err(err);
        let upper = parse_one(upper_objective)?;
        let lower = parse_one(lower_objective)?;
        let g = lower_constraints
            .iter()
            .map(|t| parse_one(t))
            .collect::<PyResult<Vec<_>>>()?;
        let gg = upper_constraints
            .iter()
            .map(|t| parse_one(t))
            .collect::<PyResult<Vec<_>>>()?;
        Ok(PyProblem { bp: BilevelProblem::new(n, m, upper, gg, lower, g).map_err(err)? })
    }

    /// One of the built-in worked instances: `running`, `bcq-fails`, or
    /// `wolfe-counterexample`.
    #[staticmethod]
    fn builtin(name: &str) -> PyResult<Self> {
        let bp = match name {
            "running" => builtin::running_example(),
            "bcq-fails" => builtin::bcq_fails_example(),
            "wolfe-counterexample" => builtin::wolfe_counterexample(),
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown builtin `{other}` (expected running|bcq-fails|wolfe-counterexample)"
                )))
            }
        };
        Ok(PyProblem { bp })
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.bp.dims;
        (d.n, d.m, d.p, d.q)
    }

    fn lower_convex_in_y(&self) -> bool {
        self.bp.lower_convex_in_y
    }

    /// Lower-level optimal value; `inf` when infeasible, `-inf` when
    /// unbounded below.
    #[pyo3(signature = (x, tol=1e-9))]
    fn value_function(&self, x: Vec<f64>, tol: f64) -> PyResult<f64> {
        Ok(value_function(&self.bp, &x, tol).map_err(err)?.as_f64())
    }

    #[pyo3(signature = (x, y, tol=1e-7))]
    fn solution_membership(&self, x: Vec<f64>, y: Vec<f64>, tol: f64) -> PyResult<bool> {
        solution_membership(&self.bp, &x, &y, tol).map_err(err)
    }

    /// Vertices and recession rays of the multiplier set at `(x, y)`.
    #[pyo3(signature = (x, y, tol_act=1e-7))]
    fn multiplier_vertices(
        &self,
        x: Vec<f64>,
        y: Vec<f64>,
        tol_act: f64,
    ) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mp = multiplier_set(&self.bp, &x, &y, tol_act).map_err(err)?;
        let en = polyhedron_vertices(&mp, 8).map_err(err)?;
        Ok((en.vertices, en.rays))
    }

    /// `(variables, implicit_variables, constraints)` for a reformulation.
    fn counts(&self, kind: &str) -> PyResult<(usize, usize, usize)> {
        let cs = count_summary(self.bp.dims, parse_kind(kind)?);
        Ok((cs.n_vars, cs.n_implicit_vars, cs.n_constraints))
    }

    /// Emitted constraint lists of a reformulation, as s-expression strings.
    fn reformulate(&self, kind: &str) -> PyResult<PyReformulation> {
        let reform = build_reformulation(&self.bp, parse_kind(kind)?).map_err(err)?;
        Ok(PyReformulation { reform: Arc::new(reform) })
    }

    /// Fiber of the intermediate mapping at `(x, y)`:
    /// `(vertices, rays, free_directions, anchored)`.
    fn enumerate_k(
        &self,
        kind: &str,
        x: Vec<f64>,
        y: Vec<f64>,
    ) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, bool)> {
        let fiber = enumerate_k(&self.bp, fiber_kind(kind)?, &x, &y, 8).map_err(err)?;
        Ok((fiber.vertices, fiber.rays, fiber.lineality, fiber.anchored))
    }

    #[pyo3(signature = (x, y, tol=1e-9))]
    fn ge_feasible(&self, x: Vec<f64>, y: Vec<f64>, tol: f64) -> PyResult<bool> {
        ge_ref_feasibility(&self.bp, &x, &y, tol).map_err(err)
    }

    /// Weak duality of the lower level at fixed `x` against an explicit dual
    /// point; returns `(primal, dual, gap, ok)`.
    #[pyo3(signature = (kind, x, y, dual, tol=1e-9))]
    fn weak_duality(
        &self,
        kind: &str,
        x: Vec<f64>,
        y: Vec<f64>,
        dual: Vec<f64>,
        tol: f64,
    ) -> PyResult<(f64, f64, f64, bool)> {
        let low = self.bp.lower_level_at(&x).map_err(err)?;
        let m = self.bp.dims.m;
        let (dk, dual_pt) = match kind {
            "ld" => (DualKind::Lagrange, DualPoint::Multiplier(dual)),
            "wd" => (
                DualKind::Wolfe,
                DualPoint::PrimalDual { w: dual[..m].to_vec(), v: dual[m..].to_vec() },
            ),
            "mwd" => (
                DualKind::MondWeir,
                DualPoint::PrimalDual { w: dual[..m].to_vec(), v: dual[m..].to_vec() },
            ),
            other => {
                return Err(PyValueError::new_err(format!(
                    "duality kind must be ld|wd|mwd, got `{other}`"
                )))
            }
        };
        let primal = Point::new(low.space.clone(), y).map_err(err)?;
        let rep = check_weak_duality(&low, &primal, &dual_pt, dk, tol).map_err(err)?;
        Ok((rep.primal_value, rep.dual_value, rep.gap, rep.weak_duality_ok))
    }

    /// Slater's condition for the lower level at fixed `x`.
    #[pyo3(signature = (x, tol=1e-9))]
    fn slater(&self, x: Vec<f64>, tol: f64) -> PyResult<String> {
        let low = self.bp.lower_level_at(&x).map_err(err)?;
        let rep = check_slater(&low.inequalities, tol).map_err(err)?;
        Ok(verdict_str(rep.verdict))
    }

    /// Deterministic grid scan of the bilevel problem; returns
    /// `(point, value)` or `None` when no feasible grid point exists.
    #[pyo3(signature = (center, radius, step, tol=1e-6))]
    fn global_scan(
        &self,
        center: Vec<f64>,
        radius: f64,
        step: f64,
        tol: f64,
    ) -> PyResult<Option<(Vec<f64>, f64)>> {
        let grid = BilevelGrid::new(&self.bp);
        let gbox = GridBox::uniform(center, radius, step);
        let rep = brute_force_global(&grid, &gbox, tol).map_err(err)?;
        Ok(match rep.status {
            SolveStatus::Optimal => Some((rep.grid_point().unwrap().to_vec(), rep.value)),
            _ => None,
        })
    }
}

fn verdict_str(v: CqVerdict) -> String {
    match v {
        CqVerdict::Holds => "holds",
        CqVerdict::Violated => "violated",
        CqVerdict::NotApplicable => "not_applicable",
    }
    .to_string()
}

/// A single-level reformulation with its emitted constraint system.
#[pyclass(name = "Reformulation")]
struct PyReformulation {
    reform: Arc<bilevel_core::reform::ReformulatedNlp>,
}

#[pymethods]
impl PyReformulation {
    fn kind(&self) -> String {
        self.reform.kind.name().to_string()
    }

    fn objective(&self) -> String {
        self.reform.nlp.objective.to_string()
    }

    fn inequalities(&self) -> Vec<String> {
        self.reform.nlp.inequalities.iter().map(|e| e.to_string()).collect()
    }

    fn equalities(&self) -> Vec<String> {
        self.reform.nlp.equalities.iter().map(|e| e.to_string()).collect()
    }

    fn implicit_constraints(&self) -> Vec<String> {
        self.reform
            .implicit_constraints
            .iter()
            .map(|c| c.name.clone())
            .collect()
    }

    fn blocks(&self) -> Vec<(String, usize)> {
        self.reform
            .nlp
            .space
            .blocks()
            .map(|(b, d)| (b.to_string(), d))
            .collect()
    }

    fn closed_form(&self) -> bool {
        self.reform.closed_form
    }

    fn z_eliminated(&self) -> bool {
        self.reform.z_eliminated
    }

    #[pyo3(signature = (point, tol=1e-7))]
    fn is_feasible(&self, point: Vec<f64>, tol: f64) -> PyResult<bool> {
        let pt = Point::new(self.reform.nlp.space.clone(), point).map_err(err)?;
        self.reform.is_feasible(&pt, tol).map_err(err)
    }

    /// MFCQ verdict at a feasible point: `(verdict, residual)`.
    #[pyo3(signature = (point, tol_act=1e-7, tol=1e-9))]
    fn mfcq(&self, point: Vec<f64>, tol_act: f64, tol: f64) -> PyResult<(String, Option<f64>)> {
        let pt = Point::new(self.reform.nlp.space.clone(), point).map_err(err)?;
        let rep = check_mfcq_reform(&self.reform, &pt, tol_act, tol).map_err(err)?;
        Ok((verdict_str(rep.verdict), rep.residual))
    }

    /// Cone-qualification verdict (Lagrange-dual reformulations only):
    /// `(verdict, certificate)`.
    #[pyo3(signature = (point, tol=1e-9))]
    fn bcq(&self, point: Vec<f64>, tol: f64) -> PyResult<(String, Option<Vec<f64>>)> {
        let pt = Point::new(self.reform.nlp.space.clone(), point).map_err(err)?;
        let rep = check_bcq_closed_form(&self.reform, &pt, tol).map_err(err)?;
        let cert = match rep.certificate {
            bilevel_core::cq::CqCertificate::ConeElement(e) => Some(e),
            _ => None,
        };
        Ok((verdict_str(rep.verdict), cert))
    }

    /// Nonsmooth MFCQ verdict (Lagrange-dual reformulations only).
    #[pyo3(signature = (point, tol=1e-9))]
    fn nsmfcq(&self, point: Vec<f64>, tol: f64) -> PyResult<String> {
        let pt = Point::new(self.reform.nlp.space.clone(), point).map_err(err)?;
        let rep = check_nsmfcq_ld(&self.reform, &pt, tol).map_err(err)?;
        Ok(verdict_str(rep.verdict))
    }

    /// Resolution-limited local minimality at `point`; fine steps on the
    /// original variables, radius/2 on the implicit ones. Returns
    /// `(verdict, witness, drop)`.
    #[pyo3(signature = (point, radius=0.1, step=1e-3))]
    fn local_certificate(
        &self,
        point: Vec<f64>,
        radius: f64,
        step: f64,
    ) -> PyResult<(String, Option<Vec<f64>>, Option<f64>)> {
        let total = self.reform.nlp.space.total_dim();
        let nm = {
            let d = self.reform.source.dims;
            d.n + d.m
        };
        let radii = vec![radius; total];
        let mut steps = vec![step; total];
        for s in steps.iter_mut().skip(nm) {
            *s = radius / 2.0;
        }
        let grid = ReformGrid::new(&self.reform);
        let cert =
            local_min_certificate(&grid, &point, &radii, &steps, 1e-9, 1e-7).map_err(err)?;
        let verdict = match cert.verdict {
            LocalVerdict::NoBetterPointAtResolution => "no_better_point_at_resolution",
            LocalVerdict::Counterexample => "counterexample",
        };
        let (w, d) = match cert.witness {
            Some((w, d)) => (Some(w), Some(d)),
            None => (None, None),
        };
        Ok((verdict.to_string(), w, d))
    }

    /// Grid-global scan of the reformulation over a uniform box.
    #[pyo3(signature = (center, radius, step, tol=1e-6))]
    fn global_scan(
        &self,
        center: Vec<f64>,
        radius: Vec<f64>,
        step: Vec<f64>,
        tol: f64,
    ) -> PyResult<Option<(Vec<f64>, f64)>> {
        let grid = ReformGrid::new(&self.reform);
        let gbox = GridBox { center, radius, step };
        let rep = brute_force_global(&grid, &gbox, tol).map_err(err)?;
        Ok(match rep.status {
            SolveStatus::Optimal => Some((rep.grid_point().unwrap().to_vec(), rep.value)),
            _ => None,
        })
    }
}

#[pymodule]
fn bilevel_duality(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyExpression>()?;
    m.add_class::<PyProblem>()?;
    m.add_class::<PyReformulation>()?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
