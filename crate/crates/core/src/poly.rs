//! Vertex, ray, and lineality enumeration for small polyhedra, plus
//! polyhedral cones and an exact cone-intersection test.
//!
//! Enumeration is by brute force over candidate active sets, which is the
//! right trade for the multiplier sets and reformulation fibers this crate
//! works with (free dimension capped at single digits).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lp::{Cmp, LinearProgram, LpOutcome};

const RANK_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-9;
const DEDUP_TOL: f64 = 1e-9;

/// `{ x | eq: a'x = b,  ineq: a'x <= b }`.
#[derive(Debug, Clone, Default)]
pub struct Polyhedron {
    pub dim: usize,
    pub eq: Vec<(Vec<f64>, f64)>,
    pub ineq: Vec<(Vec<f64>, f64)>,
}

/// Complete description of a polyhedron's extreme structure.
#[derive(Debug, Clone)]
pub struct VertexEnumeration {
    pub vertices: Vec<Vec<f64>>,
    pub rays: Vec<Vec<f64>>,
    pub lineality: Vec<Vec<f64>>,
}

impl Polyhedron {
    pub fn new(dim: usize) -> Polyhedron {
        Polyhedron { dim, eq: Vec::new(), ineq: Vec::new() }
    }

    pub fn add_eq(&mut self, coeffs: Vec<f64>, rhs: f64) {
        assert_eq!(coeffs.len(), self.dim);
        self.eq.push((coeffs, rhs));
    }

    pub fn add_ineq(&mut self, coeffs: Vec<f64>, rhs: f64) {
        assert_eq!(coeffs.len(), self.dim);
        self.ineq.push((coeffs, rhs));
    }

    /// Adds `x[i] >= 0` as `-x[i] <= 0`.
    pub fn add_nonneg(&mut self, i: usize) {
        let mut c = vec![0.0; self.dim];
        c[i] = -1.0;
        self.add_ineq(c, 0.0);
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        self.eq
            .iter()
            .all(|(a, b)| (dot(a, x) - b).abs() <= tol)
            && self.ineq.iter().all(|(a, b)| dot(a, x) - b <= tol)
    }

    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut v: f64 = 0.0;
        for (a, b) in &self.eq {
            v = v.max((dot(a, x) - b).abs());
        }
        for (a, b) in &self.ineq {
            v = v.max(dot(a, x) - b);
        }
        v
    }

    pub fn is_empty(&self) -> Result<bool> {
        let rows: Vec<(Vec<f64>, Cmp, f64)> = self
            .eq
            .iter()
            .map(|(a, b)| (a.clone(), Cmp::Eq, *b))
            .chain(self.ineq.iter().map(|(a, b)| (a.clone(), Cmp::Le, *b)))
            .collect();
        let pt = crate::lp::feasible_point(
            self.dim,
            &rows,
            &vec![None; self.dim],
            &vec![None; self.dim],
        )?;
        Ok(pt.is_none())
    }

    fn stacked_matrix(&self) -> DMatrix<f64> {
        let rows = self.eq.len() + self.ineq.len();
        let mut m = DMatrix::zeros(rows, self.dim);
        for (r, (a, _)) in self.eq.iter().chain(self.ineq.iter()).enumerate() {
            for (c, v) in a.iter().enumerate() {
                m[(r, c)] = *v;
            }
        }
        m
    }

    /// Basis of `{ d | eq: a'd = 0 and ineq: a'd = 0 }`, the lineality space.
    pub fn lineality_basis(&self) -> Vec<Vec<f64>> {
        if self.eq.is_empty() && self.ineq.is_empty() {
            return identity_basis(self.dim);
        }
        null_space(&self.stacked_matrix())
    }

    /// Enumerates vertices and extreme rays. The polyhedron must be pointed
    /// (trivial lineality); anchor lineality directions first otherwise.
    pub fn enumerate(&self, dim_cap: usize) -> Result<VertexEnumeration> {
        if self.dim > dim_cap {
            return Err(Error::Capability(format!(
                "polyhedron dimension {} exceeds cap {dim_cap}",
                self.dim
            )));
        }
        if self.dim == 0 {
            // zero-dimensional space: the empty tuple is the only candidate
            let feasible = self.eq.iter().all(|(_, b)| b.abs() <= FEAS_TOL)
                && self.ineq.iter().all(|(_, b)| -b <= FEAS_TOL);
            return Ok(VertexEnumeration {
                vertices: if feasible { vec![Vec::new()] } else { Vec::new() },
                rays: Vec::new(),
                lineality: Vec::new(),
            });
        }
        let lineality = self.lineality_basis();
        if !lineality.is_empty() {
            return Ok(VertexEnumeration { vertices: Vec::new(), rays: Vec::new(), lineality });
        }

        let eq_m = {
            let mut m = DMatrix::zeros(self.eq.len(), self.dim);
            for (r, (a, _)) in self.eq.iter().enumerate() {
                for (c, v) in a.iter().enumerate() {
                    m[(r, c)] = *v;
                }
            }
            m
        };
        let rank_eq = rank_of(&eq_m);
        let k = self.dim.saturating_sub(rank_eq);
        let n_ineq = self.ineq.len();

        let mut vertices: Vec<Vec<f64>> = Vec::new();
        for subset in combinations(n_ineq, k) {
            if let Some(x) = self.solve_tight(&subset) {
                if self.max_violation(&x) <= FEAS_TOL && !contains_close(&vertices, &x) {
                    vertices.push(x);
                }
            }
        }
        vertices.sort_by(|a, b| lex_cmp(a, b));

        // extreme rays: tight sets one smaller, on the homogenized system
        let mut rays: Vec<Vec<f64>> = Vec::new();
        if k >= 1 {
            for subset in combinations(n_ineq, k - 1) {
                let mut m = DMatrix::zeros(self.eq.len() + subset.len(), self.dim);
                for (r, (a, _)) in self.eq.iter().enumerate() {
                    for (c, v) in a.iter().enumerate() {
                        m[(r, c)] = *v;
                    }
                }
                for (ri, &i) in subset.iter().enumerate() {
                    for (c, v) in self.ineq[i].0.iter().enumerate() {
                        m[(self.eq.len() + ri, c)] = *v;
                    }
                }
                let ns = null_space(&m);
                if ns.len() != 1 {
                    continue;
                }
                for sign in [1.0, -1.0] {
                    let d: Vec<f64> = ns[0].iter().map(|v| v * sign).collect();
                    let ok = self.ineq.iter().all(|(a, _)| dot(a, &d) <= FEAS_TOL);
                    if ok {
                        let d = normalize(&d);
                        if !contains_close(&rays, &d) {
                            rays.push(d);
                        }
                    }
                }
            }
        }
        rays.sort_by(|a, b| lex_cmp(a, b));

        Ok(VertexEnumeration { vertices, rays, lineality })
    }

    fn solve_tight(&self, ineq_subset: &[usize]) -> Option<Vec<f64>> {
        let rows = self.eq.len() + ineq_subset.len();
        let mut m = DMatrix::zeros(rows, self.dim);
        let mut b = DVector::zeros(rows);
        for (r, (a, rhs)) in self.eq.iter().enumerate() {
            for (c, v) in a.iter().enumerate() {
                m[(r, c)] = *v;
            }
            b[r] = *rhs;
        }
        for (ri, &i) in ineq_subset.iter().enumerate() {
            let (a, rhs) = &self.ineq[i];
            for (c, v) in a.iter().enumerate() {
                m[(self.eq.len() + ri, c)] = *v;
            }
            b[self.eq.len() + ri] = *rhs;
        }
        if rank_of(&m) < self.dim {
            return None;
        }
        // exact LU for square systems keeps integer-data vertices exact
        let x = if rows == self.dim {
            m.clone().full_piv_lu().solve(&b)?
        } else {
            m.clone().svd(true, true).solve(&b, RANK_TOL).ok()?
        };
        let res = (&m * &x - &b).amax();
        if res > 1e-8 {
            return None;
        }
        // canonicalize -0.0 so printed vertices are stable
        Some(x.iter().map(|&v| if v == 0.0 { 0.0 } else { v }).collect())
    }
}

/// A cone given by conic generators plus a lineality span.
#[derive(Debug, Clone, Default)]
pub struct PolyhedralCone {
    pub generators: Vec<Vec<f64>>,
    pub lineality: Vec<Vec<f64>>,
}

impl PolyhedralCone {
    pub fn dim(&self) -> Option<usize> {
        self.generators
            .first()
            .or_else(|| self.lineality.first())
            .map(|v| v.len())
    }

    pub fn trivial(&self) -> bool {
        self.generators.is_empty() && self.lineality.is_empty()
    }
}

/// Decides whether `a ∩ (-b) = {0}` for polyhedral cones; on a nontrivial
/// intersection returns a witness element with unit max-norm.
///
/// Per coordinate k, solves `max/min eta_k` over
/// `eta = Ga*la + La*mu, la >= 0; eta = -(Gb*lb + Lb*nu), lb >= 0; |eta| <= 1`.
/// The intersection is a cone, so it is nontrivial exactly when some
/// coordinate can be pushed away from zero.
pub fn cone_intersection_witness(
    a: &PolyhedralCone,
    b: &PolyhedralCone,
    dim: usize,
    tol: f64,
) -> Result<Option<Vec<f64>>> {
    if (a.trivial()) || (b.trivial()) {
        return Ok(None);
    }
    let na_g = a.generators.len();
    let na_l = a.lineality.len();
    let nb_g = b.generators.len();
    let nb_l = b.lineality.len();
    // variables: eta (dim, boxed), la (na_g >= 0), mu (na_l free), lb, nu
    let nv = dim + na_g + na_l + nb_g + nb_l;
    let mut rows: Vec<(Vec<f64>, Cmp, f64)> = Vec::new();
    for r in 0..dim {
        // eta_r - sum la Ga_r - sum mu La_r = 0
        let mut c = vec![0.0; nv];
        c[r] = 1.0;
        for (j, g) in a.generators.iter().enumerate() {
            c[dim + j] = -g[r];
        }
        for (j, l) in a.lineality.iter().enumerate() {
            c[dim + na_g + j] = -l[r];
        }
        rows.push((c, Cmp::Eq, 0.0));
        // eta_r + sum lb Gb_r + sum nu Lb_r = 0
        let mut c = vec![0.0; nv];
        c[r] = 1.0;
        for (j, g) in b.generators.iter().enumerate() {
            c[dim + na_g + na_l + j] = g[r];
        }
        for (j, l) in b.lineality.iter().enumerate() {
            c[dim + na_g + na_l + nb_g + j] = l[r];
        }
        rows.push((c, Cmp::Eq, 0.0));
    }
    let mut lower = vec![None; nv];
    let mut upper = vec![None; nv];
    for r in 0..dim {
        lower[r] = Some(-1.0);
        upper[r] = Some(1.0);
    }
    for j in 0..na_g {
        lower[dim + j] = Some(0.0);
    }
    for j in 0..nb_g {
        lower[dim + na_g + na_l + j] = Some(0.0);
    }

    for k in 0..dim {
        for maximize in [true, false] {
            let mut obj = vec![0.0; nv];
            obj[k] = 1.0;
            let mut lp = LinearProgram::new(nv, !maximize, obj);
            for (c, cmp, b) in &rows {
                lp.add_row(c.clone(), *cmp, *b);
            }
            lp.lower = lower.clone();
            lp.upper = upper.clone();
            match lp.solve()? {
                LpOutcome::Optimal { x, value } => {
                    let attained = if maximize { value } else { -value };
                    let _ = attained;
                    if (maximize && value > tol) || (!maximize && value < -tol) {
                        return Ok(Some(x[..dim].to_vec()));
                    }
                }
                LpOutcome::Unbounded { .. } => {
                    return Err(Error::Internal("boxed eta cannot be unbounded".into()))
                }
                LpOutcome::Infeasible => {
                    return Err(Error::Internal("cone LP must contain 0".into()))
                }
            }
        }
    }
    Ok(None)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Equal) | None => continue,
            Some(o) => return o,
        }
    }
    std::cmp::Ordering::Equal
}

fn contains_close(set: &[Vec<f64>], x: &[f64]) -> bool {
    set.iter()
        .any(|v| v.iter().zip(x).all(|(a, b)| (a - b).abs() <= DEDUP_TOL))
}

fn identity_basis(dim: usize) -> Vec<Vec<f64>> {
    (0..dim)
        .map(|i| {
            let mut e = vec![0.0; dim];
            e[i] = 1.0;
            e
        })
        .collect()
}

pub(crate) fn rank_of(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    m.clone().svd(false, false).rank(RANK_TOL)
}

/// Orthonormal basis for the null space of `m` (columns of V past the rank).
pub(crate) fn null_space(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let ncols = m.ncols();
    if ncols == 0 {
        return Vec::new();
    }
    if m.nrows() == 0 {
        return identity_basis(ncols);
    }
    let svd = m.clone().svd(false, true);
    let rank = svd.rank(RANK_TOL);
    let vt = svd.v_t.expect("requested");
    let mut basis = Vec::new();
    for r in rank..vt.nrows() {
        basis.push(vt.row(r).iter().copied().collect());
    }
    // vt has min(nrows, ncols) rows; pad with the remaining kernel if wide
    if vt.nrows() < ncols {
        // complete via svd of stacked [m; basis rows] is overkill here; use
        // full_piv of m' m instead
        let gram = m.transpose() * m;
        let eig = nalgebra::SymmetricEigen::new(gram);
        basis.clear();
        for (i, ev) in eig.eigenvalues.iter().enumerate() {
            if ev.abs() <= RANK_TOL * RANK_TOL.max(1.0) || ev.abs().sqrt() <= RANK_TOL {
                basis.push(eig.eigenvectors.column(i).iter().copied().collect());
            }
        }
    }
    basis
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        // advance
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}
