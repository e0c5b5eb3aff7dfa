//! Subcommand implementations. Every command produces a deterministic
//! report tree plus a process exit code: 0 for holds/true outcomes, 1 for
//! violated/false outcomes, 2 for input or capability errors.

use std::sync::Arc;

use bilevel_core::builtin;
use bilevel_core::cq::{
    check_bcq_closed_form, check_mfcq_reform, check_nsmfcq_ld, check_slater, CqCertificate,
    CqReport, CqVerdict,
};
use bilevel_core::duality::{check_saddle_point, check_weak_duality, lagrange_value_fn, DualKind, DualPoint};
use bilevel_core::expr::Point;
use bilevel_core::model::{BilevelProblem, SolveStatus};
use bilevel_core::reform::{
    build_reformulation, count_summary, ge_ref_feasibility, ReformKind, ReformulatedNlp,
};
use bilevel_core::solve::solve_convex;
use bilevel_core::verify::{
    brute_force_global_range, enumerate_k, first_dim_count, inner_semicompactness_probe,
    local_min_certificate, BilevelGrid, FiberKind, GridBox, LocalVerdict, ProbeVerdict,
    ReformGrid,
};
use bilevel_core::{Error, Result};

use crate::json::{fnv1a_hex, Json};
use crate::problem_file::ProblemFile;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    pub tol: f64,
    pub tol_act: f64,
    pub step: f64,
    pub radius: f64,
}

impl Tolerances {
    pub fn to_json(self) -> Json {
        Json::obj(vec![
            ("tol", Json::Num(self.tol)),
            ("tol_act", Json::Num(self.tol_act)),
            ("step", Json::Num(self.step)),
            ("radius", Json::Num(self.radius)),
        ])
    }
}

pub struct Outcome {
    pub report: Json,
    /// Table-style text for the default (non-JSON) rendering, when the
    /// pretty-printed report is not the best fit.
    pub text: Option<String>,
    pub exit: i32,
}

fn envelope(command: Json, digest: &str, tols: Tolerances, result: Json) -> Json {
    Json::obj(vec![
        ("command", command),
        ("digest", Json::Str(digest.to_string())),
        ("result", result),
        ("tolerances", tols.to_json()),
        ("version", Json::Str(VERSION.to_string())),
    ])
}

fn cq_to_json(rep: &CqReport) -> Json {
    let verdict = match rep.verdict {
        CqVerdict::Holds => "holds",
        CqVerdict::Violated => "violated",
        CqVerdict::NotApplicable => "not_applicable",
    };
    let certificate = match &rep.certificate {
        CqCertificate::Direction(d) => Json::obj(vec![("direction", Json::floats(d))]),
        CqCertificate::Multiplier { ineq, eq } => Json::obj(vec![
            ("multiplier_ineq", Json::floats(ineq)),
            ("multiplier_eq", Json::floats(eq)),
        ]),
        CqCertificate::SlaterPoint(p) => Json::obj(vec![("interior_point", Json::floats(p))]),
        CqCertificate::ConeElement(e) => Json::obj(vec![("cone_element", Json::floats(e))]),
        CqCertificate::None => Json::Null,
    };
    Json::obj(vec![
        ("condition", Json::Str(rep.condition.name().to_string())),
        ("verdict", Json::Str(verdict.to_string())),
        ("certificate", certificate),
        (
            "active_set",
            Json::Arr(rep.active_set.iter().map(|&i| Json::Int(i as i64)).collect()),
        ),
        (
            "residual",
            rep.residual.map_or(Json::Null, Json::Num),
        ),
        ("note", Json::Str(rep.note.clone())),
    ])
}

fn verdict_exit(v: CqVerdict) -> i32 {
    match v {
        CqVerdict::Holds => 0,
        CqVerdict::Violated => 1,
        CqVerdict::NotApplicable => 2,
    }
}

// ---------------------------------------------------------------- reformulate

pub fn cmd_reformulate(pf: &ProblemFile, kind_s: &str, tols: Tolerances) -> Result<Outcome> {
    let kind = ReformKind::parse(kind_s)?;
    let digest = fnv1a_hex(&pf.canonical);
    let command = Json::obj(vec![
        ("name", Json::Str("reformulate".into())),
        ("file", Json::Str(pf.name.clone())),
        ("kind", Json::Str(kind_s.to_string())),
    ]);
    let cs = count_summary(pf.bp.dims, kind);
    let counts = Json::obj(vec![
        ("variables", Json::Int(cs.n_vars as i64)),
        ("implicit_variables", Json::Int(cs.n_implicit_vars as i64)),
        ("constraints", Json::Int(cs.n_constraints as i64)),
    ]);
    if kind == ReformKind::Ge {
        let result = Json::obj(vec![
            ("counts", counts),
            (
                "message",
                Json::Str(
                    "the generalized-equation reformulation is a feasibility test only; \
                     no constraint list is emitted (use `check --what ge-feasible`)"
                        .into(),
                ),
            ),
        ]);
        return Ok(Outcome {
            report: envelope(command, &digest, tols, result),
            text: None,
            exit: 0,
        });
    }
    let reform = build_reformulation(&pf.bp, kind)?;
    let ineqs: Vec<String> = reform.nlp.inequalities.iter().map(|e| e.to_string()).collect();
    let eqs: Vec<String> = reform.nlp.equalities.iter().map(|e| e.to_string()).collect();
    let implicit: Vec<String> = reform
        .implicit_constraints
        .iter()
        .map(|c| c.name.clone())
        .collect();
    let blocks: Vec<Json> = reform
        .nlp
        .space
        .blocks()
        .map(|(b, d)| {
            Json::obj(vec![
                ("block", Json::Str(b.to_string())),
                ("dim", Json::Int(d as i64)),
                (
                    "provenance",
                    Json::Str(
                        match reform.provenance.get(b) {
                            Some(bilevel_core::reform::Provenance::Implicit) => "implicit",
                            _ => "original",
                        }
                        .to_string(),
                    ),
                ),
            ])
        })
        .collect();
    let result = Json::obj(vec![
        ("objective", Json::Str(reform.nlp.objective.to_string())),
        ("inequalities", Json::strings(&ineqs)),
        ("equalities", Json::strings(&eqs)),
        ("implicit_constraints", Json::strings(&implicit)),
        ("blocks", Json::Arr(blocks)),
        ("counts", counts),
        ("closed_form", Json::Bool(reform.closed_form)),
        ("z_eliminated", Json::Bool(reform.z_eliminated)),
        (
            "emitted_constraint_count",
            Json::Int(reform.emitted_constraint_count() as i64),
        ),
    ]);
    let mut text = String::new();
    text.push_str(&format!("{} reformulation of {} (", kind_s, pf.name));
    text.push_str(&format!(
        "{} vars, {} implicit, {} constraints)\n",
        cs.n_vars, cs.n_implicit_vars, cs.n_constraints
    ));
    text.push_str(&format!("minimize {}\n", reform.nlp.objective));
    for e in &ineqs {
        text.push_str(&format!("ineq <= 0: {e}\n"));
    }
    for e in &eqs {
        text.push_str(&format!("eq   == 0: {e}\n"));
    }
    for c in &implicit {
        text.push_str(&format!("implicit : {c}\n"));
    }
    Ok(Outcome { report: envelope(command, &digest, tols, result), text: Some(text), exit: 0 })
}

// -------------------------------------------------------------------- compare

const QUALITATIVE_ROWS: [(&str, [&str; 6]); 6] = [
    // order: vf, kkt, ge, ld, wd, mwd
    ("lower-level convexity", ["×", "✓", "✓", "✓", "✓", "✓"]),
    ("lower-level differentiability", ["×", "✓", "(✓)", "✓", "✓", "✓"]),
    ("lower-level regularity", ["×", "✓", "×", "✓", "✓", "✓"]),
    ("global equivalence", ["✓", "✓", "✓", "✓", "✓", "✓"]),
    ("local equivalence", ["✓", "(×)", "✓", "(×)", "(×)", "(×)"]),
    ("validity of MFCQ", ["×", "×", "−", "(×)", "×", "×"]),
];

const KIND_ORDER: [ReformKind; 6] = [
    ReformKind::Vf,
    ReformKind::Kkt,
    ReformKind::Ge,
    ReformKind::Ld,
    ReformKind::Wd,
    ReformKind::Mwd,
];

pub fn cmd_compare(pf: &ProblemFile, tols: Tolerances) -> Result<Outcome> {
    let digest = fnv1a_hex(&pf.canonical);
    let command = Json::obj(vec![
        ("name", Json::Str("compare".into())),
        ("file", Json::Str(pf.name.clone())),
    ]);
    let dims = pf.bp.dims;
    let mut per_kind = Vec::new();
    for kind in KIND_ORDER {
        let cs = count_summary(dims, kind);
        let mut fields = vec![
            ("kind", Json::Str(kind.name().to_string())),
            ("variables", Json::Int(cs.n_vars as i64)),
            ("implicit_variables", Json::Int(cs.n_implicit_vars as i64)),
            ("constraints", Json::Int(cs.n_constraints as i64)),
        ];
        for (row, vals) in QUALITATIVE_ROWS {
            let idx = KIND_ORDER.iter().position(|k| *k == kind).unwrap();
            fields.push((row, Json::Str(vals[idx].to_string())));
        }
        per_kind.push(Json::obj(fields));
    }
    let result = Json::obj(vec![
        (
            "dims",
            Json::obj(vec![
                ("n", Json::Int(dims.n as i64)),
                ("m", Json::Int(dims.m as i64)),
                ("p", Json::Int(dims.p as i64)),
                ("q", Json::Int(dims.q as i64)),
            ]),
        ),
        ("reformulations", Json::Arr(per_kind)),
    ]);

    // plain-text tables
    let mut text = String::new();
    text.push_str(&format!(
        "problem {} with (n, m, p, q) = ({}, {}, {}, {})\n\n",
        pf.name, dims.n, dims.m, dims.p, dims.q
    ));
    let width = 34;
    let header = |text: &mut String, kinds: &[ReformKind]| {
        text.push_str(&format!("{:width$}", ""));
        for k in kinds {
            text.push_str(&format!("{:>8}", k.name()));
        }
        text.push('\n');
    };
    for (title, kinds) in [
        ("standard reformulations", &KIND_ORDER[..3]),
        ("duality-based reformulations", &KIND_ORDER[3..]),
    ] {
        text.push_str(title);
        text.push('\n');
        header(&mut text, kinds);
        for (label, getter) in [
            ("# variables", 0usize),
            ("# implicit variables", 1),
            ("# constraints", 2),
        ] {
            text.push_str(&format!("{label:width$}"));
            for k in kinds {
                let cs = count_summary(dims, *k);
                let v = match getter {
                    0 => cs.n_vars,
                    1 => cs.n_implicit_vars,
                    _ => cs.n_constraints,
                };
                text.push_str(&format!("{v:>8}"));
            }
            text.push('\n');
        }
        for (row, vals) in QUALITATIVE_ROWS {
            text.push_str(&format!("{row:width$}"));
            for k in kinds {
                let idx = KIND_ORDER.iter().position(|kk| kk == k).unwrap();
                text.push_str(&format!("{:>8}", vals[idx]));
            }
            text.push('\n');
        }
        text.push('\n');
    }
    Ok(Outcome { report: envelope(command, &digest, tols, result), text: Some(text), exit: 0 })
}

// ------------------------------------------------------------------- examples

struct Assertion {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn assertion_json(a: &Assertion) -> Json {
    Json::obj(vec![
        ("assertion", Json::Str(a.name.to_string())),
        ("pass", Json::Bool(a.pass)),
        ("detail", Json::Str(a.detail.clone())),
    ])
}

fn local_scan(
    reform: &ReformulatedNlp,
    at: &[f64],
    radius: f64,
    fine_step: f64,
) -> Result<(LocalVerdict, Option<(Vec<f64>, f64)>)> {
    let total = reform.nlp.space.total_dim();
    let radii = vec![radius; total];
    let mut steps = vec![fine_step; total];
    for s in steps.iter_mut().skip(2) {
        *s = radius / 2.0;
    }
    let grid = ReformGrid::new(reform);
    let cert = local_min_certificate(&grid, at, &radii, &steps, 1e-9, 1e-7)?;
    Ok((cert.verdict, cert.witness))
}

fn example_assertions(name: &str, tols: Tolerances) -> Result<Vec<Assertion>> {
    let mut out = Vec::new();
    let mut push = |name: &'static str, pass: bool, detail: String| {
        out.push(Assertion { name, pass, detail });
    };
    match name {
        "lagrange-running" | "wolfe-running" | "mondweir-running" => {
            let bp = builtin::running_example();
            let kind = match name {
                "lagrange-running" => ReformKind::Ld,
                "wolfe-running" => ReformKind::Wd,
                _ => ReformKind::Mwd,
            };
            // global minimizer of the bilevel problem
            let grid = BilevelGrid::new(&bp);
            let gbox = GridBox::uniform(vec![0.0, 0.0], 2.0, 0.01);
            let hi = first_dim_count(&gbox)?;
            let rep = brute_force_global_range(&grid, &gbox, 1e-6, 0, hi)?;
            let pt = rep.grid_point().unwrap_or(&[]).to_vec();
            let ok = rep.status == SolveStatus::Optimal
                && pt.len() == 2
                && (pt[0] - 0.5).abs() <= 1e-9
                && (pt[1] - 0.5).abs() <= 1e-9;
            push(
                "global minimizer (1/2, 1/2)",
                ok,
                format!("grid minimizer {pt:?}, value {:.6}", rep.value),
            );

            let reform = build_reformulation(&bp, kind)?;
            let (local_pt, bad_pt): (Vec<f64>, Vec<f64>) = if kind == ReformKind::Ld {
                (vec![0.0, 1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0, 0.0])
            } else {
                (vec![0.0, 1.0, 1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0, 1.0, 0.0])
            };
            let (v, _) = local_scan(&reform, &local_pt, tols.radius, tols.step)?;
            push(
                "artificial point is a local minimizer at resolution",
                v == LocalVerdict::NoBetterPointAtResolution,
                format!("{v:?} at {local_pt:?}"),
            );
            let (v, witness) = local_scan(&reform, &bad_pt, tols.radius, tols.step)?;
            let detail = match &witness {
                Some((w, d)) => format!("witness {w:?} improves by {d:.4e}"),
                None => "no witness".into(),
            };
            push(
                "same labels with the other multiplier vertex admit a descent witness",
                v == LocalVerdict::Counterexample,
                detail,
            );

            let fk = match kind {
                ReformKind::Ld => FiberKind::Ell,
                ReformKind::Wd => FiberKind::W,
                _ => FiberKind::Mw,
            };
            let fiber = enumerate_k(&bp, fk, &[0.0], &[1.0], 6)?;
            let want: Vec<Vec<f64>> = if kind == ReformKind::Ld {
                vec![vec![0.0, 1.0], vec![1.0, 0.0]]
            } else {
                vec![vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]]
            };
            push(
                "fiber vertices at (0, 1)",
                fiber.vertices == want,
                format!("vertices {:?}, rays {:?}, free {:?}", fiber.vertices, fiber.rays, fiber.lineality.len()),
            );

            if kind == ReformKind::Ld {
                let pt = Point::new(reform.nlp.space.clone(), local_pt.clone())?;
                let rep = check_nsmfcq_ld(&reform, &pt, tols.tol.max(1e-9))?;
                push(
                    "nonsmooth MFCQ violated",
                    rep.verdict == CqVerdict::Violated,
                    rep.note,
                );
            } else {
                let pt = Point::new(reform.nlp.space.clone(), local_pt.clone())?;
                let rep = check_mfcq_reform(&reform, &pt, tols.tol_act, tols.tol.max(1e-9))?;
                push("MFCQ violated", rep.verdict == CqVerdict::Violated, rep.note);
            }
        }
        "bcq-holds" => {
            let bp = builtin::running_example();
            let ld = build_reformulation(&bp, ReformKind::Ld)?;
            let pts = [
                vec![0.0, 1.0, 0.0, 1.0],
                vec![0.0, 1.0, 1.0, 0.0],
                vec![0.0, 1.0, 0.5, 0.5],
                vec![0.5, 0.5, 1.0, 0.0],
            ];
            let mut all = true;
            for flat in &pts {
                let pt = Point::new(ld.nlp.space.clone(), flat.clone())?;
                let rep = check_bcq_closed_form(&ld, &pt, tols.tol.max(1e-9))?;
                all &= rep.verdict == CqVerdict::Holds;
            }
            push(
                "cone qualification holds at every sampled feasible point",
                all,
                format!("{} points checked", pts.len()),
            );
            let pt = Point::new(ld.nlp.space.clone(), pts[0].clone())?;
            let rep = check_nsmfcq_ld(&ld, &pt, tols.tol.max(1e-9))?;
            push(
                "nonsmooth MFCQ still violated",
                rep.verdict == CqVerdict::Violated,
                rep.note,
            );
        }
        "bcq-fails" => {
            let bp = builtin::bcq_fails_example();
            let ld = build_reformulation(&bp, ReformKind::Ld)?;
            let flat = vec![0.0, 0.0, 1.0, 0.0, 0.0];
            let pt = Point::new(ld.nlp.space.clone(), flat)?;
            let rep = check_bcq_closed_form(&ld, &pt, tols.tol.max(1e-9))?;
            let eta_norm = match &rep.certificate {
                CqCertificate::ConeElement(eta) => {
                    eta.iter().map(|v| v * v).sum::<f64>().sqrt()
                }
                _ => 0.0,
            };
            push(
                "cone qualification violated with a nonzero certificate",
                rep.verdict == CqVerdict::Violated && eta_norm > 1e-6,
                format!("certificate norm {eta_norm:.3e}"),
            );
            let rep = check_nsmfcq_ld(&ld, &pt, tols.tol.max(1e-9))?;
            push(
                "nonsmooth MFCQ violated",
                rep.verdict == CqVerdict::Violated,
                rep.note,
            );
        }
        "wolfe-counterexample" => {
            let nlp = builtin::wolfe_counterexample_lower(8.0)?;
            let dual = bilevel_core::duality::build_wolfe_dual_unchecked(&nlp)?;
            let dpt = Point::new(dual.space.clone(), vec![-3.0, 0.1, 3.7])?;
            let res = dual.max_violation(&dpt)?;
            push(
                "dual point (-3, (0.1, 3.7)) is Wolfe-dual feasible",
                res <= 1e-12,
                format!("constraint residual {res:.3e}"),
            );
            let primal = Point::new(nlp.space.clone(), vec![0.0])?;
            let rep = check_weak_duality(
                &nlp,
                &primal,
                &DualPoint::PrimalDual { w: vec![-3.0], v: vec![0.1, 3.7] },
                DualKind::Wolfe,
                tols.tol.max(1e-9),
            )?;
            push(
                "dual value 4.6 exceeds the primal optimum 0",
                (rep.dual_value - 4.6).abs() <= 1e-12 && rep.primal_value.abs() <= 1e-12,
                format!("primal {:.6}, dual {:.6}", rep.primal_value, rep.dual_value),
            );
            push(
                "weak Wolfe duality flagged as failing",
                !rep.weak_duality_ok,
                format!("gap {:.6}", rep.gap),
            );
        }
        other => {
            return Err(Error::InvalidInput(format!(
                "unknown example `{other}` (expected one of {:?})",
                builtin::EXAMPLE_NAMES
            )))
        }
    }
    Ok(out)
}

pub fn cmd_examples(name: &str, tols: Tolerances) -> Result<Outcome> {
    let assertions = example_assertions(name, tols)?;
    let all_pass = assertions.iter().all(|a| a.pass);
    let command = Json::obj(vec![
        ("name", Json::Str("examples".into())),
        ("example", Json::Str(name.to_string())),
    ]);
    let result = Json::obj(vec![
        ("assertions", Json::Arr(assertions.iter().map(assertion_json).collect())),
        ("all_pass", Json::Bool(all_pass)),
    ]);
    let digest = fnv1a_hex(name);
    let mut text = format!("example {name}\n");
    for a in &assertions {
        text.push_str(&format!(
            "  [{}] {} ({})\n",
            if a.pass { "pass" } else { "FAIL" },
            a.name,
            a.detail
        ));
    }
    Ok(Outcome {
        report: envelope(command, &digest, tols, result),
        text: Some(text),
        exit: if all_pass { 0 } else { 1 },
    })
}

// ---------------------------------------------------------------------- check

pub struct CheckArgs<'a> {
    pub what: &'a str,
    pub kind: Option<&'a str>,
    pub point: Option<Vec<f64>>,
    pub workers: usize,
    pub samples: usize,
}

fn need_point(args: &CheckArgs, len: usize) -> Result<Vec<f64>> {
    let p = args
        .point
        .clone()
        .ok_or_else(|| Error::InvalidInput("this check needs --point".into()))?;
    if p.len() != len {
        return Err(Error::DimensionMismatch { expected: len, got: p.len() });
    }
    Ok(p)
}

fn reform_kind(args: &CheckArgs) -> Result<ReformKind> {
    ReformKind::parse(
        args.kind
            .ok_or_else(|| Error::InvalidInput("this check needs --kind".into()))?,
    )
}

fn split3(p: &[f64], n: usize, m: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    (p[..n].to_vec(), p[n..n + m].to_vec(), p[n + m..].to_vec())
}

pub fn cmd_check(pf: &ProblemFile, args: &CheckArgs, tols: Tolerances) -> Result<Outcome> {
    let bp = &pf.bp;
    let n = bp.dims.n;
    let m = bp.dims.m;
    let p = bp.dims.p;
    let digest = fnv1a_hex(&pf.canonical);
    let command = Json::obj(vec![
        ("name", Json::Str("check".into())),
        ("what", Json::Str(args.what.to_string())),
        (
            "kind",
            args.kind.map_or(Json::Null, |k| Json::Str(k.to_string())),
        ),
        (
            "point",
            args.point.as_ref().map_or(Json::Null, |pt| Json::floats(pt)),
        ),
        ("file", Json::Str(pf.name.clone())),
        ("workers", Json::Int(args.workers as i64)),
    ]);
    let wrap = |result: Json, exit: i32| -> Outcome {
        Outcome { report: envelope(command.clone(), &digest, tols, result), text: None, exit }
    };

    match args.what {
        "weak-duality" => {
            let kind = reform_kind(args)?;
            let dk = match kind {
                ReformKind::Ld => DualKind::Lagrange,
                ReformKind::Wd => DualKind::Wolfe,
                ReformKind::Mwd => DualKind::MondWeir,
                other => {
                    return Err(Error::InvalidInput(format!(
                        "weak-duality needs --kind ld|wd|mwd, got {}",
                        other.name()
                    )))
                }
            };
            let len = if dk == DualKind::Lagrange { n + m + p } else { n + 2 * m + p };
            let pt = need_point(args, len)?;
            let (x, y, rest) = split3(&pt, n, m);
            let low = bp.lower_level_at(&x)?;
            let primal = Point::new(low.space.clone(), y)?;
            let dual = if dk == DualKind::Lagrange {
                DualPoint::Multiplier(rest)
            } else {
                DualPoint::PrimalDual { w: rest[..m].to_vec(), v: rest[m..].to_vec() }
            };
            let rep = check_weak_duality(&low, &primal, &dual, dk, tols.tol)?;
            let result = Json::obj(vec![
                ("dual_kind", Json::Str(dk.name().into())),
                ("primal_value", Json::Num(rep.primal_value)),
                ("dual_value", Json::Num(rep.dual_value)),
                ("gap", Json::Num(rep.gap)),
                ("weak_duality_ok", Json::Bool(rep.weak_duality_ok)),
                ("convexity_certified", Json::Bool(rep.convexity_certified)),
            ]);
            Ok(wrap(result, if rep.weak_duality_ok { 0 } else { 1 }))
        }
        "strong-duality" => {
            let kind = reform_kind(args)?;
            let x = need_point(args, n)?;
            let low = bp.lower_level_at(&x)?;
            let start = Point::zeros(low.space.clone());
            let rep = solve_convex(&low, &start, tols.tol.max(1e-10), 300)?;
            if rep.status != SolveStatus::Optimal {
                return Err(Error::InvalidInput(format!(
                    "lower level did not solve to optimality ({:?})",
                    rep.status
                )));
            }
            let w_star = rep.point.as_ref().unwrap();
            let v_star = rep
                .multipliers
                .clone()
                .ok_or_else(|| Error::Internal("no multipliers at the optimum".into()))?;
            let gap = match kind {
                ReformKind::Ld => {
                    let (phi, _) = lagrange_value_fn(&low, &v_star, tols.tol)?;
                    rep.value - phi.as_f64()
                }
                ReformKind::Wd | ReformKind::Mwd => {
                    let dk = if kind == ReformKind::Wd { DualKind::Wolfe } else { DualKind::MondWeir };
                    let drep = check_weak_duality(
                        &low,
                        w_star,
                        &DualPoint::PrimalDual {
                            w: w_star.values().to_vec(),
                            v: v_star.clone(),
                        },
                        dk,
                        tols.tol.max(1e-6),
                    )?;
                    drep.gap
                }
                other => {
                    return Err(Error::InvalidInput(format!(
                        "strong-duality needs --kind ld|wd|mwd, got {}",
                        other.name()
                    )))
                }
            };
            let ok = gap.abs() <= tols.tol.max(1e-6);
            let result = Json::obj(vec![
                ("primal_value", Json::Num(rep.value)),
                ("gap", Json::Num(gap)),
                ("multiplier", Json::floats(&v_star)),
                ("strong_duality_ok", Json::Bool(ok)),
            ]);
            Ok(wrap(result, if ok { 0 } else { 1 }))
        }
        "saddle" => {
            let pt = need_point(args, n + m + p)?;
            let (x, y, v) = split3(&pt, n, m);
            let low = bp.lower_level_at(&x)?;
            let w = Point::new(low.space.clone(), y)?;
            let (ok, res) = check_saddle_point(&low, &w, &v, tols.tol)?;
            let result = Json::obj(vec![
                ("is_saddle_point", Json::Bool(ok)),
                ("kkt_residual", Json::Num(res)),
            ]);
            Ok(wrap(result, if ok { 0 } else { 1 }))
        }
        "mfcq" => {
            let kind = reform_kind(args)?;
            let reform = build_reformulation(bp, kind)?;
            let total = reform.nlp.space.total_dim();
            let pt = need_point(args, total)?;
            let point = Point::new(reform.nlp.space.clone(), pt)?;
            let rep = check_mfcq_reform(&reform, &point, tols.tol_act, tols.tol.max(1e-9))?;
            Ok(wrap(cq_to_json(&rep), verdict_exit(rep.verdict)))
        }
        "nsmfcq" | "bcq" => {
            if let Some(k) = args.kind {
                if k != "ld" {
                    return Err(Error::InvalidInput(format!(
                        "{} applies to the Lagrange-dual reformulation (--kind ld), got {k}",
                        args.what
                    )));
                }
            }
            let reform = build_reformulation(bp, ReformKind::Ld)?;
            let pt = need_point(args, n + m + p)?;
            let point = Point::new(reform.nlp.space.clone(), pt)?;
            let rep = if args.what == "bcq" {
                check_bcq_closed_form(&reform, &point, tols.tol.max(1e-9))?
            } else {
                check_nsmfcq_ld(&reform, &point, tols.tol.max(1e-9))?
            };
            Ok(wrap(cq_to_json(&rep), verdict_exit(rep.verdict)))
        }
        "slater" => {
            let x = need_point(args, n)?;
            let low = bp.lower_level_at(&x)?;
            let rep = check_slater(&low.inequalities, tols.tol.max(1e-9))?;
            Ok(wrap(cq_to_json(&rep), verdict_exit(rep.verdict)))
        }
        "ge-feasible" => {
            let pt = need_point(args, n + m)?;
            let (x, y, _) = split3(&pt, n, m);
            let ok = ge_ref_feasibility(bp, &x, &y, tols.tol.max(1e-9))?;
            let result = Json::obj(vec![("stationary", Json::Bool(ok))]);
            Ok(wrap(result, if ok { 0 } else { 1 }))
        }
        "enumerate-K" => {
            let kind = reform_kind(args)?;
            let fk = match kind {
                ReformKind::Ld => FiberKind::Ell,
                ReformKind::Wd => FiberKind::W,
                ReformKind::Mwd => FiberKind::Mw,
                other => {
                    return Err(Error::InvalidInput(format!(
                        "enumerate-K needs --kind ld|wd|mwd, got {}",
                        other.name()
                    )))
                }
            };
            let pt = need_point(args, n + m)?;
            let (x, y, _) = split3(&pt, n, m);
            let fiber = enumerate_k(bp, fk, &x, &y, 8)?;
            let result = Json::obj(vec![
                ("fiber", Json::Str(fk.name().into())),
                (
                    "vertices",
                    Json::Arr(fiber.vertices.iter().map(|v| Json::floats(v)).collect()),
                ),
                ("rays", Json::Arr(fiber.rays.iter().map(|v| Json::floats(v)).collect())),
                (
                    "free_directions",
                    Json::Arr(fiber.lineality.iter().map(|v| Json::floats(v)).collect()),
                ),
                ("anchored", Json::Bool(fiber.anchored)),
                ("note", Json::Str(fiber.note.clone())),
            ]);
            Ok(wrap(result, 0))
        }
        "local" => {
            let cert = if matches!(args.kind, None | Some("obop")) {
                let total = n + m;
                let at = need_point(args, total)?;
                let radii = vec![tols.radius; total];
                let steps = vec![tols.step; total];
                let grid = BilevelGrid::new(bp);
                local_min_certificate(&grid, &at, &radii, &steps, 1e-9, tols.tol_act)?
            } else {
                let kind = reform_kind(args)?;
                let reform = build_reformulation(bp, kind)?;
                let total = reform.nlp.space.total_dim();
                let at = need_point(args, total)?;
                let radii = vec![tols.radius; total];
                let mut steps = vec![tols.step; total];
                for s in steps.iter_mut().skip(n + m) {
                    *s = tols.radius / 2.0;
                }
                let grid = ReformGrid::new(&reform);
                local_min_certificate(&grid, &at, &radii, &steps, 1e-9, tols.tol_act)?
            };
            let result = Json::obj(vec![
                (
                    "verdict",
                    Json::Str(
                        match cert.verdict {
                            LocalVerdict::NoBetterPointAtResolution => {
                                "no_better_point_at_resolution"
                            }
                            LocalVerdict::Counterexample => "counterexample",
                        }
                        .into(),
                    ),
                ),
                (
                    "witness",
                    cert.witness.as_ref().map_or(Json::Null, |(w, d)| {
                        Json::obj(vec![
                            ("point", Json::floats(w)),
                            ("objective_drop", Json::Num(*d)),
                        ])
                    }),
                ),
                ("radius", Json::floats(&cert.radius)),
                ("step", Json::floats(&cert.step)),
            ]);
            let exit = match cert.verdict {
                LocalVerdict::NoBetterPointAtResolution => 0,
                LocalVerdict::Counterexample => 1,
            };
            Ok(wrap(result, exit))
        }
        "global" => {
            let center = args.point.clone();
            let (rep, dims_used) = match args.kind {
                None | Some("obop") => {
                    let total = n + m;
                    let c = center.unwrap_or_else(|| vec![0.0; total]);
                    if c.len() != total {
                        return Err(Error::DimensionMismatch { expected: total, got: c.len() });
                    }
                    let gbox = GridBox::uniform(c, tols.radius, tols.step);
                    (scan_obop(bp, &gbox, tols.tol_act, args.workers)?, total)
                }
                Some(k) => {
                    let kind = ReformKind::parse(k)?;
                    let reform = build_reformulation(bp, kind)?;
                    let total = reform.nlp.space.total_dim();
                    let c = center.unwrap_or_else(|| vec![0.0; total]);
                    if c.len() != total {
                        return Err(Error::DimensionMismatch { expected: total, got: c.len() });
                    }
                    let gbox = GridBox::uniform(c, tols.radius, tols.step);
                    (scan_reform(&reform, &gbox, tols.tol_act, args.workers)?, total)
                }
            };
            let _ = dims_used;
            let found = rep.status == SolveStatus::Optimal;
            let result = Json::obj(vec![
                (
                    "status",
                    Json::Str(if found { "optimal" } else { "infeasible" }.into()),
                ),
                (
                    "point",
                    rep.grid_point().map_or(Json::Null, Json::floats),
                ),
                ("value", Json::Num(rep.value)),
            ]);
            Ok(wrap(result, if found { 0 } else { 1 }))
        }
        "probe-isc" => {
            let kind = reform_kind(args)?;
            let fk = match kind {
                ReformKind::Ld => FiberKind::Ell,
                ReformKind::Wd => FiberKind::W,
                ReformKind::Mwd => FiberKind::Mw,
                other => {
                    return Err(Error::InvalidInput(format!(
                        "probe-isc needs --kind ld|wd|mwd, got {}",
                        other.name()
                    )))
                }
            };
            let pt = need_point(args, n + m)?;
            let (x, y, _) = split3(&pt, n, m);
            let rep = inner_semicompactness_probe(bp, fk, &x, &y, tols.radius, args.samples)?;
            let records: Vec<Json> = rep
                .records
                .iter()
                .map(|r| {
                    Json::obj(vec![
                        ("x", Json::floats(&r.x)),
                        ("max_vertex_norm", Json::Num(r.max_vertex_norm)),
                        ("has_rays", Json::Bool(r.has_rays)),
                        ("has_free_directions", Json::Bool(r.has_free_directions)),
                    ])
                })
                .collect();
            let bounded = rep.verdict == ProbeVerdict::BoundedEvidence;
            let result = Json::obj(vec![
                (
                    "verdict",
                    Json::Str(
                        if bounded { "bounded_evidence" } else { "unbounded_evidence" }.into(),
                    ),
                ),
                ("records", Json::Arr(records)),
                ("note", Json::Str(rep.note.clone())),
            ]);
            Ok(wrap(result, if bounded { 0 } else { 1 }))
        }
        other => Err(Error::InvalidInput(format!(
            "unknown check `{other}` (expected weak-duality|strong-duality|saddle|mfcq|nsmfcq|\
             bcq|slater|local|global|enumerate-K|ge-feasible|probe-isc)"
        ))),
    }
}

fn merge_reports(
    a: bilevel_core::model::SolveReport,
    b: bilevel_core::model::SolveReport,
) -> bilevel_core::model::SolveReport {
    use bilevel_core::model::SolveStatus::*;
    match (a.status, b.status) {
        (Optimal, Optimal) => {
            let pa = a.grid_point().unwrap();
            let pb = b.grid_point().unwrap();
            if (b.value, pb) < (a.value, pa) {
                b
            } else {
                a
            }
        }
        (Optimal, _) => a,
        (_, Optimal) => b,
        _ => a,
    }
}

fn chunk_ranges(total: usize, workers: usize) -> Vec<(usize, usize)> {
    let w = workers.max(1).min(total.max(1));
    let chunk = total.div_ceil(w);
    (0..w)
        .map(|i| (i * chunk, ((i + 1) * chunk).min(total)))
        .filter(|(lo, hi)| lo < hi)
        .collect()
}

fn scan_obop(
    bp: &Arc<BilevelProblem>,
    gbox: &GridBox,
    tol: f64,
    workers: usize,
) -> Result<bilevel_core::model::SolveReport> {
    let total = first_dim_count(gbox)?;
    if workers <= 1 {
        let grid = BilevelGrid::new(bp);
        return brute_force_global_range(&grid, gbox, tol, 0, total);
    }
    let ranges = chunk_ranges(total, workers);
    std::thread::scope(|s| {
        let mut handles = Vec::new();
        for (lo, hi) in ranges {
            handles.push(s.spawn(move || {
                let grid = BilevelGrid::new(bp);
                brute_force_global_range(&grid, gbox, tol, lo, hi)
            }));
        }
        let mut merged: Option<bilevel_core::model::SolveReport> = None;
        for h in handles {
            let r = h.join().map_err(|_| Error::Internal("worker panicked".into()))??;
            merged = Some(match merged {
                None => r,
                Some(acc) => merge_reports(acc, r),
            });
        }
        merged.ok_or_else(|| Error::Internal("no scan ranges".into()))
    })
}

fn scan_reform(
    reform: &ReformulatedNlp,
    gbox: &GridBox,
    tol: f64,
    workers: usize,
) -> Result<bilevel_core::model::SolveReport> {
    let total = first_dim_count(gbox)?;
    if workers <= 1 {
        let grid = ReformGrid::new(reform);
        return brute_force_global_range(&grid, gbox, tol, 0, total);
    }
    let ranges = chunk_ranges(total, workers);
    std::thread::scope(|s| {
        let mut handles = Vec::new();
        for (lo, hi) in ranges {
            handles.push(s.spawn(move || {
                let grid = ReformGrid::new(reform);
                brute_force_global_range(&grid, gbox, tol, lo, hi)
            }));
        }
        let mut merged: Option<bilevel_core::model::SolveReport> = None;
        for h in handles {
            let r = h.join().map_err(|_| Error::Internal("worker panicked".into()))??;
            merged = Some(match merged {
                None => r,
                Some(acc) => merge_reports(acc, r),
            });
        }
        merged.ok_or_else(|| Error::Internal("no scan ranges".into()))
    })
}
