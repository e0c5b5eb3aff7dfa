#!/usr/bin/env python3
"""Smoke test for the bilevel_duality extension module.

Builds nothing itself: it locates the compiled cdylib under target/
(release preferred), stages it under an importable name, and drives the
main types end to end on the worked instances.

    cargo build -p bilevel-py --release
    python3 python/smoke_test.py
"""

import math
import pathlib
import shutil
import sys
import tempfile


def stage_module() -> None:
    root = pathlib.Path(__file__).resolve().parent.parent
    candidates = [
        root / "target" / profile / name
        for profile in ("release", "debug")
        for name in ("libbilevel_duality.so", "bilevel_duality.so", "libbilevel_duality.dylib")
    ]
    lib = next((p for p in candidates if p.exists()), None)
    if lib is None:
        sys.exit("build the extension first: cargo build -p bilevel-py [--release]")
    stage = pathlib.Path(tempfile.mkdtemp(prefix="bilevel_duality_"))
    shutil.copy2(lib, stage / "bilevel_duality.so")
    sys.path.insert(0, str(stage))


stage_module()

import bilevel_duality as bd  # noqa: E402

checks = 0


def check(cond: bool, label: str) -> None:
    global checks
    if not cond:
        sys.exit(f"FAIL: {label}")
    checks += 1
    print(f"  ok: {label}")


print(f"bilevel_duality {bd.__version__}")

# expressions: parse, evaluate, differentiate
e = bd.Expression(
    "(+ (pow (+ (var x 0) (const -1)) 2) (pow (+ (var y 0) (const -1)) 2))",
    [("x", 1), ("y", 1)],
)
check(e.eval([0.0, 1.0]) == 1.0, "expression evaluation")
check(e.grad("x", [0.0, 1.0]) == [-2.0], "symbolic gradient")
check(e.hessian("x", "x", [0.3, 0.7]) == [[2.0]], "symbolic Hessian")

cubic = bd.Expression("(pow (var y 0) 3)", [("y", 1)])
check(cubic.grad("y", [-3.0]) == [27.0], "cubic derivative")

# the linear-lower-level worked instance
prob = bd.Problem.builtin("running")
check(prob.dims() == (1, 1, 2, 0), "dimensions")
check(prob.lower_convex_in_y(), "lower level certified convex in y")
check(abs(prob.value_function([0.5]) + 0.5) < 1e-8, "value function at 1/2")
check(abs(prob.value_function([0.0]) + 1.0) < 1e-8, "value function at 0")
check(prob.solution_membership([0.0], [1.0]), "membership of the optimal response")
check(not prob.solution_membership([0.0], [0.0]), "non-optimal response rejected")

verts, rays = prob.multiplier_vertices([0.0], [1.0])
check(sorted(verts) == [[0.0, 1.0], [1.0, 0.0]], "multiplier-set vertices")
check(rays == [], "multiplier set bounded")

check(prob.counts("kkt") == (4, 2, 6), "KKT counts")
check(prob.counts("ld") == (4, 2, 5), "Lagrange-dual counts")
check(prob.counts("mwd") == (5, 3, 7), "Mond-Weir counts")

ld = prob.reformulate("ld")
check(ld.closed_form(), "closed-form Lagrange-dual emission")
check(len(ld.inequalities()) == 5 and len(ld.equalities()) == 1, "emitted rows")
check(ld.is_feasible([0.0, 1.0, 0.0, 1.0]), "artificial point feasible")
check(not ld.is_feasible([0.0, 0.0, 0.5, 0.5]), "suboptimal response infeasible")

verdict, _, _ = ld.local_certificate([0.0, 1.0, 0.0, 1.0], radius=0.1, step=0.01)
check(verdict == "no_better_point_at_resolution", "artificial local minimizer")
verdict, witness, drop = ld.local_certificate([0.0, 1.0, 1.0, 0.0], radius=0.1, step=0.01)
check(verdict == "counterexample" and drop > 1e-3, "descent witness at the other vertex")
check(witness[0] > 0 and witness[1] < 1, "witness moves along (eps, 1 - eps)")

wd = prob.reformulate("wd")
check(wd.z_eliminated(), "Wolfe emission drops the primal copy")
verdict, residual = wd.mfcq([0.0, 1.0, 1.0, 0.0, 1.0])
check(verdict == "violated" and residual < 1e-9, "MFCQ violated on the Wolfe reformulation")

verdict, cert = ld.bcq([0.0, 1.0, 0.0, 1.0])
check(verdict == "holds", "cone qualification holds on the running instance")
check(ld.nsmfcq([0.0, 1.0, 0.0, 1.0]) == "violated", "nonsmooth MFCQ violated")

# fibers of the intermediate mappings
verts, rays, free, anchored = prob.enumerate_k("ld", [0.0], [1.0])
check(sorted(verts) == [[0.0, 1.0], [1.0, 0.0]], "Lagrange fiber vertices")
verts, rays, free, anchored = prob.enumerate_k("wd", [0.0], [1.0])
check(len(free) == 1 and anchored, "Wolfe fiber has a free primal copy")
verts, rays, free, anchored = prob.enumerate_k("mwd", [0.0], [1.0])
check(sorted(verts) == [[1.0, 0.0, 1.0], [1.0, 1.0, 0.0]], "Mond-Weir fiber pinned")

# grid-global scan agrees with the known minimizer
best = prob.global_scan([0.0, 0.0], 2.0, 0.01)
check(best is not None and abs(best[1] - 0.5) < 1e-9, "grid-global value 1/2")
check(best[0] == [0.5, 0.5], "grid-global minimizer (1/2, 1/2)")

# the published weak-duality counterexample
cubic_prob = bd.Problem.builtin("wolfe-counterexample")
check(not cubic_prob.lower_convex_in_y(), "cubic instance not certified convex")
primal, dual, gap, ok = cubic_prob.weak_duality("wd", [8.0], [0.0], [-3.0, 0.1, 3.7])
check(abs(dual - 4.6) < 1e-12 and primal == 0.0, "dual value 4.6 against primal 0")
check(not ok, "weak Wolfe duality fails")

# the qualification-failure instance
bf = bd.Problem.builtin("bcq-fails")
ld2 = bf.reformulate("ld")
verdict, eta = ld2.bcq([0.0, 0.0, 1.0, 0.0, 0.0])
check(verdict == "violated", "cone qualification fails")
check(eta is not None and math.sqrt(sum(v * v for v in eta)) > 1e-6, "nonzero certificate")

check(bf.slater([0.0]) == "holds", "Slater point for the failing instance's lower level")
check(prob.ge_feasible([0.0], [1.0]), "stationarity membership at the optimum")
check(not prob.ge_feasible([0.0], [0.0]), "stationarity rejected off the optimum")

print(f"smoke test passed ({checks} checks)")
