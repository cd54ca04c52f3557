"""Quick invariant suite run by ``dcproxy selftest`` on the bundled case14."""
from __future__ import annotations

import json
import time

import numpy as np

from . import autodiff as ad
from .certify import certify
from .completion import ALL_CONFIGS, CompletionConfig, complete, omega_from_polar, random_independent, repair_omega_rect
from .formulation import DualSolution, InstanceLoads, dual_objective, dual_residuals
from .grid import DATA_DIR, complex_branch_flows, load_case
from .proxy import ArchConfig, init_proxy, param_function, proxy_bound


def _fixture():
    with open(DATA_DIR / "case14_fixture.json") as fh:
        return json.load(fh)


def check_feasibility(case, n=200, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for cfg in ALL_CONFIGS:
        y = complete(case, random_independent(case, cfg, rng, n), cfg)
        worst = max(worst, dual_residuals(case, y).max_violation)
    return worst <= 1e-9, f"max dual residual {worst:.2e} over {n} x {len(ALL_CONFIGS)} completions"


def check_constants(case, n=20, seed=0):
    rng = np.random.default_rng(seed)
    k, worst = case.constants, 0.0
    for _ in range(n):
        vm = rng.uniform(0.9, 1.1, (2, case.n_branch))
        va = rng.uniform(-0.5, 0.5, (2, case.n_branch))
        vf, vt = vm[0] * np.exp(1j * va[0]), vm[1] * np.exp(1j * va[1])
        w = vf * np.conj(vt)
        got = np.array([k.pf_w * abs(vf)**2 + k.pf_r * w.real + k.pf_i * w.imag,
                        k.qf_w * abs(vf)**2 + k.qf_r * w.real + k.qf_i * w.imag,
                        k.pt_w * abs(vt)**2 + k.pt_r * w.real + k.pt_i * w.imag,
                        k.qt_w * abs(vt)**2 + k.qt_r * w.real + k.qt_i * w.imag])
        ref = np.array(complex_branch_flows(case, vf, vt))
        worst = max(worst, float(np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1.0))))
    return worst <= 1e-10, f"max relative flow mismatch {worst:.2e}"


def check_weak_duality(case, n=200, seed=0):
    fx = _fixture()
    loads = InstanceLoads.from_json_dict(fx["loads"])
    rng = np.random.default_rng(seed)
    top = -np.inf
    for cfg in ALL_CONFIGS:
        y = complete(case, random_independent(case, cfg, rng, n, scale=1000.0), cfg)
        top = max(top, float(np.max(dual_objective(case, loads, y))))
    ok = top <= fx["primal_objective"] + 1e-6
    return ok, f"largest bound {top:.4f} vs primal optimum {fx['primal_objective']:.4f}"


def check_omega(n=100000, seed=0):
    rng = np.random.default_rng(seed)
    f, t = rng.exponential(10, n), rng.exponential(10, n)
    k = rng.exponential(100, n)
    a, b = repair_omega_rect(f, t, k)
    e1 = np.max(np.abs(2 * a * b - k) / (1 + k))
    lo, hi = CompletionConfig().phi_bounds
    a, b = omega_from_polar(rng.uniform(lo, hi, n), k)
    e2 = np.max(np.abs(2 * a * b - k) / (1 + k))
    return max(e1, e2) <= 1e-10, f"boundary error rect {e1:.1e} polar {e2:.1e}"


def check_gradient(case, seed=0):
    p = init_proxy(case, ArchConfig(seed=seed))
    loads = InstanceLoads.nominal(case)
    rep = ad.gradcheck(param_function(p, case, loads), p.flat(), n_coords=16, seed=seed)
    ok = rep.max_rel_err <= 1e-5 and rep.kink_fraction <= 0.05
    return ok, f"max rel err {rep.max_rel_err:.1e}, kinks {int(rep.kink.sum())}/16"


def check_certify(case):
    fx = _fixture()
    loads = InstanceLoads.from_json_dict(fx["loads"])
    res = certify(case, loads, DualSolution.from_json_dict(fx["dual"]))
    rel = abs(res.bound - fx["dual_objective"]) / abs(fx["dual_objective"])
    return rel <= 1e-6 and res.post.max_violation <= 1e-9, f"round-trip relative change {rel:.1e}"


def check_proxy(case):
    p = init_proxy(case)
    y, z = proxy_bound(p, case, InstanceLoads.nominal(case))
    r = dual_residuals(case, y).max_violation
    return bool(np.all(np.isfinite(z))) and r <= 1e-9, f"untrained bound {float(z[0]):.3f}, residual {r:.1e}"


CHECKS = {
    "completion_feasibility": check_feasibility,
    "branch_constants": check_constants,
    "weak_duality": check_weak_duality,
    "omega_boundary": lambda case: check_omega(),
    "gradient": check_gradient,
    "certify_roundtrip": check_certify,
    "proxy_feasibility": check_proxy,
}


def run_selftest(out=print):
    case = load_case("case14")
    results = {}
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        try:
            ok, detail = fn(case)
        except Exception as exc:  # report, keep going
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results[name] = {"passed": bool(ok), "detail": detail, "seconds": time.perf_counter() - t0}
        out(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return results
