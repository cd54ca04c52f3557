"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line."""
import json
import math
import time

import numpy as np
import pytest

from dcproxy import autodiff as ad
from dcproxy.certify import certify
from dcproxy.cli import main as cli_main
from dcproxy.completion import (ALL_CONFIGS, CompletionConfig, complete, omega_from_polar,
                                random_independent, recover_bound_duals, repair_omega_rect)
from dcproxy.formulation import (DualSolution, InstanceLoads, dual_objective, dual_residuals,
                                 optimality_gap, w_stationarity_sum)
from dcproxy.grid import DATA_DIR, complex_branch_flows, load_case
from dcproxy.proxy import ArchConfig, init_proxy, param_function, proxy_bound
from dcproxy.training import (SamplerConfig, TrainConfig, dual_ascent, evaluate,
                              sample_instances, split_dataset, train)


@pytest.fixture
def verdict(capsys):
    def emit(num, name, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance {num:>2}] {'PASS' if ok else 'FAIL'}  {name}: {detail}")
        assert ok, detail
    return emit


@pytest.fixture(scope="module")
def nominal(fixture14, case14):
    loads = InstanceLoads.from_json_dict(fixture14["loads"])
    assert np.allclose(loads.pd, case14.pd) and np.allclose(loads.qd, case14.qd)
    return loads


def test_01_completion_feasibility(case14, verdict):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for cfg in ALL_CONFIGS:
        y = complete(case14, random_independent(case14, cfg, rng, 1000), cfg)
        worst = max(worst, dual_residuals(case14, y).max_violation)
    dt = time.perf_counter() - t0
    verdict(1, "completion feasibility", worst <= 1e-9 and dt <= 5.0,
            f"max residual {worst:.2e} over 4 x 1000 completions in {dt:.2f} s")


def test_02_branch_constants_oracle(verdict):
    rng = np.random.default_rng(102)
    worst = 0.0
    for name in ("case14", "case118"):
        case = load_case(name)
        k = case.constants
        for _ in range(100):
            vm = rng.uniform(0.9, 1.1, (2, case.n_branch))
            va = rng.uniform(-math.pi / 3, math.pi / 3, (2, case.n_branch))
            vf, vt = vm[0] * np.exp(1j * va[0]), vm[1] * np.exp(1j * va[1])
            w = vf * np.conj(vt)
            got = np.array([k.pf_w * abs(vf)**2 + k.pf_r * w.real + k.pf_i * w.imag,
                            k.qf_w * abs(vf)**2 + k.qf_r * w.real + k.qf_i * w.imag,
                            k.pt_w * abs(vt)**2 + k.pt_r * w.real + k.pt_i * w.imag,
                            k.qt_w * abs(vt)**2 + k.qt_r * w.real + k.qt_i * w.imag])
            ref = np.array(complex_branch_flows(case, vf, vt))
            worst = max(worst, float(np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1.0))))
    verdict(2, "branch constants vs complex flows", worst <= 1e-10,
            f"max relative mismatch {worst:.2e} (case14, case118; 100 phasor draws)")


def test_03_weak_duality(case14, fixture14, nominal, verdict):
    z_star = fixture14["primal_objective"]
    rng = np.random.default_rng(103)
    top, n = -np.inf, 0
    for cfg in ALL_CONFIGS:
        for scale in (1.0, 100.0, 1000.0):
            y = complete(case14, random_independent(case14, cfg, rng, 1000, scale=scale), cfg)
            top = max(top, float(np.max(dual_objective(case14, nominal, y))))
            n += 1000
        _, z = proxy_bound(init_proxy(case14, config=cfg), case14, nominal)
        top = max(top, float(z[0]))
    asc = dual_ascent(case14, nominal, steps=200)
    fx = certify(case14, nominal, DualSolution.from_json_dict(fixture14["dual"]))
    top = max(top, max(asc.iterates), fx.bound)
    verdict(3, "weak duality", top <= z_star + 1e-6,
            f"largest of {n + 205} bounds {top:.6f} vs primal optimum {z_star:.6f}")


def _perturb(case, y, rng, m):
    """``m`` feasible perturbations of the dependent blocks of one completed ``y``."""
    p = DualSolution(**{k: np.repeat(getattr(y, k), m, axis=0) for k in y.block_names()})

    def draw(shape, on=0.5):
        scale = np.exp(rng.uniform(np.log(1e-3), np.log(1e2), (m, 1)))
        return rng.exponential(1.0, shape) * scale * (rng.random(shape) < on)
    nb, ne = (m, case.n_bus), (m, case.n_branch)
    # paired bound multipliers: raising both keeps stationarity
    for lo, hi, shape in (("mu_pg_lo", "mu_pg_hi", nb), ("mu_qg_lo", "mu_qg_hi", nb)):
        d = draw(shape)
        setattr(p, lo, getattr(p, lo) + d)
        setattr(p, hi, getattr(p, hi) + d)
    # looser cone heads
    p.nu_f_s = p.nu_f_s + draw(ne) * case.limited
    p.nu_t_s = p.nu_t_s + draw(ne) * case.limited
    # moving omega into the cone interior, then re-closing the w row
    p.om_f = p.om_f + draw(ne)
    p.om_t = p.om_t + draw(ne)
    r = w_stationarity_sum(case, p)
    lo, hi = recover_bound_duals(0.0, -r)
    d = draw(nb)
    p.mu_w_lo, p.mu_w_hi = hi + d, lo + d
    return p


def test_04_dominance(case14, nominal, verdict):
    rng = np.random.default_rng(104)
    worst_gain, worst_res, n = -np.inf, 0.0, 0
    for cfg in ALL_CONFIGS:
        for _ in range(25):
            y = complete(case14, random_independent(case14, cfg, rng, 1, scale=10.0), cfg)
            z = float(dual_objective(case14, nominal, y)[0])
            p = _perturb(case14, y, rng, 1000)
            worst_res = max(worst_res, dual_residuals(case14, p).max_violation)
            worst_gain = max(worst_gain, float(np.max(dual_objective(case14, nominal, p))) - z)
            n += 1000
    ok = worst_res <= 1e-9 and worst_gain <= 1e-9
    verdict(4, "completion dominates feasible perturbations", ok,
            f"{n} perturbations of 100 completions: max objective gain {worst_gain:.2e}, "
            f"max perturbed residual {worst_res:.2e}")


def test_05_gradient(case14, nominal, verdict):
    p = init_proxy(case14, ArchConfig(seed=5))
    rep = ad.gradcheck(param_function(p, case14, nominal), p.flat(), h=1e-5, n_coords=64, seed=5)
    ok = rep.max_rel_err <= 1e-5 and rep.kink_fraction <= 0.05
    verdict(5, "gradient vs central differences", ok,
            f"max rel err {rep.max_rel_err:.2e} on {int(rep.smooth.sum())} smooth coords, "
            f"{int(rep.kink.sum())}/64 kinks ({p.n_params} parameters)")


def test_06_omega_boundary(verdict):
    rng = np.random.default_rng(106)
    n = 10**6
    f = np.exp(rng.uniform(-12, 8, n)) * (rng.random(n) < 0.9)
    t = np.exp(rng.uniform(-12, 8, n)) * (rng.random(n) < 0.9)
    k = np.exp(rng.uniform(-20, 16, n)) * (rng.random(n) < 0.99)
    a, b = repair_omega_rect(f, t, k)
    e_rect = float(np.max(np.abs(2 * a * b - k) / (1 + k)))
    lo, hi = CompletionConfig().phi_bounds
    a, b = omega_from_polar(rng.uniform(lo, hi, n), k)
    e_pol = float(np.max(np.abs(2 * a * b - k) / (1 + k)))
    verdict(6, "omega on the cone boundary", max(e_rect, e_pol) <= 1e-10,
            f"max |2ft-k|/(1+k): rectangular {e_rect:.1e}, polar {e_pol:.1e} over 1e6 triples")


EQUALITY_BLOCKS = ("lam_p", "lam_q", "lam_pf", "lam_qf", "lam_pt", "lam_qt",
                   "nu_f_p", "nu_f_q", "nu_t_p", "nu_t_q", "om_re", "om_im",
                   "mu_pg_lo", "mu_pg_hi", "mu_qg_lo", "mu_qg_hi", "mu_w_lo", "mu_w_hi")


def test_07_certifier_repair(case14, fixture14, nominal, verdict):
    rng = np.random.default_rng(107)
    y0 = DualSolution.from_json_dict(fixture14["dual"])
    z_ref = fixture14["dual_objective"]
    worst_post, worst_rel, pre = 0.0, 0.0, []
    for cfg in ALL_CONFIGS:
        for _ in range(10):
            y = y0.copy()
            for k in EQUALITY_BLOCKS:
                a = getattr(y, k)
                setattr(y, k, a + rng.uniform(-1e-3, 1e-3, a.shape))
            res = certify(case14, nominal, y, cfg)
            pre.append(max(res.pre[k].max_abs for k in ("w_stationarity", "wr_stationarity", "wi_stationarity")))
            worst_post = max(worst_post, res.post.max_violation)
            worst_rel = max(worst_rel, abs(res.bound - z_ref) / abs(z_ref))
    ok = worst_post <= 1e-9 and worst_rel <= 5e-3
    verdict(7, "certifier repair of a noisy dual", ok,
            f"pre-repair residual {min(pre):.1e}..{max(pre):.1e}, post {worst_post:.1e}, "
            f"bound within {100 * worst_rel:.4f}% of the fixture objective (40 trials)")


@pytest.mark.slow
def test_08_desk_training(case14, refs14, verdict):
    cfg = CompletionConfig("nu", "polar")
    data = sample_instances(case14, SamplerConfig(**refs14["sampler"]))
    tr, va, te = split_dataset(data, refs14["fractions"], refs14["split_seed"])
    ref_pd = np.array([r["loads"]["p_d"] for r in refs14["instances"]])
    assert np.allclose(te.pd, ref_pd, rtol=0, atol=1e-12)
    refs = np.array([r["primal_objective"] for r in refs14["instances"]])
    t0 = time.perf_counter()
    params = init_proxy(case14, ArchConfig(seed=0), cfg)
    best, hist = train(params, case14, tr, TrainConfig(epochs=200, batch_size=64, lr=1e-3), val=va)
    rep = evaluate(best, case14, te, refs)
    dt = time.perf_counter() - t0
    s = rep.stats()
    ok = (len(tr) == 1024 and not hist.aborted and s["mean_gap"] <= 0.05
          and math.isfinite(s["max_gap"]) and rep.max_residual <= 1e-9
          and float(rep.gaps.min()) >= -1e-6 and dt <= 900)
    verdict(8, "desk-scale training", ok,
            f"{len(te)} test instances: gap mean {100 * s['mean_gap']:.3f}% std {100 * s['std_gap']:.3f}% "
            f"max {100 * s['max_gap']:.3f}% (min {100 * rep.gaps.min():.4f}%), residual {rep.max_residual:.1e}, "
            f"best epoch {hist.best_epoch}, {dt:.0f} s")


def test_09_dual_ascent(case14, fixture14, nominal, verdict):
    res = dual_ascent(case14, nominal, steps=500)
    z0 = float(case14.pmin @ case14.cost)
    mono = all(b >= a for a, b in zip(res.trajectory, res.trajectory[1:]))
    y = complete(case14, res.xi)
    valid = dual_residuals(case14, y).max_violation <= 1e-9
    gap = optimality_gap(fixture14["primal_objective"], res.bound)
    ok = mono and valid and res.bound >= z0 and gap <= 0.05
    verdict(9, "dual ascent baseline", ok,
            f"500 steps: bound {z0:.2f} -> {res.bound:.4f}, gap {100 * gap:.3f}%, "
            f"best-so-far monotone {mono}, completed dual valid {valid}")


TABLE = {"case14": (14, 20, 168), "case118": (118, 186, 1538), "case300": (300, 411, 3477)}


def test_10_case_statistics(capsys, verdict):
    got, ok = {}, True
    for name, want in TABLE.items():
        assert cli_main(["inspect", name]) == 0
        out = capsys.readouterr().out
        stats = dict(line.split(":", 1) for line in out.strip().splitlines())
        stats = {k.strip(): v.strip() for k, v in stats.items()}
        row = (int(stats["n_bus"]), int(stats["n_branch"]), int(stats["n_indep_polar"]))
        got[name] = row
        ok &= row == want and row[2] == 2 * row[0] + 7 * row[1]
    for name, n_bus in (("pegase1354", 1354), ("pegase2869", 2869)):
        case = load_case(name)
        got[name] = (case.n_bus, case.n_branch)
        ok &= case.n_bus == n_bus
    verdict(10, "case statistics", ok, ", ".join(f"{k} {v}" for k, v in got.items()))


def test_11_throughput(case14, verdict):
    p = init_proxy(case14)
    loads = sample_instances(case14, SamplerConfig(n_instances=512, seed=11))
    proxy_bound(p, case14, loads[:8])
    t0 = time.perf_counter()
    y, z = proxy_bound(p, case14, loads)
    dt = time.perf_counter() - t0
    ok = dt <= 2.0 and z.shape == (512,) and dual_residuals(case14, y).max_violation <= 1e-9
    verdict(11, "batch throughput", ok, f"512 case14 bounds in {dt:.3f} s")
