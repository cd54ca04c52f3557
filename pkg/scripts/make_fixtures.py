"""Generate the committed case14 reference fixtures with an interior-point solver.

Solves the SOC relaxation (primal) and its conic dual as two separate cvxpy
models with Clarabel, checks that the objectives agree, and stores:

* ``case14_fixture.json``: nominal-load primal and dual optima;
* ``case14_test_refs.json``: optimal objectives of the held-out test split
  used by the training acceptance run.

Requires ``cvxpy`` (``pip install -e .[fixtures]``). Not imported by the package.

    python scripts/make_fixtures.py
"""
import argparse
import datetime
import json
import math
from pathlib import Path

import cvxpy as cp
import numpy as np

from dcproxy.formulation import (
    DualSolution, InstanceLoads, PrimalSolution, dual_objective, dual_residuals,
    primal_objective, primal_residuals,
)
from dcproxy.grid import DATA_DIR, load_case
from dcproxy.training import SamplerConfig, sample_instances, split_dataset

SOLVER_OPTS = dict(tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10, tol_ktratio=1e-8,
                   max_iter=400)

# acceptance dataset: 1138 instances -> 1024 / 57 / 57
DATASET = SamplerConfig(n_instances=1138, alpha_low=0.8, alpha_high=1.12, sigma=0.05, seed=1407)
SPLIT_SEED = 7


def incidence(idx, n):
    a = np.zeros((n, len(idx)))
    a[idx, np.arange(len(idx))] = 1.0
    return a


def solve_primal(case, loads):
    n, e = case.n_bus, case.n_branch
    k = case.constants
    af, at = incidence(case.f_bus, n), incidence(case.t_bus, n)
    pg, qg, w = cp.Variable(n), cp.Variable(n), cp.Variable(n)
    wr, wi = cp.Variable(e), cp.Variable(e)
    pf, pt, qf, qt = (cp.Variable(e) for _ in range(4))
    wf, wt = af.T @ w, at.T @ w
    lim = np.flatnonzero(case.limited)
    cons = [
        pg - loads.pd - cp.multiply(case.gs, w) == af @ pf + at @ pt,
        qg - loads.qd + cp.multiply(case.bs, w) == af @ qf + at @ qt,
        pf == cp.multiply(k.pf_w, wf) + cp.multiply(k.pf_r, wr) + cp.multiply(k.pf_i, wi),
        pt == cp.multiply(k.pt_w, wt) + cp.multiply(k.pt_r, wr) + cp.multiply(k.pt_i, wi),
        qf == cp.multiply(k.qf_w, wf) + cp.multiply(k.qf_r, wr) + cp.multiply(k.qf_i, wi),
        qt == cp.multiply(k.qt_w, wt) + cp.multiply(k.qt_r, wr) + cp.multiply(k.qt_i, wi),
        wi >= cp.multiply(np.tan(case.angmin), wr),
        wi <= cp.multiply(np.tan(case.angmax), wr),
        cp.SOC(wf + wt, cp.vstack([2 * wr, 2 * wi, wf - wt]), axis=0),
        w >= case.vmin**2, w <= case.vmax**2,
        pg >= case.pmin, pg <= case.pmax, qg >= case.qmin, qg <= case.qmax,
    ]
    if lim.size:
        cons += [cp.SOC(case.rate[lim], cp.vstack([pf[lim], qf[lim]]), axis=0),
                 cp.SOC(case.rate[lim], cp.vstack([pt[lim], qt[lim]]), axis=0)]
    prob = cp.Problem(cp.Minimize(case.cost @ pg), cons)
    prob.solve(solver=cp.CLARABEL, **SOLVER_OPTS)
    if prob.status not in ("optimal", "optimal_inaccurate"):
        return prob.status, None
    x = PrimalSolution(pg=pg.value, qg=qg.value, w=w.value, wr=wr.value, wi=wi.value,
                       pf=pf.value, pt=pt.value, qf=qf.value, qt=qt.value)
    return prob.status, x


def solve_dual(case, loads):
    n, e = case.n_bus, case.n_branch
    k = case.constants
    af, at = incidence(case.f_bus, n), incidence(case.t_bus, n)
    v = {name: cp.Variable(n if name in DualSolution._bus_blocks else e)
         for name in DualSolution.block_names()}
    s2 = math.sqrt(2.0)
    lim = case.limited
    rate = np.where(lim, case.rate, 0.0)
    obj = (loads.pd @ v["lam_p"] + loads.qd @ v["lam_q"]
           + case.pmin @ v["mu_pg_lo"] - case.pmax @ v["mu_pg_hi"]
           + case.qmin @ v["mu_qg_lo"] - case.qmax @ v["mu_qg_hi"]
           + (case.vmin**2) @ v["mu_w_lo"] - (case.vmax**2) @ v["mu_w_hi"]
           - rate @ (v["nu_f_s"] + v["nu_t_s"]))
    fr = cp.multiply(k.pf_w, v["lam_pf"]) + cp.multiply(k.qf_w, v["lam_qf"]) + v["om_f"] / s2
    to = cp.multiply(k.pt_w, v["lam_pt"]) + cp.multiply(k.qt_w, v["lam_qt"]) + v["om_t"] / s2
    cons = [
        v["lam_p"] + v["mu_pg_lo"] - v["mu_pg_hi"] == case.cost,
        v["lam_q"] + v["mu_qg_lo"] - v["mu_qg_hi"] == 0,
        -af.T @ v["lam_p"] - v["lam_pf"] + v["nu_f_p"] == 0,
        -af.T @ v["lam_q"] - v["lam_qf"] + v["nu_f_q"] == 0,
        -at.T @ v["lam_p"] - v["lam_pt"] + v["nu_t_p"] == 0,
        -at.T @ v["lam_q"] - v["lam_qt"] + v["nu_t_q"] == 0,
        -cp.multiply(case.gs, v["lam_p"]) + cp.multiply(case.bs, v["lam_q"])
        + af @ fr + at @ to + v["mu_w_lo"] - v["mu_w_hi"] == 0,
        cp.multiply(k.pf_r, v["lam_pf"]) + cp.multiply(k.pt_r, v["lam_pt"])
        + cp.multiply(k.qf_r, v["lam_qf"]) + cp.multiply(k.qt_r, v["lam_qt"])
        - cp.multiply(np.tan(case.angmin), v["mu_th_lo"])
        + cp.multiply(np.tan(case.angmax), v["mu_th_hi"]) + v["om_re"] == 0,
        cp.multiply(k.pf_i, v["lam_pf"]) + cp.multiply(k.pt_i, v["lam_pt"])
        + cp.multiply(k.qf_i, v["lam_qf"]) + cp.multiply(k.qt_i, v["lam_qt"])
        + v["mu_th_lo"] - v["mu_th_hi"] + v["om_im"] == 0,
        cp.SOC(v["nu_f_s"], cp.vstack([v["nu_f_p"], v["nu_f_q"]]), axis=0),
        cp.SOC(v["nu_t_s"], cp.vstack([v["nu_t_p"], v["nu_t_q"]]), axis=0),
        cp.SOC((v["om_f"] + v["om_t"]) / s2,
               cp.vstack([v["om_re"], v["om_im"], (v["om_f"] - v["om_t"]) / s2]), axis=0),
        v["om_f"] >= 0, v["om_t"] >= 0,
    ]
    cons += [v[name] >= 0 for name in ("mu_pg_lo", "mu_pg_hi", "mu_qg_lo", "mu_qg_hi",
                                        "mu_w_lo", "mu_w_hi", "mu_th_lo", "mu_th_hi")]
    if not lim.all():
        off = np.flatnonzero(~lim)
        cons += [v[b][off] == 0 for b in ("nu_f_s", "nu_f_p", "nu_f_q", "nu_t_s", "nu_t_p", "nu_t_q")]
    prob = cp.Problem(cp.Maximize(obj), cons)
    prob.solve(solver=cp.CLARABEL, **SOLVER_OPTS)
    if prob.status not in ("optimal", "optimal_inaccurate"):
        return prob.status, None
    return prob.status, DualSolution(**{name: var.value for name, var in v.items()})


def provenance():
    return {
        "generator": "scripts/make_fixtures.py",
        "solver": f"Clarabel via cvxpy {cp.__version__}",
        "solver_options": SOLVER_OPTS,
        "case_source": "PGLib-OPF v23.07 pglib_opf_case14_ieee.m",
        "created": datetime.date.today().isoformat(),
    }


def nominal_fixture(case):
    loads = InstanceLoads.nominal(case)
    pstatus, x = solve_primal(case, loads)
    dstatus, y = solve_dual(case, loads)
    zp, zd = float(primal_objective(case, x)), float(dual_objective(case, loads, y))
    print(f"nominal: primal {pstatus} {zp:.8f}  dual {dstatus} {zd:.8f}  rel diff {(zp - zd) / abs(zp):.2e}")
    print("primal residuals\n" + primal_residuals(case, loads, x).summary())
    print("dual residuals\n" + dual_residuals(case, y).summary())
    return {
        "provenance": provenance(),
        "case": case.name,
        "loads": loads.to_json_dict(),
        "primal_status": pstatus,
        "dual_status": dstatus,
        "primal_objective": zp,
        "dual_objective": zd,
        "primal": x.to_json_dict(),
        "dual": y.to_json_dict(),
    }


def test_refs(case):
    data = sample_instances(case, DATASET)
    _, _, test = split_dataset(data, (0.9, 0.05, 0.05), SPLIT_SEED)
    rows = []
    for k in range(len(test)):
        inst = test[k]
        pstatus, x = solve_primal(case, inst)
        dstatus, y = solve_dual(case, inst)
        row = {"loads": inst.to_json_dict(), "primal_status": pstatus, "dual_status": dstatus}
        if x is not None and y is not None:
            zp, zd = float(primal_objective(case, x)), float(dual_objective(case, inst, y))
            row.update(primal_objective=zp, dual_objective=zd,
                       max_dual_residual=dual_residuals(case, y).max_violation,
                       max_primal_residual=primal_residuals(case, inst, x).max_violation)
            print(f"test {k:3d}: {zp:.6f} {zd:.6f}  rel diff {(zp - zd) / abs(zp):.1e}")
        else:
            print(f"test {k:3d}: {pstatus}/{dstatus}")
        rows.append(row)
    return {"provenance": provenance(), "case": case.name, "sampler": DATASET.to_json_dict(),
            "split_seed": SPLIT_SEED, "fractions": [0.9, 0.05, 0.05], "instances": rows}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=DATA_DIR)
    args = ap.parse_args()
    case = load_case("case14")
    fx = nominal_fixture(case)
    (args.out / "case14_fixture.json").write_text(json.dumps(fx, indent=1))
    refs = test_refs(case)
    (args.out / "case14_test_refs.json").write_text(json.dumps(refs, indent=1))


if __name__ == "__main__":
    main()
