"""Closed-form dual completion.

Given the independent multipliers (bus prices, one flow block, angle
multipliers and an omega parameter) the remaining multipliers are recovered
so that every dual constraint holds and, among all feasible completions of
the same independent values, the dual objective is largest.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import autodiff as ad
from .errors import InfeasibleConfigError, InputError
from .formulation import SQRT2, DualSolution, w_stationarity_sum

log = logging.getLogger(__name__)

FLOW_CHOICES = ("lambda_flows", "nu_flows")
OMEGA_REPRS = ("rectangular", "polar")

# ν on an unlimited branch must vanish; tolerance for "vanish"
UNLIMITED_NU_TOL = 1e-9


@dataclass(frozen=True)
class CompletionConfig:
    flow_choice: str = "nu_flows"
    omega_repr: str = "polar"
    phi_eps: float = 1e-3
    omega_floor: float = 0.0

    def __post_init__(self):
        aliases = {"lambda": "lambda_flows", "nu": "nu_flows", "rect": "rectangular"}
        object.__setattr__(self, "flow_choice", aliases.get(self.flow_choice, self.flow_choice))
        object.__setattr__(self, "omega_repr", aliases.get(self.omega_repr, self.omega_repr))
        if self.flow_choice not in FLOW_CHOICES:
            raise ValueError(f"flow_choice must be one of {FLOW_CHOICES}")
        if self.omega_repr not in OMEGA_REPRS:
            raise ValueError(f"omega_repr must be one of {OMEGA_REPRS}")
        if not 0 < self.phi_eps < math.pi / 4:
            raise ValueError("phi_eps must lie in (0, pi/4)")
        if self.omega_floor < 0:
            raise ValueError("omega_floor must be nonnegative")

    @property
    def phi_bounds(self):
        return self.phi_eps, math.pi / 2 - self.phi_eps

    def to_json_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


ALL_CONFIGS = tuple(CompletionConfig(f, o) for f in FLOW_CHOICES for o in OMEGA_REPRS)


@dataclass
class IndependentVars:
    """Predicted coordinates.

    ``flow_*`` hold Ohm multipliers under ``lambda_flows`` and thermal-cone
    tails under ``nu_flows``. Exactly one of ``phi`` (polar) or the pair
    ``om_f``/``om_t`` (rectangular) is set.
    """

    lam_p: np.ndarray
    lam_q: np.ndarray
    flow_pf: np.ndarray
    flow_qf: np.ndarray
    flow_pt: np.ndarray
    flow_qt: np.ndarray
    mu_th_lo: np.ndarray
    mu_th_hi: np.ndarray
    phi: Optional[np.ndarray] = None
    om_f: Optional[np.ndarray] = None
    om_t: Optional[np.ndarray] = None

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None:
                setattr(self, f.name, np.asarray(v, dtype=float))

    def block_names(self):
        return [f.name for f in fields(self) if getattr(self, f.name) is not None]

    def validate(self, config):
        for name in self.block_names():
            if not np.all(np.isfinite(getattr(self, name))):
                raise InputError(f"non-finite entries in independent block {name}")
        if config.omega_repr == "polar":
            if self.phi is None:
                raise InputError("polar configuration needs phi")
        elif self.om_f is None or self.om_t is None:
            raise InputError("rectangular configuration needs om_f and om_t")
        if np.any(self.mu_th_lo < 0) or np.any(self.mu_th_hi < 0):
            raise InputError("angle multipliers must be nonnegative")
        if config.omega_repr == "rectangular" and (np.any(self.om_f < 0) or np.any(self.om_t < 0)):
            raise InputError("rectangular omega entries must be nonnegative")

    def to_vector(self):
        return np.concatenate([getattr(self, k) for k in self.block_names()], axis=-1)

    @classmethod
    def from_vector(cls, case, v, config):
        v = np.asarray(v, dtype=float)
        n, e = case.n_bus, case.n_branch
        names = ["lam_p", "lam_q", "flow_pf", "flow_qf", "flow_pt", "flow_qt", "mu_th_lo", "mu_th_hi"]
        names += ["phi"] if config.omega_repr == "polar" else ["om_f", "om_t"]
        out, pos = {}, 0
        for name in names:
            size = n if name in ("lam_p", "lam_q") else e
            out[name] = v[..., pos:pos + size]
            pos += size
        if pos != v.shape[-1]:
            raise InputError(f"independent vector has length {v.shape[-1]}, expected {pos}")
        return cls(**out)

    @classmethod
    def zeros(cls, case, config, batch=()):
        batch = tuple(np.atleast_1d(batch)) if batch != () else ()
        n, e = batch + (case.n_bus,), batch + (case.n_branch,)
        kw = dict(lam_p=np.zeros(n), lam_q=np.zeros(n))
        for k in ("flow_pf", "flow_qf", "flow_pt", "flow_qt", "mu_th_lo", "mu_th_hi"):
            kw[k] = np.zeros(e)
        if config.omega_repr == "polar":
            kw["phi"] = np.full(e, math.pi / 4)
        else:
            kw["om_f"], kw["om_t"] = np.zeros(e), np.zeros(e)
        return cls(**kw)

    def to_json_dict(self, config=None):
        d = {k: getattr(self, k).tolist() for k in self.block_names()}
        if config is not None:
            d["config"] = config.to_json_dict()
        return d

    @classmethod
    def from_json_dict(cls, d):
        keys = [f.name for f in fields(cls)]
        return cls(**{k: d[k] for k in keys if k in d and d[k] is not None})


def recover_flow_duals(flow_choice, flows, lam_p_fr, lam_q_fr, lam_p_to, lam_q_to):
    """Return ``(lam_pf, lam_qf, lam_pt, lam_qt, nu_pf, nu_qf, nu_pt, nu_qt)``.

    ``flows`` is the predicted ``(pf, qf, pt, qt)`` block; bus prices are
    already gathered at the branch endpoints.
    """
    pf, qf, pt, qt = flows
    if flow_choice == "lambda_flows":
        return pf, qf, pt, qt, lam_p_fr + pf, lam_q_fr + qf, lam_p_to + pt, lam_q_to + qt
    return pf - lam_p_fr, qf - lam_q_fr, pt - lam_p_to, qt - lam_q_to, pf, qf, pt, qt


def recover_nu_head(nu_p, nu_q, limited=None):
    """Smallest cone head for the given tail; zero tail forced on unlimited branches."""
    s = np.hypot(nu_p, nu_q)
    if limited is not None and not np.all(limited):
        off = ~np.asarray(limited)
        if np.any(s[..., off] > UNLIMITED_NU_TOL):
            raise InfeasibleConfigError("nonzero thermal dual required on an unlimited branch")
        s = np.where(off, 0.0, s)
    return s


def recover_omega_tail(case, const, lam_pf, lam_qf, lam_pt, lam_qt, mu_lo, mu_hi):
    """``(om_re, om_im)`` closing the ``w_re``/``w_im`` stationarity rows."""
    re = (const.pf_r * lam_pf + const.pt_r * lam_pt + const.qf_r * lam_qf + const.qt_r * lam_qt
          - np.tan(case.angmin) * mu_lo + np.tan(case.angmax) * mu_hi)
    im = (const.pf_i * lam_pf + const.pt_i * lam_pt + const.qf_i * lam_qf + const.qt_i * lam_qt
          + mu_lo - mu_hi)
    return -re, -im


def repair_omega_rect(om_f, om_t, k):
    """Shift both entries by the same amount so that ``2 f t = k``.

    Takes the root that keeps both outputs nonnegative. Evaluated in a
    cancellation-free form: the larger output is ``(d + s) / 2`` and the
    smaller ``k / (d + s)``, with ``d = |f - t|`` and ``s = sqrt(d^2 + 2k)``.
    """
    om_f, om_t, k = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (om_f, om_t, k)))
    d = np.abs(om_f - om_t)
    s = np.sqrt(d * d + 2.0 * k)
    big = 0.5 * (d + s)
    denom = d + s
    small = np.divide(k, denom, out=np.zeros_like(denom), where=denom > 0)
    f_big = om_f >= om_t
    return np.where(f_big, big, small), np.where(f_big, small, big)


def omega_from_polar(phi, k, eps=1e-3):
    """Point on ``2 f t = k`` at angle ``phi`` in the (f, t) quadrant."""
    phi = np.asarray(phi, dtype=float)
    lo, hi = eps, math.pi / 2 - eps
    if np.any(phi < lo) or np.any(phi > hi):
        warnings.warn("phi outside the clamp interval; clamping", RuntimeWarning, stacklevel=2)
        phi = np.clip(phi, lo, hi)
    rho = np.sqrt(np.asarray(k, dtype=float) / np.sin(2.0 * phi))
    return rho * np.cos(phi), rho * np.sin(phi)


def recover_bound_duals(target, actual):
    """Split ``target - actual`` into a (lower, upper) nonnegative pair."""
    diff = np.asarray(target, dtype=float) - np.asarray(actual, dtype=float)
    return np.maximum(0.0, diff), np.maximum(0.0, -diff)


def complete(case, xi, config=None, const=None):
    """Complete independent variables into a dual-feasible :class:`DualSolution`."""
    config = config or CompletionConfig()
    const = const or case.constants
    xi.validate(config)
    f, t = case.f_bus, case.t_bus
    lam_p, lam_q = xi.lam_p, xi.lam_q

    lam_pf, lam_qf, lam_pt, lam_qt, nu_fp, nu_fq, nu_tp, nu_tq = recover_flow_duals(
        config.flow_choice, (xi.flow_pf, xi.flow_qf, xi.flow_pt, xi.flow_qt),
        lam_p[..., f], lam_q[..., f], lam_p[..., t], lam_q[..., t])
    nu_fs = recover_nu_head(nu_fp, nu_fq, case.limited)
    nu_ts = recover_nu_head(nu_tp, nu_tq, case.limited)

    om_re, om_im = recover_omega_tail(case, const, lam_pf, lam_qf, lam_pt, lam_qt,
                                      xi.mu_th_lo, xi.mu_th_hi)
    k = om_re**2 + om_im**2
    if config.omega_repr == "polar":
        om_f, om_t = omega_from_polar(xi.phi, k, config.phi_eps)
    else:
        floor = config.omega_floor
        om_f, om_t = repair_omega_rect(np.maximum(xi.om_f, floor), np.maximum(xi.om_t, floor), k)

    mu_pg_lo, mu_pg_hi = recover_bound_duals(case.cost, lam_p)
    mu_qg_lo, mu_qg_hi = recover_bound_duals(0.0, lam_q)
    y = DualSolution(
        lam_p=lam_p, lam_q=lam_q, mu_pg_lo=mu_pg_lo, mu_pg_hi=mu_pg_hi,
        mu_qg_lo=mu_qg_lo, mu_qg_hi=mu_qg_hi,
        mu_w_lo=np.zeros_like(lam_p), mu_w_hi=np.zeros_like(lam_p),
        lam_pf=lam_pf, lam_qf=lam_qf, lam_pt=lam_pt, lam_qt=lam_qt,
        mu_th_lo=xi.mu_th_lo, mu_th_hi=xi.mu_th_hi,
        nu_f_s=nu_fs, nu_f_p=nu_fp, nu_f_q=nu_fq, nu_t_s=nu_ts, nu_t_p=nu_tp, nu_t_q=nu_tq,
        om_f=om_f, om_t=om_t, om_re=om_re, om_im=om_im,
    )
    # mu_w_hi - mu_w_lo must equal the rest of the w row
    r = w_stationarity_sum(case, y, const)
    y.mu_w_lo, y.mu_w_hi = recover_bound_duals(0.0, r)
    return y


def random_independent(case, config, rng, batch=1, scale=100.0):
    """Random admissible independent values, for property checks."""
    n, e = (batch, case.n_bus), (batch, case.n_branch)
    kw = dict(lam_p=rng.normal(0, scale, n), lam_q=rng.normal(0, scale, n))
    for k in ("flow_pf", "flow_qf", "flow_pt", "flow_qt"):
        kw[k] = rng.normal(0, scale, e)
    kw["mu_th_lo"], kw["mu_th_hi"] = rng.exponential(scale, e), rng.exponential(scale, e)
    if config.omega_repr == "polar":
        kw["phi"] = rng.uniform(*config.phi_bounds, size=e)
    else:
        kw["om_f"], kw["om_t"] = rng.exponential(scale, e), rng.exponential(scale, e)
    off = ~case.limited
    if off.any():
        for k, price, bus in (("flow_pf", "lam_p", case.f_bus), ("flow_qf", "lam_q", case.f_bus),
                              ("flow_pt", "lam_p", case.t_bus), ("flow_qt", "lam_q", case.t_bus)):
            fill = 0.0 if config.flow_choice == "nu_flows" else -kw[price][:, bus]
            kw[k] = np.where(off, fill, kw[k])
    return IndependentVars(**kw)


def extract_independent(y, config=None):
    """Project a full dual solution onto the independent coordinates of ``config``."""
    config = config or CompletionConfig()
    if config.flow_choice == "lambda_flows":
        flows = (y.lam_pf, y.lam_qf, y.lam_pt, y.lam_qt)
    else:
        flows = (y.nu_f_p, y.nu_f_q, y.nu_t_p, y.nu_t_q)
    om_f, om_t = y.om_f, y.om_t
    if np.any(om_f < 0) or np.any(om_t < 0):
        warnings.warn("negative omega entries clamped to zero", RuntimeWarning, stacklevel=2)
        om_f, om_t = np.maximum(om_f, 0.0), np.maximum(om_t, 0.0)
    kw = dict(lam_p=y.lam_p.copy(), lam_q=y.lam_q.copy(),
              flow_pf=flows[0].copy(), flow_qf=flows[1].copy(),
              flow_pt=flows[2].copy(), flow_qt=flows[3].copy(),
              mu_th_lo=np.maximum(y.mu_th_lo, 0.0), mu_th_hi=np.maximum(y.mu_th_hi, 0.0))
    if config.omega_repr == "polar":
        lo, hi = config.phi_bounds
        both_zero = (om_f == 0) & (om_t == 0)
        phi = np.where(both_zero, math.pi / 4, np.arctan2(om_t, om_f))
        kw["phi"] = np.clip(phi, lo, hi)
    else:
        kw["om_f"], kw["om_t"] = om_f.copy(), om_t.copy()
    return IndependentVars(**kw)


# --------------------------------------------------------------------------
# the same completion on a tape, for training through the dual bound

def _bound_split_graph(target, actual):
    diff = ad.sub(target, actual)
    return ad.relu(diff), ad.relu(-diff)


def complete_graph(case, xi, config=None, const=None):
    """Taped version of :func:`complete`.

    ``xi`` maps independent block names to tape variables (batched on the
    leading axis). Returns a dict with every :class:`DualSolution` block.
    No clamping or validation happens here: the proxy produces admissible
    values by construction.
    """
    config = config or CompletionConfig()
    const = const or case.constants
    f, t = case.f_bus, case.t_bus
    lam_p, lam_q = xi["lam_p"], xi["lam_q"]
    lpf, lqf = ad.take(lam_p, f), ad.take(lam_q, f)
    lpt, lqt = ad.take(lam_p, t), ad.take(lam_q, t)
    flows = (xi["flow_pf"], xi["flow_qf"], xi["flow_pt"], xi["flow_qt"])
    if config.flow_choice == "lambda_flows":
        lam_pf, lam_qf, lam_pt, lam_qt = flows
        nu_fp, nu_fq, nu_tp, nu_tq = lpf + flows[0], lqf + flows[1], lpt + flows[2], lqt + flows[3]
    else:
        nu_fp, nu_fq, nu_tp, nu_tq = flows
        lam_pf, lam_qf, lam_pt, lam_qt = flows[0] - lpf, flows[1] - lqf, flows[2] - lpt, flows[3] - lqt
    nu_fs, nu_ts = ad.hypot(nu_fp, nu_fq), ad.hypot(nu_tp, nu_tq)

    mu_lo, mu_hi = xi["mu_th_lo"], xi["mu_th_hi"]
    om_re = -(const.pf_r * lam_pf + const.pt_r * lam_pt + const.qf_r * lam_qf + const.qt_r * lam_qt
              - np.tan(case.angmin) * mu_lo + np.tan(case.angmax) * mu_hi)
    om_im = -(const.pf_i * lam_pf + const.pt_i * lam_pt + const.qf_i * lam_qf + const.qt_i * lam_qt
              + mu_lo - mu_hi)
    mag = ad.hypot(om_re, om_im)
    if config.omega_repr == "polar":
        phi = xi["phi"]
        inv = 1.0 / ad.sqrt(ad.sin(2.0 * phi))
        om_f, om_t = mag * ad.cos(phi) * inv, mag * ad.sin(phi) * inv
    else:
        k = ad.square(om_re) + ad.square(om_im)
        fl = config.omega_floor
        a, b = ad.relu(xi["om_f"] - fl) + fl, ad.relu(xi["om_t"] - fl) + fl
        d = ad.abs_(a - b)
        denom = d + ad.sqrt(ad.square(d) + 2.0 * k)
        pos = denom.value > 0
        small = ad.where(pos, k / ad.where(pos, denom, 1.0), 0.0)
        big = 0.5 * denom
        f_big = a.value >= b.value
        om_f, om_t = ad.where(f_big, big, small), ad.where(f_big, small, big)

    mu_pg_lo, mu_pg_hi = _bound_split_graph(case.cost, lam_p)
    mu_qg_lo, mu_qg_hi = _bound_split_graph(0.0, lam_q)
    fr = const.pf_w * lam_pf + const.qf_w * lam_qf + om_f * (1 / SQRT2)
    to = const.pt_w * lam_pt + const.qt_w * lam_qt + om_t * (1 / SQRT2)
    r = (-case.gs * lam_p + case.bs * lam_q
         + ad.spmm(fr, case.from_incidence) + ad.spmm(to, case.to_incidence))
    mu_w_hi, mu_w_lo = ad.relu(r), ad.relu(-r)
    return dict(lam_p=lam_p, lam_q=lam_q, mu_pg_lo=mu_pg_lo, mu_pg_hi=mu_pg_hi,
                mu_qg_lo=mu_qg_lo, mu_qg_hi=mu_qg_hi, mu_w_lo=mu_w_lo, mu_w_hi=mu_w_hi,
                lam_pf=lam_pf, lam_qf=lam_qf, lam_pt=lam_pt, lam_qt=lam_qt,
                mu_th_lo=mu_lo, mu_th_hi=mu_hi,
                nu_f_s=nu_fs, nu_f_p=nu_fp, nu_f_q=nu_fq, nu_t_s=nu_ts, nu_t_p=nu_tp, nu_t_q=nu_tq,
                om_f=om_f, om_t=om_t, om_re=om_re, om_im=om_im)


def dual_objective_graph(case, pd, qd, y):
    """Taped dual bound of the block dict ``y``; ``pd``/``qd`` are constant arrays."""
    rate = np.where(case.limited, case.rate, 0.0)
    zb = (pd * y["lam_p"] + qd * y["lam_q"]
          + case.pmin * y["mu_pg_lo"] - case.pmax * y["mu_pg_hi"]
          + case.qmin * y["mu_qg_lo"] - case.qmax * y["mu_qg_hi"]
          + case.vmin**2 * y["mu_w_lo"] - case.vmax**2 * y["mu_w_hi"])
    ze = rate * (y["nu_f_s"] + y["nu_t_s"])
    return ad.sum_(zb, axis=-1) - ad.sum_(ze, axis=-1)
