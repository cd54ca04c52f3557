"""Objective and feasibility evaluation for the SOC relaxation and its conic dual.

Everything here is a pure function of numpy arrays. Solutions may carry
leading batch dimensions; per-bus blocks have trailing size ``n_bus`` and
per-branch blocks trailing size ``n_branch``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, fields

import numpy as np

from .errors import DomainError, InputError, UndefinedGapError

log = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)
GEOMEAN_FLOOR = 1e-12


@dataclass
class InstanceLoads:
    pd: np.ndarray
    qd: np.ndarray

    def __post_init__(self):
        self.pd = np.asarray(self.pd, dtype=float)
        self.qd = np.asarray(self.qd, dtype=float)
        if self.pd.shape != self.qd.shape:
            raise InputError("pd and qd shapes differ")
        if not (np.all(np.isfinite(self.pd)) and np.all(np.isfinite(self.qd))):
            raise InputError("loads must be finite")

    @classmethod
    def nominal(cls, case):
        return cls(case.pd.copy(), case.qd.copy())

    def __len__(self):
        return 1 if self.pd.ndim == 1 else self.pd.shape[0]

    def __getitem__(self, idx):
        return InstanceLoads(self.pd[idx], self.qd[idx])

    @classmethod
    def stack(cls, items):
        return cls(np.stack([x.pd for x in items]), np.stack([x.qd for x in items]))

    def to_json_dict(self):
        return {"p_d": self.pd.tolist(), "q_d": self.qd.tolist()}

    @classmethod
    def from_json_dict(cls, d):
        return cls(d["p_d"], d["q_d"])


class _Blocks:
    """Mixin for dataclasses whose fields are all named numpy blocks."""

    @classmethod
    def block_names(cls):
        return [f.name for f in fields(cls)]

    def __post_init__(self):
        for name in self.block_names():
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))

    def to_vector(self):
        return np.concatenate([getattr(self, k) for k in self.block_names()], axis=-1)

    @classmethod
    def from_vector(cls, case, v):
        v = np.asarray(v, dtype=float)
        out, pos = {}, 0
        for name in cls.block_names():
            size = case.n_bus if name in cls._bus_blocks else case.n_branch
            out[name] = v[..., pos:pos + size]
            pos += size
        if pos != v.shape[-1]:
            raise InputError(f"vector length {v.shape[-1]} does not match case ({pos})")
        return cls(**out)

    @classmethod
    def zeros(cls, case, batch=()):
        batch = tuple(np.atleast_1d(batch)) if batch != () else ()
        return cls(**{
            k: np.zeros(batch + ((case.n_bus if k in cls._bus_blocks else case.n_branch),))
            for k in cls.block_names()
        })

    def check_shapes(self, case):
        for name in self.block_names():
            size = case.n_bus if name in self._bus_blocks else case.n_branch
            if getattr(self, name).shape[-1:] != (size,):
                raise InputError(f"block {name} has shape {getattr(self, name).shape}, expected (..., {size})")

    def to_json_dict(self):
        return {k: getattr(self, k).tolist() for k in self.block_names()}

    @classmethod
    def from_json_dict(cls, d):
        return cls(**{k: d[k] for k in cls.block_names()})

    def __getitem__(self, idx):
        return type(self)(**{k: getattr(self, k)[idx] for k in self.block_names()})

    def copy(self):
        return type(self)(**{k: getattr(self, k).copy() for k in self.block_names()})


@dataclass
class PrimalSolution(_Blocks):
    pg: np.ndarray
    qg: np.ndarray
    w: np.ndarray
    wr: np.ndarray
    wi: np.ndarray
    pf: np.ndarray
    pt: np.ndarray
    qf: np.ndarray
    qt: np.ndarray

    _bus_blocks = frozenset({"pg", "qg", "w"})


@dataclass
class DualSolution(_Blocks):
    """All multipliers of the SOC relaxation.

    Naming: ``lam_pf`` is the forward active Ohm multiplier, ``lam_pt`` the
    reverse one; ``nu_f_*``/``nu_t_*`` are the thermal-cone duals (head ``s``
    and tail ``p``, ``q``); ``om_*`` the Jabr-cone dual.
    """

    lam_p: np.ndarray
    lam_q: np.ndarray
    mu_pg_lo: np.ndarray
    mu_pg_hi: np.ndarray
    mu_qg_lo: np.ndarray
    mu_qg_hi: np.ndarray
    mu_w_lo: np.ndarray
    mu_w_hi: np.ndarray
    lam_pf: np.ndarray
    lam_qf: np.ndarray
    lam_pt: np.ndarray
    lam_qt: np.ndarray
    mu_th_lo: np.ndarray
    mu_th_hi: np.ndarray
    nu_f_s: np.ndarray
    nu_f_p: np.ndarray
    nu_f_q: np.ndarray
    nu_t_s: np.ndarray
    nu_t_p: np.ndarray
    nu_t_q: np.ndarray
    om_f: np.ndarray
    om_t: np.ndarray
    om_re: np.ndarray
    om_im: np.ndarray

    _bus_blocks = frozenset({"lam_p", "lam_q", "mu_pg_lo", "mu_pg_hi", "mu_qg_lo",
                             "mu_qg_hi", "mu_w_lo", "mu_w_hi"})


@dataclass
class FamilyResidual:
    max_abs: float
    mean_abs: float
    worst: tuple


class ResidualReport(dict):
    """Mapping of constraint family name to :class:`FamilyResidual`."""

    @classmethod
    def from_arrays(cls, arrays):
        rep = cls()
        for name, a in arrays.items():
            a = np.abs(np.asarray(a, dtype=float))
            if a.size == 0:
                rep[name] = FamilyResidual(0.0, 0.0, ())
                continue
            k = int(np.argmax(a))
            worst = tuple(int(i) for i in np.unravel_index(k, a.shape))
            rep[name] = FamilyResidual(float(a.reshape(-1)[k]), float(a.mean()), worst)
        return rep

    @property
    def max_violation(self):
        return max((r.max_abs for r in self.values()), default=0.0)

    def to_json_dict(self):
        return {k: {"max_abs": v.max_abs, "mean_abs": v.mean_abs, "worst": list(v.worst)}
                for k, v in self.items()}

    def summary(self):
        return "\n".join(f"{k:>16s}  max={v.max_abs:.3e}  mean={v.mean_abs:.3e}" for k, v in self.items())


def _thermal_rate(case):
    return np.where(case.limited, case.rate, 0.0)


def dual_objective(case, loads, y):
    """Dual bound of ``y`` (no feasibility assumed)."""
    z = (loads.pd * y.lam_p + loads.qd * y.lam_q
         + case.pmin * y.mu_pg_lo - case.pmax * y.mu_pg_hi
         + case.qmin * y.mu_qg_lo - case.qmax * y.mu_qg_hi
         + case.vmin**2 * y.mu_w_lo - case.vmax**2 * y.mu_w_hi).sum(axis=-1)
    return z - (_thermal_rate(case) * (y.nu_f_s + y.nu_t_s)).sum(axis=-1)


def w_stationarity_sum(case, y, const=None):
    """Left-hand side of the ``w`` stationarity row, without the mu_w terms."""
    const = const or case.constants
    fr = const.pf_w * y.lam_pf + const.qf_w * y.lam_qf + y.om_f / SQRT2
    to = const.pt_w * y.lam_pt + const.qt_w * y.lam_qt + y.om_t / SQRT2
    return (-case.gs * y.lam_p + case.bs * y.lam_q
            + fr @ case.from_incidence + to @ case.to_incidence)


def wr_stationarity_sum(case, y, const=None):
    const = const or case.constants
    return (const.pf_r * y.lam_pf + const.pt_r * y.lam_pt + const.qf_r * y.lam_qf
            + const.qt_r * y.lam_qt - np.tan(case.angmin) * y.mu_th_lo
            + np.tan(case.angmax) * y.mu_th_hi)


def wi_stationarity_sum(case, y, const=None):
    const = const or case.constants
    return (const.pf_i * y.lam_pf + const.pt_i * y.lam_pt + const.qf_i * y.lam_qf
            + const.qt_i * y.lam_qt + y.mu_th_lo - y.mu_th_hi)


def _neg(a):
    return np.maximum(0.0, -a)


def dual_residuals(case, y):
    """Per-family violation of the dual constraints.

    Equality families report absolute residuals; ``nonnegativity`` the
    largest negative part over all bound multipliers; cone families the
    distance-like deficits described in the README.
    """
    y.check_shapes(case)
    lim = case.limited
    thermal_f = np.maximum(0.0, np.hypot(y.nu_f_p, y.nu_f_q) - y.nu_f_s)
    thermal_t = np.maximum(0.0, np.hypot(y.nu_t_p, y.nu_t_q) - y.nu_t_s)
    unlimited_f = np.abs(y.nu_f_s) + np.abs(y.nu_f_p) + np.abs(y.nu_f_q)
    unlimited_t = np.abs(y.nu_t_s) + np.abs(y.nu_t_p) + np.abs(y.nu_t_q)
    thermal = np.maximum(np.where(lim, thermal_f, unlimited_f), np.where(lim, thermal_t, unlimited_t))
    nonneg = np.max(np.stack(np.broadcast_arrays(
        *[_neg(getattr(y, k)) for k in ("mu_pg_lo", "mu_pg_hi", "mu_qg_lo", "mu_qg_hi",
                                         "mu_w_lo", "mu_w_hi")])), axis=0)
    nonneg_br = np.maximum(_neg(y.mu_th_lo), _neg(y.mu_th_hi))
    head = np.sqrt(2.0 * np.maximum(y.om_f, 0.0) * np.maximum(y.om_t, 0.0))
    jabr = np.maximum(0.0, np.hypot(y.om_re, y.om_im) - head)
    return ResidualReport.from_arrays({
        "pg_stationarity": y.lam_p + y.mu_pg_lo - y.mu_pg_hi - case.cost,
        "qg_stationarity": y.lam_q + y.mu_qg_lo - y.mu_qg_hi,
        "flow_p_fr": -y.lam_p[..., case.f_bus] - y.lam_pf + y.nu_f_p,
        "flow_q_fr": -y.lam_q[..., case.f_bus] - y.lam_qf + y.nu_f_q,
        "flow_p_to": -y.lam_p[..., case.t_bus] - y.lam_pt + y.nu_t_p,
        "flow_q_to": -y.lam_q[..., case.t_bus] - y.lam_qt + y.nu_t_q,
        "w_stationarity": w_stationarity_sum(case, y) + y.mu_w_lo - y.mu_w_hi,
        "wr_stationarity": wr_stationarity_sum(case, y) + y.om_re,
        "wi_stationarity": wi_stationarity_sum(case, y) + y.om_im,
        "nonnegativity": np.concatenate([nonneg, nonneg_br], axis=-1),
        "thermal_cone": thermal,
        "jabr_cone": jabr,
        "jabr_cone_sign": np.maximum(_neg(y.om_f), _neg(y.om_t)),
    })


def primal_objective(case, x):
    return (case.cost * x.pg).sum(axis=-1)


def primal_residuals(case, loads, x, const=None):
    """Per-family violation of the SOC relaxation constraints at ``x``.

    Branch flows are counted as leaving each endpoint, so the balance rows
    subtract both the forward and the reverse flow.
    """
    x.check_shapes(case)
    const = const or case.constants
    pf, qf, pt, qt = const.flows(case, x.w, x.wr, x.wi)
    out_p = x.pf @ case.from_incidence + x.pt @ case.to_incidence
    out_q = x.qf @ case.from_incidence + x.qt @ case.to_incidence
    rate = np.where(case.limited, case.rate, np.inf)
    wf, wt = x.w[..., case.f_bus], x.w[..., case.t_bus]
    jabr = np.maximum(0.0, np.hypot(x.wr, x.wi) - np.sqrt(np.maximum(wf, 0) * np.maximum(wt, 0)))
    return ResidualReport.from_arrays({
        "p_balance": x.pg - loads.pd - case.gs * x.w - out_p,
        "q_balance": x.qg - loads.qd + case.bs * x.w - out_q,
        "ohm_p_fr": x.pf - pf,
        "ohm_p_to": x.pt - pt,
        "ohm_q_fr": x.qf - qf,
        "ohm_q_to": x.qt - qt,
        "thermal_fr": np.maximum(0.0, np.hypot(x.pf, x.qf) - rate),
        "thermal_to": np.maximum(0.0, np.hypot(x.pt, x.qt) - rate),
        "angle_diff": np.maximum(np.maximum(0.0, np.tan(case.angmin) * x.wr - x.wi),
                                 np.maximum(0.0, x.wi - np.tan(case.angmax) * x.wr)),
        "jabr": np.maximum(jabr, np.maximum(_neg(wf), _neg(wt))),
        "w_bounds": np.maximum(_neg(x.w - case.vmin**2), _neg(case.vmax**2 - x.w)),
        "pg_bounds": np.maximum(_neg(x.pg - case.pmin), _neg(case.pmax - x.pg)),
        "qg_bounds": np.maximum(_neg(x.qg - case.qmin), _neg(case.qmax - x.qg)),
    })


def optimality_gap(z_ref, z_hat):
    """Relative shortfall ``(z_ref - z_hat) / |z_ref|``."""
    z_ref = np.asarray(z_ref, dtype=float)
    if np.any(z_ref == 0):
        raise UndefinedGapError("gap undefined for a zero reference objective")
    out = (z_ref - np.asarray(z_hat, dtype=float)) / np.abs(z_ref)
    return float(out) if out.ndim == 0 else out


def geometric_mean(values, floor=GEOMEAN_FLOOR):
    """Geometric mean via the mean of logs.

    Values below ``floor`` (zero gaps) are clamped to it; returns
    ``(mean, n_clamped)``.
    """
    v = np.asarray(values, dtype=float).reshape(-1)
    if v.size == 0:
        raise DomainError("geometric mean of an empty sequence")
    if np.any(v < 0) or not np.all(np.isfinite(v)):
        raise DomainError("geometric mean needs finite nonnegative values")
    clamped = int((v < floor).sum())
    if clamped:
        log.info("geometric_mean: clamped %d values to %g", clamped, floor)
    return float(np.exp(np.mean(np.log(np.maximum(v, floor))))), clamped


def save_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)


def load_json(path):
    with open(path) as fh:
        return json.load(fh)
