"""Dual conic proxy: an MLP over loads whose outputs are completed into a dual bound.

The network has a shared trunk and one small head per independent block.
Head outputs pass through a block-specific activation and a power-of-10
scale, so every parameter vector yields admissible independent values and,
after completion, a dual-feasible point.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import __version__
from . import autodiff as ad
from .completion import CompletionConfig, IndependentVars, complete, complete_graph, dual_objective_graph
from .errors import InputError, ValidationError
from .formulation import InstanceLoads, dual_objective

FLOW_HEADS = ("flow_pf", "flow_qf", "flow_pt", "flow_qt")
ACTIVATIONS = {"softplus": ad.softplus, "relu": ad.relu, "sigmoid": ad.sigmoid}

DEFAULT_SCALES = {
    "lam_p": 1e2, "lam_q": 1e2,
    "flow_pf": 1e1, "flow_qf": 1e1, "flow_pt": 1e1, "flow_qt": 1e1,
    "mu_th_lo": 1e1, "mu_th_hi": 1e1,
    "phi": 1.0, "om_f": 1e1, "om_t": 1e1,
}


def head_names(config):
    names = ["lam_p", "lam_q", *FLOW_HEADS, "mu_th_lo", "mu_th_hi"]
    return names + (["phi"] if config.omega_repr == "polar" else ["om_f", "om_t"])


@dataclass(frozen=True)
class ArchConfig:
    trunk: tuple = (256, 256)
    head: tuple = (128,)
    activation: str = "softplus"
    scales: dict = field(default_factory=lambda: dict(DEFAULT_SCALES))
    seed: int = 0
    # initial pre-activation bias of the angle-multiplier heads; softplus(-3) ~ 0.05
    mu_th_bias: float = -3.0
    # start the active-price head at the merit-order price of the nominal case
    price_init: bool = True

    def __post_init__(self):
        object.__setattr__(self, "trunk", tuple(int(w) for w in self.trunk))
        object.__setattr__(self, "head", tuple(int(w) for w in self.head))
        merged = dict(DEFAULT_SCALES)
        merged.update(self.scales or {})
        object.__setattr__(self, "scales", merged)
        if any(w < 1 for w in self.trunk + self.head):
            raise ValueError("layer widths must be at least 1")
        if not all(s > 0 for s in merged.values()):
            raise ValueError("head scales must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}")

    def to_json_dict(self):
        return {f.name: (list(getattr(self, f.name)) if isinstance(getattr(self, f.name), tuple)
                         else getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_json_dict(cls, d):
        keys = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in keys})


def merit_order_price(case, total=None):
    """Marginal cost of a lossless single-node dispatch of ``total`` demand."""
    total = float(case.pd.sum()) if total is None else total
    avail = np.flatnonzero(case.pmax > 0)
    if avail.size == 0:
        return 0.0
    order = avail[np.argsort(case.cost[avail], kind="stable")]
    need = total - case.pmin[order].sum()
    cum = np.cumsum(case.pmax[order] - case.pmin[order])
    k = min(int(np.searchsorted(cum, need)), order.size - 1)
    return float(case.cost[order[k]])


def loss_normalizer(case):
    """Total nominal active demand times the mean cost of units with capacity."""
    real = case.pmax > 0
    mean_cost = float(case.cost[real].mean()) if real.any() else 1.0
    norm = float(case.pd.sum()) * mean_cost
    return norm if norm > 0 else 1.0


class ProxyParams:
    """Ordered named weight arrays plus the nominal loads used for input scaling."""

    def __init__(self, arrays, nominal_pd, nominal_qd, arch, config, case_name=""):
        self.arrays = dict(arrays)
        self.nominal_pd = np.asarray(nominal_pd, dtype=float)
        self.nominal_qd = np.asarray(nominal_qd, dtype=float)
        self.arch = arch
        self.config = config
        self.case_name = case_name

    @property
    def names(self):
        return list(self.arrays)

    @property
    def n_params(self):
        return int(sum(a.size for a in self.arrays.values()))

    def values(self):
        return [self.arrays[k] for k in self.names]

    def with_values(self, values):
        return ProxyParams(dict(zip(self.names, values)), self.nominal_pd, self.nominal_qd,
                           self.arch, self.config, self.case_name)

    def copy(self):
        return self.with_values([v.copy() for v in self.values()])

    def flat(self):
        return np.concatenate([v.ravel() for v in self.values()])

    def from_flat(self, vec):
        out, pos = [], 0
        for v in self.values():
            out.append(np.asarray(vec[pos:pos + v.size], dtype=float).reshape(v.shape))
            pos += v.size
        return self.with_values(out)

    def check_case(self, case):
        if self.nominal_pd.shape != (case.n_bus,):
            raise ValidationError(f"model built for {self.nominal_pd.size} buses, case has {case.n_bus}")
        out = self.arrays[f"head.{head_names(self.config)[-1]}.out.W"].shape[1]
        if out != case.n_branch:
            raise ValidationError(f"model built for {out} branches, case has {case.n_branch}")

    def to_json_dict(self):
        return {
            "format": "dcproxy-model",
            "version": __version__,
            "case": self.case_name,
            "arch": self.arch.to_json_dict(),
            "config": self.config.to_json_dict(),
            "nominal_pd": self.nominal_pd.tolist(),
            "nominal_qd": self.nominal_qd.tolist(),
            "params": {k: v.tolist() for k, v in self.arrays.items()},
        }

    @classmethod
    def from_json_dict(cls, d):
        if d.get("format") != "dcproxy-model":
            raise InputError("not a model file")
        arrays = {k: np.asarray(v, dtype=float) for k, v in d["params"].items()}
        return cls(arrays, d["nominal_pd"], d["nominal_qd"], ArchConfig.from_json_dict(d["arch"]),
                   CompletionConfig(**d["config"]), d.get("case", ""))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


def _dense(rng, fan_in, fan_out):
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))


def init_proxy(case, arch=None, config=None):
    """Seeded initialization: normal weights with variance 1/fan-in, zero biases."""
    arch = arch or ArchConfig()
    config = config or CompletionConfig()
    rng = np.random.default_rng(arch.seed)
    n, e = case.n_bus, case.n_branch
    arrays = {}
    width = 2 * n
    for i, h in enumerate(arch.trunk):
        arrays[f"trunk.{i}.W"] = _dense(rng, width, h)
        arrays[f"trunk.{i}.b"] = np.zeros(h)
        width = h
    for name in head_names(config):
        w = width
        for i, h in enumerate(arch.head):
            arrays[f"head.{name}.{i}.W"] = _dense(rng, w, h)
            arrays[f"head.{name}.{i}.b"] = np.zeros(h)
            w = h
        size = n if name in ("lam_p", "lam_q") else e
        # small last layer so the initial output is dominated by the bias
        arrays[f"head.{name}.out.W"] = 0.1 * _dense(rng, w, size)
        arrays[f"head.{name}.out.b"] = np.zeros(size)
    if arch.price_init:
        arrays["head.lam_p.out.b"][:] = merit_order_price(case) / arch.scales["lam_p"]
        if config.flow_choice == "lambda_flows":
            for name in ("flow_pf", "flow_pt"):
                arrays[f"head.{name}.out.b"][:] = -merit_order_price(case) / arch.scales[name]
    for name in ("mu_th_lo", "mu_th_hi"):
        arrays[f"head.{name}.out.b"][:] = arch.mu_th_bias
    return ProxyParams(arrays, case.pd, case.qd, arch, config, case.name)


def normalize_inputs(params, pd, qd):
    pd, qd = np.atleast_2d(np.asarray(pd, dtype=float)), np.atleast_2d(np.asarray(qd, dtype=float))
    if not (np.all(np.isfinite(pd)) and np.all(np.isfinite(qd))):
        raise InputError("loads contain NaN or infinite entries")

    def ratio(x, nom):
        safe = np.where(nom != 0, nom, 1.0)
        return np.where(nom != 0, x / safe, x)
    return np.concatenate([ratio(pd, params.nominal_pd), ratio(qd, params.nominal_qd)], axis=-1)


def _mlp_heads(params, names, p, x, case):
    """Taped network; ``p`` maps parameter names to tape variables."""
    arch, config = params.arch, params.config
    act = ACTIVATIONS[arch.activation]
    h = x
    for i in range(len(arch.trunk)):
        h = act(h @ p[f"trunk.{i}.W"] + p[f"trunk.{i}.b"])
    out = {}
    for name in head_names(config):
        z = h
        for i in range(len(arch.head)):
            z = act(z @ p[f"head.{name}.{i}.W"] + p[f"head.{name}.{i}.b"])
        out[name] = z @ p[f"head.{name}.out.W"] + p[f"head.{name}.out.b"]
    return _activate(out, arch, config, case, x_batch=x)


def _activate(pre, arch, config, case, x_batch=None):
    s = arch.scales
    xi = {"lam_p": pre["lam_p"] * s["lam_p"], "lam_q": pre["lam_q"] * s["lam_q"]}
    lim = case.limited
    for name in FLOW_HEADS:
        v = pre[name] * s[name]
        if not lim.all():
            if config.flow_choice == "nu_flows":
                v = v * lim.astype(float)
            else:
                # unlimited branch: Ohm multiplier cancels the bus price so the cone tail is 0
                bus = case.f_bus if name.endswith("f") else case.t_bus
                price = xi["lam_p"] if name.startswith("flow_p") else xi["lam_q"]
                v = ad.where(lim, v, -ad.take(price, bus))
        xi[name] = v
    for name in ("mu_th_lo", "mu_th_hi"):
        xi[name] = ad.softplus(pre[name]) * s[name]
    if config.omega_repr == "polar":
        lo, hi = config.phi_bounds
        xi["phi"] = lo + (hi - lo) * ad.sigmoid(pre["phi"])
    else:
        xi["om_f"] = ad.softplus(pre["om_f"]) * s["om_f"]
        xi["om_t"] = ad.softplus(pre["om_t"]) * s["om_t"]
    return xi


def _run(params, case, pd, qd, want_bound=True, seed=None):
    """Forward the proxy on a fresh tape with parameters as inputs."""
    names = params.names
    x = normalize_inputs(params, pd, qd)
    pd2, qd2 = np.atleast_2d(pd), np.atleast_2d(qd)

    def fn(*vals):
        p = dict(zip(names, vals))
        xi = _mlp_heads(params, names, p, x, case)
        fn.xi = xi
        if not want_bound:
            return ad.sum_(xi["lam_p"])
        y = complete_graph(case, xi, params.config)
        fn.y = y
        fn.z = dual_objective_graph(case, pd2, qd2, y)
        return fn.z
    tape = ad.Tape()
    tape.forward(fn, *params.values())
    return tape, fn


def forward_proxy(params, case, loads):
    """Independent variables for a batch of loads (leading batch axis kept)."""
    params.check_case(case)
    _, fn = _run(params, case, loads.pd, loads.qd, want_bound=False)
    return IndependentVars(**{k: ad._val(v) for k, v in fn.xi.items()})


def proxy_bound(params, case, loads):
    """Complete the proxy output with the reference completion; returns ``(y, bounds)``."""
    xi = forward_proxy(params, case, loads)
    y = complete(case, xi, params.config)
    return y, dual_objective(case, loads, y)


def loss_and_grad(params, case, pd, qd, normalizer=None):
    """Mean of ``-z / normalizer`` over the batch and its gradient w.r.t. every array."""
    if np.atleast_2d(pd).shape[0] == 0:
        raise InputError("empty batch")
    normalizer = normalizer or loss_normalizer(case)
    tape, fn = _run(params, case, pd, qd)
    z = fn.z.value
    b = z.shape[0]
    grads = tape.backward(seed=np.full(b, -1.0 / (b * normalizer)))
    return float(-z.mean() / normalizer), grads, z


def loss(params, case, loads, normalizer=None):
    normalizer = normalizer or loss_normalizer(case)
    _, z = proxy_bound(params, case, loads)
    return float(-np.mean(z) / normalizer)


def lipschitz_estimate(params, case, loads, n_dirs=16, delta=1e-4, seed=0):
    """Largest observed ratio |Δξ|/|Δloads| over random load perturbations."""
    rng = np.random.default_rng(seed)
    base = forward_proxy(params, case, loads).to_vector()
    worst = 0.0
    for _ in range(n_dirs):
        dp, dq = rng.normal(size=loads.pd.shape), rng.normal(size=loads.qd.shape)
        norm = math.sqrt(float((dp**2).sum() + (dq**2).sum()))
        dp, dq = dp * delta / norm, dq * delta / norm
        moved = forward_proxy(params, case, InstanceLoads(loads.pd + dp, loads.qd + dq)).to_vector()
        worst = max(worst, float(np.linalg.norm(moved - base)) / delta)
    return worst


def param_function(params, case, loads):
    """Taped scalar ``θ -> mean bound`` over the flat parameter vector."""
    names = params.names
    shapes = [params.arrays[k].shape for k in names]
    bounds = np.cumsum([0] + [int(np.prod(s)) for s in shapes])
    x = normalize_inputs(params, loads.pd, loads.qd)
    pd2, qd2 = np.atleast_2d(loads.pd), np.atleast_2d(loads.qd)

    def fn(theta):
        p = {k: ad.reshape(ad.slice_(theta, a, b), shp)
             for k, shp, a, b in zip(names, shapes, bounds[:-1], bounds[1:])}
        xi = _mlp_heads(params, names, p, x, case)
        y = complete_graph(case, xi, params.config)
        return ad.mean(dual_objective_graph(case, pd2, qd2, y))
    return fn
