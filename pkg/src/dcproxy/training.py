"""Instance sampling, self-supervised training, dual ascent and evaluation."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .completion import CompletionConfig, IndependentVars, complete, complete_graph, dual_objective_graph
from .errors import InputError, NonFiniteError
from .formulation import InstanceLoads, dual_objective, geometric_mean, optimality_gap
from .proxy import DEFAULT_SCALES, loss_and_grad, loss_normalizer, proxy_bound

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplerConfig:
    n_instances: int = 1000
    alpha_low: float = 0.8
    alpha_high: float = 1.12
    sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.alpha_low <= self.alpha_high:
            raise ValueError("need 0 < alpha_low <= alpha_high")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")

    def to_json_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def sample_instances(case, cfg):
    """Scale nominal loads by a system-wide uniform factor and per-bus noise.

    The multiplicative noise is mean-one lognormal and the same vector
    multiplies active and reactive demand, so each bus keeps its power factor.
    """
    rng = np.random.default_rng(cfg.seed)
    alpha = rng.uniform(cfg.alpha_low, cfg.alpha_high, size=cfg.n_instances)
    eta = rng.lognormal(-cfg.sigma**2 / 2, cfg.sigma, size=(cfg.n_instances, case.n_bus))
    scale = alpha[:, None] * eta
    return InstanceLoads(scale * case.pd, scale * case.qd)


def split_dataset(instances, fractions=(0.9, 0.05, 0.05), seed=0):
    """Seeded disjoint split; the test part takes the rounding remainder."""
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError("fractions must be three nonnegative numbers summing to 1")
    n = len(instances)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    parts = np.split(perm, [n_train, n_train + n_val])
    return tuple(instances[np.sort(p)] for p in parts)


def write_jsonl(path, loads):
    with open(path, "w") as fh:
        for k in range(len(loads)):
            fh.write(json.dumps(loads[k].to_json_dict()) + "\n")


def read_jsonl(path):
    items = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                items.append(InstanceLoads.from_json_dict(json.loads(line)))
    return InstanceLoads.stack(items)


# --------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 200
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    fractions: tuple = (0.9, 0.05, 0.05)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1) > 1e-9 or min(self.fractions) < 0:
            raise ValueError("fractions must be three nonnegative numbers summing to 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs nonnegative")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")

    def to_json_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["fractions"] = list(self.fractions)
        return d


class Adam:
    def __init__(self, values, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(v) for v in values]
        self.v = [np.zeros_like(v) for v in values]
        self.t = 0

    def step(self, values, grads):
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        out = []
        for x, g, m, v in zip(values, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            out.append(x - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps))
        return out


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_bound: float = -math.inf
    aborted: bool = False
    abort_reason: str = ""
    seconds: float = 0.0
    split_sizes: tuple = (0, 0, 0)

    @property
    def val_bounds(self):
        return [e["val_mean_bound"] for e in self.epochs]

    def best_so_far(self):
        return list(np.maximum.accumulate(self.val_bounds)) if self.epochs else []

    def to_json_dict(self):
        return {"epochs": self.epochs, "best_epoch": self.best_epoch,
                "best_val_bound": self.best_val_bound, "aborted": self.aborted,
                "abort_reason": self.abort_reason, "seconds": self.seconds,
                "split_sizes": list(self.split_sizes), "best_so_far": self.best_so_far()}


def _mean_bound(params, case, loads, chunk=1024):
    zs = [proxy_bound(params, case, loads[k:k + chunk])[1] for k in range(0, len(loads), chunk)]
    return float(np.mean(np.concatenate(zs)))


def train(params, case, dataset, tcfg=None, val=None):
    """Adam on the self-supervised loss; returns the best-validation parameters.

    ``dataset`` is split with ``tcfg.fractions`` and ``tcfg.seed`` unless an
    explicit ``val`` set is given, in which case all of ``dataset`` trains.
    Epoch 0 records the initial parameters, so the result never validates
    worse than the starting point.
    """
    tcfg = tcfg or TrainConfig()
    if len(dataset) == 0:
        raise InputError("empty training set")
    if val is None:
        tr, val, te = split_dataset(dataset, tcfg.fractions, tcfg.seed)
        if len(val) == 0:
            val = tr
    else:
        tr, te = dataset, dataset[:0]
    hist = TrainHistory(split_sizes=(len(tr), len(val), len(te)))
    norm = loss_normalizer(case)
    rng = np.random.default_rng(tcfg.seed)
    opt = Adam(params.values(), tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
    best, cur = params.copy(), params
    t0 = time.perf_counter()
    hist.best_val_bound = _mean_bound(params, case, val)
    hist.epochs.append({"epoch": 0, "train_loss": None, "val_mean_bound": hist.best_val_bound,
                        "seconds": 0.0})
    for epoch in range(1, tcfg.epochs + 1):
        perm = rng.permutation(len(tr))
        losses = []
        try:
            for k in range(0, len(tr), tcfg.batch_size):
                idx = np.sort(perm[k:k + tcfg.batch_size])
                L, grads, _ = loss_and_grad(cur, case, tr.pd[idx], tr.qd[idx], norm)
                if not (math.isfinite(L) and all(np.all(np.isfinite(g)) for g in grads)):
                    raise NonFiniteError(-1, "loss")
                cur = cur.with_values(opt.step(cur.values(), grads))
                losses.append(L)
            vb = _mean_bound(cur, case, val)
            if not math.isfinite(vb):
                raise NonFiniteError(-1, "validation bound")
        except (NonFiniteError, FloatingPointError) as exc:
            hist.aborted, hist.abort_reason = True, f"epoch {epoch}: {exc}"
            log.warning("training diverged (%s); returning last good checkpoint", exc)
            break
        hist.epochs.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                            "val_mean_bound": vb, "seconds": time.perf_counter() - t0})
        if vb > hist.best_val_bound:
            hist.best_val_bound, hist.best_epoch, best = vb, epoch, cur.copy()
        log.info("epoch %d loss %.6f val bound %.4f", epoch, np.mean(losses), vb)
    hist.seconds = time.perf_counter() - t0
    return best, hist


# --------------------------------------------------------------------------
# instance-wise dual ascent

@dataclass
class AscentResult:
    xi: IndependentVars
    bound: float
    trajectory: list  # best-so-far bound after each step (index 0 = start)
    iterates: list  # bound of the accepted iterate after each step
    steps: list  # step length used at each step (0 when no trial improved)

    def to_json_dict(self):
        return {"bound": self.bound, "trajectory": self.trajectory, "iterates": self.iterates,
                "steps": self.steps, "xi": self.xi.to_json_dict()}


def _project(case, xi, config):
    """Map an arbitrary point onto admissible independent values."""
    d = {k: np.array(getattr(xi, k)) for k in xi.block_names()}
    for k in ("mu_th_lo", "mu_th_hi"):
        d[k] = np.maximum(d[k], 0.0)
    if config.omega_repr == "polar":
        d["phi"] = np.clip(d["phi"], *config.phi_bounds)
    else:
        d["om_f"], d["om_t"] = np.maximum(d["om_f"], 0.0), np.maximum(d["om_t"], 0.0)
    off = ~case.limited
    if off.any():
        for name, price, bus in (("flow_pf", "lam_p", case.f_bus), ("flow_qf", "lam_q", case.f_bus),
                                 ("flow_pt", "lam_p", case.t_bus), ("flow_qt", "lam_q", case.t_bus)):
            fill = 0.0 if config.flow_choice == "nu_flows" else -d[price][..., bus]
            d[name] = np.where(off, fill, d[name])
    return IndependentVars(**d)


def bound_and_grad(case, loads, xi, config):
    """Dual bound of ``complete(xi)`` and its gradient w.r.t. every block of ``xi``."""
    names = xi.block_names()
    pd, qd = np.asarray(loads.pd, float), np.asarray(loads.qd, float)

    def fn(*vals):
        y = complete_graph(case, dict(zip(names, vals)), config)
        return dual_objective_graph(case, pd, qd, y)
    tape = ad.Tape()
    z = tape.forward(fn, *[getattr(xi, k) for k in names])
    grads = tape.backward()
    return float(z), IndependentVars(**dict(zip(names, grads)))


def _bound(case, loads, xi, config):
    return float(dual_objective(case, loads, complete(case, xi, config)))


def _block_scales(xi, scales=None):
    scales = scales or DEFAULT_SCALES
    return np.concatenate([np.full(np.shape(getattr(xi, k))[-1], float(scales[k]))
                           for k in xi.block_names()])


def dual_ascent(case, loads, xi0=None, steps=500, config=None, step_rule="adam", step=0.3,
                halvings=5, patience=20, scales=None):
    """Projected gradient ascent on the completed dual bound of one instance.

    Coordinates are divided by the proxy head scales so that prices, flows
    and angles move on comparable scales. Two step rules:

    ``"adam"``
        Adam-preconditioned steps of fixed length ``step``; the length is
        halved whenever the best bound has not improved for ``patience``
        steps, at most ``halvings`` times. Iterates may go down, which lets
        the method leave the kink at the origin.
    ``"halving"``
        Plain gradient steps that try ``step, step/2, ..., step/2**halvings``
        and take the first improving trial; with none, the iterate stays and
        the base step is halved. Iterates never go down.

    Every iterate is completed, so every recorded bound is valid; the
    best-so-far trajectory is nondecreasing.
    """
    config = config or CompletionConfig()
    if steps < 0:
        raise InputError("steps must be nonnegative")
    if step_rule not in ("adam", "halving"):
        raise ValueError("step_rule must be 'adam' or 'halving'")
    xi = _project(case, xi0 if xi0 is not None else IndependentVars.zeros(case, config), config)
    sc = _block_scales(xi, scales)
    z, grad = bound_and_grad(case, loads, xi, config)
    best_xi, best = xi, z
    traj, iters, used = [z], [z], []
    m = np.zeros_like(sc)
    v = np.zeros_like(sc)
    b1, b2 = 0.9, 0.999
    since = n_halved = 0
    for t in range(1, steps + 1):
        u = xi.to_vector() / sc
        g = grad.to_vector() * sc
        if step_rule == "adam":
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            d = (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + 1e-8)
            xi = _project(case, IndependentVars.from_vector(case, (u + step * d) * sc, config), config)
            z, grad = bound_and_grad(case, loads, xi, config)
            used.append(step)
            if z > best:
                since = 0
            else:
                since += 1
                if since >= patience and n_halved < halvings:
                    step, since, n_halved = 0.5 * step, 0, n_halved + 1
        else:
            gmax = float(np.max(np.abs(g)))
            accepted, alpha = 0.0, step
            if gmax > 0 and math.isfinite(gmax):
                for _h in range(halvings + 1):
                    trial = _project(case, IndependentVars.from_vector(
                        case, (u + alpha * g / gmax) * sc, config), config)
                    zt = _bound(case, loads, trial, config)
                    if zt > z:
                        accepted, xi = alpha, trial
                        break
                    alpha *= 0.5
            if accepted:
                z, grad = bound_and_grad(case, loads, xi, config)
            else:
                step *= 0.5
            used.append(accepted)
        if z > best:
            best, best_xi = z, xi
        traj.append(best)
        iters.append(z)
    return AscentResult(best_xi, best, traj, iters, used)


# --------------------------------------------------------------------------
# evaluation

@dataclass
class EvalReport:
    bounds: np.ndarray
    gaps: np.ndarray = None
    batch_seconds: list = field(default_factory=list)
    batch_size: int = 0
    config: dict = field(default_factory=dict)
    max_residual: float = 0.0

    @property
    def has_gaps(self):
        return self.gaps is not None

    def stats(self):
        out = {"n": int(self.bounds.size), "mean_bound": float(self.bounds.mean()),
               "max_residual": self.max_residual,
               "mean_batch_seconds": float(np.mean(self.batch_seconds)) if self.batch_seconds else 0.0}
        if self.has_gaps:
            gm, clamped = geometric_mean(np.maximum(self.gaps, 0.0))
            out.update(mean_gap=float(self.gaps.mean()), std_gap=float(self.gaps.std()),
                       max_gap=float(self.gaps.max()), geomean_gap=gm, geomean_clamped=clamped)
        return out

    def to_json_dict(self):
        return {"stats": self.stats(), "bounds": self.bounds.tolist(),
                "gaps": None if self.gaps is None else self.gaps.tolist(),
                "batch_seconds": self.batch_seconds, "batch_size": self.batch_size,
                "config": self.config}

    def table_row(self, name=""):
        s = self.stats()
        if not self.has_gaps:
            return f"{name} mean bound {s['mean_bound']:.6f}"
        return (f"{name} gap% mean {100 * s['mean_gap']:.4f} std {100 * s['std_gap']:.4f} "
                f"max {100 * s['max_gap']:.4f}")


def evaluate(params, case, testset, refs=None, batch_size=512):
    """Bounds for every test instance, with gap statistics when ``refs`` is given."""
    from .formulation import dual_residuals

    if len(testset) == 0:
        raise InputError("empty test set")
    bounds, secs, worst = [], [], 0.0
    for k in range(0, len(testset), batch_size):
        t0 = time.perf_counter()
        y, z = proxy_bound(params, case, testset[k:k + batch_size])
        secs.append(time.perf_counter() - t0)
        bounds.append(np.atleast_1d(z))
        worst = max(worst, dual_residuals(case, y).max_violation)
    bounds = np.concatenate(bounds)
    gaps = None
    if refs is not None:
        refs = np.asarray(refs, dtype=float)
        if refs.shape != bounds.shape or not np.all(np.isfinite(refs)):
            raise InputError("reference objectives missing or misaligned with the test set")
        gaps = optimality_gap(refs, bounds)
    cfg = {"completion": params.config.to_json_dict(), "arch": params.arch.to_json_dict()}
    return EvalReport(bounds, np.atleast_1d(gaps) if gaps is not None else None, secs,
                      batch_size, cfg, float(worst))
