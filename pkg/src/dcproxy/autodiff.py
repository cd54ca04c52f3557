"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records one node per array operation (vectorized over batch
and branch/bus axes), so tape length grows with the number of operations in
the model, not with the number of array entries.

    tape = Tape()
    out = tape.forward(lambda x: ad.sqrt(x * x + 1.0), np.array([3.0]))
    (grad,) = tape.backward()

Conventions at non-differentiable points: ``relu`` and ``abs`` use slope 0
at 0; ``sqrt`` floors the denominator of its derivative at ``SQRT_EPS``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NonFiniteError, TapeStateError

SQRT_EPS = 1e-12


class Var:
    """Handle to a tape node holding a numpy value."""

    __slots__ = ("tape", "index", "value")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, tape, index, value):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(node={self.index}, shape={self.value.shape})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)


@dataclass
class _Node:
    op: str
    parents: tuple
    vjp: object  # g -> tuple of parent adjoints (None for constants)


class Tape:
    def __init__(self, check_finite=True):
        self.check_finite = check_finite
        self.reset()

    def reset(self):
        self.nodes = []
        self.inputs = []
        self.output = None
        self.state = "recording"

    def __len__(self):
        return len(self.nodes)

    def input(self, value):
        value = np.array(value, dtype=float)
        v = self._push("input", value, (), None)
        self.inputs.append(v)
        return v

    def _push(self, op, value, parents, vjp):
        if self.state == "consumed":
            raise TapeStateError("tape already differentiated; call reset() or forward()")
        idx = len(self.nodes)
        self.nodes.append(_Node(op, parents, vjp))
        return Var(self, idx, value)

    def record(self, op, value, parents, vjp):
        if self.check_finite and not np.all(np.isfinite(value)):
            if all(np.all(np.isfinite(p.value)) for p in parents if isinstance(p, Var)):
                raise NonFiniteError(len(self.nodes), op)
        idx = tuple(p.index if isinstance(p, Var) else None for p in parents)
        return self._push(op, value, idx, vjp)

    def forward(self, fn, *inputs):
        """Reset, evaluate ``fn`` on fresh input nodes and return the output value."""
        self.reset()
        xs = [self.input(x) for x in inputs]
        out = fn(*xs)
        if not isinstance(out, Var):
            raise InputError("forward function must return a tape variable")
        self.output = out
        self.state = "forwarded"
        return out.value

    def backward(self, seed=None, output=None):
        """Adjoints of ``output`` (default: the forward output) w.r.t. every input.

        Each forward pass supports exactly one backward pass.
        """
        if output is None:
            if self.state != "forwarded" or self.output is None:
                raise TapeStateError("backward called before forward")
            output = self.output
        elif self.state == "consumed":
            raise TapeStateError("tape already differentiated")
        if output.tape is not self:
            raise InputError("output belongs to another tape")
        grads = [None] * len(self.nodes)
        grads[output.index] = (np.ones_like(output.value) if seed is None
                               else np.broadcast_to(np.asarray(seed, dtype=float), output.shape).copy())
        for i in range(output.index, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            for p, pg in zip(node.parents, node.vjp(g)):
                if p is None or pg is None:
                    continue
                grads[p] = pg if grads[p] is None else grads[p] + pg
        self.state = "consumed"
        return [grads[v.index] if grads[v.index] is not None else np.zeros_like(v.value)
                for v in self.inputs]


# --------------------------------------------------------------------------
# operations

def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise InputError("operation needs at least one tape variable")


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _lift(x):
    return x if isinstance(x, Var) else None


def add(a, b):
    av, bv = _val(a), _val(b)
    if not isinstance(a, Var) and not isinstance(b, Var):
        return av + bv
    return _tape_of(a, b).record("add", av + bv, (a, b),
                                 lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = _val(a), _val(b)
    if not isinstance(a, Var) and not isinstance(b, Var):
        return av - bv
    return _tape_of(a, b).record("sub", av - bv, (a, b),
                                 lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv = _val(a), _val(b)
    if not isinstance(a, Var) and not isinstance(b, Var):
        return av * bv
    return _tape_of(a, b).record(
        "mul", av * bv, (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape) if isinstance(a, Var) else None,
                   _unbroadcast(g * av, bv.shape) if isinstance(b, Var) else None))


def div(a, b):
    av, bv = _val(a), _val(b)
    if not isinstance(a, Var) and not isinstance(b, Var):
        return av / bv
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv
    return _tape_of(a, b).record(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape) if isinstance(a, Var) else None,
                   _unbroadcast(-g * out / bv, bv.shape) if isinstance(b, Var) else None))


def neg(a):
    return a.tape.record("neg", -a.value, (a,), lambda g: (-g,))


def _unary(name, a, value, dfun):
    return a.tape.record(name, value, (a,), lambda g: (g * dfun(),))


def square(a):
    x = a.value
    return _unary("square", a, x * x, lambda: 2.0 * x)


def sqrt(a):
    out = np.sqrt(a.value)
    return _unary("sqrt", a, out, lambda: 0.5 / np.maximum(out, SQRT_EPS))


def relu(a):
    x = a.value
    return _unary("relu", a, np.maximum(x, 0.0), lambda: (x > 0).astype(float))


def abs_(a):
    x = a.value
    return _unary("abs", a, np.abs(x), lambda: np.sign(x))


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def softplus(a):
    x = a.value
    return _unary("softplus", a, np.logaddexp(0.0, x), lambda: _sigmoid(x))


def sigmoid(a):
    s = _sigmoid(a.value)
    return _unary("sigmoid", a, s, lambda: s * (1.0 - s))


def sin(a):
    x = a.value
    return _unary("sin", a, np.sin(x), lambda: np.cos(x))


def cos(a):
    x = a.value
    return _unary("cos", a, np.cos(x), lambda: -np.sin(x))


def atan2(y, x):
    yv, xv = _val(y), _val(x)
    r2 = xv * xv + yv * yv
    safe = np.where(r2 > 0, r2, 1.0)

    def vjp(g):
        gy = np.where(r2 > 0, g * xv / safe, 0.0)
        gx = np.where(r2 > 0, -g * yv / safe, 0.0)
        return (_unbroadcast(gy, yv.shape) if isinstance(y, Var) else None,
                _unbroadcast(gx, xv.shape) if isinstance(x, Var) else None)
    return _tape_of(y, x).record("atan2", np.arctan2(yv, xv), (y, x), vjp)


def hypot(a, b):
    return sqrt(square(a) + square(b))


def maximum0(a):
    return relu(a)


def where(mask, a, b):
    """Select ``a`` where ``mask`` else ``b``; the mask is a constant."""
    mask = np.asarray(mask, dtype=bool)
    av, bv = _val(a), _val(b)
    out = np.where(mask, av, bv)
    return _tape_of(a, b).record(
        "where", out, (a, b),
        lambda g: (_unbroadcast(np.where(mask, g, 0.0), av.shape) if isinstance(a, Var) else None,
                   _unbroadcast(np.where(mask, 0.0, g), bv.shape) if isinstance(b, Var) else None))


def matmul(a, b):
    """Dense product for 1-D/2-D operands."""
    av, bv = _val(a), _val(b)

    def vjp(g):
        ga = gb = None
        if isinstance(a, Var):
            ga = g @ bv.T if bv.ndim == 2 else np.multiply.outer(g, bv)
        if isinstance(b, Var):
            if av.ndim == 1:
                gb = np.multiply.outer(av, g)
            else:
                gb = av.T @ g
        return ga, gb
    return _tape_of(a, b).record("matmul", av @ bv, (a, b), vjp)


def spmm(a, m):
    """``a @ m`` with a constant scipy sparse matrix ``m``."""
    mt = m.T.tocsr()
    return a.tape.record("spmm", a.value @ m, (a,), lambda g: (g @ mt,))


def take(a, idx):
    """Gather entries of the last axis."""
    idx = np.asarray(idx)
    x = a.value

    def vjp(g):
        out = np.zeros_like(x)
        np.add.at(np.moveaxis(out, -1, 0), idx, np.moveaxis(g, -1, 0))
        return (out,)
    return a.tape.record("take", x[..., idx], (a,), vjp)


def reshape(a, shape):
    old = a.value.shape
    return a.tape.record("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def slice_(a, start, stop):
    """Contiguous slice of the last axis."""
    x = a.value

    def vjp(g):
        out = np.zeros_like(x)
        out[..., start:stop] = g
        return (out,)
    return a.tape.record("slice", x[..., start:stop], (a,), vjp)


def sum_(a, axis=None):
    x = a.value

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)
    return a.tape.record("sum", np.sum(x, axis=axis), (a,), vjp)


def mean(a, axis=None):
    n = a.value.size if axis is None else a.value.shape[axis]
    return sum_(a, axis) * (1.0 / n)


def concat(parts, axis=-1):
    vals = [_val(p) for p in parts]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        pieces = np.split(g, sizes, axis=axis)
        return tuple(pc if isinstance(p, Var) else None for p, pc in zip(parts, pieces))
    return _tape_of(*parts).record("concat", np.concatenate(vals, axis=axis), tuple(parts), vjp)


# --------------------------------------------------------------------------
# finite-difference checking

@dataclass
class GradReport:
    coords: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray
    kink: np.ndarray
    h: float
    extra: dict = field(default_factory=dict)

    @property
    def smooth(self):
        return ~self.kink

    @property
    def max_rel_err(self):
        e = self.rel_err[self.smooth]
        return float(e.max()) if e.size else 0.0

    @property
    def worst(self):
        if not self.smooth.any():
            return -1
        e = np.where(self.smooth, self.rel_err, -np.inf)
        return int(self.coords[int(np.argmax(e))])

    @property
    def kink_fraction(self):
        return float(self.kink.mean()) if self.kink.size else 0.0

    def to_json_dict(self):
        return {
            "h": self.h,
            "coords": self.coords.tolist(),
            "analytic": self.analytic.tolist(),
            "numeric": self.numeric.tolist(),
            "rel_err": self.rel_err.tolist(),
            "kink": self.kink.tolist(),
            "max_rel_err": self.max_rel_err,
            "worst_index": self.worst,
            "kink_fraction": self.kink_fraction,
            **self.extra,
        }


def gradcheck(fn, point, h=1e-5, n_coords=64, seed=0, kink_tol=2.5e-6):
    """Compare tape gradients of scalar ``fn`` with central differences.

    ``fn`` maps a tape variable (flat vector) to a scalar tape variable;
    finite differences use forward passes only. Coordinates where the one-sided slopes
    disagree in a way a smooth function cannot produce are flagged as kinks:
    for smooth ``f`` the second difference ``d(h) = (f(x+h) - 2f(x) + f(x-h)) / h``
    scales linearly in ``h``, so ``d(2h) - 2 d(h)`` vanishes to third order.
    A slope jump ``J`` within ``h`` of ``x`` leaves at least ``J/4`` in one of
    the pairs ``(h, 2h)``, ``(2h, 4h)``. Jumps too small to be flagged are
    too small to push the central difference past ``4 * kink_tol``
    relative error; the threshold also carries a roundoff floor.
    """
    if h <= 0:
        raise InputError("step h must be positive")
    x0 = np.array(point, dtype=float).reshape(-1)
    tape = Tape()
    tape.forward(fn, x0)
    (grad,) = tape.backward()
    grad = np.asarray(grad).reshape(-1)
    rng = np.random.default_rng(seed)
    if x0.size <= n_coords:
        coords = np.arange(x0.size)
    else:
        coords = np.sort(rng.choice(x0.size, size=n_coords, replace=False))

    def f(x):
        t = Tape(check_finite=False)
        return float(fn(t.input(x)).value)

    f0 = f(x0)
    eps = np.finfo(float).eps
    numeric, kink = np.empty(coords.size), np.zeros(coords.size, dtype=bool)
    for n, c in enumerate(coords):
        vals = {}
        for s in (h, 2 * h, 4 * h):
            for sgn in (1, -1):
                x = x0.copy()
                x[c] += sgn * s
                vals[sgn * s] = f(x)
        numeric[n] = (vals[h] - vals[-h]) / (2 * h)
        fwd, bwd = (vals[h] - f0) / h, (f0 - vals[-h]) / h
        d = {s: (vals[s] - 2 * f0 + vals[-s]) / s for s in (h, 2 * h, 4 * h)}
        tol = kink_tol * (1 + abs(fwd) + abs(bwd)) + 64 * eps * (1 + abs(f0)) / h
        kink[n] = abs(d[2 * h] - 2 * d[h]) > tol or abs(d[4 * h] - 2 * d[2 * h]) > tol
    analytic = grad[coords]
    rel = np.abs(analytic - numeric) / (1 + np.abs(analytic) + np.abs(numeric))
    return GradReport(coords, analytic, numeric, rel, kink, h)
