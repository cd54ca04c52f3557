"""Per-unit grid model built from MATPOWER case files.

Buses, branches and (aggregated) generators are stored column-wise as
read-only numpy arrays; ``Bus``/``Branch``/``AggGen`` records are views
for inspection and hand-built test cases.
"""
from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .errors import ParseError, SingularTapError, UnsupportedCostError, ValidationError

log = logging.getLogger(__name__)

ANGLE_LIMIT = math.pi / 2 - 1e-3

DATA_DIR = Path(__file__).parent / "data"


class Bus(NamedTuple):
    bus_id: int
    pd: float
    qd: float
    gs: float
    bs: float
    vmin: float
    vmax: float


class Branch(NamedTuple):
    from_bus: int  # bus index, not id
    to_bus: int
    g: float
    b: float
    g_fr: float = 0.0
    b_fr: float = 0.0
    g_to: float = 0.0
    b_to: float = 0.0
    tap: float = 1.0
    shift: float = 0.0
    rate: float = math.inf
    angmin: float = -ANGLE_LIMIT
    angmax: float = ANGLE_LIMIT


class AggGen(NamedTuple):
    pmin: float
    pmax: float
    qmin: float
    qmax: float
    cost: float


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CaseData:
    """Static per-unit description of a grid with one generator per bus."""

    name: str
    base_mva: float
    bus_ids: np.ndarray
    pd: np.ndarray
    qd: np.ndarray
    gs: np.ndarray
    bs: np.ndarray
    vmin: np.ndarray
    vmax: np.ndarray
    f_bus: np.ndarray
    t_bus: np.ndarray
    g: np.ndarray
    b: np.ndarray
    g_fr: np.ndarray
    b_fr: np.ndarray
    g_to: np.ndarray
    b_to: np.ndarray
    tap: np.ndarray
    shift: np.ndarray
    rate: np.ndarray  # inf marks an unlimited branch
    angmin: np.ndarray
    angmax: np.ndarray
    pmin: np.ndarray
    pmax: np.ndarray
    qmin: np.ndarray
    qmax: np.ndarray
    cost: np.ndarray
    metadata: dict = field(default_factory=dict)

    @classmethod
    def build(cls, name, base_mva, buses, branches, gens, metadata=None):
        """Assemble and validate a case from record lists (indices, per-unit)."""
        n = len(buses)
        if len(gens) != n:
            raise ValidationError(f"need one generator per bus, got {len(gens)} for {n} buses")
        bus = np.array([tuple(x) for x in buses], dtype=float).reshape(n, 7)
        br = np.array([tuple(x) for x in branches], dtype=float).reshape(len(branches), 13)
        gen = np.array([tuple(x) for x in gens], dtype=float).reshape(n, 5)
        case = cls(
            name=name,
            base_mva=float(base_mva),
            bus_ids=_frozen(bus[:, 0], int),
            pd=_frozen(bus[:, 1]), qd=_frozen(bus[:, 2]),
            gs=_frozen(bus[:, 3]), bs=_frozen(bus[:, 4]),
            vmin=_frozen(bus[:, 5]), vmax=_frozen(bus[:, 6]),
            f_bus=_frozen(br[:, 0], int), t_bus=_frozen(br[:, 1], int),
            g=_frozen(br[:, 2]), b=_frozen(br[:, 3]),
            g_fr=_frozen(br[:, 4]), b_fr=_frozen(br[:, 5]),
            g_to=_frozen(br[:, 6]), b_to=_frozen(br[:, 7]),
            tap=_frozen(br[:, 8]), shift=_frozen(br[:, 9]), rate=_frozen(br[:, 10]),
            angmin=_frozen(br[:, 11]), angmax=_frozen(br[:, 12]),
            pmin=_frozen(gen[:, 0]), pmax=_frozen(gen[:, 1]),
            qmin=_frozen(gen[:, 2]), qmax=_frozen(gen[:, 3]), cost=_frozen(gen[:, 4]),
            metadata=dict(metadata or {}),
        )
        case.validate()
        return case

    def validate(self):
        n = self.n_bus
        for idx in (self.f_bus, self.t_bus):
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise ValidationError("branch endpoint references a missing bus")
        if np.any(self.vmin <= 0):
            raise ValidationError("voltage lower bounds must be positive")
        if np.any(self.vmin > self.vmax):
            raise ValidationError("vmin exceeds vmax")
        if np.any(self.pmin > self.pmax) or np.any(self.qmin > self.qmax):
            raise ValidationError("generator bounds are inverted")
        if np.any(~(self.rate > 0)):
            raise ValidationError("thermal limits must be positive or inf")
        if np.any(self.angmin >= self.angmax):
            raise ValidationError("angle bounds must satisfy angmin < angmax")
        if np.any(np.abs(self.angmin) >= math.pi / 2) or np.any(np.abs(self.angmax) >= math.pi / 2):
            raise ValidationError("angle bounds must lie strictly inside (-pi/2, pi/2)")

    @property
    def n_bus(self):
        return len(self.bus_ids)

    @property
    def n_branch(self):
        return len(self.f_bus)

    @property
    def limited(self):
        """Boolean mask of branches that carry a finite thermal limit."""
        return np.isfinite(self.rate)

    @property
    def buses(self):
        return [Bus(int(i), *row) for i, row in zip(self.bus_ids, zip(
            self.pd, self.qd, self.gs, self.bs, self.vmin, self.vmax))]

    @property
    def branches(self):
        cols = (self.f_bus, self.t_bus, self.g, self.b, self.g_fr, self.b_fr, self.g_to,
                self.b_to, self.tap, self.shift, self.rate, self.angmin, self.angmax)
        return [Branch(int(r[0]), int(r[1]), *map(float, r[2:])) for r in zip(*cols)]

    @property
    def gens(self):
        return [AggGen(*map(float, r)) for r in zip(self.pmin, self.pmax, self.qmin, self.qmax, self.cost)]

    @cached_property
    def constants(self):
        return derive_branch_constants(self)

    @cached_property
    def from_incidence(self):
        """Sparse (n_branch, n_bus) map: x @ M sums branch values into from-buses."""
        return _incidence(self.f_bus, self.n_bus)

    @cached_property
    def to_incidence(self):
        return _incidence(self.t_bus, self.n_bus)

    def to_json_dict(self):
        def col(a):
            return [None if not np.isfinite(v) else float(v) for v in a]
        return {
            "name": self.name,
            "base_mva": self.base_mva,
            "bus": {
                "id": [int(i) for i in self.bus_ids],
                "pd": col(self.pd), "qd": col(self.qd), "gs": col(self.gs), "bs": col(self.bs),
                "vmin": col(self.vmin), "vmax": col(self.vmax),
            },
            "branch": {
                "f_bus": [int(i) for i in self.f_bus], "t_bus": [int(i) for i in self.t_bus],
                "g": col(self.g), "b": col(self.b), "g_fr": col(self.g_fr), "b_fr": col(self.b_fr),
                "g_to": col(self.g_to), "b_to": col(self.b_to), "tap": col(self.tap),
                "shift": col(self.shift), "rate": col(self.rate),
                "angmin": col(self.angmin), "angmax": col(self.angmax),
            },
            "gen": {
                "pmin": col(self.pmin), "pmax": col(self.pmax), "qmin": col(self.qmin),
                "qmax": col(self.qmax), "cost": col(self.cost),
            },
            "metadata": self.metadata,
        }

    def dumps(self):
        """Canonical JSON text (sorted keys, unlimited ratings as null)."""
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=1)


def _incidence(idx, n):
    m = len(idx)
    return sp.csr_matrix((np.ones(m), (np.arange(m), idx)), shape=(m, n))


# --------------------------------------------------------------------------
# MATPOWER parsing

_BLOCK_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[")
_SCALAR_RE = re.compile(r"mpc\.(\w+)\s*=\s*([-+0-9.eE]+)\s*;")


def _read_tables(text):
    tables, scalars = {}, {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        line = lines[i].split("%", 1)[0]
        m = _SCALAR_RE.search(line)
        if m:
            scalars[m.group(1)] = float(m.group(2))
        m = _BLOCK_RE.search(line)
        if not m:
            i += 1
            continue
        name, start = m.group(1), i + 1
        rows, width = [], None
        body = line[m.end():]
        while True:
            closed = "]" in body
            chunk = body.split("]", 1)[0]
            for piece in chunk.split(";"):
                tokens = piece.split()
                if not tokens:
                    continue
                try:
                    row = [float(t) for t in tokens]
                except ValueError:
                    raise ParseError(f"non-numeric entry in mpc.{name}", i + 1) from None
                if width is None:
                    width = len(row)
                elif len(row) != width and name != "gencost":
                    raise ParseError(f"mpc.{name} row has {len(row)} columns, expected {width}", i + 1)
                rows.append((i + 1, row))
            if closed:
                break
            i += 1
            if i >= len(lines):
                raise ParseError(f"unterminated table mpc.{name}", start)
            body = lines[i].split("%", 1)[0]
        tables[name] = rows
        i += 1
    return scalars, tables


def _clamp_angle(lo, hi):
    if lo == 0.0 and hi == 0.0:
        lo, hi = -math.inf, math.inf
    lo = max(lo, -ANGLE_LIMIT)
    hi = min(hi, ANGLE_LIMIT)
    return lo, hi


def parse_matpower(text, name="case"):
    """Parse MATPOWER case text into a per-unit :class:`CaseData`.

    Out-of-service branches and generators are dropped and generators are
    aggregated to one unit per bus: bounds are summed and the bus cost is the
    cheapest in-service linear cost. Buses without generation receive a dummy
    unit with zero bounds and zero cost.
    """
    scalars, tables = _read_tables(text)
    for required in ("bus", "gen", "branch", "gencost"):
        if required not in tables:
            raise ParseError(f"missing table mpc.{required}")
    if "baseMVA" not in scalars:
        raise ParseError("missing mpc.baseMVA")
    base = scalars["baseMVA"]

    bus_rows = [(ln, r) for ln, r in tables["bus"] if int(r[1]) != 4]
    for ln, r in tables["bus"]:
        if len(r) < 13:
            raise ParseError("bus rows need 13 columns", ln)
    index = {}
    buses = []
    for k, (ln, r) in enumerate(bus_rows):
        bid = int(r[0])
        if bid in index:
            raise ValidationError(f"duplicate bus id {bid} (line {ln})")
        index[bid] = k
        buses.append(Bus(bid, r[2] / base, r[3] / base, r[4] / base, r[5] / base, r[12], r[11]))

    def lookup(bid, ln):
        if bid not in index:
            raise ValidationError(f"line {ln}: bus {bid} referenced but not defined")
        return index[bid]

    branches = []
    dropped_branches = 0
    for ln, r in tables["branch"]:
        if len(r) < 11:
            raise ParseError("branch rows need at least 11 columns", ln)
        if r[10] == 0:
            dropped_branches += 1
            continue
        f, t = lookup(int(r[0]), ln), lookup(int(r[1]), ln)
        z = complex(r[2], r[3])
        if z == 0:
            raise ValidationError(f"line {ln}: zero series impedance")
        y = 1 / z
        tap = r[8] if r[8] != 0 else 1.0
        angmin = math.radians(r[11]) if len(r) > 11 else -math.inf
        angmax = math.radians(r[12]) if len(r) > 12 else math.inf
        angmin, angmax = _clamp_angle(angmin, angmax)
        rate = r[5] / base if r[5] > 0 else math.inf
        branches.append(Branch(f, t, y.real, y.imag, 0.0, r[4] / 2, 0.0, r[4] / 2,
                               tap, math.radians(r[9]), rate, angmin, angmax))

    gen_rows = tables["gen"]
    cost_rows = tables["gencost"]
    if len(cost_rows) < len(gen_rows):
        raise ParseError("mpc.gencost has fewer rows than mpc.gen")
    agg = [[0.0, 0.0, 0.0, 0.0, []] for _ in buses]
    dropped_gens = 0
    for (ln, g), (cln, c) in zip(gen_rows, cost_rows):
        if len(g) < 10:
            raise ParseError("gen rows need at least 10 columns", ln)
        if g[7] <= 0:
            dropped_gens += 1
            continue
        k = lookup(int(g[0]), ln)
        if int(c[0]) != 2:
            raise UnsupportedCostError(f"line {cln}: only polynomial costs are supported")
        ncoef = int(c[3])
        coefs = c[4:4 + ncoef]
        if len(coefs) != ncoef:
            raise ParseError("gencost row shorter than its coefficient count", cln)
        if ncoef > 2 and any(v != 0 for v in coefs[:-2]):
            raise UnsupportedCostError(f"line {cln}: nonlinear cost terms are not supported")
        c1 = coefs[-2] if ncoef >= 2 else 0.0
        a = agg[k]
        a[0] += g[9] / base
        a[1] += g[8] / base
        a[2] += g[4] / base
        a[3] += g[3] / base
        a[4].append(c1 * base)

    gens, multi, flagged = [], [], []
    for k, (pmin, pmax, qmin, qmax, costs) in enumerate(agg):
        c = min(costs) if costs else 0.0
        if len(costs) > 1:
            multi.append(int(buses[k].bus_id))
            if pmin < 0 and len(set(costs)) > 1:
                flagged.append(int(buses[k].bus_id))
                log.warning("bus %d: negative pmin with heterogeneous costs; using min cost",
                            buses[k].bus_id)
        gens.append(AggGen(pmin, pmax, qmin, qmax, c))

    meta = {
        "aggregation": "sum of bounds, minimum linear cost per bus",
        "multi_generator_buses": multi,
        "negative_pmin_flagged": flagged,
        "dropped_branches": dropped_branches,
        "dropped_generators": dropped_gens,
    }
    return CaseData.build(name, base, buses, branches, gens, meta)


def load_case(path_or_name):
    """Load a case from a path, a bundled file, or a PGLib name such as ``case118``."""
    p = Path(path_or_name)
    if p.exists():
        return parse_matpower(p.read_text(), name=p.stem)
    name = str(path_or_name)
    if name.endswith(".m"):
        name = Path(name[:-2]).name
    candidates = [name, f"pglib_opf_{name}", f"pglib_opf_{name}_ieee", f"pglib_opf_{name}_pegase"]
    m = re.fullmatch(r"(pegase|ieee)(\d+)", name)
    if m:
        candidates.append(f"pglib_opf_case{m.group(2)}_{m.group(1)}")
    for cand in candidates:
        f = DATA_DIR / f"{cand}.m"
        if f.exists():
            return parse_matpower(f.read_text(), name=cand)
    try:
        import pypglib
    except ImportError:
        pypglib = None
    if pypglib is not None:
        for cand in candidates:
            f = Path(pypglib.PATH_PYPGLIB_OPF) / f"{cand}.m"
            if f.exists():
                return parse_matpower(f.read_text(), name=cand)
    raise FileNotFoundError(f"no case file or bundled case named {path_or_name!r}")


# --------------------------------------------------------------------------
# Branch constants

_CONST_NAMES = ("pf_w", "pf_r", "pf_i", "qf_w", "qf_r", "qf_i",
                "pt_w", "pt_r", "pt_i", "qt_w", "qt_r", "qt_i")


@dataclass(frozen=True)
class BranchConstants:
    """Real coefficients of the lifted flow expressions, one entry per branch.

    Forward flows use ``w_i``, reverse flows ``w_j``; ``r``/``i`` multiply
    ``w_re``/``w_im`` of the branch.
    """

    pf_w: np.ndarray
    pf_r: np.ndarray
    pf_i: np.ndarray
    qf_w: np.ndarray
    qf_r: np.ndarray
    qf_i: np.ndarray
    pt_w: np.ndarray
    pt_r: np.ndarray
    pt_i: np.ndarray
    qt_w: np.ndarray
    qt_r: np.ndarray
    qt_i: np.ndarray

    def flows(self, case, w, wr, wi):
        """Evaluate (pf, qf, pt, qt) from lifted voltage variables."""
        wf, wt = w[..., case.f_bus], w[..., case.t_bus]
        pf = self.pf_w * wf + self.pf_r * wr + self.pf_i * wi
        qf = self.qf_w * wf + self.qf_r * wr + self.qf_i * wi
        pt = self.pt_w * wt + self.pt_r * wr + self.pt_i * wi
        qt = self.qt_w * wt + self.qt_r * wr + self.qt_i * wi
        return pf, qf, pt, qt


def derive_branch_constants(case):
    if np.any(case.tap <= 0):
        raise SingularTapError("tap magnitude must be positive")
    g, b, tau, s = case.g, case.b, case.tap, case.shift
    cs, sn = np.cos(s), np.sin(s)
    # forward: S = (Y + Yc_fr)^* w_i / tau^2 - Y^* (w_re + j w_im) / T
    # reverse: S = (Y + Yc_to)^* w_j - Y^* (w_re - j w_im) / T^*
    vals = dict(
        pf_w=(g + case.g_fr) / tau**2,
        pf_r=(-g * cs + b * sn) / tau,
        pf_i=-(g * sn + b * cs) / tau,
        qf_w=-(b + case.b_fr) / tau**2,
        qf_r=(g * sn + b * cs) / tau,
        qf_i=(-g * cs + b * sn) / tau,
        pt_w=g + case.g_to,
        pt_r=-(g * cs + b * sn) / tau,
        pt_i=(b * cs - g * sn) / tau,
        qt_w=-(b + case.b_to),
        qt_r=(b * cs - g * sn) / tau,
        qt_i=(g * cs + b * sn) / tau,
    )
    return BranchConstants(**{k: _frozen(vals[k]) for k in _CONST_NAMES})


def complex_branch_flows(case, vf, vt):
    """Branch flows from complex bus voltages via the pi-model admittances.

    Independent of :class:`BranchConstants`; used as an oracle for them.
    Returns ``(pf, qf, pt, qt)``.
    """
    y = case.g + 1j * case.b
    ratio = case.tap * np.exp(1j * case.shift)
    i_f = (y + case.g_fr + 1j * case.b_fr) / case.tap**2 * vf - y / np.conj(ratio) * vt
    i_t = (y + case.g_to + 1j * case.b_to) * vt - y / ratio * vf
    s_f, s_t = vf * np.conj(i_f), vt * np.conj(i_t)
    return s_f.real, s_f.imag, s_t.real, s_t.imag


def count_independent(case, config):
    """Number of predicted dual coordinates for a completion configuration."""
    per_branch = 8 if config.omega_repr == "rectangular" else 7
    return 2 * case.n_bus + per_branch * case.n_branch


def case_stats(case):
    return {
        "name": case.name,
        "n_bus": case.n_bus,
        "n_branch": case.n_branch,
        "n_indep_polar": 2 * case.n_bus + 7 * case.n_branch,
        "n_indep_rect": 2 * case.n_bus + 8 * case.n_branch,
        "total_pd": float(case.pd.sum()),
        "unlimited_branches": int((~case.limited).sum()),
    }
