"""Repair an external dual point into a certified lower bound."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .completion import CompletionConfig, complete, extract_independent
from .errors import CertificationError, InputError
from .formulation import DualSolution, ResidualReport, dual_objective, dual_residuals

CERTIFY_TOL = 1e-9


@dataclass
class CertifiedBound:
    bound: float
    pre: ResidualReport
    post: ResidualReport
    config: CompletionConfig
    repaired: DualSolution
    provenance: dict = field(default_factory=dict)

    def to_json_dict(self, include_dual=True):
        d = {
            "bound": self.bound,
            "pre_repair": self.pre.to_json_dict(),
            "post_repair": self.post.to_json_dict(),
            "pre_max_violation": self.pre.max_violation,
            "post_max_violation": self.post.max_violation,
            "config": self.config.to_json_dict(),
            "provenance": self.provenance,
        }
        if include_dual:
            d["dual"] = self.repaired.to_json_dict()
        return d


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def load_dual(path):
    """Read a ``dual.json`` file; the blocks may sit at top level or under ``"dual"``."""
    with open(path) as fh:
        d = json.load(fh)
    if "dual" in d and isinstance(d["dual"], dict):
        d = d["dual"]
    missing = [k for k in DualSolution.block_names() if k not in d]
    if missing:
        raise InputError(f"dual file lacks blocks: {', '.join(missing)}")
    return DualSolution.from_json_dict(d)


def certify(case, loads, y_ext, config=None, tol=CERTIFY_TOL, provenance=None):
    """Project ``y_ext`` onto its independent part and complete it.

    ``y_ext`` need not be feasible. Raises :class:`CertificationError` when
    the repaired point still violates a dual constraint by more than ``tol``.
    """
    config = config or CompletionConfig()
    y_ext.check_shapes(case)
    for name in y_ext.block_names():
        if not np.all(np.isfinite(getattr(y_ext, name))):
            raise InputError(f"non-finite entries in dual block {name}")
    pre = dual_residuals(case, y_ext)
    y = complete(case, extract_independent(y_ext, config), config)
    post = dual_residuals(case, y)
    if post.max_violation > tol:
        raise CertificationError(
            f"repaired dual violates constraints by {post.max_violation:.3e} > {tol:.1e}")
    prov = {"version": __version__, "case": case.name}
    prov.update(provenance or {})
    bound = dual_objective(case, loads, y)
    return CertifiedBound(float(bound) if np.ndim(bound) == 0 else bound, pre, post, config, y, prov)
