"""Radial interaction potentials: V_k = V_hat(|k|) with the standing assumptions.

Every shipped profile is radial, nonnegative, radially decreasing and
dominated by C_V |k|^{-2}; ``validate`` checks those three properties
empirically on the lattice and reports the tightest constant that actually
occurs.  V_hat_0 is outside the domain: no in-scope formula ever sums over
k = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .lattice import ValidationError, norm_sq

KINDS = ("coulomb", "sharp-cutoff-coulomb", "exponential-decay", "power-law")


@dataclass(frozen=True)
class PotentialModel:
    kind: str
    coupling: float = 1.0
    param: float | None = None      # R (cutoff), a (decay rate) or s (exponent)
    C_V: float = field(default=0.0)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown potential kind {self.kind!r}")
        if not np.isfinite(self.coupling) or self.coupling < 0:
            raise ValidationError("coupling must be a nonnegative real")
        if self.kind != "coulomb" and self.param is None:
            raise ValidationError(f"potential kind {self.kind!r} needs a param")
        if self.C_V == 0.0:
            object.__setattr__(self, "C_V", self._default_cv())

    def _default_cv(self) -> float:
        # declared dominating constant; the shipped profiles all satisfy
        # V_k * |k|^2 <= coupling on the lattice
        return float(self.coupling)

    def profile(self, norm: np.ndarray) -> np.ndarray:
        """Vectorized V_hat as a function of |k| (entries with |k|=0 invalid)."""
        r = np.asarray(norm, dtype=np.float64)
        g = self.coupling
        if self.kind == "coulomb":
            return g / (r * r)
        if self.kind == "sharp-cutoff-coulomb":
            return np.where(r <= self.param, g / (r * r), 0.0)
        if self.kind == "exponential-decay":
            return g * np.exp(-self.param * (r - 1.0)) / (r * r)
        return g / r ** self.param          # power-law

    def profile_from_norm_sq(self, n2: np.ndarray) -> np.ndarray:
        return self.profile(np.sqrt(np.asarray(n2, dtype=np.float64)))


def v_hat(model: PotentialModel, k) -> float:
    """V_hat_k for a single lattice vector k != 0."""
    n2 = norm_sq(k)
    if n2 == 0:
        raise ValidationError("V_hat is undefined at k = 0")
    return float(model.profile(math.sqrt(n2)))


@dataclass(frozen=True)
class PotentialReport:
    valid: bool
    empirical_C_V: float
    first_violation: str | None
    K_scan: float


def validate(model: PotentialModel, K_scan: float = 100.0) -> PotentialReport:
    """Check symmetry/positivity, radial monotonicity and |k|^{-2} domination.

    The scan runs over every distinct |k|^2 realized on the lattice up to
    K_scan.  Violations are report content, not exceptions.
    """
    n_max = int(math.floor(K_scan * K_scan + 1e-9))
    from .lattice import _r3_table
    table = _r3_table(1 << max(4, int(n_max).bit_length()))
    realized = np.nonzero(table[1:n_max + 1])[0] + 1   # n with r3(n) > 0
    norms = np.sqrt(realized.astype(np.float64))
    vals = model.profile(norms)

    first = None
    if np.any(vals < 0) or np.any(~np.isfinite(vals)):
        n_bad = realized[np.nonzero((vals < 0) | ~np.isfinite(vals))[0][0]]
        first = f"V_hat < 0 or non-finite at |k|^2 = {n_bad}"
    if first is None and np.any(np.diff(vals) > 1e-15 * np.maximum(vals[:-1], 1e-300)):
        i = np.nonzero(np.diff(vals) > 1e-15 * np.maximum(vals[:-1], 1e-300))[0][0]
        first = (f"not radially decreasing between |k|^2 = {realized[i]} "
                 f"and {realized[i + 1]}")
    ratios = vals * realized            # V_hat * |k|^2
    emp_cv = float(ratios.max()) if len(ratios) else 0.0
    if first is None and model.coupling > 0:
        # domination fails empirically iff the ratio keeps growing; flag any
        # scan point exceeding the declared constant by more than roundoff
        bad = ratios > model.C_V * (1 + 1e-12) + 1e-15
        if np.any(bad):
            n_bad = realized[np.nonzero(bad)[0][0]]
            first = (f"V_hat * |k|^2 = {ratios[np.nonzero(bad)[0][0]]:.6g} exceeds "
                     f"declared C_V = {model.C_V:.6g} at |k|^2 = {n_bad}")
    return PotentialReport(valid=first is None, empirical_C_V=emp_cv,
                           first_violation=first, K_scan=float(K_scan))


def model_from_config(kind: str, coupling: float, param: float | None) -> PotentialModel:
    return PotentialModel(kind=kind, coupling=coupling, param=param)
