"""Truncated power bases for time-varying coefficient functions.

A coefficient function f(t) on a normalized time domain is represented as

    f(t) = a_0 + a_1 t + ... + a_q t^q + sum_h u_h (t - kappa_h)_+^q

The first q+1 terms form the unpenalized polynomial ("fixed") block and the
H truncated terms form the penalized ("random") block. Knots are called
kappa throughout to keep them apart from the quality-adjustment exponents.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np


class BasisError(ValueError):
    pass


def truncated_power(t: float, knot: float, q: int) -> float:
    """(t - knot)_+^q, with (t - knot)_+^0 = 1 for t > knot."""
    if q < 0:
        raise BasisError("order must be non-negative")
    if t <= knot:
        return 0.0
    return float((t - knot) ** q)


def truncated_power_vec(t, knot: float, q: int) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    d = t - knot
    out = np.zeros_like(t)
    mask = d > 0
    out[mask] = d[mask] ** q
    return out


def place_knots(times, H: int) -> np.ndarray:
    """H interior knots at the k/(H+1) quantiles of the distinct times.

    Quantiles use linear interpolation between order statistics
    (numpy's default ``"linear"`` method), applied to the sorted distinct
    values. On distinct values this map is strictly increasing, so ties
    cannot occur; the midpoint nudge below only guards float round-off.
    """
    times = np.asarray(times, dtype=float).ravel()
    if times.size == 0:
        raise BasisError("no observation times")
    if H < 0:
        raise BasisError("knot count must be non-negative")
    if H == 0:
        return np.empty(0)
    distinct = np.unique(times)
    if distinct.size < 2:
        raise BasisError("insufficient distinct times: all times identical")
    if distinct.size < H + 2:
        raise BasisError(
            f"insufficient distinct times: {distinct.size} < H+2 = {H + 2}"
        )
    probs = np.arange(1, H + 1) / (H + 1)
    knots = np.quantile(distinct, probs)
    for k in range(1, H):
        if knots[k] <= knots[k - 1]:
            upper = distinct[distinct > knots[k - 1]][0]
            knots[k] = 0.5 * (knots[k - 1] + upper)
    return knots


@dataclass(frozen=True)
class BasisSpec:
    order_q: int = 3
    knots: tuple = ()
    time_domain: tuple = (0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "knots", tuple(float(k) for k in self.knots))
        object.__setattr__(
            self, "time_domain", tuple(float(v) for v in self.time_domain)
        )
        if self.order_q not in (0, 1, 2, 3):
            raise BasisError(f"order_q must be in 0..3, got {self.order_q}")
        lo, hi = self.time_domain
        if not lo < hi:
            raise BasisError("time domain must have t_min < t_max")
        k = np.asarray(self.knots)
        if k.size and np.any(np.diff(k) <= 0):
            raise BasisError("knots must be strictly ascending")
        if k.size and (k[0] <= lo or k[-1] >= hi):
            raise BasisError("knots must lie strictly inside the time domain")

    @property
    def knot_count_H(self) -> int:
        return len(self.knots)

    @property
    def n_fixed(self) -> int:
        return self.order_q + 1

    @property
    def n_basis(self) -> int:
        return self.order_q + 1 + len(self.knots)

    @classmethod
    def from_times(cls, times, q: int = 3, H: int = 30, time_domain=None):
        """Build a spec with quantile knots over the observed times."""
        times = np.asarray(times, dtype=float)
        if time_domain is None:
            time_domain = (float(times.min()), float(times.max()))
        return cls(order_q=q, knots=tuple(place_knots(times, H)),
                   time_domain=time_domain)

    def to_dict(self) -> dict:
        return {
            "order_q": self.order_q,
            "knot_count_H": self.knot_count_H,
            "knots": list(self.knots),
            "time_domain": list(self.time_domain),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSpec":
        spec = cls(order_q=int(d["order_q"]), knots=tuple(d["knots"]),
                   time_domain=tuple(d["time_domain"]))
        if "knot_count_H" in d and int(d["knot_count_H"]) != spec.knot_count_H:
            raise BasisError("knot_count_H does not match the knot vector")
        return spec

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


def _check_domain(t: np.ndarray, spec: BasisSpec, tol: float = 1e-12):
    lo, hi = spec.time_domain
    if np.any(t < lo - tol) or np.any(t > hi + tol):
        raise BasisError(
            f"time outside basis domain [{lo}, {hi}]; clamp explicitly to extrapolate"
        )


def basis_row(t: float, spec: BasisSpec) -> np.ndarray:
    return basis_matrix(np.array([t], dtype=float), spec)[0]


def basis_matrix(t, spec: BasisSpec) -> np.ndarray:
    """Rows [1, t, ..., t^q, (t-kappa_1)_+^q, ..., (t-kappa_H)_+^q]."""
    t = np.asarray(t, dtype=float).ravel()
    _check_domain(t, spec)
    q = spec.order_q
    cols = [t ** m for m in range(q + 1)]
    cols += [truncated_power_vec(t, k, q) for k in spec.knots]
    return np.column_stack(cols) if cols else np.empty((t.size, 0))
