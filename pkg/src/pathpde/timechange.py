"""Piecewise-linear time changes.

A time change between anchor times t and s is an increasing bijection
[0, t] -> [0, s], extended past t by l(r) = r - t + s so the tail is a
rigid shift.  We represent the bijection by its knots and interpolate
linearly; sup |l - I| is then attained at a knot (the tail contributes
the constant s - t, already present at the knot r = t).

The degenerate target s = 0 keeps a single admissible map, l(r) = 0 on
[0, t] with the same shifted tail; it has no inverse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError

__all__ = ["TimeChange", "time_change", "identity_timechange"]


@dataclass(frozen=True)
class TimeChange:
    t: float
    s: float
    knots_r: np.ndarray
    knots_y: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.knots_r, dtype=float)
        y = np.asarray(self.knots_y, dtype=float)
        if self.t < 0 or self.s < 0:
            raise DomainError("anchor times must be nonnegative")
        if r.ndim != 1 or r.shape != y.shape or len(r) < 2:
            raise DomainError("need matching 1-d knot arrays with >= 2 knots")
        if abs(r[0]) > 1e-12 or abs(r[-1] - self.t) > 1e-12:
            raise DomainError("source knots must run from 0 to t")
        if np.any(np.diff(r) <= 0):
            raise DomainError("source knots must be strictly increasing")
        if abs(y[0]) > 1e-12 or abs(y[-1] - self.s) > 1e-12:
            raise DomainError("target knots must run from 0 to s")
        if self.s > 0:
            if np.any(np.diff(y) <= 0):
                raise DomainError("target knots must be strictly increasing")
        else:
            if np.any(np.abs(y) > 1e-12):
                raise DomainError("the degenerate map sends [0, t] to 0")
        r = r.copy()
        y = y.copy()
        r.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "knots_r", r)
        object.__setattr__(self, "knots_y", y)

    @property
    def degenerate(self) -> bool:
        return self.s == 0.0

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        head = np.interp(r, self.knots_r, self.knots_y)
        tail = r - self.t + self.s
        return np.where(r <= self.t, head, tail)

    def inverse_at(self, y):
        """Preimage of y in [0, s]; undefined for the degenerate map."""
        if self.degenerate:
            raise DomainError("the degenerate time change has no inverse")
        y = np.asarray(y, dtype=float)
        if np.any(y < -1e-12) or np.any(y > self.s + 1e-12):
            raise DomainError("inverse queried outside [0, s]")
        return np.interp(y, self.knots_y, self.knots_r)

    def sup_deviation(self) -> float:
        """sup over r of |l(r) - r|, exact (attained at a knot)."""
        return float(np.abs(self.knots_y - self.knots_r).max())

    def is_identity(self, tol: float = 0.0) -> bool:
        return self.sup_deviation() <= tol


def time_change(t: float, s: float, interior: tuple | None = None) -> TimeChange:
    """Time change [0, t] -> [0, s]; linear unless interior knots
    (pairs of (r, y) arrays) are supplied.  s = 0 yields the degenerate
    map."""
    if t <= 0:
        raise DomainError("source anchor must be positive")
    if interior is None:
        kr = np.array([0.0, t])
        ky = np.array([0.0, s])
    else:
        r_mid, y_mid = interior
        kr = np.concatenate([[0.0], np.atleast_1d(r_mid), [t]])
        ky = np.concatenate([[0.0], np.atleast_1d(y_mid), [s]])
    return TimeChange(t, s, kr, ky)


def identity_timechange(t: float) -> TimeChange:
    return time_change(t, t)
