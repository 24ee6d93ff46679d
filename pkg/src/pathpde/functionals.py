"""Value functionals on the time-path domain.

A Functional wraps an evaluator theta -> R together with the metadata the
experiments need: a declared sup bound, a declared modulus of continuity
(linear or power family), and an extension rule for step paths.  The
extension follows the density construction: a step path is replaced by
the piecewise-linear path that ramps to each post-jump level over the
single grid cell ending at the jump time (a jump at time zero ramps over
the first cell instead, so the path still starts at the origin), and the
functional is evaluated there.  The ramp width is one grid cell and is
accounted for wherever the extension enters a bound.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import DomainError
from .paths import DiscretePath, Grid, PointInTheta, StepPath, concat

__all__ = ["Modulus", "Functional", "shift", "ramp_smooth", "catalog", "constant"]


@dataclass(frozen=True)
class Modulus:
    """Continuity modulus from a named family: linear K*r or power K*r^gamma."""

    family: str
    K: float
    gamma: float = 1.0

    def __post_init__(self):
        if self.family not in ("linear", "power"):
            raise DomainError(f"unknown modulus family {self.family!r}")
        if self.K < 0:
            raise DomainError("modulus constant must be nonnegative")
        if self.family == "power" and not (0 < self.gamma <= 1):
            raise DomainError("power modulus exponent must lie in (0, 1]")

    def __call__(self, r):
        r = np.maximum(np.asarray(r, dtype=float), 0.0)
        if self.family == "linear":
            out = self.K * r
        else:
            out = self.K * r**self.gamma
        return float(out) if out.ndim == 0 else out


def ramp_smooth(eta: StepPath, grid: Grid) -> DiscretePath:
    """Piecewise-linear smoothing of a step path.

    Each post-jump level is reached by a linear ramp over the grid cell
    ending at the jump time; a jump at time zero ramps over the first
    cell.  Jumps on adjacent cells degenerate gracefully (the earlier
    level occupies no cell).
    """
    d = eta.dim
    vals = np.zeros((grid.steps + 1, d))
    for j, tj in enumerate(eta.jump_times):
        kj = grid.index_of(float(tj), "jump time")
        vals[max(kj, 1):] = eta.cum_values[j]
    return DiscretePath(grid, vals, grid.steps)


class Functional:
    """Evaluatable map from the time-path domain to the reals.

    fn: (t, path) -> float with the path already stopped at t.
    bound: declared sup bound over the experiment domain.
    modulus: declared modulus of continuity w.r.t. the path metric.
    markov: optional (t, x) shortcut for functionals that only read the
    current level, used by the lattice engines.
    """

    def __init__(
        self,
        name: str,
        fn: Callable[[float, DiscretePath], float],
        bound: float,
        modulus: Modulus,
        markov: Optional[Callable] = None,
    ):
        self.name = name
        self._fn = fn
        self.bound = float(bound)
        self.modulus = modulus
        self.markov = markov

    def __call__(self, theta: PointInTheta) -> float:
        return float(self._fn(theta.t, theta.path))

    def at(self, t: float, path: DiscretePath) -> float:
        if path.grid.index_of(t) < path.stop_index:
            path = path.stopped_at(t)
        return float(self._fn(t, path))

    def on_step(self, s: float, eta: StepPath) -> float:
        """Extension to step paths: evaluate on the ramp-smoothed path."""
        return self.at(s, ramp_smooth(eta, eta.grid))

    def __neg__(self) -> "Functional":
        return Functional(
            f"neg({self.name})",
            lambda t, w: -self._fn(t, w),
            self.bound,
            self.modulus,
            markov=(lambda t, x: -self.markov(t, x)) if self.markov else None,
        )

    def plus_const(self, c: float) -> "Functional":
        return Functional(
            f"{self.name}+{c:g}",
            lambda t, w: self._fn(t, w) + c,
            self.bound + abs(c),
            self.modulus,
            markov=(lambda t, x: self.markov(t, x) + c) if self.markov else None,
        )

    def __repr__(self):
        return f"Functional({self.name!r}, bound={self.bound:g})"


def shift(f: Functional, theta: PointInTheta) -> Functional:
    """Shifted functional: the tail path w' is routed through the
    concatenation at theta, with time arguments offset by theta.t."""
    t0 = theta.t
    base = theta.path
    T = base.grid.horizon

    def fn(s, wprime: DiscretePath):
        full = concat(base, t0, wprime)
        return f.at(min(t0 + s, T), full)

    return Functional(f"{f.name}^({t0:g})", fn, f.bound, f.modulus)


def _running_integral(t, w: DiscretePath) -> float:
    # exact integral of the piecewise-linear interpolant over [0, t]
    k = w.grid.index_of(t)
    if k == 0:
        return 0.0
    return float(np.trapezoid(w.values[: k + 1, 0], dx=w.grid.h))


def catalog(horizon: float = 1.0, domain_radius: float = 8.0) -> dict:
    """Built-in functionals, addressed by name in configs.

    Declared bounds and moduli hold on the working domain
    sup |path| <= domain_radius with the given horizon.
    """
    R = float(domain_radius)
    T = float(horizon)
    entries = [
        Functional(
            "linear",
            lambda t, w: float(w.values[w.grid.index_of(t), 0]),
            R,
            Modulus("linear", 1.0),
            markov=lambda t, x: x,
        ),
        Functional(
            "terminal-abs",
            lambda t, w: abs(float(w.values[w.grid.index_of(t), 0])),
            R,
            Modulus("linear", 1.0),
            markov=lambda t, x: abs(x),
        ),
        Functional(
            "time",
            lambda t, w: float(t),
            T,
            Modulus("linear", 1.0),
            markov=lambda t, x: t,
        ),
        Functional(
            "heat",
            lambda t, w: float(w.values[w.grid.index_of(t), 0]) ** 2 - t,
            R**2 + T,
            Modulus("linear", 1.0 + 2.0 * R),
            markov=lambda t, x: x * x - t,
        ),
        Functional(
            "quadratic-drift",
            lambda t, w: float(w.values[w.grid.index_of(t), 0]) ** 2 + 2.25 * (T - t),
            R**2 + 2.25 * T,
            Modulus("linear", 2.25 + 2.0 * R),
            markov=lambda t, x: x * x + 2.25 * (T - t),
        ),
        Functional(
            "drifting-minus-t",
            lambda t, w: -float(t),
            T,
            Modulus("linear", 1.0),
            markov=lambda t, x: -t,
        ),
        Functional(
            "running-integral",
            _running_integral,
            R * T,
            Modulus("linear", 1.0 + R + T),
        ),
    ]
    return {f.name: f for f in entries}


def constant(c: float) -> Functional:
    return Functional(
        f"const({c:g})",
        lambda t, w: float(c),
        abs(c),
        Modulus("linear", 0.0),
        markov=lambda t, x: c,
    )
