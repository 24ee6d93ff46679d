"""Discretized path space.

Continuous paths live on a uniform grid over [0, T] and are understood as
the piecewise-linear interpolants of their grid values; they start at the
origin and carry stop-time semantics (values frozen after the stop index).
Step paths are cadlag piecewise-constant paths whose jumps sit on grid
times.  The weighted norm of a path w on [0, T] is

    ||w||_q^q = |w_T|^q + int_0^T |w_s|^q ds,

i.e. Lebesgue measure on [0, T] plus a unit atom at T, and the metric on
the time-path domain is

    dist_q((t, w), (t', w')) = |t - t'| + || w_{t ^ .} - w'_{t' ^ .} ||_q.

For a path stopped at t the norm collapses to the closed form
(T + 1 - t)|w_t|^q + int_0^t |w_s|^q ds, which is used as an independent
cross-check in the tests.

All integrals of piecewise-linear or piecewise-constant integrands are
computed exactly per cell (closed form in one dimension, degree-matched
Gauss-Legendre for even integer orders in higher dimension); no sampling
quadrature is involved.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DomainError, PrecisionError

__all__ = [
    "Grid",
    "MetricOrder",
    "DiscretePath",
    "StepPath",
    "StepSkeleton",
    "PointInTheta",
    "path_norm",
    "stopped_norm_closed_form",
    "distance",
    "concat",
    "step_path",
    "tuple_norm",
    "point",
    "random_path",
]

_SNAP_TOL = 1e-9


@dataclass(frozen=True)
class Grid:
    """Uniform time grid with `steps` cells over [0, horizon]."""

    horizon: float
    steps: int

    def __post_init__(self):
        if not (self.horizon > 0.0):
            raise DomainError("grid horizon must be positive")
        if self.steps < 1:
            raise DomainError("grid needs at least one step")
        times = np.linspace(0.0, self.horizon, self.steps + 1)
        times.flags.writeable = False
        object.__setattr__(self, "_times", times)

    @property
    def h(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        return self._times  # type: ignore[attr-defined]

    def index_of(self, t: float, what: str = "time") -> int:
        """Grid index of t; PrecisionError if t is off-grid."""
        k = int(round(t / self.h))
        if k < 0 or k > self.steps or abs(t - k * self.h) > _SNAP_TOL * max(1.0, self.horizon):
            raise PrecisionError(f"{what} {t!r} is not on the grid (h={self.h!r})")
        return k

    def snap(self, t: float) -> tuple[int, float]:
        """Nearest grid index and the distance moved; PrecisionError if the
        move exceeds h/2."""
        k = int(round(t / self.h))
        k = min(max(k, 0), self.steps)
        moved = abs(t - k * self.h)
        if moved > 0.5 * self.h + _SNAP_TOL:
            raise PrecisionError(f"snapping {t!r} moves it by {moved!r} > h/2")
        return k, moved

    def compatible(self, other: "Grid") -> bool:
        return abs(self.h - other.h) <= _SNAP_TOL * max(1.0, self.h)


@dataclass(frozen=True)
class MetricOrder:
    """Integrability order of the metric; odd and at least 3."""

    p: int

    def __post_init__(self):
        if self.p < 3 or self.p % 2 == 0:
            raise DomainError("metric order must be odd and >= 3")


def _as_matrix(values, dim_hint=None) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    if v.ndim != 2:
        raise DomainError("path values must be a (steps+1, d) array")
    if dim_hint is not None and v.shape[1] != dim_hint:
        raise DomainError("path dimension mismatch")
    return v


@dataclass(frozen=True)
class DiscretePath:
    """Piecewise-linear path on a uniform grid, frozen after `stop_index`.

    Invariants: values[0] = 0 and values[j] = values[stop_index] for
    j > stop_index.  Instances are immutable; the values array is
    read-only.
    """

    grid: Grid
    values: np.ndarray
    stop_index: int

    def __post_init__(self):
        v = _as_matrix(self.values)
        if v.shape[0] != self.grid.steps + 1:
            raise DomainError("value count does not match the grid")
        if not np.all(np.abs(v[0]) <= 1e-12):
            raise DomainError("paths start at the origin")
        k = int(self.stop_index)
        if k < 0 or k > self.grid.steps:
            raise DomainError("stop index out of range")
        v = v.copy()
        v[k + 1 :] = v[k]
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "stop_index", k)

    @classmethod
    def _raw(cls, grid: Grid, frozen_values: np.ndarray, stop_index: int) -> "DiscretePath":
        # fast internal constructor: caller guarantees the invariants
        obj = object.__new__(cls)
        object.__setattr__(obj, "grid", grid)
        object.__setattr__(obj, "values", frozen_values)
        object.__setattr__(obj, "stop_index", stop_index)
        return obj

    @classmethod
    def zero(cls, grid: Grid, dim: int = 1) -> "DiscretePath":
        return cls(grid, np.zeros((grid.steps + 1, dim)), grid.steps)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def stop_time(self) -> float:
        return self.stop_index * self.grid.h

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]

    def stopped_at(self, t: float) -> "DiscretePath":
        k = self.grid.index_of(t, "stop time")
        if k >= self.stop_index:
            return self
        return DiscretePath(self.grid, self.values, k)

    def value_at(self, r):
        """Linear interpolation of the grid values at time(s) r."""
        r = np.asarray(r, dtype=float)
        out = np.empty(r.shape + (self.dim,))
        for a in range(self.dim):
            out[..., a] = np.interp(r, self.grid.times, self.values[:, a])
        return out


@dataclass(frozen=True)
class StepPath:
    """Cadlag piecewise-constant path: value after time s is the sum of the
    jumps at times <= s.  Jump times sit on the grid; the path is constant
    after the last jump and need not start at the origin (the first jump
    may be at time zero)."""

    grid: Grid
    jump_times: np.ndarray
    cum_values: np.ndarray  # (n_jumps, d), cumulative sums after each jump

    def __post_init__(self):
        jt = np.asarray(self.jump_times, dtype=float)
        cv = _as_matrix(self.cum_values)
        if jt.ndim != 1 or len(jt) != cv.shape[0] or len(jt) == 0:
            raise DomainError("jump times and cumulative values must align")
        if np.any(np.diff(jt) <= 0):
            raise DomainError("jump times must be strictly increasing")
        for t in jt:
            self.grid.index_of(float(t), "jump time")
        jt.flags.writeable = False
        cv = cv.copy()
        cv.flags.writeable = False
        object.__setattr__(self, "jump_times", jt)
        object.__setattr__(self, "cum_values", cv)

    @property
    def dim(self) -> int:
        return self.cum_values.shape[1]

    def value_at(self, r):
        r = np.asarray(r, dtype=float)
        idx = np.searchsorted(self.jump_times, r + 1e-15, side="right") - 1
        out = np.where(
            idx[..., None] >= 0,
            self.cum_values[np.clip(idx, 0, len(self.jump_times) - 1)],
            0.0,
        )
        return out

    def breakpoints(self) -> np.ndarray:
        return self.jump_times


@dataclass(frozen=True)
class StepSkeleton:
    """Jump-time tuple with all but the last jump size fixed.

    times = (s_1, ..., s_i) with s_1 = 0, strictly increasing; sizes are
    the i-1 settled jumps.  Feeding the free size x produces the step path
    sum_j sizes[j] 1{s >= s_j} + x 1{s >= s_i}.
    """

    times: tuple
    sizes: np.ndarray  # (i-1, d)

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        if len(times) == 0 or abs(times[0]) > 1e-12:
            raise DomainError("the first jump time must be zero")
        if any(b - a <= 0 for a, b in zip(times, times[1:])):
            raise DomainError("jump times must be strictly increasing")
        sizes = np.asarray(self.sizes, dtype=float)
        if sizes.size == 0:
            sizes = sizes.reshape(0, 1)
        sizes = _as_matrix(sizes) if sizes.ndim != 2 else sizes
        if sizes.shape[0] != len(times) - 1:
            raise DomainError("need exactly one size per settled jump")
        sizes = sizes.copy()
        sizes.flags.writeable = False
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "sizes", sizes)

    @property
    def index(self) -> int:
        return len(self.times)

    @property
    def anchor(self) -> float:
        """Time of the free jump."""
        return self.times[-1]


def step_path(skeleton: StepSkeleton, x, grid: Grid) -> StepPath:
    """Step path of a skeleton with the free jump set to x."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    d = x.shape[0]
    if skeleton.sizes.shape[0] and skeleton.sizes.shape[1] != d:
        raise DomainError("free jump dimension mismatch")
    sizes = np.vstack([skeleton.sizes.reshape(-1, d), x[None, :]])
    return StepPath(grid, np.asarray(skeleton.times), np.cumsum(sizes, axis=0))


@dataclass(frozen=True)
class PointInTheta:
    """A point (t, path stopped at t) of the time-path domain."""

    t: float
    path: DiscretePath

    def __post_init__(self):
        k = self.path.grid.index_of(self.t, "anchor time")
        if self.path.stop_index != k:
            object.__setattr__(self, "path", self.path.stopped_at(self.t) if k < self.path.stop_index else DiscretePath(self.path.grid, self.path.values, k))

    @property
    def k(self) -> int:
        return self.path.grid.index_of(self.t)

    @property
    def grid(self) -> Grid:
        return self.path.grid

    @property
    def current(self) -> np.ndarray:
        """Path value at the anchor time."""
        return self.path.values[self.k]


def point(t: float, path: DiscretePath) -> PointInTheta:
    return PointInTheta(t, path)


# ---------------------------------------------------------------------------
# exact segment integrals of |linear|^q

_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gl_nodes(m: int) -> tuple[np.ndarray, np.ndarray]:
    if m not in _GL_CACHE:
        x, w = np.polynomial.legendre.leggauss(m)
        # map to [0, 1]
        _GL_CACHE[m] = (0.5 * (x + 1.0), 0.5 * w)
    return _GL_CACHE[m]


def seg_abs_pow_integral(a: np.ndarray, b: np.ndarray, widths, q: float) -> np.ndarray:
    """Exact per-segment integral of |v(r)|^q where v interpolates linearly
    from a to b over a segment of the given width.

    a, b: (m, d) endpoint values; widths: (m,) segment lengths.
    Closed form for d = 1; Gauss-Legendre of matching degree for even
    integer q (exact); 32-node Gauss-Legendre otherwise.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    widths = np.asarray(widths, dtype=float)
    if a.shape[1] == 1:
        av = a[:, 0]
        bv = b[:, 0]
        diff = bv - av
        flat = np.abs(diff) <= 1e-15 * np.maximum(1.0, np.maximum(np.abs(av), np.abs(bv)))
        denom = np.where(flat, 1.0, diff * (q + 1.0))
        anti = bv * np.abs(bv) ** q - av * np.abs(av) ** q
        unit = np.where(flat, np.abs(av) ** q, anti / denom)
        return widths * unit
    if float(q).is_integer() and int(q) % 2 == 0:
        m = int(q) // 2 + 1
    else:
        m = 32
    x, w = _gl_nodes(m)
    # (m_seg, nodes, d)
    v = a[:, None, :] + (b - a)[:, None, :] * x[None, :, None]
    r = np.linalg.norm(v, axis=2) ** q
    return widths * (r @ w)


def _pl_norm_from_values(values: np.ndarray, h: float, q: float) -> float:
    """Weighted q-norm of the piecewise-linear path given by grid values."""
    seg = seg_abs_pow_integral(values[:-1], values[1:], np.full(len(values) - 1, h), q)
    term = np.linalg.norm(values[-1]) ** q
    return float((term + seg.sum()) ** (1.0 / q))


def path_norm(path, q, t_stop: float | None = None) -> float:
    """Weighted q-norm |w_T|^q + int_0^T |w|^q ds (to the 1/q) of a
    discrete or step path, optionally stopped at a grid time first."""
    q = q.p if isinstance(q, MetricOrder) else float(q)
    if q < 1.0:
        raise DomainError("norm order must be >= 1")
    if isinstance(path, DiscretePath):
        values = path.values
        if t_stop is not None:
            k = path.grid.index_of(t_stop, "t_stop")
            values = values.copy()
            values[k + 1 :] = values[k]
        return _pl_norm_from_values(values, path.grid.h, q)
    if isinstance(path, StepPath):
        if t_stop is not None:
            raise DomainError("step paths carry no stop semantics")
        grid = path.grid
        vals = path.value_at(grid.times[:-1])  # constant on [t_k, t_{k+1})
        body = (np.linalg.norm(vals, axis=1) ** q).sum() * grid.h
        term = np.linalg.norm(path.value_at(grid.horizon)) ** q
        return float((term + body) ** (1.0 / q))
    raise DomainError(f"unsupported path type {type(path)!r}")


def stopped_norm_closed_form(path: DiscretePath, q, t: float) -> float:
    """(T + 1 - t)|w_t|^q + int_0^t |w|^q ds, the stopped-path norm in
    closed form; equals path_norm(path, q, t_stop=t)."""
    q = q.p if isinstance(q, MetricOrder) else float(q)
    grid = path.grid
    k = grid.index_of(t, "t")
    head = path.values[: k + 1]
    if k > 0:
        body = seg_abs_pow_integral(head[:-1], head[1:], np.full(k, grid.h), q).sum()
    else:
        body = 0.0
    wt = np.linalg.norm(path.values[k])
    return float(((grid.horizon + 1.0 - t) * wt**q + body) ** (1.0 / q))


def distance(theta: PointInTheta, other: PointInTheta, mode="infinity") -> float:
    """Metric on the time-path domain.

    mode: a MetricOrder / odd integer >= 3 for the weighted-norm metric,
    or the string "infinity" for |t - t'| + sup-norm of the stopped
    difference.
    """
    if not theta.grid.compatible(other.grid) or theta.grid.steps != other.grid.steps:
        raise ConfigurationError("points live on different grids")
    diff = theta.path.values - other.path.values
    dt = abs(theta.t - other.t)
    if isinstance(mode, str):
        if mode != "infinity":
            raise DomainError(f"unknown metric mode {mode!r}")
        return float(dt + np.linalg.norm(diff, axis=1).max())
    q = mode.p if isinstance(mode, MetricOrder) else int(mode)
    MetricOrder(q)  # validates odd, >= 3
    return float(dt + _pl_norm_from_values(diff, theta.grid.h, q))


def concat(omega: DiscretePath, t: float, tail: DiscretePath) -> DiscretePath:
    """Concatenation at time t: the prefix of omega up to t, then the tail
    path translated to start at omega_t.

    The tail lives on a grid with the same step covering at least T - t.
    The result stops where the tail stops (shifted by t).
    """
    grid = omega.grid
    k = grid.index_of(t, "concat time")
    if not grid.compatible(tail.grid):
        raise ConfigurationError("concat requires a common grid step")
    m = grid.steps - k
    if tail.grid.steps < m:
        raise ConfigurationError("tail grid does not cover the remaining horizon")
    if tail.dim != omega.dim:
        raise DomainError("dimension mismatch in concat")
    vals = np.empty_like(omega.values)
    vals[: k + 1] = omega.values[: k + 1]
    vals[k:] = omega.values[k] + tail.values[: m + 1]
    stop = min(grid.steps, k + tail.stop_index)
    vals[stop:] = vals[stop]
    vals.flags.writeable = False
    return DiscretePath._raw(grid, vals, stop)


def tuple_norm(xs, p) -> float:
    """( sum_j |x_j|^p )^(1/p) over a tuple of vectors."""
    p = p.p if isinstance(p, MetricOrder) else float(p)
    if p < 1.0:
        raise DomainError("tuple norm order must be >= 1")
    xs = np.asarray(xs, dtype=float)
    if xs.size == 0:
        return 0.0
    if xs.ndim == 1:
        xs = xs[:, None]
    return float((np.linalg.norm(xs, axis=1) ** p).sum() ** (1.0 / p))


def random_path(grid: Grid, dim: int, rng: np.random.Generator, scale: float = 1.0, stop: int | None = None) -> DiscretePath:
    """Scaled random-walk path (increments N(0, scale^2 h)), optionally
    stopped; the workhorse sampler for the experiment suites."""
    inc = rng.normal(0.0, scale * np.sqrt(grid.h), size=(grid.steps, dim))
    vals = np.vstack([np.zeros((1, dim)), np.cumsum(inc, axis=0)])
    return DiscretePath(grid, vals, grid.steps if stop is None else stop)
