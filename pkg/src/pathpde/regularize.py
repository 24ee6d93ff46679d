"""Sup/inf-convolution regularization on the time-path domain.

The penalization of a candidate (theta, ell) against a target (s, eta) is

    Phi(s, eta, theta, ell) = ||ell - I||_oo^{2/(3p+3)}
                              + || eta_{s ^ ell(.)} - omega_{t ^ .} ||_{p+1}^{p+1},

whose norm part splits exactly into a terminal block and a time integral,

    (T + 1 - t) |eta_s - omega_t|^{p+1}
        + int_0^t |eta_{ell(r)} - omega_r|^{p+1} dr,

and every integral is computed exactly by piecewise decomposition at the
breakpoints of the integrand (grid times, time-change knots, preimages of
eta's jump times).  The sup-regularization

    u^n(s, eta) = sup_{theta != origin, ell} { u(theta) - n Phi }

is approximated by a deterministic nested search: outer enumeration of
the candidate anchor time on the grid inside the pruning box, inner
coordinate descent over a piecewise-linear path parametrization with
multi-start.  The candidate family always contains the limit point of
admissible candidates with anchor time tending to zero, whose objective
has the closed form u(origin) - n(s^{2/(3p+3)} + (T+1)|eta_s|^{p+1});
this is the value the sup approaches along theta = (eps, omega^eps), and
it is reported as the optimizer when it wins (anchor time 0, no time
change).  The inf-regularization runs the same engine on -v.

Reported gaps are search-quality estimates (restart dispersion plus a
line-search floor); no global optimality is claimed.
"""

from __future__ import annotations

import hashlib
import math
import weakref
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import ConfigurationError, DomainError
from .functionals import Functional, ramp_smooth
from .paths import (
    DiscretePath,
    Grid,
    MetricOrder,
    StepPath,
    StepSkeleton,
    seg_abs_pow_integral,
    step_path,
    tuple_norm,
)
from .timechange import TimeChange, identity_timechange, time_change

__all__ = [
    "PenaltyParts",
    "penalty",
    "penalty_parts",
    "PruneBox",
    "prune_bounds",
    "SearchConfig",
    "RegularizationResult",
    "regularize",
    "FiniteDimMap",
    "finite_dim",
    "clear_finite_dim_cache",
    "PartitionScheme",
    "partition",
    "kappa_transform",
    "ErrorTerms",
    "error_terms",
    "power_bound_check",
    "extension_gap",
]

_TOL = 1e-9

PathLike = Union[DiscretePath, StepPath]


def _order(p) -> int:
    p = p.p if isinstance(p, MetricOrder) else int(p)
    MetricOrder(p)
    return p


def _eta_at(eta: PathLike, r):
    return eta.value_at(r)


def _eta_level(eta: PathLike, s: float) -> np.ndarray:
    v = eta.value_at(np.asarray(s, dtype=float))
    return np.atleast_1d(np.asarray(v, dtype=float).reshape(-1))


# ---------------------------------------------------------------------------
# penalty


@dataclass(frozen=True)
class PenaltyParts:
    """Exact decomposition of the penalization at one candidate."""

    sup_dev: float        # ||ell - I||_oo
    time_term: float      # sup_dev^{2/(3p+3)}
    terminal_gap: float   # |eta_s - omega_t|
    terminal_term: float  # (T + 1 - t) * terminal_gap^{p+1}
    integral_term: float  # int_0^t |eta_{ell(r)} - omega_r|^{p+1} dr

    @property
    def total(self) -> float:
        return self.time_term + self.terminal_term + self.integral_term

    @property
    def norm_power(self) -> float:
        """The ||.||_{p+1}^{p+1} part (terminal block plus integral)."""
        return self.terminal_term + self.integral_term


def _integral_breaks(grid: Grid, t: float, ell: TimeChange, eta: PathLike, s: float) -> np.ndarray:
    k = grid.index_of(t, "candidate time")
    pieces = [grid.times[: k + 1]]
    pieces.append(np.asarray([t]))
    pieces.append(ell.knots_r)
    if not ell.degenerate:
        if isinstance(eta, StepPath):
            inner = [float(tj) for tj in eta.jump_times if 0.0 < tj <= s + _TOL]
        else:
            inner = [float(r) for r in eta.grid.times if 0.0 < r < s]
        if inner:
            pieces.append(np.asarray([ell.inverse_at(min(y, s)) for y in inner]))
    rs = np.concatenate(pieces)
    rs = rs[(rs >= -_TOL) & (rs <= t + _TOL)]
    rs = np.unique(np.clip(rs, 0.0, t))
    keep = np.ones(len(rs), dtype=bool)
    keep[1:] = np.diff(rs) > 1e-12
    return rs[keep]


class _PenaltyKernel:
    """Precomputed integrand structure for one (t_hat, ell, s, eta).

    Everything that does not depend on the candidate path omega is cached:
    breakpoints, widths, and the pulled values eta(ell(r)).  total() then
    needs only the omega values at the breakpoints.
    """

    def __init__(self, grid: Grid, s: float, eta: PathLike, t_hat: float, ell: TimeChange, p: int):
        self.grid = grid
        self.p = p
        self.q = p + 1
        self.t_hat = float(t_hat)
        self.k_hat = grid.index_of(t_hat, "candidate time")
        self.ell = ell
        dev = ell.sup_deviation()
        self.time_term = dev ** (2.0 / (3.0 * p + 3.0))
        self.sup_dev = dev
        self.eta_s = _eta_level(eta, s)
        self.terminal_weight = grid.horizon + 1.0 - self.t_hat
        rs = _integral_breaks(grid, self.t_hat, ell, eta, s)
        self.rs = rs
        self.widths = np.diff(rs)
        if ell.degenerate:
            pulled0 = _eta_level(eta, 0.0)
            self.eta_a = np.broadcast_to(pulled0, (max(len(rs) - 1, 0), pulled0.size))
            self.eta_b = self.eta_a
        else:
            ell_at = ell(rs)
            if isinstance(eta, StepPath):
                mids = ell(0.5 * (rs[:-1] + rs[1:]))
                vals = eta.value_at(mids)
                self.eta_a = np.atleast_2d(vals)
                self.eta_b = self.eta_a
            else:
                vals = eta.value_at(np.minimum(ell_at, s))
                vals = np.atleast_2d(vals)
                self.eta_a = vals[:-1]
                self.eta_b = vals[1:]

    def omega_at_breaks(self, values: np.ndarray) -> np.ndarray:
        out = np.empty((len(self.rs), values.shape[1]))
        for a in range(values.shape[1]):
            out[:, a] = np.interp(self.rs, self.grid.times, values[:, a])
        return out

    def total_from_values(self, values: np.ndarray) -> float:
        om = self.omega_at_breaks(values)
        va = self.eta_a - om[:-1]
        vb = self.eta_b - om[1:]
        integral = float(seg_abs_pow_integral(va, vb, self.widths, self.q).sum()) if len(self.widths) else 0.0
        gap = float(np.linalg.norm(self.eta_s - values[self.k_hat]))
        return self.time_term + self.terminal_weight * gap**self.q + integral

    def parts_from_values(self, values: np.ndarray) -> PenaltyParts:
        om = self.omega_at_breaks(values)
        va = self.eta_a - om[:-1]
        vb = self.eta_b - om[1:]
        integral = float(seg_abs_pow_integral(va, vb, self.widths, self.q).sum()) if len(self.widths) else 0.0
        gap = float(np.linalg.norm(self.eta_s - values[self.k_hat]))
        return PenaltyParts(
            sup_dev=self.sup_dev,
            time_term=self.time_term,
            terminal_gap=gap,
            terminal_term=self.terminal_weight * gap**self.q,
            integral_term=integral,
        )


def penalty_parts(s: float, eta: PathLike, theta, ell: TimeChange, p=3) -> PenaltyParts:
    """Exact penalty decomposition; DomainError if ell is not an
    admissible time change from theta.t to s."""
    p = _order(p)
    if abs(ell.t - theta.t) > _TOL or abs(ell.s - s) > _TOL:
        raise DomainError(
            f"time change maps [0, {ell.t!r}] -> [0, {ell.s!r}], "
            f"candidate needs [0, {theta.t!r}] -> [0, {s!r}]"
        )
    grid = theta.grid
    if isinstance(eta, (StepPath, DiscretePath)) and not grid.compatible(eta.grid):
        raise ConfigurationError("eta and theta live on different grids")
    kern = _PenaltyKernel(grid, s, eta, theta.t, ell, p)
    return kern.parts_from_values(theta.path.values)


def penalty(s: float, eta: PathLike, theta, ell: TimeChange, p=3) -> float:
    return penalty_parts(s, eta, theta, ell, p).total


# ---------------------------------------------------------------------------
# pruning box


@dataclass(frozen=True)
class PruneBox:
    """Bounds satisfied by every candidate whose objective is within 1 of
    the supremum: with C_0 = 1 + 2 B_oo,

        ||ell - I||_oo        <= (C_0/n)^{(3p+3)/2},
        |eta_s - omega_t|^{p+1} <= C_0/n,
        int_0^t |...|^{p+1} dr  <= C_0/n.
    """

    n: int
    p: int
    C0: float

    @property
    def ell_sup(self) -> float:
        return (self.C0 / self.n) ** ((3.0 * self.p + 3.0) / 2.0)

    @property
    def norm_power(self) -> float:
        return self.C0 / self.n

    @property
    def terminal(self) -> float:
        return (self.C0 / self.n) ** (1.0 / (self.p + 1.0))


def prune_bounds(n: int, B_inf: float, s: float = None, lam=None, x=None, p=3) -> PruneBox:
    """Search box for delta-optimal candidates (delta <= 1); the optional
    (s, lam, x) arguments describe the target point and are accepted for
    interface completeness (the box does not depend on them)."""
    if n < 1:
        raise DomainError("n must be at least 1")
    return PruneBox(n=int(n), p=_order(p), C0=1.0 + 2.0 * float(B_inf))


# ---------------------------------------------------------------------------
# search configuration and result


@dataclass(frozen=True)
class SearchConfig:
    restarts: int = 5
    segments: int = 8          # filler control nodes for the inner path
    knots: int = 3             # interior time-change knots (searched only
                               # when eta has interior jumps)
    seed: int = 0
    budget: int = 200_000      # objective-evaluation budget
    gap_target: float = 0.05
    t_candidates: int = 3      # anchors polished after screening
    scalar_maxiter: int = 28
    sweeps: int = 4

    def __post_init__(self):
        if self.restarts < 1 or self.segments < 1 or self.budget < 100:
            raise ConfigurationError("search configuration out of range")
        if self.knots < 0 or self.t_candidates < 1:
            raise ConfigurationError("search configuration out of range")


@dataclass(frozen=True)
class RegularizationResult:
    """Outcome of one sup/inf-regularization search.

    value approximates u^n(s, eta) (sub) or v^n(s, eta) (super); the
    reported optimizer satisfies value = optimizer_value -+ n * penalty
    to 1e-10 by construction.  gap is the search-quality estimate
    (restart dispersion plus line-search floor), and certified means the
    gap target was met within budget.  A result whose t_hat is 0 is the
    limit representative: the supremum value approached along admissible
    candidates with anchor time tending to zero.
    """

    value: float
    direction: str
    n: int
    s: float
    t_hat: float
    omega_hat: Optional[DiscretePath]
    ell_hat: Optional[TimeChange]
    parts: PenaltyParts
    gap: float
    certified: bool
    evaluations: int
    restarts: int
    optimizer_value: float
    extras: dict = field(default_factory=dict)

    @property
    def optimizer_penalty(self) -> float:
        return self.parts.total

    @property
    def limit_representative(self) -> bool:
        return self.omega_hat is None

    def to_jsonable(self) -> dict:
        out = {
            "value": self.value,
            "direction": self.direction,
            "n": self.n,
            "s": self.s,
            "t_hat": self.t_hat,
            "gap": self.gap,
            "certified": self.certified,
            "evaluations": self.evaluations,
            "restarts": self.restarts,
            "optimizer_value": self.optimizer_value,
            "penalty": {
                "sup_dev": self.parts.sup_dev,
                "time_term": self.parts.time_term,
                "terminal_gap": self.parts.terminal_gap,
                "terminal_term": self.parts.terminal_term,
                "integral_term": self.parts.integral_term,
                "total": self.parts.total,
            },
            "limit_representative": self.limit_representative,
        }
        if self.omega_hat is not None:
            rows = ["t,value"]
            for tk, row in zip(self.omega_hat.grid.times, self.omega_hat.values):
                rows.append("%.17g,%s" % (tk, ",".join("%.17g" % v for v in row)))
            out["omega_hat_csv"] = "\n".join(rows)
        if self.ell_hat is not None:
            out["ell_knots_r"] = [float(v) for v in self.ell_hat.knots_r]
            out["ell_knots_y"] = [float(v) for v in self.ell_hat.knots_y]
        return out


def _seed_int(*parts) -> int:
    text = "|".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big")


def _eta_signature(eta: PathLike):
    if isinstance(eta, StepPath):
        sizes = np.diff(np.vstack([np.zeros((1, eta.dim)), eta.cum_values]), axis=0)
        sig = []
        for tj, sz in zip(eta.jump_times, sizes):
            if np.max(np.abs(sz)) > 1e-12:
                sig.append((eta.grid.index_of(float(tj)), tuple(round(float(v), 12) for v in sz)))
        return ("step", tuple(sig))
    vals = np.round(eta.values, 12)
    return ("pl", eta.stop_index, hashlib.sha256(vals.tobytes()).hexdigest())


# ---------------------------------------------------------------------------
# the search core (sup direction)


class _BudgetExhausted(Exception):
    pass


class _Budget:
    __slots__ = ("used", "cap")

    def __init__(self, cap: int):
        self.used = 0
        self.cap = cap

    def spend(self):
        self.used += 1
        if self.used > self.cap:
            raise _BudgetExhausted


def _warm_values(grid: Grid, k_hat: int, ell: TimeChange, eta: PathLike, s: float, dim: int) -> np.ndarray:
    """Warm-start candidate: the pull-back eta(ell(r)) on [0, t_hat],
    ramp-smoothed for step paths, frozen after k_hat."""
    vals = np.zeros((grid.steps + 1, dim))
    if k_hat >= 1:
        if isinstance(eta, StepPath):
            if ell.degenerate:
                vals[1 : k_hat + 1] = _eta_level(eta, 0.0)
            else:
                for tj, cum in zip(eta.jump_times, eta.cum_values):
                    if tj > s + _TOL:
                        break
                    r = ell.inverse_at(min(float(tj), s)) if tj > 0 else 0.0
                    kj, _ = grid.snap(r)
                    vals[max(kj, 1) : k_hat + 1] = cum
        else:
            if ell.degenerate:
                vals[1 : k_hat + 1] = _eta_level(eta, 0.0)
            else:
                pulled = eta.value_at(np.minimum(ell(grid.times[: k_hat + 1]), s))
                vals[: k_hat + 1] = np.atleast_2d(pulled)
                vals[0] = 0.0
    vals[k_hat:] = vals[k_hat]
    return vals


def _node_indices(grid: Grid, k_hat: int, ell: TimeChange, eta: PathLike, s: float, segments: int) -> np.ndarray:
    idx = {k_hat}
    if isinstance(eta, StepPath) and not ell.degenerate:
        for tj in eta.jump_times:
            if 0.0 < tj <= s + _TOL:
                kj, _ = grid.snap(ell.inverse_at(min(float(tj), s)))
                idx.update((kj - 1, kj, kj + 1))
    idx.add(1)
    for j in range(1, segments + 1):
        idx.add(int(round(j * k_hat / (segments + 1.0))))
    arr = np.array(sorted(i for i in idx if 1 <= i <= k_hat), dtype=int)
    return arr


def _aligned_ell(grid: Grid, t_hat: float, s: float, eta: PathLike, max_knots: int, box: PruneBox) -> Optional[TimeChange]:
    """Knot-parametrized alternative to the linear time change: up to
    max_knots interior knots placed so the preimages of eta's interior
    jump times land exactly on grid points (removing the snapping
    mismatch of the pulled jumps).  Returns None when eta has no interior
    jumps, the knots cannot be kept strictly monotone, or the resulting
    deviation leaves the pruning box."""
    if max_knots < 1 or s <= 0 or not isinstance(eta, StepPath):
        return None
    inner = [float(tj) for tj in eta.jump_times if _TOL < tj < s - _TOL]
    if not inner:
        return None
    k_hat = grid.index_of(t_hat, "candidate time")
    rs, ys = [], []
    for tj in inner[:max_knots]:
        k, _ = grid.snap(tj * t_hat / s)
        r = grid.times[k]
        if r <= _TOL or r >= t_hat - _TOL:
            continue
        if rs and r <= rs[-1] + grid.h / 2:
            continue
        rs.append(r)
        ys.append(tj)
    if not rs:
        return None
    if any(b - a <= _TOL for a, b in zip([0.0] + ys, ys + [s])):
        return None
    ell = time_change(t_hat, s, interior=(np.asarray(rs), np.asarray(ys)))
    if ell.sup_deviation() > box.ell_sup + _TOL:
        return None
    return ell


def _sup_core(u: Functional, n: int, s: float, eta: PathLike, cfg: SearchConfig, p: int, direction: str):
    grid = eta.grid
    q = p + 1
    T = grid.horizon
    dim = eta.dim
    k_s = grid.index_of(s, "target time")
    box = prune_bounds(n, u.bound, p=p)
    budget = _Budget(cfg.budget)
    certified = True

    u0 = u.at(0.0, DiscretePath.zero(grid, dim))
    eta_s = _eta_level(eta, s)

    # limit representative: the value approached by admissible candidates
    # (eps, omega^eps) as eps -> 0
    limit_parts = PenaltyParts(
        sup_dev=s,
        time_term=s ** (2.0 / (3.0 * p + 3.0)),
        terminal_gap=float(np.linalg.norm(eta_s)),
        terminal_term=(T + 1.0) * float(np.linalg.norm(eta_s)) ** q,
        integral_term=0.0,
    )
    limit_value = u0 - n * limit_parts.total

    # outer anchor window from the pruning box
    ks = np.arange(1, grid.steps + 1)
    window = ks[np.abs(grid.times[ks] - s) <= box.ell_sup + _TOL]
    if k_s >= 1 and k_s not in window:
        window = np.append(window, k_s)
    window = window[np.argsort(np.abs(grid.times[window] - s), kind="stable")]

    def kernels_for(k_hat: int) -> list:
        t_hat = grid.times[k_hat]
        out = [_PenaltyKernel(grid, s, eta, t_hat, time_change(t_hat, s), p)]
        if k_hat != k_s:
            aligned = _aligned_ell(grid, t_hat, s, eta, cfg.knots, box)
            if aligned is not None:
                out.append(_PenaltyKernel(grid, s, eta, t_hat, aligned, p))
        return out

    def objective(kern: _PenaltyKernel, values: np.ndarray) -> float:
        budget.spend()
        return u.at(kern.t_hat, DiscretePath._raw(grid, values, kern.k_hat)) - n * kern.total_from_values(values)

    def upper_bound(k_hat: int, best: float) -> float:
        t_hat = grid.times[k_hat]
        time_cost = n * abs(t_hat - s) ** (2.0 / (3.0 * p + 3.0)) if abs(t_hat - s) > _TOL else 0.0
        if u.markov is not None and dim == 1:
            c_eff = min(max(u.bound - best, 0.0) + 1e-9, box.C0)
            r = (c_eff / n) ** (1.0 / q)
            xs = np.linspace(eta_s[0] - r, eta_s[0] + r, 65)
            vals = np.array([u.markov(t_hat, float(x)) for x in xs])
            return float(vals.max()) + float(u.modulus(r / 32.0)) - time_cost
        return u.bound - time_cost

    best = {"value": limit_value, "payload": None}
    screened = []

    def consider(kern, vals, val):
        if val > best["value"]:
            best["value"] = val
            best["payload"] = (kern, vals.copy())

    def terminal_polish(kern, sv, val):
        """1-d refinement of the level held from the anchor index on."""
        node = kern.k_hat
        w = max(2.0 * box.terminal, 0.5)
        for axis in range(dim):
            center = float(sv[node, axis])

            def neg(z, axis=axis, sv=sv):
                cand = sv.copy()
                cand[node:, axis] = z
                return -objective(kern, cand)

            res = minimize_scalar(
                neg, bounds=(center - w, center + w), method="bounded",
                options={"xatol": 1e-8 * max(1.0, w), "maxiter": cfg.scalar_maxiter},
            )
            if -res.fun > val:
                val = -res.fun
                sv = sv.copy()
                sv[node:, axis] = res.x
        return sv, val

    def screen(k_hat: int):
        top = -math.inf
        for kern in kernels_for(k_hat):
            starts = [_warm_values(grid, k_hat, kern.ell, eta, s, dim)]
            if isinstance(eta, DiscretePath) and k_hat == k_s and k_s >= 1:
                stopped = eta.values.copy()
                stopped[k_s:] = stopped[k_s]
                starts.append(stopped)
            for sv in starts:
                val = objective(kern, sv)
                sv, val = terminal_polish(kern, sv, val)
                consider(kern, sv, val)
                top = max(top, val)
        screened.append((top, k_hat))

    def polish(k_hat: int) -> list:
        finals = []
        for kern in kernels_for(k_hat):
            nodes = _node_indices(grid, kern.k_hat, kern.ell, eta, s, cfg.segments)
            node_pos = np.concatenate([[0], nodes]).astype(float)
            warm = _warm_values(grid, kern.k_hat, kern.ell, eta, s, dim)
            w = max(2.0 * box.terminal, 0.5)
            xatol = 1e-8 * max(1.0, w)

            def rebuild(vals, axis, nv):
                vals[: kern.k_hat + 1, axis] = np.interp(
                    np.arange(kern.k_hat + 1, dtype=float), node_pos, nv
                )
                vals[kern.k_hat :] = vals[kern.k_hat]

            for r_idx in range(cfg.restarts):
                rng = np.random.default_rng(
                    _seed_int(cfg.seed, u.name, direction, n, f"{s:.17g}",
                              _eta_signature(eta), k_hat, kern.sup_dev, r_idx)
                )
                vals = warm.copy()
                if r_idx == 1 and isinstance(eta, DiscretePath) and k_hat == k_s and k_s >= 1:
                    vals = eta.values.copy()
                    vals[k_s:] = vals[k_s]
                elif r_idx > 0:
                    vals[nodes] = vals[nodes] + rng.normal(0.0, 0.35 * w, size=(len(nodes), dim))
                    # move to the interp-through-nodes representation the
                    # probes use, so descent sees a consistent state
                    for axis in range(dim):
                        rebuild(vals, axis, np.concatenate([[0.0], vals[nodes, axis]]))
                cur = objective(kern, vals)
                for _ in range(cfg.sweeps):
                    improved = False
                    for ni, node in enumerate(nodes):
                        for axis in range(dim):
                            base = vals.copy()

                            def neg(z, ni=ni, axis=axis, base=base):
                                nv = np.concatenate([[0.0], base[nodes, axis]])
                                nv[1 + ni] = z
                                full = base.copy()
                                rebuild(full, axis, nv)
                                return -objective(kern, full)

                            res = minimize_scalar(
                                neg,
                                bounds=(warm[node, axis] - w, warm[node, axis] + w),
                                method="bounded",
                                options={"xatol": xatol, "maxiter": cfg.scalar_maxiter},
                            )
                            if -res.fun > cur + 1e-13:
                                cur = -res.fun
                                nv = np.concatenate([[0.0], base[nodes, axis]])
                                nv[1 + ni] = res.x
                                rebuild(vals, axis, nv)
                                improved = True
                    if not improved:
                        break
                vals, cur = terminal_polish(kern, vals, cur)
                finals.append(cur)
                consider(kern, vals, cur)
        return finals

    finals_by_anchor = {}
    try:
        for k_hat in window:
            if upper_bound(int(k_hat), best["value"]) >= best["value"] - 1e-12:
                screen(int(k_hat))
        screened.sort(key=lambda sv: (-sv[0], sv[1]))
        for _, k_hat in screened[: cfg.t_candidates]:
            if upper_bound(k_hat, best["value"]) >= best["value"] - 1e-12:
                finals_by_anchor[k_hat] = polish(k_hat)
    except _BudgetExhausted:
        certified = False

    # assemble the result
    best_value = best["value"]
    floor = 1e-8 * (1.0 + abs(best_value))
    if best["payload"] is not None and best_value > limit_value:
        kern, vals = best["payload"]
        finals = finals_by_anchor.get(kern.k_hat, [best_value])
        gap = max(best_value - min(finals), 0.0) + floor
        omega_hat = DiscretePath(grid, vals.copy(), kern.k_hat)
        parts = kern.parts_from_values(omega_hat.values)
        value, t_hat, ell_hat = best_value, kern.t_hat, kern.ell
        opt_val = value + n * parts.total
        extras = {}
    else:
        disp = max((max(fs) - min(fs) for fs in finals_by_anchor.values() if fs), default=0.0)
        gap = disp + floor
        omega_hat, ell_hat = None, None
        parts = limit_parts
        value, t_hat, opt_val = limit_value, 0.0, u0
        extras = {"limit_value": limit_value}
    certified = certified and gap <= cfg.gap_target
    extras.update(
        screened=len(screened),
        polished=tuple(sorted(finals_by_anchor)),
        restart_finals={int(k): tuple(v) for k, v in finals_by_anchor.items()},
    )
    return value, t_hat, omega_hat, ell_hat, parts, gap, certified, budget.used, opt_val, extras


def regularize(
    u: Functional,
    n: int,
    s: float,
    eta: PathLike,
    direction: str = "sub",
    cfg: Optional[SearchConfig] = None,
    p=3,
) -> RegularizationResult:
    """Approximate u^n(s, eta) (sub) or v^n(s, eta) (super).

    The search is deterministic given cfg.seed and independent of
    evaluation order; ties between equal candidates break toward the
    smaller anchor time.
    """
    if direction not in ("sub", "super"):
        raise DomainError(f"unknown direction {direction!r}")
    if n < 1:
        raise DomainError("n must be at least 1")
    p = _order(p)
    cfg = cfg or SearchConfig()
    core_fn = u if direction == "sub" else -u
    value, t_hat, omega_hat, ell_hat, parts, gap, certified, evals, opt_val, extras = _sup_core(
        core_fn, n, float(s), eta, cfg, p, direction
    )
    if direction == "super":
        value, opt_val = -value, -opt_val
    return RegularizationResult(
        value=value,
        direction=direction,
        n=int(n),
        s=float(s),
        t_hat=t_hat,
        omega_hat=omega_hat,
        ell_hat=ell_hat,
        parts=parts,
        gap=gap,
        certified=certified,
        evaluations=evals,
        restarts=cfg.restarts,
        optimizer_value=opt_val,
        extras=extras,
    )


# ---------------------------------------------------------------------------
# finite-dimensional projections

_FD_CACHE: "weakref.WeakKeyDictionary[Functional, dict]" = weakref.WeakKeyDictionary()


def clear_finite_dim_cache():
    _FD_CACHE.clear()


@dataclass(frozen=True)
class FiniteDimMap:
    """(s, x) -> regularization of u at the step path of the skeleton with
    free jump x; values are cached on the canonical step-path signature
    (zero jumps dropped), so skeletons naming the same step path share
    entries exactly."""

    u: Functional
    n: int
    lam: StepSkeleton
    grid: Grid
    direction: str = "sub"
    cfg: SearchConfig = field(default_factory=SearchConfig)
    p: int = 3

    def _key(self, s: float, eta: StepPath):
        c = self.cfg
        return (
            self.n,
            self.direction,
            self.p,
            self.grid.steps,
            round(self.grid.horizon, 12),
            c.seed,
            c.restarts,
            c.segments,
            c.knots,
            c.budget,
            self.grid.index_of(s, "evaluation time"),
            _eta_signature(eta),
        )

    def result(self, s: float, x) -> RegularizationResult:
        if s < self.lam.anchor - _TOL:
            raise DomainError(f"evaluation time {s!r} precedes the skeleton anchor {self.lam.anchor!r}")
        eta = step_path(self.lam, x, self.grid)
        cache = _FD_CACHE.setdefault(self.u, {})
        key = self._key(s, eta)
        if key not in cache:
            cache[key] = regularize(self.u, self.n, s, eta, self.direction, self.cfg, self.p)
        return cache[key]

    def __call__(self, s: float, x) -> float:
        return self.result(s, x).value

    def plain(self, s: float, x) -> float:
        """The unregularized value at the same step path (the functional's
        ramp extension), for deviation measurements."""
        eta = step_path(self.lam, x, self.grid)
        return self.u.on_step(s, eta)


def finite_dim(
    u: Functional,
    n: int,
    lam: StepSkeleton,
    grid: Grid,
    direction: str = "sub",
    cfg: Optional[SearchConfig] = None,
    p=3,
) -> FiniteDimMap:
    return FiniteDimMap(u, int(n), lam, grid, direction, cfg or SearchConfig(), _order(p))


# ---------------------------------------------------------------------------
# partition


@dataclass(frozen=True)
class PartitionScheme:
    """Time partition for the finite-dimensional pass: m = floor(n^{1+a}+1)
    and s_i = (i-1) T / m for i = 1..m+1 (exact values; snapping to a grid
    happens only when skeletons are built)."""

    n: int
    a: float
    T: float
    p: int = 3

    def __post_init__(self):
        if not (0.0 < self.a < 1.0 / (5.0 * self.p)):
            raise DomainError(f"partition exponent must lie in (0, 1/(5p)) = (0, {1.0/(5.0*self.p)!r})")
        if self.n < 1:
            raise DomainError("n must be at least 1")

    @property
    def m(self) -> int:
        return int(math.floor(self.n ** (1.0 + self.a) + 1.0 + 1e-12))

    @property
    def times(self) -> tuple:
        m = self.m
        return tuple((i - 1) * self.T / m for i in range(1, m + 2))

    def snapped_times(self, grid: Grid) -> tuple:
        """Grid-snapped partition times and the largest move; PrecisionError
        if two partition times collapse to one grid index."""
        snapped = []
        moved = 0.0
        for t in self.times:
            k, mv = grid.snap(t)
            snapped.append(k)
            moved = max(moved, mv)
        if len(set(snapped)) != len(snapped):
            raise DomainError("grid too coarse: partition times collapse under snapping")
        return tuple(grid.times[k] for k in snapped), moved

    def skeleton(self, i: int, sizes, grid: Grid) -> StepSkeleton:
        """Skeleton on the first i partition times (snapped to the grid)
        with the given i-1 settled jump sizes."""
        if not (1 <= i <= self.m + 1):
            raise DomainError("skeleton index out of range")
        times, _ = self.snapped_times(grid)
        return StepSkeleton(times[:i], np.asarray(sizes, dtype=float).reshape(i - 1, -1))


def partition(n: int, a: float, T: float, p=3) -> PartitionScheme:
    return PartitionScheme(int(n), float(a), float(T), _order(p))


# ---------------------------------------------------------------------------
# kappa transform


def kappa_transform(f: Callable, kappa: float, n: int, a: float, s_i: float, L_0: float, sign: str) -> Callable:
    """Singular perturbation used to localize maxima strictly after s_i:

        sub:   (s, x) -> e^{2 L_0 s} f(s, x) - kappa n^{-1-a}/(s - s_i) - |x|^2/(2n)
        super: same with both penalties added.

    At s = s_i the value diverges by construction; the returned map yields
    -inf (sub) / +inf (super) there so the point never carries an extremum.
    """
    if kappa <= 0:
        raise DomainError("kappa must be positive")
    if sign not in ("sub", "super"):
        raise DomainError(f"unknown sign {sign!r}")
    sgn = -1.0 if sign == "sub" else 1.0
    rate = kappa * float(n) ** (-1.0 - a)

    def transformed(s: float, x) -> float:
        if s < s_i - _TOL:
            raise DomainError(f"transform evaluated at {s!r} before the partition time {s_i!r}")
        xv = np.atleast_1d(np.asarray(x, dtype=float))
        if s <= s_i + 1e-14:
            return sgn * math.inf
        base = math.exp(2.0 * L_0 * s) * f(s, x)
        return base + sgn * (rate / (s - s_i) + float(xv @ xv) / (2.0 * n))

    transformed.singular_at = s_i  # type: ignore[attr-defined]
    return transformed


# ---------------------------------------------------------------------------
# error terms


@dataclass(frozen=True)
class ErrorTerms:
    """Residual budget for the finite-dimensional subsolution property."""

    C: float
    n: int
    p: int
    a: float
    alpha: float          # time-direction budget at this s
    beta: float           # space-direction budget at this x tuple
    R: float              # C n^{-a/(p+1)} + beta
    delta_n: float
    delta_prime_n: float
    a_hat: float

    def __post_init__(self):
        for name in ("alpha", "beta", "R", "delta_n", "delta_prime_n"):
            if getattr(self, name) < 0:
                raise DomainError(f"error term {name} must be nonnegative")


def error_terms(n: int, C: float, s: float, s_i: float, i: int, x_tuple, rho_G, rho_u, L_0: float, a: float, p=3) -> ErrorTerms:
    """Concrete error-term values: alpha from the time distance to s_i,
    beta from the moduli at the space scale, R their combination, and the
    convergence scales delta_n / delta_prime_n."""
    p = _order(p)
    n = int(n)
    ds = abs(s - s_i)
    alpha = C * (n * ds + (n * ds) ** (1.0 / (p + 1.0)) + n ** (-0.5))
    xs = np.asarray(x_tuple, dtype=float)
    xnorm = tuple_norm(xs, p) if xs.size else 0.0
    z = C * (n ** (-1.0 / (p + 1.0)) + i * xnorm * n ** (-(3.0 * p + 3.0) / (2.0 * p)))
    beta = float(rho_G(z)) + L_0 * float(rho_u(z))
    R = C * n ** (-a / (p + 1.0)) + beta
    delta_n = C * (n ** (-(3.0 * p + 3.0) / 2.0) + n ** (-1.0 / (p + 1.0)))
    delta_prime_n = C * (n ** (-(3.0 * p + 3.0) / 2.0) + n ** (-1.0 / (p + 1.0)) + n ** (-1.0 / (10.0 * p)))
    a_hat = 0.5 + (a + 1.0) / p
    return ErrorTerms(C=float(C), n=n, p=p, a=float(a), alpha=float(alpha), beta=float(beta), R=float(R),
                      delta_n=float(delta_n), delta_prime_n=float(delta_prime_n), a_hat=float(a_hat))


# ---------------------------------------------------------------------------
# the pointwise power inequality


def power_bound_check(a, b, p, C):
    """True where |a+b|^{p+1} <= |a|^{p+1} + (p+1)(a.b)|a|^{p-1}
    + C|b|^2(|b|^{p-1} + |a|^{p-1}); accepts single vectors or (m, d)
    batches."""
    p = _order(p)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scalar = a.ndim <= 1
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    dot = np.einsum("ij,ij->i", a, b)
    lhs = np.linalg.norm(a + b, axis=1) ** (p + 1)
    rhs = na ** (p + 1) + (p + 1) * dot * na ** (p - 1) + C * nb**2 * (nb ** (p - 1) + na ** (p - 1))
    ok = lhs <= rhs + 1e-12 * np.maximum(1.0, np.maximum(np.abs(lhs), np.abs(rhs)))
    return bool(ok[0]) if scalar else ok


# ---------------------------------------------------------------------------
# ramp-extension distance


def extension_gap(eta: StepPath, p=3) -> float:
    """Weighted p-norm distance between a step path and its ramp-smoothed
    extension (the time components agree, so this is the full metric gap
    between the two representatives)."""
    p = _order(p)
    grid = eta.grid
    smooth = ramp_smooth(eta, grid)
    tt = grid.times
    const = np.atleast_2d(eta.value_at(0.5 * (tt[:-1] + tt[1:])))
    va = smooth.values[:-1] - const
    vb = smooth.values[1:] - const
    body = seg_abs_pow_integral(va, vb, np.full(grid.steps, grid.h), p).sum()
    term = np.linalg.norm(smooth.values[-1] - _eta_level(eta, grid.horizon)) ** p
    return float((term + body) ** (1.0 / p))
