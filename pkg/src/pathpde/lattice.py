"""Discrete controlled-lattice engines for sup/inf expectations.

The continuous family of drift/volatility-controlled processes is replaced
by a binary-branch lattice: one time step of size h moves by
``alpha*h + sign*beta*sqrt(h)`` per axis, with the sign shared across axes
and both signs equally likely.  Controls (alpha, beta) range over finite
grids capped by the model bound L, chosen anew at every node by an adapted
strategy.  Sup/inf expectations over all such strategies are then finite
optimization problems solved exactly by backward dynamic programming:

* payoffs of the terminal state (or of (time, state)) use a recombining
  state-space DP, valid for any number of steps;
* genuinely path-dependent payoffs use an exhaustive tree DP over explicit
  histories, guarded by ``depth_cap``, with an optional Monte Carlo
  fallback that only claims a sampled bound.

The localization time ``hitting_time`` and the strategy-wise moment bounds
|E[B_H]| <= L E[H] and E[|B_H|^2] <= 2 L^2 (T+1) E[H] are checked either
exhaustively over every adapted strategy (small trees, vectorized) or
under the moment-maximizing strategies extracted from the DP (large trees).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, DomainError

__all__ = [
    "LatticeModel",
    "PayoffOnTree",
    "build_lattice",
    "terminal_payoff",
    "markov_payoff",
    "history_payoff",
    "sup_expectation",
    "hitting_time",
    "max_reach",
    "MomentEntry",
    "MomentReport",
    "moment_check",
    "strategy_count",
    "enumeration_values",
    "sup_by_enumeration",
    "strategy_moments",
    "richardson_fit",
    "model_to_jsonable",
    "strategy_to_jsonable",
    "MCEstimate",
]

_HIT_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class LatticeModel:
    """Binary-branch lattice with finite drift/volatility control grids.

    Control rows are ordered drift-major: control index c corresponds to
    drift row c // n_vol and volatility row c % n_vol.  Branch index 0 is
    the '+' sign, 1 the '-' sign.
    """

    bound: float
    horizon: float
    steps: int
    dim: int
    drift_controls: np.ndarray
    vol_controls: np.ndarray
    depth_cap: int = 12

    @property
    def h(self) -> float:
        return self.horizon / self.steps

    @property
    def sqrt_h(self) -> float:
        return math.sqrt(self.h)

    @property
    def n_controls(self) -> int:
        return len(self.drift_controls) * len(self.vol_controls)

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)


def _control_array(grid, default_axis, d: int, what: str) -> np.ndarray:
    if grid is None:
        axis = np.asarray(default_axis, dtype=float)
        rows = list(itertools.product(axis, repeat=d))
        return np.array(rows, dtype=float)
    arr = np.asarray(grid, dtype=float)
    if arr.ndim == 1:
        rows = list(itertools.product(arr, repeat=d))
        return np.array(rows, dtype=float)
    if arr.ndim == 2 and arr.shape[1] == d:
        return arr.copy()
    raise ConfigurationError(
        "%s grid must be a per-axis 1-d sequence or an (n, %d) array" % (what, d)
    )


def build_lattice(L, T, N, d: int = 1, drift_grid=None, vol_grid=None,
                  depth_cap: int = 12) -> LatticeModel:
    """Build a lattice with bound L, horizon T and N steps.

    Default control grids are {-L, 0, L} per axis for the drift and
    {0, L/2, L} per axis for the volatility (collapsing to {0} at L=0, in
    which case the only path is the constant zero path).  ``depth_cap``
    only restricts the exhaustive per-history engines; the recombining
    state-space engine ignores it.
    """
    if int(N) != N or N < 1:
        raise DomainError("steps must be a positive integer, got %r" % (N,))
    if L < 0:
        raise DomainError("control bound must be nonnegative, got %r" % (L,))
    if T <= 0:
        raise DomainError("horizon must be positive, got %r" % (T,))
    if int(d) != d or d < 1:
        raise DomainError("dimension must be a positive integer, got %r" % (d,))
    if int(depth_cap) != depth_cap or depth_cap < 1:
        raise ConfigurationError("depth_cap must be a positive integer")
    L = float(L)
    drift_default = [0.0] if L == 0.0 else [-L, 0.0, L]
    vol_default = [0.0] if L == 0.0 else [0.0, L / 2.0, L]
    drift = _control_array(drift_grid, drift_default, int(d), "drift")
    vol = _control_array(vol_grid, vol_default, int(d), "volatility")
    if np.any(np.abs(drift) > L + 1e-12):
        raise ConfigurationError("drift grid exceeds the bound %g" % L)
    if np.any(vol < -1e-12) or np.any(vol > L + 1e-12):
        raise ConfigurationError("volatility grid must lie in [0, %g]" % L)
    return LatticeModel(L, float(T), int(N), int(d), drift, vol, int(depth_cap))


def _increments(model: LatticeModel) -> np.ndarray:
    """Per-control one-step increments, shape (n_controls, 2, dim)."""
    h, rh = model.h, model.sqrt_h
    n_a, n_b = len(model.drift_controls), len(model.vol_controls)
    out = np.empty((n_a * n_b, 2, model.dim))
    i = 0
    for a in model.drift_controls:
        for b in model.vol_controls:
            out[i, 0] = a * h + b * rh
            out[i, 1] = a * h - b * rh
            i += 1
    return out


@dataclass(frozen=True)
class PayoffOnTree:
    """Payoff evaluated at tree nodes.

    ``fn(times, values)`` receives the node history: times has shape
    (k+1,) and values (k+1, dim).  ``kind`` selects the engine: "terminal"
    and "markov" payoffs carry the underlying pointwise map and run on the
    recombining DP; "history" payoffs run on the exhaustive tree engine.
    ``adapted`` is declarative: the caller asserts the value at a node
    depends only on the history up to that node.
    """

    fn: Callable[[np.ndarray, np.ndarray], float]
    adapted: bool = True
    kind: str = "history"
    pointwise: Callable | None = None

    def __post_init__(self):
        if self.kind not in ("terminal", "markov", "history"):
            raise ConfigurationError("unknown payoff kind %r" % (self.kind,))
        if self.kind != "history" and self.pointwise is None:
            raise ConfigurationError(
                "%s payoffs need their pointwise map" % self.kind)


def terminal_payoff(g: Callable) -> PayoffOnTree:
    """Payoff g(x) of the terminal state, x of shape (dim,)."""
    return PayoffOnTree(fn=lambda times, vals: float(g(vals[-1])),
                        adapted=True, kind="terminal", pointwise=g)


def markov_payoff(g: Callable) -> PayoffOnTree:
    """Payoff g(t, x) of the current time and state."""
    return PayoffOnTree(fn=lambda times, vals: float(g(times[-1], vals[-1])),
                        adapted=True, kind="markov", pointwise=g)


def history_payoff(fn: Callable, adapted: bool = True) -> PayoffOnTree:
    """Payoff fn(times, values) of the whole node history."""
    return PayoffOnTree(fn=fn, adapted=adapted, kind="history")


def _as_payoff(f) -> PayoffOnTree:
    if isinstance(f, PayoffOnTree):
        return f
    if callable(f):
        return terminal_payoff(f)
    raise ConfigurationError(
        "payoff must be a PayoffOnTree or a terminal callable")


class MCEstimate(float):
    """Float carrying Monte Carlo metadata: a sampled bound, not a value.

    ``lower_bound`` is True when the number bounds the sup from below
    (sup mode) and False when it bounds the inf from above (inf mode).
    """

    lower_bound: bool
    stderr: float

    def __new__(cls, value: float, lower_bound: bool, stderr: float):
        obj = super().__new__(cls, value)
        obj.lower_bound = bool(lower_bound)
        obj.stderr = float(stderr)
        return obj


def sup_expectation(model: LatticeModel, f, mode: str = "sup",
                    allow_monte_carlo: bool = False, mc_strategies: int = 32,
                    mc_paths: int = 512, seed: int = 0) -> float:
    """Optimal expected payoff over adapted control strategies.

    Backward dynamic programming: at each node, average over the two
    branches, then maximize (sup mode) or minimize (inf mode) over the
    control grid in its stored order.  Equals the exact optimum over all
    control-grid-valued adapted strategies.  History payoffs beyond
    ``depth_cap`` steps raise unless ``allow_monte_carlo`` is set, in
    which case a sampled strategy bound (an ``MCEstimate``) is returned.
    """
    payoff = _as_payoff(f)
    if mode not in ("sup", "inf"):
        raise ConfigurationError("mode must be 'sup' or 'inf', got %r" % (mode,))
    if not payoff.adapted:
        raise ConfigurationError("payoff must be adapted")
    if payoff.kind in ("terminal", "markov"):
        return _markov_value(model, payoff, mode)
    if model.steps > model.depth_cap:
        if allow_monte_carlo:
            return _mc_bound(model, payoff, mode, mc_strategies, mc_paths, seed)
        raise ConfigurationError(
            "history payoff on %d steps exceeds the exhaustive depth cap %d; "
            "pass allow_monte_carlo=True for a sampled bound"
            % (model.steps, model.depth_cap))
    return _tree_value(model, payoff, mode)


def _round_key(x: np.ndarray):
    return tuple(np.round(x, 12).tolist())


def _markov_layers(model: LatticeModel):
    """Forward reachable states with exact parent->child key adjacency."""
    incs = _increments(model).reshape(-1, model.dim)
    root = np.zeros(model.dim)
    layers = [{_round_key(root): root}]
    children: list[dict] = []
    for _ in range(model.steps):
        cur = layers[-1]
        nxt: dict = {}
        adj: dict = {}
        for key, x in cur.items():
            kid_keys = []
            for inc in incs:
                y = x + inc
                ck = _round_key(y)
                nxt.setdefault(ck, y)
                kid_keys.append(ck)
            adj[key] = kid_keys
        layers.append(nxt)
        children.append(adj)
    return layers, children


def _markov_value(model: LatticeModel, payoff: PayoffOnTree, mode: str) -> float:
    layers, children = _markov_layers(model)
    g = payoff.pointwise
    T = model.horizon
    if payoff.kind == "terminal":
        V = {key: float(g(x)) for key, x in layers[-1].items()}
    else:
        V = {key: float(g(T, x)) for key, x in layers[-1].items()}
    n_b = 2
    n_c = model.n_controls
    sup_mode = mode == "sup"
    for k in reversed(range(model.steps)):
        Vk = {}
        adj = children[k]
        for key in layers[k]:
            kid_keys = adj[key]
            best = None
            for c in range(n_c):
                val = 0.5 * (V[kid_keys[n_b * c]] + V[kid_keys[n_b * c + 1]])
                if best is None or (val > best if sup_mode else val < best):
                    best = val
            Vk[key] = best
        V = Vk
    (root_val,) = V.values()
    return float(root_val)


def _tree_value(model: LatticeModel, payoff: PayoffOnTree, mode: str) -> float:
    incs = _increments(model)
    times = model.times()
    n_c = incs.shape[0]
    sup_mode = mode == "sup"
    memo: dict = {}

    def rec(vals: tuple) -> float:
        k = len(vals) - 1
        if k == model.steps:
            return float(payoff.fn(times, np.array(vals)))
        got = memo.get(vals)
        if got is not None:
            return got
        last = np.asarray(vals[-1])
        best = None
        for c in range(n_c):
            up = tuple((last + incs[c, 0]).tolist())
            dn = tuple((last + incs[c, 1]).tolist())
            val = 0.5 * (rec(vals + (up,)) + rec(vals + (dn,)))
            if best is None or (val > best if sup_mode else val < best):
                best = val
        memo[vals] = best
        return best

    return rec(((0.0,) * model.dim,))


def _mc_bound(model: LatticeModel, payoff: PayoffOnTree, mode: str,
              n_strategies: int, n_paths: int, seed: int) -> MCEstimate:
    """Sampled strategy bound for deep history payoffs.

    Evaluates every constant strategy plus ``n_strategies`` random
    time-dependent ones on a common set of sampled branch signs and
    returns the best mean.  A lower bound of the sup (upper bound of the
    inf); never an exact value.
    """
    rng = np.random.default_rng(seed)
    N, d = model.steps, model.dim
    incs = _increments(model)
    n_c = incs.shape[0]
    times = model.times()
    signs = rng.integers(0, 2, size=(n_paths, N))
    plans = [np.full(N, c, dtype=np.int64) for c in range(n_c)]
    plans += [rng.integers(0, n_c, size=N) for _ in range(n_strategies)]
    sup_mode = mode == "sup"
    best = None
    best_err = 0.0
    for plan in plans:
        steps = incs[plan[np.newaxis, :], signs]      # (n_paths, N, d)
        paths = np.zeros((n_paths, N + 1, d))
        np.cumsum(steps, axis=1, out=paths[:, 1:, :])
        vals = np.array([payoff.fn(times, paths[i]) for i in range(n_paths)])
        m = float(vals.mean())
        if best is None or (m > best if sup_mode else m < best):
            best = m
            best_err = float(vals.std(ddof=1) / math.sqrt(n_paths))
    return MCEstimate(best, lower_bound=sup_mode, stderr=best_err)


def hitting_time(delta: float, times, values) -> float:
    """delta ∧ first grid time with |B_t| >= delta, truncated to the horizon.

    ``values`` is the sampled path, shape (K+1,) or (K+1, d); the norm is
    Euclidean.  When delta exceeds both the horizon and the path's reach
    the result is min(delta, T).
    """
    if delta <= 0:
        raise DomainError("delta must be positive, got %r" % (delta,))
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float).reshape(len(t), -1)
    norms = np.linalg.norm(v, axis=1)
    cap = min(float(delta), float(t[-1]))
    hits = np.nonzero(norms >= delta - _HIT_TOL)[0]
    if len(hits):
        return float(min(cap, t[hits[0]]))
    return float(cap)


def max_reach(model: LatticeModel) -> float:
    """Largest Euclidean |B_t| any strategy can reach by the horizon."""
    a_max = np.max(np.abs(model.drift_controls), axis=0)
    b_max = np.max(model.vol_controls, axis=0)
    per_axis = model.steps * (a_max * model.h + b_max * model.sqrt_h)
    return float(np.linalg.norm(per_axis))


def _cap_index(model: LatticeModel, delta) -> int:
    """Grid index of the time cap delta (floor), clipped to the horizon."""
    if delta is None or delta == math.inf:
        return model.steps
    return min(model.steps, int(math.floor(delta / model.h + 1e-12)))


# ---------------------------------------------------------------------------
# exhaustive strategy enumeration (oracle engines)


def strategy_count(model: LatticeModel) -> int:
    """Number of adapted strategies on the branch tree: n_c ** (2**N - 1)."""
    return model.n_controls ** (2 ** model.steps - 1)


def _strategy_digits(model: LatticeModel, index: int) -> np.ndarray:
    n_nodes = 2 ** model.steps - 1
    n_c = model.n_controls
    digits = np.empty(n_nodes, dtype=np.int64)
    for j in range(n_nodes):
        digits[j] = index % n_c
        index //= n_c
    return digits


def enumeration_values(model: LatticeModel, f, cap: int = 2_000_000) -> np.ndarray:
    """Expected payoff of every adapted strategy, in strategy-index order.

    Strategies assign a control to every node of the binary branch tree
    (heap order: node (k, m) at 2**k - 1 + m, where m encodes the sign
    prefix with '+'=0).  Exhaustive; intended as the oracle for small N.
    """
    payoff = _as_payoff(f)
    if model.steps > model.depth_cap:
        raise ConfigurationError(
            "enumeration beyond the depth cap %d" % model.depth_cap)
    S = strategy_count(model)
    if S > cap:
        raise ConfigurationError(
            "%d strategies exceed the enumeration cap %d" % (S, cap))
    N, d = model.steps, model.dim
    incs = _increments(model)
    times = model.times()
    sign_paths = list(itertools.product((0, 1), repeat=N))
    prob = 1.0 / len(sign_paths)
    out = np.empty(S)
    for s_idx in range(S):
        digits = _strategy_digits(model, s_idx)
        total = 0.0
        for bits in sign_paths:
            x = np.zeros(d)
            hist = [x]
            m = 0
            for k, b in enumerate(bits):
                c = digits[(1 << k) - 1 + m]
                x = x + incs[c, b]
                hist.append(x)
                m = (m << 1) | b
            total += payoff.fn(times, np.array(hist))
        out[s_idx] = prob * total
    return out


def sup_by_enumeration(model: LatticeModel, f, mode: str = "sup",
                       cap: int = 2_000_000) -> float:
    vals = enumeration_values(model, f, cap=cap)
    return float(vals.max() if mode == "sup" else vals.min())


def strategy_moments(model: LatticeModel, strategy, delta=None) -> "MomentEntry":
    """Localized moments E[B_H], E[|B_H|^2], E[H] under one strategy.

    ``strategy`` maps (times, values) at a node to a control index.
    ``delta`` localizes: H is the first grid time with |B| >= delta,
    floored time cap at delta; None means H = T.  Walks all 2**N sign
    paths, so keep N moderate.
    """
    N, d = model.steps, model.dim
    if N > 24:
        raise ConfigurationError("strategy_moments enumerates 2**N paths; "
                                 "N=%d is too deep" % N)
    incs = _increments(model)
    times = model.times()
    k_cap = _cap_index(model, delta)
    prob = 0.5 ** N
    e_b = np.zeros(d)
    e_b2 = 0.0
    e_h = 0.0
    for bits in itertools.product((0, 1), repeat=N):
        x = np.zeros(d)
        hist = [x]
        hit_k = k_cap
        for k, b in enumerate(bits):
            if k >= k_cap:
                break
            c = int(strategy(times[:k + 1], np.array(hist)))
            if not 0 <= c < model.n_controls:
                raise ConfigurationError("strategy returned control %r" % (c,))
            x = x + incs[c, b]
            hist.append(x)
            if delta is not None and np.linalg.norm(x) >= delta - _HIT_TOL:
                hit_k = k + 1
                break
        e_b += prob * x
        e_b2 += prob * float(x @ x)
        e_h += prob * times[hit_k]
    return MomentEntry(delta=delta, label="given-strategy", e_b=e_b,
                       e_b2=e_b2, e_h=e_h,
                       drift_ok=_drift_ok(model, e_b, e_h),
                       second_ok=_second_ok(model, e_b2, e_h))


# ---------------------------------------------------------------------------
# moment checks


def _moment_tol(model: LatticeModel) -> float:
    return 1e-12 * (1.0 + model.bound ** 2 * (model.horizon + 1.0))


def _drift_ok(model: LatticeModel, e_b: np.ndarray, e_h: float) -> bool:
    return float(np.linalg.norm(e_b)) <= model.bound * e_h + _moment_tol(model)


def _second_ok(model: LatticeModel, e_b2: float, e_h: float) -> bool:
    c2 = 2.0 * model.bound ** 2 * (model.horizon + 1.0)
    return e_b2 <= c2 * e_h + _moment_tol(model)


@dataclass
class MomentEntry:
    delta: float | None
    label: str
    e_b: np.ndarray
    e_b2: float
    e_h: float
    drift_ok: bool
    second_ok: bool

    @property
    def passed(self) -> bool:
        return self.drift_ok and self.second_ok


@dataclass
class MomentReport:
    bound: float
    drift_constant: float
    second_constant: float
    mode: str
    n_strategies: int
    entries: list = field(default_factory=list)
    violations: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations and all(e.passed for e in self.entries)


def _exhaustive_moment_arrays(model: LatticeModel, delta):
    """Vectorized per-strategy localized moments over ALL strategies."""
    N, d = model.steps, model.dim
    n_c = model.n_controls
    n_nodes = 2 ** N - 1
    S = strategy_count(model)
    incs = _increments(model)
    times = model.times()
    k_cap = _cap_index(model, delta)
    idx = np.arange(S, dtype=np.int64)
    strat = np.empty((S, n_nodes), dtype=np.int64)
    for j in range(n_nodes):
        strat[:, j] = (idx // (n_c ** j)) % n_c
    prob = 0.5 ** N
    e_b = np.zeros((S, d))
    e_b2 = np.zeros(S)
    e_h = np.zeros(S)
    for bits in itertools.product((0, 1), repeat=N):
        x = np.zeros((S, d))
        h_t = np.full(S, times[k_cap])
        live = np.ones(S, dtype=bool)
        m = 0
        for k in range(k_cap):
            c = strat[:, (1 << k) - 1 + m]
            step = incs[c, bits[k]]
            x[live] += step[live]
            if delta is not None:
                newly = live & (np.linalg.norm(x, axis=1) >= delta - _HIT_TOL)
                h_t[newly] = times[k + 1]
                live &= ~newly
            m = (m << 1) | bits[k]
        e_b += prob * x
        e_b2 += prob * np.einsum("ij,ij->i", x, x)
        e_h += prob * h_t
    return e_b, e_b2, e_h


def _argmax_markov_entry(model: LatticeModel, q: Callable, label: str,
                         delta) -> MomentEntry:
    """Moments under the recombining-DP strategy maximizing E[q(B_H)]."""
    incs3 = _increments(model)
    n_c = model.n_controls
    times = model.times()
    k_cap = _cap_index(model, delta)

    def absorbed(y: np.ndarray) -> bool:
        return delta is not None and np.linalg.norm(y) >= delta - _HIT_TOL

    root = np.zeros(model.dim)
    layers = [{_round_key(root): root}]
    for k in range(k_cap):
        nxt: dict = {}
        for x in layers[-1].values():
            for c in range(n_c):
                for s in (0, 1):
                    y = x + incs3[c, s]
                    if not absorbed(y):
                        nxt.setdefault(_round_key(y), y)
        layers.append(nxt)

    V = {key: float(q(x)) for key, x in layers[k_cap].items()}
    policy: list[dict] = [dict() for _ in range(k_cap)]
    for k in reversed(range(k_cap)):
        Vk = {}
        for key, x in layers[k].items():
            best = None
            best_c = 0
            for c in range(n_c):
                acc = 0.0
                for s in (0, 1):
                    y = x + incs3[c, s]
                    if absorbed(y):
                        acc += 0.5 * float(q(y))
                    else:
                        acc += 0.5 * V[_round_key(y)]
                if best is None or acc > best:
                    best, best_c = acc, c
            Vk[key] = best
            policy[k][key] = best_c
        V = Vk

    mass = {_round_key(root): (root, 1.0)}
    e_b = np.zeros(model.dim)
    e_b2 = 0.0
    e_h = 0.0
    for k in range(k_cap):
        nxt: dict = {}
        for key, (x, p) in mass.items():
            c = policy[k][key]
            for s in (0, 1):
                y = x + incs3[c, s]
                if absorbed(y):
                    e_b += 0.5 * p * y
                    e_b2 += 0.5 * p * float(y @ y)
                    e_h += 0.5 * p * times[k + 1]
                else:
                    ck = _round_key(y)
                    old = nxt.get(ck)
                    nxt[ck] = (y, (old[1] if old else 0.0) + 0.5 * p)
        mass = nxt
    for key, (x, p) in mass.items():
        e_b += p * x
        e_b2 += p * float(x @ x)
        e_h += p * times[k_cap]
    return MomentEntry(delta=delta, label=label, e_b=e_b, e_b2=e_b2, e_h=e_h,
                       drift_ok=_drift_ok(model, e_b, e_h),
                       second_ok=_second_ok(model, e_b2, e_h))


def _node_branch_string(model: LatticeModel, node: int) -> str:
    k = node.bit_length()
    while (1 << k) - 1 > node:
        k -= 1
    m = node - ((1 << k) - 1)
    bits = format(m, "0%db" % k) if k else ""
    return bits.replace("0", "+").replace("1", "-")


def moment_check(model: LatticeModel, deltas=(0.5,), mode: str = "auto",
                 strategy_cap: int = 400_000) -> MomentReport:
    """Check |E[B_H]| <= L E[H] and E[|B_H|^2] <= 2 L^2 (T+1) E[H].

    H is the localization time of each delta (None or inf means H = T,
    off-grid delta is floored to the last grid time below it so that B
    and H are read at the same node).  Small trees check every adapted
    strategy via the vectorized enumeration; large trees check the
    strategies extracted by maximizing each moment coordinate on the
    recombining DP.  Violations name the strategy and node.
    """
    if mode not in ("auto", "exhaustive", "sup"):
        raise ConfigurationError("mode must be auto, exhaustive or sup")
    S = strategy_count(model)
    exhaustive = mode == "exhaustive" or (
        mode == "auto" and S <= strategy_cap and model.steps <= model.depth_cap)
    if exhaustive and S > 4 * strategy_cap:
        raise ConfigurationError(
            "%d strategies exceed the exhaustive moment cap" % S)
    c2 = 2.0 * model.bound ** 2 * (model.horizon + 1.0)
    report = MomentReport(bound=model.bound, drift_constant=model.bound,
                          second_constant=c2,
                          mode="exhaustive" if exhaustive else "sup-strategy",
                          n_strategies=S if exhaustive else 0)
    tol = _moment_tol(model)
    for delta in deltas:
        if delta is not None and delta != math.inf and delta <= 0:
            raise DomainError("delta must be positive, got %r" % (delta,))
        if exhaustive:
            e_b, e_b2, e_h = _exhaustive_moment_arrays(model, delta)
            drift_lhs = np.linalg.norm(e_b, axis=1)
            drift_bad = drift_lhs > model.bound * e_h + tol
            second_bad = e_b2 > c2 * e_h + tol
            worst = int(np.argmax(np.maximum(
                drift_lhs - model.bound * e_h, e_b2 - c2 * e_h)))
            report.entries.append(MomentEntry(
                delta=delta, label="worst-of-%d" % len(e_b),
                e_b=e_b[worst], e_b2=float(e_b2[worst]), e_h=float(e_h[worst]),
                drift_ok=not drift_bad.any(), second_ok=not second_bad.any()))
            for s_idx in np.nonzero(drift_bad | second_bad)[0][:8]:
                digits = _strategy_digits(model, int(s_idx))
                report.violations.append({
                    "delta": delta,
                    "strategy": strategy_to_jsonable(model, digits),
                    "drift_ok": bool(~drift_bad[s_idx]),
                    "second_ok": bool(~second_bad[s_idx]),
                })
        else:
            targets = [(lambda y: float(y @ y), "sup:|B|^2")]
            for j in range(model.dim):
                targets.append((lambda y, j=j: float(y[j]), "sup:+B[%d]" % j))
                targets.append((lambda y, j=j: float(-y[j]), "sup:-B[%d]" % j))
            for q, label in targets:
                entry = _argmax_markov_entry(model, q, label, delta)
                report.entries.append(entry)
                if not entry.passed:
                    report.violations.append({
                        "delta": delta, "strategy": label,
                        "drift_ok": entry.drift_ok,
                        "second_ok": entry.second_ok,
                    })
    return report


# ---------------------------------------------------------------------------
# misc utilities


def richardson_fit(ns: Sequence[int], values: Sequence[float]):
    """Least-squares fit v_N = v_inf + b / N; returns (v_inf, b, max resid)."""
    ns = np.asarray(ns, dtype=float)
    vals = np.asarray(values, dtype=float)
    if len(ns) < 2:
        raise DomainError("need at least two lattice sizes")
    A = np.column_stack([np.ones_like(ns), 1.0 / ns])
    coef, *_ = np.linalg.lstsq(A, vals, rcond=None)
    resid = float(np.max(np.abs(A @ coef - vals)))
    return float(coef[0]), float(coef[1]), resid


def model_to_jsonable(model: LatticeModel) -> dict:
    return {
        "bound": model.bound,
        "horizon": model.horizon,
        "steps": model.steps,
        "dim": model.dim,
        "drift_controls": model.drift_controls.tolist(),
        "vol_controls": model.vol_controls.tolist(),
        "depth_cap": model.depth_cap,
    }


def strategy_to_jsonable(model: LatticeModel, digits) -> dict:
    """Strategy dump keyed by branch strings ('' root, then '+'/'-')."""
    n_vol = len(model.vol_controls)
    out = {}
    for k in range(model.steps):
        for m in range(1 << k):
            c = int(digits[(1 << k) - 1 + m])
            i_a, i_b = divmod(c, n_vol)
            bits = format(m, "0%db" % k) if k else ""
            out[bits.replace("0", "+").replace("1", "-")] = {
                "drift": model.drift_controls[i_a].tolist(),
                "vol": model.vol_controls[i_b].tolist(),
            }
    return out
