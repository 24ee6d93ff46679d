"""Nonlinearities driving the path equation: catalog, transforms, audits.

A nonlinearity G(theta, y, z, gamma) consumes a base point theta = (t, path),
the candidate value y, gradient z and Hessian gamma.  Alongside the
evaluator, each instance declares the metadata the checkers rely on: the
Lipschitz constant in (y, z, gamma), an optional continuity modulus in
theta, and whether G is nondecreasing in y (the one-sided form of the
Lipschitz condition).

Two changes of variable are provided.  ``transform_discount`` rescales by
e^{-Lt}: u maps to e^{-Lt} u and G to L y + e^{-Lt} G(theta, e^{Lt} y,
e^{Lt} z, e^{Lt} gamma), the unique wrapping for which the rescaled
function solves the rescaled equation exactly when the original pair does;
for L at least the Lipschitz constant the new nonlinearity is nondecreasing
in y.  ``transform_gbar`` applies the opposite scaling at rate 2 L_0,
producing a strictly decreasing-in-y nonlinearity whose decrement dominates
L_0 (y - y'); that chain inequality is audited on random samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, DomainError, PrecisionError
from .functionals import Functional, Modulus, ramp_smooth
from .paths import (
    DiscretePath,
    Grid,
    StepPath,
    distance,
    point,
    random_path,
    stopped_norm_closed_form,
)

__all__ = [
    "Nonlinearity",
    "catalog_nonlinearities",
    "transform_discount",
    "transform_gbar",
    "gbar_chain_audit",
    "AuditReport",
    "assumption_audit",
]

_AUDIT_TOL = 1e-10


def _as_vec(z, d: int | None = None) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(z, dtype=float))
    if arr.ndim != 1:
        raise DomainError("gradient argument must be a vector")
    if d is not None and len(arr) != d:
        raise DomainError("gradient has dimension %d, expected %d" % (len(arr), d))
    return arr


def _as_gamma(g, d: int | None = None) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(g, dtype=float))
    if arr.shape[0] != arr.shape[1]:
        raise DomainError("hessian argument must be square")
    if not np.all(np.abs(arr - arr.T) <= 1e-12):
        raise DomainError("hessian argument must be symmetric to 1e-12")
    if d is not None and arr.shape[0] != d:
        raise DomainError("hessian has dimension %d, expected %d" % (arr.shape[0], d))
    return arr


def _theta_parts(theta):
    if hasattr(theta, "t") and hasattr(theta, "path"):
        return float(theta.t), theta.path
    t, path = theta
    return float(t), path


def _stopped_norm_any(path, t: float, p) -> float:
    if isinstance(path, DiscretePath):
        return stopped_norm_closed_form(path, p, t)
    if isinstance(path, StepPath):
        smooth = ramp_smooth(path, path.grid)
        return stopped_norm_closed_form(smooth, p, t)
    raise DomainError("unsupported path type %r" % type(path))


@dataclass(frozen=True)
class Nonlinearity:
    """Evaluator G(theta, y, z, gamma) with declared regularity metadata.

    ``fn`` receives (t, path, y, z, gamma) with z of shape (d,) and gamma
    (d, d).  ``lipschitz`` is the constant in (y, z, gamma); ``modulus``
    the continuity modulus in theta (None when not declared); ``monotone``
    asserts G is nondecreasing in y, i.e. the one-sided Lipschitz form.
    """

    name: str
    fn: Callable
    lipschitz: float
    modulus: Optional[Callable] = None
    monotone: bool = False

    def __call__(self, theta, y, z, gamma) -> float:
        t, path = _theta_parts(theta)
        return float(self.fn(t, path, float(y), _as_vec(z), _as_gamma(gamma)))


def catalog_nonlinearities(d: int = 1, p: int = 3) -> dict:
    """Built-in nonlinearities addressed by name in configs."""
    zero = Nonlinearity(
        name="zero",
        fn=lambda t, w, y, z, g: 0.0,
        lipschitz=0.0,
        modulus=Modulus("linear", 0.0),
        monotone=True,
    )
    half_lap = Nonlinearity(
        name="half-laplacian",
        fn=lambda t, w, y, z, g: 0.5 * float(np.trace(g)),
        lipschitz=0.5 * math.sqrt(d),
        modulus=Modulus("linear", 0.0),
        monotone=True,
    )

    def hjb(t, w, y, z, g):
        tr = float(np.trace(g))
        # sup over |a| <= 1 of 0.5 (1 + a/2)^2 tr: coefficient in [1/8, 9/8]
        return 1.125 * tr if tr >= 0.0 else 0.125 * tr

    hjb_sup = Nonlinearity(
        name="hjb-sup-vol",
        fn=hjb,
        lipschitz=1.125 * math.sqrt(d),
        modulus=Modulus("linear", 0.0),
        monotone=True,
    )
    lipsin = Nonlinearity(
        name="lipschitz-sin",
        fn=lambda t, w, y, z, g: math.sin(_stopped_norm_any(w, t, p)),
        lipschitz=0.0,
        modulus=Modulus("linear", 1.0),
        monotone=True,
    )
    return {g.name: g for g in (zero, half_lap, hjb_sup, lipsin)}


def transform_discount(obj, L: float, horizon: float = 1.0):
    """Exponential rescaling by e^{-Lt} of a functional or nonlinearity.

    For a functional u the result is e^{-Lt} u; for a nonlinearity the
    result is the wrapped evaluator L y + e^{-Lt} G(theta, e^{Lt} y,
    e^{Lt} z, e^{Lt} gamma), so that the rescaled functional solves (or
    sub/supersolves) the rescaled equation exactly when the original pair
    does.  Negative L inverts the scaling: applying L and then -L is the
    identity.  The monotone flag is set once L dominates the Lipschitz
    constant; ``horizon`` only feeds the declared bound when L < 0.
    """
    L = float(L)
    if isinstance(obj, Functional):
        grow = math.exp(max(0.0, -L) * horizon)
        base_mod = obj.modulus
        new_bound = obj.bound * grow

        def mod(r):
            return grow * base_mod(r) + abs(L) * new_bound * np.asarray(r)

        return Functional(
            "discount(%s,%g)" % (obj.name, L),
            lambda t, w, _f=obj: math.exp(-L * t) * _f.at(t, w),
            new_bound,
            mod,
            markov=(lambda t, x: math.exp(-L * t) * obj.markov(t, x))
            if obj.markov
            else None,
        )
    if isinstance(obj, Nonlinearity):
        inner = obj.fn

        def fn(t, w, y, z, g):
            e = math.exp(L * t)
            return L * y + (1.0 / e) * inner(t, w, e * y, e * z, e * g)

        return Nonlinearity(
            name="discount(%s,%g)" % (obj.name, L),
            fn=fn,
            lipschitz=abs(L) + obj.lipschitz,
            modulus=None,
            monotone=(L >= obj.lipschitz) or (obj.monotone and L >= 0.0),
        )
    raise ConfigurationError(
        "transform_discount applies to Functional or Nonlinearity instances")


def gbar_chain_audit(G: Nonlinearity, L0: float, n_samples: int = 10_000,
                     seed: int = 0, grid: Grid | None = None) -> dict:
    """Sample the chain L0 (y - y') <= (Gbar(y') - Gbar(y))^+ <= |...|.

    Gbar is the rate-2 L0 growth transform of G; the lower chain holds
    whenever G satisfies the one-sided Lipschitz form with constant L0.
    Returns a dict with the count checked, worst margin and any witnesses.
    """
    if L0 < 0:
        raise DomainError("L0 must be nonnegative")
    gbar = transform_discount(G, -2.0 * L0)
    rng = np.random.default_rng(seed)
    grid = grid or Grid(1.0, 16)
    paths = [DiscretePath.zero(grid, 1),
             random_path(grid, 1, rng),
             random_path(grid, 1, rng, scale=0.3)]
    worst = math.inf
    witnesses = []
    checked = 0
    for _ in range(n_samples):
        t = float(rng.choice(grid.times))
        path = paths[int(rng.integers(len(paths)))].stopped_at(t)
        y2 = float(rng.uniform(-3.0, 3.0))
        y1 = y2 + float(rng.uniform(0.0, 4.0))   # y1 >= y2
        z = rng.uniform(-2.0, 2.0, size=1)
        gam = np.array([[float(rng.uniform(-3.0, 3.0))]])
        lhs = L0 * (y1 - y2)
        diff = gbar((t, path), y2, z, gam) - gbar((t, path), y1, z, gam)
        mid = max(diff, 0.0)
        checked += 1
        margin = min(mid - lhs, abs(diff) - mid)
        if margin < worst:
            worst = margin
        if mid + _AUDIT_TOL < lhs or abs(diff) + _AUDIT_TOL < mid:
            if len(witnesses) < 5:
                witnesses.append({"t": t, "y": y1, "y_prime": y2,
                                  "z": float(z[0]), "gamma": float(gam[0, 0]),
                                  "lhs": lhs, "diff": diff})
    return {"checked": checked, "worst_margin": worst,
            "witnesses": witnesses, "passed": not witnesses}


def transform_gbar(G: Nonlinearity, L0: float, n_check: int = 256,
                   seed: int = 0, grid: Grid | None = None) -> Nonlinearity:
    """Rate-2 L0 growth transform with a construction-time chain audit.

    The result is decreasing in y with decrement at least L0 (y - y')
    whenever G satisfies the one-sided form at constant L0; a sampled
    violation raises with the witness.
    """
    audit = gbar_chain_audit(G, L0, n_samples=n_check, seed=seed, grid=grid)
    if not audit["passed"]:
        raise PrecisionError(
            "growth transform of %r violates the monotonicity chain at %r"
            % (G.name, audit["witnesses"][0]))
    gbar = transform_discount(G, -2.0 * L0)
    return Nonlinearity(name="gbar(%s,%g)" % (G.name, L0), fn=gbar.fn,
                        lipschitz=gbar.lipschitz, modulus=None, monotone=False)


@dataclass
class AuditReport:
    name: str
    conditions: dict
    skipped: list

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.conditions.values())


def assumption_audit(G: Nonlinearity, sample_spec: dict | None = None,
                     n_samples: int = 200, seed: int = 0,
                     grid: Grid | None = None, p: int = 3,
                     d: int = 1) -> AuditReport:
    """Randomized audit of the structural conditions on G.

    Checks ellipticity (monotone in the Hessian order), the declared
    theta-modulus (skipped when none is declared), the Lipschitz bound in
    (y, z, gamma), and, when the monotone flag is set, the one-sided form
    with the positive part of the y increment.  ``sample_spec`` may
    override the generated samples with explicit lists under the keys
    "ellipticity", "theta_pairs", "lipschitz".
    """
    rng = np.random.default_rng(seed)
    grid = grid or Grid(1.0, 32)
    pool = [DiscretePath.zero(grid, d)] + [
        random_path(grid, d, rng, scale=s) for s in (1.0, 0.5, 2.0)]

    def rand_theta():
        t = float(rng.choice(grid.times))
        path = pool[int(rng.integers(len(pool)))].stopped_at(t)
        return point(t, path)

    def rand_args():
        y = float(rng.uniform(-3.0, 3.0))
        z = rng.uniform(-2.0, 2.0, size=d)
        gam = rng.uniform(-2.0, 2.0, size=(d, d))
        gam = 0.5 * (gam + gam.T)
        return y, z, gam

    conditions = {}
    skipped = []

    # (i) ellipticity
    if sample_spec and "ellipticity" in sample_spec:
        ell_samples = sample_spec["ellipticity"]
    else:
        ell_samples = []
        for _ in range(n_samples):
            th = rand_theta()
            y, z, gam = rand_args()
            w = rng.uniform(-1.0, 1.0, size=(d, 1))
            bump = w @ w.T * float(rng.uniform(0.0, 2.0))
            bump[np.diag_indices(d)] += rng.uniform(0.0, 1.0, size=d)
            ell_samples.append((th, y, z, gam, gam + bump))
    viol = []
    for th, y, z, g1, g2 in ell_samples:
        if G(th, y, z, g1) > G(th, y, z, g2) + _AUDIT_TOL:
            if len(viol) < 5:
                viol.append({"theta_t": _theta_parts(th)[0],
                             "gamma": np.asarray(g1).tolist(),
                             "gamma_prime": np.asarray(g2).tolist(),
                             "lhs": G(th, y, z, g1), "rhs": G(th, y, z, g2)})
    conditions["ellipticity"] = {"checked": len(ell_samples),
                                 "violations": viol, "passed": not viol}

    # (ii) theta-modulus
    if G.modulus is None:
        skipped.append("theta-modulus (no declared modulus)")
    else:
        if sample_spec and "theta_pairs" in sample_spec:
            th_pairs = sample_spec["theta_pairs"]
        else:
            th_pairs = [(rand_theta(), rand_theta()) for _ in range(n_samples)]
        viol = []
        for th1, th2 in th_pairs:
            y, z, gam = rand_args()
            dp = distance(th1, th2, p)
            gap = abs(G(th1, y, z, gam) - G(th2, y, z, gam))
            if gap > float(G.modulus(dp)) + _AUDIT_TOL:
                if len(viol) < 5:
                    viol.append({"d_p": dp, "gap": gap,
                                 "bound": float(G.modulus(dp))})
        conditions["theta-modulus"] = {"checked": len(th_pairs),
                                       "violations": viol, "passed": not viol}

    # (iii) Lipschitz in (y, z, gamma)
    if sample_spec and "lipschitz" in sample_spec:
        lip_samples = sample_spec["lipschitz"]
    else:
        lip_samples = []
        for _ in range(n_samples):
            th = rand_theta()
            lip_samples.append((th, rand_args(), rand_args()))
    viol = []
    one_sided_viol = []
    for th, (y1, z1, g1), (y2, z2, g2) in lip_samples:
        gap = G(th, y1, z1, g1) - G(th, y2, z2, g2)
        rhs = G.lipschitz * (abs(y1 - y2) + np.linalg.norm(z1 - z2)
                             + np.linalg.norm(g1 - g2))
        if abs(gap) > rhs + _AUDIT_TOL:
            if len(viol) < 5:
                viol.append({"gap": gap, "bound": rhs})
        if G.monotone:
            rhs_one = G.lipschitz * (max(y1 - y2, 0.0)
                                     + np.linalg.norm(z1 - z2)
                                     + np.linalg.norm(g1 - g2))
            if gap > rhs_one + _AUDIT_TOL:
                if len(one_sided_viol) < 5:
                    one_sided_viol.append({"gap": gap, "bound": rhs_one})
    conditions["lipschitz"] = {"checked": len(lip_samples),
                               "violations": viol, "passed": not viol}
    if G.monotone:
        conditions["one-sided"] = {"checked": len(lip_samples),
                                   "violations": one_sided_viol,
                                   "passed": not one_sided_viol}
    else:
        skipped.append("one-sided (monotone flag not set)")
    return AuditReport(name=G.name, conditions=conditions, skipped=skipped)
