"""Optimal transport distances and relative entropy between sampled laws.

Empirical measures either sit on path bundles (ground distance = sup over
grid times of the Euclidean norm) or on point clouds (plain Euclidean
distance); internally a point is a one-knot path, so both share the same
cost kernel.

Two Wasserstein routes are kept deliberately separate so they can check
each other: an exact assignment solver for small uniform clouds, and a
debiased entropic (Sinkhorn) estimate that also covers unequal sizes and
non-uniform weights.  ``brute_force_w2_small`` enumerates all n! matchings
and is the oracle for the exact route.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .pathcore import (
    GirsanovTilt,
    PathBundle,
    TimeGrid,
    sample_tilted_brownian,
    subseed,
)

__all__ = [
    "EmpiricalMeasure",
    "TransportPlan",
    "SinkhornResult",
    "EntropyEstimate",
    "GirsanovTilt",
    "pairwise_sup_cost",
    "wasserstein_exact",
    "wasserstein_entropic",
    "brute_force_w2_small",
    "entropic_eps",
    "entropic_self_cost",
    "girsanov_entropy",
    "relative_entropy_discrete",
    "tilt_library",
]

EXACT_N_MAX = 2048


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Weighted atoms; ``points`` has shape (k, L, m) with L grid knots."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 2:
            pts = pts[:, None, :]
        if pts.ndim != 3:
            raise ValueError(f"points must be (k, L, m), got {pts.shape}")
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (pts.shape[0],):
            raise ValueError("one weight per atom required")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be a probability vector")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def uniform(self) -> bool:
        return bool(np.allclose(self.weights, 1.0 / self.size, atol=1e-12))

    @classmethod
    def from_bundle(cls, bundle: PathBundle, weights=None) -> "EmpiricalMeasure":
        n = bundle.n
        w = np.full(n, 1.0 / n) if weights is None else weights
        return cls(bundle.values, w)

    @classmethod
    def from_points(cls, pts, weights=None) -> "EmpiricalMeasure":
        pts = np.asarray(pts, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        k = pts.shape[0]
        w = np.full(k, 1.0 / k) if weights is None else weights
        return cls(pts, w)

    def subsample(self, idx) -> "EmpiricalMeasure":
        k = len(idx)
        return EmpiricalMeasure(self.points[idx], np.full(k, 1.0 / k))


@dataclass(frozen=True, eq=False)
class TransportPlan:
    source: EmpiricalMeasure
    target: EmpiricalMeasure
    coupling: np.ndarray

    def marginal_violation(self) -> float:
        row = np.abs(self.coupling.sum(axis=1) - self.source.weights).max()
        col = np.abs(self.coupling.sum(axis=0) - self.target.weights).max()
        return float(max(row, col))

    def validate(self, atol: float = 1e-9) -> None:
        if np.any(self.coupling < -atol):
            raise ValueError("coupling has negative mass")
        v = self.marginal_violation()
        if v > atol:
            raise ValueError(f"coupling marginals off by {v:.3g}")


@dataclass(frozen=True)
class SinkhornResult:
    value: float
    converged: bool
    iterations: int
    marginal_violation: float
    eps: float

    def __float__(self) -> float:
        return self.value


@dataclass(frozen=True)
class EntropyEstimate:
    value: float
    se: float
    method: str  # "closed_form" | "monte_carlo"

    def __float__(self) -> float:
        return self.value


def _atoms(mu) -> np.ndarray:
    if isinstance(mu, EmpiricalMeasure):
        return mu.points
    if isinstance(mu, PathBundle):
        return mu.values
    raise TypeError(f"expected measure or bundle, got {type(mu).__name__}")


def _as_measure(mu) -> EmpiricalMeasure:
    if isinstance(mu, EmpiricalMeasure):
        return mu
    if isinstance(mu, PathBundle):
        return EmpiricalMeasure.from_bundle(mu)
    raise TypeError(f"expected measure or bundle, got {type(mu).__name__}")


def pairwise_sup_cost(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All sup-norm distances between row paths of a (k,L,m) and b (j,L,m).

    Accumulates the max over knots one slice at a time, so memory stays at
    one k x j block.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, None, :]
    if b.ndim == 2:
        b = b[:, None, :]
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"incompatible atom shapes {a.shape[1:]} vs {b.shape[1:]}")
    out = np.zeros((a.shape[0], b.shape[0]))
    for k in range(a.shape[1]):
        diff = a[:, k, None, :] - b[None, :, k, :]
        np.maximum(out, np.sqrt(np.einsum("ijm,ijm->ij", diff, diff)), out=out)
    return out


def wasserstein_exact(mu, nu, p: float = 2.0, n_max: int = EXACT_N_MAX):
    """Exact W_p between two equally sized uniform clouds.

    Solves the n x n assignment problem on the p-th power of the ground
    cost (shortest augmenting path solver; deterministic for a given cost
    matrix).  Unequal sizes or non-uniform weights fall back to the
    entropic estimate with a warning; n beyond ``n_max`` is rejected.

    Returns ``(value, plan)``.
    """
    mu, nu = _as_measure(mu), _as_measure(nu)
    if p < 1:
        raise ValueError("order p must be >= 1")
    if max(mu.size, nu.size) > n_max:
        raise ValueError(
            f"cloud of {max(mu.size, nu.size)} atoms exceeds the exact-solver "
            f"cap {n_max}; use wasserstein_entropic"
        )
    if mu.size != nu.size or not (mu.uniform and nu.uniform):
        warnings.warn(
            "exact solver needs equally sized uniform clouds; "
            "falling back to the entropic estimate",
            stacklevel=2,
        )
        res, plan = _sinkhorn_with_plan(mu, nu, p)
        return res.value, plan
    n = mu.size
    cost = pairwise_sup_cost(mu.points, nu.points) ** p
    rows, cols = linear_sum_assignment(cost)
    value = float(np.mean(cost[rows, cols]) ** (1.0 / p))
    coupling = np.zeros((n, n))
    coupling[rows, cols] = 1.0 / n
    return value, TransportPlan(mu, nu, coupling)


def brute_force_w2_small(mu, nu, p: float = 2.0) -> float:
    """Exact minimum over all n! matchings; oracle for n <= 8."""
    import itertools

    mu, nu = _as_measure(mu), _as_measure(nu)
    if mu.size != nu.size or mu.size > 8:
        raise ValueError("brute force needs equal clouds with n <= 8")
    if not (mu.uniform and nu.uniform):
        raise ValueError("brute force assumes uniform weights")
    cost = pairwise_sup_cost(mu.points, nu.points) ** p
    n = mu.size
    best = math.inf
    rows = np.arange(n)
    for perm in itertools.permutations(range(n)):
        best = min(best, float(cost[rows, perm].mean()))
    return best ** (1.0 / p)


def _marginal_violation(pi, a, b):
    return max(
        float(np.abs(pi.sum(axis=1) - a).max()),
        float(np.abs(pi.sum(axis=0) - b).max()),
    )


def _sinkhorn_core(cost, a, b, eps, max_iter, tol):
    # log-domain Sinkhorn with an annealed eps schedule: start loose, halve
    # down to the target while carrying the potentials over, then polish at
    # the target eps until the coupling marginals match within tol
    log_a, log_b = np.log(a), np.log(b)
    f = np.zeros_like(a)
    g = np.zeros_like(b)

    def sweep(e):
        nonlocal f, g
        f = -e * logsumexp((g[None, :] - cost) / e + log_b[None, :], axis=1)
        g = -e * logsumexp((f[:, None] - cost) / e + log_a[:, None], axis=0)

    def coupling(e):
        log_pi = (f[:, None] + g[None, :] - cost) / e \
            + log_a[:, None] + log_b[None, :]
        # entries of a coupling are <= 1, so any large positive log entry
        # is an unconverged-potential artifact; cap it to avoid inf while
        # keeping the marginal violation enormous
        return np.exp(np.minimum(log_pi, 50.0))

    it = 0
    positive = cost[cost > 0]
    start = float(np.median(positive)) if positive.size else eps
    e = max(eps, start)
    while e > 2.0 * eps and it < max_iter:
        for _ in range(10):
            sweep(e)
        it += 10
        e *= 0.5
    pi = coupling(eps)
    viol = _marginal_violation(pi, a, b)
    while viol >= tol and it < max_iter:
        for _ in range(5):
            sweep(eps)
        it += 5
        pi = coupling(eps)
        viol = _marginal_violation(pi, a, b)
    sharp = float(np.sum(pi * cost))
    return sharp, pi, it, viol


def _sinkhorn_self(cost, a, eps, max_iter, tol):
    # symmetric problem: one damped potential update (f <- midpoint of the
    # fixed-point map) converges in a few dozen sweeps
    log_a = np.log(a)
    f = np.zeros_like(a)
    it = 0
    while it < max_iter:
        for _ in range(5):
            f_new = -eps * logsumexp((f[None, :] - cost) / eps + log_a[None, :], axis=1)
            f = 0.5 * (f + f_new)
        it += 5
        pi = np.exp(np.minimum((f[:, None] + f[None, :] - cost) / eps
                                + log_a[:, None] + log_a[None, :], 50.0))
        viol = _marginal_violation(pi, a, a)
        if viol < tol:
            break
    sharp = float(np.sum(pi * cost))
    return sharp, it, viol


def entropic_eps(mu, nu=None, p: float = 2.0, frac: float = 0.05) -> float:
    """Default Sinkhorn temperature: ``frac`` times the median ground cost^p (5% keeps the
    debiased value within a couple percent of the exact solver at n~256).

    Fixing this once (e.g. against a reference cloud) keeps repeated
    debiased estimates comparable and lets self-costs be cached.
    """
    mu = _as_measure(mu)
    nu = mu if nu is None else _as_measure(nu)
    cost = pairwise_sup_cost(mu.points, nu.points) ** p
    positive = cost[cost > 0]
    med = float(np.median(positive)) if positive.size else 1.0
    return max(frac * med, 1e-12)


def entropic_self_cost(mu, p: float = 2.0, eps="auto", max_iter: int = 10_000,
                       tol: float = 1e-7) -> float:
    """Raw regularized self transport cost <pi, C> of (mu, mu) at eps.

    Not a distance; it is the correction term the debiased estimate
    subtracts.  Precompute it for a cloud that is compared against many
    others and pass it to :func:`wasserstein_entropic` as ``mu_self`` or
    ``nu_self`` (with the same explicit eps).
    """
    mu = _as_measure(mu)
    cost = pairwise_sup_cost(mu.points, mu.points) ** p
    if eps == "auto":
        eps = entropic_eps(mu, mu, p)
    value, _, viol = _sinkhorn_self(cost, mu.weights, eps, max_iter, tol)
    if viol >= tol:
        warnings.warn(
            f"sinkhorn self-cost stopped at marginal violation {viol:.2e}",
            stacklevel=2,
        )
    return value


def _sinkhorn_with_plan(mu, nu, p, eps="auto", max_iter=10_000, tol=1e-7,
                        mu_self=None, nu_self=None):
    cost = pairwise_sup_cost(mu.points, nu.points) ** p
    if eps == "auto":
        positive = cost[cost > 0]
        med = float(np.median(positive)) if positive.size else 1.0
        eps = max(0.05 * med, 1e-12)
    v_mn, pi, it1, viol1 = _sinkhorn_core(cost, mu.weights, nu.weights, eps, max_iter, tol)
    same_cloud = mu is nu or (
        mu.points.shape == nu.points.shape
        and np.array_equal(mu.points, nu.points)
        and np.array_equal(mu.weights, nu.weights)
    )
    if same_cloud:
        # V(mu,mu) cancels exactly: the debiased self distance is 0.
        mu_self = nu_self = v_mn
    if mu_self is None:
        cost_mm = pairwise_sup_cost(mu.points, mu.points) ** p
        v_mm, it2, viol2 = _sinkhorn_self(cost_mm, mu.weights, eps, max_iter, tol)
    else:
        v_mm, it2, viol2 = float(mu_self), 0, 0.0
    if nu_self is None:
        cost_nn = pairwise_sup_cost(nu.points, nu.points) ** p
        v_nn, it3, viol3 = _sinkhorn_self(cost_nn, nu.weights, eps, max_iter, tol)
    else:
        v_nn, it3, viol3 = float(nu_self), 0, 0.0
    debiased = max(0.0, v_mn - 0.5 * v_mm - 0.5 * v_nn)
    viol = max(viol1, viol2, viol3)
    converged = viol < tol
    if not converged:
        warnings.warn(
            f"sinkhorn stopped at marginal violation {viol:.2e} after "
            f"{max_iter} iterations",
            stacklevel=3,
        )
    res = SinkhornResult(
        value=debiased ** (1.0 / p),
        converged=converged,
        iterations=it1 + it2 + it3,
        marginal_violation=viol,
        eps=float(eps),
    )
    return res, TransportPlan(mu, nu, pi)


def wasserstein_entropic(mu, nu, p: float = 2.0, eps="auto",
                         max_iter: int = 10_000, tol: float = 1e-7,
                         mu_self=None, nu_self=None) -> SinkhornResult:
    """Debiased Sinkhorn estimate of W_p.

    Runs the regularized solver on the pair and on both self-pairs and
    returns ``max(0, V(mu,nu) - V(mu,mu)/2 - V(nu,nu)/2) ** (1/p)``, which
    removes most of the entropic blur of the raw value.  eps="auto" picks
    5% of the median ground cost^p (see :func:`entropic_eps`).  A run that
    never reaches marginal violation < tol comes back with
    ``converged=False`` and a warning.  ``mu_self``/``nu_self`` accept
    precomputed :func:`entropic_self_cost` values (same explicit eps) so a
    cloud compared against many others pays for its self-term once.
    """
    mu, nu = _as_measure(mu), _as_measure(nu)
    if p < 1:
        raise ValueError("order p must be >= 1")
    if eps != "auto" and not eps > 0:
        raise ValueError("eps must be positive")
    res, _ = _sinkhorn_with_plan(mu, nu, p, eps=eps, max_iter=max_iter, tol=tol,
                                 mu_self=mu_self, nu_self=nu_self)
    return res


def girsanov_entropy(tilt: GirsanovTilt, grid: TimeGrid, d: int = 1,
                     n_mc: int = 4096, seed: int = 0) -> EntropyEstimate:
    """Relative entropy H(Q | P) of the tilted law w.r.t. Wiener measure.

    Equals the mean under Q of half the time integral of |q|^2.  For a
    deterministic tilt that is the closed form 1/2 int_0^T |q_t|^2 dt,
    evaluated by left-endpoint quadrature (exact for constant tilts).  For
    an adapted tilt it is a Monte Carlo average over tilted paths with a
    standard error attached.
    """
    dt = grid.dt
    if tilt.kind == "deterministic":
        total = 0.0
        for t in grid.times[:-1]:
            q = np.broadcast_to(np.asarray(tilt.q(float(t)), dtype=np.float64), (d,))
            total += float(q @ q) * dt
        return EntropyEstimate(0.5 * total, 0.0, "closed_form")
    bundle = sample_tilted_brownian(grid, tilt, d, n_mc, subseed(seed, "entropy"))
    acc = np.zeros(n_mc)
    for k in range(grid.steps):
        q = tilt.eval(float(grid.times[k]), bundle.values[:, : k + 1], n_mc, d)
        acc += np.einsum("nd,nd->n", q, q) * dt
    acc *= 0.5
    return EntropyEstimate(
        float(acc.mean()), float(acc.std(ddof=1) / math.sqrt(n_mc)), "monte_carlo"
    )


def relative_entropy_discrete(nu, mu) -> float:
    """H(nu | mu) = sum nu_i log(nu_i / mu_i); +inf off absolute continuity."""
    nu = np.asarray(nu, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if nu.shape != mu.shape:
        raise ValueError("distributions must share a support enumeration")
    if np.any(nu < 0) or np.any(mu < 0):
        raise ValueError("negative mass")
    live = nu > 0
    if np.any(mu[live] == 0):
        return math.inf
    return float(np.sum(nu[live] * np.log(nu[live] / mu[live])))


def tilt_library(name: str, **params) -> GirsanovTilt:
    """Named Girsanov tilts used by config files and the standard battery.

    zero; constant(value); sin_time(amplitude, frequency); adapted_sin
    (amplitude: q_t = a sin of the current first coordinate).  Values may
    be scalars (broadcast over coordinates) or length-d sequences.
    """
    if name == "zero":
        return GirsanovTilt(lambda t: 0.0, bound=0.0, label="zero")
    if name == "constant":
        value = np.atleast_1d(np.asarray(params["value"], dtype=np.float64))
        d = int(params.get("d", value.size))
        # a scalar value is broadcast to every coordinate when sampled, so
        # the Euclidean bound picks up a sqrt(d) factor
        if value.size == 1:
            bound = float(abs(value[0]) * math.sqrt(d))
        else:
            bound = float(np.linalg.norm(value))
        return GirsanovTilt(
            lambda t, v=value: v, bound=bound,
            label=params.get("label", f"constant({params['value']})"),
        )
    if name == "sin_time":
        a = float(params.get("amplitude", 1.0))
        freq = float(params.get("frequency", 1.0))
        d = int(params.get("d", 1))
        return GirsanovTilt(
            lambda t: a * math.sin(2.0 * math.pi * freq * t),
            bound=abs(a) * math.sqrt(d),
            label=params.get("label", f"sin_time(a={a})"),
        )
    if name == "adapted_sin":
        a = float(params.get("amplitude", 1.0))

        def q(t, past, a=a):
            return a * np.sin(past[:, -1, :])

        return GirsanovTilt(q, bound=abs(a) * math.sqrt(params.get("d", 1)),
                            kind="adapted",
                            label=params.get("label", f"adapted_sin(a={a})"))
    raise KeyError(f"unknown tilt {name!r}")
