"""Snell envelopes by backward dynamic programming.

The value process of optimal stopping, S_t = ess sup over stopping times
tau >= t of E[Gamma_tau | F_t], is computed on simulated paths with the
Longstaff-Schwartz recursion: continuation values by per-slice regression,
realized payoffs carried along paths.  A recombining binomial tree provides
an independent oracle for Markovian obstacles, and the composition with a
BSDE value process reuses the same machinery on the solved Y bundle.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .bsdesolve import (
    BasisConfig,
    BsdeModel,
    _conditional_fit,
    bsde_constants,
    solve_bsde_lsmc,
    solve_quadratic_exponential,
)
from .pathcore import MeasureTag, PathBundle, TimeGrid, save_bundle

PROBE_TOL = 1e-6


@dataclass(frozen=True)
class ObstacleProcess:
    """Adapted payoff functional Gamma_t with a declared Lipschitz bound.

    ``gamma(t, values_so_far)`` receives the truncated paths, shape
    (n, k+1, d), and returns one payoff per path; it never sees values
    beyond t, which enforces adaptedness by construction.  ``markov``
    declares that the payoff reads only the current value, in which case
    continuation regressions use the current state alone; otherwise the
    features are (current value, running max, running min) per coordinate.
    """

    gamma: Callable
    L_Gamma: float
    markov: bool = True
    d: int = 1
    label: str = ""

    def __post_init__(self):
        if self.L_Gamma < 0:
            raise ValueError("L_Gamma must be nonnegative")
        if self.d < 1:
            raise ValueError("d must be positive")
        self._spot_check()

    def _spot_check(self):
        # Lipschitz spot check on random path pairs (sup-norm increments)
        rng = np.random.default_rng(0)
        for _ in range(8):
            paths = rng.normal(size=(2, 5, self.d), scale=1.5)
            for t, k in ((0.0, 1), (0.7, 5)):
                hist = paths[:, :k, :]
                g = np.asarray(self.gamma(t, hist), dtype=float).reshape(2)
                if not np.all(np.isfinite(g)):
                    raise ValueError("obstacle returned non-finite values")
                gap = abs(g[0] - g[1])
                sup = float(np.max(np.abs(hist[0] - hist[1])))
                if gap > self.L_Gamma * sup * (1.0 + PROBE_TOL) + 1e-9:
                    raise ValueError(
                        f"obstacle violates declared Lipschitz bound "
                        f"{self.L_Gamma} (gap {gap:.4g} over sup {sup:.4g})"
                    )

    def values_at(self, k: int, times: np.ndarray, paths: np.ndarray) -> np.ndarray:
        out = np.asarray(
            self.gamma(float(times[k]), paths[:, : k + 1, :]), dtype=float
        )
        return out.reshape(paths.shape[0])


@dataclass(frozen=True, eq=False)
class SnellSolution:
    """Snell envelope bundle with the exercise decisions that produced it.

    ``S.values[:, k, 0] >= obstacle`` everywhere by construction and the
    terminal slice equals the terminal payoff exactly.  ``stop_index`` is
    the first slice where exercise is optimal per path (the estimated
    optimal stopping time); ``value0`` is the realized-payoff estimate of
    S_0, the standard low-bias Longstaff-Schwartz readout.
    """

    S: PathBundle
    exercise: np.ndarray
    stop_index: np.ndarray
    stop_times: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def grid(self) -> TimeGrid:
        return self.S.grid

    @property
    def value0(self) -> float:
        return float(self.diagnostics["value0_realized"])


def _features(values: np.ndarray, k: int, markov: bool) -> np.ndarray:
    if markov:
        return values[:, k, :]
    hist = values[:, : k + 1, :]
    return np.concatenate(
        [values[:, k, :], hist.max(axis=1), hist.min(axis=1)], axis=1
    )


def snell_envelope_lsmc(
    obstacle: ObstacleProcess,
    grid: TimeGrid,
    noise: PathBundle,
    basis: BasisConfig = BasisConfig(),
) -> SnellSolution:
    """Longstaff-Schwartz backward recursion for the Snell envelope.

    S_K = Gamma_K; going backward, the continuation value is a regression
    of the realized future payoff on state features, exercise happens where
    the current payoff is at least the continuation estimate, and
    S_k = max(Gamma_k, continuation).  Realized payoffs (not the fitted
    envelope) are carried along paths, which keeps the value-at-0 estimate
    low-bias.
    """
    if noise.grid != grid:
        raise ValueError("noise bundle lives on a different time grid")
    if noise.d != obstacle.d:
        raise ValueError(
            f"noise is {noise.d}-dimensional, obstacle expects {obstacle.d}"
        )
    n, K = noise.n, grid.steps
    times = grid.times
    values = noise.values

    Sv = np.empty((n, K + 1, 1))
    exercise = np.zeros((n, K + 1), dtype=bool)
    gam_K = obstacle.values_at(K, times, values)
    Sv[:, K, 0] = gam_K
    exercise[:, K] = True
    realized = gam_K.copy()
    stop_index = np.full(n, K, dtype=int)
    residuals = []
    basis_size = 1
    for k in range(K - 1, -1, -1):
        gam = obstacle.values_at(k, times, values)
        x = _features(values, k, obstacle.markov)
        cont, rms, basis_size, _ = _conditional_fit(x, realized[:, None], basis)
        cont = cont[:, 0]
        residuals.append(rms)
        ex = gam >= cont
        Sv[:, k, 0] = np.maximum(gam, cont)
        realized = np.where(ex, gam, realized)
        stop_index = np.where(ex, k, stop_index)
        exercise[:, k] = ex
    label = f"snell:{obstacle.label}" if obstacle.label else "snell"
    diagnostics = {
        "basis_size": basis_size,
        "regression_residuals": residuals[::-1],
        "feature_mode": "markov" if obstacle.markov else "path",
        "value0_realized": float(realized.mean()),
        "solver": "snell-lsmc",
    }
    return SnellSolution(
        S=PathBundle(grid=grid, values=Sv, tag=MeasureTag.pushforward(label)),
        exercise=exercise,
        stop_index=stop_index,
        stop_times=times[stop_index],
        diagnostics=diagnostics,
    )


# ---------------------------------------------------------------------------
# binomial-tree oracle


@dataclass(frozen=True)
class TreeConfig:
    """Recombining binomial lattice: exercise at ``n_dates`` equispaced
    dates, each bridged by ``substeps`` free moves of size sqrt(dt)."""

    T: float
    n_dates: int
    substeps: int = 1

    def __post_init__(self):
        if self.T <= 0 or self.n_dates < 1 or self.substeps < 1:
            raise ValueError("tree wants T > 0, n_dates >= 1, substeps >= 1")


def snell_envelope_tree(payoff: Callable, tree: TreeConfig) -> float:
    """Backward induction value at 0 of optimal stopping on a binomial tree.

    ``payoff(t, x)`` must be vectorized in the state array x.  The lattice
    approximates a standard Brownian motion started at 0: level i holds
    states (2j - i) sqrt(dt) with equal up/down weights; exercise is
    checked at date levels only (including t = 0).
    """
    N = tree.n_dates * tree.substeps
    dt = tree.T / N
    sq = math.sqrt(dt)
    x = (2.0 * np.arange(N + 1) - N) * sq
    v = np.asarray(payoff(tree.T, x), dtype=float)
    if v.shape != x.shape:
        raise ValueError("payoff must return one value per lattice state")
    for i in range(N - 1, -1, -1):
        v = 0.5 * (v[1:] + v[:-1])
        if i % tree.substeps == 0:
            xi = (2.0 * np.arange(i + 1) - i) * sq
            v = np.maximum(v, payoff(i * dt, xi))
    return float(v[0])


def stopping_constants(L_Gamma: float) -> float:
    """Transport constant 2 L_Gamma^2 of the stopped-value map."""
    if L_Gamma < 0:
        raise ValueError("L_Gamma must be nonnegative")
    return 2.0 * L_Gamma**2


# ---------------------------------------------------------------------------
# composition with a BSDE value process


def compose_stopping_on_bsde(
    bsde: BsdeModel,
    obstacle_on_Y: ObstacleProcess,
    grid: TimeGrid,
    noise: PathBundle,
    basis: BasisConfig = BasisConfig(),
) -> SnellSolution:
    """Optimal stopping of a payoff read off the BSDE value process.

    Solves the BSDE on ``noise`` first (the quadratic class through the
    exponential transform, the rest by LSMC), then runs the Snell recursion
    with the obstacle evaluated on the Y bundle.  The reported transport
    constant composes the two Lipschitz moduli: 2 (L_Gamma L_Y)^2.
    """
    if obstacle_on_Y.d != bsde.m:
        raise ValueError("obstacle dimension must match the BSDE value dim")
    if bsde.cls == "quadratic_convex":
        sol = solve_quadratic_exponential(bsde.terminal, grid, noise)
    else:
        sol = solve_bsde_lsmc(bsde, grid, noise, basis)
    snell = snell_envelope_lsmc(obstacle_on_Y, grid, sol.Y, basis)
    L_Y = bsde_constants(bsde, grid.T).L_Y
    snell.diagnostics["t2_constant"] = 2.0 * (obstacle_on_Y.L_Gamma * L_Y) ** 2
    snell.diagnostics["L_Y"] = L_Y
    snell.diagnostics["bsde_solver"] = sol.diagnostics["solver"]
    return snell


# ---------------------------------------------------------------------------
# obstacle registry and export


def _markov_obstacle(fn, L, label):
    return ObstacleProcess(
        gamma=lambda t, hist: fn(hist[:, -1, 0]), L_Gamma=L, markov=True,
        label=label,
    )


def obstacle_library(name: str, **kwargs) -> ObstacleProcess:
    """Named obstacles used across tests and experiment configs."""
    if name == "identity":
        return _markov_obstacle(lambda x: x, 1.0, "identity")
    if name == "put":
        K = float(kwargs.get("strike", 0.0))
        return _markov_obstacle(
            lambda x: np.maximum(K - x, 0.0), 1.0, f"put:{K}"
        )
    if name == "call":
        K = float(kwargs.get("strike", 0.0))
        return _markov_obstacle(
            lambda x: np.maximum(x - K, 0.0), 1.0, f"call:{K}"
        )
    if name == "running_max":
        return ObstacleProcess(
            gamma=lambda t, hist: hist[:, :, 0].max(axis=1),
            L_Gamma=1.0, markov=False, label="running_max",
        )
    if name == "constant":
        c = float(kwargs.get("value", 1.0))
        return ObstacleProcess(
            gamma=lambda t, hist: np.full(hist.shape[0], c),
            L_Gamma=0.0, markov=True, label=f"constant:{c}",
        )
    raise KeyError(
        f"unknown obstacle {name!r}; available: identity, put, call, "
        f"running_max, constant"
    )


def export_snell(sol: SnellSolution, s_file, times_file) -> None:
    """Write the envelope bundle (pathcore layout) and an exercise-time CSV."""
    save_bundle(sol.S, s_file)
    meta = {
        "n": int(sol.S.n),
        "T": sol.grid.T,
        "steps": sol.grid.steps,
        "value0": sol.value0,
    }
    header = f"#SNELL1 {json.dumps(meta)}\n"
    lines = [header, "path,stop_index,stop_time,payoff_at_stop\n"]
    for i in range(sol.S.n):
        k = int(sol.stop_index[i])
        lines.append(
            f"{i},{k},{float(sol.stop_times[i])!r},"
            f"{float(sol.S.values[i, k, 0])!r}\n"
        )
    data = "".join(lines)
    if hasattr(times_file, "write"):
        times_file.write(data)
    else:
        with open(times_file, "w") as fh:
            fh.write(data)
