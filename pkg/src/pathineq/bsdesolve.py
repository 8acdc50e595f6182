"""Backward SDE solvers on Brownian paths.

Least-squares Monte Carlo for Lipschitz generators, an exponential-transform
solver for the quadratic generator |z|^2/2, a dual (tilted-measure) lower
bound for convex generators, the explicit transport/log-Sobolev constants
attached to each generator class, Z-bound checks, and a pathwise Lipschitz
probe for path-functional processes.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import math
import warnings
from typing import Callable, Optional

import numpy as np

from .pathcore import (
    GirsanovTilt,
    MeasureTag,
    PathBundle,
    TimeGrid,
    apply_shift,
    bundle_sup_norms,
    make_grid,
    sample_tilted_brownian,
    save_bundle,
    subseed,
)

__all__ = [
    "BasisConfig",
    "BsdeModel",
    "BsdeSolution",
    "BsdeConstants",
    "GeneratorSpec",
    "TerminalSpec",
    "solve_bsde_lsmc",
    "solve_quadratic_exponential",
    "convex_conjugate",
    "dual_lower_bound",
    "DualBound",
    "bsde_constants",
    "truncated_growth_constants",
    "z_bound_check",
    "pathwise_lipschitz_probe",
    "generator_library",
    "terminal_library",
    "GENERATORS",
    "TERMINALS",
    "export_solution",
]


# ---------------------------------------------------------------------------
# regression machinery


@dataclasses.dataclass(frozen=True)
class BasisConfig:
    """Least-squares regression settings for the backward sweep.

    ``degree`` is the total degree of the tensor-polynomial basis in the
    current Brownian coordinates; ``include_exp`` adds exp(+-w_j) columns
    (they make conditional expectations of exponentials of the terminal
    state exactly representable).  ``ridge`` is a small Tikhonov term,
    ``picard_cap``/``picard_tol`` control the fixed-point iteration that
    resolves the implicit generator term.
    """

    degree: int = 3
    include_exp: bool = False
    ridge: float = 1e-10
    picard_tol: float = 1e-8
    picard_cap: int = 20


def _poly_columns(x: np.ndarray, degree: int, include_exp: bool) -> np.ndarray:
    """Design matrix: tensor monomials of total degree <= degree, plus
    optional exp(+-x_j) columns; non-constant columns standardized and
    zero-variance columns dropped."""
    n, d = x.shape
    cols = [np.ones(n)]
    for total in range(1, degree + 1):
        for alpha in itertools.combinations_with_replacement(range(d), total):
            col = np.ones(n)
            for j in alpha:
                col = col * x[:, j]
            cols.append(col)
    if include_exp:
        for j in range(d):
            cols.append(np.exp(x[:, j]))
            cols.append(np.exp(-x[:, j]))
    out = []
    for i, col in enumerate(cols):
        if i == 0:
            out.append(col)
            continue
        mu, sd = col.mean(), col.std()
        if sd < 1e-12 * (1.0 + abs(mu)):
            continue
        out.append((col - mu) / sd)
    return np.column_stack(out)


def _ridge_lstsq(phi: np.ndarray, targets: np.ndarray, ridge: float):
    """Least squares with a tiny Tikhonov term; returns (fitted, rank, rms)."""
    n, p = phi.shape
    aug = np.vstack([phi, math.sqrt(ridge) * np.eye(p)])
    rhs = np.vstack([targets, np.zeros((p, targets.shape[1]))])
    beta, _, _, _ = np.linalg.lstsq(aug, rhs, rcond=None)
    rank = np.linalg.matrix_rank(phi)
    fitted = phi @ beta
    rms = float(np.sqrt(np.mean((targets - fitted) ** 2)))
    return fitted, rank, rms


def _conditional_fit(x: np.ndarray, targets: np.ndarray, basis: BasisConfig):
    """Regression estimate of E[target | state x].

    Reduces the polynomial degree (with a warning) while the design matrix
    is rank-deficient; degree 0 always succeeds and returns the plain mean.
    """
    targets = np.atleast_2d(targets.T).T if targets.ndim == 1 else targets
    degree = basis.degree
    while True:
        phi = _poly_columns(x, degree, basis.include_exp and degree > 0)
        fitted, rank, rms = _ridge_lstsq(phi, targets, basis.ridge)
        if rank >= phi.shape[1] or degree == 0:
            return fitted, rms, phi.shape[1], degree
        degree -= 1
        warnings.warn(
            f"regression design rank-deficient; reducing basis degree to {degree}",
            stacklevel=3,
        )


# ---------------------------------------------------------------------------
# models


PROBE_TOL = 1e-6

_CLASSES = ("lipschitz", "quadratic_convex", "linear")


@dataclasses.dataclass(frozen=True)
class BsdeModel:
    """Terminal value plus generator, with the metadata the bounds need.

    ``generator(t, paths_so_far, y, z)`` maps arrays of shapes
    (n, k+1, d), (n, m), (n, m, d) to drift values (n, m); ``terminal``
    maps the full knot array (n, steps+1, d) to (n, m) (or (n,) when
    m = 1).  ``cls`` is one of 'lipschitz', 'quadratic_convex' (m = 1,
    growth g <= growth_C (1+|z|^2), optionally a linear lower bound
    g >= lower_bound_a(t) . z + lower_bound_b), or 'linear'.  ``gstar`` is
    an optional analytic convex conjugate (t, q-array) -> array.
    Construction spot-checks the declared class on random probe triples.
    """

    generator: Callable
    terminal: Callable
    m: int
    d: int
    cls: str
    L_g: float
    L_F: float
    growth_C: Optional[float] = None
    gstar: Optional[Callable] = None
    lower_bound_a: Optional[Callable] = None
    lower_bound_b: Optional[float] = None
    linear_L_G: Optional[float] = None
    label: str = ""

    def __post_init__(self):
        if self.cls not in _CLASSES:
            raise ValueError(f"unknown model class {self.cls!r}; one of {_CLASSES}")
        if self.m < 1 or self.d < 1:
            raise ValueError("dimensions m, d must be >= 1")
        if self.L_g < 0 or self.L_F < 0:
            raise ValueError("Lipschitz constants must be >= 0")
        if self.cls == "quadratic_convex":
            if self.m != 1:
                raise ValueError("quadratic_convex models are one-dimensional in y")
            if self.growth_C is None:
                raise ValueError("quadratic_convex models need growth_C")
        self._probe()

    def _probe(self):
        rng = np.random.default_rng(0)
        n = 8
        paths = np.zeros((n, 2, self.d))
        t = 0.17
        y1, y2 = rng.normal(size=(2, n, self.m))
        z1, z2 = rng.normal(size=(2, n, self.m, self.d))
        g1 = np.asarray(self.generator(t, paths, y1, z1), dtype=float)
        g2 = np.asarray(self.generator(t, paths, y2, z2), dtype=float)
        g1 = np.broadcast_to(g1, (n, self.m))
        g2 = np.broadcast_to(g2, (n, self.m))
        if not (np.all(np.isfinite(g1)) and np.all(np.isfinite(g2))):
            raise ValueError("generator returned non-finite values on probes")
        if self.cls in ("lipschitz", "linear"):
            dy = np.linalg.norm(y1 - y2, axis=1)
            dz = np.sqrt(((z1 - z2) ** 2).sum(axis=(1, 2)))
            lhs = np.linalg.norm(g1 - g2, axis=1)
            bound = self.L_g * (dy + dz) * (1 + PROBE_TOL) + 1e-9
            if np.any(lhs > bound):
                raise ValueError(
                    f"generator violates declared Lipschitz constant {self.L_g} "
                    f"on probes (excess {float((lhs - bound).max()):.3g})"
                )
        else:
            znorm2 = (z1**2).sum(axis=(1, 2))
            bound = self.growth_C * (1.0 + znorm2) * (1 + PROBE_TOL) + 1e-9
            if np.any(g1[:, 0] > bound):
                raise ValueError(
                    f"generator violates quadratic growth bound C={self.growth_C}"
                )

    def terminal_values(self, values: np.ndarray) -> np.ndarray:
        out = np.asarray(self.terminal(values), dtype=float)
        if out.ndim == 1:
            out = out[:, None]
        if out.shape != (values.shape[0], self.m):
            raise ValueError(
                f"terminal returned shape {out.shape}; expected "
                f"({values.shape[0]}, {self.m})"
            )
        return out


@dataclasses.dataclass(frozen=True, eq=False)
class BsdeSolution:
    """Backward solution: adapted values Y on the grid and the martingale
    integrand Z on [t_0, t_{steps-1}]."""

    Y: PathBundle
    Z: np.ndarray
    diagnostics: dict

    @property
    def grid(self) -> TimeGrid:
        return self.Y.grid

    @property
    def y0(self) -> np.ndarray:
        """Initial value (identical across paths up to regression)."""
        return self.Y.values[:, 0, :].mean(axis=0)


# ---------------------------------------------------------------------------
# solvers


def solve_bsde_lsmc(
    model: BsdeModel,
    grid: TimeGrid,
    noise: PathBundle,
    basis: BasisConfig = BasisConfig(),
) -> BsdeSolution:
    """Backward least-squares Monte Carlo sweep for Lipschitz generators.

    At each time slice the continuation value is regressed on polynomials
    of the current Brownian state, Z comes from the increment regressor
    E[Y_{k+1} dW]/dt, and the implicit generator term is resolved by Picard
    iteration (cap/tol from ``basis``).  The terminal slice is the exact
    per-path terminal value.  Diagnostics report basis size, maximal Picard
    iteration count, a convergence flag, and per-slice regression RMS.

    The increment regressor uses the fitted continuation as a control
    variate: the target is (Y_{k+1} - E[Y_{k+1}|state]) dW / dt, which has
    the same conditional mean but O(1) conditional variance.  Without the
    centering the target variance grows with |Y|, and fitted Z values at
    high-leverage tail states stay noisy no matter how many paths are used.
    """
    if model.cls not in ("lipschitz", "linear"):
        raise ValueError("solve_bsde_lsmc handles lipschitz/linear models")
    if noise.grid != grid:
        raise ValueError("noise bundle lives on a different time grid")
    if noise.d != model.d:
        raise ValueError(f"noise is {noise.d}-dimensional, model wants {model.d}")
    n, K, m, d = noise.n, grid.steps, model.m, model.d
    dt = grid.dt
    Yv = np.empty((n, K + 1, m))
    Z = np.empty((n, K, m, d))
    Yv[:, K, :] = model.terminal_values(noise.values)
    residuals = []
    picard_counts = []
    converged = True
    basis_size = 1
    y_next = Yv[:, K, :]
    for k in range(K - 1, -1, -1):
        x = noise.values[:, k, :]
        dw = noise.values[:, k + 1, :] - noise.values[:, k, :]
        ce, rms, basis_size, _ = _conditional_fit(x, y_next, basis)
        residuals.append(rms)
        zt = ((y_next - ce)[:, :, None] * dw[:, None, :]) / dt
        z_fit, _, _, _ = _conditional_fit(x, zt.reshape(n, m * d), basis)
        Z[:, k, :, :] = z_fit.reshape(n, m, d)
        t = float(grid.times[k])
        hist = noise.values[:, : k + 1, :]
        y = ce
        its = basis.picard_cap
        for it in range(basis.picard_cap):
            gy = np.asarray(model.generator(t, hist, y, Z[:, k, :, :]), dtype=float)
            y_new = ce + dt * np.broadcast_to(gy, (n, m))
            delta = float(np.max(np.abs(y_new - y)))
            y = y_new
            if delta < basis.picard_tol:
                its = it + 1
                break
        else:
            converged = False
        picard_counts.append(its)
        Yv[:, k, :] = y
        y_next = y
    tag = MeasureTag.pushforward(f"bsde:{model.label}" if model.label else "bsde")
    diagnostics = {
        "basis_size": basis_size,
        "picard_iterations": max(picard_counts) if picard_counts else 0,
        "picard_converged": converged,
        "regression_residuals": residuals[::-1],
        "solver": "lsmc",
    }
    return BsdeSolution(
        Y=PathBundle(grid=grid, values=Yv, tag=tag), Z=Z, diagnostics=diagnostics
    )


def solve_quadratic_exponential(
    terminal: Callable,
    grid: TimeGrid,
    noise: PathBundle,
    basis: Optional[BasisConfig] = None,
    cap: Optional[float] = None,
) -> BsdeSolution:
    """Solver for the generator |z|^2/2 via Y_t = log E[exp(F) | state_t].

    The conditional means of exp(F) are regressed per slice on polynomial
    plus exp(+-w) features of the current state (the exponential columns
    make Gaussian terminal values exactly representable); Z comes from the
    increment regressor on exp(F) divided by the conditional mean.  A
    ``cap`` truncates the terminal value at F ^ cap (reported together
    with the Y_0 sensitivity to cap-1).  Any non-positive conditional-mean
    estimate aborts: the log transform is undefined there.

    exp(F) spans many decades whenever F does not, and an equal-weight
    least-squares fit of such a target goes negative at low-leverage tail
    states.  Each slice therefore first fits F itself (a log-link pilot),
    uses exp(pilot) as a strictly positive numeraire, and regresses the
    order-one ratio exp(F)/numeraire; conditional means and the Z numerator
    are scaled back afterwards.  The expectation identity is exact because
    the numeraire is a deterministic function of the regression state.
    """
    if basis is None:
        basis = BasisConfig(include_exp=True)
    if noise.grid != grid:
        raise ValueError("noise bundle lives on a different time grid")
    n, K, d = noise.n, grid.steps, noise.d
    dt = grid.dt

    def _sweep(f_vals: np.ndarray):
        eF = np.exp(f_vals)
        Yv = np.empty((n, K + 1, 1))
        Z = np.empty((n, K, 1, d))
        Yv[:, K, 0] = f_vals
        min_mean = math.inf
        bsize = 1
        for k in range(K - 1, -1, -1):
            x = noise.values[:, k, :]
            dw = noise.values[:, k + 1, :] - noise.values[:, k, :]
            pilot, _, _, _ = _conditional_fit(x, f_vals[:, None], basis)
            numeraire = np.exp(pilot[:, 0])
            ratio = eF / numeraire
            rfit, _, bsize, _ = _conditional_fit(x, ratio[:, None], basis)
            mfit = numeraire * rfit[:, 0]
            min_mean = min(min_mean, float(mfit.min()))
            if min_mean <= 0:
                raise RuntimeError(
                    f"conditional mean of exp(terminal) non-positive at slice "
                    f"{k} (min {min_mean:.3g}); cannot take log"
                )
            # centered increment target (control variate), cf. the Lipschitz
            # solver: same conditional mean, O(1) conditional variance
            zt = (ratio - rfit[:, 0])[:, None] * dw / dt
            zfit, _, _, _ = _conditional_fit(x, zt, basis)
            Z[:, k, 0, :] = numeraire[:, None] * zfit / mfit[:, None]
            Yv[:, k, 0] = np.log(mfit)
        return Yv, Z, min_mean, bsize

    f_raw = np.asarray(terminal(noise.values), dtype=float).reshape(n)
    f_used = np.minimum(f_raw, cap) if cap is not None else f_raw
    Yv, Z, min_mean, bsize = _sweep(f_used)
    diagnostics = {
        "basis_size": bsize,
        "min_conditional_mean": min_mean,
        "solver": "quadratic-exponential",
        "cap": cap,
    }
    if cap is not None:
        y0_lower, _, _, _ = _sweep(np.minimum(f_raw, cap - 1.0))
        diagnostics["cap_sensitivity"] = float(
            abs(Yv[:, 0, 0].mean() - y0_lower[:, 0, 0].mean())
        )
    tag = MeasureTag.pushforward("bsde:quadratic-exp")
    return BsdeSolution(
        Y=PathBundle(grid=grid, values=Yv, tag=tag), Z=Z, diagnostics=diagnostics
    )


# ---------------------------------------------------------------------------
# convex duality


def convex_conjugate(
    g: Callable,
    q: np.ndarray,
    radius: float = 4.0,
    n_lattice: int = 65,
    max_radius: float = 4096.0,
    sweeps: int = 40,
) -> float:
    """sup_z (q.z - g(z)) by coordinate ascent on a growing lattice.

    ``g`` maps a z-vector of shape (d,) to a scalar.  The search radius
    doubles whenever the maximizer sits on the boundary; if it is still
    active at ``max_radius`` the conjugate is numerically infinite (g is
    not superlinear) and math.inf is returned with a warning.
    """
    q = np.asarray(q, dtype=float).reshape(-1)
    d = q.shape[0]

    def phi(z):
        return float(q @ z - g(z))

    r = float(radius)
    while True:
        z = np.zeros(d)
        best = phi(z)
        for _ in range(sweeps):
            improved = False
            for j in range(d):
                ticks = np.linspace(-r, r, n_lattice)
                vals = []
                zj = z.copy()
                for tv in ticks:
                    zj[j] = tv
                    vals.append(phi(zj))
                i_best = int(np.argmax(vals))
                if vals[i_best] > best + 1e-15:
                    z[j] = ticks[i_best]
                    best = vals[i_best]
                    improved = True
            if not improved:
                break
        # local refinement with shrinking per-coordinate grids
        width = 2.0 * r / (n_lattice - 1)
        for _ in range(3):
            for j in range(d):
                ticks = z[j] + np.linspace(-width, width, 17)
                vals = []
                zj = z.copy()
                for tv in ticks:
                    zj[j] = tv
                    vals.append(phi(zj))
                i_best = int(np.argmax(vals))
                z[j] = ticks[i_best]
                best = max(best, vals[i_best])
            width /= 8.0
        if np.max(np.abs(z)) < 0.95 * r:
            return best
        if r >= max_radius:
            warnings.warn(
                f"conjugate maximizer still on the boundary at radius {r:.4g}; "
                "the generator does not look superlinear",
                stacklevel=2,
            )
            return math.inf
        r *= 2.0


@dataclasses.dataclass(frozen=True)
class DualBound:
    """Monte-Carlo lower bound for Y_0 from one admissible tilt."""

    value: float
    se: float
    n: int
    tilt_label: str = ""

    def __float__(self) -> float:
        return self.value


def dual_lower_bound(
    model: BsdeModel,
    tilt: GirsanovTilt,
    grid: TimeGrid,
    n_mc: int = 4096,
    seed: int = 0,
) -> DualBound:
    """Estimate E_Q[F - int_0^T g*(q_u) du] under the tilted law Q.

    For convex superlinear generators this lower-bounds the initial value
    Y_0, with equality at the optimizing tilt.  The conjugate uses the
    model's analytic ``gstar`` when available and numerical conjugation of
    z |-> g(t, z) otherwise (deterministic tilts only: the numeric route
    evaluates one conjugate per time step).
    """
    if model.cls != "quadratic_convex":
        raise ValueError("dual_lower_bound applies to quadratic_convex models")
    if not np.isfinite(tilt.bound):
        raise ValueError("tilt must be bounded")
    bundle = sample_tilted_brownian(grid, tilt, model.d, n_mc, seed)
    f_vals = model.terminal_values(bundle.values)[:, 0]
    dt = grid.dt
    if model.gstar is not None:
        penalty = np.zeros(n_mc)
        for k in range(grid.steps):
            t = float(grid.times[k])
            qk = tilt.eval(t, bundle.values[:, : k + 1, :], n_mc, model.d)
            penalty += np.asarray(model.gstar(t, qk), dtype=float) * dt
    else:
        if tilt.kind != "deterministic":
            raise ValueError(
                "adapted tilts need an analytic gstar on the model"
            )
        penalty_scalar = 0.0
        y0 = np.zeros((1, model.m))
        hist = np.zeros((1, 1, model.d))
        for k in range(grid.steps):
            t = float(grid.times[k])
            qk = tilt.eval(t, None, 1, model.d)[0]

            def g_of_z(z, _t=t):
                zz = np.asarray(z, dtype=float).reshape(1, 1, model.d)
                return float(
                    np.asarray(model.generator(_t, hist, y0, zz)).reshape(())
                )

            penalty_scalar += convex_conjugate(g_of_z, qk) * dt
        penalty = np.full(n_mc, penalty_scalar)
    samples = f_vals - penalty
    value = float(samples.mean())
    se = float(samples.std(ddof=1) / math.sqrt(n_mc))
    return DualBound(value=value, se=se, n=n_mc, tilt_label=tilt.label)


# ---------------------------------------------------------------------------
# constants


@dataclasses.dataclass(frozen=True)
class BsdeConstants:
    """Quadratic transport and log-Sobolev constants per generator class.

    Fields that do not apply to the model's class are None.  ``C_y`` is
    the class-appropriate transport constant; ``lsi`` equals T * C_y;
    ``z_bound`` bounds |Z_t|^2 for Lipschitz models; ``C_z_quartic``
    multiplies H^{1/4} in the Z-law inequality; ``C_yz`` covers the joint
    (Y, Z) law in the linear case.
    """

    cls: str
    T: float
    L_F: float
    L_g: float
    C_y: float
    L_Y: float
    lsi: float
    C_y_multi: Optional[float] = None
    C_y_1d: Optional[float] = None
    C_z_quartic: Optional[float] = None
    Lambda: Optional[float] = None
    C_z_linear: Optional[float] = None
    C_yz: Optional[float] = None
    z_bound: Optional[float] = None

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(dataclasses.asdict(self), indent=indent, sort_keys=True)


def constants_from_metadata(
    cls: str,
    L_F: float,
    L_g: float,
    T: float,
    m: int = 1,
    d: int = 1,
    linear_L_G: Optional[float] = None,
) -> BsdeConstants:
    """Evaluate the constant formulas from bare metadata at horizon T.

    Lipschitz/linear classes: C_y = 2 (L_F + T L_g)^2 e^{2 T L_g} with
    Lipschitz image constant L_Y = (L_F + T L_g) e^{T L_g}; the Z law
    carries |Z|^2 <= m L_F^2 e^{(L_g+1)^2 T} + m L_g^2 T (both published
    exponent forms agree and are cross-checked) and the quartic-root
    inequality constant built from it; Lambda is the truncation radius
    2dm(L_F^2 + T L_g^2) under the square root.  Linear generators also
    get C_z = 2 (L_F + T L_G)^2 e^{2 T L_G} and C_yz = max(C_y, C_z).
    Quadratic-convex (one-dimensional) models: C_y = 2 L_F^2 and L_Y = L_F.
    """
    if not T > 0:
        raise ValueError("horizon T must be > 0")
    if cls not in ("lipschitz", "linear", "quadratic_convex"):
        raise ValueError(f"unknown generator class {cls!r}")
    if cls in ("lipschitz", "linear"):
        L_Y = (L_F + T * L_g) * math.exp(T * L_g)
        C_y_multi = 2.0 * L_Y**2
        exp_a = (L_g + 1.0) ** 2 * T
        exp_b = (2.0 * L_g + L_g**2 + 1.0) * T
        assert math.isclose(exp_a, exp_b, rel_tol=1e-12, abs_tol=1e-12)
        z_bound = m * L_F**2 * math.exp(exp_a) + m * L_g**2 * T
        if z_bound > 0:
            log_b4 = 4.0 * math.log(z_bound)
            C_z_quartic = 2.0 * math.exp(0.25 * np.logaddexp(0.0, log_b4))
        else:
            C_z_quartic = 2.0
        Lambda = math.sqrt(2.0 * d * m * (L_F**2 + T * L_g**2))
        C_z_linear = None
        C_yz = None
        if cls == "linear":
            if linear_L_G is None:
                raise ValueError(
                    "linear models need linear_L_G = max(L_alpha, |beta|, |gamma|)"
                )
            L_G = linear_L_G
            C_z_linear = 2.0 * (L_F + T * L_G) ** 2 * math.exp(2.0 * T * L_G)
            C_yz = max(C_y_multi, C_z_linear)
        return BsdeConstants(
            cls=cls, T=T, L_F=L_F, L_g=L_g,
            C_y=C_y_multi, L_Y=L_Y, lsi=T * C_y_multi,
            C_y_multi=C_y_multi, C_z_quartic=C_z_quartic, Lambda=Lambda,
            C_z_linear=C_z_linear, C_yz=C_yz, z_bound=z_bound,
        )
    # quadratic_convex: one-dimensional value process
    C_y_1d = 2.0 * L_F**2
    return BsdeConstants(
        cls=cls, T=T, L_F=L_F, L_g=L_g,
        C_y=C_y_1d, L_Y=L_F, lsi=T * C_y_1d, C_y_1d=C_y_1d,
    )


def bsde_constants(model: BsdeModel, T: float) -> BsdeConstants:
    """Constants of ``constants_from_metadata`` read off a model object."""
    return constants_from_metadata(
        model.cls, model.L_F, model.L_g, T,
        m=model.m, d=model.d, linear_L_G=model.linear_L_G,
    )


def truncated_growth_constants(
    L_F: float,
    L_g: float,
    m: int,
    d: int,
    T: float,
    rho_q: float,
    phi_lambda: float,
) -> dict:
    """Constants for generators of arbitrary growth via Lipschitz truncation.

    ``rho_q`` has no published definition and no default exists: it must be
    supplied by the caller (a warning records that).  ``phi_lambda`` is the
    growth modulus of the generator evaluated at the truncation radius
    Lambda = sqrt(2dm(L_F^2 + T L_g^2)).  Returns C_y, C_z, Lambda, and
    whether T satisfies the small-horizon condition
    T <= log(2)/(2 L_g + phi_lambda^2 + 1).
    """
    warnings.warn(
        "rho_q is a user-supplied constant with no published definition; "
        f"using rho_q={rho_q}",
        stacklevel=2,
    )
    Lambda = math.sqrt(2.0 * d * m * (L_F**2 + T * L_g**2))
    eff = max(L_g, phi_lambda)
    C_y = 2.0 * (L_F + T * max(L_g, rho_q)) ** 2 * math.exp(2.0 * T * eff)
    inner = m * L_F**2 * math.exp((eff + 1.0) ** 2 * T) + m * T * eff**2
    C_z = 2.0 * math.exp(0.25 * np.logaddexp(0.0, 4.0 * math.log(inner))) if inner > 0 else 2.0
    small_T = T <= math.log(2.0) / (2.0 * L_g + phi_lambda**2 + 1.0)
    return {
        "C_y": C_y, "C_z": C_z, "Lambda": Lambda,
        "small_T_ok": bool(small_T), "rho_q": rho_q, "phi_lambda": phi_lambda,
    }


def z_bound_check(sol: BsdeSolution, model: BsdeModel, slack: float = 0.05) -> dict:
    """Compare max |Z_t|^2 (Frobenius) against the published bound."""
    T = sol.grid.T
    cons = bsde_constants(model, T)
    if cons.z_bound is None:
        raise ValueError("Z bound applies to Lipschitz-class models")
    zsq = (sol.Z**2).sum(axis=(2, 3))
    max_idx = np.unravel_index(int(np.argmax(zsq)), zsq.shape)
    max_z_sq = float(zsq.max())
    return {
        "max_z_sq": max_z_sq,
        "bound": cons.z_bound,
        "slack": slack,
        # absolute epsilon keeps a zero bound (L_F = L_g = 0) testable
        # against floating-point dust in the fitted Z
        "passed": bool(max_z_sq <= cons.z_bound * (1.0 + slack) + 1e-12),
        "argmax_path": int(max_idx[0]),
        "argmax_step": int(max_idx[1]),
    }


# ---------------------------------------------------------------------------
# pathwise Lipschitz probe


def pathwise_lipschitz_probe(process: Callable, bumps, noise: PathBundle) -> float:
    """Empirical sup-norm Lipschitz ratio of a path-functional process.

    ``process`` maps a PathBundle to a PathBundle deterministically; each
    bump (a CameronMartinShift, Path, or knot array) is added to every
    input path and the output displacement is divided by the bump's
    sup-norm.  Returns the max ratio across bumps and paths; zero-norm
    bumps are skipped with a warning.
    """
    base = process(noise)
    worst = 0.0
    used = 0
    for bump in bumps:
        shifted_in = apply_shift(noise, bump)
        h = shifted_in.values[0] - noise.values[0]
        h_norm = float(np.max(np.sqrt((h**2).sum(axis=-1))))
        if h_norm == 0.0:
            warnings.warn("zero-norm bump skipped", stacklevel=2)
            continue
        used += 1
        shifted_out = process(shifted_in)
        ratios = bundle_sup_norms(shifted_out, base) / h_norm
        worst = max(worst, float(ratios.max()))
    if used == 0:
        raise ValueError("no nonzero bumps supplied")
    return worst


# ---------------------------------------------------------------------------
# generator / terminal libraries


@dataclasses.dataclass(frozen=True)
class GeneratorSpec:
    """Generator callable plus the metadata a BsdeModel needs."""

    fn: Callable
    cls: str
    L_g: float
    growth_C: Optional[float] = None
    gstar: Optional[Callable] = None
    lower_bound_a: Optional[Callable] = None
    lower_bound_b: Optional[float] = None
    linear_L_G: Optional[float] = None
    label: str = ""


@dataclasses.dataclass(frozen=True)
class TerminalSpec:
    """Terminal functional plus its Lipschitz constant."""

    fn: Callable
    L_F: float
    bounded_below: bool
    label: str = ""


def _zero_generator() -> GeneratorSpec:
    return GeneratorSpec(
        fn=lambda t, paths, y, z: np.zeros(y.shape),
        cls="lipschitz", L_g=0.0, label="zero",
    )


def _linear_generator(alpha=0.0, beta=0.0, gamma=0.0, L_alpha=0.0) -> GeneratorSpec:
    """g = alpha(t) + beta y + gamma . z (a scalar gamma applies to the
    first noise coordinate)."""
    a_fn = alpha if callable(alpha) else (lambda t, _a=float(alpha): _a)
    gam0 = np.atleast_1d(np.asarray(gamma, dtype=float))

    def fn(t, paths, y, z):
        gam = gam0
        if gam.shape[0] != z.shape[-1]:
            if gam.shape[0] != 1:
                raise ValueError(
                    f"gamma has {gam.shape[0]} components, z has {z.shape[-1]}"
                )
            gam = np.zeros(z.shape[-1])
            gam[0] = gam0[0]
        return a_fn(t) + beta * y + np.einsum("nmd,d->nm", z, gam)

    gam_norm = float(np.linalg.norm(gam0))
    L_g = max(abs(float(beta)), gam_norm)
    L_G = max(float(L_alpha), abs(float(beta)), gam_norm)
    return GeneratorSpec(
        fn=fn, cls="linear", L_g=L_g, linear_L_G=L_G, label="linear",
    )


def _martingale_generator(q: Callable, q_bound: float) -> GeneratorSpec:
    """g = q_t(omega) . z with |q| <= q_bound."""

    def fn(t, paths, y, z):
        n = y.shape[0]
        d = z.shape[-1]
        qv = np.asarray(q(t, paths), dtype=float)
        qv = np.broadcast_to(qv, (n, d))
        return np.einsum("nmd,nd->nm", z, qv)

    return GeneratorSpec(fn=fn, cls="lipschitz", L_g=float(q_bound), label="martingale")


def _quadratic_generator() -> GeneratorSpec:
    def fn(t, paths, y, z):
        return 0.5 * (z**2).sum(axis=-1)

    def gstar(t, q):
        q = np.asarray(q, dtype=float)
        return 0.5 * (q**2).sum(axis=-1)

    return GeneratorSpec(
        fn=fn, cls="quadratic_convex", L_g=0.0, growth_C=0.5, gstar=gstar,
        lower_bound_a=lambda t: 0.0, lower_bound_b=0.0, label="quadratic",
    )


def _quadratic_truncated_generator(radius: float) -> GeneratorSpec:
    """g = |z ^ radius|^2 / 2: quadratic inside the ball, frozen outside.
    Lipschitz with constant radius, so the Lipschitz solver applies."""
    if not radius > 0:
        raise ValueError("radius must be > 0")

    def fn(t, paths, y, z):
        norm = np.sqrt((z**2).sum(axis=-1))
        return 0.5 * np.minimum(norm, radius) ** 2

    return GeneratorSpec(
        fn=fn, cls="lipschitz", L_g=float(radius), label="quadratic_truncated",
    )


def _utility_generator(
    alpha: float,
    theta,
    constraint: str = "zero",
    lo=None,
    hi=None,
    normal=None,
    offset: float = 0.0,
    horizon_hint: float = 1.0,
) -> GeneratorSpec:
    """Indifference-pricing generator
    (alpha/2) dist^2(z + theta_t/alpha, A) - z.theta_t - |theta_t|^2/(2 alpha)
    for a closed convex constraint set A given as 'full' (all of R^d),
    'zero' ({0}), 'box' ([lo, hi] per coordinate), or 'halfspace'
    ({v : normal.v <= offset}), each with its analytic projection."""
    if not alpha > 0:
        raise ValueError("risk aversion alpha must be > 0")
    th_fn = theta if callable(theta) else (
        lambda t, _v=np.atleast_1d(np.asarray(theta, dtype=float)): _v
    )
    kinds = ("full", "zero", "box", "halfspace")
    if constraint not in kinds:
        raise ValueError(f"unsupported constraint set {constraint!r}; one of {kinds}")
    if constraint == "box" and (lo is None or hi is None):
        raise ValueError("box constraint needs lo and hi")
    if constraint == "halfspace" and normal is None:
        raise ValueError("halfspace constraint needs a normal vector")
    if constraint == "halfspace":
        normal = np.asarray(normal, dtype=float).reshape(-1)
        if not np.linalg.norm(normal) > 0:
            raise ValueError("halfspace normal must be nonzero")

    def dist_sq(v):
        if constraint == "full":
            return np.zeros(v.shape[:-1])
        if constraint == "zero":
            return (v**2).sum(axis=-1)
        if constraint == "box":
            proj = np.clip(v, lo, hi)
            return ((v - proj) ** 2).sum(axis=-1)
        gap = (v @ normal - offset) / np.linalg.norm(normal)
        return np.maximum(gap, 0.0) ** 2

    def fn(t, paths, y, z):
        th = np.asarray(th_fn(t), dtype=float).reshape(-1)
        v = z + th / alpha
        pen = np.einsum("nmd,d->nm", z, th)
        return (alpha / 2.0) * dist_sq(v) - pen - (th @ th) / (2.0 * alpha)

    t_probe = np.linspace(0.0, horizon_hint, 33)
    theta_max = max(
        float(np.linalg.norm(np.asarray(th_fn(t), dtype=float))) for t in t_probe
    )
    if constraint == "full":
        return GeneratorSpec(
            fn=fn, cls="linear", L_g=theta_max, linear_L_G=theta_max,
            label="utility-full",
        )
    growth = max(alpha + theta_max / 2.0,
                 1.5 * theta_max**2 / alpha + theta_max / 2.0) + 1e-12
    gstar = None
    if constraint == "zero":
        # A = {0}: the generator collapses to (alpha/2)|z|^2
        def gstar(t, q):
            q = np.asarray(q, dtype=float)
            return (q**2).sum(axis=-1) / (2.0 * alpha)

    return GeneratorSpec(
        fn=fn, cls="quadratic_convex", L_g=0.0, growth_C=growth, gstar=gstar,
        lower_bound_a=lambda t: -np.asarray(th_fn(t), dtype=float).reshape(-1),
        lower_bound_b=-(theta_max**2) / (2.0 * alpha),
        label=f"utility-{constraint}",
    )


GENERATORS = {
    "zero": _zero_generator,
    "linear": _linear_generator,
    "martingale": _martingale_generator,
    "quadratic": _quadratic_generator,
    "quadratic_truncated": _quadratic_truncated_generator,
    "utility": _utility_generator,
}


def generator_library(name: str, **params) -> GeneratorSpec:
    try:
        factory = GENERATORS[name]
    except KeyError:
        raise KeyError(
            f"unknown generator {name!r}; available: {sorted(GENERATORS)}"
        ) from None
    return factory(**params)


def _terminal_value(scale: float = 1.0, coord: int = 0) -> TerminalSpec:
    return TerminalSpec(
        fn=lambda values: scale * values[:, -1, coord],
        L_F=abs(float(scale)), bounded_below=False, label="terminal_value",
    )


def _running_max(coord: int = 0) -> TerminalSpec:
    return TerminalSpec(
        fn=lambda values: values[:, :, coord].max(axis=1),
        L_F=1.0, bounded_below=False, label="running_max",
    )


def _clipped_terminal(lo: float = -1.0, hi: float = 1.0, coord: int = 0) -> TerminalSpec:
    return TerminalSpec(
        fn=lambda values: np.clip(values[:, -1, coord], lo, hi),
        L_F=1.0, bounded_below=True, label="clipped_terminal",
    )


def _constant_terminal(value: float = 1.0) -> TerminalSpec:
    return TerminalSpec(
        fn=lambda values: np.full(values.shape[0], float(value)),
        L_F=0.0, bounded_below=True, label="constant",
    )


TERMINALS = {
    "terminal_value": _terminal_value,
    "running_max": _running_max,
    "clipped_terminal": _clipped_terminal,
    "constant": _constant_terminal,
}


def terminal_library(name: str, **params) -> TerminalSpec:
    try:
        factory = TERMINALS[name]
    except KeyError:
        raise KeyError(
            f"unknown terminal {name!r}; available: {sorted(TERMINALS)}"
        ) from None
    return factory(**params)


# ---------------------------------------------------------------------------
# export


def export_solution(sol: BsdeSolution, y_file, z_file, fmt: str = "binary") -> None:
    """Write the Y bundle and the Z integrand in the shared bundle layout.

    Z lives on the grid knots [t_0, t_{steps-1}] (one fewer than Y) and is
    flattened to m*d channels per knot.
    """
    save_bundle(sol.Y, y_file, fmt=fmt)
    grid = sol.grid
    n, K, m, d = sol.Z.shape[0], sol.Z.shape[1], sol.Z.shape[2], sol.Z.shape[3]
    z_grid = make_grid(grid.T - grid.dt, K - 1) if K > 1 else make_grid(grid.dt, 1)
    if K > 1:
        z_vals = sol.Z.reshape(n, K, m * d)
        z_bundle = PathBundle(
            grid=z_grid, values=z_vals, tag=MeasureTag.pushforward("bsde:z"),
        )
        save_bundle(z_bundle, z_file, fmt=fmt)
    else:
        z_vals = np.repeat(sol.Z.reshape(n, 1, m * d), 2, axis=1)
        z_bundle = PathBundle(
            grid=z_grid, values=z_vals, tag=MeasureTag.pushforward("bsde:z"),
        )
        save_bundle(z_bundle, z_file, fmt=fmt)
