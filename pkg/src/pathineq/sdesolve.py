"""Forward SDE simulation for scalar diffusions driven by d-dimensional noise.

Provides the explicit Euler scheme, a drift-removing space transform for
merely measurable drifts (tabulated together with its inverse and the
constants c1..c4 / C_x attached to it), Langevin dynamics, and stationary
densities of the form exp(-lambda*U)/Z.
"""

from __future__ import annotations

import dataclasses
import io
import json
import warnings
from typing import Callable, Optional

import numpy as np
from scipy.integrate import cumulative_trapezoid, quad

from .pathcore import MeasureTag, PathBundle, TimeGrid

__all__ = [
    "SdeModel",
    "ZvonkinTransform",
    "SdeConstants",
    "euler_maruyama",
    "build_zvonkin",
    "zvonkin_constants",
    "solve_sde_zvonkin",
    "langevin_model",
    "stationary_density",
    "sde_model_library",
    "export_zvonkin_csv",
    "CX_VARIANTS",
]


def _eval_drift(fn, t: float, x: np.ndarray) -> np.ndarray:
    out = np.asarray(fn(t, x), dtype=float)
    return np.broadcast_to(out, x.shape)


def _eval_sigma(fn, t: float, x: np.ndarray, d: int) -> np.ndarray:
    """Evaluate a volatility row vector at (t, x), normalized to shape (n, d)."""
    n = x.shape[0]
    out = np.asarray(fn(t, x), dtype=float)
    if out.ndim == 0:
        return np.broadcast_to(out, (n, d))
    if out.ndim == 1:
        if out.shape[0] == d:
            return np.broadcast_to(out, (n, d))
        if out.shape[0] == n and d == 1:
            return out[:, None]
        raise ValueError(
            f"sigma returned shape {out.shape}; expected ({d},) or ({n}, {d})"
        )
    if out.shape != (n, d):
        raise ValueError(
            f"sigma returned shape {out.shape}; expected ({d},) or ({n}, {d})"
        )
    return out


@dataclasses.dataclass(frozen=True)
class SdeModel:
    """Scalar diffusion dX = b(t,X) dt + sigma(t,X) . dW with d-dim noise.

    ``b`` maps (t, x-array) to drift values; ``sigma`` maps (t, x-array) to a
    row vector of vol loadings (any shape broadcastable to (n, d)).  The
    metadata fields are bounds the caller certifies: ``L_sigma`` a Lipschitz
    constant of sigma in x, ``sigma_inf`` a sup bound on |sigma|, and
    ``ellipticity`` a constant c > 0 with sigma.sigma >= c.  Optional
    ``dt_b`` / ``dt_sigma`` are analytic time derivatives; when absent,
    time derivatives of the transform tables fall back to finite
    differences.  Construction probes the bounds at a few points near x0.
    """

    b: Callable
    sigma: Callable
    x0: float
    d: int = 1
    L_sigma: float = 0.0
    sigma_inf: float = 1.0
    ellipticity: float = 1.0
    dt_b: Optional[Callable] = None
    dt_sigma: Optional[Callable] = None
    label: str = ""

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("noise dimension d must be >= 1")
        if not self.ellipticity > 0:
            raise ValueError("ellipticity bound must be > 0")
        if not self.sigma_inf > 0:
            raise ValueError("sigma_inf must be > 0")
        if self.L_sigma < 0:
            raise ValueError("L_sigma must be >= 0")
        probe_x = np.array([self.x0 - 1.0, self.x0, self.x0 + 1.0])
        for t in (0.0, 1.0):
            bv = _eval_drift(self.b, t, probe_x)
            if not np.all(np.isfinite(bv)):
                raise ValueError("drift is not finite near x0")
            sig = _eval_sigma(self.sigma, t, probe_x, self.d)
            norms = np.sqrt((sig**2).sum(axis=-1))
            if np.any(norms > self.sigma_inf + 1e-9):
                raise ValueError(
                    f"|sigma| = {norms.max():.6g} exceeds sigma_inf = {self.sigma_inf}"
                )
            ss = (sig**2).sum(axis=-1)
            if np.any(ss < self.ellipticity * (1.0 - 1e-9)):
                raise ValueError(
                    f"sigma.sigma = {ss.min():.6g} below ellipticity bound "
                    f"{self.ellipticity}"
                )


def euler_maruyama(model: SdeModel, grid: TimeGrid, noise: PathBundle) -> PathBundle:
    """Explicit Euler scheme X_{k+1} = X_k + b dt + sigma . dW, one scalar
    path per noise path."""
    if noise.grid != grid:
        raise ValueError("noise bundle lives on a different time grid")
    if noise.d != model.d:
        raise ValueError(f"noise is {noise.d}-dimensional, model wants {model.d}")
    n = noise.n
    dt = grid.dt
    out = np.empty((n, grid.steps + 1, 1))
    x = np.full(n, float(model.x0))
    out[:, 0, 0] = x
    for k in range(grid.steps):
        t = grid.times[k]
        dw = noise.values[:, k + 1, :] - noise.values[:, k, :]
        sig = _eval_sigma(model.sigma, t, x, model.d)
        x = x + _eval_drift(model.b, t, x) * dt + np.einsum("nd,nd->n", sig, dw)
        out[:, k + 1, 0] = x
    tag = MeasureTag.pushforward(f"euler:{model.label}" if model.label else "euler")
    return PathBundle(grid=grid, values=out, tag=tag)


@dataclasses.dataclass(frozen=True, eq=False)
class ZvonkinTransform:
    """Tabulated drift-removing space transform.

    On a (time x space) lattice: ``f = exp(-int_{-R}^x 2 b/(sigma.sigma))``,
    ``F(x) = int_0^x f``, its time derivative ``dtF``, and the inverse ``G``
    of ``F`` sampled on a shared y-lattice.  ``c1..c4`` are the L1/Linf
    norms of rho = 2 b/(sigma.sigma) and of its time derivative that control
    the transform: exp(-c1) <= f <= exp(c1) and F, G are exp(c1)-Lipschitz.
    ``tail`` is the certified L1 mass of |rho| on [R, 4R] (both sides).
    """

    grid: TimeGrid
    xs: np.ndarray
    f: np.ndarray
    F: np.ndarray
    dtF: np.ndarray
    ys: np.ndarray
    G: np.ndarray
    R: float
    tail: float
    c1: float
    c2: float
    c3: float
    c4: float
    time_derivative: str = "finite-difference"

    @property
    def is_identity(self) -> bool:
        """True when the tables reduce to the identity transform exactly."""
        return bool(np.all(self.f == 1.0) and np.all(self.dtF == 0.0))

    def x_of_y(self, k: int, y: np.ndarray) -> np.ndarray:
        """G_{t_k}(y): invert the F table row by monotone interpolation."""
        if self.is_identity:
            return np.asarray(y, dtype=float)
        return np.interp(y, self.F[k], self.xs)

    def y_of_x(self, k: int, x: np.ndarray) -> np.ndarray:
        """F_{t_k}(x) by interpolation on the table row."""
        if self.is_identity:
            return np.asarray(x, dtype=float)
        return np.interp(x, self.xs, self.F[k])

    def table_of_y(self, k: int, y: np.ndarray, table: np.ndarray) -> np.ndarray:
        """Evaluate a tabulated function of x at x = G_{t_k}(y).

        The composition of the two piecewise-linear maps y -> x -> value
        shares its breakpoints with the direct interpolation on
        (F row, table row), so the latter is used.
        """
        return np.interp(y, self.F[k], table[k])


def _rho_table(model: SdeModel, t: float, xs: np.ndarray) -> np.ndarray:
    sig = _eval_sigma(model.sigma, t, xs, model.d)
    ss = (sig**2).sum(axis=-1)
    if np.any(ss < model.ellipticity * (1.0 - 1e-9)):
        raise ValueError("sigma.sigma fell below the ellipticity bound on the table")
    return 2.0 * _eval_drift(model.b, t, xs) / ss


def _dt_rho_analytic(model: SdeModel, t: float, xs: np.ndarray) -> np.ndarray:
    sig = _eval_sigma(model.sigma, t, xs, model.d)
    ss = (sig**2).sum(axis=-1)
    dts = _eval_sigma(model.dt_sigma, t, xs, model.d)
    dt_ss = 2.0 * (sig * dts).sum(axis=-1)
    b = _eval_drift(model.b, t, xs)
    dtb = _eval_drift(model.dt_b, t, xs)
    return 2.0 * (dtb * ss - b * dt_ss) / ss**2


def _tail_mass(model: SdeModel, times: np.ndarray, R: float, n_pts: int = 1500) -> float:
    """Sup over a coarse time lattice of the L1 mass of |rho| on [R, 4R]
    and [-4R, -R]."""
    sub = times[:: max(1, len(times) // 8)]
    right = np.linspace(R, 4.0 * R, n_pts)
    left = np.linspace(-4.0 * R, -R, n_pts)
    worst = 0.0
    for t in sub:
        m = np.trapezoid(np.abs(_rho_table(model, t, right)), right)
        m += np.trapezoid(np.abs(_rho_table(model, t, left)), left)
        worst = max(worst, float(m))
    return worst


def build_zvonkin(
    model: SdeModel,
    grid: TimeGrid,
    R: Optional[float] = None,
    n_x: int = 2001,
    tail_tol: float = 1e-6,
) -> ZvonkinTransform:
    """Tabulate the drift-removing transform of ``model`` on ``grid``.

    The truncation range defaults to |x0| + 6 sigma_inf sqrt(T), doubled
    until the measured L1 tail of |rho| beyond R drops under ``tail_tol``
    (an explicit R is used as given, but still tail-checked).  Time
    derivatives of F use the analytic dt_b/dt_sigma when the model carries
    both, and central finite differences on the F table otherwise.
    """
    if n_x < 11:
        raise ValueError("n_x too small to resolve the transform")
    if n_x % 2 == 0:
        n_x += 1
    times = grid.times
    if R is None:
        R_try = abs(model.x0) + 6.0 * model.sigma_inf * np.sqrt(grid.T)
        R_try = max(R_try, 1.0)
        tail = _tail_mass(model, times, R_try)
        for _ in range(12):
            if tail < tail_tol:
                break
            R_try *= 2.0
            tail = _tail_mass(model, times, R_try)
        else:
            raise ValueError(
                f"drift tail {tail:.3e} beyond R={R_try:.4g} exceeds "
                f"tolerance {tail_tol:.1e}; rho = 2b/(sigma.sigma) does not "
                "look integrable"
            )
        R = R_try
    else:
        tail = _tail_mass(model, times, R)
        if tail >= tail_tol:
            raise ValueError(
                f"drift tail {tail:.3e} beyond R={R:.4g} exceeds tolerance "
                f"{tail_tol:.1e}"
            )
    xs = np.linspace(-R, R, n_x)
    mid = n_x // 2
    xs[mid] = 0.0

    n_t = len(times)
    rho = np.empty((n_t, n_x))
    for k, t in enumerate(times):
        rho[k] = _rho_table(model, t, xs)
    f = np.exp(-cumulative_trapezoid(rho, xs, axis=1, initial=0.0))
    F_raw = cumulative_trapezoid(f, xs, axis=1, initial=0.0)
    F = F_raw - F_raw[:, mid : mid + 1]

    analytic = model.dt_b is not None and model.dt_sigma is not None
    if analytic:
        dt_rho = np.empty_like(rho)
        for k, t in enumerate(times):
            dt_rho[k] = _dt_rho_analytic(model, t, xs)
        dt_f = -f * cumulative_trapezoid(dt_rho, xs, axis=1, initial=0.0)
        dtF_raw = cumulative_trapezoid(dt_f, xs, axis=1, initial=0.0)
        dtF = dtF_raw - dtF_raw[:, mid : mid + 1]
    else:
        dt = grid.dt
        dt_rho = np.empty_like(rho)
        dtF = np.empty_like(F)
        if n_t == 1:
            dt_rho[:] = 0.0
            dtF[:] = 0.0
        else:
            dt_rho[0] = (rho[1] - rho[0]) / dt
            dt_rho[-1] = (rho[-1] - rho[-2]) / dt
            dtF[0] = (F[1] - F[0]) / dt
            dtF[-1] = (F[-1] - F[-2]) / dt
            if n_t > 2:
                dt_rho[1:-1] = (rho[2:] - rho[:-2]) / (2.0 * dt)
                dtF[1:-1] = (F[2:] - F[:-2]) / (2.0 * dt)

    abs_rho = np.abs(rho)
    abs_dt_rho = np.abs(dt_rho)
    c1 = float(np.trapezoid(abs_rho, xs, axis=1).max())
    c2 = float(abs_rho.max())
    c3 = float(np.trapezoid(abs_dt_rho, xs, axis=1).max())
    c4 = float(np.trapezoid(abs_dt_rho.max(axis=0), xs))

    y_lo = F[:, 0].max()
    y_hi = F[:, -1].min()
    ys = np.linspace(y_lo, y_hi, n_x)
    G = np.empty((n_t, n_x))
    for k in range(n_t):
        G[k] = np.interp(ys, F[k], xs)

    for arr in (f, F, dtF, ys, G):
        arr.setflags(write=False)
    xs.setflags(write=False)
    return ZvonkinTransform(
        grid=grid, xs=xs, f=f, F=F, dtF=dtF, ys=ys, G=G, R=float(R),
        tail=float(tail), c1=c1, c2=c2, c3=c3, c4=c4,
        time_derivative="analytic" if analytic else "finite-difference",
    )


#: Readings of the transport constant for the transformed law, all of the
#: form 6 exp(a . c1 + 15 max(c3 e^{2c1}, ||sigma||_inf c2 e^{2c1} + e^{2c1} L*))
#: with a in {1, 2} and L* in {L_sigma^2, L_sigma}.  "theorem" (a=1,
#: L_sigma^2) coincides with exp(c1) times the constant of the transformed
#: process; "pushforward_squared" applies the generic Lipschitz-image rule,
#: which costs exp(2c1).
CX_VARIANTS = (
    "theorem",
    "pushforward_squared",
    "theorem_linear_lsigma",
    "pushforward_squared_linear_lsigma",
)


@dataclasses.dataclass(frozen=True)
class SdeConstants:
    """Constants governing the quadratic transport bound for the SDE law.

    The constant is doubly exponential in c1 and overflows float64 already
    for moderate drifts, so every variant is also carried in log form
    (``log_variants`` / ``log_C_x``), which stays finite whenever the
    quadrature inputs do; the plain values saturate to inf past overflow.
    """

    c1: float
    c2: float
    c3: float
    c4: float
    C_x: float
    log_C_x: float
    variant: str
    variants: dict
    log_variants: dict

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(dataclasses.asdict(self), indent=indent, sort_keys=True)


def zvonkin_constants(
    model: SdeModel, transform: ZvonkinTransform, variant: str = "theorem"
) -> SdeConstants:
    """Assemble c1..c4 and the transport constant C_x from the tables.

    All formula readings are reported in ``variants``; ``C_x`` is the one
    selected by ``variant``.  c4 never enters any formula; it is carried
    for reporting only.
    """
    if variant not in CX_VARIANTS:
        raise KeyError(f"unknown variant {variant!r}; choose from {CX_VARIANTS}")
    c1, c2, c3 = transform.c1, transform.c2, transform.c3
    for name, value in (("c1", c1), ("c2", c2), ("c3", c3), ("c4", transform.c4)):
        if not np.isfinite(value):
            raise ValueError(f"quadrature constant {name} is not finite")
    e2 = np.exp(2.0 * c1)
    inner_sq = max(c3 * e2, model.sigma_inf * c2 * e2 + e2 * model.L_sigma**2)
    inner_lin = max(c3 * e2, model.sigma_inf * c2 * e2 + e2 * model.L_sigma)
    log6 = np.log(6.0)
    log_variants = {
        "theorem": log6 + c1 + 15.0 * inner_sq,
        "pushforward_squared": log6 + 2.0 * c1 + 15.0 * inner_sq,
        "theorem_linear_lsigma": log6 + c1 + 15.0 * inner_lin,
        "pushforward_squared_linear_lsigma": log6 + 2.0 * c1 + 15.0 * inner_lin,
    }
    log_variants = {k: float(v) for k, v in log_variants.items()}
    for name, value in log_variants.items():
        if not np.isfinite(value):
            raise ValueError(f"constant variant {name!r} has a non-finite exponent")
    with np.errstate(over="ignore"):
        variants = {k: float(np.exp(v)) for k, v in log_variants.items()}
    return SdeConstants(
        c1=c1, c2=c2, c3=c3, c4=transform.c4,
        C_x=variants[variant], log_C_x=log_variants[variant],
        variant=variant, variants=variants, log_variants=log_variants,
    )


def solve_sde_zvonkin(
    model: SdeModel,
    transform: ZvonkinTransform,
    grid: TimeGrid,
    noise: PathBundle,
    exit_warn_frac: float = 0.01,
    diagnostics: Optional[dict] = None,
) -> PathBundle:
    """Simulate the SDE through the transformed coordinate.

    Runs the Euler scheme on Y with drift dtF(G(Y)) and diffusion
    f(G(Y)) sigma(t, G(Y)), started at Y_0 = F_0(x0), and maps back through
    X = G(Y).  Paths leaving the table range are clamped to it; if more
    than ``exit_warn_frac`` of the paths ever clamp, a warning reports the
    fraction.  Pass a dict as ``diagnostics`` to collect the exit counts.
    An identity transform (drift-free model) reduces to the plain Euler
    scheme on the same noise, bit for bit.
    """
    if noise.grid != grid:
        raise ValueError("noise bundle lives on a different time grid")
    if noise.d != model.d:
        raise ValueError(f"noise is {noise.d}-dimensional, model wants {model.d}")
    if transform.grid != grid:
        raise ValueError("transform was tabulated on a different time grid")
    n = noise.n
    dt = grid.dt
    identity = transform.is_identity
    out = np.empty((n, grid.steps + 1, 1))
    y = np.full(n, float(model.x0) if identity else
                float(np.interp(model.x0, transform.xs, transform.F[0])))
    ever_clamped = np.zeros(n, dtype=bool)
    clamped_events = 0
    for k in range(grid.steps + 1):
        if identity:
            x = y
        else:
            lo, hi = transform.F[k, 0], transform.F[k, -1]
            outside = (y < lo) | (y > hi)
            if np.any(outside):
                ever_clamped |= outside
                clamped_events += int(outside.sum())
            x = transform.x_of_y(k, y)
        out[:, k, 0] = x
        if k == grid.steps:
            break
        t = grid.times[k]
        sig = _eval_sigma(model.sigma, t, x, model.d)
        dw = noise.values[:, k + 1, :] - noise.values[:, k, :]
        if identity:
            drift = 0.0
            vol = np.einsum("nd,nd->n", sig, dw)
        else:
            drift = transform.table_of_y(k, y, transform.dtF)
            vol = transform.table_of_y(k, y, transform.f) * np.einsum(
                "nd,nd->n", sig, dw
            )
        y = y + drift * dt + vol
    exit_fraction = float(ever_clamped.mean())
    if diagnostics is not None:
        diagnostics["exit_fraction"] = exit_fraction
        diagnostics["clamped_events"] = clamped_events
        diagnostics["n_paths"] = n
    if exit_fraction > exit_warn_frac:
        warnings.warn(
            f"{exit_fraction:.1%} of paths left the transform range "
            f"[-{transform.R:.4g}, {transform.R:.4g}] and were clamped",
            stacklevel=2,
        )
    tag = MeasureTag.pushforward(
        f"zvonkin:{model.label}" if model.label else "zvonkin"
    )
    return PathBundle(grid=grid, values=out, tag=tag)


def langevin_model(
    Uprime: Callable, lam: float, x0: float = 0.0, label: str = "langevin"
) -> SdeModel:
    """Overdamped Langevin dynamics dX = -U'(X) dt + sqrt(2/lambda) dW."""
    if not lam > 0:
        raise ValueError("lambda must be > 0")
    sig = float(np.sqrt(2.0 / lam))
    return SdeModel(
        b=lambda t, x: -np.asarray(Uprime(x), dtype=float),
        sigma=lambda t, x: np.array([sig]),
        x0=x0,
        d=1,
        L_sigma=0.0,
        sigma_inf=sig,
        ellipticity=sig**2,
        dt_b=lambda t, x: 0.0,
        dt_sigma=lambda t, x: np.array([0.0]),
        label=label,
    )


def stationary_density(U: Callable, lam: float, xs: np.ndarray) -> np.ndarray:
    """Normalized density exp(-lambda U(x))/Z on ``xs`` by quadrature."""
    if not lam > 0:
        raise ValueError("lambda must be > 0")
    with np.errstate(over="ignore"):
        Z, err = quad(lambda a: np.exp(-lam * U(a)), -np.inf, np.inf, limit=200)
    if not np.isfinite(Z) or Z <= 0 or err > 1e-6 * max(Z, 1.0):
        raise ValueError(
            f"normalization integral unreliable (Z={Z:.4g}, err={err:.2e})"
        )
    xs = np.asarray(xs, dtype=float)
    return np.exp(-lam * U(xs)) / Z


def _bump(A: float):
    return lambda t, x: A * np.exp(-np.asarray(x, dtype=float) ** 2)


def _odd_bump(A: float):
    return lambda t, x: A * np.asarray(x, dtype=float) * np.exp(
        -np.asarray(x, dtype=float) ** 2
    )


def _step_bump(A: float, width: float):
    def b(t, x):
        x = np.asarray(x, dtype=float)
        return A * np.sign(x) * (np.abs(x) <= width)

    return b


SDE_MODELS = {
    "zero_drift": lambda sigma=1.0, x0=0.0: SdeModel(
        b=lambda t, x: 0.0,
        sigma=lambda t, x: np.array([float(sigma)]),
        x0=x0, d=1, L_sigma=0.0, sigma_inf=float(sigma),
        ellipticity=float(sigma) ** 2, label="zero_drift",
    ),
    "gaussian_bump": lambda A=1.0, x0=0.0: SdeModel(
        b=_bump(A), sigma=lambda t, x: np.array([1.0]),
        x0=x0, d=1, L_sigma=0.0, sigma_inf=1.0, ellipticity=1.0,
        label="gaussian_bump",
    ),
    "odd_bump": lambda A=1.0, x0=0.0: SdeModel(
        b=_odd_bump(A), sigma=lambda t, x: np.array([1.0]),
        x0=x0, d=1, L_sigma=0.0, sigma_inf=1.0, ellipticity=1.0,
        label="odd_bump",
    ),
    "step_bump": lambda A=0.5, width=1.0, x0=0.0: SdeModel(
        b=_step_bump(A, width), sigma=lambda t, x: np.array([1.0]),
        x0=x0, d=1, L_sigma=0.0, sigma_inf=1.0, ellipticity=1.0,
        label="step_bump",
    ),
    "langevin_double_well": lambda lam=2.0, x0=0.0: langevin_model(
        lambda x: 4.0 * x * (x**2 - 1.0), lam, x0=x0, label="langevin_double_well",
    ),
    "langevin_bounded_well": lambda lam=2.0, A=1.0, x0=0.0: langevin_model(
        lambda x: A * x * np.exp(-(x**2)), lam, x0=x0,
        label="langevin_bounded_well",
    ),
}


def sde_model_library(name: str, **kwargs) -> SdeModel:
    """Named example models; see ``SDE_MODELS`` for the catalogue."""
    try:
        factory = SDE_MODELS[name]
    except KeyError:
        raise KeyError(
            f"unknown model {name!r}; available: {sorted(SDE_MODELS)}"
        ) from None
    return factory(**kwargs)


def export_zvonkin_csv(transform: ZvonkinTransform, file) -> None:
    """Write the (t, x, f, F, dtF) tables as CSV for inspection."""
    own = isinstance(file, (str, bytes))
    fh = open(file, "w") if own else file
    try:
        meta = {
            "T": transform.grid.T, "steps": transform.grid.steps,
            "R": transform.R, "n_x": len(transform.xs),
            "c1": transform.c1, "c2": transform.c2,
            "c3": transform.c3, "c4": transform.c4,
            "time_derivative": transform.time_derivative,
        }
        fh.write("#ZVONKIN1 " + json.dumps(meta, sort_keys=True) + "\n")
        fh.write("t,x,f,F,dtF\n")
        for k, t in enumerate(transform.grid.times):
            for j, x in enumerate(transform.xs):
                fh.write(
                    f"{float(t)!r},{float(x)!r},{float(transform.f[k, j])!r},"
                    f"{float(transform.F[k, j])!r},{float(transform.dtF[k, j])!r}\n"
                )
    finally:
        if own:
            fh.close()
