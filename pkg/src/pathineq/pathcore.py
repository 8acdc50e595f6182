"""Time grids, discretized paths, and seeded path-space sampling.

Conventions used throughout the package:

* a path is its values on a uniform grid ``0 = t_0 < ... < t_K = T``,
  stored as a ``(K+1, d)`` float array with ``path[0] = 0`` for Brownian
  samples;
* a bundle of ``n`` paths is a single ``(n, K+1, d)`` array plus the grid,
  the root seed and a measure tag;
* the distance between two paths is the sup over grid times of the
  Euclidean norm of the difference.

Sampling is deterministic given the root seed.  Path ``i`` draws its
increments from its own counter-based Philox stream keyed by
``(seed, i)``, so bundles are reproducible independently of how the
sampling loop is scheduled, and disjoint seeds give independent bundles.
All containers are frozen; functions return new objects.
"""

from __future__ import annotations

import io
import json
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

__all__ = [
    "TimeGrid",
    "Path",
    "PathBundle",
    "MeasureTag",
    "CameronMartinShift",
    "GirsanovTilt",
    "make_grid",
    "subseed",
    "sample_brownian",
    "sample_tilted_brownian",
    "sup_distance",
    "bundle_sup_norms",
    "apply_shift",
    "save_bundle",
    "load_bundle",
]

_BIN_MAGIC = b"PBND1\n"
_CSV_MAGIC = "#PBNDCSV1 "


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Uniform grid on [0, T] with ``steps`` intervals (steps+1 knots)."""

    T: float
    steps: int
    times: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not (self.T > 0.0 and math.isfinite(self.T)):
            raise ValueError(f"horizon must be positive and finite, got {self.T}")
        if self.steps < 1:
            raise ValueError(f"need at least one step, got {self.steps}")
        times = np.linspace(0.0, self.T, self.steps + 1)
        times.setflags(write=False)
        object.__setattr__(self, "times", times)

    @property
    def dt(self) -> float:
        return self.T / self.steps

    def matches(self, other: "TimeGrid") -> bool:
        return self.steps == other.steps and self.T == other.T

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and self.matches(other)

    def __hash__(self):
        return hash((self.T, self.steps))


def make_grid(T: float, steps: int) -> TimeGrid:
    return TimeGrid(T, steps)


@dataclass(frozen=True)
class MeasureTag:
    """Which law a bundle was sampled from: Wiener, a Girsanov tilt of it,
    or the image under a named map."""

    kind: str
    label: str = ""

    _KINDS = ("wiener", "tilted", "pushforward")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown measure kind {self.kind!r}")

    @classmethod
    def wiener(cls) -> "MeasureTag":
        return cls("wiener")

    @classmethod
    def tilted(cls, label: str) -> "MeasureTag":
        return cls("tilted", label)

    @classmethod
    def pushforward(cls, label: str) -> "MeasureTag":
        return cls("pushforward", label)


@dataclass(frozen=True, eq=False)
class Path:
    grid: TimeGrid
    values: np.ndarray  # (steps+1, d)

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] != self.grid.steps + 1:
            raise ValueError(
                f"path values must be (steps+1, d), got {v.shape} for "
                f"{self.grid.steps} steps"
            )
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def sup_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.values, axis=1)))


@dataclass(frozen=True, eq=False)
class PathBundle:
    """n paths sampled from one measure, stored as one (n, steps+1, d) array."""

    grid: TimeGrid
    values: np.ndarray
    seed: Union[int, None] = None
    tag: MeasureTag = field(default_factory=MeasureTag.wiener)

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or v.shape[1] != self.grid.steps + 1:
            raise ValueError(
                f"bundle values must be (n, steps+1, d), got {v.shape} for "
                f"{self.grid.steps} steps"
            )
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[2]

    def __len__(self) -> int:
        return self.n

    def path(self, i: int) -> Path:
        return Path(self.grid, self.values[i])

    def paths(self) -> list:
        return [self.path(i) for i in range(self.n)]


def subseed(seed: int, label: str) -> int:
    """Stable child seed for a named purpose (entropy sampling, baselines...).

    Children of distinct labels are independent streams of the same root.
    """
    if seed < 0:
        raise ValueError("seeds must be non-negative")
    tag = zlib.crc32(label.encode("utf8"))
    ss = np.random.SeedSequence([seed, tag])
    return int(ss.generate_state(1, np.uint64)[0])


def _path_rng(seed: int, i: int) -> np.random.Generator:
    # one counter-based stream per (root seed, path index)
    return np.random.Generator(np.random.Philox([seed, i]))


def _draw_increments(grid: TimeGrid, d: int, n: int, seed: int) -> np.ndarray:
    if seed is None or seed < 0:
        raise ValueError("sampling needs a non-negative integer seed")
    scale = math.sqrt(grid.dt)
    dW = np.empty((n, grid.steps, d))
    for i in range(n):
        dW[i] = _path_rng(seed, i).normal(0.0, scale, size=(grid.steps, d))
    return dW


@dataclass(frozen=True)
class CameronMartinShift:
    """Absolutely continuous shift h(t) = int_0^t hdot(s) ds on a fixed grid.

    ``hdot`` maps t to a scalar or length-d array.  The H-norm and the grid
    values of h are precomputed with the same left-endpoint quadrature the
    samplers and entropy use, so h(0) = 0 exactly.
    """

    hdot: Callable[[float], Union[float, np.ndarray]]
    grid: TimeGrid
    d: int = 1
    values: np.ndarray = field(init=False, repr=False)
    h_norm: float = field(init=False)

    def __post_init__(self):
        K = self.grid.steps
        rates = np.empty((K, self.d))
        for k in range(K):
            rates[k] = np.broadcast_to(
                np.asarray(self.hdot(float(self.grid.times[k])), dtype=np.float64),
                (self.d,),
            )
        vals = np.zeros((K + 1, self.d))
        np.cumsum(rates * self.grid.dt, axis=0, out=vals[1:])
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(
            self, "h_norm", float(math.sqrt(np.sum(rates**2) * self.grid.dt))
        )

    def sup_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.values, axis=1)))


@dataclass(frozen=True)
class GirsanovTilt:
    """Bounded drift q defining dQ = exp(int q dW - 1/2 int |q|^2 du) dP.

    ``kind`` is "deterministic" (q reads only t) or "adapted" (q reads t and
    the path up to t).  Deterministic callables take t and return a scalar
    or (d,) array.  Adapted callables take (t, values_so_far) where
    values_so_far is the (n, k+1, d) block of the paths up to the current
    knot, and return (n, d) (or scalar / (d,) to broadcast).  ``bound`` is a
    hard sup bound on |q|; evaluations above it are rejected, and tilts
    without a finite bound cannot be sampled.
    """

    q: Callable
    bound: float
    kind: str = "deterministic"
    label: str = ""

    def __post_init__(self):
        if self.kind not in ("deterministic", "adapted"):
            raise ValueError(f"unknown tilt kind {self.kind!r}")

    def eval(self, t: float, values_so_far: Union[np.ndarray, None], n: int, d: int) -> np.ndarray:
        if self.kind == "deterministic":
            out = np.asarray(self.q(t), dtype=np.float64)
        else:
            out = np.asarray(self.q(t, values_so_far), dtype=np.float64)
        out = np.broadcast_to(out, (n, d)) if out.shape != (n, d) else out
        mag = np.linalg.norm(out, axis=-1)
        worst = float(np.max(mag)) if mag.size else 0.0
        if not (self.bound is not None and math.isfinite(self.bound)):
            raise ValueError("tilt has no finite bound; refusing to sample")
        if worst > self.bound + 1e-9:
            raise ValueError(
                f"tilt {self.label or self.q!r} exceeded its bound: "
                f"|q| = {worst:.6g} > {self.bound:.6g} at t = {t:.6g}"
            )
        return out


def _simulate(grid: TimeGrid, d: int, n: int, seed: int,
              tilt: Union[GirsanovTilt, None]) -> np.ndarray:
    dW = _draw_increments(grid, d, n, seed)
    values = np.zeros((n, grid.steps + 1, d))
    dt = grid.dt
    for k in range(grid.steps):
        x = values[:, k]
        if tilt is None:
            values[:, k + 1] = x + dW[:, k]
        else:
            qk = tilt.eval(float(grid.times[k]), values[:, : k + 1], n, d)
            values[:, k + 1] = x + qk * dt + dW[:, k]
    return values


def sample_brownian(grid: TimeGrid, d: int, n: int, seed: int) -> PathBundle:
    """n independent d-dimensional Brownian paths started at 0."""
    values = _simulate(grid, d, n, seed, None)
    return PathBundle(grid, values, seed=seed, tag=MeasureTag.wiener())


def sample_tilted_brownian(grid: TimeGrid, tilt: GirsanovTilt, d: int, n: int,
                           seed: int) -> PathBundle:
    """Paths of the canonical process under the tilted measure Q.

    Under Q the canonical path solves dX = q_t(X) dt + dB with B a
    Q-Brownian motion; the Euler scheme below consumes the same per-path
    increment streams as :func:`sample_brownian`, so a zero tilt reproduces
    the Brownian bundle array for array.
    """
    values = _simulate(grid, d, n, seed, tilt)
    return PathBundle(grid, values, seed=seed,
                      tag=MeasureTag.tilted(tilt.label or "q"))


def sup_distance(a: Union[Path, np.ndarray], b: Union[Path, np.ndarray]) -> float:
    """sup over grid times of the Euclidean distance between two paths."""
    av = a.values if isinstance(a, Path) else np.asarray(a, dtype=np.float64)
    bv = b.values if isinstance(b, Path) else np.asarray(b, dtype=np.float64)
    if av.ndim == 1:
        av = av[:, None]
    if bv.ndim == 1:
        bv = bv[:, None]
    if av.shape != bv.shape:
        raise ValueError(f"shape mismatch {av.shape} vs {bv.shape}")
    return float(np.max(np.linalg.norm(av - bv, axis=-1)))


def bundle_sup_norms(a: PathBundle, b: PathBundle) -> np.ndarray:
    """Pathwise sup distances between two aligned bundles (same n, grid)."""
    if a.values.shape != b.values.shape:
        raise ValueError("bundles are not aligned")
    return np.max(np.linalg.norm(a.values - b.values, axis=-1), axis=-1)


def _shift_values(shift) -> np.ndarray:
    if isinstance(shift, CameronMartinShift):
        return shift.values
    if isinstance(shift, Path):
        return shift.values
    arr = np.asarray(shift, dtype=np.float64)
    return arr[:, None] if arr.ndim == 1 else arr


def apply_shift(obj: Union[Path, PathBundle], shift) -> Union[Path, PathBundle]:
    """Translate a path or every path of a bundle by h.

    ``shift`` may be a CameronMartinShift, a Path, or a raw (steps+1, d)
    array of grid values.
    """
    h = _shift_values(shift)
    if isinstance(obj, Path):
        if h.shape != obj.values.shape:
            raise ValueError(f"shift shape {h.shape} does not match path {obj.values.shape}")
        return Path(obj.grid, obj.values + h)
    if isinstance(obj, PathBundle):
        if h.shape != obj.values.shape[1:]:
            raise ValueError(f"shift shape {h.shape} does not match bundle {obj.values.shape[1:]}")
        return PathBundle(obj.grid, obj.values + h[None, :, :], seed=obj.seed,
                          tag=MeasureTag.pushforward(f"shifted({obj.tag.kind})"))
    raise TypeError(f"cannot shift {type(obj).__name__}")


# ---------------------------------------------------------------------------
# serialization: header (T, steps, d, n, seed, tag) then row-major values


def _header(bundle: PathBundle) -> dict:
    return {
        "T": bundle.grid.T,
        "steps": bundle.grid.steps,
        "d": bundle.d,
        "n": bundle.n,
        "seed": bundle.seed,
        "tag_kind": bundle.tag.kind,
        "tag_label": bundle.tag.label,
    }


def _bundle_from(header: dict, flat: np.ndarray) -> PathBundle:
    n, steps, d = int(header["n"]), int(header["steps"]), int(header["d"])
    values = flat.reshape(n, steps + 1, d)
    seed = header.get("seed")
    return PathBundle(
        TimeGrid(float(header["T"]), steps), values,
        seed=None if seed is None else int(seed),
        tag=MeasureTag(header.get("tag_kind", "wiener"), header.get("tag_label", "")),
    )


def save_bundle(bundle: PathBundle, file, fmt: str = "binary") -> None:
    """Write a bundle to ``file`` (path or file object).

    "binary": magic line, one JSON header line, then little-endian float64
    values in C order.  "csv": a commented JSON header line, a column line,
    then one row per (path, knot) with full-precision decimal values.
    """
    head = _header(bundle)
    if fmt == "binary":
        own = not hasattr(file, "write")
        fh = open(file, "wb") if own else file
        try:
            fh.write(_BIN_MAGIC)
            fh.write(json.dumps(head, sort_keys=True).encode("utf8") + b"\n")
            fh.write(np.ascontiguousarray(bundle.values, dtype="<f8").tobytes())
        finally:
            if own:
                fh.close()
    elif fmt == "csv":
        own = not hasattr(file, "write")
        fh = open(file, "w") if own else file
        try:
            fh.write(_CSV_MAGIC + json.dumps(head, sort_keys=True) + "\n")
            cols = ",".join(f"x{j}" for j in range(bundle.d))
            fh.write(f"path,knot,{cols}\n")
            for i in range(bundle.n):
                for k in range(bundle.grid.steps + 1):
                    row = ",".join(repr(float(v)) for v in bundle.values[i, k])
                    fh.write(f"{i},{k},{row}\n")
        finally:
            if own:
                fh.close()
    else:
        raise ValueError(f"unknown format {fmt!r}")


def load_bundle(file) -> PathBundle:
    """Read a bundle written by :func:`save_bundle` (format auto-detected)."""
    own = not hasattr(file, "read")
    fh = open(file, "rb") if own else file
    try:
        first = fh.readline()
        if first == _BIN_MAGIC:
            header = json.loads(fh.readline().decode("utf8"))
            flat = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
            return _bundle_from(header, flat)
        text = first.decode("utf8") if isinstance(first, bytes) else first
        if text.startswith(_CSV_MAGIC):
            header = json.loads(text[len(_CSV_MAGIC):])
            body = fh.read()
            if isinstance(body, bytes):
                body = body.decode("utf8")
            data = np.loadtxt(io.StringIO(body), delimiter=",", skiprows=1, ndmin=2)
            order = np.lexsort((data[:, 1], data[:, 0]))
            flat = data[order, 2:].ravel()
            return _bundle_from(header, flat)
        raise ValueError("unrecognized bundle header")
    finally:
        if own:
            fh.close()
