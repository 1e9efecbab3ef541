"""Sampled functions on [0, T_max] and the norms of Y_1, Y_inf and Y'_inf.

A :class:`SampledFunction` is piecewise linear between grid nodes. A time
may appear twice in the grid to mark a jump: the first copy holds the left
limit, the second the right limit. Evaluation is right-continuous.

On sampled data the supremum and the essential supremum coincide, so
``yinf_norm`` serves both ``Y_inf`` and ``Y'_inf``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .family import NormFamily

__all__ = [
    "SampledFunction",
    "SubspaceZ",
    "y1_norm",
    "yinf_norm",
    "in_Z",
    "indicator",
    "uniform_grid",
]


def uniform_grid(t_max: float, step: float, breaks=()) -> np.ndarray:
    """Uniform grid on ``[0, t_max]`` with the given break points added."""
    n = max(int(np.ceil(t_max / step - 1e-9)), 1)
    grid = np.linspace(0.0, t_max, n + 1)
    if len(breaks):
        grid = np.union1d(grid, [b for b in breaks if 0.0 <= b <= t_max])
    return grid


@dataclass(frozen=True)
class SampledFunction:
    """Function ``[0, T_max] -> R^d`` sampled on a grid.

    Attributes
    ----------
    grid : ndarray, shape (n,)
        Nondecreasing times starting at 0; a repeated time marks a jump.
    values : ndarray, shape (n, d)
    extension : {"zero", "constant"}
        Behaviour beyond ``grid[-1]``. Operators integrating past the
        horizon report truncation bounds for the ``"constant"`` case.
    tail : tuple, optional
        Decay annotation ``(K, kappa)``: ``||f(t)||_t <= K exp(-kappa (t - T_max))``
        beyond the horizon, which gives the Y_1 tail bound ``K / kappa``.
    """

    grid: np.ndarray
    values: np.ndarray
    extension: str = "zero"
    tail: Optional[tuple] = None
    label: str = field(default="", compare=False)

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if grid.ndim != 1 or len(grid) < 2 or len(grid) != len(values):
            raise ValueError("grid and values need equal length >= 2")
        if grid[0] != 0.0:
            raise ValueError("grid must start at 0")
        steps = np.diff(grid)
        if np.any(steps < 0):
            raise ValueError("grid must be nondecreasing")
        dup = steps == 0
        if np.any(dup[1:] & dup[:-1]):
            raise ValueError("a time may appear at most twice (one jump)")
        if self.extension not in ("zero", "constant"):
            raise ValueError("extension must be 'zero' or 'constant'")
        grid.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def t_max(self) -> float:
        return float(self.grid[-1])

    @classmethod
    def from_callable(cls, fn, grid, jumps=(), **kw) -> "SampledFunction":
        """Sample ``fn`` on ``grid``; at each jump time insert left/right limits.

        ``fn`` is evaluated slightly left of each jump for the left limit.
        """
        grid = np.asarray(grid, dtype=float)
        jumps = [j for j in jumps if 0.0 < j <= grid[-1]]
        grid = np.union1d(grid, jumps)
        times, vals = [], []
        jump_set = set(float(j) for j in jumps)
        for t in grid:
            if float(t) in jump_set:
                times.append(t)
                vals.append(np.atleast_1d(fn(np.nextafter(t, -np.inf) - 1e-12 * (1 + t))))
            times.append(t)
            vals.append(np.atleast_1d(fn(t)))
        return cls(np.array(times), np.array(vals, dtype=float), **kw)

    def __call__(self, t):
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.empty((len(t_arr), self.dim))
        g, v = self.grid, self.values
        k = np.searchsorted(g, t_arr, side="right") - 1
        for i, (tt, kk) in enumerate(zip(t_arr, k)):
            if kk < 0:
                out[i] = v[0]
            elif kk >= len(g) - 1:
                out[i] = v[-1] if (self.extension == "constant" or tt == g[-1]) else 0.0
            else:
                h = g[kk + 1] - g[kk]
                w = (tt - g[kk]) / h if h > 0 else 0.0
                out[i] = (1 - w) * v[kk] + w * v[kk + 1]
        return out if np.ndim(t) else out[0]

    def scaled(self, a: float) -> "SampledFunction":
        return replace(self, values=a * self.values)

    def __add__(self, other: "SampledFunction") -> "SampledFunction":
        if not np.array_equal(self.grid, other.grid):
            raise ValueError("sampled functions must share a grid to be added")
        return replace(self, values=self.values + other.values)

    def map_values(self, fn) -> "SampledFunction":
        """Apply ``fn(t, values)`` node-wise (vectorized over the grid)."""
        return replace(self, values=np.asarray(fn(self.grid, self.values), dtype=float))

    def refined(self) -> "SampledFunction":
        """Insert midpoints of every nonzero-length cell."""
        g, v = self.grid, self.values
        h = np.diff(g)
        times, vals = [g[0]], [v[0]]
        for k in range(len(h)):
            if h[k] > 0:
                times.append(0.5 * (g[k] + g[k + 1]))
                vals.append(0.5 * (v[k] + v[k + 1]))
            times.append(g[k + 1])
            vals.append(v[k + 1])
        return replace(self, grid=np.array(times), values=np.array(vals))

    def segment(self, s: float, t: float):
        """Nodes and values on ``[s, t]`` with interpolated endpoints."""
        g = self.grid
        inner = (g > s) & (g < t)
        times = np.concatenate([[s], g[inner], [t]])
        vals = np.vstack([self(s)[None, :], self.values[inner], self(t)[None, :]])
        if s in g:
            # left end inside a jump: use the right limit
            vals[0] = self.values[np.flatnonzero(g == s)[-1]]
        if t in g:
            vals[-1] = self.values[np.flatnonzero(g == t)[0]]
        return times, vals


def indicator(a: float, b: float, vector, grid) -> SampledFunction:
    """``chi_[a,b] * vector`` sampled on ``grid`` with jump nodes at ``a`` and ``b``."""
    vector = np.atleast_1d(np.asarray(vector, dtype=float))
    grid = np.union1d(np.asarray(grid, dtype=float), [a, b])
    times, vals = [], []
    zero = np.zeros_like(vector)
    for t in grid:
        if t == a and a > 0:
            times += [t, t]
            vals += [zero, vector]
        elif t == b:
            times += [t, t]
            vals += [vector if a <= t else zero, zero]
        else:
            times.append(t)
            vals.append(vector if a <= t < b else zero)
    return SampledFunction(np.array(times), np.array(vals))


@dataclass(frozen=True)
class SubspaceZ:
    """Subspace of ``R^d`` given by an orthonormal basis (``d x k``, k may be 0)."""

    basis: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.basis, dtype=float)
        if b.ndim != 2:
            raise ValueError("basis must be a d x k matrix")
        if b.shape[1] and np.max(np.abs(b.T @ b - np.eye(b.shape[1]))) > 1e-12:
            raise ValueError("basis columns must be orthonormal")
        b.setflags(write=False)
        object.__setattr__(self, "basis", b)

    @classmethod
    def span(cls, vectors, dim: Optional[int] = None) -> "SubspaceZ":
        """Orthonormalized span of the given column vectors."""
        v = np.asarray(vectors, dtype=float)
        if v.size == 0:
            if dim is None:
                raise ValueError("dim required for the trivial subspace")
            return cls(np.zeros((dim, 0)))
        if v.ndim == 1:
            v = v[:, None]
        u, s, _ = np.linalg.svd(v, full_matrices=False)
        rank = int(np.sum(s > 1e-12 * max(s[0], 1e-300)))
        return cls(u[:, :rank])

    @classmethod
    def trivial(cls, dim: int) -> "SubspaceZ":
        return cls(np.zeros((dim, 0)))

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    @property
    def k(self) -> int:
        return self.basis.shape[1]

    def project(self, x) -> np.ndarray:
        b = self.basis
        return b @ (b.T @ np.asarray(x, dtype=float))


def _norm_values(f: SampledFunction, norms: NormFamily, grid=None, values=None):
    grid = f.grid if grid is None else grid
    values = f.values if values is None else values
    return norms.batch(grid, values)


def _coarse_indices(grid: np.ndarray) -> np.ndarray:
    """Every other node, keeping endpoints and both nodes of each jump."""
    n = len(grid)
    keep = np.zeros(n, dtype=bool)
    keep[::2] = True
    keep[[0, -1]] = True
    dup = np.flatnonzero(np.diff(grid) == 0)
    keep[dup] = keep[dup + 1] = True
    return np.flatnonzero(keep)


def y1_norm(f: SampledFunction, norms: NormFamily, with_error: bool = False):
    """Composite-trapezoid ``int_0^T ||f(t)||_t dt``.

    With ``with_error`` returns ``(value, quad_error, tail_bound)`` where
    ``quad_error`` is the Richardson estimate ``|I_h - I_2h| / 3`` against
    every other node (jump nodes kept) and ``tail_bound``
    comes from the decay annotation (``inf`` for constant extension without
    one, 0 for zero extension).
    """
    vals = _norm_values(f, norms)
    value = float(np.trapezoid(vals, f.grid))
    if not with_error:
        return value
    idx = _coarse_indices(f.grid)
    coarse = float(np.trapezoid(vals[idx], f.grid[idx]))
    err = abs(value - coarse) / 3.0
    if f.tail is not None:
        K, kappa = f.tail
        tail = K / kappa
    elif f.extension == "constant" and np.any(f.values[-1] != 0):
        tail = np.inf
    else:
        tail = 0.0
    return value, err, tail


def yinf_norm(f: SampledFunction, norms: NormFamily, with_location: bool = False):
    """Sup of ``||f(t)||_t`` over grid nodes and cell midpoints."""
    g, v = f.grid, f.values
    h = np.diff(g)
    cells = np.flatnonzero(h > 0)
    mid_t = 0.5 * (g[cells] + g[cells + 1])
    mid_v = 0.5 * (v[cells] + v[cells + 1])
    times = np.concatenate([g, mid_t])
    nv = norms.batch(times, np.vstack([v, mid_v]))
    i = int(np.argmax(nv))
    if with_location:
        return float(nv[i]), float(times[i])
    return float(nv[i])


def in_Z(f: SampledFunction, Z: SubspaceZ, tol: float = 1e-8):
    """Whether ``f(0)`` lies in ``Z``: returns ``(inside, distance)``."""
    x0 = f.values[0]
    dist = float(np.linalg.norm(x0 - Z.project(x0)))
    return dist <= tol * (1.0 + float(np.linalg.norm(x0))), dist
