"""Type-1 and type-2 nonuniform FFTs by Gaussian gridding.

The oversampled grid has ``m_r = 2 n`` nodes per dimension on ``[0, 2*pi)``,
spacing ``h = pi / n``.  Point data are spread onto the grid with a truncated
periodic Gaussian ``exp(-(x - y)^2 / (4 tau))`` covering ``2 m_sp + 1`` nodes per
dimension, transformed with an FFT, and corrected by the diagonal factor
``sqrt(pi/tau) exp(k^2 tau)`` per dimension.

Conventions
-----------
* type 2 evaluates ``f(x_j) = sum_k F(k) exp(+i k.x_j)``
* type 1 evaluates ``F(k) = sum_j c_j exp(-i k.x_j)``
* coefficient arrays use centered ordering: array index ``i`` holds ``k = i - n/2``.

Type 1 is the exact adjoint of type 2, which the normal-operator algebra relies on.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

TWO_PI = 2.0 * np.pi

PRESETS = {"digits2": 2, "digits6": 6, "digits12": 12}

# spreading is chunked over points to bound the size of temporaries
_CHUNK = 4096

MAX_DIRECT_TERMS = 10**8


@dataclass(frozen=True)
class NufftParams:
    m_sp: int
    tau: float
    n: int

    def __post_init__(self):
        if self.m_sp < 1:
            raise ValueError(f"m_sp must be positive, got {self.m_sp}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.n < 1:
            raise ValueError(f"n must be positive, got {self.n}")

    @property
    def m_r(self) -> int:
        return 2 * self.n

    @property
    def spacing(self) -> float:
        return np.pi / self.n

    @property
    def width(self) -> int:
        return 2 * self.m_sp + 1


def make_params(preset="digits6", n: int = 128, tau: float | None = None) -> NufftParams:
    """Build NUFFT parameters from a named preset or an explicit half-width.

    ``preset`` is one of ``digits2``, ``digits6``, ``digits12`` (tau = m_sp / n^2),
    or an integer ``m_sp`` in which case ``tau`` defaults to ``m_sp / n^2``.
    """
    if n < 4:
        raise ValueError(f"n must be at least 4, got {n}")
    if isinstance(preset, str):
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        m_sp = PRESETS[preset]
    else:
        m_sp = int(preset)
    if m_sp < 1:
        raise ValueError(f"m_sp must be positive, got {m_sp}")
    if tau is None:
        tau = m_sp / n**2
    return NufftParams(m_sp=m_sp, tau=float(tau), n=n)


def reduce_points(coords) -> np.ndarray:
    """Return coordinates as a float array of shape (P, dim) reduced into [0, 2 pi)."""
    x = np.asarray(coords, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[1] not in (1, 2):
        raise ValueError(f"points must have shape (P,) or (P, dim) with dim 1 or 2, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("point coordinates must be finite")
    x = np.mod(x, TWO_PI)
    # np.mod can return exactly 2 pi for tiny negative inputs
    x[x >= TWO_PI] = 0.0
    return x


@dataclass(frozen=True, eq=False)
class SpreadingPlan:
    """Precomputed gridding data for a fixed point set.

    ``nearest_index[j, d]`` is the largest grid index ``m`` with ``m h <= x_j``;
    the Gaussian weight of point ``j`` at offset ``l`` in dimension ``d`` is
    ``e1[j, d] * e2[j, d]**l * e3[l + m_sp]``.
    """

    params: NufftParams
    points: np.ndarray
    nearest_index: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    e3: np.ndarray
    offsets: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def count(self) -> int:
        return self.points.shape[0]

    def window(self, axis: int, sl=slice(None)):
        """Weights and wrapped grid indices along one axis, each of shape (P, 2 m_sp + 1)."""
        ell = self.offsets
        w = self.e1[sl, axis, None] * self.e2[sl, axis, None] ** ell * self.e3
        idx = np.mod(self.nearest_index[sl, axis, None] + ell, self.params.m_r)
        return w, idx

    def dense_weights(self, sl=slice(None)):
        """Flattened grid indices and tensor-product weights, shape (P, width**dim)."""
        wx, ix = self.window(0, sl)
        if self.dim == 1:
            return ix, wx
        wy, iy = self.window(1, sl)
        m_r = self.params.m_r
        idx = (ix[:, :, None] * m_r + iy[:, None, :]).reshape(ix.shape[0], -1)
        w = (wx[:, :, None] * wy[:, None, :]).reshape(ix.shape[0], -1)
        return idx, w


def plan_spreading(points, params: NufftParams) -> SpreadingPlan:
    x = reduce_points(points)
    h = params.spacing
    m = np.floor(x / h).astype(np.int64)
    d = x - m * h
    # repair floor() rounding so that 0 <= d < h holds exactly
    up = (x - (m + 1) * h) >= 0
    m[up] += 1
    down = d < 0
    m[down] -= 1
    d = x - m * h
    four_tau = 4.0 * params.tau
    e1 = np.exp(-(d**2) / four_tau)
    e2 = np.exp(d * h / (2.0 * params.tau))
    offsets = np.arange(-params.m_sp, params.m_sp + 1)
    e3 = np.exp(-((offsets * h) ** 2) / four_tau)
    for a in (x, m, e1, e2, e3, offsets):
        a.setflags(write=False)
    return SpreadingPlan(params, x, m, e1, e2, e3, offsets)


def _grid_shape(plan: SpreadingPlan):
    return (plan.params.m_r,) * plan.dim


def spread(plan: SpreadingPlan, samples) -> np.ndarray:
    """Spread point samples onto the oversampled grid (operator B)."""
    v = np.asarray(samples)
    if v.shape != (plan.count,):
        raise ValueError(f"expected {plan.count} samples, got shape {v.shape}")
    v = v.astype(np.complex128, copy=False)
    size = plan.params.m_r**plan.dim
    re = np.zeros(size)
    im = np.zeros(size)
    for start in range(0, plan.count, _CHUNK):
        sl = slice(start, start + _CHUNK)
        idx, w = plan.dense_weights(sl)
        vs = v[sl, None]
        idx = idx.ravel()
        re += np.bincount(idx, (w * vs.real).ravel(), minlength=size)
        im += np.bincount(idx, (w * vs.imag).ravel(), minlength=size)
    return (re + 1j * im).reshape(_grid_shape(plan))


def interpolate(plan: SpreadingPlan, grid) -> np.ndarray:
    """Gather grid values at the points with the spreading weights (operator B*)."""
    g = np.asarray(grid)
    if g.shape != _grid_shape(plan):
        raise ValueError(f"expected grid of shape {_grid_shape(plan)}, got {g.shape}")
    flat = g.astype(np.complex128, copy=False).ravel()
    out = np.empty(plan.count, dtype=np.complex128)
    for start in range(0, plan.count, _CHUNK):
        sl = slice(start, start + _CHUNK)
        idx, w = plan.dense_weights(sl)
        out[sl] = np.einsum("pk,pk->p", flat[idx], w)
    return out


def frequencies(n: int) -> np.ndarray:
    """Integer frequencies in centered ordering, ``-n/2 .. n/2 - 1``."""
    return np.arange(n) - n // 2


def deconvolution_factor(params: NufftParams, dim: int = 1) -> np.ndarray:
    """Diagonal correction ``sqrt(pi/tau) exp(k^2 tau)`` (tensor product in 2-D)."""
    k = frequencies(params.n)
    f = np.sqrt(np.pi / params.tau) * np.exp(k.astype(float) ** 2 * params.tau)
    if dim == 1:
        return f
    return f[:, None] * f[None, :]


def deconvolve(params: NufftParams, coefficients) -> np.ndarray:
    c = np.asarray(coefficients)
    return c * deconvolution_factor(params, c.ndim)


def _mode_index(params: NufftParams) -> np.ndarray:
    """Oversampled-grid FFT bins holding the central n modes (wrap-around order)."""
    return np.mod(frequencies(params.n), params.m_r)


def forward_fft(params: NufftParams, grid: np.ndarray) -> np.ndarray:
    """``(1/m_r^d) FFT(grid)`` restricted to the central n modes per dimension.

    In 2-D only the needed rows are carried into the second pass.
    """
    idx = _mode_index(params)
    if grid.ndim == 1:
        return sfft.fft(grid, norm="forward")[idx]
    half = sfft.fft(grid, axis=0, norm="forward")[idx]
    return sfft.fft(half, axis=1, norm="forward")[:, idx]


def inverse_fft(params: NufftParams, coefficients: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`forward_fft`: zero-pad onto the oversampled grid and inverse FFT."""
    idx = _mode_index(params)
    m_r = params.m_r
    c = np.asarray(coefficients, dtype=np.complex128)
    if c.ndim == 1:
        full = np.zeros(m_r, dtype=np.complex128)
        full[idx] = c
        return sfft.ifft(full, norm="backward")
    rows = np.zeros((params.n, m_r), dtype=np.complex128)
    rows[:, idx] = c
    full = np.zeros((m_r, m_r), dtype=np.complex128)
    full[idx] = sfft.ifft(rows, axis=1, norm="backward")
    return sfft.ifft(full, axis=0, norm="backward")


def nufft_type1(plan: SpreadingPlan, samples) -> np.ndarray:
    """Uniform coefficients ``F(k) = sum_j c_j exp(-i k.x_j)`` (centered ordering)."""
    return deconvolve(plan.params, forward_fft(plan.params, spread(plan, samples)))


def nufft_type2(plan: SpreadingPlan, coefficients) -> np.ndarray:
    """Point values ``f(x_j) = sum_k F(k) exp(+i k.x_j)``."""
    c = np.asarray(coefficients)
    expected = (plan.params.n,) * plan.dim
    if c.shape != expected:
        raise ValueError(f"expected coefficients of shape {expected}, got {c.shape}")
    return interpolate(plan, inverse_fft(plan.params, deconvolve(plan.params, c)))


def direct_ndft(points, values, n: int, direction: int) -> np.ndarray:
    """Exact exponential sums, used as an accuracy oracle.

    ``direction=1`` maps point samples to n**dim centered coefficients with
    ``exp(-i k.x)``; ``direction=2`` maps coefficients to point values with
    ``exp(+i k.x)``.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    dim = x.shape[1]
    terms = x.shape[0] * n**dim
    if terms > MAX_DIRECT_TERMS:
        raise ValueError(f"direct sum of {terms} terms exceeds the {MAX_DIRECT_TERMS} limit")
    k = frequencies(n).astype(float)
    # per-dimension phase tables, (P, n)
    phases = [np.exp(1j * np.outer(x[:, d], k)) for d in range(dim)]
    v = np.asarray(values, dtype=np.complex128)
    if direction == 2:
        if dim == 1:
            return phases[0] @ v
        return np.einsum("pa,pb,ab->p", phases[0], phases[1], v, optimize=True)
    if direction == 1:
        if dim == 1:
            return phases[0].conj().T @ v
        return np.einsum("pa,pb,p->ab", phases[0].conj(), phases[1].conj(), v, optimize=True)
    raise ValueError(f"direction must be 1 or 2, got {direction}")
