"""Normal-operator backends ``N = F_NU F_NU*`` acting on images.

Three interchangeable implementations:

``direct``
    type-2 NUFFT onto the slice points followed by the type-1 NUFFT back.
``fused``
    ``A F (B*B) F* A``: the two gridding passes are fused into one precomputed
    sparse matrix on the oversampled grid, framed by two FFTs and two diagonal
    scalings.
``surrogate``
    a banded sparse matrix ``T`` assembled from translates of the fused
    operator's response to a centred delta, truncated to a square of radius r.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import nufft
from .fourier_slice import Geometry
from .sparse import SparseOperator

log = logging.getLogger(__name__)

DEFAULT_MEMORY_CAP = 8 * 2**30
_BUILD_BLOCK = 4096


class MemoryCapError(RuntimeError):
    """The estimated operator size exceeds the configured memory cap."""


def _check_image(image, n):
    u = np.asarray(image)
    if u.shape != (n, n):
        raise ValueError(f"image shape {u.shape} does not match n={n}")
    return u


def apply_normal_direct(geometry: Geometry, image, counters: Counter | None = None) -> np.ndarray:
    u = _check_image(image, geometry.n)
    plan = geometry.plan
    out = nufft.nufft_type1(plan, nufft.nufft_type2(plan, u))
    if counters is not None:
        counters.update(fft=2, spread=1, interpolate=1, diag=2)
    return out


def apply_normal_fused(btb: SparseOperator, params: nufft.NufftParams, image,
                       counters: Counter | None = None) -> np.ndarray:
    u = _check_image(image, params.n)
    if btb.rows != params.m_r**2:
        raise ValueError(f"B*B has {btb.rows} rows, expected {params.m_r ** 2} for n={params.n}")
    a = nufft.deconvolution_factor(params, 2)
    grid = nufft.inverse_fft(params, a * u)
    grid = btb.matvec(grid.ravel()).reshape(grid.shape)
    out = a * nufft.forward_fft(params, grid)
    if counters is not None:
        counters.update(fft=2, spmv=1, diag=2)
    return out


def apply_surrogate(t: SparseOperator, image, counters: Counter | None = None) -> np.ndarray:
    u = np.asarray(image)
    n = int(round(np.sqrt(t.rows)))
    _check_image(u, n)
    out = t.matvec(u.ravel()).reshape(n, n)
    if counters is not None:
        counters.update(spmv=1)
    return out


def interpolation_matrix(plan: nufft.SpreadingPlan) -> sp.csr_matrix:
    """The gridding weights as a (points x grid) CSR matrix; duplicates summed."""
    width = plan.params.width**plan.dim
    idx, w = plan.dense_weights()
    ptr = np.arange(0, plan.count * width + 1, width)
    m = sp.csr_matrix((w.ravel(), idx.ravel(), ptr), shape=(plan.count, plan.params.m_r**plan.dim))
    m.sum_duplicates()
    return m


def estimate_btb_bytes(plan: nufft.SpreadingPlan) -> int:
    """Upper bound on the stored size of B*B (upper triangle, 12 bytes per entry)."""
    m_r = plan.params.m_r
    m_sp = plan.params.m_sp
    touched = np.zeros((m_r,) * plan.dim, dtype=bool)
    touched[tuple(plan.nearest_index.T)] = True
    for ax in range(plan.dim):
        acc = np.zeros_like(touched)
        for s in range(-m_sp, m_sp + 1):
            acc |= np.roll(touched, s, axis=ax)
        touched = acc
    per_row = (4 * m_sp + 1) ** plan.dim
    return int(touched.sum()) * (per_row // 2 + 1) * 12


def build_btb(geometry: Geometry, memory_cap: int = DEFAULT_MEMORY_CAP) -> SparseOperator:
    """Precompute ``B*B`` over the oversampled grid, entry (m, k) = sum_j w(j,m) w(j,k).

    Built in row blocks of ``W^T W`` keeping the upper triangle, so peak memory
    stays close to the size of the result.
    """
    plan = geometry.plan
    est = estimate_btb_bytes(plan)
    if est > memory_cap:
        raise MemoryCapError(
            f"B*B needs about {est / 2**30:.2f} GiB, above the {memory_cap / 2**30:.2f} GiB cap; "
            "raise the cap or use a smaller m_sp"
        )
    w = interpolation_matrix(plan)
    wt = w.T.tocsr()
    size = wt.shape[0]
    ptr_parts = [np.zeros(1, dtype=np.int64)]
    ind_parts, val_parts = [], []
    total = 0
    for start in range(0, size, _BUILD_BLOCK):
        block = (wt[start : start + _BUILD_BLOCK] @ w).tocsr()
        block.sort_indices()
        rows = np.repeat(np.arange(block.shape[0]) + start, np.diff(block.indptr))
        keep = block.indices >= rows
        counts = np.bincount(rows[keep] - start, minlength=block.shape[0])
        ptr_parts.append(total + np.cumsum(counts))
        total += int(counts.sum())
        ind_parts.append(block.indices[keep])
        val_parts.append(block.data[keep])
    meta = _meta(geometry, r=0)
    return SparseOperator(size, size, np.concatenate(ptr_parts), np.concatenate(ind_parts),
                          np.concatenate(val_parts), symmetric=True, meta=meta)


def _meta(geometry: Geometry, r: int) -> dict:
    return {
        "n": geometry.n,
        "m_sp": geometry.params.m_sp,
        "tau": geometry.params.tau,
        "n_angles": geometry.grid.n_angles,
        "d": geometry.grid.angle_set.subsample_d,
        "r": r,
    }


@dataclass(frozen=True)
class SurrogateConfig:
    """Stencil radius, truncation ball and scaling.

    ``scale="dc"`` multiplies the truncated stencil so its sum equals the sum of
    the whole point response, making ``T`` and ``N`` agree on slowly varying
    interior images.  ``scale="raw"`` keeps the response values unchanged.
    """

    radius_r: int
    norm: str = "chebyshev"
    scale: str = "dc"

    def __post_init__(self):
        if self.radius_r < 1:
            raise ValueError(f"surrogate radius must be at least 1, got {self.radius_r}")
        if self.norm not in ("chebyshev", "euclidean"):
            raise ValueError(f"unknown stencil norm {self.norm!r}")
        if self.scale not in ("dc", "raw"):
            raise ValueError(f"unknown stencil scaling {self.scale!r}")


def point_response(geometry: Geometry, btb: SparseOperator) -> np.ndarray:
    """Fused normal operator applied to a unit delta at pixel (n/2, n/2)."""
    n = geometry.n
    delta = np.zeros((n, n))
    delta[n // 2, n // 2] = 1.0
    return apply_normal_fused(btb, geometry.params, delta)


def stencil_offsets(config: SurrogateConfig):
    r = config.radius_r
    di, dj = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    if config.norm == "euclidean":
        keep = di**2 + dj**2 <= r * r
        return di[keep], dj[keep]
    return di.ravel(), dj.ravel()


def build_surrogate(geometry: Geometry, btb: SparseOperator, config: SurrogateConfig) -> SparseOperator:
    """Banded surrogate ``T[p, q] = s[c + p - q]`` for ``|p - q| <= r``, no wrap-around.

    ``s`` is the real part of the fused operator's centred point response,
    scaled per ``config.scale``.  Rows near an edge lose the stencil entries
    that would fall outside the image.
    """
    n = geometry.n
    r = config.radius_r
    if r >= n // 2:
        raise ValueError(f"surrogate radius {r} must be below n/2 = {n // 2}")
    s = point_response(geometry, btb).real
    c = n // 2
    di, dj = stencil_offsets(config)
    stencil = s[c + di, c + dj]
    if config.scale == "dc":
        stencil = stencil * (s.sum() / stencil.sum())
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    i = i.ravel()
    j = j.ravel()
    rows, cols, vals = [], [], []
    for a, b, v in zip(di, dj, stencil):
        # column q = p - (a, b) receives s[c + a, c + b]
        qi = i - a
        qj = j - b
        ok = (qi >= 0) & (qi < n) & (qj >= 0) & (qj < n)
        rows.append(i[ok] * n + j[ok])
        cols.append(qi[ok] * n + qj[ok])
        vals.append(np.full(int(ok.sum()), v))
    t = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n * n, n * n))
    t = ((t + t.T) * 0.5).tocsr()
    lo, hi = stencil_symbol_range(di, dj, stencil, n)
    if lo < -1e-8 * hi:
        log.warning("surrogate stencil (r=%d) is indefinite: symbol spans [%.3e, %.3e]; "
                    "CG on the surrogate system may diverge", r, lo, hi)
    return SparseOperator.from_scipy(t, symmetric=True, meta=_meta(geometry, r))


def stencil_symbol_range(di, dj, values, n: int):
    """Extremes of the stencil's Fourier symbol on the n x n frequency grid.

    Interior rows of ``T`` act as this convolution, so a negative minimum means
    ``T`` is indefinite for large enough images.
    """
    kernel = np.zeros((n, n))
    np.add.at(kernel, (np.mod(di, n), np.mod(dj, n)), values)
    symbol = np.fft.fft2(kernel).real
    return float(symbol.min()), float(symbol.max())


@dataclass(eq=False)
class NormalBackend:
    """Uniform interface over the three normal-operator implementations."""

    kind: str
    geometry: Geometry
    btb: SparseOperator | None = None
    t: SparseOperator | None = None
    counters: Counter = field(default_factory=Counter)

    def __post_init__(self):
        if self.kind not in ("direct", "fused", "surrogate"):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.kind == "fused" and self.btb is None:
            raise ValueError("fused backend needs a B*B operator")
        if self.kind == "surrogate" and self.t is None:
            raise ValueError("surrogate backend needs a T operator")

    @property
    def n(self) -> int:
        return self.geometry.n

    def apply(self, image) -> np.ndarray:
        if self.kind == "direct":
            return apply_normal_direct(self.geometry, image, self.counters)
        if self.kind == "fused":
            return apply_normal_fused(self.btb, self.geometry.params, image, self.counters)
        return apply_surrogate(self.t, image, self.counters)

    def apply_real(self, image) -> np.ndarray:
        """Normal operator restricted to real images: ``Re N(u)``."""
        if self.kind == "surrogate":
            return apply_surrogate(self.t, np.asarray(image, dtype=np.float64), self.counters)
        return self.apply(image).real

    def exact(self) -> "NormalBackend":
        """Backend evaluating the true normal operator (fused for the surrogate)."""
        if self.kind == "surrogate":
            return NormalBackend("fused", self.geometry, btb=self.btb, counters=self.counters)
        return self


def make_backend(kind: str, geometry: Geometry, radius_r: int = 1,
                 memory_cap: int = DEFAULT_MEMORY_CAP, surrogate: SurrogateConfig | None = None) -> NormalBackend:
    """Build a backend from scratch (no caching)."""
    if kind == "direct":
        return NormalBackend("direct", geometry)
    btb = build_btb(geometry, memory_cap)
    if kind == "fused":
        return NormalBackend("fused", geometry, btb=btb)
    t = build_surrogate(geometry, btb, surrogate or SurrogateConfig(radius_r))
    return NormalBackend("surrogate", geometry, btb=btb, t=t)
