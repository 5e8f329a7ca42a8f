"""Compressed-sparse-row operators with a compiled matvec and a binary file format.

Symmetric operators keep only their upper triangle (diagonal included), the
same convention as MatrixMarket ``symmetric`` files; the matvec applies both
halves.  Columns inside each row are sorted and unique.

The matvec kernels walk each row as runs of consecutive column indices, so
the innermost loop is a contiguous dot product (and, for symmetric storage, a
contiguous axpy for the mirrored half).  Grid stencils produce long runs.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numba
import numpy as np
import scipy.sparse as sp

MAGIC = b"TOMOSPM1"
VERSION = 1
_HEADER = struct.Struct("<8sIIIQB")
_TRAILER = struct.Struct("<IIdIII")
META_KEYS = ("n", "m_sp", "tau", "n_angles", "d", "r")


class SparseFormatError(ValueError):
    """Bad magic, version or a truncated sparse-operator file."""


class DimensionMismatchError(ValueError):
    """A cached operator was built for a different configuration."""


@numba.njit(cache=True)
def _find_runs(row_offsets, col_indices):
    rows = row_offsets.size - 1
    nnz = col_indices.size
    run_ptr = np.empty(rows + 1, np.int64)
    run_start = np.empty(nnz, np.int64)
    run_len = np.empty(nnz, np.int64)
    k = 0
    for i in range(rows):
        run_ptr[i] = k
        for p in range(row_offsets[i], row_offsets[i + 1]):
            if p == row_offsets[i] or col_indices[p] != col_indices[p - 1] + 1:
                run_start[k] = p
                run_len[k] = 1
                k += 1
            else:
                run_len[k - 1] += 1
    run_ptr[rows] = k
    return run_ptr, run_start[:k].copy(), run_len[:k].copy()


@numba.njit(cache=True, fastmath=True)
def _mv_general(run_ptr, run_start, run_len, cols, vals, x, y):
    for i in range(run_ptr.size - 1):
        acc = 0.0
        for q in range(run_ptr[i], run_ptr[i + 1]):
            p0 = run_start[q]
            c0 = cols[p0]
            for t in range(run_len[q]):
                acc += vals[p0 + t] * x[c0 + t]
        y[i] = acc


@numba.njit(cache=True, fastmath=True)
def _mv_general_pair(run_ptr, run_start, run_len, cols, vals, xr, xi, yr, yi):
    for i in range(run_ptr.size - 1):
        ar = 0.0
        ai = 0.0
        for q in range(run_ptr[i], run_ptr[i + 1]):
            p0 = run_start[q]
            c0 = cols[p0]
            for t in range(run_len[q]):
                v = vals[p0 + t]
                ar += v * xr[c0 + t]
                ai += v * xi[c0 + t]
        yr[i] = ar
        yi[i] = ai


@numba.njit(cache=True, fastmath=True)
def _mv_symmetric(run_ptr, run_start, run_len, cols, vals, x, y):
    y[:] = 0.0
    for i in range(run_ptr.size - 1):
        xi = x[i]
        acc = 0.0
        for q in range(run_ptr[i], run_ptr[i + 1]):
            p0 = run_start[q]
            c0 = cols[p0]
            length = run_len[q]
            if c0 == i:
                acc += vals[p0] * xi
                p0 += 1
                c0 += 1
                length -= 1
            v = vals[p0 : p0 + length]
            a = x[c0 : c0 + length]
            b = y[c0 : c0 + length]
            for t in range(length):
                acc += v[t] * a[t]
                b[t] += v[t] * xi
        y[i] += acc


@numba.njit(cache=True, fastmath=True)
def _mv_symmetric_pair(run_ptr, run_start, run_len, cols, vals, xr, xi, yr, yi):
    yr[:] = 0.0
    yi[:] = 0.0
    for i in range(run_ptr.size - 1):
        xri = xr[i]
        xii = xi[i]
        ar = 0.0
        ai = 0.0
        for q in range(run_ptr[i], run_ptr[i + 1]):
            p0 = run_start[q]
            c0 = cols[p0]
            length = run_len[q]
            if c0 == i:
                d = vals[p0]
                ar += d * xri
                ai += d * xii
                p0 += 1
                c0 += 1
                length -= 1
            v = vals[p0 : p0 + length]
            a = xr[c0 : c0 + length]
            b = xi[c0 : c0 + length]
            ya = yr[c0 : c0 + length]
            yb = yi[c0 : c0 + length]
            for t in range(length):
                ar += v[t] * a[t]
                ai += v[t] * b[t]
                ya[t] += v[t] * xri
                yb[t] += v[t] * xii
        yr[i] += ar
        yi[i] += ai


@dataclass(frozen=True, eq=False)
class SparseOperator:
    rows: int
    cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    symmetric: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        off = np.ascontiguousarray(self.row_offsets, dtype=np.int64)
        ind = np.ascontiguousarray(self.col_indices, dtype=np.int32)
        val = np.ascontiguousarray(self.values, dtype=np.float64)
        if off.shape != (self.rows + 1,) or off[0] != 0 or off[-1] != ind.size or ind.size != val.size:
            raise ValueError("inconsistent CSR arrays")
        if np.any(np.diff(off) < 0):
            raise ValueError("row offsets must be nondecreasing")
        if ind.size and (ind.min() < 0 or ind.max() >= self.cols):
            raise ValueError("column index out of bounds")
        if self.symmetric and self.rows != self.cols:
            raise ValueError("a symmetric operator must be square")
        for name, a in (("row_offsets", off), ("col_indices", ind), ("values", val)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @classmethod
    def from_scipy(cls, matrix, symmetric: bool = False, meta: dict | None = None) -> "SparseOperator":
        """Wrap a scipy matrix; with ``symmetric`` only its upper triangle is kept."""
        m = sp.triu(matrix, format="csr") if symmetric else sp.csr_matrix(matrix)
        m.sum_duplicates()
        m.sort_indices()
        return cls(m.shape[0], m.shape[1], m.indptr, m.indices, m.data, symmetric, dict(meta or {}))

    @property
    def nnz(self) -> int:
        """Stored entries (upper triangle only for symmetric storage)."""
        return self.values.size

    @cached_property
    def _runs(self):
        return _find_runs(self.row_offsets, self.col_indices)

    def to_scipy(self) -> sp.csr_matrix:
        """The full matrix as scipy CSR (both triangles for symmetric storage)."""
        m = sp.csr_matrix((self.values, self.col_indices, self.row_offsets), shape=(self.rows, self.cols))
        if self.symmetric:
            m = (m + sp.triu(m, k=1, format="csr").T).tocsr()
            m.sort_indices()
        return m

    def row_nnz(self) -> np.ndarray:
        return np.diff(self.to_scipy().indptr)

    def matvec(self, x) -> np.ndarray:
        x = np.asarray(x)
        if x.shape != (self.cols,):
            raise ValueError(f"expected a vector of length {self.cols}, got shape {x.shape}")
        runs = self._runs
        if np.iscomplexobj(x):
            xr = np.ascontiguousarray(x.real, dtype=np.float64)
            xi = np.ascontiguousarray(x.imag, dtype=np.float64)
            yr = np.empty(self.rows)
            yi = np.empty(self.rows)
            kernel = _mv_symmetric_pair if self.symmetric else _mv_general_pair
            kernel(*runs, self.col_indices, self.values, xr, xi, yr, yi)
            return yr + 1j * yi
        xr = np.ascontiguousarray(x, dtype=np.float64)
        y = np.empty(self.rows)
        kernel = _mv_symmetric if self.symmetric else _mv_general
        kernel(*runs, self.col_indices, self.values, xr, y)
        return y

    __matmul__ = matvec


def save_sparse(op: SparseOperator, path) -> None:
    meta = {k: op.meta.get(k, 0) for k in META_KEYS}
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, op.rows, op.cols, op.nnz, int(op.symmetric)))
        fh.write(op.row_offsets.astype("<u8").tobytes())
        fh.write(op.col_indices.astype("<u4").tobytes())
        fh.write(op.values.astype("<f8").tobytes())
        fh.write(_TRAILER.pack(int(meta["n"]), int(meta["m_sp"]), float(meta["tau"]),
                               int(meta["n_angles"]), int(meta["d"]), int(meta["r"])))
    tmp.replace(path)


def load_sparse(path, expect: dict | None = None) -> SparseOperator:
    """Read an operator; ``expect`` lists metadata that must match (else DimensionMismatchError)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise SparseFormatError(f"{path}: truncated header")
    magic, version, rows, cols, nnz, sym = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise SparseFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise SparseFormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 8 * (rows + 1) + 12 * nnz + _TRAILER.size
    if len(raw) != expected:
        raise SparseFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    pos = _HEADER.size
    off = np.frombuffer(raw, "<u8", rows + 1, pos).astype(np.int64)
    pos += 8 * (rows + 1)
    ind = np.frombuffer(raw, "<u4", nnz, pos).astype(np.int32)
    pos += 4 * nnz
    val = np.frombuffer(raw, "<f8", nnz, pos).copy()
    pos += 8 * nnz
    meta = dict(zip(META_KEYS, _TRAILER.unpack_from(raw, pos)))
    for key, want in (expect or {}).items():
        have = meta[key]
        if (abs(have - want) > 1e-12 * abs(want)) if key == "tau" else have != want:
            raise DimensionMismatchError(f"{path}: cached {key}={have}, requested {want}")
    try:
        return SparseOperator(rows, cols, off, ind, val, bool(sym), meta)
    except ValueError as exc:
        raise SparseFormatError(f"{path}: {exc}") from exc
