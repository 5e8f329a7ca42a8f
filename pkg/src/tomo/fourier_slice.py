"""Parallel-beam geometry in the Fourier domain.

Each measured angle contributes one radial line of frequencies through the
origin.  Slice data are the image's Fourier sums on those lines, evaluated
with a type-2 NUFFT; the adjoint is the matching type-1 NUFFT.

The image array doubles as the centred coefficient array of the NUFFT, so
pixel ``(i, j)`` carries the phase ``exp(i (w_y (i - n/2) + w_x (j - n/2)))``
and the image centre is the phase origin.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from . import nufft
from .nufft import NufftParams, SpreadingPlan

SLICE_MAGIC = b"TOMOSLC1"


@dataclass(frozen=True, eq=False)
class AngleSet:
    angles: np.ndarray
    subsample_d: int = 1

    def __post_init__(self):
        a = np.asarray(self.angles, dtype=np.float64)
        if a.ndim != 1 or a.size < 2:
            raise ValueError("an angle set needs at least two angles")
        if np.any(np.diff(a) <= 0) or a[0] < 0 or a[-1] >= np.pi:
            raise ValueError("angles must be strictly increasing within [0, pi)")
        object.__setattr__(self, "angles", a)

    def __len__(self):
        return self.angles.size


def angle_count(n_x: int, d: int = 1) -> int:
    return int(np.floor(n_x * np.pi / (4 * d) + 0.5))


def make_angle_set(n_x: int, d: int = 1) -> AngleSet:
    """``round(n_x pi / (4 d))`` evenly spaced angles ``a pi / count``."""
    if n_x < 4:
        raise ValueError(f"n_x must be at least 4, got {n_x}")
    if d < 1:
        raise ValueError(f"d must be positive, got {d}")
    count = angle_count(n_x, d)
    if count < 2:
        raise ValueError(f"angle count {count} for n_x={n_x}, d={d} is below 2")
    return AngleSet(np.arange(count) * np.pi / count, subsample_d=d)


@dataclass(frozen=True, eq=False)
class SliceGrid:
    """Angle-major frequency layout: for each angle, ``n`` radii ``-n/2 .. n/2-1``.

    ``kx``/``ky`` are in integer (cycles per image) units; ``points`` holds the
    matching angular frequencies ``2 pi k / n`` in NUFFT axis order
    ``(row, col) = (y, x)``, reduced into ``[0, 2 pi)``.
    """

    angle_set: AngleSet
    n: int
    kx: np.ndarray
    ky: np.ndarray
    points: np.ndarray

    @property
    def count(self) -> int:
        return self.kx.size

    @property
    def n_angles(self) -> int:
        return len(self.angle_set)


def slice_points(angle_set: AngleSet, n: int) -> SliceGrid:
    if n % 2:
        raise ValueError(f"image side must be even, got {n}")
    theta = angle_set.angles
    radii = nufft.frequencies(n).astype(float)
    kx = np.outer(np.cos(theta), radii).ravel()
    ky = np.outer(np.sin(theta), radii).ravel()
    pts = nufft.reduce_points(np.stack([ky, kx], axis=1) * (2.0 * np.pi / n))
    for a in (kx, ky, pts):
        a.setflags(write=False)
    return SliceGrid(angle_set, n, kx, ky, pts)


@dataclass(frozen=True, eq=False)
class Geometry:
    """A slice grid bundled with NUFFT parameters and its spreading plan."""

    grid: SliceGrid
    params: NufftParams

    def __post_init__(self):
        if self.params.n != self.grid.n:
            raise ValueError(f"NUFFT size {self.params.n} does not match grid size {self.grid.n}")

    @cached_property
    def plan(self) -> SpreadingPlan:
        return nufft.plan_spreading(self.grid.points, self.params)

    @property
    def n(self) -> int:
        return self.grid.n


def make_geometry(n: int, d: int = 1, preset="digits6") -> Geometry:
    return Geometry(slice_points(make_angle_set(n, d), n), nufft.make_params(preset, n))


@dataclass(frozen=True, eq=False)
class SliceData:
    grid: SliceGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.complex128)
        if v.shape != (self.grid.count,):
            raise ValueError(f"expected {self.grid.count} slice values, got shape {v.shape}")
        object.__setattr__(self, "values", v)

    def blocks(self) -> np.ndarray:
        """Values reshaped to ``(n_angles, n)``."""
        return self.values.reshape(self.grid.n_angles, self.grid.n)


def forward_transform(image, geometry: Geometry) -> SliceData:
    """Image to slice data (type-2 NUFFT on the slice points)."""
    img = np.asarray(image)
    if img.shape != (geometry.n, geometry.n):
        raise ValueError(f"image shape {img.shape} does not match grid side {geometry.n}")
    return SliceData(geometry.grid, nufft.nufft_type2(geometry.plan, img))


def adjoint_transform(data: SliceData, geometry: Geometry) -> np.ndarray:
    """Slice data to a complex image; exact adjoint of :func:`forward_transform`."""
    values = data.values if isinstance(data, SliceData) else np.asarray(data)
    if values.shape != (geometry.grid.count,):
        raise ValueError(f"expected {geometry.grid.count} slice values, got shape {values.shape}")
    return nufft.nufft_type1(geometry.plan, values)


def synthesize_data(phantom, geometry: Geometry, noise: float = 0.0, seed: int | None = None) -> SliceData:
    """Slice data of ``phantom`` plus optional complex white noise (std ``noise`` per component)."""
    if noise < 0:
        raise ValueError(f"noise level must be nonnegative, got {noise}")
    clean = forward_transform(phantom, geometry)
    if noise == 0:
        return clean
    rng = np.random.default_rng(seed)
    shape = clean.values.shape
    eps = noise * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    return SliceData(clean.grid, clean.values + eps)


def save_slice_data(data: SliceData, path) -> None:
    g = data.grid
    with open(path, "wb") as fh:
        fh.write(SLICE_MAGIC)
        fh.write(struct.pack("<II", g.n, g.n_angles))
        fh.write(g.angle_set.angles.astype("<f8").tobytes())
        fh.write(data.values.astype("<c16").tobytes())


def load_slice_data(path) -> SliceData:
    raw = Path(path).read_bytes()
    if raw[:8] != SLICE_MAGIC or len(raw) < 16:
        raise ValueError(f"{path}: not a slice-data file")
    n, count = struct.unpack("<II", raw[8:16])
    expected = 16 + 8 * count + 16 * count * n
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    angles = np.frombuffer(raw, dtype="<f8", count=count, offset=16).copy()
    values = np.frombuffer(raw, dtype="<c16", offset=16 + 8 * count).copy()
    grid = slice_points(AngleSet(angles), n)
    return SliceData(grid, values)
