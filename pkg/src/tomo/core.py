"""Image helpers shared across the package: phantom, error metric and image files.

Images are plain square ``float64`` numpy arrays indexed ``[row, col]``.  Pixel
``(i, j)`` is centred at ``x = -1 + (2j + 1)/n``, ``y = -1 + (2i + 1)/n``.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

SIDECAR_MAGIC = b"TOMOIMG1"
SIDECAR_SUFFIX = ".f64"


class ImageFormatError(ValueError):
    """Raised when an image or sidecar file cannot be parsed."""


@dataclass(frozen=True)
class Ellipse:
    center_x: float
    center_y: float
    semi_axis_a: float
    semi_axis_b: float
    rotation: float
    intensity: float

    def __post_init__(self):
        if not (self.semi_axis_a > 0 and self.semi_axis_b > 0):
            raise ValueError("ellipse semi-axes must be positive")
        if not -np.pi <= self.rotation <= np.pi:
            raise ValueError("ellipse rotation must lie in [-pi, pi]")

    def contains(self, x, y):
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        dx = np.asarray(x) - self.center_x
        dy = np.asarray(y) - self.center_y
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (u / self.semi_axis_a) ** 2 + (v / self.semi_axis_b) ** 2 <= 1.0


def shepp_logan_ellipses() -> list[Ellipse]:
    """The ten ellipses of the original Shepp-Logan head phantom."""
    text = resources.files("tomo.data").joinpath("shepp_logan.csv").read_text()
    rows = csv.reader(line for line in text.splitlines() if line and not line.startswith("#"))
    out = []
    for intensity, a, b, cx, cy, rot in rows:
        out.append(Ellipse(float(cx), float(cy), float(a), float(b), np.deg2rad(float(rot)), float(intensity)))
    return out


def pixel_centers(n: int):
    """Return ``(x, y)`` coordinate arrays of shape (n, n) for the pixel centres."""
    c = -1.0 + (2.0 * np.arange(n) + 1.0) / n
    y, x = np.meshgrid(c, c, indexing="ij")
    return x, y


def generate_shepp_logan(n: int) -> np.ndarray:
    if n < 4:
        raise ValueError(f"phantom size must be at least 4, got {n}")
    x, y = pixel_centers(n)
    img = np.zeros((n, n))
    for e in shepp_logan_ellipses():
        img[e.contains(x, y)] += e.intensity
    return img


def check_image(image, name="image") -> np.ndarray:
    a = np.asarray(image)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise ValueError(f"{name} must be a square 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def relative_l1_error(candidate, reference) -> float:
    """``||candidate - reference||_1 / ||reference||_1``."""
    c = np.asarray(candidate)
    r = np.asarray(reference)
    if c.shape != r.shape:
        raise ValueError(f"shape mismatch: {c.shape} vs {r.shape}")
    denom = np.abs(r).sum()
    if denom == 0:
        raise ValueError("degenerate reference: all-zero image")
    return float(np.abs(c - r).sum() / denom)


def _sidecar_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + SIDECAR_SUFFIX)


def write_image(image, path) -> Path:
    """Write a 16-bit P5 graymap for viewing plus an exact float64 sidecar.

    The graymap rescales ``[min, max]`` to ``[0, 65535]``; a constant image maps
    to all zeros.  Returns the sidecar path.
    """
    a = check_image(image).astype(np.float64)
    n = a.shape[0]
    path = Path(path)
    lo, hi = a.min(), a.max()
    if hi > lo:
        scaled = np.rint((a - lo) / (hi - lo) * 65535.0)
    else:
        scaled = np.zeros_like(a)
    # row 0 is y = -1, so flip to put +y at the top of the picture
    pix = scaled[::-1].astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{n} {n}\n65535\n".encode("ascii"))
        fh.write(pix.tobytes())
    side = _sidecar_path(path)
    with open(side, "wb") as fh:
        fh.write(SIDECAR_MAGIC)
        fh.write(struct.pack("<I", n))
        fh.write(a.astype("<f8").tobytes())
    return side


def read_image(path) -> np.ndarray:
    """Read an image written by :func:`write_image`.

    ``path`` may name either the graymap or the sidecar; exact values come from
    the sidecar when it exists, otherwise from the 16-bit graymap samples.
    """
    path = Path(path)
    if path.suffix == SIDECAR_SUFFIX:
        return _read_sidecar(path)
    side = _sidecar_path(path)
    if side.exists():
        return _read_sidecar(side)
    return _read_pgm(path)


def _read_sidecar(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:8] != SIDECAR_MAGIC:
        raise ImageFormatError(f"{path}: bad sidecar magic")
    (n,) = struct.unpack("<I", raw[8:12])
    expected = 12 + 8 * n * n
    if n == 0 or len(raw) != expected:
        raise ImageFormatError(f"{path}: expected {expected} bytes for n={n}, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f8", offset=12).reshape(n, n).astype(np.float64)


def _read_pgm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise ImageFormatError(f"{path}: not a binary P5 graymap")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError(f"{path}: malformed header") from exc
    if w != h or maxval != 65535:
        raise ImageFormatError(f"{path}: expected square 16-bit image, got {w}x{h} maxval {maxval}")
    body = raw[pos:]
    if len(body) != 2 * w * h:
        raise ImageFormatError(f"{path}: expected {2 * w * h} sample bytes, found {len(body)}")
    return np.frombuffer(body, dtype=">u2").reshape(h, w)[::-1].astype(np.float64)
