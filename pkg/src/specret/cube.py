"""Hyperspectral cubes, robust background whitening and pixel-set sampling.

Binary cube layout (little endian)::

    b"HSIC"  u16 version  u32 N  u32 M  u32 r  f64 lambda_min  f64 lambda_max
    N*M*r float32 values, row-major over (row, col, band)
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError, ShapeError
from .spectra import WavelengthGrid

__all__ = [
    "HsiCube",
    "WhiteningModel",
    "PixelSet",
    "flatten",
    "unflatten",
    "fit_whitening",
    "whiten",
    "sample_pixel_sets",
    "write_cube",
    "read_cube",
    "cube_to_bytes",
    "cube_from_bytes",
]

CUBE_MAGIC = b"HSIC"
CUBE_VERSION = 1
_HEADER = struct.Struct("<4sHIIIdd")

EIG_FLOOR_REL = 1e-10
# absolute floor (uf^2) used when the covariance vanishes entirely
EIG_FLOOR_ABS = 1e-12
_MAHAL_RIDGE = 1e-6


@dataclass(frozen=True, eq=False)
class HsiCube:
    id: str
    grid: WavelengthGrid
    data: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ShapeError(f"cube data must be N x M x r, got shape {data.shape}")
        if data.shape[2] != self.grid.n_bands:
            raise ShapeError(f"cube has {data.shape[2]} bands, grid has {self.grid.n_bands}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ShapeError("cube must have at least one pixel")
        if not np.all(np.isfinite(data)):
            raise DomainError("cube contains non-finite radiance")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def width(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def n_pixels(self) -> int:
        return self.width * self.height


@dataclass(frozen=True, eq=False)
class WhiteningModel:
    background_mean: np.ndarray
    covariance: np.ndarray
    whitener: np.ndarray
    inlier_mask: np.ndarray
    outlier_fraction: float
    floored: bool = False


@dataclass(frozen=True, eq=False)
class PixelSet:
    cube_id: str
    spectra: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        if self.spectra.ndim != 2 or self.spectra.shape[0] == 0:
            raise ShapeError("a pixel set needs at least one spectrum")


def flatten(cube: HsiCube) -> np.ndarray:
    """(N*M, r) matrix of pixel spectra, row-major over (row, col)."""
    return cube.data.reshape(-1, cube.grid.n_bands)


def unflatten(matrix: np.ndarray, width: int, height: int) -> np.ndarray:
    matrix = np.asarray(matrix)
    if matrix.shape[0] != width * height:
        raise ShapeError(f"{matrix.shape[0]} rows cannot fill a {width}x{height} cube")
    return matrix.reshape(width, height, matrix.shape[1])


def _mean_cov(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = x.mean(axis=0)
    if x.shape[0] < 2:
        return mu, np.zeros((x.shape[1], x.shape[1]))
    xc = x - mu
    cov = xc.T @ xc / (x.shape[0] - 1)
    return mu, 0.5 * (cov + cov.T)


def fit_whitening(cube: HsiCube, outlier_fraction: float = 0.2, *,
                  max_pixels: int | None = None, seed: int = 0) -> WhiteningModel:
    """Fit the robust background mean and the symmetric whitener W = V L^-1/2 V^T.

    The outliers are the ceil(fraction * N*M) pixels farthest (Mahalanobis,
    ridge-regularised first-pass covariance) from the first-pass mean; mean
    and covariance are then recomputed on the remaining pixels. When
    ``max_pixels`` is set, the covariance is estimated from a seeded random
    subset of that many inliers.
    """
    if not 0.0 <= outlier_fraction < 1.0:
        raise DomainError("outlier_fraction must lie in [0, 1)")
    x = flatten(cube)
    n = x.shape[0]
    n_out = math.ceil(outlier_fraction * n - 1e-9)
    mask = np.ones(n, dtype=bool)
    if n_out > 0:
        mu0, cov0 = _mean_cov(x)
        r = cov0.shape[0]
        ridge = _MAHAL_RIDGE * max(np.trace(cov0) / r, EIG_FLOOR_ABS)
        chol = np.linalg.cholesky(cov0 + ridge * np.eye(r))
        y = np.linalg.solve(chol, (x - mu0).T)
        d2 = np.einsum("ij,ij->j", y, y)
        # stable sort so ties resolve by pixel order
        order = np.argsort(-d2, kind="stable")
        mask[order[:n_out]] = False
    inliers = x[mask]
    if max_pixels is not None and inliers.shape[0] > max_pixels:
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(inliers.shape[0], size=max_pixels, replace=False))
        mu, cov = _mean_cov(inliers[pick])
        mu = inliers.mean(axis=0)
    else:
        mu, cov = _mean_cov(inliers)
    lam, vecs = np.linalg.eigh(cov)
    lam_max = float(lam.max())
    floor = max(EIG_FLOOR_REL * lam_max, EIG_FLOOR_ABS)
    floored = bool(np.any(lam < floor))
    lam_f = np.maximum(lam, floor)
    w = (vecs / np.sqrt(lam_f)) @ vecs.T
    w = 0.5 * (w + w.T)
    if floored:
        cov = (vecs * lam_f) @ vecs.T
        cov = 0.5 * (cov + cov.T)
    for a in (mu, cov, w, mask):
        a.flags.writeable = False
    return WhiteningModel(mu, cov, w, mask, float(outlier_fraction), floored)


def whiten(radiance, model: WhiteningModel) -> np.ndarray:
    """(L - mean_bg) W for one spectrum or a batch of row spectra."""
    L = np.asarray(getattr(radiance, "values", radiance), dtype=np.float64)
    if L.shape[-1] != model.background_mean.shape[0]:
        raise ShapeError("radiance and whitening model are on different grids")
    return (L - model.background_mean) @ model.whitener


def sample_pixel_sets(cube: HsiCube, set_size: int = 200, count: int = 1,
                      seed: int = 0) -> list[PixelSet]:
    """Draw ``count`` pixel sets, each without replacement, deterministically from ``seed``."""
    n = cube.n_pixels
    if set_size < 1 or set_size > n:
        raise DomainError(f"set_size must lie in [1, {n}], got {set_size}")
    rng = np.random.default_rng(seed)
    x = flatten(cube)
    out = []
    for _ in range(count):
        idx = rng.permutation(n)[:set_size]
        out.append(PixelSet(cube.id, x[idx], np.stack(np.unravel_index(idx, cube.data.shape[:2]), 1)))
    return out


def cube_to_bytes(cube: HsiCube) -> bytes:
    head = _HEADER.pack(CUBE_MAGIC, CUBE_VERSION, cube.width, cube.height,
                        cube.grid.n_bands, cube.grid.lambda_min, cube.grid.lambda_max)
    return head + np.ascontiguousarray(cube.data, dtype="<f4").tobytes()


def cube_from_bytes(buf: bytes, cube_id: str = "", metadata: dict | None = None) -> HsiCube:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated cube header")
    magic, version, n, m, r, lo, hi = _HEADER.unpack_from(buf)
    if magic != CUBE_MAGIC:
        raise FormatError(f"bad cube magic {magic!r}")
    if version != CUBE_VERSION:
        raise FormatError(f"unsupported cube version {version} (expected {CUBE_VERSION})")
    expected = _HEADER.size + 4 * n * m * r
    if len(buf) != expected:
        raise FormatError(f"cube payload is {len(buf)} bytes, expected {expected}")
    data = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(n, m, r)
    return HsiCube(cube_id, WavelengthGrid(r, lo, hi), data.astype(np.float64), dict(metadata or {}))


def write_cube(path, cube: HsiCube) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(cube_to_bytes(cube))
    tmp.replace(path)


def read_cube(path, cube_id: str | None = None) -> HsiCube:
    path = Path(path)
    return cube_from_bytes(path.read_bytes(), cube_id if cube_id is not None else path.stem)
