"""Wavelength grids, spectrum containers, the Planck law and the LWIR forward model.

Wavelengths are in micrometres and radiance in microflicks
(1 uf = 1e-6 W cm^-2 sr^-1 um^-1). All arrays are float64.

The arithmetic helpers (``target_radiance``, ``propagate``, ``softclamp``)
are written against the operator protocol only, so they accept numpy arrays
and torch tensors alike; the training losses reuse them unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import DomainError, ShapeError

__all__ = [
    "H",
    "C",
    "K_B",
    "UF_PER_SI",
    "WavelengthGrid",
    "EmissivitySpectrum",
    "NormalizedEmissivity",
    "RadianceSpectrum",
    "AtmosphereParams",
    "default_grid",
    "planck_radiance",
    "target_radiance",
    "propagate",
    "softclamp",
    "normalize",
    "denormalize",
]

# CODATA 2018 exact SI values.
H = 6.626_070_15e-34  # J s
C = 299_792_458.0  # m / s
K_B = 1.380_649e-23  # J / K

# 1 W m^-2 sr^-1 m^-1 expressed in microflicks: 1 uf = 1e-6 W/(cm^2 sr um) = 1e4 SI.
UF_PER_SI = 1e-4

_C1 = 2.0 * H * C**2  # W m^2 sr^-1
_C2 = H * C / K_B  # m K

# Fraction of (hi - lo) over which softclamp bends away from the identity.
SOFTCLAMP_MARGIN = 0.02

_SPACING_RTOL = 1e-12


@dataclass(frozen=True)
class WavelengthGrid:
    """Uniform wavelength grid in micrometres."""

    n_bands: int
    lambda_min: float
    lambda_max: float

    def __post_init__(self):
        if int(self.n_bands) != self.n_bands or self.n_bands < 2:
            raise DomainError(f"n_bands must be an integer >= 2, got {self.n_bands}")
        if not (np.isfinite(self.lambda_min) and np.isfinite(self.lambda_max)):
            raise DomainError("wavelength bounds must be finite")
        if not 0 < self.lambda_min < self.lambda_max:
            raise DomainError(
                f"need 0 < lambda_min < lambda_max, got {self.lambda_min}, {self.lambda_max}"
            )

    @property
    def values(self) -> np.ndarray:
        v = np.linspace(self.lambda_min, self.lambda_max, self.n_bands)
        v.flags.writeable = False
        return v

    @property
    def spacing(self) -> float:
        return (self.lambda_max - self.lambda_min) / (self.n_bands - 1)

    def to_dict(self) -> dict:
        return {
            "n_bands": int(self.n_bands),
            "lambda_min": float(self.lambda_min),
            "lambda_max": float(self.lambda_max),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WavelengthGrid":
        return cls(int(d["n_bands"]), float(d["lambda_min"]), float(d["lambda_max"]))


def default_grid(n_bands: int = 128) -> WavelengthGrid:
    """The Mako-like LWIR grid, 7.56-13.16 um, with configurable band count."""
    return WavelengthGrid(n_bands, 7.56, 13.16)


def _as_vector(values: Any, n: int | None, what: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"{what} must be one-dimensional, got shape {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise ShapeError(f"{what} has {arr.shape[0]} bands, grid has {n}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class _Spectrum:
    grid: WavelengthGrid
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "values", _as_vector(self.values, self.grid.n_bands, type(self).__name__)
        )

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    def __len__(self):
        return self.grid.n_bands


class EmissivitySpectrum(_Spectrum):
    """Emissivity on a grid; every value lies in [0, 1]."""

    def __post_init__(self):
        super().__post_init__()
        v = self.values
        if not np.all(np.isfinite(v)) or v.min() < 0.0 or v.max() > 1.0:
            raise DomainError("emissivity values must lie in [0, 1]")


class RadianceSpectrum(_Spectrum):
    """Radiance on a grid, in microflicks."""

    def __post_init__(self):
        super().__post_init__()
        if not np.all(np.isfinite(self.values)):
            raise DomainError("radiance values must be finite")


@dataclass(frozen=True, eq=False)
class NormalizedEmissivity:
    """Z-scored emissivity shape plus the statistics needed to undo it.

    ``constant`` flags a spectrum whose standard deviation was at or below
    1e-12; its shape is all zeros and ``sdev`` is 0.
    """

    grid: WavelengthGrid
    values: np.ndarray
    mean: float
    sdev: float
    constant: bool = False

    def __post_init__(self):
        object.__setattr__(self, "values", _as_vector(self.values, self.grid.n_bands, "shape"))
        if self.sdev < 0:
            raise DomainError("sdev must be nonnegative")

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


@dataclass(frozen=True, eq=False)
class AtmosphereParams:
    """Propagation parameters {B(T), tau, L_u, L_d} plus the scene temperature.

    ``temperature_K`` is None for estimates that carry the black-body curve
    directly rather than a temperature.
    """

    tau: np.ndarray
    upwelling: np.ndarray
    downwelling: np.ndarray
    blackbody: np.ndarray
    temperature_K: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = np.asarray(self.tau).shape[0] if np.ndim(self.tau) == 1 else None
        for name in ("tau", "upwelling", "downwelling", "blackbody"):
            object.__setattr__(self, name, _as_vector(getattr(self, name), n, name))
        if np.any(self.tau < 0) or np.any(self.tau > 1):
            raise DomainError("transmission must lie in [0, 1]")
        for name in ("upwelling", "downwelling", "blackbody"):
            v = getattr(self, name)
            if not np.all(np.isfinite(v)) or np.any(v < 0):
                raise DomainError(f"{name} must be finite and nonnegative")
        if self.temperature_K is not None and not self.temperature_K > 0:
            raise DomainError("temperature must be positive")

    @property
    def n_bands(self) -> int:
        return self.tau.shape[0]

    @classmethod
    def from_temperature(cls, grid: WavelengthGrid, temperature_K: float, tau, upwelling,
                         downwelling, meta: dict | None = None) -> "AtmosphereParams":
        bb = planck_radiance(temperature_K, grid).values
        return cls(tau, upwelling, downwelling, bb, float(temperature_K), dict(meta or {}))

    def stacked(self) -> np.ndarray:
        """(4, r) array in the order tau, L_u, L_d, B."""
        return np.stack([self.tau, self.upwelling, self.downwelling, self.blackbody])

    def to_dict(self) -> dict:
        return {
            "tau": self.tau.tolist(),
            "upwelling": self.upwelling.tolist(),
            "downwelling": self.downwelling.tolist(),
            "blackbody": self.blackbody.tolist(),
            "temperature_K": self.temperature_K,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AtmosphereParams":
        return cls(d["tau"], d["upwelling"], d["downwelling"], d["blackbody"],
                   d.get("temperature_K"), dict(d.get("meta", {})))


def planck_radiance(temperature_K: float, grid: WavelengthGrid) -> RadianceSpectrum:
    """Black-body spectral radiance at ``temperature_K`` on ``grid``, in microflicks."""
    t = float(temperature_K)
    if not np.isfinite(t) or t <= 0 or t >= 10_000:
        raise DomainError(f"temperature must lie in (0, 10000) K, got {temperature_K}")
    lam = grid.values * 1e-6
    with np.errstate(over="ignore"):
        b_si = _C1 / lam**5 / np.expm1(_C2 / (lam * t))
    return RadianceSpectrum(grid, b_si * UF_PER_SI)


def _curves(atm):
    if isinstance(atm, AtmosphereParams):
        return atm.tau, atm.upwelling, atm.downwelling, atm.blackbody
    # (..., 4, r) stacked array or tensor in tau, L_u, L_d, B order
    return atm[..., 0, :], atm[..., 1, :], atm[..., 2, :], atm[..., 3, :]


def _check_same_bands(*arrays):
    sizes = {a.shape[-1] for a in arrays if hasattr(a, "shape") and len(a.shape) > 0}
    if len(sizes) > 1:
        raise ShapeError(f"spectra are on different grids (band counts {sorted(sizes)})")


def _grid_of(x):
    return getattr(x, "grid", None)


def _check_grids(*objs):
    grids = {g for g in map(_grid_of, objs) if g is not None}
    if len(grids) > 1:
        raise ShapeError("spectra are defined on different wavelength grids")


def _raw(x):
    return x.values if isinstance(x, (_Spectrum, NormalizedEmissivity)) else x


def target_radiance(eps, atm):
    """Radiance leaving a pure target pixel: tau * (eps B + (1 - eps) L_d) + L_u."""
    _check_grids(eps, atm)
    e = _raw(eps)
    tau, lu, ld, bb = _curves(atm)
    _check_same_bands(e, tau)
    return tau * (e * bb + (1.0 - e) * ld) + lu


def propagate(eps, atm, alpha, bg):
    """At-sensor radiance of a pixel mixing target and background.

    Returns ``alpha * target_radiance(eps, atm) + (1 - alpha) * bg``; ``alpha``
    may be a scalar or an array broadcasting against the band axis.
    """
    _check_grids(eps, atm, bg)
    b = _raw(bg)
    if not _is_tensor(alpha):
        a = np.asarray(alpha, dtype=np.float64)
        if not np.all(np.isfinite(a)) or np.any(a < 0) or np.any(a > 1):
            raise DomainError("alpha must lie in [0, 1]")
        if a.ndim > 0:
            alpha = a[..., None]
        else:
            alpha = float(a)
    elif alpha.ndim > 0:
        alpha = alpha[..., None]
    lt = target_radiance(eps, atm)
    _check_same_bands(lt, b)
    return alpha * lt + (1.0 - alpha) * b


def _is_tensor(x) -> bool:
    return type(x).__module__.startswith("torch")


def softclamp(x, lo: float = 0.0, hi: float = 1.0):
    """Smooth, strictly increasing map of the real line onto (lo, hi).

    Exactly the identity on [lo + m, hi - m] with m = 0.02 (hi - lo); beyond
    that the tails bend with matched value and slope and approach the bounds
    as exp(-sqrt(2 d / m)), slowly enough that far-out inputs stay strictly
    inside the open interval in double precision.
    """
    if not lo < hi:
        raise DomainError(f"softclamp needs lo < hi, got {lo}, {hi}")
    m = SOFTCLAMP_MARGIN * (hi - lo)
    a, b = lo + m, hi - m
    if _is_tensor(x):
        import torch

        t_hi = torch.clamp((x - b) / m, min=0.0)
        t_lo = torch.clamp((a - x) / m, min=0.0)
        upper = hi - m * torch.exp(1.0 - torch.sqrt(1.0 + 2.0 * t_hi))
        lower = lo + m * torch.exp(1.0 - torch.sqrt(1.0 + 2.0 * t_lo))
        return torch.where(x > b, upper, torch.where(x < a, lower, x))
    x = np.asarray(x, dtype=np.float64)
    t_hi = np.maximum((x - b) / m, 0.0)
    t_lo = np.maximum((a - x) / m, 0.0)
    upper = hi - m * np.exp(1.0 - np.sqrt(1.0 + 2.0 * t_hi))
    lower = lo + m * np.exp(1.0 - np.sqrt(1.0 + 2.0 * t_lo))
    return np.where(x > b, upper, np.where(x < a, lower, x))


def softclamp_engaged(x, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """True where softclamp departs from the identity."""
    m = SOFTCLAMP_MARGIN * (hi - lo)
    x = np.asarray(x)
    return (x < lo + m) | (x > hi - m)


_CONST_SDEV = 1e-12


def normalize(eps) -> NormalizedEmissivity:
    """Z-score a spectrum by its own mean and (population) standard deviation."""
    grid = _grid_of(eps)
    v = np.asarray(_raw(eps), dtype=np.float64)
    if grid is None:
        raise ShapeError("normalize needs a spectrum carrying its grid")
    mean = float(v.mean())
    sdev = float(v.std())
    if sdev <= _CONST_SDEV:
        return NormalizedEmissivity(grid, np.zeros_like(v), mean, 0.0, constant=True)
    return NormalizedEmissivity(grid, (v - mean) / sdev, mean, sdev)


def denormalize(ne: NormalizedEmissivity) -> EmissivitySpectrum:
    """Undo ``normalize``; the result is passed through softclamp(., 0, 1)."""
    if ne.constant:
        return EmissivitySpectrum(ne.grid, softclamp(np.full(ne.grid.n_bands, ne.mean)))
    return EmissivitySpectrum(ne.grid, softclamp(ne.values * ne.sdev + ne.mean))


def zscore_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched z-scoring along the last axis; constant rows map to zeros."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=-1)
    sdev = x.std(axis=-1)
    const = sdev <= _CONST_SDEV
    safe = np.where(const, 1.0, sdev)
    z = (x - mean[..., None]) / safe[..., None]
    z = np.where(const[..., None], 0.0, z)
    return z, mean, np.where(const, 0.0, sdev)
