"""Synthetic scenes: atmospheres, emissivity libraries, target injection and
Matern-5/2 Gaussian-process augmentation of emissivity spectra."""

from __future__ import annotations

import functools
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cube import HsiCube, WhiteningModel, fit_whitening, read_cube, whiten, write_cube
from .errors import ConfigError, DomainError, FormatError, NumericError, ShapeError
from .seeding import derive_seed
from .spectra import (
    AtmosphereParams,
    EmissivitySpectrum,
    NormalizedEmissivity,
    WavelengthGrid,
    normalize,
    planck_radiance,
    propagate,
    softclamp,
    target_radiance,
    zscore_rows,
)

__all__ = [
    "Matern52Params",
    "LibraryEntry",
    "TrainingExample",
    "SyntheticSceneSpec",
    "Scene",
    "SyntheticDataset",
    "matern52_covariance",
    "sample_gp",
    "augment_emissivity",
    "augment_batch",
    "gen_atmosphere",
    "gen_library",
    "build_scene",
    "build_dataset",
]

DEFAULT_LENGTHSCALE = 0.4
SENSOR_NOISE_FRACTION = 0.003
LIBRARY_FORMAT = "specret-library"
SCENE_FORMAT = "specret-scene"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Matern52Params:
    lengthscale: float = DEFAULT_LENGTHSCALE
    variance: float = 1.0

    def __post_init__(self):
        if not (self.lengthscale > 0 and self.variance > 0):
            raise DomainError("Matern lengthscale and variance must be positive")


@dataclass(frozen=True, eq=False)
class LibraryEntry:
    name: str
    emissivity: EmissivitySpectrum


@dataclass(frozen=True, eq=False)
class TrainingExample:
    """One injected pixel with its ground truth.

    ``radiance`` equals ``propagate(emissivity, atm, alpha, background)``
    exactly (it is computed that way); the cube stores the float32 rounding.
    """

    radiance: np.ndarray
    whitened: np.ndarray
    emissivity: EmissivitySpectrum
    normalized: NormalizedEmissivity
    alpha: float
    atm_ref: str
    cube_ref: str
    background: np.ndarray
    pixel: tuple[int, int]
    entry_name: str


@dataclass(frozen=True)
class SyntheticSceneSpec:
    n_cubes: int = 8
    cube_width: int = 32
    cube_height: int = 32
    n_bands: int = 32
    temperature_range_K: tuple[float, float] = (280.0, 320.0)
    alpha_range: tuple[float, float] = (0.1, 1.0)
    library_size: int = 64
    seed: int = 0
    target_fraction: float = 0.25
    lambda_min: float = 7.56
    lambda_max: float = 13.16

    def __post_init__(self):
        lo, hi = self.alpha_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigError(f"alpha_range must lie inside [0, 1], got {self.alpha_range}")
        tlo, thi = self.temperature_range_K
        if not 0 < tlo <= thi:
            raise ConfigError("temperature range must be positive and ordered")
        if self.n_cubes < 0 or self.cube_width < 1 or self.cube_height < 1:
            raise ConfigError("cube counts and sizes must be positive")
        if self.library_size < 1:
            raise ConfigError("library_size must be >= 1")
        if not 0.0 <= self.target_fraction <= 1.0:
            raise ConfigError("target_fraction must lie in [0, 1]")

    @property
    def grid(self) -> WavelengthGrid:
        return WavelengthGrid(self.n_bands, self.lambda_min, self.lambda_max)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["temperature_range_K"] = list(self.temperature_range_K)
        d["alpha_range"] = list(self.alpha_range)
        return d


def matern52_covariance(grid: WavelengthGrid, p: Matern52Params) -> np.ndarray:
    lam = grid.values
    d = np.abs(lam[:, None] - lam[None, :])
    s = np.sqrt(5.0) * d / p.lengthscale
    return p.variance * (1.0 + s + s * s / 3.0) * np.exp(-s)


@functools.lru_cache(maxsize=64)
def _unit_factor(grid: WavelengthGrid, lengthscale: float) -> np.ndarray:
    k = matern52_covariance(grid, Matern52Params(lengthscale, 1.0))
    n = k.shape[0]
    jitter = 1e-12
    while jitter <= 1e-6 * (1 + 1e-9):
        try:
            chol = np.linalg.cholesky(k + jitter * np.eye(n))
            chol.flags.writeable = False
            return chol
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NumericError(f"Matern covariance not factorisable (lengthscale {lengthscale})")


def gp_factor(grid: WavelengthGrid, p: Matern52Params) -> np.ndarray:
    """Lower Cholesky factor of the jittered Matern covariance."""
    return np.sqrt(p.variance) * _unit_factor(grid, float(p.lengthscale))


def sample_gp(grid: WavelengthGrid, p: Matern52Params, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return gp_factor(grid, p) @ rng.standard_normal(grid.n_bands)


def _restandardized(shape_plus_gp: np.ndarray) -> np.ndarray:
    z, _, _ = zscore_rows(shape_plus_gp)
    return z


def augment_emissivity(eps: EmissivitySpectrum, p: Matern52Params,
                       seed: int) -> tuple[EmissivitySpectrum, NormalizedEmissivity]:
    """Perturb an emissivity's normalised shape with a GP draw.

    normalise -> add GP draw -> re-standardise -> rescale by the original
    (mean, sdev) -> softclamp(0, 1) -> renormalise. The re-standardisation
    keeps the per-sample mean and sdev of the batch unchanged (up to
    clamping). A constant input has no shape to perturb and is returned as is.
    """
    ne = normalize(eps)
    if ne.constant:
        star = EmissivitySpectrum(eps.grid, softclamp(np.full(eps.grid.n_bands, ne.mean)))
        return star, normalize(star)
    g = sample_gp(eps.grid, p, seed)
    shape = _restandardized(ne.values + g)
    star = EmissivitySpectrum(eps.grid, softclamp(shape * ne.sdev + ne.mean))
    return star, normalize(star)


def augment_batch(eps: np.ndarray, grid: WavelengthGrid, p: Matern52Params,
                  seeds) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise ``augment_emissivity`` for a (K, r) batch, one seed per row.

    Returns (eps_star, eps_star_normalized, mean, sdev) as arrays.
    """
    eps = np.asarray(eps, dtype=np.float64)
    if eps.ndim != 2 or eps.shape[1] != grid.n_bands:
        raise ShapeError("augment_batch expects a (K, r) batch on the grid")
    factor = gp_factor(grid, p)
    noise = np.stack([np.random.default_rng(s).standard_normal(grid.n_bands) for s in seeds])
    g = noise @ factor.T
    z, mean, sdev = zscore_rows(eps)
    shape = _restandardized(z + g)
    const = sdev == 0.0
    shape[const] = 0.0
    star = softclamp(shape * sdev[:, None] + mean[:, None])
    zs, ms, ss = zscore_rows(star)
    return star, zs, ms, ss


def _smooth_unit_gp(grid: WavelengthGrid, lengthscale: float, rng) -> np.ndarray:
    return _unit_factor(grid, float(lengthscale)) @ rng.standard_normal(grid.n_bands)


def gen_atmosphere(grid: WavelengthGrid, temperature_K: float, seed: int, *,
                   tau: np.ndarray | None = None) -> AtmosphereParams:
    """A smooth synthetic LWIR atmosphere.

    Transmission is a slowly varying base with a few Gaussian absorption
    notches and an opaque region at the short-wavelength end; path radiance
    is (1 - tau) times a scaled black body at an air temperature 0-30 K below
    the surface. Passing ``tau`` overrides the generated transmission.
    """
    rng = np.random.default_rng(seed)
    lam = grid.values
    x = (lam - grid.lambda_min) / (grid.lambda_max - grid.lambda_min)
    base = 0.86 + rng.uniform(-0.06, 0.06) - 0.08 * x**2
    base = base + 0.03 * _smooth_unit_gp(grid, 1.0, rng)
    n_notch = int(rng.integers(2, 6))
    notches = []
    for _ in range(n_notch):
        c = rng.uniform(grid.lambda_min + 0.5, grid.lambda_max)
        depth = rng.uniform(0.05, 0.35)
        width = rng.uniform(0.05, 0.25)
        base = base - depth * np.exp(-0.5 * ((lam - c) / width) ** 2)
        notches.append([float(c), float(depth), float(width)])
    edge = rng.uniform(8.0, 8.6)
    deep = rng.uniform(0.5, 0.9)
    base = base * (1.0 - deep / (1.0 + np.exp((lam - edge) / 0.15)))
    t_atm = float(temperature_K - rng.uniform(0.0, 30.0))
    c_u = float(rng.uniform(0.3, 1.0))
    c_d = float(rng.uniform(0.3, 1.0))
    tau_v = softclamp(base, 0.0, 1.0) if tau is None else np.asarray(tau, dtype=np.float64)
    b_atm = planck_radiance(t_atm, grid).values
    meta = {"T_atm": t_atm, "c_u": c_u, "c_d": c_d, "notches": notches,
            "edge_um": float(edge), "edge_depth": float(deep)}
    return AtmosphereParams.from_temperature(
        grid, temperature_K, tau_v, (1.0 - tau_v) * c_u * b_atm, (1.0 - tau_v) * c_d * b_atm, meta
    )


def gen_library(m: int, grid: WavelengthGrid, seed: int, prefix: str = "mat") -> list[LibraryEntry]:
    """Synthetic emissivity library skewed toward bright, nearly flat spectra."""
    if m < 1:
        raise DomainError("library size must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(m):
        base = 0.98 - 0.28 * rng.uniform() ** 2
        sigma = 0.002 * 75.0 ** (rng.uniform() ** 2)
        ell = rng.uniform(0.3, 1.2)
        values = softclamp(base + sigma * _smooth_unit_gp(grid, ell, rng))
        out.append(LibraryEntry(f"{prefix}-{i:04d}", EmissivitySpectrum(grid, values)))
    return out


@dataclass(eq=False)
class Scene:
    cube: HsiCube
    atm: AtmosphereParams
    examples: list[TrainingExample]
    whitening: WhiteningModel | None = None

    def ensure_whitening(self) -> WhiteningModel:
        if self.whitening is None:
            self.whitening = fit_whitening(self.cube)
        return self.whitening


def build_scene(spec: SyntheticSceneSpec, library: list[LibraryEntry], seed: int,
                cube_id: str = "cube-000") -> tuple[HsiCube, list[TrainingExample], AtmosphereParams]:
    """Background mixture scene with library targets injected at random strengths."""
    if not library:
        raise DomainError("library must be nonempty")
    grid = spec.grid
    if library[0].emissivity.grid != grid:
        raise ShapeError("library grid does not match the scene spec")
    rng = np.random.default_rng(seed)
    temperature = rng.uniform(*spec.temperature_range_K)
    atm = gen_atmosphere(grid, temperature, derive_seed(seed, "atm"))
    n_px = spec.cube_width * spec.cube_height

    n_bg = int(rng.integers(2, 5))
    bg_mats = np.stack([e.emissivity.values
                        for e in gen_library(n_bg, grid, derive_seed(seed, "bg"), "bg")])
    weights = rng.dirichlet(np.ones(n_bg), size=n_px)
    clean = target_radiance(weights @ bg_mats, atm)
    noise_sd = SENSOR_NOISE_FRACTION * float(clean.mean())
    bg = clean + noise_sd * rng.standard_normal(clean.shape)

    n_t = int(round(spec.target_fraction * n_px))
    idx = np.sort(rng.choice(n_px, size=n_t, replace=False)) if n_t else np.zeros(0, int)
    which = rng.integers(0, len(library), size=n_t)
    alphas = rng.uniform(*spec.alpha_range, size=n_t)
    pixels = bg.copy()
    eps = np.stack([library[j].emissivity.values for j in which]) if n_t else np.zeros((0, grid.n_bands))
    radiance = propagate(eps, atm, alphas, bg[idx]) if n_t else eps
    pixels[idx] = radiance
    data = pixels.astype(np.float32).astype(np.float64).reshape(spec.cube_width, spec.cube_height, -1)
    cube = HsiCube(cube_id, grid, data, {"temperature_K": f"{temperature:.6f}",
                                         "noise_sd": f"{noise_sd:.6e}",
                                         "n_background_materials": str(n_bg)})
    wm = fit_whitening(cube)
    lw = whiten(radiance, wm) if n_t else radiance
    examples = []
    for k in range(n_t):
        entry = library[which[k]]
        examples.append(TrainingExample(
            radiance=radiance[k], whitened=lw[k], emissivity=entry.emissivity,
            normalized=normalize(entry.emissivity), alpha=float(alphas[k]), atm_ref=cube_id,
            cube_ref=cube_id, background=bg[idx[k]],
            pixel=tuple(int(v) for v in np.unravel_index(idx[k], (spec.cube_width, spec.cube_height))),
            entry_name=entry.name,
        ))
    return cube, examples, atm


@dataclass(eq=False)
class SyntheticDataset:
    spec: SyntheticSceneSpec
    library: list[LibraryEntry]
    scenes: list[Scene] = field(default_factory=list)

    @property
    def grid(self) -> WavelengthGrid:
        return self.spec.grid

    def library_by_name(self) -> dict[str, LibraryEntry]:
        return {e.name: e for e in self.library}


def build_dataset(spec: SyntheticSceneSpec) -> SyntheticDataset:
    library = gen_library(spec.library_size, spec.grid, derive_seed(spec.seed, "library"))
    ds = SyntheticDataset(spec, library)
    for i in range(spec.n_cubes):
        cube_id = f"cube-{i:03d}"
        cube, examples, atm = build_scene(spec, library, derive_seed(spec.seed, "cube", i), cube_id)
        ds.scenes.append(Scene(cube, atm, examples))
    return ds


# -- files -----------------------------------------------------------------

def library_to_json(library: list[LibraryEntry]) -> dict:
    grid = library[0].emissivity.grid
    return {"format": LIBRARY_FORMAT, "version": FORMAT_VERSION, "grid": grid.to_dict(),
            "entries": [{"name": e.name, "values": e.emissivity.values.tolist()} for e in library]}


def library_from_json(doc: dict) -> list[LibraryEntry]:
    if doc.get("format") != LIBRARY_FORMAT or doc.get("version") != FORMAT_VERSION:
        raise FormatError(f"not a version-{FORMAT_VERSION} library file")
    grid = WavelengthGrid.from_dict(doc["grid"])
    names = [e["name"] for e in doc["entries"]]
    if len(set(names)) != len(names):
        raise FormatError("library entry names must be unique")
    return [LibraryEntry(e["name"], EmissivitySpectrum(grid, e["values"])) for e in doc["entries"]]


def write_library(path, library: list[LibraryEntry]) -> None:
    _write_json(Path(path), library_to_json(library))


def read_library(path) -> list[LibraryEntry]:
    return library_from_json(json.loads(Path(path).read_text()))


def _write_json(path: Path, doc) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, sort_keys=True, indent=1))
    tmp.replace(path)


def scene_sidecar(scene: Scene, config_hash: str = "") -> dict:
    return {
        "format": SCENE_FORMAT,
        "version": FORMAT_VERSION,
        "cube_id": scene.cube.id,
        "cube_file": f"{scene.cube.id}.hsic",
        "config_hash": config_hash,
        "metadata": scene.cube.metadata,
        "atmosphere": scene.atm.to_dict(),
        "examples": [
            {"pixel": list(ex.pixel), "alpha": ex.alpha, "entry": ex.entry_name,
             "emissivity": ex.emissivity.values.tolist(), "radiance": ex.radiance.tolist(),
             "background": ex.background.tolist()}
            for ex in scene.examples
        ],
    }


def write_dataset(root, ds: SyntheticDataset, config_hash: str = "") -> dict[str, str]:
    """Write library, cubes and sidecars under ``root``; returns {relative path: sha256}."""
    root = Path(root)
    (root / "cubes").mkdir(parents=True, exist_ok=True)
    write_library(root / "library.json", ds.library)
    _write_json(root / "spec.json", {"format": "specret-synth-spec", "version": FORMAT_VERSION,
                                     "spec": ds.spec.to_dict(), "config_hash": config_hash})
    for sc in ds.scenes:
        write_cube(root / "cubes" / f"{sc.cube.id}.hsic", sc.cube)
        _write_json(root / "cubes" / f"{sc.cube.id}.json", scene_sidecar(sc, config_hash))
    hashes = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            hashes[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return hashes


def read_dataset(root) -> SyntheticDataset:
    root = Path(root)
    spec_doc = json.loads((root / "spec.json").read_text())
    if spec_doc.get("version") != FORMAT_VERSION:
        raise FormatError("unsupported dataset version")
    sd = dict(spec_doc["spec"])
    sd["temperature_range_K"] = tuple(sd["temperature_range_K"])
    sd["alpha_range"] = tuple(sd["alpha_range"])
    spec = SyntheticSceneSpec(**sd)
    library = read_library(root / "library.json")
    by_name = {e.name: e for e in library}
    ds = SyntheticDataset(spec, library)
    for side in sorted((root / "cubes").glob("*.json")):
        doc = json.loads(side.read_text())
        if doc.get("format") != SCENE_FORMAT or doc.get("version") != FORMAT_VERSION:
            raise FormatError(f"{side.name}: not a version-{FORMAT_VERSION} scene sidecar")
        cube = read_cube(root / "cubes" / doc["cube_file"], doc["cube_id"])
        cube = HsiCube(cube.id, cube.grid, cube.data, dict(doc.get("metadata", {})))
        atm = AtmosphereParams.from_dict(doc["atmosphere"])
        scene = Scene(cube, atm, [])
        wm = scene.ensure_whitening()
        for e in doc["examples"]:
            eps = EmissivitySpectrum(cube.grid, e["emissivity"])
            L = np.asarray(e["radiance"], dtype=np.float64)
            name = e["entry"]
            if name in by_name and not np.array_equal(by_name[name].emissivity.values, eps.values):
                raise FormatError(f"example emissivity disagrees with library entry {name}")
            scene.examples.append(TrainingExample(
                radiance=L, whitened=whiten(L, wm), emissivity=eps, normalized=normalize(eps),
                alpha=float(e["alpha"]), atm_ref=cube.id, cube_ref=cube.id,
                background=np.asarray(e["background"], dtype=np.float64),
                pixel=tuple(e["pixel"]), entry_name=name))
        ds.scenes.append(scene)
    return ds
