"""Distribution-aware material matching and hit-rate evaluation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .epsnet import EmissivityDistribution
from .errors import DomainError, NumericError
from .spectra import normalize
from .synth import LibraryEntry

RIDGE_DELTA = 1e-6
SIGMA_FLOOR = 1e-6
# caps M0 when a candidate sits exactly on the distribution mean
MIN_DISTANCE_SUM = 1e-12
DEFAULT_ALPHA_GRID = (0.1, 0.25, 0.5, 0.75)


@dataclass(frozen=True, eq=False)
class MahalanobisFactor:
    mean: np.ndarray
    chol: np.ndarray  # lower triangular

    def distances(self, candidates: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(candidates, dtype=np.float64)) - self.mean
        y = solve_triangular(self.chol, x.T, lower=True)
        return np.sqrt(np.einsum("ij,ij->j", y, y))


def mahalanobis_factor(dist: EmissivityDistribution, space: str = "scaled",
                       ridge: bool = True) -> MahalanobisFactor:
    mean, cov = dist.moments(space)
    r = cov.shape[0]
    if ridge:
        cov = cov + RIDGE_DELTA * max(np.trace(cov) / r, 1e-300) * np.eye(r)
    try:
        c, _ = cho_factor(cov, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"{space} covariance is not positive definite") from exc
    return MahalanobisFactor(mean, np.tril(c))


def mahalanobis(dist: EmissivityDistribution, eps, space: str = "scaled", ridge: bool = True) -> float:
    """sqrt((eps - mu)^T Sigma_ridge^-1 (eps - mu)) via a Cholesky solve."""
    e = np.asarray(getattr(eps, "values", eps), dtype=np.float64)
    return float(mahalanobis_factor(dist, space, ridge).distances(e)[0])


def library_shapes(library: list[LibraryEntry]) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Names, scaled spectra and per-entry z-scored shapes (zeros for constant entries)."""
    names = [e.name for e in library]
    scaled = np.stack([e.emissivity.values for e in library])
    shapes = np.stack([normalize(e.emissivity).values for e in library])
    return names, scaled, shapes


@dataclass
class MatchScorecard:
    query_id: str
    ranked: list[tuple[str, float, float, float]]
    zeta: float

    @property
    def names(self) -> list[str]:
        return [r[0] for r in self.ranked]

    def to_dict(self) -> dict:
        return {"query_id": self.query_id, "zeta": self.zeta,
                "ranked": [{"name": n, "M": m, "d_scaled": ds, "d_normalized": dn}
                           for n, m, ds, dn in self.ranked]}


def match_score(dist: EmissivityDistribution, library: list[LibraryEntry], query_id: str = "",
                ridge: bool = True, _shapes=None) -> MatchScorecard:
    """Rank library entries by M = sqrt(1 / (d_norm + d_scaled) - zeta), zeta = min over entries."""
    if not library:
        raise DomainError("library is empty")
    names, scaled, shapes = _shapes if _shapes is not None else library_shapes(library)
    d_s = mahalanobis_factor(dist, "scaled", ridge).distances(scaled)
    d_n = mahalanobis_factor(dist, "normalized", ridge).distances(shapes)
    total = np.maximum(d_s + d_n, MIN_DISTANCE_SUM)
    m0 = 1.0 / total
    zeta = float(m0.min())
    score = np.sqrt(np.maximum(m0 - zeta, 0.0))
    order = sorted(range(len(names)), key=lambda i: (total[i], names[i]))
    ranked = [(names[i], float(score[i]), float(d_s[i]), float(d_n[i])) for i in order]
    return MatchScorecard(query_id, ranked, zeta)


def baseline_scores(dist: EmissivityDistribution, library: list[LibraryEntry], metric: str = "L2",
                    space: str = "scaled") -> list[tuple[str, float]]:
    """Distances from each entry to the distribution mean, ascending (ties by name)."""
    mean, _ = dist.moments(space)
    names = [e.name for e in library]
    if space == "scaled":
        cand = np.stack([e.emissivity.values for e in library])
    else:
        cand = library_shapes(library)[2]
    if metric == "L2":
        d = np.linalg.norm(cand - mean, axis=1)
    elif metric == "CD":
        mn = np.linalg.norm(mean)
        if mn == 0:
            raise DomainError("cosine distance to a zero expectation vector is undefined")
        cn = np.linalg.norm(cand, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            cos = np.where(cn > 0, cand @ mean / (cn * mn), 0.0)
        d = 1.0 - cos
    else:
        raise DomainError(f"unknown metric {metric!r}")
    order = sorted(range(len(names)), key=lambda i: (d[i], names[i]))
    return [(names[i], float(d[i])) for i in order]


def per_wavelength_loglik(dist: EmissivityDistribution, eps_true, space: str = "scaled") -> np.ndarray:
    mean, cov = dist.moments(space)
    sd = np.maximum(np.sqrt(np.clip(np.diag(cov), 0.0, None)), SIGMA_FLOOR)
    e = np.asarray(getattr(eps_true, "values", eps_true), dtype=np.float64)
    return -0.5 * np.log(2 * np.pi) - np.log(sd) - 0.5 * ((e - mean) / sd) ** 2


# -- hit rates ----------------------------------------------------------------

@dataclass
class Experiment:
    query_id: str
    truth: str
    alpha: float
    rankings: dict[str, list[str]] = field(default_factory=dict)


@dataclass
class HitRateCurve:
    k_values: list[int]
    hit_rate: dict[str, list[float]]
    alpha_min: float
    n_experiments: int

    def to_dict(self) -> dict:
        return asdict(self)


def hit_rate(experiments: list[Experiment], k_values, alpha_min: float = 0.1,
             variants: list[str] | None = None) -> HitRateCurve:
    """Fraction of experiments with alpha >= alpha_min whose truth ranks within the top K."""
    sel = [e for e in experiments if e.alpha >= alpha_min]
    if not sel:
        raise DomainError(f"no experiments with alpha >= {alpha_min}")
    ks = sorted(int(k) for k in k_values)
    if ks and ks[0] < 1:
        raise DomainError("K must be >= 1")
    variants = variants if variants is not None else sorted(sel[0].rankings)
    curves = {}
    for v in variants:
        ranks = np.array([_rank(e.rankings[v], e.truth) for e in sel])
        curves[v] = [float(np.mean(ranks < k)) for k in ks]
    return HitRateCurve(ks, curves, float(alpha_min), len(sel))


def _rank(names: list[str], truth: str) -> int:
    try:
        return names.index(truth)
    except ValueError:
        return len(names) + 1


def hit_rate_grid(experiments: list[Experiment], k_values, alphas=DEFAULT_ALPHA_GRID,
                  variants=None) -> list[HitRateCurve]:
    return [hit_rate(experiments, k_values, a, variants) for a in alphas
            if any(e.alpha >= a for e in experiments)]
