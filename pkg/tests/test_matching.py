import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specret.epsnet import EmissivityDistribution
from specret.errors import DomainError
from specret.matching import (
    RIDGE_DELTA,
    Experiment,
    baseline_scores,
    hit_rate,
    hit_rate_grid,
    mahalanobis,
    match_score,
    per_wavelength_loglik,
)
from specret.spectra import EmissivitySpectrum, default_grid, zscore_rows
from specret.synth import LibraryEntry, gen_library

R = 8
GRID = default_grid(R)


def dist_from(samples):
    z, _, _ = zscore_rows(samples)
    return EmissivityDistribution.from_samples(samples, z)


def gaussian_dist(rng, n=4000, mean=0.9, sd=0.02):
    a = rng.standard_normal((R, R)) * sd / math.sqrt(R)
    x = mean + rng.standard_normal((n, R)) @ a.T + sd * 0.3 * rng.standard_normal((n, R))
    return dist_from(np.clip(x, 0, 1))


def test_mahalanobis_hand_oracle():
    # two-band distribution with an explicit covariance
    s = np.array([[0.5, 0.5], [0.7, 0.3], [0.3, 0.9], [0.5, 0.3], [0.6, 0.6]])
    d = EmissivityDistribution.from_samples(s, s)
    mu, cov = s.mean(0), np.cov(s, rowvar=False)
    e = np.array([0.8, 0.2])
    ref = math.sqrt((e - mu) @ np.linalg.inv(cov) @ (e - mu))
    assert mahalanobis(d, e, ridge=False) == pytest.approx(ref, rel=1e-12)
    assert mahalanobis(d, e) == pytest.approx(ref, rel=1e-5)
    assert mahalanobis(d, mu) == pytest.approx(0.0, abs=1e-12)


def test_mahalanobis_isotropic_is_scaled_euclid(rng):
    n = 100_000
    d = dist_from(0.5 + 0.05 * rng.standard_normal((n, R)))
    e = np.full(R, 0.6)
    l2 = np.linalg.norm(e - d.mean_vec)
    assert mahalanobis(d, e) == pytest.approx(l2 / 0.05, rel=0.02)


@settings(max_examples=20)
@given(st.integers(0, 1000))
def test_mahalanobis_invariant_under_affine_maps(seed):
    r = np.random.default_rng(seed)
    s = r.standard_normal((200, R))
    A = r.standard_normal((R, R)) + 3 * np.eye(R)
    b = r.standard_normal(R)
    e = r.standard_normal(R)
    d1 = EmissivityDistribution.from_samples(s, s)
    t = s @ A.T + b
    d2 = EmissivityDistribution.from_samples(t, t)
    m1, m2 = mahalanobis(d1, e, ridge=False), mahalanobis(d2, A @ e + b, ridge=False)
    assert m1 == pytest.approx(m2, rel=1e-7)


def library_with(truth, rng, n=20):
    lib = gen_library(n, GRID, 4)
    return [LibraryEntry("truth", EmissivitySpectrum(GRID, truth))] + lib


def test_match_ranks_truth_first_and_min_score_zero(rng):
    d = gaussian_dist(rng)
    lib = library_with(np.clip(d.mean_vec, 0, 1), rng)
    card = match_score(d, lib, "q")
    assert card.names[0] == "truth"
    scores = [m for _, m, _, _ in card.ranked]
    assert min(scores) == 0.0 and scores[-1] == 0.0 and scores[0] == max(scores)
    assert all(a >= b for a, b in zip(scores, scores[1:]))
    doc = card.to_dict()
    assert doc["query_id"] == "q" and len(doc["ranked"]) == len(lib)


def test_zeta_is_recomputed_per_library(rng):
    d = gaussian_dist(rng)
    lib = library_with(np.clip(d.mean_vec, 0, 1), rng)
    full = match_score(d, lib)
    part = match_score(d, lib[:5])
    assert full.zeta <= part.zeta
    # ordering is by the summed distance, unaffected by zeta
    order_full = [n for n in full.names if n in {e.name for e in lib[:5]}]
    assert order_full == part.names
    with pytest.raises(DomainError):
        match_score(d, [])


def test_baselines_oracles(rng):
    d = gaussian_dist(rng)
    lib = library_with(np.clip(d.mean_vec, 0, 1), rng, 6)
    l2 = dict(baseline_scores(d, lib, "L2"))
    cd = dict(baseline_scores(d, lib, "CD"))
    for e in lib:
        v = e.emissivity.values
        assert l2[e.name] == pytest.approx(np.linalg.norm(v - d.mean_vec), abs=1e-15)
        ref = 1 - v @ d.mean_vec / np.linalg.norm(v) / np.linalg.norm(d.mean_vec)
        assert cd[e.name] == pytest.approx(ref, abs=1e-14)
    ranked = baseline_scores(d, lib, "L2")
    assert [x for _, x in ranked] == sorted(x for _, x in ranked)
    with pytest.raises(DomainError):
        baseline_scores(d, lib, "KL")
    zero = EmissivityDistribution.from_samples(np.zeros((3, R)), np.zeros((3, R)))
    with pytest.raises(DomainError):
        baseline_scores(zero, lib, "CD")


def test_per_wavelength_loglik_gaussian(rng):
    d = dist_from(0.5 + 0.1 * rng.standard_normal((50_000, R)))
    ll = per_wavelength_loglik(d, d.mean_vec)
    assert np.allclose(ll, -0.5 * math.log(2 * math.pi) - np.log(d.sdev), rtol=1e-12)
    ll2 = per_wavelength_loglik(d, d.mean_vec + d.sdev)
    assert np.allclose(ll - ll2, 0.5, rtol=1e-12)


def test_ridge_keeps_degenerate_covariance_solvable():
    s = np.tile(np.linspace(0.8, 0.9, R), (10, 1))
    s[::2] += 0.01
    d = EmissivityDistribution.from_samples(s, s)
    assert math.isfinite(mahalanobis(d, s[0] + 0.001))
    assert RIDGE_DELTA == 1e-6


def exp(alpha, rank, truth="t", n=30):
    names = [f"m{i}" for i in range(n)]
    names.insert(rank, truth)
    return Experiment(f"q{alpha}-{rank}", truth, alpha, {"MD": names, "L2": list(reversed(names))})


def test_hit_rate_counting():
    exps = [exp(0.2, 0), exp(0.3, 4), exp(0.6, 9), exp(0.05, 0)]
    c = hit_rate(exps, [1, 5, 10], alpha_min=0.1, variants=["MD"])
    assert c.n_experiments == 3 and c.hit_rate["MD"] == pytest.approx([1 / 3, 2 / 3, 1.0])
    assert hit_rate(exps, [1], alpha_min=0.5).hit_rate["MD"] == [0.0]
    hr = hit_rate(exps, range(1, 40), alpha_min=0.0).hit_rate["L2"]
    assert all(b >= a for a, b in zip(hr, hr[1:])) and hr[-1] == 1.0
    missing = Experiment("x", "absent", 1.0, {"MD": ["a", "b"]})
    assert hit_rate([missing], [2]).hit_rate["MD"] == [0.0]
    with pytest.raises(DomainError):
        hit_rate(exps, [1], alpha_min=0.9)
    with pytest.raises(DomainError):
        hit_rate(exps, [0])


def test_hit_rate_grid_skips_empty_alpha():
    grid = hit_rate_grid([exp(0.3, 0)], [1], alphas=(0.1, 0.25, 0.5))
    assert [c.alpha_min for c in grid] == [0.1, 0.25]
