import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from specret.errors import DomainError, ShapeError
from specret.spectra import (
    C,
    H,
    K_B,
    AtmosphereParams,
    EmissivitySpectrum,
    RadianceSpectrum,
    WavelengthGrid,
    default_grid,
    denormalize,
    normalize,
    planck_radiance,
    propagate,
    softclamp,
    target_radiance,
)
from specret.synth import gen_atmosphere, gen_library


def planck_mp(t, lam_um):
    """Planck law in microflicks at 40 significant digits."""
    mpmath.mp.dps = 40
    h, c, k = mpmath.mpf(repr(H)), mpmath.mpf(repr(C)), mpmath.mpf(repr(K_B))
    lam = mpmath.mpf(repr(lam_um)) * mpmath.mpf("1e-6")
    b = 2 * h * c**2 / lam**5 / (mpmath.exp(h * c / (lam * k * mpmath.mpf(repr(t)))) - 1)
    return float(b * mpmath.mpf("1e-4"))


def random_case(seed, r=32):
    grid = default_grid(r)
    atm = gen_atmosphere(grid, 290.0 + seed, seed)
    eps = gen_library(1, grid, seed + 100)[0].emissivity
    bg = RadianceSpectrum(grid, planck_radiance(295.0, grid).values * 0.93)
    return grid, atm, eps, bg


# -- grid ---------------------------------------------------------------------

def test_grid_endpoints_and_spacing():
    g = default_grid(128)
    v = g.values
    assert v[0] == 7.56 and v[-1] == 13.16 and len(v) == 128
    assert np.allclose(np.diff(v), g.spacing, rtol=1e-12, atol=0)


@pytest.mark.parametrize("args", [(1, 7.0, 8.0), (4, 8.0, 8.0), (4, 9.0, 8.0), (4, -1.0, 8.0)])
def test_grid_rejects_bad_ranges(args):
    with pytest.raises(DomainError):
        WavelengthGrid(*args)


def test_grid_round_trip():
    g = default_grid(32)
    assert WavelengthGrid.from_dict(g.to_dict()) == g


# -- Planck ---------------------------------------------------------------------

def test_planck_matches_arbitrary_precision_at_300K_10um():
    g = WavelengthGrid(3, 9.0, 11.0)
    ours = planck_radiance(300.0, g).values[1]
    ref = planck_mp(300.0, 10.0)
    assert abs(ours - ref) / ref < 1e-10


def test_planck_cold_limit_vanishes():
    v = planck_radiance(1.0, default_grid(16)).values
    assert np.all(v < 1e-100) and np.all(v >= 0)


def test_planck_monotone_in_temperature():
    g = default_grid(64)
    assert np.all(planck_radiance(310.0, g).values > planck_radiance(300.0, g).values)


@pytest.mark.parametrize("t", [0.0, -5.0, float("nan"), float("inf"), 10_000.0])
def test_planck_domain(t):
    with pytest.raises(DomainError):
        planck_radiance(t, default_grid(8))


@pytest.mark.parametrize("t", [280.0, 300.0, 320.0])
def test_planck_at_most_one_turn_over_lwir(t):
    d = np.diff(planck_radiance(t, default_grid(128)).values)
    assert np.count_nonzero(np.diff(np.sign(d))) <= 1


def test_planck_magnitude_in_microflicks():
    # a 300 K black body near 10 um radiates roughly 1 mW/(cm^2 sr um), i.e. ~ 1000 uf
    v = planck_radiance(300.0, WavelengthGrid(2, 10.0, 11.0)).values[0]
    assert 900 < v < 1000


# -- forward model --------------------------------------------------------------

def test_alpha_zero_returns_background_exactly():
    _, atm, eps, bg = random_case(1)
    assert np.array_equal(propagate(eps, atm, 0.0, bg), bg.values)


def test_perfect_emitter_and_reflector():
    grid, atm, _, bg = random_case(2)
    ones = EmissivitySpectrum(grid, np.ones(grid.n_bands))
    zeros = EmissivitySpectrum(grid, np.zeros(grid.n_bands))
    assert np.array_equal(propagate(ones, atm, 1.0, bg), atm.tau * atm.blackbody + atm.upwelling)
    assert np.array_equal(propagate(zeros, atm, 1.0, bg), atm.tau * atm.downwelling + atm.upwelling)


def test_opaque_atmosphere_gives_upwelling():
    grid, atm, eps, _ = random_case(3)
    opaque = AtmosphereParams(np.zeros(grid.n_bands), atm.upwelling, atm.downwelling, atm.blackbody)
    assert np.array_equal(target_radiance(eps, opaque), atm.upwelling)


def test_half_emissivity_transparent_substitution():
    grid, atm, _, _ = random_case(4)
    r = grid.n_bands
    a = AtmosphereParams(np.ones(r), np.zeros(r), atm.downwelling, atm.blackbody)
    half = EmissivitySpectrum(grid, np.full(r, 0.5))
    assert np.allclose(target_radiance(half, a), 0.5 * (atm.blackbody + atm.downwelling), rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_target_radiance_vs_scalar_loop(seed):
    grid, atm, eps, _ = random_case(seed)
    ours = target_radiance(eps, atm)
    loop = []
    for j in range(grid.n_bands):
        e = float(eps.values[j])
        loop.append(atm.tau[j] * (e * atm.blackbody[j] + (1.0 - e) * atm.downwelling[j]) + atm.upwelling[j])
    assert np.max(np.abs(ours - np.array(loop))) < 1e-14 * max(1.0, np.abs(ours).max())


def test_propagate_is_affine_in_alpha(rng):
    _, atm, eps, bg = random_case(5)
    lt = target_radiance(eps, atm)
    for a in rng.uniform(0, 1, 20):
        expect = a * lt + (1 - a) * bg.values
        assert np.max(np.abs(propagate(eps, atm, a, bg) - expect)) <= 1e-12 * np.abs(expect).max()


def test_propagate_batched_alpha():
    grid, atm, eps, bg = random_case(6)
    alphas = np.array([0.0, 0.5, 1.0])
    out = propagate(np.stack([eps.values] * 3), atm, alphas, bg)
    for k, a in enumerate(alphas):
        assert np.allclose(out[k], propagate(eps, atm, float(a), bg), rtol=0, atol=1e-12)


def test_monotone_in_emissivity_where_blackbody_dominates():
    grid, atm, eps, _ = random_case(7)
    base = target_radiance(eps, atm)
    for j in range(0, grid.n_bands, 5):
        v = eps.values.copy()
        v[j] = min(1.0, v[j] + 0.01) if v[j] < 0.99 else v[j] - 0.01
        step = np.sign(v[j] - eps.values[j])
        bumped = target_radiance(v, atm)
        sign = np.sign(atm.blackbody[j] - atm.downwelling[j]) * step
        if atm.tau[j] > 0:
            assert np.sign(bumped[j] - base[j]) == sign


def test_propagate_rejects_bad_alpha_and_grids():
    grid, atm, eps, bg = random_case(8)
    with pytest.raises(DomainError):
        propagate(eps, atm, 1.5, bg)
    other = default_grid(16)
    with pytest.raises(ShapeError):
        propagate(eps, atm, 0.5, planck_radiance(300.0, other))


def test_spectrum_invariants():
    g = default_grid(4)
    with pytest.raises(DomainError):
        EmissivitySpectrum(g, [0.5, 1.2, 0.5, 0.5])
    with pytest.raises(ShapeError):
        EmissivitySpectrum(g, [0.5, 0.5])
    with pytest.raises(DomainError):
        AtmosphereParams([0.5, 2.0], [0, 0], [0, 0], [1, 1])


def test_atmosphere_from_temperature_matches_planck():
    g = default_grid(16)
    a = AtmosphereParams.from_temperature(g, 305.0, np.ones(16), np.zeros(16), np.zeros(16))
    assert np.allclose(a.blackbody, planck_radiance(305.0, g).values, rtol=1e-9, atol=0)
    assert AtmosphereParams.from_dict(a.to_dict()).temperature_K == 305.0


# -- softclamp ------------------------------------------------------------------

def test_softclamp_midpoint_and_saturation():
    assert abs(float(softclamp(0.5)) - 0.5) < 1e-9
    assert abs(float(softclamp(2.5, 1.0, 4.0)) - 2.5) < 1e-9
    lo = float(softclamp(-100.0))
    assert 0.0 < lo < 1e-6
    # the upper tail rounds to hi in double precision; it never crosses it
    hi = float(softclamp(101.0))
    assert 1.0 - 1e-6 < hi <= 1.0
    assert float(softclamp(1.2)) < 1.0


def test_softclamp_near_identity_mid_range():
    x = np.linspace(0.1, 0.9, 1001)
    assert np.max(np.abs(softclamp(x) - x)) < 1e-3


def test_softclamp_strictly_monotone_random_pairs(rng):
    a, b = rng.uniform(-3, 4, (2, 1000))
    x1, x2 = np.minimum(a, b), np.maximum(a, b)
    keep = x1 < x2
    assert np.all(softclamp(x1[keep]) < softclamp(x2[keep]))


@given(st.floats(-50, 50), st.floats(0.001, 50), st.floats(-20, 20))
def test_softclamp_bounds_property(x, width, lo):
    hi = lo + width
    y = float(softclamp(x, lo, hi))
    assert lo <= y <= hi
    if abs(x - lo) < 2 * width and abs(x - hi) < 2 * width:
        assert lo < y < hi


def test_softclamp_rejects_empty_interval():
    with pytest.raises(DomainError):
        softclamp(0.3, 1.0, 1.0)


def test_softclamp_torch_matches_numpy(rng):
    import torch

    x = rng.uniform(-1, 2, 200)
    assert np.allclose(softclamp(torch.tensor(x)).numpy(), softclamp(x), rtol=1e-14, atol=0)


# -- normalize --------------------------------------------------------------------

def test_normalize_ramp_zscore():
    g = default_grid(128)
    ne = normalize(EmissivitySpectrum(g, np.linspace(0.2, 0.8, 128)))
    assert abs(ne.values.mean()) < 1e-12 and abs(ne.values.std() - 1.0) < 1e-12


def test_normalize_constant_is_flagged():
    g = default_grid(16)
    ne = normalize(EmissivitySpectrum(g, np.full(16, 0.9)))
    assert ne.constant and ne.sdev == 0.0 and ne.mean == pytest.approx(0.9, abs=1e-15)
    assert np.all(ne.values == 0)
    back = denormalize(ne)
    assert np.allclose(back.values, 0.9, atol=1e-15)


def test_normalize_round_trip_random(rng):
    g = default_grid(64)
    worst = 0.0
    for _ in range(100):
        v = 0.5 + 0.1 * rng.uniform(-1, 1, 64)
        e = EmissivitySpectrum(g, v)
        worst = max(worst, np.abs(denormalize(normalize(e)).values - v).max())
    assert worst < 1e-12


@given(st.lists(st.floats(0.05, 0.95), min_size=3, max_size=40))
def test_normalize_statistics_property(vals):
    g = default_grid(len(vals))
    ne = normalize(EmissivitySpectrum(g, vals))
    if not ne.constant:
        assert abs(ne.values.mean()) < 1e-9 and abs(ne.values.std() - 1.0) < 1e-9
        assert np.allclose(ne.values * ne.sdev + ne.mean, vals, atol=1e-12)
