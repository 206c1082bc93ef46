import math

import numpy as np
import pytest
import torch

from specret.condnets import BgNetConfig, BgNetModel, PropNetConfig, PropNetModel, estimate_scene
from specret.cube import HsiCube
from specret.epsnet import (
    EmissivityDistribution,
    EpsNetConfig,
    EpsNetModel,
    assemble_scaled,
    decode_radiance,
    distribution_spectrum,
    encode,
    gaussian_log_density,
    reparameterize,
    sample_posterior,
    scene_inputs,
)
from specret.errors import ConfigError, DomainError, ShapeError
from specret.spectra import default_grid, softclamp

R = 16


def small_cfg(**kw):
    base = dict(n_bands=R, d_z=4, d_prop=6, d_bg=6, n_blocks=2, n_layers=2, max_modes=4,
                flow_hidden=8, head_hidden=16, head_layers=2)
    base.update(kw)
    return EpsNetConfig(**base)


@pytest.fixture(scope="module")
def scene():
    rng = np.random.default_rng(0)
    p = PropNetModel.init(PropNetConfig(R, d_prop=6, hidden_dim=16, enc_layers=2, m_layers=2, head_layers=2), 0)
    b = BgNetModel.init(BgNetConfig(R, d_bg=6, hidden_dim=16, enc_layers=2, dec_layers=2), 1)
    for m in (p, b):
        m.store.stats.update(in_offset=750.0, in_scale=90.0)
    cube = HsiCube("c", default_grid(R), rng.uniform(600, 900, (8, 8, R)))
    return estimate_scene(p, b, cube, 3, set_size=20), cube


def pixel(cube):
    L = cube.data[2, 3]
    return L, L - cube.data.reshape(-1, R).mean(0)


def test_config_validation():
    with pytest.raises(ConfigError):
        small_cfg(d_z=5)
    with pytest.raises(ConfigError):
        small_cfg(d_bg=7)
    assert small_cfg().d_c == 12
    assert small_cfg().encoder[-1].out_len == 8 and small_cfg().dec_L[-1].out_len == 2 * R


def test_encode_dimensions_and_positive_sigma(scene):
    sc, cube = scene
    m = EpsNetModel.init(small_cfg(), 0)
    mu, sigma = encode(m, *pixel(cube), sc)
    assert mu.shape == (4,) and sigma.shape == (4,) and np.all(sigma > 0)
    with pytest.raises(ShapeError):
        encode(m, np.zeros(R - 1), np.zeros(R - 1), sc)


def test_reparameterize_moments_and_density():
    mu, sigma = np.array([1.0, -2.0, 0.0]), np.array([0.5, 2.0, 1e-3])
    d = reparameterize(mu, sigma, 7, n=200_000)
    z = d.z0.numpy()
    assert np.abs(z.mean(0) - mu).max() < 0.02
    assert np.abs(z.std(0) / sigma - 1).max() < 0.01
    ref = gaussian_log_density(d.z0[:10], torch.tensor(mu), torch.tensor(sigma))
    assert (ref - d.q0_log_density[:10]).abs().max() < 1e-9
    assert torch.equal(reparameterize(mu, sigma, 7).z0, reparameterize(mu, sigma, 7).z0)
    with pytest.raises(DomainError):
        reparameterize(mu, np.array([1.0, 0.0, 1.0]), 0)


def test_gaussian_log_density_closed_form():
    x = torch.tensor([0.3, -1.0], dtype=torch.float64)
    mu = torch.tensor([0.0, 1.0], dtype=torch.float64)
    sd = torch.tensor([1.0, 2.0], dtype=torch.float64)
    ref = sum(-0.5 * math.log(2 * math.pi * s**2) - 0.5 * ((a - m) / s) ** 2
              for a, m, s in [(0.3, 0.0, 1.0), (-1.0, 1.0, 2.0)])
    assert float(gaussian_log_density(x, mu, sd)) == pytest.approx(ref, rel=1e-14)


def test_assemble_scaled_numpy_and_torch():
    shape = np.array([[-1.0, 0.0, 1.0]])
    out = assemble_scaled(shape, np.array([0.5]), np.array([0.1]))
    assert np.allclose(out, softclamp(np.array([[0.4, 0.5, 0.6]])), rtol=0, atol=1e-15)
    tout = assemble_scaled(torch.tensor(shape), torch.tensor([0.5]), torch.tensor([0.1]))
    assert np.allclose(tout.numpy(), out, rtol=1e-14)
    assert np.array_equal(assemble_scaled(shape, np.array([0.7]), np.array([0.0])), softclamp(np.full((1, 3), 0.7)))
    with pytest.raises(DomainError):
        assemble_scaled(shape, np.array([0.5]), np.array([-0.1]))


def test_sample_posterior_deterministic_and_consistent(scene):
    sc, cube = scene
    m = EpsNetModel.init(small_cfg(), 2)
    L, Lw = pixel(cube)
    a = sample_posterior(m, L, Lw, sc, n=64, seed=11)
    b = sample_posterior(m, L, Lw, sc, n=64, seed=11)
    assert np.array_equal(a.scaled, b.scaled)
    assert a.scaled.shape == (64, R) and a.n_samples == 64
    assert np.all((a.scaled >= 0) & (a.scaled <= 1))
    assert np.allclose(a.mean_vec, a.scaled.mean(0), rtol=0, atol=1e-15)
    assert np.allclose(a.cov, np.cov(a.scaled, rowvar=False), rtol=0, atol=1e-15)
    c = sample_posterior(m, L, Lw, sc, n=64, seed=12)
    assert not np.array_equal(a.scaled, c.scaled)
    assert np.all(a.sdev > 0), "samples must not collapse to a point"
    assert distribution_spectrum(a, default_grid(R)).values.shape == (R,)


def test_unconditioned_ignores_scene(scene):
    sc, cube = scene
    m = EpsNetModel.init(small_cfg(conditioned=False), 2)
    L, Lw = pixel(cube)
    tok, c = scene_inputs(m, sc)
    assert torch.all(tok == 0) and torch.all(c == 0)
    a = sample_posterior(m, L, Lw, sc, n=8, seed=1)
    b = sample_posterior(m, L, Lw, None, n=8, seed=1)
    assert np.array_equal(a.scaled, b.scaled)


def test_conditioning_changes_output(scene):
    sc, cube = scene
    m = EpsNetModel.init(small_cfg(), 2)
    L, Lw = pixel(cube)
    a = sample_posterior(m, L, Lw, sc, n=8, seed=1)
    b = sample_posterior(m, L, Lw, None, n=8, seed=1)
    assert not np.array_equal(a.scaled, b.scaled)


def test_decode_radiance_units(scene):
    sc, _ = scene
    m = EpsNetModel.init(small_cfg(), 2)
    m.store.stats.update(L_off=700.0, L_scale=50.0)
    d = reparameterize(np.zeros(4), np.ones(4), 0, n=3)
    L_hat, sig = decode_radiance(m, d, sc)
    assert L_hat.shape == (3, R) and np.all(sig > 0)
    assert np.abs(L_hat - 700.0).max() < 50.0


def test_distribution_needs_two_samples():
    with pytest.raises(DomainError):
        EmissivityDistribution.from_samples(np.zeros((1, 3)), np.zeros((1, 3)))
    with pytest.raises(DomainError):
        sample_posterior(EpsNetModel.init(small_cfg(), 0), np.zeros(R), np.zeros(R), None, n=1)
    d = EmissivityDistribution.from_samples(np.eye(3), np.eye(3))
    with pytest.raises(DomainError):
        d.moments("log")
