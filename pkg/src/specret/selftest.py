"""Quick built-in checks behind ``specret selftest``.

Each check compares a package routine against an independent evaluation
(scalar loops, dense matrices, exact decimal arithmetic) or a defining
identity. The whole suite runs in a few seconds.
"""

from __future__ import annotations

import math
from decimal import Decimal, getcontext

import numpy as np
import torch

from .cube import HsiCube, fit_whitening, flatten, whiten
from .epsnet import EmissivityDistribution
from .flow import FlowConfig, FlowModel, flow_forward, flow_inverse
from .matching import Experiment, hit_rate, match_score
from .nn import AdamState, FnoBlockConfig, MlpConfig, ParamStore, adam_step, spectral_conv
from .spectra import (
    AtmosphereParams,
    C,
    H,
    K_B,
    UF_PER_SI,
    EmissivitySpectrum,
    default_grid,
    denormalize,
    normalize,
    planck_radiance,
    propagate,
    softclamp,
    target_radiance,
)
from .synth import LibraryEntry, gen_atmosphere, gen_library
from .training import kl_diag_gaussian


def _planck_decimal(t: float, lam_um: float) -> float:
    getcontext().prec = 50
    h, c, k = Decimal(repr(H)), Decimal(repr(C)), Decimal(repr(K_B))
    lam = Decimal(repr(lam_um)) * Decimal("1e-6")
    x = h * c / (lam * k * Decimal(repr(t)))
    b = 2 * h * c * c / lam**5 / (x.exp() - 1)
    return float(b * Decimal(repr(UF_PER_SI)))


def check_planck():
    grid = default_grid(16)
    worst = 0.0
    for t in (250.0, 300.0, 340.0):
        ours = planck_radiance(t, grid).values
        for j, lam in enumerate(grid.values):
            ref = _planck_decimal(t, float(lam))
            worst = max(worst, abs(ours[j] - ref) / ref)
    return worst < 1e-10, f"max rel err {worst:.1e}"


def check_forward_model():
    grid = default_grid(32)
    atm = gen_atmosphere(grid, 300.0, 3)
    eps = gen_library(1, grid, 4)[0].emissivity
    bg = planck_radiance(295.0, grid)
    errs = [np.abs(propagate(eps, atm, 0.0, bg) - bg.values).max()]
    ones = EmissivitySpectrum(grid, np.ones(32))
    errs.append(np.abs(target_radiance(ones, atm) - (atm.tau * atm.blackbody + atm.upwelling)).max())
    zeros = EmissivitySpectrum(grid, np.zeros(32))
    errs.append(np.abs(target_radiance(zeros, atm) - (atm.tau * atm.downwelling + atm.upwelling)).max())
    lt = target_radiance(eps, atm)
    loop = np.array([atm.tau[j] * (eps.values[j] * atm.blackbody[j]
                                   + (1 - eps.values[j]) * atm.downwelling[j]) + atm.upwelling[j]
                     for j in range(32)])
    errs.append(np.abs(lt - loop).max())
    worst = float(max(errs))
    return worst < 1e-10, f"max abs err {worst:.1e} uf"


def check_softclamp_normalize():
    x = np.random.default_rng(0).uniform(-5, 5, 1000)
    y = softclamp(np.sort(x))
    mono = bool(np.all(np.diff(y) > 0)) and y.min() > 0 and y.max() < 1
    grid = default_grid(32)
    e = EmissivitySpectrum(grid, np.linspace(0.2, 0.8, 32))
    rt = float(np.abs(denormalize(normalize(e)).values - e.values).max())
    return mono and rt < 1e-12 and abs(float(softclamp(0.5)) - 0.5) < 1e-9, f"round trip {rt:.1e}"


def check_whitening():
    rng = np.random.default_rng(1)
    r = 8
    a = rng.standard_normal((r, r))
    x = rng.standard_normal((64 * 64, r)) @ a + 100.0
    cube = HsiCube("selftest", default_grid(r), x.reshape(64, 64, r))
    wm = fit_whitening(cube, 0.0)
    w = whiten(flatten(cube), wm)
    dev = float(np.abs(np.cov(w, rowvar=False) - np.eye(r)).max())
    return dev < 1e-6, f"max |cov - I| {dev:.1e}"


def check_flow():
    torch.manual_seed(0)
    model = FlowModel.init(FlowConfig(6, 4, 16), np.random.default_rng(2))
    for k, v in model.store.tensors.items():
        model.store.tensors[k] = v + 0.2 * torch.randn(v.shape, dtype=v.dtype)
    z = torch.randn(200, 6, dtype=torch.float64)
    zk, ld = flow_forward(model, z)
    rt = float((flow_inverse(model, zk) - z).abs().max())
    jac = torch.autograd.functional.jacobian(lambda v: flow_forward(model, v)[0], z[0])
    dets = float(abs(torch.linalg.slogdet(jac)[1] - ld[0]))
    return rt < 1e-9 and dets < 1e-6, f"round trip {rt:.1e}, log-det err {dets:.1e}"


def check_kl():
    mu, sigma = np.array([0.3, -1.2]), np.array([0.7, 1.6])
    ref = sum(math.log(1 / s) + (s * s + m * m) / 2 - 0.5 for m, s in zip(mu, sigma))
    ours = float(kl_diag_gaussian(mu, sigma))
    return abs(ours - ref) < 1e-12, f"|KL - closed form| {abs(ours - ref):.1e}"


def check_spectral_conv():
    n, modes = 8, 5
    rng = np.random.default_rng(3)
    cfg = FnoBlockConfig(n, n, modes, MlpConfig(n, n, n, 1, "linear"))
    P = {"u.R_re": torch.tensor(rng.standard_normal((modes, modes))),
         "u.R_im": torch.tensor(rng.standard_normal((modes, modes)))}
    x = np.zeros(n)
    x[0] = 1.0
    ours = spectral_conv(P, "u", cfg, torch.tensor(x)).numpy()
    F = np.exp(-2j * np.pi * np.outer(np.arange(n), np.arange(n)) / n)
    X = (F @ x)[:modes]
    R = P["u.R_re"].numpy() + 1j * P["u.R_im"].numpy()
    Y = np.zeros(n, complex)
    Y[:modes] = R @ X
    # rebuild the Hermitian spectrum; the imaginary parts of DC and Nyquist are dropped
    full = np.zeros(n, complex)
    full[0] = Y[0].real
    for k in range(1, n // 2):
        full[k], full[n - k] = Y[k], np.conj(Y[k])
    full[n // 2] = Y[n // 2].real
    ref = (np.conj(F) @ full).real / n
    err = float(np.abs(ours - ref).max())
    return err < 1e-12, f"max abs err {err:.1e}"


def check_adam():
    w = {"w": torch.tensor([1.0], dtype=torch.float64)}
    st = AdamState()
    for _ in range(200):
        w, st = adam_step(w, {"w": 2 * w["w"]}, st, 0.1)
    val = float(w["w"].abs())
    return val < 1e-3, f"|w| after 200 steps {val:.1e}"


def check_matching():
    grid = default_grid(8)
    rng = np.random.default_rng(4)
    lib = [LibraryEntry(f"m{i}", EmissivitySpectrum(grid, softclamp(0.8 + 0.05 * rng.standard_normal(8))))
           for i in range(6)]
    s = softclamp(0.8 + 0.05 * rng.standard_normal((64, 8)))
    z = (s - s.mean(1, keepdims=True)) / s.std(1, keepdims=True)
    card = match_score(EmissivityDistribution.from_samples(s, z), lib)
    last = card.ranked[-1][1]
    exps = [Experiment(str(i), "a", 0.5, {"MD": ["a", "b", "c"]}) for i in range(4)]
    curve = hit_rate(exps, [1, 2, 3])
    ok = last == 0.0 and curve.hit_rate["MD"] == [1.0, 1.0, 1.0]
    return ok, f"min score {last}, all-rank-1 curve {curve.hit_rate['MD']}"


CHECKS = {
    "planck-decimal-oracle": check_planck,
    "forward-model-identities": check_forward_model,
    "softclamp-normalize": check_softclamp_normalize,
    "whitening-identity": check_whitening,
    "flow-roundtrip-logdet": check_flow,
    "kl-closed-form": check_kl,
    "spectral-conv-dft": check_spectral_conv,
    "adam-quadratic": check_adam,
    "match-score-hitrate": check_matching,
}


def run_selftest() -> list[tuple[str, bool, str]]:
    out = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed check, not a crashed suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail))
    return out
