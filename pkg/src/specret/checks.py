"""Finite-difference sweeps and the quick self-test suite behind the CLI."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from .epsnet import EpsNetConfig, EpsNetModel
from .nn import GradcheckResult, gradcheck
from .spectra import default_grid, planck_radiance
from .synth import gen_atmosphere
from .training import LossWeights, TrainBatch, composite_loss

GRAD_TERMS = ("shape", "smooth", "mean", "sdev", "nll_eps", "eps", "nll_L", "propagation",
              "regularization", "composite")


def tiny_model(seed: int = 0, r: int = 16, d_z: int = 4) -> EpsNetModel:
    cfg = EpsNetConfig(r, d_z=d_z, d_prop=4, d_bg=4, max_modes=4, flow_hidden=8, head_hidden=8,
                       head_layers=3, n_layers=2)
    model = EpsNetModel.init(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    # perturb the zero-initialised flow so its gradients are exercised
    for k, v in model.store.tensors.items():
        if k.startswith("flow."):
            model.store.tensors[k] = v + torch.from_numpy(0.1 * rng.standard_normal(v.shape))
    model.store.stats.update(L_off=800.0, L_scale=150.0, lw_scale=3.0, curve_scale=1000.0,
                             mean_off=0.9, mean_scale=0.05, sdev_scale=0.02)
    return model


def tiny_batch(model: EpsNetModel, k: int = 3, seed: int = 0) -> tuple[TrainBatch, torch.Tensor]:
    r, cfg = model.cfg.n_bands, model.cfg
    rng = np.random.default_rng(seed)
    grid = default_grid(r)
    atm = np.stack([gen_atmosphere(grid, 300.0 + 5 * i, seed + i).stacked() for i in range(k)])
    eps = 0.9 + 0.05 * rng.standard_normal((k, r)).cumsum(-1) / math.sqrt(r)
    eps_m, eps_s = eps.mean(-1), eps.std(-1)
    bg = np.stack([planck_radiance(295.0, grid).values * 0.95 for _ in range(k)])
    L = 800.0 + 100.0 * rng.standard_normal((k, r))
    tokens = rng.standard_normal((k, 5, r))
    c = rng.standard_normal((k, cfg.d_prop + cfg.d_bg))
    t = torch.from_numpy
    batch = TrainBatch(t(L), t(rng.standard_normal((k, r)) * 3), t(tokens), t(c), t(eps),
                       t((eps - eps_m[:, None]) / eps_s[:, None]), t(eps_m), t(eps_s), t(atm),
                       t(rng.uniform(0.2, 1.0, k)), t(bg))
    eta = t(rng.standard_normal((k, cfg.d_z)))
    return batch, eta


@dataclass
class TermCheck:
    term: str
    result: GradcheckResult


def gradcheck_suite(seed: int = 0, terms=GRAD_TERMS, max_per_param: int | None = 2,
                    tolerance: float = 1e-5, h: float = 1e-3, fault=None) -> list[TermCheck]:
    """Central differences for each loss term (alone) and the full composite objective.

    Each term is isolated by zeroing every other weight. The fourth-order
    stencil lets h = 1e-3 keep both truncation and roundoff (about |f| eps / h)
    well below the smallest gradients checked. ``fault`` corrupts the analytic
    gradient.
    """
    model = tiny_model(seed)
    batch, eta = tiny_batch(model, seed=seed)
    zero = LossWeights(omega1=1, omega2=0, omega3=0, shape=0, smooth=0, sdev=0, mean=0,
                       eps_bar=0, eps=0, radiance=0)
    sub = {"nll_eps": "eps_bar", "nll_L": "radiance"}
    out = []
    for term in terms:
        if term == "composite":
            w = LossWeights(radiance=1.0)
        elif term == "propagation":
            w = replace(zero, omega1=0, omega2=1)
        elif term == "regularization":
            w = replace(zero, omega1=0, omega3=1)
        else:
            w = replace(zero, **{sub.get(term, term): 1.0})

        def fn(P, w=w):
            return composite_loss(model, batch, w, eta, P, use_flow=True)[0]

        res = gradcheck(fn, model.store, h=h, max_per_param=max_per_param, tolerance=tolerance,
                        seed=seed, fault=fault, stencil=4)
        out.append(TermCheck(term, res))
    return out


def corrupt_first(g: dict) -> None:
    """Fault hook: adds 1e-3 to the first entry of the first gradient."""
    name = next(iter(g))
    g[name] = g[name].clone()
    g[name].reshape(-1)[0] += 1e-3
