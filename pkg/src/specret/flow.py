"""RealNVP affine coupling flow on the latent vector.

Layer k keeps one half ``a`` of z fixed and maps the other half
``b -> b * exp(s(a)) + t(a)``; the kept half alternates between layers. The
scale output is squashed to ``2 * tanh(.)`` so every layer stays comfortably
invertible. log|det J| of a layer is the sum of its s outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, ShapeError
from .nn import MlpConfig, ParamStore, init_mlp, mlp_forward

S_BOUND = 2.0


@dataclass(frozen=True)
class FlowConfig:
    d_z: int
    n_layers: int = 4
    hidden_dim: int = 64
    n_hidden: int = 2

    def __post_init__(self):
        if self.d_z < 2 or self.d_z % 2:
            raise ConfigError(f"flow latent dimension must be even and >= 2, got {self.d_z}")
        if self.n_layers < 0:
            raise ConfigError("flow layer count must be >= 0")

    @property
    def net(self) -> MlpConfig:
        h = self.d_z // 2
        return MlpConfig(h, h, self.hidden_dim, self.n_hidden + 1, "swish")

    def parity(self, k: int) -> str:
        return "first_half_frozen" if k % 2 == 0 else "second_half_frozen"


class FlowModel:
    def __init__(self, cfg: FlowConfig, store: ParamStore | None = None, prefix: str = "flow"):
        self.cfg = cfg
        self.store = store if store is not None else ParamStore()
        self.prefix = prefix

    @classmethod
    def init(cls, cfg: FlowConfig, rng: np.random.Generator, store: ParamStore | None = None,
             prefix: str = "flow") -> "FlowModel":
        """Random hidden layers, zero output layers: the flow starts as the identity."""
        model = cls(cfg, store, prefix)
        for k in range(cfg.n_layers):
            for part in ("s", "t"):
                init_mlp(model.store, f"{prefix}.{k}.{part}", cfg.net, rng, zero_last=True)
        return model


def _split(z: torch.Tensor, k: int, d: int):
    h = d // 2
    if k % 2 == 0:
        return z[..., :h], z[..., h:]
    return z[..., h:], z[..., :h]


def _join(a: torch.Tensor, b: torch.Tensor, k: int) -> torch.Tensor:
    return torch.cat([a, b], -1) if k % 2 == 0 else torch.cat([b, a], -1)


def _coupling(model: FlowModel, P, k: int, a: torch.Tensor):
    net = model.cfg.net
    s = S_BOUND * torch.tanh(mlp_forward(P, f"{model.prefix}.{k}.s", net, a))
    t = mlp_forward(P, f"{model.prefix}.{k}.t", net, a)
    return s, t


def flow_forward(model: FlowModel, z0: torch.Tensor, P=None) -> tuple[torch.Tensor, torch.Tensor]:
    """(z_K, sum of log-determinants); works on (..., d_z) batches."""
    P = model.store if P is None else P
    d = model.cfg.d_z
    if z0.shape[-1] != d:
        raise ShapeError(f"latent length {z0.shape[-1]} != flow d_z {d}")
    z = z0
    log_det = z0.new_zeros(z0.shape[:-1])
    for k in range(model.cfg.n_layers):
        a, b = _split(z, k, d)
        s, t = _coupling(model, P, k, a)
        z = _join(a, b * torch.exp(s) + t, k)
        log_det = log_det + s.sum(-1)
    return z, log_det


def flow_inverse(model: FlowModel, zK: torch.Tensor, P=None) -> torch.Tensor:
    P = model.store if P is None else P
    d = model.cfg.d_z
    if zK.shape[-1] != d:
        raise ShapeError(f"latent length {zK.shape[-1]} != flow d_z {d}")
    z = zK
    for k in reversed(range(model.cfg.n_layers)):
        a, b = _split(z, k, d)
        s, t = _coupling(model, P, k, a)
        z = _join(a, (b - t) * torch.exp(-s), k)
    return z


def transformed_log_density(q0_logp, sum_log_det):
    return q0_logp - sum_log_det
