"""EpsNet: conditioned latent-variable inversion from radiance to emissivity.

Data flow for one pixel::

    queries {L, L_w}  --CA over scene curves-->  x1 (length r)
    x1 --4 FNO blocks--> (mu, sigma) --reparameterise--> z0 --flow--> zK
    zK --CA over {c_prop, c_bg}--> x1_dec
    x1_dec --D_eps--> normalised shape      x1_dec --D_L--> (L_hat, sigma_L)
    zK + c --ScaleNet--> (mean, sdev)       x1 + zK + c --VarianceNet--> sigma_lambda

Both cross-attention steps add their input back (x + CA(x, .)), so the
unconditioned ablation, which feeds zero scene tokens and zero codes, reduces
to a plain VAE on {L, L_w}.

Inputs are normalised with fixed stats held in the parameter store:
``L_off``/``L_scale`` for pixel radiance, ``lw_scale`` for whitened radiance,
``curve_scale`` for scene curves, and ``mean_off``/``mean_scale``/``sdev_scale``
for the ScaleNet outputs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .condnets import SceneEstimate
from .errors import ConfigError, DomainError, ShapeError
from .flow import FlowConfig, FlowModel, flow_forward
from .nn import (
    AttentionConfig,
    FnoBlockConfig,
    MlpConfig,
    ParamStore,
    cross_attention,
    fno_mlp_block,
    geometric_lengths,
    init_attention,
    init_fno_block,
    init_mlp,
    mlp_forward,
)
from .spectra import EmissivitySpectrum, WavelengthGrid, softclamp

SIGMA_FLOOR_LATENT = 1e-6
# init scale of the last decoder block, so heads start near zero and sigma near softplus(0)
OUTPUT_GAIN = 0.1
LOG_2PI = math.log(2 * math.pi)

DEFAULT_STATS = {"L_off": 0.0, "L_scale": 1.0, "lw_scale": 1.0, "curve_scale": 1.0,
                 "mean_off": 0.5, "mean_scale": 1.0, "sdev_scale": 1.0}


@dataclass(frozen=True)
class EpsNetConfig:
    n_bands: int
    d_z: int = 64
    d_prop: int = 12
    d_bg: int = 12
    n_blocks: int = 4
    n_layers: int = 4
    max_modes: int = 16
    flow_layers: int = 4
    flow_hidden: int = 64
    head_hidden: int = 128
    head_layers: int = 5
    sigma_floor: float = 1e-3
    conditioned: bool = True

    def __post_init__(self):
        if self.d_z < 2 or self.d_z % 2:
            raise ConfigError("d_z must be even")
        if self.d_prop != self.d_bg:
            raise ConfigError("latent cross attention needs d_prop == d_bg (one token each)")
        if self.n_blocks < 1:
            raise ConfigError("n_blocks must be >= 1")

    @property
    def d_c(self) -> int:
        return self.d_prop + self.d_bg

    @property
    def flow(self) -> FlowConfig:
        return FlowConfig(self.d_z, self.flow_layers, self.flow_hidden)

    def _blocks(self, start: int, end: int, act: str) -> list[FnoBlockConfig]:
        lens = geometric_lengths(start, end, self.n_blocks)
        return [FnoBlockConfig.make(lens[j], lens[j + 1], self.n_layers, act, self.max_modes)
                for j in range(self.n_blocks)]

    @property
    def encoder(self) -> list[FnoBlockConfig]:
        return self._blocks(self.n_bands, 2 * self.d_z, "sigmoid")

    @property
    def dec_eps(self) -> list[FnoBlockConfig]:
        return self._blocks(self.d_z, self.n_bands, "swish")

    @property
    def dec_L(self) -> list[FnoBlockConfig]:
        return self._blocks(self.d_z, 2 * self.n_bands, "swish")

    @property
    def ca_in(self) -> AttentionConfig:
        return AttentionConfig(self.n_bands, self.n_bands, self.n_bands, aggregate_mean=True)

    @property
    def ca_lat(self) -> AttentionConfig:
        return AttentionConfig(self.d_z, self.d_prop, self.d_z)

    @property
    def scale_net(self) -> MlpConfig:
        return MlpConfig(self.d_z + self.d_c, 2, self.head_hidden, self.head_layers, "tanh")

    @property
    def variance_net(self) -> MlpConfig:
        return MlpConfig(self.n_bands + self.d_z + self.d_c, self.n_bands, self.head_hidden,
                         self.head_layers, "tanh")

    def to_dict(self) -> dict:
        return asdict(self)


class EpsNetModel:
    def __init__(self, cfg: EpsNetConfig, store: ParamStore):
        self.cfg = cfg
        self.store = store
        self.flow = FlowModel(cfg.flow, store, "flow")

    @classmethod
    def init(cls, cfg: EpsNetConfig, seed: int) -> "EpsNetModel":
        rng = np.random.default_rng(seed)
        store = ParamStore(stats=DEFAULT_STATS, seed=seed)
        init_attention(store, "attention.in", cfg.ca_in, rng)
        init_attention(store, "attention.latent", cfg.ca_lat, rng)
        for j, b in enumerate(cfg.encoder):
            init_fno_block(store, f"encoder.{j}", b, rng)
        FlowModel.init(cfg.flow, rng, store, "flow")
        for name in ("dec_L", "dec_eps"):
            blocks = getattr(cfg, name)
            for j, b in enumerate(blocks):
                init_fno_block(store, f"{name}.{j}", b, rng,
                               gain=OUTPUT_GAIN if j == len(blocks) - 1 else 1.0)
        init_mlp(store, "scale_net", cfg.scale_net, rng)
        init_mlp(store, "variance_net", cfg.variance_net, rng)
        return cls(cfg, store)

    @property
    def grid_bands(self) -> int:
        return self.cfg.n_bands


@dataclass(frozen=True, eq=False)
class PosteriorDraw:
    z0: torch.Tensor
    zK: torch.Tensor
    sum_log_det: torch.Tensor
    q0_log_density: torch.Tensor


@dataclass(frozen=True, eq=False)
class EmissivityDistribution:
    scaled: np.ndarray
    normalized: np.ndarray
    mean_vec: np.ndarray
    cov: np.ndarray
    norm_mean_vec: np.ndarray
    norm_cov: np.ndarray

    @property
    def n_samples(self) -> int:
        return self.scaled.shape[0]

    @property
    def sdev(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    @property
    def norm_sdev(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.norm_cov), 0.0, None))

    def moments(self, space: str) -> tuple[np.ndarray, np.ndarray]:
        if space == "scaled":
            return self.mean_vec, self.cov
        if space == "normalized":
            return self.norm_mean_vec, self.norm_cov
        raise DomainError(f"unknown space {space!r}")

    @classmethod
    def from_samples(cls, scaled: np.ndarray, normalized: np.ndarray) -> "EmissivityDistribution":
        if scaled.shape[0] < 2:
            raise DomainError("an emissivity distribution needs at least 2 samples")
        return cls(scaled, normalized, scaled.mean(axis=0), np.cov(scaled, rowvar=False),
                   normalized.mean(axis=0), np.cov(normalized, rowvar=False))


# -- tensor plumbing --------------------------------------------------------

def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.tensor(np.asarray(getattr(x, "values", x), dtype=np.float64))


def scene_inputs(model: EpsNetModel, scene: SceneEstimate | None) -> tuple[torch.Tensor, torch.Tensor]:
    """Normalised (5, r) scene tokens and the d_c code; zeros when unconditioned."""
    cfg = model.cfg
    if scene is None or not cfg.conditioned:
        return torch.zeros(5, cfg.n_bands, dtype=torch.float64), torch.zeros(cfg.d_c, dtype=torch.float64)
    tok = scene.tokens().copy()
    if tok.shape[1] != cfg.n_bands:
        raise ShapeError("scene estimate is on a different grid")
    tok[1:] /= model.store.stats["curve_scale"]
    return torch.tensor(tok), torch.tensor(scene.c)


def input_queries(model: EpsNetModel, L, L_w) -> torch.Tensor:
    """(..., 2, r) normalised query tokens {L, L_w}."""
    s = model.store.stats
    L, L_w = _t(L), _t(L_w)
    if L.shape[-1] != model.cfg.n_bands or L_w.shape[-1] != model.cfg.n_bands:
        raise ShapeError("radiance length does not match the model")
    return torch.stack([(L - s["L_off"]) / s["L_scale"], L_w / s["lw_scale"]], dim=-2)


def _blocks(P, prefix: str, cfgs: list[FnoBlockConfig], x: torch.Tensor, act) -> torch.Tensor:
    for j, b in enumerate(cfgs):
        x = fno_mlp_block(P, f"{prefix}.{j}", b, x)
        if j < len(cfgs) - 1:
            x = act(x)
    return x


def encoder_input(model: EpsNetModel, queries, tokens, P=None) -> torch.Tensor:
    """x1 = mean over the query tokens of (q + CA(q, scene tokens))."""
    P = model.store if P is None else P
    if tokens.shape[-2] == 0:
        raise DomainError("no scene tokens")
    kv = tokens.expand(*queries.shape[:-2], *tokens.shape[-2:]) if tokens.ndim < queries.ndim else tokens
    return queries.mean(-2) + cross_attention(P, "attention.in", model.cfg.ca_in, queries, kv)


def encode_tensors(model: EpsNetModel, x1, P=None) -> tuple[torch.Tensor, torch.Tensor]:
    P = model.store if P is None else P
    out = _blocks(P, "encoder", model.cfg.encoder, x1, torch.sigmoid)
    d = model.cfg.d_z
    return out[..., :d], F.softplus(out[..., d:]) + SIGMA_FLOOR_LATENT


def encode(model: EpsNetModel, L, L_w, scene: SceneEstimate | None) -> tuple[np.ndarray, np.ndarray]:
    tokens, _ = scene_inputs(model, scene)
    with torch.no_grad():
        mu, sigma = encode_tensors(model, encoder_input(model, input_queries(model, L, L_w), tokens))
    return mu.numpy(), sigma.numpy()


def gaussian_log_density(x, mu, sigma) -> torch.Tensor:
    """Sum over the last axis of log N(x; mu, sigma^2)."""
    return -0.5 * (LOG_2PI + 2 * torch.log(sigma) + ((x - mu) / sigma) ** 2).sum(-1)


def reparameterize_tensors(mu, sigma, eta) -> PosteriorDraw:
    z0 = mu + sigma * eta
    q0 = -0.5 * (LOG_2PI + 2 * torch.log(sigma) + eta**2).sum(-1)
    return PosteriorDraw(z0, z0, torch.zeros_like(q0), q0)


def reparameterize(mu, sigma, seed: int, n: int | None = None) -> PosteriorDraw:
    """z0 = mu + sigma * eta with seeded eta ~ N(0, I); ``n`` draws a batch."""
    mu, sigma = _t(mu), _t(sigma)
    if not torch.all(sigma > 0):
        raise DomainError("sigma must be positive")
    shape = (mu.shape[-1],) if n is None else (n, mu.shape[-1])
    eta = torch.tensor(np.random.default_rng(seed).standard_normal(shape))
    return reparameterize_tensors(mu, sigma, eta)


def apply_flow(model: EpsNetModel, draw: PosteriorDraw, P=None) -> PosteriorDraw:
    zK, ld = flow_forward(model.flow, draw.z0, P)
    return PosteriorDraw(draw.z0, zK, ld, draw.q0_log_density)


def latent_input(model: EpsNetModel, zK, c, P=None) -> torch.Tensor:
    """zK + CA(zK, {c_prop, c_bg})."""
    P = model.store if P is None else P
    cfg = model.cfg
    keys = torch.stack([c[..., : cfg.d_prop], c[..., cfg.d_prop:]], dim=-2)
    if keys.ndim < zK.ndim + 1:
        keys = keys.expand(*zK.shape[:-1], *keys.shape[-2:])
    return zK + cross_attention(P, "attention.latent", cfg.ca_lat, zK.unsqueeze(-2), keys).squeeze(-2)


def decode_tensors(model: EpsNetModel, zK, c, x1, P=None) -> dict[str, torch.Tensor]:
    P = model.store if P is None else P
    cfg = model.cfg
    s = model.store.stats
    if c.ndim < zK.ndim:
        c = c.expand(*zK.shape[:-1], c.shape[-1])
    if x1.ndim < zK.ndim:
        x1 = x1.expand(*zK.shape[:-1], x1.shape[-1])
    h = latent_input(model, zK, c, P)
    eps_tilde = _blocks(P, "dec_eps", cfg.dec_eps, h, F.silu)
    rad = _blocks(P, "dec_L", cfg.dec_L, h, F.silu)
    zc = torch.cat([zK, c], -1)
    sc = mlp_forward(P, "scale_net", cfg.scale_net, zc)
    var = mlp_forward(P, "variance_net", cfg.variance_net, torch.cat([x1, zK, c], -1))
    r = cfg.n_bands
    return {
        "eps_tilde": eps_tilde,
        "sigma_lambda": F.softplus(var) + cfg.sigma_floor,
        "eps_bar": s["mean_off"] + s["mean_scale"] * sc[..., 0],
        "sigma_eps": s["sdev_scale"] * F.softplus(sc[..., 1]) / math.log(2.0),
        "L_hat_n": rad[..., :r],
        "sigma_L_n": F.softplus(rad[..., r:]) + cfg.sigma_floor,
    }


def assemble_scaled(eps_tilde_hat, eps_bar_hat, sigma_eps_hat):
    """softclamp(sigma * shape + mean) onto [0, 1]; numpy or torch, batched."""
    if isinstance(eps_tilde_hat, torch.Tensor):
        return softclamp(sigma_eps_hat[..., None] * eps_tilde_hat + eps_bar_hat[..., None])
    e = np.asarray(eps_tilde_hat, dtype=np.float64)
    m = np.asarray(eps_bar_hat, dtype=np.float64)
    sd = np.asarray(sigma_eps_hat, dtype=np.float64)
    if np.any(sd < 0):
        raise DomainError("sigma_eps must be nonnegative")
    return softclamp(sd[..., None] * e + m[..., None])


def _condition(model, L, L_w, scene):
    tokens, c = scene_inputs(model, scene)
    x1 = encoder_input(model, input_queries(model, L, L_w), tokens)
    return x1, c


def decode_emissivity(model: EpsNetModel, draw: PosteriorDraw, scene: SceneEstimate | None,
                      x1) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(shape, sigma_lambda, mean, sdev) for the draw; ``x1`` is the encoder input."""
    _, c = scene_inputs(model, scene)
    with torch.no_grad():
        out = decode_tensors(model, draw.zK, c, _t(x1))
    return (out["eps_tilde"].numpy(), out["sigma_lambda"].numpy(),
            out["eps_bar"].numpy(), out["sigma_eps"].numpy())


def decode_radiance(model: EpsNetModel, draw: PosteriorDraw, scene: SceneEstimate | None,
                    x1=None) -> tuple[np.ndarray, np.ndarray]:
    """(L_hat, sigma_L) in microflicks."""
    _, c = scene_inputs(model, scene)
    if x1 is None:
        x1 = torch.zeros(model.cfg.n_bands, dtype=torch.float64)
    s = model.store.stats
    with torch.no_grad():
        out = decode_tensors(model, draw.zK, c, _t(x1))
    return (out["L_hat_n"].numpy() * s["L_scale"] + s["L_off"], out["sigma_L_n"].numpy() * s["L_scale"])


def sample_posterior(model: EpsNetModel, L, L_w, scene: SceneEstimate | None, n: int = 1280,
                     seed: int = 0) -> EmissivityDistribution:
    """n Monte-Carlo emissivity draws for one pixel (one batched forward pass)."""
    if n < 2:
        raise DomainError("need n >= 2 posterior samples")
    with torch.no_grad():
        x1, c = _condition(model, L, L_w, scene)
        mu, sigma = encode_tensors(model, x1)
        draw = apply_flow(model, reparameterize(mu, sigma, seed, n))
        out = decode_tensors(model, draw.zK, c, x1)
        scaled = assemble_scaled(out["eps_tilde"], out["eps_bar"], out["sigma_eps"])
    return EmissivityDistribution.from_samples(scaled.numpy(), out["eps_tilde"].numpy())


def sample_posterior_batch(model: EpsNetModel, L, L_w, scene: SceneEstimate | None, n: int,
                           seeds) -> list[EmissivityDistribution]:
    """``sample_posterior`` for several pixels of one scene, one seed each."""
    return [sample_posterior(model, L[i], L_w[i], scene, n, s) for i, s in enumerate(seeds)]


def distribution_spectrum(dist: EmissivityDistribution, grid: WavelengthGrid) -> EmissivitySpectrum:
    return EmissivitySpectrum(grid, np.clip(dist.mean_vec, 0.0, 1.0))
