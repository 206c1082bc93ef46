"""Auxiliary scene networks.

PropNet is a deep-set encoder over a random pixel set of a cube followed by
four decoder heads for the propagation curves (tau, L_u, L_d, B). BgNet is a
small autoencoder on the cube's robust background mean. Their latent codes,
concatenated, condition EpsNet; their decoded curves form the scene estimate.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .cube import HsiCube, WhiteningModel, fit_whitening, flatten, sample_pixel_sets
from .errors import DomainError, ShapeError
from .nn import (
    AdamState,
    MlpConfig,
    ParamStore,
    adam_step,
    grad,
    init_mlp,
    mlp_forward,
)
from .seeding import derive_seed
from .spectra import AtmosphereParams, RadianceSpectrum, propagate

HEADS = ("tau", "upwelling", "downwelling", "blackbody")
DEFAULT_SET_SIZE = 200


@dataclass(frozen=True)
class PropNetConfig:
    n_bands: int
    d_prop: int = 12
    hidden_dim: int = 128
    enc_layers: int = 5
    m_layers: int = 5
    head_layers: int = 3
    activation: str = "tanh"

    @property
    def encoder(self) -> MlpConfig:
        return MlpConfig(self.n_bands, self.d_prop, self.hidden_dim, self.enc_layers, self.activation)

    @property
    def m_prop(self) -> MlpConfig:
        return MlpConfig(self.d_prop, self.d_prop, self.hidden_dim, self.m_layers, self.activation)

    @property
    def head(self) -> MlpConfig:
        return MlpConfig(self.d_prop, self.n_bands, self.hidden_dim, self.head_layers, self.activation)


@dataclass(frozen=True)
class BgNetConfig:
    n_bands: int
    d_bg: int = 12
    hidden_dim: int = 128
    enc_layers: int = 5
    dec_layers: int = 5
    activation: str = "tanh"

    @property
    def encoder(self) -> MlpConfig:
        return MlpConfig(self.n_bands, self.d_bg, self.hidden_dim, self.enc_layers, self.activation)

    @property
    def decoder(self) -> MlpConfig:
        return MlpConfig(self.d_bg, self.n_bands, self.hidden_dim, self.dec_layers, self.activation)


# stats: in_offset / in_scale normalise input radiance; out_scale multiplies
# the softplus radiance heads. All default to the identity.
class PropNetModel:
    def __init__(self, cfg: PropNetConfig, store: ParamStore):
        self.cfg = cfg
        self.store = store

    @classmethod
    def init(cls, cfg: PropNetConfig, seed: int) -> "PropNetModel":
        rng = np.random.default_rng(seed)
        store = ParamStore(stats={"in_offset": 0.0, "in_scale": 1.0, "out_scale": 1.0}, seed=seed)
        init_mlp(store, "E_prop", cfg.encoder, rng)
        init_mlp(store, "m_prop", cfg.m_prop, rng)
        for h in HEADS:
            init_mlp(store, f"D_prop.{h}", cfg.head, rng)
        return cls(cfg, store)


class BgNetModel:
    def __init__(self, cfg: BgNetConfig, store: ParamStore):
        self.cfg = cfg
        self.store = store

    @classmethod
    def init(cls, cfg: BgNetConfig, seed: int) -> "BgNetModel":
        rng = np.random.default_rng(seed)
        store = ParamStore(stats={"in_offset": 0.0, "in_scale": 1.0}, seed=seed)
        init_mlp(store, "E_bg", cfg.encoder, rng)
        init_mlp(store, "D_bg", cfg.decoder, rng)
        return cls(cfg, store)


@dataclass(frozen=True, eq=False)
class SceneEstimate:
    atm_hat: AtmosphereParams
    bg_hat: RadianceSpectrum
    c_prop: np.ndarray
    c_bg: np.ndarray

    @property
    def c(self) -> np.ndarray:
        return np.concatenate([self.c_prop, self.c_bg])

    def tokens(self) -> np.ndarray:
        """(5, r) curves tau, L_u, L_d, B, bg_hat in that order."""
        return np.vstack([self.atm_hat.stacked(), self.bg_hat.values[None]])


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.tensor(np.asarray(x, dtype=np.float64))


def _pixels(pixel_set) -> torch.Tensor:
    return _t(getattr(pixel_set, "spectra", pixel_set))


def propnet_encode(model: PropNetModel, pixel_set, P=None) -> torch.Tensor:
    """c_prop = m_prop(mean_j E_prop(L_j)); accepts (J, r) or batched (..., J, r)."""
    P = model.store if P is None else P
    x = _pixels(pixel_set)
    if x.shape[-2] == 0:
        raise DomainError("pixel set is empty")
    if x.shape[-1] != model.cfg.n_bands:
        raise ShapeError("pixel set is on a different grid")
    s = model.store.stats
    h = mlp_forward(P, "E_prop", model.cfg.encoder, (x - s["in_offset"]) / s["in_scale"])
    return mlp_forward(P, "m_prop", model.cfg.m_prop, h.mean(dim=-2))


def propnet_decode_stacked(model: PropNetModel, c_prop, P=None) -> torch.Tensor:
    """(..., 4, r) curves in tau, L_u, L_d, B order."""
    P = model.store if P is None else P
    c = _t(c_prop)
    scale = model.store.stats["out_scale"]
    outs = []
    for h in HEADS:
        raw = mlp_forward(P, f"D_prop.{h}", model.cfg.head, c)
        outs.append(torch.sigmoid(raw) if h == "tau" else scale * torch.nn.functional.softplus(raw))
    return torch.stack(outs, dim=-2)


def propnet_decode(model: PropNetModel, c_prop, P=None) -> AtmosphereParams:
    with torch.no_grad():
        curves = propnet_decode_stacked(model, c_prop, P).numpy()
    return AtmosphereParams(*curves)


def bgnet_forward(model: BgNetModel, bg_mean, P=None) -> tuple[torch.Tensor, torch.Tensor]:
    """(c_bg, bg_hat) for a background mean spectrum (or a batch of them)."""
    P = model.store if P is None else P
    x = _t(bg_mean.values if isinstance(bg_mean, RadianceSpectrum) else bg_mean)
    if x.shape[-1] != model.cfg.n_bands:
        raise ShapeError("background spectrum is on a different grid")
    s = model.store.stats
    c = mlp_forward(P, "E_bg", model.cfg.encoder, (x - s["in_offset"]) / s["in_scale"])
    out = mlp_forward(P, "D_bg", model.cfg.decoder, c)
    return c, s["in_offset"] + s["in_scale"] * out


def propnet_loss(model: PropNetModel, pixel_set, atm_true, beta: float, P=None,
                 atm_hat=None) -> torch.Tensor:
    """(1 - beta) * curve MSE + beta * MSE of unit-strength grey-body (eps = 0.5) radiance.

    Radiance curves are compared in units of the ``out_scale`` stat. Batches
    of sets with (..., 4, r) labels are averaged.
    """
    if not 0.0 <= beta <= 1.0:
        raise DomainError("beta must lie in [0, 1]")
    if atm_hat is None:
        atm_hat = propnet_decode_stacked(model, propnet_encode(model, pixel_set, P), P)
    true = _t(atm_true.stacked() if isinstance(atm_true, AtmosphereParams) else atm_true)
    scale = model.store.stats["out_scale"]
    w = true.new_tensor([1.0, 1.0 / scale, 1.0 / scale, 1.0 / scale])[:, None]
    curve = (((atm_hat - true) * w) ** 2).sum(-2).mean(-1)
    half = true.new_full(true.shape[:-2] + true.shape[-1:], 0.5)
    zero = torch.zeros_like(half)
    lp_true = propagate(half, true, 1.0, zero)
    lp_hat = propagate(half, atm_hat, 1.0, zero)
    prop = ((lp_hat - lp_true) / scale).pow(2).mean(-1)
    return ((1.0 - beta) * curve + beta * prop).mean()


def bgnet_loss(model: BgNetModel, bg_means, P=None) -> torch.Tensor:
    x = _t(bg_means)
    _, rec = bgnet_forward(model, x, P)
    return (((rec - x) / model.store.stats["in_scale"]) ** 2).mean()


def estimate_scene(propnet: PropNetModel, bgnet: BgNetModel, cube: HsiCube, seed: int,
                   whitening: WhiteningModel | None = None,
                   set_size: int = DEFAULT_SET_SIZE) -> SceneEstimate:
    """Encode one seeded pixel set and the robust background mean of ``cube``."""
    wm = whitening if whitening is not None else fit_whitening(cube)
    size = min(set_size, cube.n_pixels)
    ps = sample_pixel_sets(cube, size, 1, seed)[0]
    with torch.no_grad():
        c_prop = propnet_encode(propnet, ps)
        curves = propnet_decode_stacked(propnet, c_prop).numpy()
        c_bg, bg_hat = bgnet_forward(bgnet, wm.background_mean)
    return SceneEstimate(AtmosphereParams(*curves), RadianceSpectrum(cube.grid, bg_hat.numpy()),
                         c_prop.numpy(), c_bg.numpy())


# -- training --------------------------------------------------------------

@dataclass(frozen=True)
class AuxTrainConfig:
    epochs: int = 1000
    lr: float = 9e-4
    weight_decay: float = 5e-5
    sets_per_cube: int = 16
    set_size: int = DEFAULT_SET_SIZE
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _radiance_stats(cubes: list[HsiCube]) -> tuple[float, float]:
    x = np.concatenate([flatten(c) for c in cubes])
    return float(x.mean()), float(x.std())


def fit_propnet_stats(model: PropNetModel, cubes: list[HsiCube], atms: list[AtmosphereParams]) -> None:
    off, sd = _radiance_stats(cubes)
    model.store.stats.update(in_offset=off, in_scale=sd,
                             out_scale=float(np.mean([a.blackbody.mean() for a in atms])))


def fit_bgnet_stats(model: BgNetModel, bg_means: np.ndarray) -> None:
    model.store.stats.update(in_offset=float(bg_means.mean()), in_scale=float(max(bg_means.std(), 1e-6)))


def _set_batch(cubes, cfg: AuxTrainConfig, epoch: int) -> tuple[np.ndarray, list[int]]:
    sets, owner = [], []
    for i, cube in enumerate(cubes):
        size = min(cfg.set_size, cube.n_pixels)
        for ps in sample_pixel_sets(cube, size, cfg.sets_per_cube, derive_seed(cfg.seed, epoch, i)):
            sets.append(ps.spectra)
            owner.append(i)
    return np.stack(sets), owner


def train_propnet(model: PropNetModel, cubes: list[HsiCube], atms: list[AtmosphereParams],
                  cfg: AuxTrainConfig, log=None) -> list[dict]:
    """Full-batch Adam over ``sets_per_cube`` fresh pixel sets per cube each epoch.

    beta rises linearly from 0 at the first epoch to 1 at the last.
    """
    fit_propnet_stats(model, cubes, atms)
    labels = np.stack([a.stacked() for a in atms])
    state = AdamState()
    report = []
    for epoch in range(cfg.epochs):
        beta = epoch / max(cfg.epochs - 1, 1)
        sets, owner = _set_batch(cubes, cfg, epoch)
        x = torch.from_numpy(sets)
        y = torch.from_numpy(labels[owner])
        loss, g = grad(lambda P: propnet_loss(model, x, y, beta, P), model.store)
        new, state = adam_step(model.store, g, state, cfg.lr, weight_decay=cfg.weight_decay)
        model.store.replace(new)
        report.append({"epoch": epoch, "beta": beta, "loss": loss})
        if log:
            log(report[-1])
    return report


def bg_training_means(cubes: list[HsiCube], whitenings: list[WhiteningModel], cfg: AuxTrainConfig,
                      epoch: int) -> np.ndarray:
    """Robust means plus means of random inlier subsets (a little input jitter)."""
    out = []
    for i, (cube, wm) in enumerate(zip(cubes, whitenings)):
        out.append(wm.background_mean)
        inl = flatten(cube)[wm.inlier_mask]
        rng = np.random.default_rng(derive_seed(cfg.seed, "bg", epoch, i))
        size = min(cfg.set_size, inl.shape[0])
        for _ in range(cfg.sets_per_cube - 1):
            out.append(inl[rng.permutation(inl.shape[0])[:size]].mean(axis=0))
    return np.stack(out)


def train_bgnet(model: BgNetModel, cubes: list[HsiCube], cfg: AuxTrainConfig,
                whitenings: list[WhiteningModel] | None = None, log=None) -> list[dict]:
    wms = whitenings if whitenings is not None else [fit_whitening(c) for c in cubes]
    fit_bgnet_stats(model, np.stack([w.background_mean for w in wms]))
    state = AdamState()
    report = []
    for epoch in range(cfg.epochs):
        x = torch.from_numpy(bg_training_means(cubes, wms, cfg, epoch))
        loss, g = grad(lambda P: bgnet_loss(model, x, P), model.store)
        new, state = adam_step(model.store, g, state, cfg.lr, weight_decay=cfg.weight_decay)
        model.store.replace(new)
        report.append({"epoch": epoch, "loss": loss})
        if log:
            log(report[-1])
    return report
