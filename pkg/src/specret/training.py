"""Losses, the loss-weight schedule and the EpsNet training loop.

All losses accept torch tensors (and numpy arrays, converted on entry) with a
leading batch axis K. The composite objective is

    omega1 * inversion + omega2 * propagation + omega3 * regularization

where inversion = shape + smooth + mean + sdev + NLL(shape) + eps, plus an
optional radiance NLL (weight 0 by default).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .condnets import BgNetModel, PropNetModel, estimate_scene
from .cube import whiten
from .epsnet import (
    EpsNetModel,
    PosteriorDraw,
    apply_flow,
    assemble_scaled,
    decode_tensors,
    encode_tensors,
    encoder_input,
    gaussian_log_density,
    input_queries,
    reparameterize_tensors,
    scene_inputs,
)
from .errors import ConfigError, DomainError, NumericError, ShapeError
from .nn import AdamState, adam_step, grad
from .seeding import derive_seed
from .spectra import propagate, zscore_rows
from .synth import Matern52Params, Scene, augment_batch

LOSS_KEYS = ("shape", "smooth", "sdev", "mean", "nll_eps", "eps", "nll_L", "inversion",
             "propagation", "regularization", "elbo", "composite")


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.tensor(np.asarray(x, dtype=np.float64))


# -- weights and schedule ---------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    omega1: float = 1.0
    omega2: float = 1.0
    omega3: float = 1.0
    shape: float = 1.0
    smooth: float = 1.0
    sdev: float = 1.0
    mean: float = 1.0
    eps_bar: float = 1.0
    eps: float = 1.0
    # optional heteroscedastic NLL on the radiance decoder; off in the six-term inversion
    radiance: float = 0.0

    def __post_init__(self):
        if any(v < 0 for v in asdict(self).values()):
            raise ConfigError("loss weights must be nonnegative")


@dataclass(frozen=True)
class WeightSchedule:
    """Phase boundaries as fractions of the total epoch count E."""

    total_epochs: int
    ramp_start: float = 0.2
    ramp_end: float = 0.4
    reg_start: float = 0.4
    base: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be >= 1")
        if not 0 <= self.ramp_start <= self.ramp_end <= 1 or not 0 <= self.reg_start <= 1:
            raise ConfigError("schedule fractions must be ordered within [0, 1]")


def schedule_weights(epoch: int, schedule: WeightSchedule) -> LossWeights:
    """omega1 = 1; omega2 ramps 0 -> 1 over [ramp_start, ramp_end] * E; omega3 steps to 1."""
    if epoch < 0:
        raise DomainError("epoch must be >= 0")
    E = schedule.total_epochs
    a, b = schedule.ramp_start * E, schedule.ramp_end * E
    if epoch <= a:
        w2 = 0.0
    elif epoch >= b:
        w2 = 1.0
    else:
        w2 = (epoch - a) / (b - a)
    w3 = 1.0 if epoch >= schedule.reg_start * E else 0.0
    base = schedule.base
    return replace(base, omega1=base.omega1, omega2=base.omega2 * w2, omega3=base.omega3 * w3)


# -- individual losses ------------------------------------------------------

def loss_shape(eps_tilde_true, eps_tilde_hat, weight: float = 1.0) -> torch.Tensor:
    """weight * mean_k (1 - cos(true_k, hat_k)); a zero-norm row scores 1."""
    a, b = _t(eps_tilde_true), _t(eps_tilde_hat)
    if a.shape != b.shape:
        raise ShapeError("shape loss needs matching arrays")
    denom = a.norm(dim=-1) * b.norm(dim=-1)
    ok = denom > 0
    cos = (a * b).sum(-1) / torch.where(ok, denom, torch.ones_like(denom))
    term = torch.where(ok, 1.0 - cos, torch.ones_like(cos))
    return weight * term.mean()


def loss_smooth(eps_hat, weight: float = 1.0) -> torch.Tensor:
    e = _t(eps_hat)
    if e.ndim == 1:
        e = e[None]
    J = e.shape[-1]
    if J < 3:
        raise DomainError("smoothness loss needs at least 3 bands")
    d2 = e[..., 2:] - 2 * e[..., 1:-1] + e[..., :-2]
    return weight * (d2**2).sum() / (e.shape[0] * (J - 2))


def loss_scale(eps_bar_hat, sigma_hat, eps_bar_true, sigma_true, w_mean: float = 1.0,
               w_sdev: float = 1.0) -> tuple[torch.Tensor, torch.Tensor]:
    m = w_mean * ((_t(eps_bar_hat) - _t(eps_bar_true)) ** 2).mean()
    s = w_sdev * ((_t(sigma_hat) - _t(sigma_true)) ** 2).mean()
    return m, s


def loss_hetero_nll(target, prediction, sigma, weight: float = 1.0) -> torch.Tensor:
    """weight/K * sum_k sum_j [log sigma^2 + (prediction - target)^2 / sigma^2].

    Not bounded below by 0: it goes negative once sigma < 1 fits the residuals.
    """
    y, p, s = _t(target), _t(prediction), _t(sigma)
    if not bool((s > 0).all()):
        raise DomainError("heteroscedastic sigma must be positive")
    if y.ndim == 1:
        y, p, s = y[None], p[None], s[None]
    v = s * s
    return weight * (torch.log(v) + (p - y) ** 2 / v).sum() / y.shape[0]


def loss_eps(eps_hat, eps_true, weight: float = 1.0) -> torch.Tensor:
    d = _t(eps_hat) - _t(eps_true)
    if d.ndim == 1:
        d = d[None]
    return weight * (d**2).sum() / d.shape[0]


def _safe_norm(x: torch.Tensor) -> torch.Tensor:
    ss = (x * x).sum(-1)
    pos = ss > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, ss, torch.ones_like(ss))), torch.zeros_like(ss))


def loss_propagation(eps_hat, atm, alpha, bg, L_true, scale: float = 1.0,
                     squared: bool = False) -> torch.Tensor:
    """Batch mean of ||f_p(eps_hat; A, alpha, bg) - L|| / scale (squared when asked).

    ``atm`` is (K, 4, r) or (4, r) in tau, L_u, L_d, B order.
    """
    e = _t(eps_hat)
    pred = propagate(e, _t(atm), _t(alpha), _t(bg))
    diff = (pred - _t(L_true)) / scale
    per = (diff * diff).sum(-1) if squared else _safe_norm(diff)
    return per.mean()


def kl_diag_gaussian(mu, sigma) -> torch.Tensor:
    """KL(N(mu, diag sigma^2) || N(0, I)), summed over the last axis."""
    m, s = _t(mu), _t(sigma)
    if not bool((s > 0).all()):
        raise DomainError("sigma must be positive")
    return 0.5 * (m * m + s * s - 1.0 - torch.log(s * s)).sum(-1)


def loss_regularization(mu_phi, sigma_phi, draws) -> torch.Tensor:
    """Batch-mean KL minus the mean flow log-determinant over the draws."""
    if isinstance(draws, PosteriorDraw):
        draws = [draws]
    if not draws:
        raise DomainError("regularization needs at least one posterior draw")
    log_det = torch.stack([_t(d.sum_log_det) for d in draws]).mean(0)
    return (kl_diag_gaussian(mu_phi, sigma_phi) - log_det).mean()


def elbo_terms(L_n, L_hat_n, sigma_L_n, eps_tilde, eps_tilde_hat, sigma_lambda, mu, sigma,
               sum_log_det) -> torch.Tensor:
    """Batch mean of log p(L|z,c) + log p(eps~|z,c) - flow-corrected KL."""
    rec = gaussian_log_density(_t(L_n), _t(L_hat_n), _t(sigma_L_n))
    rec = rec + gaussian_log_density(_t(eps_tilde), _t(eps_tilde_hat), _t(sigma_lambda))
    kl = kl_diag_gaussian(mu, sigma) - _t(sum_log_det)
    return (rec - kl).mean()


# -- batches ----------------------------------------------------------------

@dataclass(eq=False)
class ExampleArrays:
    """Training examples of several scenes stacked into arrays."""

    L: np.ndarray
    L_w: np.ndarray
    eps: np.ndarray
    alpha: np.ndarray
    bg: np.ndarray
    cube: np.ndarray
    atm: np.ndarray  # (n_cubes, 4, r)

    @property
    def n(self) -> int:
        return self.L.shape[0]

    @classmethod
    def from_scenes(cls, scenes: list[Scene]) -> "ExampleArrays":
        rows = [(ex, i) for i, sc in enumerate(scenes) for ex in sc.examples]
        if not rows:
            r = scenes[0].cube.grid.n_bands if scenes else 0
            z = np.zeros((0, r))
            return cls(z, z, z, np.zeros(0), z, np.zeros(0, int),
                       np.stack([s.atm.stacked() for s in scenes]) if scenes else np.zeros((0, 4, r)))
        return cls(
            L=np.stack([ex.radiance for ex, _ in rows]),
            L_w=np.stack([ex.whitened for ex, _ in rows]),
            eps=np.stack([ex.emissivity.values for ex, _ in rows]),
            alpha=np.array([ex.alpha for ex, _ in rows]),
            bg=np.stack([ex.background for ex, _ in rows]),
            cube=np.array([i for _, i in rows]),
            atm=np.stack([s.atm.stacked() for s in scenes]),
        )


@dataclass(eq=False)
class TrainBatch:
    L: torch.Tensor
    L_w: torch.Tensor
    tokens: torch.Tensor
    c: torch.Tensor
    eps: torch.Tensor
    eps_tilde: torch.Tensor
    eps_mean: torch.Tensor
    eps_sdev: torch.Tensor
    atm: torch.Tensor
    alpha: torch.Tensor
    bg: torch.Tensor

    def to(self, dtype) -> "TrainBatch":
        return TrainBatch(**{k: v.to(dtype) for k, v in self.__dict__.items()})


def make_batch(model: EpsNetModel, L, L_w, eps, alpha, bg, atm, tokens, codes) -> TrainBatch:
    z, m, s = zscore_rows(np.asarray(eps))
    return TrainBatch(_t(L), _t(L_w), _t(tokens), _t(codes), _t(eps), _t(z), _t(m), _t(s),
                      _t(atm), _t(alpha), _t(bg))


def composite_loss(model: EpsNetModel, batch: TrainBatch, weights: LossWeights, eta, P=None,
                   use_flow: bool | None = None, squared_propagation: bool = False
                   ) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Weighted objective and its itemised parts for one batch and one draw per example.

    The flow is bypassed while omega3 is 0 (unless ``use_flow`` says otherwise),
    so burn-in leaves flow parameters untouched.
    """
    P = model.store if P is None else P
    s = model.store.stats
    if use_flow is None:
        use_flow = weights.omega3 > 0
    x1 = encoder_input(model, input_queries(model, batch.L, batch.L_w), batch.tokens, P)
    mu, sigma = encode_tensors(model, x1, P)
    draw = reparameterize_tensors(mu, sigma, eta)
    if use_flow:
        draw = apply_flow(model, draw, P)
    out = decode_tensors(model, draw.zK, batch.c, x1, P)
    eps_hat = assemble_scaled(out["eps_tilde"], out["eps_bar"], out["sigma_eps"])
    L_n = (batch.L - s["L_off"]) / s["L_scale"]

    parts = {}
    parts["shape"] = loss_shape(batch.eps_tilde, out["eps_tilde"], weights.shape)
    parts["smooth"] = loss_smooth(eps_hat, weights.smooth)
    parts["mean"], parts["sdev"] = loss_scale(out["eps_bar"], out["sigma_eps"], batch.eps_mean,
                                              batch.eps_sdev, weights.mean, weights.sdev)
    parts["nll_eps"] = loss_hetero_nll(batch.eps_tilde, out["eps_tilde"], out["sigma_lambda"],
                                       weights.eps_bar)
    parts["eps"] = loss_eps(eps_hat, batch.eps, weights.eps)
    parts["nll_L"] = loss_hetero_nll(L_n, out["L_hat_n"], out["sigma_L_n"], weights.radiance)
    parts["inversion"] = sum(parts[k] for k in ("shape", "smooth", "mean", "sdev", "nll_eps",
                                                "eps", "nll_L"))
    parts["propagation"] = loss_propagation(eps_hat, batch.atm, batch.alpha, batch.bg, batch.L,
                                            s["L_scale"], squared_propagation)
    parts["regularization"] = loss_regularization(mu, sigma, [draw])
    with torch.no_grad():
        parts["elbo"] = elbo_terms(L_n, out["L_hat_n"], out["sigma_L_n"], batch.eps_tilde,
                                   out["eps_tilde"], out["sigma_lambda"], mu, sigma, draw.sum_log_det)
    total = (weights.omega1 * parts["inversion"] + weights.omega2 * parts["propagation"]
             + weights.omega3 * parts["regularization"])
    parts["composite"] = total
    return total, parts


def elbo(model: EpsNetModel, batch: TrainBatch, n_draws: int = 8, seed: int = 0) -> float:
    """Monte-Carlo ELBO (monitor only) averaged over ``n_draws`` posterior draws."""
    if n_draws < 1:
        raise DomainError("n_draws must be >= 1")
    rng = np.random.default_rng(seed)
    vals = []
    with torch.no_grad():
        for _ in range(n_draws):
            eta = torch.tensor(rng.standard_normal((batch.L.shape[0], model.cfg.d_z)))
            _, parts = composite_loss(model, batch, LossWeights(), eta, use_flow=True)
            vals.append(float(parts["elbo"]))
    return float(np.mean(vals))


# -- training loop ----------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 150
    lr_decay: float = 0.99
    decay_mode: str = "lr"
    weight_decay: float = 5e-5
    batch_size: int = 64
    seed: int = 0
    gp_lengthscale: float = 0.4
    gp_variance: float = 1.0
    ramp_start: float = 0.2
    ramp_end: float = 0.4
    reg_start: float = 0.4
    weights: LossWeights = field(default_factory=LossWeights)
    squared_propagation: bool = False
    precision: str = "f64"

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.decay_mode not in ("lr", "param"):
            raise ConfigError("decay_mode must be 'lr' or 'param'")
        if self.precision not in ("f32", "f64"):
            raise ConfigError("precision must be f32 or f64")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @property
    def schedule(self) -> WeightSchedule:
        return WeightSchedule(self.epochs, self.ramp_start, self.ramp_end, self.reg_start, self.weights)

    def epoch_lr(self, epoch: int) -> float:
        return self.lr * self.lr_decay**epoch if self.decay_mode == "lr" else self.lr

    def epoch_weight_decay(self) -> float:
        # "param" mode reads the 0.99 coefficient as per-step parameter shrinkage
        return self.weight_decay if self.decay_mode == "lr" else 1.0 - self.lr_decay

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    epoch: int
    adam: AdamState
    report: list[dict]


def fit_epsnet_stats(model: EpsNetModel, ex: ExampleArrays) -> None:
    _, m, s = zscore_rows(ex.eps)
    model.store.stats.update(
        L_off=float(ex.L.mean()),
        L_scale=float(max(ex.L.std(), 1e-9)),
        lw_scale=float(max(np.sqrt((ex.L_w**2).mean()), 1e-9)),
        curve_scale=float(ex.atm[:, 3].mean()),
        mean_off=float(m.mean()),
        mean_scale=float(max(m.std(), 1e-3)),
        sdev_scale=float(max(s.mean(), 1e-3)),
    )


def augmented_epoch(ex: ExampleArrays, scenes: list[Scene], cfg: TrainConfig, epoch: int):
    """Fresh GP-perturbed emissivities and their re-propagated, re-whitened radiance."""
    grid = scenes[0].cube.grid
    seeds = [derive_seed(cfg.seed, "aug", epoch, i) for i in range(ex.n)]
    star, _, _, _ = augment_batch(ex.eps, grid, Matern52Params(cfg.gp_lengthscale, cfg.gp_variance), seeds)
    L = propagate(star, ex.atm[ex.cube], ex.alpha, ex.bg)
    L_w = np.empty_like(L)
    for i, sc in enumerate(scenes):
        sel = ex.cube == i
        if sel.any():
            L_w[sel] = whiten(L[sel], sc.ensure_whitening())
    return star, L, L_w


def scene_conditioning(model: EpsNetModel, scenes: list[Scene], propnet, bgnet, seed: int,
                       epoch: int | None) -> tuple[np.ndarray, np.ndarray]:
    """Per-cube (tokens, codes); zeros for the unconditioned model."""
    toks, codes = [], []
    for i, sc in enumerate(scenes):
        est = None
        if model.cfg.conditioned:
            key = (seed, "scene", i) if epoch is None else (seed, "scene", epoch, i)
            est = estimate_scene(propnet, bgnet, sc.cube, derive_seed(*key), sc.ensure_whitening())
        t, c = scene_inputs(model, est)
        toks.append(t.numpy())
        codes.append(c.numpy())
    return np.stack(toks), np.stack(codes)


def _itemise(parts: dict[str, torch.Tensor]) -> dict[str, float]:
    return {k: float(parts[k].detach()) for k in LOSS_KEYS}


def evaluate(model: EpsNetModel, scenes: list[Scene], propnet, bgnet, cfg: TrainConfig,
             weights: LossWeights, seed_key=("val",)) -> dict[str, float] | None:
    """Itemised losses on unaugmented examples (one seeded draw each)."""
    ex = ExampleArrays.from_scenes(scenes)
    if ex.n == 0:
        return None
    toks, codes = scene_conditioning(model, scenes, propnet, bgnet, derive_seed(cfg.seed, *seed_key), None)
    batch = make_batch(model, ex.L, ex.L_w, ex.eps, ex.alpha, ex.bg, ex.atm[ex.cube],
                       toks[ex.cube], codes[ex.cube])
    eta = torch.tensor(np.random.default_rng(derive_seed(cfg.seed, *seed_key, "eta"))
                       .standard_normal((ex.n, model.cfg.d_z)))
    with torch.no_grad():
        _, parts = composite_loss(model, batch, weights, eta, use_flow=True,
                                  squared_propagation=cfg.squared_propagation)
    return _itemise(parts)


def train_epsnet(model: EpsNetModel, train_scenes: list[Scene], val_scenes: list[Scene],
                 propnet: PropNetModel | None, bgnet: BgNetModel | None, cfg: TrainConfig, *,
                 state: TrainState | None = None, stop_after: int | None = None,
                 on_epoch=None) -> TrainState:
    """Train in place; returns the state (epoch counter, optimizer, report).

    Every random choice is keyed by (seed, epoch, index), so a run resumed
    from a saved state at an epoch boundary matches an uninterrupted run bit
    for bit. ``stop_after`` ends the call after that many epochs in total.
    """
    if model.cfg.conditioned and (propnet is None or bgnet is None):
        raise ConfigError("conditioned training needs trained PropNet and BgNet models")
    ex = ExampleArrays.from_scenes(train_scenes)
    if ex.n == 0:
        raise DomainError("training set has no examples")
    if state is None:
        fit_epsnet_stats(model, ex)
        state = TrainState(0, AdamState(), [])
    dtype = torch.float32 if cfg.precision == "f32" else torch.float64
    sched = cfg.schedule
    end = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    while state.epoch < end:
        epoch = state.epoch
        w = schedule_weights(epoch, sched)
        lr = cfg.epoch_lr(epoch)
        star, L, L_w = augmented_epoch(ex, train_scenes, cfg, epoch)
        toks, codes = scene_conditioning(model, train_scenes, propnet, bgnet, cfg.seed, epoch)
        order = np.random.default_rng(derive_seed(cfg.seed, "order", epoch)).permutation(ex.n)
        sums = dict.fromkeys(LOSS_KEYS, 0.0)
        for b, start in enumerate(range(0, ex.n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            batch = make_batch(model, L[idx], L_w[idx], star[idx], ex.alpha[idx], ex.bg[idx],
                               ex.atm[ex.cube[idx]], toks[ex.cube[idx]], codes[ex.cube[idx]])
            eta = torch.tensor(np.random.default_rng(derive_seed(cfg.seed, "eta", epoch, b))
                               .standard_normal((len(idx), model.cfg.d_z)))
            if dtype != torch.float64:
                batch, eta = batch.to(dtype), eta.to(dtype)
            parts_box = {}

            def fn(P):
                total, parts = composite_loss(model, batch, w, eta, P,
                                              squared_propagation=cfg.squared_propagation)
                parts_box.update(parts)
                return total

            params = model.store if dtype == torch.float64 else model.store.astype(dtype)
            _, g = grad(fn, params)
            g = {k: v.to(torch.float64) for k, v in g.items()}
            new, state.adam = adam_step(model.store, g, state.adam, lr,
                                        weight_decay=cfg.epoch_weight_decay())
            model.store.replace(new)
            for k in LOSS_KEYS:
                sums[k] += float(parts_box[k].detach()) * len(idx)
        train_items = {k: v / ex.n for k, v in sums.items()}
        if not all(math.isfinite(v) for v in train_items.values()):
            raise NumericError(f"non-finite training loss at epoch {epoch}: {train_items}")
        rec = {"epoch": epoch, "lr": lr, "model": "conditioned" if model.cfg.conditioned else "unconditioned",
               "weights": {"omega1": w.omega1, "omega2": w.omega2, "omega3": w.omega3},
               "train": train_items,
               "val": evaluate(model, val_scenes, propnet, bgnet, cfg, w) if val_scenes else None}
        state.report.append(rec)
        state.epoch += 1
        if on_epoch:
            on_epoch(rec, state)
    return state


def write_report(path, records: list[dict]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    tmp.replace(path)


def read_report(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
