"""Differentiable building blocks on top of torch (float64 by default).

Parameters live in a flat ``ParamStore`` keyed by dotted paths such as
``"encoder.block0.m.2.w"``. Forward functions are pure: they take the store
(or any mapping of the same names, e.g. grad-tracking copies), a prefix and a
config, so gradients, finite-difference checks and optimizer steps all work on
plain name -> tensor dictionaries.

Dense weights are stored as (in, out) and applied as ``x @ W + b``.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from collections.abc import Callable, Iterator, Mapping
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, DomainError, FormatError, NumericError, ShapeError

DTYPE = torch.float64

ACTIVATIONS: dict[str, Callable] = {
    "sigmoid": torch.sigmoid,
    "swish": torch.nn.functional.silu,
    "tanh": torch.tanh,
    "linear": lambda x: x,
}


def set_threads(n: int | None = None) -> int:
    """Pin torch's intra-op pool (default from SPECRET_THREADS, else 1)."""
    if n is None:
        n = int(os.environ.get("SPECRET_THREADS", "1") or 1)
    n = max(1, n)
    torch.set_num_threads(n)
    return n


# -- parameter store -------------------------------------------------------

class ParamStore(Mapping):
    """Ordered name -> tensor map plus scalar normalisation stats.

    Stats are fixed numbers (input scales and offsets fitted from data) that
    are saved with the parameters but never trained.
    """

    def __init__(self, tensors: Mapping[str, torch.Tensor] | None = None,
                 stats: Mapping[str, float] | None = None, seed: int | None = None):
        self.tensors: dict[str, torch.Tensor] = {}
        self.stats: dict[str, float] = dict(stats or {})
        self.seed = seed
        for k, v in (tensors or {}).items():
            self.add(k, v)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def add(self, name: str, value) -> torch.Tensor:
        if name in self.tensors:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = torch.as_tensor(np.asarray(value, dtype=np.float64)).to(DTYPE).clone()
        if not torch.isfinite(t).all():
            raise NumericError(f"parameter {name!r} is not finite")
        self.tensors[name] = t
        return t

    def replace(self, new: Mapping[str, torch.Tensor]) -> None:
        for k, v in new.items():
            if k not in self.tensors:
                raise ConfigError(f"unknown parameter {k!r}")
            self.tensors[k] = v.detach()

    def n_params(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def to_numpy(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().astype(np.float64) for k, v in self.tensors.items()}

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.detach().clone() for k, v in self.tensors.items()}, self.stats, self.seed)

    def astype(self, dtype: torch.dtype) -> dict[str, torch.Tensor]:
        return {k: v.to(dtype) for k, v in self.tensors.items()}


# -- dense MLPs ------------------------------------------------------------

@dataclass(frozen=True)
class MlpConfig:
    in_dim: int
    out_dim: int
    hidden_dim: int
    n_layers: int
    activation: str = "tanh"
    residual: bool = False

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if min(self.in_dim, self.out_dim, self.hidden_dim) < 1:
            raise ConfigError("MLP dims must be positive")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def dims(self) -> list[int]:
        return [self.in_dim] + [self.hidden_dim] * (self.n_layers - 1) + [self.out_dim]


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_linear(store: ParamStore, prefix: str, n_in: int, n_out: int, rng,
                bias: bool = True, zero: bool = False, gain: float = 1.0) -> None:
    w = np.zeros((n_in, n_out)) if zero else gain * _uniform(rng, n_in, (n_in, n_out))
    store.add(f"{prefix}.w", w)
    if bias:
        store.add(f"{prefix}.b", np.zeros(n_out))


def linear(P, prefix: str, x: torch.Tensor) -> torch.Tensor:
    y = x @ P[f"{prefix}.w"]
    b = P.get(f"{prefix}.b")
    return y if b is None else y + b


def init_mlp(store: ParamStore, prefix: str, cfg: MlpConfig, rng, zero_last: bool = False,
             last_gain: float = 1.0) -> None:
    dims = cfg.dims
    last = cfg.n_layers - 1
    for i in range(cfg.n_layers):
        init_linear(store, f"{prefix}.{i}", dims[i], dims[i + 1], rng,
                    zero=zero_last and i == last, gain=last_gain if i == last else 1.0)
    if cfg.residual:
        init_linear(store, f"{prefix}.skip", cfg.in_dim, cfg.out_dim, rng, bias=False,
                    zero=zero_last, gain=last_gain)


def mlp_forward(P, prefix: str, cfg: MlpConfig, x: torch.Tensor) -> torch.Tensor:
    if x.shape[-1] != cfg.in_dim:
        raise ShapeError(f"{prefix}: input width {x.shape[-1]} != {cfg.in_dim}")
    act = ACTIVATIONS[cfg.activation]
    h = x
    for i in range(cfg.n_layers):
        h = linear(P, f"{prefix}.{i}", h)
        if i < cfg.n_layers - 1:
            h = act(h)
    if cfg.residual:
        h = h + x @ P[f"{prefix}.skip.w"]
    return h


# -- Fourier blocks --------------------------------------------------------

@dataclass(frozen=True)
class FnoBlockConfig:
    in_len: int
    out_len: int
    n_modes: int
    mlp: MlpConfig

    def __post_init__(self):
        if not 1 <= self.n_modes <= self.in_len // 2 + 1:
            raise ConfigError(f"n_modes must lie in [1, {self.in_len // 2 + 1}]")
        if self.mlp.in_dim != self.in_len or self.mlp.out_dim != self.out_len:
            raise ConfigError("block MLP must map in_len -> out_len")

    @classmethod
    def make(cls, in_len: int, out_len: int, n_layers: int = 4, activation: str = "swish",
             max_modes: int = 16) -> "FnoBlockConfig":
        n_modes = min(in_len // 2 + 1, max_modes)
        return cls(in_len, out_len, n_modes,
                   MlpConfig(in_len, out_len, in_len, n_layers, activation, residual=True))


def init_fno_block(store: ParamStore, prefix: str, cfg: FnoBlockConfig, rng,
                   gain: float = 1.0) -> None:
    """``gain`` scales the output paths (p, last MLP layer, skip) at init."""
    sd = math.sqrt(0.5 / cfg.n_modes)
    store.add(f"{prefix}.R_re", rng.normal(0.0, sd, (cfg.n_modes, cfg.n_modes)))
    store.add(f"{prefix}.R_im", rng.normal(0.0, sd, (cfg.n_modes, cfg.n_modes)))
    init_linear(store, f"{prefix}.p", cfg.in_len, cfg.out_len, rng, gain=gain)
    init_mlp(store, f"{prefix}.m", cfg.mlp, rng, last_gain=gain)


def spectral_conv(P, prefix: str, cfg: FnoBlockConfig, x: torch.Tensor) -> torch.Tensor:
    n = cfg.in_len
    if x.shape[-1] != n:
        raise ShapeError(f"{prefix}: spectral input length {x.shape[-1]} != {n}")
    spec = torch.fft.rfft(x, dim=-1)[..., : cfg.n_modes]
    R = torch.complex(P[f"{prefix}.R_re"], P[f"{prefix}.R_im"])
    out = spec @ R.transpose(0, 1)
    pad = n // 2 + 1 - cfg.n_modes
    if pad:
        out = torch.cat([out, out.new_zeros(*out.shape[:-1], pad)], dim=-1)
    return torch.fft.irfft(out, n=n, dim=-1)


def fno_mlp_block(P, prefix: str, cfg: FnoBlockConfig, x: torch.Tensor) -> torch.Tensor:
    """Q(x) = p(x) + m(U(x))."""
    u = spectral_conv(P, prefix, cfg, x)
    return linear(P, f"{prefix}.p", x) + mlp_forward(P, f"{prefix}.m", cfg.mlp, u)


def geometric_lengths(start: int, end: int, n_blocks: int) -> list[int]:
    return [int(round(start * (end / start) ** (i / n_blocks))) for i in range(n_blocks + 1)]


# -- attention -------------------------------------------------------------

@dataclass(frozen=True)
class AttentionConfig:
    query_dim: int
    key_dim: int
    model_dim: int
    aggregate_mean: bool = False

    def __post_init__(self):
        if min(self.query_dim, self.key_dim, self.model_dim) < 1:
            raise ConfigError("attention dims must be positive")


def init_attention(store: ParamStore, prefix: str, cfg: AttentionConfig, rng) -> None:
    store.add(f"{prefix}.Wq", _uniform(rng, cfg.query_dim, (cfg.query_dim, cfg.model_dim)))
    store.add(f"{prefix}.Wk", _uniform(rng, cfg.key_dim, (cfg.key_dim, cfg.model_dim)))
    store.add(f"{prefix}.Wv", _uniform(rng, cfg.key_dim, (cfg.key_dim, cfg.model_dim)))


def attention_weights(P, prefix: str, cfg: AttentionConfig, queries, keys) -> torch.Tensor:
    if keys.shape[-2] == 0:
        raise DomainError("cross attention needs at least one key")
    if queries.shape[-1] != cfg.query_dim or keys.shape[-1] != cfg.key_dim:
        raise ShapeError(f"{prefix}: token widths do not match the attention config")
    q = queries @ P[f"{prefix}.Wq"]
    k = keys @ P[f"{prefix}.Wk"]
    scores = q @ k.transpose(-1, -2) / math.sqrt(cfg.model_dim)
    return torch.softmax(scores, dim=-1)


def cross_attention(P, prefix: str, cfg: AttentionConfig, queries: torch.Tensor,
                    keys_values: torch.Tensor) -> torch.Tensor:
    """softmax(Q K^T / sqrt(d_m)) V; rows averaged when ``aggregate_mean``."""
    a = attention_weights(P, prefix, cfg, queries, keys_values)
    out = a @ (keys_values @ P[f"{prefix}.Wv"])
    return out.mean(dim=-2) if cfg.aggregate_mean else out


# -- gradients -------------------------------------------------------------

def _diagnose(params: Mapping[str, torch.Tensor]) -> str:
    bad = [k for k, v in params.items() if not torch.isfinite(v).all()]
    if bad:
        return "non-finite parameters: " + ", ".join(bad[:10])
    worst = max(params.items(), key=lambda kv: float(kv[1].abs().max()) if kv[1].numel() else 0.0)
    return f"all parameters finite; largest magnitude in {worst[0]} ({float(worst[1].abs().max()):.3e})"


def grad(loss_fn: Callable[[dict], torch.Tensor], params: Mapping[str, torch.Tensor],
         names=None) -> tuple[float, dict[str, torch.Tensor]]:
    """Loss value and reverse-mode gradients for every named parameter.

    Parameters the loss does not depend on receive exact zeros.
    """
    leaves = {k: v.detach().clone().requires_grad_(names is None or k in names)
              for k, v in params.items()}
    loss = loss_fn(leaves)
    if loss.ndim != 0:
        raise ShapeError("loss_fn must return a scalar")
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {float(loss.detach())}; {_diagnose(params)}")
    keys = [k for k, v in leaves.items() if v.requires_grad]
    gs = torch.autograd.grad(loss, [leaves[k] for k in keys], allow_unused=True)
    out = {k: (torch.zeros_like(leaves[k]) if g is None else g) for k, g in zip(keys, gs)}
    return float(loss.detach()), out


@dataclass
class GradcheckResult:
    max_rel_error: float
    worst: str
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def gradcheck(loss_fn, params: Mapping[str, torch.Tensor], *, h: float = 1e-5,
              tolerance: float = 1e-5, floor: float = 1e-6, max_per_param: int | None = None,
              seed: int = 0, fault: Callable[[dict], None] | None = None,
              stencil: int = 2) -> GradcheckResult:
    """Compare analytic gradients against central differences in float64.

    rel = |a - n| / max(|a|, |n|, floor). ``stencil`` is 2 (error O(h^2)) or 4
    (error O(h^4)). ``max_per_param`` samples entries of large tensors;
    ``fault`` may corrupt the analytic gradients in place (used to test that
    the harness actually fails).
    """
    if stencil not in (2, 4):
        raise ConfigError("stencil must be 2 or 4")
    params = {k: v.detach().to(torch.float64) for k, v in params.items()}
    _, g = grad(loss_fn, params)
    if fault is not None:
        fault(g)
    rng = np.random.default_rng(seed)
    worst, worst_name, n = 0.0, "", 0
    with torch.no_grad():
        for name, p in params.items():
            flat_n = p.numel()
            idx = np.arange(flat_n)
            if max_per_param is not None and flat_n > max_per_param:
                # entry 0 is always checked so a corrupted leading entry cannot hide
                rest = rng.choice(np.arange(1, flat_n), max(max_per_param - 1, 0), replace=False)
                idx = np.concatenate([[0], np.sort(rest)])
            for i in idx:
                i = int(i)
                base = p.reshape(-1)[i].item()

                def at(step, name=name, p=p, i=i, base=base):
                    q = p.clone()
                    q.reshape(-1)[i] = base + step
                    return float(loss_fn({**params, name: q}))

                num = (at(h) - at(-h)) / (2 * h)
                if stencil == 4:
                    num = (4 * num - (at(2 * h) - at(-2 * h)) / (4 * h)) / 3
                ana = float(g[name].reshape(-1)[i])
                rel = abs(ana - num) / max(abs(ana), abs(num), floor)
                n += 1
                if rel > worst:
                    worst, worst_name = rel, f"{name}[{i}]"
    return GradcheckResult(worst, worst_name, n, tolerance)


# -- optimizer -------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_arrays(self, prefix: str = "adam") -> dict[str, np.ndarray]:
        out = {f"{prefix}.step": np.array([float(self.step)])}
        for k in self.m:
            out[f"{prefix}.m.{k}"] = self.m[k].numpy()
            out[f"{prefix}.v.{k}"] = self.v[k].numpy()
        return out

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], prefix: str = "adam") -> "AdamState":
        st = cls(int(arrays[f"{prefix}.step"][0]))
        for k, a in arrays.items():
            if k.startswith(f"{prefix}.m."):
                name = k[len(prefix) + 3:]
                st.m[name] = torch.from_numpy(a.copy())
                st.v[name] = torch.from_numpy(arrays[f"{prefix}.v.{name}"].copy())
        return st


def adam_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor],
              state: AdamState, lr: float, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8, weight_decay: float = 0.0) -> tuple[dict, AdamState]:
    """One Adam update with decoupled weight decay; returns new params and state."""
    b1, b2 = betas
    t = state.step + 1
    new_state = AdamState(t)
    out = {}
    with torch.no_grad():
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                g = torch.zeros_like(p)
            if not torch.isfinite(g).all():
                raise NumericError(f"non-finite gradient for {k}")
            m = state.m.get(k, torch.zeros_like(p)) * b1 + (1 - b1) * g
            v = state.v.get(k, torch.zeros_like(p)) * b2 + (1 - b2) * g * g
            mh = m / (1 - b1**t)
            vh = v / (1 - b2**t)
            out[k] = p - lr * mh / (vh.sqrt() + eps) - lr * weight_decay * p
            new_state.m[k] = m
            new_state.v[k] = v
    return out, new_state


# -- checkpoints -----------------------------------------------------------

CKPT_MAGIC = b"SPRTCKPT"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<8sII")


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=_jsonable).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _jsonable(o):
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def checkpoint_bytes(arrays: Mapping[str, np.ndarray], meta: Mapping) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, a in arrays.items():
        a = np.ascontiguousarray(np.asarray(a, dtype="<f8"))
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        blobs.append(a.tobytes())
        offset += a.nbytes
    manifest = {"format": "specret-checkpoint", "version": CKPT_VERSION, "dtype": "<f8",
                "tensors": entries, "meta": dict(meta)}
    mbytes = json.dumps(manifest, sort_keys=True, default=_jsonable).encode()
    return _CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(mbytes)) + mbytes + b"".join(blobs)


def checkpoint_from_bytes(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(buf) < _CKPT_HEAD.size:
        raise FormatError("truncated checkpoint")
    magic, version, mlen = _CKPT_HEAD.unpack_from(buf)
    if magic != CKPT_MAGIC:
        raise FormatError("not a specret checkpoint (bad magic)")
    if version != CKPT_VERSION:
        raise FormatError(f"checkpoint format version {version} is not supported "
                          f"(this build reads version {CKPT_VERSION})")
    manifest = json.loads(buf[_CKPT_HEAD.size:_CKPT_HEAD.size + mlen])
    base = _CKPT_HEAD.size + mlen
    arrays = {}
    for e in manifest["tensors"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(buf):
            raise FormatError(f"checkpoint blob truncated at {e['name']}")
        a = np.frombuffer(buf, dtype="<f8", count=e["nbytes"] // 8, offset=start)
        arrays[e["name"]] = a.reshape(e["shape"]).astype(np.float64)
    return arrays, manifest["meta"]


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: Mapping) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(arrays, meta))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    return checkpoint_from_bytes(Path(path).read_bytes())


def store_to_arrays(store: ParamStore, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v for k, v in store.to_numpy().items()}


def store_from_arrays(arrays: Mapping[str, np.ndarray], prefix: str = "",
                      stats: Mapping[str, float] | None = None, seed: int | None = None) -> ParamStore:
    store = ParamStore(stats=stats, seed=seed)
    for k, a in arrays.items():
        if k.startswith(prefix):
            store.add(k[len(prefix):], a)
    return store
