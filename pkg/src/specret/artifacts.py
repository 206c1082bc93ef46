"""On-disk artifacts: model checkpoints, resumable training state, inference bundles.

All of them share the tensor-blob container of ``nn.checkpoint_bytes``; the
JSON manifest records the artifact kind, its format version, the model
config and the hash of the run config that produced it.
"""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

import numpy as np

from .condnets import BgNetConfig, BgNetModel, PropNetConfig, PropNetModel
from .epsnet import EmissivityDistribution, EpsNetConfig, EpsNetModel
from .errors import FormatError
from .nn import AdamState, checkpoint_bytes, load_checkpoint, save_checkpoint, store_from_arrays, store_to_arrays

ARTIFACT_VERSION = 1
_MODELS = {"propnet": (PropNetConfig, PropNetModel), "bgnet": (BgNetConfig, BgNetModel),
           "epsnet": (EpsNetConfig, EpsNetModel)}


def _kind_of(model) -> str:
    for kind, (_, cls) in _MODELS.items():
        if isinstance(model, cls):
            return kind
    raise FormatError(f"cannot checkpoint {type(model).__name__}")


def model_meta(model, config_hash: str = "", extra: dict | None = None) -> dict:
    return {"kind": _kind_of(model), "artifact_version": ARTIFACT_VERSION, "config": asdict(model.cfg),
            "stats": dict(model.store.stats), "seed": model.store.seed, "config_hash": config_hash,
            **(extra or {})}


def model_bytes(model, config_hash: str = "") -> bytes:
    return checkpoint_bytes(store_to_arrays(model.store), model_meta(model, config_hash))


def save_model(path, model, config_hash: str = "", *, state: AdamState | None = None,
               extra: dict | None = None) -> None:
    arrays = store_to_arrays(model.store, "param.")
    if state is not None:
        arrays.update(state.to_arrays())
    save_checkpoint(path, arrays, model_meta(model, config_hash, extra))


def _check_meta(meta: dict, kind: str | None, path) -> str:
    found = meta.get("kind")
    if found not in _MODELS:
        raise FormatError(f"{path}: not a model checkpoint")
    if kind is not None and found != kind:
        raise FormatError(f"{path}: expected a {kind} checkpoint, found {found}")
    if meta.get("artifact_version") != ARTIFACT_VERSION:
        raise FormatError(f"{path}: artifact version {meta.get('artifact_version')} is not supported "
                          f"(this build reads version {ARTIFACT_VERSION})")
    return found


def load_model(path, kind: str | None = None, config_hash: str | None = None):
    """Returns (model, meta, adam_state_or_None)."""
    arrays, meta = load_checkpoint(path)
    found = _check_meta(meta, kind, path)
    if config_hash is not None and meta.get("config_hash") != config_hash:
        raise FormatError(f"{path}: produced by config {meta.get('config_hash')}, expected {config_hash}")
    cfg_cls, model_cls = _MODELS[found]
    cfg = cfg_cls(**meta["config"])
    store = store_from_arrays(arrays, "param.", stats=meta["stats"], seed=meta.get("seed"))
    state = AdamState.from_arrays(arrays) if any(k.startswith("adam.") for k in arrays) else None
    return model_cls(cfg, store), meta, state


# -- inference bundles -------------------------------------------------------

BUNDLE_KIND = "inference-bundle"


def save_bundle(path, queries: list[dict], dists: list[EmissivityDistribution],
                config_hash: str = "") -> None:
    """``queries`` holds JSON metadata per distribution (id, truth, alpha, ...)."""
    if len(queries) != len(dists):
        raise FormatError("one query record per distribution")
    arrays = {}
    for i, d in enumerate(dists):
        arrays[f"{i}.scaled"] = d.scaled
        arrays[f"{i}.normalized"] = d.normalized
    save_checkpoint(path, arrays, {"kind": BUNDLE_KIND, "artifact_version": ARTIFACT_VERSION,
                                   "queries": queries, "config_hash": config_hash})


def load_bundle(path) -> tuple[list[dict], list[EmissivityDistribution], dict]:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != BUNDLE_KIND:
        raise FormatError(f"{path}: not an inference bundle")
    if meta.get("artifact_version") != ARTIFACT_VERSION:
        raise FormatError(f"{path}: bundle version {meta.get('artifact_version')} is not supported")
    dists = [EmissivityDistribution.from_samples(arrays[f"{i}.scaled"], arrays[f"{i}.normalized"])
             for i in range(len(meta["queries"]))]
    return meta["queries"], dists, meta


def bundle_shapes(path) -> list[tuple[int, ...]]:
    arrays, _ = load_checkpoint(Path(path))
    return [np.shape(v) for k, v in arrays.items() if k.endswith(".scaled")]
