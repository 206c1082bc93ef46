"""``specret`` command-line entry point.

Exit codes: 0 success, 2 validation error (bad config, missing or
mismatched artifacts), 3 numeric failure (non-finite loss, failed gradient
check or self-test).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import artifacts
from .condnets import (
    BgNetConfig,
    BgNetModel,
    PropNetConfig,
    PropNetModel,
    estimate_scene,
    train_bgnet,
    train_propnet,
)
from .config import RunConfig, load_config
from .epsnet import EpsNetConfig, EpsNetModel, sample_posterior
from .errors import ConfigError, FormatError, NumericError, SpecretError
from .matching import Experiment, baseline_scores, hit_rate_grid, library_shapes, match_score
from .nn import config_hash, set_threads
from .seeding import derive_seed
from .synth import build_dataset, read_dataset, read_library, write_dataset
from .training import TrainState, read_report, train_epsnet, write_report

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3
FORMAT_VERSION = 1


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    tmp.replace(path)


def _read_json(path: Path, fmt: str) -> dict:
    if not path.exists():
        raise ConfigError(f"missing artifact {path}")
    doc = json.loads(path.read_text())
    if doc.get("format") != fmt:
        raise FormatError(f"{path}: expected a {fmt} document")
    if doc.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: format version {doc.get('version')} is not supported "
                          f"(this build reads version {FORMAT_VERSION})")
    return doc


def _hash(cfg: RunConfig) -> str:
    # file locations and the resume switch do not change what a run computes
    return config_hash(cfg.model_dump(mode="json", exclude={"paths": True, "train": {"resume"}}))


def _data(cfg: RunConfig, out: Path):
    root = Path(cfg.paths.data) if cfg.paths.data else out
    if not (root / "spec.json").exists():
        raise ConfigError(f"no dataset at {root} (run `specret synth` or set paths.data)")
    return read_dataset(root), root


def _split(scenes, n_val: int):
    n_val = min(n_val, max(len(scenes) - 1, 0))
    cut = len(scenes) - n_val
    return scenes[:cut], scenes[cut:]


def _aux(cfg: RunConfig, out: Path):
    root = Path(cfg.paths.aux) if cfg.paths.aux else out
    paths = root / "propnet.ckpt", root / "bgnet.ckpt"
    for p in paths:
        if not p.exists():
            raise ConfigError(f"missing auxiliary checkpoint {p}; run `specret train-aux` first "
                              "or pass --unconditioned")
    pn, _, _ = artifacts.load_model(paths[0], "propnet")
    bn, _, _ = artifacts.load_model(paths[1], "bgnet")
    return pn, bn


def _model_path(cfg: RunConfig, out: Path, unconditioned: bool) -> Path:
    if cfg.paths.model:
        return Path(cfg.paths.model)
    return out / ("epsnet-uncond.ckpt" if unconditioned else "epsnet.ckpt")


# -- commands ---------------------------------------------------------------

def cmd_synth(cfg: RunConfig, out: Path, args) -> dict:
    spec = cfg.synth.to_spec(cfg.seed)
    ds = build_dataset(spec)
    h = _hash(cfg)
    files = write_dataset(out, ds, h)
    manifest = {"format": "specret-manifest", "version": FORMAT_VERSION, "config_hash": h,
                "n_cubes": len(ds.scenes), "n_bands": spec.n_bands, "files": files}
    _write_json(out / "manifest.json", manifest)
    return manifest


def cmd_train_aux(cfg: RunConfig, out: Path, args) -> dict:
    ds, _ = _data(cfg, out)
    train, _ = _split(ds.scenes, cfg.aux.n_val_cubes)
    if not train:
        raise ConfigError("dataset has no cubes")
    r, h = ds.grid.n_bands, _hash(cfg)
    cubes = [s.cube for s in train]
    pn = PropNetModel.init(PropNetConfig(r), derive_seed(cfg.seed, "propnet"))
    bn = BgNetModel.init(BgNetConfig(r), derive_seed(cfg.seed, "bgnet"))
    rp = train_propnet(pn, cubes, [s.atm for s in train],
                       cfg.aux.propnet.to_config(derive_seed(cfg.seed, "propnet-train")))
    rb = train_bgnet(bn, cubes, cfg.aux.bgnet.to_config(derive_seed(cfg.seed, "bgnet-train")),
                     [s.ensure_whitening() for s in train])
    out.mkdir(parents=True, exist_ok=True)
    artifacts.save_model(out / "propnet.ckpt", pn, h)
    artifacts.save_model(out / "bgnet.ckpt", bn, h)
    write_report(out / "propnet-report.jsonl", rp)
    write_report(out / "bgnet-report.jsonl", rb)
    return {"propnet_loss": [rp[0]["loss"], rp[-1]["loss"]],
            "bgnet_loss": [rb[0]["loss"], rb[-1]["loss"]], "config_hash": h}


def cmd_train(cfg: RunConfig, out: Path, args) -> dict:
    ds, _ = _data(cfg, out)
    uncond = bool(args.unconditioned)
    pn = bn = None
    if not uncond:
        pn, bn = _aux(cfg, out)
    train, val = _split(ds.scenes, cfg.train.n_val_cubes)
    if not train:
        raise ConfigError("dataset has no cubes")
    tcfg = cfg.train.to_config(cfg.seed, cfg.precision)
    h = _hash(cfg)
    ckpt = _model_path(cfg, out, uncond)
    report_path = ckpt.with_suffix(".report.jsonl")
    state = None
    if cfg.train.resume and ckpt.exists():
        model, meta, adam = artifacts.load_model(ckpt, "epsnet", config_hash=h)
        report = read_report(report_path) if report_path.exists() else []
        if adam is None or meta.get("epoch") != len(report):
            raise FormatError(f"{ckpt}: checkpoint and report disagree; cannot resume")
        state = TrainState(len(report), adam, report)
    else:
        ecfg = EpsNetConfig(ds.grid.n_bands, d_z=cfg.train.d_z, conditioned=not uncond)
        model = EpsNetModel.init(ecfg, derive_seed(cfg.seed, "epsnet"))
    ckpt.parent.mkdir(parents=True, exist_ok=True)

    def checkpoint(rec, st: TrainState) -> None:
        artifacts.save_model(ckpt, model, h, state=st.adam, extra={"epoch": st.epoch})
        write_report(report_path, st.report)

    st = train_epsnet(model, train, val, pn, bn, tcfg, state=state, stop_after=args.stop_after,
                      on_epoch=checkpoint)
    if not st.report:
        checkpoint(None, st)
    last = st.report[-1]["train"] if st.report else {}
    return {"checkpoint": str(ckpt), "epochs": st.epoch, "final": last, "config_hash": h}


def cmd_infer(cfg: RunConfig, out: Path, args) -> dict:
    ds, _ = _data(cfg, out)
    uncond = bool(args.unconditioned or cfg.infer.unconditioned)
    model, _, _ = artifacts.load_model(_model_path(cfg, out, uncond), "epsnet")
    pn = bn = None
    if model.cfg.conditioned:
        pn, bn = _aux(cfg, out)
    wanted = cfg.infer.cube_ids
    scenes = [s for s in ds.scenes if wanted is None or s.cube.id in wanted]
    if wanted is not None and len(scenes) != len(set(wanted)):
        missing = sorted(set(wanted) - {s.cube.id for s in scenes})
        raise ConfigError(f"unknown cube ids {missing}")
    queries, dists = [], []
    for sc in scenes:
        cid = sc.cube.id
        est = None
        if model.cfg.conditioned:
            est = estimate_scene(pn, bn, sc.cube, derive_seed(cfg.seed, "infer-scene", cid),
                                 sc.ensure_whitening())
        examples = sc.examples[: cfg.infer.max_pixels] if cfg.infer.max_pixels else sc.examples
        for ex in examples:
            x, y = ex.pixel
            dists.append(sample_posterior(model, ex.radiance, ex.whitened, est, cfg.infer.n_samples,
                                          derive_seed(cfg.seed, "infer", cid, x, y)))
            queries.append({"id": f"{cid}/{x}-{y}", "cube": cid, "pixel": [x, y],
                            "truth": ex.entry_name, "alpha": ex.alpha})
    h = _hash(cfg)
    path = Path(cfg.paths.bundle) if cfg.paths.bundle else out / "bundle.bin"
    path.parent.mkdir(parents=True, exist_ok=True)
    artifacts.save_bundle(path, queries, dists, h)
    return {"bundle": str(path), "n_queries": len(queries), "n_samples": cfg.infer.n_samples,
            "config_hash": h}


def cmd_match(cfg: RunConfig, out: Path, args) -> dict:
    ds, root = _data(cfg, out)
    library = read_library(root / "library.json")
    path = Path(cfg.paths.bundle) if cfg.paths.bundle else out / "bundle.bin"
    if not path.exists():
        raise ConfigError(f"missing inference bundle {path}")
    queries, dists, _ = artifacts.load_bundle(path)
    shapes = library_shapes(library)
    cards = []
    for q, d in zip(queries, dists):
        card = match_score(d, library, q["id"], ridge=cfg.match.ridge, _shapes=shapes)
        entry = {"query": q, "MD": card.to_dict()}
        for metric in cfg.match.baselines:
            entry[metric] = [{"name": n, "distance": v} for n, v in baseline_scores(d, library, metric)]
        cards.append(entry)
    h = _hash(cfg)
    doc = {"format": "specret-scorecards", "version": FORMAT_VERSION, "config_hash": h, "cards": cards}
    target = Path(cfg.paths.scorecards) if cfg.paths.scorecards else out / "scorecards.json"
    _write_json(target, doc)
    return {"scorecards": str(target), "n_cards": len(cards), "config_hash": h}


def experiments_from_scorecards(doc: dict) -> list[Experiment]:
    exps = []
    for c in doc["cards"]:
        q = c["query"]
        e = Experiment(q["id"], q["truth"], float(q["alpha"]))
        e.rankings["MD"] = [r["name"] for r in c["MD"]["ranked"]]
        for metric in ("L2", "CD"):
            if metric in c:
                e.rankings[metric] = [r["name"] for r in c[metric]]
        exps.append(e)
    return exps


def cmd_hitrate(cfg: RunConfig, out: Path, args) -> dict:
    path = Path(cfg.paths.scorecards) if cfg.paths.scorecards else out / "scorecards.json"
    doc = _read_json(path, "specret-scorecards")
    exps = experiments_from_scorecards(doc)
    if not exps:
        raise ConfigError("scorecard set is empty")
    variants = sorted(exps[0].rankings)
    curves = hit_rate_grid(exps, cfg.hitrate.k_values, cfg.hitrate.alpha_min, variants)
    h = _hash(cfg)
    result = {"format": "specret-hitrate", "version": FORMAT_VERSION, "config_hash": h,
              "curves": [c.to_dict() for c in curves]}
    _write_json(out / "hitrate.json", result)
    return result


def cmd_gradcheck(cfg: RunConfig, out: Path, args) -> dict:
    from .checks import corrupt_first, gradcheck_suite

    checks = gradcheck_suite(seed=cfg.seed, fault=corrupt_first if args.inject_fault else None)
    lines = []
    for c in checks:
        r = c.result
        lines.append({"term": c.term, "passed": r.passed, "max_rel_error": r.max_rel_error,
                      "worst": r.worst, "n_checked": r.n_checked})
        print(f"{'PASS' if r.passed else 'FAIL'}  {c.term:<15} max rel err {r.max_rel_error:.2e}"
              f"  ({r.n_checked} entries)", file=sys.stderr)
    if not all(x["passed"] for x in lines):
        raise NumericError("gradient check failed: " + ", ".join(x["term"] for x in lines if not x["passed"]))
    return {"checks": lines}


def cmd_selftest(cfg: RunConfig, out: Path, args) -> dict:
    from .selftest import run_selftest

    results = run_selftest()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}", file=sys.stderr)
    failed = [n for n, ok, _ in results if not ok]
    if failed:
        raise NumericError(f"self-test failed: {', '.join(failed)}")
    return {"passed": len(results)}


COMMANDS = {"synth": cmd_synth, "train-aux": cmd_train_aux, "train": cmd_train, "infer": cmd_infer,
            "match": cmd_match, "hitrate": cmd_hitrate, "gradcheck": cmd_gradcheck,
            "selftest": cmd_selftest}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--unconditioned", action="store_true",
                        help="train or use the model without scene conditioning")
    common.add_argument("--epochs", type=int, help="override the epoch count")
    common.add_argument("--precision", choices=("f32", "f64"), help="training precision")
    common.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    # simulates an interrupted run (resume tests)
    common.add_argument("--stop-after", type=int, help=argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="specret", description="LWIR emissivity retrieval toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.epochs is not None:
        if args.epochs < 1:
            raise ConfigError("--epochs must be >= 1")
        aux = cfg.aux.model_copy(update={
            "propnet": cfg.aux.propnet.model_copy(update={"epochs": args.epochs}),
            "bgnet": cfg.aux.bgnet.model_copy(update={"epochs": args.epochs})})
        cfg = cfg.model_copy(update={"train": cfg.train.model_copy(update={"epochs": args.epochs}),
                                     "aux": aux})
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, precision=args.precision)
        cfg = _apply_overrides(cfg, args)
        set_threads()
        result = COMMANDS[args.command](cfg, args.out, args)
    except NumericError as exc:
        print(f"specret: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SpecretError, OSError) as exc:
        print(f"specret: {exc}", file=sys.stderr)
        return EXIT_INVALID
    print(json.dumps(result, sort_keys=True, indent=1))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
