"""``sseds`` command line: ingest, pretrain, prune, retrain, eval, report.

Each subcommand reads its inputs from the run directory and writes its
outputs there, so stages can be re-run independently::

    <out>/cache/      train.ssds valid.ssds test.ssds vocab.json manifest.json
    <out>/pretrain/   model.ckpt metrics.json timing.json
    <out>/prune/      report.json mixed.ckpt timing.json [sweep/kappa_<k>/...]
    <out>/retrain/<name>/  slim.ckpt metrics.json timing.json
    <out>/eval/       <name>_<split>.json
    <out>/report/     report.json saliency.csv dims.csv

Wall-clock timings go to ``timing.json`` (and the eval output) only, which
keeps checkpoints, metrics and reports byte-reproducible.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .checkpoint import load_checkpoint, save_mixed, save_model
from .config import load_config, stage_seed
from .dataio import (
    Dataset,
    SynthSpec,
    Vocabulary,
    criteo_schema,
    ingest_rows,
    make_schema,
    planted_profile,
    read_avazu,
    read_cache,
    read_criteo,
    save_vocab,
    split,
    synth_generate,
    write_cache,
)
from .errors import ConfigError, DataError, SSEDSError
from .evaluation import StageTimer, count_params, model_param_count, write_report
from .model import ModelConfig, evaluate, init_model, pretrain
from .pruning import (
    PassCounter,
    apply_mask,
    compute_slot_gradients,
    draw_saliency_batches,
    prune_report,
    saliency,
    select_mask,
)
from .slim import SlimOptions, build_slim, retrain

log = logging.getLogger("sseds")

SPLITS = ("train", "valid", "test")


def _dump(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_json(path: Path, what: str) -> dict:
    if not path.exists():
        raise DataError(f"missing {what}: {path}")
    return json.loads(path.read_text())


def _out(cfg: dict) -> Path:
    return Path(cfg["out"])


def _load_split(cfg: dict, tag: str) -> Dataset:
    return read_cache(_out(cfg) / "cache" / f"{tag}.ssds")


# ---------------------------------------------------------------- ingest


def _manifest_hash(cfg: dict) -> str:
    h = hashlib.sha256()
    ds = {k: v for k, v in cfg["dataset"].items() if k != "paths"}
    h.update(json.dumps({"dataset": ds, "seed": cfg["seed"]}, sort_keys=True).encode())
    if cfg["dataset"]["format"] != "synthetic":
        for p in cfg["dataset"]["paths"]:
            try:
                with open(p, "rb") as fh:
                    for chunk in iter(lambda: fh.read(1 << 20), b""):
                        h.update(chunk)
            except OSError as exc:
                raise DataError(f"cannot read {p}: {exc.strerror}") from None
            h.update(b"\0")
    return h.hexdigest()


def _synthetic(cfg: dict) -> tuple[Vocabulary, tuple[Dataset, ...]]:
    sc = cfg["dataset"]["synthetic"]
    sizes = [int(n) for n in sc["field_sizes"]]
    prof = planted_profile(sc["profile"], len(sizes), int(sc["latent_dim"]), float(sc["strength"]),
                           float(sc["frac"]), float(sc["exponent"]), seed=stage_seed(cfg, "synth"))
    spec = SynthSpec(sizes, int(sc["n_records"]), prof, float(sc["bias"]), float(sc["linear_scale"]),
                     float(sc["token_skew"]))
    data = synth_generate(spec, seed=stage_seed(cfg, "synth"))
    parts = split(data, cfg["dataset"]["ratios"], seed=stage_seed(cfg, "split"))
    # synthetic tokens are already ids; record an identity vocabulary
    vocab = Vocabulary([{("<others>" if t == 0 else str(t)): t for t in range(n)} for n in sizes], 1)
    return vocab, parts


def cmd_ingest(cfg: dict, args) -> int:
    ds = cfg["dataset"]
    cache = _out(cfg) / "cache"
    digest = _manifest_hash(cfg)
    manifest = cache / "manifest.json"
    files = [cache / f"{t}.ssds" for t in SPLITS] + [cache / "vocab.json"]
    if manifest.exists() and all(f.exists() for f in files):
        if json.loads(manifest.read_text()).get("hash") == digest:
            print("cache up to date")
            return 0

    stats: dict = {}
    strict = not (ds["lenient"] or args.lenient)
    if ds["format"] == "synthetic":
        vocab, parts = _synthetic(cfg)
    else:
        rows = []
        if ds["format"] == "criteo":
            schema = criteo_schema()
            for p in ds["paths"]:
                rows.extend(read_criteo(p, strict, ds["log_base"], stats))
        else:
            names: list[str] = []
            for p in ds["paths"]:
                header: list[str] = []
                rows.extend(read_avazu(p, strict, stats, header))
                if names and header != names:
                    raise DataError(f"{p}: header differs from {ds['paths'][0]}")
                names = header
            schema = make_schema(names)
        vocab, parts = ingest_rows(rows, schema, ds["min_freq"], ds["ratios"], stage_seed(cfg, "split"))

    cache.mkdir(parents=True, exist_ok=True)
    for part in parts:
        write_cache(cache / f"{part.tag}.ssds", part)
    save_vocab(cache / "vocab.json", vocab)
    summary = {
        "hash": digest,
        "records": {p.tag: len(p) for p in parts},
        "field_sizes": vocab.sizes,
        "skipped": stats.get("skipped", 0),
    }
    _dump(manifest, summary)
    print(json.dumps({k: summary[k] for k in ("records", "skipped")}, sort_keys=True))
    return 0


# ---------------------------------------------------------------- pretrain


def _model_config(cfg: dict) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(m["architecture"], int(m["d"]), tuple(m["hidden"]), m["fusion"], m["dtype"])


def _final_metrics(model, valid: Dataset) -> dict:
    out = {"param_count": count_params(model.tables), "total_param_count": model_param_count(model)}
    if len(valid):
        ev = evaluate(model, valid)
        out.update(auc=ev["auc"], logloss=ev["logloss"])
    return out


def cmd_pretrain(cfg: dict, args) -> int:
    train_set, valid = _load_split(cfg, "train"), _load_split(cfg, "valid")
    opt = cfg["optimizer"]
    timer = StageTimer()
    model = init_model(_model_config(cfg), train_set.field_sizes, seed=stage_seed(cfg, "init"),
                       field_ids=[f.field_id for f in train_set.schema])
    with timer.stage("pretrain"):
        history, _ = pretrain(model, train_set, valid, opt["epochs"], opt["batch_size"], opt["lr"],
                              seed=stage_seed(cfg, "pretrain"))
    out = _out(cfg) / "pretrain"
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "model.ckpt", model, "pretrained")
    metrics = {
        "stage": "pretrain",
        "epochs": history,
        "final": _final_metrics(model, valid),
        "forward_backward_passes": {"pretrain": model.n_backward},
    }
    _dump(out / "metrics.json", metrics)
    _dump(out / "timing.json", {"wall_ms": timer.wall_ms})
    print(json.dumps(metrics["final"], sort_keys=True))
    return 0


# ---------------------------------------------------------------- prune


def _parse_kappas(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad --kappa-sweep value {text!r}") from None
    if not vals or any(not 0 < k <= 1 for k in vals):
        raise ConfigError("--kappa-sweep values must lie in (0, 1]")
    return vals


def _prune_outputs(dest: Path, model, s, kappa: float, mode: str, passes: int, names, seed: int) -> dict:
    pm = select_mask(s, model.field_sizes, kappa, mode)
    mixed = apply_mask(model, pm)
    rep = prune_report(model, s, pm, mixed, passes, names)
    rep["saliency_seed"] = seed
    dest.mkdir(parents=True, exist_ok=True)
    _dump(dest / "report.json", rep)
    save_mixed(dest / "mixed.ckpt", mixed, model, {"kappa": kappa})
    return rep


def cmd_prune(cfg: dict, args) -> int:
    pr = cfg["pruning"]
    out = _out(cfg)
    ck = load_checkpoint(Path(args.checkpoint) if args.checkpoint else out / "pretrain" / "model.ckpt")
    if ck.kind != "pretrained":
        raise ConfigError(f"prune needs a pretrained checkpoint, got {ck.kind!r}")
    train_set = _load_split(cfg, "train")
    seed = stage_seed(cfg, "saliency")
    batches = draw_saliency_batches(train_set, pr["saliency_batch_size"], pr["saliency_batches"], seed)
    timer = StageTimer()
    counter = PassCounter()
    with timer.stage("prune"):
        g = compute_slot_gradients(ck.model, batches, counter)
        s = saliency(g)
    names = [f.name for f in train_set.schema]
    kappa = float(args.kappa) if args.kappa is not None else float(pr["kappa"])
    rep = _prune_outputs(out / "prune", ck.model, s, kappa, pr["mode"], counter.forward_backward, names, seed)
    if args.kappa_sweep:
        # every sweep point reuses the saliency from the single pass above
        sweep = []
        for k in _parse_kappas(args.kappa_sweep):
            r = _prune_outputs(out / "prune" / "sweep" / f"kappa_{k:g}", ck.model, s, k, pr["mode"],
                               counter.forward_backward, names, seed)
            sweep.append({"kappa": k, "kept_params": r["kept_params"], "q": r["q"],
                          "pruned_slots": r["pruned_slots"]})
        _dump(out / "prune" / "sweep" / "sweep.json", {"forward_backward_passes": counter.forward_backward,
                                                       "points": sweep})
    _dump(out / "prune" / "timing.json", {"wall_ms": timer.wall_ms})
    print(json.dumps({k: rep[k] for k in ("kappa", "total_params", "kept_params", "q",
                                          "forward_backward_passes")}, sort_keys=True))
    return 0


# ---------------------------------------------------------------- retrain


def cmd_retrain(cfg: dict, args) -> int:
    rt = cfg["retrain"]
    opt = cfg["optimizer"]
    out = _out(cfg)
    ck = load_checkpoint(Path(args.mixed) if args.mixed else out / "prune" / "mixed.ckpt")
    if ck.kind != "mixed" or ck.mixed is None:
        raise ConfigError(f"retrain needs a mixed checkpoint, got {ck.kind!r}")
    init_mode = "random" if args.random_init else rt["init_mode"]
    epochs = 0 if args.no_retrain else rt["epochs"]
    name = args.name or ("no_retrain" if args.no_retrain else "no_ticket" if init_mode == "random" else "slim")
    options = SlimOptions(init_mode, rt["transform_init"], rt["linear_init"], rt["mlp_init"])
    slim, prov = build_slim(ck.mixed, ck.model, options, seed=stage_seed(cfg, "slim_init"))
    train_set, valid = _load_split(cfg, "train"), _load_split(cfg, "valid")
    timer = StageTimer()
    with timer.stage("retrain"):
        slim, history = retrain(slim, train_set, valid, epochs, opt["batch_size"], opt["lr"],
                                seed=stage_seed(cfg, "retrain"))
    dest = out / "retrain" / name
    dest.mkdir(parents=True, exist_ok=True)
    save_model(dest / "slim.ckpt", slim, "slim", provenance=prov,
               meta={"kappa": ck.meta.get("kappa"), "retrain_epochs": epochs})
    metrics = {
        "stage": f"retrain/{name}",
        "epochs": history,
        "final": _final_metrics(slim, valid),
        "provenance": prov,
        "forward_backward_passes": {"retrain": slim.n_backward},
    }
    _dump(dest / "metrics.json", metrics)
    _dump(dest / "timing.json", {"wall_ms": timer.wall_ms})
    print(json.dumps(metrics["final"], sort_keys=True))
    return 0


# ---------------------------------------------------------------- eval


def run_eval(checkpoint: Path, data: Dataset) -> dict:
    ck = load_checkpoint(checkpoint)
    if ck.kind == "mixed":
        raise ConfigError("mixed checkpoints cannot be evaluated; run retrain first")
    if len(data) == 0:
        raise DataError(f"split {data.tag!r} is empty")
    timer = StageTimer()
    with timer.stage("inference"):
        ev = evaluate(ck.model, data)
    return {
        "schema_version": 1,
        "split": data.tag,
        "kind": ck.kind,
        "architecture": ck.model.config.architecture,
        "auc": ev["auc"],
        "logloss": ev["logloss"],
        "param_count": count_params(ck.model.tables),
        "total_param_count": model_param_count(ck.model),
        "n_records": len(data),
        "wall_ms": timer.wall_ms,
        "forward_backward_passes": {"inference": 0},
    }


def cmd_eval(cfg: dict, args) -> int:
    out = _out(cfg)
    path = Path(args.checkpoint) if args.checkpoint else out / "retrain" / "slim" / "slim.ckpt"
    doc = run_eval(path, _load_split(cfg, args.split))
    dest = Path(args.output) if args.output else out / "eval" / f"{path.parent.name}_{args.split}.json"
    _dump(dest, doc)
    print(json.dumps(doc, sort_keys=True))
    return 0


# ---------------------------------------------------------------- report


def cmd_report(cfg: dict, args) -> int:
    out = _out(cfg)
    rep = _load_json(Path(args.prune_report) if args.prune_report else out / "prune" / "report.json",
                     "pruning report")
    if args.metrics:
        paths = [Path(p) for p in args.metrics]
    else:
        paths = [out / "pretrain" / "metrics.json"] + sorted((out / "retrain").glob("*/metrics.json"))
    points = []
    for p in paths:
        m = _load_json(p, "metrics")
        points.append({"stage": m["stage"], "auc": m["final"].get("auc"),
                       "param_count": m["final"].get("param_count")})
    doc = write_report(rep, points, out / "report")
    print(json.dumps({"top_decile_mass": doc["top_decile_mass"], "kept_params": doc["kept_params"]}))
    return 0


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON pipeline config")
    common.add_argument("--seed", type=int, help="global seed (stage seeds derive from it)")
    common.add_argument("--out", help="run directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. model.d=16 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="sseds", description="Single-shot embedding dimension search pipeline.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="encode raw logs into the binary cache")
    p.add_argument("--lenient", action="store_true", help="skip malformed rows instead of failing")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("pretrain", parents=[common], help="train the full-dimension model")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("prune", parents=[common], help="single-pass saliency and budgeted pruning")
    p.add_argument("--checkpoint", help="pretrained checkpoint (default: <out>/pretrain/model.ckpt)")
    p.add_argument("--kappa", type=float, help="parameter budget, overrides pruning.kappa")
    p.add_argument("--kappa-sweep", metavar="K1,K2,...", help="extra budgets that reuse the same saliency")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("retrain", parents=[common], help="build and retrain the slim model")
    p.add_argument("--mixed", help="mixed checkpoint (default: <out>/prune/mixed.ckpt)")
    p.add_argument("--no-retrain", action="store_true", help="keep the pruned initialisation (0 epochs)")
    p.add_argument("--random-init", action="store_true", help="re-initialise the pruned embeddings")
    p.add_argument("--name", help="output subdirectory under <out>/retrain")
    p.set_defaults(func=cmd_retrain)

    p = sub.add_parser("eval", parents=[common], help="AUC, logloss and parameter count of a checkpoint")
    p.add_argument("--checkpoint", help="default: <out>/retrain/slim/slim.ckpt")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--output", help="metrics JSON path (default: <out>/eval/<name>_<split>.json)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="saliency curve and searched-dimension files")
    p.add_argument("--prune-report", help="default: <out>/prune/report.json")
    p.add_argument("--metrics", nargs="*", help="stage metrics files for the AUC-vs-parameter points")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.out is not None:
            overrides.append(f"out={json.dumps(args.out)}")
        cfg = load_config(args.config, overrides)
        return args.func(cfg, args)
    except SSEDSError as exc:
        print(f"sseds {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"sseds {args.command}: error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
