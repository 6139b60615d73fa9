"""Command-line entry point.

    attribroi synth | train | distill | explain | aggregate | consensus | report | selftest

Exit codes: 0 ok, 1 selftest failure, 2 usage error, 3 invalid configuration
or input file, 4 numeric abort. ``ATTRIBROI_THREADS`` caps BLAS threads
(0 or unset = library default).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import io
from .atlas import METHODS, ConsensusReport, RoiAtlas, RoiScoreTable, aggregate_roi, cohort_top_rois
from .checkpoint import load_checkpoint, save_checkpoint
from .exceptions import AtlasConsistencyError, ConfigError, NumericDomainError, ParseError, ShapeError
from .explain import AttributionMap, ShapleyConfig
from .losses import DistillConfig
from .model import MODEL_PRESETS, MiniHViT, model_preset
from .pipeline import cohort_consensus, explain_cohort
from .synth import Dataset, SynthSpec, generate_dataset
from .training import (TRAIN_PRESETS, AugmentConfig, TrainConfig, centre_crop, train, train_preset,
                       validation_split)

log = logging.getLogger("attribroi")

EXIT_OK, EXIT_SELFTEST, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3, 4


# dataset directories: images/<subject>.pgm, atlas.pgm + atlas.json, dataset.json

def save_dataset(out, ds: Dataset):
    out = Path(out)
    for sid, img in zip(ds.subject_ids, ds.images):
        io.write_image(out / "images" / f"{sid}.pgm", img[0], maxval=65535)
    ds.atlas.save(out / "atlas.pgm", out / "atlas.json")
    io.write_report(out / "dataset.json", {
        "subjects": [{"file": f"images/{s}.pgm", "label": int(y), "subject_id": s}
                     for s, y in zip(ds.subject_ids, ds.labels)],
        "spec": ds.spec.to_dict() if ds.spec else None,
    })


def load_dataset(root):
    root = Path(root)
    meta_path = root / "dataset.json"
    if not meta_path.exists():
        raise ConfigError(f"{root} is not a dataset directory (no dataset.json)")
    meta = io.read_json(meta_path)
    ids = [s["subject_id"] for s in meta["subjects"]]
    labels = np.array([s["label"] for s in meta["subjects"]], dtype=np.int64)
    images = np.stack([io.read_image(root / s["file"])[None] for s in meta["subjects"]])
    atlas = RoiAtlas.load(root / "atlas.pgm", root / "atlas.json")
    return Dataset(images=images, labels=labels, subject_ids=ids, atlas=atlas)


def _split(ds, fraction, seed, subset):
    tr, va = validation_split(len(ds), fraction, seed)
    return {"train": tr, "val": va, "all": np.arange(len(ds))}[subset]


def _crop_to(ds, size):
    """Centre-crop images and atlas to a model trained on cropped input."""
    if ds.images.shape[-1] == size:
        return ds
    images = np.stack([centre_crop(img, size) for img in ds.images])
    labels = centre_crop(ds.atlas.labels[None], size)[0]
    keep = set(np.unique(labels).tolist())
    atlas = RoiAtlas(labels=labels, names={k: v for k, v in ds.atlas.names.items() if k in keep},
                     brodmann={k: v for k, v in ds.atlas.brodmann.items() if k in keep})
    return Dataset(images=images, labels=ds.labels, subject_ids=ds.subject_ids, atlas=atlas)


def _snapshot(out, command, **sections):
    io.write_report(Path(out) / "config.json", {"command": command, **sections})


# subcommands

def cmd_synth(args):
    spec = SynthSpec(image_size=args.size, n_rois=args.rois, signal_rois=tuple(args.signal),
                     effect_size=args.effect, noise_sigma=args.sigma, n_per_class=args.n,
                     seed=args.seed, atlas_mode=args.atlas_mode).validate()
    ds = generate_dataset(spec)
    save_dataset(args.out, ds)
    _snapshot(args.out, "synth", synth=spec.to_dict())
    print(f"wrote {len(ds)} images and a {spec.n_rois}-ROI atlas to {args.out}")


def _train_config(args, distill=None):
    if args.config:
        cfg = TrainConfig.from_dict(io.read_json(args.config).get("train", {}))
    elif args.train_preset:
        cfg = train_preset(args.train_preset, args.divisor)
    else:
        cfg = TrainConfig()
    for name in ("optimizer", "learning_rate", "weight_decay", "schedule", "epochs",
                 "batch_size", "validation_fraction"):
        value = getattr(args, name)
        if value is not None:
            setattr(cfg, name, value)
    cfg.seed = args.seed
    cfg.augment = AugmentConfig(centre_crop=args.crop, sharpen=args.sharpen,
                                colour_variation=args.colour, contrast=args.contrast)
    cfg.distill = distill
    return cfg.validate()


def _fit(args, teacher=None, distill=None):
    ds = load_dataset(args.data)
    cfg = _train_config(args, distill)
    size = args.crop or ds.images.shape[-1]
    overrides = {"image_size": size, "channels": ds.images.shape[1], "seed": args.seed}
    for name in ("patch_size", "capture_stage"):
        if getattr(args, name) is not None:
            overrides[name] = getattr(args, name)
    if args.config:
        overrides = {**io.read_json(args.config).get("model", {}), **overrides}
    mcfg = model_preset(args.model_preset, **overrides)
    model = MiniHViT(mcfg)
    tr, va = validation_split(len(ds), cfg.validation_fraction, cfg.seed)
    if args.train_fraction < 1.0:
        keep = max(1, int(round(len(tr) * args.train_fraction)))
        tr = np.sort(np.random.default_rng(cfg.seed).permutation(tr)[:keep])
    model, history = train(model, ds.images[tr], ds.labels[tr], cfg, teacher=teacher,
                           val_images=ds.images[va], val_labels=ds.labels[va])
    out = Path(args.out)
    split = {"validation_fraction": cfg.validation_fraction, "seed": cfg.seed,
             "train_fraction": args.train_fraction}
    save_checkpoint(out / "model.json", model, extra={"split": split})
    lines = "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in history)
    io.atomic_write_bytes(out / "history.jsonl", lines.encode("utf-8"))
    if history:
        io.write_report(out / "metrics.json", history[-1]["metrics"])
    _snapshot(out, args.command, data=str(args.data), model=mcfg.to_dict(), train=cfg.to_dict(),
              split=split, teacher=getattr(args, "teacher", None))
    final = history[-1]["metrics"] if history else {}
    print(f"saved {out / 'model.json'}; validation accuracy {final.get('Accuracy (%)', 'n/a')}")


def cmd_train(args):
    _fit(args)


def cmd_distill(args):
    teacher = load_checkpoint(args.teacher)
    _fit(args, teacher=teacher, distill=DistillConfig(args.alpha, args.temperature).validate())


def cmd_explain(args):
    ds = load_dataset(args.data)
    model = load_checkpoint(args.model)
    ds = _crop_to(ds, model.config.image_size)
    split = io.read_json(args.model).get("extra", {}).get("split", {})
    fraction = split.get("validation_fraction", 0.2)
    seed = split.get("seed", args.seed)
    tr = _split(ds, fraction, seed, "train")
    idx = _split(ds, fraction, seed, args.subset)
    if args.limit:
        idx = idx[:args.limit]
    shap_cfg = ShapleyConfig(mode=args.shap_mode, sample_budget=args.budget,
                             baseline=args.baseline, baseline_value=args.baseline_value,
                             seed=args.seed)
    baseline = ds.images[tr].mean(axis=0) if args.baseline == "dataset-mean" else None
    methods = METHODS if args.method == "all" else (args.method,)
    out = Path(args.out)
    ids = [ds.subject_ids[i] for i in idx]
    for method in methods:
        maps, tables = explain_cohort(model, ds.images[idx], ds.atlas, method, baseline,
                                      args.target_class, shap_cfg, ids)
        for sid, amap in zip(ids, maps):
            amap.save(out / method / f"{sid}.atsr")
            if args.heatmaps:
                amap.save_heatmap(out / method / f"{sid}.pgm")
        io.write_report(out / method / "tables.json", {"tables": [t.to_dict() for t in tables]})
        print(f"{method}: explained {len(maps)} images")
    _snapshot(out, "explain", data=str(args.data), model=str(args.model), methods=list(methods),
              subset=args.subset, subjects=ids, target_class=args.target_class,
              shapley={"mode": shap_cfg.mode, "sample_budget": shap_cfg.sample_budget,
                       "baseline": shap_cfg.baseline, "baseline_value": shap_cfg.baseline_value,
                       "seed": shap_cfg.seed})


def cmd_aggregate(args):
    ds_atlas = RoiAtlas.load(Path(args.data) / "atlas.pgm", Path(args.data) / "atlas.json")
    root = Path(args.explain)
    methods = METHODS if args.method == "all" else (args.method,)
    for method in methods:
        paths = sorted((root / method).glob("*.atsr"))
        if not paths:
            raise ConfigError(f"no {method} maps under {root / method}")
        tables = [aggregate_roi(AttributionMap.load(p), ds_atlas, method=method, subject=p.stem)
                  for p in paths]
        summary = cohort_top_rois(tables, args.top_k, args.min_fraction)
        io.write_report(root / method / "cohort.json", {
            "method": method,
            "top_k": args.top_k,
            "min_fraction": args.min_fraction,
            "top": [ds_atlas.annotate(r) for r in summary.top],
            "frequencies": {str(r): {"count": c, "fraction": f}
                            for r, (c, f) in summary.frequencies.items()},
            "mean_shares": {str(r): s for r, s in summary.mean_shares.items()},
        })
        io.write_report(root / method / "tables.json", {"tables": [t.to_dict() for t in tables]})
        print(f"{method}: top {args.top_k} = {summary.top}")


def cmd_consensus(args):
    atlas = RoiAtlas.load(Path(args.data) / "atlas.pgm", Path(args.data) / "atlas.json")
    root = Path(args.explain)
    tables = {}
    for method in METHODS:
        path = root / method / "tables.json"
        if not path.exists():
            raise ConfigError(f"missing {path}; run explain with --method all first")
        tables[method] = [RoiScoreTable.from_dict(t) for t in io.read_json(path)["tables"]]
    report, _ = cohort_consensus(tables, atlas, args.top_k, args.min_fraction)
    out = Path(args.out)
    io.write_report(out, report.to_dict())
    _snapshot(out.parent, "consensus", explain=str(root), top_k=args.top_k,
              min_fraction=args.min_fraction)
    print(f"three-way consensus: {report.threeway}")


def cmd_report(args):
    atlas = RoiAtlas.load(Path(args.data) / "atlas.pgm", Path(args.data) / "atlas.json")
    report = ConsensusReport.from_dict(io.read_json(args.consensus), atlas)
    text = report.render_text()
    if args.out:
        io.atomic_write_bytes(args.out, text.encode("utf-8"))
    else:
        sys.stdout.write(text)


def cmd_selftest(args):
    from .selftest import run_all

    checks = run_all(range(args.seeds))
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return EXIT_SELFTEST if failed else EXIT_OK


# argument parsing

def _int_list(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _add_fit_args(p):
    p.add_argument("--data", required=True, help="dataset directory written by synth")
    p.add_argument("--out", required=True, help="output directory for the checkpoint")
    p.add_argument("--config", help="JSON file with 'model' and 'train' sections")
    p.add_argument("--model-preset", default="desk", choices=sorted(MODEL_PRESETS))
    p.add_argument("--train-preset", choices=sorted(TRAIN_PRESETS))
    p.add_argument("--divisor", type=int, default=1, help="desk-scale epoch divisor for presets")
    p.add_argument("--patch-size", type=int)
    p.add_argument("--capture-stage", type=int)
    p.add_argument("--optimizer", choices=["adam", "adamw"])
    p.add_argument("--learning-rate", "--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--schedule", choices=["multistep", "plateau"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--validation-fraction", type=float)
    p.add_argument("--train-fraction", type=float, default=1.0,
                   help="use only this share of the training split")
    p.add_argument("--crop", type=int, help="centre-crop side length")
    p.add_argument("--sharpen", action="store_true")
    p.add_argument("--colour", action="store_true", help="random per-channel gain")
    p.add_argument("--contrast", action="store_true", help="random contrast")
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog="attribroi", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted-signal dataset and atlas")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--rois", type=int, default=16)
    p.add_argument("--signal", type=_int_list, default=[3, 7, 11])
    p.add_argument("--n", type=int, default=200, help="images per class")
    p.add_argument("--effect", type=float, default=0.3)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--atlas-mode", choices=["voronoi", "grid"], default="voronoi")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from scratch")
    _add_fit_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", help="train a student against a teacher checkpoint")
    _add_fit_args(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint manifest")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--temperature", type=float, default=1.0)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("explain", help="attribution maps for a cohort")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="checkpoint manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=list(METHODS) + ["all"], default="all")
    p.add_argument("--subset", choices=["val", "train", "all"], default="val")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--target-class", type=int)
    p.add_argument("--shap-mode", choices=["sampled", "exact"], default="sampled")
    p.add_argument("--budget", type=int, help="coalition evaluations per image (sampled mode)")
    p.add_argument("--baseline", choices=["dataset-mean", "constant"], default="dataset-mean")
    p.add_argument("--baseline-value", type=float, default=0.0)
    p.add_argument("--heatmaps", action="store_true", help="also write 8-bit PGM heatmaps")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("aggregate", help="per-ROI tables and cohort top list from saved maps")
    p.add_argument("--data", required=True, help="dataset directory holding the atlas")
    p.add_argument("--explain", required=True, help="directory written by explain")
    p.add_argument("--method", choices=list(METHODS) + ["all"], default="all")
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--min-fraction", type=float, default=0.0)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("consensus", help="intersect the per-method cohort top lists")
    p.add_argument("--data", required=True)
    p.add_argument("--explain", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--min-fraction", type=float, default=0.0)
    p.set_defaults(func=cmd_consensus)

    p = sub.add_parser("report", help="render a consensus report as text tables")
    p.add_argument("--data", required=True)
    p.add_argument("--consensus", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("selftest", help="gradient and Shapley axiom checks")
    p.add_argument("--seeds", type=int, default=10)
    p.set_defaults(func=cmd_selftest)
    return parser


def thread_limit():
    raw = os.environ.get("ATTRIBROI_THREADS", "").strip()
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ATTRIBROI_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError(f"ATTRIBROI_THREADS must be >= 0, got {n}")
    return n or None


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        n_threads = thread_limit()
        if n_threads:
            from threadpoolctl import threadpool_limits

            limiter = threadpool_limits(n_threads)
        else:
            limiter = nullcontext()
        with limiter:
            return args.func(args) or EXIT_OK
    except NumericDomainError as exc:
        print(f"error: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ParseError, ShapeError, AtlasConsistencyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
