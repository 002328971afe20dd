"""Command-line front end: data generation, training, evaluation, flops
auditing, and curve export.

Every training default equals the reference recipe (cosine: 2500 epochs,
warm-up 30, lr 2e-3 -> 5e-5; const: 1000 epochs at 1e-3; batch 200,
leaky-ReLU slope 0.3, 5x5 decoder head). A JSON config file can provide
any of the train settings; command-line flags override it. Exit code is 0
only on full success; failures print one ``error: ...`` line to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np

from . import channel, report
from .errors import FormatError, GenerationError, TrainingDivergedError
from .models import (
    CRNET_KIND,
    CSINET_KIND,
    HEAD_CHOICES,
    ModelConfig,
    build_model,
    model_flops,
    parse_ratio,
)
from .training import (
    SCHEDULER_CONST,
    SCHEDULER_COSINE,
    CurveLog,
    TrainConfig,
    evaluate,
    load_checkpoint,
    rebuild_model,
    reconstruct,
    save_checkpoint,
    train,
)

RATIO_GRID = ("1/4", "1/8", "1/16", "1/32", "1/64")
_SPLIT_NAMES = ("train", "val", "test")

_MODEL_KEYS = ("kind", "ratio", "negative_slope", "head_conv", "n_a", "n_t")
_TRAIN_KEYS = tuple(f.name for f in dataclass_fields(TrainConfig))
_DATA_KEYS = ("train", "val")
_TOP_KEYS = ("model", "train", "data", "out_dir", "name")


def _load_config(path):
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ValueError(f"config {path}: {e}") from e
    if not isinstance(cfg, dict):
        raise ValueError(f"config {path}: top level must be an object")
    for key, allowed in (("", _TOP_KEYS),):
        unknown = set(cfg) - set(allowed)
        if unknown:
            raise ValueError(f"config {path}: unknown keys {sorted(unknown)}")
    for section, allowed in (("model", _MODEL_KEYS), ("train", _TRAIN_KEYS), ("data", _DATA_KEYS)):
        sub = cfg.get(section, {})
        if not isinstance(sub, dict):
            raise ValueError(f"config {path}: {section!r} must be an object")
        unknown = set(sub) - set(allowed)
        if unknown:
            raise ValueError(f"config {path}: unknown keys in {section!r}: {sorted(unknown)}")
    return cfg


def _pick(flag_value, config_value, default):
    if flag_value is not None:
        return flag_value
    if config_value is not None:
        return config_value
    return default


def _default_out_dir():
    return os.environ.get("CSILAB_OUT_DIR", ".")


def cmd_gen_data(args):
    params = channel.GeneratorParams(
        min_clusters=args.clusters_min,
        max_clusters=args.clusters_max,
        paths_per_cluster=args.paths_per_cluster,
        delay_min=args.delay_min,
        delay_max=args.delay_max,
        delay_spread=args.delay_spread,
        angle_min=args.angle_min,
        angle_max=args.angle_max,
        angle_spread=args.angle_spread,
    )
    if args.split:
        try:
            counts = [int(c) for c in args.split.split(",")]
        except ValueError as e:
            raise ValueError(f"--split expects comma-separated counts: {e}") from e
        if not 1 <= len(counts) <= 3 or min(counts) < 1:
            raise ValueError("--split takes 1-3 positive counts (train[,val[,test]])")
    else:
        if args.count is None:
            raise ValueError("either --count or --split is required")
        counts = [args.count]

    ds = channel.generate_channels(args.seed, sum(counts), params)
    print(
        f"generated {ds.count} samples: energy retention min={ds.meta['energy_retention_min']:.4f} "
        f"mean={ds.meta['energy_retention_mean']:.4f}, norm scale={ds.norm.scale:.4f}"
    )
    out = Path(args.out)
    if args.split and len(counts) > 1:
        start = 0
        for name, n in zip(_SPLIT_NAMES, counts):
            part = ds.slice(start, start + n)
            start += n
            suffix = out.suffix or ".csids"
            path = out.with_name(f"{out.name[: len(out.name) - len(out.suffix)]}.{name}{suffix}")
            channel.save_dataset(part, path)
            print(f"wrote {path} ({part.count} samples)")
    else:
        channel.save_dataset(ds, out)
        print(f"wrote {out} ({ds.count} samples)")
    return 0


def _resolve_train_settings(args):
    cfg = _load_config(args.config) if args.config else {}
    m = cfg.get("model", {})
    t = cfg.get("train", {})
    d = cfg.get("data", {})

    kind = _pick(args.model, m.get("kind"), CRNET_KIND)
    if kind not in (CRNET_KIND, CSINET_KIND):
        raise ValueError(f"model must be crnet or csinet, got {kind!r}")
    model_config = ModelConfig(
        ratio=parse_ratio(_pick(args.ratio, m.get("ratio"), "1/4")),
        negative_slope=float(_pick(args.slope, m.get("negative_slope"), 0.3)),
        head_conv=_pick(args.head, m.get("head_conv"), "k5"),
        n_a=int(m.get("n_a", 32)),
        n_t=int(m.get("n_t", 32)),
    )
    scheduler = _pick(args.scheduler, t.get("scheduler"), SCHEDULER_COSINE)
    default_epochs = 2500 if scheduler == SCHEDULER_COSINE else 1000
    train_config = TrainConfig(
        epochs=int(_pick(args.epochs, t.get("epochs"), default_epochs)),
        warmup_epochs=int(_pick(args.warmup, t.get("warmup_epochs"), 30)),
        gamma_max=float(_pick(args.gamma_max, t.get("gamma_max"), 2e-3)),
        gamma_min=float(_pick(args.gamma_min, t.get("gamma_min"), 5e-5)),
        scheduler=scheduler,
        const_lr=float(_pick(args.const_lr, t.get("const_lr"), 1e-3)),
        batch_size=int(_pick(args.batch_size, t.get("batch_size"), 200)),
        seed=int(_pick(args.seed, t.get("seed"), 0)),
        eval_every=int(_pick(args.eval_every, t.get("eval_every"), 10)),
    )
    train_path = _pick(args.train, d.get("train"), None)
    if train_path is None:
        raise ValueError("--train dataset path is required (flag or config)")
    val_path = _pick(args.val, d.get("val"), None)
    out_dir = Path(_pick(args.out_dir, cfg.get("out_dir"), _default_out_dir()))
    ratio_tag = f"{model_config.ratio.numerator}-{model_config.ratio.denominator}"
    default_name = f"{kind}_{ratio_tag}_{scheduler}_seed{train_config.seed}"
    name = _pick(args.name, cfg.get("name"), default_name)
    return kind, model_config, train_config, train_path, val_path, out_dir, name


def cmd_train(args):
    kind, model_config, train_config, train_path, val_path, out_dir, name = _resolve_train_settings(args)
    train_ds = channel.load_dataset(train_path)
    val_ds = channel.load_dataset(val_path) if val_path else None
    model = build_model(kind, model_config, rng=train_config.seed)
    ckpt, log = train(model, train_ds, train_config, val_ds=val_ds)

    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = save_checkpoint(ckpt, out_dir / f"{name}.ckpt")
    curves_path = log.to_csv(out_dir / f"{name}.curves.csv")
    if log.init_val_nmse_db is not None:
        print(f"init_val_nmse_db={log.init_val_nmse_db!r}")
    if ckpt.val_nmse_db is not None:
        print(f"val_nmse_db={ckpt.val_nmse_db!r}")
    print(f"final_train_loss={log.rows[-1].train_loss!r}")
    print(f"checkpoint={ckpt_path}")
    print(f"curves={curves_path}")
    return 0


def cmd_eval(args):
    ckpt = load_checkpoint(args.ckpt)
    ds = channel.load_dataset(args.data)
    if (ds.n_a, ds.n_t) != (ckpt.model_config.n_a, ckpt.model_config.n_t):
        raise ValueError(
            f"dataset is {ds.n_a}x{ds.n_t} but checkpoint expects "
            f"{ckpt.model_config.n_a}x{ckpt.model_config.n_t}"
        )
    model = rebuild_model(ckpt)
    est = reconstruct(model, ds, batch_size=args.batch_size)
    result = channel.nmse(ds.channels(), est)
    if args.json:
        print(json.dumps({"nmse_linear": result.linear, "nmse_db": result.db}))
    else:
        print(f"nmse_linear={result.linear!r} nmse_db={result.db!r}")
    return 0


def cmd_flops(args):
    if args.all:
        lines = ["model,ratio,flops"]
        print(f"{'model':<8}{'ratio':>7}{'flops':>14}")
        for kind in (CRNET_KIND, CSINET_KIND):
            for ratio in RATIO_GRID:
                config = ModelConfig(ratio=ratio, head_conv=args.head)
                total = model_flops(build_model(kind, config, rng=0)).total
                print(f"{kind:<8}{ratio:>7}{total:>14,}")
                lines.append(f"{kind},{ratio},{total}")
        if args.csv:
            Path(args.csv).write_text("\n".join(lines) + "\n")
            print(f"wrote {args.csv}")
        return 0
    config = ModelConfig(ratio=args.ratio, head_conv=args.head)
    rep = model_flops(build_model(args.model, config, rng=0))
    print(rep.table())
    if args.csv:
        lines = ["layer,kernel,c_in,c_out,flops"]
        lines += [f"{r.name},{r.kernel},{r.c_in},{r.c_out},{r.flops}" for r in rep.rows]
        lines.append(f"total,,,,{rep.total}")
        Path(args.csv).write_text("\n".join(lines) + "\n")
        print(f"wrote {args.csv}")
    return 0


def cmd_curves(args):
    runs = report.load_runs(args.inputs)
    rows = report.merge_curves(runs)
    out = Path(args.out)
    report.write_tidy_csv(rows, out)
    print(f"wrote {out} ({len(rows)} rows)")
    if not args.no_plot:
        base = out.with_suffix("") if out.suffix else out
        for fig_path in report.render_figures(runs, base):
            print(f"wrote {fig_path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="csilab",
        description="CSI feedback lab: synthetic channels, CRNet/CsiNet training, NMSE and flops reports.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic channel dataset")
    g.add_argument("--count", type=int, help="number of samples (required unless --split)")
    g.add_argument("--seed", type=int, default=0, help="generator seed (default: 0)")
    g.add_argument("--out", required=True, help="output dataset path (.csids)")
    g.add_argument("--split", help="comma counts for train[,val[,test]] files sharing one norm, e.g. 2048,256,256")
    g.add_argument("--clusters-min", type=int, default=3, help="min clusters per sample (default: 3)")
    g.add_argument("--clusters-max", type=int, default=6, help="max clusters per sample (default: 6)")
    g.add_argument("--paths-per-cluster", type=int, default=16, help="paths per cluster (default: 16)")
    g.add_argument("--delay-min", type=float, default=6.0, help="min cluster delay in bins (default: 6)")
    g.add_argument("--delay-max", type=float, default=24.0, help="max cluster delay in bins (default: 24)")
    g.add_argument("--delay-spread", type=float, default=1.0, help="within-cluster delay spread (default: 1)")
    g.add_argument("--angle-min", type=float, default=-0.35, help="min cluster sin-angle (default: -0.35)")
    g.add_argument("--angle-max", type=float, default=0.35, help="max cluster sin-angle (default: 0.35)")
    g.add_argument("--angle-spread", type=float, default=0.6, help="within-cluster sin-angle spread (default: 0.6)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a codec and write checkpoint + curves")
    t.add_argument("--model", choices=[CRNET_KIND, CSINET_KIND], help="architecture (default: crnet)")
    t.add_argument("--ratio", help="compression ratio as a fraction (default: 1/4)")
    t.add_argument("--scheduler", choices=[SCHEDULER_COSINE, SCHEDULER_CONST],
                   help="lr scheduler (default: cosine)")
    t.add_argument("--epochs", type=int, help="training epochs (default: 2500 cosine / 1000 const)")
    t.add_argument("--warmup", type=int, help="linear warm-up epochs (default: 30)")
    t.add_argument("--gamma-max", type=float, help="cosine peak lr (default: 2e-3)")
    t.add_argument("--gamma-min", type=float, help="cosine final lr (default: 5e-5)")
    t.add_argument("--const-lr", type=float, help="constant-scheduler lr (default: 1e-3)")
    t.add_argument("--batch-size", type=int, help="minibatch size (default: 200)")
    t.add_argument("--slope", type=float, help="leaky-ReLU negative slope (default: 0.3)")
    t.add_argument("--head", choices=list(HEAD_CHOICES), help="decoder head conv (default: k5)")
    t.add_argument("--seed", type=int, help="training + init seed (default: 0)")
    t.add_argument("--eval-every", type=int, help="validation NMSE cadence in epochs (default: 10)")
    t.add_argument("--train", help="training dataset path")
    t.add_argument("--val", help="validation dataset path")
    t.add_argument("--out-dir", help="output directory (default: $CSILAB_OUT_DIR or .)")
    t.add_argument("--name", help="output base name (default: <model>_<ratio>_<scheduler>_seed<seed>)")
    t.add_argument("--config", help="JSON config file; flags override its values")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True, help="checkpoint path")
    e.add_argument("--data", required=True, help="dataset path")
    e.add_argument("--batch-size", type=int, default=256, help="evaluation batch size (default: 256)")
    e.add_argument("--json", action="store_true", help="emit a JSON object instead of text")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("flops", help="per-layer multiply-accumulate audit")
    f.add_argument("--model", choices=[CRNET_KIND, CSINET_KIND], default=CRNET_KIND,
                   help="architecture (default: crnet)")
    f.add_argument("--ratio", default="1/4", help="compression ratio (default: 1/4)")
    f.add_argument("--head", choices=list(HEAD_CHOICES), default="k5", help="decoder head conv (default: k5)")
    f.add_argument("--all", action="store_true", help="print totals for both models at all five ratios")
    f.add_argument("--csv", help="also write the table as CSV")
    f.set_defaults(func=cmd_flops)

    c = sub.add_parser("curves", help="merge run curves into tidy CSV and render figures")
    c.add_argument("inputs", nargs="+", help="curve CSVs, each PATH or NAME=PATH")
    c.add_argument("--out", required=True, help="tidy CSV output path")
    c.add_argument("--no-plot", action="store_true", help="skip PNG figure rendering")
    c.set_defaults(func=cmd_curves)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FormatError, GenerationError, TrainingDivergedError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
