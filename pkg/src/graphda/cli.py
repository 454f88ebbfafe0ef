"""Command-line front end: ``gen``, ``train``, ``eval``, ``export``.

One command per process. Every training run directory receives a
``manifest.txt`` before the first optimizer step: a flat, diffable
key=value file holding the fully resolved configuration, input file
digests, and the package version, so the run can be re-executed
bit-identically from the manifest alone.

Exit codes are part of the interface: 0 success, 2 usage error,
3 data-format error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from .datasets import (
    DataFormatError,
    Dataset,
    Domain,
    NormStats,
    ShiftConfig,
    gen_synthetic_shift,
    normalize,
    read_dataset,
    read_label_file,
    write_dataset,
    write_label_file,
)
from .graphs import EdgeStats, build_graph, edge_stats, percentile_threshold
from .model import Model, config_from_tensors, load_checkpoint
from .pseudo import assign_pseudo_labels
from .training import (
    DivergenceError,
    TrainConfig,
    evaluate,
    export_embeddings,
    train,
)


class UsageError(Exception):
    """Bad arguments or preconditions; maps to exit code 2."""


def _version() -> str:
    try:
        return metadata.version("graphda")
    except metadata.PackageNotFoundError:
        return "0.0.0"


# -- config value round-trip ---------------------------------------------------
#
# Manifest and config-file values share one text form so a manifest's
# config section can be fed back in as a config file unchanged.


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1"):
        return True
    if t in ("false", "0"):
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _parse_floats(text: str) -> tuple:
    return tuple(float(p) for p in text.split(",") if p.strip())


def _parse_ints(text: str) -> tuple:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _parse_percentile(text: str):
    return None if text.strip().lower() == "none" else float(text)


_FIELD_PARSERS = {
    "lr": float,
    "weight_decay": float,
    "batch_size": int,
    "epochs": int,
    "threshold": float,
    "threshold_percentile": _parse_percentile,
    "epsilon": float,
    "margin": float,
    "kernel_scales": _parse_floats,
    "hidden": int,
    "phi_dim": int,
    "backbone_hidden": int,
    "conv_channels": _parse_ints,
    "seed": int,
    "precision": str,
    "use_gnn": _parse_bool,
    "use_pseudo": _parse_bool,
    "sticky_pseudo": _parse_bool,
    "pseudo_refresh": str,
    "warmup_epochs": int,
    "loss_weights": _parse_floats,
    "graph_features": str,
    "lg_features": str,
    "augment": _parse_bool,
    "checkpoint_every": int,
    "positive_class": int,
}


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):  # ``float(...)`` first: numpy scalars repr differently
        return repr(float(value))
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def _read_config_file(path) -> dict:
    """Flat key=value text; blank lines and # comments are skipped."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}")
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _FIELD_PARSERS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            out[key] = _FIELD_PARSERS[key](val)
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {exc}")
    return out


def _resolve_train_config(args) -> TrainConfig:
    """Defaults, then HDA_SEED, then the config file, then explicit flags."""
    values = {f.name: getattr(_DEFAULT_CONFIG, f.name) for f in dataclasses.fields(TrainConfig)}
    env_seed = os.environ.get("HDA_SEED")
    if env_seed is not None:
        try:
            values["seed"] = int(env_seed)
        except ValueError:
            raise UsageError(f"HDA_SEED must be an integer, got {env_seed!r}")
    if args.config is not None:
        values.update(_read_config_file(args.config))
    for name in _FIELD_PARSERS:
        if hasattr(args, name):  # flags use SUPPRESS: present only when given
            values[name] = getattr(args, name)
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc))


_DEFAULT_CONFIG = TrainConfig()


# -- shared helpers ------------------------------------------------------------


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_manifest(path, entries: dict) -> None:
    with open(path, "w", newline="\n") as fh:
        for key in sorted(entries):
            fh.write(f"{key}={entries[key]}\n")


def _model_from_blob(blob: dict) -> Model:
    model = Model.init(config_from_tensors(blob), np.random.default_rng(0))
    model.load_state(blob)
    return model


def _check_input_dims(model: Model, dataset: Dataset, path) -> None:
    if dataset.feature_dims != model.config.input_dims:
        raise DataFormatError(
            f"{path}: feature shape {dataset.feature_dims} does not match "
            f"checkpoint input dims {model.config.input_dims}"
        )


def _read_eval_labels(path, target: Dataset) -> np.ndarray:
    labels, _, m = read_label_file(path)
    if labels.shape[0] != len(target) or m != target.num_classes:
        raise DataFormatError(
            f"{path}: {labels.shape[0]} labels over {m} classes does not match "
            f"target file ({len(target)} samples, {target.num_classes} classes)"
        )
    return labels


def _pooled_phi(model: Model, source: Dataset, target: Dataset, chunk: int = 512) -> np.ndarray:
    blocks = []
    for ds in (source, target):
        for lo in range(0, len(ds), chunk):
            blocks.append(model.backbone_forward(ds.features[lo:lo + chunk]).data)
    return np.concatenate(blocks)


# -- subcommands ---------------------------------------------------------------


def cmd_gen(args) -> int:
    out = Path(args.out)
    if not out.is_dir():
        raise UsageError(f"output directory {out} does not exist")
    paths = {
        "source": out / "source.hda",
        "target": out / "target.hda",
        "eval_labels": out / "target_labels.hda",
        "manifest": out / "manifest.txt",
    }
    clashes = [str(p) for p in paths.values() if p.exists()]
    if clashes and not args.force:
        raise UsageError("refusing to overwrite " + ", ".join(clashes) + " (pass --force)")
    try:
        cfg = ShiftConfig(
            num_classes=args.classes,
            per_class=args.per_class,
            dim=args.dim,
            radius=args.radius,
            noise_sigma=args.sigma,
            rotation_deg=args.rotate,
            translation=tuple(args.translate),
            cov_scale=args.cov_scale,
        )
    except ValueError as exc:
        raise UsageError(str(exc))
    source, target, ev = gen_synthetic_shift(cfg, np.random.default_rng(args.seed))
    write_dataset(paths["source"], source)
    write_dataset(paths["target"], target)
    write_label_file(paths["eval_labels"], ev, source.feature_dims, cfg.num_classes)
    entries = {"command": "gen", "version": _version(), "gen.seed": args.seed}
    for name in ("num_classes", "per_class", "dim", "radius", "noise_sigma",
                 "rotation_deg", "translation", "cov_scale"):
        entries[f"gen.{name}"] = _fmt(getattr(cfg, name))
    for name in ("source", "target", "eval_labels"):
        entries[f"files.{name}"] = paths[name].name
        entries[f"digest.{name}"] = _digest(paths[name])
    _write_manifest(paths["manifest"], entries)
    print(f"wrote {len(source)} source and {len(target)} target samples to {out}")
    return 0


def cmd_train(args) -> int:
    config = _resolve_train_config(args)
    source = read_dataset(args.source, Domain.SOURCE)
    target = read_dataset(args.target, Domain.TARGET)
    eval_labels = _read_eval_labels(args.labels, target) if args.labels else None

    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    entries = {
        "command": "train",
        "version": _version(),
        "source": str(args.source),
        "target": str(args.target),
        "out": str(args.out),
        "digest.source": _digest(args.source),
        "digest.target": _digest(args.target),
    }
    if args.labels:
        entries["eval_labels"] = str(args.labels)
        entries["digest.eval_labels"] = _digest(args.labels)
    for f in dataclasses.fields(TrainConfig):
        entries[f"config.{f.name}"] = _fmt(getattr(config, f.name))
    _write_manifest(run_dir / "manifest.txt", entries)

    _, history = train(config, source, target, eval_labels=eval_labels, run_dir=run_dir)
    last = history[-1]
    print(
        f"completed {config.epochs} epochs: l_total={_fmt(last.l_total)} "
        f"precision={_fmt(last.precision)} accuracy={_fmt(last.accuracy)}"
    )
    print(f"artifacts in {run_dir}")
    return 0


def cmd_eval(args) -> int:
    blob = load_checkpoint(args.checkpoint)
    model = _model_from_blob(blob)
    target = read_dataset(args.target, Domain.TARGET)
    _check_input_dims(model, target, args.target)
    labels = _read_eval_labels(args.labels, target)
    stats = NormStats(blob["norm/target_mean"], blob["norm/target_std"])
    metrics = evaluate(
        model,
        stats.apply(target.features),
        labels,
        positive_class=int(blob["meta/positive_class"]),
    )
    epoch = int(blob["meta/epoch"])
    if args.json:
        print(json.dumps({
            "epoch": epoch,
            "precision": metrics.precision,
            "accuracy": metrics.accuracy,
            "precision_defined": metrics.precision_defined,
        }))
    else:
        print(f"epoch={epoch} precision={_fmt(metrics.precision)} "
              f"accuracy={_fmt(metrics.accuracy)}")
    row_path = Path(args.out)
    fresh = not row_path.exists()
    with open(row_path, "a", newline="\n") as fh:
        if fresh:
            fh.write("epoch,precision,accuracy\n")
        fh.write(f"{epoch},{_fmt(metrics.precision)},{_fmt(metrics.accuracy)}\n")
    return 0


def cmd_export(args) -> int:
    blob = load_checkpoint(args.checkpoint)
    model = _model_from_blob(blob)
    source = read_dataset(args.source, Domain.SOURCE)
    target = read_dataset(args.target, Domain.TARGET)
    _check_input_dims(model, source, args.source)
    _check_input_dims(model, target, args.target)
    eval_labels = _read_eval_labels(args.labels, target) if args.labels else None
    source_n, _ = normalize(source, NormStats(blob["norm/source_mean"], blob["norm/source_std"]))
    target_n, _ = normalize(target, NormStats(blob["norm/target_mean"], blob["norm/target_std"]))
    epoch = int(blob["meta/epoch"])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        state = assign_pseudo_labels(model, target_n, args.epsilon, epoch=epoch)
    except ValueError as exc:
        raise UsageError(str(exc))
    emb_path = out / f"embeddings_epoch{epoch:03d}.csv"
    export_embeddings(emb_path, model, source_n, target_n,
                      epoch=epoch, pseudo_labels=state.labels)

    # Pooled graph at the stored threshold, audited against source truth
    # plus the eval sidecar when provided (-1 rows count as unknown).
    phi = _pooled_phi(model, source_n, target_n)
    percentile = float(blob["meta/threshold_percentile"])
    if np.isfinite(percentile):
        threshold = percentile_threshold(phi, percentile)
    else:
        threshold = float(blob["meta/threshold"])
    audit = np.concatenate([
        source.labels,
        eval_labels if eval_labels is not None else np.full(len(target), -1, dtype=np.int64),
    ])
    if threshold > 0:
        stats = edge_stats(build_graph(phi, threshold), audit)
    else:
        stats = EdgeStats(right=0, wrong=0, unknown=0)
    edges_path = out / f"edges_epoch{epoch:03d}.csv"
    with open(edges_path, "w", newline="\n") as fh:
        fh.write("epoch,right,wrong,unknown,total\n")
        fh.write(f"{epoch},{stats.right},{stats.wrong},{stats.unknown},{stats.total}\n")
    print(f"wrote {emb_path.name} and {edges_path.name} to {out}")
    return 0


# -- argument parsing ----------------------------------------------------------


def _add_config_flags(parser) -> None:
    g = parser.add_argument_group("training configuration")
    S = argparse.SUPPRESS
    g.add_argument("--lr", type=float, default=S, help="Adam learning rate (0.001)")
    g.add_argument("--weight-decay", dest="weight_decay", type=float, default=S,
                   help="coupled L2 penalty (1e-6)")
    g.add_argument("--batch", dest="batch_size", type=int, default=S,
                   help="joint batch size, half per domain (256)")
    g.add_argument("--epochs", type=int, default=S, help="training epochs (100)")
    g.add_argument("--threshold", type=float, default=S,
                   help="fixed edge distance threshold (150.0)")
    g.add_argument("--threshold-percentile", dest="threshold_percentile",
                   type=_parse_percentile, default=S,
                   help="derive threshold from this pairwise-distance percentile; 'none' for fixed")
    g.add_argument("--epsilon", type=float, default=S,
                   help="pseudo-label confidence gate (0.97)")
    g.add_argument("--margin", type=float, default=S,
                   help="cross-class separation margin (2.0)")
    g.add_argument("--kernel-scales", dest="kernel_scales", type=_parse_floats, default=S,
                   help="comma list of bandwidth multipliers for the kernel mixture")
    g.add_argument("--hidden", type=int, default=S, help="graph layer width (64)")
    g.add_argument("--phi-dim", dest="phi_dim", type=int, default=S,
                   help="backbone feature width (64)")
    g.add_argument("--backbone-hidden", dest="backbone_hidden", type=int, default=S,
                   help="backbone hidden width (64)")
    g.add_argument("--conv-channels", dest="conv_channels", type=_parse_ints, default=S,
                   help="comma pair of conv channels for image inputs (8,16)")
    g.add_argument("--seed", type=int, default=S, help="run seed (0)")
    g.add_argument("--precision", choices=("f32", "f64"), default=S,
                   help="float width for the whole run (f64)")
    g.add_argument("--no-gnn", dest="use_gnn", action="store_false", default=S,
                   help="classify from backbone features; no graph is built")
    g.add_argument("--no-pseudo", dest="use_pseudo", action="store_false", default=S,
                   help="train on source labels only")
    g.add_argument("--sticky", dest="sticky_pseudo", action="store_true", default=S,
                   help="pseudo-labels persist once assigned")
    g.add_argument("--pseudo-refresh", dest="pseudo_refresh", choices=("epoch", "batch"),
                   default=S, help="when to reassign pseudo-labels (epoch)")
    g.add_argument("--warmup", dest="warmup_epochs", type=int, default=S,
                   help="epochs before pseudo-labeling starts (0)")
    g.add_argument("--loss-weights", dest="loss_weights", type=_parse_floats, default=S,
                   help="comma triple scaling alignment, separation, and classification terms")
    g.add_argument("--graph-features", dest="graph_features",
                   choices=("pre_relu", "post_relu"), default=S,
                   help="backbone activations used for edge distances (pre_relu)")
    g.add_argument("--lg-features", dest="lg_features", choices=("gnn", "backbone"),
                   default=S, help="features the separation loss acts on (gnn)")
    g.add_argument("--no-augment", dest="augment", action="store_false", default=S,
                   help="disable image augmentation")
    g.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=S,
                   help="epochs between checkpoints (10)")
    g.add_argument("--positive-class", dest="positive_class", type=int, default=S,
                   help="class whose precision is reported (1)")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphda",
        description="Unsupervised domain adaptation with batch graphs and pseudo-labels.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {_version()}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic source/target pair")
    gen.add_argument("--out", required=True, help="existing directory for the output files")
    gen.add_argument("--classes", type=int, default=2, help="class count (2)")
    gen.add_argument("--per-class", dest="per_class", type=int, default=500,
                     help="samples per class per domain (500)")
    gen.add_argument("--dim", type=int, default=2, help="feature dimensionality (2)")
    gen.add_argument("--radius", type=float, default=2.0,
                     help="distance of class means from the origin (2.0)")
    gen.add_argument("--sigma", type=float, default=1.0, help="class noise scale (1.0)")
    gen.add_argument("--rotate", type=float, default=45.0,
                     help="target-domain rotation in degrees (45)")
    gen.add_argument("--translate", type=_parse_floats, default=(),
                     help="comma vector added to target features")
    gen.add_argument("--cov-scale", dest="cov_scale", type=float, default=1.0,
                     help="target noise rescale (1.0)")
    gen.add_argument("--seed", type=int, default=0, help="generator seed (0)")
    gen.add_argument("--force", action="store_true", help="overwrite existing output files")
    gen.set_defaults(func=cmd_gen)

    tr = sub.add_parser("train", help="run the adaptation loop, writing all run artifacts")
    tr.add_argument("--source", required=True, help="labeled source dataset file")
    tr.add_argument("--target", required=True, help="unlabeled target dataset file")
    tr.add_argument("--labels", help="target ground-truth sidecar; metrics only, never trained on")
    tr.add_argument("--out", required=True, help="run directory (created if missing)")
    tr.add_argument("--config", help="flat key=value config file; flags override it")
    _add_config_flags(tr)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="score a checkpoint on a labeled target set")
    ev.add_argument("--checkpoint", required=True, help="checkpoint file to score")
    ev.add_argument("--target", required=True, help="target dataset file")
    ev.add_argument("--labels", required=True, help="ground-truth sidecar for the target file")
    ev.add_argument("--out", default="eval.csv", help="CSV file the result row is appended to")
    ev.add_argument("--json", action="store_true", help="print the result as JSON")
    ev.set_defaults(func=cmd_eval)

    ex = sub.add_parser("export", help="dump per-sample embeddings and edge statistics")
    ex.add_argument("--checkpoint", required=True, help="checkpoint file to export from")
    ex.add_argument("--source", required=True, help="labeled source dataset file")
    ex.add_argument("--target", required=True, help="unlabeled target dataset file")
    ex.add_argument("--labels", help="optional target sidecar for edge auditing")
    ex.add_argument("--out", required=True, help="output directory (created if missing)")
    ex.add_argument("--epsilon", type=float, default=0.97,
                    help="confidence gate for the exported pseudo-labels (0.97)")
    ex.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse has already printed its message
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
