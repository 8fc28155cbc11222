"""``dcnn`` command-line entry point.

Exit codes: 0 ok, 2 invalid configuration or usage, 3 I/O or data failure,
4 checkpoint incompatible with the requested configuration.
"""
from __future__ import annotations

import argparse
import copy
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import yaml

from dcnn.analysis.ablation import AXIS_VALUES, run_ablation_grid
from dcnn.analysis.cam import BRANCHES, compute_cam, render_heatmap
from dcnn.analysis.cost import analyze, parse_csv_totals  # noqa: F401  (parse_csv_totals re-exported for scripts)
from dcnn.autograd import RngState, Tensor, no_grad
from dcnn.config import ModelConfig
from dcnn.data import DatasetSpec, generate_synthetic, load_dataset, read_image, resize_bilinear, write_synthetic
from dcnn.errors import (
    CheckpointError,
    ConfigError,
    CorruptCheckpointError,
    DataError,
    DatasetError,
    IncompatibleCheckpointError,
    UsageError,
)
from dcnn.model import build_model, fuse_logits
from dcnn.training import TrainConfig, Trainer, apply_checkpoint, evaluate, load_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_CHECKPOINT = 0, 2, 3, 4
SECTIONS = ("model", "train", "data")
CONFIG_NAME = "config.yaml"

log = logging.getLogger("dcnn")


# -- configuration ------------------------------------------------------------


def _parse_value(text: str) -> Any:
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def apply_override(tree: dict, assignment: str) -> None:
    """Apply one ``section.key[.sub]=value`` override in place."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    if parts[0] not in SECTIONS or len(parts) < 2:
        raise ConfigError(f"unknown config key {key!r}: must start with one of {', '.join(s + '.' for s in SECTIONS)}")
    node = tree
    for p in parts[:-1]:
        nxt = node.get(p)
        if nxt is None:
            nxt = node[p] = {}
        elif not isinstance(nxt, dict):
            raise ConfigError(f"unknown config key {key!r}: {p!r} is not a section")
        node = nxt
    node[parts[-1]] = _parse_value(raw)


class RunConfig:
    def __init__(self, model: ModelConfig, train: TrainConfig, data: DatasetSpec):
        self.model, self.train, self.data = model, train, data

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(), "data": dict(vars(self.data))}

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def load_run_config(path: Optional[str], overrides: Sequence[str] = (), preset: Optional[str] = None) -> RunConfig:
    tree: dict = {}
    if path:
        text = Path(path).read_text()
        try:
            tree = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from None
        if not isinstance(tree, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    tree = copy.deepcopy(tree)
    unknown = set(tree) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    if preset:
        tree.setdefault("model", {})
        tree["model"] = {"preset": preset, **{k: v for k, v in tree["model"].items() if k != "preset"}}
    for o in overrides:
        apply_override(tree, o)
    model_tree = tree.get("model") or {"preset": "nano"}
    if "preset" not in model_tree and "scale_preset" not in model_tree and "stages" not in model_tree:
        model_tree = {"preset": "nano", **model_tree}
    try:
        model = ModelConfig.from_dict(model_tree)
        train = TrainConfig.from_dict(tree.get("train") or {})
        data_tree = dict(tree.get("data") or {})
        data_tree.setdefault("num_classes", model.num_classes)
        data_tree.setdefault("image_size", model.input_size[0])
        data = DatasetSpec.from_dict(data_tree)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    if data.num_classes != model.num_classes:
        raise ConfigError(f"data.num_classes={data.num_classes} but model.num_classes={model.num_classes}")
    if data.image_size != model.input_size[0]:
        raise ConfigError(f"data.image_size={data.image_size} but model.input_size={model.input_size}")
    return RunConfig(model, train, data)


def _run_config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    if getattr(args, "epochs", None) is not None:
        overrides.append(f"train.epochs={args.epochs}")
    return load_run_config(args.config, overrides, getattr(args, "preset", None))


def _checkpoint_run_config(args, ckpt_path: Path) -> RunConfig:
    """--config if given, else the config echoed next to the checkpoint, else its metadata."""
    if args.config or args.preset:
        return _run_config(args)
    echoed = ckpt_path.parent / CONFIG_NAME
    if echoed.is_file():
        return load_run_config(str(echoed), args.set or [])
    ckpt = load_checkpoint(ckpt_path)
    model = ModelConfig.from_dict(ckpt.model_config)
    tree = {"model": model.to_dict(), "train": ckpt.train_config}
    for o in args.set or []:
        apply_override(tree, o)
    return RunConfig(
        ModelConfig.from_dict(tree["model"]),
        TrainConfig.from_dict(tree.get("train") or {}),
        DatasetSpec.from_dict({"num_classes": model.num_classes, "image_size": model.input_size[0], **tree.get("data", {})}),
    )


def _load_model(rc: RunConfig, ckpt_path: Path):
    if not ckpt_path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt_path}")
    ckpt = load_checkpoint(ckpt_path, expected_fingerprint=rc.model.fingerprint())
    model = build_model(rc.model, RngState(rc.train.seed))
    apply_checkpoint(ckpt, model)
    model.eval()
    return model


# -- subcommands --------------------------------------------------------------


def cmd_train(args) -> int:
    rc = _run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rc.dump(out / CONFIG_NAME)
    data = load_dataset(rc.data)
    model = build_model(rc.model, RngState(rc.train.seed))
    metrics = out / "metrics.csv"
    if args.resume:
        trainer = Trainer.resume(args.resume, model, rc.train)
    else:
        trainer = Trainer(model, rc.train, RngState(rc.train.seed).get_state())
        if metrics.exists():
            metrics.unlink()
    ckpt_dir = out / "checkpoints"
    if rc.train.checkpoint_every:
        ckpt_dir.mkdir(exist_ok=True)

    def progress(epoch, report):
        log.info("epoch %d loss %.5f top1 %.4f top5 %.4f", epoch, report.mean_loss, report.top1, report.top5)

    trainer.fit(data, metrics_path=metrics, checkpoint_dir=ckpt_dir, callback=progress)
    if not metrics.exists():
        metrics.write_text("epoch,loss,top1,top5,seconds\n")
    trainer.save(out / "final.ckpt")
    print(f"trained {trainer.epoch} epochs; outputs in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt_path = Path(args.checkpoint)
    rc = _checkpoint_run_config(args, ckpt_path)
    model = _load_model(rc, ckpt_path)
    data = load_dataset(rc.data)
    rep = evaluate(model, data, batch_size=rc.train.batch_size)
    print(f"samples {len(data)}  top1 {rep.top1:.4f}  top5 {rep.top5:.4f}  loss {rep.loss:.6f}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    rc = _run_config(args)
    shape = None
    if args.input_size:
        shape = (3, args.input_size, args.input_size)
    report = analyze(rc.model, shape)
    if args.csv:
        text = report.to_csv()
        if args.csv == "-":
            sys.stdout.write(text)
        else:
            Path(args.csv).write_text(text)
            print(f"wrote {args.csv}")
    if not args.csv or args.csv != "-":
        print(report.to_text(explain=args.explain, reference=rc.model.scale_preset == "full"))
    return EXIT_OK


def cmd_cam(args) -> int:
    ckpt_path = Path(args.checkpoint)
    rc = _checkpoint_run_config(args, ckpt_path)
    model = _load_model(rc, ckpt_path)
    size = rc.model.input_size[0]
    if args.image:
        image = resize_bilinear(read_image(args.image), size)
        label = None
    else:
        data = load_dataset(rc.data)
        if not 0 <= args.index < len(data):
            raise DataError(f"--index {args.index} outside dataset of {len(data)} samples")
        image, label = data[args.index].image, data[args.index].label
    if args.cls is not None:
        cls = args.cls
    elif label is not None:
        cls = label
    else:
        with no_grad():
            lsc, lsa, _ = model(Tensor(image[None]))
        cls = int(np.argmax(fuse_logits(lsc, lsa, rc.model.head_fusion).data[0]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    branches = BRANCHES if args.branch == "all" else (args.branch,)
    for br in branches:
        cam = compute_cam(model, image, cls, br)
        path = out / f"cam_{br}.ppm"
        render_heatmap(cam, image, path, side_by_side=args.side_by_side)
        print(f"wrote {path} (class {cls}, branch {br})")
    return EXIT_OK


def cmd_ablate(args) -> int:
    rc = _run_config(args)
    axes = [a.strip() for a in args.axes.split(",") if a.strip()] if args.axes else []
    data = load_dataset(rc.data)
    report = run_ablation_grid(rc.model, axes, rc.train, data, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rc.dump(out / CONFIG_NAME)
    (out / "ablation.csv").write_text(report.to_csv())
    print(report.to_text())
    return EXIT_OK


def cmd_datagen(args) -> int:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"data.seed={args.seed}")
    rc = load_run_config(args.config, overrides, args.preset)
    spec = DatasetSpec(**{**vars(rc.data), "kind": "synthetic", "root_path": None})
    samples = generate_synthetic(spec)
    write_synthetic(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file with model/train/data sections")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, e.g. train.lr=0.01 (repeatable)")
    common.add_argument("--preset", choices=("full", "nano", "micro"), help="model scale preset (default nano)")
    common.add_argument("--seed", type=int, help="run seed (train.seed; data.seed for datagen)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dcnn", description="Dual-branch separable-conv / self-attention classifier toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a model, writing metrics.csv and checkpoints")
    t.add_argument("--out", default="run", help="run directory")
    t.add_argument("--epochs", type=int, help="override train.epochs")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="top-1/top-5 of a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", parents=[common], help="parameter and FLOP report")
    a.add_argument("--explain", action="store_true", help="append the layer-layout reconciliation notes")
    a.add_argument("--csv", metavar="PATH", help="write the per-layer CSV to PATH ('-' for stdout)")
    a.add_argument("--input-size", type=int, help="square input side (default: config input_size)")
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("cam", parents=[common], help="class activation map overlays (PPM)")
    c.add_argument("--checkpoint", required=True)
    src = c.add_mutually_exclusive_group()
    src.add_argument("--image", help="image file to explain")
    src.add_argument("--index", type=int, default=0, help="dataset sample index (default 0)")
    c.add_argument("--class", dest="cls", type=int, help="class index (default: sample label or prediction)")
    c.add_argument("--branch", choices=BRANCHES + ("all",), default="fused")
    c.add_argument("--side-by-side", action="store_true", help="place the original left of the overlay")
    c.add_argument("--out", default="cam", help="output directory")
    c.set_defaults(func=cmd_cam)

    b = sub.add_parser("ablate", parents=[common], help="single-variable ablation grid")
    b.add_argument("--axes", default="", help=f"comma list from {','.join(AXIS_VALUES)}")
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--out", default="ablation")
    b.add_argument("--epochs", type=int, help="override train.epochs")
    b.set_defaults(func=cmd_ablate)

    g = sub.add_parser("datagen", parents=[common], help="write the synthetic dataset to disk")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_datagen)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except IncompatibleCheckpointError as exc:
        print(f"error: incompatible checkpoint: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (ConfigError, UsageError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CorruptCheckpointError, CheckpointError, DataError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
