"""Command-line entry point: synth, train, finetune, predict, eval, plot."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
from PIL import Image

from .config import TrainConfig
from .errors import KaldexError, MissingArtifactError

log = logging.getLogger("kaldex")

OUTPUT_ENV = "KALDEX_OUTPUT_DIR"


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUTPUT_ENV, "kaldex_out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--layout", default="synthetic")
    p.add_argument("--split", default=None, help="split subfolder, e.g. training")


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file with TrainConfig fields")
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if isinstance(f.default, bool):
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            p.add_argument(flag, dest=f.name, type=type(f.default), default=None)


def _config(args) -> TrainConfig:
    data = TrainConfig.load(args.config).to_dict() if args.config else {}
    for f in fields(TrainConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            data[f.name] = value
    return TrainConfig.from_dict(data)


def _dataset(args, normalization: str = "standardize"):
    from .data import DatasetSpec, ingest

    result = ingest(DatasetSpec(args.data, args.layout, args.split), normalization)
    for image_id, reason in result.rejected:
        print(f"rejected {image_id}: {reason}", file=sys.stderr)
    return result.samples


def cmd_synth(args) -> int:
    from .data import write_sample_png
    from .synth import synth_generate

    out = _out_dir(args)
    for i, ph in enumerate(synth_generate(args.n, args.size, args.seed)):
        write_sample_png(out, f"phantom_{i:03d}", ph.image, ph.mask)
    print(f"wrote {args.n} phantoms to {out}")
    return 0


def cmd_train(args) -> int:
    from .train import train

    config = _config(args)
    result = train(config, _dataset(args, config.normalization), _out_dir(args))
    print(json.dumps({"checkpoint": str(result.checkpoint), "best": result.best}))
    return 0


def cmd_finetune(args) -> int:
    from .train import finetune

    config = _config(args)
    result = finetune(config, _dataset(args, config.normalization), args.checkpoint, _out_dir(args))
    print(json.dumps({"checkpoint": str(result.checkpoint), "best": result.best}))
    return 0


def cmd_predict(args) -> int:
    from .checkpoint import load_checkpoint
    from .predict import predict

    model, manifest = load_checkpoint(args.checkpoint)
    normalization = manifest.get("train_config", {}).get("normalization", "standardize")
    out = _out_dir(args)
    for s in _dataset(args, normalization):
        prob, mask = predict(model, s.image)
        np.save(out / f"{s.image_id}_prob.npy", prob.astype(np.float32))
        Image.fromarray(np.round(prob * 255).astype(np.uint8)).save(out / f"{s.image_id}_prob.png")
        Image.fromarray(mask.astype(np.uint8) * 255).save(out / f"{s.image_id}_mask.png")
    print(f"predictions written to {out}")
    return 0


def _load_prob(pred_dir: Path, image_id: str) -> np.ndarray:
    path = pred_dir / f"{image_id}_prob.npy"
    if not path.exists():
        raise MissingArtifactError(f"missing prediction {path}")
    return np.load(path)


def cmd_eval(args) -> int:
    from ..metrics import evaluate, write_metrics

    pred_dir, out = Path(args.pred), _out_dir(args)
    rows = []
    for s in _dataset(args):
        row = evaluate(_load_prob(pred_dir, s.image_id), s.mask, s.fov)
        rows.append({"image_id": s.image_id, **row})
    if not rows:
        raise MissingArtifactError("no images to evaluate")
    summary = write_metrics(rows, out / "metrics.json", out / "metrics.csv")
    print(json.dumps(summary))
    return 0


def cmd_plot(args) -> int:
    from ..metrics import binarize
    from ..topology import compute_diagram
    from .plots import plot_curve, plot_diagram, plot_offsets, plot_overlay

    pred_dir, out = Path(args.pred), _out_dir(args)
    samples = _dataset(args)[: args.limit]
    if not samples:
        raise MissingArtifactError("no images to plot")
    for s in samples:
        prob = _load_prob(pred_dir, s.image_id)
        plot_overlay(s.image, binarize(prob), s.mask, out / f"overlay_{s.image_id}.png")
        plot_diagram([compute_diagram(prob), compute_diagram(s.mask.astype(np.float64))],
                     out / f"diagram_{s.image_id}.png", ["prediction", "ground truth"])
    if args.checkpoint:
        from .checkpoint import load_checkpoint

        model, _ = load_checkpoint(args.checkpoint)
        size = model.config.patch_size
        plot_offsets(model, samples[0].image[:size, :size], out / "offsets.png")
    if args.curve:
        plot_curve(args.curve, out / "curve.png")
    print(f"figures written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kaldex", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--out", default=None, help=f"output directory (default ${OUTPUT_ENV})")
        p.set_defaults(func=fn)
        return p

    p = add("synth", cmd_synth, "generate synthetic phantoms")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)

    p = add("train", cmd_train, "train (main phase, then fine-tuning)")
    _add_data_args(p)
    _add_config_args(p)

    p = add("finetune", cmd_finetune, "fine-tune an existing checkpoint")
    _add_data_args(p)
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)

    p = add("predict", cmd_predict, "segment whole images")
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True)

    p = add("eval", cmd_eval, "score predictions against ground truth")
    _add_data_args(p)
    p.add_argument("--pred", required=True, help="directory written by predict")

    p = add("plot", cmd_plot, "overlays, offset quiver and persistence diagrams")
    _add_data_args(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--curve", default=None, help="curve.csv from training")
    p.add_argument("--limit", type=int, default=4, help="max images to plot")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except KaldexError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
