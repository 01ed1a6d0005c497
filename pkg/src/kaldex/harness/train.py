"""Two-phase training: clDice/BCE, then diagram-loss fine-tuning."""

from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..backbone import UNetPlusPlus
from ..losses import LossWeights, training_loss
from ..metrics import binarize, cl_dice_metric, confusion, dice
from ..topology import count_components, finetune_loss
from .augment import augment
from .checkpoint import load_into, save_checkpoint
from .config import TrainConfig
from .data import PatchSet, build_patches, split_indices
from .errors import DataError, NumericError

log = logging.getLogger(__name__)

CURVE_FIELDS = ["phase", "epoch", "train_loss", "val_loss", "val_dice", "val_cldice",
                "val_component_error", "seconds"]


@dataclass
class TrainResult:
    model: UNetPlusPlus
    checkpoint: Path
    history: list[dict] = field(default_factory=list)
    best: dict = field(default_factory=dict)


def prepare_patches(config: TrainConfig, samples) -> tuple[PatchSet, PatchSet]:
    patches = build_patches(samples, config.patch_size, config.stride)
    train_idx, val_idx = split_indices(len(patches), config.val_fraction, config.seed)
    if len(train_idx) == 0:
        raise DataError("no training patches")
    return patches.subset(train_idx), patches.subset(val_idx)


@torch.no_grad()
def predict_patches(model: UNetPlusPlus, images: np.ndarray, batch: int = 32) -> np.ndarray:
    model.eval()
    out = [model(torch.from_numpy(images[i:i + batch])).numpy() for i in range(0, len(images), batch)]
    return np.concatenate(out) if out else np.zeros_like(images)


def validate(model: UNetPlusPlus, val: PatchSet, config: TrainConfig) -> dict:
    """Loss, pooled Dice, mean hard clDice and mean component-count error."""
    if len(val) == 0:
        return {"val_loss": float("nan"), "val_dice": float("nan"),
                "val_cldice": float("nan"), "val_component_error": float("nan")}
    prob = predict_patches(model, val.images)
    with torch.no_grad():
        loss = training_loss(torch.from_numpy(prob), torch.from_numpy(val.masks),
                             LossWeights(config.alpha), config.k).item()
    pred = binarize(prob[:, 0])
    gt = val.masks[:, 0] > 0.5
    c = confusion(pred, gt)
    cl = [cl_dice_metric(p, g) for p, g in zip(pred, gt)]
    comp = [abs(count_components(p) - count_components(g)) for p, g in zip(pred, gt)]
    return {"val_loss": loss, "val_dice": dice(c), "val_cldice": float(np.mean(cl)),
            "val_component_error": float(np.mean(comp))}


def _batch(train: PatchSet, idx: np.ndarray, rng: np.random.Generator, config: TrainConfig):
    imgs, masks = [], []
    for i in idx:
        im, m = augment(train.images[i], train.masks[i], rng, config.noise_sigma,
                        config.noise_mode, config.flip)
        imgs.append(im)
        masks.append(m)
    return torch.from_numpy(np.stack(imgs)), torch.from_numpy(np.stack(masks))


def _write_curve(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_FIELDS, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(history)


def _run_phase(phase: str, model: UNetPlusPlus, train: PatchSet, val: PatchSet,
               config: TrainConfig, epochs: int, rng: np.random.Generator,
               out_dir: Path, history: list[dict]) -> dict:
    """Optimise one phase and leave the best-on-validation weights in ``model``."""
    select = "val_dice" if phase == "main" else "val_cldice"
    weights = LossWeights(config.alpha)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                                 weight_decay=config.weight_decay)
    ckpt = out_dir / f"{phase}.kdx"
    best_state, best = None, None
    last_good = copy.deepcopy(model.state_dict())
    n_topo = math.ceil(config.topo_fraction * config.batch_size)
    for epoch in range(1, epochs + 1):
        start = time.perf_counter()
        model.train()
        order = rng.permutation(len(train))
        losses = []
        for s in range(0, len(order), config.batch_size):
            x, y = _batch(train, order[s:s + config.batch_size], rng, config)
            prob = model(x)
            if phase == "main":
                loss = training_loss(prob, y, weights, config.k)
            else:
                subset = rng.choice(len(x), size=min(n_topo, len(x)), replace=False)
                loss = finetune_loss(prob, y, topo_subset=np.sort(subset),
                                     diagonal=config.topo_diagonal)
            if not torch.isfinite(loss):
                model.load_state_dict(last_good)
                path = save_checkpoint(out_dir / "last_good.kdx", model, phase=phase,
                                       epoch=epoch - 1, seed=config.seed,
                                       train_config=config.to_dict())
                raise NumericError(f"loss diverged in {phase} epoch {epoch}; last good weights in {path}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        last_good = copy.deepcopy(model.state_dict())
        row = {"phase": phase, "epoch": epoch, "train_loss": float(np.mean(losses)),
               **validate(model, val, config), "seconds": time.perf_counter() - start}
        history.append(row)
        _write_curve(out_dir / "curve.csv", history)
        log.info("%s epoch %d: %s", phase, epoch,
                 ", ".join(f"{k}={v:.4f}" for k, v in row.items() if isinstance(v, float)))
        score = row[select]
        if best is None or score > best[select] or (math.isnan(best[select]) and not math.isnan(score)):
            best, best_state = row, copy.deepcopy(model.state_dict())
            save_checkpoint(ckpt, model, phase=phase, epoch=epoch, seed=config.seed,
                            train_config=config.to_dict(), metrics=row)
    if best_state is not None:
        model.load_state_dict(best_state)
    return best or {}


def train(config: TrainConfig, samples, out_dir, include_finetune: bool = True) -> TrainResult:
    """Phase 1 for ``epochs_main`` epochs, then fine-tuning for ``epochs_finetune``.

    Returns the final model (best validation state of the last phase run)
    and the path of its checkpoint. With ``epochs_finetune == 0`` the result
    is the phase-1 checkpoint.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config.save(out_dir / "config.yaml")
    train_set, val_set = prepare_patches(config, samples)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = UNetPlusPlus(config.backbone_config())
    history: list[dict] = []
    best = _run_phase("main", model, train_set, val_set, config, config.epochs_main,
                      rng, out_dir, history)
    ckpt = out_dir / "main.kdx"
    if not ckpt.exists():
        save_checkpoint(ckpt, model, phase="main", epoch=0, seed=config.seed,
                        train_config=config.to_dict())
    if include_finetune and config.epochs_finetune > 0:
        best = _run_phase("finetune", model, train_set, val_set, config,
                          config.epochs_finetune, rng, out_dir, history)
        ckpt = out_dir / "finetune.kdx"
    model.eval()
    return TrainResult(model, ckpt, history, best)


def finetune(config: TrainConfig, samples, checkpoint, out_dir) -> TrainResult:
    """Fine-tuning phase only, starting from an existing checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_set, val_set = prepare_patches(config, samples)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed + 1)
    model = UNetPlusPlus(config.backbone_config())
    load_into(model, checkpoint)
    history: list[dict] = []
    ckpt = Path(checkpoint)
    best: dict = {}
    if config.epochs_finetune > 0:
        best = _run_phase("finetune", model, train_set, val_set, config,
                          config.epochs_finetune, rng, out_dir, history)
        ckpt = out_dir / "finetune.kdx"
    model.eval()
    return TrainResult(model, ckpt, history, best)
