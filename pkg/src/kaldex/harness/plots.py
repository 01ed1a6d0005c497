"""Figures: segmentation overlays, LD offset quivers and persistence diagrams."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from ..backbone import UNetPlusPlus  # noqa: E402
from ..topology import PersistenceDiagram, compute_diagram  # noqa: E402
from .errors import MissingArtifactError  # noqa: E402

TP_COLOR = (255, 255, 255)
FP_COLOR = (255, 40, 40)
FN_COLOR = (40, 120, 255)


def _require(obj, what: str):
    if obj is None:
        raise MissingArtifactError(f"cannot plot: {what} is missing")
    if isinstance(obj, (str, Path)) and not Path(obj).exists():
        raise MissingArtifactError(f"cannot plot: {what} {obj} does not exist")
    return obj


def overlay_array(image, pred, gt) -> np.ndarray:
    """RGB overlay: grayscale image, white hits, red false positives, blue misses."""
    image = np.asarray(_require(image, "image"), dtype=np.float64)
    pred = np.asarray(_require(pred, "prediction")) > 0
    gt = np.asarray(_require(gt, "ground truth")) > 0
    span = image.max() - image.min()
    gray = (image - image.min()) / span if span > 0 else np.zeros_like(image)
    rgb = np.repeat((gray * 0.6 * 255)[..., None], 3, axis=-1).astype(np.uint8)
    rgb[pred & gt] = TP_COLOR
    rgb[pred & ~gt] = FP_COLOR
    rgb[~pred & gt] = FN_COLOR
    return rgb


def false_color_pixels(rgb: np.ndarray) -> int:
    return int(sum(np.all(rgb == c, axis=-1).sum() for c in (FP_COLOR, FN_COLOR)))


def plot_overlay(image, pred, gt, path) -> np.ndarray:
    rgb = overlay_array(image, pred, gt)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    plt.imsave(path, rgb)
    return rgb


@torch.no_grad()
def offset_vectors(model: UNetPlusPlus, image: np.ndarray, site: str | None = None,
                   orientation: str = "horizontal", step: int = 1):
    """Tap positions and smoothed displacements of one LD branch.

    Runs the model on ``image`` (a normalized patch), captures the input of
    the LD block at ``site`` and returns ``(x, y, u, v)`` arrays in that
    node's feature grid: arrow tails at the rigid tap positions, arrow
    vectors the learned displacement across the kernel axis.
    """
    if len(model.ldca) == 0:
        raise MissingArtifactError("model has no LDCA modules, so there are no offsets")
    site = site or next(iter(model.ldca.keys()))
    if site not in model.ldca:
        raise MissingArtifactError(f"no LDCA module at site {site}")
    block = model.ldca[site].ld
    captured = {}

    def grab(module, inp, out):
        # returning None keeps the block's output untouched
        captured.setdefault("x", inp[0])

    handle = block.register_forward_hook(grab)
    try:
        model.eval()
        model(torch.as_tensor(np.asarray(image, dtype=np.float32))[None, None])
    finally:
        handle.remove()
    h_field, v_field = block.offset_fields(captured["x"])
    field = h_field if orientation == "horizontal" else v_field
    smoothed = field.smoothed[0].numpy()          # (K-1, H, W)
    arm = smoothed.shape[0] // 2
    # displacement per tap in kernel order: negative arm (outermost first), center, positive arm
    disp = np.concatenate([smoothed[arm:][::-1], np.zeros_like(smoothed[:1]), smoothed[:arm]])
    steps = np.arange(-arm, arm + 1, dtype=np.float64)
    h, w = smoothed.shape[1:]
    ys, xs = np.mgrid[0:h:step, 0:w:step]
    disp = disp[:, ::step, ::step]
    if orientation == "horizontal":
        x = xs[None] + steps[:, None, None]
        y = np.broadcast_to(ys[None], x.shape)
        u, v = np.zeros_like(disp), disp
    else:
        y = ys[None] + steps[:, None, None]
        x = np.broadcast_to(xs[None], y.shape)
        u, v = disp, np.zeros_like(disp)
    return x.ravel(), y.ravel(), u.ravel(), v.ravel()


def plot_quiver(x, y, u, v, path, title: str = "LD offsets"):
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.quiver(x, y, u, v, angles="xy", scale_units="xy", scale=1, width=0.003)
    ax.set_aspect("equal")
    ax.invert_yaxis()
    ax.set_title(title)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return np.asarray(u), np.asarray(v)


def plot_offsets(model: UNetPlusPlus, image, path, site: str | None = None,
                 orientation: str = "horizontal", step: int = 2):
    x, y, u, v = offset_vectors(model, image, site, orientation, step)
    return plot_quiver(x, y, u, v, path, f"{orientation} LD offsets")


def plot_diagram(diagrams, path, labels=None) -> list[np.ndarray]:
    """Scatter one or more persistence diagrams in the birth/death plane."""
    if isinstance(diagrams, (PersistenceDiagram, np.ndarray)):
        diagrams = [diagrams]
    diagrams = [_require(d, "persistence diagram") for d in diagrams]
    labels = labels or [f"diagram {i}" for i in range(len(diagrams))]
    fig, ax = plt.subplots(figsize=(5, 5))
    plotted = []
    for d, label in zip(diagrams, labels):
        pts = d.points if isinstance(d, PersistenceDiagram) else np.asarray(d).reshape(-1, 2)
        ax.scatter(pts[:, 0], pts[:, 1], s=25, alpha=0.7, label=label)
        plotted.append(pts)
    ax.plot([0, 1], [0, 1], "k--", lw=0.8)
    ax.set_xlabel("birth")
    ax.set_ylabel("death")
    ax.legend()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return plotted


def plot_mask_diagram(mask, path, label: str = "mask") -> np.ndarray:
    return plot_diagram([compute_diagram(np.asarray(mask, dtype=np.float64))], path, [label])[0]


def plot_curve(curve_csv, path) -> None:
    import csv

    _require(Path(curve_csv), "training curve")
    with open(curve_csv) as fh:
        rows = list(csv.DictReader(fh))
    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.arange(1, len(rows) + 1)
    for key in ("val_dice", "val_cldice"):
        ax.plot(x, [float(r[key]) for r in rows], marker="o", label=key)
    ax.set_xlabel("epoch (all phases)")
    ax.legend()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)

