"""Dataset discovery, image loading, normalization and the patch split."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from ..tiling import extract_patches
from .errors import DataError

log = logging.getLogger(__name__)

LAYOUTS = ("drive", "chase", "stare", "fives", "octa", "synthetic")
IMAGE_SUFFIXES = {".png", ".tif", ".tiff", ".gif", ".bmp", ".ppm", ".jpg", ".jpeg"}
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class DatasetSpec:
    root: Path
    layout: str = "synthetic"
    # subfolder naming the split (e.g. "training" for DRIVE); None uses the root
    split: str | None = None
    use_fov: bool = True

    def __post_init__(self):
        self.root = Path(self.root)
        if self.layout not in LAYOUTS:
            raise DataError(f"unknown layout {self.layout!r}; expected one of {LAYOUTS}")


@dataclass
class Sample:
    image_id: str
    image: np.ndarray               # float32 (H, W), normalized
    mask: np.ndarray                # uint8 (H, W) in {0, 1}
    fov: np.ndarray | None = None   # uint8 (H, W) in {0, 1}


@dataclass
class IngestResult:
    samples: list[Sample] = field(default_factory=list)
    rejected: list[tuple[str, str]] = field(default_factory=list)

    def __iter__(self):
        return iter(self.samples)

    def __len__(self) -> int:
        return len(self.samples)


def _files(folder: Path) -> list[Path]:
    if not folder.is_dir():
        return []
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _by_stem(folder: Path) -> dict[str, Path]:
    return {p.stem: p for p in _files(folder)}


def _pairs(spec: DatasetSpec) -> list[tuple[str, Path, Path | None, Path | None]]:
    """(id, image, mask, fov) paths for a layout; missing masks stay None."""
    base = spec.root / spec.split if spec.split else spec.root
    out = []
    if spec.layout == "drive":
        manual, fov = _by_stem(base / "1st_manual"), _by_stem(base / "mask")
        for img in _files(base / "images"):
            num = img.stem.split("_")[0]
            out.append((img.stem, img, manual.get(f"{num}_manual1"), fov.get(f"{img.stem}_mask")))
    elif spec.layout == "chase":
        files = _by_stem(base)
        for stem, img in files.items():
            if stem.endswith(("_1stHO", "_2ndHO")):
                continue
            out.append((stem, img, files.get(f"{stem}_1stHO"), None))
    elif spec.layout == "stare":
        labels = {p.name.split(".")[0]: p for p in _files(base / "labels-ah")}
        for img in _files(base / "images"):
            out.append((img.stem, img, labels.get(img.stem), None))
    elif spec.layout == "fives":
        gt = _by_stem(base / "Ground truth")
        for img in _files(base / "Original"):
            out.append((img.stem, img, gt.get(img.stem), None))
    else:
        # octa and synthetic share the images/ + labels-or-masks/ convention
        labels = _by_stem(base / "masks") or _by_stem(base / "labels")
        for img in _files(base / "images"):
            out.append((img.stem, img, labels.get(img.stem), None))
    return out


def to_grayscale(img: Image.Image) -> np.ndarray:
    """Float luminance; RGB uses 0.299 R + 0.587 G + 0.114 B."""
    if img.mode in ("L", "I", "I;16", "F", "1"):
        return np.asarray(img, dtype=np.float64)
    rgb = np.asarray(img.convert("RGB"), dtype=np.float64)
    return rgb @ LUMA


def normalize(image: np.ndarray, mode: str = "standardize") -> np.ndarray:
    """Zero mean / unit variance, or min-max to [0, 1]; flat images map to zeros."""
    image = np.asarray(image, dtype=np.float64)
    if mode == "standardize":
        std = image.std()
        out = (image - image.mean()) / std if std > 0 else np.zeros_like(image)
    elif mode == "minmax":
        span = image.max() - image.min()
        out = (image - image.min()) / span if span > 0 else np.zeros_like(image)
    else:
        raise ValueError(f"unknown normalization {mode!r}")
    return out.astype(np.float32)


def binarize_mask(img: Image.Image) -> np.ndarray:
    arr = np.asarray(img.convert("L") if img.mode not in ("L", "I", "I;16", "F") else img,
                     dtype=np.float64)
    scale = 255.0 if img.mode not in ("I", "I;16", "F") else max(arr.max(), 1.0)
    return (arr / scale >= 0.5).astype(np.uint8)


def _open(path: Path) -> Image.Image:
    with Image.open(path) as im:
        im.load()
        return im


def ingest(spec: DatasetSpec, normalization: str = "standardize") -> IngestResult:
    """Load every (image, mask, fov) triple of a dataset.

    Unreadable files are skipped and size mismatches rejected; both are
    logged and listed in ``result.rejected``.
    """
    if not spec.root.is_dir():
        raise DataError(f"dataset root {spec.root} does not exist")
    result = IngestResult()
    for image_id, img_path, mask_path, fov_path in _pairs(spec):
        if mask_path is None:
            result.rejected.append((image_id, "no ground-truth mask"))
            log.warning("%s: no ground-truth mask, skipped", image_id)
            continue
        try:
            img = _open(img_path)
            mask_img = _open(mask_path)
            fov_img = _open(fov_path) if (fov_path is not None and spec.use_fov) else None
        except (OSError, UnidentifiedImageError) as exc:
            result.rejected.append((image_id, f"unreadable: {exc}"))
            log.warning("%s: unreadable file skipped (%s)", image_id, exc)
            continue
        image = to_grayscale(img)
        mask = binarize_mask(mask_img)
        fov = binarize_mask(fov_img) if fov_img is not None else None
        if mask.shape != image.shape or (fov is not None and fov.shape != image.shape):
            reason = f"size mismatch: image {image.shape}, mask {mask.shape}"
            result.rejected.append((image_id, reason))
            log.warning("%s: %s", image_id, reason)
            continue
        result.samples.append(Sample(image_id, normalize(image, normalization), mask, fov))
    return result


def write_sample_png(folder: Path, image_id: str, image: np.ndarray, mask: np.ndarray) -> None:
    """Write an image in [0, 1] and its mask as 8-bit PNGs under images/ and masks/."""
    (folder / "images").mkdir(parents=True, exist_ok=True)
    (folder / "masks").mkdir(parents=True, exist_ok=True)
    pix = np.clip(np.round(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(pix).save(folder / "images" / f"{image_id}.png")
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(folder / "masks" / f"{image_id}.png")


def samples_from_arrays(images, masks, normalization: str = "standardize") -> list[Sample]:
    return [Sample(f"{i:03d}", normalize(im, normalization), (np.asarray(m) > 0).astype(np.uint8))
            for i, (im, m) in enumerate(zip(images, masks))]


@dataclass
class PatchSet:
    images: np.ndarray   # (N, 1, P, P) float32
    masks: np.ndarray    # (N, 1, P, P) float32

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "PatchSet":
        return PatchSet(self.images[idx], self.masks[idx])


def build_patches(samples, size: int = 48, stride: int = 24) -> PatchSet:
    samples = list(samples)
    if not samples:
        raise DataError("dataset is empty")
    imgs, masks = [], []
    for s in samples:
        patches, _ = extract_patches(np.stack([s.image, s.mask.astype(np.float32)], -1), size, stride)
        for patch, _ in patches:
            imgs.append(patch[..., 0])
            masks.append(patch[..., 1])
    return PatchSet(np.stack(imgs)[:, None].astype(np.float32),
                    np.stack(masks)[:, None].astype(np.float32))


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded random train/validation split of ``n`` items."""
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction))
    if val_fraction > 0 and n > 1:
        n_val = min(max(n_val, 1), n - 1)
    return np.sort(order[n_val:]), np.sort(order[:n_val])
