"""Synthetic grayscale datasets for desk-scale runs.

``shapes``: four square textures (filled, hollow, striped, noisy) on a noisy
background, 64x64 by default. ``digits``: MNIST-style digits made by warping
the scikit-learn 8x8 digit scans with random affine jitter.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .data import DatasetManifest, save_manifest

SHAPE_CLASSES = ("filled", "hollow", "striped", "noisy")


def _draw_shape(kind: int, size: int, rng: np.random.Generator) -> np.ndarray:
    bg = rng.uniform(-0.9, -0.3)
    img = np.full((size, size), bg, dtype=np.float64)
    side = int(rng.integers(int(0.4 * size), int(0.7 * size) + 1))
    top = int(rng.integers(0, size - side + 1))
    left = int(rng.integers(0, size - side + 1))
    fg = rng.uniform(bg + 0.5, 1.0)
    patch = np.full((side, side), fg)
    if kind == 1:
        t = max(1, int(round(side * rng.uniform(0.12, 0.22))))
        patch[t:-t, t:-t] = bg
    elif kind == 2:
        period = int(rng.integers(3, 7))
        stripe = (np.arange(side) // (period // 2 + period % 2)) % 2 == 0
        if rng.random() < 0.5:
            patch[~stripe, :] = bg
        else:
            patch[:, ~stripe] = bg
    elif kind == 3:
        patch = rng.uniform(bg, fg, size=(side, side))
    img[top : top + side, left : left + side] = patch
    img += rng.normal(0.0, 0.1, size=img.shape)
    return np.clip(img, -1.0, 1.0)


def make_shapes(n_per_class: int, size: int = 64, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Return uint8 images (N, size, size) and labels (N,), classes interleaved."""
    rng = np.random.default_rng(seed)
    imgs, labels = [], []
    for _ in range(n_per_class):
        for k in range(len(SHAPE_CLASSES)):
            imgs.append(_draw_shape(k, size, rng))
            labels.append(k)
    return _to_uint8(np.stack(imgs)), np.array(labels, dtype=np.int64)


def make_digits(n: int, size: int = 16, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Warp random 8x8 scikit-learn digits to ``size`` with rotation/scale/shift jitter."""
    from sklearn.datasets import load_digits

    src = load_digits()
    rng = np.random.default_rng(seed)
    pick = rng.integers(0, len(src.images), size=n)
    base = torch.from_numpy(src.images[pick] / 8.0 - 1.0).float().unsqueeze(1)
    base = F.interpolate(base, size=(size, size), mode="bilinear", align_corners=False)
    ang = np.deg2rad(rng.uniform(-15, 15, n))
    scl = rng.uniform(0.9, 1.15, n)
    shift = rng.uniform(-0.12, 0.12, (n, 2))
    theta = np.zeros((n, 2, 3))
    theta[:, 0, 0] = np.cos(ang) * scl
    theta[:, 0, 1] = -np.sin(ang) * scl
    theta[:, 1, 0] = np.sin(ang) * scl
    theta[:, 1, 1] = np.cos(ang) * scl
    theta[:, :, 2] = shift
    grid = F.affine_grid(torch.from_numpy(theta).float(), base.shape, align_corners=False)
    out = F.grid_sample(base + 1.0, grid, align_corners=False, padding_mode="zeros") - 1.0
    out = out[:, 0].numpy() + rng.normal(0.0, 0.1, size=(n, size, size))
    return _to_uint8(np.clip(out, -1.0, 1.0)), src.target[pick].astype(np.int64)


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((x + 1.0) * 127.5), 0, 255).astype(np.uint8)


def write_dataset(images: np.ndarray, labels: np.ndarray, n_classes: int, out_dir: str | Path) -> Path:
    """Write PNGs plus ``manifest.json`` into ``out_dir``; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (img, y) in enumerate(zip(images, labels)):
        rel = f"images/{i:05d}.png"
        Image.fromarray(img, mode="L").save(out_dir / rel)
        entries.append((rel, int(y)))
    manifest = DatasetManifest(entries, n_classes, int(images.shape[-1]), out_dir)
    path = out_dir / "manifest.json"
    save_manifest(manifest, path)
    return path


def build(kind: str, out_dir: str | Path, n: int, size: int | None = None, seed: int = 0) -> Path:
    """Generate and write a toy dataset of roughly ``n`` images."""
    if kind == "shapes":
        imgs, labels = make_shapes(max(1, n // len(SHAPE_CLASSES)), size or 64, seed)
        return write_dataset(imgs, labels, len(SHAPE_CLASSES), out_dir)
    if kind == "digits":
        imgs, labels = make_digits(n, size or 16, seed)
        return write_dataset(imgs, labels, 10, out_dir)
    raise ValueError(f"unknown toy dataset {kind!r}")
