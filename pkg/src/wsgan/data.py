"""Dataset manifests, deterministic splits and the augmentation policy."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .config import AugmentPolicy, SplitSpec

UNLABELED = -1


class ManifestError(ValueError):
    pass


@dataclass
class DatasetManifest:
    entries: list[tuple[str, Optional[int]]]
    n_classes: int
    image_size: int
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        if not self.entries:
            raise ManifestError("manifest has no entries")
        if self.n_classes <= 0:
            raise ManifestError(f"n_classes must be positive, got {self.n_classes}")
        if self.image_size <= 0:
            raise ManifestError(f"image_size must be positive, got {self.image_size}")
        for i, (_, label) in enumerate(self.entries):
            if label is not None and not (0 <= label < self.n_classes):
                raise ManifestError(
                    f"entry {i}: label {label} outside [0, {self.n_classes})"
                )

    def __len__(self):
        return len(self.entries)

    def labels(self) -> np.ndarray:
        return np.array([UNLABELED if y is None else y for _, y in self.entries], dtype=np.int64)

    def resolve(self, i: int) -> Path:
        p = Path(self.entries[i][0])
        return p if p.is_absolute() else self.root / p


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    with open(path) as fh:  # FileNotFoundError propagates
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: not valid JSON ({exc})") from exc
    try:
        entries = []
        for i, e in enumerate(doc["entries"]):
            label = e.get("label")
            if label is not None and not isinstance(label, int):
                raise ManifestError(f"entry {i}: label must be an integer or null")
            entries.append((str(e["path"]), label))
        return DatasetManifest(entries, int(doc["n_classes"]), int(doc["image_size"]), path.parent)
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"{path}: malformed manifest ({exc!r})") from exc


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    doc = {
        "n_classes": manifest.n_classes,
        "image_size": manifest.image_size,
        "entries": [{"path": p, "label": y} for p, y in manifest.entries],
    }
    Path(path).write_text(json.dumps(doc, indent=1))


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


class Splits(NamedTuple):
    labeled: list[int]
    unlabeled: list[int]
    heldout: list[int]


def sample_splits(manifest: DatasetManifest, spec: SplitSpec) -> Splits:
    """Draw disjoint labeled / unlabeled / held-out index lists.

    Labeled images come from labeled entries only, balanced per class when
    requested. Unlabeled images are drawn uniformly from what is left (their
    labels, if any, are ignored downstream). Every remaining labeled entry is
    held out for evaluation.
    """
    n = len(manifest)
    if spec.n_labeled < 0 or spec.n_unlabeled < 0:
        raise ValueError("split sizes must be non-negative")
    if spec.n_labeled + spec.n_unlabeled > n:
        raise ValueError(
            f"split asks for {spec.n_labeled + spec.n_unlabeled} images, manifest has {n}"
        )
    rng = np.random.default_rng(spec.seed)
    labels = manifest.labels()
    if spec.per_class_balanced:
        if spec.n_labeled % manifest.n_classes:
            raise ValueError(
                f"n_labeled={spec.n_labeled} not divisible by n_classes={manifest.n_classes}"
            )
        per_class = spec.n_labeled // manifest.n_classes
        labeled = []
        for c in range(manifest.n_classes):
            pool = np.flatnonzero(labels == c)
            if len(pool) < per_class:
                raise ValueError(f"class {c} has {len(pool)} images, {per_class} needed")
            labeled.extend(rng.permutation(pool)[:per_class].tolist())
    else:
        pool = np.flatnonzero(labels != UNLABELED)
        if len(pool) < spec.n_labeled:
            raise ValueError(f"only {len(pool)} labeled entries, {spec.n_labeled} needed")
        labeled = rng.permutation(pool)[: spec.n_labeled].tolist()
    labeled = sorted(labeled)
    taken = np.zeros(n, dtype=bool)
    taken[labeled] = True
    rest = np.flatnonzero(~taken)
    unlabeled = sorted(rng.permutation(rest)[: spec.n_unlabeled].tolist())
    taken[unlabeled] = True
    heldout = [i for i in np.flatnonzero(~taken).tolist() if labels[i] != UNLABELED]
    return Splits(labeled, unlabeled, heldout)


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def read_image(path: str | Path, size: int) -> torch.Tensor:
    """Read an 8-bit grayscale image as a (1, size, size) tensor in [-1, 1]."""
    img = Image.open(path).convert("L")
    w, h = img.size
    if w != h:
        s = min(w, h)
        left, top = (w - s) // 2, (h - s) // 2
        img = img.crop((left, top, left + s, top + s))
    if img.size[0] != size:
        img = img.resize((size, size), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32)
    return torch.from_numpy(arr / 127.5 - 1.0).unsqueeze(0)


def write_image(x: torch.Tensor, path: str | Path) -> None:
    """Write a (1, S, S) or (S, S) tensor in [-1, 1] as an 8-bit PNG."""
    arr = x.detach().cpu().reshape(x.shape[-2], x.shape[-1]).numpy()
    arr = np.clip(np.rint((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


@dataclass
class ImageSet:
    """In-memory images (N, 1, S, S) in [-1, 1] with labels (N,), -1 = absent."""

    images: torch.Tensor
    labels: torch.Tensor

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx) -> "ImageSet":
        idx = torch.as_tensor(list(idx), dtype=torch.long)
        return ImageSet(self.images[idx], self.labels[idx])

    def without_labels(self) -> "ImageSet":
        return ImageSet(self.images, torch.full_like(self.labels, UNLABELED))

    @staticmethod
    def concat(*sets: "ImageSet") -> "ImageSet":
        sets = [s for s in sets if len(s)]
        if not sets:
            raise ValueError("nothing to concatenate")
        return ImageSet(torch.cat([s.images for s in sets]), torch.cat([s.labels for s in sets]))


def load_images(manifest: DatasetManifest, indices: Sequence[int], size: Optional[int] = None) -> ImageSet:
    size = size or manifest.image_size
    labels = manifest.labels()
    if len(indices) == 0:
        return ImageSet(torch.zeros(0, 1, size, size), torch.zeros(0, dtype=torch.long))
    imgs = torch.stack([read_image(manifest.resolve(i), size) for i in indices])
    return ImageSet(imgs, torch.as_tensor(labels[list(indices)]))


@dataclass
class DataBundle:
    """The three splits of one manifest, loaded into memory."""

    labeled: ImageSet
    unlabeled: ImageSet
    heldout: ImageSet
    n_classes: int
    splits: Optional[Splits] = None

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, spec: SplitSpec, size: Optional[int] = None):
        sp = sample_splits(manifest, spec)
        return cls(
            load_images(manifest, sp.labeled, size),
            load_images(manifest, sp.unlabeled, size).without_labels(),
            load_images(manifest, sp.heldout, size),
            manifest.n_classes,
            sp,
        )


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def augment(image: torch.Tensor, policy: AugmentPolicy, rng: np.random.Generator) -> torch.Tensor:
    """Random resized crop, horizontal flip and brightness/contrast jitter.

    ``image`` is (C, S, S) in [-1, 1]. The same number of draws is taken from
    ``rng`` whatever the policy, so streams stay aligned across policies.
    """
    c, h, w = image.shape
    if h != w:
        raise ValueError(f"augment expects a square image, got {h}x{w}")
    lo, hi = sorted(min(max(v, 1e-3), 1.0) for v in policy.crop_scale_range)
    scale = rng.uniform(lo, hi)
    side = int(np.clip(round(h * np.sqrt(scale)), 1, h))
    # float draws: integers() over a single value would consume nothing
    top = min(int(rng.random() * (h - side + 1)), h - side)
    left = min(int(rng.random() * (w - side + 1)), w - side)
    flip = rng.random() < policy.flip_prob
    bright = rng.uniform(-policy.brightness_delta, policy.brightness_delta)
    contrast = rng.uniform(*policy.contrast_range)

    out = image
    if side < h:
        crop = image[:, top : top + side, left : left + side]
        out = F.interpolate(crop.unsqueeze(0), size=(h, w), mode="bilinear", align_corners=False)[0]
    if flip:
        out = out.flip(-1)
    if contrast != 1.0 or bright != 0.0:
        mean = out.mean()
        out = out * contrast + mean * (1.0 - contrast) + bright
    return out.clamp(-1.0, 1.0)


def augment_batch(images: torch.Tensor, policy: AugmentPolicy, rng: np.random.Generator) -> torch.Tensor:
    if images.shape[0] == 0:
        return images.clone()
    return torch.stack([augment(x, policy, rng) for x in images])


def make_contrastive_batch(images: torch.Tensor, policy: AugmentPolicy, rng: np.random.Generator) -> torch.Tensor:
    """Two independent views per source image; rows (2m, 2m+1) share source m."""
    if len(images) == 0:
        raise ValueError("make_contrastive_batch needs at least one image")
    views = []
    for x in images:
        views.append(augment(x, policy, rng))
        views.append(augment(x, policy, rng))
    return torch.stack(views)
