"""FID, top-1 accuracy, the std-of-Z collapse monitor and the metrics CSV."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch
import torch.nn.functional as F

CSV_COLUMNS = ("stage", "epoch", "metric", "value", "seed")


class FidError(ArithmeticError):
    pass


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ValueError(f"covariance shape {self.cov.shape} does not match mean dim {d}")
        if not np.allclose(self.cov, self.cov.T, atol=1e-10, rtol=1e-8):
            raise ValueError("covariance is not symmetric")


def gaussian_stats(features) -> GaussianStats:
    """Sample mean and unbiased covariance of a (B, d) feature matrix."""
    f = np.asarray(features.detach().cpu() if isinstance(features, torch.Tensor) else features, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {f.shape}")
    if f.shape[0] < 2:
        raise ValueError("need at least two rows to estimate a covariance")
    mu = f.mean(axis=0)
    centered = f - mu
    cov = centered.T @ centered / (f.shape[0] - 1)
    return GaussianStats(mu, (cov + cov.T) / 2)


def _psd_eigvals(mat: np.ndarray, what: str, tol: float) -> tuple[np.ndarray, np.ndarray]:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    worst = float(vals.min(initial=0.0))
    if worst < -tol * scale:
        raise FidError(
            f"{what} is not PSD: eigenvalue {worst:.3e} gives an imaginary "
            f"square-root component of magnitude {math.sqrt(-worst):.3e}"
        )
    return np.clip(vals, 0.0, None), vecs


def trace_sqrt_product(cov_a: np.ndarray, cov_b: np.ndarray, tol: float = 1e-8) -> float:
    """Tr((A B)^(1/2)) for PSD A, B via the symmetric form A^(1/2) B A^(1/2)."""
    vals, vecs = _psd_eigvals(cov_a, "first covariance", tol)
    root_a = (vecs * np.sqrt(vals)) @ vecs.T
    inner, _ = _psd_eigvals(root_a @ cov_b @ root_a, "covariance product", tol)
    return float(np.sqrt(inner).sum())


def fid(real: GaussianStats, fake: GaussianStats, tol: float = 1e-8) -> float:
    """Frechet distance between two Gaussians."""
    if real.mean.shape != fake.mean.shape:
        raise ValueError(f"dimension mismatch {real.mean.shape} vs {fake.mean.shape}")
    diff = real.mean - fake.mean
    tr = np.trace(real.cov) + np.trace(fake.cov) - 2.0 * trace_sqrt_product(real.cov, fake.cov, tol)
    value = float(diff @ diff + tr)
    # rounding leaves tiny negatives for near-identical inputs; larger ones are real bugs
    scale = max(1.0, float(np.trace(real.cov) + np.trace(fake.cov)))
    if -1e-9 * scale < value < 0.0:
        value = 0.0
    return value


def top1_accuracy(class_logits: torch.Tensor, y: torch.Tensor) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    if len(y) == 0:
        return float("nan")
    pred = class_logits.argmax(dim=1)  # torch returns the first maximal index
    return float((pred == y).float().mean())


@dataclass
class CollapseReport:
    z_std: float
    contrastive_loss: float = float("nan")
    epoch: int = -1


def z_std(z: torch.Tensor) -> float:
    """Mean over dimensions of the per-dimension (unbiased) std of L2-normalized rows."""
    if z.shape[0] < 2:
        raise ValueError("need at least two rows")
    zn = F.normalize(z.detach().double(), dim=1)
    return float(zn.std(dim=0, unbiased=True).mean())


def z_std_monitor(z: torch.Tensor, contrastive_loss: float = float("nan"), epoch: int = -1) -> CollapseReport:
    return CollapseReport(z_std(z), float(contrastive_loss), epoch)


# ---------------------------------------------------------------------------
# metrics log
# ---------------------------------------------------------------------------


class MetricsLog:
    """Append-only CSV ledger with columns (stage, epoch, metric, value, seed).

    Rows are also kept in memory so a stage can inspect what it logged.
    """

    def __init__(self, path: Optional[str | Path] = None, seed: int = 0):
        self.path = Path(path) if path is not None else None
        self.seed = seed
        self.rows: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not self.path.exists() or self.path.stat().st_size == 0:
                with open(self.path, "w", newline="") as fh:
                    csv.writer(fh).writerow(CSV_COLUMNS)

    def log(self, stage, epoch: int, metric: str, value: float) -> None:
        row = {"stage": str(stage), "epoch": int(epoch), "metric": metric,
               "value": float(value), "seed": self.seed}
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([row[c] for c in CSV_COLUMNS])

    def series(self, metric: str, stage=None) -> list[tuple[int, float]]:
        return [
            (r["epoch"], r["value"])
            for r in self.rows
            if r["metric"] == metric and (stage is None or r["stage"] == str(stage))
        ]

    def values(self, metric: str, stage=None) -> list[float]:
        return [v for _, v in self.series(metric, stage)]


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path}: expected columns {CSV_COLUMNS}, got {reader.fieldnames}")
        return [
            {"stage": r["stage"], "epoch": int(r["epoch"]), "metric": r["metric"],
             "value": float(r["value"]), "seed": r["seed"]}
            for r in reader
        ]


def series_from_rows(rows: Iterable[dict], metric: str, stage=None) -> list[tuple[int, float]]:
    return [
        (r["epoch"], r["value"])
        for r in rows
        if r["metric"] == metric and (stage is None or r["stage"] == str(stage))
    ]
