"""Plots from one or more metrics ledgers."""

from __future__ import annotations

import sys
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import read_metrics, series_from_rows  # noqa: E402


class EmptyLedger(ValueError):
    pass


def _families(rows):
    """Metric families present in ``rows``: name -> list of (stage, metric)."""
    seen = sorted({(r["stage"], r["metric"]) for r in rows})
    fams = {
        "contrastive_loss": [(s, m) for s, m in seen if s == "1" and m == "contrastive_loss"],
        "z_std": [(s, m) for s, m in seen if m == "z_std"],
        "fid": [(s, m) for s, m in seen if m == "fid"],
        "accuracy": [(s, m) for s, m in seen if m == "top1"],
        "losses": [(s, m) for s, m in seen if s != "1" and m.startswith("loss")],
    }
    return {k: v for k, v in fams.items() if v}


_TITLES = {
    "contrastive_loss": "Contrastive loss",
    "z_std": "Std of Z",
    "fid": "FID",
    "accuracy": "Held-out top-1",
    "losses": "Training losses",
}


def write_report(run_dirs: Sequence[str | Path], out_dir: str | Path | None = None) -> list[Path]:
    """One PNG per available metric family; curves from several runs are overlaid."""
    run_dirs = [Path(d) for d in run_dirs]
    ledgers = []
    for d in run_dirs:
        path = d / "metrics.csv" if d.is_dir() else d
        if not path.exists():
            raise FileNotFoundError(f"no metrics ledger at {path}")
        rows = read_metrics(path)
        if not rows:
            raise EmptyLedger(f"{path} has no metric rows")
        ledgers.append((d.name if d.is_dir() else d.parent.name, rows))
    out_dir = Path(out_dir) if out_dir else (run_dirs[0] if run_dirs[0].is_dir() else run_dirs[0].parent) / "report"
    out_dir.mkdir(parents=True, exist_ok=True)

    wanted = set(_TITLES)
    present = {}
    for _, rows in ledgers:
        for fam, keys in _families(rows).items():
            present.setdefault(fam, set()).update(keys)
    for fam in sorted(wanted - set(present)):
        print(f"report: no {fam} metrics, skipping", file=sys.stderr)

    written = []
    for fam, keys in present.items():
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, rows in ledgers:
            for stage, metric in sorted(keys):
                pts = series_from_rows(rows, metric, stage)
                if not pts:
                    continue
                xs, ys = zip(*pts)
                name = f"{metric} (stage {stage})"
                if len(ledgers) > 1:
                    name = f"{label}: {name}"
                ax.plot(xs, ys, label=name)
        ax.set_xlabel("epoch")
        ax.set_title(_TITLES[fam])
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / f"{fam}.png"
        fig.savefig(path, dpi=80)
        plt.close(fig)
        written.append(path)
    return written
