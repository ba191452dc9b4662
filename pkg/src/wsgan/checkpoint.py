"""Checkpoint archives: a zip holding ``header.json`` and one ``.npy`` per array."""

from __future__ import annotations

import io
import json
import warnings
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch
import torch.nn as nn

HEADER = "header.json"


class CheckpointError(RuntimeError):
    pass


class LifecycleError(CheckpointError):
    """A checkpoint from the wrong stage was offered to a stage."""


@dataclass
class Checkpoint:
    header: dict[str, Any]
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def stage(self) -> int:
        return int(self.header["stage"])

    @property
    def kind(self) -> str:
        return str(self.header.get("kind", ""))

    def add_module(self, prefix: str, module: nn.Module) -> "Checkpoint":
        for name, t in module.state_dict().items():
            self.arrays[f"{prefix}.{name}"] = t.detach().cpu().numpy().copy()
        return self

    def load_module(self, prefix: str, module: nn.Module) -> nn.Module:
        sd = {
            k[len(prefix) + 1 :]: torch.from_numpy(v.copy())
            for k, v in self.arrays.items()
            if k.startswith(prefix + ".")
        }
        if not sd:
            raise CheckpointError(f"checkpoint has no arrays for {prefix!r}")
        module.load_state_dict(sd)
        return module


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    for key in ("stage", "epoch", "config_hash"):
        if key not in ckpt.header:
            raise CheckpointError(f"header is missing {key!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(HEADER, json.dumps(ckpt.header, sort_keys=True))
        for name, arr in ckpt.arrays.items():
            buf = io.BytesIO()
            np.save(buf, np.asarray(arr), allow_pickle=False)
            zf.writestr(name + ".npy", buf.getvalue())
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, stage: Optional[int] = None, kind: Optional[str] = None,
                    config_hash: Optional[str] = None) -> Checkpoint:
    """Read an archive; optionally insist on a stage/kind and compare config hashes.

    A different ``config_hash`` only warns, so runs can be resumed after a
    harmless config edit.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise CheckpointError(f"{path}: not a checkpoint archive ({exc})") from exc
    with zf:
        names = zf.namelist()
        if HEADER not in names:
            raise CheckpointError(f"{path}: missing member {HEADER}")
        header = json.loads(_read_member(zf, HEADER, path))
        arrays = {}
        for name in names:
            if name == HEADER:
                continue
            raw = _read_member(zf, name, path)
            try:
                arrays[name[: -len(".npy")]] = np.load(io.BytesIO(raw), allow_pickle=False)
            except ValueError as exc:
                raise CheckpointError(f"{path}: member {name} is corrupt ({exc})") from exc
    ckpt = Checkpoint(header, arrays)
    if stage is not None and ckpt.stage != stage:
        raise LifecycleError(
            f"{path}: expected a stage-{stage} checkpoint, got stage {ckpt.stage}"
        )
    if kind is not None and ckpt.kind != kind:
        raise LifecycleError(f"{path}: expected a {kind} checkpoint, got {ckpt.kind or 'unknown'}")
    if config_hash is not None and header.get("config_hash") != config_hash:
        warnings.warn(
            f"{path}: config hash {header.get('config_hash')} differs from current {config_hash}",
            stacklevel=2,
        )
    return ckpt


def _read_member(zf: zipfile.ZipFile, name: str, path: Path) -> bytes:
    try:
        return zf.read(name)
    except (zipfile.BadZipFile, OSError, EOFError) as exc:
        raise CheckpointError(f"{path}: member {name} is corrupt ({exc})") from exc
