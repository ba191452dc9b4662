import zipfile

import numpy as np
import pytest
import torch

from wsgan.checkpoint import Checkpoint, CheckpointError, LifecycleError, load_checkpoint, save_checkpoint
from wsgan.config import NetConfig
from wsgan.nets import Discriminator

TINY = NetConfig(image_size=16, encoder_widths=(4,), d_z=2, noise_dim=4, gen_width=8, dec_width=8, disc_width=2)


def _header(stage=3, kind="discriminator"):
    return {"stage": stage, "kind": kind, "epoch": 5, "config_hash": "abc"}


def test_round_trip_is_bit_exact(tmp_path):
    torch.manual_seed(0)
    d = Discriminator(TINY)
    d(torch.rand(2, 1, 16, 16))  # move the power-iteration buffers off their init
    save_checkpoint(Checkpoint(_header()).add_module("discriminator", d), tmp_path / "d.ckpt")
    back = load_checkpoint(tmp_path / "d.ckpt", stage=3, kind="discriminator")
    d2 = back.load_module("discriminator", Discriminator(TINY))
    for (k, a), (k2, b) in zip(d.state_dict().items(), d2.state_dict().items()):
        assert k == k2
        assert a.dtype == b.dtype and torch.equal(a, b)
    assert back.header["epoch"] == 5


def test_random_arrays_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a": rng.normal(size=(3, 4)), "b": rng.integers(0, 9, size=7), "c": np.float32(rng.normal(size=2))}
    save_checkpoint(Checkpoint(_header(), arrays), tmp_path / "x.ckpt")
    back = load_checkpoint(tmp_path / "x.ckpt")
    for k, v in arrays.items():
        assert back.arrays[k].dtype == v.dtype and np.array_equal(back.arrays[k], v)


def test_header_requirements(tmp_path):
    with pytest.raises(CheckpointError):
        save_checkpoint(Checkpoint({"stage": 1}), tmp_path / "x.ckpt")


def test_stage_guard(tmp_path):
    save_checkpoint(Checkpoint(_header(stage=2)), tmp_path / "d.ckpt")
    with pytest.raises(LifecycleError):
        load_checkpoint(tmp_path / "d.ckpt", stage=3)
    with pytest.raises(LifecycleError):
        load_checkpoint(tmp_path / "d.ckpt", kind="generator")


def test_hash_mismatch_only_warns(tmp_path):
    save_checkpoint(Checkpoint(_header()), tmp_path / "d.ckpt")
    with pytest.warns(UserWarning, match="config hash"):
        load_checkpoint(tmp_path / "d.ckpt", config_hash="other")


def test_corrupt_member_is_named(tmp_path):
    path = tmp_path / "d.ckpt"
    save_checkpoint(Checkpoint(_header(), {"w": np.ones(3)}), path)
    with zipfile.ZipFile(path, "a") as zf:
        zf.writestr("broken.npy", b"not an array")
    with pytest.raises(CheckpointError, match="broken.npy"):
        load_checkpoint(path)


def test_not_an_archive(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.ckpt")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_missing_module_prefix(tmp_path):
    save_checkpoint(Checkpoint(_header()), tmp_path / "d.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "d.ckpt").load_module("generator", Discriminator(TINY))
