"""Acceptance criteria AC1-AC9, one verdict line per criterion.

AC1-AC5 and AC9 are exact property checks and run in seconds. AC6-AC8 train on
the bundled toy datasets and take roughly 7, 20 and 50 minutes on one CPU core.
Each test records its verdict via the ``criterion`` fixture (printed as
``ACn: PASS/FAIL - detail`` and repeated in the terminal summary) and asserts
that the pipeline ran to completion within its time budget. Directional
outcomes of the training criteria are reported, not asserted; see the README.

Set ``WSGAN_ACCEPTANCE_DIR`` to keep the run directories and plots.
Run standalone with ``python3 tests/test_acceptance.py``.
"""

import json
import math
import os
import statistics
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import oracles
from wsgan import losses, toydata
from wsgan.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from wsgan.config import GanTargets, MixMatchConfig, NetConfig, RunConfig
from wsgan.metrics import GaussianStats, MetricsLog, fid
from wsgan.nets import AttentionPair, Discriminator, PixelAttention, SpatialAttention, spectral_modules
from wsgan.pipeline import (
    _params_snapshot,
    load_data,
    load_generator,
    params_equal,
    run_ssgan_baseline,
    run_stage1_pretrain,
    run_stages,
    stage_path,
)
from wsgan.report import write_report

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
TARGETS = GanTargets()
FD_POINTS = 20


def _out_dir(tmp_path_factory, name: str) -> Path:
    root = os.environ.get("WSGAN_ACCEPTANCE_DIR")
    if root:
        path = Path(root) / name
        path.mkdir(parents=True, exist_ok=True)
        return path
    return tmp_path_factory.mktemp(name)


def _config(name: str, manifest: Path, **overrides) -> RunConfig:
    doc = json.loads((CONFIGS / name).read_text())
    doc["manifest"] = str(manifest)
    for section, values in overrides.items():
        doc.setdefault(section, {}).update(values)
    return RunConfig.from_dict(doc)


@pytest.fixture(scope="module")
def shapes(tmp_path_factory):
    return toydata.build("shapes", tmp_path_factory.mktemp("shapes32"), n=1600, size=32, seed=0)


@pytest.fixture(scope="module")
def digits(tmp_path_factory):
    return toydata.build("digits", tmp_path_factory.mktemp("digits16"), n=2600, size=16, seed=0)


# ---------------------------------------------------------------------------
# AC1-AC5: exact properties
# ---------------------------------------------------------------------------


def test_ac1_nt_xent_matches_brute_force(criterion):
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(1)
    worst = 0.0
    for n in (1, 2, 4, 8):
        for _ in range(100):
            z = torch.randn(2 * n, 8, dtype=torch.float64, generator=g)
            temp = float(torch.empty(1, dtype=torch.float64).uniform_(0.1, 1.0, generator=g))
            i = int(torch.randint(0, 2 * n, (1,), generator=g))
            got = float(losses.nt_xent_pair(z, i, i ^ 1, temp))
            worst = max(worst, abs(got - oracles.nt_xent_pair(z.tolist(), i, i ^ 1, temp)))
    secs = time.perf_counter() - t0
    ok = criterion("AC1", worst <= 1e-10 and secs < 10,
                   f"max |loss - oracle| = {worst:.2e} over 400 batches, {secs:.2f}s")
    assert ok


def _fd_cases(rng: torch.Generator):
    """(name, fn, inputs) for every loss, one fresh random point per call."""
    d = torch.float64
    r = lambda *s: torch.randn(*s, dtype=d, generator=rng)  # noqa: E731
    y4 = torch.randint(0, 4, (3,), generator=rng)
    y5 = torch.randint(0, 4, (3,), generator=rng)
    p = torch.softmax(r(3, 4), 1)
    q = torch.softmax(r(6, 4), 1)
    w = r(3, 4)
    mm = MixMatchConfig()
    lam = float(torch.empty(1, dtype=d).uniform_(0.5, 1.0, generator=rng))
    x = torch.rand(3, 1, 4, 4, dtype=d, generator=rng)
    lab, unl, fak = r(3, 5), r(3, 5), r(3, 5)
    return [
        ("nt_xent_pair", lambda z: losses.nt_xent_pair(z, 0, 1, 0.5), [r(6, 5)]),
        ("contrastive_loss", lambda z: losses.contrastive_loss(z, 0.5), [r(6, 5)]),
        ("reconstruction_loss", lambda xh: losses.reconstruction_loss(x, xh), [r(3, 1, 4, 4)]),
        ("pretrain_loss", lambda z, xh: losses.pretrain_loss(z, x, xh, 0.5)[0], [r(6, 5), r(3, 1, 4, 4)]),
        ("ssgan_supervised", lambda a: losses.ssgan_losses(a, y5, unl, fak)[0], [r(3, 5)]),
        ("ssgan_unsupervised", lambda u, f: losses.ssgan_losses(lab, y5, u, f)[1], [r(4, 5), r(4, 5)]),
        ("ssgan_generator", losses.ssgan_generator_loss, [r(4, 5)]),
        ("lsgan_discriminator", lambda a, b: losses.lsgan_losses(a, b, TARGETS)[0], [r(4, 1), r(4, 1)]),
        ("lsgan_generator", lambda b: losses.lsgan_generator_loss(b, TARGETS), [r(4, 1)]),
        ("stage3_losses", lambda a, b, c: sum(losses.stage3_losses(a, y4, b, c, TARGETS)), [r(3, 4), r(3, 1), r(4, 1)]),
        ("stage4_loss", lambda a, b: losses.stage4_loss(a, p, b, q, mm, labeled_fraction=1 / 3)[0], [r(3, 4), r(6, 4)]),
        ("sharpen", lambda s: (w * losses.sharpen(torch.softmax(s, 1), 0.5)).sum(), [r(3, 4)]),
        ("mixup_path", lambda x1, x2: losses.stage4_loss(*_mixed(x1, x2, p, q[:3], lam), mm,
                                                         labeled_fraction=1 / 3)[0], [r(3, 4), r(3, 4)]),
    ]


def _mixed(x1, x2, p1, p2, lam):
    """Mix a labeled and an unlabeled batch against a swapped copy; split 2:4 rows for scoring."""
    mx, mp, _ = losses.mixup(torch.cat([x1, x2]), torch.cat([x2, x1]), torch.cat([p1, p2]), torch.cat([p2, p1]),
                             0.75, lam=lam)
    return mx[:2], mp[:2], mx[2:], mp[2:]


def test_ac2_gradients_match_finite_differences(criterion):
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(2)
    worst: dict[str, float] = {}
    for _ in range(FD_POINTS):
        for name, fn, inputs in _fd_cases(g):
            worst[name] = max(worst.get(name, 0.0), oracles.gradient_rel_error(fn, inputs, step=1e-3))
    secs = time.perf_counter() - t0
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = criterion("AC2", err < 1e-4 and secs < 120,
                   f"{len(worst)} losses x {FD_POINTS} points, worst rel err {err:.2e} ({name}), {secs:.1f}s")
    assert ok


def test_ac3_fid_closed_forms(criterion):
    one_d = fid(GaussianStats(np.array([0.0]), np.array([[1.0]])), GaussianStats(np.array([1.0]), np.array([[4.0]])))
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(1, 9))
        m1, m2 = rng.normal(size=k), rng.normal(size=k)
        v1, v2 = rng.uniform(0.01, 4.0, k), rng.uniform(0.01, 4.0, k)
        got = fid(GaussianStats(m1, np.diag(v1)), GaussianStats(m2, np.diag(v2)))
        worst = max(worst, abs(got - oracles.fid_diagonal(m1, v1, m2, v2)))
    a = rng.normal(size=(6, 10))
    s = GaussianStats(rng.normal(size=6), a @ a.T / 10)
    self_fid = fid(s, s)
    ok = criterion("AC3", abs(one_d - 2.0) <= 1e-6 and worst <= 1e-6 and self_fid <= 1e-8,
                   f"1-D {one_d:.9f}, diagonal max err {worst:.2e}, fid(s,s) = {self_fid:.1e}")
    assert ok


def test_ac4_spectral_norm_and_attention(criterion):
    torch.manual_seed(4)
    cfg = NetConfig(image_size=32, n_classes=4, encoder_widths=(8,), d_z=4, noise_dim=8, disc_width=8)
    disc = Discriminator(cfg)
    opt = torch.optim.Adam(disc.parameters(), lr=1e-3, betas=(0.5, 0.999))
    for _ in range(100):
        x = torch.rand(16, 1, 32, 32) * 2 - 1
        logits, real = disc(x)
        loss = torch.nn.functional.cross_entropy(logits, torch.randint(0, 4, (16,))) + (real - 1).pow(2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    sigmas = [oracles.exact_sigma_max(mod.weight) for _, mod in spectral_modules(disc)]
    sn_ok = bool(sigmas) and all(0.95 <= s <= 1.05 for s in sigmas)

    x = torch.randn(3, 8, 6, 6)
    row_err = 0.0
    with torch.no_grad():
        for attn in (SpatialAttention(8), PixelAttention(8)):
            row_err = max(row_err, float((attn.weights(x).sum(-1) - 1).abs().max()))
        identity = all(torch.equal(m(x), x) for m in (SpatialAttention(8), PixelAttention(8), AttentionPair(8)))
    ok = criterion("AC4", sn_ok and row_err <= 1e-6 and identity,
                   f"{len(sigmas)} normalized weights, sigma in [{min(sigmas):.4f}, {max(sigmas):.4f}]; "
                   f"row-sum err {row_err:.1e}; gamma=0 identity {'exact' if identity else 'broken'}")
    assert ok


def test_ac5_collapse_penalty(criterion):
    worst = 0.0
    for n in (2, 4, 8):
        z = torch.ones(2 * n, 6, dtype=torch.float64)
        x = torch.rand(n, 1, 8, 8, dtype=torch.float64)
        total, _, _ = losses.pretrain_loss(z, x, x.clone(), 0.5)
        worst = max(worst, abs(float(total) - math.log(2 * n - 1)))
    ok = criterion("AC5", worst <= 1e-9, f"max |loss - log(2N-1)| = {worst:.1e} for N in 2, 4, 8")
    assert ok


# ---------------------------------------------------------------------------
# AC6-AC8: toy-scale training analogues
# ---------------------------------------------------------------------------

SEEDS = (0, 1, 2)


def test_ac6_decoder_keeps_latents_spread(criterion, shapes, tmp_path_factory):
    out = _out_dir(tmp_path_factory, "ac6")
    t0 = time.perf_counter()
    finals = {}
    for seed in SEEDS:
        for use_decoder in (True, False):
            cfg = _config("toy.json", shapes, split={"n_labeled": 0, "n_unlabeled": 300, "seed": seed},
                          stages={"seed": seed, "use_decoder": use_decoder})
            data = load_data(cfg)
            run_dir = out / f"seed{seed}_{'decoder' if use_decoder else 'no_decoder'}"
            (run_dir / "metrics.csv").unlink(missing_ok=True)
            res = run_stage1_pretrain(data.unlabeled.images, cfg, MetricsLog(run_dir / "metrics.csv", seed))
            finals[seed, use_decoder] = res.z_std[-1]
    secs = time.perf_counter() - t0
    plots = write_report([out / f"seed{s}_{m}" for s in SEEDS for m in ("decoder", "no_decoder")], out / "report")
    wins = sum(finals[s, True] >= finals[s, False] for s in SEEDS)
    detail = ", ".join(f"seed {s}: {finals[s, True]:.5f} vs {finals[s, False]:.5f}" for s in SEEDS)
    criterion("AC6", wins >= 2 and secs < 15 * 60,
              f"decoder >= no decoder in {wins}/3 seeds ({detail}); {secs / 60:.1f} min")
    assert any(p.name == "z_std.png" for p in plots)
    assert secs < 15 * 60


def test_ac7_two_stage_vs_joint_ssgan(criterion, digits):
    t0 = time.perf_counter()
    finals = {}
    for seed in SEEDS:
        cfg = _config("digits.json", digits, split={"seed": seed}, stages={"seed": seed})
        data = load_data(cfg)
        for two_stage in (True, False):
            res = run_ssgan_baseline(data, cfg, two_stage, MetricsLog(seed=seed))
            finals[seed, two_stage] = res.final_accuracy
            if two_stage:
                assert res.generator_frozen_ok
    secs = time.perf_counter() - t0
    wins = sum(finals[s, True] >= finals[s, False] for s in SEEDS)
    detail = ", ".join(f"seed {s}: {finals[s, True]:.3f} vs {finals[s, False]:.3f}" for s in SEEDS)
    criterion("AC7", wins >= 2 and secs < 45 * 60,
              f"two-stage >= joint in {wins}/3 seeds ({detail}); {secs / 60:.1f} min")
    assert secs < 45 * 60


def test_ac8_pipeline_gain(criterion, shapes, tmp_path_factory):
    out = _out_dir(tmp_path_factory, "ac8")
    t0 = time.perf_counter()
    full, stage3, zero = [], [], []
    for seed in SEEDS:
        for n_unlabeled, sink in ((1000, full), (0, zero)):
            cfg = _config("toy.json", shapes, split={"n_unlabeled": n_unlabeled, "seed": seed},
                          stages={"seed": seed})
            run_dir = out / f"seed{seed}_u{n_unlabeled}"
            (run_dir / "metrics.csv").unlink(missing_ok=True)
            res = run_stages(cfg, load_data(cfg), [1, 2, 3, 4], run_dir=run_dir)
            sink.append(res.stage4.final_accuracy)
            if n_unlabeled:
                stage3.append(res.stage3.final_accuracy)
    secs = time.perf_counter() - t0
    m_full, m_s3, m_zero = (statistics.median(v) for v in (full, stage3, zero))
    criterion("AC8", m_full > m_s3 and m_full > m_zero and secs < 90 * 60,
              f"median top-1 full {m_full:.3f} vs stage-3-only {m_s3:.3f} vs 0 unlabeled {m_zero:.3f} "
              f"(full {[round(a, 3) for a in full]}); {secs / 60:.1f} min")
    assert all(0.0 <= a <= 1.0 for a in full + stage3 + zero)
    assert secs < 90 * 60


# ---------------------------------------------------------------------------
# AC9: determinism and checkpoint lifecycle
# ---------------------------------------------------------------------------

SMALL = {"nets": {"image_size": 16, "encoder_widths": [4, 8], "d_z": 4, "noise_dim": 8, "gen_width": 8,
                  "dec_width": 8, "disc_width": 2},
         "split": {"n_labeled": 8, "n_unlabeled": 24},
         "stages": {"stage1_epochs": 2, "stage2_epochs": 3, "stage3_epochs": 2, "stage4_epochs": 2, "batch_size": 8,
                    "fid_eval_interval": 1, "fid_sample_size": 16, "fakes_per_batch": 4}}

_FINAL = {1: "loss", 2: "loss_d", 3: "loss_supervised", 4: "loss"}


def test_ac9_determinism_and_lifecycle(criterion, tmp_path):
    manifest = toydata.build("shapes", tmp_path / "data", n=64, size=16, seed=0)
    cfg = RunConfig.from_dict({"run_id": "det", "manifest": str(manifest), **SMALL})
    data = load_data(cfg)
    a = run_stages(cfg, data, [1, 2, 3, 4], run_dir=tmp_path / "a")
    b = run_stages(cfg, data, [1, 2, 3, 4], run_dir=tmp_path / "b")
    drift = max(abs(a.log.values(m, s)[-1] - b.log.values(m, s)[-1]) for s, m in _FINAL.items())

    # every stage checkpoint survives a save/load cycle bit for bit
    exact = True
    for s in (1, 2, 3, 4):
        src = load_checkpoint(stage_path(tmp_path / "a", s))
        save_checkpoint(Checkpoint(dict(src.header), dict(src.arrays)), tmp_path / f"copy{s}.ckpt")
        back = load_checkpoint(tmp_path / f"copy{s}.ckpt")
        exact &= back.header == src.header and src.arrays.keys() == back.arrays.keys()
        exact &= all(back.arrays[k].dtype == v.dtype and np.array_equal(back.arrays[k], v)
                     for k, v in src.arrays.items())

    # the in-memory G_best that stages 3 and 4 ran against still equals its stage-2 checkpoint
    g_saved = _params_snapshot(load_generator(stage_path(tmp_path / "a", 2)))
    frozen = params_equal(g_saved, _params_snapshot(a.stage2.generator))

    ok = criterion("AC9", drift <= 1e-6 and exact and frozen,
                   f"final-loss drift {drift:.1e}; round trips {'bit-exact' if exact else 'differ'}; "
                   f"G_best {'bit-identical' if frozen else 'changed'} across stages 3-4")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
