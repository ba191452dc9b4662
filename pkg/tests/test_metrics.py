import math

import numpy as np
import pytest
import torch

import oracles
from wsgan.metrics import (
    CSV_COLUMNS,
    FidError,
    GaussianStats,
    MetricsLog,
    fid,
    gaussian_stats,
    read_metrics,
    top1_accuracy,
    trace_sqrt_product,
    z_std,
)


def test_gaussian_stats_examples():
    s = gaussian_stats(np.array([[1.0, 2.0], [1.0, 2.0]]))
    assert np.all(s.cov == 0)
    s = gaussian_stats(np.array([[0.0], [2.0]]))
    assert s.mean.tolist() == [1.0] and s.cov.tolist() == [[2.0]]
    s = gaussian_stats(np.full((5, 1), 3.5))
    assert s.mean.tolist() == [3.5] and s.cov.tolist() == [[0.0]]


def test_gaussian_stats_validation():
    with pytest.raises(ValueError):
        gaussian_stats(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        gaussian_stats(np.zeros(4))
    with pytest.raises(ValueError):
        GaussianStats(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        GaussianStats(np.zeros(2), np.eye(3))


def test_fid_one_dimensional_closed_form():
    assert fid(GaussianStats([0.0], [[1.0]]), GaussianStats([1.0], [[4.0]])) == pytest.approx(2.0, abs=1e-12)
    assert oracles.fid_1d(0, 1, 1, 4) == 2.0


def test_fid_identity_is_zero():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(200, 6))
    s = gaussian_stats(feats)
    assert 0.0 <= fid(s, s) <= 1e-8


def test_fid_diagonal_closed_form():
    rng = np.random.default_rng(1)
    for _ in range(50):
        d = rng.integers(1, 8)
        m1, m2 = rng.normal(size=d), rng.normal(size=d)
        v1, v2 = rng.uniform(0.01, 4, d), rng.uniform(0.01, 4, d)
        got = fid(GaussianStats(m1, np.diag(v1)), GaussianStats(m2, np.diag(v2)))
        assert got == pytest.approx(oracles.fid_diagonal(m1, v1, m2, v2), abs=1e-6)


def test_fid_matches_scipy_sqrtm_on_full_covariances():
    from scipy.linalg import sqrtm

    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(5, 5)), rng.normal(size=(5, 5))
    ca, cb = a @ a.T, b @ b.T
    ref = float(np.real(np.trace(sqrtm(ca @ cb))))
    assert trace_sqrt_product(ca, cb) == pytest.approx(ref, rel=1e-8)


def test_fid_singular_covariance_is_fine():
    # rank-deficient but PSD: allowed
    s = GaussianStats([0.0, 0.0], [[1.0, 1.0], [1.0, 1.0]])
    assert fid(s, s) == pytest.approx(0.0, abs=1e-8)


def test_fid_rejects_indefinite_covariance():
    bad = GaussianStats([0.0, 0.0], np.diag([1.0, -0.5]))
    with pytest.raises(FidError, match="imaginary"):
        fid(bad, GaussianStats([0.0, 0.0], np.eye(2)))


def test_fid_dimension_mismatch():
    with pytest.raises(ValueError):
        fid(GaussianStats([0.0], [[1.0]]), GaussianStats([0.0, 0.0], np.eye(2)))


def test_top1_examples():
    y = torch.tensor([0, 1, 2, 3])
    assert top1_accuracy(torch.eye(4), y) == 1.0
    assert top1_accuracy(torch.eye(4).roll(1, 1), y) == 0.0
    logits = torch.eye(4)
    logits[2:] = logits[2:].roll(1, 1)
    assert top1_accuracy(logits, y) == 0.5


def test_top1_ties_pick_lowest_index():
    assert top1_accuracy(torch.zeros(2, 3), torch.tensor([0, 1])) == 0.5


def test_z_std_examples():
    assert z_std(torch.ones(5, 3)) == 0.0
    assert z_std(torch.eye(2)) == pytest.approx(1 / math.sqrt(2), abs=1e-12)
    z = torch.randn(10, 4, dtype=torch.float64)
    scales = torch.rand(10, 1, dtype=torch.float64) + 0.1
    assert z_std(z * scales) == pytest.approx(z_std(z), abs=1e-12)


def test_metrics_log_appends(tmp_path):
    path = tmp_path / "m.csv"
    log = MetricsLog(path, seed=3)
    log.log(1, 1, "loss", 0.5)
    log.log(2, 10, "fid", 12.0)
    MetricsLog(path, seed=3).log(3, 1, "top1", 0.25)  # reopening keeps existing rows
    rows = read_metrics(path)
    assert [r["metric"] for r in rows] == ["loss", "fid", "top1"]
    assert path.read_text().splitlines()[0] == ",".join(CSV_COLUMNS)
    assert log.series("fid", 2) == [(10, 12.0)]
    assert log.values("loss") == [0.5]


def test_read_metrics_rejects_foreign_csv(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_metrics(p)


def test_fid_non_negative_on_random_psd_pairs():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        d = int(rng.integers(1, 6))
        a, b = rng.normal(size=(d, d + 1)), rng.normal(size=(d, rng.integers(1, d + 2)))
        s1 = GaussianStats(rng.normal(size=d), a @ a.T)
        s2 = GaussianStats(rng.normal(size=d), b @ b.T)
        assert fid(s1, s2) >= -1e-6


def test_z_std_zero_iff_rows_equal():
    assert z_std(torch.tensor([[1.0, 2.0], [2.0, 4.0]], dtype=torch.float64)) <= 1e-10  # same direction
    assert z_std(torch.tensor([[1.0, 2.0], [2.0, 4.1]], dtype=torch.float64)) > 1e-10
