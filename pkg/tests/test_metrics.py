import math

import numpy as np
import pytest

from mmaunet.data import ImagePair
from mmaunet.errors import ContractError, GeometryError
from mmaunet.metrics import (
    evaluate_batch,
    psnr,
    psnr_from_mse,
    q_abf,
    ssim_metric,
)
from oracles import qabf_oracle, ssim_oracle


def test_psnr_reference_value():
    assert abs(psnr_from_mse(1.0, 255.0) - 48.1308) <= 1e-3
    ref = np.zeros((1, 4, 4))
    assert abs(psnr(ref, ref + 1.0, peak=255.0) - 48.1308) <= 1e-3
    assert psnr(ref, ref) == math.inf


def test_psnr_decreases_with_noise(rng):
    ref = rng.random((1, 16, 16))
    noise = rng.normal(size=ref.shape)
    vals = [psnr(ref, ref + s * noise) for s in (0.01, 0.05, 0.2)]
    assert vals[0] > vals[1] > vals[2]


def test_ssim_identity_and_oracle(rng):
    x = rng.random((16, 16))
    assert ssim_metric(x, x) == pytest.approx(1.0, abs=1e-12)
    for _ in range(10):
        a, b = rng.random((14, 14)), rng.random((14, 14))
        assert abs(ssim_metric(a, b) - ssim_oracle(a, b)) <= 1e-5
    with pytest.raises(GeometryError):
        ssim_metric(rng.random((8, 8)), rng.random((8, 8)))


def test_qabf_identity_flat_and_oracle(rng):
    x = rng.random((1, 12, 12))
    assert q_abf(x, x, x) == pytest.approx(1.0, abs=1e-12)
    flat = np.full((1, 8, 8), 0.3)
    assert q_abf(flat, flat, flat) == 0.0
    for _ in range(10):
        a, b, f = rng.random((3, 1, 10, 10))
        got = q_abf(a, b, f)
        assert 0.0 <= got <= 1.0
        assert abs(got - qabf_oracle(a[0], b[0], f[0])) <= 1e-5


def test_qabf_structured_pair():
    y, x = np.mgrid[0:16, 0:16]
    ir = (x > 7).astype(float)[None]
    vi = np.repeat(((y // 4) % 2).astype(float)[None], 3, axis=0)
    fused = np.repeat(0.5 * (ir + vi[:1]), 3, axis=0)
    assert abs(q_abf(ir, vi, fused) - qabf_oracle(ir[0], vi[0], fused[0])) <= 1e-5


def _pair(seed, name):
    g = np.random.default_rng(seed)
    m = np.zeros((16, 16), bool)
    return ImagePair(g.random((1, 16, 16)), g.random((3, 16, 16)), m, m, seed, name)


def test_evaluate_batch_means_and_order(rng):
    pairs = [_pair(i, f"{i:04d}") for i in range(3)]
    fused = [rng.random((3, 16, 16)) for _ in pairs]
    report = evaluate_batch(pairs, fused)
    assert [r["id"] for r in report.rows] == ["0000", "0001", "0002"]
    for k in ("psnr", "ssim", "qabf"):
        assert report.means[k] == pytest.approx(sum(r[k] for r in report.rows) / 3)
    shuffled = evaluate_batch(pairs[::-1], fused[::-1])
    assert shuffled.rows == report.rows
    single = evaluate_batch(pairs[:1], fused[:1])
    assert single.means == {k: single.rows[0][k] for k in ("psnr", "ssim", "qabf")}
    with pytest.raises(ContractError):
        evaluate_batch(pairs, fused[:2])


def test_identical_rows_have_zero_variance(rng):
    p = _pair(1, "a")
    f = rng.random((3, 16, 16))
    report = evaluate_batch([p, ImagePair(p.ir, p.vi, p.target_mask, p.detail_mask, 1, "b")], [f, f])
    a, b = report.rows
    assert all(a[k] == b[k] for k in ("psnr", "ssim", "qabf"))


def test_report_csv(tmp_path, rng):
    report = evaluate_batch([_pair(0, "x")], [rng.random((3, 16, 16))])
    lines = report.to_csv(tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "id,psnr,ssim,qabf"
    assert lines[-1].startswith("mean,")
    assert len(lines) == 3
