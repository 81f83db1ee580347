import numpy as np
import pytest

from mmaunet import tensor as T
from mmaunet.data import (
    ImagePair,
    SceneSpec,
    gen_dataset,
    gen_pair,
    ir_exclusive_energy,
    load_dataset,
    random_resized_crop,
    read_manifest,
    regenerate_dataset,
    resized_crop,
)
from mmaunet.errors import ConfigError, ContractError, GeometryError


def luma(vi):
    return np.tensordot([0.299, 0.587, 0.114], vi, axes=1)


def test_same_seed_bit_identical():
    a, b = gen_pair(SceneSpec(size=64), 11), gen_pair(SceneSpec(size=64), 11)
    for f in ("ir", "vi", "target_mask", "detail_mask"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
    c = gen_pair(SceneSpec(size=64), 12)
    assert not np.array_equal(a.ir, c.ir)


def test_degenerate_spec_is_smooth_with_empty_masks():
    p = gen_pair(SceneSpec(size=32, n_blobs=0, texture_density=0.0, noise_ir=0, noise_vi=0), 3)
    assert not p.target_mask.any() and not p.detail_mask.any()
    # smooth: neighbouring pixels differ only slightly
    assert np.abs(np.diff(p.ir[0], axis=1)).max() < 0.1
    assert np.abs(np.diff(p.vi, axis=2)).max() < 0.1


def test_mask_invariants_over_100_seeds():
    spec = SceneSpec(size=64)
    for seed in range(100):
        p = gen_pair(spec, seed)
        assert p.ir.shape == (1, 64, 64) and p.vi.shape == (3, 64, 64)
        assert 0 <= p.ir.min() and p.ir.max() <= 1 and 0 <= p.vi.min() and p.vi.max() <= 1
        assert not (p.target_mask & p.detail_mask).any()
        assert p.target_mask.any()
        assert p.ir[0][p.target_mask].mean() >= 0.5
        assert luma(p.vi)[p.target_mask].mean() <= 0.2
        assert ir_exclusive_energy(p) > 0.3


def test_spec_validation():
    with pytest.raises(ConfigError):
        SceneSpec(size=50)
    with pytest.raises(ConfigError):
        SceneSpec(texture_density=1.5)


def test_identity_crop():
    p = gen_pair(SceneSpec(size=32), 0)
    q = resized_crop(p, 0, 0, 32, 32, 32)
    np.testing.assert_array_equal(q.ir, p.ir)
    np.testing.assert_array_equal(q.vi, p.vi)
    np.testing.assert_array_equal(q.target_mask, p.target_mask)


def test_random_crop_size_binary_masks_and_errors():
    p = gen_pair(SceneSpec(size=64), 1)
    rng = T.Rng(0)
    for _ in range(5):
        q = random_resized_crop(p, 32, rng)
        assert q.ir.shape == (1, 32, 32) and q.vi.shape == (3, 32, 32)
        assert q.target_mask.dtype == bool and q.detail_mask.shape == (32, 32)
    with pytest.raises(GeometryError):
        random_resized_crop(p, 40, rng)
    with pytest.raises(GeometryError):
        random_resized_crop(p, 80, rng)


def test_crop_alignment_on_coordinate_grid():
    """The same window must land on every plane: encode coordinates in each."""
    n = 64
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float32) / (n - 1)
    grid = ImagePair(
        ir=yy[None].copy(),
        vi=np.stack([yy, xx, yy]),
        target_mask=(np.mgrid[0:n, 0:n][0] % 8) < 4,
        detail_mask=(np.mgrid[0:n, 0:n][1] % 8) < 4,
    )
    q = random_resized_crop(grid, 32, T.Rng(5))
    np.testing.assert_array_equal(q.ir[0], q.vi[0])
    np.testing.assert_array_equal(q.vi[0], q.vi[2])
    # a nearest-sampled row stripe mask must agree with the bilinear row coordinate
    rows = q.vi[0][:, 0] * (n - 1)
    expected = (np.floor(rows + 0.5).astype(int) % 8) < 4
    np.testing.assert_array_equal(q.target_mask[:, 0], expected)


def test_gen_dataset_files_and_regeneration(tmp_path):
    spec = SceneSpec(size=32)
    written = gen_dataset(spec, 8, 42, tmp_path / "a")
    assert len(written) == 24
    assert len(read_manifest(tmp_path / "a" / "manifest.txt")) == 8
    regenerate_dataset(tmp_path / "a", tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    pairs = load_dataset(tmp_path / "a")
    assert len(pairs) == 8 and pairs[0].ir.shape == (1, 32, 32)
    with pytest.raises(ContractError):
        gen_dataset(spec, 0, 1, tmp_path / "c")
