import numpy as np
import pytest

from mmaunet import checkpoint as ck
from mmaunet.config import RunConfig, parse_config
from mmaunet.errors import ConfigError, DependencyError, ParseError
from mmaunet.imageio import decode_netpbm, encode_netpbm, load_image, save_image, to_u8


def test_save_load_quantization_bound(tmp_path, rng):
    for shape, ext in (((1, 7, 9), "pgm"), ((3, 5, 4), "ppm")):
        x = rng.random(shape)
        path = save_image(tmp_path / f"x.{ext}", x)
        y = load_image(path)
        assert y.shape == shape and y.dtype == np.float32
        assert np.abs(y - x).max() <= 1 / 510 + 1e-7


def test_round_half_up():
    assert to_u8([0.5 / 255, 1.5 / 255, 1.0])[0] == 1
    assert list(to_u8([0.5 / 255, 1.5 / 255, 1.0])) == [1, 2, 255]


def test_header_with_comments_and_maxval():
    buf = b"P5\n# comment\n2 1\n# another\n15\n\x00\x0f"
    np.testing.assert_array_equal(decode_netpbm(buf), [[[0, 255]]])


def test_encode_has_no_comments():
    out = encode_netpbm(np.zeros((3, 2, 2), np.uint8))
    assert out.startswith(b"P6\n2 2\n255\n") and b"#" not in out


def test_truncated_file_names_missing_bytes():
    with pytest.raises(ParseError, match="missing 3") as info:
        decode_netpbm(b"P6\n2 1\n255\n\x00\x01\x02")
    assert info.value.offset is not None


def test_malformed_header_reports_offset():
    with pytest.raises(ParseError, match="byte offset 3"):
        decode_netpbm(b"P5 x 1\n255\n\x00")
    with pytest.raises(ParseError, match="byte offset 0"):
        decode_netpbm(b"P3\n1 1\n255\n0")


def _ckpt(rng):
    return ck.Checkpoint(
        "vi-unet",
        {"depth": 5, "schema": "taps-7-11"},
        {"a.weight": rng.normal(size=(2, 3)).astype(np.float32), "b": np.float32(rng.normal(size=4))},
    )


def test_checkpoint_roundtrip_bit_exact(tmp_path, rng):
    c = _ckpt(rng)
    raw = ck.encode(c)
    back = ck.decode(raw)
    assert back.kind == c.kind and back.descriptor == {"depth": "5", "schema": "taps-7-11"}
    for k in c.params:
        np.testing.assert_array_equal(back.params[k], c.params[k])
    assert ck.encode(back) == raw
    ck.save(tmp_path / "c.ckpt", c)
    assert (tmp_path / "c.ckpt").read_bytes()[:4] == b"MMAU"


def test_checkpoint_corruption_detected(rng):
    raw = bytearray(ck.encode(_ckpt(rng)))
    bad = bytes(raw[:20]) + bytes([raw[20] ^ 1]) + bytes(raw[21:])
    with pytest.raises(ParseError, match="checksum"):
        ck.decode(bad)
    with pytest.raises(ParseError, match="magic"):
        ck.decode(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(ParseError, match="version"):
        ck.decode(bytes(raw[:4]) + b"\x09\x00" + bytes(raw[6:]))


def test_missing_checkpoint_is_dependency_error(tmp_path):
    with pytest.raises(DependencyError):
        ck.load(tmp_path / "nope.ckpt")


def test_config_defaults_and_parse():
    cfg = RunConfig()
    assert cfg.stage_lr("vi") == 1e-3 and cfg.stage_lr("fuse") == 1e-4
    assert (cfg.weight_decay, cfg.alpha, cfg.beta, cfg.offset) == (0.005, 10.0, 0.5, 1)
    parsed = parse_config("# run\nepochs = 3\nguidance=false\nlr=2e-4\n")
    assert parsed.epochs == 3 and parsed.guidance is False and parsed.stage_lr("fuse") == 2e-4
    assert parse_config(cfg.to_text()) == cfg


def test_config_rejects_unknown_key_with_line():
    with pytest.raises(ConfigError, match=r"cfg:2: unknown config key 'bogus'"):
        parse_config("epochs=1\nbogus=2\n", "cfg")
    with pytest.raises(ConfigError, match="cfg:1"):
        parse_config("epochs=abc\n", "cfg")
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(nope=1)
