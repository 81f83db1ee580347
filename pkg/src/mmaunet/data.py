"""Synthetic registered IR/VI scenes with known complementary regions.

Each pair carries two masks: ``target_mask`` marks warm objects that sit in
dark parts of the visible image (only the IR image shows them) and
``detail_mask`` marks textured patches that only the visible image shows.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FileError, GeometryError, ParseError
from .imageio import load_image, save_gray_u8, save_image, to_u8

MASK_TARGET = 255
MASK_DETAIL = 128


@dataclass(frozen=True)
class SceneSpec:
    size: int = 96
    n_blobs: int = 2
    texture_density: float = 0.3
    illumination: float = 1.0
    noise_ir: float = 0.02
    noise_vi: float = 0.02

    def __post_init__(self):
        if self.size < 16 or self.size % 16:
            raise ConfigError(f"scene size {self.size} must be a positive multiple of 16")
        if self.n_blobs < 0 or not 0.0 <= self.texture_density <= 1.0:
            raise ConfigError("n_blobs must be >= 0 and texture_density in [0, 1]")

    @property
    def n_detail(self):
        return 0 if self.texture_density == 0 else max(1, round(6 * self.texture_density))

    @property
    def n_objects(self):
        return round(8 * self.texture_density)


@dataclass
class ImagePair:
    ir: np.ndarray  # (1, H, W)
    vi: np.ndarray  # (3, H, W)
    target_mask: np.ndarray  # (H, W) bool
    detail_mask: np.ndarray  # (H, W) bool
    seed: int = 0
    name: str = ""

    @property
    def size(self):
        return self.ir.shape[1:]


def pair_seed(base_seed, index):
    ss = np.random.SeedSequence([int(base_seed), int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _smooth_field(rng, h, w, amplitude):
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    gx, gy = rng.uniform(-1, 1, 2)
    fx, fy, phase = rng.uniform(0.5, 1.5), rng.uniform(0.5, 1.5), rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * (fx * xx + fy * yy) * 0.5 + phase)
    return amplitude * (0.5 * (gx * xx + gy * yy) + 0.5 * wave)


def _box(h, w, top, left, bh, bw):
    m = np.zeros((h, w), dtype=bool)
    m[top:top + bh, left:left + bw] = True
    return m


def _overlaps(mask, others):
    return any((mask & o).any() for o in others)


def gen_pair(spec=SceneSpec(), seed=0, name=""):
    """Generate one deterministic IR/VI pair for ``(spec, seed)``."""
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n]

    base = rng.uniform(0.4, 0.6, 3)
    vi = np.stack([base[c] + _smooth_field(rng, n, n, 0.12) for c in range(3)])
    ir = 0.3 + _smooth_field(rng, n, n, 0.1)[None]

    # geometric objects seen by both sensors (warm in IR with probability 1/2)
    for _ in range(spec.n_objects):
        bh, bw = rng.integers(n // 10, n // 4, 2)
        top, left = rng.integers(0, n - bh), rng.integers(0, n - bw)
        colour = rng.uniform(0.15, 0.9, 3)
        if rng.uniform() < 0.5:
            m = _box(n, n, top, left, bh, bw)
        else:
            r = min(bh, bw) / 2
            m = (yy - top - r) ** 2 + (xx - left - r) ** 2 <= r * r
        vi[:, m] = colour[:, None]
        if rng.uniform() < 0.5:
            ir[0, m] = rng.uniform(0.4, 0.55)

    target = np.zeros((n, n), dtype=bool)
    shadows = []
    for _ in range(spec.n_blobs):
        for _attempt in range(50):
            radius = rng.uniform(n / 16, n / 10)
            half = int(math.ceil(2.0 * radius))
            cy, cx = rng.integers(half, n - half, 2)
            shadow = _box(n, n, cy - half, cx - half, 2 * half, 2 * half)
            if not _overlaps(shadow, shadows):
                break
        else:
            continue
        shadows.append(shadow)
        vi[:, shadow] = vi[:, shadow] * rng.uniform(0.05, 0.15) + 0.02
        blob = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius
        falloff = 1.0 - 0.15 * np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2) / radius
        ir[0, blob] = rng.uniform(0.85, 0.95) * falloff[blob]
        target |= blob

    detail = np.zeros((n, n), dtype=bool)
    taken = list(shadows)
    for _ in range(spec.n_detail):
        for _attempt in range(50):
            side = int(rng.integers(n // 6, n // 4))
            top, left = rng.integers(0, n - side, 2)
            patch = _box(n, n, top, left, side, side)
            if not _overlaps(patch, taken):
                break
        else:
            continue
        taken.append(patch)
        period = rng.uniform(4.0, 7.0)
        theta = rng.uniform(0, np.pi)
        stripes = np.sin(2 * np.pi * (np.cos(theta) * xx + np.sin(theta) * yy) / period)
        tint = rng.uniform(0.6, 1.0, 3)
        mid = vi[:, patch].mean(axis=1, keepdims=True).clip(0.35, 0.65)
        vi[:, patch] = mid + 0.25 * tint[:, None] * stripes[patch][None]
        detail |= patch

    vi = vi * spec.illumination
    vi = vi + rng.normal(0.0, spec.noise_vi, vi.shape) if spec.noise_vi > 0 else vi
    ir = ir + rng.normal(0.0, spec.noise_ir, ir.shape) if spec.noise_ir > 0 else ir
    return ImagePair(
        ir=np.clip(ir, 0.0, 1.0).astype(np.float32),
        vi=np.clip(vi, 0.0, 1.0).astype(np.float32),
        target_mask=target,
        detail_mask=detail & ~target,
        seed=int(seed),
        name=name,
    )


def ir_exclusive_energy(pair):
    """Mean IR minus mean VI luminance inside the target mask (NaN if empty)."""
    m = pair.target_mask
    if not m.any():
        return math.nan
    vi_l = np.tensordot(np.array([0.299, 0.587, 0.114]), pair.vi, axes=1)
    return float(pair.ir[0][m].mean() - vi_l[m].mean())


# ---------------------------------------------------------------- augmentation


def _source_coords(start, extent, out):
    return start + (np.arange(out) + 0.5) * extent / out - 0.5


def _bilinear(img, ys, xs):
    h, w = img.shape[-2:]
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    a = img[..., y0[:, None], x0[None, :]]
    b = img[..., y0[:, None], x1[None, :]]
    c = img[..., y1[:, None], x0[None, :]]
    d = img[..., y1[:, None], x1[None, :]]
    top = a * (1 - wx) + b * wx
    bottom = c * (1 - wx) + d * wx
    return (top * (1 - wy) + bottom * wy).astype(img.dtype)


def _nearest(mask, ys, xs):
    h, w = mask.shape[-2:]
    yi = np.clip(np.floor(ys + 0.5).astype(int), 0, h - 1)
    xi = np.clip(np.floor(xs + 0.5).astype(int), 0, w - 1)
    return mask[..., yi[:, None], xi[None, :]]


def resized_crop(pair, top, left, height, width, out_size):
    """Crop the window and resample every plane to ``out_size`` squared."""
    ys = _source_coords(top, height, out_size)
    xs = _source_coords(left, width, out_size)
    return replace(
        pair,
        ir=_bilinear(pair.ir, ys, xs),
        vi=_bilinear(pair.vi, ys, xs),
        target_mask=_nearest(pair.target_mask, ys, xs),
        detail_mask=_nearest(pair.detail_mask, ys, xs),
    )


def random_resized_crop(pair, out_size, rng, scale=(0.5, 1.0), ratio=(3 / 4, 4 / 3)):
    """Random-area, random-aspect crop resized to ``out_size``; the same window
    is applied to IR, VI and both masks."""
    h, w = pair.ir.shape[1:]
    if out_size <= 0 or out_size % 16 or out_size > min(h, w):
        raise GeometryError(
            f"crop size {out_size} must be a multiple of 16 no larger than {min(h, w)}"
        )
    gen = getattr(rng, "generator", rng)
    area = h * w
    for _ in range(10):
        target = area * gen.uniform(*scale)
        aspect = math.exp(gen.uniform(math.log(ratio[0]), math.log(ratio[1])))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(gen.integers(0, h - ch + 1))
            left = int(gen.integers(0, w - cw + 1))
            return resized_crop(pair, top, left, ch, cw, out_size)
    side = min(h, w)
    return resized_crop(pair, (h - side) // 2, (w - side) // 2, side, side, out_size)


# ---------------------------------------------------------------- datasets


def encode_masks(pair):
    m = np.zeros(pair.target_mask.shape, dtype=np.uint8)
    m[pair.detail_mask] = MASK_DETAIL
    m[pair.target_mask] = MASK_TARGET
    return m


def write_scene_spec(path, spec):
    lines = [f"{k}={v}" for k, v in asdict(spec).items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_scene_spec(path):
    types = {f.name: f.type for f in fields(SceneSpec)}
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or key not in types:
            raise ParseError(f"{path}:{lineno}: bad scene key {line!r}")
        values[key] = int(value) if types[key] in ("int", int) else float(value)
    return SceneSpec(**values)


def gen_dataset(spec, count, seed, out_dir):
    """Write ``count`` pairs as Netpbm files plus ``manifest.txt``; return paths."""
    if count < 1:
        raise ContractError("count must be >= 1")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise FileError(f"cannot create {out}: {exc}") from exc
    written = []
    manifest = []
    for i in range(count):
        s = pair_seed(seed, i)
        pair = gen_pair(spec, s)
        written.append(save_image(out / f"ir_{i:04d}.pgm", pair.ir))
        written.append(save_image(out / f"vi_{i:04d}.ppm", pair.vi))
        written.append(save_gray_u8(out / f"mask_{i:04d}.pgm", encode_masks(pair)))
        manifest.append(f"{i},{s}")
    try:
        (out / "manifest.txt").write_text("\n".join(manifest) + "\n")
        write_scene_spec(out / "scene.txt", spec)
    except OSError as exc:
        raise FileError(f"cannot write manifest in {out}: {exc}") from exc
    return written


def read_manifest(path):
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            idx, seed = line.split(",")
            entries.append((int(idx), int(seed)))
        except ValueError:
            raise ParseError(f"{path}:{lineno}: expected 'index,seed', got {line!r}") from None
    return entries


def regenerate_dataset(src_dir, out_dir):
    """Rebuild a dataset from its manifest and scene file."""
    src = Path(src_dir)
    spec = read_scene_spec(src / "scene.txt")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, s in read_manifest(src / "manifest.txt"):
        pair = gen_pair(spec, s)
        save_image(out / f"ir_{i:04d}.pgm", pair.ir)
        save_image(out / f"vi_{i:04d}.ppm", pair.vi)
        save_gray_u8(out / f"mask_{i:04d}.pgm", encode_masks(pair))
    (out / "manifest.txt").write_text((src / "manifest.txt").read_text())
    write_scene_spec(out / "scene.txt", spec)


def load_pair(directory, index):
    d = Path(directory)
    ir = load_image(d / f"ir_{index:04d}.pgm")
    vi = load_image(d / f"vi_{index:04d}.ppm")
    mask_path = d / f"mask_{index:04d}.pgm"
    if mask_path.exists():
        m = to_u8(load_image(mask_path)[0])
        target, detail = m == MASK_TARGET, m == MASK_DETAIL
    else:
        target = detail = np.zeros(ir.shape[1:], dtype=bool)
    if ir.shape[0] != 1 or vi.shape[0] != 3:
        raise ContractError(f"pair {index} in {d}: expected 1-channel IR and 3-channel VI")
    if ir.shape[1:] != vi.shape[1:]:
        raise ContractError(f"pair {index} in {d}: IR {ir.shape} and VI {vi.shape} not aligned")
    return ImagePair(ir, vi, target, detail, seed=index, name=f"{index:04d}")


def load_dataset(directory):
    """Load every pair listed in the directory's manifest, in index order."""
    d = Path(directory)
    manifest = d / "manifest.txt"
    if manifest.exists():
        indices = [i for i, _ in read_manifest(manifest)]
    else:
        indices = sorted(int(p.stem[3:]) for p in d.glob("ir_*.pgm"))
    if not indices:
        raise FileError(f"no image pairs found in {d}")
    seeds = dict(read_manifest(manifest)) if manifest.exists() else {}
    pairs = []
    for i in sorted(indices):
        pair = load_pair(d, i)
        pair.seed = seeds.get(i, i)
        pairs.append(pair)
    return pairs
