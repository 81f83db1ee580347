"""Training, inference, evaluation and analysis workflows."""

from __future__ import annotations

import csv
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as T
from .cka import cka_matrix, divergence_layer, export_heatmap
from .data import load_dataset, random_resized_crop
from .errors import ConfigError, ContractError, DependencyError, GeometryError
from .imageio import load_image, save_gray_u8, save_image, to_u8
from .losses import loss_mse, total_loss
from .metrics import evaluate_batch, fmt
from .model import ABLATIONS, FusionConfig, FusionModel, UNetModel, build_ablation, new_trace

log = logging.getLogger(__name__)

# child-stream keys so every random draw has its own reproducible source
_INIT_KEYS = {"vi": 1, "ir": 2, "ir_unguided": 3, "fuse": 4}
_DATA_KEY = 100


# ---------------------------------------------------------------- models <-> checkpoints


def build_unet(cfg, modality, guided=False, rng=None):
    rng = rng or T.Rng(cfg.seed).child(_INIT_KEYS["vi" if modality == "vi" else "ir"])
    ch = 3 if modality == "vi" else 1
    return UNetModel(
        rng,
        in_channels=ch,
        out_channels=ch,
        depth=cfg.depth,
        base_channels=cfg.base_channels,
        guided=guided,
        se_reduction=cfg.se_reduction,
        kind=modality,
    )


def _load_params(module, params, prefix=""):
    named = dict(module.named_parameters())
    expected = {prefix + k for k in named}
    got = {k for k in params if k.startswith(prefix)} if prefix else set(params)
    if expected != got:
        missing = sorted(expected - got)[:3]
        extra = sorted(got - expected)[:3]
        raise DependencyError(f"checkpoint parameters do not match model (missing {missing}, extra {extra})")
    for name, p in named.items():
        arr = params[prefix + name]
        if arr.shape != p.shape:
            raise DependencyError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
        p.data[...] = arr


def unet_checkpoint(model):
    params = {n: p.data for n, p in model.named_parameters()}
    desc = dict(model.descriptor, kind=model.kind)
    if model.guided and model.guide is not None:
        for n, p in model.guide.named_parameters():
            params["guide." + n] = p.data
        desc.update({f"guide.{k}": v for k, v in model.guide.descriptor.items()})
    kind = f"{model.kind}-unet"
    return ckpt_io.Checkpoint(kind, desc, params)


def _unet_from_descriptor(desc, prefix=""):
    d = {k[len(prefix):]: v for k, v in desc.items() if k.startswith(prefix)}
    return UNetModel(
        T.Rng(0),
        in_channels=int(d["in_channels"]),
        out_channels=int(d["out_channels"]),
        depth=int(d["depth"]),
        base_channels=int(d["base_channels"]),
        guided=bool(int(d["guided"])),
        se_reduction=int(d["se_reduction"]),
        kind=d.get("kind", "vi" if int(d["in_channels"]) == 3 else "ir"),
    )


def unet_from_checkpoint(ck):
    if not ck.kind.endswith("-unet"):
        raise DependencyError(f"expected a UNet checkpoint, got {ck.kind!r}")
    model = _unet_from_descriptor(ck.descriptor)
    own = {k: v for k, v in ck.params.items() if not k.startswith("guide.")}
    _load_params(model, own)
    if model.guided:
        if not any(k.startswith("guide.") for k in ck.params):
            raise DependencyError("guided IR checkpoint does not embed its VI guide")
        guide = _unet_from_descriptor(ck.descriptor, "guide.")
        guide.kind = "vi"
        _load_params(guide, {k[6:]: v for k, v in ck.params.items() if k.startswith("guide.")})
        model.attach_guide(guide)
    return model


def load_unet(path):
    return unet_from_checkpoint(ckpt_io.load(path))


def save_unet(model, path):
    return ckpt_io.save(path, unet_checkpoint(model))


def fusion_checkpoint(model):
    params = {n: p.data for n, p in model.named_parameters()}
    desc = dict(model.descriptor)
    desc.update({f"vi.{k}": v for k, v in model.vi.descriptor.items()})
    desc.update({f"ir.{k}": v for k, v in model.ir.descriptor.items()})
    return ckpt_io.Checkpoint("fusion", desc, params)


def fusion_from_checkpoint(ck):
    if ck.kind != "fusion":
        raise DependencyError(f"expected a fusion checkpoint, got {ck.kind!r}")
    d = ck.descriptor
    vi = _unet_from_descriptor(d, "vi.")
    vi.kind = "vi"
    ir = _unet_from_descriptor(d, "ir.")
    ir.kind = "ir"
    pairs = tuple(tuple(int(v) for v in p.split("-")) for p in d["pairs"].split(";"))
    cfg = FusionConfig(
        offset=int(d["offset"]),
        paired_stages=pairs,
        swap_roles=bool(int(d["swap_roles"])),
        guidance_enabled=bool(int(d["guidance_enabled"])),
        freeze_encoders=bool(int(d["freeze_encoders"])),
        alpha=float(d["alpha"]),
        beta=float(d["beta"]),
        depth=int(d["depth"]),
    )
    if ir.guided:
        ir.attach_guide(vi)
    model = FusionModel(T.Rng(0), vi, ir, cfg)
    _load_params(model, ck.params)
    return model


def load_fusion(path):
    return fusion_from_checkpoint(ckpt_io.load(path))


def encoder_digest(model):
    """Digest of both encoders (and SE guidance blocks) of a fusion model."""
    named = [
        (n, p)
        for n, p in model.named_parameters()
        if n.split(".")[0] in ("vi", "ir") and not n.split(".")[1].startswith("dec")
    ]
    return ckpt_io.params_digest(named)


# ---------------------------------------------------------------- data


def split_dir(cfg, split):
    base = Path(cfg.data_dir)
    return base / split if (base / split).is_dir() else base


def load_split(cfg, split):
    return load_dataset(split_dir(cfg, split))


def stack(pairs):
    ir = T.Tensor(np.stack([p.ir for p in pairs]))
    vi = T.Tensor(np.stack([p.vi for p in pairs]))
    return ir, vi


def _batches(pairs, cfg, rng):
    order = rng.permutation(len(pairs))
    for start in range(0, len(pairs), cfg.batch_size):
        chunk = [pairs[i] for i in order[start:start + cfg.batch_size]]
        if cfg.augment:
            chunk = [random_resized_crop(p, cfg.crop, rng) for p in chunk]
        yield stack(chunk)


def _check_size(pairs, depth):
    step = 2 ** (depth - 1)
    for p in pairs:
        h, w = p.ir.shape[1:]
        if h % step or w % step:
            raise GeometryError(f"pair {p.name} is {h}x{w}; sizes must be multiples of {step}")


def _run_epochs(cfg, pairs, params, lr, loss_fn, columns):
    """Shared AdamW + cosine loop; returns one log row per epoch."""
    if not pairs:
        raise DependencyError("no training pairs")
    if not cfg.augment:
        _check_size(pairs, cfg.depth)
    rng = T.Rng(cfg.seed).child(_DATA_KEY)
    opt = T.AdamW(params, lr=lr, weight_decay=cfg.weight_decay)
    per_epoch = -(-len(pairs) // cfg.batch_size)
    total = cfg.epochs * per_epoch
    step = 0
    rows = []
    for epoch in range(cfg.epochs):
        sums = np.zeros(len(columns))
        count = 0
        for ir, vi in _batches(pairs, cfg, rng):
            current = T.cosine_lr(step, total, lr, cfg.min_lr)
            parts = loss_fn(ir, vi)
            opt.zero_grad()
            T.backward(parts[0])
            opt.step(current)
            sums += [p.item() for p in parts]
            count += 1
            step += 1
        row = {"epoch": epoch + 1}
        row.update({c: float(v / count) for c, v in zip(columns, sums)})
        row["lr"] = current
        rows.append(row)
        log.info("epoch %d %s", epoch + 1, " ".join(f"{c}={row[c]:.5g}" for c in columns))
    return rows


def write_log(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = list(rows[0])
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow([r[k] if k == "epoch" else fmt(r[k]) for k in keys])
    return path


def read_log(path):
    with Path(path).open(newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# ---------------------------------------------------------------- stage I


def train_stage1(cfg, modality, pairs, vi_model=None, guided=True):
    """Train a reconstruction UNet with MSE; returns ``(model, log_rows)``.

    ``modality`` is ``"vi"`` or ``"ir"``. A guided IR model needs the trained
    (frozen) ``vi_model`` for attention.
    """
    if modality not in ("vi", "ir"):
        raise ConfigError(f"modality must be 'vi' or 'ir', got {modality!r}")
    guided = guided and modality == "ir"
    key = modality if guided or modality == "vi" else "ir_unguided"
    model = build_unet(cfg, modality, guided, T.Rng(cfg.seed).child(_INIT_KEYS[key]))
    if guided:
        if vi_model is None:
            raise DependencyError("training the guided IR-UNet needs a trained VI-UNet checkpoint")
        model.attach_guide(vi_model)

    def loss_fn(ir, vi):
        if modality == "vi":
            return (loss_mse(model(vi), vi),)
        out = model(ir, vi if guided else None)
        return (loss_mse(out, ir),)

    rows = _run_epochs(cfg, pairs, model.parameters(), cfg.stage_lr("vi"), loss_fn, ("loss",))
    return model, rows


def reconstruction_psnr(model, pairs):
    from .metrics import psnr

    ir, vi = stack(pairs)
    with T.no_grad():
        if model.kind == "vi":
            src, out = vi, model(vi)
        else:
            src = ir
            out = model(ir, vi if model.guided else None)
    return [psnr(src.data[i], out.data[i]) for i in range(len(pairs))]


# ---------------------------------------------------------------- stage II


def fusion_config(cfg):
    return FusionConfig(
        offset=cfg.offset,
        guidance_enabled=cfg.guidance,
        freeze_encoders=cfg.freeze_encoders,
        alpha=cfg.alpha,
        beta=cfg.beta,
        depth=cfg.depth,
    )


def build_fusion(cfg, vi_model, ir_model, fcfg=None):
    fcfg = fcfg or fusion_config(cfg)
    if fcfg.guidance_enabled and not ir_model.guided:
        raise DependencyError("guidance is enabled but the IR checkpoint was trained without guidance")
    if ir_model.guided:
        if ir_model.guide is not None:
            a = ckpt_io.params_digest(ir_model.guide.named_parameters())
            b = ckpt_io.params_digest(vi_model.named_parameters())
            if a != b:
                raise DependencyError("IR checkpoint was guided by a different VI-UNet")
        ir_model.attach_guide(vi_model)
    return FusionModel(T.Rng(cfg.seed).child(_INIT_KEYS["fuse"]), vi_model, ir_model, fcfg)


def train_stage2(cfg, vi_model, ir_model, pairs, fcfg=None):
    """Train the fusion network with the three-term loss.

    Returns ``(model, log_rows, (encoder_digest_before, encoder_digest_after))``.
    """
    model = build_fusion(cfg, vi_model, ir_model, fcfg)
    alpha, beta = model.cfg.alpha, model.cfg.beta
    before = encoder_digest(model)

    def loss_fn(ir, vi):
        return total_loss(ir, vi, model(ir, vi), alpha, beta, parts=True)

    rows = _run_epochs(
        cfg, pairs, model.trainable_parameters(), cfg.stage_lr("fuse"), loss_fn,
        ("total", "mse", "ssim", "det"),
    )
    after = encoder_digest(model)
    if model.cfg.freeze_encoders and before != after:
        raise AssertionError("frozen encoder parameters changed during stage II")
    return model, rows, (before, after)


def fuse_arrays(model, ir, vi):
    """Fuse single ``(C, H, W)`` arrays; returns ``(fused, fused_stage_maps)``."""
    with T.no_grad():
        out, maps = model.forward(T.Tensor(ir[None]), T.Tensor(vi[None]), return_fused=True)
    return out.data[0], [m.data[0] for m in maps]


def fuse_pairs(model, pairs):
    return [fuse_arrays(model, p.ir, p.vi)[0] for p in pairs]


def evaluate_model(model, pairs, metadata=None):
    fused = fuse_pairs(model, pairs)
    meta = {"checkpoint": ckpt_io.params_digest(model.named_parameters())[:16]}
    meta.update(metadata or {})
    return evaluate_batch(pairs, fused, meta), fused


def feature_montage(fmap):
    """Tile the channels of ``(C, h, w)`` into a min-max normalised grid."""
    c, h, w = fmap.shape
    cols = int(np.ceil(np.sqrt(c)))
    rows = int(np.ceil(c / cols))
    grid = np.zeros((rows * (h + 1) - 1, cols * (w + 1) - 1))
    for i in range(c):
        ch = fmap[i].astype(np.float64)
        lo, hi = ch.min(), ch.max()
        ch = (ch - lo) / (hi - lo) if hi > lo else np.zeros_like(ch)
        r, q = divmod(i, cols)
        grid[r * (h + 1):r * (h + 1) + h, q * (w + 1):q * (w + 1) + w] = ch
    return to_u8(grid)


def fuse_files(model, ir_path, vi_path, out_path, dump_features=False):
    ir = load_image(ir_path)
    vi = load_image(vi_path)
    if ir.shape[0] != 1:
        ir = np.tensordot(np.array([0.299, 0.587, 0.114], dtype=np.float32), ir, axes=1)[None]
    if vi.shape[0] != 3:
        raise GeometryError(f"{vi_path} must be a 3-channel (P6) image")
    if ir.shape[1:] != vi.shape[1:]:
        raise GeometryError(f"IR {ir.shape[1:]} and VI {vi.shape[1:]} sizes differ")
    step = 2 ** (model.depth - 1)
    h, w = ir.shape[1:]
    if h % step or w % step:
        raise GeometryError(
            f"image size {h}x{w} is not divisible by {step}; crop or pad both images to "
            f"{h - h % step}x{w - w % step} or {h + (-h) % step}x{w + (-w) % step}"
        )
    fused, maps = fuse_arrays(model, ir, vi)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_image(out_path, fused)
    written = [out_path]
    if dump_features:
        for i, fmap in enumerate(maps, 1):
            p = out_path.with_name(f"{out_path.stem}_features_stage{i}.pgm")
            save_gray_u8(p, feature_montage(fmap))
            written.append(p)
    return written


# ---------------------------------------------------------------- CKA


def cka_inputs(pairs, count, crop, seed):
    """``count`` deterministic crops drawn round-robin from ``pairs``."""
    rng = T.Rng(seed).child(_DATA_KEY + 1)
    chosen = [random_resized_crop(pairs[i % len(pairs)], crop, rng) for i in range(count)]
    return stack(chosen)


def collect_trace(model, ir, vi, network=None, feature_cap=4096):
    """Activation trace of a UNet encoder over a batch of inputs."""
    trace = new_trace(network or model.kind, feature_cap)
    with T.no_grad():
        if model.kind == "vi":
            model.encode(vi, trace)
        elif model.guided:
            from .model import encode_ir_guided

            encode_ir_guided(model, model.guide, ir, vi, trace)
        else:
            model.encode(ir, trace)
    return trace


def network_id(model):
    if model.kind == "vi":
        return "VI-UNet"
    return "IR-UNet-guided" if model.guided else "IR-UNet"


def cka_analysis(cfg, model_a, pairs, out_dir, model_b=None):
    """Write heatmaps, CSV matrices and divergence reports; return a summary dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ir, vi = cka_inputs(pairs, cfg.cka_samples, cfg.crop, cfg.seed)
    models = [model_a] if model_b is None else [model_a, model_b]
    ids = [network_id(m) for m in models]
    if len(ids) == 2 and ids[0] == ids[1]:
        ids = [ids[0] + "-a", ids[1] + "-b"]
    traces = [collect_trace(m, ir, vi, i, cfg.feature_cap) for m, i in zip(models, ids)]
    if len(traces) == 2 and traces[0].tags != traces[1].tags:
        raise ContractError("checkpoints use different tap schemas")
    from . import plotting

    summary = {"networks": ids, "divergence": {}}
    report = [f"window={cfg.cka_window}", f"threshold={cfg.cka_threshold}", f"samples={ir.shape[0]}"]
    selfs = []
    for trace in traces:
        m = cka_matrix(trace)
        selfs.append(m)
        layer = divergence_layer(m, cfg.cka_window, cfg.cka_threshold)
        summary["divergence"][trace.network] = layer
        export_heatmap(m, out / f"cka_{trace.network}")
        plotting.cka_heatmap(m, out / f"cka_{trace.network}.png", divergence=layer)
        tag = "none" if layer is None else trace.tags[layer]
        num = "none" if layer is None else layer + 1
        report.append(f"{trace.network}.divergence_layer={num}")
        report.append(f"{trace.network}.divergence_tag={tag}")
    if len(traces) == 2:
        cross = cka_matrix(traces[0], traces[1])
        export_heatmap(cross, out / f"cka_{ids[0]}_vs_{ids[1]}")
        plotting.cka_heatmap(cross, out / f"cka_{ids[0]}_vs_{ids[1]}.png")
        plotting.cka_side_by_side(
            selfs[0], selfs[1], out / "cka_side_by_side.png",
            [summary["divergence"][i] for i in ids],
        )
        summary["cross_shape"] = cross.shape
    (out / "divergence.txt").write_text("\n".join(report) + "\n")
    summary["shape"] = selfs[0].shape
    return summary


# ---------------------------------------------------------------- ablation


def ablation_study(cfg, vi_model_path, ir_model_path, ir_unguided_path, train_pairs, eval_pairs, variants, out_dir):
    """Train stage II per variant with identical seeds; return metric rows."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    base = fusion_config(cfg)
    for variant in variants:
        if variant not in ABLATIONS:
            raise ConfigError(f"unknown ablation variant {variant!r}")
        fcfg = build_ablation(base, variant)
        vi_model = load_unet(vi_model_path)
        ir_path = ir_model_path if fcfg.guidance_enabled else ir_unguided_path
        ir_model = load_unet(ir_path)
        model, log_rows, _ = train_stage2(cfg, vi_model, ir_model, train_pairs, fcfg)
        write_log(log_rows, out / f"{variant}_loss.csv")
        ckpt_io.save(out / f"{variant}.ckpt", fusion_checkpoint(model))
        report, _ = evaluate_model(model, eval_pairs, {"variant": variant})
        report.to_csv(out / f"{variant}_metrics.csv")
        rows.append({"variant": variant, **report.means})
        log.info("%s %s", variant, report.means)
    path = out / "ablation.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "psnr", "ssim", "qabf"])
        for r in rows:
            w.writerow([r["variant"], fmt(r["psnr"]), fmt(r["ssim"]), fmt(r["qabf"])])
    from . import plotting

    plotting.ablation_bars(rows, out / "ablation.png")
    return rows


def unguided_config(cfg):
    return replace(cfg, guidance=False)
