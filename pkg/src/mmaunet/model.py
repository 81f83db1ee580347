"""VI-UNet, guided IR-UNet and the asymmetric cross-scale fusion network."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, replace

from . import tensor as T
from .cka import ActivationTrace
from .errors import ConfigError, DimensionError, GeometryError
from .nn import (
    SCHEMA_ID,
    ChannelAttention,
    ConvBlock,
    DecoderStage,
    DownTransition,
    Module,
    SeBlock,
    stage_taps,
)


def stage_channels(base_channels, depth):
    return [base_channels * 2 ** k for k in range(depth)]


class UNetModel(Module):
    """UNet autoencoder with max-pool encoder and pixel-shuffle decoder.

    A guided model owns one SE block per encoder stage; at run time those
    blocks read the matching stage of a frozen guide network (``guide``,
    which is not one of this model's parameters).
    """

    def __init__(
        self,
        rng,
        in_channels=3,
        out_channels=3,
        depth=5,
        base_channels=16,
        guided=False,
        se_reduction=4,
        kind="vi",
    ):
        super().__init__()
        if depth < 2:
            raise ConfigError("depth must be at least 2")
        self.kind = kind
        self.depth = depth
        self.base_channels = base_channels
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.guided = guided
        self.se_reduction = se_reduction
        self.channels = stage_channels(base_channels, depth)
        object.__setattr__(self, "guide", None)

        ins = [in_channels] + self.channels[:-1]
        self.encoder = [
            self.add_module(f"enc{k + 1}", ConvBlock(rng, ins[k], self.channels[k], stage_taps(k + 1)))
            for k in range(depth)
        ]
        self.se = []
        if guided:
            self.se = [
                self.add_module(f"se{k + 1}", SeBlock(rng, c, se_reduction))
                for k, c in enumerate(self.channels)
            ]
        self.decoder = [
            self.add_module(
                f"dec{level}",
                DecoderStage(
                    rng,
                    self.channels[level - 1],
                    self.channels[level - 2],
                    out_channels if level == 2 else None,
                ),
            )
            for level in range(depth, 1, -1)
        ]

    @property
    def descriptor(self):
        return {
            "depth": self.depth,
            "base_channels": self.base_channels,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "guided": int(self.guided),
            "se_reduction": self.se_reduction,
            "schema": SCHEMA_ID,
        }

    def attach_guide(self, guide):
        if not self.guided:
            raise ConfigError("only a guided model takes a guide network")
        if guide.channels != self.channels:
            raise DimensionError(
                f"guide channel ladder {guide.channels} differs from {self.channels}"
            )
        guide.freeze()
        object.__setattr__(self, "guide", guide)

    def check_geometry(self, x):
        if x.ndim != 4:
            raise DimensionError(f"expected N x C x H x W input, got {x.shape}")
        if x.shape[1] != self.in_channels:
            raise DimensionError(f"{self.kind} UNet expects {self.in_channels} channels, got {x.shape[1]}")
        step = 2 ** (self.depth - 1)
        if x.shape[2] % step or x.shape[3] % step:
            raise GeometryError(
                f"input {x.shape[2]}x{x.shape[3]} must be divisible by {step} for depth {self.depth}"
            )

    def encode(self, x, trace=None, gates=None):
        """Per-stage features, stage ``k`` at ``H / 2**(k-1)``."""
        self.check_geometry(x)
        # inputs live in [0, 1]; the encoder sees them centred on zero
        x = T.add(T.scale(x, 2.0), -1.0)
        feats = []
        for k, block in enumerate(self.encoder):
            gate = gates[k] if gates is not None else None
            feat, pooled = block.forward(x, trace, gate, prefix=f"s{k + 1}.")
            feats.append(feat)
            x = pooled
        return feats

    def decode(self, feats):
        x = feats[-1]
        for level, stage in zip(range(self.depth, 1, -1), self.decoder):
            x = stage(x, feats[level - 2])
        return T.sigmoid(x)

    def __call__(self, x, guide_input=None, trace=None):
        return self.forward(x, guide_input, trace)

    def forward(self, x, guide_input=None, trace=None):
        """Reconstruct ``x``; a guided model uses ``guide_input`` for attention."""
        if self.guided and guide_input is not None:
            feats = encode_ir_guided(self, self.guide, x, guide_input, trace)
        else:
            feats = self.encode(x, trace)
        return self.decode(feats)


def new_trace(network, feature_cap=None):
    from .cka import DEFAULT_FEATURE_CAP

    return ActivationTrace(
        network=network,
        schema=SCHEMA_ID,
        feature_cap=DEFAULT_FEATURE_CAP if feature_cap is None else feature_cap,
    )


def encode_vi(model, vi, trace=None):
    return model.encode(vi, trace)


def guidance_gates(ir_model, vi_model, vi):
    """SE attention per stage computed from the VI encoder.

    A frozen guide records no graph; an unfrozen one receives gradients
    through the gates as well as through the fusion path.
    """
    if vi_model is None:
        raise ConfigError("guided encoding needs a VI model")
    return [se(f) for se, f in zip(ir_model.se, vi_model.encode(vi))]


def encode_ir_guided(ir_model, vi_model, ir, vi, trace=None):
    """IR encoding with VI attention injected before every pooling step."""
    if ir.shape[0] != vi.shape[0] or ir.shape[2:] != vi.shape[2:]:
        raise DimensionError(f"IR {ir.shape} and VI {vi.shape} are not aligned")
    ir_model.check_geometry(ir)
    gates = guidance_gates(ir_model, vi_model, vi)
    return ir_model.encode(ir, trace, gates)


# ---------------------------------------------------------------- fusion


@dataclass(frozen=True)
class FusionConfig:
    """Stage pairing and loss weights. VI stage ``k`` fuses with IR stage
    ``k + offset``; ``swap_roles`` exchanges the two modalities' roles."""

    offset: int = 1
    paired_stages: tuple | None = None
    swap_roles: bool = False
    guidance_enabled: bool = True
    freeze_encoders: bool = True
    alpha: float = 10.0
    beta: float = 0.5
    depth: int = 5

    def __post_init__(self):
        if not 0 <= self.offset <= self.depth - 1:
            raise ConfigError(f"offset {self.offset} outside [0, {self.depth - 1}]")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be non-negative")
        for s, d in self.pairs:
            if not (1 <= s <= self.depth and 1 <= d <= self.depth) or d < s:
                raise ConfigError(f"invalid stage pair ({s}, {d}) for depth {self.depth}")

    @property
    def pairs(self):
        """``(shallow_stage, deep_stage)`` tuples, shallow first."""
        if self.paired_stages is not None:
            return tuple(tuple(p) for p in self.paired_stages)
        return tuple((k, k + self.offset) for k in range(1, self.depth - self.offset + 1))


ABLATIONS = ("E1", "E2", "E3", "E4", "E5")


def build_ablation(cfg, variant):
    """Configuration for ablation ``variant`` derived from ``cfg``."""
    base = replace(cfg, paired_stages=None, swap_roles=False)
    if variant == "E1":
        return replace(base, offset=1, guidance_enabled=True)
    if variant == "E2":
        return replace(base, offset=0, guidance_enabled=False)
    if variant == "E3":
        return replace(base, offset=1, guidance_enabled=False)
    if variant == "E4":
        return replace(base, offset=2, guidance_enabled=True)
    if variant == "E5":
        return replace(base, offset=1, guidance_enabled=True, swap_roles=True)
    raise ConfigError(f"unknown ablation variant {variant!r}; expected one of {ABLATIONS}")


class FusionModel(Module):
    """Both encoders, one transition + channel attention per stage pair, and a
    four-stage pixel-shuffle decoder fed by the fused maps."""

    def __init__(self, rng, vi_unet, ir_unet, cfg=FusionConfig(), reduction=4):
        super().__init__()
        if vi_unet.depth != ir_unet.depth or vi_unet.channels != ir_unet.channels:
            raise DimensionError("VI and IR encoders must share depth and channel ladder")
        if cfg.depth != vi_unet.depth:
            cfg = replace(cfg, depth=vi_unet.depth)
        object.__setattr__(self, "cfg", cfg)
        self.vi = vi_unet
        self.ir = ir_unet
        self.depth = vi_unet.depth
        self.channels = vi_unet.channels
        self.out_channels = 3
        if cfg.freeze_encoders:
            vi_unet.freeze()
            ir_unet.freeze()
        else:
            # attaching a guide freezes it; undo that when encoders train
            vi_unet.unfreeze()
            ir_unet.unfreeze()

        levels = [d for _, d in cfg.pairs]
        if max(levels) != self.depth:
            raise ConfigError("the deepest stage pair must reach the last encoder stage")
        self.transitions = []
        self.attention = []
        for i, (s, d) in enumerate(cfg.pairs):
            cs, cd = self.channels[s - 1], self.channels[d - 1]
            if cs * 2 ** (d - s) != cd:
                raise DimensionError(f"stage {s} ({cs} ch) cannot be mapped onto stage {d} ({cd} ch)")
            self.transitions.append(self.add_module(f"trans{i + 1}", DownTransition(rng, cs, cd, d - s)))
            self.attention.append(self.add_module(f"att{i + 1}", ChannelAttention(rng, cd, reduction)))
        self.decoder = [
            self.add_module(
                f"dec{level}",
                DecoderStage(
                    rng,
                    self.channels[level - 1],
                    self.channels[level - 2],
                    self.out_channels if level == 2 else None,
                ),
            )
            for level in range(self.depth, 1, -1)
        ]

    @property
    def descriptor(self):
        c = self.cfg
        return {
            "depth": self.depth,
            "base_channels": self.channels[0],
            "in_channels": self.ir.in_channels,
            "out_channels": self.out_channels,
            "schema": SCHEMA_ID,
            "offset": c.offset,
            "pairs": ";".join(f"{s}-{d}" for s, d in c.pairs),
            "swap_roles": int(c.swap_roles),
            "guidance_enabled": int(c.guidance_enabled),
            "freeze_encoders": int(c.freeze_encoders),
            "alpha": c.alpha,
            "beta": c.beta,
            "vi_guided": int(self.vi.guided),
            "ir_guided": int(self.ir.guided),
        }

    def trainable_parameters(self):
        params = []
        for name, p in self.named_parameters():
            parts = name.split(".")
            # autoencoder decoders are not on the fusion path
            if parts[0] in ("vi", "ir") and parts[1].startswith("dec"):
                continue
            if p.requires_grad:
                params.append(p)
        return params

    def encode(self, ir, vi):
        """``(vi_feats, ir_feats)`` per encoder stage."""
        if ir.shape[0] != vi.shape[0] or ir.shape[2:] != vi.shape[2:]:
            raise DimensionError(f"IR {ir.shape} and VI {vi.shape} are not aligned")
        ctx = T.no_grad() if self.cfg.freeze_encoders else contextlib.nullcontext()
        with ctx:
            vi_feats = self.vi.encode(vi)
            if self.cfg.guidance_enabled and self.ir.guided:
                ir_feats = encode_ir_guided(self.ir, self.vi if self.ir.guide is None else self.ir.guide, ir, vi)
            else:
                ir_feats = self.ir.encode(ir)
        return vi_feats, ir_feats

    def fuse_stages(self, vi_feats, ir_feats):
        """Fused maps, ordered shallow to deep (deepest last)."""
        shallow, deep = (ir_feats, vi_feats) if self.cfg.swap_roles else (vi_feats, ir_feats)
        fused = []
        for (s, d), trans, att in zip(self.cfg.pairs, self.transitions, self.attention):
            moved = trans(shallow[s - 1])
            target = deep[d - 1]
            if moved.shape != target.shape:
                raise DimensionError(
                    f"transitioned stage {s} {moved.shape} does not match stage {d} {target.shape}"
                )
            fused.append(att(T.add(moved, target)))
        return fused

    def decode(self, fused):
        by_level = {d: f for (_, d), f in zip(self.cfg.pairs, fused)}
        x = by_level[self.depth]
        for level, stage in zip(range(self.depth, 1, -1), self.decoder):
            x = stage(x, by_level.get(level - 1))
        return T.sigmoid(x)

    def __call__(self, ir, vi):
        return self.forward(ir, vi)

    def forward(self, ir, vi, return_fused=False):
        vi_feats, ir_feats = self.encode(ir, vi)
        fused = self.fuse_stages(vi_feats, ir_feats)
        out = self.decode(fused)
        return (out, fused) if return_fused else out


def fuse_stages(model, vi_feats, ir_feats):
    return model.fuse_stages(vi_feats, ir_feats)


def fusion_forward(model, ir, vi):
    return model.forward(ir, vi)

