"""Plain-text ``key=value`` run configuration."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError, FileError

STAGE1_LR = 1e-3
STAGE2_LR = 1e-4


@dataclass(frozen=True)
class RunConfig:
    stage: str = "vi"
    data_dir: str = "data"
    out_dir: str = "runs"
    epochs: int = 30
    batch_size: int = 4
    lr: float = 0.0  # 0 selects the stage default (1e-3 stage I, 1e-4 stage II)
    min_lr: float = 0.0
    weight_decay: float = 0.005
    alpha: float = 10.0
    beta: float = 0.5
    offset: int = 1
    variant: str = "E1"
    seed: int = 0
    freeze_encoders: bool = True
    guidance: bool = True
    augment: bool = True
    crop: int = 64
    depth: int = 5
    base_channels: int = 16
    se_reduction: int = 4
    train_count: int = 32
    eval_count: int = 8
    image_size: int = 96
    vi_ckpt: str = ""
    ir_ckpt: str = ""
    ir_unguided_ckpt: str = ""
    fusion_ckpt: str = ""
    cka_samples: int = 32
    cka_window: int = 5
    cka_threshold: float = 0.5
    feature_cap: int = 4096
    variants: str = "E1,E2,E3,E4,E5"

    def stage_lr(self, stage):
        if self.lr > 0:
            return self.lr
        return STAGE2_LR if stage == "fuse" else STAGE1_LR

    def with_overrides(self, **values):
        known = {f.name: f for f in fields(self)}
        clean = {}
        for key, value in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            clean[key] = _coerce(known[key], value, key)
        return replace(self, **clean)

    def to_text(self):
        return "".join(f"{f.name}={_render(getattr(self, f.name))}\n" for f in fields(self))


def _render(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(f, raw, where):
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: {f.name} expects {kind}, got {raw!r}") from None
    return raw


def parse_config(text, source="<config>"):
    """Parse ``key=value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    known = {f.name: f for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        where = f"{source}:{lineno}"
        if not sep:
            raise ConfigError(f"{where}: expected key=value, got {line!r}")
        if key not in known:
            raise ConfigError(f"{where}: unknown config key {key!r}")
        values[key] = _coerce(known[key], value, where)
    return RunConfig(**values)


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))
