"""Network building blocks: conv blocks, SE guidance, channel attention,
cross-scale down transitions and pixel-shuffle decoder stages."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, GeometryError
from .tensor import Tensor

# Activation taps recorded per encoder stage. The first stage records the
# plain layer outputs; deeper stages also record the pre-bias and post-bias
# intermediates of both convolutions.
STAGE1_TAPS = ("input", "conv1", "relu1", "conv2", "relu2", "pre_pool", "post_pool")
DEEP_TAPS = (
    "input",
    "conv1.pre_bias",
    "conv1.post_bias",
    "conv1",
    "relu1",
    "conv2.pre_bias",
    "conv2.post_bias",
    "conv2",
    "relu2",
    "pre_pool",
    "post_pool",
)
SCHEMA_ID = "taps-7-11"


def stage_taps(stage):
    """Tap tags for 1-based encoder ``stage``."""
    return STAGE1_TAPS if stage == 1 else DEEP_TAPS


class Module:
    """Parameter container with deterministic, insertion-ordered naming."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name, module):
        setattr(self, name, module)
        return module

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None

    def unfreeze(self):
        for p in self.parameters():
            p.requires_grad = True

    @property
    def frozen(self):
        return not any(p.requires_grad for p in self.parameters())

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


class Conv2d(Module):
    def __init__(self, rng, cin, cout, k, stride=1, padding=0):
        super().__init__()
        self.cin, self.cout, self.k = cin, cout, k
        self.stride, self.padding = stride, padding
        self.weight = T.kaiming(rng, (cout, cin, k, k), cin * k * k)
        self.bias = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def split(self, x):
        """Return ``(pre_bias, post_bias)`` outputs."""
        pre = T.conv2d(x, self.weight, None, self.stride, self.padding)
        post = T.add(pre, T.reshape(self.bias, (1, self.cout, 1, 1)))
        return pre, post


class Linear(Module):
    def __init__(self, rng, cin, cout):
        super().__init__()
        self.weight = T.kaiming(rng, (cout, cin), cin)
        self.bias = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)

    def __call__(self, x):
        return T.fully_connected(x, self.weight, self.bias)


class ConvBlock(Module):
    """Two (3x3 conv, ReLU) pairs; spatial size preserved."""

    def __init__(self, rng, in_channels, out_channels, taps=STAGE1_TAPS):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.taps = tuple(taps)
        self.conv1 = Conv2d(rng, in_channels, out_channels, 3, padding=1)
        self.conv2 = Conv2d(rng, out_channels, out_channels, 3, padding=1)

    def __call__(self, x, trace=None, gate=None):
        return self.forward(x, trace, gate)

    def forward(self, x, trace=None, gate=None, prefix=""):
        """Run the block and return ``(features, pooled)``.

        ``gate`` is an optional ``[N,C,1,1]`` attention multiplied into the
        block output before pooling. ``pooled`` is ``None`` when H or W is odd.
        """
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(
                f"ConvBlock expects {self.in_channels} input channels, got shape {x.shape}"
            )
        taps = self.taps if trace is not None else ()

        def tap(tag, value):
            if tag in taps:
                trace.append(prefix + tag, value)

        tap("input", x)
        pre1, c1 = self.conv1.split(x)
        tap("conv1.pre_bias", pre1)
        tap("conv1.post_bias", c1)
        tap("conv1", c1)
        r1 = T.relu(c1)
        tap("relu1", r1)
        pre2, c2 = self.conv2.split(r1)
        tap("conv2.pre_bias", pre2)
        tap("conv2.post_bias", c2)
        tap("conv2", c2)
        feat = T.relu(c2)
        tap("relu2", feat)
        if gate is not None:
            feat = guided_inject(feat, gate)
        tap("pre_pool", feat)
        pooled = None
        if feat.shape[2] % 2 == 0 and feat.shape[3] % 2 == 0:
            pooled = T.pool2d("max", feat, 2, 2)
        if "post_pool" in taps:
            if pooled is None:
                raise GeometryError("post_pool tap needs even spatial dims")
            tap("post_pool", pooled)
        return feat, pooled


class SeBlock(Module):
    """Squeeze-and-excitation: global mean, C -> C/r -> C bottleneck, sigmoid."""

    def __init__(self, rng, channels, reduction=4):
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise ConfigError(f"{channels} channels not divisible by reduction {reduction}")
        self.channels = channels
        self.reduction = reduction
        self.fc1 = Linear(rng, channels, channels // reduction)
        self.fc2 = Linear(rng, channels // reduction, channels)

    def __call__(self, guide):
        return se_forward(self, guide)


def _bottleneck(block, x):
    n, c = x.shape[:2]
    s = T.reshape(T.global_avg_pool(x), (n, c))
    z = T.relu(block.fc1(s))
    a = T.sigmoid(block.fc2(z))
    return T.reshape(a, (n, c, 1, 1))


def se_forward(block, guide):
    """Channel attention vector ``[N,C,1,1]`` computed from ``guide``."""
    if guide.ndim != 4 or guide.shape[1] != block.channels:
        raise DimensionError(f"SeBlock expects {block.channels} channels, got {guide.shape}")
    return _bottleneck(block, guide)


def guided_inject(ir_feat, vi_attention):
    """Channel-wise product of IR features with a VI attention vector."""
    if (
        vi_attention.ndim != 4
        or vi_attention.shape[2:] != (1, 1)
        or vi_attention.shape[:2] != ir_feat.shape[:2]
    ):
        raise DimensionError(
            f"attention {vi_attention.shape} does not match features {ir_feat.shape}"
        )
    return T.mul(ir_feat, vi_attention)


class ChannelAttention(Module):
    """Reweights the channels of a summed feature map by gates in (0, 1)."""

    def __init__(self, rng, channels, reduction=4):
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise ConfigError(f"{channels} channels not divisible by reduction {reduction}")
        self.channels = channels
        self.fc1 = Linear(rng, channels, channels // reduction)
        self.fc2 = Linear(rng, channels // reduction, channels)

    def __call__(self, fused):
        return channel_attention_forward(self, fused)


def channel_attention_forward(block, fused):
    if fused.ndim != 4 or fused.shape[1] != block.channels:
        raise DimensionError(
            f"ChannelAttention expects {block.channels} channels, got {fused.shape}"
        )
    return T.mul(fused, _bottleneck(block, fused))


class DownTransition(Module):
    """Learned stride-2 3x3 convs that halve H, W and double channels per step.

    ``steps`` is the stage offset being bridged; ``steps=0`` is the identity.
    Padding is (0 top/left, 1 bottom/right) so even sizes halve exactly.
    """

    def __init__(self, rng, in_channels, out_channels, steps=1):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.steps = steps
        if steps == 0:
            if in_channels != out_channels:
                raise ConfigError("identity transition needs equal channel counts")
            self.convs = []
            return
        chans = [in_channels * 2 ** i for i in range(steps)] + [out_channels]
        self.convs = [
            self.add_module(f"conv{i + 1}", Conv2d(rng, chans[i], chans[i + 1], 3, stride=2))
            for i in range(steps)
        ]

    def __call__(self, vi_feat):
        return down_transition_forward(self, vi_feat)


def down_transition_forward(t, vi_feat):
    if vi_feat.ndim != 4 or vi_feat.shape[1] != t.in_channels:
        raise DimensionError(f"transition expects {t.in_channels} channels, got {vi_feat.shape}")
    x = vi_feat
    for conv in t.convs:
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise GeometryError(f"cannot halve odd spatial size {x.shape[2:]}")
        x = conv(T.pad2d(x, (0, 1, 0, 1)))
    return x


class DecoderStage(Module):
    """3x3 conv to ``4 * next_channels``, pixel shuffle x2, optional skip add.

    The final stage additionally projects to ``out_channels`` with a 1x1 conv.
    """

    def __init__(self, rng, in_channels, next_channels, out_channels=None):
        super().__init__()
        self.in_channels = in_channels
        self.next_channels = next_channels
        self.out_channels = out_channels
        self.conv = Conv2d(rng, in_channels, 4 * next_channels, 3, padding=1)
        self.project = None
        if out_channels is not None:
            self.project = Conv2d(rng, next_channels, out_channels, 1)

    def __call__(self, x, skip=None):
        return decoder_stage_forward(self, x, skip)


def decoder_stage_forward(d, x, skip=None):
    if x.ndim != 4 or x.shape[1] != d.in_channels:
        raise DimensionError(f"decoder stage expects {d.in_channels} channels, got {x.shape}")
    y = T.pixel_shuffle(d.conv(x), 2)
    if skip is not None:
        if skip.shape != y.shape:
            raise DimensionError(f"skip {skip.shape} does not match upsampled {y.shape}")
        y = T.add(y, skip)
    if d.project is not None:
        return d.project(y)
    return T.relu(y)
