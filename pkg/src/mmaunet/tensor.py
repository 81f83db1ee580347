"""Dense tensors with reverse-mode differentiation.

Every op builds a node only when at least one operand requires a gradient,
so frozen sub-networks run without recording anything. ``backward`` walks
the recorded graph in reverse topological order and accumulates gradients
into leaf tensors.

Elements are float32; float64 inputs are preserved so gradient checks can
run in double precision.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, GeometryError, NumericalError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return np.ascontiguousarray(arr, dtype=dtype)
    if arr.dtype == np.float64:
        return np.ascontiguousarray(arr)
    return np.ascontiguousarray(arr, dtype=np.float32)


class Tensor:
    """N-dimensional array node with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if isinstance(like, Tensor) else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _lift_pair(a, b):
    """Lift operands; a bare scalar takes the dtype of the other operand."""
    return _lift(a, b), _lift(b, a)


def _make(data, parents, backward_fn, op):
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    out.op = op
    return out


def _broadcast_shape(a, b):
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} against {b.shape}") from exc
    return shape


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum(), dtype=grad.dtype)
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- pointwise


def add(a, b):
    a, b = _lift_pair(a, b)
    _broadcast_shape(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = _lift_pair(a, b)
    _broadcast_shape(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = _lift_pair(a, b)
    _broadcast_shape(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = _lift_pair(a, b)
    _broadcast_shape(a, b)
    out = a.data / b.data

    def bw(g):
        gb = -g * out / b.data
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "div")


def scale(a, s):
    a = _lift(a)
    s = float(s)

    def bw(g):
        return (g * a.dtype.type(s),)

    return _make(a.data * a.dtype.type(s), (a,), bw, "scale")


def relu(a):
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, a.dtype.type(0)), (a,), bw, "relu")


def sigmoid(a):
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), bw, "sigmoid")


def square(a):
    def bw(g):
        return (g * 2.0 * a.data,)

    return _make(a.data * a.data, (a,), bw, "square")


def sqrt(a):
    out = np.sqrt(a.data)

    def bw(g):
        return (g * 0.5 / out,)

    return _make(out, (a,), bw, "sqrt")


def maximum(a, b):
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _lift_pair(a, b)
    _broadcast_shape(a, b)
    pick_a = a.data >= b.data

    def bw(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _make(np.where(pick_a, a.data, b.data), (a, b), bw, "maximum")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "sigmoid": sigmoid,
}


def elementwise(op_kind, a, b=None):
    """Dispatch a named pointwise op. ``scale`` takes a Python number as ``b``."""
    if op_kind == "scale":
        if b is None:
            raise ContractError("scale needs a factor")
        return scale(a, b)
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op_kind!r}") from None
    if op_kind in ("relu", "sigmoid"):
        return fn(a)
    if b is None:
        raise ContractError(f"{op_kind} needs two operands")
    return fn(a, b)


# ---------------------------------------------------------------- reductions


def tsum(a, axis=None, keepdims=False):
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _make(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = math.prod(a.shape[i] for i in axes)
    return scale(tsum(a, axis, keepdims), 1.0 / count)


def reshape(a, shape):
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc

    def bw(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), bw, "reshape")


def concat(tensors, axis=1):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc

    def bw(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _make(out, tensors, bw, "concat")


# ---------------------------------------------------------------- spatial ops


def _check_4d(x, name="input"):
    if x.ndim != 4:
        raise DimensionError(f"{name} must be N x C x H x W, got {x.shape}")


def pad2d(x, pads):
    """Zero-pad H and W by ``(top, bottom, left, right)``."""
    _check_4d(x)
    top, bottom, left, right = pads
    if min(pads) < 0:
        raise ContractError("padding must be non-negative")
    h, w = x.shape[2:]
    out = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))

    def bw(g):
        return (g[:, :, top:top + h, left:left + w],)

    return _make(out, (x,), bw, "pad2d")


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation, ``x[N,Cin,H,W] * weight[Cout,Cin,k,k]``."""
    _check_4d(x)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise DimensionError(f"weight must be Cout x Cin x k x k, got {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, k, _ = weight.shape
    if wcin != cin:
        raise DimensionError(f"input has {cin} channels, weight expects {wcin}")
    if k < 1 or stride < 1 or padding < 0:
        raise ContractError("need k >= 1, stride >= 1, padding >= 0")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias must have shape ({cout},), got {bias.shape}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < k or wp < k or (hp - k) % stride or (wp - k) % stride:
        raise GeometryError(
            f"({h}x{w} + 2*{padding} - {k}) is not divisible by stride {stride}"
        )
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wmat = weight.data.reshape(cout, -1)
    if k == 1:
        cols = xp[:, :, ::stride, ::stride].transpose(0, 2, 3, 1).reshape(-1, cin)
    else:
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, cin * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = gx = gb = None
        if weight.requires_grad:
            gw = (gmat.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=0)
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, cin, k, k)
            gxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
            he, we = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + he:stride, j:j + we:stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "conv2d")


def pool2d(kind, x, k, stride):
    """Max or average pooling over ``k x k`` windows."""
    _check_4d(x)
    n, c, h, w = x.shape
    if kind not in ("max", "avg"):
        raise ContractError(f"unknown pooling kind {kind!r}")
    if h < k or w < k or (h - k) % stride or (w - k) % stride:
        raise GeometryError(f"{h}x{w} cannot be pooled with k={k}, stride={stride}")
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, ho, wo, k * k)
    he, we = stride * (ho - 1) + 1, stride * (wo - 1) + 1

    if kind == "max":
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

        def bw(g):
            gx = np.zeros_like(x.data)
            for i in range(k):
                for j in range(k):
                    sel = idx == i * k + j
                    gx[:, :, i:i + he:stride, j:j + we:stride] += g * sel
            return (gx,)

        return _make(np.ascontiguousarray(out), (x,), bw, "max_pool2d")

    out = flat.mean(axis=-1, dtype=x.dtype)

    def bw(g):
        gx = np.zeros_like(x.data)
        share = g / (k * k)
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + he:stride, j:j + we:stride] += share
        return (gx,)

    return _make(out.astype(x.dtype), (x,), bw, "avg_pool2d")


def global_avg_pool(x):
    _check_4d(x)
    return mean(x, axis=(2, 3), keepdims=True)


def fully_connected(x, weight, bias=None):
    """Affine map ``x @ weight.T + bias`` for ``x[N,Cin]``."""
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError("fully_connected expects 2-D input and weight")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"input has {x.shape[1]} features, weight expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"bias must have shape ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        grads = (g @ weight.data, g.T @ x.data)
        if bias is not None:
            grads += (g.sum(axis=0),)
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "fully_connected")


def pixel_shuffle(x, r):
    """Rearrange ``[N, C*r*r, H, W]`` into ``[N, C, r*H, r*W]``."""
    _check_4d(x)
    n, crr, h, w = x.shape
    if r < 1 or crr % (r * r):
        raise DimensionError(f"{crr} channels not divisible by r^2={r * r}")
    c = crr // (r * r)
    out = x.data.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)

    def bw(g):
        return (g.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(x.shape),)

    return _make(np.ascontiguousarray(out), (x,), bw, "pixel_shuffle")


def pixel_unshuffle(x, r):
    """Inverse of :func:`pixel_shuffle`."""
    _check_4d(x)
    n, c, hr, wr = x.shape
    if r < 1 or hr % r or wr % r:
        raise GeometryError(f"{hr}x{wr} not divisible by r={r}")
    h, w = hr // r, wr // r
    out = x.data.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)

    def bw(g):
        return (g.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(x.shape),)

    return _make(np.ascontiguousarray(out), (x,), bw, "pixel_unshuffle")


# ---------------------------------------------------------------- backward


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericalError("loss is not finite")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- rng / init


class Rng:
    """Seeded generator (PCG64), reproducible across platforms."""

    def __init__(self, seed):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape, std=1.0, dtype=np.float32):
        return (self._gen.standard_normal(shape) * std).astype(dtype)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def child(self, key):
        """Independent stream derived from this seed and an integer key."""
        ss = np.random.SeedSequence([self.seed, int(key)])
        return Rng(int(ss.generate_state(1, dtype=np.uint64)[0]))

    @property
    def generator(self):
        return self._gen


def kaiming(rng, shape, fan_in):
    return Tensor(rng.normal(shape, std=math.sqrt(2.0 / fan_in)), requires_grad=True)


# ---------------------------------------------------------------- optimizer


def adamw_step(params, grads, state, lr, weight_decay=0.005, betas=(0.9, 0.999), eps=1e-8):
    """One decoupled-weight-decay Adam update, in place on ``params`` arrays.

    ``state`` is a dict holding ``step`` and per-parameter ``m``/``v`` lists;
    it is created on the first call when empty.
    """
    b1, b2 = betas
    if not state:
        state["step"] = 0
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
    if len(state["m"]) != len(params) or len(grads) != len(params):
        raise ContractError("optimizer state does not match parameter list")
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if p.shape != m.shape:
            raise ContractError(f"state shape {m.shape} does not match parameter {p.shape}")
        if g is None:
            continue  # no gradient this step: neither decay nor moment update
        if g.shape != p.shape:
            raise ContractError(f"grad shape {g.shape} does not match parameter {p.shape}")
        p *= p.dtype.type(1.0 - lr * weight_decay)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


class AdamW:
    """Stateful wrapper around :func:`adamw_step` for a list of Tensors."""

    def __init__(self, params, lr=1e-3, weight_decay=0.005, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state = {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        adamw_step(
            [p.data for p in self.params],
            [p.grad for p in self.params],
            self.state,
            self.lr if lr is None else lr,
            self.weight_decay,
            self.betas,
            self.eps,
        )


def cosine_lr(step, total_steps, base_lr, min_lr=0.0):
    if total_steps <= 0 or not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------- checking


def numerical_grad(fn, arrays, index, h=1e-3):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``."""
    x = arrays[index]
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn(*arrays))
        flat[i] = orig - h
        down = float(fn(*arrays))
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def gradcheck(fn, arrays, h=None, dtype=np.float64):
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` maps Tensors to a scalar Tensor. The relative error of each input is
    ``|analytic - numeric|_max / max(|numeric|_max, 1e-12)``.
    """
    arrays = [np.array(a, dtype=dtype) for a in arrays]
    if h is None:
        h = 1e-6 if dtype == np.float64 else 1e-3
    leaves = [Tensor(a, requires_grad=True, dtype=dtype) for a in arrays]
    out = fn(*leaves)
    backward(out)

    def scalar(*arrs):
        with no_grad():
            return fn(*[Tensor(a, dtype=dtype) for a in arrs]).item()

    worst = 0.0
    for i, leaf in enumerate(leaves):
        num = numerical_grad(scalar, arrays, i, h)
        ana = np.zeros_like(num) if leaf.grad is None else leaf.grad.astype(np.float64)
        err = np.abs(ana - num).max() / max(np.abs(num).max(), 1e-12)
        worst = max(worst, float(err))
    return worst
