"""Minimal reverse-mode automatic differentiation over float32 numpy arrays.

The engine records operations on an explicit tape (a ComputationGraph used
as a context manager) in construction order and replays it backwards to
accumulate gradients. Only the operations the segmentation network needs
are provided; everything runs on the CPU in single precision.

Typical use::

    with ComputationGraph() as g:
        y = conv2d(x, w, b, dilation=2)
        loss = mean_all(mul(y, y))
    g.backward(loss)
    # w.grad, b.grad, x.grad now hold accumulated gradients
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, InputError

DTYPE = np.float32

_local = threading.local()


@contextmanager
def precision(dtype):
    """Temporarily switch the engine's working dtype.

    Production runs stay in float32; gradient verification re-evaluates the
    same computations in float64 so finite differences are not drowned by
    single-precision rounding of the loss scalar.
    """
    global DTYPE
    previous = DTYPE
    DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = previous


def _graph_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


class Tensor:
    """A float32 array with an optional gradient slot.

    `data` is always C-contiguous (row-major). `grad` is lazily allocated
    by the first backward pass that reaches this tensor and accumulates
    across backward calls until `zero_grad` resets it.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE)
        else:
            self.grad += g

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class ComputationGraph:
    """Tape of recorded operations, replayed in reverse for gradients.

    Nodes are (backward_fn, inputs, output) triples appended in construction
    order; the backward pass walks them in exact reverse order. A graph is
    meant to live for one forward/backward cycle and be discarded.
    """

    def __init__(self):
        self._records: list[tuple] = []

    def __enter__(self) -> "ComputationGraph":
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _graph_stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._records)

    def _append(self, backward_fn, inputs: tuple, output: "Tensor"):
        self._records.append((backward_fn, inputs, output))

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(t) into t.grad for every recorded tensor.

        Calling twice without zeroing grads adds a second copy of the same
        gradients (the per-call propagation buffers are fresh each time).
        """
        if loss.data.size != 1:
            raise ContractViolation(
                f"backward requires a scalar loss, got shape {loss.shape}"
            )
        flows: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        seen: dict[int, Tensor] = {id(loss): loss}
        for backward_fn, inputs, output in reversed(self._records):
            g_out = flows.get(id(output))
            if g_out is None:
                continue  # not on a path to the loss
            in_grads = backward_fn(g_out)
            for t, g in zip(inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                acc = flows.get(id(t))
                if acc is None:
                    flows[id(t)] = np.ascontiguousarray(g, dtype=DTYPE)
                else:
                    acc += g
                seen[id(t)] = t
        for key, t in seen.items():
            if t.requires_grad:
                t.accumulate_grad(flows[key])


def _active_graph():
    stack = _graph_stack()
    return stack[-1] if stack else None


def _maybe_record(output: Tensor, inputs: tuple, backward_builder):
    """Attach a backward rule if a graph is active and any input needs grad.

    `backward_builder` is called lazily so closures over large intermediates
    are only created when a gradient will actually be needed.
    """
    graph = _active_graph()
    if graph is None or not any(t.requires_grad for t in inputs):
        return output
    output.requires_grad = True
    graph._append(backward_builder(), inputs, output)
    return output


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=DTYPE))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and reduction operations
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def build():
        def backward(g):
            return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)
        return backward

    return _maybe_record(out, (a, b), build)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)

    def build():
        def backward(g):
            return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)
        return backward

    return _maybe_record(out, (a, b), build)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def build():
        ad, bd = a.data, b.data

        def backward(g):
            return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)
        return backward

    return _maybe_record(out, (a, b), build)


def scale(x: Tensor, factor: float) -> Tensor:
    out = Tensor(x.data * DTYPE(factor))

    def build():
        def backward(g):
            return (g * DTYPE(factor),)
        return backward

    return _maybe_record(out, (x,), build)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))

    def build():
        mask = x.data > 0

        def backward(g):
            return (g * mask,)
        return backward

    return _maybe_record(out, (x,), build)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(dtype=np.float64), dtype=DTYPE))

    def build():
        shape = x.data.shape

        def backward(g):
            return (np.full(shape, g.reshape(()), dtype=DTYPE),)
        return backward

    return _maybe_record(out, (x,), build)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(np.asarray(x.data.mean(dtype=np.float64), dtype=DTYPE))

    def build():
        shape = x.data.shape

        def backward(g):
            return (np.full(shape, g.reshape(()) / n, dtype=DTYPE),)
        return backward

    return _maybe_record(out, (x,), build)


def spatial_mean(x: Tensor) -> Tensor:
    """Mean over the spatial extent of a C x H x W map, keeping C x 1 x 1."""
    if x.data.ndim != 3:
        raise ContractViolation(f"spatial_mean expects C x H x W, got {x.shape}")
    c, h, w = x.data.shape
    out = Tensor(x.data.mean(axis=(1, 2), keepdims=True))

    def build():
        def backward(g):
            return (np.broadcast_to(g / (h * w), (c, h, w)).astype(DTYPE),)
        return backward

    return _maybe_record(out, (x,), build)


def crop(x: Tensor, box) -> Tensor:
    """Slice a C x H x W tensor down to a box; backward scatters back."""
    if x.data.ndim != 3:
        raise ContractViolation(f"crop expects C x H x W, got {x.shape}")
    c, h, w = x.data.shape
    if not box.within(w, h):
        raise ContractViolation(f"box {box.as_tuple()} outside {h}x{w} map")
    out = Tensor(x.data[:, box.y0:box.y1, box.x0:box.x1].copy())

    def build():
        def backward(g):
            gx = np.zeros((c, h, w), dtype=DTYPE)
            gx[:, box.y0:box.y1, box.x0:box.x1] = g
            return (gx,)
        return backward

    return _maybe_record(out, (x,), build)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(padded: np.ndarray, h: int, w: int, dilation: int) -> np.ndarray:
    c = padded.shape[0]
    col = np.empty((c, 3, 3, h, w), dtype=DTYPE)
    d = dilation
    for ki in range(3):
        for kj in range(3):
            col[:, ki, kj] = padded[:, ki * d:ki * d + h, kj * d:kj * d + w]
    return col.reshape(c * 9, h * w)


def conv2d(x: Tensor, weights: Tensor, bias: Tensor, dilation: int = 1) -> Tensor:
    """Shape-preserving 3x3 dilated cross-correlation with zero padding.

    Padding width equals the dilation, so spatial dimensions are unchanged.
    """
    if x.data.ndim != 3:
        raise ContractViolation(f"conv2d input must be C x H x W, got {x.shape}")
    if weights.data.ndim != 4 or weights.data.shape[2:] != (3, 3):
        raise ContractViolation(f"conv2d weights must be O x C x 3 x 3, got {weights.shape}")
    if weights.data.shape[1] != x.data.shape[0]:
        raise ContractViolation(
            f"conv2d channel mismatch: weights expect {weights.data.shape[1]}, "
            f"input has {x.data.shape[0]}"
        )
    if bias.data.shape != (weights.data.shape[0],):
        raise ContractViolation(f"conv2d bias shape {bias.shape} != ({weights.data.shape[0]},)")
    if dilation < 1:
        raise ContractViolation(f"dilation must be >= 1, got {dilation}")

    c, h, w = x.data.shape
    o = weights.data.shape[0]
    d = dilation
    padded = np.pad(x.data, ((0, 0), (d, d), (d, d)))
    col = _im2col(padded, h, w, d)
    wmat = weights.data.reshape(o, c * 9)
    out = (wmat @ col + bias.data[:, None]).reshape(o, h, w)
    y = Tensor(out)

    def build():
        def backward(g):
            gm = g.reshape(o, h * w)
            g_bias = g.sum(axis=(1, 2))
            g_weights = (gm @ col.T).reshape(weights.data.shape)
            dcol = (wmat.T @ gm).reshape(c, 3, 3, h, w)
            g_padded = np.zeros_like(padded)
            for ki in range(3):
                for kj in range(3):
                    g_padded[:, ki * d:ki * d + h, kj * d:kj * d + w] += dcol[:, ki, kj]
            g_x = g_padded[:, d:d + h, d:d + w]
            return g_x, g_weights, g_bias
        return backward

    return _maybe_record(y, (x, weights, bias), build)


def pointwise_conv(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Per-pixel linear map across channels (a 1x1 convolution)."""
    if x.data.ndim != 3:
        raise ContractViolation(f"pointwise_conv input must be C x H x W, got {x.shape}")
    if weights.data.ndim != 2 or weights.data.shape[1] != x.data.shape[0]:
        raise ContractViolation(
            f"pointwise_conv weights must be O x {x.data.shape[0]}, got {weights.shape}"
        )
    if bias.data.shape != (weights.data.shape[0],):
        raise ContractViolation(
            f"pointwise_conv bias shape {bias.shape} != ({weights.data.shape[0]},)"
        )
    out = np.tensordot(weights.data, x.data, axes=(1, 0)) + bias.data[:, None, None]
    y = Tensor(out)

    def build():
        def backward(g):
            g_w = np.tensordot(g, x.data, axes=((1, 2), (1, 2)))
            g_b = g.sum(axis=(1, 2))
            g_x = np.tensordot(weights.data.T, g, axes=(1, 0))
            return g_x.astype(DTYPE), g_w.astype(DTYPE), g_b
        return backward

    return _maybe_record(y, (x, weights, bias), build)


# ---------------------------------------------------------------------------
# pooling / upsampling
# ---------------------------------------------------------------------------

@dataclass
class PoolIndices:
    """Argmax positions of a 2x2 max pool.

    `offsets` holds, per pooled cell, the flat position 2*row+col of the
    window maximum (0..3, first maximum in row-major window order on ties).
    """

    offsets: np.ndarray  # (C, H/2, W/2) uint8
    input_shape: tuple   # (C, H, W)


def _windows(data: np.ndarray) -> np.ndarray:
    c, h, w = data.shape
    return (
        data.reshape(c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 3, 2, 4)
        .reshape(c, h // 2, w // 2, 4)
    )


def max_pool2d(x: Tensor) -> tuple[Tensor, PoolIndices]:
    """2x2 stride-2 max pooling; records the argmax within each window."""
    if x.data.ndim != 3:
        raise ContractViolation(f"max_pool2d expects C x H x W, got {x.shape}")
    c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ContractViolation(f"max_pool2d requires even spatial dims, got {h}x{w}")
    win = _windows(x.data)
    off = win.argmax(axis=3)
    out = np.take_along_axis(win, off[..., None], axis=3)[..., 0]
    indices = PoolIndices(offsets=off.astype(np.uint8), input_shape=(c, h, w))
    y = Tensor(out)

    def build():
        def backward(g):
            g4 = np.zeros((c, h // 2, w // 2, 4), dtype=DTYPE)
            np.put_along_axis(g4, off[..., None], g[..., None], axis=3)
            gx = (
                g4.reshape(c, h // 2, w // 2, 2, 2)
                .transpose(0, 1, 3, 2, 4)
                .reshape(c, h, w)
            )
            return (gx,)
        return backward

    return _maybe_record(y, (x,), build), indices


def unpool2d(x: Tensor, indices: PoolIndices) -> Tensor:
    """Place each value at its recorded argmax position; zeros elsewhere."""
    if x.data.ndim != 3:
        raise ContractViolation(f"unpool2d expects C x H x W, got {x.shape}")
    c, h2, w2 = x.data.shape
    if indices.offsets.shape != (c, h2, w2):
        raise ContractViolation(
            f"pool indices shape {indices.offsets.shape} does not match input {x.shape}"
        )
    off = indices.offsets.astype(np.intp)[..., None]
    out4 = np.zeros((c, h2, w2, 4), dtype=DTYPE)
    np.put_along_axis(out4, off, x.data[..., None], axis=3)
    out = (
        out4.reshape(c, h2, w2, 2, 2)
        .transpose(0, 1, 3, 2, 4)
        .reshape(c, 2 * h2, 2 * w2)
    )
    y = Tensor(out)

    def build():
        def backward(g):
            win = _windows(g)
            gx = np.take_along_axis(win, off, axis=3)[..., 0]
            return (gx,)
        return backward

    return _maybe_record(y, (x,), build)


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    # sample centers at (i + 0.5) / scale - 0.5, clamped to the source range
    m = np.zeros((n_out, n_in), dtype=DTYPE)
    scale = n_out / n_in
    for i in range(n_out):
        s = min(max((i + 0.5) / scale - 0.5, 0.0), n_in - 1.0)
        i0 = int(np.floor(s))
        i1 = min(i0 + 1, n_in - 1)
        f = s - i0
        m[i, i0] += 1.0 - f
        m[i, i1] += f
    return m


def bilinear_upsample2x(x: Tensor) -> Tensor:
    """Double both spatial dimensions by bilinear interpolation."""
    if x.data.ndim != 3:
        raise ContractViolation(f"bilinear_upsample2x expects C x H x W, got {x.shape}")
    c, h, w = x.data.shape
    rows = _interp_matrix(2 * h, h)
    cols = _interp_matrix(2 * w, w)
    t = np.tensordot(rows, x.data, axes=(1, 1))      # (2h, C, w)
    out = np.tensordot(t, cols, axes=(2, 1))         # (2h, C, 2w)
    y = Tensor(np.ascontiguousarray(out.transpose(1, 0, 2)))

    def build():
        def backward(g):
            t2 = np.tensordot(rows.T, g, axes=(1, 1))    # (h, C, 2w)
            gx = np.tensordot(t2, cols.T, axes=(2, 1))   # (h, C, w)
            return (np.ascontiguousarray(gx.transpose(1, 0, 2)),)
        return backward

    return _maybe_record(y, (x,), build)


def avg_downsample(x: Tensor, factor: int) -> Tensor:
    """Area-average downsampling by an integer factor along both axes."""
    if x.data.ndim != 3:
        raise ContractViolation(f"avg_downsample expects C x H x W, got {x.shape}")
    c, h, w = x.data.shape
    if factor < 1 or h % factor or w % factor:
        raise ContractViolation(
            f"spatial dims {h}x{w} are not divisible by downsample factor {factor}"
        )
    f = factor
    out = x.data.reshape(c, h // f, f, w // f, f).mean(axis=(2, 4))
    y = Tensor(out)

    def build():
        def backward(g):
            gx = np.repeat(np.repeat(g, f, axis=1), f, axis=2) / (f * f)
            return (gx.astype(DTYPE),)
        return backward

    return _maybe_record(y, (x,), build)


# ---------------------------------------------------------------------------
# normalization and channel plumbing
# ---------------------------------------------------------------------------

class BatchNormStats:
    """Running per-channel mean/variance used in eval mode."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels, dtype=DTYPE)
        self.var = np.ones(channels, dtype=DTYPE)

    def copy(self) -> "BatchNormStats":
        fresh = BatchNormStats(self.channels)
        fresh.mean = self.mean.copy()
        fresh.var = self.var.copy()
        return fresh

    @property
    def channels(self) -> int:
        return self.mean.shape[0]


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: BatchNormStats,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over the spatial extent of a C x H x W map.

    Train mode normalizes with the current map's statistics and folds them
    into the running stats; eval mode normalizes with the running stats.
    """
    if x.data.ndim != 3:
        raise ContractViolation(f"batch_norm expects C x H x W, got {x.shape}")
    c, h, w = x.data.shape
    if c == 0 or h * w == 0:
        raise ContractViolation("batch_norm on a zero-size channel")
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ContractViolation(
            f"gamma/beta must have shape ({c},), got {gamma.shape} / {beta.shape}"
        )
    if stats.channels != c:
        raise ContractViolation(f"running stats track {stats.channels} channels, input has {c}")
    if mode not in ("train", "eval"):
        raise ContractViolation(f"unknown batch_norm mode {mode!r}")

    if mode == "train":
        mu = x.data.mean(axis=(1, 2))
        var = x.data.var(axis=(1, 2))
        stats.mean = ((1.0 - momentum) * stats.mean + momentum * mu).astype(DTYPE)
        stats.var = ((1.0 - momentum) * stats.var + momentum * var).astype(DTYPE)
    else:
        mu = stats.mean
        var = stats.var

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mu[:, None, None]) * inv_std[:, None, None]
    out = gamma.data[:, None, None] * x_hat + beta.data[:, None, None]
    y = Tensor(out)

    def build():
        train = mode == "train"
        m = h * w

        def backward(g):
            g_gamma = (g * x_hat).sum(axis=(1, 2))
            g_beta = g.sum(axis=(1, 2))
            coef = (gamma.data * inv_std)[:, None, None]
            if train:
                g_x = coef * (
                    g
                    - (g_beta / m)[:, None, None]
                    - x_hat * (g_gamma / m)[:, None, None]
                )
            else:
                g_x = coef * g
            return g_x.astype(DTYPE), g_gamma, g_beta
        return backward

    return _maybe_record(y, (x, gamma, beta), build)


def concat_channels(*tensors: Tensor) -> Tensor:
    """Stack C x H x W maps along the channel axis."""
    if not tensors:
        raise ContractViolation("concat_channels requires at least one tensor")
    spatial = None
    for t in tensors:
        if t.data.ndim != 3:
            raise ContractViolation(f"concat_channels expects C x H x W, got {t.shape}")
        if spatial is None:
            spatial = t.data.shape[1:]
        elif t.data.shape[1:] != spatial:
            raise ContractViolation(
                f"spatial mismatch in concat: {t.data.shape[1:]} vs {spatial}"
            )
    out = Tensor(np.concatenate([t.data for t in tensors], axis=0))

    def build():
        splits = np.cumsum([t.data.shape[0] for t in tensors])[:-1]

        def backward(g):
            return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=0))
        return backward

    return _maybe_record(out, tensors, build)


# ---------------------------------------------------------------------------
# fused classification loss
# ---------------------------------------------------------------------------

def log_softmax_channels(logits: np.ndarray) -> np.ndarray:
    """Numerically stable log-softmax along axis 0 of a C x H x W array."""
    shifted = logits - logits.max(axis=0, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))


def softmax_channels(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def softmax_cross_entropy(
    logits: Tensor,
    labels: np.ndarray,
    class_weights: np.ndarray,
    valid: np.ndarray | None = None,
) -> Tensor:
    """Weighted per-pixel cross entropy, averaged over valid pixels.

    `labels` is an H x W integer mask; pixels where `valid` is False are
    excluded from both the loss and its gradient.
    """
    if logits.data.ndim != 3:
        raise ContractViolation(f"logits must be C x H x W, got {logits.shape}")
    n_classes, h, w = logits.data.shape
    if labels.shape != (h, w):
        raise ContractViolation(f"labels shape {labels.shape} != ({h}, {w})")
    if valid is None:
        valid = np.ones((h, w), dtype=bool)
    labels = labels.astype(np.int64)
    active = labels[valid]
    if active.size and (active.min() < 0 or active.max() >= n_classes):
        raise InputError(
            f"label values must lie in [0, {n_classes}), got range "
            f"[{active.min()}, {active.max()}]"
        )
    if class_weights.shape != (n_classes,):
        raise ContractViolation(f"class_weights shape {class_weights.shape} != ({n_classes},)")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise InputError("no valid pixels for the classification loss")

    logp = log_softmax_channels(logits.data)
    safe_labels = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, safe_labels[None], axis=0)[0]
    pix_w = class_weights[safe_labels] * valid
    loss = -(pix_w * picked).sum(dtype=np.float64) / n_valid
    y = Tensor(np.asarray(loss, dtype=DTYPE))

    def build():
        def backward(g):
            probs = np.exp(logp)
            onehot = np.zeros_like(probs)
            np.put_along_axis(onehot, safe_labels[None], 1.0, axis=0)
            gl = (probs - onehot) * pix_w[None] * (g.reshape(()) / n_valid)
            return (gl.astype(DTYPE),)
        return backward

    return _maybe_record(y, (logits,), build)
