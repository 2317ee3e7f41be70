"""Differentiable primitives used by the layer zoo.

Every operation takes plain :class:`~lesionnet.tensor.Tensor` operands and an
optional ``tape``.  Without a tape the result is a constant; with one, the
operation is recorded together with the activations its backward pass needs.
Convolution is cross-correlation with zero padding.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, log_softmax

from .errors import ShapeError
from .tensor import Tape, Tensor, emit

IntPair = Union[int, Tuple[int, int]]

BN_MOMENTUM = 0.1
BN_EPSILON = 1e-5


def pair(value: IntPair) -> Tuple[int, int]:
    if isinstance(value, (int, np.integer)):
        return int(value), int(value)
    first, second = value
    return int(first), int(second)


def _require_ndim(tensor: Tensor, ndim: int, label: str) -> None:
    if tensor.ndim != ndim:
        raise ShapeError(f"{label} must be {ndim}-dimensional, got shape {tensor.shape}")


def _require_same_precision(*tensors: Tensor) -> None:
    precisions = {t.precision for t in tensors}
    if len(precisions) > 1:
        raise ValueError(f"Operands mix precisions: {', '.join(sorted(precisions))}")


def _windows(padded: np.ndarray, kernel: Tuple[int, int], stride: Tuple[int, int], out_hw: Tuple[int, int]) -> np.ndarray:
    """View of shape (N, C, Ho, Wo, Kh, Kw) over a padded NCHW array."""

    view = sliding_window_view(padded, kernel, axis=(2, 3))
    return view[:, :, :: stride[0], :: stride[1]][:, :, : out_hw[0], : out_hw[1]]


def _scatter_windows(
    grad_windows: np.ndarray,
    padded_shape: Tuple[int, ...],
    stride: Tuple[int, int],
) -> np.ndarray:
    """Adjoint of :func:`_windows`: sum window gradients back onto the padded grid."""

    _, _, out_h, out_w, kh, kw = grad_windows.shape
    sh, sw = stride
    result = np.zeros(padded_shape, dtype=grad_windows.dtype)
    for i in range(kh):
        for j in range(kw):
            result[:, :, i : i + sh * (out_h - 1) + 1 : sh, j : j + sw * (out_w - 1) + 1 : sw] += grad_windows[
                :, :, :, :, i, j
            ]
    return result


def conv_output_size(size: int, kernel: int, stride: int, padding: int, axis: str = "height") -> int:
    span = size + 2 * padding - kernel
    if span < 0:
        raise ShapeError(f"kernel {axis} {kernel} exceeds padded input {axis} {size + 2 * padding}")
    return span // stride + 1


# --------------------------------------------------------------------------- conv / dense


def conv2d(
    x: Tensor,
    weight: Tensor,
    stride: IntPair = 1,
    padding: IntPair = 0,
    groups: int = 1,
    tape: Optional[Tape] = None,
) -> Tensor:
    """Grouped 2-D cross-correlation of ``x`` [N,Cin,H,W] with ``weight`` [Cout,Cin/g,Kh,Kw]."""

    _require_ndim(x, 4, "conv2d input")
    _require_ndim(weight, 4, "conv2d weight")
    _require_same_precision(x, weight)
    n, cin, h, w = x.shape
    cout, cin_per_group, kh, kw = weight.shape
    sh, sw = pair(stride)
    ph, pw = pair(padding)
    if groups < 1 or cin % groups or cout % groups:
        raise ShapeError(
            f"groups={groups} must divide input channels ({cin}) and output channels ({cout})"
        )
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise ShapeError(f"invalid stride {stride} or padding {padding}")
    if cin_per_group != cin // groups:
        raise ShapeError(
            f"input channels: weight expects {cin_per_group} per group, input provides {cin // groups}"
        )
    out_h = conv_output_size(h, kh, sh, ph, "height")
    out_w = conv_output_size(w, kw, sw, pw, "width")

    padded = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    windows = _windows(padded, (kh, kw), (sh, sw), (out_h, out_w))
    out_per_group = cout // groups

    if groups == 1:
        out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        grouped_windows = grouped_weight = None
    else:
        grouped_windows = windows.reshape(n, groups, cin_per_group, out_h, out_w, kh, kw)
        grouped_weight = weight.data.reshape(groups, out_per_group, cin_per_group, kh, kw)
        out = np.einsum("ngchwij,gocij->ngohw", grouped_windows, grouped_weight, optimize=True)
        out = out.reshape(n, cout, out_h, out_w)
    out = np.ascontiguousarray(out, dtype=x.data.dtype)

    def backward(grad: np.ndarray) -> List[np.ndarray]:
        if groups == 1:
            grad_weight = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))
            grad_windows = np.tensordot(grad, weight.data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
        else:
            grouped_grad = grad.reshape(n, groups, out_per_group, out_h, out_w)
            grad_weight = np.einsum(
                "ngohw,ngchwij->gocij", grouped_grad, grouped_windows, optimize=True
            ).reshape(weight.shape)
            grad_windows = np.einsum(
                "ngohw,gocij->ngchwij", grouped_grad, grouped_weight, optimize=True
            ).reshape(n, cin, out_h, out_w, kh, kw)
        grad_padded = _scatter_windows(grad_windows, padded.shape, (sh, sw))
        grad_x = grad_padded[:, :, ph : ph + h, pw : pw + w]
        return [np.ascontiguousarray(grad_x), np.ascontiguousarray(grad_weight)]

    return emit(tape, "conv2d", (x, weight), out, backward)


def dense(x: Tensor, weight: Tensor, bias: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Affine map ``x @ weight + bias`` for ``x`` [N,F], ``weight`` [F,O], ``bias`` [O]."""

    _require_ndim(x, 2, "dense input")
    _require_ndim(weight, 2, "dense weight")
    _require_ndim(bias, 1, "dense bias")
    _require_same_precision(x, weight, bias)
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"inner dimensions differ: input has {x.shape[1]} features, weight expects {weight.shape[0]}")
    if bias.shape[0] != weight.shape[1]:
        raise ShapeError(f"bias has {bias.shape[0]} entries, weight produces {weight.shape[1]} outputs")

    out = x.data @ weight.data + bias.data

    def backward(grad: np.ndarray) -> List[np.ndarray]:
        return [grad @ weight.data.T, x.data.T @ grad, grad.sum(axis=0)]

    return emit(tape, "dense", (x, weight, bias), out, backward)


# --------------------------------------------------------------------------- elementwise


def relu(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.data.dtype)

    def backward(grad: np.ndarray) -> List[np.ndarray]:
        return [grad * mask]

    return emit(tape, "relu", (x,), out, backward)


def sigmoid(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    out = expit(x.data)

    def backward(grad: np.ndarray) -> List[np.ndarray]:
        return [grad * out * (1 - out)]

    return emit(tape, "sigmoid", (x,), out, backward)


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ, {a.shape} vs {b.shape}")
    _require_same_precision(a, b)


def add(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    _require_same_shape(a, b, "add")

    def backward(grad: np.ndarray) -> List[np.ndarray]:
        return [grad, grad]

    return emit(tape, "add", (a, b), a.data + b.data, backward)


def mul(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    _require_same_shape(a, b, "mul")

    def backward(grad: np.ndarray) -> List[np.ndarray]:
        return [grad * b.data, grad * a.data]

    return emit(tape, "mul", (a, b), a.data * b.data, backward)


def scale(x: Tensor, factor: Union[float, Tensor], tape: Optional[Tape] = None) -> Tensor:
    """Multiply by a scalar, or by a [1] / [C] tensor broadcast over the channel axis."""

    if not isinstance(factor, Tensor):
        value = float(factor)

        def backward_const(grad: np.ndarray) -> List[np.ndarray]:
            return [grad * value]

        return emit(tape, "scale", (x,), (x.data * value).astype(x.data.dtype), backward_const)

    _require_same_precision(x, factor)
    if factor.ndim != 1 or (factor.shape[0] != 1 and (x.ndim < 2 or factor.shape[0] != x.shape[1])):
        raise ShapeError(f"scale factor of shape {factor.shape} does not broadcast over input {x.shape}")
    view_shape = [1] * x.ndim
    if factor.shape[0] != 1:
        view_shape[1] = factor.shape[0]
    factor_view = factor.data.reshape(view_shape)
    reduce_axes = tuple(i for i in range(x.ndim) if view_shape[i] == 1)

    def backward(grad: np.ndarray) -> List[np.ndarray]:
        grad_factor = (grad * x.data).sum(axis=reduce_axes).reshape(factor.shape)
        return [grad * factor_view, grad_factor]

    return emit(tape, "scale", (x, factor), x.data * factor_view, backward)


def elementwise(kind: str, *operands, tape: Optional[Tape] = None) -> Tensor:
    """Dispatch ``relu``, ``sigmoid``, ``add``, ``mul`` or ``scale`` by name."""

    table = {"relu": relu, "sigmoid": sigmoid, "add": add, "mul": mul, "scale": scale}
    try:
        fn = table[kind]
    except KeyError as exc:
        raise ValueError(f"Unsupported elementwise kind '{kind}'. Choose from {', '.join(table)}.") from exc
    return fn(*operands, tape=tape)


def reshape(x: Tensor, shape: Sequence[int], tape: Optional[Tape] = None) -> Tensor:
    out = x.data.reshape(tuple(shape))

    def backward(grad: np.ndarray) -> List[np.ndarray]:
        return [grad.reshape(x.shape)]

    return emit(tape, "reshape", (x,), out, backward)


def reduce_sum(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward(grad: np.ndarray) -> List[np.ndarray]:
        return [np.broadcast_to(grad, x.shape).copy()]

    return emit(tape, "reduce_sum", (x,), out, backward)


# --------------------------------------------------------------------------- pooling / resampling


def pool_output_size(size: int, kernel: int, stride: int, padding: int, ceil_mode: bool, axis: str = "height") -> int:
    span = size + 2 * padding - kernel
    if span < 0:
        if not ceil_mode:
            raise ShapeError(f"pooling window {axis} {kernel} exceeds padded input {axis} {size + 2 * padding}")
        return 1
    if not ceil_mode:
        return span // stride + 1
    out = -(-span // stride) + 1
    # the last window has to start inside the input or its leading padding
    if (out - 1) * stride >= size + padding:
        out -= 1
    return out


def pool2d(
    x: Tensor,
    kind: str,
    window: IntPair = 2,
    stride: Optional[IntPair] = None,
    padding: IntPair = 0,
    ceil_mode: bool = False,
    tape: Optional[Tape] = None,
) -> Tensor:
    """Max, average or global-average pooling over the spatial axes of ``x``."""

    _require_ndim(x, 4, "pool2d input")
    n, c, h, w = x.shape
    if kind == "global_avg":
        out = x.data.mean(axis=(2, 3), keepdims=True)

        def backward_global(grad: np.ndarray) -> List[np.ndarray]:
            return [np.broadcast_to(grad / (h * w), x.shape).astype(x.data.dtype)]

        return emit(tape, "global_avg_pool", (x,), out, backward_global)
    if kind not in ("max", "avg"):
        raise ValueError(f"Unsupported pooling kind '{kind}'. Choose from max, avg, global_avg.")

    kh, kw = pair(window)
    sh, sw = pair(stride if stride is not None else window)
    ph, pw = pair(padding)
    out_h = pool_output_size(h, kh, sh, ph, ceil_mode, "height")
    out_w = pool_output_size(w, kw, sw, pw, ceil_mode, "width")
    extra_h = max(0, (out_h - 1) * sh + kh - h - ph)
    extra_w = max(0, (out_w - 1) * sw + kw - w - pw)
    pad_spec = ((0, 0), (0, 0), (ph, extra_h), (pw, extra_w))

    if kind == "max":
        padded = np.pad(x.data, pad_spec, constant_values=-np.inf)
        windows = _windows(padded, (kh, kw), (sh, sw), (out_h, out_w)).reshape(n, c, out_h, out_w, kh * kw)
        argmax = windows.argmax(axis=-1)[..., None]
        out = np.take_along_axis(windows, argmax, axis=-1)[..., 0]

        def backward_max(grad: np.ndarray) -> List[np.ndarray]:
            grad_windows = np.zeros((n, c, out_h, out_w, kh * kw), dtype=grad.dtype)
            np.put_along_axis(grad_windows, argmax, grad[..., None], axis=-1)
            grad_padded = _scatter_windows(grad_windows.reshape(n, c, out_h, out_w, kh, kw), padded.shape, (sh, sw))
            return [np.ascontiguousarray(grad_padded[:, :, ph : ph + h, pw : pw + w])]

        return emit(tape, "max_pool", (x,), np.ascontiguousarray(out), backward_max)

    padded = np.pad(x.data, pad_spec)
    valid = np.pad(np.ones((1, 1, h, w), dtype=x.data.dtype), pad_spec)
    counts = _windows(valid, (kh, kw), (sh, sw), (out_h, out_w)).sum(axis=(-2, -1))
    out = _windows(padded, (kh, kw), (sh, sw), (out_h, out_w)).sum(axis=(-2, -1)) / counts

    def backward_avg(grad: np.ndarray) -> List[np.ndarray]:
        share = (grad / counts)[..., None, None]
        grad_windows = np.broadcast_to(share, (n, c, out_h, out_w, kh, kw))
        grad_padded = _scatter_windows(grad_windows, padded.shape, (sh, sw))
        return [np.ascontiguousarray(grad_padded[:, :, ph : ph + h, pw : pw + w])]

    return emit(tape, "avg_pool", (x,), out.astype(x.data.dtype), backward_avg)


def upsample_nearest(x: Tensor, target: IntPair, tape: Optional[Tape] = None) -> Tensor:
    """Nearest-neighbour replication of ``x`` [N,C,h,w] up to ``target`` (height, width)."""

    _require_ndim(x, 4, "upsample input")
    _, _, h, w = x.shape
    th, tw = pair(target)
    if th < h or tw < w:
        raise ShapeError(f"upsample target {th}x{tw} is smaller than input {h}x{w}")
    rows = (np.arange(th) * h) // th
    cols = (np.arange(tw) * w) // tw
    out = x.data[:, :, rows][:, :, :, cols]
    row_starts = np.searchsorted(rows, np.arange(h))
    col_starts = np.searchsorted(cols, np.arange(w))

    def backward(grad: np.ndarray) -> List[np.ndarray]:
        summed = np.add.reduceat(grad, row_starts, axis=2)
        return [np.add.reduceat(summed, col_starts, axis=3)]

    return emit(tape, "upsample_nearest", (x,), np.ascontiguousarray(out), backward)


# --------------------------------------------------------------------------- normalization / loss


@dataclass
class RunningStats:
    """Non-learnable batch-norm statistics, updated in train mode."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype: np.dtype = np.dtype(np.float32)) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: RunningStats,
    mode: str = "train",
    epsilon: float = BN_EPSILON,
    momentum: float = BN_MOMENTUM,
    tape: Optional[Tape] = None,
) -> Tensor:
    """Per-channel normalization of ``x`` [N,C,H,W].

    Train mode normalizes with batch statistics and moves ``running`` towards
    them by ``momentum`` (unbiased variance); infer mode uses ``running``.
    """

    _require_ndim(x, 4, "batchnorm input")
    _require_same_precision(x, gamma, beta)
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(
            f"batchnorm expects gamma/beta of shape ({channels},), got {gamma.shape} and {beta.shape}"
        )
    if running.mean.shape != (channels,):
        raise ShapeError(f"running statistics have {running.mean.shape[0]} channels, input has {channels}")
    if mode not in ("train", "infer"):
        raise ValueError(f"Unsupported batchnorm mode '{mode}'. Choose from train, infer.")

    axes = (0, 2, 3)
    view = (1, channels, 1, 1)
    dtype = x.data.dtype
    if mode == "train":
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = x.size // channels
        unbiased = var * (count / max(count - 1, 1))
        running.mean = ((1 - momentum) * running.mean + momentum * mean).astype(dtype)
        running.var = ((1 - momentum) * running.var + momentum * unbiased).astype(dtype)
    else:
        mean = running.mean.astype(dtype)
        var = running.var.astype(dtype)

    inv_std = (1.0 / np.sqrt(var + epsilon)).astype(dtype)
    normalized = (x.data - mean.reshape(view)) * inv_std.reshape(view)
    out = normalized * gamma.data.reshape(view) + beta.data.reshape(view)

    def backward(grad: np.ndarray) -> List[np.ndarray]:
        grad_gamma = (grad * normalized).sum(axis=axes)
        grad_beta = grad.sum(axis=axes)
        grad_normalized = grad * gamma.data.reshape(view)
        if mode == "infer":
            return [grad_normalized * inv_std.reshape(view), grad_gamma, grad_beta]
        count = x.size // channels
        grad_x = (
            count * grad_normalized
            - grad_normalized.sum(axis=axes).reshape(view)
            - normalized * (grad_normalized * normalized).sum(axis=axes).reshape(view)
        ) * (inv_std.reshape(view) / count)
        return [grad_x, grad_gamma, grad_beta]

    return emit(tape, "batchnorm", (x, gamma, beta), out.astype(dtype), backward)


def softmax_cross_entropy(
    logits: Tensor,
    labels: Sequence[int],
    tape: Optional[Tape] = None,
) -> Tuple[Tensor, Tensor]:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``).

    Returns the scalar loss and the (untracked) class probabilities.
    """

    _require_ndim(logits, 2, "logits")
    n, classes = logits.shape
    targets = np.asarray(labels, dtype=np.int64).reshape(-1)
    if targets.shape[0] != n:
        raise ShapeError(f"{targets.shape[0]} labels given for {n} rows of logits")
    bad = np.flatnonzero((targets < 0) | (targets >= classes))
    if bad.size:
        raise ValueError(f"label {int(targets[bad[0]])} at row {int(bad[0])} is outside [0, {classes})")

    log_probs = log_softmax(logits.data, axis=1)
    probs = np.exp(log_probs)
    rows = np.arange(n)
    loss = np.asarray(-log_probs[rows, targets].mean(), dtype=logits.data.dtype)

    def backward(grad: np.ndarray) -> List[np.ndarray]:
        delta = probs.copy()
        delta[rows, targets] -= 1
        return [(grad * delta / n).astype(logits.data.dtype)]

    return emit(tape, "softmax_cross_entropy", (logits,), loss, backward), Tensor(probs)


__all__ = [
    "RunningStats",
    "add",
    "batchnorm",
    "conv2d",
    "conv_output_size",
    "dense",
    "elementwise",
    "mul",
    "pair",
    "pool2d",
    "pool_output_size",
    "reduce_sum",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "softmax_cross_entropy",
    "upsample_nearest",
]
