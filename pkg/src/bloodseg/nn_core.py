"""Minimal dense-prediction kernel: conv, max pooling with indices, unpooling,
ReLU, pixelwise softmax cross-entropy, SGD and finite-difference checks.

Activations are plain float64 numpy arrays in N x C x H x W order. Trainable
parameters are wrapped in :class:`Tensor`, which pairs data with a gradient
buffer.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from safetensors.numpy import load_file, save_file


class ShapeError(ValueError):
    pass


class CorruptedIndicesError(ValueError):
    pass


class InvalidLabelError(ValueError):
    pass


class GradStateError(RuntimeError):
    pass


@dataclass(eq=False)
class Tensor:
    data: np.ndarray
    grad: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise ShapeError(f"grad shape {self.grad.shape} != data shape {self.data.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


@dataclass(eq=False)
class ConvParams:
    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.data.ndim != 4 or min(self.weight.shape) < 1:
            raise ShapeError(f"conv weight must be outC x inC x kH x kW, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match outC={self.weight.shape[0]}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")

    @property
    def tensors(self) -> list[Tensor]:
        return [self.weight, self.bias]


@dataclass(frozen=True)
class PoolIndices:
    """Flat argmax positions (h * W_in + w) per pooled element, plus input dims."""

    flat: np.ndarray
    input_hw: tuple[int, int]

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.flat.shape


def _conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0:
        raise ShapeError(f"kernel {k} larger than padded input {size + 2 * pad}")
    return span // stride + 1


def _check_conv_input(x: np.ndarray, p: ConvParams) -> tuple[int, int]:
    if x.ndim != 4:
        raise ShapeError(f"expected N x C x H x W input, got shape {x.shape}")
    out_c, in_c, kh, kw = p.weight.shape
    if x.shape[1] != in_c:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {in_c}")
    ho = _conv_out_size(x.shape[2], kh, p.stride, p.padding)
    wo = _conv_out_size(x.shape[3], kw, p.stride, p.padding)
    return ho, wo


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Cross-correlation plus bias.

    Accumulates one (outC x inC) matmul per kernel offset instead of building
    a full im2col matrix, which keeps memory flat at 300x300 with 512 channels.
    """
    ho, wo = _check_conv_input(x, p)
    w = p.weight.data
    s = p.stride
    xp = _pad(x, p.padding)
    out = np.zeros((x.shape[0], w.shape[0], ho, wo))
    for i in range(w.shape[2]):
        for j in range(w.shape[3]):
            window = xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
            out += np.einsum("oc,nchw->nohw", w[:, :, i, j], window, optimize=True)
    out += p.bias.data[None, :, None, None]
    return out


def conv2d_backward(
    x: np.ndarray, p: ConvParams, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ho, wo = _check_conv_input(x, p)
    w = p.weight.data
    expected = (x.shape[0], w.shape[0], ho, wo)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output shape {expected}")
    s, pad = p.stride, p.padding
    xp = _pad(x, pad)
    grad_xp = np.zeros_like(xp)
    grad_w = np.zeros_like(w)
    for i in range(w.shape[2]):
        for j in range(w.shape[3]):
            hs = slice(i, i + s * (ho - 1) + 1, s)
            ws = slice(j, j + s * (wo - 1) + 1, s)
            grad_w[:, :, i, j] = np.einsum("nohw,nchw->oc", grad_out, xp[:, :, hs, ws], optimize=True)
            grad_xp[:, :, hs, ws] += np.einsum("oc,nohw->nchw", w[:, :, i, j], grad_out, optimize=True)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    if pad:
        grad_xp = grad_xp[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(grad_xp), grad_w, grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return np.where(x > 0, grad_out, 0.0)


def maxpool2x2(x: np.ndarray) -> tuple[np.ndarray, PoolIndices]:
    """2x2 stride-2 max pooling with floor output size.

    For odd H or W the last row/column is not covered by any window, so
    75 -> 37. Ties resolve to the first element in row-major window order.
    """
    if x.ndim != 4:
        raise ShapeError(f"expected N x C x H x W input, got shape {x.shape}")
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    if ho < 1 or wo < 1:
        raise ShapeError(f"cannot pool a {h}x{w} plane")
    # window position k = 2*dy + dx, row-major, so argmax picks the first max
    windows = (
        x[:, :, : 2 * ho, : 2 * wo]
        .reshape(n, c, ho, 2, wo, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, 4)
    )
    k = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, k[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(ho)[:, None] + k // 2
    cols = 2 * np.arange(wo)[None, :] + k % 2
    return out, PoolIndices(flat=rows * w + cols, input_hw=(h, w))


def maxunpool2x2(x: np.ndarray, idx: PoolIndices) -> np.ndarray:
    if x.shape != idx.output_shape:
        raise ShapeError(f"unpool input shape {x.shape} != recorded pool output {idx.output_shape}")
    n, c = x.shape[:2]
    h, w = idx.input_hw
    flat = idx.flat.reshape(n, c, -1)
    if flat.size and (flat.min() < 0 or flat.max() >= h * w):
        raise CorruptedIndicesError(f"pool indices out of range for a {h}x{w} plane")
    out = np.zeros((n, c, h * w))
    np.put_along_axis(out, flat, x.reshape(n, c, -1), axis=-1)
    return out.reshape(n, c, h, w)


def maxunpool2x2_backward(grad_out: np.ndarray, idx: PoolIndices) -> np.ndarray:
    n, c = grad_out.shape[:2]
    flat = idx.flat.reshape(n, c, -1)
    g = np.take_along_axis(grad_out.reshape(n, c, -1), flat, axis=-1)
    return g.reshape(idx.output_shape)


def maxpool2x2_backward(grad_out: np.ndarray, idx: PoolIndices) -> np.ndarray:
    # scatter to argmax positions is exactly unpooling
    return maxunpool2x2(grad_out, idx)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax over the channel axis (axis 1)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(
    logits: np.ndarray,
    labels: np.ndarray,
    class_weights: Sequence[float] | None = None,
    ignore_id: int | None = None,
) -> tuple[float, np.ndarray]:
    """Mean pixelwise negative log-likelihood and its gradient w.r.t. logits.

    ``labels`` is N x H x W (or H x W when N == 1). With ``class_weights`` the
    loss is the weighted mean: sum(w_y * nll) / sum(w_y).
    """
    if logits.ndim != 4:
        raise ShapeError(f"expected N x K x H x W logits, got {logits.shape}")
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} does not match logits spatial dims {(n, h, w)}")
    labels = labels.astype(np.int64)
    counted = np.ones(labels.shape, dtype=bool) if ignore_id is None else labels != ignore_id
    bad = counted & ((labels < 0) | (labels >= k))
    if bad.any():
        raise InvalidLabelError(f"label ids {sorted(set(labels[bad].tolist()))} outside [0, {k})")

    weights = np.ones(k) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    if weights.shape != (k,):
        raise ValueError(f"expected {k} class weights, got {weights.shape}")
    safe = np.where(counted, labels, 0)
    pix_w = np.where(counted, weights[safe], 0.0)
    norm = pix_w.sum()
    if norm <= 0:
        return 0.0, np.zeros_like(logits)

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    picked = np.take_along_axis(shifted, safe[:, None], axis=1)[:, 0]
    nll = log_z - picked
    loss = float((pix_w * nll).sum() / norm)

    grad = np.exp(shifted - log_z[:, None])
    np.put_along_axis(grad, safe[:, None], np.take_along_axis(grad, safe[:, None], axis=1) - 1.0, axis=1)
    grad *= (pix_w / norm)[:, None]
    return loss, grad


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    params = list(params)
    for t in params:
        if t.grad is None:
            raise GradStateError(f"parameter {t.name or '<unnamed>'} has no gradient buffer")
    for t in params:
        t.data -= lr * t.grad
        t.grad[...] = 0.0


def gradient_check(
    f: Callable[[], float],
    x: np.ndarray,
    analytic: np.ndarray,
    step: float = 1e-5,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max of |analytic - central difference| / max(1, |analytic|, |difference|).

    ``f`` is evaluated after perturbing ``x`` in place, so it must read ``x``
    (or a parameter tensor aliasing it). With ``max_elements`` a random subset
    of coordinates is probed instead of every element.
    """
    flat = x.reshape(-1)
    ana = np.asarray(analytic).reshape(-1)
    coords = np.arange(flat.size)
    if max_elements is not None and flat.size > max_elements:
        rng = rng if rng is not None else np.random.default_rng(0)
        coords = rng.choice(flat.size, size=max_elements, replace=False)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        num = (fp - fm) / (2 * step)
        err = abs(ana[i] - num) / max(1.0, abs(ana[i]), abs(num))
        worst = max(worst, err)
    return worst


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float64 arrays as a safetensors container.

    The layout is a length-prefixed JSON header with name, shape and offsets,
    followed by row-major little-endian data; output depends only on inputs.
    """
    arrays = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in tensors.items()}
    metadata = None if meta is None else {"meta": json.dumps(meta, sort_keys=True)}
    save_file(arrays, str(path), metadata=metadata)


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict | None]:
    from safetensors import safe_open

    with safe_open(str(path), framework="numpy") as fh:
        md = fh.metadata()
    meta = json.loads(md["meta"]) if md and "meta" in md else None
    return load_file(str(path)), meta
