"""Layer specifications and their forward/backward kernels (NCHW layout)."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError

CONV2D = "Conv2D"
MAXPOOL2D = "MaxPool2D"
DENSE = "Dense"
RELU = "ReLU"
DROPOUT = "Dropout"
SOFTMAX = "Softmax"
KINDS = (CONV2D, MAXPOOL2D, DENSE, RELU, DROPOUT, SOFTMAX)
PARAMETRIC = (CONV2D, DENSE)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    units: int = 0
    in_features: Optional[int] = None
    rate: float = 0.0

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v not in (None,)}


def conv2d(out_channels: int, kernel: int, stride: int = 1, padding: int = 0) -> LayerSpec:
    return LayerSpec(CONV2D, out_channels=out_channels, kernel=kernel, stride=stride, padding=padding)


def maxpool2d(size: int = 2, stride: Optional[int] = None) -> LayerSpec:
    return LayerSpec(MAXPOOL2D, kernel=size, stride=stride or size)


def dense(units: int, in_features: Optional[int] = None) -> LayerSpec:
    return LayerSpec(DENSE, units=units, in_features=in_features)


def relu() -> LayerSpec:
    return LayerSpec(RELU)


def dropout(rate: float) -> LayerSpec:
    return LayerSpec(DROPOUT, rate=rate)


def softmax() -> LayerSpec:
    return LayerSpec(SOFTMAX)


def output_shape(index: int, spec: LayerSpec, in_shape: tuple) -> tuple:
    """Shape (without batch axis) produced by ``spec`` given ``in_shape``."""
    kind = spec.kind
    if kind not in KINDS:
        raise ShapeError(index, kind, "unknown layer kind")
    if kind in (CONV2D, MAXPOOL2D):
        if len(in_shape) != 3:
            raise ShapeError(index, kind, f"expects a CxHxW input, got {in_shape}")
        c, h, w = in_shape
        k, s = spec.kernel, spec.stride
        pad = spec.padding if kind == CONV2D else 0
        if k <= 0 or s <= 0:
            raise ShapeError(index, kind, "kernel and stride must be positive")
        if h + 2 * pad < k or w + 2 * pad < k:
            raise ShapeError(index, kind, f"kernel {k} larger than input {h}x{w}")
        ho = (h + 2 * pad - k) // s + 1
        wo = (w + 2 * pad - k) // s + 1
        if kind == CONV2D:
            if spec.out_channels <= 0:
                raise ShapeError(index, kind, "out_channels must be positive")
            return (spec.out_channels, ho, wo)
        return (c, ho, wo)
    if kind == DENSE:
        flat = int(np.prod(in_shape))
        if spec.units <= 0:
            raise ShapeError(index, kind, "units must be positive")
        if spec.in_features is not None and spec.in_features != flat:
            raise ShapeError(
                index, kind,
                f"declared in_features={spec.in_features} but predecessor yields {flat}",
            )
        return (spec.units,)
    if kind == DROPOUT and not 0.0 <= spec.rate < 1.0:
        raise ShapeError(index, kind, f"dropout rate {spec.rate} outside [0, 1)")
    if kind == SOFTMAX and len(in_shape) != 1:
        raise ShapeError(index, kind, f"softmax expects a flat input, got {in_shape}")
    return tuple(in_shape)


def param_shapes(spec: LayerSpec, in_shape: tuple) -> list:
    """Weight and bias shapes, or [] for stateless layers."""
    if spec.kind == CONV2D:
        c = in_shape[0]
        k = spec.kernel
        return [(spec.out_channels, c, k, k), (spec.out_channels,)]
    if spec.kind == DENSE:
        return [(int(np.prod(in_shape)), spec.units), (spec.units,)]
    return []


def glorot_limit(spec: LayerSpec, weight_shape: tuple) -> float:
    if spec.kind == CONV2D:
        o, c, k, _ = weight_shape
        fan_in, fan_out = c * k * k, o * k * k
    else:
        fan_in, fan_out = weight_shape
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


# -- kernels -------------------------------------------------------------------
# Each forward returns (output, cache); each backward returns (dx, [dW, db] or []).


def _windows(x: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::s, ::s][:, :, :ho, :wo]


def conv_forward(spec: LayerSpec, weight, bias, x):
    n, c, h, w = x.shape
    k, s, p = spec.kernel, spec.stride, spec.padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    cols = _windows(xp, k, s, ho, wo).transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    out = cols @ weight.reshape(weight.shape[0], -1).T + bias
    out = out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (x.shape, cols, ho, wo)


def conv_backward(spec: LayerSpec, weight, cache, dout):
    (n, c, h, w), cols, ho, wo = cache
    k, s, p = spec.kernel, spec.stride, spec.padding
    o = weight.shape[0]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dweight = (d2.T @ cols).reshape(weight.shape)
    dbias = d2.sum(axis=0)
    dcols = (d2 @ weight.reshape(o, -1)).reshape(n, ho, wo, c, k, k)
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
    return dx, [dweight, dbias]


def maxpool_forward(spec: LayerSpec, x):
    n, c, h, w = x.shape
    k, s = spec.kernel, spec.stride
    ho = (h - k) // s + 1
    wo = (w - k) // s + 1
    win = _windows(x, k, s, ho, wo).reshape(n, c, ho, wo, k * k)
    # argmax picks the first maximal element: deterministic tie routing
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool_backward(spec: LayerSpec, cache, dout):
    shape, idx = cache
    k, s = spec.kernel, spec.stride
    ho, wo = idx.shape[2:]
    dx = np.zeros(shape, dtype=dout.dtype)
    for q in range(k * k):
        di, dj = divmod(q, k)
        dx[:, :, di:di + s * ho:s, dj:dj + s * wo:s] += np.where(idx == q, dout, 0)
    return dx, []


def dense_forward(weight, bias, x):
    flat = x.reshape(x.shape[0], -1)
    return flat @ weight + bias, (x.shape, flat)


def dense_backward(weight, cache, dout):
    shape, flat = cache
    return (dout @ weight.T).reshape(shape), [flat.T @ dout, dout.sum(axis=0)]


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
