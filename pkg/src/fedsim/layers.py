"""Layer specifications and their forward/backward primitives.

All math is plain numpy in the dtype of the incoming arrays (float32 in
production paths). Each forward returns ``(output, cache)`` where the cache
holds exactly what the matching backward needs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """A batch or a layer chain does not fit together."""


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a network: kind plus its dimension fields.

    kinds: dense, conv2d, relu, maxpool2d, flatten. Only dense and conv2d
    carry parameters. A network's final layer must be a single dense layer
    (the head) mapping the representation dimension to the class count.
    """

    kind: str
    fan_in: int = 0  # dense
    fan_out: int = 0  # dense
    in_channels: int = 0  # conv2d
    out_channels: int = 0  # conv2d
    kernel: int = 0  # conv2d, square
    padding: int = 0  # conv2d
    window: int = 0  # maxpool2d, stride == window
    has_bias: bool = True

    @property
    def parameterized(self) -> bool:
        return self.kind in ("dense", "conv2d")

    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "dense":
            return (self.fan_out, self.fan_in)
        if self.kind == "conv2d":
            return (self.out_channels, self.in_channels, self.kernel, self.kernel)
        return ()

    def bias_len(self) -> int:
        if not self.has_bias:
            return 0
        if self.kind == "dense":
            return self.fan_out
        if self.kind == "conv2d":
            return self.out_channels
        return 0

    def param_count(self) -> int:
        return int(np.prod(self.weight_shape(), initial=1)) * (1 if self.parameterized else 0) + self.bias_len()

    def init_fan_in(self) -> int:
        """Fan-in used by the distribution-based initializers."""
        if self.kind == "dense":
            return self.fan_in
        return self.in_channels * self.kernel * self.kernel

    def init_fan_out(self) -> int:
        if self.kind == "dense":
            return self.fan_out
        return self.out_channels * self.kernel * self.kernel


def dense(fan_in: int, fan_out: int, has_bias: bool = True) -> LayerSpec:
    return LayerSpec("dense", fan_in=fan_in, fan_out=fan_out, has_bias=has_bias)


def conv2d(in_channels: int, out_channels: int, kernel: int, padding: int = 0) -> LayerSpec:
    return LayerSpec(
        "conv2d",
        in_channels=in_channels,
        out_channels=out_channels,
        kernel=kernel,
        padding=padding,
    )


def relu() -> LayerSpec:
    return LayerSpec("relu", has_bias=False)


def maxpool2d(window: int = 2) -> LayerSpec:
    return LayerSpec("maxpool2d", window=window, has_bias=False)


def flatten() -> LayerSpec:
    return LayerSpec("flatten", has_bias=False)


# --- shape inference ---------------------------------------------------


def output_shape(spec: LayerSpec, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Per-sample output shape of ``spec`` applied to ``in_shape``."""
    if spec.kind == "dense":
        if in_shape != (spec.fan_in,):
            raise ShapeError(f"dense layer expects ({spec.fan_in},), got {in_shape}")
        return (spec.fan_out,)
    if spec.kind == "conv2d":
        if len(in_shape) != 3 or in_shape[0] != spec.in_channels:
            raise ShapeError(
                f"conv2d expects ({spec.in_channels}, H, W), got {in_shape}"
            )
        h = in_shape[1] + 2 * spec.padding - spec.kernel + 1
        w = in_shape[2] + 2 * spec.padding - spec.kernel + 1
        if h <= 0 or w <= 0:
            raise ShapeError(f"conv2d kernel {spec.kernel} too large for {in_shape}")
        return (spec.out_channels, h, w)
    if spec.kind == "relu":
        return in_shape
    if spec.kind == "maxpool2d":
        if len(in_shape) != 3:
            raise ShapeError(f"maxpool2d expects (C, H, W), got {in_shape}")
        if in_shape[1] % spec.window or in_shape[2] % spec.window:
            raise ShapeError(
                f"maxpool2d window {spec.window} does not divide {in_shape}"
            )
        return (in_shape[0], in_shape[1] // spec.window, in_shape[2] // spec.window)
    if spec.kind == "flatten":
        return (int(np.prod(in_shape)),)
    raise ShapeError(f"unknown layer kind {spec.kind!r}")


def infer_shapes(layers: tuple[LayerSpec, ...], input_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Per-sample shapes after each layer; raises ShapeError on mismatch."""
    shapes = []
    shape = tuple(input_shape)
    for spec in layers:
        shape = output_shape(spec, shape)
        shapes.append(shape)
    return shapes


# --- per-layer forward/backward ------------------------------------------


def dense_forward(x, w, b):
    out = x @ w.T
    if b is not None:
        out = out + b
    return out, x


def dense_backward(gout, cache, w, has_bias):
    x = cache
    gx = gout @ w
    gw = gout.T @ x
    gb = gout.sum(axis=0) if has_bias else None
    return gx, gw, gb


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(gout, mask):
    return gout * mask


def flatten_forward(x):
    return x.reshape(x.shape[0], -1), x.shape


def flatten_backward(gout, shape):
    return gout.reshape(shape)


def conv2d_forward(x, w, b, padding):
    """Stride-1 2-D convolution via an im2col matmul.

    x: (N, Cin, H, W); w: (Cout, Cin, k, k). Cache keeps the column matrix
    for the weight gradient.
    """
    n, _, _, _ = x.shape
    cout, cin, k, _ = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    # windows: (N, Cin, Ho, Wo, k, k) -> cols: (N*Ho*Wo, Cin*k*k)
    ho, wo = windows.shape[2], windows.shape[3]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * ho * wo, cin * k * k
    )
    out = cols @ w.reshape(cout, -1).T
    if b is not None:
        out = out + b
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (cols, x.shape, (n, ho, wo))


def conv2d_backward(gout, cache, w, padding, has_bias):
    cols, padded_shape, (n, ho, wo) = cache
    cout, cin, k, _ = w.shape
    gmat = np.ascontiguousarray(gout.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
    gw = (gmat.T @ cols).reshape(w.shape)
    gb = gmat.sum(axis=0) if has_bias else None
    gcols = gmat @ w.reshape(cout, -1)
    gcols = gcols.reshape(n, ho, wo, cin, k, k)
    gx_padded = np.zeros(padded_shape, dtype=gout.dtype)
    for i in range(k):
        for j in range(k):
            gx_padded[:, :, i : i + ho, j : j + wo] += gcols[:, :, :, :, i, j].transpose(
                0, 3, 1, 2
            )
    if padding:
        gx = gx_padded[:, :, padding:-padding, padding:-padding]
    else:
        gx = gx_padded
    return np.ascontiguousarray(gx), gw, gb


def maxpool2d_forward(x, window):
    n, c, h, w = x.shape
    if h % window or w % window:
        raise ShapeError(f"maxpool2d window {window} does not divide ({h}, {w})")
    ho, wo = h // window, w // window
    tiles = x.reshape(n, c, ho, window, wo, window).transpose(0, 1, 2, 4, 3, 5)
    tiles = tiles.reshape(n, c, ho, wo, window * window)
    arg = tiles.argmax(axis=-1)
    out = np.take_along_axis(tiles, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), (arg, x.shape, window)


def maxpool2d_backward(gout, cache):
    arg, in_shape, window = cache
    n, c, h, w = in_shape
    ho, wo = h // window, w // window
    gtiles = np.zeros((n, c, ho, wo, window * window), dtype=gout.dtype)
    np.put_along_axis(gtiles, arg[..., None], gout[..., None], axis=-1)
    gx = gtiles.reshape(n, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(gx.reshape(in_shape))


def softmax_cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits.

    Labels are class indices in [0, C); raises on out-of-range labels.
    """
    n, c = logits.shape
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"label out of range [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(denom)
    loss = -log_probs[np.arange(n), labels].mean()
    grad = exp / denom
    grad[np.arange(n), labels] -= 1
    grad /= np.asarray(n, dtype=logits.dtype)
    return loss.astype(logits.dtype), grad.astype(logits.dtype, copy=False)
