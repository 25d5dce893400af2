"""Networks: topology, initialization, forward/backward, head diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import (
    LayerSpec,
    ShapeError,
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    flatten_backward,
    flatten_forward,
    maxpool2d_backward,
    maxpool2d_forward,
    relu_backward,
    relu_forward,
    softmax_cross_entropy,
)
from .params import FLOAT, ParamMask, ParamVector

INIT_SCHEMES = (
    "he_uniform",
    "he_normal",
    "xavier_uniform",
    "xavier_normal",
    "orthogonal",
    "similar",
)


@dataclass(frozen=True)
class InitScheme:
    """How to draw the initial weights. ``similar`` affects the head only
    (entries uniform on [0.45, 0.55], rows unit-normalized); the body then
    falls back to he_uniform. Biases start at zero under every scheme."""

    scheme: str = "he_uniform"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.scheme not in INIT_SCHEMES:
            raise ValueError(f"unknown init scheme {self.scheme!r}")


@dataclass
class Network:
    """An ordered layer chain plus its flat parameters.

    The head is the final dense layer; the body is everything before it.
    Their segments partition the ParamVector.
    """

    layers: tuple[LayerSpec, ...]
    params: ParamVector
    head_index: int
    # indices into `layers` of the parameterized layers, in segment order
    param_layers: tuple[int, ...] = field(default=())

    @property
    def head_segment(self) -> int:
        """Segment index of the head (always the last segment)."""
        return self.params.n_segments - 1

    @property
    def num_classes(self) -> int:
        return self.layers[self.head_index].fan_out

    def layer_params(self, layer_index: int):
        """(weights view reshaped, bias view or None) of a parameterized layer."""
        seg_idx = self.param_layers.index(layer_index)
        spec = self.layers[layer_index]
        seg = self.params.segment(seg_idx)
        wlen = int(np.prod(spec.weight_shape()))
        w = seg[:wlen].reshape(spec.weight_shape())
        b = seg[wlen:] if spec.has_bias else None
        return w, b

    def head_weights(self) -> np.ndarray:
        w, _ = self.layer_params(self.head_index)
        return w

    def mask_for(self, part: str) -> ParamMask:
        """ParamMask selecting 'body', 'head', or 'full'."""
        n = self.params.n_segments
        if part == "full":
            return ParamMask.full(n)
        if part == "head":
            return ParamMask.only(n, (self.head_segment,))
        if part == "body":
            return ParamMask.excluding(n, (self.head_segment,))
        raise ValueError(f"unknown part {part!r}")

    def with_params(self, params: ParamVector) -> "Network":
        self.params.require_same_segmentation(params)
        return Network(self.layers, params, self.head_index, self.param_layers)


def _segment_bounds(layers: tuple[LayerSpec, ...]) -> tuple[tuple[int, ...], tuple[tuple[int, int], ...]]:
    param_layers = []
    bounds = []
    offset = 0
    for i, spec in enumerate(layers):
        if spec.parameterized:
            param_layers.append(i)
            n = spec.param_count()
            bounds.append((offset, offset + n))
            offset += n
    return tuple(param_layers), tuple(bounds)


def validate_layers(layers: tuple[LayerSpec, ...]) -> None:
    if not layers or layers[-1].kind != "dense":
        raise ShapeError("network must end in exactly one dense layer (the head)")
    # static chain check: dense->dense fans and conv channel chaining
    prev_dense_out = None
    prev_conv_out = None
    for spec in layers:
        if spec.kind == "dense":
            if prev_dense_out is not None and spec.fan_in != prev_dense_out:
                raise ShapeError(
                    f"dense fan_in {spec.fan_in} does not match previous fan_out {prev_dense_out}"
                )
            prev_dense_out = spec.fan_out
            prev_conv_out = None
        elif spec.kind == "conv2d":
            if prev_conv_out is not None and spec.in_channels != prev_conv_out:
                raise ShapeError(
                    f"conv in_channels {spec.in_channels} does not match previous out_channels {prev_conv_out}"
                )
            prev_conv_out = spec.out_channels
            prev_dense_out = None


def _draw_weights(spec: LayerSpec, scheme: str, rng: np.random.Generator) -> np.ndarray:
    shape = spec.weight_shape()
    fan_in = spec.init_fan_in()
    fan_out = spec.init_fan_out()
    gain = np.sqrt(2.0)  # ReLU scaling
    if scheme == "he_uniform":
        a = gain * np.sqrt(3.0 / fan_in)
        return rng.uniform(-a, a, size=shape)
    if scheme == "he_normal":
        sigma = gain * np.sqrt(1.0 / fan_in)
        return rng.normal(0.0, sigma, size=shape)
    if scheme == "xavier_uniform":
        a = gain * np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=shape)
    if scheme == "xavier_normal":
        sigma = gain * np.sqrt(2.0 / (fan_in + fan_out))
        return rng.normal(0.0, sigma, size=shape)
    if scheme == "orthogonal":
        rows = shape[0]
        cols = int(np.prod(shape[1:]))
        flat = rng.normal(0.0, 1.0, size=(max(rows, cols), min(rows, cols)))
        q, r = np.linalg.qr(flat)
        q = q * np.sign(np.diag(r))  # fix the sign ambiguity for determinism
        if rows < cols:
            q = q.T
        return q[:rows, :cols].reshape(shape)
    if scheme == "similar":
        w = rng.uniform(0.45, 0.55, size=(shape[0], int(np.prod(shape[1:]))))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        return w.reshape(shape)
    raise ValueError(f"unknown init scheme {scheme!r}")


def init_network(layers, scheme: InitScheme) -> Network:
    """Build a network with freshly drawn parameters.

    Deterministic for a fixed seed. Biases are zero. Under ``similar``
    only the head weights get the near-parallel rows; body layers use
    he_uniform.
    """
    layers = tuple(layers)
    validate_layers(layers)
    param_layers, bounds = _segment_bounds(layers)
    total = bounds[-1][1] if bounds else 0
    data = np.zeros(total, dtype=FLOAT)
    rng = np.random.default_rng(scheme.seed)
    head_index = len(layers) - 1
    for seg_idx, layer_idx in enumerate(param_layers):
        spec = layers[layer_idx]
        layer_scheme = scheme.scheme
        if scheme.scheme == "similar" and layer_idx != head_index:
            layer_scheme = "he_uniform"
        w = _draw_weights(spec, layer_scheme, rng)
        start, _ = bounds[seg_idx]
        wlen = int(np.prod(spec.weight_shape()))
        data[start : start + wlen] = w.ravel().astype(FLOAT)
        # bias slice stays zero
    params = ParamVector(data, bounds)
    return Network(layers, params, head_index, param_layers)


# --- forward / backward ----------------------------------------------------


def forward(net: Network, batch: np.ndarray):
    """Run the network on a batch; returns (logits, cache).

    The cache holds per-layer records sufficient for backward, plus the
    input to the head (the representation used for template evaluation).
    """
    x = np.asarray(batch)
    if x.dtype != net.params.data.dtype:
        x = x.astype(net.params.data.dtype)
    caches = []
    for i, spec in enumerate(net.layers):
        if spec.kind == "dense":
            if x.ndim != 2 or x.shape[1] != spec.fan_in:
                raise ShapeError(
                    f"layer {i}: dense expects (N, {spec.fan_in}), got {x.shape}"
                )
            w, b = net.layer_params(i)
            x, cache = dense_forward(x, w, b)
        elif spec.kind == "conv2d":
            if x.ndim != 4 or x.shape[1] != spec.in_channels:
                raise ShapeError(
                    f"layer {i}: conv2d expects (N, {spec.in_channels}, H, W), got {x.shape}"
                )
            w, b = net.layer_params(i)
            x, cache = conv2d_forward(x, w, b, spec.padding)
        elif spec.kind == "relu":
            x, cache = relu_forward(x)
        elif spec.kind == "maxpool2d":
            x, cache = maxpool2d_forward(x, spec.window)
        elif spec.kind == "flatten":
            x, cache = flatten_forward(x)
        else:
            raise ShapeError(f"unknown layer kind {spec.kind!r}")
        caches.append(cache)
    return x, (caches, x)


def representations(net: Network, batch: np.ndarray) -> np.ndarray:
    """Inputs to the head: the post-flatten, pre-head activations."""
    x = np.asarray(batch)
    if x.dtype != net.params.data.dtype:
        x = x.astype(net.params.data.dtype)
    for i, spec in enumerate(net.layers[: net.head_index]):
        if spec.kind == "dense":
            w, b = net.layer_params(i)
            x, _ = dense_forward(x, w, b)
        elif spec.kind == "conv2d":
            w, b = net.layer_params(i)
            x, _ = conv2d_forward(x, w, b, spec.padding)
        elif spec.kind == "relu":
            x, _ = relu_forward(x)
        elif spec.kind == "maxpool2d":
            x, _ = maxpool2d_forward(x, spec.window)
        elif spec.kind == "flatten":
            x, _ = flatten_forward(x)
    return x


def backward(net: Network, cache, labels):
    """Softmax cross-entropy loss (mean over the batch) and parameter grads.

    Must be called with the cache of a matching forward; the returned
    gradient vector shares the params' segmentation.
    """
    caches, logits = cache
    loss, gout = softmax_cross_entropy(logits, labels)

    grads = net.params.zeros_like()
    for i in range(len(net.layers) - 1, -1, -1):
        spec = net.layers[i]
        cache = caches[i]
        if spec.kind == "dense":
            w, _ = net.layer_params(i)
            gout, gw, gb = dense_backward(gout, cache, w, spec.has_bias)
            _store_grad(grads, net, i, gw, gb)
        elif spec.kind == "conv2d":
            w, _ = net.layer_params(i)
            gout, gw, gb = conv2d_backward(gout, cache, w, spec.padding, spec.has_bias)
            _store_grad(grads, net, i, gw, gb)
        elif spec.kind == "relu":
            gout = relu_backward(gout, cache)
        elif spec.kind == "maxpool2d":
            gout = maxpool2d_backward(gout, cache)
        elif spec.kind == "flatten":
            gout = flatten_backward(gout, cache)
    return loss, grads


def _store_grad(grads: ParamVector, net: Network, layer_index: int, gw, gb) -> None:
    seg_idx = net.param_layers.index(layer_index)
    seg = grads.segment(seg_idx)
    wlen = gw.size
    seg[:wlen] = gw.ravel()
    if gb is not None:
        seg[wlen:] = gb


# --- diagnostics ------------------------------------------------------------


def head_orthogonality_stats(net: Network) -> tuple[float, float]:
    """(mean, max) absolute pairwise cosine between head weight rows."""
    w = net.head_weights().astype(np.float64)
    c = w.shape[0]
    if c < 2:
        raise ValueError("head needs at least 2 rows for pairwise statistics")
    norms = np.linalg.norm(w, axis=1)
    cos = (w @ w.T) / np.outer(norms, norms)
    iu = np.triu_indices(c, k=1)
    abs_cos = np.abs(cos[iu])
    return float(abs_cos.mean()), float(abs_cos.max())


def segment_cosines(a: ParamVector, b: ParamVector) -> list[float | None]:
    """Cosine similarity per segment; None where a norm is zero.

    Bit-identical segments report exactly 1.0 (their cosine is 1 by
    definition, independent of rounding).
    """
    a.require_same_segmentation(b)
    out: list[float | None] = []
    for i in range(a.n_segments):
        sa = a.segment(i)
        sb = b.segment(i)
        if np.array_equal(sa, sb):
            if not np.any(sa):
                out.append(None)
            else:
                out.append(1.0)
            continue
        xa = sa.astype(np.float64)
        xb = sb.astype(np.float64)
        na = np.linalg.norm(xa)
        nb = np.linalg.norm(xb)
        if na == 0.0 or nb == 0.0:
            out.append(None)
        else:
            out.append(float(np.dot(xa, xb) / (na * nb)))
    return out


def param_distance(a: ParamVector, b: ParamVector, per_layer: bool = False):
    """Global L2 distance, or per-layer cosine similarities when asked."""
    if per_layer:
        return segment_cosines(a, b)
    a.require_same_segmentation(b)
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    return float(np.sqrt(np.dot(diff, diff)))
