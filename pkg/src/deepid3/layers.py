"""Forward and backward passes for every layer kind used by the networks.

All activations are single images in channels-first ``[C, H, W]`` layout.
Convolution is cross-correlation (no kernel flip). Each ``*_backward``
returns exact gradients of the matching forward map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ShapeError
from .tensor import Rng, as_tensor, init_he


def _out_extent(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be positive, got {getattr(self, name)}")
        if self.pad < 0:
            raise ShapeError(f"pad must be non-negative, got {self.pad}")

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)

    @property
    def fan_in(self):
        return self.in_channels * self.kernel_h * self.kernel_w

    def output_shape(self, h, w):
        oh = _out_extent(h, self.kernel_h, self.stride, self.pad)
        ow = _out_extent(w, self.kernel_w, self.stride, self.pad)
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"kernel {self.kernel_h}x{self.kernel_w} (pad {self.pad}, stride {self.stride}) "
                f"does not fit input {h}x{w}"
            )
        return (self.out_channels, oh, ow)

    def num_params(self, h=None, w=None):
        return self.out_channels * (self.fan_in + 1)


@dataclass(frozen=True)
class LocalSpec(ConvSpec):
    """Convolution geometry with an unshared weight bank per output location.

    Weights have shape ``[out_h, out_w, out_channels, in_channels, kh, kw]``
    and biases ``[out_channels, out_h, out_w]``.
    """

    in_h: int = 1
    in_w: int = 1

    def __post_init__(self):
        super().__post_init__()
        self.output_shape(self.in_h, self.in_w)

    @property
    def out_hw(self):
        _, oh, ow = self.output_shape(self.in_h, self.in_w)
        return oh, ow

    @property
    def weight_shape(self):
        oh, ow = self.out_hw
        return (oh, ow, self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)

    @property
    def bias_shape(self):
        oh, ow = self.out_hw
        return (self.out_channels, oh, ow)

    def num_params(self, h=None, w=None):
        oh, ow = self.out_hw
        return oh * ow * self.out_channels * (self.fan_in + 1)


@dataclass(frozen=True)
class InceptionSpec:
    in_channels: int
    b1: int
    b3_reduce: int
    b3: int
    b5_reduce: int
    b5: int
    pool_proj: int

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 1:
                raise ShapeError(f"inception {name} must be positive, got {value}")

    @property
    def out_channels(self):
        return self.b1 + self.b3 + self.b5 + self.pool_proj

    def convs(self):
        """Name -> ConvSpec for the six convolutions in the block."""
        c = self.in_channels
        return {
            "b1": ConvSpec(c, self.b1, 1, 1),
            "b3r": ConvSpec(c, self.b3_reduce, 1, 1),
            "b3": ConvSpec(self.b3_reduce, self.b3, 3, 3, 1, 1),
            "b5r": ConvSpec(c, self.b5_reduce, 1, 1),
            "b5": ConvSpec(self.b5_reduce, self.b5, 5, 5, 1, 2),
            "pp": ConvSpec(c, self.pool_proj, 1, 1),
        }

    def num_params(self, h=None, w=None):
        return sum(s.num_params() for s in self.convs().values())


def _check_input(x, channels, what):
    if x.ndim != 3 or x.shape[0] != channels:
        raise ShapeError(f"{what}: input shape {x.shape} does not match {channels} channels [C,H,W]")


# ---------------------------------------------------------------------------
# convolution


def conv2d_forward(input, spec: ConvSpec, weights, bias):
    return _conv_forward(input, spec, weights, bias)[0]


def _conv_forward(x, spec, weights, bias):
    x = as_tensor(x)
    _check_input(x, spec.in_channels, "conv2d")
    if weights.shape != spec.weight_shape:
        raise ShapeError(f"conv2d: weight shape {weights.shape} does not match expected {spec.weight_shape}")
    if bias.shape != (spec.out_channels,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match expected {(spec.out_channels,)}")
    co, oh, ow = spec.output_shape(x.shape[1], x.shape[2])
    cols = kernels.im2col(x, spec.kernel_h, spec.kernel_w, spec.stride, spec.pad)
    out = weights.reshape(co, -1) @ cols + bias[:, None]
    return out.reshape(co, oh, ow), cols


def conv2d_backward(input, spec: ConvSpec, weights, grad_out, cols=None):
    """Returns ``(grad_input, grad_weights, grad_bias)``."""
    x = as_tensor(input)
    _check_input(x, spec.in_channels, "conv2d_backward")
    expected = spec.output_shape(x.shape[1], x.shape[2])
    if grad_out.shape != expected:
        raise ShapeError(f"conv2d_backward: grad_out shape {grad_out.shape} does not match output {expected}")
    if cols is None:
        cols = kernels.im2col(x, spec.kernel_h, spec.kernel_w, spec.stride, spec.pad)
    g = grad_out.reshape(spec.out_channels, -1)
    grad_w = (g @ cols.T).reshape(spec.weight_shape)
    grad_b = g.sum(axis=1)
    dcols = np.ascontiguousarray(weights.reshape(spec.out_channels, -1).T @ g)
    grad_in = kernels.col2im(dcols, x.shape[0], x.shape[1], x.shape[2],
                             spec.kernel_h, spec.kernel_w, spec.stride, spec.pad)
    return grad_in, grad_w, grad_b


# ---------------------------------------------------------------------------
# max pooling


def maxpool2d(input, window: int, stride: int, pad: int = 0):
    """Per-window maxima and the flat ``y*W + x`` index of each winner.

    Padding cells act as ``-inf`` and are never selected.
    """
    x = as_tensor(input)
    if x.ndim != 3:
        raise ShapeError(f"maxpool2d: expected [C,H,W], got {x.shape}")
    if window < 1 or stride < 1:
        raise ShapeError("maxpool2d: window and stride must be positive")
    if pad >= window:
        raise ShapeError(f"maxpool2d: pad {pad} must be smaller than window {window}")
    _, h, w = x.shape
    if window > h + 2 * pad or window > w + 2 * pad:
        raise ShapeError(f"maxpool2d: window {window} exceeds input extent {h}x{w}")
    return kernels.maxpool_forward(x, window, stride, pad)


def maxpool2d_backward(grad_out, argmax, input_shape):
    if grad_out.shape != argmax.shape:
        raise ShapeError(f"maxpool2d_backward: grad_out {grad_out.shape} vs argmax {argmax.shape}")
    _, h, w = input_shape
    return kernels.maxpool_backward(as_tensor(grad_out), argmax, h, w)


# ---------------------------------------------------------------------------
# locally connected


def locally_connected_forward(input, spec: LocalSpec, weights, bias):
    return _local_forward(input, spec, weights, bias)[0]


def _local_forward(x, spec, weights, bias):
    x = as_tensor(x)
    _check_input(x, spec.in_channels, "locally_connected")
    if x.shape[1:] != (spec.in_h, spec.in_w):
        raise ShapeError(f"locally_connected: input {x.shape} does not match spec extent {(spec.in_h, spec.in_w)}")
    if weights.shape != spec.weight_shape:
        raise ShapeError(f"locally_connected: weight shape {weights.shape} does not match expected {spec.weight_shape}")
    if bias.shape != spec.bias_shape:
        raise ShapeError(f"locally_connected: bias shape {bias.shape} does not match expected {spec.bias_shape}")
    oh, ow = spec.out_hw
    cols = kernels.im2col(x, spec.kernel_h, spec.kernel_w, spec.stride, spec.pad)  # [K, L]
    wl = weights.reshape(oh * ow, spec.out_channels, -1)  # [L, Co, K]
    out = np.matmul(wl, cols.T[:, :, None])[:, :, 0].T + bias.reshape(spec.out_channels, -1)
    return out.reshape(spec.out_channels, oh, ow), cols


def locally_connected_backward(input, spec: LocalSpec, weights, grad_out, cols=None):
    """Returns ``(grad_input, grad_weights, grad_bias)``."""
    x = as_tensor(input)
    if grad_out.shape != spec.bias_shape:
        raise ShapeError(f"locally_connected_backward: grad_out {grad_out.shape} vs output {spec.bias_shape}")
    if cols is None:
        cols = kernels.im2col(x, spec.kernel_h, spec.kernel_w, spec.stride, spec.pad)
    oh, ow = spec.out_hw
    g = grad_out.reshape(spec.out_channels, -1)  # [Co, L]
    grad_w = (g.T[:, :, None] * cols.T[:, None, :]).reshape(spec.weight_shape)
    wl = weights.reshape(oh * ow, spec.out_channels, -1)
    dcols = np.ascontiguousarray(np.matmul(g.T[:, None, :], wl)[:, 0, :].T)
    grad_in = kernels.col2im(dcols, x.shape[0], x.shape[1], x.shape[2],
                             spec.kernel_h, spec.kernel_w, spec.stride, spec.pad)
    return grad_in, grad_w, grad_out.copy()


# ---------------------------------------------------------------------------
# dense, relu, dropout


def fully_connected(input, weights, bias):
    x = as_tensor(input).reshape(-1)
    if weights.ndim != 2 or weights.shape[1] != x.size:
        raise ShapeError(f"fully_connected: weights {weights.shape} do not accept input of size {x.size}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"fully_connected: bias {bias.shape} does not match {weights.shape[0]} outputs")
    return weights @ x + bias


def fully_connected_backward(input, weights, grad_out):
    """Returns ``(grad_input, grad_weights, grad_bias)``; grad_input has the input's shape."""
    x = as_tensor(input)
    grad_out = np.asarray(grad_out).reshape(-1)
    grad_in = (weights.T @ grad_out).reshape(x.shape)
    return grad_in, np.outer(grad_out, x.reshape(-1)), grad_out.copy()


def relu(input):
    return np.maximum(input, 0.0)


def relu_backward(input, grad_out):
    # subgradient 0 at exactly 0
    return np.where(input > 0.0, grad_out, 0.0)


def dropout_mask(shape, rate: float, rng: Rng):
    """Inverted-dropout multipliers: 0 with probability ``rate``, else ``1/(1-rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def dropout(input, rate: float, rng: Rng | None = None, mode: str = "train"):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return input
    return input * dropout_mask(np.shape(input), rate, rng)


# ---------------------------------------------------------------------------
# inception


def init_inception_params(spec: InceptionSpec, rng: Rng):
    params = {}
    for name, cs in spec.convs().items():
        params[f"{name}.w"] = init_he(cs.weight_shape, cs.fan_in, rng)
        params[f"{name}.b"] = np.zeros(cs.out_channels)
    return params


def inception_param_shapes(spec: InceptionSpec):
    shapes = {}
    for name, cs in spec.convs().items():
        shapes[f"{name}.w"] = cs.weight_shape
        shapes[f"{name}.b"] = (cs.out_channels,)
    return shapes


def inception_forward(input, spec: InceptionSpec, params):
    return inception_forward_cached(input, spec, params)[0]


def inception_forward_cached(input, spec: InceptionSpec, params):
    """Forward pass that also returns what :func:`inception_backward` needs."""
    x = as_tensor(input)
    if x.ndim != 3 or x.shape[0] != spec.in_channels:
        raise ShapeError(f"inception: input {x.shape} does not match {spec.in_channels} channels")
    convs = spec.convs()
    cache = {"x": x, "pre": {}, "inp": {}, "cols": {}}

    def conv_relu(name, inp):
        try:
            z, cols = _conv_forward(inp, convs[name], params[f"{name}.w"], params[f"{name}.b"])
        except ShapeError as exc:
            raise ShapeError(f"inception branch '{name}': {exc}") from None
        cache["inp"][name] = inp
        cache["pre"][name] = z
        cache["cols"][name] = cols
        return relu(z)

    out1 = conv_relu("b1", x)
    out3 = conv_relu("b3", conv_relu("b3r", x))
    out5 = conv_relu("b5", conv_relu("b5r", x))
    pooled, argmax = maxpool2d(x, 3, 1, 1)
    cache["pool_argmax"] = argmax
    outp = conv_relu("pp", pooled)
    out = np.concatenate([out1, out3, out5, outp], axis=0)
    if out.shape[1:] != x.shape[1:]:
        raise ShapeError(f"inception: output extent {out.shape[1:]} differs from input {x.shape[1:]}")
    return out, cache


def inception_backward(cache, spec: InceptionSpec, params, grad_out):
    """Returns ``(grad_input, grads)`` with ``grads`` keyed like ``params``."""
    convs = spec.convs()
    x = cache["x"]
    grads = {}

    def conv_relu_back(name, g):
        g = relu_backward(cache["pre"][name], g)
        gi, gw, gb = conv2d_backward(cache["inp"][name], convs[name], params[f"{name}.w"], g,
                                     cols=cache["cols"][name])
        grads[f"{name}.w"] = gw
        grads[f"{name}.b"] = gb
        return gi

    splits = np.cumsum([spec.b1, spec.b3, spec.b5])
    g1, g3, g5, gp = np.split(grad_out, splits, axis=0)
    grad_in = conv_relu_back("b1", g1)
    grad_in = grad_in + conv_relu_back("b3r", conv_relu_back("b3", g3))
    grad_in = grad_in + conv_relu_back("b5r", conv_relu_back("b5", g5))
    g_pooled = conv_relu_back("pp", gp)
    grad_in = grad_in + maxpool2d_backward(g_pooled, cache["pool_argmax"], x.shape)
    return grad_in, grads
