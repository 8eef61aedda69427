"""Small numpy kernels with hand-written gradients.

Everything operates on channels-last arrays: images are ``(B, H, W, C)``,
dense inputs are ``(N, features)``. Functions keep the dtype of their inputs so
the same code runs in float32 for training and float64 for gradient checks.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape

    def astype(self, dtype) -> "DenseLayer":
        return DenseLayer(self.weights.astype(dtype), self.bias.astype(dtype))


@dataclass
class ConvLayer:
    """3x3 convolution with zero padding of 1."""

    weights: np.ndarray  # (3, 3, in, out)
    bias: np.ndarray  # (out,)
    stride: int = 1

    def astype(self, dtype) -> "ConvLayer":
        return ConvLayer(self.weights.astype(dtype), self.bias.astype(dtype), self.stride)


def init_dense(rng: np.random.Generator, n_in: int, n_out: int, gain: float = 1.0,
               dtype=np.float32) -> DenseLayer:
    bound = gain * np.sqrt(3.0 / n_in)
    w = rng.uniform(-bound, bound, size=(n_out, n_in))
    return DenseLayer(w.astype(dtype), np.zeros(n_out, dtype=dtype))


def init_conv(rng: np.random.Generator, c_in: int, c_out: int, stride: int = 1,
              gain: float = 1.0, dtype=np.float32) -> ConvLayer:
    bound = gain * np.sqrt(3.0 / (9 * c_in))
    w = rng.uniform(-bound, bound, size=(3, 3, c_in, c_out))
    return ConvLayer(w.astype(dtype), np.zeros(c_out, dtype=dtype), stride)


# -- dense -------------------------------------------------------------------

def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    if x.shape[-1] != layer.weights.shape[1]:
        raise ValueError(f"dense input has {x.shape[-1]} features, layer expects {layer.weights.shape[1]}")
    return x @ layer.weights.T + layer.bias


def dense_backward(layer: DenseLayer, x: np.ndarray, upstream: np.ndarray):
    """Return ``((d_weights, d_bias), d_input)`` for a batch ``x`` of shape (N, in)."""
    out_dim, in_dim = layer.weights.shape
    if x.shape[-1] != in_dim or upstream.shape[-1] != out_dim or x.shape[:-1] != upstream.shape[:-1]:
        raise ValueError("dense_backward shape mismatch")
    x2 = x.reshape(-1, in_dim)
    g2 = upstream.reshape(-1, out_dim)
    d_w = g2.T @ x2
    d_b = g2.sum(axis=0)
    d_x = (g2 @ layer.weights).reshape(x.shape)
    return (d_w, d_b), d_x


# -- convolution ---------------------------------------------------------------

def _out_size(n: int, stride: int) -> int:
    return (n - 1) // stride + 1


def _im2col(x: np.ndarray, stride: int) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (B, H, W, C, 3, 3)
    win = win[:, ::stride, ::stride]
    # -> (B, Ho, Wo, 3, 3, C) to line up with the weight layout
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def conv_forward(layer: ConvLayer, x: np.ndarray) -> np.ndarray:
    if x.ndim != 4 or x.shape[-1] != layer.weights.shape[2]:
        raise ValueError(f"conv input shape {x.shape} incompatible with weights {layer.weights.shape}")
    cols = _im2col(x, layer.stride)
    b, ho, wo = cols.shape[:3]
    c_out = layer.weights.shape[3]
    out = cols.reshape(b * ho * wo, -1) @ layer.weights.reshape(-1, c_out) + layer.bias
    return out.reshape(b, ho, wo, c_out)


def conv_backward(layer: ConvLayer, x: np.ndarray, upstream: np.ndarray, input_grad: bool = True):
    """Return ``((d_weights, d_bias), d_input)``; ``d_input`` is None when not requested."""
    s = layer.stride
    b, h, w, c_in = x.shape
    c_out = layer.weights.shape[3]
    ho, wo = _out_size(h, s), _out_size(w, s)
    if upstream.shape != (b, ho, wo, c_out):
        raise ValueError(f"conv upstream shape {upstream.shape}, expected {(b, ho, wo, c_out)}")
    cols = _im2col(x, s).reshape(b * ho * wo, -1)
    g2 = upstream.reshape(-1, c_out)
    d_w = (cols.T @ g2).reshape(layer.weights.shape)
    d_b = g2.sum(axis=0)
    if not input_grad:
        return (d_w, d_b), None
    if s == 1:
        # stride 1: the input gradient is a convolution with the flipped kernel
        flipped = np.ascontiguousarray(layer.weights[::-1, ::-1].transpose(0, 1, 3, 2))
        zero = np.zeros(c_in, dtype=flipped.dtype)
        return (d_w, d_b), conv_forward(ConvLayer(flipped, zero), upstream)
    d_cols = (g2 @ layer.weights.reshape(-1, c_out).T).reshape(b, ho, wo, 3, 3, c_in)
    d_xp = np.zeros((b, h + 2, w + 2, c_in), dtype=upstream.dtype)
    for ky in range(3):
        for kx in range(3):
            d_xp[:, ky:ky + s * (ho - 1) + 1:s, kx:kx + s * (wo - 1) + 1:s] += d_cols[:, :, :, ky, kx]
    return (d_w, d_b), d_xp[:, 1:-1, 1:-1]


# -- elementwise / resampling ---------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return upstream * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so large magnitudes never overflow exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_backward(y: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient through a sigmoid given its *output* ``y``."""
    return upstream * y * (1 - y)


def upsample2(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour 2x spatial upsampling."""
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2_backward(upstream: np.ndarray) -> np.ndarray:
    b, h, w, c = upstream.shape
    return upstream.reshape(b, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


# -- loss ----------------------------------------------------------------------

def l2_loss(pred: np.ndarray, target: np.ndarray, weight: float = 1.0):
    """Weighted mean squared error and its gradient w.r.t. ``pred``."""
    if pred.shape != target.shape:
        raise ValueError(f"l2_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    n = diff.size
    loss = weight * float(np.sum(diff * diff)) / n
    grad = (2.0 * weight / n) * diff
    return loss, grad


# -- optimizer -------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 2e-3
    beta1: float = 0.0
    beta2: float = 0.99
    eps: float = 1e-15
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update, applied in place to ``params``.

    Only names present in ``grads`` are touched; each parameter group gets its
    own :class:`AdamState` so groups with different epsilons never interact.
    """
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v / bc2) + state.eps
        p -= (state.lr / bc1) * m / denom
    return params
