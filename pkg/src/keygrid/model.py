"""The desk-scale autoencoder: conv encoder, hash-table groups, conv decoder.

Parameters live in small dataclasses; :func:`param_dict` exposes them under
stable flat names (``enc.0.w``, ``grp.1.lvl.3``, ...) so the optimizer and the
gradient checker can address every scalar uniformly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import hashgrid, keycodes
from .hashgrid import GridConfig, HashTableGroup
from .tinynn import (
    ConvLayer, conv_backward, conv_forward, init_conv, l2_loss, relu, relu_backward,
    sigmoid, sigmoid_backward, upsample2, upsample2_backward,
)


@dataclass
class ModelShape:
    image_size: int
    channels: int
    code_size: int
    code_channels: int
    feature_size: int
    grid: GridConfig
    enc_width: int
    dec_width: int
    activation: str = "relu"

    def __post_init__(self):
        for name, small in (("code_size", self.code_size), ("feature_size", self.feature_size)):
            ratio = self.image_size // small
            if small * ratio != self.image_size or ratio & (ratio - 1):
                raise ValueError(f"image_size / {name} must be a power of two, got {self.image_size}/{small}")
        if self.feature_size % self.code_size:
            raise ValueError("feature_size must be a multiple of code_size")
        if self.code_channels != self.grid.n_groups * self.grid.key_len:
            raise ValueError(f"code channels {self.code_channels} != n_groups * key_len "
                             f"({self.grid.n_groups} * {self.grid.key_len})")
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_down(self) -> int:
        return int(math.log2(self.image_size // self.code_size))

    @property
    def n_up(self) -> int:
        return int(math.log2(self.image_size // self.feature_size))


@dataclass
class Autoencoder:
    shape: ModelShape
    encoder: list[ConvLayer]
    groups: list[HashTableGroup]
    decoder: list[ConvLayer]

    @property
    def dtype(self):
        return self.encoder[0].weights.dtype

    def astype(self, dtype) -> "Autoencoder":
        return Autoencoder(
            self.shape,
            [layer.astype(dtype) for layer in self.encoder],
            [g.astype(dtype) for g in self.groups],
            [layer.astype(dtype) for layer in self.decoder],
        )


def build_model(shape: ModelShape, seed: int, key_init_gain: float = 1.0,
                dtype=np.float32) -> Autoencoder:
    enc_seed, grp_seed, dec_seed = np.random.SeedSequence(seed).spawn(3)
    rng = np.random.default_rng(enc_seed)
    act_gain = math.sqrt(2.0) if shape.activation == "relu" else 1.0
    encoder = []
    c = shape.channels
    for _ in range(shape.n_down):
        encoder.append(init_conv(rng, c, shape.enc_width, stride=2, gain=act_gain, dtype=dtype))
        c = shape.enc_width
    encoder.append(init_conv(rng, c, shape.code_channels, gain=key_init_gain, dtype=dtype))

    group_seeds = grp_seed.generate_state(shape.grid.n_groups, dtype=np.uint64)
    groups = [hashgrid.build_group(shape.grid, int(s), dtype=dtype) for s in group_seeds]

    rng = np.random.default_rng(dec_seed)
    # width halves after every upsampling step
    width = shape.dec_width
    decoder = [init_conv(rng, shape.grid.feature_channels, width, gain=act_gain, dtype=dtype)]
    for _ in range(shape.n_up):
        decoder.append(init_conv(rng, width, max(width // 2, 1), gain=act_gain, dtype=dtype))
        width = max(width // 2, 1)
    decoder.append(init_conv(rng, width, shape.channels, dtype=dtype))
    return Autoencoder(shape, encoder, groups, decoder)


def param_dict(model: Autoencoder) -> dict[str, np.ndarray]:
    """Flat name -> array map; the arrays are the model's own storage."""
    params = {}
    for k, layer in enumerate(model.encoder):
        params[f"enc.{k}.w"] = layer.weights
        params[f"enc.{k}.b"] = layer.bias
    for s, group in enumerate(model.groups):
        for lvl, level in enumerate(group.levels):
            params[f"grp.{s}.lvl.{lvl}"] = level.entries
        for k, layer in enumerate(group.mlp):
            params[f"grp.{s}.mlp.{k}.w"] = layer.weights
            params[f"grp.{s}.mlp.{k}.b"] = layer.bias
    for k, layer in enumerate(model.decoder):
        params[f"dec.{k}.w"] = layer.weights
        params[f"dec.{k}.b"] = layer.bias
    return params


def is_table_param(name: str) -> bool:
    return ".lvl." in name


def _act(shape: ModelShape, x):
    return relu(x) if shape.activation == "relu" else x


def _act_backward(shape: ModelShape, pre, g):
    return relu_backward(pre, g) if shape.activation == "relu" else g


# -- encoder -------------------------------------------------------------------

def encode(model: Autoencoder, images: np.ndarray, cache: dict | None = None) -> np.ndarray:
    """Images ``(B, H, W, C)`` -> key codes ``(B, H_z, W_z, C_z)`` in (0, 1)."""
    sh = model.shape
    if images.shape[1:] != (sh.image_size, sh.image_size, sh.channels):
        raise ValueError(f"image shape {images.shape[1:]} != {(sh.image_size, sh.image_size, sh.channels)}")
    x = images.astype(model.dtype, copy=False)
    inputs, pres = [], []
    for k, layer in enumerate(model.encoder):
        inputs.append(x)
        pre = conv_forward(layer, x)
        pres.append(pre)
        x = _act(sh, pre) if k < len(model.encoder) - 1 else pre
    keys = keycodes.normalize_keys(x)
    if cache is not None:
        cache.update(enc_inputs=inputs, enc_pres=pres, keys=keys)
    return keys


def decode_keys(model: Autoencoder, keys: np.ndarray, rng: np.random.Generator | None = None,
                cache: dict | None = None, noise: str = "gaussian", scale: float | None = None) -> np.ndarray:
    """Key codes -> reconstructed images. ``rng`` enables key perturbation."""
    sh = model.shape
    tiled = keycodes.tile_interleave(keys, sh.feature_size, sh.feature_size)
    block, qcache = keycodes.assemble_feature_block(
        tiled, model.groups, sh.grid.r_max, rng, noise=noise, scale=scale, return_queries=True)
    x = block
    inputs, pres = [], []
    for k, layer in enumerate(model.decoder):
        if 1 <= k <= sh.n_up:
            x = upsample2(x)
        inputs.append(x)
        pre = conv_forward(layer, x)
        pres.append(pre)
        x = _act(sh, pre) if k < len(model.decoder) - 1 else pre
    out = sigmoid(x)
    if cache is not None:
        cache.update(query_cache=qcache, dec_inputs=inputs, dec_pres=pres, out=out)
    return out


def forward(model: Autoencoder, images: np.ndarray, rng: np.random.Generator | None = None,
            cache: dict | None = None) -> np.ndarray:
    return decode_keys(model, encode(model, images, cache), rng, cache)


def loss_and_grads(model: Autoencoder, images: np.ndarray, l2_weight: float,
                   rng: np.random.Generator | None = None):
    """Forward + backward. Returns ``(loss, recon, grads)`` with ``grads`` keyed like :func:`param_dict`.

    Hash-table gradients are dense arrays that are zero outside the touched entries.
    """
    sh = model.shape
    cache: dict = {}
    recon = forward(model, images, rng, cache)
    loss, g = l2_loss(recon, images.astype(model.dtype, copy=False), l2_weight)
    grads: dict[str, np.ndarray] = {}

    g = sigmoid_backward(cache["out"], g)
    for k in range(len(model.decoder) - 1, -1, -1):
        if k < len(model.decoder) - 1:
            g = _act_backward(sh, cache["dec_pres"][k], g)
        (dw, db), g = conv_backward(model.decoder[k], cache["dec_inputs"][k], g)
        grads[f"dec.{k}.w"], grads[f"dec.{k}.b"] = dw, db
        if 1 <= k <= sh.n_up:
            g = upsample2_backward(g)

    bundles, g_tiled = keycodes.assemble_backward(g, model.groups, cache["query_cache"])
    for s, (group, bundle) in enumerate(zip(model.groups, bundles)):
        for lvl, (level, (idx, rows)) in enumerate(zip(group.levels, bundle.table_grads)):
            dense = np.zeros_like(level.entries)
            dense[idx] = rows
            grads[f"grp.{s}.lvl.{lvl}"] = dense
        for k, (dw, db) in enumerate(bundle.mlp_grads):
            grads[f"grp.{s}.mlp.{k}.w"], grads[f"grp.{s}.mlp.{k}.b"] = dw, db

    g = keycodes.untile(g_tiled, sh.code_size, sh.code_size)
    g = sigmoid_backward(cache["keys"], g)
    for k in range(len(model.encoder) - 1, -1, -1):
        if k < len(model.encoder) - 1:
            g = _act_backward(sh, cache["enc_pres"][k], g)
        (dw, db), g = conv_backward(model.encoder[k], cache["enc_inputs"][k], g, input_grad=k > 0)
        grads[f"enc.{k}.w"], grads[f"enc.{k}.b"] = dw, db
    return loss, recon, grads


def eval_loss(model: Autoencoder, images: np.ndarray, l2_weight: float,
              rng: np.random.Generator | None = None, noise: str = "gaussian",
              scale: float | None = None) -> float:
    recon = decode_keys(model, encode(model, images), rng, noise=noise, scale=scale)
    return l2_loss(recon, images.astype(model.dtype, copy=False), l2_weight)[0]
