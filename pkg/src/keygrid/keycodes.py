"""From encoder output to decoder feature block.

Key grids are channels-last arrays, either a single ``(H, W, C)`` grid or a
batch ``(B, H, W, C)``. Channel ``s * key_len + k`` is component ``k`` of the
key slice feeding group ``s``.
"""
from __future__ import annotations

import numpy as np

from . import hashgrid
from .hashgrid import HashTableGroup
from .tinynn import sigmoid


def normalize_keys(raw: np.ndarray) -> np.ndarray:
    """Squash raw encoder output into (0, 1) with a logistic sigmoid."""
    raw = np.asarray(raw)
    if not np.all(np.isfinite(raw)):
        raise FloatingPointError("encoder output contains non-finite values")
    return sigmoid(raw)


def _spatial_axes(grid: np.ndarray) -> tuple[int, int]:
    if grid.ndim not in (3, 4):
        raise ValueError(f"expected (H, W, C) or (B, H, W, C), got shape {grid.shape}")
    return (0, 1) if grid.ndim == 3 else (1, 2)


def tile_interleave(key_grid: np.ndarray, h_d: int, w_d: int) -> np.ndarray:
    """Enlarge a key grid to ``h_d x w_d`` by block replication."""
    ay, ax = _spatial_axes(key_grid)
    h_z, w_z = key_grid.shape[ay], key_grid.shape[ax]
    if h_d % h_z or w_d % w_z:
        raise ValueError(f"cannot tile {h_z}x{w_z} keys to {h_d}x{w_d}: sizes must divide")
    return key_grid.repeat(h_d // h_z, axis=ay).repeat(w_d // w_z, axis=ax)


def untile(grad_tiled: np.ndarray, h_z: int, w_z: int) -> np.ndarray:
    """Adjoint of :func:`tile_interleave`: sum each replicated block."""
    ay, _ = _spatial_axes(grad_tiled)
    shape = grad_tiled.shape
    h_d, w_d = shape[ay], shape[ay + 1]
    fy, fx = h_d // h_z, w_d // w_z
    lead = shape[:ay]
    blocks = grad_tiled.reshape(*lead, h_z, fy, w_z, fx, shape[-1])
    return blocks.sum(axis=(ay + 1, ay + 3))


def noise_std(r_max: int) -> float:
    """Std of the training-time key perturbation: a quarter of the finest cell."""
    return 1.0 / (4.0 * r_max)


def spatial_coords(h_d: int, w_d: int) -> tuple[np.ndarray, np.ndarray]:
    """Cell-centre coordinates ``((i + 0.5) / h_d, (j + 0.5) / w_d)`` for 0-based i, j."""
    x = (np.arange(h_d) + 0.5) / h_d
    y = (np.arange(w_d) + 0.5) / w_d
    return x, y


def make_query(tiled: np.ndarray, i: int, j: int, s: int, r_max: int,
               rng: np.random.Generator | None = None, key_len: int = 1) -> np.ndarray:
    """Build the combined query for cell ``(i, j)`` of a single tiled grid and slice ``s``."""
    h_d, w_d, c_z = tiled.shape
    if not (0 <= i < h_d and 0 <= j < w_d):
        raise IndexError(f"cell ({i}, {j}) outside {h_d}x{w_d} grid")
    if not 0 <= s < c_z // key_len:
        raise IndexError(f"slice {s} outside {c_z // key_len} groups")
    key = np.array(tiled[i, j, s * key_len:(s + 1) * key_len], dtype=np.float64)
    if rng is not None:
        key = np.clip(key + rng.normal(0.0, noise_std(r_max), size=key.shape), 0.0, 1.0)
    return np.concatenate([key, [(i + 0.5) / h_d, (j + 0.5) / w_d]])


def slice_queries(tiled: np.ndarray, s: int, key_len: int, r_max: int,
                  rng: np.random.Generator | None = None, noise: str = "gaussian",
                  scale: float | None = None):
    """All queries of slice ``s`` for a batch of tiled grids, in (b, i, j) order.

    Returns ``(queries, passthrough)`` where ``passthrough`` marks key components
    that were not clamped (the only ones a gradient flows back through).
    ``noise`` is ``"gaussian"`` (std ``scale``, default a quarter cell at
    ``r_max``) or ``"uniform"`` (on ``[-scale, scale]``); no noise without ``rng``.
    """
    batch = tiled if tiled.ndim == 4 else tiled[None]
    b, h_d, w_d, _ = batch.shape
    keys = batch[..., s * key_len:(s + 1) * key_len].reshape(-1, key_len)
    passthrough = np.ones(keys.shape, dtype=bool)
    if rng is not None:
        if noise == "gaussian":
            eps = rng.normal(0.0, noise_std(r_max) if scale is None else scale, size=keys.shape)
        elif noise == "uniform":
            eps = rng.uniform(-scale, scale, size=keys.shape)
        else:
            raise ValueError(f"unknown noise kind {noise!r}")
        noisy = keys + eps.astype(keys.dtype)
        keys = np.clip(noisy, 0.0, 1.0)
        passthrough = (noisy >= 0.0) & (noisy <= 1.0)
    x, y = spatial_coords(h_d, w_d)
    xx = np.broadcast_to(x[:, None], (h_d, w_d))
    yy = np.broadcast_to(y[None, :], (h_d, w_d))
    coords = np.stack([xx, yy], axis=-1).reshape(1, h_d * w_d, 2)
    coords = np.broadcast_to(coords, (b, h_d * w_d, 2)).reshape(-1, 2).astype(keys.dtype)
    return np.concatenate([keys, coords], axis=1), passthrough


def assemble_feature_block(tiled: np.ndarray, groups: list[HashTableGroup], r_max: int,
                           rng: np.random.Generator | None = None, *, noise: str = "gaussian",
                           scale: float | None = None, return_queries: bool = False):
    """Query every group at every cell and lay the projected features out channel-wise."""
    batched = tiled.ndim == 4
    batch = tiled if batched else tiled[None]
    b, h_d, w_d, c_z = batch.shape
    key_len = groups[0].config.key_len
    if c_z != key_len * len(groups):
        raise ValueError(f"{c_z} key channels cannot feed {len(groups)} groups of key length {key_len}")
    per_group = groups[0].config.out_dim_per_group
    block = np.empty((b, h_d, w_d, per_group * len(groups)), dtype=groups[0].levels[0].entries.dtype)
    cache = []
    for s, group in enumerate(groups):
        q, passthrough = slice_queries(batch, s, key_len, r_max, rng, noise=noise, scale=scale)
        res = hashgrid.retrieve(group, q)
        feats = hashgrid.project(group, res.concat_features)
        block[..., s * per_group:(s + 1) * per_group] = feats.reshape(b, h_d, w_d, per_group)
        cache.append((q, passthrough, res))
    out = block if batched else block[0]
    return (out, cache) if return_queries else out


def assemble_backward(grad_block: np.ndarray, groups: list[HashTableGroup], cache):
    """Backpropagate a feature-block gradient into the groups and the tiled keys.

    ``cache`` is the query list returned by ``assemble_feature_block(...,
    return_queries=True)``. Returns ``(bundles, grad_tiled)``.
    """
    batched = grad_block.ndim == 4
    gb = grad_block if batched else grad_block[None]
    b, h_d, w_d, _ = gb.shape
    key_len = groups[0].config.key_len
    per_group = groups[0].config.out_dim_per_group
    grad_tiled = np.zeros((b, h_d, w_d, key_len * len(groups)), dtype=gb.dtype)
    bundles = []
    for s, (group, (q, passthrough, res)) in enumerate(zip(groups, cache)):
        upstream = gb[..., s * per_group:(s + 1) * per_group].reshape(-1, per_group)
        bundle = hashgrid.backward(group, q, upstream, result=res)
        bundles.append(bundle)
        kg = np.where(passthrough, bundle.key_grad, 0)
        grad_tiled[..., s * key_len:(s + 1) * key_len] = kg.reshape(b, h_d, w_d, key_len)
    return bundles, (grad_tiled if batched else grad_tiled[0])
