"""Multi-resolution hash tables queried by continuous keys.

A *group* holds ``n_resolutions`` tables over the unit cube of dimension
``key_len + 2`` (key components followed by the two spatial coordinates) and a
small MLP that projects the concatenated per-level features. Coarse levels whose
whole vertex lattice fits in ``max_entries`` are indexed directly; finer levels
go through the prime-XOR spatial hash.

All query functions are batched: a query array has shape ``(N, D)`` (a single
``(D,)`` vector is promoted).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tinynn import DenseLayer, dense_backward, dense_forward, init_dense, relu, relu_backward

# instant-NGP primes; the first axis is left unscrambled
HASH_PRIMES = np.array(
    [1, 2654435761, 805459861, 3674653429, 2097192037, 1434869437, 2165219737],
    dtype=np.uint64,
)
INIT_RANGE = 1e-4


@dataclass(frozen=True)
class GridConfig:
    n_groups: int = 4
    n_resolutions: int = 16
    key_len: int = 1
    entry_dim: int = 4
    max_entries: int = 2 ** 18
    r_min: int = 4
    r_max: int = 64
    out_dim_per_group: int = 128
    mlp_hidden: int = 64  # 0 -> single linear projection

    def __post_init__(self):
        if self.r_min < 1 or self.r_max < self.r_min:
            raise ValueError(f"need 1 <= r_min <= r_max, got r_min={self.r_min}, r_max={self.r_max}")
        if self.n_resolutions < 1:
            raise ValueError("n_resolutions must be >= 1")
        if self.n_resolutions == 1 and self.r_min != self.r_max:
            raise ValueError("a single resolution requires r_min == r_max")
        if self.max_entries < 1 or self.max_entries & (self.max_entries - 1):
            raise ValueError(f"max_entries must be a power of two, got {self.max_entries}")
        for name in ("n_groups", "key_len", "entry_dim", "out_dim_per_group"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.mlp_hidden < 0:
            raise ValueError("mlp_hidden must be >= 0")
        if self.dim > len(HASH_PRIMES):
            raise ValueError(f"key_len + 2 must be <= {len(HASH_PRIMES)}")

    @property
    def dim(self) -> int:
        """Query dimensionality: key components plus two spatial coordinates."""
        return self.key_len + 2

    @property
    def n_corners(self) -> int:
        return 2 ** self.dim

    @property
    def feature_channels(self) -> int:
        """Decoder channel count C_d contributed by all groups."""
        return self.out_dim_per_group * self.n_groups


@dataclass
class Level:
    resolution: int
    entries: np.ndarray  # (T_l, C_v)
    direct: bool


@dataclass
class HashTableGroup:
    config: GridConfig
    levels: list[Level]
    mlp: list[DenseLayer]

    def astype(self, dtype) -> "HashTableGroup":
        return HashTableGroup(
            self.config,
            [Level(lv.resolution, lv.entries.astype(dtype), lv.direct) for lv in self.levels],
            [layer.astype(dtype) for layer in self.mlp],
        )


@dataclass
class LevelCorners:
    lattice: np.ndarray  # (N, M, D) integer vertex coordinates
    weights: np.ndarray  # (N, M)
    indices: np.ndarray  # (N, M) entry indices
    frac: np.ndarray  # (N, D) position inside the cell


@dataclass
class RetrievalResult:
    concat_features: np.ndarray  # (N, N_r * C_v)
    corners: list[LevelCorners]


@dataclass
class GradientBundle:
    # per level: (unique entry indices, summed gradient rows)
    table_grads: list[tuple[np.ndarray, np.ndarray]]
    mlp_grads: list[tuple[np.ndarray, np.ndarray]]
    key_grad: np.ndarray  # (N, key_len)
    input_grad: np.ndarray = field(repr=False, default=None)  # (N, N_r * C_v)


def resolution_schedule(r_min: int, r_max: int, n_resolutions: int) -> list[int]:
    """Geometric progression of per-level resolutions, rounded to integers."""
    if n_resolutions < 1:
        raise ValueError("n_resolutions must be >= 1")
    if n_resolutions == 1:
        if r_min != r_max:
            raise ValueError("a single resolution requires r_min == r_max")
        return [int(r_min)]
    growth = (r_max / r_min) ** (1.0 / (n_resolutions - 1))
    res = [int(round(r_min * growth ** lvl)) for lvl in range(n_resolutions)]
    res[0], res[-1] = int(r_min), int(r_max)
    return res


def level_size(resolution: int, config: GridConfig) -> tuple[int, bool]:
    """Return ``(table_size, direct)`` for one level."""
    lattice = (resolution + 1) ** config.dim
    if lattice <= config.max_entries:
        return lattice, True
    return config.max_entries, False


def _mlp_shapes(config: GridConfig) -> list[tuple[int, int]]:
    n_in = config.n_resolutions * config.entry_dim
    if config.mlp_hidden:
        return [(config.mlp_hidden, n_in), (config.out_dim_per_group, config.mlp_hidden)]
    return [(config.out_dim_per_group, n_in)]


def build_group(config: GridConfig, seed: int, dtype=np.float32) -> HashTableGroup:
    rng = np.random.default_rng(seed)
    levels = []
    for r in resolution_schedule(config.r_min, config.r_max, config.n_resolutions):
        size, direct = level_size(r, config)
        entries = rng.uniform(-INIT_RANGE, INIT_RANGE, size=(size, config.entry_dim)).astype(dtype)
        levels.append(Level(r, entries, direct))
    shapes = _mlp_shapes(config)
    mlp = []
    for k, (n_out, n_in) in enumerate(shapes):
        gain = np.sqrt(2.0) if k < len(shapes) - 1 else 1.0
        mlp.append(init_dense(rng, n_in, n_out, gain=gain, dtype=dtype))
    return HashTableGroup(config, levels, mlp)


def corner_offsets(dim: int) -> np.ndarray:
    """The ``2**dim`` binary offsets, first axis most significant."""
    k = np.arange(2 ** dim)[:, None]
    shifts = np.arange(dim - 1, -1, -1)[None, :]
    return ((k >> shifts) & 1).astype(np.int64)


def hash_index(lattice: np.ndarray, resolution: int, table_size: int, direct: bool) -> np.ndarray:
    """Map integer vertex coordinates ``(..., D)`` to entry indices."""
    lattice = np.asarray(lattice)
    if lattice.size and (lattice.min() < 0 or lattice.max() > resolution):
        raise ValueError(f"lattice coordinate outside [0, {resolution}]")
    coords = lattice.astype(np.uint64)
    if direct:
        stride = np.uint64(resolution + 1)
        idx = np.zeros(coords.shape[:-1], dtype=np.uint64)
        for d in range(coords.shape[-1]):
            idx = idx * stride + coords[..., d]
        return idx.astype(np.int64)
    dim = coords.shape[-1]
    h = coords[..., 0] * HASH_PRIMES[0]
    for d in range(1, dim):
        h ^= coords[..., d] * HASH_PRIMES[d]
    return (h & np.uint64(table_size - 1)).astype(np.int64)


def level_hash_index(level: Level, lattice: np.ndarray) -> np.ndarray:
    return hash_index(lattice, level.resolution, len(level.entries), level.direct)


def _as_batch(query: np.ndarray) -> tuple[np.ndarray, bool]:
    q = np.asarray(query)
    if q.ndim == 1:
        return q[None, :], True
    return q, False


def corner_weights(query: np.ndarray, resolution: int):
    """Multilinear corner weights of ``query`` inside a lattice of ``resolution`` cells per axis.

    Returns ``(lattice, weights, frac)`` with shapes ``(N, M, D)``, ``(N, M)``,
    ``(N, D)``. The base cell is clamped to ``resolution - 1`` so a coordinate
    of exactly 1.0 lands on the upper vertex with fraction 1.
    """
    q, _ = _as_batch(query)
    q = np.clip(q, 0.0, 1.0)
    pos = q * resolution
    base = np.minimum(np.floor(pos), resolution - 1)
    frac = pos - base
    offsets = corner_offsets(q.shape[1])  # (M, D)
    lattice = base.astype(np.int64)[:, None, :] + offsets[None]
    per_axis = np.where(offsets[None] == 1, frac[:, None, :], 1 - frac[:, None, :])
    weights = np.prod(per_axis, axis=2)
    return lattice, weights, frac


def retrieve(group: HashTableGroup, query: np.ndarray) -> RetrievalResult:
    q, _ = _as_batch(query)
    if q.shape[1] != group.config.dim:
        raise ValueError(f"query has {q.shape[1]} components, group expects {group.config.dim}")
    feats, corners = [], []
    for level in group.levels:
        lattice, weights, frac = corner_weights(q, level.resolution)
        idx = level_hash_index(level, lattice)
        weights = weights.astype(level.entries.dtype, copy=False)
        feats.append(np.einsum("nm,nmc->nc", weights, level.entries[idx]))
        corners.append(LevelCorners(lattice, weights, idx, frac))
    return RetrievalResult(np.concatenate(feats, axis=1), corners)


def _mlp_forward(mlp: list[DenseLayer], x: np.ndarray):
    acts = [x]
    h = x
    for k, layer in enumerate(mlp):
        h = dense_forward(layer, h)
        acts.append(h)
        if k < len(mlp) - 1:
            h = relu(h)
    return h, acts


def project(group: HashTableGroup, concat_features: np.ndarray) -> np.ndarray:
    """Apply the group's MLP to interpolated ``(N, N_r * C_v)`` features."""
    return _mlp_forward(group.mlp, concat_features)[0]


def encode_feature(group: HashTableGroup, query: np.ndarray) -> np.ndarray:
    """Retrieve, interpolate and project ``query`` to ``out_dim_per_group`` features."""
    q, single = _as_batch(query)
    out = project(group, retrieve(group, q).concat_features)
    return out[0] if single else out


def _interp_key_grad(level: Level, corners: LevelCorners, g_level: np.ndarray, key_len: int) -> np.ndarray:
    """d(level output . g_level)/d(key components) for one level."""
    offsets = corner_offsets(corners.frac.shape[1])
    per_axis = np.where(offsets[None] == 1, corners.frac[:, None, :], 1 - corners.frac[:, None, :])
    # projection of each corner's entry onto the upstream gradient
    proj = np.einsum("nmc,nc->nm", level.entries[corners.indices], g_level)
    out = np.empty((proj.shape[0], key_len), dtype=proj.dtype)
    dim = per_axis.shape[2]
    for d in range(key_len):
        others = np.prod(per_axis[:, :, [e for e in range(dim) if e != d]], axis=2)
        sign = np.where(offsets[:, d] == 1, 1.0, -1.0).astype(proj.dtype)
        out[:, d] = level.resolution * np.sum(proj * others * sign[None], axis=1)
    return out


def _scatter_rows(indices: np.ndarray, rows: np.ndarray, table_size: int):
    touched = np.flatnonzero(np.bincount(indices, minlength=table_size))
    acc = np.stack([np.bincount(indices, weights=rows[:, c], minlength=table_size)[touched]
                    for c in range(rows.shape[1])], axis=1)
    return touched, acc.astype(rows.dtype, copy=False)


def backward(group: HashTableGroup, query: np.ndarray, upstream_grad: np.ndarray,
             result: RetrievalResult | None = None) -> GradientBundle:
    """Exact gradients of ``sum(encode_feature(group, query) * upstream_grad)``.

    Spatial coordinates and any noise added to the keys are constants: only
    the first ``key_len`` query components receive a gradient. At a cell
    boundary the derivative is the one-sided one of the cell the query is
    assigned to.
    """
    cfg = group.config
    q, single = _as_batch(query)
    g = np.asarray(upstream_grad)
    if single:
        g = g[None, :]
    if g.shape != (q.shape[0], cfg.out_dim_per_group):
        raise ValueError(f"upstream_grad shape {np.shape(upstream_grad)} does not match "
                         f"{q.shape[0]} queries x {cfg.out_dim_per_group} outputs")
    if result is None:
        result = retrieve(group, q)
    _, acts = _mlp_forward(group.mlp, result.concat_features)

    mlp_grads = [None] * len(group.mlp)
    for k in range(len(group.mlp) - 1, -1, -1):
        layer_in = acts[k] if k == 0 else relu(acts[k])
        mlp_grads[k], g = dense_backward(group.mlp[k], layer_in, g)
        if k > 0:
            g = relu_backward(acts[k], g)
    d_concat = g

    cv = cfg.entry_dim
    table_grads = []
    key_grad = np.zeros((q.shape[0], cfg.key_len), dtype=d_concat.dtype)
    for lvl, (level, corners) in enumerate(zip(group.levels, result.corners)):
        g_level = d_concat[:, lvl * cv:(lvl + 1) * cv]
        rows = corners.weights[:, :, None] * g_level[:, None, :]
        table_grads.append(_scatter_rows(corners.indices.ravel(), rows.reshape(-1, cv), len(level.entries)))
        key_grad += _interp_key_grad(level, corners, g_level, cfg.key_len)
    if single:
        key_grad, d_concat = key_grad[0], d_concat[0]
    return GradientBundle(table_grads, mlp_grads, key_grad, d_concat)


def param_count(config: GridConfig) -> tuple[int, int, int]:
    """``(table_params, mlp_params, total)`` over all groups."""
    per_group_tables = 0
    for r in resolution_schedule(config.r_min, config.r_max, config.n_resolutions):
        size, _ = level_size(r, config)
        per_group_tables += size * config.entry_dim
    per_group_mlp = sum(o * (i + 1) for o, i in _mlp_shapes(config))
    tables = config.n_groups * per_group_tables
    mlp = config.n_groups * per_group_mlp
    return tables, mlp, tables + mlp


def allocated_params(groups: list[HashTableGroup]) -> tuple[int, int, int]:
    """Count parameters by summing the sizes of allocated arrays."""
    tables = sum(lv.entries.size for g in groups for lv in g.levels)
    mlp = sum(layer.weights.size + layer.bias.size for g in groups for layer in g.mlp)
    return tables, mlp, tables + mlp
