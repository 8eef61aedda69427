"""Little-endian binary formats: hash-table snapshots and key-code files.

Snapshot layout::

    "BRHT" | version u32 | 9 x u32 grid config
    per group, per level: resolution u32 | entry count u64 | entries f32 (count x C_v)
    per group: layer count u32, per layer: out u32 | in u32 | weights f32 | bias f32
    tagged sections until EOF: tag[4] | payload length u64 | payload

Key-code file::

    "BKEY" | version u32 | H_z u32 | W_z u32 | C_z u32 | values f32 (row-major H, W, C)
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .hashgrid import GridConfig, HashTableGroup, Level, level_size
from .tinynn import DenseLayer

SNAPSHOT_MAGIC = b"BRHT"
KEYCODE_MAGIC = b"BKEY"
FORMAT_VERSION = 1

_GRID_FIELDS = [f.name for f in fields(GridConfig)]


class FormatError(ValueError):
    pass


class BadMagicError(FormatError):
    pass


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file: wanted {n} bytes at offset {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def f32(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)

    @property
    def done(self) -> bool:
        return self.pos == len(self.data)


def _f32_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _check_header(r: _Reader, magic: bytes):
    got = r.take(4)
    if got != magic:
        raise BadMagicError(f"bad magic {got!r}, expected {magic!r}")
    (version,) = r.unpack("I")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")


# -- sections ---------------------------------------------------------------------------

@dataclass
class Sections:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    text: dict[str, str] = field(default_factory=dict)
    ints: dict[str, int] = field(default_factory=dict)
    floats: dict[str, float] = field(default_factory=dict)


def _name_bytes(name: str) -> bytes:
    raw = name.encode()
    return struct.pack("<H", len(raw)) + raw


def _encode_sections(sections: Sections) -> bytes:
    out = io.BytesIO()

    def emit(tag: bytes, payload: bytes):
        out.write(tag + struct.pack("<Q", len(payload)) + payload)

    for name, arr in sections.tensors.items():
        arr = np.asarray(arr)
        head = _name_bytes(name) + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        emit(b"TNSR", head + _f32_bytes(arr))
    for name, value in sections.text.items():
        emit(b"TEXT", _name_bytes(name) + value.encode())
    for name, value in sections.ints.items():
        emit(b"INT8", _name_bytes(name) + struct.pack("<q", value))
    for name, value in sections.floats.items():
        emit(b"FL64", _name_bytes(name) + struct.pack("<d", value))
    return out.getvalue()


def _decode_sections(r: _Reader) -> Sections:
    sections = Sections()
    while not r.done:
        tag = r.take(4)
        (length,) = r.unpack("Q")
        sub = _Reader(r.take(length))
        (n,) = sub.unpack("H")
        name = sub.take(n).decode()
        if tag == b"TNSR":
            (ndim,) = sub.unpack("B")
            shape = sub.unpack(f"{ndim}I") if ndim else ()
            sections.tensors[name] = sub.f32(int(np.prod(shape))).reshape(shape)
        elif tag == b"TEXT":
            sections.text[name] = sub.take(length - sub.pos).decode()
        elif tag == b"INT8":
            sections.ints[name] = sub.unpack("q")[0]
        elif tag == b"FL64":
            sections.floats[name] = sub.unpack("d")[0]
        else:
            raise FormatError(f"unknown section tag {tag!r}")
        if not sub.done:
            raise FormatError(f"section {name!r} has trailing bytes")
    return sections


# -- snapshots --------------------------------------------------------------------------

def snapshot_bytes(config: GridConfig, groups: list[HashTableGroup], sections: Sections | None = None) -> bytes:
    out = io.BytesIO()
    out.write(SNAPSHOT_MAGIC + struct.pack("<I", FORMAT_VERSION))
    out.write(struct.pack(f"<{len(_GRID_FIELDS)}I", *(getattr(config, n) for n in _GRID_FIELDS)))
    if len(groups) != config.n_groups:
        raise ValueError(f"{len(groups)} groups for a config with n_groups={config.n_groups}")
    for group in groups:
        for level in group.levels:
            out.write(struct.pack("<IQ", level.resolution, len(level.entries)))
            out.write(_f32_bytes(level.entries))
    for group in groups:
        out.write(struct.pack("<I", len(group.mlp)))
        for layer in group.mlp:
            out.write(struct.pack("<II", *layer.weights.shape))
            out.write(_f32_bytes(layer.weights) + _f32_bytes(layer.bias))
    if sections is not None:
        out.write(_encode_sections(sections))
    return out.getvalue()


def parse_snapshot(data: bytes) -> tuple[GridConfig, list[HashTableGroup], Sections]:
    r = _Reader(data)
    _check_header(r, SNAPSHOT_MAGIC)
    values = r.unpack(f"{len(_GRID_FIELDS)}I")
    try:
        config = GridConfig(**dict(zip(_GRID_FIELDS, values)))
    except ValueError as exc:
        raise FormatError(f"invalid grid config in snapshot: {exc}") from exc
    all_levels = []
    for _ in range(config.n_groups):
        levels = []
        for _ in range(config.n_resolutions):
            resolution, count = r.unpack("IQ")
            size, direct = level_size(resolution, config)
            if count != size:
                raise FormatError(f"level at resolution {resolution} has {count} entries, expected {size}")
            entries = r.f32(count * config.entry_dim).reshape(count, config.entry_dim)
            levels.append(Level(resolution, entries, direct))
        all_levels.append(levels)
    groups = []
    for levels in all_levels:
        (n_layers,) = r.unpack("I")
        mlp = []
        for _ in range(n_layers):
            n_out, n_in = r.unpack("II")
            w = r.f32(n_out * n_in).reshape(n_out, n_in)
            mlp.append(DenseLayer(w, r.f32(n_out)))
        groups.append(HashTableGroup(config, levels, mlp))
    return config, groups, _decode_sections(r)


def save_snapshot(path, config: GridConfig, groups: list[HashTableGroup], sections: Sections | None = None):
    Path(path).write_bytes(snapshot_bytes(config, groups, sections))


def load_snapshot(path):
    return parse_snapshot(Path(path).read_bytes())


# -- key codes --------------------------------------------------------------------------

def keycode_bytes(keys: np.ndarray) -> bytes:
    if keys.ndim != 3:
        raise ValueError(f"key grid must be (H, W, C), got {keys.shape}")
    return (KEYCODE_MAGIC + struct.pack("<I", FORMAT_VERSION) + struct.pack("<3I", *keys.shape)
            + _f32_bytes(keys))


def parse_keycode(data: bytes) -> np.ndarray:
    r = _Reader(data)
    _check_header(r, KEYCODE_MAGIC)
    h, w, c = r.unpack("3I")
    keys = r.f32(h * w * c).reshape(h, w, c)
    if not r.done:
        raise FormatError("trailing bytes after key-code payload")
    return keys


def save_keycode(path, keys: np.ndarray):
    Path(path).write_bytes(keycode_bytes(keys))


def load_keycode(path) -> np.ndarray:
    return parse_keycode(Path(path).read_bytes())
