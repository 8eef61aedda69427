import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from keygrid import formats as fm
from keygrid import hashgrid as hg
from keygrid import trainer as tr
from keygrid.hashgrid import GridConfig

CFG = GridConfig(n_groups=2, n_resolutions=2, key_len=1, entry_dim=2, max_entries=2 ** 8,
                 r_min=2, r_max=8, out_dim_per_group=3, mlp_hidden=4)


def groups():
    return [hg.build_group(CFG, s) for s in range(CFG.n_groups)]


def test_snapshot_roundtrip_byte_exact():
    gs = groups()
    sec = fm.Sections(tensors={"a": np.arange(6, dtype=np.float32).reshape(2, 3)},
                      text={"note": "héllo"}, ints={"n": -3}, floats={"x": 0.1})
    data = fm.snapshot_bytes(CFG, gs, sec)
    cfg, loaded, sec2 = fm.parse_snapshot(data)
    assert cfg == CFG
    assert fm.snapshot_bytes(cfg, loaded, sec2) == data
    for a, b in zip(gs, loaded):
        for la, lb in zip(a.levels, b.levels):
            assert la.entries.tobytes() == lb.entries.tobytes() and la.direct == lb.direct
    assert sec2.text == {"note": "héllo"} and sec2.ints == {"n": -3} and sec2.floats == {"x": 0.1}


def test_snapshot_file_io(tmp_path):
    gs = groups()
    fm.save_snapshot(tmp_path / "s.brht", CFG, gs)
    cfg, loaded, _ = fm.load_snapshot(tmp_path / "s.brht")
    assert fm.snapshot_bytes(cfg, loaded) == fm.snapshot_bytes(CFG, gs)


def test_snapshot_header_layout():
    data = fm.snapshot_bytes(CFG, groups())
    assert data[:4] == b"BRHT"
    assert struct.unpack("<I", data[4:8])[0] == fm.FORMAT_VERSION
    assert struct.unpack("<9I", data[8:44]) == (2, 2, 1, 2, 2 ** 8, 2, 8, 3, 4)


def test_snapshot_bad_magic():
    data = bytearray(fm.snapshot_bytes(CFG, groups()))
    data[:4] = b"XXXX"
    with pytest.raises(fm.BadMagicError):
        fm.parse_snapshot(bytes(data))


def test_snapshot_bad_version_and_truncation():
    data = fm.snapshot_bytes(CFG, groups())
    with pytest.raises(fm.FormatError):
        fm.parse_snapshot(data[:4] + struct.pack("<I", 99) + data[8:])
    with pytest.raises(fm.FormatError):
        fm.parse_snapshot(data[:-5])


def test_snapshot_entry_count_mismatch():
    data = bytearray(fm.snapshot_bytes(CFG, groups()))
    # first level record starts after magic, version and the 9 config words
    struct.pack_into("<Q", data, 44 + 4, 5)
    with pytest.raises(fm.FormatError):
        fm.parse_snapshot(bytes(data))


def test_keycode_payload_length():
    keys = np.zeros((8, 8, 2), dtype=np.float32)
    data = fm.keycode_bytes(keys)
    assert len(data) == 4 + 4 + 12 + 8 * 8 * 2 * 4


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=3, max_dims=3, max_side=5),
                  elements=st.floats(0, 1, width=32)))
def test_keycode_roundtrip(keys):
    data = fm.keycode_bytes(keys)
    back = fm.parse_keycode(data)
    assert back.tobytes() == keys.tobytes() and back.shape == keys.shape
    assert fm.keycode_bytes(back) == data


def test_keycode_bad_magic_and_trailing():
    data = fm.keycode_bytes(np.zeros((2, 2, 1), dtype=np.float32))
    with pytest.raises(fm.BadMagicError):
        fm.parse_keycode(b"BRHT" + data[4:])
    with pytest.raises(fm.FormatError):
        fm.parse_keycode(data + b"\0")


def test_checkpoint_roundtrip_byte_exact(tmp_path):
    cfg = tr.GRADCHECK_CONFIG.replace(steps=3)
    images = tr.synthetic_images(2, cfg.image_size, cfg.channels, seed=0)
    ckpt = tr.train(cfg, images).checkpoint
    tr.save_checkpoint(tmp_path / "c.brht", ckpt)
    back = tr.load_checkpoint(tmp_path / "c.brht")
    assert tr.checkpoint_bytes(back) == (tmp_path / "c.brht").read_bytes()
    assert back.step == 3 and back.config == cfg
    a, _ = tr.reconstruct(ckpt, images)
    b, _ = tr.reconstruct(back, images)
    assert a.tobytes() == b.tobytes()


def test_checkpoint_requires_config_section():
    data = fm.snapshot_bytes(tr.GRADCHECK_CONFIG.grid_config(),
                             tr.init_checkpoint(tr.GRADCHECK_CONFIG).model.groups)
    with pytest.raises(fm.FormatError):
        tr.parse_checkpoint(data)
