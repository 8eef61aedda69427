import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from keygrid import analysis as an
from keygrid import hashgrid as hg
from keygrid import trainer as tr
from keygrid.hashgrid import GridConfig

CFG = GridConfig(n_groups=1, n_resolutions=3, key_len=1, entry_dim=2, max_entries=2 ** 9,
                 r_min=3, r_max=12, out_dim_per_group=4, mlp_hidden=0)


@pytest.fixture(scope="module")
def group():
    return hg.build_group(CFG, 0)


# -- hit statistics ------------------------------------------------------------------------

def test_one_query_eight_increments():
    cfg = GridConfig(n_groups=1, n_resolutions=1, key_len=1, entry_dim=1, max_entries=2 ** 8,
                     r_min=4, r_max=4, out_dim_per_group=1, mlp_hidden=0)
    stats = an.collect_hits(hg.build_group(cfg, 0), np.array([[0.3, 0.6, 0.1]]))
    assert int(stats.counts[0].sum()) == 8
    assert np.count_nonzero(stats.counts[0]) == 8


def test_empty_stream(group):
    stats = an.collect_hits(group, np.zeros((0, 3)))
    assert stats.queries == 0 and all(not c.any() for c in stats.counts)
    assert all(r.hit_fraction == 0 for r in an.usage_report(stats))


def test_coupon_collector_direct_level():
    cfg = GridConfig(n_groups=1, n_resolutions=1, key_len=1, entry_dim=1, max_entries=2 ** 9,
                     r_min=6, r_max=6, out_dim_per_group=1, mlp_hidden=0)
    g = hg.build_group(cfg, 0)
    assert g.levels[0].direct
    n = 100 * len(g.levels[0].entries)
    stats = an.collect_hits(g, np.random.default_rng(0).uniform(size=(n, 3)))
    assert an.usage_report(stats)[0].hit_fraction == 1.0


def test_hit_conservation(group):
    q = np.random.default_rng(1).uniform(size=(777, 3))
    stats = an.collect_hits(group, [q[:300], q[300:]])
    assert stats.queries == 777
    for c in stats.counts:
        assert int(c.sum()) == 8 * 777


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 40), min_size=3, max_size=3), st.integers(0, 1000))
def test_merge_associative_commutative(sizes, seed):
    g = hg.build_group(CFG, 0)
    rng = np.random.default_rng(seed)
    parts = [an.collect_hits(g, rng.uniform(size=(n, 3))) for n in sizes]
    a, b, c = parts
    left = a.merge(b).merge(c)
    right = c.merge(a.merge(b))
    assert left.queries == right.queries
    for x, y in zip(left.counts, right.counts):
        assert np.array_equal(x, y)


def test_usage_report_hand_values():
    stats = an.HitStats([np.array([2, 2, 2, 2], dtype=np.uint64)], 1)
    row = an.usage_report(stats)[0]
    assert row.hit_fraction == 1 and row.std_hits == 0 and row.mean_hits == 2


def test_usage_csv_header():
    stats = an.HitStats([np.array([0, 3], dtype=np.uint64)], 1)
    rows = list(csv.reader(io.StringIO(an.usage_csv(an.usage_report(stats)))))
    assert rows[0] == ["level", "entries", "hit_fraction", "mean_hits", "std_hits"]
    assert float(rows[1][2]) == 0.5
    hist = list(csv.reader(io.StringIO(an.histogram_csv(stats.counts[0]))))
    assert hist == [["entry", "count"], ["0", "0"], ["1", "3"]]


# -- VQ baseline ---------------------------------------------------------------------------------

def test_vq_single_entry():
    f = np.random.default_rng(0).normal(size=(200, 3))
    cb = an.vq_train(f, 1, steps=2000, seed=0)
    assert cb.usage == 1.0
    np.testing.assert_allclose(cb.entries[0], f.mean(axis=0), atol=1e-6)


def test_vq_identical_features():
    f = np.tile([[0.2, 0.4]], (100, 1))
    cb = an.vq_train(f, 8, steps=20, seed=1)
    assert np.count_nonzero(cb.counts) == 1


def test_vq_far_init_low_usage():
    f = an.clustered_features(seed=0)
    cb = an.vq_train(f, 64, steps=50, seed=0, init=an.far_init(f, 64, seed=0))
    assert cb.usage <= 0.25


def test_vq_dead_entries_stay_put():
    f = an.clustered_features(seed=3)
    init = an.far_init(f, 16, seed=3)
    cb = an.vq_train(f, 16, steps=30, seed=3, init=init)
    dead = cb.counts == 0
    assert dead.any()
    np.testing.assert_array_equal(cb.entries[dead], init[dead])


def test_vq_rejects_empty():
    with pytest.raises(ValueError):
        an.vq_train(np.zeros((0, 3)), 4, 1, 0)
    with pytest.raises(ValueError):
        an.vq_train(np.zeros((5, 3)), 0, 1, 0)


# -- F1 -------------------------------------------------------------------------------------------

def test_f1_values():
    assert an.f1(0.5, 0.5) == 0.5
    assert abs(an.f1(0.73, 0.50) - 0.593) <= 5e-4
    assert abs(an.f1(0.78, 0.41) - 0.537) <= 5e-4


def test_f1_rejects():
    with pytest.raises(ValueError):
        an.f1(0, 0)
    with pytest.raises(ValueError):
        an.f1(1.2, 0.5)


@settings(max_examples=200)
@given(st.floats(0, 1), st.floats(0, 1))
def test_f1_bounds(p, r):
    if p == 0 and r == 0:
        return
    v = an.f1(p, r)
    assert v == pytest.approx(an.f1(r, p))
    assert v <= (p + r) / 2 + 1e-12
    assert v <= 2 * min(p, r) + 1e-12


# -- sweep ----------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_ckpt():
    cfg = tr.GRADCHECK_CONFIG.replace(n_images=4)
    return tr.init_checkpoint(cfg), tr.synthetic_images(4, cfg.image_size, cfg.channels, seed=0)


def test_sweep_amplitude_zero_is_eval_loss(tiny_ckpt):
    ckpt, images = tiny_ckpt
    rows = an.precision_sweep(ckpt, images, [0.0], seed=0)
    assert rows[0][1] == pytest.approx(tr.evaluate(ckpt, images), rel=1e-6)


def test_sweep_deterministic_and_ascending(tiny_ckpt):
    ckpt, images = tiny_ckpt
    a = an.precision_sweep(ckpt, images, [0.0, 0.05, 0.1], seed=4)
    assert a == an.precision_sweep(ckpt, images, [0.0, 0.05, 0.1], seed=4)
    with pytest.raises(ValueError):
        an.precision_sweep(ckpt, images, [0.1, 0.0], seed=0)
    rows = list(csv.reader(io.StringIO(an.sweep_csv(a))))
    assert rows[0] == ["amplitude", "eval_loss", "ratio"] and float(rows[1][2]) == 1.0
