import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flsmosaic.frameio import SonarFrame
from flsmosaic.geometry import BeamGeometry, Pose2D
from flsmosaic.mosaic import (
    GVM,
    PLAIN,
    BlendConfig,
    CellAccumulator,
    MosaicGrid,
    blend,
    blend_cell,
    export_gvm,
    finalize,
    scatter,
    to_fixed,
)
from flsmosaic.stats import ScoreFrame


def _topk_oracle(items, k):
    """Sort everything offered; keep the first k by (score desc, t asc, k asc)."""
    ranked = sorted(items, key=lambda c: (-c[1], c[2], c[3]))
    return ranked if k is None else ranked[:k]


def _fixed_mean(values):
    return (sum(int(to_fixed(v)) for v in values) / len(values)) / 2.0 ** 32


contribution = st.tuples(
    st.floats(0, 1), st.sampled_from([0.0, 0.1, 0.25, 0.5, 1.0]) | st.floats(0, 2),
    st.integers(1, 50), st.integers(0, 1000),
)


# --- single cell --------------------------------------------------------------


def test_empty_cell_blends_to_none():
    assert blend_cell(CellAccumulator()) is None


def test_single_contribution():
    c = CellAccumulator(3)
    c.offer(0.7, 0.2, 1, 5)
    assert blend_cell(c, BlendConfig(3, GVM)) == pytest.approx(0.7, abs=1e-9)
    assert blend_cell(c, BlendConfig(3, PLAIN)) == pytest.approx(0.7, abs=1e-9)


def test_topk_worked_example():
    c = CellAccumulator(2)
    for inten, score, t in [(0.2, 0.1, 1), (0.9, 0.8, 2), (0.5, 0.5, 3), (0.4, 0.05, 4)]:
        c.offer(inten, score, t, 0)
    assert blend_cell(c, BlendConfig(2, GVM)) == pytest.approx((0.9 + 0.5) / 2, abs=1e-9)
    assert blend_cell(c, BlendConfig(2, PLAIN)) == pytest.approx(2.0 / 4, abs=1e-9)
    assert [x.t for x in c.contributions] == [2, 3]


def test_ties_prefer_earlier_frame_then_lower_bin():
    c = CellAccumulator(2)
    c.offer(0.1, 1.0, 5, 3)
    c.offer(0.2, 1.0, 5, 1)
    c.offer(0.3, 1.0, 4, 9)
    assert [(x.t, x.k) for x in c.contributions] == [(4, 9), (5, 1)]


def test_capacity_validation():
    with pytest.raises(ValueError):
        CellAccumulator(0)
    with pytest.raises(ValueError):
        BlendConfig(l_thres=0)
    with pytest.raises(ValueError):
        BlendConfig(mode="median")


@settings(max_examples=200, deadline=None)
@given(st.lists(contribution, min_size=1, max_size=60), st.integers(1, 20))
def test_cell_topk_matches_full_sort(items, k):
    c = CellAccumulator(k)
    for it in items:
        c.offer(*it)
    ref = _topk_oracle(items, k)
    assert [(x.score, x.t, x.k) for x in c.contributions] == [(s, t, kk) for _, s, t, kk in ref]
    assert blend_cell(c, BlendConfig(k, GVM)) == _fixed_mean([i for i, *_ in ref])
    assert c.total_count == len(items)
    assert len(c.contributions) == min(k, len(items))


@settings(max_examples=100, deadline=None)
@given(st.lists(contribution, min_size=1, max_size=40), st.randoms(use_true_random=False))
def test_cell_is_order_independent(items, rnd):
    a, b = CellAccumulator(5), CellAccumulator(5)
    for it in items:
        a.offer(*it)
    shuffled = list(items)
    rnd.shuffle(shuffled)
    for it in shuffled:
        b.offer(*it)
    assert a.contributions == b.contributions
    assert a.fixed_sum == b.fixed_sum
    assert blend_cell(a) == blend_cell(b)


@settings(max_examples=100, deadline=None)
@given(st.lists(contribution, min_size=1, max_size=40))
def test_unbounded_topk_is_plain_average(items):
    c = CellAccumulator(None)
    for it in items:
        c.offer(*it)
    assert blend_cell(c, BlendConfig(None, GVM)) == blend_cell(c, BlendConfig(None, PLAIN))


@settings(max_examples=100, deadline=None)
@given(st.lists(contribution, min_size=1, max_size=40), st.integers(1, 10))
def test_blend_lies_within_retained_range(items, k):
    c = CellAccumulator(k)
    for it in items:
        c.offer(*it)
    kept = [x.intensity for x in c.contributions]
    v = blend_cell(c, BlendConfig(k, GVM))
    assert min(kept) - 1e-9 <= v <= max(kept) + 1e-9
    p = blend_cell(c, BlendConfig(k, PLAIN))
    assert min(i for i, *_ in items) - 1e-9 <= p <= max(i for i, *_ in items) + 1e-9


# --- vectorized grid ----------------------------------------------------------


def _random_offers(rng, n_cells, n):
    return (rng.integers(0, n_cells, n), rng.random(n), rng.choice([0.0, 0.5, 1.0], n) * rng.random(n).round(1),
            rng.integers(1, 6, n), rng.integers(0, 50, n))


@pytest.mark.parametrize("seed", range(8))
def test_grid_matches_per_cell_oracle(seed):
    rng = np.random.default_rng(seed)
    grid = MosaicGrid((3, 4), (0.0, 0.0), 1.0, l_thres=4)
    cells, inten, score, t, k = _random_offers(rng, 12, 300)
    # offer in several batches, as frames would arrive
    for lo in range(0, 300, 37):
        sl = slice(lo, lo + 37)
        grid.offer(cells[sl], inten[sl], score[sl], t[sl], k[sl])
    got = blend(grid, BlendConfig(4, GVM)).ravel()
    plain = blend(grid, BlendConfig(4, PLAIN)).ravel()
    for i in range(12):
        items = [(inten[j], score[j], t[j], k[j]) for j in np.flatnonzero(cells == i)]
        if not items:
            assert math.isnan(got[i])
            continue
        ref = _topk_oracle(items, 4)
        assert got[i] == _fixed_mean([x[0] for x in ref])
        assert plain[i] == _fixed_mean([x[0] for x in items])
        snap = grid.cell(i // 4, i % 4)
        assert [(c.score, c.t, c.k) for c in snap.contributions] == [(s, tt, kk) for _, s, tt, kk in ref]


def test_grid_order_independent_bitwise():
    rng = np.random.default_rng(11)
    cells, inten, score, t, k = _random_offers(rng, 20, 500)
    out = []
    for perm_seed in range(4):
        perm = np.random.default_rng(perm_seed).permutation(500) if perm_seed else np.arange(500)
        grid = MosaicGrid((4, 5), (0.0, 0.0), 1.0, l_thres=3)
        for chunk in np.array_split(perm, 7):
            grid.offer(cells[chunk], inten[chunk], score[chunk], t[chunk], k[chunk])
        out.append((blend(grid, BlendConfig(3)).tobytes(), blend(grid, BlendConfig(mode=PLAIN)).tobytes(),
                    grid.count.tobytes(), export_gvm(grid).tobytes()))
    assert all(o == out[0] for o in out)


def test_grid_retains_at_most_capacity():
    rng = np.random.default_rng(3)
    grid = MosaicGrid((2, 2), (0.0, 0.0), 1.0, l_thres=15)
    for _ in range(20):
        grid.offer(*_random_offers(rng, 4, 50))
        assert grid.filled.max() <= 15
    assert grid.count.sum() == 1000


def test_blend_refuses_more_than_retained():
    grid = MosaicGrid((1, 1), (0.0, 0.0), 1.0, l_thres=3)
    grid.offer([0], [0.5], [0.1], [1], [0])
    with pytest.raises(ValueError):
        blend(grid, BlendConfig(l_thres=5))


def test_offer_outside_grid():
    grid = MosaicGrid((1, 2), (0.0, 0.0), 1.0)
    with pytest.raises(IndexError):
        grid.offer([2], [0.5], [0.1], [1], [0])


def test_cell_centres():
    grid = MosaicGrid((10, 10), (-1.0, 2.0), 0.5)
    assert grid.cell_center(3, 4) == (1.0, 3.5)
    r, c = grid.world_to_cell(np.array([[1.0, 3.5], [1.2, 3.7]]))
    assert list(r) == [3, 3] and list(c) == [4, 4]


def test_export_gvm_scaling():
    grid = MosaicGrid((1, 3), (0.0, 0.0), 1.0)
    grid.offer([0, 1, 1], [0.2, 0.3, 0.4], [0.5, 0.25, 1.0], [1, 1, 2], [0, 1, 1])
    assert list(export_gvm(grid).ravel()) == [32768, 65535, 0]


# --- frames into the grid -----------------------------------------------------


def test_scatter_conserves_contributions():
    g = BeamGeometry(num_beams=32, samples_per_beam=40, max_range=4.0)
    rng = np.random.default_rng(0)
    poses = [Pose2D(0.3 * i, 0.1 * i, 0.05 * i) for i in range(5)]
    grid = MosaicGrid.covering(g, poses, 0.05)
    total = 0
    for t, p in enumerate(poses, 1):
        valid = rng.random(g.shape) > 0.1
        f = SonarFrame(rng.random(g.shape), t, g, valid)
        total += scatter(f, ScoreFrame(rng.random(g.shape), t), p, grid)
    assert grid.count.sum() == total
    res = finalize(grid)
    assert np.array_equal(res.mask, grid.count.reshape(grid.shape) > 0)
    assert np.isnan(res.values[~res.mask]).all() and not np.isnan(res.values[res.mask]).any()
    assert (res.mosaic[~res.mask] == 0).all()


def test_covering_grid_holds_every_bin():
    g = BeamGeometry(num_beams=16, samples_per_beam=20, max_range=3.0)
    poses = [Pose2D(1.0, -2.0, 2.5), Pose2D(-3.0, 4.0, -1.0)]
    grid = MosaicGrid.covering(g, poses, 0.1)
    for i, p in enumerate(poses, 1):
        scatter(SonarFrame(np.full(g.shape, 0.5), i, g), None, p, grid)  # must not raise
    assert (grid.origin[0] / 0.1) == pytest.approx(round(grid.origin[0] / 0.1))


def test_scatter_outside_grid_raises():
    g = BeamGeometry(num_beams=8, samples_per_beam=10, max_range=2.0)
    grid = MosaicGrid((5, 5), (0.0, 0.0), 0.1)
    with pytest.raises(IndexError):
        scatter(SonarFrame(np.zeros(g.shape), 1, g), None, Pose2D(0, 0, 0), grid)


def test_constant_world_gives_constant_mosaic():
    g = BeamGeometry(num_beams=24, samples_per_beam=30, max_range=3.0)
    poses = [Pose2D(0.2 * i, 0.0, 0.1 * i) for i in range(4)]
    grid = MosaicGrid.covering(g, poses, 0.05)
    rng = np.random.default_rng(1)
    for t, p in enumerate(poses, 1):
        scatter(SonarFrame(np.full(g.shape, 0.25), t, g), rng.random(g.shape), p, grid)
    for mode in (GVM, PLAIN):
        v = blend(grid, BlendConfig(mode=mode))
        assert np.nanmax(np.abs(v - 0.25)) < 1e-9
