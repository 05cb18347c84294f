"""Global mosaic accumulation and blending.

Every valid polar bin of every frame is forward-scattered to the nearest
cell of a Cartesian grid. Each cell keeps

* the number of contributions ever offered and their intensity sum, which
  give the plain average, and
* the best ``l_thres`` contributions ranked by score (descending), then
  timestamp and bin index (ascending), which give the score-selected blend.

The retained set is therefore the exact top-K of everything offered, held in
O(K) memory per cell, and it does not depend on the order frames arrive in.
Intensity sums are accumulated in 32.32 fixed point so that they are also
independent of summation order.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .frameio import SonarFrame
from .geometry import BeamGeometry, Pose2D
from .stats import ScoreFrame

PLAIN = "plain_average"
GVM = "gvm_topk"
_FIXED = float(1 << 32)
_TSHIFT = 32


def to_fixed(intensity) -> np.ndarray:
    """Intensity in [0, 1] -> int64 with 32 fractional bits."""
    return np.rint(np.asarray(intensity, dtype=np.float64) * _FIXED).astype(np.int64)


def _fixed_mean(total, n):
    return (np.asarray(total, dtype=np.float64) / n) / _FIXED


@dataclass(frozen=True)
class BlendConfig:
    """``l_thres=None`` keeps every contribution (top-K with K = infinity)."""

    l_thres: int | None = 15
    mode: str = GVM

    def __post_init__(self):
        if self.l_thres is not None and self.l_thres < 1:
            raise ValueError("l_thres must be >= 1")
        if self.mode not in (PLAIN, GVM):
            raise ValueError(f"unknown blend mode {self.mode!r}")


@dataclass(frozen=True, order=True)
class Contribution:
    intensity: float
    score: float
    t: int
    k: int

    def rank_key(self):
        """Sort key putting the most informative contribution first."""
        return (-self.score, self.t, self.k)


class CellAccumulator:
    """Bounded top-K store for a single mosaic cell."""

    def __init__(self, capacity: int | None = 15):
        if capacity is not None and capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.total_count = 0
        self.fixed_sum = 0
        # min-heap whose root is the worst retained contribution
        self._heap: list[tuple[float, int, int, float]] = []

    @property
    def running_sum(self) -> float:
        return self.fixed_sum / _FIXED

    def offer(self, intensity: float, score: float, t: int, k: int) -> None:
        self.total_count += 1
        self.fixed_sum += int(to_fixed(intensity))
        item = (float(score), -int(t), -int(k), float(intensity))
        if self.capacity is None or len(self._heap) < self.capacity:
            heapq.heappush(self._heap, item)
        elif item[:3] > self._heap[0][:3]:
            heapq.heapreplace(self._heap, item)

    @property
    def contributions(self) -> list[Contribution]:
        """Retained contributions, best first."""
        items = sorted(self._heap, reverse=True)
        return [Contribution(i, s, -t, -k) for s, t, k, i in items]


def blend_cell(cell: CellAccumulator, cfg: BlendConfig = BlendConfig()) -> float | None:
    """Blend one cell; ``None`` marks a cell nothing was scattered into."""
    if cell.total_count == 0:
        return None
    if cfg.mode == PLAIN:
        return float(_fixed_mean(cell.fixed_sum, cell.total_count))
    kept = cell.contributions
    if cfg.l_thres is not None:
        kept = kept[: cfg.l_thres]
    return float(_fixed_mean(sum(int(to_fixed(c.intensity)) for c in kept), len(kept)))


@dataclass
class MosaicResult:
    values: np.ndarray  # float, NaN where empty
    mosaic: np.ndarray  # uint8
    mask: np.ndarray  # bool, cell has coverage
    coverage: np.ndarray  # int64 contribution counts


class MosaicGrid:
    """Cartesian accumulator; cell (row, col) is centred on
    ``(x, y) = origin + meters_per_pixel * (col, row)``."""

    def __init__(self, shape: tuple[int, int], origin: tuple[float, float], meters_per_pixel: float,
                 l_thres: int | None = 15):
        rows, cols = (int(n) for n in shape)
        if rows < 1 or cols < 1:
            raise ValueError("grid needs at least one cell")
        if meters_per_pixel <= 0:
            raise ValueError("meters_per_pixel must be positive")
        if l_thres is not None and l_thres < 1:
            raise ValueError("l_thres must be >= 1")
        self.shape = (rows, cols)
        self.origin = (float(origin[0]), float(origin[1]))
        self.meters_per_pixel = float(meters_per_pixel)
        self.capacity = l_thres
        n = rows * cols
        self.count = np.zeros(n, dtype=np.int64)
        self.fixed_sum = np.zeros(n, dtype=np.int64)
        self.max_score = np.full(n, -np.inf)
        if l_thres is not None:
            self.slot_intensity = np.zeros((n, l_thres))
            self.slot_score = np.zeros((n, l_thres))
            self.slot_order = np.zeros((n, l_thres), dtype=np.int64)

    @classmethod
    def covering(cls, geometry: BeamGeometry, poses: Sequence[Pose2D], meters_per_pixel: float,
                 l_thres: int | None = 15) -> "MosaicGrid":
        """Smallest mpp-aligned grid holding every fan footprint, padded by one cell."""
        outline = geometry.fan_outline(n_arc=361)
        outline = np.concatenate([outline, [[geometry.max_range, 0.0]]])
        lo = np.array([np.inf, np.inf])
        hi = -lo
        for p in poses:
            pts = p.as_transform().apply_array(outline)
            lo = np.minimum(lo, pts.min(axis=0))
            hi = np.maximum(hi, pts.max(axis=0))
        mpp = meters_per_pixel
        c0, c1 = math.floor(lo[0] / mpp) - 1, math.ceil(hi[0] / mpp) + 1
        r0, r1 = math.floor(lo[1] / mpp) - 1, math.ceil(hi[1] / mpp) + 1
        return cls((r1 - r0 + 1, c1 - c0 + 1), (c0 * mpp, r0 * mpp), mpp, l_thres)

    @property
    def filled(self) -> np.ndarray:
        """Retained contributions per cell."""
        if self.capacity is None:
            return self.count.copy()
        return np.minimum(self.count, self.capacity)

    def world_to_cell(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        col = np.rint((xy[..., 0] - self.origin[0]) / self.meters_per_pixel).astype(np.int64)
        row = np.rint((xy[..., 1] - self.origin[1]) / self.meters_per_pixel).astype(np.int64)
        return row, col

    def cell_center(self, row, col) -> tuple[float, float]:
        return (self.origin[0] + col * self.meters_per_pixel, self.origin[1] + row * self.meters_per_pixel)

    def offer(self, cells, intensity, score, t, k) -> None:
        """Vectorized offer of contributions to flat cell indices."""
        cells = np.asarray(cells, dtype=np.int64).ravel()
        if cells.size == 0:
            return
        intensity = np.broadcast_to(np.asarray(intensity, dtype=np.float64), cells.shape).ravel()
        score = np.broadcast_to(np.asarray(score, dtype=np.float64), cells.shape).ravel()
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), cells.shape).ravel()
        k = np.broadcast_to(np.asarray(k, dtype=np.int64), cells.shape).ravel()
        if cells.min() < 0 or cells.max() >= self.count.size:
            raise IndexError("contribution outside the mosaic grid")
        order_key = (t << _TSHIFT) | k

        idx = np.lexsort((order_key, -score, cells))
        cells, intensity, score, order_key = cells[idx], intensity[idx], score[idx], order_key[idx]
        starts = np.flatnonzero(np.r_[True, cells[1:] != cells[:-1]])
        ucells = cells[starts]
        sizes = np.diff(np.r_[starts, cells.size])
        count_before = self.count[ucells].copy()
        self.count[ucells] += sizes
        self.fixed_sum[ucells] += np.add.reduceat(to_fixed(intensity), starts)
        np.maximum.at(self.max_score, ucells, score[starts])
        if self.capacity is None:
            return
        self._merge(cells, intensity, score, order_key, starts, ucells, sizes, count_before)

    def _merge(self, cells, intensity, score, order_key, starts, ucells, sizes, count_before):
        K = self.capacity
        rank = np.arange(cells.size) - np.repeat(starts, sizes)
        # Only the best K new entries of a cell can survive.
        keep = rank < K
        filled_before = np.minimum(count_before, K)
        full = np.repeat(filled_before == K, sizes)
        if full.any():
            worst = np.repeat(np.where(filled_before > 0, filled_before - 1, 0), sizes)
            wc = cells
            ws = self.slot_score[wc, worst]
            wo = self.slot_order[wc, worst]
            better = (score > ws) | ((score == ws) & (order_key < wo))
            keep &= ~full | better
        if not keep.any():
            return
        cells, intensity, score, order_key = cells[keep], intensity[keep], score[keep], order_key[keep]
        touched = np.unique(cells)
        fb = np.minimum(count_before[np.searchsorted(ucells, touched)], K)
        old_cells = np.repeat(touched, fb)
        old_pos = np.arange(old_cells.size) - np.repeat(np.cumsum(fb) - fb, fb)
        all_cells = np.concatenate([old_cells, cells])
        all_int = np.concatenate([self.slot_intensity[old_cells, old_pos], intensity])
        all_score = np.concatenate([self.slot_score[old_cells, old_pos], score])
        all_order = np.concatenate([self.slot_order[old_cells, old_pos], order_key])
        idx = np.lexsort((all_order, -all_score, all_cells))
        all_cells, all_int, all_score, all_order = all_cells[idx], all_int[idx], all_score[idx], all_order[idx]
        st = np.flatnonzero(np.r_[True, all_cells[1:] != all_cells[:-1]])
        sz = np.diff(np.r_[st, all_cells.size])
        pos = np.arange(all_cells.size) - np.repeat(st, sz)
        sel = pos < K
        c, p = all_cells[sel], pos[sel]
        self.slot_intensity[c, p] = all_int[sel]
        self.slot_score[c, p] = all_score[sel]
        self.slot_order[c, p] = all_order[sel]

    def cell(self, row: int, col: int) -> CellAccumulator:
        """Snapshot of one cell as a :class:`CellAccumulator`."""
        i = row * self.shape[1] + col
        acc = CellAccumulator(self.capacity)
        acc.total_count = int(self.count[i])
        acc.fixed_sum = int(self.fixed_sum[i])
        if self.capacity is not None:
            for j in range(int(self.filled[i])):
                o = int(self.slot_order[i, j])
                acc._heap.append((float(self.slot_score[i, j]), -(o >> _TSHIFT), -(o & 0xFFFFFFFF),
                                  float(self.slot_intensity[i, j])))
            heapq.heapify(acc._heap)
        return acc


def scatter(frame: SonarFrame, scores: ScoreFrame | np.ndarray | None, pose: Pose2D, grid: MosaicGrid) -> int:
    """Forward-scatter every valid bin of ``frame`` into ``grid``.

    Returns the number of contributions offered. With ``scores=None`` all
    contributions get score 0 (useful for plain-average-only runs).
    """
    g = frame.geometry
    valid = frame.valid_mask.ravel()
    u, v = g.bin_points()
    pts = np.stack([u.ravel()[valid], v.ravel()[valid]], axis=1)
    world = pose.as_transform().apply_array(pts)
    row, col = grid.world_to_cell(world)
    rows, cols = grid.shape
    if row.size and (row.min() < 0 or col.min() < 0 or row.max() >= rows or col.max() >= cols):
        raise IndexError(f"frame t={frame.timestamp_index} falls outside the mosaic grid")
    k = np.flatnonzero(valid)
    if scores is None:
        s = np.zeros(k.size)
    else:
        s = np.asarray(getattr(scores, "values", scores), dtype=np.float64).ravel()[valid]
    grid.offer(row * cols + col, frame.intensities.ravel()[valid], s, frame.timestamp_index, k)
    return int(k.size)


def blend(grid: MosaicGrid, cfg: BlendConfig = BlendConfig()) -> np.ndarray:
    """Blended float image, NaN for empty cells."""
    out = np.full(grid.count.size, np.nan)
    has = grid.count > 0
    if cfg.mode == PLAIN or cfg.l_thres is None:
        # the top-K of everything with K unbounded is everything
        out[has] = _fixed_mean(grid.fixed_sum[has], grid.count[has])
    else:
        if grid.capacity is None or grid.capacity < cfg.l_thres:
            raise ValueError(f"grid retains {grid.capacity} contributions per cell, blend asks for {cfg.l_thres}")
        k = cfg.l_thres
        n = np.minimum(grid.count, k)
        slots = np.arange(grid.capacity)[None, :] < n[:, None]
        fixed = np.where(slots, to_fixed(grid.slot_intensity), 0).sum(axis=1)
        out[has] = _fixed_mean(fixed[has], n[has])
    return out.reshape(grid.shape)


def finalize(grid: MosaicGrid, cfg: BlendConfig = BlendConfig()) -> MosaicResult:
    values = blend(grid, cfg)
    mask = grid.count.reshape(grid.shape) > 0
    mosaic = np.where(mask, np.rint(np.nan_to_num(values) * 255.0), 0).astype(np.uint8)
    return MosaicResult(values, mosaic, mask, grid.count.reshape(grid.shape).copy())


def export_gvm(grid: MosaicGrid) -> np.ndarray:
    """Per-cell maximum retained score as a 16-bit image scaled by the global maximum."""
    best = np.where(grid.count > 0, grid.max_score, 0.0)
    top = best.max(initial=0.0)
    if top <= 0:
        return np.zeros(grid.shape, dtype=np.uint16)
    return np.rint(best / top * 65535.0).astype(np.uint16).reshape(grid.shape)


def scatter_all(frames: Iterable[SonarFrame], scores: Iterable[ScoreFrame | None], poses: Iterable[Pose2D],
                grid: MosaicGrid) -> int:
    total = 0
    for f, s, p in zip(frames, scores, poses):
        total += scatter(f, s, p, grid)
    return total
