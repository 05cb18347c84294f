"""End-to-end mosaicing run: frames -> poses -> scores -> blended mosaic.

The run makes two passes over the frame directory so that memory stays at
O(long window + grid) rather than O(frames):

1. poses, read from a file or chained from pairwise registration;
2. CLAHE, local variance and the streaming long/short window scorer, with
   each frame scattered into the mosaic grid as soon as its score is ready.

Plain-average and score-selected mosaics come from the same grid, hence
from identical poses.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import cv2
import numpy as np
from scipy import ndimage

from . import frameio
from .frameio import SonarFrame
from .geometry import BeamGeometry, Pose2D, Transform2D, pose_chain, relative_transform
from .mosaic import GVM, PLAIN, BlendConfig, MosaicGrid, export_gvm, finalize, scatter
from .registration import RegistrationConfig, register_pair
from .stats import StatConfig, StreamingScoreBuffer, local_variance

log = logging.getLogger(__name__)

POSE_SOURCES = ("odometry", "registration", "file")
MODES = ("plain", "gvm", "both")
ODOMETRY_FILES = ("poses_odom.csv", "odometry.csv", "poses.csv")
DEFAULT_MPP = 0.0403


class PipelineError(RuntimeError):
    """A stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunConfig:
    """Everything a run needs.

    ``input_dir`` is either a directory of frames or a dataset directory
    with a ``frames/`` subdirectory (as written by the simulator). With
    ``geometry_path=None`` a ``geometry.txt`` next to the frames is used if
    present, else the default geometry with the frame shape.
    """

    input_dir: Path
    out_dir: Path
    geometry_path: Path | None = None
    pose_source: str = "odometry"
    pose_file: Path | None = None
    mode: str = "both"
    meters_per_pixel: float = DEFAULT_MPP
    clahe: bool = True
    clahe_clip: float = 2.0
    clahe_tiles: tuple[int, int] = (8, 8)
    stats: StatConfig = field(default_factory=StatConfig)
    l_thres: int = 15
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    dump_scores: Path | None = None
    threads: int = 1
    stride: int = 1
    mask_blind: bool = True

    def __post_init__(self):
        self.input_dir = Path(self.input_dir)
        self.out_dir = Path(self.out_dir)
        if self.pose_source not in POSE_SOURCES:
            raise ValueError(f"pose source must be one of {POSE_SOURCES}, got {self.pose_source!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.input_dir.is_dir():
            raise FileNotFoundError(f"input directory {self.input_dir} does not exist")
        if self.geometry_path is not None and not Path(self.geometry_path).is_file():
            raise FileNotFoundError(f"geometry file {self.geometry_path} does not exist")
        if self.pose_source == "file":
            if self.pose_file is None or not Path(self.pose_file).is_file():
                raise FileNotFoundError(f"pose file {self.pose_file} does not exist")
        if not self.meters_per_pixel > 0:
            raise ValueError("meters_per_pixel must be positive")
        if self.threads < 1 or self.stride < 1:
            raise ValueError("threads and stride must be >= 1")
        BlendConfig(self.l_thres)  # validates l_thres

    @property
    def frames_dir(self) -> Path:
        sub = self.input_dir / "frames"
        return sub if sub.is_dir() else self.input_dir

    def find_geometry(self) -> Path | None:
        if self.geometry_path is not None:
            return Path(self.geometry_path)
        for d in (self.input_dir, self.frames_dir, self.frames_dir.parent):
            if (d / "geometry.txt").is_file():
                return d / "geometry.txt"
        return None

    def find_odometry(self) -> Path | None:
        for d in (self.input_dir, self.frames_dir.parent):
            for name in ODOMETRY_FILES:
                if (d / name).is_file():
                    return d / name
        return None

    def blend_modes(self) -> list[str]:
        return {"plain": [PLAIN], "gvm": [GVM], "both": [PLAIN, GVM]}[self.mode]


@dataclass
class RunReport:
    frames: int
    pose_source: str
    pose_fallbacks: int
    low_confidence: int
    warnings: list[str]
    timing: dict[str, float]
    grid_shape: tuple[int, int]
    grid_origin: tuple[float, float]
    meters_per_pixel: float
    contributions: int
    occupancy_histogram: dict[str, int]
    max_retained_per_cell: int
    peak_buffered_frames: int
    checksums: dict[str, str]
    outputs: dict[str, str]
    pose_disagreement: list[float] | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


@contextlib.contextmanager
def _stage(name: str, timing: dict[str, float]):
    start = time.perf_counter()
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, exc) from exc
    finally:
        timing[name] = timing.get(name, 0.0) + time.perf_counter() - start


def _checksum(a: np.ndarray) -> str:
    a = np.ascontiguousarray(a)
    h = hashlib.sha256()
    h.update(str((a.dtype.str, a.shape)).encode())
    h.update(a.tobytes())
    return h.hexdigest()


def _write_png(path: Path, img: np.ndarray) -> None:
    if not cv2.imwrite(str(path), img):
        raise OSError(f"failed to write {path}")


# --- pass 1: poses ------------------------------------------------------------


def _poses_by_index(records: Sequence[frameio.PoseRecord]) -> dict[int, Pose2D]:
    return {r.timestamp_index: r.pose for r in records}


def _lookup(poses: dict[int, Pose2D], ts: Sequence[int], what: str) -> list[Pose2D]:
    missing = [t for t in ts if t not in poses]
    if missing:
        raise KeyError(f"{what} has no pose for frame(s) {missing[:5]}")
    return [poses[t] for t in ts]


def _prepared(frames: Iterable[SonarFrame], cfg: RunConfig) -> Iterator[SonarFrame]:
    for f in frames:
        yield frameio.clahe(f, cfg.clahe_clip, cfg.clahe_tiles) if cfg.clahe else f


def _chunks(it: Iterable, n: int) -> Iterator[list]:
    chunk = []
    for x in it:
        chunk.append(x)
        if len(chunk) == n:
            yield chunk
            chunk = []
    if chunk:
        yield chunk


def registration_chain(
    frames: Iterable[SonarFrame],
    rcfg: RegistrationConfig = RegistrationConfig(),
    odometry: dict[int, Pose2D] | None = None,
    initial: Pose2D = Pose2D(),
    threads: int = 1,
) -> tuple[list[int], list[Pose2D], int, list[float]]:
    """Chain pairwise registrations into poses.

    Low-confidence pairs fall back to the odometry increment when odometry
    is given, else to the identity. Returns (timestamps, poses, number of
    fallbacks, per-pair confidence). Pairs are registered in chunks of
    ``4 * threads`` so only a few frames are held at once; the result does
    not depend on ``threads``.
    """
    ts: list[int] = []
    transforms: list[Transform2D] = []
    confidences: list[float] = []
    fallbacks = 0
    prev: SonarFrame | None = None

    def pairs():
        nonlocal prev
        for f in frames:
            if prev is not None:
                yield prev, f
            else:
                ts.append(f.timestamp_index)
            prev = f

    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for chunk in _chunks(pairs(), 4 * threads):
            if pool is None:
                results = [register_pair(a, b, rcfg) for a, b in chunk]
            else:
                results = list(pool.map(lambda p: register_pair(p[0], p[1], rcfg), chunk))
            for (a, b), res in zip(chunk, results):
                ts.append(b.timestamp_index)
                confidences.append(res.confidence)
                t = res.transform
                if res.low_confidence:
                    fallbacks += 1
                    if odometry is not None and a.timestamp_index in odometry and b.timestamp_index in odometry:
                        t = relative_transform(odometry[a.timestamp_index], odometry[b.timestamp_index])
                        log.warning("frames %d->%d: low-confidence registration (%.3f), using odometry",
                                    a.timestamp_index, b.timestamp_index, res.confidence)
                    else:
                        t = Transform2D.identity()
                        log.warning("frames %d->%d: low-confidence registration (%.3f), using identity",
                                    a.timestamp_index, b.timestamp_index, res.confidence)
                transforms.append(t)
    finally:
        if pool is not None:
            pool.shutdown()
    return ts, pose_chain(transforms, initial), fallbacks, confidences


# --- pass 2: scores and scatter -----------------------------------------------


def _variance_stream(frames: Iterable[SonarFrame], cfg: RunConfig):
    """(frame, variance) pairs in input order; per-frame work spread over threads."""
    def work(f):
        return f, local_variance(f, cfg.stats)

    prepared = _prepared(frames, cfg)
    if cfg.threads == 1:
        for f in prepared:
            yield work(f)
        return
    with ThreadPoolExecutor(cfg.threads) as pool:
        for chunk in _chunks(prepared, 2 * cfg.threads):
            yield from pool.map(work, chunk)


def score_and_scatter(
    frames: Iterable[SonarFrame],
    poses: dict[int, Pose2D],
    grid: MosaicGrid,
    cfg: RunConfig,
    dump_dir: Path | None = None,
) -> tuple[int, int, int]:
    """Stream frames through the scorer into ``grid``.

    Returns (frames scattered, contributions offered, peak frames buffered).
    """
    buf = StreamingScoreBuffer(cfg.stats)
    n_frames = contributions = 0
    dumped: list[tuple[Path, float]] = []

    def consume(ready):
        nonlocal n_frames, contributions
        for frame, score in ready:
            contributions += scatter(frame, score, poses[frame.timestamp_index], grid)
            n_frames += 1
            if dump_dir is not None:
                path = dump_dir / f"score_{frame.timestamp_index:05d}.npy"
                np.save(path, score.values.astype(np.float64))
                dumped.append((path, float(score.values.max(initial=0.0))))

    for frame, var in _variance_stream(frames, cfg):
        if frame.timestamp_index not in poses:
            raise KeyError(f"no pose for frame {frame.timestamp_index}")
        consume(buf.push(var, frame))
    consume(buf.flush())
    if dump_dir is not None:
        _dump_scores(dumped)
    return n_frames, contributions, buf.peak_buffered


def _dump_scores(dumped: list[tuple[Path, float]]) -> None:
    """Rewrite the raw score dumps as 16-bit PNGs scaled by the global maximum."""
    top = max((m for _, m in dumped), default=0.0)
    for path, _ in dumped:
        s = np.load(path)
        img = np.zeros(s.shape, np.uint16) if top <= 0 else np.rint(s / top * 65535.0).astype(np.uint16)
        _write_png(path.with_suffix(".png"), img)
        path.unlink()


# --- run ----------------------------------------------------------------------


def _occupancy_histogram(count: np.ndarray, l_thres: int) -> dict[str, int]:
    edges = [0, 1, 2, 5, 10, l_thres, l_thres + 1, 50, 100, 500, 1000]
    edges = sorted(set(edges))
    hist = {}
    for lo, hi in zip(edges, edges[1:] + [None]):
        sel = count >= lo if hi is None else (count >= lo) & (count < hi)
        key = f"{lo}+" if hi is None else (str(lo) if hi == lo + 1 else f"{lo}-{hi - 1}")
        hist[key] = int(sel.sum())
    return hist


def run(cfg: RunConfig) -> RunReport:
    """Execute the pipeline and write its artifacts to ``cfg.out_dir``."""
    timing: dict[str, float] = {}
    warnings: list[str] = []

    with _stage("setup", timing):
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        gpath = cfg.find_geometry()
        if gpath is not None:
            geometry = frameio.read_geometry(gpath)
        else:
            first = frameio.frame_files(cfg.frames_dir)
            if not first:
                raise FileNotFoundError(f"no frames in {cfg.frames_dir}")
            codes, _ = frameio.read_image(first[0])
            geometry = replace(BeamGeometry(), samples_per_beam=codes.shape[0], num_beams=codes.shape[1])
        odom_path = cfg.find_odometry()
        odometry = _poses_by_index(frameio.read_poses(odom_path)) if odom_path is not None else None

    def frames():
        return frameio.iter_sequence(cfg.frames_dir, geometry, cfg.mask_blind, cfg.stride)

    fallbacks = low = 0
    disagreement = None
    with _stage("poses", timing):
        if cfg.pose_source == "file":
            poses = _poses_by_index(frameio.read_poses(cfg.pose_file, "file"))
        elif cfg.pose_source == "odometry":
            if odometry is None:
                raise FileNotFoundError(f"no odometry file ({', '.join(ODOMETRY_FILES)}) next to {cfg.frames_dir}")
            poses = odometry
        else:
            ts = [t for t, _ in frameio._strided(cfg.frames_dir, cfg.stride)]
            initial = odometry[ts[0]] if odometry is not None and ts[0] in odometry else Pose2D()
            ts, chain, fallbacks, conf = registration_chain(
                _prepared(frames(), cfg), cfg.registration, odometry, initial, cfg.threads)
            low = fallbacks
            if low:
                warnings.append(f"{low} low-confidence registration(s) replaced by "
                                f"{'odometry' if odometry is not None else 'identity'}")
            poses = dict(zip(ts, chain))
            if odometry is not None and all(t in odometry for t in ts):
                disagreement = [math.hypot(poses[t].x - odometry[t].x, poses[t].y - odometry[t].y) for t in ts]
        ts = [t for t, _ in frameio._strided(cfg.frames_dir, cfg.stride)]
        used = _lookup(poses, ts, f"pose source '{cfg.pose_source}'")
        frameio.write_poses(used, cfg.out_dir / "poses_used.csv")
        with open(cfg.out_dir / "poses_used.csv") as fh:
            lines = fh.read().splitlines()
        # keep the original frame indices in the first column
        with open(cfg.out_dir / "poses_used.csv", "w") as fh:
            fh.write(lines[0] + "\n")
            for t, line in zip(ts, lines[1:]):
                fh.write(f"{t}," + line.split(",", 1)[1] + "\n")

    with _stage("grid", timing):
        capacity = cfg.l_thres if GVM in cfg.blend_modes() else None
        grid = MosaicGrid.covering(geometry, used, cfg.meters_per_pixel, capacity)

    with _stage("scores+scatter", timing):
        dump_dir = None
        if cfg.dump_scores is not None:
            dump_dir = Path(cfg.dump_scores)
            dump_dir.mkdir(parents=True, exist_ok=True)
        n_frames, contributions, peak = score_and_scatter(frames(), poses, grid, cfg, dump_dir)

    outputs: dict[str, str] = {}
    checksums: dict[str, str] = {}
    with _stage("blend+write", timing):
        results = {}
        for mode in cfg.blend_modes():
            res = finalize(grid, BlendConfig(cfg.l_thres, mode))
            results[mode] = res
            name = "mosaic_plain.png" if mode == PLAIN else "mosaic_gvm.png"
            _write_png(cfg.out_dir / name, res.mosaic)
            outputs[mode] = name
            checksums[name] = _checksum(res.mosaic)
            checksums[f"{mode}_values"] = _checksum(np.nan_to_num(res.values, nan=-1.0))
        primary = results[GVM] if GVM in results else results[PLAIN]
        _write_png(cfg.out_dir / "mosaic.png", primary.mosaic)
        mask = primary.mask.astype(np.uint8) * 255
        _write_png(cfg.out_dir / "mosaic_mask.png", mask)
        coverage = np.minimum(primary.coverage, 65535).astype(np.uint16)
        _write_png(cfg.out_dir / "coverage.png", coverage)
        checksums["coverage.png"] = _checksum(coverage)
        outputs.update(mosaic="mosaic.png", mask="mosaic_mask.png", coverage="coverage.png")
        if GVM in results:
            gvm_img = export_gvm(grid)
            _write_png(cfg.out_dir / "gvm.png", gvm_img)
            outputs["gvm"] = "gvm.png"
            checksums["gvm.png"] = _checksum(gvm_img)
            np.save(cfg.out_dir / "mosaic_gvm.npy", results[GVM].values)
        if PLAIN in results:
            np.save(cfg.out_dir / "mosaic_plain.npy", results[PLAIN].values)

    count = grid.count
    report = RunReport(
        frames=n_frames,
        pose_source=cfg.pose_source,
        pose_fallbacks=fallbacks,
        low_confidence=low,
        warnings=warnings,
        timing={k: round(v, 4) for k, v in timing.items()},
        grid_shape=grid.shape,
        grid_origin=grid.origin,
        meters_per_pixel=grid.meters_per_pixel,
        contributions=contributions,
        occupancy_histogram=_occupancy_histogram(count, cfg.l_thres),
        max_retained_per_cell=int(grid.filled.max(initial=0)) if capacity is not None else 0,
        peak_buffered_frames=peak,
        checksums=checksums,
        outputs=outputs,
        pose_disagreement=disagreement,
    )
    for w in warnings:
        log.warning(w)
    (cfg.out_dir / "report.json").write_text(report.to_json())
    return report


# --- evaluation ---------------------------------------------------------------


def object_cells(masks: Iterable[np.ndarray], poses: Iterable[Pose2D], geometry: BeamGeometry,
                 grid: MosaicGrid, min_fraction: float = 0.5) -> np.ndarray:
    """Ground-truth object cells from per-frame polar object masks and true poses.

    A cell is an object cell when at least ``min_fraction`` of the bins
    landing in it, over all frames, are flagged.
    """
    rows, cols = grid.shape
    hits = np.zeros(rows * cols, dtype=np.int64)
    total = np.zeros(rows * cols, dtype=np.int64)
    u, v = geometry.bin_points()
    pts = np.stack([u.ravel(), v.ravel()], axis=1)
    for mask, pose in zip(masks, poses):
        r, c = grid.world_to_cell(pose.as_transform().apply_array(pts))
        inside = (r >= 0) & (r < rows) & (c >= 0) & (c < cols)
        cell = r[inside] * cols + c[inside]
        np.add.at(total, cell, 1)
        np.add.at(hits, cell, np.asarray(mask, dtype=bool).ravel()[inside])
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = hits / total
    return (total > 0).reshape(grid.shape) & (frac.reshape(grid.shape) >= min_fraction)


def background_annulus(obj: np.ndarray, meters_per_pixel: float, inner: float | None = None,
                       outer: float | None = None) -> np.ndarray:
    """Cells whose distance to the object region lies in ``(inner, outer]`` metres.

    Defaults are half and twice the object's equivalent diameter.
    """
    obj = np.asarray(obj, dtype=bool)
    if not obj.any():
        raise ValueError("empty object region")
    diameter = 2.0 * math.sqrt(obj.sum() / math.pi) * meters_per_pixel
    inner = 0.5 * diameter if inner is None else inner
    outer = 2.0 * diameter if outer is None else outer
    dist = ndimage.distance_transform_edt(~obj) * meters_per_pixel
    return (dist > inner) & (dist <= outer)


@dataclass(frozen=True)
class RegionMetrics:
    contrast_ratio: float  # mean object intensity / mean background intensity
    rms_contrast: float  # std / mean over object and background cells together
    object_mean: float
    background_mean: float


def region_metrics(mosaic: np.ndarray, obj: np.ndarray, background: np.ndarray) -> RegionMetrics:
    """Contrast of an object region against a background region; empty cells (NaN) are skipped."""
    m = np.asarray(mosaic, dtype=np.float64)
    o = m[np.asarray(obj, bool) & np.isfinite(m)]
    b = m[np.asarray(background, bool) & np.isfinite(m)]
    if o.size == 0:
        raise ValueError("empty object region")
    if b.size == 0:
        raise ValueError("empty background region")
    both = np.concatenate([o, b])
    mean_b = float(b.mean())
    return RegionMetrics(
        float(o.mean()) / mean_b if mean_b > 0 else math.inf,
        float(both.std() / both.mean()) if both.mean() > 0 else 0.0,
        float(o.mean()),
        mean_b,
    )


def compare(mosaic_a: np.ndarray, mosaic_b: np.ndarray, obj: np.ndarray, meters_per_pixel: float,
            background: np.ndarray | None = None) -> tuple[RegionMetrics, RegionMetrics]:
    """Object-vs-annulus metrics of two mosaics on the same grid."""
    if np.shape(mosaic_a) != np.shape(mosaic_b) or np.shape(mosaic_a) != np.shape(obj):
        raise ValueError("mosaics and object mask must share the grid")
    if background is None:
        background = background_annulus(obj, meters_per_pixel)
    return region_metrics(mosaic_a, obj, background), region_metrics(mosaic_b, obj, background)


@dataclass(frozen=True)
class RecoveryReport:
    """Object recovery of a run on a simulated dataset with known ground truth."""

    plain: RegionMetrics
    gvm: RegionMetrics
    contrast_gain: float  # gvm / plain contrast ratio
    best_frame_value: float  # brightest single-frame view of the object
    peak_ratio: float  # gvm object mean / best_frame_value
    object_cells: int
    object_width: float  # equivalent diameter, metres
    revisit_misalignment: float  # largest odometry displacement of the object over its sightings, metres


def _read_mask(path: Path) -> np.ndarray:
    codes, _ = frameio.read_image(path)
    return codes > 0


def evaluate_recovery(dataset_dir: str | os.PathLike, run_dir: str | os.PathLike, cfg: RunConfig | None = None,
                      min_bins: int = 10) -> RecoveryReport:
    """Score a ``mode="both"`` run against a simulated dataset's ground truth.

    Object cells come from the per-frame object masks placed with the true
    poses; the background is the surrounding annulus. The single-best-frame
    value is the largest mean intensity over a frame's object bins, after
    the same preprocessing the run used, among frames showing at least
    ``min_bins`` object bins.
    """
    dataset_dir, run_dir = Path(dataset_dir), Path(run_dir)
    cfg = cfg or RunConfig(input_dir=dataset_dir, out_dir=run_dir)
    report = json.loads((run_dir / "report.json").read_text())
    geometry = frameio.read_geometry(dataset_dir / "geometry.txt")
    true = [r.pose for r in frameio.read_poses(dataset_dir / "poses_true.csv")]
    odom = [r.pose for r in frameio.read_poses(dataset_dir / "poses_odom.csv")]
    masks = [_read_mask(p) for p in frameio.frame_files(dataset_dir / "masks")]
    mpp = float(report["meters_per_pixel"])
    grid = MosaicGrid(tuple(report["grid_shape"]), tuple(report["grid_origin"]), mpp, l_thres=1)
    obj = object_cells(masks, true, geometry, grid)
    if not obj.any():
        raise ValueError("object never seen")
    plain = np.load(run_dir / "mosaic_plain.npy")
    gvm = np.load(run_dir / "mosaic_gvm.npy")
    mp, mg = compare(plain, gvm, obj, mpp)

    best = 0.0
    u, v = geometry.bin_points()
    displacement = []
    frames = frameio.iter_sequence(cfg.frames_dir, geometry, cfg.mask_blind)
    for frame, mask, pt, po in zip(_prepared(frames, cfg), masks, true, odom):
        if mask.sum() < min_bins:
            continue
        best = max(best, float(frame.intensities[mask].mean()))
        centroid = np.array([[u[mask].mean(), v[mask].mean()]])
        seen = po.as_transform().apply_array(centroid) - pt.as_transform().apply_array(centroid)
        displacement.append(float(np.hypot(*seen[0])))
    width = 2.0 * math.sqrt(obj.sum() / math.pi) * mpp
    return RecoveryReport(
        plain=mp,
        gvm=mg,
        contrast_gain=mg.contrast_ratio / mp.contrast_ratio,
        best_frame_value=best,
        peak_ratio=mg.object_mean / best if best > 0 else math.inf,
        object_cells=int(obj.sum()),
        object_width=width,
        revisit_misalignment=max(displacement) - min(displacement) if displacement else 0.0,
    )
