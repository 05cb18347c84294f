"""Frame and pose I/O, intensity normalization, CLAHE and fan rasterization.

On disk a frame is a single-channel 8- or 16-bit PGM/PNG with one row per
range sample (row 0 nearest) and one column per beam. In memory it is a
float64 grid in [0, 1].
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import cv2
import numpy as np
from scipy import ndimage

from .geometry import BeamGeometry, Pose2D

log = logging.getLogger(__name__)

FRAME_SUFFIXES = (".pgm", ".png")


@dataclass(frozen=True, eq=False)
class SonarFrame:
    """One polar intensity image.

    ``valid`` is an optional boolean mask of bins that carry echoes; ``None``
    means every bin is valid.
    """

    intensities: np.ndarray
    timestamp_index: int
    geometry: BeamGeometry = field(default_factory=BeamGeometry)
    valid: np.ndarray | None = None

    def __post_init__(self):
        data = np.array(self.intensities, dtype=np.float64)
        if data.shape != self.geometry.shape:
            raise ValueError(f"inconsistent geometry: grid {data.shape} vs expected {self.geometry.shape}")
        if not np.all(np.isfinite(data)) or data.min(initial=0.0) < 0.0 or data.max(initial=0.0) > 1.0:
            raise ValueError("intensities must be finite and lie in [0, 1]")
        data.flags.writeable = False
        object.__setattr__(self, "intensities", data)
        if self.valid is not None:
            valid = np.array(self.valid, dtype=bool)
            if valid.shape != data.shape:
                raise ValueError("valid mask shape does not match the intensity grid")
            valid.flags.writeable = False
            object.__setattr__(self, "valid", valid)

    @property
    def valid_mask(self) -> np.ndarray:
        if self.valid is None:
            return np.ones(self.geometry.shape, dtype=bool)
        return self.valid

    def with_intensities(self, intensities: np.ndarray) -> "SonarFrame":
        return replace(self, intensities=intensities)


@dataclass(frozen=True)
class PoseRecord:
    timestamp_index: int
    pose: Pose2D
    source: str = "odometry"  # "odometry" or "registration"


# --- frames -----------------------------------------------------------------


def read_image(path: str | os.PathLike) -> tuple[np.ndarray, int]:
    """Read a single-channel 8/16-bit image; returns (array, max code value)."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise OSError(f"cannot read frame file {path}")
    if img.ndim != 2:
        raise ValueError(f"{path}: expected a single-channel image, got shape {img.shape}")
    if img.dtype == np.uint8:
        return img, 255
    if img.dtype == np.uint16:
        return img, 65535
    raise ValueError(f"{path}: unsupported pixel type {img.dtype}")


def quantize(intensities: np.ndarray, bit_depth: int = 8) -> np.ndarray:
    """Map [0, 1] floats to integer codes of the given bit depth."""
    if bit_depth not in (8, 16):
        raise ValueError("bit_depth must be 8 or 16")
    top = (1 << bit_depth) - 1
    codes = np.rint(np.clip(intensities, 0.0, 1.0) * top)
    return codes.astype(np.uint8 if bit_depth == 8 else np.uint16)


def save_frame(frame: SonarFrame | np.ndarray, path: str | os.PathLike, bit_depth: int = 8) -> None:
    data = frame.intensities if isinstance(frame, SonarFrame) else np.asarray(frame)
    if not cv2.imwrite(str(path), quantize(data, bit_depth)):
        raise OSError(f"failed to write frame {path}")


def frame_files(directory: str | os.PathLike) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"frame directory {directory} does not exist")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in FRAME_SUFFIXES and p.is_file())


def blind_region_mask(codes: np.ndarray, zero_fraction: float = 0.99) -> np.ndarray:
    """Valid-bin mask that drops echo-free range bands at either end.

    A range row is blind when at least ``zero_fraction`` of its bins are
    exactly zero. Only contiguous blind rows touching the near or far edge
    are removed; isolated dark rows inside the image are kept.
    """
    codes = np.asarray(codes)
    blind_rows = (codes == 0).mean(axis=1) >= zero_fraction
    valid_rows = np.ones(codes.shape[0], dtype=bool)
    for order in (range(codes.shape[0]), range(codes.shape[0] - 1, -1, -1)):
        for i in order:
            if not blind_rows[i]:
                break
            valid_rows[i] = False
    return np.repeat(valid_rows[:, None], codes.shape[1], axis=1)


def _strided(directory, stride: int) -> list[tuple[int, Path]]:
    """Every ``stride``-th frame file with its 1-based position in the full listing."""
    if int(stride) < 1:
        raise ValueError("stride must be >= 1")
    files = list(enumerate(frame_files(directory), start=1))[:: int(stride)]
    if len(files) < 2:
        raise ValueError(f"{directory}: need at least 2 frames, found {len(files)}")
    return files


def load_sequence(
    directory: str | os.PathLike,
    geometry: BeamGeometry | None = None,
    mask_blind: bool = True,
    stride: int = 1,
) -> list[SonarFrame]:
    """Load a temporally ordered frame directory (lexicographic file order).

    Intensities are divided by the bit-depth maximum. If ``geometry`` is not
    given it is inferred from the first file's shape with the default range
    and field of view. ``timestamp_index`` is the 1-based position of the
    file in the full listing, so subsampled frames keep their pose rows.
    """
    files = _strided(directory, stride)
    frames = []
    for t, path in files:
        codes, top = read_image(path)
        if geometry is None:
            geometry = replace(BeamGeometry(), samples_per_beam=codes.shape[0], num_beams=codes.shape[1])
        if codes.shape != geometry.shape:
            raise ValueError(f"inconsistent geometry: {path} has shape {codes.shape}, expected {geometry.shape}")
        valid = blind_region_mask(codes) if mask_blind else None
        if valid is not None and valid.all():
            valid = None
        frames.append(SonarFrame(codes.astype(np.float64) / top, t, geometry, valid))
    return frames


def iter_sequence(directory, geometry: BeamGeometry, mask_blind: bool = True, stride: int = 1):
    """Lazy variant of :func:`load_sequence` yielding one frame at a time."""
    for t, path in _strided(directory, stride):
        codes, top = read_image(path)
        if codes.shape != geometry.shape:
            raise ValueError(f"inconsistent geometry: {path} has shape {codes.shape}, expected {geometry.shape}")
        valid = blind_region_mask(codes) if mask_blind else None
        if valid is not None and valid.all():
            valid = None
        yield SonarFrame(codes.astype(np.float64) / top, t, geometry, valid)


# --- sidecar and pose files -------------------------------------------------


def read_keyvalue(path: str | os.PathLike) -> dict[str, str]:
    """Parse ``key = value`` (or ``key: value``) lines; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            for sep in ("=", ":"):
                if sep in line:
                    key, value = line.split(sep, 1)
                    break
            else:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            out[key.strip().lower().replace("-", "_")] = value.strip()
    return out


def read_geometry(path: str | os.PathLike) -> BeamGeometry:
    kv = read_keyvalue(path)
    base = BeamGeometry()
    return BeamGeometry(
        num_beams=int(kv.get("num_beams", base.num_beams)),
        samples_per_beam=int(kv.get("samples_per_beam", base.samples_per_beam)),
        max_range=float(kv.get("max_range_m", base.max_range)),
        min_range=float(kv.get("min_range_m", base.min_range)),
        horizontal_fov=math.radians(float(kv.get("fov_deg", math.degrees(base.horizontal_fov)))),
    )


def write_geometry(g: BeamGeometry, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        fh.write(f"num_beams = {g.num_beams}\n")
        fh.write(f"samples_per_beam = {g.samples_per_beam}\n")
        fh.write(f"max_range_m = {g.max_range!r}\n")
        fh.write(f"min_range_m = {g.min_range!r}\n")
        fh.write(f"fov_deg = {math.degrees(g.horizontal_fov)!r}\n")


def read_poses(path: str | os.PathLike, source: str = "odometry") -> list[PoseRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["t", "x", "y", "theta"]:
            raise ValueError(f"{path}: pose file header must be 't,x,y,theta'")
        for row in reader:
            row = {k.strip(): v for k, v in row.items()}
            t = int(row["t"])
            if records and t <= records[-1].timestamp_index:
                raise ValueError(f"{path}: timestamps must be strictly increasing (t={t})")
            records.append(PoseRecord(t, Pose2D(float(row["x"]), float(row["y"]), float(row["theta"])), source))
    return records


def write_poses(poses: Iterable[Pose2D], path: str | os.PathLike, start: int = 1) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "x", "y", "theta"])
        for t, p in enumerate(poses, start=start):
            writer.writerow([t, repr(p.x), repr(p.y), repr(p.theta)])


# --- enhancement ------------------------------------------------------------


def clahe(frame: SonarFrame, clip_limit: float = 2.0, tiles: Sequence[int] = (8, 8)) -> SonarFrame:
    """Contrast-limited adaptive histogram equalization on 256 levels.

    ``tiles`` is (rows, cols). Backed by OpenCV's implementation: per-tile
    clipped histogram equalization blended bilinearly between tile centres.
    """
    rows, cols = (int(n) for n in tiles)
    h, w = frame.geometry.shape
    if clip_limit < 1:
        raise ValueError("clip_limit must be >= 1")
    if rows < 1 or cols < 1:
        raise ValueError("need at least one tile")
    if rows > h or cols > w:
        raise ValueError(f"tile grid {rows}x{cols} finer than the {h}x{w} image")
    op = cv2.createCLAHE(clipLimit=float(clip_limit), tileGridSize=(cols, rows))
    out = op.apply(quantize(frame.intensities, 8)).astype(np.float64) / 255.0
    return frame.with_intensities(out)


# --- Cartesian fan images ---------------------------------------------------


@dataclass
class FanImage:
    """Cartesian raster of one frame in the sonar's own coordinates.

    Pixel (row, col) is centred on ``(u, v) = origin + mpp * (col, row)``.
    ``mask`` is the geometric fan footprint; ``valid`` additionally drops
    blind bins of the source frame.
    """

    image: np.ndarray
    mask: np.ndarray
    valid: np.ndarray
    origin: tuple[float, float]
    meters_per_pixel: float

    def pixel_of(self, u: float, v: float) -> tuple[float, float]:
        """(col, row) of a sonar-frame point."""
        return ((u - self.origin[0]) / self.meters_per_pixel, (v - self.origin[1]) / self.meters_per_pixel)


def fan_extent(g: BeamGeometry) -> tuple[float, float, float, float]:
    """(u_min, u_max, v_min, v_max) of the insonified sector."""
    half = 0.5 * g.horizontal_fov
    return g.min_range * math.cos(half), g.max_range, -g.max_range * math.sin(half), g.max_range * math.sin(half)


def fan_grid(g: BeamGeometry, meters_per_pixel: float) -> tuple[tuple[float, float], tuple[int, int]]:
    """Origin and (rows, cols) of the smallest mpp-aligned raster covering the fan."""
    u0, u1, v0, v1 = fan_extent(g)
    c0, c1 = math.floor(u0 / meters_per_pixel), math.ceil(u1 / meters_per_pixel)
    r0, r1 = math.floor(v0 / meters_per_pixel), math.ceil(v1 / meters_per_pixel)
    return (c0 * meters_per_pixel, r0 * meters_per_pixel), (r1 - r0 + 1, c1 - c0 + 1)


def _polar_coords(g: BeamGeometry, u: np.ndarray, v: np.ndarray):
    r = np.hypot(u, v)
    th = np.arctan2(v, u)
    eps = 1e-9
    inside = (r >= g.min_range - eps) & (r <= g.max_range + eps) & (np.abs(th) <= 0.5 * g.horizontal_fov + eps)
    sample = (r - g.min_range) / g.range_resolution
    beam = (th + 0.5 * g.horizontal_fov) / g.bearing_resolution
    return sample, beam, inside


def fan_rasterize(
    frame: SonarFrame,
    meters_per_pixel: float,
    origin: tuple[float, float] | None = None,
    shape: tuple[int, int] | None = None,
) -> FanImage:
    """Resample a polar frame onto a Cartesian grid (inverse mapping, bilinear)."""
    if meters_per_pixel <= 0:
        raise ValueError("meters_per_pixel must be positive")
    g = frame.geometry
    if origin is None or shape is None:
        origin, shape = fan_grid(g, meters_per_pixel)
    rows, cols = shape
    u = origin[0] + meters_per_pixel * np.arange(cols)[None, :]
    v = origin[1] + meters_per_pixel * np.arange(rows)[:, None]
    u, v = np.broadcast_arrays(u, v)
    sample, beam, inside = _polar_coords(g, u, v)
    coords = np.stack([sample, beam])
    image = ndimage.map_coordinates(frame.intensities, coords, order=1, mode="nearest")
    image = np.where(inside, image, 0.0)
    if frame.valid is None:
        valid = inside.copy()
    else:
        valid = inside & (ndimage.map_coordinates(frame.valid.astype(float), coords, order=0, mode="nearest") > 0.5)
    return FanImage(image, inside, valid, (float(origin[0]), float(origin[1])), float(meters_per_pixel))


def cartesian_to_polar(fan: FanImage, g: BeamGeometry) -> np.ndarray:
    """Bilinearly sample a Cartesian fan image back at every polar bin."""
    u, v = g.bin_points()
    col = (u - fan.origin[0]) / fan.meters_per_pixel
    row = (v - fan.origin[1]) / fan.meters_per_pixel
    return ndimage.map_coordinates(fan.image, np.stack([row, col]), order=1, mode="nearest")
