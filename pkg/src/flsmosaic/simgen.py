"""Synthetic forward-looking sonar sequences with known ground truth.

The generator renders polar frames of a textured seabed with a few bright
objects, seen along a lawn-mower survey. It reproduces the degradations the
blending method is meant to survive:

* multiplicative speckle (unit-mean gamma noise),
* range-dependent insonification gain,
* saturation of strong returns,
* an echo-free near-range band (small grazing angle), and
* odometry that drifts away from the true trajectory.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .frameio import SonarFrame, quantize, save_frame, write_geometry, write_poses
from .geometry import BeamGeometry, Pose2D, wrap_angle


@dataclass(frozen=True)
class SceneObject:
    """A flat target; ``size`` is the diameter of a disk or the side of a square rect.

    A rect may also give ``size`` as (width, height).
    """

    shape: str
    position: tuple[float, float]
    size: float | tuple[float, float]
    reflectivity: float = 1.0

    def __post_init__(self):
        if self.shape not in ("disk", "rect"):
            raise ValueError(f"unknown object shape {self.shape!r}")
        if not 0.0 < self.reflectivity <= 1.0:
            raise ValueError("object reflectivity must lie in (0, 1]")

    @property
    def width(self) -> float:
        return float(self.size) if np.isscalar(self.size) else float(max(self.size))

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        dx = x - self.position[0]
        dy = y - self.position[1]
        if self.shape == "disk":
            return dx * dx + dy * dy <= (0.5 * float(self.size)) ** 2
        w, h = (self.size, self.size) if np.isscalar(self.size) else self.size
        return (np.abs(dx) <= 0.5 * w) & (np.abs(dy) <= 0.5 * h)


@dataclass(frozen=True)
class SceneModel:
    """Seabed reflectivity over ``origin + [0, extent]``; zero outside.

    The background is ``mean + amplitude * n`` with ``n`` a unit-variance
    Gaussian field smoothed over ``correlation_length`` metres.
    """

    extent: tuple[float, float] = (40.0, 40.0)
    origin: tuple[float, float] = (0.0, 0.0)
    background_mean: float = 0.3
    background_amplitude: float = 0.08
    correlation_length: float = 0.25
    resolution: float = 0.05
    seed: int = 0
    objects: tuple[SceneObject, ...] = ()

    def __post_init__(self):
        for obj in self.objects:
            x, y = obj.position
            if not (self.origin[0] <= x <= self.origin[0] + self.extent[0]
                    and self.origin[1] <= y <= self.origin[1] + self.extent[1]):
                raise ValueError(f"object at {obj.position} lies outside the scene")

    @cached_property
    def texture(self) -> np.ndarray:
        rows = int(math.ceil(self.extent[1] / self.resolution)) + 1
        cols = int(math.ceil(self.extent[0] / self.resolution)) + 1
        rng = np.random.default_rng([self.seed, 0x5CE4E])
        field_ = ndimage.gaussian_filter(rng.standard_normal((rows, cols)), self.correlation_length / self.resolution,
                                         mode="wrap")
        field_ /= field_.std() or 1.0
        return np.clip(self.background_mean + self.background_amplitude * field_, 0.01, 1.0)

    def background_at(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        col = (np.asarray(x) - self.origin[0]) / self.resolution
        row = (np.asarray(y) - self.origin[1]) / self.resolution
        return ndimage.map_coordinates(self.texture, np.stack([row, col]), order=1, mode="constant", cval=0.0)

    def object_mask(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        mask = np.zeros(np.shape(x), dtype=bool)
        for obj in self.objects:
            mask |= obj.contains(x, y)
        return mask

    def reflectivity_at(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        refl = self.background_at(x, y)
        for obj in self.objects:
            refl = np.where(obj.contains(x, y), obj.reflectivity, refl)
        return refl


@dataclass(frozen=True)
class TrajectorySpec:
    """Boustrophedon survey along +x with semicircular turns.

    Drift terms perturb the odometry only: ``drift_translation`` is a
    world-frame bias added per frame, ``drift_rotation`` a heading bias per
    frame, and the two noise terms are per-frame standard deviations. Drift
    is active from frame index ``drift_start`` (0-based) on.
    """

    n_frames: int = 200
    leg_length: float = 12.0
    leg_spacing: float = 4.0
    speed: float = 0.2
    start: tuple[float, float] = (0.0, 0.0)
    drift_translation: tuple[float, float] = (0.0, 0.0)
    drift_rotation: float = 0.0
    noise_translation: float = 0.0
    noise_rotation: float = 0.0
    drift_start: int = 0
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_frames < 2:
            raise ValueError("n_frames must be >= 2")
        vals = (*self.drift_translation, self.drift_rotation, self.noise_translation, self.noise_rotation)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("drift magnitudes must be finite")


def _banded_gain() -> tuple[float, ...]:
    r = np.linspace(0.0, 1.0, 32)
    return tuple(float(g) for g in 0.45 + 0.75 * np.exp(-0.5 * ((r - 0.45) / 0.22) ** 2))


@dataclass(frozen=True)
class ImagingSpec:
    """How the scene is turned into intensities.

    ``gain_profile`` is sampled uniformly from min to max range and
    interpolated linearly; ``speckle`` is the coefficient of variation of
    the unit-mean gamma speckle (0 disables it). Returns above
    ``saturation_level`` clip, and the result is rescaled to [0, 1] and
    quantized to ``bit_depth`` bits. Bins closer than ``blind_range`` get no
    echo at all.
    """

    geometry: BeamGeometry = field(default_factory=BeamGeometry)
    speckle: float = 0.5
    gain_profile: tuple[float, ...] = field(default_factory=_banded_gain)
    saturation_level: float = 1.0
    blind_range: float = 0.0
    bit_depth: int = 8

    def __post_init__(self):
        if any(g <= 0 for g in self.gain_profile) or not self.gain_profile:
            raise ValueError("gain_profile must be non-empty and positive")
        if not 0.0 < self.saturation_level <= 1.0:
            raise ValueError("saturation_level must lie in (0, 1]")
        if self.speckle < 0:
            raise ValueError("speckle must be >= 0")

    def gain(self, r: np.ndarray) -> np.ndarray:
        g = self.geometry
        prof = np.asarray(self.gain_profile, dtype=float)
        if prof.size == 1:
            return np.full(np.shape(r), prof[0])
        knots = np.linspace(g.min_range, g.max_range, prof.size)
        return np.interp(r, knots, prof)

    def speckle_draw(self, rng: np.random.Generator, shape) -> np.ndarray:
        if self.speckle == 0:
            return np.ones(shape)
        k = 1.0 / self.speckle ** 2
        return rng.gamma(k, 1.0 / k, size=shape)


FLAT_GAIN = (1.0,)


def frame_rng(master_seed: int, t: int) -> np.random.Generator:
    """Independent per-frame random stream."""
    return np.random.default_rng([int(master_seed), int(t)])


# --- trajectory ---------------------------------------------------------------


def lawnmower_pose(spec: TrajectorySpec, s: float) -> Pose2D:
    """True pose after travelling arc length ``s``."""
    L, S = spec.leg_length, spec.leg_spacing
    radius = 0.5 * S
    turn = math.pi * radius
    period = L + turn
    leg = int(s // period)
    rem = s - leg * period
    x0, y0 = spec.start
    y_leg = y0 + leg * S
    forward = leg % 2 == 0  # even legs head +x
    x_start = x0 if forward else x0 + L
    direction = 1.0 if forward else -1.0
    if rem <= L:
        return Pose2D(x_start + direction * rem, y_leg, 0.0 if forward else math.pi)
    phi = (rem - L) / radius
    cx = x_start + direction * L
    cy = y_leg + radius
    if forward:  # counter-clockwise around the +x end
        return Pose2D(cx + radius * math.sin(phi), cy - radius * math.cos(phi), phi)
    return Pose2D(cx - radius * math.sin(phi), cy - radius * math.cos(phi), math.pi - phi)


def generate_trajectory(spec: TrajectorySpec) -> tuple[list[Pose2D], list[Pose2D]]:
    """True poses and drifting odometry poses (identical at frame 0)."""
    true = [lawnmower_pose(spec, i * spec.speed) for i in range(spec.n_frames)]
    rng = np.random.default_rng([spec.rng_seed, 0x0D0])
    odom = [true[0]]
    heading_err = 0.0
    ex = ey = 0.0
    bx, by = spec.drift_translation
    for i in range(1, spec.n_frames):
        active = i >= spec.drift_start
        dx = true[i].x - true[i - 1].x
        dy = true[i].y - true[i - 1].y
        if heading_err != 0.0:
            c, s = math.cos(heading_err), math.sin(heading_err)
            ex += (c - 1.0) * dx - s * dy
            ey += s * dx + (c - 1.0) * dy
        nx, ny = rng.normal(0.0, spec.noise_translation, 2) if spec.noise_translation > 0 else (0.0, 0.0)
        nr = rng.normal(0.0, spec.noise_rotation) if spec.noise_rotation > 0 else 0.0
        if active:
            ex += bx
            ey += by
            heading_err += spec.drift_rotation
        ex += nx
        ey += ny
        heading_err += nr
        odom.append(Pose2D(true[i].x + ex, true[i].y + ey, wrap_angle(true[i].theta + heading_err)))
    return true, odom


# --- rendering ----------------------------------------------------------------


def render_frame(
    scene: SceneModel,
    pose: Pose2D,
    spec: ImagingSpec,
    t: int,
    rng: np.random.Generator | None = None,
    seed: int = 0,
) -> tuple[SonarFrame, np.ndarray]:
    """Render one polar frame and its object mask.

    Without an explicit ``rng`` the speckle stream is derived from
    ``(seed, t)`` so frames can be rendered in any order.
    """
    g = spec.geometry
    u, v = g.bin_points()
    world = pose.as_transform().apply_array(np.stack([u, v], axis=-1))
    x, y = world[..., 0], world[..., 1]
    refl = scene.reflectivity_at(x, y)
    r = g.ranges()[:, None]
    echo = refl * spec.gain(r)
    if rng is None:
        rng = frame_rng(seed, t)
    echo = echo * spec.speckle_draw(rng, echo.shape)
    echo = np.where(r < spec.blind_range, 0.0, echo)
    intensity = np.clip(echo, 0.0, spec.saturation_level) / spec.saturation_level
    codes = quantize(intensity, spec.bit_depth)
    top = (1 << spec.bit_depth) - 1
    mask = scene.object_mask(x, y) & (r >= spec.blind_range)
    return SonarFrame(codes.astype(np.float64) / top, t, g), mask


@dataclass
class Dataset:
    directory: Path
    frame_files: list[Path]
    mask_files: list[Path]
    true_poses: list[Pose2D]
    odom_poses: list[Pose2D]


def _spec_dict(obj) -> dict:
    d = asdict(obj)
    if "geometry" in d:
        d["geometry"]["horizontal_fov_deg"] = math.degrees(d["geometry"]["horizontal_fov"])
    return d


def generate_dataset(
    scene: SceneModel,
    traj: TrajectorySpec,
    imaging: ImagingSpec,
    out_dir: str | os.PathLike,
    seed: int | None = None,
    threads: int = 1,
) -> Dataset:
    """Write frames, masks, pose CSVs, a geometry sidecar and a manifest.

    Layout::

        frames/frame_00001.pgm ...   polar intensity frames
        masks/mask_00001.png ...     object masks (255 = object)
        poses_true.csv, poses_odom.csv
        geometry.txt, manifest.json
    """
    seed = traj.rng_seed if seed is None else seed
    out = Path(out_dir)
    frames_dir, masks_dir = out / "frames", out / "masks"
    try:
        frames_dir.mkdir(parents=True, exist_ok=True)
        masks_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    true, odom = generate_trajectory(traj)
    width = max(5, len(str(traj.n_frames)))
    frame_files = [frames_dir / f"frame_{t:0{width}d}.pgm" for t in range(1, traj.n_frames + 1)]
    mask_files = [masks_dir / f"mask_{t:0{width}d}.png" for t in range(1, traj.n_frames + 1)]

    def work(i: int) -> None:
        frame, mask = render_frame(scene, true[i], imaging, i + 1, seed=seed)
        save_frame(frame, frame_files[i], imaging.bit_depth)
        save_frame(mask.astype(float), mask_files[i], 8)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(work, range(traj.n_frames)))
    else:
        for i in range(traj.n_frames):
            work(i)

    write_poses(true, out / "poses_true.csv")
    write_poses(odom, out / "poses_odom.csv")
    write_geometry(imaging.geometry, out / "geometry.txt")
    manifest = {
        "seed": seed,
        "n_frames": traj.n_frames,
        "scene": _spec_dict(scene),
        "trajectory": _spec_dict(traj),
        "imaging": _spec_dict(imaging),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, default=list)
    return Dataset(out, frame_files, mask_files, true, odom)


def default_scene() -> SceneModel:
    """Textured seabed with one bright 0.6 m disk, sized for the default survey.

    The default 200-frame lawn-mower (12 m legs, 4 m apart) passes the
    object on its first leg and sees it again from the second and third.
    """
    return SceneModel(extent=(44.0, 36.0), origin=(-16.0, -16.0), seed=1,
                      objects=(SceneObject("disk", (8.0, 4.0), 0.6, 1.0),))


def load_scene(path: str | os.PathLike) -> tuple[SceneModel, dict]:
    """Read a JSON scene description.

    Top-level keys mirror :class:`SceneModel` fields; ``objects`` is a list
    of ``{"shape", "position", "size", "reflectivity"}``. Optional
    ``trajectory`` and ``imaging`` sections are returned untouched.
    """
    with open(path) as fh:
        doc = json.load(fh)
    objects = tuple(
        SceneObject(o["shape"], tuple(o["position"]), o["size"] if np.isscalar(o["size"]) else tuple(o["size"]),
                    float(o.get("reflectivity", 1.0)))
        for o in doc.pop("objects", [])
    )
    extras = {k: doc.pop(k) for k in ("trajectory", "imaging") if k in doc}
    for key in ("extent", "origin"):
        if key in doc:
            doc[key] = tuple(doc[key])
    return SceneModel(objects=objects, **doc), extras


def ground_truth_cells(scene: SceneModel, shape: tuple[int, int], origin: Sequence[float],
                       meters_per_pixel: float) -> np.ndarray:
    """Object footprint rasterized onto a mosaic grid (cell centres)."""
    rows, cols = shape
    x = origin[0] + meters_per_pixel * np.arange(cols)[None, :]
    y = origin[1] + meters_per_pixel * np.arange(rows)[:, None]
    x, y = np.broadcast_arrays(x, y)
    return scene.object_mask(x, y)
