"""Sonar fan coordinates and SE(2) pose algebra.

A forward-looking sonar frame is a (range sample x beam) grid. Each bin maps
to a point on the sonar's moving plane through ``u = r cos(theta)``,
``v = r sin(theta)`` with ``u`` pointing forward. Poses and inter-frame
offsets are rigid planar motions (rotation, then translation).

All angles are radians.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


def wrap_angle(theta: float) -> float:
    """Normalize an angle to the half-open interval (-pi, pi]."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


@dataclass(frozen=True)
class BeamGeometry:
    """Discretization of the sonar fan.

    Defaults are the working mode of a 1.2 MHz Oculus-class sonar:
    256 beams, 373 samples per beam, 15 m range and a 130 degree fan.
    """

    num_beams: int = 256
    samples_per_beam: int = 373
    max_range: float = 15.0
    min_range: float = 0.0
    horizontal_fov: float = math.radians(130.0)

    def __post_init__(self):
        if self.num_beams < 2 or self.samples_per_beam < 2:
            raise ValueError("need at least 2 beams and 2 samples per beam")
        if not 0.0 <= self.min_range < self.max_range:
            raise ValueError(f"invalid range interval [{self.min_range}, {self.max_range}]")
        if not 0.0 < self.horizontal_fov < math.pi:
            raise ValueError(f"horizontal_fov must lie in (0, pi), got {self.horizontal_fov}")

    @property
    def shape(self) -> tuple[int, int]:
        """Polar grid shape as (samples_per_beam, num_beams)."""
        return (self.samples_per_beam, self.num_beams)

    @property
    def range_resolution(self) -> float:
        return (self.max_range - self.min_range) / (self.samples_per_beam - 1)

    @property
    def bearing_resolution(self) -> float:
        return self.horizontal_fov / (self.num_beams - 1)

    def ranges(self) -> np.ndarray:
        return self.min_range + np.arange(self.samples_per_beam) * self.range_resolution

    def bearings(self) -> np.ndarray:
        return -0.5 * self.horizontal_fov + np.arange(self.num_beams) * self.bearing_resolution

    def bin_points(self) -> tuple[np.ndarray, np.ndarray]:
        """(u, v) of every bin, each shaped like the polar grid."""
        r = self.ranges()[:, None]
        th = self.bearings()[None, :]
        return r * np.cos(th), r * np.sin(th)

    def fan_outline(self, n_arc: int = 64) -> np.ndarray:
        """Closed polygon (M x 2) bounding the insonified sector."""
        half = 0.5 * self.horizontal_fov
        th = np.linspace(-half, half, n_arc)
        outer = np.stack([self.max_range * np.cos(th), self.max_range * np.sin(th)], axis=1)
        inner = np.stack([self.min_range * np.cos(th[::-1]), self.min_range * np.sin(th[::-1])], axis=1)
        return np.concatenate([outer, inner], axis=0)


@dataclass(frozen=True)
class SphericalPoint:
    r: float
    theta: float
    phi: float


@dataclass(frozen=True)
class Point2D:
    u: float
    v: float

    def __iter__(self):
        yield self.u
        yield self.v


def spherical_to_cartesian(s: SphericalPoint) -> tuple[float, float, float]:
    cphi = math.cos(s.phi)
    return (s.r * math.cos(s.theta) * cphi, s.r * math.sin(s.theta) * cphi, s.r * math.sin(s.phi))


def cartesian_to_spherical(p: Sequence[float]) -> SphericalPoint:
    x, y, z = (float(c) for c in p)
    if x == 0.0 and y == 0.0 and z == 0.0:
        raise ValueError("undefined bearing: point at the sonar origin")
    rho = math.hypot(x, y)
    return SphericalPoint(math.sqrt(x * x + y * y + z * z), math.atan2(y, x), math.atan2(z, rho))


def spherical_to_cartesian_array(r, theta, phi) -> np.ndarray:
    """Vectorized conversion; returns an (..., 3) array."""
    r, theta, phi = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (r, theta, phi)))
    cphi = np.cos(phi)
    return np.stack([r * np.cos(theta) * cphi, r * np.sin(theta) * cphi, r * np.sin(phi)], axis=-1)


def cartesian_to_spherical_array(p) -> np.ndarray:
    """Vectorized inverse; returns (..., 3) of (r, theta, phi)."""
    p = np.asarray(p, dtype=float)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    if np.any((x == 0) & (y == 0) & (z == 0)):
        raise ValueError("undefined bearing: point at the sonar origin")
    rho = np.hypot(x, y)
    return np.stack([np.sqrt(x * x + y * y + z * z), np.arctan2(y, x), np.arctan2(z, rho)], axis=-1)


def bin_to_point(beam: int, sample: int, g: BeamGeometry) -> Point2D:
    """Cartesian position of a polar bin on the imaging plane.

    Ranges and bearings are spaced linearly with both endpoints included,
    so the last sample sits exactly at ``max_range`` and beam 0 looks along
    ``-fov/2``.
    """
    if not 0 <= beam < g.num_beams:
        raise IndexError(f"beam {beam} outside [0, {g.num_beams})")
    if not 0 <= sample < g.samples_per_beam:
        raise IndexError(f"sample {sample} outside [0, {g.samples_per_beam})")
    r = g.min_range + sample * g.range_resolution
    th = -0.5 * g.horizontal_fov + beam * g.bearing_resolution
    return Point2D(r * math.cos(th), r * math.sin(th))


@dataclass(frozen=True)
class Transform2D:
    """Element of SE(2): ``x -> R(rotation) @ x + translation``."""

    rotation: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)

    @classmethod
    def identity(cls) -> "Transform2D":
        return cls(0.0, (0.0, 0.0))

    @property
    def matrix(self) -> np.ndarray:
        """3x3 homogeneous matrix."""
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        tx, ty = self.translation
        return np.array([[c, -s, tx], [s, c, ty], [0.0, 0.0, 1.0]])

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Transform2D":
        return cls(math.atan2(m[1, 0], m[0, 0]), (float(m[0, 2]), float(m[1, 2])))

    def apply_array(self, pts: np.ndarray) -> np.ndarray:
        """Apply to an (..., 2) array of points."""
        pts = np.asarray(pts, dtype=float)
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        x, y = pts[..., 0], pts[..., 1]
        return np.stack([c * x - s * y + self.translation[0], s * x + c * y + self.translation[1]], axis=-1)


@dataclass(frozen=True)
class Pose2D:
    """Global sonar pose (x, y, heading); heading kept in (-pi, pi]."""

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    def as_transform(self) -> Transform2D:
        """Map from sonar-frame coordinates to world coordinates."""
        return Transform2D(self.theta, (self.x, self.y))

    @classmethod
    def from_transform(cls, t: Transform2D) -> "Pose2D":
        return cls(t.translation[0], t.translation[1], t.rotation)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])


def apply(t: Transform2D, x: Point2D | Sequence[float]) -> Point2D:
    u, v = x
    c, s = math.cos(t.rotation), math.sin(t.rotation)
    return Point2D(c * u - s * v + t.translation[0], s * u + c * v + t.translation[1])


def compose(t1: Transform2D, t2: Transform2D) -> Transform2D:
    """``compose(t1, t2)`` applies ``t2`` first, then ``t1``."""
    c, s = math.cos(t1.rotation), math.sin(t1.rotation)
    tx, ty = t2.translation
    return Transform2D(
        wrap_angle(t1.rotation + t2.rotation),
        (c * tx - s * ty + t1.translation[0], s * tx + c * ty + t1.translation[1]),
    )


def invert(t: Transform2D) -> Transform2D:
    c, s = math.cos(t.rotation), math.sin(t.rotation)
    tx, ty = t.translation
    return Transform2D(wrap_angle(-t.rotation), (-(c * tx + s * ty), -(-s * tx + c * ty)))


def relative_transform(p_from: Pose2D, p_to: Pose2D) -> Transform2D:
    """Pixel transform between two frames: coordinates in ``p_from``'s frame
    map to coordinates in ``p_to``'s frame, ``x_to = T x_from``."""
    return compose(invert(p_to.as_transform()), p_from.as_transform())


def pose_chain(transforms: Iterable[Transform2D], initial: Pose2D = Pose2D()) -> list[Pose2D]:
    """Integrate consecutive-frame transforms into global poses.

    ``transforms[t]`` maps frame-t coordinates to frame-(t+1) coordinates,
    hence ``P[t+1] = P[t] o inv(T[t])``.
    """
    poses = [initial]
    current = initial.as_transform()
    for t in transforms:
        current = compose(current, invert(t))
        poses.append(Pose2D.from_transform(current))
    return poses
