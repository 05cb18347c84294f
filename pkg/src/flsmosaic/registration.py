"""Fourier-Mellin registration of consecutive sonar frames.

Rotation comes from phase-correlating the log-polar remapped magnitude
spectra along the angle axis (the magnitude spectrum ignores translation).
The second frame is then de-rotated and the remaining translation found by
plain phase correlation. Frames are registered as Cartesian fan images so
that the inter-frame motion is a Euclidean motion of the pixel grid.

Scale is not estimated; a fixed-range sonar images at unit scale.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import cv2
import numpy as np
from scipy import fft, ndimage
from scipy.signal import windows

from .frameio import FanImage, SonarFrame, fan_extent, fan_grid, fan_rasterize
from .geometry import BeamGeometry, Transform2D, compose

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegistrationConfig:
    """Knobs for frame registration.

    ``window`` is ``"raised-cosine"`` (cosine taper of the valid footprint),
    ``"hann"`` (separable Hann over the canvas) or ``"none"``.
    ``meters_per_pixel=None`` picks the resolution that fits the fan into a
    ``size`` x ``size`` canvas. ``lowpass`` is the standard deviation, in
    cycles per pixel, of a Gaussian weight on the normalized cross-power
    spectrum (``None`` = unweighted); it sets where the peak is found.
    ``confidence_lowpass`` is the (wider) weight of the surface the reported
    ``peak_value`` is read from: a narrow weight localises well but lifts
    the noise floor of the peak value. ``radius_range`` bounds the log-polar
    band as a fraction of the zero-padded spectrum size.

    The footprint taper is fixed to the sensor, so it does not move with the
    scene and pulls the correlation peak towards zero motion (a few percent
    of the shift). ``refine_passes`` re-registers the residual after warping
    the second frame onto the first, with both frames windowed by the taper
    of their common footprint; each pass shrinks the bias by that same
    factor.

    The angle search compares translation peaks of images reduced by
    ``search_scale`` (area averaging); only the final translation is read at
    full resolution.
    """

    window: str = "raised-cosine"
    subpixel: bool = True
    min_confidence: float = 0.05
    meters_per_pixel: float | None = None
    size: int = 512
    taper_px: float = 12.0
    lowpass: float | None = 0.05
    confidence_lowpass: float | None = 0.1
    n_angles: int = 1024
    n_radii: int = 256
    radius_range: tuple[float, float] = (0.01, 0.15)
    spectrum_padding: int = 2
    rotation_candidates: int = 3
    refine_rotation: bool = True
    refine_step: float = math.radians(0.5)
    refine_passes: int = 2
    search_scale: int = 2

    def __post_init__(self):
        if not 0.0 <= self.min_confidence <= 1.0:
            raise ValueError("min_confidence must lie in [0, 1]")
        if self.window not in ("raised-cosine", "hann", "none"):
            raise ValueError(f"unknown window {self.window!r}")
        if self.refine_passes < 0:
            raise ValueError("refine_passes must be >= 0")
        if self.search_scale < 1:
            raise ValueError("search_scale must be >= 1")


@dataclass(frozen=True)
class CorrelationResult:
    shift: tuple[float, float]  # (dx, dy) in pixels: b(x) ~ a(x - shift)
    peak_value: float
    peak_sharpness: float


@dataclass(frozen=True)
class RegistrationResult:
    transform: Transform2D  # metres, maps frame-a coordinates to frame-b coordinates
    transform_px: Transform2D  # same motion in canvas pixels
    confidence: float
    low_confidence: bool
    rotation_peak: float
    correlation: CorrelationResult = field(repr=False)


def _parabolic(fm: float, f0: float, fp: float) -> float:
    denom = fm - 2.0 * f0 + fp
    if denom >= 0.0:
        return 0.0
    return float(np.clip(0.5 * (fm - fp) / denom, -0.5, 0.5))


def _normalized_cross_power(fa: np.ndarray, fb: np.ndarray) -> np.ndarray:
    cross = np.conj(fa) * fb
    mag = np.abs(cross)
    top = mag.max()
    if not np.isfinite(top) or top <= 0.0:
        raise ValueError("degenerate spectrum")
    floor = top * 1e-24
    return np.where(mag > floor, cross / np.maximum(mag, floor), 0.0)


def _second_peak(surface: np.ndarray, peak: tuple[int, ...], exclude: int = 2) -> float:
    masked = surface.copy()
    idx = np.ix_(*[np.arange(p - exclude, p + exclude + 1) % n for p, n in zip(peak, surface.shape)])
    masked[idx] = -np.inf
    return float(masked.max())


def _apply_window(img: np.ndarray, window: str) -> np.ndarray:
    if window == "hann":
        wr = windows.hann(img.shape[0], sym=False)
        wc = windows.hann(img.shape[1], sym=False)
        return img * np.outer(wr, wc)
    return img


def phase_correlate(a: np.ndarray, b: np.ndarray, cfg: RegistrationConfig = RegistrationConfig()) -> CorrelationResult:
    """Translation between two same-size images from the cross-power spectrum peak.

    ``a`` and ``b`` are used as given, apart from the ``"hann"`` window; the
    fan taper belongs to :func:`prepare_fan`.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError("phase_correlate needs two 2-D images of the same shape")
    if not np.any(a) or not np.any(b):
        raise ValueError("degenerate spectrum: zero-energy image")
    fa = fft.rfft2(_apply_window(a, cfg.window))
    fb = fft.rfft2(_apply_window(b, cfg.window))
    return _correlate_spectra(fa, fb, a.shape, cfg)


@lru_cache(maxsize=16)
def _gaussian_weight(shape: tuple[int, int], sigma: float, dtype=np.float64) -> np.ndarray:
    """Half-plane (rfft layout) Gaussian weight, normalised to mean 1 over the full plane."""
    ky = np.fft.fftfreq(shape[0])[:, None]
    kx = np.fft.fftfreq(shape[1])[None, :]
    w = np.exp(-(kx * kx + ky * ky) / (2.0 * sigma * sigma))
    return (w[:, : shape[1] // 2 + 1] / w.mean()).astype(dtype)


def _weighted_surface(cross: np.ndarray, shape: tuple[int, int], sigma: float | None) -> np.ndarray:
    if sigma is not None:
        cross = cross * _gaussian_weight(tuple(shape), sigma, cross.real.dtype.type)
    return fft.irfft2(cross, s=shape)


def _correlate_spectra(
    fa: np.ndarray, fb: np.ndarray, shape: tuple[int, int], cfg: RegistrationConfig, confidence: bool = True
) -> CorrelationResult:
    """Correlation of two half-plane (``rfft2``) spectra of real images.

    With ``confidence=False`` the peak value is read from the localisation
    surface itself, which is what the rotation search compares, and no
    sharpness is computed.
    """
    cross = _normalized_cross_power(fa, fb)
    surface = _weighted_surface(cross, shape, cfg.lowpass)
    peak = np.unravel_index(int(np.argmax(surface)), surface.shape)
    value = float(surface[peak])
    rows, cols = surface.shape
    dy, dx = float(peak[0]), float(peak[1])
    if cfg.subpixel:
        r, c = peak
        dy += _parabolic(surface[(r - 1) % rows, c], value, surface[(r + 1) % rows, c])
        dx += _parabolic(surface[r, (c - 1) % cols], value, surface[r, (c + 1) % cols])
    if dy > rows / 2:
        dy -= rows
    if dx > cols / 2:
        dx -= cols
    if not confidence:
        return CorrelationResult((dx, dy), float(np.clip(value, 0.0, 1.0)), math.nan)
    second = _second_peak(surface, peak)
    sharpness = value / second if second > 0 else math.inf
    if cfg.confidence_lowpass != cfg.lowpass:
        conf = _weighted_surface(cross, shape, cfg.confidence_lowpass)
        idx = np.ix_(*[np.arange(p - 1, p + 2) % n for p, n in zip(peak, shape)])
        value = float(conf[idx].max())
    return CorrelationResult((dx, dy), float(np.clip(value, 0.0, 1.0)), sharpness)


def highpass(shape: tuple[int, int]) -> np.ndarray:
    """Emphasis filter for a centred spectrum; zero at DC, ~2 at Nyquist."""
    fy = np.fft.fftshift(np.fft.fftfreq(shape[0]))[:, None]
    fx = np.fft.fftshift(np.fft.fftfreq(shape[1]))[None, :]
    x = np.cos(np.pi * fy) * np.cos(np.pi * fx)
    return (1.0 - x) * (2.0 - x)


def log_polar_remap(
    magnitude_spectrum: np.ndarray,
    n_angles: int = 1024,
    n_radii: int = 256,
    r_min: float = 2.0,
    r_max: float | None = None,
) -> np.ndarray:
    """Resample a centred magnitude spectrum on a (angle, log-radius) grid.

    Row ``i`` is the angle ``pi * i / n_angles`` (the half plane suffices for
    the spectrum of a real image), column ``j`` the radius
    ``r_min * base**j``. Sampling is bilinear.
    """
    spec = np.asarray(magnitude_spectrum, dtype=np.float64)
    cy, cx = spec.shape[0] // 2, spec.shape[1] // 2
    if r_max is None:
        r_max = min(cy, cx) - 1.0
    theta = np.pi * np.arange(n_angles) / n_angles
    radius = r_min * log_base(r_min, r_max, n_radii) ** np.arange(n_radii)
    rows = cy + radius[None, :] * np.sin(theta)[:, None]
    cols = cx + radius[None, :] * np.cos(theta)[:, None]
    return ndimage.map_coordinates(spec, np.stack([rows, cols]), order=1, mode="constant", cval=0.0)


def log_base(r_min: float, r_max: float, n_radii: int) -> float:
    return (r_max / r_min) ** (1.0 / (n_radii - 1))


def _lp_spectrum(img: np.ndarray, cfg: RegistrationConfig) -> np.ndarray:
    """Log-polar map of the zero-padded log-magnitude spectrum."""
    n = cfg.spectrum_padding * max(img.shape)
    mag = np.log1p(np.abs(np.fft.fftshift(fft.fft2(img, s=(n, n)))))
    lo, hi = cfg.radius_range
    return log_polar_remap(mag, cfg.n_angles, cfg.n_radii, max(lo * n, 1.0), hi * n)


def _angle_correlation(lp_a: np.ndarray, lp_b: np.ndarray) -> np.ndarray:
    """1-D phase correlation along the angle axis, pooled over radii."""
    fa = np.fft.fft(lp_a - lp_a.mean(axis=0), axis=0)
    fb = np.fft.fft(lp_b - lp_b.mean(axis=0), axis=0)
    cross = (np.conj(fa) * fb).sum(axis=1)
    mag = np.abs(cross)
    floor = mag.max() * 1e-12
    if not np.isfinite(floor) or floor <= 0.0:
        raise ValueError("degenerate spectrum")
    return np.fft.ifft(np.where(mag > floor, cross / np.maximum(mag, floor), 0.0)).real


def _rotation_peaks(lp_a: np.ndarray, lp_b: np.ndarray, subpixel: bool, count: int) -> list[tuple[float, float]]:
    """Strongest local maxima of the angular correlation as (angle, value)."""
    corr = _angle_correlation(lp_a, lp_b)
    n = corr.size
    is_max = (corr >= np.roll(corr, 1)) & (corr > np.roll(corr, -1))
    idx = np.flatnonzero(is_max)
    idx = idx[np.argsort(corr[idx])[::-1][:count]]
    out = []
    for i in idx:
        pos = float(i)
        if subpixel:
            pos += _parabolic(corr[(i - 1) % n], corr[i], corr[(i + 1) % n])
        if pos > n / 2:
            pos -= n
        out.append((pos * np.pi / n, float(corr[i])))
    return out


_INTERP = {1: cv2.INTER_LINEAR, 3: cv2.INTER_CUBIC}


def _rotation_matrix(angle: float, shape: tuple[int, int]) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    h, w = shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    return np.array([[c, -s, cx - c * cx + s * cy], [s, c, cy - s * cx - c * cy]])


def _warp32(img: np.ndarray, m: np.ndarray, order: int = 3) -> np.ndarray:
    """``out(x) = img(m [x; 1])`` in float32; zero outside."""
    h, w = img.shape
    return cv2.warpAffine(np.asarray(img, dtype=np.float32), m, (w, h), flags=_INTERP[order] | cv2.WARP_INVERSE_MAP,
                          borderMode=cv2.BORDER_CONSTANT, borderValue=0.0)


def rotate_about_center(img: np.ndarray, angle: float, order: int = 3) -> np.ndarray:
    """``out(x) = img(R(angle) (x - c) + c)`` in (col, row) coordinates.

    Undoes a rotation by ``angle``; samples outside the image are zero.
    """
    return _warp32(img, _rotation_matrix(angle, img.shape), order).astype(np.float64)


def _reduce(img: np.ndarray, k: int) -> np.ndarray:
    if k == 1:
        return img.astype(np.float32)
    h, w = img.shape
    return cv2.resize(img.astype(np.float32), (w // k, h // k), interpolation=cv2.INTER_AREA)


class _Derotator:
    """Translation correlation of ``a`` against ``b`` de-rotated by a trial angle.

    The angle search runs on reduced images in single precision; :meth:`final`
    at full resolution in double. Rotation about the image centre commutes
    with the area reduction, so trial angles mean the same at both scales.
    """

    def __init__(self, a: np.ndarray, b: np.ndarray, cfg: RegistrationConfig):
        k = cfg.search_scale if min(a.shape) // cfg.search_scale >= 64 else 1
        self.fa = fft.rfft2(_apply_window(a, cfg.window))
        self.b = b
        self.cfg = cfg
        self.small_b = _reduce(b, k)
        self.small_cfg = replace(cfg, lowpass=None if cfg.lowpass is None else min(0.5, cfg.lowpass * k))
        self.fa_small = fft.rfft2(_apply_window(_reduce(a, k), cfg.window))
        self.cache: dict[float, CorrelationResult] = {}

    def __call__(self, angle: float) -> CorrelationResult:
        """Search score: peak value of the localisation surface."""
        if angle not in self.cache:
            b = self.small_b
            fb = fft.rfft2(_apply_window(_warp32(b, _rotation_matrix(angle, b.shape)), self.cfg.window))
            self.cache[angle] = _correlate_spectra(self.fa_small, fb, b.shape, self.small_cfg, False)
        return self.cache[angle]

    def final(self, angle: float) -> CorrelationResult:
        rotated = _warp32(self.b, _rotation_matrix(angle, self.b.shape)).astype(np.float64)
        fb = fft.rfft2(_apply_window(rotated, self.cfg.window))
        return _correlate_spectra(self.fa, fb, self.b.shape, self.cfg)


def _refine(angle: float, trial: _Derotator, step: float, iterations: int = 6) -> float:
    """Local parabolic ascent of the translation peak over the angle."""
    for _ in range(iterations):
        fm, f0, fp = (trial(angle + d).peak_value for d in (-step, 0.0, step))
        if f0 >= fm and f0 >= fp:
            angle += step * _parabolic(fm, f0, fp)
            step *= 0.5
        else:
            angle += step if fp > fm else -step
    return angle


def _rotation_candidates(a: np.ndarray, b: np.ndarray, cfg: RegistrationConfig):
    if not np.any(a) or not np.any(b):
        raise ValueError("degenerate spectrum: zero-energy image")
    peaks = _rotation_peaks(_lp_spectrum(a, cfg), _lp_spectrum(b, cfg), cfg.subpixel, max(1, cfg.rotation_candidates))
    trial = _Derotator(a, b, cfg)
    best = None
    for angle, _ in peaks:
        for cand in (angle, angle - math.pi if angle > 0 else angle + math.pi):
            corr = trial(cand)
            if best is None or corr.peak_value > best[1].peak_value:
                best = (cand, corr)
    angle = best[0]
    if cfg.refine_rotation:
        angle = _refine(angle, trial, cfg.refine_step)
    angle = (angle + math.pi) % (2.0 * math.pi) - math.pi
    return angle, trial.final(angle), peaks[0][1]


@dataclass(frozen=True)
class RotationResult:
    angle: float
    confidence: float
    low_confidence: bool


def estimate_rotation(a: np.ndarray, b: np.ndarray, cfg: RegistrationConfig = RegistrationConfig()) -> RotationResult:
    """Rotation (radians, counter-clockwise in (col, row) axes) taking ``a`` to ``b``.

    Of the two angles consistent with the symmetric magnitude spectrum, the
    one giving the stronger translation correlation is kept.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("frames differ in size")
    angle, corr, _ = _rotation_candidates(a, b, cfg)
    return RotationResult(angle, corr.peak_value, corr.peak_value < cfg.min_confidence)


def _pixel_transform(angle: float, corr: CorrelationResult, shape: tuple[int, int]) -> Transform2D:
    # b' (de-rotated about c) is a shifted by d, so t = R (d - c) + c
    R = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    c = (np.array(shape[::-1], dtype=float) - 1.0) / 2.0
    t = R @ (np.array(corr.shift) - c) + c
    return Transform2D(angle, (float(t[0]), float(t[1])))


def register_images(a: np.ndarray, b: np.ndarray, cfg: RegistrationConfig = RegistrationConfig()):
    """Pixel-space registration of two square images.

    Returns ``(transform_px, correlation, rotation_peak)`` with
    ``b(T x) ~ a(x)`` for pixel coordinates ``x = (col, row)``.
    """
    angle, corr, peak = _rotation_candidates(a, b, cfg)
    return _pixel_transform(angle, corr, a.shape), corr, peak


def warp_image(img: np.ndarray, t_px: Transform2D, order: int = 3) -> np.ndarray:
    """``out(x) = img(T x)`` for pixel coordinates ``x = (col, row)``; zero outside."""
    c, s = math.cos(t_px.rotation), math.sin(t_px.rotation)
    m = np.array([[c, -s, t_px.translation[0]], [s, c, t_px.translation[1]]])
    return _warp32(img, m, order).astype(np.float64)


def _residual(a: np.ndarray, b: np.ndarray, cfg: RegistrationConfig) -> Transform2D:
    """Small leftover motion between nearly aligned images (no log-polar search)."""
    trial = _Derotator(a, b, cfg)
    angle = _refine(0.0, trial, cfg.refine_step / 4, iterations=4) if cfg.refine_rotation else 0.0
    return _pixel_transform(angle, trial.final(angle), a.shape)


# --- sonar frames -------------------------------------------------------------


@dataclass(frozen=True)
class Canvas:
    """Square raster frames are registered on."""

    origin: tuple[float, float]
    fan_origin: tuple[float, float]
    fan_shape: tuple[int, int]
    offset: tuple[int, int]  # (row, col) of the fan raster inside the canvas
    size: int
    meters_per_pixel: float


@lru_cache(maxsize=16)
def canvas_for(g: BeamGeometry, size: int, meters_per_pixel: float | None) -> Canvas:
    u0, u1, v0, v1 = fan_extent(g)
    if meters_per_pixel is None:
        margin = 4
        meters_per_pixel = max(u1 - u0, v1 - v0) / (size - 2 * margin - 2)
    fan_origin, fan_shape = fan_grid(g, meters_per_pixel)
    if max(fan_shape) > size:
        raise ValueError(f"fan raster {fan_shape} does not fit a {size}x{size} canvas")
    off = ((size - fan_shape[0]) // 2, (size - fan_shape[1]) // 2)
    origin = (fan_origin[0] - off[1] * meters_per_pixel, fan_origin[1] - off[0] * meters_per_pixel)
    return Canvas(origin, fan_origin, fan_shape, off, size, meters_per_pixel)


_TAPERS: dict[tuple[bytes, float], np.ndarray] = {}


def _taper(valid: np.ndarray, width: float) -> np.ndarray:
    """Raised-cosine ramp over the first ``width`` pixels inside the footprint.

    Frames of one sonar share a footprint, so the last few are memoised.
    """
    if width <= 0:
        return valid.astype(float)
    key = (np.packbits(valid).tobytes() + bytes(str(valid.shape), "ascii"), width)
    if key not in _TAPERS:
        dist = ndimage.distance_transform_edt(valid)
        if len(_TAPERS) >= 8:
            _TAPERS.pop(next(iter(_TAPERS)))
        _TAPERS[key] = 0.5 - 0.5 * np.cos(np.pi * np.clip(dist / width, 0.0, 1.0))
    return _TAPERS[key]


def _place(fan: FanImage, canvas: Canvas) -> tuple[np.ndarray, np.ndarray]:
    """Raw fan image and its footprint on the square canvas."""
    img = np.zeros((canvas.size, canvas.size))
    valid = np.zeros((canvas.size, canvas.size), dtype=bool)
    r0, c0 = canvas.offset
    h, w = fan.image.shape
    img[r0:r0 + h, c0:c0 + w] = np.where(fan.valid, fan.image, 0.0)
    valid[r0:r0 + h, c0:c0 + w] = fan.valid
    return img, valid


def _windowed(img: np.ndarray, valid: np.ndarray, cfg: RegistrationConfig,
              taper: np.ndarray | None = None) -> np.ndarray:
    if not valid.any():
        return np.zeros_like(img)
    out = np.where(valid, img - img[valid].mean(), 0.0)
    if cfg.window == "raised-cosine":
        out = out * (_taper(valid, cfg.taper_px) if taper is None else taper)
    return out


def prepare_fan(fan: FanImage, canvas: Canvas, cfg: RegistrationConfig) -> np.ndarray:
    """Zero-mean, edge-tapered fan image placed on the square canvas.

    Bins outside the valid footprint take the frame mean, so after mean
    removal they contribute nothing and the footprint edge is suppressed.
    """
    return _windowed(*_place(fan, canvas), cfg)


def _raw_canvas(frame: SonarFrame, cfg: RegistrationConfig) -> tuple[np.ndarray, np.ndarray, Canvas]:
    canvas = canvas_for(frame.geometry, cfg.size, cfg.meters_per_pixel)
    fan = fan_rasterize(frame, canvas.meters_per_pixel, canvas.fan_origin, canvas.fan_shape)
    return (*_place(fan, canvas), canvas)


def frame_to_canvas(frame: SonarFrame, cfg: RegistrationConfig = RegistrationConfig()) -> tuple[np.ndarray, Canvas]:
    img, valid, canvas = _raw_canvas(frame, cfg)
    return _windowed(img, valid, cfg), canvas


def pixel_to_metric(t_px: Transform2D, canvas: Canvas) -> Transform2D:
    """Convert a canvas-pixel transform to sonar-frame metres."""
    mpp = canvas.meters_per_pixel
    o = np.array(canvas.origin)
    c, s = math.cos(t_px.rotation), math.sin(t_px.rotation)
    Ro = np.array([c * o[0] - s * o[1], s * o[0] + c * o[1]])
    t = mpp * np.array(t_px.translation) + o - Ro
    return Transform2D(t_px.rotation, (float(t[0]), float(t[1])))


def metric_to_pixel(t_m: Transform2D, canvas: Canvas) -> Transform2D:
    mpp = canvas.meters_per_pixel
    o = np.array(canvas.origin)
    c, s = math.cos(t_m.rotation), math.sin(t_m.rotation)
    Ro = np.array([c * o[0] - s * o[1], s * o[0] + c * o[1]])
    t = (np.array(t_m.translation) - o + Ro) / mpp
    return Transform2D(t_m.rotation, (float(t[0]), float(t[1])))


def register_pair(a: SonarFrame, b: SonarFrame, cfg: RegistrationConfig = RegistrationConfig()) -> RegistrationResult:
    """Estimate the transform mapping frame-``a`` coordinates to frame-``b`` coordinates.

    The confidence is that of the initial, sensor-windowed correlation; the
    refinement passes only correct the estimate.
    """
    if a.geometry != b.geometry:
        raise ValueError("frames do not share geometry")
    raw_a, valid_a, canvas = _raw_canvas(a, cfg)
    raw_b, valid_b, _ = _raw_canvas(b, cfg)
    t_px, corr, peak = register_images(_windowed(raw_a, valid_a, cfg), _windowed(raw_b, valid_b, cfg), cfg)
    low = corr.peak_value < cfg.min_confidence
    if low:
        log.debug("low-confidence registration t=%d->%d (peak %.3f)", a.timestamp_index, b.timestamp_index,
                  corr.peak_value)
    else:
        taper_a, taper_b = (_taper(v, cfg.taper_px) for v in (valid_a, valid_b))
        for _ in range(cfg.refine_passes):
            # b warped onto a; both windowed by the taper of the shared footprint.
            # Distance to the edge of an intersection is the smaller of the two
            # distances, so that taper is the pointwise minimum.
            common = valid_a & (warp_image(valid_b.astype(float), t_px, order=1) > 0.999)
            if common.sum() < 0.25 * valid_a.sum():
                break
            taper = np.where(common, np.minimum(taper_a, warp_image(taper_b, t_px, order=1)), 0.0)
            warped = warp_image(raw_b, t_px)
            t_px = compose(t_px, _residual(_windowed(raw_a, common, cfg, taper),
                                           _windowed(warped, common, cfg, taper), cfg))
    return RegistrationResult(pixel_to_metric(t_px, canvas), t_px, corr.peak_value, low, peak, corr)
