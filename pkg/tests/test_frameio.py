import math

import cv2
import numpy as np
import pytest

from flsmosaic import frameio
from flsmosaic.frameio import SonarFrame
from flsmosaic.geometry import BeamGeometry, Pose2D

SMALL = BeamGeometry(num_beams=8, samples_per_beam=8)


def _clahe_oracle(img: np.ndarray, clip_limit: float, tiles: tuple[int, int]) -> np.ndarray:
    """Plain-loop CLAHE on 256 levels for images divisible by the tile grid.

    Per tile: histogram, clip at clip_limit * tile_pixels / 256 (at least 1),
    spread the excess evenly with the remainder dealt out at a fixed stride,
    cumulative-sum lookup table, then bilinear blending of the four
    neighbouring tile tables at each pixel.
    """
    rows, cols = tiles
    h, w = img.shape
    th, tw = h // rows, w // cols
    n = th * tw
    clip = max(int(clip_limit * n / 256), 1)
    luts = np.zeros((rows, cols, 256))
    for ty in range(rows):
        for tx in range(cols):
            hist = [0] * 256
            for v in img[ty * th:(ty + 1) * th, tx * tw:(tx + 1) * tw].ravel():
                hist[int(v)] += 1
            excess = 0
            for i in range(256):
                if hist[i] > clip:
                    excess += hist[i] - clip
                    hist[i] = clip
            batch, residual = divmod(excess, 256)
            hist = [x + batch for x in hist]
            step = max(256 // residual, 1) if residual else 0
            i = 0
            while i < 256 and residual > 0:
                hist[i] += 1
                residual -= 1
                i += step
            total = 0
            scale = np.float32(255.0 / n)
            for i in range(256):
                total += hist[i]
                luts[ty, tx, i] = min(255, max(0, np.rint(np.float32(total) * scale)))
    out = np.zeros_like(img)
    for y in range(h):
        for x in range(w):
            fy = np.float32(y) * np.float32(1.0 / th) - np.float32(0.5)
            fx = np.float32(x) * np.float32(1.0 / tw) - np.float32(0.5)
            y1, x1 = math.floor(fy), math.floor(fx)
            ya, xa = fy - y1, fx - x1
            y2, x2 = min(y1 + 1, rows - 1), min(x1 + 1, cols - 1)
            y1, x1 = max(y1, 0), max(x1, 0)
            v = int(img[y, x])
            top = luts[y1, x1, v] * (1 - xa) + luts[y1, x2, v] * xa
            bot = luts[y2, x1, v] * (1 - xa) + luts[y2, x2, v] * xa
            out[y, x] = np.rint(top * (1 - ya) + bot * ya)
    return out


def _frame(values, geometry=SMALL, t=1) -> SonarFrame:
    return SonarFrame(np.asarray(values, dtype=float), t, geometry)


# --- loading and saving -------------------------------------------------------


def test_load_identical_frames(tmp_path):
    g = BeamGeometry()
    codes = np.random.default_rng(0).integers(0, 256, g.shape, dtype=np.uint8)
    for i in range(10):
        cv2.imwrite(str(tmp_path / f"frame_{i:05d}.pgm"), codes)
    frames = frameio.load_sequence(tmp_path, g)
    assert len(frames) == 10
    assert [f.timestamp_index for f in frames] == list(range(1, 11))
    for f in frames:
        assert np.array_equal(f.intensities, codes / 255.0)


def test_empty_directory_is_an_error(tmp_path):
    with pytest.raises(ValueError, match="at least 2 frames"):
        frameio.load_sequence(tmp_path)


def test_sixteen_bit_normalization(tmp_path):
    codes = np.zeros(SMALL.shape, np.uint16)
    codes[3, 4] = 65535
    codes[0, 0] = 1
    for i in range(2):
        cv2.imwrite(str(tmp_path / f"f{i}.png"), codes)
    f = frameio.load_sequence(tmp_path, SMALL, mask_blind=False)[0]
    assert f.intensities[3, 4] == 1.0
    assert f.intensities[0, 0] == 1 / 65535


def test_mixed_dimensions_rejected(tmp_path):
    cv2.imwrite(str(tmp_path / "a.pgm"), np.zeros((8, 8), np.uint8))
    cv2.imwrite(str(tmp_path / "b.pgm"), np.zeros((9, 8), np.uint8))
    with pytest.raises(ValueError, match="inconsistent geometry"):
        frameio.load_sequence(tmp_path)


def test_unreadable_file_named(tmp_path):
    cv2.imwrite(str(tmp_path / "a.pgm"), np.zeros((8, 8), np.uint8))
    (tmp_path / "b.pgm").write_bytes(b"not an image")
    with pytest.raises(OSError, match="b.pgm"):
        frameio.load_sequence(tmp_path, SMALL)


def test_save_load_idempotent(tmp_path):
    rng = np.random.default_rng(3)
    src = rng.integers(1, 256, SMALL.shape) / 255.0
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    for i in range(2):
        frameio.save_frame(_frame(src), a / f"f{i}.pgm")
    once = frameio.load_sequence(a, SMALL)
    for i, f in enumerate(once):
        frameio.save_frame(f, b / f"f{i}.pgm")
    twice = frameio.load_sequence(b, SMALL)
    assert all(np.array_equal(x.intensities, y.intensities) for x, y in zip(once, twice))
    assert np.array_equal(once[0].intensities, src)


def test_stride_keeps_file_positions(tmp_path):
    for i in range(7):
        cv2.imwrite(str(tmp_path / f"f{i}.pgm"), np.full(SMALL.shape, i + 1, np.uint8))
    frames = frameio.load_sequence(tmp_path, SMALL, stride=3)
    assert [f.timestamp_index for f in frames] == [1, 4, 7]
    assert [f.intensities[0, 0] * 255 for f in frames] == [1, 4, 7]
    lazy = list(frameio.iter_sequence(tmp_path, SMALL, stride=3))
    assert all(np.array_equal(x.intensities, y.intensities) for x, y in zip(frames, lazy))


def test_blind_bands_masked(tmp_path):
    codes = np.full(SMALL.shape, 100, np.uint8)
    codes[:2] = 0  # near-range band without echoes
    codes[-1] = 0
    codes[4] = 0  # dark row inside the image stays valid
    for i in range(2):
        cv2.imwrite(str(tmp_path / f"f{i}.pgm"), codes)
    f = frameio.load_sequence(tmp_path, SMALL)[0]
    assert f.valid is not None
    assert not f.valid[:2].any() and not f.valid[-1].any()
    assert f.valid[2:-1].all()


def test_frame_invariants():
    with pytest.raises(ValueError, match="inconsistent geometry"):
        SonarFrame(np.zeros((3, 3)), 1, SMALL)
    with pytest.raises(ValueError):
        _frame(np.full(SMALL.shape, 1.5))
    f = _frame(np.zeros(SMALL.shape))
    with pytest.raises(ValueError):
        f.intensities[0, 0] = 1.0


def test_geometry_and_pose_files(tmp_path):
    g = BeamGeometry(num_beams=64, samples_per_beam=100, max_range=30.0, horizontal_fov=math.radians(90))
    frameio.write_geometry(g, tmp_path / "geometry.txt")
    assert frameio.read_geometry(tmp_path / "geometry.txt") == g
    (tmp_path / "partial.txt").write_text("# only beams\nnum_beams = 128\n")
    assert frameio.read_geometry(tmp_path / "partial.txt") == BeamGeometry(num_beams=128)
    poses = [Pose2D(0.1 * i, -0.2 * i, 0.01 * i) for i in range(5)]
    frameio.write_poses(poses, tmp_path / "p.csv")
    back = frameio.read_poses(tmp_path / "p.csv")
    assert [r.pose for r in back] == poses
    assert [r.timestamp_index for r in back] == [1, 2, 3, 4, 5]


def test_pose_file_needs_increasing_time(tmp_path):
    (tmp_path / "p.csv").write_text("t,x,y,theta\n1,0,0,0\n1,0,0,0\n")
    with pytest.raises(ValueError, match="strictly increasing"):
        frameio.read_poses(tmp_path / "p.csv")
    (tmp_path / "q.csv").write_text("t,x,y\n1,0,0\n")
    with pytest.raises(ValueError, match="header"):
        frameio.read_poses(tmp_path / "q.csv")


# --- CLAHE --------------------------------------------------------------------


def test_clahe_constant_image():
    out = frameio.clahe(_frame(np.full(SMALL.shape, 0.4)), tiles=(2, 2))
    assert np.ptp(out.intensities) <= 1 / 255 + 1e-12


def test_clahe_two_level_against_oracle():
    img = np.where((np.arange(8)[:, None] + np.arange(8)[None, :]) % 3 == 0, 0.8, 0.2)
    img[:4, :4] = np.where(img[:4, :4] > 0.5, 0.2, 0.8)  # vary the mix between tiles
    codes = frameio.quantize(img)
    expected = _clahe_oracle(codes, 2.0, (2, 2))
    out = frameio.clahe(_frame(img), clip_limit=2.0, tiles=(2, 2))
    assert np.array_equal(frameio.quantize(out.intensities), expected)
    lo, hi = expected[codes == 51], expected[codes == 204]
    assert lo.max() < 51 + 1 or hi.min() > 204 - 1  # levels move apart, never together


@pytest.mark.parametrize("seed", range(5))
def test_clahe_random_against_oracle(seed):
    rng = np.random.default_rng(seed)
    g = BeamGeometry(num_beams=12, samples_per_beam=16)
    codes = rng.integers(0, 256, g.shape).astype(np.uint8)
    out = frameio.clahe(SonarFrame(codes / 255.0, 1, g), clip_limit=3.0, tiles=(4, 3))
    assert np.array_equal(frameio.quantize(out.intensities), _clahe_oracle(codes, 3.0, (4, 3)))


def test_clahe_single_tile_is_global_equalization():
    rng = np.random.default_rng(7)
    codes = rng.integers(40, 200, SMALL.shape).astype(np.uint8)
    out = frameio.clahe(_frame(codes / 255.0), clip_limit=1e6, tiles=(1, 1))
    cdf = np.cumsum(np.bincount(codes.ravel(), minlength=256))
    expected = np.rint(cdf * (255.0 / codes.size))[codes]
    assert np.array_equal(frameio.quantize(out.intensities), expected.astype(np.uint8))


def test_clahe_range_and_monotone():
    rng = np.random.default_rng(11)
    img = rng.random(BeamGeometry().shape)
    out = frameio.clahe(SonarFrame(img, 1, BeamGeometry())).intensities
    assert out.min() >= 0.0 and out.max() <= 1.0
    # one tile, one table: monotone in the input
    one = frameio.clahe(SonarFrame(img, 1, BeamGeometry()), tiles=(1, 1)).intensities
    order = np.argsort(img.ravel(), kind="stable")
    assert np.all(np.diff(one.ravel()[order]) >= 0)


def test_clahe_rejects_bad_parameters():
    f = _frame(np.zeros(SMALL.shape))
    with pytest.raises(ValueError):
        frameio.clahe(f, tiles=(9, 2))
    with pytest.raises(ValueError):
        frameio.clahe(f, clip_limit=0.5)


# --- fan rasterization --------------------------------------------------------


def test_fan_area_matches_sector():
    g = BeamGeometry(min_range=1.0)
    mpp = 0.05
    fan = frameio.fan_rasterize(SonarFrame(np.ones(g.shape), 1, g), mpp)
    area = g.horizontal_fov / 2 * (g.max_range ** 2 - g.min_range ** 2)
    assert abs(fan.mask.sum() * mpp ** 2 - area) / area < 0.01
    assert np.allclose(fan.image[fan.mask], 1.0, atol=1e-12)
    assert not fan.image[~fan.mask].any()


def test_fan_mask_depends_only_on_geometry():
    g = BeamGeometry()
    rng = np.random.default_rng(0)
    a = frameio.fan_rasterize(SonarFrame(rng.random(g.shape), 1, g), 0.1)
    b = frameio.fan_rasterize(SonarFrame(np.zeros(g.shape), 2, g), 0.1)
    assert np.array_equal(a.mask, b.mask)


def test_single_bin_lands_on_centreline():
    g = BeamGeometry(num_beams=257, samples_per_beam=301)  # beam 128 at 0 deg, sample 150 at 7.5 m
    img = np.zeros(g.shape)
    img[150, 128] = 1.0
    mpp = 0.05
    fan = frameio.fan_rasterize(SonarFrame(img, 1, g), mpp)
    row, col = np.unravel_index(np.argmax(fan.image), fan.image.shape)
    c_expect, r_expect = fan.pixel_of(7.5, 0.0)
    assert abs(col - c_expect) <= 1 and abs(row - r_expect) <= 1


def test_rasterize_round_trip_smooth_frame():
    g = BeamGeometry()
    r = g.ranges()[:, None] / g.max_range
    th = g.bearings()[None, :]
    img = 0.5 + 0.3 * np.sin(2 * np.pi * r) * np.cos(2 * th)
    fan = frameio.fan_rasterize(SonarFrame(img, 1, g), 0.03)
    back = frameio.cartesian_to_polar(fan, g)
    assert np.abs(back - img)[5:].mean() < 0.05
