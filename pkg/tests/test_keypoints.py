"""Detector behaviour on synthetic fixtures with brute-force DoG oracles."""

import numpy as np
import pytest

from agnet.errors import ImageError
from agnet.keypoints import (
    DetectorConfig,
    GrayImage,
    detect_keypoints,
    gaussian_blur,
    to_grayscale,
)


def blob_image(size, cx, cy, sigma=2.0, amplitude=1.0, background=0.0):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    img = background + amplitude * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma ** 2))
    return GrayImage(np.clip(img, 0.0, 1.0))


class TestGrayscale:
    def test_white(self):
        rgb = np.ones((4, 5, 3))
        np.testing.assert_allclose(to_grayscale(rgb).pixels, 1.0)

    def test_pure_green(self):
        rgb = np.zeros((3, 3, 3))
        rgb[..., 1] = 1.0
        np.testing.assert_allclose(to_grayscale(rgb).pixels, 0.587)

    def test_weighted_sum_oracle(self):
        rng = np.random.default_rng(2)
        rgb = rng.uniform(size=(6, 7, 3))
        want = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
        np.testing.assert_allclose(to_grayscale(rgb).pixels, want, atol=1e-15)

    def test_rejects_gray_input(self):
        with pytest.raises(ImageError):
            to_grayscale(np.zeros((4, 4)))


class TestGaussianBlur:
    def test_constant_unchanged(self):
        img = GrayImage(np.full((16, 16), 0.37))
        out = gaussian_blur(img, 2.0)
        np.testing.assert_allclose(out.pixels, 0.37, atol=1e-12)

    def test_impulse_matches_2d_kernel(self):
        sigma = 1.3
        img = np.zeros((33, 33))
        img[16, 16] = 1.0
        out = gaussian_blur(GrayImage(img), sigma).pixels

        radius = int(np.ceil(3 * sigma))
        xs = np.arange(-radius, radius + 1)
        k1 = np.exp(-0.5 * (xs / sigma) ** 2)
        k1 /= k1.sum()
        k2 = np.outer(k1, k1)
        want = np.zeros_like(img)
        want[16 - radius:16 + radius + 1, 16 - radius:16 + radius + 1] = k2
        np.testing.assert_allclose(out, want, atol=1e-12)
        assert np.unravel_index(out.argmax(), out.shape) == (16, 16)

    def test_interior_impulse_preserves_sum(self):
        img = np.zeros((32, 32))
        img[15, 17] = 1.0
        out = gaussian_blur(GrayImage(img), 1.5).pixels
        assert abs(out.sum() - 1.0) < 1e-6


class TestDetector:
    def test_constant_image_yields_nothing(self):
        img = GrayImage(np.full((64, 64), 0.5))
        assert detect_keypoints(img) == []

    def test_blob_found_near_center(self):
        img = blob_image(64, 32.0, 32.0, sigma=2.5)
        kps = detect_keypoints(img)
        assert kps, "expected at least one keypoint on a bright blob"
        best = min(kps, key=lambda p: (p.x - 32) ** 2 + (p.y - 32) ** 2)
        assert abs(best.x - 32) <= 2 and abs(best.y - 32) <= 2

    def test_blob_agrees_with_bruteforce_scan(self):
        """Octave-0 extrema must coincide with a naive full scan of the DoG stack."""
        img = blob_image(48, 20.0, 26.0, sigma=2.0)
        cfg = DetectorConfig(octaves=1)
        kps = detect_keypoints(img, cfg)

        s_per = cfg.intervals_per_octave
        k = 2.0 ** (1.0 / s_per)
        sigmas = [cfg.base_sigma * k ** s for s in range(s_per + 3)]
        levels = [gaussian_blur(img, sigmas[0]).pixels]
        for s in range(1, s_per + 3):
            inc = np.sqrt(sigmas[s] ** 2 - sigmas[s - 1] ** 2)
            levels.append(gaussian_blur(GrayImage(levels[-1]), inc).pixels)
        dog = np.stack([levels[s + 1] - levels[s] for s in range(s_per + 2)])

        expected = set()
        for s in range(1, s_per + 1):
            for i in range(1, dog.shape[1] - 1):
                for j in range(1, dog.shape[2] - 1):
                    v = dog[s, i, j]
                    if abs(v) < cfg.contrast_threshold:
                        continue
                    cube = dog[s - 1:s + 2, i - 1:i + 2, j - 1:j + 2].copy()
                    cube[1, 1, 1] = np.nan
                    neigh = cube[np.isfinite(cube)]
                    if (v > neigh).all() or (v < neigh).all():
                        dxx = dog[s, i, j + 1] - 2 * v + dog[s, i, j - 1]
                        dyy = dog[s, i + 1, j] - 2 * v + dog[s, i - 1, j]
                        dxy = 0.25 * (dog[s, i + 1, j + 1] - dog[s, i + 1, j - 1]
                                      - dog[s, i - 1, j + 1] + dog[s, i - 1, j - 1])
                        tr, det = dxx + dyy, dxx * dyy - dxy * dxy
                        r = cfg.edge_ratio_threshold
                        if det > 0 and tr * tr < (r + 1) ** 2 / r * det:
                            expected.add((j, i, s))
        got = {(int(p.x), int(p.y)) for p in kps}
        assert got == {(x, y) for x, y, _ in expected}

    def test_rotation_preserves_count_on_checkerboard(self):
        tile = np.kron([[0, 1] * 4, [1, 0] * 4] * 4, np.ones((8, 8)))
        img = GrayImage(tile.astype(np.float64))
        rotated = GrayImage(np.rot90(tile).copy())
        assert len(detect_keypoints(img)) == len(detect_keypoints(rotated))

    def test_too_small_rejected(self):
        with pytest.raises(ImageError):
            detect_keypoints(GrayImage(np.zeros((16, 64))))

    def test_response_threshold_and_uniqueness(self):
        rng = np.random.default_rng(8)
        noise = gaussian_blur(GrayImage(rng.uniform(size=(96, 96))), 1.0)
        cfg = DetectorConfig(max_keypoints=200)
        kps = detect_keypoints(noise, cfg)
        assert len(kps) <= 200
        assert all(p.response >= cfg.contrast_threshold for p in kps)
        triples = [(p.x, p.y, p.scale) for p in kps]
        assert len(triples) == len(set(triples))

    def test_sorted_by_response(self):
        rng = np.random.default_rng(8)
        noise = gaussian_blur(GrayImage(rng.uniform(size=(96, 96))), 1.0)
        kps = detect_keypoints(noise)
        responses = [p.response for p in kps]
        assert responses == sorted(responses, reverse=True)

    def test_determinism(self):
        rng = np.random.default_rng(4)
        img = GrayImage(rng.uniform(size=(64, 64)))
        assert detect_keypoints(img) == detect_keypoints(img)

    def test_translation_covariance(self):
        base = np.full((96, 96), 0.1)
        blob = blob_image(96, 40.0, 44.0, sigma=2.0, background=0.1)
        shifted = np.full((96, 96), 0.1)
        dx, dy = 5, 3
        shifted[dy:, dx:] = blob.pixels[:-dy, :-dx]
        cfg = DetectorConfig(octaves=2)
        kps_a = detect_keypoints(GrayImage(blob.pixels), cfg)
        kps_b = detect_keypoints(GrayImage(shifted), cfg)
        interior = [p for p in kps_a if 10 <= p.x <= 86 and 10 <= p.y <= 86]
        assert interior
        for p in interior:
            best = min(kps_b, key=lambda q: (q.x - p.x - dx) ** 2 + (q.y - p.y - dy) ** 2)
            dist = np.hypot(best.x - p.x - dx, best.y - p.y - dy)
            assert dist <= 1.0, f"keypoint at ({p.x},{p.y}) moved {dist:.2f}px off"
