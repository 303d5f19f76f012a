"""Salient keypoint detection via difference-of-Gaussians scale-space extrema.

Positions only: no orientation assignment and no descriptors, since the
downstream clustering consumes (x, y) locations alone. Defaults follow the
classical published constants (sigma 1.6, 3 intervals per octave, contrast
threshold 0.03, edge ratio 10).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ImageError

# Octaves stop once an image side falls below this; a 3x3x3 extremum
# neighbourhood plus a one-pixel border needs at least this much room.
_MIN_OCTAVE_SIDE = 8


@dataclass(frozen=True)
class GrayImage:
    """Grayscale image, pixels in [0,1], row-major float64."""

    pixels: np.ndarray  # shape (height, width)

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise ImageError(f"GrayImage needs a 2-D array, got shape {self.pixels.shape}")
        lo, hi = float(self.pixels.min()), float(self.pixels.max())
        if lo < 0.0 or hi > 1.0:
            raise ImageError(f"GrayImage pixels outside [0,1]: range [{lo:.4g}, {hi:.4g}]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    scale: float
    response: float


@dataclass(frozen=True)
class DetectorConfig:
    octaves: int = 4
    intervals_per_octave: int = 3
    base_sigma: float = 1.6
    contrast_threshold: float = 0.03
    edge_ratio_threshold: float = 10.0
    max_keypoints: int = 500

    def __post_init__(self):
        if min(self.octaves, self.intervals_per_octave, self.max_keypoints) < 1:
            raise ImageError("detector counts must be positive")
        if self.base_sigma <= 0 or self.contrast_threshold <= 0:
            raise ImageError("detector thresholds must be positive")
        if self.edge_ratio_threshold <= 1:
            raise ImageError("edge_ratio_threshold must exceed 1")


def to_grayscale(rgb: np.ndarray) -> GrayImage:
    """Convert an HxWx3 array in [0,1] to luma: 0.299R + 0.587G + 0.114B."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ImageError(f"to_grayscale expects HxWx3, got {rgb.shape}")
    weights = np.array([0.299, 0.587, 0.114])
    return GrayImage(rgb.astype(np.float64) @ weights)


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(np.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: GrayImage, sigma: float) -> GrayImage:
    """Separable Gaussian blur, kernel radius ceil(3*sigma), reflect padding."""
    if sigma <= 0:
        raise ImageError("sigma must be positive")
    k = _gaussian_kernel(sigma)
    radius = (len(k) - 1) // 2
    out = img.pixels
    for axis in (0, 1):
        # Reflect padding may need the kernel radius capped for tiny images.
        r = min(radius, out.shape[axis] - 1)
        taps = k if r == radius else _renormalized(k, radius, r)
        pad = [(0, 0), (0, 0)]
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="reflect")
        acc = np.zeros_like(out)
        for t in range(2 * r + 1):
            sl = [slice(None), slice(None)]
            sl[axis] = slice(t, t + out.shape[axis])
            acc += taps[t] * padded[tuple(sl)]
        out = acc
    # Kernel-sum rounding can push values past the [0,1] bound by ~1e-16.
    return GrayImage(np.clip(out, 0.0, 1.0))


def _renormalized(k: np.ndarray, radius: int, r: int) -> np.ndarray:
    trimmed = k[radius - r:radius + r + 1]
    return trimmed / trimmed.sum()


def _downsample(pixels: np.ndarray) -> np.ndarray:
    return pixels[::2, ::2]


def _scan_extrema(dog: list[np.ndarray], contrast: float, edge_limit: float):
    """Yield (i, j, level, response) for 26-neighbourhood extrema that pass
    the contrast and principal-curvature tests."""
    stack = np.stack(dog)  # (levels, h, w)
    levels, h, w = stack.shape
    results = []
    for s in range(1, levels - 1):
        center = stack[s, 1:-1, 1:-1]
        strong = np.abs(center) >= contrast
        if not strong.any():
            continue
        is_max = np.ones_like(strong)
        is_min = np.ones_like(strong)
        for ds in (-1, 0, 1):
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    if ds == 0 and di == 0 and dj == 0:
                        continue
                    neigh = stack[s + ds, 1 + di:h - 1 + di, 1 + dj:w - 1 + dj]
                    is_max &= center > neigh
                    is_min &= center < neigh
                    if not (is_max | is_min).any():
                        break
        candidates = strong & (is_max | is_min)
        if not candidates.any():
            continue
        d = stack[s]
        dxx = d[1:-1, 2:] - 2 * center + d[1:-1, :-2]
        dyy = d[2:, 1:-1] - 2 * center + d[:-2, 1:-1]
        dxy = 0.25 * (d[2:, 2:] - d[2:, :-2] - d[:-2, 2:] + d[:-2, :-2])
        tr = dxx + dyy
        det = dxx * dyy - dxy * dxy
        limit = (edge_limit + 1.0) ** 2 / edge_limit
        flat_enough = (det > 0) & (tr * tr < limit * det)
        keep = candidates & flat_enough
        for i, j in zip(*np.nonzero(keep)):
            results.append((i + 1, j + 1, s, abs(center[i, j])))
    return results


def detect_keypoints(img: GrayImage, cfg: DetectorConfig = DetectorConfig()) -> list[Keypoint]:
    """Detect scale-space extrema of the difference-of-Gaussians pyramid.

    Returns keypoints in base-image coordinates, sorted by response
    descending (ties broken by y, x, then scale) and truncated to
    ``cfg.max_keypoints``. Deterministic for fixed input and config.
    """
    if min(img.width, img.height) < 32:
        raise ImageError(f"image {img.width}x{img.height} too small; need at least 32px per side")

    s_per = cfg.intervals_per_octave
    k_step = 2.0 ** (1.0 / s_per)
    # Per-octave level sigmas: base * k^s for s = 0..s_per+2.
    level_sigmas = [cfg.base_sigma * k_step ** s for s in range(s_per + 3)]
    increments = [np.sqrt(level_sigmas[s] ** 2 - level_sigmas[s - 1] ** 2)
                  for s in range(1, s_per + 3)]

    keypoints: list[Keypoint] = []
    octave_base = gaussian_blur(img, cfg.base_sigma)
    for octave in range(cfg.octaves):
        if min(octave_base.width, octave_base.height) < _MIN_OCTAVE_SIDE:
            break
        gaussians = [octave_base]
        for inc in increments:
            gaussians.append(gaussian_blur(gaussians[-1], inc))
        dog = [gaussians[s + 1].pixels - gaussians[s].pixels for s in range(s_per + 2)]
        step = 2 ** octave
        for i, j, level, response in _scan_extrema(
                dog, cfg.contrast_threshold, cfg.edge_ratio_threshold):
            keypoints.append(Keypoint(
                x=float(j * step),
                y=float(i * step),
                scale=cfg.base_sigma * 2.0 ** (octave + level / s_per),
                response=float(response),
            ))
        # Level s_per has sigma 2*base: downsampling it by 2 restores base
        # sigma relative to the new grid.
        octave_base = GrayImage(_downsample(gaussians[s_per].pixels))

    keypoints.sort(key=lambda p: (-p.response, p.y, p.x, p.scale))
    return keypoints[:cfg.max_keypoints]
