"""Semantic-region construction from clustered keypoints.

kappa primary boxes enclose the keypoint clusters; every unordered pair of
primaries contributes a union box, giving kappa*(kappa-1)/2 secondary
regions; the whole image is always appended by consumers, for a total of
R + 1 = kappa + kappa*(kappa-1)/2 + 1 regions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .clustering import ClusterAssignment, GmmConfig, GmmModel, fit_gmm, kmeans_labels
from .errors import ImageError, TooFewPointsError
from .keypoints import DetectorConfig, GrayImage, Keypoint, detect_keypoints, to_grayscale

DEFAULT_MIN_SIDE = 16.0


class RegionSource(Enum):
    KEYPOINTS = "keypoints"
    FEATURE_MAP = "feature_map"
    GRID_FALLBACK = "grid_fallback"


@dataclass(frozen=True)
class BoundingBox:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if self.x1 < self.x0 or self.y1 < self.y0:
            raise ImageError(f"degenerate box ({self.x0},{self.y0},{self.x1},{self.y1})")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    def union(self, other: "BoundingBox") -> "BoundingBox":
        return BoundingBox(min(self.x0, other.x0), min(self.y0, other.y0),
                           max(self.x1, other.x1), max(self.y1, other.y1))

    def clipped(self, width: float, height: float) -> "BoundingBox":
        return BoundingBox(
            min(max(self.x0, 0.0), width), min(max(self.y0, 0.0), height),
            min(max(self.x1, 0.0), width), min(max(self.y1, 0.0), height))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass
class RegionSet:
    kappa: int
    primary: list[BoundingBox]
    secondary: list[BoundingBox]
    whole_image: BoundingBox
    source: RegionSource
    keypoints: list[Keypoint] = field(default_factory=list)
    gmm: GmmModel | None = None

    @property
    def total_srs(self) -> int:
        return len(self.primary) + len(self.secondary)

    def boxes(self, mode: str = "both") -> list[BoundingBox]:
        """Region boxes in canonical order, whole image last.

        ``mode`` selects the ablation view: "both" (default), "primary",
        "secondary", or "whole" (whole image only).
        """
        if mode == "both":
            srs = self.primary + self.secondary
        elif mode == "primary":
            srs = list(self.primary)
        elif mode == "secondary":
            srs = list(self.secondary)
        elif mode == "whole":
            srs = []
        else:
            raise ValueError(f"unknown region mode {mode!r}")
        return srs + [self.whole_image]


def expected_sr_count(kappa: int) -> int:
    return kappa + kappa * (kappa - 1) // 2


def primary_regions(assignment: ClusterAssignment, points: np.ndarray,
                    image_width: float, image_height: float,
                    min_side: float = DEFAULT_MIN_SIDE) -> list[BoundingBox]:
    """Axis-aligned box per cluster, expanded to ``min_side`` and clipped.

    Every cluster must be nonempty (the clustering module guarantees this).
    """
    points = np.asarray(points, dtype=np.float64)
    kappa = assignment.responsibilities.shape[1]
    boxes = []
    for c in range(kappa):
        member = points[assignment.labels == c]
        if len(member) == 0:
            raise TooFewPointsError(f"cluster {c} has no member keypoints")
        box = BoundingBox(float(member[:, 0].min()), float(member[:, 1].min()),
                          float(member[:, 0].max()), float(member[:, 1].max()))
        boxes.append(_expand_min_side(box, min_side).clipped(image_width, image_height))
    return boxes


def _expand_min_side(box: BoundingBox, min_side: float) -> BoundingBox:
    x0, y0, x1, y1 = box.as_tuple()
    if x1 - x0 < min_side:
        cx = (x0 + x1) / 2.0
        x0, x1 = min(x0, cx - min_side / 2.0), max(x1, cx + min_side / 2.0)
    if y1 - y0 < min_side:
        cy = (y0 + y1) / 2.0
        y0, y1 = min(y0, cy - min_side / 2.0), max(y1, cy + min_side / 2.0)
    return BoundingBox(x0, y0, x1, y1)


def secondary_regions(primary: list[BoundingBox]) -> list[BoundingBox]:
    """Union box per unordered primary pair, (i, j) with i < j, lexicographic."""
    out = []
    for i in range(len(primary)):
        for j in range(i + 1, len(primary)):
            out.append(primary[i].union(primary[j]))
    return out


def _grid_boxes(kappa: int, width: float, height: float) -> list[BoundingBox]:
    cols = int(np.ceil(np.sqrt(kappa)))
    rows = int(np.ceil(kappa / cols))
    cell_w, cell_h = width / cols, height / rows
    boxes = []
    for idx in range(kappa):
        r, c = divmod(idx, cols)
        boxes.append(BoundingBox(c * cell_w, r * cell_h, (c + 1) * cell_w, (r + 1) * cell_h))
    return boxes


def build_region_set(image: np.ndarray, detector_cfg: DetectorConfig,
                     gmm_cfg: GmmConfig, kappa: int,
                     min_side: float = DEFAULT_MIN_SIDE) -> RegionSet:
    """Detect keypoints, cluster them, and assemble the full region set.

    ``image`` is HxWx3 (or HxW grayscale) in [0,1]. Images yielding fewer
    keypoints than ``kappa`` fall back to a uniform grid of ``kappa`` boxes.
    """
    if image.ndim == 3:
        gray = to_grayscale(image)
    elif image.ndim == 2:
        gray = GrayImage(np.asarray(image, dtype=np.float64))
    else:
        raise ImageError(f"expected HxW or HxWx3 image, got shape {image.shape}")
    width, height = float(gray.width), float(gray.height)
    whole = BoundingBox(0.0, 0.0, width, height)

    kps = detect_keypoints(gray, detector_cfg)
    if len(kps) < kappa:
        primary = _grid_boxes(kappa, width, height)
        return RegionSet(kappa=kappa, primary=primary,
                         secondary=secondary_regions(primary), whole_image=whole,
                         source=RegionSource.GRID_FALLBACK, keypoints=kps)

    points = np.array([[p.x, p.y] for p in kps])
    cfg = GmmConfig(k=kappa, covariance_regularization=gmm_cfg.covariance_regularization,
                    max_iterations=gmm_cfg.max_iterations,
                    convergence_threshold=gmm_cfg.convergence_threshold, seed=gmm_cfg.seed)
    model, assignment = fit_gmm(points, cfg)
    primary = primary_regions(assignment, points, width, height, min_side)
    return RegionSet(kappa=kappa, primary=primary,
                     secondary=secondary_regions(primary), whole_image=whole,
                     source=RegionSource.KEYPOINTS, keypoints=kps, gmm=model)


def cluster_feature_map(fmap: np.ndarray, kappa: int, image_width: float,
                        image_height: float, seed: int = 0) -> RegionSet:
    """Region set from k-means over the spatial cells of an HxWxC feature map.

    Cells are grouped by their channel vectors; each group's spatial extent
    (scaled to image coordinates) becomes a primary region.
    """
    fmap = np.asarray(fmap, dtype=np.float64)
    if fmap.ndim != 3:
        raise ImageError(f"feature map must be HxWxC, got shape {fmap.shape}")
    h, w, _ = fmap.shape
    if h * w < kappa:
        raise TooFewPointsError(f"{h * w} spatial cells cannot form {kappa} groups")

    vectors = fmap.reshape(h * w, -1)
    _, labels = kmeans_labels(vectors, kappa, seed)
    sx, sy = image_width / w, image_height / h
    primary = []
    for c in range(kappa):
        cells = np.nonzero(labels == c)[0]
        rows, cols = cells // w, cells % w
        box = BoundingBox(float(cols.min()) * sx, float(rows.min()) * sy,
                          float(cols.max() + 1) * sx, float(rows.max() + 1) * sy)
        primary.append(box.clipped(image_width, image_height))
    whole = BoundingBox(0.0, 0.0, float(image_width), float(image_height))
    return RegionSet(kappa=kappa, primary=primary,
                     secondary=secondary_regions(primary), whole_image=whole,
                     source=RegionSource.FEATURE_MAP)
