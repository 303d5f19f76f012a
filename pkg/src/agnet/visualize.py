"""Region-overlay rendering: keypoint dots, solid primary boxes, one dashed
secondary box, painted directly into the pixel array with a fixed palette."""

from __future__ import annotations

import numpy as np

from .regions import BoundingBox, RegionSet

# Deterministic palette; primary box i gets PALETTE[i % len].
PALETTE = [
    (230, 25, 75), (60, 180, 75), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60),
    (250, 190, 190), (0, 128, 128), (170, 110, 40), (128, 0, 0),
    (0, 0, 128), (128, 128, 0), (255, 215, 180), (128, 128, 128),
]
KEYPOINT_COLOR = (255, 255, 0)
SECONDARY_COLOR = (0, 0, 0)
DASH_ON, DASH_OFF = 4, 4


def _paint(canvas: np.ndarray, rows, cols, color) -> None:
    h, w = canvas.shape[:2]
    rows = np.clip(np.asarray(rows, dtype=np.int64), 0, h - 1)
    cols = np.clip(np.asarray(cols, dtype=np.int64), 0, w - 1)
    canvas[rows, cols] = color


def box_pixel_edges(box: BoundingBox, height: int, width: int):
    """Integer pixel rows/cols of a box outline, clamped to the canvas."""
    x0 = int(np.clip(round(box.x0), 0, width - 1))
    x1 = int(np.clip(round(box.x1) - 1, 0, width - 1))
    y0 = int(np.clip(round(box.y0), 0, height - 1))
    y1 = int(np.clip(round(box.y1) - 1, 0, height - 1))
    if x1 < x0:
        x1 = x0
    if y1 < y0:
        y1 = y0
    return x0, y0, x1, y1


def _draw_box(canvas: np.ndarray, box: BoundingBox, color, dashed: bool = False) -> None:
    h, w = canvas.shape[:2]
    x0, y0, x1, y1 = box_pixel_edges(box, h, w)
    xs = np.arange(x0, x1 + 1)
    ys = np.arange(y0, y1 + 1)
    if dashed:
        xs = xs[(xs - x0) % (DASH_ON + DASH_OFF) < DASH_ON]
        ys = ys[(ys - y0) % (DASH_ON + DASH_OFF) < DASH_ON]
    _paint(canvas, np.full_like(xs, y0), xs, color)
    _paint(canvas, np.full_like(xs, y1), xs, color)
    _paint(canvas, ys, np.full_like(ys, x0), color)
    _paint(canvas, ys, np.full_like(ys, x1), color)


def _draw_dot(canvas: np.ndarray, x: float, y: float, color) -> None:
    cx, cy = int(round(x)), int(round(y))
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            _paint(canvas, [cy + dy], [cx + dx], color)


def render_overlay(image: np.ndarray, region_set: RegionSet,
                   selected_secondary: int = 0) -> np.ndarray:
    """Return a uint8 HxWx3 overlay: dots, primary boxes, one dashed secondary."""
    canvas = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255)
    canvas = canvas.astype(np.uint8)
    if canvas.ndim == 2:
        canvas = np.repeat(canvas[..., None], 3, axis=2)
    for p in region_set.keypoints:
        _draw_dot(canvas, p.x, p.y, KEYPOINT_COLOR)
    if region_set.secondary:
        idx = selected_secondary % len(region_set.secondary)
        _draw_box(canvas, region_set.secondary[idx], SECONDARY_COLOR, dashed=True)
    for i, box in enumerate(region_set.primary):
        _draw_box(canvas, box, PALETTE[i % len(PALETTE)])
    return canvas
