"""Dataset layout ingestion, image codecs, and the synthetic fixture set.

Expected layout: ``root/{train,test}/<class-name>/*.{png,ppm,jpg}``. Class
indices follow lexicographic class-name order, so no labels file is needed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DatasetError, ImageError
from .keypoints import DetectorConfig, detect_keypoints, to_grayscale
from .training import LabeledImage

_EXTENSIONS = {".png", ".ppm", ".jpg", ".jpeg"}
_SPLITS = ("train", "test")


@dataclass
class DatasetManifest:
    root: Path
    classes: list[str]                      # lexicographic
    train: list[tuple[str, int]]            # (relative path, class index)
    test: list[tuple[str, int]]

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def split(self, name: str) -> list[tuple[str, int]]:
        if name not in _SPLITS:
            raise DatasetError(f"unknown split {name!r}")
        return self.train if name == "train" else self.test


def decode_image(path: Path) -> np.ndarray:
    """Decode PNG/PPM/JPEG into an HxWx3 float64 array in [0,1]."""
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ImageError(f"cannot decode image {path}: {exc}") from exc
    return arr


def encode_png(path: Path, array: np.ndarray) -> None:
    """Write an HxWx3 array in [0,1] (or uint8) as PNG."""
    if array.dtype != np.uint8:
        array = np.clip(np.round(array * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(array, mode="RGB").save(path, format="PNG")


def ingest_dataset(root) -> DatasetManifest:
    """Scan the train/test layout, validating every image decodes."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    for split in _SPLITS:
        if not (root / split).is_dir():
            raise DatasetError(f"dataset root {root} is missing the '{split}' directory")

    class_names: dict[str, set[str]] = {}
    for split in _SPLITS:
        names = sorted(p.name for p in (root / split).iterdir() if p.is_dir())
        if not names:
            raise DatasetError(f"split '{split}' under {root} contains no class directories")
        class_names[split] = set(names)
    if class_names["train"] != class_names["test"]:
        extra = class_names["train"] ^ class_names["test"]
        raise DatasetError(f"train/test class directories disagree: {sorted(extra)}")

    classes = sorted(class_names["train"])
    items: dict[str, list[tuple[str, int]]] = {s: [] for s in _SPLITS}
    for split in _SPLITS:
        for idx, name in enumerate(classes):
            class_dir = root / split / name
            files = sorted(p for p in class_dir.iterdir()
                           if p.suffix.lower() in _EXTENSIONS)
            if not files:
                raise DatasetError(f"class directory {class_dir} contains no images")
            for path in files:
                decode_image(path)  # fail early on corrupt files, naming the path
                items[split].append((str(path.relative_to(root)), idx))
    return DatasetManifest(root=root, classes=classes,
                           train=items["train"], test=items["test"])


def load_split(manifest: DatasetManifest, split: str) -> list[LabeledImage]:
    out = []
    for rel, idx in manifest.split(split):
        out.append(LabeledImage(image=decode_image(manifest.root / rel),
                                label=idx, identifier=rel))
    return out


# --------------------------------------------------------------------------
# Synthetic dataset
# --------------------------------------------------------------------------

# Class identity is carried purely by where the bright blobs sit; their
# count, size, and brightness distributions are identical across classes.
_QUADRANTS = [
    (0.08, 0.42, 0.08, 0.42),   # upper-left:  x in [.08,.42], y in [.08,.42]
    (0.58, 0.92, 0.58, 0.92),   # lower-right
    (0.58, 0.92, 0.08, 0.42),   # upper-right
    (0.08, 0.42, 0.58, 0.92),   # lower-left
]


def _add_blob(img: np.ndarray, cx: float, cy: float, sigma: float, amplitude: float) -> None:
    size = img.shape[0]
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    img += amplitude * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma ** 2))


def synth_image(rng: np.random.Generator, size: int, class_index: int) -> np.ndarray:
    """One synthetic sample: bright blobs in the class quadrant on texture."""
    x_lo, x_hi, y_lo, y_hi = _QUADRANTS[class_index % len(_QUADRANTS)]
    img = np.full((size, size), 0.35)

    # Texture: low-frequency noise plus bright/dark micro-blobs scattered
    # everywhere, so every image carries enough keypoints regardless of class.
    coarse = rng.uniform(-1.0, 1.0, size=(size // 4, size // 4))
    img += 0.04 * np.kron(coarse, np.ones((4, 4)))[:size, :size]
    for _ in range(12):
        sign = 1.0 if rng.uniform() < 0.6 else -1.0
        _add_blob(img, rng.uniform(0.05, 0.95) * size, rng.uniform(0.05, 0.95) * size,
                  sigma=rng.uniform(2.2, 3.2), amplitude=sign * rng.uniform(0.30, 0.42))

    for _ in range(int(rng.integers(2, 5))):
        _add_blob(img, rng.uniform(x_lo, x_hi) * size, rng.uniform(y_lo, y_hi) * size,
                  sigma=rng.uniform(3.0, 4.5), amplitude=rng.uniform(0.60, 0.80))

    gray = np.clip(img, 0.0, 1.0)
    tint = rng.uniform(0.9, 1.0, size=3)
    return np.clip(gray[..., None] * tint, 0.0, 1.0)


def generate_synthetic(out_dir, classes: int = 2, per_class: int = 64,
                       size: int = 64, seed: int = 0,
                       min_keypoints: int = 8) -> DatasetManifest:
    """Write the synthetic dataset to disk in the ingest layout.

    ``per_class`` images per class go to train and ``per_class // 4`` to
    test. Every image is checked to yield at least ``min_keypoints``
    keypoints under the default detector config. Fixed seeds give
    byte-identical files across runs.
    """
    if not 2 <= classes <= len(_QUADRANTS):
        raise DatasetError(f"synthetic generator supports 2..{len(_QUADRANTS)} classes")
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    detector = DetectorConfig()
    counts = {"train": per_class, "test": max(1, per_class // 4)}
    for split, count in counts.items():
        for cls in range(classes):
            class_dir = out_dir / split / f"class_{cls}"
            class_dir.mkdir(parents=True, exist_ok=True)
            for i in range(count):
                for attempt in range(20):
                    image = synth_image(rng, size, cls)
                    found = len(detect_keypoints(to_grayscale(image), detector))
                    if found >= min_keypoints:
                        break
                else:
                    raise DatasetError(
                        f"could not synthesize >= {min_keypoints} keypoints for "
                        f"{split}/class_{cls} item {i}")
                encode_png(class_dir / f"img_{i:03d}.png", image)
    return ingest_dataset(out_dir)
