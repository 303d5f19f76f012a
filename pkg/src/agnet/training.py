"""Augmentation, loss, metrics, and the epoch training loop.

Regions are rebuilt on the augmented image at every step, so the boxes stay
consistent with whatever warp the sample received. All randomness for epoch
``e`` comes from a generator seeded with (seed, e), which makes a resumed run
consume exactly the streams an uninterrupted run would.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .clustering import GmmConfig
from .errors import NumericsError, ShapeError
from .keypoints import DetectorConfig
from .network import AgNetParams, backbone_forward, forward, self_attention
from .optim import SgdState, scheduled_lr, sgd_step
from .regions import RegionSet, build_region_set, cluster_feature_map
from .tensor import GradTape, Tensor

LOG_HEADER = "epoch,lr,train_loss,train_top1,wall_seconds"
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-5
    momentum: float = 0.99
    decay_factor: float = 0.1
    decay_every: int = 25
    translation: float = 0.15       # fraction of width/height
    rotation_degrees: float = 15.0
    scale_min: float = 0.85
    scale_max: float = 1.15
    seed: int = 0
    kappa: int = 8
    image_size: int = 224
    channels: int = 96
    backbone_stages: int = 5
    min_region_side: float = 16.0
    # Ablation switches (component on/off, SR counts, SR source).
    use_self_attention: bool = True
    use_inter_attention: bool = True
    region_mode: str = "both"        # both | primary | secondary | whole
    fusion_mode: str = "learned"     # learned | gmp | gap
    region_source: str = "keypoints"  # keypoints | feature_map
    float32: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ShapeError("batch_size must be at least 1")
        if self.scale_min > self.scale_max:
            raise ShapeError("scale_min must not exceed scale_max")

    @property
    def dtype(self):
        return np.float32 if self.float32 else np.float64


@dataclass
class LabeledImage:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    label: int
    identifier: str = ""


@dataclass
class EvalReport:
    top1: float
    top5: float
    mean_ap: float
    per_class_ap: list[float]
    confusion: np.ndarray


def _reflect_coords(pos: np.ndarray, n: int) -> np.ndarray:
    """Mirror continuous coordinates into [0, n-1] without repeating edges."""
    if n == 1:
        return np.zeros_like(pos)
    period = 2.0 * (n - 1)
    pos = np.abs(pos) % period
    return np.where(pos > n - 1, period - pos, pos)


def _warp_bilinear(image: np.ndarray, inverse: np.ndarray, offset: np.ndarray) -> np.ndarray:
    """Sample ``image`` at p_in = inverse @ p_out + offset, reflect padding."""
    h, w = image.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    src_x = inverse[0, 0] * xx + inverse[0, 1] * yy + offset[0]
    src_y = inverse[1, 0] * xx + inverse[1, 1] * yy + offset[1]
    src_x = _reflect_coords(src_x, w)
    src_y = _reflect_coords(src_y, h)
    x0 = np.floor(src_x).astype(np.int64)
    y0 = np.floor(src_y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (src_x - x0)[..., None]
    fy = (src_y - y0)[..., None]
    img = image if image.ndim == 3 else image[..., None]
    out = ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
           + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])
    return out if image.ndim == 3 else out[..., 0]


def augment(item: LabeledImage, cfg: TrainConfig, rng: np.random.Generator) -> LabeledImage:
    """Random translate/rotate/scale as one affine warp about the image center.

    Draw order is fixed (tx, ty, angle, scale) so streams are reproducible.
    Bilinear sampling with reflect padding; the label is untouched.
    """
    h, w = item.image.shape[:2]
    tx = rng.uniform(-cfg.translation, cfg.translation) * w
    ty = rng.uniform(-cfg.translation, cfg.translation) * h
    angle = np.deg2rad(rng.uniform(-cfg.rotation_degrees, cfg.rotation_degrees))
    scale = rng.uniform(cfg.scale_min, cfg.scale_max)

    # Forward transform: p_out = scale*R(angle)(p_in - c) + c + t. Sampling
    # inverts it: p_in = R(-angle)/scale (p_out - c - t) + c.
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    cos_a, sin_a = np.cos(angle), np.sin(angle)
    inverse = np.array([[cos_a, sin_a], [-sin_a, cos_a]]) / scale
    shift = np.array([cx + tx, cy + ty])
    offset = np.array([cx, cy]) - inverse @ shift
    warped = _warp_bilinear(item.image, inverse, offset)
    return LabeledImage(image=np.clip(warped, 0.0, 1.0), label=item.label,
                        identifier=item.identifier)


def cross_entropy(probs: Tensor, label: int) -> Tensor:
    """-log p[label], with the probability clamped at 1e-12."""
    if probs.ndim != 1:
        raise ShapeError(f"cross_entropy expects a probability vector, got {probs.shape}")
    if not 0 <= label < probs.shape[0]:
        raise ShapeError(f"class index {label} out of range for {probs.shape[0]} classes")
    return T.neg(T.log(T.maximum_const(T.take(probs, label), PROB_FLOOR)))


def default_detector_config(cfg: TrainConfig) -> DetectorConfig:
    return DetectorConfig()


def default_gmm_config(cfg: TrainConfig) -> GmmConfig:
    return GmmConfig(k=cfg.kappa, seed=cfg.seed)


def regions_for_image(image: np.ndarray, cfg: TrainConfig, params: AgNetParams,
                      detector_cfg: DetectorConfig, gmm_cfg: GmmConfig) -> RegionSet:
    """Region proposals for one image, honouring the SR-source ablation."""
    if cfg.region_source == "feature_map":
        fmap = backbone_forward(Tensor(image, dtype=cfg.dtype), params.backbone)
        if cfg.use_self_attention:
            fmap = self_attention(fmap, params.self_attn)
        return cluster_feature_map(fmap.data, cfg.kappa, float(image.shape[1]),
                                   float(image.shape[0]), seed=gmm_cfg.seed)
    return build_region_set(image, detector_cfg, gmm_cfg, cfg.kappa,
                            min_side=cfg.min_region_side)


def _predict(item: LabeledImage, cfg: TrainConfig, params: AgNetParams,
             detector_cfg: DetectorConfig, gmm_cfg: GmmConfig) -> Tensor:
    region_set = regions_for_image(item.image, cfg, params, detector_cfg, gmm_cfg)
    boxes = region_set.boxes(cfg.region_mode)
    return forward(item.image, boxes, params,
                   use_self_attention=cfg.use_self_attention,
                   use_inter_attention=cfg.use_inter_attention,
                   fusion_mode=cfg.fusion_mode)


def train(dataset: list[LabeledImage], params: AgNetParams, cfg: TrainConfig,
          detector_cfg: DetectorConfig | None = None,
          gmm_cfg: GmmConfig | None = None,
          state: SgdState | None = None,
          start_epoch: int = 1,
          epoch_callback=None) -> tuple[AgNetParams, list[dict]]:
    """Run the epoch loop; parameters are updated in place.

    Every step augments its image, rebuilds regions on the augmented image,
    and applies one momentum-SGD update from the batch-mean loss. Returns the
    per-epoch log rows. A non-finite loss aborts with the identifiers of the
    offending batch.
    """
    if not dataset:
        raise ShapeError("training dataset is empty")
    detector_cfg = detector_cfg or default_detector_config(cfg)
    gmm_cfg = gmm_cfg or default_gmm_config(cfg)
    state = state or SgdState(learning_rate=cfg.lr, momentum=cfg.momentum,
                              decay_factor=cfg.decay_factor,
                              decay_period_epochs=cfg.decay_every)
    param_dict = params.as_dict()

    rows: list[dict] = []
    for epoch in range(start_epoch, cfg.epochs + 1):
        started = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(dataset))
        lr = scheduled_lr(state, epoch)
        losses, hits = [], 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = [dataset[i] for i in order[lo:lo + cfg.batch_size]]
            with GradTape() as tape:
                total = None
                for item in batch:
                    sample = augment(item, cfg, rng)
                    probs = _predict(sample, cfg, params, detector_cfg, gmm_cfg)
                    hits += int(int(np.argmax(probs.data)) == item.label)
                    loss = cross_entropy(probs, item.label)
                    total = loss if total is None else T.add(total, loss)
                batch_loss = T.mul(total, Tensor(np.asarray(1.0 / len(batch), dtype=total.dtype)))
                value = float(batch_loss.data)
                if not np.isfinite(value):
                    ids = ", ".join(i.identifier or "<unnamed>" for i in batch)
                    raise NumericsError(f"non-finite loss at epoch {epoch} on batch [{ids}]")
                tape.backward(batch_loss)
            grads = {name: t.grad for name, t in param_dict.items()}
            sgd_step(param_dict, grads, state, lr=lr)
            for t in param_dict.values():
                t.grad = None
            losses.append(value)
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(losses)),
            "train_top1": hits / len(dataset),
            "wall_seconds": time.perf_counter() - started,
        }
        rows.append(row)
        if epoch_callback is not None and epoch_callback(epoch, row) is False:
            break
    return params, rows


def evaluate(dataset: list[LabeledImage], params: AgNetParams, cfg: TrainConfig,
             detector_cfg: DetectorConfig | None = None,
             gmm_cfg: GmmConfig | None = None,
             workers: int = 1) -> EvalReport:
    """Deterministic evaluation: no augmentation, same region pipeline.

    Per-image inference is pure (parameters are read-only), so ``workers``
    may fan it out across threads; results are keyed by index, making the
    report independent of the worker count.
    """
    if not dataset:
        raise ShapeError("evaluation dataset is empty")
    detector_cfg = detector_cfg or default_detector_config(cfg)
    gmm_cfg = gmm_cfg or default_gmm_config(cfg)
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(
                lambda item: _predict(item, cfg, params, detector_cfg, gmm_cfg).data,
                dataset))
    else:
        rows = [_predict(item, cfg, params, detector_cfg, gmm_cfg).data
                for item in dataset]
    probs = np.stack(rows)
    labels = np.array([item.label for item in dataset])
    return compute_metrics(probs, labels)


def compute_metrics(probs: np.ndarray, labels: np.ndarray) -> EvalReport:
    """Top-1/top-5 accuracy, per-class AP, mAP, and the confusion matrix.

    Top-5 ties break toward the lower class index. AP uses all-points
    interpolation: sum over ranked positives of (delta recall) * precision.
    Classes with no positives are excluded from the mAP mean.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    n, c = probs.shape
    if len(labels) != n:
        raise ShapeError(f"{n} probability rows vs {len(labels)} labels")

    ranked = np.argsort(-probs, axis=1, kind="stable")
    top1_pred = ranked[:, 0]
    top1 = float((top1_pred == labels).mean())
    k = min(5, c)
    top5 = float(np.mean([labels[i] in ranked[i, :k] for i in range(n)]))

    confusion = np.zeros((c, c), dtype=np.int64)
    for want, got in zip(labels, top1_pred):
        confusion[want, got] += 1

    per_class_ap = []
    for cls in range(c):
        positives = labels == cls
        n_pos = int(positives.sum())
        if n_pos == 0:
            per_class_ap.append(float("nan"))
            continue
        order = np.argsort(-probs[:, cls], kind="stable")
        hits = positives[order]
        ranks = np.arange(1, n + 1)
        precision = np.cumsum(hits) / ranks
        per_class_ap.append(float(precision[hits].sum() / n_pos))
    valid = [ap for ap in per_class_ap if not np.isnan(ap)]
    mean_ap = float(np.mean(valid)) if valid else 0.0
    return EvalReport(top1=top1, top5=top5, mean_ap=mean_ap,
                      per_class_ap=per_class_ap, confusion=confusion)
