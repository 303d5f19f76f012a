"""The region-attention network.

One shared backbone pass produces a feature map; position-to-position
self-attention refines it through a zero-initialized residual scalar; every
region box is bilinearly pooled from that single map to a fixed 7x7 grid and
refined by a squeeze-excite block with a residual path; scalar region-pair
attention mixes the pooled maps; a softmax over learned region scores
aggregates them; and the classifier fuses global max and average pooling
through a learned two-way convex weight.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .regions import BoundingBox
from .tensor import Tensor

SE_REDUCTION = 16
POOLED_SIZE = 7


def backbone_channels(channels: int, stages: int) -> list[int]:
    """Per-stage output channels: 16 doubling per stage, capped at C."""
    return [min(16 * 2 ** i, channels) for i in range(stages - 1)] + [channels]


@dataclass
class BackboneParams:
    kernels: list[Tensor]  # (3, 3, cin, cout) per stride-2 stage
    biases: list[Tensor]

    @property
    def stages(self) -> int:
        return len(self.kernels)

    @property
    def out_channels(self) -> int:
        return self.kernels[-1].shape[3]


@dataclass
class SelfAttentionParams:
    w_key: Tensor    # (C, C')
    w_query: Tensor  # (C, C')
    w_value: Tensor  # (C, C')
    w_out: Tensor    # (C', C)
    delta: Tensor    # scalar residual weight, starts at exactly 0


@dataclass
class SeResidualParams:
    w_squeeze: Tensor  # (C, max(1, C // 16))
    b_squeeze: Tensor
    w_excite: Tensor   # (max(1, C // 16), C)
    b_excite: Tensor


@dataclass
class InterAttentionParams:
    w_u: Tensor        # (C, D)
    w_u_prime: Tensor  # (C, D)
    b_u: Tensor        # (D,)
    w_m: Tensor        # (D,)
    b_m: Tensor        # scalar
    w_score: Tensor    # (C,) region-importance weights
    b_score: Tensor    # scalar


@dataclass
class FusionClassifierParams:
    w_fuse: Tensor  # (2C, 2)
    b_fuse: Tensor  # (2,)
    w_cls: Tensor   # (C, num_classes)
    b_cls: Tensor   # (num_classes,)


@dataclass
class AgNetParams:
    backbone: BackboneParams
    self_attn: SelfAttentionParams
    se: SeResidualParams
    inter: InterAttentionParams
    fusion_cls: FusionClassifierParams

    @property
    def channels(self) -> int:
        return self.backbone.out_channels

    @property
    def num_classes(self) -> int:
        return self.fusion_cls.w_cls.shape[1]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        """Canonical (name, tensor) order; checkpoints and SGD key off this."""
        for i, (k, b) in enumerate(zip(self.backbone.kernels, self.backbone.biases)):
            yield f"backbone.stage{i}.kernel", k
            yield f"backbone.stage{i}.bias", b
        sa = self.self_attn
        yield "self_attn.w_key", sa.w_key
        yield "self_attn.w_query", sa.w_query
        yield "self_attn.w_value", sa.w_value
        yield "self_attn.w_out", sa.w_out
        yield "self_attn.delta", sa.delta
        yield "se.w_squeeze", self.se.w_squeeze
        yield "se.b_squeeze", self.se.b_squeeze
        yield "se.w_excite", self.se.w_excite
        yield "se.b_excite", self.se.b_excite
        it = self.inter
        yield "inter.w_u", it.w_u
        yield "inter.w_u_prime", it.w_u_prime
        yield "inter.b_u", it.b_u
        yield "inter.w_m", it.w_m
        yield "inter.b_m", it.b_m
        yield "inter.w_score", it.w_score
        yield "inter.b_score", it.b_score
        fc = self.fusion_cls
        yield "fusion.w_fuse", fc.w_fuse
        yield "fusion.b_fuse", fc.b_fuse
        yield "fusion.w_cls", fc.w_cls
        yield "fusion.b_cls", fc.b_cls

    def as_dict(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())


def init_params(num_classes: int, channels: int = 96, stages: int = 5,
                seed: int = 0, dtype=np.float64) -> AgNetParams:
    """Seeded initialization of every parameter group.

    Conv kernels use He-scaled normals, linear maps Glorot-scaled normals,
    biases zero, and the self-attention residual scalar exactly zero.
    """
    if channels % 8 != 0:
        raise ShapeError(f"channels must be divisible by 8, got {channels}")
    if num_classes < 2:
        raise ShapeError(f"need at least 2 classes, got {num_classes}")
    rng = np.random.default_rng(seed)

    def he(shape, fan_in):
        return T.parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), dtype=dtype)

    def glorot(shape):
        fan_in, fan_out = shape[0], shape[-1]
        return T.parameter(rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape), dtype=dtype)

    def zeros(shape):
        return T.parameter(np.zeros(shape), dtype=dtype)

    chans = backbone_channels(channels, stages)
    kernels, biases = [], []
    cin = 3
    for cout in chans:
        kernels.append(he((3, 3, cin, cout), fan_in=9 * cin))
        biases.append(zeros((cout,)))
        cin = cout

    c_attn = channels // 8
    self_attn = SelfAttentionParams(
        w_key=glorot((channels, c_attn)),
        w_query=glorot((channels, c_attn)),
        w_value=glorot((channels, c_attn)),
        w_out=glorot((c_attn, channels)),
        delta=zeros(()),
    )
    reduced = max(1, channels // SE_REDUCTION)
    se = SeResidualParams(
        w_squeeze=glorot((channels, reduced)), b_squeeze=zeros((reduced,)),
        w_excite=glorot((reduced, channels)), b_excite=zeros((channels,)),
    )
    def head(shape):
        # Scoring and classifier heads start near zero so early training is
        # driven by the feature stack, not by large random logits; this keeps
        # the initial output close to uniform and avoids a collapse phase.
        return T.parameter(rng.normal(0.0, 1e-2, size=shape), dtype=dtype)

    inter = InterAttentionParams(
        w_u=glorot((channels, channels)), w_u_prime=glorot((channels, channels)),
        b_u=zeros((channels,)),
        w_m=head((channels,)), b_m=zeros(()),
        w_score=head((channels,)), b_score=zeros(()),
    )
    fusion_cls = FusionClassifierParams(
        w_fuse=head((2 * channels, 2)), b_fuse=zeros((2,)),
        w_cls=head((channels, num_classes)), b_cls=zeros((num_classes,)),
    )
    return AgNetParams(backbone=BackboneParams(kernels=kernels, biases=biases),
                       self_attn=self_attn, se=se, inter=inter, fusion_cls=fusion_cls)


# --------------------------------------------------------------------------
# Forward operations
# --------------------------------------------------------------------------

def backbone_forward(image: Tensor, p: BackboneParams) -> Tensor:
    """Stride-2 conv stack: HxWx3 -> (H/2^stages)x(W/2^stages)xC.

    Pixel values arrive in [0,1] and are centered to [-0.5, 0.5] before the
    first convolution; without any normalization layers in the stack, the
    uncentered brightness component otherwise dominates every feature.
    """
    h, w = image.shape[0], image.shape[1]
    factor = 2 ** p.stages
    if h % factor or w % factor:
        raise ShapeError(f"input {h}x{w} not divisible by the reduction factor {factor}")
    x = T.add(image, Tensor(np.asarray(-0.5, dtype=image.dtype)))
    for kernel, bias in zip(p.kernels, p.biases):
        x = T.relu(T.add(T.conv2d(x, kernel, stride=2, padding=1), bias))
    return x


def self_attention(x: Tensor, p: SelfAttentionParams) -> Tensor:
    """Dot-product attention over spatial positions with a delta residual.

    Attention weights for output position j are a softmax over positions i of
    key_i . query_j, so each attention column sums to 1. At delta == 0 the
    output equals the input exactly.
    """
    h, w, c = x.shape
    if p.w_key.shape[0] != c:
        raise ShapeError(f"feature channels {c} != attention input dim {p.w_key.shape[0]}")
    n = h * w
    flat = T.reshape(x, (n, c))
    keys = T.matmul(flat, p.w_key)
    queries = T.matmul(flat, p.w_query)
    values = T.matmul(flat, p.w_value)
    energy = T.matmul(keys, T.transpose(queries))  # [i, j] = key_i . query_j
    attn = T.softmax(energy, axis=0)
    mixed = T.matmul(T.transpose(attn), values)    # s_j = sum_i t[i,j] v_i
    projected = T.matmul(mixed, p.w_out)
    out = T.add(T.mul(p.delta, projected), flat)
    return T.reshape(out, (h, w, c))


def roi_pool(fmap: Tensor, box: BoundingBox, image_width: float, image_height: float,
             out_size: int = POOLED_SIZE) -> Tensor:
    """Bilinearly sample a box into a fixed out_size x out_size grid.

    The box is rescaled from image to feature-map coordinates; output cell
    (u, v) samples the box interior at uniformly spaced cell centers
    (align-corners-false), clamping at the map border. A box that maps to
    zero area is expanded to one feature cell.
    """
    h, w, _ = fmap.shape
    fx0, fx1 = box.x0 * w / image_width, box.x1 * w / image_width
    fy0, fy1 = box.y0 * h / image_height, box.y1 * h / image_height
    if fx1 - fx0 < 1.0:
        cx = (fx0 + fx1) / 2.0
        fx0, fx1 = cx - 0.5, cx + 0.5
    if fy1 - fy0 < 1.0:
        cy = (fy0 + fy1) / 2.0
        fy0, fy1 = cy - 0.5, cy + 0.5
    us = (np.arange(out_size) + 0.5) / out_size
    ys = fy0 + us * (fy1 - fy0) - 0.5
    xs = fx0 + us * (fx1 - fx0) - 0.5
    grid_y = np.repeat(ys[:, None], out_size, axis=1)
    grid_x = np.repeat(xs[None, :], out_size, axis=0)
    return T.grid_sample_bilinear(fmap, grid_y, grid_x)


def se_residual(f: Tensor, p: SeResidualParams) -> Tensor:
    """Channel gating g = sigmoid(W2 relu(W1 GAP(f))); output f*g + f."""
    c = f.shape[-1]
    if p.w_squeeze.shape[0] != c:
        raise ShapeError(f"feature channels {c} != SE input dim {p.w_squeeze.shape[0]}")
    pooled = T.reshape(T.tmean(f, axes=(0, 1)), (1, c))
    hidden = T.relu(T.add(T.matmul(pooled, p.w_squeeze), p.b_squeeze))
    gate = T.sigmoid(T.add(T.matmul(hidden, p.w_excite), p.b_excite))
    gate = T.reshape(gate, (1, 1, c))
    return T.add(T.mul(f, gate), f)


def inter_attention(features: list[Tensor], p: InterAttentionParams) -> tuple[Tensor, Tensor]:
    """Scalar pairwise attention between region features.

    ``features`` are the R+1 pooled region maps in canonical order (whole
    image last). Returns the (R+1)x(R+1) attention matrix M, where
    m[r, r'] = sigmoid(w_m . tanh(W_u v_r + W_u' v_r' + b_u) + b_m) on
    channel-pooled vectors v, and the attended maps alpha[r] = sum_r' m[r, r']
    * feature[r'].
    """
    shapes = {f.shape for f in features}
    if len(shapes) != 1:
        raise ShapeError(f"region features disagree in shape: {sorted(shapes)}")
    stackd = T.stack(features)                 # (R, h, w, c)
    r, h, w, c = stackd.shape
    d = p.w_u.shape[1]
    v = T.tmean(stackd, axes=(1, 2))           # (R, c)
    left = T.matmul(v, p.w_u)                  # (R, d)
    right = T.matmul(v, p.w_u_prime)           # (R, d)
    u = T.tanh(T.add(T.add(T.reshape(left, (r, 1, d)), T.reshape(right, (1, r, d))),
                     p.b_u))
    m_logits = T.add(T.matmul(T.reshape(u, (r * r, d)), T.reshape(p.w_m, (d, 1))), p.b_m)
    m = T.reshape(T.sigmoid(m_logits), (r, r))
    attended = T.reshape(T.matmul(m, T.reshape(stackd, (r, h * w * c))), (r, h, w, c))
    return m, attended


def aggregate_regions(attended: Tensor, p: InterAttentionParams) -> Tensor:
    """Softmax-weighted sum of attended maps over the region axis (Eq. 3)."""
    r, h, w, c = attended.shape
    pooled = T.tmean(attended, axes=(1, 2))    # (R, c)
    logits = T.add(T.matmul(pooled, T.reshape(p.w_score, (c, 1))), p.b_score)  # (R, 1)
    weights = T.softmax(logits, axis=0)
    flat = T.reshape(attended, (r, h * w * c))
    mixed = T.matmul(T.transpose(weights), flat)  # (1, hwc)
    return T.reshape(mixed, (h, w, c))


def classify(fhat: Tensor, p: FusionClassifierParams, fusion_mode: str = "learned") -> Tensor:
    """GMP/GAP fusion followed by the softmax classifier.

    ``fusion_mode``: "learned" (two-way softmax over fusion logits), or the
    ablations "gmp" / "gap" that bypass the fusion entirely.
    """
    h, w, c = fhat.shape
    gmp = T.tmax(fhat, axes=(0, 1))
    gap = T.tmean(fhat, axes=(0, 1))
    if fusion_mode == "gmp":
        fused = gmp
    elif fusion_mode == "gap":
        fused = gap
    elif fusion_mode == "learned":
        both = T.reshape(T.concat([gmp, gap]), (1, 2 * c))
        omega = T.reshape(T.softmax(T.add(T.matmul(both, p.w_fuse), p.b_fuse), axis=1), (2,))
        fused = T.add(T.mul(T.take(omega, 0), gmp), T.mul(T.take(omega, 1), gap))
    else:
        raise ValueError(f"unknown fusion mode {fusion_mode!r}")
    logits = T.add(T.matmul(T.reshape(fused, (1, c)), p.w_cls), p.b_cls)
    return T.reshape(T.softmax(logits, axis=1), (p.w_cls.shape[1],))


def forward(image, boxes: list[BoundingBox], params: AgNetParams, *,
            use_self_attention: bool = True, use_inter_attention: bool = True,
            fusion_mode: str = "learned") -> Tensor:
    """Full pipeline for one image and its region boxes (whole image last).

    ``image`` is an HxWx3 array or Tensor in [0,1]. The ablation switches
    skip the self-attention layer and/or replace the attended maps with the
    raw region features.
    """
    if not isinstance(image, Tensor):
        image = Tensor(np.asarray(image), dtype=params.fusion_cls.w_cls.dtype)
    image_height, image_width = float(image.shape[0]), float(image.shape[1])
    fmap = backbone_forward(image, params.backbone)
    if use_self_attention:
        fmap = self_attention(fmap, params.self_attn)
    features = [se_residual(roi_pool(fmap, box, image_width, image_height), params.se)
                for box in boxes]
    if use_inter_attention:
        _, attended = inter_attention(features, params.inter)
    else:
        attended = T.stack(features)
    fhat = aggregate_regions(attended, params.inter)
    return classify(fhat, params.fusion_cls, fusion_mode)
