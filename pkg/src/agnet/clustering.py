"""K-means-initialized Gaussian mixture EM with full covariances.

Works on 2-D keypoint positions for region proposals and on C-dimensional
feature vectors for the feature-map clustering variant. All randomness flows
through an explicit seed; results are bit-reproducible in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericsError, TooFewPointsError

_KMEANS_MAX_ITERS = 50
_COLLAPSE_WEIGHT = 1e-8


@dataclass(frozen=True)
class GmmConfig:
    k: int = 8
    covariance_regularization: float = 1e-6
    max_iterations: int = 100
    convergence_threshold: float = 1e-3  # mean per-point log-likelihood gain
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise TooFewPointsError("k must be at least 1")
        if self.covariance_regularization <= 0 or self.convergence_threshold <= 0:
            raise NumericsError("regularization and threshold must be positive")


@dataclass
class GmmModel:
    means: np.ndarray        # (k, d)
    covariances: np.ndarray  # (k, d, d), symmetric positive definite
    weights: np.ndarray      # (k,), sums to 1


@dataclass
class ClusterAssignment:
    labels: np.ndarray            # (n,) int, argmax of each responsibility row
    responsibilities: np.ndarray  # (n, k), rows sum to 1


def kmeans_init(points: np.ndarray, k: int, seed: int) -> np.ndarray:
    """K-means++ seeding followed by Lloyd iterations.

    Runs to an assignment fixed point or 50 iterations; an emptied cluster is
    re-seeded at the point farthest from its assigned centroid. Raises
    :class:`TooFewPointsError` when fewer than ``k`` points are given.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < k:
        raise TooFewPointsError(f"{n} points cannot seed {k} clusters")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    closest_sq = ((points - centroids[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = closest_sq.sum()
        if total <= 0:
            # All remaining points coincide with a centroid; pick any unused one.
            centroids[c] = points[rng.integers(n)]
        else:
            pick = np.searchsorted(np.cumsum(closest_sq), rng.uniform() * total)
            centroids[c] = points[min(pick, n - 1)]
        closest_sq = np.minimum(closest_sq, ((points - centroids[c]) ** 2).sum(axis=1))

    labels = _assign(points, centroids)
    for _ in range(_KMEANS_MAX_ITERS):
        for c in range(k):
            member = labels == c
            if member.any():
                centroids[c] = points[member].mean(axis=0)
            else:
                dist = ((points - centroids[labels]) ** 2).sum(axis=1)
                centroids[c] = points[int(dist.argmax())]
        new_labels = _assign(points, centroids)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return centroids


def _assign(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def kmeans_labels(points: np.ndarray, k: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Convenience: centroids plus final hard labels with no empty cluster."""
    centroids = kmeans_init(points, k, seed)
    labels = _assign(np.asarray(points, dtype=np.float64), centroids)
    labels = _fill_empty_hard(np.asarray(points, dtype=np.float64), centroids, labels, k)
    return centroids, labels


def _fill_empty_hard(points, centroids, labels, k):
    for c in range(k):
        if not (labels == c).any():
            dist = ((points - centroids[labels]) ** 2).sum(axis=1)
            counts = np.bincount(labels, minlength=k)
            dist[counts[labels] < 2] = -np.inf
            labels[int(dist.argmax())] = c
    return labels


def _component_log_density(points: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    d = points.shape[1]
    diff = points - mean
    chol = np.linalg.cholesky(cov)
    half = np.linalg.solve(chol, diff.T)  # lower-triangular solve
    maha = (half ** 2).sum(axis=0)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return -0.5 * (maha + logdet + d * np.log(2.0 * np.pi))


def _e_step(points: np.ndarray, model: GmmModel) -> tuple[np.ndarray, float]:
    """Responsibilities via log-sum-exp and the mean per-point log-likelihood."""
    k = len(model.means)
    log_p = np.stack([_component_log_density(points, model.means[c], model.covariances[c])
                      for c in range(k)], axis=1)
    log_weighted = log_p + np.log(model.weights)[None, :]
    peak = log_weighted.max(axis=1, keepdims=True)
    log_norm = peak[:, 0] + np.log(np.exp(log_weighted - peak).sum(axis=1))
    resp = np.exp(log_weighted - log_norm[:, None])
    return resp, float(log_norm.mean())


def _m_step(points: np.ndarray, resp: np.ndarray, reg: float) -> GmmModel:
    n, d = points.shape
    counts = resp.sum(axis=0)
    weights = counts / n
    means = (resp.T @ points) / counts[:, None]
    covs = np.empty((len(counts), d, d))
    for c in range(len(counts)):
        diff = points - means[c]
        covs[c] = (resp[:, c][:, None] * diff).T @ diff / counts[c]
        covs[c] += reg * np.eye(d)
    return GmmModel(means=means, covariances=covs, weights=weights)


def fit_gmm(points: np.ndarray, cfg: GmmConfig,
            iteration_hook=None) -> tuple[GmmModel, ClusterAssignment]:
    """EM for a full-covariance mixture over ``points``.

    Initialization comes from k-means hard labels. Each M-step adds
    ``covariance_regularization * I`` to every covariance; iteration stops at
    ``max_iterations`` or when the mean per-point log-likelihood improves by
    less than ``convergence_threshold``. The log-likelihood is checked to be
    non-decreasing (tolerance 1e-8 per point) between regular EM iterations;
    ``iteration_hook(ll, model)``, when given, observes every iteration.

    The returned hard labels are argmax responsibilities (ties to the lowest
    index) and every cluster is guaranteed nonempty: a component that wins no
    points is re-seeded on the worst-explained point and responsibilities are
    recomputed.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise TooFewPointsError(f"points must be (n, d), got shape {points.shape}")
    n = len(points)
    if n < cfg.k:
        raise TooFewPointsError(f"{n} points cannot fit {cfg.k} mixture components")

    reg = cfg.covariance_regularization
    _, hard = kmeans_labels(points, cfg.k, cfg.seed)
    resp = np.zeros((n, cfg.k))
    resp[np.arange(n), hard] = 1.0
    model = _m_step(points, resp, reg)

    prev_ll = -np.inf
    for _ in range(cfg.max_iterations):
        resp, ll = _e_step(points, model)
        if ll < prev_ll - 1e-8:
            raise NumericsError(
                f"EM log-likelihood decreased: {prev_ll:.12f} -> {ll:.12f}")
        if iteration_hook is not None:
            iteration_hook(ll, model)
        improved = ll - prev_ll
        prev_ll = ll
        model = _m_step(points, resp, reg)
        model, rescued = _rescue_collapsed(points, model, reg)
        if rescued:
            # Re-seeding resets the monotonicity baseline.
            prev_ll = -np.inf
        elif improved < cfg.convergence_threshold:
            break

    resp, _ = _e_step(points, model)
    labels = resp.argmax(axis=1)
    model, resp, labels = _ensure_nonempty(points, model, resp, labels, reg)
    return model, ClusterAssignment(labels=labels, responsibilities=resp)


def _rescue_collapsed(points, model, reg):
    """Re-seed any component whose weight collapsed below 1e-8."""
    collapsed = np.nonzero(model.weights < _COLLAPSE_WEIGHT)[0]
    if len(collapsed) == 0:
        return model, False
    log_p = np.stack([_component_log_density(points, model.means[c], model.covariances[c])
                      for c in range(len(model.means))], axis=1)
    total = (np.exp(log_p) * model.weights[None, :]).sum(axis=1)
    order = np.argsort(total)
    d = points.shape[1]
    for rank, c in enumerate(collapsed):
        target = points[order[rank % len(order)]]
        model.means[c] = target
        model.covariances[c] = reg * np.eye(d)
        model.weights[c] = 1.0 / len(points)
    model.weights /= model.weights.sum()
    return model, True


def _ensure_nonempty(points, model, resp, labels, reg, max_rounds=None):
    """Re-seed components with no argmax winners until all clusters are nonempty."""
    k = len(model.weights)
    max_rounds = max_rounds if max_rounds is not None else 2 * k
    d = points.shape[1]
    for _ in range(max_rounds):
        counts = np.bincount(labels, minlength=k)
        empty = np.nonzero(counts == 0)[0]
        if len(empty) == 0:
            return model, resp, labels
        log_p = np.stack([_component_log_density(points, model.means[c], model.covariances[c])
                          for c in range(k)], axis=1)
        total = np.log((np.exp(log_p) * model.weights[None, :]).sum(axis=1) + 1e-300)
        donors = counts[labels] >= 2
        if not donors.any():
            break
        scores = np.where(donors, total, np.inf)
        target = int(scores.argmin())
        c = int(empty[0])
        model.means[c] = points[target]
        model.covariances[c] = reg * np.eye(d)
        model.weights[c] = max(model.weights[c], 1.0 / len(points))
        model.weights /= model.weights.sum()
        resp, _ = _e_step(points, model)
        labels = resp.argmax(axis=1)
    counts = np.bincount(labels, minlength=k)
    if (counts == 0).any():
        raise NumericsError("could not produce nonempty clusters for every component")
    return model, resp, labels
