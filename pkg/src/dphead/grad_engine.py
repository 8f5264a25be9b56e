"""Per-example gradients for a linear head trained with sigmoid cross-entropy.

For logits ``z = W f + b`` and one-hot target ``y`` the per-example loss is
``sum_j softplus(z_j) - y_j z_j`` and its gradient with respect to ``(W, b)``
is the rank-1 pair ``(u f^T, u)`` with ``u = sigmoid(z) - y``. Its Frobenius
norm is therefore ``||u|| * sqrt(||f||^2 + 1)``, which lets the clipped sum be
formed with one scaled matrix product instead of n separate k x d matrices.

Reductions run over fixed-size chunks combined in index order, so a sum is
bit-identical whether the chunks are processed by one worker or many.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, ndtri

CHUNK_SIZE = 4096


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LinearHead:
    W: np.ndarray  # (k, d)
    b: np.ndarray  # (k,)

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if W.ndim != 2 or b.shape != (W.shape[0],):
            raise ShapeError(f"head shapes do not match: W {W.shape}, b {b.shape}")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    @property
    def dim(self) -> int:
        return self.W.shape[1]

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.W).all() and np.isfinite(self.b).all())


@dataclass(frozen=True)
class GradientPacket:
    """A (possibly clipped, possibly noised) gradient for a head.

    ``loss_sum`` and ``num_clipped`` are batch diagnostics filled in by
    :func:`clipped_gradient_sum`; they never flow into the optimizer.
    """

    gW: np.ndarray
    gb: np.ndarray
    count: int
    loss_sum: float = 0.0
    num_clipped: int = 0

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.gW**2) + np.sum(self.gb**2)))


def _check_features(head: LinearHead, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[1] != head.dim:
        raise ShapeError(
            f"features of shape {features.shape} do not match head dimension {head.dim}"
        )
    return features


def _check_labels(head: LinearHead, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (features.shape[0],):
        raise ShapeError(f"expected {features.shape[0]} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= head.num_classes):
        raise ShapeError(f"labels must lie in [0, {head.num_classes})")
    return labels.astype(np.intp, copy=False)


def one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros((labels.shape[0], k))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def forward_logits(head: LinearHead, features: np.ndarray) -> np.ndarray:
    features = _check_features(head, features)
    return features.astype(np.float64, copy=False) @ head.W.T + head.b


def softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def sigmoid_ce_loss(logits: np.ndarray, labels_onehot: np.ndarray) -> float:
    """Mean over the batch of ``sum_j softplus(z_j) - y_j z_j``."""
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels_onehot, dtype=np.float64)
    if logits.shape != y.shape or logits.ndim != 2:
        raise ShapeError(f"logits {logits.shape} and labels {y.shape} must match")
    rows_ok = np.all((y == 0.0) | (y == 1.0), axis=1) & (y.sum(axis=1) == 1.0)
    if not rows_ok.all():
        bad = int(np.flatnonzero(~rows_ok)[0])
        raise ValueError(f"label row {bad} is not one-hot")
    per_example = np.sum(softplus(logits) - y * logits, axis=1)
    return float(np.mean(per_example))


def _residuals(head: LinearHead, f: np.ndarray, labels: np.ndarray):
    z = f @ head.W.T + head.b
    u = expit(z)
    u[np.arange(len(labels)), labels] -= 1.0
    return z, u


def per_example_grad_norms(head: LinearHead, features, labels) -> np.ndarray:
    features = _check_features(head, features)
    labels = _check_labels(head, features, labels)
    f = features.astype(np.float64, copy=False)
    _, u = _residuals(head, f, labels)
    return np.linalg.norm(u, axis=1) * np.sqrt(np.einsum("ij,ij->i", f, f) + 1.0)


def _chunk_sum(head, features, labels, clip_norm, lo, hi):
    f = features[lo:hi].astype(np.float64, copy=False)
    y = labels[lo:hi]
    z, u = _residuals(head, f, y)
    loss = np.sum(softplus(z)) - np.sum(z[np.arange(len(y)), y])
    clipped = 0
    if clip_norm is not None:
        norms = np.linalg.norm(u, axis=1) * np.sqrt(np.einsum("ij,ij->i", f, f) + 1.0)
        scale = np.ones_like(norms)
        over = norms > clip_norm
        scale[over] = clip_norm / norms[over]
        u = u * scale[:, None]
        clipped = int(over.sum())
    return u.T @ f, u.sum(axis=0), float(loss), clipped


def clipped_gradient_sum(
    head: LinearHead,
    features,
    labels,
    clip_norm: float | None,
    workers: int = 1,
) -> GradientPacket:
    """Sum of per-example gradients, each clipped to L2 norm ``clip_norm``.

    Weights and bias are clipped jointly as one vector. ``clip_norm=None``
    gives the plain unclipped sum (the non-private path). Zero-norm
    gradients keep scale 1.
    """
    if clip_norm is not None and not clip_norm > 0:
        raise ValueError(f"clip norm must be positive, got {clip_norm}")
    features = _check_features(head, features)
    labels = _check_labels(head, features, labels)
    n = features.shape[0]
    bounds = [(lo, min(lo + CHUNK_SIZE, n)) for lo in range(0, n, CHUNK_SIZE)]

    def work(bound):
        return _chunk_sum(head, features, labels, clip_norm, *bound)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(work, bounds))
    else:
        partials = [work(bd) for bd in bounds]

    gW = np.zeros_like(head.W)
    gb = np.zeros_like(head.b)
    loss = 0.0
    clipped = 0
    for pW, pb, pl, pc in partials:
        gW += pW
        gb += pb
        loss += pl
        clipped += pc
    return GradientPacket(gW, gb, n, loss_sum=loss, num_clipped=clipped)


def standard_normal(rng: np.random.Generator, size) -> np.ndarray:
    """Standard normal draws by inverse CDF of open-interval uniforms.

    Each draw consumes one 53-bit integer from ``rng``, so a seed reproduces
    the same values on any platform with IEEE doubles.
    """
    bits = rng.integers(0, 2**53, size=size, dtype=np.int64)
    return ndtri((bits + 0.5) * 2.0**-53)


def noisy_gradient(
    packet: GradientPacket,
    sigma: float,
    clip_norm: float,
    rng: np.random.Generator,
    denominator: float | None = None,
) -> GradientPacket:
    """Add N(0, (sigma * clip_norm)^2) to every coordinate, then average.

    The average divides by ``packet.count`` unless ``denominator`` is given
    (Poisson batches divide by the expected batch size instead).
    """
    if not sigma >= 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    if denominator is None:
        if packet.count < 1:
            raise ValueError("cannot average an empty gradient packet")
        denominator = packet.count
    elif not denominator > 0:
        raise ValueError(f"denominator must be positive, got {denominator}")
    gW, gb = packet.gW, packet.gb
    if sigma > 0:
        std = sigma * clip_norm
        noise = standard_normal(rng, gW.size + gb.size)
        gW = gW + std * noise[: gW.size].reshape(gW.shape)
        gb = gb + std * noise[gW.size:]
    return GradientPacket(gW / denominator, gb / denominator, packet.count)


def mean_gradient(packet: GradientPacket) -> GradientPacket:
    """Noise-free average of a gradient sum."""
    if packet.count < 1:
        raise ValueError("cannot average an empty gradient packet")
    return GradientPacket(packet.gW / packet.count, packet.gb / packet.count, packet.count)


def materialized_per_example_grads(head: LinearHead, features, labels):
    """Per-example ``(gW, gb)`` built with explicit outer products.

    Slow by design; this is the reference the factorized path is checked
    against.
    """
    features = _check_features(head, features)
    labels = _check_labels(head, features, labels)
    out = []
    for f, y in zip(features.astype(np.float64), labels):
        z = head.W @ f + head.b
        u = expit(z)
        u[y] -= 1.0
        out.append((np.outer(u, f), u))
    return out
