"""Objective terms for invariant-representation training.

Five pieces: reconstruction error, kernel MMD between per-subject latent
sets, adversarial domain classification behind a gradient-reversal layer,
a triplet hinge on latent distances, and binary cross-entropy for the
downstream classifier. All of them build on the autodiff graph so the
encoder receives analytic gradients from every term.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    ShapeMismatchError,
    Var,
    _accum,
    _to_var,
    clip,
    exp,
    log,
    pairwise_sqdist,
    relu,
    sqrt,
)

logger = logging.getLogger(__name__)

MEDIAN_HEURISTIC = "median_heuristic"

PRETRAIN_MODES = ("none", "mmd", "dann")

# probability floor for cross-entropy, keeps log() finite
_BCE_EPS = 1e-7


@dataclass(frozen=True)
class KernelConfig:
    """RBF kernel choice: k(x, y) = exp(-|x - y|^2 / (2 sigma^2)).

    ``bandwidth`` is an explicit sigma, or the median-heuristic sentinel:
    sigma^2 = median of pairwise squared distances in the pooled sample / 2.
    """

    family: str = "rbf"
    bandwidth: float | str = MEDIAN_HEURISTIC

    def __post_init__(self):
        if self.family != "rbf":
            raise ValueError(f"unsupported kernel family {self.family!r}")
        if isinstance(self.bandwidth, str):
            if self.bandwidth != MEDIAN_HEURISTIC:
                raise ValueError(f"unknown bandwidth sentinel {self.bandwidth!r}")
        elif not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")

    def resolve_bandwidth(self, pooled: np.ndarray) -> float:
        if self.bandwidth == MEDIAN_HEURISTIC:
            return median_heuristic_bandwidth(pooled)
        return float(self.bandwidth)


def median_heuristic_bandwidth(points: np.ndarray) -> float:
    """sigma from the median pairwise squared distance of ``points`` (n, d).

    Falls back to 1.0 when all points coincide (median distance 0).
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < 2:
        return 1.0
    sq = ((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=-1)
    med = float(np.median(sq[np.triu_indices(n, k=1)]))
    if med <= 0.0:
        return 1.0
    return float(np.sqrt(med / 2.0))


@dataclass
class SubjectBatch:
    """Latent vectors belonging to one subject within a minibatch."""

    subject_id: str
    latents: Var  # (m, latent_dim)

    def __post_init__(self):
        self.latents = _to_var(self.latents)
        if self.latents.value.ndim != 2 or self.latents.shape[0] < 1:
            raise ShapeMismatchError(
                f"subject {self.subject_id!r} latents must be (m, d) with m >= 1, "
                f"got {self.latents.shape}"
            )


@dataclass
class Triplet:
    """Anchor/positive/negative latent vectors with a hinge margin."""

    anchor: Var
    positive: Var
    negative: Var
    margin: float = 1.0

    def __post_init__(self):
        self.anchor = _to_var(self.anchor)
        self.positive = _to_var(self.positive)
        self.negative = _to_var(self.negative)
        if not self.margin > 0:
            raise ValueError(f"margin must be positive, got {self.margin}")


@dataclass(frozen=True)
class DomainTarget:
    """One-hot encoding of the subject a sample came from."""

    one_hot: np.ndarray = field(hash=False)

    def __post_init__(self):
        arr = np.asarray(self.one_hot, dtype=np.float64)
        object.__setattr__(self, "one_hot", arr)
        if arr.ndim != 1 or not np.all((arr == 0.0) | (arr == 1.0)) or arr.sum() != 1.0:
            raise ValueError(f"domain target must be one-hot, got {arr!r}")

    @classmethod
    def for_subject(cls, index: int, n_subjects: int) -> "DomainTarget":
        one_hot = np.zeros(n_subjects)
        one_hot[index] = 1.0
        return cls(one_hot)


def recon_loss(x, x_hat) -> Var:
    """Mean squared error between a signal and its reconstruction."""
    x, x_hat = _to_var(x), _to_var(x_hat)
    if x.shape != x_hat.shape:
        raise ShapeMismatchError(
            f"reconstruction shapes differ: {x.shape} vs {x_hat.shape}"
        )
    d = x_hat - x
    return (d * d).mean()


def rbf_kernel_matrix(a, b, sigma: float) -> Var:
    return exp(pairwise_sqdist(a, b) * (-1.0 / (2.0 * sigma * sigma)))


def mmd_rbf(a, b, kernel: KernelConfig = KernelConfig()) -> Var:
    """Biased empirical squared MMD between two sample sets (rows are vectors).

    mean k(A,A) + mean k(B,B) - 2 mean k(A,B), clamped at zero. The biased
    (V-statistic) form keeps the estimate nonnegative up to float rounding.
    The bandwidth is resolved from the pooled values and then treated as a
    constant of the graph: no gradient flows through the median heuristic.
    """
    a, b = _to_var(a), _to_var(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeMismatchError(f"mmd_rbf needs (m, d) sets, got {a.shape} and {b.shape}")
    if a.shape[0] < 1 or b.shape[0] < 1:
        raise ValueError("mmd_rbf requires at least one vector per set")
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatchError(
            f"mmd_rbf vector widths differ: {a.shape} vs {b.shape}"
        )
    sigma = kernel.resolve_bandwidth(np.concatenate([a.value, b.value], axis=0))
    raw = (
        rbf_kernel_matrix(a, a, sigma).mean()
        + rbf_kernel_matrix(b, b, sigma).mean()
        + rbf_kernel_matrix(a, b, sigma).mean() * (-2.0)
    )
    return relu(raw)


def mmd_pairwise(batches: list[SubjectBatch], kernel: KernelConfig = KernelConfig()) -> Var:
    """Mean of mmd_rbf over all unordered pairs of subjects in the minibatch.

    Fewer than two subjects means the term is undefined for this batch; it
    contributes 0 with a warning so shuffled training can proceed.
    """
    if len(batches) < 2:
        logger.warning(
            "mmd_pairwise got %d subject(s) in the batch; contributing 0", len(batches)
        )
        return Var(0.0)
    total: Var | None = None
    n_pairs = 0
    for i in range(len(batches)):
        for j in range(i + 1, len(batches)):
            term = mmd_rbf(batches[i].latents, batches[j].latents, kernel)
            total = term if total is None else total + term
            n_pairs += 1
    return total / n_pairs


def domain_loss(d_hat, target) -> Var:
    """Squared L2 distance between predicted and true subject one-hot.

    ``d_hat`` is a probability vector (N,), or (B, N) with matching targets,
    in which case the per-sample losses are averaged.
    """
    d_hat = _to_var(d_hat)
    t = target.one_hot if isinstance(target, DomainTarget) else np.asarray(target, dtype=np.float64)
    if d_hat.shape != t.shape:
        raise ShapeMismatchError(f"domain shapes differ: {d_hat.shape} vs {t.shape}")
    d = d_hat - t
    sq = d * d
    if d_hat.value.ndim == 2:
        return sq.sum() / d_hat.shape[0]
    return sq.sum()


def gradient_reversal(x, scale: float = 1.0) -> Var:
    """Identity on the forward pass; multiplies gradients by -scale on the way back."""
    x = _to_var(x)
    return Var(x.value, (x,), lambda g: _accum(x, g * (-scale)))


def euclidean_distance(a, b) -> Var:
    a, b = _to_var(a), _to_var(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"distance shapes differ: {a.shape} vs {b.shape}")
    d = a - b
    return sqrt((d * d).sum())


def triplet_loss(t: Triplet) -> Var:
    """max(d(a, p) - d(a, n) + margin, 0) with Euclidean d on latent vectors."""
    gap = euclidean_distance(t.anchor, t.positive) - euclidean_distance(t.anchor, t.negative)
    return relu(gap + t.margin)


def classification_loss(y_hat, y) -> Var:
    """Binary cross-entropy, epsilon-clamped so log stays finite.

    ``y_hat`` is a predicted probability (scalar or batch vector), ``y`` the
    matching 0/1 label(s); batches are averaged.
    """
    y_hat = _to_var(y_hat)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ShapeMismatchError(f"prediction/label shapes differ: {y_hat.shape} vs {y.shape}")
    p = clip(y_hat, _BCE_EPS, 1.0 - _BCE_EPS)
    ll = log(p) * y + log(1.0 - p) * (1.0 - y)
    return -ll.mean()


def combined_pretrain_loss(
    recon: Var,
    regularizer: Var | None = None,
    mode: str = "none",
    lambda_mmd: float = 0.2,
) -> Var:
    """Pretraining objective: reconstruction plus the chosen invariance term.

    mode "none": reconstruction alone. mode "mmd": recon + lambda_mmd * MMD.
    mode "dann": recon + domain loss at unit weight; the adversarial sign is
    carried once, by the gradient-reversal layer inside the domain branch,
    rather than by a negative coefficient here.

    A coefficient of exactly 0 short-circuits: the regularizer is ignored so
    the arithmetic (and any RNG usage upstream) is identical to mode "none".
    """
    if mode not in PRETRAIN_MODES:
        raise ValueError(f"unknown pretrain mode {mode!r}; expected one of {PRETRAIN_MODES}")
    if mode == "none":
        return recon
    if regularizer is None:
        raise ValueError(f"mode {mode!r} requires a regularizer term")
    if mode == "mmd":
        if lambda_mmd == 0.0:
            return recon
        return recon + regularizer * lambda_mmd
    return recon + regularizer
