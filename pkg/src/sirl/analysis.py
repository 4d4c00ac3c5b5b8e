"""Evaluation statistics and latent-space geometry.

One-way ANOVA with Tukey HSD post-hoc for comparing model variants over
repeated trials, a deterministic 2-D PCA projection for latent dumps, and
a subject-dispersion score that quantifies how strongly latents cluster by
participant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

INF_DF = "inf"

# Critical values of the studentized range q(1-alpha; k, df), indexed
# [alpha][df][k-2] for k = 2..10. Values cross-checked against published
# statistical tables (e.g. q(0.05; 3, 20) = 3.578). Lookups round df DOWN
# to the nearest tabled row, which can only make a test more conservative.
TUKEY_Q_TABLE = {
    0.05: {
        5: [3.6354, 4.6017, 5.2183, 5.6731, 6.0329, 6.3299, 6.5823, 6.8014, 6.9947],
        10: [3.1511, 3.8768, 4.3266, 4.6543, 4.912, 5.1242, 5.3042, 5.4605, 5.5984],
        15: [3.0143, 3.6734, 4.076, 4.367, 4.5947, 4.7816, 4.9399, 5.077, 5.1979],
        20: [2.95, 3.5779, 3.9583, 4.2319, 4.4452, 4.6199, 4.7676, 4.8954, 5.0079],
        30: [2.8882, 3.4864, 3.8454, 4.1021, 4.3015, 4.4642, 4.6014, 4.7199, 4.8241],
        60: [2.8288, 3.3987, 3.7371, 3.9774, 4.1632, 4.3141, 4.4411, 4.5504, 4.6463],
        120: [2.8, 3.3561, 3.6846, 3.9169, 4.096, 4.2412, 4.363, 4.4678, 4.5595],
        INF_DF: [2.7718, 3.3145, 3.6332, 3.8577, 4.0301, 4.1696, 4.2863, 4.3865, 4.4741],
    },
    0.01: {
        5: [5.7023, 6.9757, 7.8042, 8.4215, 8.9131, 9.3209, 9.6687, 9.9715, 10.2393],
        10: [4.482, 5.2702, 5.7686, 6.1361, 6.4275, 6.669, 6.8749, 7.0544, 7.2133],
        15: [4.1673, 4.8359, 5.2518, 5.5558, 5.7956, 5.9936, 6.1621, 6.3087, 6.4384],
        20: [4.0239, 4.6392, 5.018, 5.2933, 5.5095, 5.6876, 5.8389, 5.9703, 6.0865],
        30: [3.8891, 4.4549, 4.7992, 5.0476, 5.2418, 5.4012, 5.5361, 5.6531, 5.7563],
        60: [3.7622, 4.2822, 4.5944, 4.8178, 4.9913, 5.133, 5.2525, 5.3558, 5.4466],
        120: [3.7016, 4.1999, 4.497, 4.7085, 4.8722, 5.0055, 5.1176, 5.2143, 5.2992],
        INF_DF: [3.6428, 4.1203, 4.4028, 4.6028, 4.757, 4.8822, 4.9872, 5.0775, 5.1566],
    },
}

_TABLE_DFS = (5, 10, 15, 20, 30, 60, 120)


class UnsupportedRangeError(ValueError):
    """(k, df, alpha) falls outside the bundled critical-value table."""


def accuracy(predictions, labels) -> float:
    """Fraction of exact matches between two equal-length binary sequences."""
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape or p.ndim != 1:
        raise ValueError(f"prediction/label shapes differ: {p.shape} vs {y.shape}")
    if p.size == 0:
        raise ValueError("need at least one prediction")
    return float((p == y).mean())


@dataclass(frozen=True)
class AnovaResult:
    f_statistic: float
    df_between: int
    df_within: int
    ms_between: float
    ms_within: float


def _check_groups(groups) -> list[np.ndarray]:
    arrays = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(arrays) < 2:
        raise ValueError(f"need at least 2 groups, got {len(arrays)}")
    for i, g in enumerate(arrays):
        if g.ndim != 1 or g.size < 2:
            raise ValueError(f"group {i} needs at least 2 one-dimensional values")
    return arrays


def anova_oneway(groups) -> AnovaResult:
    """Classic one-way ANOVA F ratio: between-group over within-group MS.

    With zero within-group variance the ratio is 0 when the means agree
    too (nothing varies at all) and infinity when they differ.
    """
    arrays = _check_groups(groups)
    k = len(arrays)
    n_total = sum(g.size for g in arrays)
    grand = sum(g.sum() for g in arrays) / n_total
    ss_between = sum(g.size * (g.mean() - grand) ** 2 for g in arrays)
    ss_within = sum(((g - g.mean()) ** 2).sum() for g in arrays)
    df_between, df_within = k - 1, n_total - k
    ms_between = ss_between / df_between
    ms_within = ss_within / df_within
    if ms_within == 0.0:
        f = 0.0 if ms_between == 0.0 else math.inf
    else:
        f = ms_between / ms_within
    return AnovaResult(float(f), df_between, df_within, float(ms_between), float(ms_within))


@dataclass(frozen=True)
class PairwiseComparison:
    group_a: str
    group_b: str
    mean_diff: float
    q_statistic: float
    significant: bool


@dataclass(frozen=True)
class StatTestResult:
    f_statistic: float
    df_between: int
    df_within: int
    alpha: float
    q_critical: float
    pairwise: tuple[PairwiseComparison, ...]


def tukey_critical_value(k: int, df_within, alpha: float) -> float:
    """Bundled q(1-alpha; k, df), rounding df DOWN to the tabled row below.

    Rounding down picks a larger critical value, so a decision made here is
    never more liberal than the exact one; the asymptotic row is used only
    for an explicitly infinite df. Requests outside the table raise rather
    than extrapolate.
    """
    if alpha not in TUKEY_Q_TABLE:
        raise UnsupportedRangeError(
            f"alpha {alpha} not tabled; supported: {sorted(TUKEY_Q_TABLE)}"
        )
    if not 2 <= k <= 10:
        raise UnsupportedRangeError(f"group count {k} outside tabled range [2, 10]")
    if df_within == math.inf:
        return TUKEY_Q_TABLE[alpha][INF_DF][k - 2]
    candidates = [d for d in _TABLE_DFS if d <= df_within]
    if not candidates:
        raise UnsupportedRangeError(
            f"df_within {df_within} below smallest tabled df {_TABLE_DFS[0]}"
        )
    return TUKEY_Q_TABLE[alpha][max(candidates)][k - 2]


def tukey_hsd(groups, alpha: float = 0.05, labels=None) -> StatTestResult:
    """All pairwise comparisons via the studentized range statistic.

    q = |mean_i - mean_j| / sqrt(MS_within/2 * (1/n_i + 1/n_j)) — the
    Tukey-Kramer form, exact for equal group sizes. Significance compares q
    against the bundled critical value for (k, df_within, alpha).
    """
    arrays = _check_groups(groups)
    k = len(arrays)
    if labels is None:
        labels = [f"group{i}" for i in range(k)]
    if len(labels) != k:
        raise ValueError(f"{len(labels)} labels for {k} groups")
    anova = anova_oneway(arrays)
    q_crit = tukey_critical_value(k, anova.df_within, alpha)
    pairs = []
    for i in range(k):
        for j in range(i + 1, k):
            diff = arrays[j].mean() - arrays[i].mean()
            se = math.sqrt(
                anova.ms_within / 2.0 * (1.0 / arrays[i].size + 1.0 / arrays[j].size)
            )
            if se == 0.0:
                q = 0.0 if diff == 0.0 else math.inf
            else:
                q = abs(diff) / se
            pairs.append(
                PairwiseComparison(
                    group_a=str(labels[i]),
                    group_b=str(labels[j]),
                    mean_diff=float(diff),
                    q_statistic=float(q),
                    significant=bool(q >= q_crit),
                )
            )
    return StatTestResult(
        f_statistic=anova.f_statistic,
        df_between=anova.df_between,
        df_within=anova.df_within,
        alpha=alpha,
        q_critical=q_crit,
        pairwise=tuple(pairs),
    )


# -- deterministic PCA --------------------------------------------------------


@dataclass(frozen=True)
class PcaProjection:
    mean: np.ndarray
    components: np.ndarray  # (2, D) rows, orthonormal
    explained_variance: np.ndarray  # (2,)
    total_variance: float

    def project(self, latents) -> np.ndarray:
        x = np.asarray(latents, dtype=np.float64)
        return (x - self.mean) @ self.components.T


def pca_fit(latents) -> PcaProjection:
    """First two principal axes of the rows, deterministically signed.

    Covariance eigendecomposition; components ordered by descending
    eigenvalue; each component's sign fixed so its largest-magnitude
    coordinate is positive.
    """
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 2:
        raise ValueError(f"need (n, D>=2) latents, got shape {x.shape}")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 rows to fit a projection")
    mean = x.mean(axis=0)
    cov = np.cov(x - mean, rowvar=False)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:2]
    components = eigvecs[:, order].T.copy()
    for row in components:
        anchor = np.argmax(np.abs(row))
        if row[anchor] < 0:
            row *= -1.0
    variances = np.clip(eigvals[order], 0.0, None)
    return PcaProjection(
        mean=mean,
        components=components,
        explained_variance=variances,
        total_variance=float(np.clip(eigvals, 0.0, None).sum()),
    )


# -- latent dump --------------------------------------------------------------


def latent_rows(model, dataset) -> tuple[list[dict], PcaProjection]:
    """Per-sample latent vectors plus their 2-D projection.

    The projection axes are fit on train-split rows only, then applied to
    every row, so test-split geometry never leaks into the axes.
    """
    if model.spec.latent_dim < 2:
        raise ValueError(
            f"latent dump needs latent_dim >= 2, got {model.spec.latent_dim}"
        )
    x, _, _ = dataset.arrays()
    latents = model.encode(x).value
    train_mask = np.array([s.split == "train" for s in dataset])
    if not train_mask.any():
        raise ValueError("latent dump needs at least one train-split sample to fit axes")
    projection = pca_fit(latents[train_mask])
    projected = projection.project(latents)
    rows = []
    for i, sample in enumerate(dataset):
        rows.append(
            {
                "subject_id": sample.subject_id,
                "label": sample.label,
                "split": sample.split,
                "latent": latents[i],
                "pc": projected[i],
            }
        )
    return rows, projection


def export_latents(model, dataset, path) -> tuple[list[dict], PcaProjection]:
    """Write the latent dump CSV: subject_id,label,split,e0..e{D-1},pc1,pc2."""
    rows, projection = latent_rows(model, dataset)
    d = model.spec.latent_dim
    header = (
        "subject_id,label,split,"
        + ",".join(f"e{i}" for i in range(d))
        + ",pc1,pc2"
    )
    lines = [header]
    for row in rows:
        lines.append(
            f"{row['subject_id']},{row['label']},{row['split']},"
            + ",".join(repr(float(v)) for v in row["latent"])
            + f",{repr(float(row['pc'][0]))},{repr(float(row['pc'][1]))}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return rows, projection


@dataclass(frozen=True)
class DispersionResult:
    between: float  # mean pairwise distance between subject centroids
    within: float  # mean distance of samples to their subject centroid
    score: float  # between / within; 0 when nothing is spread at all


def subject_dispersion(latents, subject_ids) -> DispersionResult:
    """How strongly latents cluster by participant.

    A high score means subject identity dominates the geometry; driving it
    down is exactly what the invariance regularizers are for.
    """
    x = np.asarray(latents, dtype=np.float64)
    subjects = list(subject_ids)
    if x.ndim != 2 or len(subjects) != x.shape[0]:
        raise ValueError(
            f"need one subject id per latent row, got {len(subjects)} ids "
            f"for shape {x.shape}"
        )
    unique = sorted(set(subjects))
    if len(unique) < 2:
        raise ValueError(f"need >= 2 subjects, got {len(unique)}")
    tags = np.array(subjects)
    centroids = np.stack([x[tags == s].mean(axis=0) for s in unique])
    dists = [
        float(np.linalg.norm(centroids[i] - centroids[j]))
        for i in range(len(unique))
        for j in range(i + 1, len(unique))
    ]
    between = float(np.mean(dists))
    within = float(
        np.mean(
            [
                np.linalg.norm(row - centroids[unique.index(s)])
                for row, s in zip(x, subjects)
            ]
        )
    )
    if within == 0.0:
        score = 0.0 if between == 0.0 else math.inf
    else:
        score = between / within
    return DispersionResult(between, within, score)
