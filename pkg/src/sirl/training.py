"""Two-phase training: unsupervised pretraining, supervised fine-tuning.

Pretraining minimizes reconstruction error, optionally regularized toward
participant-invariant latents — either a kernel-MMD penalty across the
subjects present in each minibatch, or an adversarial domain classifier
behind a gradient-reversal layer. Fine-tuning then trains the classifier
head (and, by default, the encoder underneath it) with binary
cross-entropy, optionally augmented by a triplet term on in-batch latents.

``run_trials`` repeats the whole protocol with consecutive seeds and
aggregates mean/SD of test accuracy; ``person_specific`` is the per-subject
70/30 baseline that skips pretraining entirely.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Var, backward, make_rng, relu, sqrt, take_rows, zero_grads
from .data import TEST, TRAIN, Dataset
from .losses import (
    KernelConfig,
    SubjectBatch,
    classification_loss,
    combined_pretrain_loss,
    domain_loss,
    gradient_reversal,
    mmd_pairwise,
    recon_loss,
)
from .models import Model, ModelSpec, build

logger = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd")

VARIANTS = {
    "baseline": dict(pretrain_mode="none", finetune_triplet=False),
    "mmd": dict(pretrain_mode="mmd", finetune_triplet=False),
    "dann": dict(pretrain_mode="dann", finetune_triplet=False),
    "triplet": dict(pretrain_mode="none", finetune_triplet=True),
    "mmd+triplet": dict(pretrain_mode="mmd", finetune_triplet=True),
    "person-specific": dict(pretrain_mode="none", finetune_triplet=False),
}


class TrainingDivergedError(RuntimeError):
    """Optimization produced a non-finite loss."""


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 0.001
    lambda_mmd: float = 0.2
    lambda_triplet: float = 0.2
    pretrain_mode: str = "none"
    finetune_triplet: bool = False
    trials: int = 10
    seed: int = 0
    triplet_margin: float = 1.0
    optimizer: str = "adam"
    freeze_encoder: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.trials < 1:
            raise ValueError(f"epochs, batch_size and trials must be positive: {self}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (math.isfinite(self.lambda_mmd) and math.isfinite(self.lambda_triplet)):
            raise ValueError("lambda coefficients must be finite")
        if self.pretrain_mode not in ("none", "mmd", "dann"):
            raise ValueError(f"unknown pretrain_mode {self.pretrain_mode!r}")
        if not self.triplet_margin > 0:
            raise ValueError(f"triplet_margin must be positive, got {self.triplet_margin}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; expected {OPTIMIZERS}")


def config_for_variant(name: str, base: TrainingConfig) -> TrainingConfig:
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}")
    return replace(base, **VARIANTS[name])


# -- optimizers ---------------------------------------------------------------


class Sgd:
    def __init__(self, params, learning_rate: float):
        self.params = list(params)
        self.lr = learning_rate

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.value[...] = p.value - self.lr * p.grad


class Adam:
    def __init__(self, params, learning_rate: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps = learning_rate, beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m[...] = self.b1 * m + (1.0 - self.b1) * g
            v[...] = self.b2 * v + (1.0 - self.b2) * g * g
            p.value[...] = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, params, learning_rate: float):
    if name == "adam":
        return Adam(params, learning_rate)
    if name == "sgd":
        return Sgd(params, learning_rate)
    raise ValueError(f"unknown optimizer {name!r}; expected {OPTIMIZERS}")


# -- phases -------------------------------------------------------------------


def _check_finite(loss: Var, phase: str, epoch: int, batch: int) -> None:
    if not np.isfinite(loss.value):
        raise TrainingDivergedError(
            f"{phase} loss became non-finite at epoch {epoch}, batch {batch}"
        )


def _batches(n: int, batch_size: int, perm: np.ndarray):
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def pretrain(model: Model, dataset: Dataset, config: TrainingConfig) -> dict[str, list[float]]:
    """Minimize reconstruction (+ optional invariance term) over the dataset.

    Returns per-epoch mean losses: {"recon": [...], "regularizer": [...]};
    the regularizer series is all zeros in plain mode. A zero lambda_mmd in
    mmd mode short-circuits to exactly the plain-mode arithmetic.
    """
    if len(dataset) == 0:
        raise ValueError("pretrain needs a nonempty dataset")
    mode = config.pretrain_mode
    if mode == "mmd" and config.lambda_mmd == 0.0:
        mode = "none"
    x_all, _, row_subjects = dataset.arrays()
    subjects = dataset.subject_ids()
    if mode in ("mmd", "dann") and len(subjects) < 2:
        raise ValueError(f"pretrain mode {mode!r} needs >= 2 subjects, got {len(subjects)}")
    if mode == "dann":
        if not model.spec.domain_head or model.spec.domain_head[-1] != len(subjects):
            raise ValueError(
                f"dann pretraining needs a domain head over {len(subjects)} subjects; "
                f"model has {model.spec.domain_head or 'none'}"
            )
    subject_row = np.array([subjects.index(s) for s in row_subjects])
    one_hot = np.eye(len(subjects))[subject_row]

    params = [v for name, v in model.params.items() if name.startswith(("enc", "dec"))]
    if mode == "dann":
        params += [v for name, v in model.params.items() if name.startswith("dom")]
    opt = make_optimizer(config.optimizer, params, config.learning_rate)
    shuffle_rng = make_rng(config.seed, "pretrain-shuffle")
    kernel = KernelConfig()

    n = len(dataset)
    history = {"recon": [], "regularizer": []}
    for epoch in range(1, config.epochs + 1):
        perm = shuffle_rng.permutation(n)
        recon_sum = reg_sum = 0.0
        for batch_no, rows in enumerate(_batches(n, config.batch_size, perm), start=1):
            xb = x_all[rows]
            z = model.encode(xb)
            rec = recon_loss(xb, model.decode(z))
            reg = None
            if mode == "mmd":
                groups = []
                for s_idx in np.unique(subject_row[rows]):
                    members = np.flatnonzero(subject_row[rows] == s_idx)
                    groups.append(SubjectBatch(subjects[s_idx], take_rows(z, members)))
                reg = mmd_pairwise(groups, kernel)
            elif mode == "dann":
                reg = domain_loss(model.classify_domain(gradient_reversal(z)), one_hot[rows])
            loss = combined_pretrain_loss(rec, reg, mode, config.lambda_mmd)
            _check_finite(loss, "pretrain", epoch, batch_no)
            zero_grads(params)
            backward(loss)
            opt.step()
            recon_sum += rec.item() * len(rows)
            reg_sum += (reg.item() if reg is not None else 0.0) * len(rows)
        history["recon"].append(recon_sum / n)
        history["regularizer"].append(reg_sum / n)
    return history


def sample_triplets(labels, rng) -> list[tuple[int, int, int]]:
    """(anchor, positive, negative) index triples for one batch.

    Every sample anchors one triple: a uniformly random same-label partner
    (never the anchor itself) and a uniformly random other-label partner.
    Anchors missing either pool are skipped, so a single-class batch yields
    no triples at all.
    """
    labels = np.asarray(labels)
    triples = []
    for a in range(len(labels)):
        pos_pool = np.flatnonzero(labels == labels[a])
        pos_pool = pos_pool[pos_pool != a]
        neg_pool = np.flatnonzero(labels != labels[a])
        if len(pos_pool) == 0 or len(neg_pool) == 0:
            continue
        triples.append((a, int(rng.choice(pos_pool)), int(rng.choice(neg_pool))))
    return triples


def finetune(model: Model, dataset: Dataset, config: TrainingConfig) -> dict[str, list[float]]:
    """Supervised phase: cross-entropy (+ optional triplet term) on latents.

    Encoder weights train together with the classifier head unless
    ``freeze_encoder``. Returns per-epoch mean losses
    {"classification": [...], "triplet": [...]}.
    """
    if len(dataset) == 0:
        raise ValueError("finetune needs a nonempty dataset")
    x_all, y_all, _ = dataset.arrays()
    use_triplet = config.finetune_triplet and config.lambda_triplet != 0.0

    params = [v for name, v in model.params.items() if name.startswith("cls")]
    if not config.freeze_encoder:
        params += [v for name, v in model.params.items() if name.startswith("enc")]
    opt = make_optimizer(config.optimizer, params, config.learning_rate)
    shuffle_rng = make_rng(config.seed, "finetune-shuffle")
    triplet_rng = make_rng(config.seed, "finetune-triplets")

    n = len(dataset)
    history = {"classification": [], "triplet": []}
    for epoch in range(1, config.epochs + 1):
        perm = shuffle_rng.permutation(n)
        cls_sum = trip_sum = 0.0
        for batch_no, rows in enumerate(_batches(n, config.batch_size, perm), start=1):
            z = model.encode(x_all[rows])
            cls = classification_loss(model.classify(z), y_all[rows])
            loss, trip_value = cls, 0.0
            if use_triplet:
                triples = sample_triplets(y_all[rows], triplet_rng)
                if not triples:
                    logger.warning(
                        "epoch %d batch %d holds a single class; triplet term skipped",
                        epoch,
                        batch_no,
                    )
                else:
                    anchor, pos, neg = (np.array(ix) for ix in zip(*triples))
                    za, zp, zn = (take_rows(z, ix) for ix in (anchor, pos, neg))
                    dp, dn = za - zp, za - zn
                    gap = sqrt((dp * dp).sum(axis=1)) - sqrt((dn * dn).sum(axis=1))
                    trip = relu(gap + config.triplet_margin).mean()
                    loss = cls + trip * config.lambda_triplet
                    trip_value = trip.item()
            _check_finite(loss, "finetune", epoch, batch_no)
            zero_grads(params)
            backward(loss)
            opt.step()
            cls_sum += cls.item() * len(rows)
            trip_sum += trip_value * len(rows)
        history["classification"].append(cls_sum / n)
        history["triplet"].append(trip_sum / n)
    return history


def evaluate(model: Model, dataset: Dataset) -> float:
    """Fraction of samples whose thresholded probability (>= 0.5) matches."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    x, y, _ = dataset.arrays()
    probs = model.classify(model.encode(x)).value
    return float(((probs >= 0.5).astype(float) == y).mean())


# -- trials -------------------------------------------------------------------


@dataclass
class TrialReport:
    trial_index: int
    seed: int
    accuracy: float
    pretrain_history: dict[str, list[float]]
    finetune_history: dict[str, list[float]]
    wall_time: float
    per_subject: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy must be in [0, 1], got {self.accuracy}")


@dataclass
class AggregateReport:
    mean_accuracy: float
    sd: float
    trials: list[TrialReport]


def run_trial(
    train: Dataset,
    test: Dataset,
    spec: ModelSpec,
    config: TrainingConfig,
    trial_index: int,
) -> tuple[TrialReport, Model]:
    """One full protocol run with seed = config.seed + trial_index."""
    seed = config.seed + trial_index
    cfg = replace(config, seed=seed, trials=1)
    started = time.perf_counter()
    model = build(spec, seed=seed)
    pre_hist = pretrain(model, train, cfg)
    fin_hist = finetune(model, train, cfg)
    accuracy = evaluate(model, test)
    report = TrialReport(
        trial_index=trial_index,
        seed=seed,
        accuracy=accuracy,
        pretrain_history=pre_hist,
        finetune_history=fin_hist,
        wall_time=time.perf_counter() - started,
    )
    return report, model


def run_trials(
    train: Dataset,
    test: Dataset,
    spec: ModelSpec,
    config: TrainingConfig,
    n_workers: int = 1,
) -> tuple[AggregateReport, list[Model]]:
    """Repeat the protocol ``config.trials`` times; aggregate accuracy.

    Trials are independent; with ``n_workers > 1`` they run on a thread
    pool. Results are merged in trial-index order either way, so the report
    does not depend on scheduling.
    """
    indices = range(config.trials)
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            outcomes = list(pool.map(lambda t: run_trial(train, test, spec, config, t), indices))
    else:
        outcomes = [run_trial(train, test, spec, config, t) for t in indices]
    reports = [r for r, _ in outcomes]
    models = [m for _, m in outcomes]
    accs = np.array([r.accuracy for r in reports])
    return AggregateReport(float(accs.mean()), float(accs.std()), reports), models


# -- person-specific baseline -------------------------------------------------


def split_within_subject(samples, rng) -> tuple[list, list]:
    """Stratified 70/30 split of one subject's samples.

    Within each class the order is shuffled, then the first 70% (rounded,
    clamped so both portions stay nonempty when the class has >= 2 members)
    go to train. A single-member class goes to train whole.
    """
    train, test = [], []
    for label in (0, 1):
        members = [s for s in samples if s.label == label]
        if not members:
            continue
        order = rng.permutation(len(members))
        if len(members) == 1:
            n_train = 1
        else:
            n_train = min(len(members) - 1, max(1, round(0.7 * len(members))))
        train += [members[i] for i in order[:n_train]]
        test += [members[i] for i in order[n_train:]]
    return train, test


def person_specific(
    dataset: Dataset, spec: ModelSpec, config: TrainingConfig
) -> tuple[float, dict[str, float]]:
    """Per-participant 70/30 protocol: fresh supervised model per subject.

    Returns the unweighted mean over subjects plus each subject's accuracy.
    No pretraining — this is the fully personal baseline the invariant
    models are compared against.
    """
    groups = dataset.by_subject()
    too_small = sorted(s for s, g in groups.items() if len(g) < 4)
    if too_small:
        raise ValueError(
            f"person-specific protocol needs >= 4 samples per subject; "
            f"too few for {too_small}"
        )
    per_subject: dict[str, float] = {}
    for subject in sorted(groups):
        rng = make_rng(config.seed, "person-split", subject)
        train_samples, test_samples = split_within_subject(groups[subject], rng)
        labels = {s.label for s in train_samples}
        if len(labels) < 2:
            logger.warning(
                "subject %s trains on a single class (%s); proceeding", subject, labels
            )
        model = build(spec, seed=config.seed)
        cfg = replace(config, pretrain_mode="none", finetune_triplet=False)
        finetune(model, Dataset(train_samples).with_split(TRAIN), cfg)
        per_subject[subject] = evaluate(model, Dataset(test_samples).with_split(TEST))
    mean_acc = float(np.mean(list(per_subject.values())))
    return mean_acc, per_subject


def person_specific_trials(
    dataset: Dataset, spec: ModelSpec, config: TrainingConfig
) -> AggregateReport:
    """Repeat person_specific with consecutive seeds, like run_trials."""
    reports = []
    empty = {"recon": [], "regularizer": []}
    for t in range(config.trials):
        cfg = replace(config, seed=config.seed + t)
        started = time.perf_counter()
        mean_acc, per_subject = person_specific(dataset, spec, cfg)
        reports.append(
            TrialReport(
                trial_index=t,
                seed=cfg.seed,
                accuracy=mean_acc,
                pretrain_history=dict(empty),
                finetune_history={"classification": [], "triplet": []},
                wall_time=time.perf_counter() - started,
                per_subject=per_subject,
            )
        )
    accs = np.array([r.accuracy for r in reports])
    return AggregateReport(float(accs.mean()), float(accs.std()), reports)


# -- machine-readable metrics -------------------------------------------------


def metrics_records(reports: list[TrialReport]):
    """Line-delimited metric records, in trial order.

    Per trial: one record per pretraining epoch, one per fine-tuning epoch,
    then a summary record with the final accuracy. Wall time is deliberately
    absent so repeated runs emit identical bytes.
    """
    for r in reports:
        for e, (rec, reg) in enumerate(
            zip(r.pretrain_history["recon"], r.pretrain_history["regularizer"]), start=1
        ):
            yield {"trial": r.trial_index, "phase": "pretrain", "epoch": e,
                   "recon": rec, "regularizer": reg}
        for e, (cls, trip) in enumerate(
            zip(r.finetune_history["classification"], r.finetune_history["triplet"]),
            start=1,
        ):
            yield {"trial": r.trial_index, "phase": "finetune", "epoch": e,
                   "classification": cls, "triplet": trip}
        summary = {"trial": r.trial_index, "seed": r.seed, "accuracy": r.accuracy}
        if r.per_subject:
            summary["per_subject"] = r.per_subject
        yield summary
