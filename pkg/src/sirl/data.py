"""Datasets: canonical CSV files, subject-wise splits, synthetic cohorts.

A dataset is a flat list of labelled, subject-tagged windows of equal
length. The on-disk form is a plain CSV (``subject_id,label,v0,...``);
loading and saving round-trip byte-exactly for files this module wrote.
The synthetic generator produces a multi-subject cohort with sinusoidal
class patterns and controllable per-subject offset/amplitude shifts, which
stands in for real multi-participant recordings at desk scale.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import make_rng

TRAIN, TEST = "train", "test"


class DatasetFormatError(ValueError):
    """A dataset file does not follow the canonical CSV layout."""


@dataclass(frozen=True)
class Sample:
    """One labelled window from one participant."""

    subject_id: str
    label: int
    series: np.ndarray = field(hash=False)
    split: str = ""

    def __post_init__(self):
        if not self.subject_id:
            raise ValueError("subject_id must be nonempty")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        arr = np.asarray(self.series, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError(f"series must be 1-D and nonempty, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"series for subject {self.subject_id!r} has non-finite values")
        object.__setattr__(self, "series", arr)
        if self.split not in ("", TRAIN, TEST):
            raise ValueError(f"split must be '', 'train' or 'test', got {self.split!r}")


class Dataset:
    """An immutable collection of equal-length samples."""

    def __init__(self, samples):
        samples = tuple(samples)
        if samples:
            length = samples[0].series.size
            for s in samples:
                if s.series.size != length:
                    raise DatasetFormatError(
                        f"series length {s.series.size} for subject {s.subject_id!r} "
                        f"does not match the dataset length {length}"
                    )
        self.samples = samples

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def length(self) -> int:
        return self.samples[0].series.size if self.samples else 0

    def subject_ids(self) -> list[str]:
        return sorted({s.subject_id for s in self.samples})

    def manifest(self) -> dict[tuple[str, int, str], int]:
        """(split, label, subject) -> sample count, computed from the samples."""
        return dict(Counter((s.split, s.label, s.subject_id) for s in self.samples))

    def arrays(self) -> tuple[np.ndarray, np.ndarray, list[str]]:
        """Stacked (n, L) series, (n,) float labels, and per-row subject ids."""
        x = np.stack([s.series for s in self.samples]) if self.samples else np.zeros((0, 0))
        y = np.array([float(s.label) for s in self.samples])
        return x, y, [s.subject_id for s in self.samples]

    def by_subject(self) -> dict[str, list[Sample]]:
        groups: dict[str, list[Sample]] = {}
        for s in self.samples:
            groups.setdefault(s.subject_id, []).append(s)
        return groups

    def with_split(self, split: str) -> "Dataset":
        return Dataset(replace(s, split=split) for s in self.samples)

    def normalized(self) -> "Dataset":
        return Dataset(
            replace(s, series=min_max_normalize(s.series)) for s in self.samples
        )


def min_max_normalize(series) -> np.ndarray:
    """Scale one window to [0, 1]: (x - min) / (max - min).

    A constant window has no scale; it maps to all 0.5 (the midpoint) so the
    output stays in range.
    """
    arr = np.asarray(series, dtype=np.float64)
    if arr.size < 1:
        raise ValueError("cannot normalize an empty series")
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return np.full_like(arr, 0.5)
    return (arr - lo) / (hi - lo)


# -- canonical CSV ------------------------------------------------------------


def _header(length: int) -> str:
    return "subject_id,label," + ",".join(f"v{i}" for i in range(length))


def save_dataset(dataset: Dataset, path) -> None:
    """Write the canonical CSV; floats use repr (shortest round-trip form)."""
    if not dataset.samples:
        raise ValueError("refusing to save an empty dataset")
    lines = [_header(dataset.length)]
    for s in dataset.samples:
        lines.append(
            f"{s.subject_id},{s.label}," + ",".join(repr(float(v)) for v in s.series)
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path) -> Dataset:
    """Parse a canonical CSV; every malformed row is reported by line number."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: file is empty")
    head = lines[0].split(",")
    if head[:2] != ["subject_id", "label"] or len(head) < 3:
        raise DatasetFormatError(
            f"{path}: line 1: expected header 'subject_id,label,v0,...', got {lines[0]!r}"
        )
    if head[2:] != [f"v{i}" for i in range(len(head) - 2)]:
        raise DatasetFormatError(f"{path}: line 1: value columns must be v0..v{{L-1}}")
    length = len(head) - 2

    samples = []
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            raise DatasetFormatError(f"{path}: line {lineno}: blank row")
        fields = raw.split(",")
        if len(fields) != length + 2:
            raise DatasetFormatError(
                f"{path}: line {lineno}: subject {fields[0]!r} row has "
                f"{len(fields) - 2} values, header promises {length}"
            )
        subject, label_text = fields[0], fields[1]
        if label_text not in ("0", "1"):
            raise DatasetFormatError(
                f"{path}: line {lineno}: label must be 0 or 1, got {label_text!r}"
            )
        try:
            series = np.array([float(v) for v in fields[2:]])
        except ValueError as exc:
            raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from None
        try:
            samples.append(Sample(subject, int(label_text), series))
        except ValueError as exc:
            raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from None
    return Dataset(samples)


# -- splits -------------------------------------------------------------------


def split_by_subject(dataset: Dataset, train_subject_ids) -> tuple[Dataset, Dataset]:
    """Partition so no participant appears in both splits.

    Subjects listed in ``train_subject_ids`` go to train, everyone else to
    test; an id that is not in the dataset at all is an error.
    """
    train_ids = set(train_subject_ids)
    known = set(dataset.subject_ids())
    unknown = train_ids - known
    if unknown:
        raise ValueError(
            f"unknown train subject ids {sorted(unknown)}; dataset has {sorted(known)}"
        )
    train = [s for s in dataset if s.subject_id in train_ids]
    test = [s for s in dataset if s.subject_id not in train_ids]
    return (
        Dataset(replace(s, split=TRAIN) for s in train),
        Dataset(replace(s, split=TEST) for s in test),
    )


# -- synthetic cohorts --------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic multi-subject cohort.

    Class c draws a sinusoid at frequency ``class_signal[c]`` (cycles per
    window). ``subject_shift_scale`` controls how far participants drift
    from each other: additive offsets spread evenly over +-scale and
    amplitudes jittered by +-0.1*scale (capped below so the class signal
    never vanishes). Zero scale makes all participants statistically
    identical.
    """

    n_subjects: int = 6
    samples_per_subject: int = 40
    length: int = 64
    class_signal: tuple[float, float] = (2.0, 4.0)
    subject_shift_scale: float = 2.0
    noise_sd: float = 0.05
    positive_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 1 or self.samples_per_subject < 1 or self.length < 2:
            raise ValueError(f"cohort dimensions must be positive: {self}")
        if self.class_signal[0] == self.class_signal[1]:
            raise ValueError("class frequencies must differ")
        if self.subject_shift_scale < 0 or self.noise_sd < 0:
            raise ValueError("scales must be nonnegative")
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise ValueError(f"positive_fraction must be in [0, 1], got {self.positive_fraction}")


def subject_offsets(config: SynthConfig) -> np.ndarray:
    """Deterministic additive offsets, evenly spread over +-shift_scale."""
    if config.n_subjects == 1:
        return np.zeros(1)
    return np.linspace(-1.0, 1.0, config.n_subjects) * config.subject_shift_scale


def synth_generate(config: SynthConfig) -> Dataset:
    """Deterministic synthetic cohort.

    Per subject s and class c, each window is
    ``offset_s + amp_s * sin(2*pi*f_c*t/L + phase) + noise`` with a fresh
    phase per window; each subject consumes its own derived random stream.
    """
    offsets = subject_offsets(config)
    width = len(str(config.n_subjects - 1))
    t = np.arange(config.length)
    n_pos = round(config.samples_per_subject * config.positive_fraction)
    labels = [0] * (config.samples_per_subject - n_pos) + [1] * n_pos

    samples = []
    for s_idx in range(config.n_subjects):
        rng = make_rng(config.seed, "synth", s_idx)
        amp = 1.0 + 0.1 * config.subject_shift_scale * rng.uniform(-1.0, 1.0)
        amp = max(amp, 0.3)
        subject = f"s{s_idx:0{width}d}"
        for label in labels:
            phase = rng.uniform(0.0, 2.0 * math.pi)
            freq = config.class_signal[label]
            clean = offsets[s_idx] + amp * np.sin(
                2.0 * math.pi * freq * t / config.length + phase
            )
            noise = rng.normal(0.0, config.noise_sd, size=config.length)
            samples.append(Sample(subject, label, clean + noise))
    return Dataset(samples)
