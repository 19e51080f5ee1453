"""Shared domain types, vote validation, and annotation metrics.

Class ids are 1-based throughout; 0 is the reserved abstention vote. All
container types freeze their arrays after construction so instances can be
shared across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ValidationError(ValueError):
    """Input violates a structural contract (bad vote, shape, or config)."""


class NumericalError(RuntimeError):
    """A computation produced a non-finite or degenerate result."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LabelSpace:
    """A C-class label space; classes are 1..C, 0 means abstention."""

    num_classes: int

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValidationError(f"need at least 2 classes, got {self.num_classes}")

    @property
    def classes(self) -> range:
        return range(1, self.num_classes + 1)


@dataclass(frozen=True)
class SpecializedSets:
    """Per-LF class subsets; an LF may only vote inside its set or abstain.

    ``tau[k]`` is stored as a sorted tuple. An LF with an empty set is
    inactive and only ever abstains.
    """

    tau: tuple[tuple[int, ...], ...]
    num_classes: int

    def __post_init__(self):
        norm = []
        for k, s in enumerate(self.tau):
            s = tuple(sorted(set(int(c) for c in s)))
            for c in s:
                if not 1 <= c <= self.num_classes:
                    raise ValidationError(
                        f"tau[{k}] contains {c}, outside 1..{self.num_classes}"
                    )
            norm.append(s)
        object.__setattr__(self, "tau", tuple(norm))

    @property
    def num_lfs(self) -> int:
        return len(self.tau)

    def is_active(self, k: int) -> bool:
        return len(self.tau[k]) > 0

    @property
    def active(self) -> list[int]:
        return [k for k in range(self.num_lfs) if self.tau[k]]

    def member_mask(self) -> np.ndarray:
        """K x C boolean mask, entry (k, c-1) true iff class c is in tau[k]."""
        m = np.zeros((self.num_lfs, self.num_classes), dtype=bool)
        for k, s in enumerate(self.tau):
            for c in s:
                m[k, c - 1] = True
        return m


@dataclass(frozen=True)
class NoisyLabelMatrix:
    """N x K integer vote matrix; row = sample, column = LF, 0 = abstain."""

    votes: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.votes, dtype=np.int64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValidationError(f"votes must be a nonempty 2-d matrix, got shape {v.shape}")
        object.__setattr__(self, "votes", _frozen(v))

    @property
    def n_samples(self) -> int:
        return self.votes.shape[0]

    @property
    def num_lfs(self) -> int:
        return self.votes.shape[1]


@dataclass(frozen=True)
class ProbLabels:
    """Row-stochastic N x C soft labels plus a coverage mask.

    Covered rows must sum to one; uncovered rows carry no information and
    are excluded from coverage and from metric numerators.
    """

    pi: np.ndarray
    covered: np.ndarray

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=np.float64)
        cov = np.asarray(self.covered, dtype=bool)
        if pi.ndim != 2:
            raise ValidationError(f"pi must be 2-d, got shape {pi.shape}")
        if cov.shape != (pi.shape[0],):
            raise ValidationError("covered mask length must match pi rows")
        if np.any(pi < 0):
            raise ValidationError("pi entries must be nonnegative")
        sums = pi[cov].sum(axis=1)
        if sums.size and np.max(np.abs(sums - 1.0)) > 1e-9:
            raise ValidationError("covered rows of pi must sum to 1 within 1e-9")
        object.__setattr__(self, "pi", _frozen(pi))
        object.__setattr__(self, "covered", _frozen(cov))

    @property
    def num_classes(self) -> int:
        return self.pi.shape[1]

    def hard_labels(self) -> np.ndarray:
        """Per-row argmax class in 1..C (uncovered rows included; mask separately)."""
        return np.argmax(self.pi, axis=1) + 1


@dataclass(frozen=True)
class LabeledSubset:
    """Indices into a dataset together with their ground-truth labels."""

    indices: np.ndarray
    labels: np.ndarray
    num_classes: int = field(default=0)

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        y = np.asarray(self.labels, dtype=np.int64)
        if idx.shape != y.shape or idx.ndim != 1:
            raise ValidationError("indices and labels must be matching 1-d arrays")
        if len(np.unique(idx)) != len(idx):
            raise ValidationError("labeled indices must be unique")
        if y.size and (y.min() < 1 or (self.num_classes and y.max() > self.num_classes)):
            raise ValidationError("labels must lie in 1..C")
        object.__setattr__(self, "indices", _frozen(idx))
        object.__setattr__(self, "labels", _frozen(y))


def validate_votes(
    votes: NoisyLabelMatrix, tau: SpecializedSets, space: LabelSpace
) -> NoisyLabelMatrix:
    """Check every vote is 0 or a member of its LF's specialized set.

    Returns the matrix unchanged on success; raises ValidationError naming
    the first offending (row, column, value) otherwise.
    """
    v = votes.votes
    if tau.num_classes != space.num_classes:
        raise ValidationError("tau and label space disagree on num_classes")
    if v.shape[1] != tau.num_lfs:
        raise ValidationError(
            f"votes have {v.shape[1]} columns but tau defines {tau.num_lfs} LFs"
        )
    # legal[k, v] for v in 0..C
    legal = np.zeros((tau.num_lfs, space.num_classes + 1), dtype=bool)
    legal[:, 0] = True
    legal[:, 1:] = tau.member_mask()
    in_range = (v >= 0) & (v <= space.num_classes)
    ok = in_range & legal[np.arange(tau.num_lfs)[None, :], np.clip(v, 0, space.num_classes)]
    if not ok.all():
        n, k = np.argwhere(~ok)[0]
        raise ValidationError(
            f"vote {v[n, k]} at row {n}, column {k} is not in {{0}} U tau[{k}]"
        )
    return votes


def coverage(mask: np.ndarray) -> float:
    """Fraction of covered samples."""
    mask = np.asarray(mask, dtype=bool)
    if mask.size == 0:
        raise ValidationError("coverage of an empty mask is undefined")
    return float(np.count_nonzero(mask)) / mask.size


def macro_prf(
    predicted: np.ndarray,
    truth: np.ndarray,
    num_classes: int,
    covered: np.ndarray | None = None,
) -> tuple[float, float, float]:
    """Macro-averaged one-vs-rest precision, recall, and F1 over covered samples.

    Per-class scores with an empty denominator count as 0 and are still
    averaged, so classes missing from both prediction and truth pull the
    macro averages down. Uncovered samples are excluded entirely.
    """
    predicted = np.asarray(predicted, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if predicted.shape != truth.shape or predicted.ndim != 1:
        raise ValidationError("predicted and truth must be matching 1-d arrays")
    if covered is None:
        covered = np.ones(predicted.shape, dtype=bool)
    covered = np.asarray(covered, dtype=bool)
    p = predicted[covered]
    t = truth[covered]
    if p.size == 0:
        raise ValidationError("no covered samples to score")
    precisions = np.zeros(num_classes)
    recalls = np.zeros(num_classes)
    f1s = np.zeros(num_classes)
    for c in range(1, num_classes + 1):
        tp = np.count_nonzero((p == c) & (t == c))
        fp = np.count_nonzero((p == c) & (t != c))
        fn = np.count_nonzero((p != c) & (t == c))
        prec = tp / (tp + fp) if tp + fp > 0 else 0.0
        rec = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        precisions[c - 1] = prec
        recalls[c - 1] = rec
        f1s[c - 1] = f1
    return float(precisions.mean()), float(recalls.mean()), float(f1s.mean())
