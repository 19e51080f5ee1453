"""Synthetic ground-truth scenarios and brute-force enumeration oracles.

Two generators: conditionally independent noisy-vote populations with known
per-LF behavior, and Gaussian-cluster feature datasets with weak and strong
noisy views. The brute-force functions enumerate the label model's joint
explicitly from its own local copy of the four-case potential, so they stay
an independent check on the factored implementations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .core import (
    LabelSpace,
    NoisyLabelMatrix,
    SpecializedSets,
    ValidationError,
    validate_votes,
)


def _rng(seed: int, stream: int = 0) -> np.random.Generator:
    # counter-based generator keyed by (seed, stream)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(stream,))))


# ---------------------------------------------------------------------------
# noisy-vote scenarios


@dataclass(frozen=True)
class VoteScenarioSpec:
    """Conditionally independent vote population with known parameters.

    Per LF k: when the true class lies in tau[k] the LF abstains with
    probability abstain_rate_in[k], otherwise votes; a cast vote equals the
    truth with probability accuracy_in[k], else is uniform over the rest of
    tau[k]. When the truth lies outside tau[k] the LF abstains with
    probability abstain_rate_out[k], else draws from confusion_out[k] over
    tau[k] (uniform when omitted).
    """

    space: LabelSpace
    tau: SpecializedSets
    class_prior: np.ndarray
    abstain_rate_in: np.ndarray
    abstain_rate_out: np.ndarray
    accuracy_in: np.ndarray
    n_samples: int
    seed: int = 0
    confusion_out: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self):
        K = self.tau.num_lfs
        C = self.space.num_classes
        prior = np.asarray(self.class_prior, dtype=np.float64)
        if prior.shape != (C,) or abs(prior.sum() - 1.0) > 1e-9 or (prior < 0).any():
            raise ValidationError("class_prior must be a length-C simplex")
        object.__setattr__(self, "class_prior", prior)
        for name in ("abstain_rate_in", "abstain_rate_out", "accuracy_in"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.shape != (K,) or (a < 0).any() or (a > 1).any():
                raise ValidationError(f"{name} must be K probabilities")
            object.__setattr__(self, name, a)
        if self.n_samples < 1:
            raise ValidationError("n_samples must be positive")
        if not any(self.tau.tau):
            raise ValidationError("every LF has an empty specialized set")
        if self.confusion_out is not None:
            for k, t in enumerate(self.tau.tau):
                p = np.asarray(self.confusion_out[k], dtype=np.float64)
                if t and (p.shape != (len(t),) or abs(p.sum() - 1.0) > 1e-9 or (p < 0).any()):
                    raise ValidationError(f"confusion_out[{k}] must be a simplex over tau[{k}]")


def gen_votes_for_truth(
    spec: VoteScenarioSpec, truth: np.ndarray, rng: np.random.Generator
) -> NoisyLabelMatrix:
    """Draw one vote matrix conditioned on the given truth classes."""
    n = len(truth)
    K = spec.tau.num_lfs
    votes = np.zeros((n, K), dtype=np.int64)
    member = spec.tau.member_mask()
    for k in range(K):
        t = np.array(spec.tau.tau[k], dtype=np.int64)
        if len(t) == 0:
            continue
        in_set = member[k][truth - 1]
        abstain_p = np.where(in_set, spec.abstain_rate_in[k], spec.abstain_rate_out[k])
        casts = rng.random(n) >= abstain_p
        correct = rng.random(n) < spec.accuracy_in[k]
        wrong_pick = rng.integers(0, max(len(t) - 1, 1), size=n)
        if spec.confusion_out is None:
            out_pick = t[rng.integers(0, len(t), size=n)]
        else:
            out_pick = t[rng.choice(len(t), size=n, p=np.asarray(spec.confusion_out[k]))]
        col = np.zeros(n, dtype=np.int64)
        # in-set casts: correct vote, or uniform over the remaining set classes
        pos_of_truth = np.searchsorted(t, truth)
        wrong_idx = wrong_pick + (wrong_pick >= np.clip(pos_of_truth, 0, len(t) - 1))
        wrong_vote = t[np.clip(wrong_idx, 0, len(t) - 1)] if len(t) > 1 else np.broadcast_to(t[0], n)
        in_cast = casts & in_set
        col[in_cast] = np.where(correct[in_cast], truth[in_cast], wrong_vote[in_cast])
        out_cast = casts & ~in_set
        col[out_cast] = out_pick[out_cast]
        votes[:, k] = col
    matrix = NoisyLabelMatrix(votes=votes)
    return validate_votes(matrix, spec.tau, spec.space)


def gen_votes(spec: VoteScenarioSpec) -> tuple[np.ndarray, NoisyLabelMatrix]:
    """Sample (truth, votes) for the scenario; deterministic under the seed."""
    rng = _rng(spec.seed, stream=1)
    truth = rng.choice(spec.space.num_classes, size=spec.n_samples, p=spec.class_prior) + 1
    votes = gen_votes_for_truth(spec, truth, _rng(spec.seed, stream=2))
    return truth, votes


# ---------------------------------------------------------------------------
# toy feature datasets


@dataclass(frozen=True)
class ToyFeatureSpec:
    """Gaussian-cluster dataset of small feature maps with two noisy views.

    Each sample is a positions x dim map whose rows scatter around its
    class mean. The weak and strong views add isotropic noise of scale
    noise_weak < noise_strong. Class means default to axis-aligned points
    class_sep apart (requires dim >= num_classes) unless given explicitly.
    """

    num_classes: int
    dim: int
    positions: int = 4
    class_sep: float = 4.0
    class_spread: float = 1.0
    noise_weak: float = 0.1
    noise_strong: float = 1.0
    n_labeled: int = 24
    n_unlabeled: int = 2000
    n_test: int = 1000
    seed: int = 0
    means: np.ndarray | None = None

    def __post_init__(self):
        if self.noise_weak >= self.noise_strong:
            raise ValidationError("noise_weak must be smaller than noise_strong")
        if self.n_labeled < self.num_classes:
            raise ValidationError("need at least one labeled sample per class")
        if self.means is not None:
            m = np.asarray(self.means, dtype=np.float64)
            if m.shape != (self.num_classes, self.dim):
                raise ValidationError("means must be num_classes x dim")
            object.__setattr__(self, "means", m)
        elif self.dim < self.num_classes:
            raise ValidationError("default axis-aligned means need dim >= num_classes")

    def class_means(self) -> np.ndarray:
        if self.means is not None:
            return self.means
        m = np.zeros((self.num_classes, self.dim))
        m[np.arange(self.num_classes), np.arange(self.num_classes)] = self.class_sep
        return m


@dataclass(frozen=True)
class ToyDataset:
    """Generated splits; unlabeled truth is kept for evaluation only."""

    x_labeled: np.ndarray
    xw_labeled: np.ndarray
    y_labeled: np.ndarray
    x_unlabeled: np.ndarray
    xw_unlabeled: np.ndarray
    xs_unlabeled: np.ndarray
    y_unlabeled: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    spec: ToyFeatureSpec = field(repr=False, default=None)


def _draw_split(spec, labels, rng_feat, rng_view, strong=False):
    n = len(labels)
    P, D = spec.positions, spec.dim
    means = spec.class_means()
    raw = means[labels - 1][:, None, :] + spec.class_spread * rng_feat.standard_normal((n, P, D))
    weak = raw + spec.noise_weak * rng_view.standard_normal((n, P, D))
    if not strong:
        return raw, weak, None
    strong_view = raw + spec.noise_strong * rng_view.standard_normal((n, P, D))
    return raw, weak, strong_view


def gen_toy_features(spec: ToyFeatureSpec) -> ToyDataset:
    """Sample labeled / unlabeled / test splits; deterministic under the seed."""
    C = spec.num_classes
    counts = np.full(C, spec.n_labeled // C)
    counts[: spec.n_labeled % C] += 1
    y_l = np.repeat(np.arange(1, C + 1), counts)
    y_u = _rng(spec.seed, 10).integers(1, C + 1, size=spec.n_unlabeled)
    y_t = _rng(spec.seed, 11).integers(1, C + 1, size=spec.n_test)

    x_l, xw_l, _ = _draw_split(spec, y_l, _rng(spec.seed, 12), _rng(spec.seed, 13))
    x_u, xw_u, xs_u = _draw_split(spec, y_u, _rng(spec.seed, 14), _rng(spec.seed, 15), strong=True)
    x_t, _, _ = _draw_split(spec, y_t, _rng(spec.seed, 16), _rng(spec.seed, 17))
    return ToyDataset(
        x_labeled=x_l, xw_labeled=xw_l, y_labeled=y_l,
        x_unlabeled=x_u, xw_unlabeled=xw_u, xs_unlabeled=xs_u, y_unlabeled=y_u,
        x_test=x_t, y_test=y_t, spec=spec,
    )


# ---------------------------------------------------------------------------
# brute-force oracles (local potential copy; independent of labelmodel)


def _phi(theta: np.ndarray, y: int, v: int, k: int, tau: SpecializedSets) -> float:
    t = tau.tau[k]
    if v == 0:
        return 1.0
    if v not in t:
        raise ValidationError(f"illegal vote {v} for LF {k}")
    e = float(np.exp(theta[k, y - 1]))
    if y in t:
        return 1.0 + e if v == y else 1.0 / (1.0 + e)
    return e


def brute_force_posterior(theta: np.ndarray, tau: SpecializedSets, vote_row) -> np.ndarray:
    """Posterior over classes by direct product of potentials."""
    C = theta.shape[1]
    weights = np.array(
        [
            np.prod([_phi(theta, y, int(v), k, tau) for k, v in enumerate(vote_row)])
            for y in range(1, C + 1)
        ]
    )
    return weights / weights.sum()


def brute_force_Z(theta: np.ndarray, tau: SpecializedSets, space: LabelSpace) -> float:
    """Partition function by exhaustive enumeration of every (y, votes) config."""
    K = tau.num_lfs
    domains = [(0,) + tau.tau[k] for k in range(K)]
    total = 0.0
    for y in space.classes:
        for votes in product(*domains):
            total += np.prod([_phi(theta, y, v, k, tau) for k, v in enumerate(votes)])
    return float(total)


def brute_force_conditional_accuracy(
    theta: np.ndarray,
    tau: SpecializedSets,
    space: LabelSpace,
    i: int,
    k: int,
    positive: bool = False,
) -> float:
    """P(one-vs-all recode of LF k agrees with truth | LF k cast a vote),
    or the class-wise variant conditioned on the LF voting exactly i,
    by joint enumeration."""
    K = tau.num_lfs
    domains = [(0,) + tau.tau[kk] for kk in range(K)]
    num = den = 0.0
    for y in space.classes:
        for votes in product(*domains):
            w = np.prod([_phi(theta, y, v, kk, tau) for kk, v in enumerate(votes)])
            v = votes[k]
            if positive:
                if v == i:
                    den += w
                    if y == i:
                        num += w
            else:
                if v != 0:
                    den += w
                    agree = (v == i and y == i) or (v != i and y != i)
                    if agree:
                        num += w
    if den <= 0:
        raise ValidationError("conditioning event has zero mass")
    return num / den


@dataclass(frozen=True)
class EmpiricalAccuracy:
    """Known-truth agreement rates per (class, LF); the oracle counterpart
    of the unsupervised estimates."""

    accuracy: np.ndarray
    accuracy_positive: np.ndarray
    valid: np.ndarray
    valid_positive: np.ndarray


def empirical_accuracy(
    votes: NoisyLabelMatrix, truth: np.ndarray, tau: SpecializedSets, space: LabelSpace
) -> EmpiricalAccuracy:
    """Per-(class, LF) one-vs-all agreement frequencies computed with truth.

    accuracy[i-1, k] conditions on the LF casting any vote; the positive
    variant conditions on it voting exactly i. Undefined entries (the LF
    never votes, or never votes i) are NaN with the matching flag False.
    """
    v = votes.votes
    truth = np.asarray(truth, dtype=np.int64)
    C, K = space.num_classes, tau.num_lfs
    acc = np.full((C, K), np.nan)
    acc_pos = np.full((C, K), np.nan)
    valid = np.zeros((C, K), dtype=bool)
    valid_pos = np.zeros((C, K), dtype=bool)
    cast = v != 0
    for i in range(1, C + 1):
        z_true = np.where(truth == i, 1, -1)
        z_hat = np.where(cast, np.where(v == i, 1, -1), 0)
        for k in range(K):
            m = cast[:, k]
            if m.any():
                acc[i - 1, k] = float(np.mean(z_hat[m, k] == z_true[m]))
                valid[i - 1, k] = True
            mp = v[:, k] == i
            if mp.any():
                acc_pos[i - 1, k] = float(np.mean(truth[mp] == i))
                valid_pos[i - 1, k] = True
    return EmpiricalAccuracy(acc, acc_pos, valid, valid_pos)
