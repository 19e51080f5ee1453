"""Unsupervised per-class LF accuracy estimation from noisy votes.

The multi-class problem is reduced to C one-vs-all tasks with a ternary
recode (+1 vote for the class, 0 abstain, -1 vote elsewhere). Under
conditional independence of the LFs given the truth, the product of two
LFs' correlations with the truth equals their observable pairwise moment,
so each correlation magnitude can be solved from any triplet of LFs; the
magnitudes are averaged over triplets, signs are recovered from moment
sign consistency, and the agreement rate follows in closed form from the
signed moment and the abstain rate.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .core import LabelSpace, NoisyLabelMatrix, SpecializedSets, ValidationError


@dataclass(frozen=True)
class AccuracyEstimates:
    """Per (class i, LF k) moment magnitudes, signs, abstain rates, and
    agreement rates; all arrays are C x K. ``valid[i-1, k]`` marks pairs the
    regularizer may use. ``moments[i-1]`` keeps the K x K pairwise moment
    matrix of task i for inspection."""

    magnitude: np.ndarray
    sign: np.ndarray
    abstain_rate: np.ndarray
    accuracy: np.ndarray
    valid: np.ndarray
    moments: np.ndarray | None = None

    def __post_init__(self):
        for name in ("magnitude", "sign", "abstain_rate", "accuracy"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            object.__setattr__(self, name, a)
        object.__setattr__(self, "valid", np.asarray(self.valid, dtype=bool))
        if self.accuracy.shape != self.valid.shape:
            raise ValidationError("accuracy and valid must have matching shapes")


def one_vs_all(votes: np.ndarray, i: int) -> np.ndarray:
    """Recode votes for the i-vs-rest task: +1 if vote == i, 0 if abstain, -1 else."""
    votes = np.asarray(votes)
    out = np.full(votes.shape, -1, dtype=np.int64)
    out[votes == 0] = 0
    out[votes == i] = 1
    return out


def pairwise_moments(z_hat: np.ndarray) -> np.ndarray:
    """K x K empirical second moments of the ternary recode columns."""
    z = np.asarray(z_hat, dtype=np.float64)
    if z.shape[0] < 1:
        raise ValidationError("need at least one sample")
    return (z.T @ z) / z.shape[0]


def triplet_solve(
    m_jk: float, m_jl: float, m_kl: float, floor: float = 0.05
) -> tuple[np.ndarray, np.ndarray]:
    """Correlation magnitudes of three LFs from their pairwise moments.

    Each output uses the moment between the *other two* LFs as denominator
    and is marked invalid when that denominator magnitude is below the
    floor. Valid outputs are clamped to [0, 1].
    """
    denoms = np.array([m_kl, m_jl, m_jk], dtype=np.float64)
    numers = np.array([m_jk * m_jl, m_jk * m_kl, m_jl * m_kl], dtype=np.float64)
    valid = np.abs(denoms) >= floor
    vals = np.full(3, np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.sqrt(np.abs(numers / denoms))
    vals[valid] = np.clip(raw[valid], 0.0, 1.0)
    return vals, valid


def aggregate_triplets(moments: np.ndarray, k: int, floor: float = 0.05) -> tuple[float, bool]:
    """Mean correlation magnitude for LF k across all triplets it belongs to.

    Returns (magnitude, ok); ok is False when no triplet had a usable
    denominator. Requires at least 3 LFs.
    """
    K = moments.shape[0]
    if K < 3:
        raise ValidationError("triplet estimation needs at least 3 LFs")
    others = [j for j in range(K) if j != k]
    vals = []
    for j, l in combinations(others, 2):
        if abs(moments[j, l]) < floor:
            continue
        v = np.sqrt(abs(moments[k, j] * moments[k, l] / moments[j, l]))
        vals.append(min(max(v, 0.0), 1.0))
    if not vals:
        return float("nan"), False
    return float(np.mean(vals)), True


def resolve_signs(magnitudes: np.ndarray, moments: np.ndarray) -> tuple[np.ndarray, bool]:
    """Recover the signs of the per-LF truth correlations.

    Picks signs s in {-1, +1}^K maximizing sum_{j<k} s_j s_k m_jk (agreement
    with the observed moment signs, weighted by magnitude), oriented so the
    majority of LFs are better than random. Exact search up to K = 20,
    greedy single-flip refinement beyond. Returns (signs, ambiguous); an
    all-(near-)zero moment matrix is ambiguous and defaults to all +1.
    """
    K = moments.shape[0]
    m = np.array(moments, dtype=np.float64)
    np.fill_diagonal(m, 0.0)
    if np.max(np.abs(m)) < 1e-12:
        return np.ones(K, dtype=np.int64), True

    if K <= 20:
        bits = (np.arange(2**K)[:, None] >> np.arange(K)[None, :]) & 1
        signs_grid = (1 - 2 * bits).astype(np.float64)
        scores = np.einsum("ij,jk,ik->i", signs_grid, m, signs_grid)
        s = signs_grid[int(np.argmax(scores))].astype(np.int64)
    else:
        s = np.ones(K, dtype=np.int64)
        improved = True
        while improved:
            improved = False
            for k in range(K):
                delta = -2.0 * s[k] * float(np.dot(m[k], s))
                if delta > 1e-15:
                    s[k] = -s[k]
                    improved = True

    # global flip symmetry: orient toward mostly-better-than-random LFs
    total = int(s.sum())
    if total < 0:
        s = -s
    elif total == 0:
        mags = np.nan_to_num(np.asarray(magnitudes, dtype=np.float64))
        weighted = float(np.dot(s, mags))
        if weighted < 0 or (weighted == 0 and s[0] < 0):
            s = -s
    return s, False


def accuracy_from_moment(e_signed: float, abstain_rate: float) -> float:
    """Agreement rate P(recode = truth | recode != 0) from the signed moment.

    The moment decomposes as 2 P(agree) + P(abstain) - 1; conditioning on a
    cast vote is exact because an abstention never agrees with a +-1 truth.
    """
    if not 0.0 <= abstain_rate < 1.0:
        raise ValidationError(f"abstain rate must be in [0, 1), got {abstain_rate}")
    p_agree = (e_signed + 1.0 - abstain_rate) / 2.0
    return float(np.clip(p_agree / (1.0 - abstain_rate), 0.0, 1.0))


def estimate_accuracies(
    votes: NoisyLabelMatrix,
    tau: SpecializedSets,
    space: LabelSpace,
    floor: float = 0.05,
) -> AccuracyEstimates:
    """Full estimation pipeline over every one-vs-all task.

    Always-abstaining columns are excluded; a task needs at least 3 usable
    LFs, otherwise all its entries are flagged invalid. Estimates are
    reported for (i, k) pairs with i in tau[k]; other LFs still serve as
    triplet partners.
    """
    v = votes.votes
    C, K = space.num_classes, tau.num_lfs
    usable = np.flatnonzero((v != 0).any(axis=0))
    abstain = (v == 0).mean(axis=0)

    magnitude = np.full((C, K), np.nan)
    sign = np.ones((C, K))
    accuracy = np.full((C, K), np.nan)
    valid = np.zeros((C, K), dtype=bool)
    abstain_rate = np.tile(abstain, (C, 1))
    all_moments = np.zeros((C, K, K))

    member = tau.member_mask()
    for i in range(1, C + 1):
        z = one_vs_all(v, i)
        m_full = pairwise_moments(z)
        all_moments[i - 1] = m_full
        if len(usable) < 3:
            continue
        m = m_full[np.ix_(usable, usable)]
        mags = np.full(len(usable), np.nan)
        ok = np.zeros(len(usable), dtype=bool)
        for pos in range(len(usable)):
            mags[pos], ok[pos] = aggregate_triplets(m, pos, floor)
        signs, _ = resolve_signs(mags, m)
        for pos, k in enumerate(usable):
            magnitude[i - 1, k] = mags[pos]
            sign[i - 1, k] = signs[pos]
            if not ok[pos] or not member[k, i - 1] or abstain[k] >= 1.0:
                continue
            accuracy[i - 1, k] = accuracy_from_moment(signs[pos] * mags[pos], abstain[k])
            valid[i - 1, k] = True
    return AccuracyEstimates(
        magnitude=magnitude,
        sign=sign,
        abstain_rate=abstain_rate,
        accuracy=accuracy,
        valid=valid,
        moments=all_moments,
    )
