"""Factor-graph label model over abstaining, specialized labeling functions.

The joint over a target class y and K votes factorizes into per-LF
potentials with a four-case structure: agreement inside the LF's
specialized set is rewarded (1 + e), disagreement inside the set is
penalized (1 / (1 + e)), a vote cast while the target lies outside the
set contributes a free cross-talk weight (e), and abstention is neutral
(1). Parameters are a K x C matrix of log-weights; e = exp(theta[k, y]).

Training minimizes labeled cross-entropy plus negative marginal
log-likelihood of the observed votes, optionally regularized toward
externally estimated per-class LF accuracies via a binary cross-entropy
on the model's implied conditional accuracies. All gradients here are
analytic and are validated against central finite differences in the
test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    LabelSpace,
    NoisyLabelMatrix,
    NumericalError,
    ProbLabels,
    SpecializedSets,
    ValidationError,
)
from .estimate import AccuracyEstimates

REG_MODES = ("off", "estimated", "oracle")


@dataclass(frozen=True)
class LabelModelParams:
    """K x C log-weight matrix; exp of each entry must stay finite."""

    theta: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.theta, dtype=np.float64)
        if t.ndim != 2:
            raise ValidationError(f"theta must be K x C, got shape {t.shape}")
        if not np.all(np.isfinite(t)):
            raise ValidationError("theta entries must be finite")
        t = t.copy()
        t.setflags(write=False)
        object.__setattr__(self, "theta", t)


@dataclass
class LmTrainConfig:
    learning_rate: float = 1.0
    max_iters: int = 500
    tol: float = 1e-8
    reg_weight: float = 1.0
    reg_mode: str = "off"
    init_scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.reg_weight < 0:
            raise ValidationError("reg_weight must be nonnegative")
        if self.reg_mode not in REG_MODES:
            raise ValidationError(f"reg_mode must be one of {REG_MODES}")


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def _log_sigmoid(x):
    # log sigma(x) = -softplus(-x)
    return -np.logaddexp(0.0, -x)


def _logsumexp(a, axis=None):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis) if axis is not None else out.reshape(())


def potential(theta: np.ndarray, y: int, vote: int, k: int, tau: SpecializedSets) -> float:
    """Four-case potential coupling target class y with LF k's vote."""
    t = tau.tau[k]
    if vote != 0 and vote not in t:
        raise ValidationError(f"vote {vote} is illegal for LF {k} (tau={t})")
    if vote == 0:
        return 1.0
    e = float(np.exp(theta[k, y - 1]))
    if y in t:
        return 1.0 + e if vote == y else 1.0 / (1.0 + e)
    return e


def phi_sum(theta: np.ndarray, y: int, k: int, subset, tau: SpecializedSets) -> float:
    """Sum of potentials of LF k over a subset of its legal votes; empty -> 0."""
    return float(sum(potential(theta, y, v, k, tau) for v in subset))


def log_potential_table(theta: np.ndarray, tau: SpecializedSets) -> np.ndarray:
    """K x (C+1) x C table of log potentials, indexed [k, vote, y-1].

    Entries for votes outside {0} U tau[k] are NaN; callers must validate
    votes first.
    """
    K, C = theta.shape
    tab = np.full((K, C + 1, C), np.nan)
    tab[:, 0, :] = 0.0
    member = tau.member_mask()  # K x C
    log1pe = np.logaddexp(0.0, theta)  # log(1 + e)
    for k in range(K):
        in_set = member[k]
        for v in np.flatnonzero(in_set) + 1:
            row = np.where(in_set, -log1pe[k], theta[k])
            row = row.copy()
            row[v - 1] = log1pe[k, v - 1]
            tab[k, v, :] = row
    return tab


def log_zeta(theta: np.ndarray, tau: SpecializedSets) -> np.ndarray:
    """K x C log of the per-(LF, class) vote-sum factor sum_v phi(y, v).

    For y in tau[k] the factor is 2 + e + (|tau_k| - 1) / (1 + e); otherwise
    1 + |tau_k| * e. Computed in log space.
    """
    K, C = theta.shape
    member = tau.member_mask()
    sizes = np.array([len(t) for t in tau.tau], dtype=np.float64)[:, None]  # K x 1
    log1pe = np.logaddexp(0.0, theta)
    with np.errstate(divide="ignore"):
        log_m = np.log(sizes)  # -inf at size 0
        log_m1 = np.log(np.maximum(sizes - 1.0, 0.0))
    # in-set: logsumexp of [log 2, theta, log(m-1) - log(1+e)]
    stack = np.stack(
        [np.full_like(theta, np.log(2.0)), theta, np.broadcast_to(log_m1, theta.shape) - log1pe],
        axis=0,
    )
    in_val = _logsumexp(stack, axis=0)
    out_val = np.logaddexp(0.0, np.broadcast_to(log_m, theta.shape) + theta)
    return np.where(member, in_val, out_val)


def _dlog_zeta(theta: np.ndarray, tau: SpecializedSets, lz: np.ndarray) -> np.ndarray:
    """Elementwise d log zeta / d theta, stable for large |theta|."""
    member = tau.member_mask()
    sizes = np.array([len(t) for t in tau.tau], dtype=np.float64)[:, None]
    with np.errstate(divide="ignore"):
        log_m = np.log(np.maximum(sizes, 1e-300))
    # in-set: (e - (m-1) sigma(t) sigma(-t)) / zeta, as a difference of stable exps
    term1 = np.exp(theta - lz)
    term2 = np.maximum(sizes - 1.0, 0.0) * np.exp(_log_sigmoid(theta) + _log_sigmoid(-theta) - lz)
    in_val = term1 - term2
    out_val = np.where(sizes > 0, _sigmoid(theta + log_m), 0.0)
    return np.where(member, in_val, out_val)


def normalizer(theta: np.ndarray, tau: SpecializedSets, space: LabelSpace) -> tuple[float, float]:
    """Partition function of the joint, via the factored per-(LF, class) sums.

    Returns (Z, log Z); all internal arithmetic is in log space.
    """
    if theta.shape[0] == 0:
        return float(space.num_classes), float(np.log(space.num_classes))
    lz = log_zeta(theta, tau)
    if not np.all(np.isfinite(lz)):
        raise NumericalError("non-finite factor in normalizer")
    log_z = float(_logsumexp(lz.sum(axis=0)))
    return float(np.exp(log_z)), log_z


def posterior_logits(theta: np.ndarray, tau: SpecializedSets, votes: np.ndarray) -> np.ndarray:
    """N x C matrix of unnormalized log posteriors sum_k log phi(y, vote)."""
    tab = log_potential_table(theta, tau)
    K = theta.shape[0]
    logits = np.zeros((votes.shape[0], theta.shape[1]))
    for k in range(K):
        logits += tab[k, votes[:, k], :]
    if np.isnan(logits).any():
        raise ValidationError("illegal vote encountered in posterior computation")
    return logits


def posterior(theta: np.ndarray, tau: SpecializedSets, vote_row) -> np.ndarray:
    """Posterior distribution over classes 1..C for a single vote row."""
    row = np.asarray(vote_row, dtype=np.int64).reshape(1, -1)
    logits = posterior_logits(theta, tau, row)[0]
    logits = logits - _logsumexp(logits)
    return np.exp(logits)


def marginal_loglik(theta: np.ndarray, tau: SpecializedSets, votes_u: np.ndarray) -> float:
    """Log marginal likelihood of observed vote rows (caller negates for a loss)."""
    if votes_u.shape[0] == 0:
        return 0.0
    space = LabelSpace(theta.shape[1])
    _, log_z = normalizer(theta, tau, space)
    logits = posterior_logits(theta, tau, votes_u)
    return float(_logsumexp(logits, axis=1).sum() - votes_u.shape[0] * log_z)


def labeled_ce(theta: np.ndarray, tau: SpecializedSets, votes_l: np.ndarray, y_l: np.ndarray) -> float:
    """Cross-entropy of true labels against class-normalized posteriors."""
    if votes_l.shape[0] == 0:
        return 0.0
    logits = posterior_logits(theta, tau, votes_l)
    log_post = logits - _logsumexp(logits, axis=1)[:, None]
    return float(-log_post[np.arange(len(y_l)), np.asarray(y_l) - 1].sum())


def _pair_factors(theta, tau, i, k):
    """Per-class own-LF factors and cross-LF products for conditional accuracies.

    Returns (e, b, G, logG) where e and b are the exp / inverse-1+exp rows of
    LF k, and G is the product over other LFs of their vote-sum factors,
    rescaled by its max for overflow safety (ratios are scale invariant).
    """
    K, C = theta.shape
    e = np.exp(theta[k])
    b = 1.0 / (1.0 + e)
    lz = log_zeta(theta, tau)
    logG = lz.sum(axis=0) - lz[k]
    shift = logG.max() if K > 1 else 0.0
    G = np.exp(logG - shift)
    return e, b, G, lz


def conditional_accuracy(theta: np.ndarray, tau: SpecializedSets, i: int, k: int) -> float:
    """Model probability that LF k's one-vs-all recode for class i agrees
    with the truth, conditioned on the LF voting."""
    t = tau.tau[k]
    if i not in t:
        raise ValidationError(f"class {i} not in tau[{k}]; conditional accuracy undefined")
    C = theta.shape[1]
    m = len(t)
    e, b, G, _ = _pair_factors(theta, tau, i, k)
    in_set = np.zeros(C, dtype=bool)
    in_set[np.array(t) - 1] = True
    idx = i - 1
    # numerator per-class factor: phi(i,i) at y=i; Phi(y, tau_k - {i}) otherwise
    n = np.where(in_set, (1.0 + e) + (m - 2) * b, (m - 1) * e)
    n[idx] = 1.0 + e[idx]
    # denominator factor: Phi(y, tau_k)
    d = np.where(in_set, (1.0 + e) + (m - 1) * b, m * e)
    num = float(np.dot(n, G))
    den = float(np.dot(d, G))
    if not (np.isfinite(num) and np.isfinite(den)) or den <= 0:
        raise NumericalError("non-finite conditional accuracy")
    return num / den


def conditional_accuracy_positive(theta: np.ndarray, tau: SpecializedSets, i: int, k: int) -> float:
    """Model probability the truth is class i given LF k voted exactly i."""
    t = tau.tau[k]
    if i not in t:
        raise ValidationError(f"class {i} not in tau[{k}]; conditional accuracy undefined")
    C = theta.shape[1]
    e, b, G, _ = _pair_factors(theta, tau, i, k)
    in_set = np.zeros(C, dtype=bool)
    in_set[np.array(t) - 1] = True
    idx = i - 1
    # phi(y, vote=i) per target class y
    p = np.where(in_set, b, e)
    p[idx] = 1.0 + e[idx]
    num = float(p[idx] * G[idx])
    den = float(np.dot(p, G))
    if not (np.isfinite(num) and np.isfinite(den)) or den <= 0:
        raise NumericalError("non-finite conditional accuracy")
    return num / den


def _reg_pairs(tau: SpecializedSets, acc: AccuracyEstimates):
    """(i, k) pairs the regularizer covers: i in tau[k] and a valid estimate."""
    pairs = []
    for k, t in enumerate(tau.tau):
        for i in t:
            if acc.valid[i - 1, k]:
                pairs.append((i, k))
    return pairs


def regularizer(theta: np.ndarray, tau: SpecializedSets, acc: AccuracyEstimates, mode: str) -> float:
    """Binary cross-entropy pulling model conditional accuracies toward estimates.

    Mode "estimated" compares against P(agree | vote cast); mode "oracle"
    against the class-wise P(agree | vote = i). Model probabilities are
    clamped to [1e-12, 1 - 1e-12] before the logs.
    """
    if mode == "off":
        return 0.0
    if mode not in REG_MODES:
        raise ValidationError(f"unknown regularizer mode {mode!r}")
    fn = conditional_accuracy if mode == "estimated" else conditional_accuracy_positive
    total = 0.0
    for i, k in _reg_pairs(tau, acc):
        a = float(acc.accuracy[i - 1, k])
        p = np.clip(fn(theta, tau, i, k), 1e-12, 1.0 - 1e-12)
        total -= a * np.log(p) + (1.0 - a) * np.log(1.0 - p)
    return float(total)


# ---------------------------------------------------------------------------
# analytic gradients


def _dlog_phi_table(theta: np.ndarray, tau: SpecializedSets) -> np.ndarray:
    """K x (C+1) x C table of d log phi / d theta[k, y], indexed [k, vote, y-1]."""
    K, C = theta.shape
    sig = _sigmoid(theta)
    member = tau.member_mask()
    tab = np.zeros((K, C + 1, C))
    for k in range(K):
        in_set = member[k]
        for v in np.flatnonzero(in_set) + 1:
            row = np.where(in_set, -sig[k], 1.0)
            row[v - 1] = sig[k, v - 1]
            tab[k, v, :] = row
    return tab


def _vote_class_sums(votes: np.ndarray, weights: np.ndarray, C: int) -> np.ndarray:
    """K x (C+1) x C sums of per-row weight rows grouped by each LF's vote."""
    N, K = votes.shape
    out = np.zeros((K, C + 1, C))
    for k in range(K):
        np.add.at(out[k], votes[:, k], weights)
    return out


def _likelihood_value_grad(theta, tau, votes_l, y_l, votes_u):
    """Value and gradient of labeled CE plus negative marginal log-likelihood."""
    K, C = theta.shape
    space = LabelSpace(C)
    dphi = _dlog_phi_table(theta, tau)
    value = 0.0
    grad = np.zeros_like(theta)

    if votes_u.shape[0] > 0:
        lz = log_zeta(theta, tau)
        log_z = float(_logsumexp(lz.sum(axis=0)))
        logits = posterior_logits(theta, tau, votes_u)
        row_lse = _logsumexp(logits, axis=1)
        value -= float(row_lse.sum() - votes_u.shape[0] * log_z)
        post = np.exp(logits - row_lse[:, None])
        S = _vote_class_sums(votes_u, post, C)
        grad -= np.einsum("kvc,kvc->kc", S, dphi)
        q = np.exp(lz.sum(axis=0) - log_z)  # model marginal over classes
        grad += votes_u.shape[0] * q[None, :] * _dlog_zeta(theta, tau, lz)

    if votes_l.shape[0] > 0:
        logits = posterior_logits(theta, tau, votes_l)
        row_lse = _logsumexp(logits, axis=1)
        log_post = logits - row_lse[:, None]
        yi = np.asarray(y_l) - 1
        value -= float(log_post[np.arange(len(yi)), yi].sum())
        resid = np.exp(log_post)
        resid[np.arange(len(yi)), yi] -= 1.0
        S = _vote_class_sums(votes_l, resid, C)
        grad += np.einsum("kvc,kvc->kc", S, dphi)

    return value, grad


def _cond_acc_value_grad(theta, tau, i, k, positive):
    """Conditional accuracy P and dP/dtheta for one (class, LF) pair."""
    K, C = theta.shape
    t = tau.tau[k]
    m = len(t)
    e = np.exp(theta[k])
    b = 1.0 / (1.0 + e)
    sig = e * b
    lz = log_zeta(theta, tau)
    logG = lz.sum(axis=0) - lz[k]
    G = np.exp(logG - (logG.max() if K > 1 else 0.0))
    in_set = np.zeros(C, dtype=bool)
    in_set[np.array(t) - 1] = True
    idx = i - 1

    if positive:
        n = np.zeros(C)
        n[idx] = 1.0 + e[idx]
        dn = np.zeros(C)
        dn[idx] = e[idx]
        d = np.where(in_set, b, e)
        d[idx] = 1.0 + e[idx]
        dd = np.where(in_set, -sig * b, e)
        dd[idx] = e[idx]
    else:
        n = np.where(in_set, (1.0 + e) + (m - 2) * b, (m - 1) * e)
        n[idx] = 1.0 + e[idx]
        dn = np.where(in_set, e - (m - 2) * sig * b, (m - 1) * e)
        dn[idx] = e[idx]
        d = np.where(in_set, (1.0 + e) + (m - 1) * b, m * e)
        dd = np.where(in_set, e - (m - 1) * sig * b, m * e)

    num = float(np.dot(n, G))
    den = float(np.dot(d, G))
    p = num / den
    grad = np.zeros_like(theta)
    # own-LF row: only the per-class factors depend on theta[k, :]
    grad[k] = p * (dn * G / num - dd * G / den)
    # other LFs enter through G via their zeta factors
    if K > 1:
        dlz = _dlog_zeta(theta, tau, lz)
        w = (n * G / num - d * G / den) * p
        for kp in range(K):
            if kp != k:
                grad[kp] = w * dlz[kp]
    return p, grad


def _reg_value_grad(theta, tau, acc, mode):
    positive = mode == "oracle"
    value = 0.0
    grad = np.zeros_like(theta)
    for i, k in _reg_pairs(tau, acc):
        a = float(acc.accuracy[i - 1, k])
        p, dp = _cond_acc_value_grad(theta, tau, i, k, positive)
        pc = np.clip(p, 1e-12, 1.0 - 1e-12)
        value -= a * np.log(pc) + (1.0 - a) * np.log(1.0 - pc)
        grad += (pc - a) / (pc * (1.0 - pc)) * dp
    return value, grad


def objective_and_grad(
    theta: np.ndarray,
    tau: SpecializedSets,
    votes_l: np.ndarray,
    y_l: np.ndarray,
    votes_u: np.ndarray,
    acc: AccuracyEstimates | None,
    reg_weight: float,
    reg_mode: str,
):
    """Full training objective (labeled CE - marginal loglik + weighted
    regularizer) and its analytic gradient."""
    value, grad = _likelihood_value_grad(theta, tau, votes_l, y_l, votes_u)
    if reg_mode != "off" and reg_weight > 0:
        if acc is None:
            raise ValidationError("regularizer mode requires accuracy estimates")
        rv, rg = _reg_value_grad(theta, tau, acc, reg_mode)
        value += reg_weight * rv
        grad += reg_weight * rg
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite objective or gradient")
    return value, grad


def train_label_model(
    votes_l: np.ndarray,
    y_l: np.ndarray,
    votes_u: np.ndarray,
    tau: SpecializedSets,
    acc: AccuracyEstimates | None = None,
    config: LmTrainConfig | None = None,
) -> tuple[LabelModelParams, dict]:
    """Fit theta by full-batch gradient descent with backtracking line search.

    votes_l may be empty when the regularizer is on. Returns the fitted
    parameters and a small history dict (objective per accepted step).
    """
    config = config or LmTrainConfig()
    C = tau.num_classes
    K = tau.num_lfs
    votes_l = np.asarray(votes_l, dtype=np.int64).reshape(-1, K)
    votes_u = np.asarray(votes_u, dtype=np.int64).reshape(-1, K)
    y_l = np.asarray(y_l, dtype=np.int64)
    if votes_l.shape[0] == 0 and config.reg_mode == "off" and votes_u.shape[0] == 0:
        raise ValidationError("nothing to train on")

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(config.seed)))
    theta = config.init_scale * rng.standard_normal((K, C))

    value, grad = objective_and_grad(
        theta, tau, votes_l, y_l, votes_u, acc, config.reg_weight, config.reg_mode
    )
    history = [value]
    for _ in range(config.max_iters):
        step = config.learning_rate
        gnorm2 = float(np.sum(grad * grad))
        if gnorm2 < 1e-18:
            break
        accepted = False
        while step > 1e-14:
            cand = theta - step * grad
            cand_value, cand_grad = objective_and_grad(
                cand, tau, votes_l, y_l, votes_u, acc, config.reg_weight, config.reg_mode
            )
            if cand_value <= value - 1e-4 * step * gnorm2:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        improved = value - cand_value
        theta, value, grad = cand, cand_value, cand_grad
        history.append(value)
        if improved < config.tol * max(1.0, abs(value)):
            break
    return LabelModelParams(theta), {"objective": history}


def infer(theta: np.ndarray, tau: SpecializedSets, votes: NoisyLabelMatrix) -> ProbLabels:
    """Per-row posteriors; all-abstain rows are uncovered and set uniform."""
    v = votes.votes
    C = theta.shape[1]
    logits = posterior_logits(theta, tau, v)
    log_post = logits - _logsumexp(logits, axis=1)[:, None]
    pi = np.exp(log_post)
    pi /= pi.sum(axis=1, keepdims=True)
    covered = (v != 0).any(axis=1)
    pi[~covered] = 1.0 / C
    return ProbLabels(pi=pi, covered=covered)


def majority_vote(
    votes: NoisyLabelMatrix, space: LabelSpace, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Most frequent non-abstain vote per row; ties broken uniformly at random.

    Returns (labels, covered); uncovered (all-abstain) rows get label 0.
    """
    v = votes.votes
    N = v.shape[0]
    C = space.num_classes
    counts = np.zeros((N, C + 1), dtype=np.int64)
    for k in range(v.shape[1]):
        np.add.at(counts, (np.arange(N), v[:, k]), 1)
    counts = counts[:, 1:]  # drop abstentions
    covered = counts.sum(axis=1) > 0
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    labels = np.zeros(N, dtype=np.int64)
    best = counts.max(axis=1)
    for n in range(N):
        if not covered[n]:
            continue
        winners = np.flatnonzero(counts[n] == best[n]) + 1
        labels[n] = winners[0] if len(winners) == 1 else rng.choice(winners)
    return labels, covered
