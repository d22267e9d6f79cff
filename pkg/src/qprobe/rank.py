"""Thurstone case-V comparative probabilities and the fidelity ranking reward.

Functions accept scalars or numpy arrays where that makes sense, so the
simulator can score whole batches of groups at once.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import ArgumentError

DEFAULT_GAMMA = 1e-3
TIE_TOLERANCE = 1e-9
_PREFERENCES = (0.0, 0.5, 1.0)


@dataclass(frozen=True)
class ScoreGroup:
    """The K quality scores one policy emits for a single image."""

    scores: tuple[float, ...]

    def __post_init__(self):
        scores = tuple(float(s) for s in self.scores)
        if len(scores) < 2:
            raise ArgumentError(f"a score group needs K >= 2 samples, got {len(scores)}")
        if not all(math.isfinite(s) for s in scores):
            raise ArgumentError("score group contains non-finite values")
        object.__setattr__(self, "scores", scores)

    @property
    def k(self) -> int:
        return len(self.scores)

    def stats(self) -> tuple[float, float]:
        return group_stats(self)


@dataclass(frozen=True)
class PreferencePair:
    mos_i: float
    mos_j: float
    y: float

    @classmethod
    def from_mos(cls, mos_i: float, mos_j: float) -> PreferencePair:
        return cls(mos_i, mos_j, preference_label(mos_i, mos_j))


def group_stats(group) -> tuple[float, float]:
    """Sample mean and unbiased (K-1) variance of a score group."""
    q = np.asarray(group.scores if isinstance(group, ScoreGroup) else group, dtype=np.float64)
    if q.size < 2:
        raise ArgumentError(f"group_stats needs K >= 2, got {q.size}")
    return float(q.mean()), float(q.var(ddof=1))


def z_score(q_k_i, stats_i, stats_j, gamma: float = DEFAULT_GAMMA):
    """Standardized difference of one sample of image i against image j's group mean."""
    if not gamma > 0:
        raise ArgumentError(f"gamma must be > 0, got {gamma}")
    _, var_i = stats_i
    mean_j, var_j = stats_j
    return (q_k_i - mean_j) / np.sqrt(var_i + var_j + gamma)


def comp_prob(z):
    """Standard normal CDF via the complementary error function."""
    p = 0.5 * special.erfc(-np.asarray(z, dtype=np.float64) / math.sqrt(2.0))
    return float(p) if np.ndim(p) == 0 else p


def _check_preference(y):
    ys = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if not np.all(np.isin(ys, _PREFERENCES)):
        raise ArgumentError(f"preference label must be one of {_PREFERENCES}, got {y}")


def rank_reward(p, y):
    _check_preference(y)
    pa = np.asarray(p, dtype=np.float64)
    if np.any(pa < 0.0) or np.any(pa > 1.0):
        raise ArgumentError("probability must lie in [0, 1]")
    r = y * pa + (1.0 - y) * (1.0 - pa)
    return float(r) if np.ndim(r) == 0 else r


def preference_label(mos_i, mos_j):
    """1 if image i has the higher MOS, 0.5 within the tie tolerance, else 0."""
    diff = np.asarray(mos_i, dtype=np.float64) - np.asarray(mos_j, dtype=np.float64)
    y = np.where(np.abs(diff) <= TIE_TOLERANCE, 0.5, np.where(diff > 0, 1.0, 0.0))
    return float(y) if np.ndim(y) == 0 else y


def pair_rewards(group_i, group_j, y: float, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Per-sample ranking rewards for image i's K scores against image j's group."""
    qi = np.asarray(group_i.scores if isinstance(group_i, ScoreGroup) else group_i, dtype=np.float64)
    qj = np.asarray(group_j.scores if isinstance(group_j, ScoreGroup) else group_j, dtype=np.float64)
    if qi.shape != qj.shape:
        raise ArgumentError(f"group sizes differ: {qi.size} vs {qj.size}")
    z = z_score(qi, group_stats(qi), group_stats(qj), gamma)
    return rank_reward(comp_prob(z), y)


def batch_pair_rewards(q_i: np.ndarray, q_j: np.ndarray, y: np.ndarray, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Vectorised :func:`pair_rewards` over P pairs: ``q_i``, ``q_j`` are (P, K), ``y`` is (P,)."""
    if q_i.shape != q_j.shape or q_i.ndim != 2 or q_i.shape[1] < 2:
        raise ArgumentError(f"expected matching (P, K>=2) score arrays, got {q_i.shape} and {q_j.shape}")
    var_i = q_i.var(axis=1, ddof=1)
    mean_j = q_j.mean(axis=1)
    var_j = q_j.var(axis=1, ddof=1)
    z = z_score(q_i, (None, var_i[:, None]), (mean_j[:, None], var_j[:, None]), gamma)
    return rank_reward(comp_prob(z), np.asarray(y, dtype=np.float64)[:, None])
