"""Group-relative policy optimisation on small log-linear policies.

Scalar functions mirror the per-sample terms of the clipped objective; the
``*_terms`` helpers vectorise them and also return the derivative of the
objective with respect to each sample's new log-probability, which is all a
log-linear policy needs to form an exact parameter gradient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import log_softmax

from .errors import ArgumentError

DEFAULT_EPSILON = 0.2
DEFAULT_BETA_KL = 0.01
DEFAULT_K = 6
ADV_EPS = 1e-8


@dataclass(frozen=True)
class Rollout:
    actions: tuple[int, ...]
    logprob_new: float
    logprob_old: float
    logprob_ref: float
    reward: float

    def __post_init__(self):
        for name in ("logprob_new", "logprob_old", "logprob_ref"):
            if getattr(self, name) > 0:
                raise ArgumentError(f"{name} must be <= 0, got {getattr(self, name)}")


def group_advantages(rewards) -> np.ndarray:
    """(r - mean) / (population std + 1e-8); equal rewards give all zeros."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ArgumentError(f"group_advantages needs a group of size >= 2, got {r.shape}")
    return (r - r.mean()) / (r.std() + ADV_EPS)


def batch_advantages(rewards: np.ndarray) -> np.ndarray:
    """Row-wise :func:`group_advantages` for a (G, K) reward array."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 2 or r.shape[1] < 2:
        raise ArgumentError(f"expected (groups, K>=2) rewards, got {r.shape}")
    mean = r.mean(axis=1, keepdims=True)
    return (r - mean) / (r.std(axis=1, keepdims=True) + ADV_EPS)


def clipped_surrogate(logp_new: float, logp_old: float, advantage: float, epsilon: float = DEFAULT_EPSILON) -> float:
    if not epsilon > 0:
        raise ArgumentError(f"epsilon must be > 0, got {epsilon}")
    ratio = math.exp(logp_new - logp_old)
    clipped = min(max(ratio, 1.0 - epsilon), 1.0 + epsilon)
    return min(ratio * advantage, clipped * advantage)


def kl_penalty(logp_new: float, logp_ref: float) -> float:
    """Non-negative k3 estimator of KL(new || ref) from one sample."""
    d = logp_ref - logp_new
    return math.expm1(d) - d


def grpo_terms(logp_new, logp_old, logp_ref, advantages, epsilon=DEFAULT_EPSILON, beta_kl=DEFAULT_BETA_KL):
    """Objective value and d(objective)/d(logp_new) per sample, averaged over all samples."""
    if not epsilon > 0:
        raise ArgumentError(f"epsilon must be > 0, got {epsilon}")
    if beta_kl < 0:
        raise ArgumentError(f"beta_kl must be >= 0, got {beta_kl}")
    new = np.asarray(logp_new, dtype=np.float64)
    adv = np.asarray(advantages, dtype=np.float64)
    ratio = np.exp(new - np.asarray(logp_old, dtype=np.float64))
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - epsilon, 1.0 + epsilon) * adv
    surrogate = np.minimum(unclipped, clipped)
    d = np.asarray(logp_ref, dtype=np.float64) - new
    kl = np.expm1(d) - d
    n = new.size
    value = float(np.mean(surrogate - beta_kl * kl))
    # the clipped branch is flat in logp_new; it is the active one only when strictly smaller
    d_surr = np.where(unclipped <= clipped, unclipped, 0.0)
    d_kl = -np.expm1(d)
    coef = (d_surr - beta_kl * d_kl) / n
    return value, coef


def grpo_objective(group: Sequence[Rollout], epsilon: float = DEFAULT_EPSILON, beta_kl: float = DEFAULT_BETA_KL) -> float:
    """Mean clipped surrogate minus the KL penalty over one rollout group."""
    if len(group) < 2:
        raise ArgumentError(f"a rollout group needs at least 2 samples, got {len(group)}")
    adv = group_advantages([r.reward for r in group])
    value, _ = grpo_terms([r.logprob_new for r in group], [r.logprob_old for r in group],
                          [r.logprob_ref for r in group], adv, epsilon, beta_kl)
    return value


# -- policies ----------------------------------------------------------------

class _SoftmaxPolicy:
    weights: np.ndarray

    def get_params(self) -> np.ndarray:
        return self.weights.ravel().copy()

    def set_params(self, flat) -> None:
        self.weights = np.asarray(flat, dtype=np.float64).reshape(self.weights.shape).copy()

    @property
    def n_params(self) -> int:
        return self.weights.size

    def log_probs(self, obs) -> np.ndarray:
        return log_softmax(self.logits(obs), axis=-1)

    def probs(self, obs) -> np.ndarray:
        return np.exp(self.log_probs(obs))

    def logp(self, obs, actions) -> np.ndarray:
        lp = self.log_probs(obs)
        return np.take_along_axis(lp, np.asarray(actions)[:, None], axis=1)[:, 0]

    def sample(self, obs, rng) -> np.ndarray:
        p = self.probs(obs)
        u = rng.random((p.shape[0], 1))
        idx = (np.cumsum(p, axis=1) < u).sum(axis=1)
        return np.minimum(idx, p.shape[1] - 1)

    def greedy(self, obs) -> np.ndarray:
        return np.argmax(self.logits(obs), axis=1)


class ToyPolicy(_SoftmaxPolicy):
    """Log-linear softmax: logits = W @ x, with W of shape (actions, features)."""

    def __init__(self, weights):
        self.weights = np.array(weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ArgumentError(f"ToyPolicy weights must be a matrix, got shape {self.weights.shape}")

    @classmethod
    def zeros(cls, n_actions: int, n_features: int) -> ToyPolicy:
        return cls(np.zeros((n_actions, n_features)))

    @property
    def n_actions(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> ToyPolicy:
        return ToyPolicy(self.weights)

    def logits(self, obs) -> np.ndarray:
        x = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        return x @ self.weights.T

    def grad_logp(self, obs, actions, coef) -> np.ndarray:
        """sum_n coef_n * d logp(a_n | x_n) / dW."""
        x = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        g = -self.probs(x)
        g[np.arange(len(x)), np.asarray(actions)] += 1.0
        return (g * np.asarray(coef, dtype=np.float64)[:, None]).T @ x


class ActionFeaturePolicy(_SoftmaxPolicy):
    """Conditional logit with weights tied across actions: logits_a = phi(x, a) . w.

    Observations are per-action feature tensors of shape (N, actions, features),
    which lets a few parameters score a variable grid of crop cells.
    """

    def __init__(self, weights):
        self.weights = np.array(weights, dtype=np.float64)
        if self.weights.ndim != 1:
            raise ArgumentError(f"ActionFeaturePolicy weights must be a vector, got shape {self.weights.shape}")

    @classmethod
    def zeros(cls, n_features: int) -> ActionFeaturePolicy:
        return cls(np.zeros(n_features))

    def copy(self) -> ActionFeaturePolicy:
        return ActionFeaturePolicy(self.weights)

    def logits(self, obs) -> np.ndarray:
        phi = np.asarray(obs, dtype=np.float64)
        if phi.ndim == 2:
            phi = phi[None]
        return phi @ self.weights

    def grad_logp(self, obs, actions, coef) -> np.ndarray:
        phi = np.asarray(obs, dtype=np.float64)
        if phi.ndim == 2:
            phi = phi[None]
        p = np.exp(log_softmax(phi @ self.weights, axis=-1))
        chosen = phi[np.arange(len(phi)), np.asarray(actions)]
        expected = np.einsum("na,naf->nf", p, phi)
        return np.asarray(coef, dtype=np.float64) @ (chosen - expected)


def bc_loss(policy, observations, target_actions) -> float:
    """Summed cross-entropy of the target actions under the policy."""
    return bc_loss_and_grad(policy, observations, target_actions)[0]


def bc_loss_and_grad(policy, observations, target_actions):
    actions = np.asarray(target_actions)
    obs = np.asarray(observations, dtype=np.float64)
    if len(obs) != len(actions):
        raise ArgumentError(f"{len(obs)} observations but {len(actions)} target actions")
    if len(actions) == 0:
        return 0.0, np.zeros_like(policy.weights)
    lp = policy.log_probs(obs)
    if actions.min() < 0 or actions.max() >= lp.shape[1]:
        raise ArgumentError("target action outside the policy's action set")
    loss = -float(lp[np.arange(len(actions)), actions].sum())
    grad = policy.grad_logp(obs, actions, -np.ones(len(actions)))
    return loss, grad


def grad_check(policy, objective: Callable, h: float = 1e-5) -> float:
    """Max relative error between ``objective``'s analytic gradient and central differences.

    ``objective(policy)`` must return ``(value, grad)`` with ``grad`` matching
    ``policy.get_params()`` in size. The policy's parameters are restored
    afterwards.
    """
    if not h > 0:
        raise ArgumentError(f"h must be > 0, got {h}")
    theta = policy.get_params()
    if theta.size == 0:
        return 0.0
    try:
        _, grad = objective(policy)
        grad = np.asarray(grad, dtype=np.float64).ravel()
        worst = 0.0
        for i in range(theta.size):
            t = theta.copy()
            t[i] += h
            policy.set_params(t)
            f_plus = objective(policy)[0]
            t[i] -= 2 * h
            policy.set_params(t)
            f_minus = objective(policy)[0]
            numeric = (f_plus - f_minus) / (2 * h)
            denom = max(abs(grad[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(grad[i] - numeric) / denom)
    finally:
        policy.set_params(theta)
    return worst


class Adam:
    """Plain Adam ascent/descent on a flat parameter vector."""

    def __init__(self, n: int, lr: float = 0.05, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray, maximize: bool = False) -> np.ndarray:
        g = -grad if maximize else grad
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)
