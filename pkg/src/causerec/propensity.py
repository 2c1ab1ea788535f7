"""Logging propensities, IPS estimates, treatment effects and policy values."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import EmbeddingSet, Interactions, inner_product, sigmoid
from .errors import DimensionError, DomainError, SingularityError

DEFAULT_ALPHA = 1.0
DEFAULT_CAP = 100.0


@dataclass(frozen=True)
class PropensityModel:
    """User-independent exposure probabilities of the logging policy."""

    probs: np.ndarray
    smoothing_alpha: float
    total_events: int

    def __post_init__(self):
        self.probs.setflags(write=False)

    def __getitem__(self, item):
        return self.probs[item]

    @property
    def num_items(self) -> int:
        return self.probs.shape[0]

    def weights(self, items, cap: float = DEFAULT_CAP) -> np.ndarray:
        """Capped inverse-propensity weights ``min(1 / pi(j), cap)`` for ``items``."""
        p = self.probs[np.asarray(items)]
        if np.any(p <= 0):
            raise DomainError("zero propensity; use smoothing_alpha > 0")
        return np.minimum(1.0 / p, cap)

    def save(self, path) -> None:
        np.savetxt(path, self.probs, fmt="%.17g")

    @classmethod
    def load(cls, path, smoothing_alpha: float = float("nan"), total_events: int = -1) -> "PropensityModel":
        probs = np.atleast_1d(np.loadtxt(path, dtype=np.float64))
        return cls(probs, smoothing_alpha, total_events)


def estimate_propensity(events: Interactions, num_items: int,
                        smoothing_alpha: float = DEFAULT_ALPHA) -> PropensityModel:
    """Laplace-smoothed item marginal ``(count_j + a) / (N + a * num_items)``."""
    if num_items < 1:
        raise DomainError("num_items must be at least 1")
    if smoothing_alpha < 0:
        raise DomainError("smoothing_alpha must be non-negative")
    items = events.items if isinstance(events, Interactions) else np.asarray(events, dtype=np.int64)
    if items.size and items.max() >= num_items:
        raise DimensionError("item index out of range")
    counts = np.bincount(items, minlength=num_items).astype(np.float64)
    denom = items.size + smoothing_alpha * num_items
    if denom == 0:
        raise DomainError("no events and zero smoothing: propensities undefined")
    return PropensityModel((counts + smoothing_alpha) / denom, float(smoothing_alpha), int(items.size))


def ips_reward(y: int, pi_c_j: float, cap: float = DEFAULT_CAP) -> float:
    if pi_c_j <= 0:
        raise DomainError("propensity must be positive")
    if cap <= 0:
        raise DomainError("cap must be positive")
    return min(y / pi_c_j, cap)


def _check_pair(model: EmbeddingSet, i: int, j: int):
    if not (0 <= i < model.num_users and 0 <= j < model.num_items):
        raise IndexError(f"pair ({i}, {j}) outside {model.num_users} x {model.num_items}")


def ite_pair(model: EmbeddingSet, i: int, j: int) -> float:
    """Estimated treatment effect on the raw score scale: ``<theta_t_j - theta_c_j, u_i>``.

    The control user vector is used when users are split.
    """
    _check_pair(model, i, j)
    u = model.gamma_c[i]
    return inner_product(model.theta_t[j], u) - inner_product(model.theta_c[j], u)


def ite_pair_prob(model: EmbeddingSet, i: int, j: int) -> float:
    """Treatment effect on the probability scale, through the calibrated sigmoid."""
    _check_pair(model, i, j)
    s, b = model.calib_scale, model.calib_bias
    t = sigmoid(s * inner_product(model.gamma_t[i], model.theta_t[j]) + b)
    c = sigmoid(s * inner_product(model.gamma_c[i], model.theta_c[j]) + b)
    return t - c


def ips_from_embeddings(model: EmbeddingSet, i: int, j: int) -> float:
    """Exposure ratio implied by the embeddings, ``1 + <u, w_delta_j> / <u, theta_c_j>``."""
    _check_pair(model, i, j)
    u = model.gamma_c[i]
    denom = inner_product(u, model.theta_c[j])
    if denom == 0.0:
        raise SingularityError(f"<u_{i}, theta_c_{j}> is zero")
    return 1.0 + inner_product(u, model.theta_t[j] - model.theta_c[j]) / denom


def ips_ratio(model: EmbeddingSet, i: int, j: int) -> float:
    """Same quantity as :func:`ips_from_embeddings`, as the plain score ratio."""
    _check_pair(model, i, j)
    u = model.gamma_c[i]
    denom = inner_product(u, model.theta_c[j])
    if denom == 0.0:
        raise SingularityError(f"<u_{i}, theta_c_{j}> is zero")
    return inner_product(u, model.theta_t[j]) / denom


@dataclass
class PolicyEvaluation:
    """A policy as a row-stochastic users x items matrix with a user marginal."""

    policy: np.ndarray
    user_marginal: np.ndarray | None = None
    reward_estimate: float | None = None

    def __post_init__(self):
        self.policy = np.asarray(self.policy, dtype=np.float64)
        if self.policy.ndim != 2:
            raise DimensionError("policy must be a users x items matrix")
        if self.user_marginal is None:
            n = self.policy.shape[0]
            self.user_marginal = np.full(n, 1.0 / n)
        else:
            self.user_marginal = np.asarray(self.user_marginal, dtype=np.float64)

    @classmethod
    def deterministic(cls, choices, num_items: int, user_marginal=None) -> "PolicyEvaluation":
        choices = np.asarray(choices, dtype=np.int64)
        policy = np.zeros((choices.shape[0], num_items))
        policy[np.arange(choices.shape[0]), choices] = 1.0
        return cls(policy, user_marginal)

    @classmethod
    def uniform(cls, num_users: int, num_items: int, user_marginal=None) -> "PolicyEvaluation":
        return cls(np.full((num_users, num_items), 1.0 / num_items), user_marginal)


def optimal_policy(score_matrix) -> np.ndarray:
    """Per-user argmax item; ties go to the lowest item index."""
    scores = np.asarray(score_matrix, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] == 0:
        raise DimensionError("score matrix must be 2-d with at least one item")
    if not np.all(np.isfinite(scores)):
        raise DomainError("scores must be finite")
    return np.argmax(scores, axis=1)


def policy_reward(reward_matrix, policy: PolicyEvaluation, tol: float = 1e-9) -> float:
    r = np.asarray(reward_matrix, dtype=np.float64)
    pi = policy.policy
    if r.shape != pi.shape or policy.user_marginal.shape[0] != r.shape[0]:
        raise DimensionError(f"reward matrix {r.shape} and policy {pi.shape} disagree")
    if np.any(pi < 0) or np.any(np.abs(pi.sum(axis=1) - 1.0) > tol):
        raise DomainError("policy rows must be probability distributions")
    value = float(np.sum((r * pi).sum(axis=1) * policy.user_marginal))
    policy.reward_estimate = value
    return value


def policy_ite(reward_matrix, policy: PolicyEvaluation, control: PolicyEvaluation) -> float:
    """Summed treatment effect of ``policy`` over the ``control`` policy."""
    r = np.asarray(reward_matrix, dtype=np.float64)
    policy_reward(r, policy)
    policy_reward(r, control)
    per_pair = r * policy.policy * policy.user_marginal[:, None] - r * control.policy * control.user_marginal[:, None]
    return float(per_pair.sum())
