"""Shared domain types and the scalar numeric primitives used by the trainers."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Iterator, NamedTuple, Sequence

import numpy as np
from scipy.special import expit

from .errors import DimensionError, DomainError

PROB_EPS = 1e-7


class Origin(enum.IntEnum):
    """Sample an event was logged in: the biased control log or the uniform treatment log."""

    CONTROL = 0
    TREATMENT = 1


class Mode(str, enum.Enum):
    """Which side of the factorization gets separate treatment/control copies.

    ``SHARED`` is used by the single-task baselines: both pairs alias one matrix.
    """

    PROD_ONLY = "prod"
    USER_ONLY = "user"
    BOTH = "both"
    SHARED = "shared"

    @property
    def splits_items(self) -> bool:
        return self in (Mode.PROD_ONLY, Mode.BOTH)

    @property
    def splits_users(self) -> bool:
        return self in (Mode.USER_ONLY, Mode.BOTH)


class Interaction(NamedTuple):
    user_id: int
    item_id: int
    reward: int
    origin: Origin = Origin.CONTROL
    event_id: int = -1


class Interactions:
    """Columnar batch of :class:`Interaction` events.

    Iterating yields ``Interaction`` tuples; the trainers work on the columns.
    ``event_ids`` identify events across partitions so leakage can be audited.
    """

    __slots__ = ("users", "items", "rewards", "origins", "event_ids")

    def __init__(self, users, items, rewards, origins=None, event_ids=None):
        self.users = np.asarray(users, dtype=np.int64).reshape(-1)
        self.items = np.asarray(items, dtype=np.int64).reshape(-1)
        self.rewards = np.asarray(rewards, dtype=np.int64).reshape(-1)
        n = self.users.shape[0]
        if origins is None:
            origins = np.zeros(n, dtype=np.int64)
        elif np.isscalar(origins):
            origins = np.full(n, int(origins), dtype=np.int64)
        self.origins = np.asarray(origins, dtype=np.int64).reshape(-1)
        if event_ids is None:
            event_ids = np.arange(n, dtype=np.int64)
        self.event_ids = np.asarray(event_ids, dtype=np.int64).reshape(-1)
        for name in ("items", "rewards", "origins", "event_ids"):
            if getattr(self, name).shape[0] != n:
                raise DimensionError(f"column {name!r} has length {getattr(self, name).shape[0]}, expected {n}")
        if n and (self.users.min() < 0 or self.items.min() < 0):
            raise DomainError("user and item ids must be non-negative")
        if not np.all((self.rewards == 0) | (self.rewards == 1)):
            raise DomainError("rewards must be binary")
        if not np.all((self.origins == 0) | (self.origins == 1)):
            raise DomainError("origin must be 0 (control) or 1 (treatment)")

    @classmethod
    def from_list(cls, events: Sequence[Interaction]) -> "Interactions":
        if not events:
            return cls.empty()
        cols = list(zip(*events))
        if len(cols) < 5:
            return cls(*cols)
        ids = np.asarray(cols[4])
        return cls(cols[0], cols[1], cols[2], cols[3], ids if np.all(ids >= 0) else None)

    @classmethod
    def empty(cls) -> "Interactions":
        return cls(np.empty(0), np.empty(0), np.empty(0))

    @classmethod
    def concat(cls, parts: Sequence["Interactions"]) -> "Interactions":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(
            np.concatenate([p.users for p in parts]),
            np.concatenate([p.items for p in parts]),
            np.concatenate([p.rewards for p in parts]),
            np.concatenate([p.origins for p in parts]),
            np.concatenate([p.event_ids for p in parts]),
        )

    def with_origin(self, origin: Origin) -> "Interactions":
        return Interactions(self.users, self.items, self.rewards, int(origin), self.event_ids)

    def __len__(self) -> int:
        return int(self.users.shape[0])

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return Interaction(int(self.users[idx]), int(self.items[idx]), int(self.rewards[idx]),
                               Origin(int(self.origins[idx])), int(self.event_ids[idx]))
        return Interactions(self.users[idx], self.items[idx], self.rewards[idx],
                            self.origins[idx], self.event_ids[idx])

    def __iter__(self) -> Iterator[Interaction]:
        for k in range(len(self)):
            yield self[k]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Interactions):
            return NotImplemented
        return all(np.array_equal(getattr(self, c), getattr(other, c)) for c in self.__slots__)

    def __repr__(self) -> str:
        return f"Interactions(n={len(self)}, positives={int(self.rewards.sum())})"


@dataclass
class Hyperparams:
    dim: int = 16
    lambda_t: float = 1e-4
    lambda_c: float = 1e-4
    lambda_dist: float = 1e-2
    lr_start: float = 0.1
    lr_end: float = 0.001
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 512
    seed: int = 0
    init_scale: float | None = None

    def __post_init__(self):
        if self.dim <= 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise DomainError("dim, epochs and batch_size must be positive")
        if min(self.lambda_t, self.lambda_c, self.lambda_dist) < 0:
            raise DomainError("regularization weights must be non-negative")
        if not (0 < self.lr_end <= self.lr_start):
            raise DomainError("learning rates must satisfy 0 < lr_end <= lr_start")
        if not 0 <= self.momentum < 1:
            raise DomainError("momentum must lie in [0, 1)")
        if self.init_scale is None:
            self.init_scale = 0.1 / math.sqrt(self.dim)
        if self.init_scale <= 0:
            raise DomainError("init_scale must be positive")

    def replace(self, **changes) -> "Hyperparams":
        # an init_scale derived from the old dim is re-derived for the new one
        if "dim" in changes and "init_scale" not in changes and self.init_scale == 0.1 / math.sqrt(self.dim):
            changes["init_scale"] = None
        return replace(self, **changes)


@dataclass
class EmbeddingSet:
    """Learned user/item matrices for both tasks plus the score calibration.

    Pairs that are not split by ``mode`` alias the same array, so
    ``gamma_t is gamma_c`` holds in ``PROD_ONLY`` mode. The item shift
    ``theta_t - theta_c`` is derived on demand, never stored.
    """

    gamma_t: np.ndarray
    gamma_c: np.ndarray
    theta_t: np.ndarray
    theta_c: np.ndarray
    calib_scale: float = 1.0
    calib_bias: float = 0.0
    mode: Mode = Mode.PROD_ONLY
    variant: str = "prod-c"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.gamma_t.shape != self.gamma_c.shape or self.theta_t.shape != self.theta_c.shape:
            raise DimensionError("treatment and control matrices must have equal shapes")
        if self.gamma_t.ndim != 2 or self.theta_t.ndim != 2 or self.gamma_t.shape[1] != self.theta_t.shape[1]:
            raise DimensionError("user and item matrices must be 2-d with a common embedding width")
        for name in ("gamma_t", "gamma_c", "theta_t", "theta_c"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DomainError(f"{name} contains non-finite entries")
        if not (math.isfinite(self.calib_scale) and math.isfinite(self.calib_bias)):
            raise DomainError("calibration scalars must be finite")

    @property
    def num_users(self) -> int:
        return self.gamma_c.shape[0]

    @property
    def num_items(self) -> int:
        return self.theta_c.shape[0]

    @property
    def dim(self) -> int:
        return self.theta_c.shape[1]

    def w_delta(self) -> np.ndarray:
        return self.theta_t - self.theta_c

    def user_matrix(self, origin: Origin) -> np.ndarray:
        return self.gamma_t if origin == Origin.TREATMENT else self.gamma_c

    def item_matrix(self, origin: Origin) -> np.ndarray:
        return self.theta_t if origin == Origin.TREATMENT else self.theta_c

    def identical_to(self, other: "EmbeddingSet") -> bool:
        """Bit-level equality of every parameter and label."""
        return (
            self.mode == other.mode
            and self.variant == other.variant
            and all(np.array_equal(getattr(self, n), getattr(other, n))
                    for n in ("gamma_t", "gamma_c", "theta_t", "theta_c"))
            and _same_float(self.calib_scale, other.calib_scale)
            and _same_float(self.calib_bias, other.calib_bias)
        )


def _same_float(a: float, b: float) -> bool:
    return np.float64(a).tobytes() == np.float64(b).tobytes()


def inner_product(a: Sequence[float], b: Sequence[float]) -> float:
    """Left-to-right accumulated dot product (fixed order, reproducible)."""
    if len(a) != len(b):
        raise DimensionError(f"length mismatch: {len(a)} vs {len(b)}")
    total = 0.0
    for x, y in zip(a, b):
        total += float(x) * float(y)
    return total


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def clamp_prob(p, eps: float = PROB_EPS):
    return np.clip(p, eps, 1.0 - eps)


def bce_loss(p_hat: float, y: int, eps: float = PROB_EPS) -> float:
    p = min(max(float(p_hat), eps), 1.0 - eps)
    return -(y * math.log(p) + (1 - y) * math.log(1.0 - p))


def squared_loss(p_hat: float, y: int) -> float:
    return (float(p_hat) - y) ** 2


def bce_vec(p_hat: np.ndarray, y: np.ndarray, eps: float = PROB_EPS) -> np.ndarray:
    p = clamp_prob(np.asarray(p_hat, dtype=np.float64), eps)
    return -(y * np.log(p) + (1 - y) * np.log1p(-p))


sigmoid_vec = expit
