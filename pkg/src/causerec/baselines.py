"""Single-task factorization baselines: SP2V, propensity-weighted SP2V and BPR."""
from __future__ import annotations

import enum
import logging
import math

import numpy as np

from .cause import (
    Layout,
    TrainState,
    batch_objective,
    batch_schedule,
    calibration_lr_scale,
    embeddings_from_params,
    init_params,
    lr_at,
)
from .datamodel import EmbeddingSet, Hyperparams, Interactions, Mode, sigmoid_vec
from .errors import DataError, DimensionError
from .ingest import SplitDataset
from .propensity import DEFAULT_CAP, PropensityModel

logger = logging.getLogger(__name__)

SHARED = Layout.for_model(Mode.SHARED)


class AdaptationMode(str, enum.Enum):
    """Which samples a baseline sees: S_c only, S_c and S_t, or S_t only."""

    NO = "no"
    BLEND = "blend"
    TEST = "test"


def assemble_training_set(split: SplitDataset, mode) -> Interactions:
    mode = AdaptationMode(mode)
    if mode is AdaptationMode.NO:
        return split.s_c
    if mode is AdaptationMode.BLEND:
        return Interactions.concat([split.s_c, split.s_t])
    if len(split.s_t) == 0:
        raise DataError("test adaptation needs a non-empty S_t")
    return split.s_t


def _single_task_hyper(hyper: Hyperparams) -> Hyperparams:
    # one regularizer for every table, taken from lambda_c
    return hyper.replace(lambda_t=hyper.lambda_c, lambda_dist=0.0)


def _sizes(events: Interactions, num_users, num_items):
    if len(events) == 0:
        raise DataError("no training events")
    num_users = int(events.users.max()) + 1 if num_users is None else num_users
    num_items = int(events.items.max()) + 1 if num_items is None else num_items
    if events.users.max() >= num_users or events.items.max() >= num_items:
        raise DimensionError("event indices exceed num_users/num_items")
    return num_users, num_items


def normalize_batch_weights(w: np.ndarray) -> np.ndarray:
    """Rescale a batch's weights to mean one; a constant batch maps to exact ones."""
    if np.all(w == w[0]):
        return np.ones_like(w)
    return w / w.mean()


def sp2v_objective(model: EmbeddingSet, events: Interactions, hyper: Hyperparams, weights=None,
                   norm: float | None = None):
    """Weighted cross-entropy objective and dense gradients of a shared-matrix model."""
    params = {"gamma": model.gamma_c.copy(), "theta": model.theta_c.copy(),
              "scale": np.array(float(model.calib_scale)), "bias": np.array(float(model.calib_bias))}
    norm = float(len(events)) if norm is None else norm
    return batch_objective(params, SHARED, events, _single_task_hyper(hyper), norm, weights=weights)


def train_sp2v(events: Interactions, hyper: Hyperparams, weights=None, num_users: int | None = None,
               num_items: int | None = None, normalize_weights: bool = False, variant: str = "sp2v",
               history: list | None = None) -> EmbeddingSet:
    """Logistic matrix factorization ``sigmoid(s * <u_i, p_j> + b)`` with optional event weights."""
    num_users, num_items = _sizes(events, num_users, num_items)
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (len(events),):
            raise DimensionError("weights must have one entry per event")
        if np.any(weights <= 0):
            raise DataError("weights must be positive")
    hyper_1 = _single_task_hyper(hyper)
    rng = np.random.default_rng(hyper.seed)
    state = TrainState.start(init_params(SHARED, num_users, num_items, hyper, rng), rng)
    total_steps = hyper.epochs * math.ceil(len(events) / hyper.batch_size)
    for _ in range(hyper.epochs):
        running = 0.0
        for idx in batch_schedule(len(events), hyper.batch_size, rng):
            w = None
            if weights is not None:
                w = weights[idx]
                if normalize_weights:
                    w = normalize_batch_weights(w)
            lr = lr_at(state.step, total_steps, hyper.lr_start, hyper.lr_end)
            value, grads = batch_objective(state.params, SHARED, events[idx], hyper_1, 1.0, weights=w)
            running += value
            state.apply(grads, lr, hyper.momentum, lr_scale=calibration_lr_scale(len(idx)))
            state.step += 1
            state.check_finite()
        if history is not None:
            history.append(running / len(events))
    return embeddings_from_params(state.params, SHARED, num_items, Mode.SHARED, variant)


def train_wsp2v(events: Interactions, hyper: Hyperparams, propensities: PropensityModel,
                cap: float = DEFAULT_CAP, normalize: bool = False, num_users: int | None = None,
                num_items: int | None = None) -> EmbeddingSet:
    """SP2V on inverse-propensity weighted events, ``w = min(1 / pi(j), cap)``."""
    num_users, num_items = _sizes(events, num_users, num_items)
    if propensities.num_items < num_items:
        raise DimensionError("propensities do not cover every item")
    weights = propensities.weights(events.items, cap)
    return train_sp2v(events, hyper, weights, num_users, num_items, normalize_weights=normalize,
                      variant="wsp2v")


# ---------------------------------------------------------------- BPR

def bpr_pair_loss(u, p_pos, p_neg, lam: float = 0.0) -> float:
    """``-ln sigmoid(<u, p+> - <u, p->)`` plus L2 on the three vectors."""
    u, p_pos, p_neg = (np.asarray(v, dtype=np.float64) for v in (u, p_pos, p_neg))
    x = float(u @ p_pos - u @ p_neg)
    return float(np.logaddexp(0.0, -x)) + lam * float(u @ u + p_pos @ p_pos + p_neg @ p_neg)


def bpr_pair_gradients(u, p_pos, p_neg, lam: float = 0.0):
    u, p_pos, p_neg = (np.asarray(v, dtype=np.float64) for v in (u, p_pos, p_neg))
    c = float(sigmoid_vec(u @ p_pos - u @ p_neg)) - 1.0
    return (c * (p_pos - p_neg) + 2 * lam * u,
            c * u + 2 * lam * p_pos,
            -c * u + 2 * lam * p_neg)


def _bpr_batch(params, users, pos, neg, lam, norm):
    g = params["gamma"]
    t = params["theta"]
    u, a, b = g[users], t[pos], t[neg]
    x = np.einsum("ij,ij->i", u, a - b)
    value = np.logaddexp(0.0, -x).sum() + lam * (np.einsum("ij,ij->", u, u) + np.einsum("ij,ij->", a, a)
                                                  + np.einsum("ij,ij->", b, b))
    c = (sigmoid_vec(x) - 1.0)[:, None]
    grads = {"gamma": np.zeros_like(g), "theta": np.zeros_like(t)}
    np.add.at(grads["gamma"], users, c * (a - b) + 2 * lam * u)
    np.add.at(grads["theta"], pos, c * u + 2 * lam * a)
    np.add.at(grads["theta"], neg, -c * u + 2 * lam * b)
    for v in grads.values():
        v /= norm
    return value / norm, grads


def _sample_negatives(users, positive_sets, num_items, k, rng):
    """Uniform negatives (with replacement) outside each user's positive set."""
    out = rng.integers(0, num_items, size=(users.shape[0], k))
    for row in range(users.shape[0]):
        pos = positive_sets[users[row]]
        for col in range(k):
            while out[row, col] in pos:
                out[row, col] = rng.integers(0, num_items)
    return out


def train_bpr(events: Interactions, hyper: Hyperparams, negatives_per_positive: int = 1,
              num_users: int | None = None, num_items: int | None = None) -> EmbeddingSet:
    """Pairwise ranking factorization on the positive events."""
    num_users, num_items = _sizes(events, num_users, num_items)
    if negatives_per_positive < 1:
        raise DataError("negatives_per_positive must be at least 1")
    positives = events[events.rewards == 1]
    if len(positives) == 0:
        raise DataError("BPR needs at least one positive event")
    positive_sets: dict = {}
    for u, i in zip(positives.users.tolist(), positives.items.tolist()):
        positive_sets.setdefault(u, set()).add(i)
    saturated = {u for u, s in positive_sets.items() if len(s) >= num_items}
    if saturated:
        logger.warning("skipping %d users whose positives cover every item", len(saturated))
        positives = positives[~np.isin(positives.users, list(saturated))]
        if len(positives) == 0:
            raise DataError("no BPR training pairs left after skipping saturated users")

    lam = hyper.lambda_c
    rng = np.random.default_rng(hyper.seed)
    params = init_params(SHARED, num_users, num_items, hyper, rng)
    del params["scale"], params["bias"]
    state = TrainState.start(params, rng)
    n = len(positives) * negatives_per_positive
    users = np.repeat(positives.users, negatives_per_positive)
    pos = np.repeat(positives.items, negatives_per_positive)
    total_steps = hyper.epochs * math.ceil(n / hyper.batch_size)
    for _ in range(hyper.epochs):
        neg = _sample_negatives(positives.users, positive_sets, num_items, negatives_per_positive, rng).reshape(-1)
        for idx in batch_schedule(n, hyper.batch_size, rng):
            lr = lr_at(state.step, total_steps, hyper.lr_start, hyper.lr_end)
            _, grads = _bpr_batch(state.params, users[idx], pos[idx], neg[idx], lam, 1.0)
            state.apply(grads, lr, hyper.momentum)
            state.step += 1
            state.check_finite()
    params = dict(state.params, scale=np.array(1.0), bias=np.array(0.0))
    return embeddings_from_params(params, SHARED, num_items, Mode.SHARED, "bpr")
