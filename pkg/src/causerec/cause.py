"""Joint treatment/control factorization trainer.

Control events (S_c) fit the control item matrix, treatment events (S_t) fit
the treatment item matrix, and a discrepancy penalty ``lambda_dist *
||theta_t_j - theta_c_j||^2`` ties the two together. In user/both modes the
user matrices are split and coupled the same way.

Optimization is mini-batch SGD with heavy-ball momentum and a linearly
decaying learning rate. Embedding rows take the summed per-sample gradients
of their batch (the batched form of per-sample updates); the two shared
calibration scalars take the batch-mean gradient. Each sample regularizes
only the rows it touches. The discrepancy penalty is applied as an exact proximal step after
the momentum update, which keeps training stable for arbitrarily large
``lambda_dist``; the prox displacement is folded into the velocity, so the
momentum term is always the previous actual step. :func:`sample_gradients`
still returns the plain gradient.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .datamodel import (
    EmbeddingSet,
    Hyperparams,
    Interaction,
    Interactions,
    Mode,
    PROB_EPS,
    Origin,
    bce_loss,
    clamp_prob,
    bce_vec,
    inner_product,
    sigmoid,
    sigmoid_vec,
    squared_loss,
)
from .errors import ConfigError, DataError, DimensionError, DivergenceError, DomainError

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


class CauseVariant(str, enum.Enum):
    PROD_C = "prod-c"
    PROD_T = "prod-t"
    AVG = "avg"

    @property
    def pooled(self) -> bool:
        return self is CauseVariant.AVG

    @property
    def predict_origin(self) -> Origin:
        return Origin.TREATMENT if self is CauseVariant.PROD_T else Origin.CONTROL


# ---------------------------------------------------------------- optimizer

def momentum_step(param, grad, velocity, lr: float, momentum: float):
    """Heavy-ball update: ``v' = momentum * v - lr * grad``, ``param' = param + v'``."""
    param, grad, velocity = np.asarray(param), np.asarray(grad), np.asarray(velocity)
    if not (param.shape == grad.shape == velocity.shape):
        raise DimensionError(f"shape mismatch: param {param.shape}, grad {grad.shape}, velocity {velocity.shape}")
    new_velocity = momentum * velocity - lr * grad
    return param + new_velocity, new_velocity


def lr_at(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    if total_steps < 1:
        raise DomainError("total_steps must be at least 1")
    if not 0 <= step <= total_steps:
        raise DomainError(f"step {step} outside [0, {total_steps}]")
    frac = step / total_steps
    return lr_start * (1.0 - frac) + lr_end * frac  # exact at both endpoints


@dataclass
class TrainState:
    params: dict
    velocities: dict
    rng: np.random.Generator
    step: int = 0

    @classmethod
    def start(cls, params: dict, rng: np.random.Generator) -> "TrainState":
        return cls(params, {k: np.zeros_like(v) for k, v in params.items()}, rng)

    def apply(self, grads: dict, lr: float, momentum: float, frozen=(), lr_scale=None) -> None:
        lr_scale = lr_scale or {}
        for key, g in grads.items():
            if key in frozen:
                continue
            self.params[key], self.velocities[key] = momentum_step(
                self.params[key], g, self.velocities[key], lr * lr_scale.get(key, 1.0), momentum)

    def check_finite(self) -> None:
        for key, value in self.params.items():
            if not np.all(np.isfinite(value)):
                raise DivergenceError(f"non-finite values in {key} at step {self.step}", self.step)
            if value.size and np.max(np.abs(value)) > DIVERGENCE_LIMIT:
                raise DivergenceError(f"{key} exceeded {DIVERGENCE_LIMIT:g} in magnitude at step {self.step}",
                                      self.step)


def calibration_lr_scale(batch_len: int) -> dict:
    """Shared scalars step on the batch-mean gradient; rows on the batch sum."""
    return {"scale": 1.0 / batch_len, "bias": 1.0 / batch_len}


def batch_schedule(n_events: int, batch_size: int, rng: np.random.Generator):
    """One epoch of mini-batch index arrays over a fresh permutation."""
    order = rng.permutation(n_events)
    return [order[k:k + batch_size] for k in range(0, n_events, batch_size)]


def init_uniform(rng: np.random.Generator, rows: int, dim: int, scale: float) -> np.ndarray:
    return rng.uniform(-scale, scale, size=(rows, dim))


# ---------------------------------------------------------------- parameter layout

@dataclass(frozen=True)
class Layout:
    """Maps each sample origin to the parameter tables it reads."""

    user_key: dict
    item_key: dict
    split_users: bool
    split_items: bool
    pooled_treatment: bool = False
    regularize_shared_users: bool = False

    @classmethod
    def for_model(cls, mode: Mode, variant: CauseVariant = CauseVariant.PROD_C) -> "Layout":
        mode = Mode(mode)
        split_u, split_i = mode.splits_users, mode.splits_items
        if variant is CauseVariant.AVG and not split_i:
            raise ConfigError("the avg variant needs separate item matrices (mode prod or both)")
        users = {Origin.CONTROL: "gamma_c", Origin.TREATMENT: "gamma_t"} if split_u else \
            {Origin.CONTROL: "gamma", Origin.TREATMENT: "gamma"}
        items = {Origin.CONTROL: "theta_c", Origin.TREATMENT: "theta_t"} if split_i else \
            {Origin.CONTROL: "theta", Origin.TREATMENT: "theta"}
        return cls(users, items, split_u, split_i, variant is CauseVariant.AVG,
                   regularize_shared_users=mode is Mode.SHARED)

    def item_rows(self, origin: Origin, items: np.ndarray) -> np.ndarray:
        if self.pooled_treatment and origin == Origin.TREATMENT:
            return np.zeros_like(items)
        return items


def init_params(layout: Layout, num_users: int, num_items: int, hyper: Hyperparams,
                rng: np.random.Generator) -> dict:
    """Uniform init in ``[-init_scale, init_scale]``; treatment copies start equal to control."""
    gamma = init_uniform(rng, num_users, hyper.dim, hyper.init_scale)
    theta = init_uniform(rng, num_items, hyper.dim, hyper.init_scale)
    params = {}
    if layout.split_users:
        params["gamma_c"], params["gamma_t"] = gamma, gamma.copy()
    else:
        params["gamma"] = gamma
    if layout.split_items:
        params["theta_c"] = theta
        params["theta_t"] = theta.mean(axis=0, keepdims=True) if layout.pooled_treatment else theta.copy()
    else:
        params["theta"] = theta
    params["scale"] = np.array(1.0)
    params["bias"] = np.array(0.0)
    return params


def params_from_embeddings(model: EmbeddingSet, layout: Layout) -> dict:
    params = {}
    if layout.split_users:
        params["gamma_c"], params["gamma_t"] = model.gamma_c.copy(), model.gamma_t.copy()
    else:
        params["gamma"] = model.gamma_c.copy()
    if layout.split_items:
        params["theta_c"] = model.theta_c.copy()
        params["theta_t"] = model.theta_t[:1].copy() if layout.pooled_treatment else model.theta_t.copy()
    else:
        params["theta"] = model.theta_c.copy()
    params["scale"] = np.array(float(model.calib_scale))
    params["bias"] = np.array(float(model.calib_bias))
    return params


def embeddings_from_params(params: dict, layout: Layout, num_items: int, mode: Mode,
                           variant: str) -> EmbeddingSet:
    if layout.split_users:
        gamma_t, gamma_c = params["gamma_t"].copy(), params["gamma_c"].copy()
    else:
        gamma_t = gamma_c = params["gamma"].copy()
    if layout.split_items:
        theta_c = params["theta_c"].copy()
        theta_t = np.repeat(params["theta_t"], num_items, axis=0) if layout.pooled_treatment \
            else params["theta_t"].copy()
    else:
        theta_t = theta_c = params["theta"].copy()
    return EmbeddingSet(gamma_t, gamma_c, theta_t, theta_c, float(params["scale"]),
                        float(params["bias"]), mode, variant)


# ---------------------------------------------------------------- objective

def batch_objective(params: dict, layout: Layout, batch: Interactions, hyper: Hyperparams,
                    norm: float, *, weights=None, include_dist: bool = True, loss: str = "bce",
                    lambda_user: float = 0.0, with_grads: bool = True):
    """Summed sample losses of ``batch`` divided by ``norm``, and dense gradients.

    ``weights`` scale the per-sample data term only (not the regularizers).
    Returns ``(objective, grads)``; ``grads`` is ``None`` when ``with_grads`` is false.
    """
    scale = float(params["scale"])
    bias = float(params["bias"])
    grads = {k: np.zeros_like(v) for k, v in params.items()} if with_grads else None
    total = 0.0
    g_scale = 0.0
    g_bias = 0.0
    lambdas = {Origin.CONTROL: hyper.lambda_c, Origin.TREATMENT: hyper.lambda_t}
    for origin in (Origin.CONTROL, Origin.TREATMENT):
        mask = batch.origins == origin
        if not mask.any():
            continue
        ukey, ikey = layout.user_key[origin], layout.item_key[origin]
        users = batch.users[mask]
        rows = layout.item_rows(origin, batch.items[mask])
        y = batch.rewards[mask].astype(np.float64)
        g = params[ukey][users]
        t = params[ikey][rows]
        dot = np.einsum("ij,ij->i", g, t)
        p = sigmoid_vec(scale * dot + bias)
        if loss == "bce":
            data = bce_vec(p, y)
            # the clamp flattens the loss outside [eps, 1 - eps]
            dz = np.where((p > PROB_EPS) & (p < 1.0 - PROB_EPS), p - y, 0.0)
        elif loss == "squared":
            data = (p - y) ** 2
            dz = 2.0 * (p - y) * p * (1.0 - p)
        else:
            raise ConfigError(f"unknown loss {loss!r}")
        if weights is not None:
            w = np.asarray(weights, dtype=np.float64)[mask]
            data = data * w
            dz = dz * w
        lam = lambdas[origin]
        lam_u = lam if layout.split_users else (hyper.lambda_c if layout.regularize_shared_users else lambda_user)
        total += data.sum() + lam * np.einsum("ij,ij->", t, t) + lam_u * np.einsum("ij,ij->", g, g)
        if with_grads:
            np.add.at(grads[ikey], rows, (dz * scale)[:, None] * g + 2.0 * lam * t)
            np.add.at(grads[ukey], users, (dz * scale)[:, None] * t + 2.0 * lam_u * g)
            g_scale += float(np.dot(dz, dot))
            g_bias += float(dz.sum())

    lam_d = hyper.lambda_dist
    for kind, split in (("theta", layout.split_items), ("gamma", layout.split_users)):
        if not split:
            continue
        idx = batch.items if kind == "theta" else batch.users
        t_idx = np.zeros_like(idx) if (kind == "theta" and layout.pooled_treatment) else idx
        diff = params[f"{kind}_t"][t_idx] - params[f"{kind}_c"][idx]
        total += lam_d * np.einsum("ij,ij->", diff, diff)
        if with_grads and include_dist and lam_d > 0:
            np.add.at(grads[f"{kind}_t"], t_idx, 2.0 * lam_d * diff)
            np.add.at(grads[f"{kind}_c"], idx, -2.0 * lam_d * diff)

    if with_grads:
        grads["scale"] += g_scale
        grads["bias"] += g_bias
        for v in grads.values():
            v /= norm
    return total / norm, grads


def discrepancy_prox(params: dict, layout: Layout, batch: Interactions, lam_dist: float, lr: float,
                     norm: float, velocities: dict | None = None) -> None:
    """Exact proximal step for the batch's discrepancy penalty, in place.

    For a touched pair the penalty weight is ``omega = lr * lam_dist * n / norm``
    with ``n`` the number of batch samples touching it; the pair mean is kept
    and the difference shrinks by ``1 / (1 + 4 omega)``. A pooled treatment
    vector is coupled to every touched control row and solved jointly.

    With ``velocities`` the prox displacement is added to the momentum
    buffers, so the velocity stays equal to the last actual step.
    """
    if lam_dist <= 0:
        return
    for kind, split in (("theta", layout.split_items), ("gamma", layout.split_users)):
        if not split:
            continue
        idx = batch.items if kind == "theta" else batch.users
        rows, counts = np.unique(idx, return_counts=True)
        omega = (lr * lam_dist / norm) * counts.astype(np.float64)
        c = params[f"{kind}_c"]
        t = params[f"{kind}_t"]
        t_rows = np.zeros(1, dtype=np.int64) if (kind == "theta" and layout.pooled_treatment) else rows
        t_old, c_old = t[t_rows], c[rows]
        if kind == "theta" and layout.pooled_treatment:
            kappa = 2.0 * omega / (1.0 + 2.0 * omega)
            t_new = (t_old[0] + kappa @ c_old) / (1.0 + kappa.sum())
            c[rows] = (c_old + (2.0 * omega)[:, None] * t_new) / (1.0 + 2.0 * omega)[:, None]
            t[0] = t_new
        else:
            mean = 0.5 * (t_old + c_old)
            half = 0.5 * (t_old - c_old) / (1.0 + 4.0 * omega)[:, None]
            t[rows] = mean + half
            c[rows] = mean - half
        if velocities is not None:
            velocities[f"{kind}_t"][t_rows] += t[t_rows] - t_old
            velocities[f"{kind}_c"][rows] += c[rows] - c_old


# ---------------------------------------------------------------- single-sample API

@dataclass
class SparseGradient:
    """Gradient of one sample: touched rows per table plus the calibration scalars."""

    rows: dict = field(default_factory=dict)
    calib_scale: float = 0.0
    calib_bias: float = 0.0

    def get(self, table: str, row: int, dim: int) -> np.ndarray:
        return self.rows.get(table, {}).get(row, np.zeros(dim))


def _as_event(interaction) -> Interactions:
    if isinstance(interaction, Interactions):
        return interaction
    it = Interaction(*interaction)
    return Interactions([it.user_id], [it.item_id], [it.reward], [int(it.origin)])


def _check_indices(model: EmbeddingSet, users, items):
    if np.any(users < 0) or np.any(users >= model.num_users) or np.any(items < 0) or np.any(items >= model.num_items):
        raise IndexError("user or item index out of range")


def sample_loss(model: EmbeddingSet, interaction, hyper: Hyperparams, loss: str = "bce",
                lambda_user: float = 0.0) -> float:
    """Loss of one event under the joint objective, evaluated term by term."""
    it = Interaction(*interaction)
    _check_indices(model, np.array([it.user_id]), np.array([it.item_id]))
    origin = Origin(it.origin)
    lam = hyper.lambda_t if origin == Origin.TREATMENT else hyper.lambda_c
    u = model.user_matrix(origin)[it.user_id]
    v = model.item_matrix(origin)[it.item_id]
    p = sigmoid(model.calib_scale * inner_product(u, v) + model.calib_bias)
    value = bce_loss(p, it.reward) if loss == "bce" else squared_loss(p, it.reward)
    value += lam * inner_product(v, v)
    if model.mode.splits_users:
        value += lam * inner_product(u, u)
    elif model.mode is Mode.SHARED:
        value += hyper.lambda_c * inner_product(u, u)
    else:
        value += lambda_user * inner_product(u, u)
    if model.mode.splits_items:
        d = model.theta_t[it.item_id] - model.theta_c[it.item_id]
        value += hyper.lambda_dist * inner_product(d, d)
    if model.mode.splits_users:
        d = model.gamma_t[it.user_id] - model.gamma_c[it.user_id]
        value += hyper.lambda_dist * inner_product(d, d)
    return value


def _layout_of(model: EmbeddingSet) -> Layout:
    pooled = model.variant == CauseVariant.AVG.value
    variant = CauseVariant.AVG if pooled else CauseVariant.PROD_C
    return Layout.for_model(model.mode, variant)


def sample_gradients(model: EmbeddingSet, interaction, hyper: Hyperparams, loss: str = "bce",
                     lambda_user: float = 0.0) -> SparseGradient:
    """Analytic gradient of :func:`sample_loss` restricted to the rows it touches.

    Tables are named as in the model (``gamma_t``/``theta_c``...), or
    ``gamma``/``theta`` when the pair is shared. For the avg variant the
    pooled treatment vector is reported as row 0 of ``theta_t``.
    """
    batch = _as_event(interaction)
    _check_indices(model, batch.users, batch.items)
    layout = _layout_of(model)
    params = params_from_embeddings(model, layout)
    _, grads = batch_objective(params, layout, batch, hyper, 1.0, loss=loss, lambda_user=lambda_user)
    out = SparseGradient(calib_scale=float(grads["scale"]), calib_bias=float(grads["bias"]))
    i, j = int(batch.users[0]), int(batch.items[0])
    for key, g in grads.items():
        if key in ("scale", "bias"):
            continue
        row = i if key.startswith("gamma") else j
        if key == "theta_t" and layout.pooled_treatment:
            row = 0
        if np.any(g[row] != 0):
            out.rows.setdefault(key, {})[row] = g[row].copy()
    return out


def batch_loss(model: EmbeddingSet, batch: Interactions, hyper: Hyperparams, norm: float | None = None,
               loss: str = "bce", lambda_user: float = 0.0) -> float:
    layout = _layout_of(model)
    params = params_from_embeddings(model, layout)
    norm = float(len(batch)) if norm is None else norm
    value, _ = batch_objective(params, layout, batch, hyper, norm, loss=loss, lambda_user=lambda_user,
                               with_grads=False)
    return value


def batch_gradients(model: EmbeddingSet, batch: Interactions, hyper: Hyperparams, norm: float | None = None,
                    loss: str = "bce", lambda_user: float = 0.0) -> dict:
    """Dense gradient of :func:`batch_loss` keyed by parameter table."""
    layout = _layout_of(model)
    params = params_from_embeddings(model, layout)
    norm = float(len(batch)) if norm is None else norm
    _, grads = batch_objective(params, layout, batch, hyper, norm, loss=loss, lambda_user=lambda_user)
    return grads


# ---------------------------------------------------------------- trainer

class CauseTrainer:
    """Fits the joint objective; ``fit`` returns the trained :class:`EmbeddingSet`.

    Parameters
    ----------
    hyper : Hyperparams
    mode : Mode
        Which side is split into treatment/control copies.
    variant : CauseVariant
        ``AVG`` trains one pooled treatment vector shared by all items.
    learn_calibration : bool
        Freeze the score scale/bias at (1, 0) when false.
    loss : {"bce", "squared"}
    lambda_user : float
        L2 weight on shared (unsplit) user vectors.
    """

    def __init__(self, hyper: Hyperparams, mode: Mode = Mode.PROD_ONLY,
                 variant: CauseVariant = CauseVariant.PROD_C, learn_calibration: bool = True,
                 loss: str = "bce", lambda_user: float = 0.0):
        self.hyper = hyper
        self.mode = Mode(mode)
        if self.mode is Mode.SHARED:
            raise ConfigError("the joint trainer needs a split mode (prod, user or both)")
        self.variant = CauseVariant(variant)
        self.layout = Layout.for_model(self.mode, self.variant)
        self.learn_calibration = learn_calibration
        self.loss = loss
        self.lambda_user = lambda_user
        self.epoch_losses_: list[float] = []
        self.state_: TrainState | None = None

    def fit(self, s_c: Interactions, s_t: Interactions, num_users: int | None = None,
            num_items: int | None = None) -> EmbeddingSet:
        if len(s_c) == 0:
            raise DataError("the control sample S_c is empty")
        events = Interactions.concat([s_c.with_origin(Origin.CONTROL), s_t.with_origin(Origin.TREATMENT)])
        num_users = int(events.users.max()) + 1 if num_users is None else num_users
        num_items = int(events.items.max()) + 1 if num_items is None else num_items
        if events.users.max() >= num_users or events.items.max() >= num_items:
            raise DimensionError("event indices exceed num_users/num_items")

        hyper = self.hyper
        rng = np.random.default_rng(hyper.seed)
        state = TrainState.start(init_params(self.layout, num_users, num_items, hyper, rng), rng)
        self.state_ = state
        frozen = () if self.learn_calibration else ("scale", "bias")
        total_steps = hyper.epochs * math.ceil(len(events) / hyper.batch_size)
        self.epoch_losses_ = []
        for epoch in range(hyper.epochs):
            running = 0.0
            for idx in batch_schedule(len(events), hyper.batch_size, rng):
                batch = events[idx]
                lr = lr_at(state.step, total_steps, hyper.lr_start, hyper.lr_end)
                value, grads = batch_objective(state.params, self.layout, batch, hyper, 1.0,
                                               include_dist=False, loss=self.loss,
                                               lambda_user=self.lambda_user)
                running += value
                state.apply(grads, lr, hyper.momentum, frozen, calibration_lr_scale(len(batch)))
                discrepancy_prox(state.params, self.layout, batch, hyper.lambda_dist, lr, 1.0, state.velocities)
                state.step += 1
                state.check_finite()
            self.epoch_losses_.append(running / len(events))
            logger.debug("epoch %d loss %.6f", epoch, self.epoch_losses_[-1])
        return embeddings_from_params(state.params, self.layout, num_items, self.mode, self.variant.value)


def train_cause(s_c: Interactions, s_t: Interactions, hyper: Hyperparams, mode: Mode = Mode.PROD_ONLY,
                variant: CauseVariant = CauseVariant.PROD_C, num_users: int | None = None,
                num_items: int | None = None, **options) -> EmbeddingSet:
    return CauseTrainer(hyper, mode, variant, **options).fit(s_c, s_t, num_users, num_items)


def score_matrix(model: EmbeddingSet, variant: CauseVariant | str = CauseVariant.PROD_C) -> np.ndarray:
    """Raw calibrated scores ``s * <gamma_i, theta_j> + b`` for every pair."""
    origin = _predict_origin(variant)
    return model.calib_scale * (model.user_matrix(origin) @ model.item_matrix(origin).T) + model.calib_bias


def _predict_origin(variant) -> Origin:
    try:
        return CauseVariant(variant).predict_origin
    except ValueError:
        return Origin.CONTROL


def predict_scores(model: EmbeddingSet, users, items, variant=CauseVariant.PROD_C) -> np.ndarray:
    users, items = np.asarray(users, dtype=np.int64), np.asarray(items, dtype=np.int64)
    _check_indices(model, users, items)
    origin = _predict_origin(variant)
    dot = np.einsum("ij,ij->i", model.user_matrix(origin)[users], model.item_matrix(origin)[items])
    return model.calib_scale * dot + model.calib_bias


def predict_proba(model: EmbeddingSet, users, items, variant=CauseVariant.PROD_C) -> np.ndarray:
    """Probabilities clamped to ``[eps, 1 - eps]`` like the loss, so never exactly 0 or 1."""
    return clamp_prob(sigmoid_vec(predict_scores(model, users, items, variant)))


def predict(model: EmbeddingSet, variant, i: int, j: int) -> float:
    """Probability for one pair: control items for prod-c/avg, treatment items for prod-t."""
    _check_indices(model, np.array([i]), np.array([j]))
    origin = _predict_origin(variant)
    z = model.calib_scale * inner_product(model.user_matrix(origin)[i], model.item_matrix(origin)[j])
    return float(clamp_prob(sigmoid(z + model.calib_bias)))
