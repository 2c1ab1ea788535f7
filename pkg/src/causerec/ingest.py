"""Rating-log parsing, reward binarization, skewed splits and the synthetic simulator."""
from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .datamodel import Interactions, Origin
from .errors import ConfigError, DataError, DomainError, ParseError

DEFAULT_FRACTIONS = (0.7, 0.1, 0.2)
PARTITIONS = ("s_c", "s_t", "validation", "test")


class LogFormat(str, enum.Enum):
    COMMA = "csv"
    DOUBLE_COLON = "dat"

    @classmethod
    def parse(cls, value) -> "LogFormat":
        if isinstance(value, cls):
            return value
        aliases = {"csv": cls.COMMA, "comma": cls.COMMA, ",": cls.COMMA,
                   "dat": cls.DOUBLE_COLON, "double-colon": cls.DOUBLE_COLON, "::": cls.DOUBLE_COLON}
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise ConfigError(f"unknown rating log format {value!r}") from None


@dataclass(frozen=True)
class RatingRecord:
    user_id: str
    item_id: str
    rating: float
    timestamp: int = 0


@dataclass
class SplitDataset:
    s_c: Interactions
    s_t: Interactions
    validation: Interactions
    test: Interactions
    num_users: int
    num_items: int
    id_maps: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def partition(self, name: str) -> Interactions:
        if name not in PARTITIONS:
            raise KeyError(name)
        return getattr(self, name)

    def sizes(self) -> dict:
        return {name: len(self.partition(name)) for name in PARTITIONS}


@dataclass
class SyntheticGroundTruth:
    true_user_factors: np.ndarray
    true_item_factors: np.ndarray
    true_bias: float
    reward_matrix: np.ndarray
    logging_exposure: np.ndarray


def parse_ratings(path, fmt="dat") -> list[RatingRecord]:
    """Read a ``user<sep>item<sep>rating[<sep>timestamp]`` log.

    A first line whose rating field is not numeric is treated as a header.
    Half-star ratings (MovieLens 10M) are accepted.
    """
    fmt = LogFormat.parse(fmt)
    sep = "," if fmt is LogFormat.COMMA else "::"
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(sep)
            if len(parts) not in (3, 4):
                raise ParseError(f"expected 3 or 4 fields separated by {sep!r}, got {len(parts)}", lineno)
            user, item, rating_s = (p.strip() for p in parts[:3])
            try:
                rating = float(rating_s)
            except ValueError:
                if lineno == 1 and not records:
                    continue
                raise ParseError(f"rating {rating_s!r} is not a number", lineno) from None
            if not math.isfinite(rating):
                raise ParseError(f"rating {rating_s!r} is not finite", lineno)
            try:
                ts = int(parts[3]) if len(parts) == 4 else 0
            except ValueError:
                raise ParseError(f"timestamp {parts[3]!r} is not an integer", lineno) from None
            if not user or not item:
                raise ParseError("empty user or item id", lineno)
            records.append(RatingRecord(user, item, rating, ts))
    return records


def binarize(rating) -> int:
    """1 for a five-star rating, 0 for anything else in range."""
    r = float(rating)
    if not 0.5 <= r <= 5:
        raise DomainError(f"rating {rating!r} outside [0.5, 5]")
    return int(r == 5)


def records_to_events(records: Sequence[RatingRecord]):
    """Binarize records into dense-indexed events.

    Repeated (user, item) pairs keep the record with the latest timestamp
    (later lines win ties). Dense ids follow first appearance in the log.

    Returns
    -------
    events : Interactions
    id_maps : dict with ``"user"`` and ``"item"`` external-id -> index maps
    """
    latest: dict = {}
    for pos, rec in enumerate(records):
        key = (rec.user_id, rec.item_id)
        prev = latest.get(key)
        if prev is None or rec.timestamp >= records[prev].timestamp:
            latest[key] = pos
    keep = sorted(latest.values())
    users: dict = {}
    items: dict = {}
    u_idx, i_idx, rewards = [], [], []
    for pos in keep:
        rec = records[pos]
        u_idx.append(users.setdefault(rec.user_id, len(users)))
        i_idx.append(items.setdefault(rec.item_id, len(items)))
        rewards.append(binarize(rec.rating))
    events = Interactions(u_idx, i_idx, rewards)
    return events, {"user": users, "item": items}


def item_popularity(items: np.ndarray, num_items: int, smoothing: float = 1.0) -> np.ndarray:
    return np.bincount(items, minlength=num_items).astype(np.float64) + smoothing


def _check_fractions(fractions):
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    if fractions[0] <= 0 or fractions[2] <= 0:
        raise ConfigError("train and test fractions must be positive")
    return fractions


def _split_uniform_pool(pool: np.ndarray, fractions, s_t_injection, rng):
    """Cut a shuffled uniform-exposure pool into validation / test / injected S_t."""
    _, val_frac, test_frac = fractions
    n_val = int(round(len(pool) * val_frac / (val_frac + test_frac)))
    validation, test = pool[:n_val], pool[n_val:]
    n_inject = int(round(s_t_injection * len(test)))
    moved = rng.permutation(len(test))[:n_inject]
    mask = np.zeros(len(test), dtype=bool)
    mask[moved] = True
    return np.sort(validation), np.sort(test[~mask]), np.sort(test[mask])


def make_skew_split(events: Interactions, fractions=DEFAULT_FRACTIONS, s_t_injection: float = 0.0,
                    seed: int = 0, num_users: int | None = None, num_items: int | None = None,
                    id_maps: dict | None = None) -> SplitDataset:
    """Resample a popularity-biased event log into a SKEW split.

    A uniform-exposure pool holding ``validation + test`` of the events is drawn
    without replacement with probability proportional to ``1 / (count(item) + 1)``.
    The pool is cut into validation and test at the requested ratio; a fraction
    ``s_t_injection`` of the test events is then moved into training as S_t.
    Everything else becomes the biased control sample S_c.
    """
    fractions = _check_fractions(fractions)
    n = len(events)
    if n == 0:
        raise DataError("cannot split an empty event list")
    if not 0.0 <= s_t_injection <= 1.0:
        raise ConfigError(f"s_t_injection must lie in [0, 1], got {s_t_injection}")
    num_users = int(events.users.max()) + 1 if num_users is None else num_users
    num_items = int(events.items.max()) + 1 if num_items is None else num_items
    rng = np.random.default_rng(seed)

    weights = 1.0 / item_popularity(events.items, num_items)[events.items]
    pool_size = int(round(n * (fractions[1] + fractions[2])))
    pool = rng.choice(n, size=pool_size, replace=False, p=weights / weights.sum())
    in_pool = np.zeros(n, dtype=bool)
    in_pool[pool] = True
    validation, test, s_t = _split_uniform_pool(pool, fractions, s_t_injection, rng)
    s_c = np.flatnonzero(~in_pool)

    return SplitDataset(
        s_c=events[s_c].with_origin(Origin.CONTROL),
        s_t=events[s_t].with_origin(Origin.TREATMENT),
        validation=events[validation].with_origin(Origin.TREATMENT),
        test=events[test].with_origin(Origin.TREATMENT),
        num_users=num_users,
        num_items=num_items,
        id_maps=id_maps or {},
        meta={"seed": seed, "fractions": fractions, "s_t_injection": s_t_injection, "protocol": "skew"},
    )


def zipf_probs(num_items: int, exponent: float) -> np.ndarray:
    """Zipf law over item ranks 1..num_items; item 0 is the most popular."""
    w = np.arange(1, num_items + 1, dtype=np.float64) ** -float(exponent)
    return w / w.sum()


def gen_synthetic(num_users: int, num_items: int, latent_dim: int = 8, zipf_exponent: float = 1.0,
                  events_per_user: int = 100, seed: int = 0, true_bias: float = -1.0,
                  factor_scale: float = 1.0, fractions=DEFAULT_FRACTIONS,
                  s_t_injection: float = 0.05):
    """Simulate a biased log plus a uniform-exposure sample with known rewards.

    True factors are Gaussian with per-entry standard deviation
    ``factor_scale / sqrt(latent_dim)``, and ``r_ij = sigmoid(<u_i, v_j> + true_bias)``.
    Each user contributes ``events_per_user`` exposures. The uniform share
    ``validation + test`` of all exposures picks items uniformly; the rest pick
    items from a Zipf logging policy. Rewards are Bernoulli(r_ij) in both cases.
    """
    if min(num_users, num_items, latent_dim, events_per_user) <= 0:
        raise ConfigError("synthetic sizes must be positive")
    if zipf_exponent < 0 or factor_scale < 0:
        raise ConfigError("zipf_exponent and factor_scale must be non-negative")
    fractions = _check_fractions(fractions)
    rng = np.random.default_rng(seed)

    std = factor_scale / math.sqrt(latent_dim)
    user_f = rng.normal(0.0, 1.0, size=(num_users, latent_dim)) * std
    item_f = rng.normal(0.0, 1.0, size=(num_items, latent_dim)) * std
    reward_matrix = expit(user_f @ item_f.T + true_bias)
    exposure = zipf_probs(num_items, zipf_exponent)

    n = num_users * events_per_user
    users = np.repeat(np.arange(num_users), events_per_user)
    pool_size = int(round(n * (fractions[1] + fractions[2])))
    pool = rng.permutation(n)[:pool_size]
    uniform = np.zeros(n, dtype=bool)
    uniform[pool] = True
    items = np.empty(n, dtype=np.int64)
    items[~uniform] = rng.choice(num_items, size=n - pool_size, p=exposure)
    items[uniform] = rng.integers(0, num_items, size=pool_size)
    rewards = (rng.random(n) < reward_matrix[users, items]).astype(np.int64)
    events = Interactions(users, items, rewards)

    validation, test, s_t = _split_uniform_pool(pool, fractions, s_t_injection, rng)
    split = SplitDataset(
        s_c=events[np.flatnonzero(~uniform)].with_origin(Origin.CONTROL),
        s_t=events[s_t].with_origin(Origin.TREATMENT),
        validation=events[validation].with_origin(Origin.TREATMENT),
        test=events[test].with_origin(Origin.TREATMENT),
        num_users=num_users,
        num_items=num_items,
        meta={"seed": seed, "fractions": fractions, "s_t_injection": s_t_injection,
              "protocol": "synthetic", "zipf_exponent": zipf_exponent},
    )
    truth = SyntheticGroundTruth(user_f, item_f, float(true_bias), reward_matrix, exposure)
    return split, truth


def chi_square_to_uniform(items: np.ndarray, num_items: int) -> float:
    """Pearson statistic of an item sample's counts against the uniform marginal."""
    counts = np.bincount(items, minlength=num_items).astype(np.float64)
    expected = counts.sum() / num_items
    return float(((counts - expected) ** 2 / expected).sum())


def write_manifest(path, split: SplitDataset) -> None:
    """Write ``user_idx,item_idx,reward,partition`` lines plus a ``.meta`` sidecar."""
    with open(path, "w", encoding="utf-8") as fh:
        for name in PARTITIONS:
            part = split.partition(name)
            for u, i, y in zip(part.users.tolist(), part.items.tolist(), part.rewards.tolist()):
                fh.write(f"{u},{i},{y},{name}\n")
    meta = {"num_users": split.num_users, "num_items": split.num_items}
    meta.update({f"n_{name}": size for name, size in split.sizes().items()})
    for key, value in split.meta.items():
        if isinstance(value, (tuple, list)):
            value = ",".join(repr(v) for v in value)
        meta[key] = value
    with open(str(path) + ".meta", "w", encoding="utf-8") as fh:
        for key, value in meta.items():
            fh.write(f"{key}={value}\n")


def read_manifest(path) -> SplitDataset:
    meta_path = str(path) + ".meta"
    if not os.path.exists(meta_path):
        raise DataError(f"missing manifest sidecar {meta_path}")
    meta = {}
    with open(meta_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError("expected key=value", lineno)
            key, value = line.split("=", 1)
            meta[key.strip()] = value.strip()
    cols = {name: ([], [], []) for name in PARTITIONS}
    order = {name: [] for name in PARTITIONS}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4 or parts[3] not in cols:
                raise ParseError(f"malformed manifest line {line!r}", lineno)
            try:
                u, i, y = int(parts[0]), int(parts[1]), int(parts[2])
            except ValueError:
                raise ParseError(f"non-integer field in {line!r}", lineno) from None
            for col, v in zip(cols[parts[3]], (u, i, y)):
                col.append(v)
            order[parts[3]].append(lineno - 1)
    try:
        num_users, num_items = int(meta["num_users"]), int(meta["num_items"])
    except (KeyError, ValueError):
        raise DataError("manifest sidecar lacks num_users/num_items") from None
    parts = {}
    for name in PARTITIONS:
        origin = Origin.CONTROL if name == "s_c" else Origin.TREATMENT
        parts[name] = Interactions(*cols[name], int(origin), order[name])
    extra = {k: v for k, v in meta.items() if k not in ("num_users", "num_items") and not k.startswith("n_")}
    return SplitDataset(num_users=num_users, num_items=num_items, meta=extra, **parts)
