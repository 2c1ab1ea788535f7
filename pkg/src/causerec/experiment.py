"""Experiment configs, end-to-end runs, multi-seed sweeps and the injection sweep.

A config is a ``key=value`` text file, one key per line, ``#`` starts a
comment. Every key has a default (see ``FIELDS``). Hyperparameters resolve in
three layers: :class:`Hyperparams` defaults, then the method's preset when
``preset=benchmark``, then keys set explicitly in the file or on the command
line.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .baselines import AdaptationMode, assemble_training_set, train_bpr, train_sp2v, train_wsp2v
from .cause import CauseVariant, predict_proba, predict_scores, train_cause
from .datamodel import EmbeddingSet, Hyperparams, Interactions, Mode
from .errors import CauseError, ConfigError, DataError
from .ingest import (
    SplitDataset,
    gen_synthetic,
    make_skew_split,
    parse_ratings,
    read_manifest,
    records_to_events,
)
from .metrics import CSV_HEADER, MetricReport, evaluate
from .persistence import save_model
from .propensity import estimate_propensity

logger = logging.getLogger(__name__)

CAUSE_METHODS = {"cause-prodc": CauseVariant.PROD_C, "cause-prodt": CauseVariant.PROD_T,
                 "cause-avg": CauseVariant.AVG}
BASELINE_METHODS = ("sp2v", "wsp2v", "bpr")
_DISPLAY = {"cause-prodc": "CausE-ProdC", "cause-prodt": "CausE-ProdT", "cause-avg": "CausE-Avg",
            "sp2v": "SP2V", "wsp2v": "WSP2V", "bpr": "BPR"}

# Tuned on validation NLL of the synthetic benchmark, seeds 100-105.
BENCHMARK_PRESETS = {
    "cause": dict(dim=8, lambda_c=0.03, lambda_t=0.03, lambda_dist=0.1, lr_start=0.03, lr_end=0.0003,
                  epochs=10, batch_size=512, lambda_user=0.03),
    "baseline": dict(dim=8, lambda_c=0.03, lambda_t=0.03, lr_start=0.03, lr_end=0.0003, epochs=10,
                     batch_size=512),
    # tuned on validation AUC
    "bpr": dict(dim=8, lambda_c=0.001, lambda_t=0.001, lr_start=0.03, lr_end=0.0003, epochs=30,
                batch_size=512),
}

# The benchmark preset also self-normalizes WSP2V weights: raw inverse
# propensities average about num_items, which multiplies the step size.

INJECTION_HEADER = ("fraction", "method", "mse_lift_mean", "mse_lift_std", "n_seeds")


# ---------------------------------------------------------------- value parsers

def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _opt_float(text: str):
    t = text.strip().lower()
    return None if t in ("", "none", "auto") else float(t)


def _fractions(text: str) -> tuple:
    parts = tuple(float(v) for v in text.split(","))
    if len(parts) != 3:
        raise ValueError("need three comma-separated fractions")
    return parts


def parse_int_list(text: str) -> tuple:
    """``"0-9"``, ``"1,4,7"`` or a mix such as ``"0-2,10"``."""
    out = []
    for chunk in str(text).split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        if "-" in chunk:
            lo, hi = (int(v) for v in chunk.split("-", 1))
            if hi < lo:
                raise ValueError(f"empty range {chunk!r}")
            out.extend(range(lo, hi + 1))
        else:
            out.append(int(chunk))
    if not out:
        raise ValueError("empty list")
    return tuple(out)


def parse_float_list(text: str) -> tuple:
    out = tuple(float(v) for v in str(text).split(",") if v.strip())
    if not out:
        raise ValueError("empty list")
    return out


def parse_method(text: str):
    """``"CausE-ProdC"`` -> ("cause-prodc", None); ``"SP2V-Blend"`` -> ("sp2v", BLEND)."""
    key = text.strip().lower()
    if key in CAUSE_METHODS:
        return key, None
    base, _, suffix = key.partition("-")
    if base in BASELINE_METHODS:
        if not suffix:
            return base, None
        try:
            return base, AdaptationMode(suffix)
        except ValueError:
            pass
    raise ConfigError(f"unsupported method {text!r}; choose from "
                      + ", ".join(_DISPLAY.values()) + " (baselines take -No/-Blend/-Test)")


def _method(text: str) -> str:
    parse_method(text)
    return text.strip()


def _methods(text: str) -> tuple:
    return tuple(_method(m) for m in text.split(",") if m.strip())


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise ValueError("seeds must be unsigned 64-bit integers")
    return v


# key -> (parser, default, help)
FIELDS = {
    "dataset": (str, "synthetic", "'synthetic', a rating log, or a split manifest"),
    "format": (str, "auto", "csv, dat or manifest; auto picks manifest when a .meta sidecar exists, else by extension"),
    "num_users": (int, 200, "synthetic users"),
    "num_items": (int, 100, "synthetic items"),
    "latent_dim": (int, 8, "synthetic true factor dimension"),
    "zipf_exponent": (float, 1.0, "logging-policy popularity exponent"),
    "events_per_user": (int, 100, "synthetic exposures per user"),
    "factor_scale": (float, 2.0, "synthetic factor scale (std = factor_scale / sqrt(latent_dim))"),
    "true_bias": (float, -1.0, "synthetic logit offset"),
    "split_fractions": (_fractions, (0.7, 0.1, 0.2), "train,validation,test fractions"),
    "s_t_injection": (float, 0.05, "share of the test pool moved into training as S_t"),
    "seed": (_seed, 0, "run seed"),
    "seeds": (parse_int_list, (0,), "seed list for sweeps, e.g. 0-9"),
    "method": (_method, "CausE-ProdC", "CausE-ProdC, CausE-ProdT, CausE-Avg, SP2V, WSP2V or BPR"),
    "methods": (_methods, (), "comma-separated methods for sweeps (default: method)"),
    "adaptation": (AdaptationMode, AdaptationMode.BLEND, "baseline training set: no, blend or test"),
    "mode": (Mode, Mode.PROD_ONLY, "CausE split side: prod, user or both"),
    "preset": (str, "none", "none or benchmark"),
    "dim": (int, None, "embedding dimension"),
    "lambda_t": (float, None, "treatment L2"),
    "lambda_c": (float, None, "control L2 (baselines use it for every table)"),
    "lambda_dist": (float, None, "treatment/control discrepancy weight"),
    "lambda_user": (float, None, "L2 on shared user vectors in prod mode"),
    "lr_start": (float, None, "initial learning rate"),
    "lr_end": (float, None, "final learning rate"),
    "momentum": (float, None, "heavy-ball momentum"),
    "epochs": (int, None, "passes over the training set"),
    "batch_size": (int, None, "mini-batch size"),
    "init_scale": (_opt_float, None, "uniform init half-width (default 0.1/sqrt(dim))"),
    "learn_calibration": (_bool, True, "learn score scale and bias"),
    "loss": (str, "bce", "bce or squared"),
    "smoothing_alpha": (float, 1.0, "Laplace smoothing of propensities"),
    "ips_cap": (float, 100.0, "cap on inverse-propensity weights"),
    "normalize_weights": (_bool, False, "self-normalize WSP2V weights per batch"),
    "negatives_per_positive": (int, 1, "BPR negatives per positive"),
    "output_dir": (str, "runs", "directory for results and models"),
    "results": (str, "results.csv", "results CSV, relative to output_dir"),
    "save_model": (_bool, True, "write the trained model file"),
    "workers": (int, 1, "sweep worker threads"),
}
HYPER_KEYS = ("dim", "lambda_t", "lambda_c", "lambda_dist", "lr_start", "lr_end", "momentum", "epochs",
              "batch_size", "init_scale")


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    values: dict
    explicit: frozenset = frozenset()

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    @classmethod
    def defaults(cls) -> "ExperimentConfig":
        return cls({k: spec[1] for k, spec in FIELDS.items()})

    def with_values(self, raw: dict) -> "ExperimentConfig":
        """Parse string values (or accept typed ones) and mark them explicit."""
        values = dict(self.values)
        for key, value in raw.items():
            values[key] = _convert(key, value)
        cfg = ExperimentConfig(values, self.explicit | frozenset(raw))
        cfg.validate()
        return cfg

    def replace(self, **changes) -> "ExperimentConfig":
        return self.with_values(changes)

    def validate(self) -> None:
        if self.preset not in ("none", "benchmark"):
            raise ConfigError(f"preset: expected none or benchmark, got {self.preset!r}")
        if self.loss not in ("bce", "squared"):
            raise ConfigError(f"loss: expected bce or squared, got {self.loss!r}")
        if self.format not in ("auto", "csv", "dat", "manifest"):
            raise ConfigError(f"format: expected auto, csv, dat or manifest, got {self.format!r}")
        if not 0.0 <= self.s_t_injection <= 1.0:
            raise ConfigError("s_t_injection: must lie in [0, 1]")
        if self.workers < 1:
            raise ConfigError("workers: must be at least 1")
        if self.negatives_per_positive < 1:
            raise ConfigError("negatives_per_positive: must be at least 1")
        if self.ips_cap <= 0 or self.smoothing_alpha < 0:
            raise ConfigError("ips_cap must be positive and smoothing_alpha non-negative")

    @property
    def method_list(self) -> tuple:
        return self.methods or (self.method,)

    @property
    def dataset_name(self) -> str:
        return "synthetic" if self.dataset == "synthetic" else Path(self.dataset).stem

    def is_synthetic(self) -> bool:
        return self.dataset == "synthetic"

    def data_format(self) -> str:
        if self.format != "auto" or self.is_synthetic():
            return self.format
        if os.path.exists(self.dataset + ".meta") or self.dataset.endswith(".manifest"):
            return "manifest"
        return "csv" if self.dataset.endswith(".csv") else "dat"

    def hyperparams(self, method: str, seed: int) -> tuple[Hyperparams, float]:
        """Resolved ``(Hyperparams, lambda_user)`` for ``method`` with training seed ``seed``."""
        family, _ = parse_method(method)
        settings = {}
        if self.preset == "benchmark":
            preset = "cause" if family in CAUSE_METHODS else "bpr" if family == "bpr" else "baseline"
            settings.update(BENCHMARK_PRESETS[preset])
        for key in HYPER_KEYS + ("lambda_user",):
            if key in self.explicit and self.values[key] is not None:
                settings[key] = self.values[key]
        lambda_user = settings.pop("lambda_user", 0.0)
        try:
            return Hyperparams(seed=seed, **settings), lambda_user
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"hyperparameters: {exc}") from None


def _convert(key: str, value):
    if key not in FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    parser = FIELDS[key][0]
    if not isinstance(value, str):
        if isinstance(value, (list, tuple)) and parser in (parse_int_list, _fractions, _methods):
            value = ",".join(str(v) for v in value)
        else:
            value = str(value)
    try:
        return parser(value.strip())
    except ConfigError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"{key}: invalid value {value!r} ({exc})") from None


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    return ExperimentConfig.defaults().with_values(raw)


def parse_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    return parse_config_text(text, str(path))


# ---------------------------------------------------------------- running

def derive_seeds(seed: int) -> tuple[int, int]:
    """Independent (split, training) seeds from one run seed."""
    split_seed, train_seed = np.random.SeedSequence(seed).generate_state(2)
    return int(split_seed), int(train_seed)


@contextmanager
def stage(name: str):
    """Prefix errors raised inside with ``[name]`` so the failing stage is visible."""
    try:
        yield
    except CauseError as exc:
        if exc.args and isinstance(exc.args[0], str) and not exc.args[0].startswith("["):
            exc.args = (f"[{name}] {exc.args[0]}",) + exc.args[1:]
        raise
    except OSError as exc:
        raise DataError(f"[{name}] {exc.filename or ''}: {exc.strerror or exc}") from None


def load_split(config: ExperimentConfig, seed: int) -> SplitDataset:
    split_seed, _ = derive_seeds(seed)
    fmt = config.data_format()
    with stage("load"):
        if config.is_synthetic():
            split, _ = gen_synthetic(config.num_users, config.num_items, config.latent_dim,
                                     config.zipf_exponent, config.events_per_user, seed=split_seed,
                                     true_bias=config.true_bias, factor_scale=config.factor_scale,
                                     fractions=config.split_fractions, s_t_injection=config.s_t_injection)
            return split
        if fmt == "manifest":
            return read_manifest(config.dataset)
        events, id_maps = records_to_events(parse_ratings(config.dataset, fmt))
    with stage("split"):
        return make_skew_split(events, config.split_fractions, config.s_t_injection, split_seed,
                               len(id_maps["user"]), len(id_maps["item"]), id_maps)


@dataclasses.dataclass
class RunResult:
    report: MetricReport
    model: EmbeddingSet
    model_path: Path | None


def display_name(method: str, adaptation) -> str:
    family, suffix = parse_method(method)
    if family in CAUSE_METHODS:
        return _DISPLAY[family]
    mode = suffix or AdaptationMode(adaptation)
    return f"{_DISPLAY[family]}-{mode.value.capitalize()}"


def audit_no_leakage(train: Interactions, split: SplitDataset) -> None:
    held = np.concatenate([split.validation.event_ids, split.test.event_ids])
    overlap = np.intersect1d(train.event_ids, held)
    if overlap.size:
        raise DataError(f"{overlap.size} training events also appear in validation/test")


def train_method(config: ExperimentConfig, method: str, split: SplitDataset, seed: int):
    """Train one method on ``split``; returns ``(model, training events)``."""
    family, suffix = parse_method(method)
    _, train_seed = derive_seeds(seed)
    hyper, lambda_user = config.hyperparams(method, train_seed)
    nu, ni = split.num_users, split.num_items
    if family in CAUSE_METHODS:
        train = Interactions.concat([split.s_c, split.s_t])
        audit_no_leakage(train, split)
        model = train_cause(split.s_c, split.s_t, hyper, config.mode, CAUSE_METHODS[family], nu, ni,
                            learn_calibration=config.learn_calibration, loss=config.loss,
                            lambda_user=lambda_user)
        return model, train
    train = assemble_training_set(split, suffix or config.adaptation)
    audit_no_leakage(train, split)
    if family == "sp2v":
        model = train_sp2v(train, hyper, num_users=nu, num_items=ni)
    elif family == "wsp2v":
        props = estimate_propensity(train, ni, config.smoothing_alpha)
        normalize = config.normalize_weights
        if config.preset == "benchmark" and "normalize_weights" not in config.explicit:
            normalize = True
        model = train_wsp2v(train, hyper, props, config.ips_cap, normalize, nu, ni)
    else:
        model = train_bpr(train, hyper, config.negatives_per_positive, nu, ni)
    return model, train


def evaluate_model(model: EmbeddingSet, events: Interactions, method: str, dataset: str, seed: int) -> MetricReport:
    """Score ``model`` on ``events``; pairwise-ranking models get AUC only."""
    if len(events) == 0:
        raise DataError("evaluation partition is empty")
    variant = model.variant
    if variant == "bpr":
        scores = predict_scores(model, events.users, events.items, variant)
        return evaluate(method, dataset, seed, events.rewards, scores=scores)
    probs = predict_proba(model, events.users, events.items, variant)
    return evaluate(method, dataset, seed, events.rewards, probs=probs)


class ResultsWriter:
    """Appends CSV rows under a lock; writes the header into a new or empty file."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, report: MetricReport) -> None:
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            fresh = not self.path.exists() or self.path.stat().st_size == 0
            with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                if fresh:
                    fh.write(",".join(CSV_HEADER) + "\n")
                fh.write(report.csv_row() + "\n")


def model_path(config: ExperimentConfig, name: str, seed: int) -> Path:
    return Path(config.output_dir) / "models" / f"{name}_{config.dataset_name}_seed{seed}.model"


def run_experiment(config: ExperimentConfig, seed: int | None = None, method: str | None = None,
                   split: SplitDataset | None = None, writer: ResultsWriter | None = None,
                   save: bool | None = None) -> RunResult:
    """Load/split, train, evaluate on test, then save the model and append the CSV row.

    ``writer=None`` appends to ``output_dir/results``; pass ``writer=False`` to skip it.
    """
    seed = config.seed if seed is None else seed
    method = method or config.method
    name = display_name(method, config.adaptation)
    if split is None:
        split = load_split(config, seed)
    with stage("train"):
        model, _ = train_method(config, method, split, seed)
    with stage("evaluate"):
        report = evaluate_model(model, split.test, name, config.dataset_name, seed)
    path = None
    if config.save_model if save is None else save:
        path = model_path(config, name, seed)
        with stage("save"):
            path.parent.mkdir(parents=True, exist_ok=True)
            save_model(path, model)
    if writer is None:
        writer = ResultsWriter(Path(config.output_dir) / config.results)
    if writer:
        with stage("report"):
            writer.append(report)
    return RunResult(report, model, path)


def _run_grid(config, jobs, writer, save, workers):
    """Run ``(seed, method)`` jobs; the calling thread writes rows in job order."""
    splits = {}
    split_lock = threading.Lock()

    def split_for(seed):
        with split_lock:
            if seed not in splits:
                splits[seed] = load_split(config, seed)
            return splits[seed]

    def one(job):
        seed, method = job
        return run_experiment(config, seed, method, split_for(seed), writer=False, save=save).report

    reports = []
    if workers <= 1:
        for job in jobs:
            reports.append(one(job))
            if writer:
                writer.append(reports[-1])
        return reports
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(one, job) for job in jobs]
        for fut in futures:
            reports.append(fut.result())
            if writer:
                writer.append(reports[-1])
    return reports


def run_sweep(config: ExperimentConfig, seeds=None, methods=None, workers: int | None = None,
              writer: ResultsWriter | None = None) -> list[MetricReport]:
    """Every method on every seed. Rows come out ordered by method, then seed."""
    seeds = tuple(seeds if seeds is not None else config.seeds)
    methods = tuple(methods if methods is not None else config.method_list)
    if not seeds or not methods:
        raise ConfigError("a sweep needs at least one seed and one method")
    for m in methods:
        parse_method(m)
    if writer is None:
        writer = ResultsWriter(Path(config.output_dir) / config.results)
    jobs = [(s, m) for m in methods for s in seeds]
    return _run_grid(config, jobs, writer, None, workers or config.workers)


def _mean_std(values):
    v = np.asarray([x for x in values if x is not None], dtype=np.float64)
    if v.size == 0:
        return None, None
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def summarize(reports) -> list[dict]:
    """Across-seed mean and sample standard deviation per method."""
    by_method: dict = {}
    for r in reports:
        by_method.setdefault(r.method, []).append(r)
    rows = []
    for method, rs in by_method.items():
        row = {"method": method, "n_seeds": len(rs)}
        for metric in ("mse", "mse_lift", "nll", "nll_lift", "auc"):
            row[f"{metric}_mean"], row[f"{metric}_std"] = _mean_std(getattr(r, metric) for r in rs)
        rows.append(row)
    return rows


def _fmt(v) -> str:
    return "" if v is None else repr(v)


def run_injection_sweep(config: ExperimentConfig, fractions, seeds=None, methods=None,
                        workers: int | None = None, out_path=None) -> list[tuple]:
    """MSE lift against the S_t injection fraction, as plot-ready rows.

    Each fraction rebuilds the split; rows are
    ``(fraction, method, mse_lift mean, mse_lift std, n_seeds)``.
    """
    fractions = tuple(float(f) for f in fractions)
    if not fractions:
        raise ConfigError("injection sweep needs at least one fraction")
    if any(not 0.0 <= f <= 0.5 for f in fractions):
        raise ConfigError("injection fractions must lie in [0, 0.5]")
    if any(b <= a for a, b in zip(fractions, fractions[1:])):
        raise ConfigError("injection fractions must be strictly increasing")
    if not config.is_synthetic() and config.data_format() == "manifest":
        raise ConfigError("an injection sweep needs a rating log or synthetic data, not a fixed manifest")
    seeds = tuple(seeds if seeds is not None else config.seeds)
    methods = tuple(methods if methods is not None else config.method_list)
    for m in methods:
        family, suffix = parse_method(m)
        mode = suffix or (None if family in CAUSE_METHODS else config.adaptation)
        if mode is AdaptationMode.TEST and fractions[0] == 0.0:
            raise DataError(f"{display_name(m, config.adaptation)} trains on S_t only, "
                            "which injection fraction 0 leaves empty")
    rows = []
    for f in fractions:
        cfg = config.replace(s_t_injection=f)
        jobs = [(s, m) for m in methods for s in seeds]
        reports = _run_grid(cfg, jobs, None, False, workers or config.workers)
        for k, m in enumerate(methods):
            chunk = reports[k * len(seeds):(k + 1) * len(seeds)]
            mean, std = _mean_std(r.mse_lift for r in chunk)
            rows.append((f, chunk[0].method, mean, std, len(chunk)))
    if out_path is not None:
        write_injection_csv(out_path, rows)
    return rows


def write_injection_csv(path, rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(INJECTION_HEADER) + "\n")
        for f, method, mean, std, n in rows:
            fh.write(f"{f!r},{method},{_fmt(mean)},{_fmt(std)},{n}\n")


def spearman_trend(xs, ys) -> float:
    rho = spearmanr(xs, ys).statistic
    return float(rho) if not math.isnan(rho) else 0.0
