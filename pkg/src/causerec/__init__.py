"""Causal embeddings for recommendation: joint treatment/control factorization and its harness."""
from .baselines import AdaptationMode, train_bpr, train_sp2v, train_wsp2v
from .cause import CauseTrainer, CauseVariant, predict, predict_proba, train_cause
from .datamodel import EmbeddingSet, Hyperparams, Interaction, Interactions, Mode, Origin
from .errors import CauseError, ConfigError, DataError, DivergenceError
from .ingest import SplitDataset, gen_synthetic, make_skew_split
from .metrics import MetricReport, evaluate
from .persistence import load_model, save_model
from .propensity import PropensityModel, estimate_propensity

__version__ = "0.1.0"

__all__ = [
    "AdaptationMode", "CauseError", "CauseTrainer", "CauseVariant", "ConfigError", "DataError",
    "DivergenceError", "EmbeddingSet", "Hyperparams", "Interaction", "Interactions", "MetricReport",
    "Mode", "Origin", "PropensityModel", "SplitDataset", "estimate_propensity", "evaluate",
    "gen_synthetic", "load_model", "make_skew_split", "predict", "predict_proba", "save_model",
    "train_bpr", "train_cause", "train_sp2v", "train_wsp2v",
]
