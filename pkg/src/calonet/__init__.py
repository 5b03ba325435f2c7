"""CaLoNet: multivariate time-series classification from causal graphs and local correlations."""

from .causal import CausalConfig, CausalMatrix, build_causal_matrix, causal_score, transfer_entropy
from .dataset import Dataset, TimeSeriesSample, load_dataset, parse_ts, synth_causal, to_ts
from .encoder import EncoderConfig
from .gnn import GinConfig
from .model import CaLoNetModel, TrainConfig, evaluate, load, predict, saliency, save, train

__version__ = "0.1.0"

__all__ = [
    "CaLoNetModel", "CausalConfig", "CausalMatrix", "Dataset", "EncoderConfig", "GinConfig",
    "TimeSeriesSample", "TrainConfig", "build_causal_matrix", "causal_score", "evaluate", "load",
    "load_dataset", "parse_ts", "predict", "saliency", "save", "synth_causal", "to_ts", "train",
    "transfer_entropy",
]
