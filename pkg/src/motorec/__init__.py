"""Cold-start recommendation with discrete semantic item tokens and graph propagation."""
from .config import TrainConfig
from .data import InteractionDataset, ItemFeatureTable, SynthConfig, load_dataset, rarity_profile, synthesize
from .errors import ConfigError, DataError, MotorecError, TrainingError
from .evaluation import MetricReport, ndcg_at_n, rank_topn, recall_at_n, stratified_eval
from .model import MoToRec
from .pipeline import run_ablation, train

__all__ = [
    "ConfigError",
    "DataError",
    "InteractionDataset",
    "ItemFeatureTable",
    "MetricReport",
    "MoToRec",
    "MotorecError",
    "SynthConfig",
    "TrainConfig",
    "TrainingError",
    "load_dataset",
    "ndcg_at_n",
    "rank_topn",
    "rarity_profile",
    "recall_at_n",
    "run_ablation",
    "stratified_eval",
    "synthesize",
    "train",
]
