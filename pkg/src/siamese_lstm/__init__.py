"""Siamese LSTM metric learning for person re-identification."""

from .dataset import FeatureSet, SplitSpec, SyntheticSpec, generate_synthetic, load_feature_set, make_split
from .evaluation import EvalReport, ScoreMatrix, cmc, evaluate, fuse_scores, mean_average_precision, score_matrix
from .lstm import LstmParams, cell_forward, sequence_backward, sequence_forward
from .model import BaselineParams, PairExample, SiameseParams, contrastive_loss, distance, embed
from .training import TrainConfig, mine_pairs, train

__version__ = "0.1.0"
