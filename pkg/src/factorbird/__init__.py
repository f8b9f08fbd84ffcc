"""Distributed SGD matrix factorisation with a parameter server and packed models."""
from .model import (EdgeContext, HyperGrid, Hyperparameters, ModelLayout, exact_loss,
                    estimate_loss, init_vector, learning_rate, packed_sgd_step, predict,
                    sgd_step)
from .store import FactorMatrixPartition, GraphStats, allocate_partition, load_stats, \
    save_stats, vector_of

__version__ = "0.1.0"
