"""Distribution-preserving GNN for graph classification.

Modules: :mod:`graph_data` (TU ingestion, targets, batching, folds),
:mod:`autodiff` (2-D tensors and reverse-mode gradients), :mod:`model`,
:mod:`losses`, :mod:`training` (cross-validation protocol), :mod:`cli`.
"""

from .graph_data import (Batch, Graph, GraphDataset, compute_distribution_targets,
                         generate_toy_dataset, make_batch, parse_tu_dataset, stratified_kfold)
from .losses import LossWeights, batch_losses, combined_loss, predict
from .model import DpGnnModel, ModelConfig
from .training import TrainConfig, cross_validate, lr_at_epoch

__version__ = "0.1.0"
