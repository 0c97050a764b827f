"""Task losses, their batch reductions and the weighted objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class LossWeights:
    """Weights of the auxiliary tasks 2-5 relative to graph classification."""

    lambda2: float = 0.0
    lambda3: float = 0.0
    lambda4: float = 0.0
    lambda5: float = 0.0

    def __post_init__(self):
        for name, v in zip(("lambda2", "lambda3", "lambda4", "lambda5"), self.as_tuple()):
            if not v >= 0:
                raise ValueError(f"{name} must be non-negative, got {v}")
            # floats throughout so config digests do not depend on 1 vs 1.0
            object.__setattr__(self, name, float(v))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.lambda2, self.lambda3, self.lambda4, self.lambda5)

    @classmethod
    def of(cls, values: Sequence[float]) -> "LossWeights":
        if len(values) != 4:
            raise ValueError(f"need 4 weights, got {len(values)}")
        return cls(*(float(v) for v in values))

    @property
    def is_baseline(self) -> bool:
        return not any(self.as_tuple())

    def label(self) -> str:
        return "[" + ",".join(f"{v:g}" for v in self.as_tuple()) + "]"


@dataclass
class LossBreakdown:
    l1: Tensor
    l2: Tensor
    l3: Tensor
    l4: Tensor
    l5: Tensor
    combined: Tensor

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("l1", "l2", "l3", "l4", "l5", "combined")}


def loss_graph_classification(scores: Tensor, graph_labels) -> Tensor:
    return ad.mean_all(ad.softmax_cross_entropy(scores, graph_labels))


def loss_node_label(scores: Tensor, node_labels) -> Tensor:
    return ad.mean_all(ad.softmax_cross_entropy(scores, node_labels))


def loss_graph_label_on_nodes(scores: Tensor, graph_labels, node_to_graph) -> Tensor:
    """Each node is scored against the label of the graph containing it."""
    per_node = np.asarray(graph_labels)[np.asarray(node_to_graph)]
    return ad.mean_all(ad.softmax_cross_entropy(scores, per_node))


def loss_graph_distribution(pred: Tensor, counts) -> Tensor:
    """Row MSE against raw per-class node counts, averaged over graphs."""
    return ad.mean_all(ad.mse_rowwise(pred, np.asarray(counts, dtype=pred.dtype)))


def loss_neighborhood_distribution(pred: Tensor, counts) -> Tensor:
    """Row MSE against raw per-class neighbour counts, averaged over nodes."""
    return ad.mean_all(ad.mse_rowwise(pred, np.asarray(counts, dtype=pred.dtype)))


def combined_loss(losses: Sequence[Tensor], weights: LossWeights) -> LossBreakdown:
    """``l1 + lambda2*l2 + lambda3*l3 + lambda4*l4 + lambda5*l5``."""
    if len(losses) != 5:
        raise ValueError(f"need the five task losses, got {len(losses)}")
    l1, l2, l3, l4, l5 = losses
    total = l1
    for lam, l in zip(weights.as_tuple(), (l2, l3, l4, l5)):
        total = ad.add(total, ad.scale(l, lam))
    return LossBreakdown(l1, l2, l3, l4, l5, total)


def batch_losses(out, batch, weights: LossWeights) -> LossBreakdown:
    """All five reduced losses of a forward pass over ``batch``."""
    return combined_loss([
        loss_graph_classification(out.graph_scores, batch.graph_labels),
        loss_node_label(out.node_label_scores, batch.node_labels),
        loss_graph_label_on_nodes(out.node_graph_scores, batch.graph_labels, batch.node_to_graph),
        loss_graph_distribution(out.graph_distribution, batch.graph_distributions),
        loss_neighborhood_distribution(out.neighborhood_distribution,
                                       batch.neighborhood_distributions),
    ], weights)


def predict(scores) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    s = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    if s.ndim == 1:
        s = s[None, :]
    return np.argmax(s, axis=1)
