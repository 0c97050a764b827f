"""The DP-GNN network: expressive sum-aggregation layers, sum readout, five heads."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Parameter, Tensor
from .graph_data import Batch, GraphDataset, make_batch

TRANSFORMS = ("identical", "mlp")
HEAD_NAMES = ("task1", "task2", "task3", "task4", "task5")


@dataclass(frozen=True)
class ModelConfig:
    num_node_classes: int
    num_graph_classes: int
    hidden_dim: int = 32
    num_layers: int = 5
    first_layer_transform: str = "identical"

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")
        if self.num_node_classes < 1 or self.num_graph_classes < 1:
            raise ValueError("class counts must be >= 1")
        if self.first_layer_transform not in TRANSFORMS:
            raise ValueError(f"first_layer_transform must be one of {TRANSFORMS}")

    @property
    def input_dim(self) -> int:
        return self.num_node_classes

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class MlpBlock:
    """affine -> batch norm -> relu -> affine."""

    def __init__(self, name, d_in, d_hidden, d_out, rng, dtype=np.float64):
        self.name = name
        self.w1 = Parameter(ad.glorot_uniform(rng, d_in, d_hidden, dtype), f"{name}.lin1.weight")
        self.b1 = Parameter(np.zeros((1, d_hidden), dtype), f"{name}.lin1.bias")
        self.gamma = Parameter(np.ones((1, d_hidden), dtype), f"{name}.bn.weight")
        self.beta = Parameter(np.zeros((1, d_hidden), dtype), f"{name}.bn.bias")
        self.bn = BatchNormState.create(d_hidden, dtype)
        self.w2 = Parameter(ad.glorot_uniform(rng, d_hidden, d_out, dtype), f"{name}.lin2.weight")
        self.b2 = Parameter(np.zeros((1, d_out), dtype), f"{name}.lin2.bias")

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.gamma, self.beta, self.w2, self.b2]

    def buffers(self) -> dict[str, BatchNormState]:
        return {f"{self.name}.bn": self.bn}

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h = ad.affine(x, self.w1, self.b1)
        h = ad.batch_norm(h, self.gamma, self.beta, self.bn, training)
        return ad.affine(ad.relu(h), self.w2, self.b2)


@dataclass
class ForwardOutput:
    node_reprs: Tensor          # H^(K), one row per node
    graph_reprs: Tensor         # H_G, one row per graph
    graph_scores: Tensor        # S(G)
    node_label_scores: Tensor   # S_N(v)
    node_graph_scores: Tensor   # S_G(v)
    graph_distribution: Tensor  # P_G(G)
    neighborhood_distribution: Tensor  # P_N(v)


class DpGnnModel:
    """Parameters and forward pass of the network.

    Layer ``k`` maps node representations ``h`` to
    ``combine_k([h(v), sum over w in N(v) of transform_k(h(w))])``. The first
    transform is the identity when ``first_layer_transform == "identical"``.
    The graph representation is the per-graph sum of ``readout_mlp(h_K(v))``.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        hd = config.hidden_dim
        self.transforms: list[MlpBlock | None] = []
        self.combines: list[MlpBlock] = []
        width = config.input_dim
        for k in range(config.num_layers):
            if k == 0 and config.first_layer_transform == "identical":
                t = None
                t_width = width
            else:
                t = MlpBlock(f"layer{k}.transform", width, hd, hd, rng, dtype)
                t_width = hd
            self.transforms.append(t)
            self.combines.append(MlpBlock(f"layer{k}.combine", width + t_width, hd, hd, rng, dtype))
            width = hd
        self.readout_mlp = MlpBlock("readout", hd, hd, hd, rng, dtype)
        outs = (config.num_graph_classes, config.num_node_classes, config.num_graph_classes,
                config.num_node_classes, config.num_node_classes)
        self.heads = [MlpBlock(name, hd, hd, d, rng, dtype) for name, d in zip(HEAD_NAMES, outs)]

    def blocks(self) -> list[MlpBlock]:
        out = []
        for t, c in zip(self.transforms, self.combines):
            if t is not None:
                out.append(t)
            out.append(c)
        out.append(self.readout_mlp)
        out.extend(self.heads)
        return out

    def parameters(self) -> list[Parameter]:
        return [p for b in self.blocks() for p in b.parameters()]

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def head_parameters(self, task: int) -> list[Parameter]:
        """Parameters of the prediction head of task 1..5."""
        return self.heads[task - 1].parameters()

    # -- forward ------------------------------------------------------------

    def _check_batch(self, batch: Batch):
        if batch.features.shape[1] != self.config.num_node_classes:
            raise ValueError(f"batch feature width {batch.features.shape[1]} does not match "
                             f"num_node_classes={self.config.num_node_classes}")

    def gnn_layer(self, h: Tensor, batch: Batch, k: int, training: bool) -> Tensor:
        if h.shape[0] != batch.num_nodes:
            raise ValueError(f"h has {h.shape[0]} rows, batch has {batch.num_nodes} nodes")
        t = self.transforms[k]
        msg = h if t is None else t(h, training)
        agg = ad.gather_neighbors_sum(msg, batch)
        return self.combines[k](ad.concat_columns(h, agg), training)

    def readout(self, h_k: Tensor, batch: Batch, training: bool) -> Tensor:
        return ad.segment_sum(self.readout_mlp(h_k, training), batch.node_to_graph,
                              batch.num_graphs)

    def forward(self, batch: Batch, training: bool = False) -> ForwardOutput:
        self._check_batch(batch)
        h = Tensor(batch.features.astype(self.dtype, copy=False))
        for k in range(self.config.num_layers):
            h = self.gnn_layer(h, batch, k, training)
        hg = self.readout(h, batch, training)
        h1, h2, h3, h4, h5 = self.heads
        return ForwardOutput(
            node_reprs=h,
            graph_reprs=hg,
            graph_scores=h1(hg, training),
            node_label_scores=h2(h, training),
            node_graph_scores=h3(h, training),
            graph_distribution=h4(hg, training),
            neighborhood_distribution=h5(h, training),
        )

    __call__ = forward

    def embed(self, ds: GraphDataset, ids: Sequence[int] | None = None,
              chunk: int = 256) -> np.ndarray:
        """Evaluation-mode graph representations, one row per id."""
        ids = list(range(len(ds))) if ids is None else list(ids)
        rows = [self.forward(make_batch(ds, ids[i:i + chunk])).graph_reprs.data
                for i in range(0, len(ids), chunk)]
        return np.concatenate(rows) if rows else np.zeros((0, self.config.hidden_dim))

    # -- state --------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {p.name: p.data for p in self.parameters()}
        for b in self.blocks():
            for name, st in b.buffers().items():
                arrays[f"{name}.running_mean"] = st.running_mean
                arrays[f"{name}.running_var"] = st.running_var
        return arrays

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        expected = self.state_arrays()
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        if missing or extra:
            raise ad.CheckpointError(f"checkpoint does not match model: missing {missing[:3]}, "
                                     f"unexpected {extra[:3]}")
        for name, cur in expected.items():
            if np.shape(arrays[name]) != cur.shape:
                raise ad.CheckpointError(f"{name}: shape {np.shape(arrays[name])} != {cur.shape}")
        for p in self.parameters():
            p.data[...] = arrays[p.name]
        for b in self.blocks():
            for name, st in b.buffers().items():
                st.running_mean = np.asarray(arrays[f"{name}.running_mean"], dtype=self.dtype)
                st.running_var = np.asarray(arrays[f"{name}.running_var"], dtype=self.dtype)

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {"model": self.config.to_dict(), "dtype": self.dtype.name}
        meta.update(extra_meta or {})
        ad.save_checkpoint(path, self.state_arrays(), meta)

    @classmethod
    def load(cls, path) -> tuple["DpGnnModel", dict]:
        arrays, meta = ad.load_checkpoint(path)
        try:
            config = ModelConfig(**meta["model"])
            dtype = np.dtype(meta.get("dtype", "float64"))
        except (KeyError, TypeError, ValueError) as exc:
            raise ad.CheckpointError(f"bad model metadata in {path}: {exc}") from None
        model = cls(config, dtype=dtype)
        model.load_state_arrays(arrays)
        return model, meta


def export_embeddings(model: DpGnnModel, ds: GraphDataset, path,
                      validation_ids: Sequence[int] | None = None,
                      header_comment: str | None = None) -> int:
    """Write one CSV row per graph: id, label, role, graph representation.

    Graphs listed in ``validation_ids`` get role ``validation``, the rest
    ``train``. Returns the number of rows written.
    """
    emb = model.embed(ds)
    val = set(validation_ids or ())
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["graph_id", "label", "role"] + [f"h{j}" for j in range(emb.shape[1])])
        for i, g in enumerate(ds.graphs):
            role = "validation" if i in val else "train"
            w.writerow([i, g.graph_label, role] + [repr(float(v)) for v in emb[i]])
    return len(ds)
