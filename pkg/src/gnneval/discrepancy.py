"""Discrepancy attributes, accuracy labels and DiscGraph assembly.

A DiscGraph re-describes a graph from the point of view of one frozen
classifier: node ``u`` gets one attribute per *training-graph* node ``v``,
the cosine similarity of their embeddings.  Columns therefore always follow
the training graph's node order, and every DiscGraph of one model has the
same width ``N``.
"""
from __future__ import annotations

import os
import warnings
from dataclasses import dataclass

import numpy as np

from .augment import MetaGraph
from .graphio import Graph, graph_id
from .zoo import TrainedModel, accuracy, embed_and_predict, model_id

DISC_MAGIC = "#disc v1"
ZERO_NORM = 1e-12


class BindingError(ValueError):
    """A model, graph or evaluator was paired with artifacts built for something else."""


@dataclass(frozen=True, eq=False)
class DiscGraph:
    attrs: np.ndarray
    edges: np.ndarray
    label: float | None
    model_id: str
    train_graph_id: str
    provenance: str = ""

    def __post_init__(self):
        a = np.asarray(self.attrs, dtype=np.float64)
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        a.setflags(write=False)
        e.setflags(write=False)
        object.__setattr__(self, "attrs", a)
        object.__setattr__(self, "edges", e)
        if self.label is not None and not 0.0 <= self.label <= 1.0:
            raise ValueError(f"accuracy label {self.label} outside [0, 1]")

    @property
    def num_nodes(self) -> int:
        return self.attrs.shape[0]

    @property
    def train_node_count(self) -> int:
        return self.attrs.shape[1]

    @property
    def binding(self) -> tuple[str, str]:
        return self.model_id, self.train_graph_id


def disc_attrs(z_meta: np.ndarray, z_train: np.ndarray, mode: str = "rowwise") -> np.ndarray:
    """Similarity of every meta/target node embedding to every training-node embedding.

    ``mode="rowwise"`` (default) is the per-pair cosine similarity.
    ``mode="matrix"`` divides the Gram matrix by the product of the two
    matrices' spectral norms instead.  Zero-norm rows are divided by 1e-12
    (with a warning), which leaves their similarities at 0.
    """
    z_meta = np.asarray(z_meta, dtype=np.float64)
    z_train = np.asarray(z_train, dtype=np.float64)
    if z_meta.ndim != 2 or z_train.ndim != 2 or z_meta.shape[1] != z_train.shape[1]:
        raise ValueError(f"embedding shapes {z_meta.shape} and {z_train.shape} are not conformable")
    gram = z_meta @ z_train.T
    if mode == "matrix":
        denom = np.linalg.norm(z_meta, 2) * np.linalg.norm(z_train, 2)
        out = gram / max(denom, ZERO_NORM)
    elif mode == "rowwise":
        nm = np.linalg.norm(z_meta, axis=1)
        nt = np.linalg.norm(z_train, axis=1)
        if (nm == 0).any() or (nt == 0).any():
            warnings.warn("zero-norm embedding row in discrepancy attributes (degenerate embedding)",
                          RuntimeWarning, stacklevel=2)
        nm = np.where(nm == 0, ZERO_NORM, nm)
        nt = np.where(nt == 0, ZERO_NORM, nt)
        out = gram / nm[:, None] / nt[None, :]
    else:
        raise ValueError(f"unknown discrepancy mode {mode!r}")
    return np.clip(out, -1.0, 1.0)


def label_meta(model: TrainedModel, mg) -> float:
    """Accuracy of ``model`` on a fully labeled meta-graph (or plain Graph)."""
    g = mg.graph if isinstance(mg, MetaGraph) else mg
    _, yhat = embed_and_predict(model, g)
    return accuracy(yhat, g.labels)


class DiscrepancyBuilder:
    """Builds DiscGraphs for one ``(model, training graph)`` pair.

    The training-graph embedding is computed once, here, and reused for
    every DiscGraph so all of them share the same column basis.
    """

    def __init__(self, model: TrainedModel, train_graph: Graph, mode: str = "rowwise"):
        gid = graph_id(train_graph)
        if gid != model.source_graph_id:
            raise BindingError(
                f"model was trained on graph {model.source_graph_id}, got training graph {gid}")
        self.model = model
        self.mode = mode
        self.train_graph_id = gid
        self.model_id = model_id(model)
        z, _ = embed_and_predict(model, train_graph)
        z.setflags(write=False)
        self.z_train = z

    @property
    def width(self) -> int:
        return self.z_train.shape[0]

    def attrs_for(self, g: Graph) -> np.ndarray:
        z, _ = embed_and_predict(self.model, g)
        return disc_attrs(z, self.z_train, self.mode)

    def build(self, mg) -> DiscGraph:
        g = mg.graph if isinstance(mg, MetaGraph) else mg
        z, yhat = embed_and_predict(self.model, g)
        prov = f"meta:{mg.index}" if isinstance(mg, MetaGraph) else "graph"
        return DiscGraph(disc_attrs(z, self.z_train, self.mode), g.edges, accuracy(yhat, g.labels),
                         self.model_id, self.train_graph_id, prov)

    def build_inference(self, target: Graph, name: str = "target") -> DiscGraph:
        blind = target.without_labels()
        return DiscGraph(self.attrs_for(blind), blind.edges, None,
                         self.model_id, self.train_graph_id, f"target:{name}")


def build_discgraph(model: TrainedModel, train_graph: Graph, mg) -> DiscGraph:
    return DiscrepancyBuilder(model, train_graph).build(mg)


def build_inference_discgraph(model: TrainedModel, train_graph: Graph, target: Graph,
                              name: str = "target") -> DiscGraph:
    return DiscrepancyBuilder(model, train_graph).build_inference(target, name)


def format_discgraph(d: DiscGraph) -> str:
    label = "NA" if d.label is None else repr(float(d.label))
    lines = [DISC_MAGIC, f"{d.num_nodes} {d.train_node_count} {label}",
             f"bound: {d.model_id} {d.train_graph_id} {d.provenance or '-'}"]
    lines.extend(" ".join(f"{v:.9g}" for v in row) for row in d.attrs)
    lines.extend(f"{s} {t}" for s, t in d.edges)
    return "\n".join(lines) + "\n"


def save_discgraph(d: DiscGraph, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(format_discgraph(d))


def load_discgraph(path) -> DiscGraph:
    path = os.fspath(path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != DISC_MAGIC:
        raise ValueError(f"{path}:1: missing '{DISC_MAGIC}' header")
    try:
        m_str, n_str, label_str = lines[1].split()
        m, n = int(m_str), int(n_str)
        label = None if label_str == "NA" else float(label_str)
    except (IndexError, ValueError):
        raise ValueError(f"{path}:2: header must be 'M N label|NA'") from None
    bound = lines[2].split() if len(lines) > 2 else []
    if len(bound) != 4 or bound[0] != "bound:":
        raise ValueError(f"{path}:3: expected 'bound: <model-id> <train-graph-id> <provenance>'")
    if len(lines) < 3 + m:
        raise ValueError(f"{path}: truncated attribute block")
    attrs = np.loadtxt(lines[3:3 + m], dtype=np.float64, ndmin=2) if m else np.zeros((0, n))
    if attrs.shape != (m, n):
        raise ValueError(f"{path}: attribute block has shape {attrs.shape}, header says {(m, n)}")
    edge_lines = lines[3 + m:]
    edges = (np.loadtxt(edge_lines, dtype=np.int64, ndmin=2) if edge_lines
             else np.zeros((0, 2), dtype=np.int64))
    if edges.size and ((edges < 0).any() or (edges >= m).any() or edges.shape[1] != 2):
        raise ValueError(f"{path}: edge endpoint out of range for M={m}")
    prov = "" if bound[3] == "-" else bound[3]
    return DiscGraph(attrs, edges, label, bound[1], bound[2], prov)
