"""Graph data model, the ``gtxt`` text format, splits and a synthetic SBM generator.

A :class:`Graph` is undirected and unweighted.  Each undirected edge is kept
once as a ``(min, max)`` pair, and the list is sorted lexicographically. The
symmetric CSR adjacency is derived from that list on demand.

The ``gtxt v1`` layout::

    #gtxt v1
    N M d C
    <node_id> <label> <f_0> ... <f_{d-1}>     (N lines, node_id = line index - 3)
    <src> <dst>                               (M lines, src < dst)

Floats are written with 9 significant digits, so graphs whose features are
already 9-digit values (see :func:`quantize`) survive a save/load cycle
bit-for-bit.
"""
from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp

GTXT_MAGIC = "#gtxt v1"
UNLABELED = -1


class GraphFormatError(ValueError):
    """Raised for malformed gtxt/split input; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class GraphError(ValueError):
    """Raised when a Graph would violate its structural invariants."""


def rng_from_seed(seed, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator for ``seed`` and an optional sub-stream path."""
    ss = np.random.SeedSequence([int(seed), *map(int, stream)])
    return np.random.Generator(np.random.Philox(ss))


def quantize(values: np.ndarray) -> np.ndarray:
    """Round every entry to the nearest 9-significant-digit decimal."""
    a = np.asarray(values, dtype=np.float64)
    out = np.fromiter((float(f"{v:.9g}") for v in a.ravel()), dtype=np.float64, count=a.size)
    return out.reshape(a.shape)


def _canonical_edges(edges, num_nodes: int) -> np.ndarray:
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if (e < 0).any() or (e >= num_nodes).any():
        raise GraphError("edge endpoint out of range")
    if (e[:, 0] == e[:, 1]).any():
        raise GraphError("self-loop")
    e = np.sort(e, axis=1)
    order = np.lexsort((e[:, 1], e[:, 0]))
    e = e[order]
    if (np.diff(e, axis=0) == 0).all(axis=1).any():
        raise GraphError("duplicate undirected edge")
    return e


@dataclass(frozen=True, eq=False)
class Graph:
    features: np.ndarray
    labels: np.ndarray
    edges: np.ndarray
    num_classes: int

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64, copy=True)
        if x.ndim != 2:
            raise GraphError("features must be an N x d matrix")
        n = x.shape[0]
        y = np.array(self.labels, dtype=np.int64, copy=True).reshape(-1)
        if y.shape[0] != n:
            raise GraphError(f"expected {n} labels, got {y.shape[0]}")
        if self.num_classes <= 0:
            raise GraphError("num_classes must be positive")
        if ((y < UNLABELED) | (y >= self.num_classes)).any():
            raise GraphError(f"labels must lie in {{-1}} U [0, {self.num_classes})")
        e = _canonical_edges(self.edges, n)
        for arr in (x, y, e):
            arr.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "edges", e)
        object.__setattr__(self, "num_classes", int(self.num_classes))

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def has_labels(self) -> bool:
        return bool((self.labels != UNLABELED).all())

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        """Symmetric 0/1 CSR adjacency (each undirected edge expanded both ways)."""
        n = self.num_nodes
        rows = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        cols = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        a = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
        a.sort_indices()
        return a

    def degrees(self) -> np.ndarray:
        return np.diff(self.adjacency.indptr)

    def neighbors(self, u: int) -> np.ndarray:
        a = self.adjacency
        return a.indices[a.indptr[u]:a.indptr[u + 1]]

    def replace(self, **changes) -> "Graph":
        return dataclasses.replace(self, **changes)

    def without_labels(self) -> "Graph":
        return self.replace(labels=np.full(self.num_nodes, UNLABELED))

    def equals(self, other: "Graph") -> bool:
        return (
            self.num_classes == other.num_classes
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.edges, other.edges)
        )


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def format_graph(g: Graph) -> str:
    n, d = g.features.shape
    lines = [GTXT_MAGIC, f"{n} {g.num_edges} {d} {g.num_classes}"]
    for i in range(n):
        row = " ".join(_fmt(v) for v in g.features[i])
        lines.append(f"{i} {g.labels[i]} {row}" if d else f"{i} {g.labels[i]}")
    lines.extend(f"{s} {t}" for s, t in g.edges)
    return "\n".join(lines) + "\n"


def graph_id(g: Graph) -> str:
    """Content hash of the serialized graph; used to bind models to their training graph."""
    return hashlib.sha256(format_graph(g).encode("ascii")).hexdigest()[:16]


def save_graph(g: Graph, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(format_graph(g))


def _ints(tokens, lineno, path, what):
    try:
        return [int(t) for t in tokens]
    except ValueError:
        raise GraphFormatError(f"expected integers in {what}", lineno, path) from None


def load_graph(path, with_labels: bool = True) -> Graph:
    """Parse a gtxt v1 file.

    With ``with_labels=False`` the label column is discarded during parsing and
    the returned graph is fully unlabeled.
    """
    path = os.fspath(path)
    with open(path) as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0].strip() != GTXT_MAGIC:
        raise GraphFormatError(f"missing '{GTXT_MAGIC}' header", 1, path)
    if len(lines) < 2:
        raise GraphFormatError("missing 'N M d C' line", 2, path)
    head = lines[1].split()
    if len(head) != 4:
        raise GraphFormatError("header must be 'N M d C'", 2, path)
    n, m, d, c = _ints(head, 2, path, "header")
    if min(n, m, d) < 0 or c <= 0:
        raise GraphFormatError("header values out of range", 2, path)
    if len(lines) != 2 + n + m:
        raise GraphFormatError(
            f"expected {2 + n + m} lines for N={n} M={m}, found {len(lines)}", len(lines), path)

    feats = np.empty((n, d), dtype=np.float64)
    labels = np.full(n, UNLABELED, dtype=np.int64)
    for i in range(n):
        lineno = i + 3
        tok = lines[i + 2].split()
        if len(tok) != d + 2:
            raise GraphFormatError(f"node line needs {d + 2} fields, got {len(tok)}", lineno, path)
        node_id, label = _ints(tok[:2], lineno, path, "node line")
        if node_id != i:
            raise GraphFormatError(f"node id {node_id} out of order (expected {i})", lineno, path)
        if label < UNLABELED or label >= c:
            raise GraphFormatError(f"label {label} outside [0, {c})", lineno, path)
        if with_labels:
            labels[i] = label
        try:
            feats[i] = [float(t) for t in tok[2:]]
        except ValueError:
            raise GraphFormatError("bad feature value", lineno, path) from None

    edges = np.empty((m, 2), dtype=np.int64)
    seen = set()
    for j in range(m):
        lineno = n + 3 + j
        tok = lines[n + 2 + j].split()
        if len(tok) != 2:
            raise GraphFormatError("edge line must be '<src> <dst>'", lineno, path)
        s, t = _ints(tok, lineno, path, "edge line")
        if s == t:
            raise GraphFormatError(f"self-loop on node {s}", lineno, path)
        if s < 0 or t < 0 or s >= n or t >= n:
            raise GraphFormatError(f"endpoint out of range for N={n}", lineno, path)
        if s > t:
            raise GraphFormatError("edge must be written with src < dst", lineno, path)
        if (s, t) in seen:
            raise GraphFormatError(f"duplicate edge {s} {t}", lineno, path)
        seen.add((s, t))
        edges[j] = (s, t)
    return Graph(feats, labels, edges, c)


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        for name in ("train", "val", "test"):
            a = np.array(getattr(self, name), dtype=np.int64).reshape(-1)
            if np.any(np.diff(a) <= 0):
                raise GraphError(f"{name} ids must be sorted and unique")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        parts = np.concatenate([self.train, self.val, self.test])
        if np.unique(parts).size != parts.size:
            raise GraphError("split parts must be pairwise disjoint")

    def check(self, num_nodes: int) -> None:
        for name in ("train", "val", "test"):
            a = getattr(self, name)
            if a.size and (a[0] < 0 or a[-1] >= num_nodes):
                raise GraphError(f"{name} ids out of range for N={num_nodes}")


def random_split(num_nodes: int, train: float, val: float, seed) -> Split:
    """Uniform random split; whatever is left after train and val becomes test."""
    perm = rng_from_seed(seed).permutation(num_nodes)
    n_tr = int(round(train * num_nodes))
    n_va = int(round(val * num_nodes))
    return Split(np.sort(perm[:n_tr]), np.sort(perm[n_tr:n_tr + n_va]), np.sort(perm[n_tr + n_va:]))


def save_split(split: Split, path) -> None:
    with open(path, "w", newline="\n") as fh:
        for name in ("train", "val", "test"):
            ids = " ".join(str(i) for i in getattr(split, name))
            fh.write(f"{name}: {ids}\n".replace(": \n", ":\n"))


def load_split(path) -> Split:
    path = os.fspath(path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    if len(lines) != 3:
        raise GraphFormatError("split file must have exactly 3 lines", None, path)
    parts = {}
    for lineno, (line, name) in enumerate(zip(lines, ("train", "val", "test")), start=1):
        key, _, rest = line.partition(":")
        if key.strip() != name:
            raise GraphFormatError(f"expected '{name}:'", lineno, path)
        parts[name] = _ints(rest.split(), lineno, path, f"{name} ids")
    try:
        return Split(**parts)
    except GraphError as exc:
        raise GraphFormatError(str(exc), None, path) from None


def induced_subgraph(g: Graph, ids: Sequence[int]) -> Graph:
    """Subgraph on ``ids`` (sorted, unique); node ``ids[k]`` becomes node ``k``."""
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size == 0:
        raise GraphError("induced_subgraph needs at least one node")
    if ids[0] < 0 or ids[-1] >= g.num_nodes:
        raise GraphError("node id out of range")
    if np.any(np.diff(ids) <= 0):
        raise GraphError("ids must be sorted and unique")
    pos = np.full(g.num_nodes, -1, dtype=np.int64)
    pos[ids] = np.arange(ids.size)
    mapped = pos[g.edges]
    keep = (mapped >= 0).all(axis=1)
    return Graph(g.features[ids], g.labels[ids], mapped[keep], g.num_classes)


def generate_sbm(seed, blocks, p_in: float, p_out: float, feature_means, feature_noise: float) -> Graph:
    """Undirected stochastic block model with Gaussian class-conditional features.

    ``blocks`` is a list of ``(size, class_id)``; ``feature_means[c]`` is the
    mean feature vector of class ``c``.  Features are quantized to 9
    significant digits so the result round-trips through gtxt exactly.
    """
    if not (0.0 <= p_in <= 1.0 and 0.0 <= p_out <= 1.0):
        raise ValueError("p_in and p_out must lie in [0, 1]")
    sizes = [int(s) for s, _ in blocks]
    if not sizes or min(sizes) <= 0:
        raise ValueError("block sizes must be positive")
    means = np.atleast_2d(np.asarray(feature_means, dtype=np.float64))
    block_class = np.array([int(c) for _, c in blocks])
    if block_class.min() < 0 or block_class.max() >= means.shape[0]:
        raise ValueError("block class id has no feature mean")

    rng = rng_from_seed(seed)
    membership = np.repeat(np.arange(len(sizes)), sizes)
    n = membership.size
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(membership[iu] == membership[ju], p_in, p_out)
    hit = rng.random(iu.size) < prob
    edges = np.stack([iu[hit], ju[hit]], axis=1)

    labels = block_class[membership]
    noise = rng.standard_normal((n, means.shape[1])) * feature_noise
    feats = quantize(means[labels] + noise)
    return Graph(feats, labels, edges, means.shape[0])
