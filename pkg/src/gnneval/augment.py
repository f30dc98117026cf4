"""Seed subgraph extraction and meta-graph synthesis.

Four operators perturb a labeled seed graph: EdgeDrop, Subgraph, AttrMask and
NodeMix.  Each one takes a ratio ``p`` in (0, 1) and a numpy ``Generator``;
the number of affected items is always ``round(p * n)`` (halves round up),
so counts are exact and testable.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .graphio import Graph, GraphError, Split, induced_subgraph, rng_from_seed, save_graph

OPERATORS = ("EdgeDrop", "Subgraph", "AttrMask", "NodeMix")
RESTART_PROB = 0.15
STALL_STEPS = 100


def count_for(p: float, n: int) -> int:
    """``round(p * n)`` with halves rounded up."""
    return int(math.floor(p * n + 0.5))


def _check_ratio(p):
    if not 0.0 < p < 1.0:
        raise ValueError(f"augmentation ratio must lie in (0, 1), got {p}")


def seed_subgraph(g: Graph, split: Split) -> Graph:
    """Induced subgraph on the validation and test nodes."""
    split.check(g.num_nodes)
    ids = np.union1d(split.val, split.test)
    if ids.size == 0:
        raise GraphError("val and test are both empty; no seed subgraph")
    return induced_subgraph(g, ids)


def edge_drop(g: Graph, p: float, rng: np.random.Generator) -> Graph:
    _check_ratio(p)
    k = count_for(p, g.num_edges)
    if k == 0:
        return g
    drop = rng.choice(g.num_edges, size=k, replace=False)
    keep = np.ones(g.num_edges, dtype=bool)
    keep[drop] = False
    return g.replace(edges=g.edges[keep])


def subgraph_nodes(g: Graph, p: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted node ids kept by a random walk with restart.

    The walk restarts at its start node with probability 0.15.  After 100
    steps without reaching a new node, a uniformly chosen unvisited node is
    added and becomes the new start.
    """
    _check_ratio(p)
    n = g.num_nodes
    target = count_for(1.0 - p, n)
    if target == 0:
        raise GraphError(f"subgraph ratio {p} leaves no nodes out of {n}")
    adj = g.adjacency
    start = int(rng.integers(n))
    visited = {start}
    cur = start
    stalled = 0
    while len(visited) < target:
        nbrs = adj.indices[adj.indptr[cur]:adj.indptr[cur + 1]]
        if nbrs.size == 0 or rng.random() < RESTART_PROB:
            cur = start
        else:
            cur = int(nbrs[rng.integers(nbrs.size)])
        if cur in visited:
            stalled += 1
        else:
            visited.add(cur)
            stalled = 0
        if stalled >= STALL_STEPS:
            rest = np.setdiff1d(np.arange(n), np.fromiter(visited, dtype=np.int64))
            start = cur = int(rest[rng.integers(rest.size)])
            visited.add(cur)
            stalled = 0
    return np.array(sorted(visited), dtype=np.int64)


def subgraph_sample(g: Graph, p: float, rng: np.random.Generator) -> Graph:
    return induced_subgraph(g, subgraph_nodes(g, p, rng))


def attr_mask(g: Graph, p: float, rng: np.random.Generator) -> Graph:
    """Zero the whole feature vector of ``round(p*N)`` random nodes."""
    _check_ratio(p)
    k = count_for(p, g.num_nodes)
    if k == 0:
        return g
    x = g.features.copy()
    x[rng.choice(g.num_nodes, size=k, replace=False)] = 0.0
    return g.replace(features=x)


def node_mix(g: Graph, p: float, rng: np.random.Generator) -> Graph:
    """Mix ``round(p*N)`` node features toward a random partner, keeping the node's label.

    ``x_u <- lam * x_u + (1 - lam) * x_v`` with ``lam ~ U[0.5, 1)`` and the
    partner ``v != u`` drawn uniformly; partners contribute their original
    (unmixed) features.
    """
    _check_ratio(p)
    n = g.num_nodes
    if n < 2:
        raise GraphError("node_mix needs at least two nodes")
    k = count_for(p, n)
    if k == 0:
        return g
    targets = rng.choice(n, size=k, replace=False)
    partners = rng.integers(n - 1, size=k)
    partners += partners >= targets
    lam = rng.uniform(0.5, 1.0, size=k)[:, None]
    x0 = g.features
    x = x0.copy()
    x[targets] = lam * x0[targets] + (1.0 - lam) * x0[partners]
    return g.replace(features=x)


APPLY = {
    "EdgeDrop": edge_drop,
    "Subgraph": subgraph_sample,
    "AttrMask": attr_mask,
    "NodeMix": node_mix,
}


@dataclass(frozen=True)
class AugmentConfig:
    K: int = 400
    seed: int = 0
    weights: tuple = (1.0, 1.0, 1.0, 1.0)
    p_ranges: tuple = ((0.1, 0.9),) * 4
    chain_length: int = 1

    def __post_init__(self):
        w = tuple(float(v) for v in self.weights)
        if len(w) != len(OPERATORS) or min(w) < 0 or sum(w) == 0:
            raise ValueError("weights: four non-negative values, not all zero")
        ranges = tuple((float(lo), float(hi)) for lo, hi in self.p_ranges)
        if len(ranges) != len(OPERATORS):
            raise ValueError("p_ranges needs one [lo, hi] per operator")
        for lo, hi in ranges:
            if not 0.0 < lo <= hi < 1.0:
                raise ValueError(f"bad ratio range [{lo}, {hi}]")
        if self.K <= 0 or self.chain_length <= 0:
            raise ValueError("K and chain_length must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "p_ranges", ranges)


@dataclass(frozen=True, eq=False)
class MetaGraph:
    graph: Graph
    index: int
    ops: tuple
    ps: tuple
    seed: tuple = field(default=())

    def provenance(self) -> tuple:
        return (self.index, self.ops, self.ps, self.seed,
                self.graph.num_nodes, self.graph.num_edges)


def augment_once(seedg: Graph, cfg: AugmentConfig, i: int) -> MetaGraph:
    rng = rng_from_seed(cfg.seed, i)
    probs = np.array(cfg.weights) / sum(cfg.weights)
    g = seedg
    ops, ps = [], []
    for _ in range(cfg.chain_length):
        k = int(rng.choice(len(OPERATORS), p=probs))
        lo, hi = cfg.p_ranges[k]
        p = float(rng.uniform(lo, hi)) if hi > lo else lo
        try:
            g = APPLY[OPERATORS[k]](g, p, rng)
        except (GraphError, ValueError) as exc:
            raise GraphError(f"meta-graph {i}: {OPERATORS[k]}(p={p:.4f}) failed: {exc}") from exc
        ops.append(OPERATORS[k])
        ps.append(p)
    return MetaGraph(g, i, tuple(ops), tuple(ps), (cfg.seed, i))


def build_meta_set(seedg: Graph, cfg: AugmentConfig) -> list[MetaGraph]:
    """``cfg.K`` augmented copies of ``seedg``; graph ``i`` uses its own stream ``(seed, i)``."""
    if not seedg.has_labels:
        raise GraphError("seed subgraph must be fully labeled")
    return [augment_once(seedg, cfg, i) for i in range(cfg.K)]


MANIFEST_FIELDS = ("i", "ops", "ps", "seed", "num_nodes", "num_edges", "acc_label")


def write_meta_set(metas, out_dir, labels=None) -> str:
    """Write ``meta_{i}.gtxt`` files plus ``manifest.csv``; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "manifest.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for j, mg in enumerate(metas):
            save_graph(mg.graph, os.path.join(out_dir, f"meta_{mg.index}.gtxt"))
            label = "pending" if labels is None else repr(float(labels[j]))
            w.writerow([mg.index, "+".join(mg.ops), "+".join(repr(p) for p in mg.ps),
                        ":".join(str(s) for s in mg.seed), mg.graph.num_nodes,
                        mg.graph.num_edges, label])
    return path
