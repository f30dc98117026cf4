"""The accuracy regressor: GCN -> ReLU -> GCN -> mean pool -> dense -> sigmoid.

Training is full batch.  All DiscGraphs are stacked into one block-diagonal
graph, and a sparse pooling matrix averages each block, so a single tape
covers the whole set.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .discrepancy import BindingError, DiscGraph
from .graphio import Graph, rng_from_seed
from .nn import (CheckpointError, ParamStore, Tape, adam_step, backward, format_params,
                 glorot_uniform, parse_params, sigmoid)
from .zoo import normalized_adjacency, parse_config_line

log = logging.getLogger(__name__)

EVAL_MAGIC = "#gnneval v1"
OUTPUT_EPS = 1e-12
# singular values below this fraction of the largest are dropped when factoring inputs
RANK_RTOL = 1e-9


@dataclass(frozen=True)
class EvaluatorConfig:
    input_dim: int
    hidden_dim: int = 128
    lr: float = 1e-3
    wd: float = 0.0
    epochs: int = 300
    seed: int = 0
    val_fraction: float = 0.1
    head: str = "sigmoid"

    def __post_init__(self):
        if self.input_dim <= 0 or self.hidden_dim <= 0:
            raise ValueError("input_dim and hidden_dim must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.head not in ("sigmoid", "linear"):
            raise ValueError("head must be 'sigmoid' or 'linear'")


@dataclass(frozen=True, eq=False)
class TrainedEvaluator:
    config: EvaluatorConfig
    params: dict
    model_id: str
    train_graph_id: str
    best_epoch: int = 0
    best_mse: float = float("nan")

    def __post_init__(self):
        for p in self.params.values():
            p.setflags(write=False)


def init_params(cfg: EvaluatorConfig) -> ParamStore:
    rng = rng_from_seed(cfg.seed)
    store = ParamStore()
    store.add("conv0.weight", glorot_uniform(rng, cfg.input_dim, cfg.hidden_dim))
    store.add("conv0.bias", np.zeros((1, cfg.hidden_dim)))
    store.add("conv1.weight", glorot_uniform(rng, cfg.hidden_dim, cfg.hidden_dim))
    store.add("conv1.bias", np.zeros((1, cfg.hidden_dim)))
    store.add("head.weight", glorot_uniform(rng, cfg.hidden_dim, 1))
    store.add("head.bias", np.zeros((1, 1)))
    return store


@dataclass
class _Batch:
    x: np.ndarray
    adj: sp.csr_matrix
    pool: sp.csr_matrix
    y: np.ndarray | None
    right: np.ndarray | None = None


def _factor(x: np.ndarray):
    """Thin factorization ``x ~= left @ right.T`` when ``x`` is numerically low-rank.

    Discrepancy attributes are cosine similarities of ``embed_dim``-wide
    embeddings, so their rank is tiny compared with ``N``; running the first
    layer on the factors avoids the ``rows x N x hidden`` product.
    """
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    r = int(np.count_nonzero(s > RANK_RTOL * s[0])) if s.size and s[0] > 0 else 0
    if r == 0 or 2 * r > min(x.shape):
        return None
    return u[:, :r] * s[:r], vt[:r].T


def _disc_adjacency(d: DiscGraph) -> sp.csr_matrix:
    g = Graph(np.zeros((d.num_nodes, 0)), np.full(d.num_nodes, -1), d.edges, 1)
    return normalized_adjacency(g)


def _batch(discs, labeled: bool) -> _Batch:
    x = np.vstack([d.attrs for d in discs])
    adj = sp.csr_matrix(sp.block_diag([_disc_adjacency(d) for d in discs], format="csr"))
    sizes = np.array([d.num_nodes for d in discs])
    rows = np.repeat(np.arange(len(discs)), sizes)
    pool = sp.csr_matrix((1.0 / sizes[rows], (rows, np.arange(rows.size))),
                         shape=(len(discs), rows.size))
    y = np.array([[d.label] for d in discs], dtype=np.float64) if labeled else None
    factored = _factor(x)
    if factored is None:
        return _Batch(x, adj, pool, y)
    return _Batch(factored[0], adj, pool, y, factored[1])


def _regress(cfg: EvaluatorConfig, params, tape: Tape, b: _Batch):
    h = tape.input(b.x)
    if b.right is None:
        h = tape.layer("gcn", h, store=params, prefix="conv0", adj=b.adj)
    else:
        h = tape.layer("gcn_lowrank", h, store=params, prefix="conv0", adj=b.adj, right=b.right)
    h = tape.layer("relu", h)
    h = tape.layer("gcn", h, store=params, prefix="conv1", adj=b.adj)
    h = tape.layer("mean_pool", h, pool=b.pool)
    return tape.layer("dense", h, store=params, prefix="head")


def _loss(cfg, tape, raw, y):
    return tape.layer("sigmoid_mse" if cfg.head == "sigmoid" else "mse", raw, targets=y)


def _predict(cfg, params, b: _Batch) -> np.ndarray:
    raw = _regress(cfg, params, Tape(), b).value.ravel()
    if cfg.head == "linear":
        return raw
    return np.clip(sigmoid(raw), OUTPUT_EPS, 1.0 - OUTPUT_EPS)


def _mse(cfg, params, b: _Batch) -> float:
    return float(np.mean((_predict(cfg, params, b) - b.y.ravel()) ** 2))


def train_evaluator(discs, cfg: EvaluatorConfig) -> TrainedEvaluator:
    """Fit the regressor to the labeled DiscGraphs by full-batch Adam on MSE.

    A ``val_fraction`` share of the DiscGraphs (chosen with the config seed)
    is held out, and the snapshot with the lowest held-out MSE is returned.
    With ``val_fraction=0`` the training MSE is monitored instead.  The
    initial parameters are a candidate snapshot too.
    """
    discs = list(discs)
    if len(discs) < 2:
        raise ValueError("need at least two DiscGraphs")
    if any(d.label is None for d in discs):
        raise ValueError("every training DiscGraph must carry an accuracy label")
    widths = {d.train_node_count for d in discs}
    if widths != {cfg.input_dim}:
        raise ValueError(f"DiscGraph widths {sorted(widths)} do not match input_dim {cfg.input_dim}")
    bindings = {d.binding for d in discs}
    if len(bindings) != 1:
        raise BindingError("DiscGraphs come from different (model, training graph) pairs")
    model_id, train_graph_id = bindings.pop()

    n_val = int(round(cfg.val_fraction * len(discs)))
    n_val = min(n_val, len(discs) - 1)
    order = rng_from_seed(cfg.seed, 1).permutation(len(discs))
    val_idx, tr_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    train_b = _batch([discs[i] for i in tr_idx], True)
    val_b = _batch([discs[i] for i in val_idx], True) if n_val else None

    store = init_params(cfg)
    best_mse, best_epoch, best = np.inf, 0, store.snapshot()
    for epoch in range(cfg.epochs + 1):
        tape = Tape()
        raw = _regress(cfg, store, tape, train_b)
        loss = _loss(cfg, tape, raw, train_b.y)
        if not np.isfinite(loss.value).all():
            raise FloatingPointError(f"non-finite evaluator loss at epoch {epoch}")
        monitored = _mse(cfg, store, val_b) if val_b is not None else float(loss.value[0, 0])
        if monitored < best_mse:
            best_mse, best_epoch, best = monitored, epoch, store.snapshot()
        if epoch == cfg.epochs:
            break
        adam_step(store, backward(tape, np.ones((1, 1)), store), cfg.lr, cfg.wd)
    log.debug("evaluator: best monitored MSE %.3g at epoch %d", best_mse, best_epoch)
    return TrainedEvaluator(cfg, best, model_id, train_graph_id, best_epoch, float(best_mse))


def _check(ev: TrainedEvaluator, d: DiscGraph):
    if d.train_node_count != ev.config.input_dim:
        raise ValueError(f"DiscGraph width {d.train_node_count} != evaluator input_dim "
                         f"{ev.config.input_dim}")
    if d.binding != (ev.model_id, ev.train_graph_id):
        raise BindingError(f"DiscGraph bound to {d.binding}, evaluator to "
                           f"{(ev.model_id, ev.train_graph_id)}")


def estimate_accuracy(ev: TrainedEvaluator, d: DiscGraph) -> float:
    """Predicted accuracy of the bound classifier on the graph behind ``d``."""
    _check(ev, d)
    return float(_predict(ev.config, ev.params, _batch([d], False))[0])


def estimate_many(ev: TrainedEvaluator, discs) -> np.ndarray:
    discs = list(discs)
    for d in discs:
        _check(ev, d)
    return _predict(ev.config, ev.params, _batch(discs, False))


def mse_on(ev: TrainedEvaluator, discs) -> float:
    return _mse(ev.config, ev.params, _batch(list(discs), True))


def format_evaluator(ev: TrainedEvaluator) -> str:
    c = ev.config
    cfg_line = (f"input_dim={c.input_dim} hidden_dim={c.hidden_dim} lr={c.lr!r} wd={c.wd!r} "
                f"epochs={c.epochs} seed={c.seed} val_fraction={c.val_fraction!r} head={c.head} "
                f"best_epoch={ev.best_epoch} best_mse={ev.best_mse!r}")
    bound = f"bound: {ev.model_id} {ev.train_graph_id} {c.input_dim}"
    return "\n".join([EVAL_MAGIC, cfg_line, bound, *format_params(ev.params)]) + "\n"


def save_evaluator(ev: TrainedEvaluator, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(format_evaluator(ev))


def load_evaluator(path) -> TrainedEvaluator:
    path = os.fspath(path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != EVAL_MAGIC:
        raise CheckpointError(f"{path}:1: missing '{EVAL_MAGIC}' header")
    if len(lines) < 2:
        raise CheckpointError(f"{path}:2: truncated checkpoint (no config line)")
    kv = parse_config_line(lines[1], path)
    try:
        cfg = EvaluatorConfig(
            input_dim=int(kv["input_dim"]), hidden_dim=int(kv["hidden_dim"]), lr=float(kv["lr"]),
            wd=float(kv["wd"]), epochs=int(kv["epochs"]), seed=int(kv["seed"]),
            val_fraction=float(kv["val_fraction"]), head=kv["head"])
        best_epoch, best_mse = int(kv["best_epoch"]), float(kv["best_mse"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}:2: bad config line: {exc}") from None
    bound = lines[2].split() if len(lines) > 2 else []
    if len(bound) != 4 or bound[0] != "bound:":
        raise CheckpointError(f"{path}:3: missing binding line 'bound: <model-id> <train-graph-id> <N>'")
    if bound[3] != str(cfg.input_dim):
        raise CheckpointError(f"{path}:3: bound N={bound[3]} disagrees with input_dim {cfg.input_dim}")
    params = parse_params(lines, 3, path)
    expected = init_params(cfg)
    if set(params) != set(expected):
        raise CheckpointError(f"{path}: parameter set {sorted(params)} != {sorted(expected)}")
    for name, p in params.items():
        if p.shape != expected[name].shape:
            raise CheckpointError(f"{path}: {name!r} has shape {p.shape}, expected {expected[name].shape}")
    ordered = {name: params[name] for name in expected}
    return TrainedEvaluator(cfg, ordered, bound[1], bound[2], best_epoch, best_mse)
