"""Node classifiers (GCN, SAGE, GAT, GIN, MLP), their training loop and checkpoints.

Every architecture is ``num_layers`` message-passing layers with ReLU in
between, producing the ``embed_dim``-wide node embedding ``Z``.  A dense head
maps ``Z`` to class logits.  ``Z`` (not the logits) is what the discrepancy
attributes are computed from.
"""
from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .graphio import UNLABELED, Graph, Split, graph_id, rng_from_seed
from .nn import (CheckpointError, ParamStore, Tape, adam_step, backward, format_params,
                 glorot_uniform, parse_params)

log = logging.getLogger(__name__)

ARCHS = ("GCN", "SAGE", "GAT", "GIN", "MLP")

# learning rate and weight decay per architecture (identical across datasets)
DEFAULT_HPARAMS = {
    "GCN": (0.01, 1e-5),
    "SAGE": (0.005, 1e-6),
    "GAT": (0.005, 1e-6),
    "GIN": (0.01, 1e-6),
    "MLP": (0.001, 1e-5),
}

_CONV_KIND = {"GCN": "gcn", "SAGE": "sage", "GAT": "gat", "GIN": "gin", "MLP": "dense"}

CKPT_MAGIC = "#gnnckpt v1"


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    arch: str
    in_dim: int
    num_classes: int
    num_layers: int = 2
    hidden_dim: int = 128
    embed_dim: int = 16
    lr: float = 0.01
    wd: float = 1e-5
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        for name in ("in_dim", "num_classes", "num_layers", "hidden_dim", "embed_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_epochs < 0 or self.patience < 0:
            raise ValueError("max_epochs and patience must be non-negative")

    @classmethod
    def for_arch(cls, arch: str, in_dim: int, num_classes: int, **overrides) -> "ModelConfig":
        lr, wd = DEFAULT_HPARAMS[arch]
        return cls(arch=arch, in_dim=in_dim, num_classes=num_classes, lr=lr, wd=wd, **overrides)

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.in_dim] + [self.hidden_dim] * (self.num_layers - 1) + [self.embed_dim]
        return list(zip(dims[:-1], dims[1:]))


@dataclass(frozen=True, eq=False)
class TrainedModel:
    config: ModelConfig
    params: dict
    source_graph_id: str
    best_val_acc: float = float("nan")
    best_epoch: int = 0

    def __post_init__(self):
        for p in self.params.values():
            p.setflags(write=False)


def normalized_adjacency(g: Graph) -> sp.csr_matrix:
    """``D^-1/2 (A + I) D^-1/2`` with ``D`` the degree matrix of ``A + I``."""
    a = g.adjacency + sp.identity(g.num_nodes, format="csr")
    inv_sqrt = 1.0 / np.sqrt(np.asarray(a.sum(axis=1)).ravel())
    d = sp.diags(inv_sqrt)
    out = sp.csr_matrix(d @ a @ d)
    out.sort_indices()
    return out


def mean_adjacency(g: Graph) -> sp.csr_matrix:
    """Row-normalized adjacency; isolated nodes get an all-zero row."""
    deg = g.degrees().astype(np.float64)
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    return sp.csr_matrix(sp.diags(inv) @ g.adjacency)


def self_loop_adjacency(g: Graph) -> sp.csr_matrix:
    out = sp.csr_matrix(g.adjacency + sp.identity(g.num_nodes, format="csr"))
    out.sort_indices()
    return out


def propagation(arch: str, g: Graph):
    if arch == "GCN":
        return normalized_adjacency(g)
    if arch == "SAGE":
        return mean_adjacency(g)
    if arch == "GAT":
        return self_loop_adjacency(g)
    if arch == "GIN":
        return g.adjacency
    return None


def init_params(cfg: ModelConfig) -> ParamStore:
    rng = rng_from_seed(cfg.seed)
    store = ParamStore()
    for i, (fi, fo) in enumerate(cfg.layer_dims()):
        pre = f"conv{i}"
        if cfg.arch == "SAGE":
            store.add(f"{pre}.weight", glorot_uniform(rng, 2 * fi, fo))
        elif cfg.arch == "GIN":
            store.add(f"{pre}.weight1", glorot_uniform(rng, fi, fo))
            store.add(f"{pre}.bias1", np.zeros((1, fo)))
            store.add(f"{pre}.weight2", glorot_uniform(rng, fo, fo))
            store.add(f"{pre}.bias2", np.zeros((1, fo)))
            continue
        else:
            store.add(f"{pre}.weight", glorot_uniform(rng, fi, fo))
        if cfg.arch == "GAT":
            store.add(f"{pre}.att_src", glorot_uniform(rng, fo, 1))
            store.add(f"{pre}.att_dst", glorot_uniform(rng, fo, 1))
        store.add(f"{pre}.bias", np.zeros((1, fo)))
    store.add("head.weight", glorot_uniform(rng, cfg.embed_dim, cfg.num_classes))
    store.add("head.bias", np.zeros((1, cfg.num_classes)))
    return store


def forward(cfg: ModelConfig, params, tape: Tape, x, adj):
    """Record the classifier on ``tape``; returns the ``(Z, logits)`` vars."""
    kind = _CONV_KIND[cfg.arch]
    h = tape.input(x)
    for i in range(cfg.num_layers):
        if i:
            h = tape.layer("relu", h)
        h = tape.layer(kind, h, store=params, prefix=f"conv{i}", adj=adj)
    z = h
    logits = tape.layer("dense", z, store=params, prefix="head")
    return z, logits


def accuracy(yhat, y) -> float:
    """Fraction of positions where ``yhat`` equals ``y``."""
    yhat = np.asarray(yhat).reshape(-1)
    y = np.asarray(y).reshape(-1)
    if yhat.size != y.size:
        raise ValueError(f"length mismatch: {yhat.size} predictions vs {y.size} labels")
    if y.size == 0:
        raise ValueError("accuracy of an empty label vector")
    if (y == UNLABELED).any():
        raise ValueError("accuracy needs every node labeled")
    return int(np.count_nonzero(yhat == y)) / y.size


def train_classifier(g: Graph, split: Split, cfg: ModelConfig) -> TrainedModel:
    """Full-graph (transductive) training on the train nodes with Adam.

    Keeps the parameters with the best validation accuracy (earliest on ties)
    and stops after ``cfg.patience`` epochs without improvement.
    """
    split.check(g.num_nodes)
    if split.train.size == 0 or split.val.size == 0:
        raise ValueError("train and val splits must be nonempty")
    if (g.labels[np.concatenate([split.train, split.val])] == UNLABELED).any():
        raise ValueError("train/val nodes must be labeled")
    if g.feature_dim != cfg.in_dim:
        raise ValueError(f"graph has {g.feature_dim} features, config expects {cfg.in_dim}")

    store = init_params(cfg)
    adj = propagation(cfg.arch, g)
    y_val = g.labels[split.val]
    best_acc, best_epoch, best = -1.0, 0, store.snapshot()
    epoch = 0
    while True:
        tape = Tape()
        try:
            _, logits = forward(cfg, store, tape, g.features, adj)
            loss = tape.layer("softmax_ce", logits, labels=g.labels, mask=split.train)
        except FloatingPointError as exc:
            raise TrainingError(f"{cfg.arch} seed {cfg.seed}: diverged at epoch {epoch}: {exc}") from exc
        acc = accuracy(logits.value[split.val].argmax(axis=1), y_val)
        if acc > best_acc:
            best_acc, best_epoch, best = acc, epoch, store.snapshot()
        if epoch >= cfg.max_epochs or epoch - best_epoch >= cfg.patience:
            break
        grads = backward(tape, np.ones((1, 1)), store)
        try:
            adam_step(store, grads, cfg.lr, cfg.wd)
        except FloatingPointError as exc:
            raise TrainingError(f"{cfg.arch} seed {cfg.seed}: diverged at epoch {epoch}: {exc}") from exc
        epoch += 1
    log.debug("%s seed %d: best val acc %.4f at epoch %d", cfg.arch, cfg.seed, best_acc, best_epoch)
    return TrainedModel(cfg, best, graph_id(g), best_acc, best_epoch)


def model_outputs(m: TrainedModel, g: Graph) -> tuple[np.ndarray, np.ndarray]:
    """Node embeddings ``Z`` and class logits of ``m`` on ``g``."""
    if g.feature_dim != m.config.in_dim:
        raise ValueError(f"graph has {g.feature_dim} features, model expects {m.config.in_dim}")
    z, logits = forward(m.config, m.params, Tape(), g.features, propagation(m.config.arch, g))
    return z.value, logits.value


def embed_and_predict(m: TrainedModel, g: Graph) -> tuple[np.ndarray, np.ndarray]:
    z, logits = model_outputs(m, g)
    return z, logits.argmax(axis=1)


def _config_line(m: TrainedModel) -> str:
    c = m.config
    return (f"arch={c.arch} in_dim={c.in_dim} num_classes={c.num_classes} "
            f"num_layers={c.num_layers} hidden_dim={c.hidden_dim} embed_dim={c.embed_dim} "
            f"lr={c.lr!r} wd={c.wd!r} max_epochs={c.max_epochs} patience={c.patience} "
            f"seed={c.seed} source={m.source_graph_id} best_val_acc={m.best_val_acc!r} "
            f"best_epoch={m.best_epoch}")


def format_model(m: TrainedModel) -> str:
    return "\n".join([CKPT_MAGIC, _config_line(m), *format_params(m.params)]) + "\n"


def model_id(m: TrainedModel) -> str:
    return hashlib.sha256(format_model(m).encode("ascii")).hexdigest()[:16]


def save_model(m: TrainedModel, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(format_model(m))


_INT_KEYS = ("in_dim", "num_classes", "num_layers", "hidden_dim", "embed_dim",
             "max_epochs", "patience", "seed", "best_epoch")


def parse_config_line(line: str, path, lineno: int = 2) -> dict[str, str]:
    out = {}
    for tok in line.split():
        key, sep, val = tok.partition("=")
        if not sep:
            raise CheckpointError(f"{path}:{lineno}: expected key=value, got {tok!r}")
        out[key] = val
    return out


def load_model(path) -> TrainedModel:
    path = os.fspath(path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CKPT_MAGIC:
        raise CheckpointError(f"{path}:1: missing '{CKPT_MAGIC}' header")
    if len(lines) < 2:
        raise CheckpointError(f"{path}:2: truncated checkpoint (no config line)")
    kv = parse_config_line(lines[1], path)
    try:
        cfg = ModelConfig(
            arch=kv["arch"], lr=float(kv["lr"]), wd=float(kv["wd"]),
            **{k: int(kv[k]) for k in _INT_KEYS if k != "best_epoch"})
        source = kv["source"]
        best_acc = float(kv["best_val_acc"])
        best_epoch = int(kv["best_epoch"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}:2: bad config line: {exc}") from None
    params = parse_params(lines, 2, path)
    expected = init_params(cfg)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise CheckpointError(f"{path}: parameter set mismatch for {cfg.arch} "
                              f"(missing {missing}, unexpected {extra}); truncated file?")
    for name, p in params.items():
        if p.shape != expected[name].shape:
            raise CheckpointError(f"{path}: shape of {name!r} is {p.shape}, "
                                  f"{cfg.arch} expects {expected[name].shape}")
    ordered = {name: params[name] for name in expected}
    return TrainedModel(cfg, ordered, source, best_acc, best_epoch)
