"""Small dense numeric kernel: a layer-level tape, reverse-mode gradients, Adam.

Gradients are not derived by a general autodiff engine.  Every layer kind in
``LAYERS`` has a hand-written forward and backward pass; the :class:`Tape`
only records which layer consumed which values so :func:`backward` can
replay the records in reverse.

All arithmetic is float64.  Graph layers take their (fixed) propagation
matrix through ``adj``:

===========  ======================================================
kind         ``adj``
===========  ======================================================
gcn          symmetric-normalized ``D^-1/2 (A + I) D^-1/2``
gcn_lowrank  as gcn; the input is a left factor ``U`` of ``U @ right.T``
sage         row-normalized neighbor-mean matrix (no self-loops)
gat          CSR pattern of ``A + I``; only the structure is used
gin          raw 0/1 adjacency (sum aggregation, eps = 0)
===========  ======================================================
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ParamStore:
    """Named parameter matrices plus their Adam moments and step counts."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64, ndmin=2)
        if value.ndim != 2:
            raise ValueError(f"parameter {name!r} must be 2-D")
        self.params[name] = value
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        self.steps[name] = 0
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def slice(self, prefix: str) -> dict[str, np.ndarray]:
        """Parameters under ``prefix.``, keyed by their local name."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.params.items() if k.startswith(p)}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self.params[k][...] = v

    def num_values(self) -> int:
        return sum(v.size for v in self.params.values())


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


# -- layer kernels -----------------------------------------------------------
# forward(params, inputs, adj, **opts) -> (out, cache)
# backward(params, cache, gout, need) -> (input_grads, param_grads)


def _as_dense(g):
    return g.toarray() if sp.issparse(g) else g


def _fwd_identity(p, xs, adj):
    return xs[0].copy(), {}


def _bwd_identity(p, c, g, need):
    return [g if need[0] else None], {}


def _fwd_dense(p, xs, adj):
    x = xs[0]
    return x @ p["weight"] + p["bias"], {"x": x}


def _bwd_dense(p, c, g, need):
    grads = {"weight": c["x"].T @ g, "bias": g.sum(axis=0, keepdims=True)}
    return [g @ p["weight"].T if need[0] else None], grads


def _fwd_relu(p, xs, adj):
    x = xs[0]
    return np.maximum(x, 0.0), {"mask": x > 0}


def _bwd_relu(p, c, g, need):
    return [g * c["mask"] if need[0] else None], {}


def _fwd_leaky_relu(p, xs, adj, slope=0.2):
    x = xs[0]
    return np.where(x > 0, x, slope * x), {"mask": x > 0, "slope": slope}


def _bwd_leaky_relu(p, c, g, need):
    return [np.where(c["mask"], g, c["slope"] * g) if need[0] else None], {}


def _fwd_gcn(p, xs, adj):
    px = _as_dense(adj @ xs[0])
    return px @ p["weight"] + p["bias"], {"px": px, "adj": adj}


def _bwd_gcn(p, c, g, need):
    grads = {"weight": c["px"].T @ g, "bias": g.sum(axis=0, keepdims=True)}
    dx = c["adj"].T @ (g @ p["weight"].T) if need[0] else None
    return [dx], grads


def _fwd_gcn_lowrank(p, xs, adj, right=None):
    # input is the left factor U of X = U @ right.T; out = adj @ U @ (right.T @ W) + b
    pu = _as_dense(adj @ xs[0])
    vw = right.T @ p["weight"]
    return pu @ vw + p["bias"], {"pu": pu, "vw": vw, "right": right, "adj": adj}


def _bwd_gcn_lowrank(p, c, g, need):
    grads = {"weight": c["right"] @ (c["pu"].T @ g), "bias": g.sum(axis=0, keepdims=True)}
    dx = c["adj"].T @ (g @ c["vw"].T) if need[0] else None
    return [dx], grads


def _fwd_sage(p, xs, adj):
    x = xs[0]
    cat = np.hstack([x, _as_dense(adj @ x)])
    return cat @ p["weight"] + p["bias"], {"cat": cat, "adj": adj, "d": x.shape[1]}


def _bwd_sage(p, c, g, need):
    grads = {"weight": c["cat"].T @ g, "bias": g.sum(axis=0, keepdims=True)}
    dx = None
    if need[0]:
        dcat = g @ p["weight"].T
        d = c["d"]
        dx = dcat[:, :d] + c["adj"].T @ dcat[:, d:]
    return [dx], grads


def _fwd_gat(p, xs, adj, slope=0.2):
    x = xs[0]
    a = sp.csr_matrix(adj)
    indptr, cols = a.indptr, a.indices
    n = a.shape[0]
    rows = np.repeat(np.arange(n), np.diff(indptr))
    if (np.diff(indptr) == 0).any():
        raise ValueError("gat adjacency needs a self-loop on every node")
    h = x @ p["weight"]
    s_dst = (h @ p["att_dst"]).ravel()
    s_src = (h @ p["att_src"]).ravel()
    e = s_dst[rows] + s_src[cols]
    logit = np.where(e > 0, e, slope * e)
    top = np.maximum.reduceat(logit, indptr[:-1])
    ex = np.exp(logit - top[rows])
    alpha = ex / np.add.reduceat(ex, indptr[:-1])[rows]
    att = sp.csr_matrix((alpha, cols, indptr), shape=(n, n))
    out = att @ h + p["bias"]
    cache = {"x": x, "h": h, "rows": rows, "cols": cols, "indptr": indptr,
             "e": e, "alpha": alpha, "att": att, "slope": slope, "n": n}
    return out, cache


def _bwd_gat(p, c, g, need):
    h, rows, cols, alpha = c["h"], c["rows"], c["cols"], c["alpha"]
    n = c["n"]
    dh = c["att"].T @ g
    dalpha = np.einsum("ij,ij->i", g[rows], h[cols])
    weighted = np.add.reduceat(alpha * dalpha, c["indptr"][:-1])
    dlogit = alpha * (dalpha - weighted[rows])
    de = np.where(c["e"] > 0, dlogit, c["slope"] * dlogit)
    ds_dst = np.bincount(rows, weights=de, minlength=n)
    ds_src = np.bincount(cols, weights=de, minlength=n)
    dh = dh + np.outer(ds_dst, p["att_dst"]) + np.outer(ds_src, p["att_src"])
    grads = {
        "weight": c["x"].T @ dh,
        "att_dst": h.T @ ds_dst[:, None],
        "att_src": h.T @ ds_src[:, None],
        "bias": g.sum(axis=0, keepdims=True),
    }
    return [dh @ p["weight"].T if need[0] else None], grads


def _fwd_gin(p, xs, adj):
    x = xs[0]
    s = x + _as_dense(adj @ x)
    pre = s @ p["weight1"] + p["bias1"]
    r = np.maximum(pre, 0.0)
    return r @ p["weight2"] + p["bias2"], {"s": s, "pre": pre, "r": r, "adj": adj}


def _bwd_gin(p, c, g, need):
    dpre = (g @ p["weight2"].T) * (c["pre"] > 0)
    grads = {
        "weight2": c["r"].T @ g,
        "bias2": g.sum(axis=0, keepdims=True),
        "weight1": c["s"].T @ dpre,
        "bias1": dpre.sum(axis=0, keepdims=True),
    }
    dx = None
    if need[0]:
        ds = dpre @ p["weight1"].T
        dx = ds + c["adj"].T @ ds
    return [dx], grads


def _fwd_mean_pool(p, xs, adj, pool=None):
    x = xs[0]
    if pool is None:
        pool = sp.csr_matrix(np.full((1, x.shape[0]), 1.0 / x.shape[0]))
    return _as_dense(pool @ x), {"pool": pool}


def _bwd_mean_pool(p, c, g, need):
    return [_as_dense(c["pool"].T @ g) if need[0] else None], {}


def _fwd_softmax_ce(p, xs, adj, labels=None, mask=None):
    z = xs[0]
    idx = np.arange(z.shape[0]) if mask is None else np.asarray(mask)
    y = np.asarray(labels)[idx]
    zs = z[idx]
    shifted = zs - zs.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(idx.size), y].mean()
    return np.array([[loss]]), {"idx": idx, "y": y, "prob": np.exp(logp), "shape": z.shape}


def _bwd_softmax_ce(p, c, g, need):
    if not need[0]:
        return [None], {}
    idx, y = c["idx"], c["y"]
    d = c["prob"].copy()
    d[np.arange(idx.size), y] -= 1.0
    dz = np.zeros(c["shape"])
    dz[idx] = d * (g[0, 0] / idx.size)
    return [dz], {}


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _fwd_sigmoid_mse(p, xs, adj, targets=None):
    s = sigmoid(xs[0])
    t = np.asarray(targets, dtype=np.float64).reshape(s.shape)
    diff = s - t
    return np.array([[np.mean(diff ** 2)]]), {"s": s, "diff": diff}


def _bwd_sigmoid_mse(p, c, g, need):
    if not need[0]:
        return [None], {}
    s, diff = c["s"], c["diff"]
    return [g[0, 0] * 2.0 * diff * s * (1.0 - s) / diff.size], {}


def _fwd_mse(p, xs, adj, targets=None):
    diff = xs[0] - np.asarray(targets, dtype=np.float64).reshape(xs[0].shape)
    return np.array([[np.mean(diff ** 2)]]), {"diff": diff}


def _bwd_mse(p, c, g, need):
    diff = c["diff"]
    return [g[0, 0] * 2.0 * diff / diff.size if need[0] else None], {}


@dataclass(frozen=True)
class LayerKind:
    forward: Callable
    backward: Callable
    params: tuple[str, ...] = ()
    graph: bool = False


LAYERS: dict[str, LayerKind] = {
    "identity": LayerKind(_fwd_identity, _bwd_identity),
    "dense": LayerKind(_fwd_dense, _bwd_dense, ("weight", "bias")),
    "relu": LayerKind(_fwd_relu, _bwd_relu),
    "leaky_relu": LayerKind(_fwd_leaky_relu, _bwd_leaky_relu),
    "gcn": LayerKind(_fwd_gcn, _bwd_gcn, ("weight", "bias"), graph=True),
    "gcn_lowrank": LayerKind(_fwd_gcn_lowrank, _bwd_gcn_lowrank, ("weight", "bias"), graph=True),
    "sage": LayerKind(_fwd_sage, _bwd_sage, ("weight", "bias"), graph=True),
    "gat": LayerKind(_fwd_gat, _bwd_gat, ("weight", "att_src", "att_dst", "bias"), graph=True),
    "gin": LayerKind(_fwd_gin, _bwd_gin, ("weight1", "bias1", "weight2", "bias2"), graph=True),
    "mean_pool": LayerKind(_fwd_mean_pool, _bwd_mean_pool),
    "softmax_ce": LayerKind(_fwd_softmax_ce, _bwd_softmax_ce),
    "sigmoid_mse": LayerKind(_fwd_sigmoid_mse, _bwd_sigmoid_mse),
    "mse": LayerKind(_fwd_mse, _bwd_mse),
}


@dataclass
class LayerRecord:
    kind: str
    params: dict[str, np.ndarray]
    cache: dict
    out_shape: tuple[int, int]


def forward_layer(kind: str, params: dict[str, np.ndarray] | None, inputs, adj=None, **opts):
    """Run one layer; returns ``(output, record)`` where ``record`` feeds :func:`backward_layer`."""
    if kind not in LAYERS:
        raise ValueError(f"unknown layer kind {kind!r}")
    spec = LAYERS[kind]
    if spec.graph != (adj is not None):
        raise ValueError(f"layer {kind!r} {'needs' if spec.graph else 'takes no'} adjacency")
    params = params or {}
    missing = set(spec.params) - set(params)
    if missing:
        raise ValueError(f"layer {kind!r} missing parameters {sorted(missing)}")
    x = inputs[0]
    if x.ndim != 2:
        raise ValueError(f"layer {kind!r}: input must be 2-D, got shape {x.shape}")
    if spec.graph and adj.shape != (x.shape[0], x.shape[0]):
        raise ValueError(f"layer {kind!r}: adjacency {adj.shape} vs {x.shape[0]} nodes")
    w = params.get("weight", params.get("weight1"))
    if w is not None:
        fan_in = x.shape[1]
        if kind == "sage":
            fan_in *= 2
        elif kind == "gcn_lowrank":
            fan_in = opts["right"].shape[0]
        if w.shape[0] != fan_in:
            raise ValueError(f"layer {kind!r}: weight {w.shape} vs input width {x.shape[1]}")
    out, cache = spec.forward(params, inputs, adj, **opts)
    if not np.isfinite(out).all():
        raise FloatingPointError(f"non-finite output in layer {kind!r}")
    return out, LayerRecord(kind, params, cache, out.shape)


def backward_layer(record: LayerRecord, grad_out: np.ndarray, need=(True,)):
    if grad_out.shape != record.out_shape:
        raise ValueError(
            f"gradient shape {grad_out.shape} does not match {record.kind!r} output {record.out_shape}")
    spec = LAYERS[record.kind]
    return spec.backward(record.params, record.cache, grad_out, list(need))


class Var:
    """A value on the tape; ``grad`` is filled in by :func:`backward`."""

    __slots__ = ("value", "grad", "requires_grad", "_id")
    _ids = itertools.count()

    def __init__(self, value, requires_grad: bool = True):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self._id = next(Var._ids)

    @property
    def shape(self):
        return self.value.shape


@dataclass
class _Entry:
    record: LayerRecord
    inputs: list
    output: Var
    names: dict[str, str]


@dataclass
class Tape:
    entries: list = field(default_factory=list)

    def input(self, value, requires_grad: bool = False) -> Var:
        return Var(np.asarray(value, dtype=np.float64), requires_grad)

    def layer(self, kind: str, *inputs: Var, store: ParamStore | None = None,
              prefix: str | None = None, adj=None, **opts) -> Var:
        names = {}
        params = {}
        if LAYERS[kind].params:
            if store is None or prefix is None:
                raise ValueError(f"layer {kind!r} needs a ParamStore and a prefix")
            for local in LAYERS[kind].params:
                names[local] = f"{prefix}.{local}"
                params[local] = store[names[local]]
        out, rec = forward_layer(kind, params, [v.value for v in inputs], adj, **opts)
        var = Var(out, requires_grad=any(v.requires_grad for v in inputs) or bool(names))
        self.entries.append(_Entry(rec, list(inputs), var, names))
        return var


def backward(tape: Tape, loss_grad, store: ParamStore | None = None) -> dict[str, np.ndarray]:
    """Reverse pass over ``tape`` seeded with ``loss_grad`` at the last output.

    Returns parameter gradients by name.  Every parameter of ``store`` gets an
    entry, zero if the tape never touched it.  Input ``Var``s created with
    ``requires_grad=True`` receive their gradient in ``.grad``.
    """
    if not tape.entries:
        raise ValueError("empty tape")
    final = tape.entries[-1].output
    loss_grad = np.asarray(loss_grad, dtype=np.float64)
    if loss_grad.shape != final.shape:
        raise ValueError(f"loss gradient shape {loss_grad.shape} vs output {final.shape}")
    grads: dict[str, np.ndarray] = {}
    if store is not None:
        grads = {k: np.zeros_like(v) for k, v in store.items()}
    acc = {final._id: loss_grad}
    leaves = {}
    for entry in reversed(tape.entries):
        gout = acc.get(entry.output._id)
        if gout is None:
            continue
        entry.output.grad = gout
        need = [v.requires_grad for v in entry.inputs]
        in_grads, p_grads = backward_layer(entry.record, gout, need)
        for local, g in p_grads.items():
            name = entry.names[local]
            grads[name] = grads[name] + g if name in grads else g
        for v, g in zip(entry.inputs, in_grads):
            if g is None:
                continue
            g = _as_dense(g)
            acc[v._id] = acc[v._id] + g if v._id in acc else g
            leaves[v._id] = v
    for vid, v in leaves.items():
        v.grad = acc[vid]
    return grads


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float, wd: float = 0.0) -> None:
    """In-place Adam update with decoupled weight decay ``p <- p - lr*wd*p``."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name!r}")
    for name, g in grads.items():
        p = store.params[name]
        store.steps[name] += 1
        t = store.steps[name]
        m = store.m[name]
        v = store.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        m_hat = m / (1.0 - ADAM_BETA1 ** t)
        v_hat = v / (1.0 - ADAM_BETA2 ** t)
        if wd:
            p -= lr * wd * p
        p -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        if not np.isfinite(p).all():
            raise FloatingPointError(f"non-finite parameter {name!r} after Adam step")


def grad_check(forward: Callable[[ParamStore], tuple[Tape, Var]], store: ParamStore,
               h: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``forward(store)`` must build a fresh tape ending in a 1x1 loss.  The
    error per entry is ``|a - n| / max(1, |a|, |n|)``.
    """
    tape, loss = forward(store)
    analytic = backward(tape, np.ones_like(loss.value), store)
    worst = 0.0
    for name, p in store.items():
        a = analytic[name]
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = forward(store)[1].value[0, 0]
            p[idx] = old - h
            down = forward(store)[1].value[0, 0]
            p[idx] = old
            num = (up - down) / (2.0 * h)
            err = abs(a[idx] - num) / max(1.0, abs(a[idx]), abs(num))
            worst = max(worst, err)
    return worst


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint text."""


def format_params(params) -> list[str]:
    """Parameter blocks: ``name rows cols`` then one line of values per row.

    Values use 17 significant digits so float64 parameters round-trip exactly.
    """
    lines = []
    for name, p in params.items():
        rows, cols = p.shape
        lines.append(f"{name} {rows} {cols}")
        lines.extend(" ".join(f"{v:.17g}" for v in row) for row in p)
    return lines


def parse_params(lines: list[str], start: int, path=None) -> dict[str, np.ndarray]:
    """Inverse of :func:`format_params`; ``start`` is the 0-based index of the first block."""
    out = {}
    i = start
    while i < len(lines):
        head = lines[i].split()
        if len(head) != 3:
            raise CheckpointError(f"{path}:{i + 1}: expected '<name> <rows> <cols>'")
        name = head[0]
        try:
            rows, cols = int(head[1]), int(head[2])
        except ValueError:
            raise CheckpointError(f"{path}:{i + 1}: bad block shape") from None
        if i + 1 + rows > len(lines):
            raise CheckpointError(f"{path}:{len(lines)}: truncated block {name!r}")
        arr = np.empty((rows, cols))
        for r in range(rows):
            lineno = i + 2 + r
            tok = lines[lineno - 1].split()
            if len(tok) != cols:
                raise CheckpointError(f"{path}:{lineno}: expected {cols} values in {name!r}")
            try:
                arr[r] = [float(t) for t in tok]
            except ValueError:
                raise CheckpointError(f"{path}:{lineno}: bad value in {name!r}") from None
            if not np.isfinite(arr[r]).all():
                raise CheckpointError(f"{path}:{lineno}: non-finite value in {name!r}")
        if name in out:
            raise CheckpointError(f"{path}:{i + 1}: duplicate block {name!r}")
        out[name] = arr
        i += 1 + rows
    return out
