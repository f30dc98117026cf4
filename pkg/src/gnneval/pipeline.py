"""Experiment stages: train classifiers, build DiscGraphs, fit evaluators, estimate, report.

Each stage reads and writes plain files under one output directory, so stages
can be rerun independently::

    out/
      run_manifest.txt               every resolved setting, one key=value per line
      models/{ARCH}_s{seed}.ckpt     classifier checkpoints + models/manifest.csv
      meta/meta_{i}.gtxt             meta-graph set + meta/manifest.csv
      disc/{ARCH}_s{seed}/           disc_{i}.disc + manifest.csv + summary.csv
      evaluators/{ARCH}_s{seed}.ckpt evaluator checkpoints + evaluators/manifest.csv
      results/gnnevaluator.csv       estimates (method,model,seed,source,target,...)
      results/baselines.csv
      report/mae.csv                 MAE in percentage points per method x arch
      heatmaps/                      optional raw discrepancy-attribute matrices
"""
from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from . import baselines as bl
from .augment import AugmentConfig, attr_mask, build_meta_set, edge_drop, seed_subgraph, write_meta_set
from .discrepancy import DiscrepancyBuilder, load_discgraph, save_discgraph
from .evaluator import EvaluatorConfig, estimate_accuracy, load_evaluator, save_evaluator, train_evaluator
from .graphio import (Graph, generate_sbm, graph_id, load_graph, load_split, random_split,
                      rng_from_seed, save_graph, save_split)
from .zoo import (ARCHS, ModelConfig, TrainingError, accuracy, embed_and_predict, load_model,
                  model_id, model_outputs, save_model, train_classifier)

log = logging.getLogger(__name__)

RESULT_FIELDS = ("method", "model", "seed", "source", "target", "estimate", "truth", "abs_error")
ATC_METHODS = ("ATC-MC", "ATC-MC-c", "ATC-NE", "ATC-NE-c")
NA = "NA"


class ConfigError(ValueError):
    """Bad or inconsistent run configuration (CLI exit code 2)."""


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _strs(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ranges(text: str) -> tuple[tuple[float, float], ...]:
    out = []
    for part in _strs(text):
        lo, _, hi = part.partition(":")
        out.append((float(lo), float(hi or lo)))
    return tuple(out)


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ",".join(f"{lo!r}:{hi!r}" for lo, hi in v)
        return ",".join(_fmt_value(x) for x in v)
    return str(v)


@dataclass
class RunConfig:
    source: str = ""
    split: str = ""
    targets: tuple = ()
    out: str = "out"
    seed: int = 0
    threads: int = 1
    archs: tuple = ("GCN",)
    seeds: tuple = (0, 1, 2, 3, 4)
    num_layers: int = 2
    hidden_dim: int = 128
    embed_dim: int = 16
    max_epochs: int = 200
    patience: int = 20
    K: int = 400
    aug_weights: tuple = (1.0, 1.0, 1.0, 1.0)
    aug_p_ranges: tuple = ((0.1, 0.9),) * 4
    chain_length: int = 1
    eval_hidden: int = 128
    eval_lr: float = 1e-3
    eval_wd: float = 0.0
    eval_epochs: int = 300
    eval_val_fraction: float = 0.1
    eval_head: str = "sigmoid"
    taus: tuple = (0.7, 0.8, 0.9)
    atc: bool = True
    threshold: bool = True
    autoeval: bool = True
    mmd_kernel: str = "linear"
    heatmaps: bool = False

    _PARSERS = {
        "targets": _strs, "archs": _strs, "seeds": _ints, "aug_weights": _floats,
        "aug_p_ranges": _ranges, "taus": _floats,
    }

    def validate(self, need_paths: bool = True) -> None:
        bad = [a for a in self.archs if a not in ARCHS]
        if bad:
            raise ConfigError(f"unknown archs {bad}; expected a subset of {ARCHS}")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        try:
            self.augment_config()
            self.evaluator_config(1)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if need_paths:
            for label, path in [("source", self.source), ("split", self.split)] + [
                    ("target", p) for p in self.target_paths().values()]:
                if not path or not os.path.exists(path):
                    raise ConfigError(f"{label} path {path!r} does not exist")

    def target_paths(self) -> dict[str, str]:
        out = {}
        for entry in self.targets:
            name, sep, path = entry.partition("=")
            if not sep:
                path = name
                name = os.path.splitext(os.path.basename(path))[0]
            out[name] = path
        return out

    @property
    def source_name(self) -> str:
        return os.path.splitext(os.path.basename(self.source))[0]

    def model_config(self, arch: str, in_dim: int, num_classes: int, seed: int) -> ModelConfig:
        return ModelConfig.for_arch(arch, in_dim, num_classes, num_layers=self.num_layers,
                                    hidden_dim=self.hidden_dim, embed_dim=self.embed_dim,
                                    max_epochs=self.max_epochs, patience=self.patience, seed=seed)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(K=self.K, seed=self.seed, weights=self.aug_weights,
                             p_ranges=self.aug_p_ranges, chain_length=self.chain_length)

    def evaluator_config(self, input_dim: int) -> EvaluatorConfig:
        return EvaluatorConfig(input_dim=input_dim, hidden_dim=self.eval_hidden, lr=self.eval_lr,
                               wd=self.eval_wd, epochs=self.eval_epochs, seed=self.seed,
                               val_fraction=self.eval_val_fraction, head=self.eval_head)

    def items(self):
        for f in fields(self):
            yield f.name, getattr(self, f.name)

    def dump(self) -> str:
        return "".join(f"{k} = {_fmt_value(v)}\n" for k, v in self.items())


def load_config(path: str | None = None, **overrides) -> RunConfig:
    """Read a flat ``key = value`` file; relative paths resolve against its directory."""
    cfg = RunConfig()
    known = {f.name: f for f in fields(RunConfig)}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file {path!r} does not exist")
        base = os.path.dirname(os.path.abspath(path))
        with open(path) as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                key, sep, val = line.partition("=")
                key, val = key.strip(), val.strip()
                if not sep or key not in known:
                    raise ConfigError(f"{path}:{lineno}: unknown or malformed setting {line!r}")
                try:
                    setattr(cfg, key, _parse_value(key, known[key], val))
                except ValueError as exc:
                    raise ConfigError(f"{path}:{lineno}: {key}: {exc}") from None
        for key in ("source", "split", "out"):
            v = getattr(cfg, key)
            if v and not os.path.isabs(v):
                setattr(cfg, key, os.path.join(base, v))
        fixed = []
        for entry in cfg.targets:
            name, sep, p = entry.partition("=")
            p = p if sep else name
            p = p if os.path.isabs(p) else os.path.join(base, p)
            fixed.append(f"{name}={p}" if sep else p)
        cfg.targets = tuple(fixed)
    for key, val in overrides.items():
        if val is not None:
            setattr(cfg, key, val)
    return cfg


def _parse_value(key, f, val):
    if key in RunConfig._PARSERS:
        return RunConfig._PARSERS[key](val)
    default = f.default
    if isinstance(default, bool):
        return _bool(val)
    if isinstance(default, int):
        return int(val)
    if isinstance(default, float):
        return float(val)
    return val


def _map(cfg: RunConfig, fn, items):
    if cfg.threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        return list(pool.map(fn, items))


def _write_csv(path, header, rows) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _num(x) -> str:
    return NA if x is None else repr(float(x))


def _cell(arch: str, seed: int) -> str:
    return f"{arch}_s{seed}"


def write_run_manifest(cfg: RunConfig) -> None:
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "run_manifest.txt"), "w", newline="\n") as fh:
        fh.write(cfg.dump())


# -- stages ---------------------------------------------------------------


def train_gnns(cfg: RunConfig) -> list[dict]:
    """One classifier per (arch, seed); failures are recorded and the rest proceed."""
    g = load_graph(cfg.source)
    split = load_split(cfg.split)
    out = os.path.join(cfg.out, "models")
    os.makedirs(out, exist_ok=True)

    def one(cell):
        arch, seed = cell
        mcfg = cfg.model_config(arch, g.feature_dim, g.num_classes, seed)
        try:
            m = train_classifier(g, split, mcfg)
        except TrainingError as exc:
            log.error("%s", exc)
            return {"arch": arch, "seed": seed, "status": f"failed: {exc}"}
        save_model(m, os.path.join(out, _cell(arch, seed) + ".ckpt"))
        return {"arch": arch, "seed": seed, "status": "ok", "best_val_acc": m.best_val_acc,
                "best_epoch": m.best_epoch, "model_id": model_id(m), "source_id": m.source_graph_id}

    rows = _map(cfg, one, [(a, s) for a in cfg.archs for s in cfg.seeds])
    _write_csv(os.path.join(out, "manifest.csv"),
               ("arch", "seed", "status", "best_val_acc", "best_epoch", "model_id", "source_id"),
               [[r["arch"], r["seed"], r["status"], _num(r.get("best_val_acc")),
                 r.get("best_epoch", NA), r.get("model_id", NA), r.get("source_id", NA)] for r in rows])
    return rows


def _trained_cells(cfg: RunConfig) -> list[tuple[str, int]]:
    path = os.path.join(cfg.out, "models", "manifest.csv")
    if not os.path.exists(path):
        raise ConfigError(f"no classifier manifest at {path}; run train-gnn first")
    return [(r["arch"], int(r["seed"])) for r in _read_csv(path) if r["status"] == "ok"]


def _load_cell_model(cfg, arch, seed):
    return load_model(os.path.join(cfg.out, "models", _cell(arch, seed) + ".ckpt"))


def meta_set(cfg: RunConfig, g: Graph | None = None):
    g = load_graph(cfg.source) if g is None else g
    return build_meta_set(seed_subgraph(g, load_split(cfg.split)), cfg.augment_config())


def build_discgraphs(cfg: RunConfig) -> dict[str, dict]:
    """Label every meta-graph for every trained classifier and write the DiscGraph sets."""
    g = load_graph(cfg.source)
    metas = meta_set(cfg, g)
    write_meta_set(metas, os.path.join(cfg.out, "meta"))
    summaries = {}
    for arch, seed in _trained_cells(cfg):
        m = _load_cell_model(cfg, arch, seed)
        builder = DiscrepancyBuilder(m, g)
        discs = _map(cfg, builder.build, metas)
        out = os.path.join(cfg.out, "disc", _cell(arch, seed))
        os.makedirs(out, exist_ok=True)
        for mg, d in zip(metas, discs):
            save_discgraph(d, os.path.join(out, f"disc_{mg.index}.disc"))
        labels = np.array([d.label for d in discs])
        _write_csv(os.path.join(out, "manifest.csv"),
                   ("i", "ops", "ps", "num_nodes", "num_edges", "label"),
                   [[mg.index, "+".join(mg.ops), "+".join(repr(p) for p in mg.ps),
                     mg.graph.num_nodes, mg.graph.num_edges, repr(float(d.label))]
                    for mg, d in zip(metas, discs)])
        summary = {"count": labels.size, "min": labels.min(), "mean": labels.mean(), "max": labels.max()}
        _write_csv(os.path.join(out, "summary.csv"), ("count", "min", "mean", "max"),
                   [[summary["count"], repr(float(summary["min"])), repr(float(summary["mean"])),
                     repr(float(summary["max"]))]])
        summaries[_cell(arch, seed)] = summary
    return summaries


def load_disc_set(cfg: RunConfig, arch: str, seed: int):
    d = os.path.join(cfg.out, "disc", _cell(arch, seed))
    rows = _read_csv(os.path.join(d, "manifest.csv"))
    return [load_discgraph(os.path.join(d, f"disc_{r['i']}.disc")) for r in rows]


def train_evaluators(cfg: RunConfig) -> list[dict]:
    out = os.path.join(cfg.out, "evaluators")
    os.makedirs(out, exist_ok=True)

    def one(cell):
        arch, seed = cell
        discs = load_disc_set(cfg, arch, seed)
        ev = train_evaluator(discs, cfg.evaluator_config(discs[0].train_node_count))
        save_evaluator(ev, os.path.join(out, _cell(arch, seed) + ".ckpt"))
        return [arch, seed, ev.best_epoch, repr(ev.best_mse), ev.model_id, ev.train_graph_id]

    rows = _map(cfg, one, _trained_cells(cfg))
    _write_csv(os.path.join(out, "manifest.csv"),
               ("arch", "seed", "best_epoch", "best_mse", "model_id", "train_graph_id"), rows)
    return rows


def _targets(cfg: RunConfig, with_truth: bool):
    """(name, label-free graph, labeled graph or None) per configured target."""
    out = []
    for name, path in cfg.target_paths().items():
        blind = load_graph(path, with_labels=False)
        labeled = load_graph(path) if with_truth else None
        out.append((name, blind, labeled))
    return out


def _row(method, arch, seed, cfg, target, est, truth):
    err = None if truth is None else abs(est - truth)
    return [method, arch, seed, cfg.source_name, target, _num(est), _num(truth), _num(err)]


def _truth(m, labeled):
    if labeled is None:
        return None
    _, yhat = embed_and_predict(m, labeled)
    return accuracy(yhat, labeled.labels)


def estimate(cfg: RunConfig, with_truth: bool = False) -> list[list]:
    g = load_graph(cfg.source)
    targets = _targets(cfg, with_truth)
    rows = []
    for arch, seed in _trained_cells(cfg):
        m = _load_cell_model(cfg, arch, seed)
        ev = load_evaluator(os.path.join(cfg.out, "evaluators", _cell(arch, seed) + ".ckpt"))
        builder = DiscrepancyBuilder(m, g)
        for name, blind, labeled in targets:
            d = builder.build_inference(blind, name)
            est = estimate_accuracy(ev, d)
            rows.append(_row("GNNEvaluator", arch, seed, cfg, name, est, _truth(m, labeled)))
            if cfg.heatmaps:
                path = os.path.join(cfg.out, "heatmaps", f"{_cell(arch, seed)}_{name}.csv")
                os.makedirs(os.path.dirname(path), exist_ok=True)
                np.savetxt(path, d.attrs, fmt="%.6f", delimiter=",")
    _write_csv(os.path.join(cfg.out, "results", "gnnevaluator.csv"), RESULT_FIELDS, rows)
    return rows


def run_baselines(cfg: RunConfig, with_truth: bool = False) -> list[list]:
    g = load_graph(cfg.source)
    split = load_split(cfg.split)
    targets = _targets(cfg, with_truth)
    metas = meta_set(cfg, g) if cfg.autoeval else []
    rows = []
    for arch, seed in _trained_cells(cfg):
        m = _load_cell_model(cfg, arch, seed)
        z_src, logits_src = model_outputs(m, g)
        val_logits, val_y = logits_src[split.val], g.labels[split.val]
        t_outputs = [(name, model_outputs(m, blind), _truth(m, labeled)) for name, blind, labeled in targets]
        if cfg.atc:
            temp = bl.temperature_calibrate(val_logits, val_y)
            for method in ATC_METHODS:
                score = method.split("-")[1]
                T = temp if method.endswith("-c") else 1.0
                t = bl.atc_fit_threshold(val_logits, val_y, score, T)
                for name, (_, logits), truth in t_outputs:
                    rows.append(_row(method, arch, seed, cfg, name, bl.atc_estimate(logits, t, score), truth))
        if cfg.threshold:
            for tau in cfg.taus:
                for name, (_, logits), truth in t_outputs:
                    rows.append(_row(f"Thres({tau:g})", arch, seed, cfg, name,
                                     bl.threshold_estimate(logits, tau), truth))
        if cfg.autoeval:
            feats, labels = [], []
            for mg in metas:
                z, yhat = embed_and_predict(m, mg.graph)
                feats.append(bl.mmd(z_src, z, cfg.mmd_kernel))
                labels.append(accuracy(yhat, mg.graph.labels))
            reg = bl.autoeval_g_fit(feats, labels, cfg.mmd_kernel)
            for name, (z, _), truth in t_outputs:
                est = bl.autoeval_g_estimate(reg, bl.mmd(z_src, z, cfg.mmd_kernel))
                rows.append(_row("AutoEval-G", arch, seed, cfg, name, est, truth))
    _write_csv(os.path.join(cfg.out, "results", "baselines.csv"), RESULT_FIELDS, rows)
    return rows


def mae_table(rows: list[dict], archs=None) -> tuple[list[str], list[list[str]]]:
    """MAE (percentage points, 2 decimals) per (method, source, target) x arch, plus ``Avg.``.

    A cell is NA when any of its rows lacks ground truth.
    """
    methods, cases = [], []
    cells: dict[tuple, list] = {}
    for r in rows:
        key = (r["method"], r["source"], r["target"])
        if r["method"] not in methods:
            methods.append(r["method"])
        if (r["source"], r["target"]) not in cases:
            cases.append((r["source"], r["target"]))
        err = None if r["abs_error"] == NA else float(r["abs_error"])
        cells.setdefault(key + (r["model"],), []).append(err)
    present = {r["model"] for r in rows}
    archs = [a for a in (archs or ARCHS) if a in present] + sorted(present - set(archs or ARCHS))
    header = ["method", "source", "target", *archs, "Avg."]
    table = []
    for src, tgt in cases:
        for method in methods:
            maes = []
            for arch in archs:
                errs = cells.get((method, src, tgt, arch))
                if not errs or any(e is None for e in errs):
                    maes.append(None)
                else:
                    maes.append(100.0 * float(np.mean(errs)))
            known = [x for x in maes if x is not None]
            avg = float(np.mean(known)) if known and len(known) == len(maes) else None
            if not any(cells.get((method, src, tgt, a)) for a in archs):
                continue
            table.append([method, src, tgt, *[NA if x is None else f"{x:.2f}" for x in maes],
                          NA if avg is None else f"{avg:.2f}"])
    return header, table


def report(results_dir: str, out_dir: str | None = None) -> tuple[list[str], list[list[str]]]:
    paths = sorted(os.path.join(results_dir, f) for f in os.listdir(results_dir) if f.endswith(".csv"))
    if not paths:
        raise ConfigError(f"no result CSVs in {results_dir}")
    rows = [r for p in paths for r in _read_csv(p)]
    header, table = mae_table(rows)
    out_dir = out_dir or os.path.join(os.path.dirname(os.path.abspath(results_dir)), "report")
    _write_csv(os.path.join(out_dir, "mae.csv"), header, table)
    return header, table


# -- synthetic desk-scale benchmark ------------------------------------------


@dataclass
class SBMBenchmark:
    nodes_per_class: int = 200
    num_classes: int = 3
    feature_dim: int = 16
    p_in: float = 0.05
    p_out: float = 0.01
    feature_noise: float = 1.5
    train_fraction: float = 0.4
    val_fraction: float = 0.1
    seed: int = 0
    target_names: tuple = field(default=("edgedrop30", "edgedrop60", "noise2x", "attrmask30", "mixed"))

    def _sbm(self, seed, noise_scale=1.0) -> Graph:
        means = rng_from_seed(self.seed, 7).standard_normal((self.num_classes, self.feature_dim))
        blocks = [(self.nodes_per_class, c) for c in range(self.num_classes)]
        return generate_sbm(seed, blocks, self.p_in, self.p_out, means,
                            self.feature_noise * noise_scale)

    def source(self) -> Graph:
        return self._sbm(self.seed)

    def split(self):
        n = self.nodes_per_class * self.num_classes
        return random_split(n, self.train_fraction, self.val_fraction, self.seed)

    def targets(self) -> dict[str, Graph]:
        """Held-out graphs from the same SBM family, each under one kind of shift."""
        base = self._sbm(self.seed + 1)
        rng = rng_from_seed(self.seed, 11)
        mixed = self._sbm(self.seed + 3, 1.5)
        mixed = attr_mask(edge_drop(mixed, 0.3, rng_from_seed(self.seed, 12)), 0.3,
                          rng_from_seed(self.seed, 13))
        return {
            "edgedrop30": edge_drop(base, 0.3, rng),
            "edgedrop60": edge_drop(base, 0.6, rng_from_seed(self.seed, 14)),
            "noise2x": self._sbm(self.seed + 2, 2.0),
            "attrmask30": attr_mask(base, 0.3, rng_from_seed(self.seed, 15)),
            "mixed": mixed,
        }

    def write(self, out_dir: str, archs=("GCN",), seeds=(0,), K: int = 100) -> str:
        """Write source, split, targets and a ready-to-run ``run.cfg``; returns the config path."""
        os.makedirs(os.path.join(out_dir, "targets"), exist_ok=True)
        save_graph(self.source(), os.path.join(out_dir, "source.gtxt"))
        save_split(self.split(), os.path.join(out_dir, "source.split"))
        names = []
        for name, t in self.targets().items():
            save_graph(t, os.path.join(out_dir, "targets", f"{name}.gtxt"))
            names.append(f"{name}=targets/{name}.gtxt")
        cfg_path = os.path.join(out_dir, "run.cfg")
        with open(cfg_path, "w", newline="\n") as fh:
            fh.write("# desk-scale SBM benchmark\n")
            fh.write("source = source.gtxt\nsplit = source.split\n")
            fh.write(f"targets = {','.join(names)}\n")
            fh.write(f"archs = {','.join(archs)}\nseeds = {','.join(map(str, seeds))}\n")
            fh.write(f"K = {K}\nseed = {self.seed}\nout = run\n")
        return cfg_path


def source_id(cfg: RunConfig) -> str:
    return graph_id(load_graph(cfg.source))
