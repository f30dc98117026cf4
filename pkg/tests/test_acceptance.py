"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected into the ``acceptance criteria`` section of the
pytest terminal summary.
"""
import csv
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.special import softmax

from gnneval import pipeline
from gnneval.augment import (AugmentConfig, attr_mask, build_meta_set, count_for, edge_drop,
                             node_mix, seed_subgraph, subgraph_nodes, subgraph_sample)
from gnneval.baselines import (TEMPERATURE_GRID, atc_fit_threshold, confidence_scores, mmd,
                               temperature_calibrate)
from gnneval.cli import main
from gnneval.discrepancy import DiscrepancyBuilder, label_meta
from gnneval.evaluator import (EvaluatorConfig, estimate_accuracy, format_evaluator, load_evaluator,
                               mse_on, save_evaluator, train_evaluator)
from gnneval.graphio import Graph, format_graph, load_graph, random_split, rng_from_seed, save_graph
from gnneval.nn import ParamStore, Tape, grad_check
from gnneval.zoo import (ModelConfig, format_model, load_model, mean_adjacency, model_outputs,
                         normalized_adjacency, save_model, self_loop_adjacency, train_classifier)

from conftest import criterion, permuted, sbm, small_graph, synthetic_discs


# -- 1 -------------------------------------------------------------------------


def _layer_store(kind, d_in, d_out, rng):
    s = ParamStore()
    if kind == "gin":
        for name, shape in [("weight1", (d_in, d_out)), ("bias1", (1, d_out)),
                            ("weight2", (d_out, d_out)), ("bias2", (1, d_out))]:
            s.add(f"l.{name}", rng.standard_normal(shape))
        return s
    s.add("l.weight", rng.standard_normal((2 * d_in if kind == "sage" else d_in, d_out)))
    if kind == "gat":
        s.add("l.att_src", rng.standard_normal((d_out, 1)))
        s.add("l.att_dst", rng.standard_normal((d_out, 1)))
    s.add("l.bias", rng.standard_normal((1, d_out)))
    return s


def test_criterion_01_gradients():
    with criterion(1, "grad_check rel. error < 1e-4 for dense/GCN/SAGE/GAT/GIN/softmax-CE/sigmoid-MSE"):
        start = time.perf_counter()
        worst = {}
        adj_of = {"dense": lambda g: None, "gcn": normalized_adjacency, "sage": mean_adjacency,
                  "gat": self_loop_adjacency, "gin": lambda g: g.adjacency}
        for seed in range(5):
            rng = np.random.default_rng(seed)
            g = small_graph(n=int(rng.integers(3, 7)), d=3, c=3, seed=seed)
            for kind, adj_fn in adj_of.items():
                adj = adj_fn(g)
                store = _layer_store(kind, 3, 4, rng)
                store.add("head.weight", rng.standard_normal((4, 3)))
                store.add("head.bias", rng.standard_normal((1, 3)))
                store.add("reg.weight", rng.standard_normal((4, 1)))
                store.add("reg.bias", rng.standard_normal((1, 1)))
                labels = rng.integers(3, size=g.num_nodes)

                def ce(s):
                    t = Tape()
                    h = t.layer(kind, t.input(g.features), store=s, prefix="l", adj=adj)
                    z = t.layer("dense", t.layer("relu", h), store=s, prefix="head")
                    return t, t.layer("softmax_ce", z, labels=labels)

                def smse(s):
                    t = Tape()
                    h = t.layer(kind, t.input(g.features), store=s, prefix="l", adj=adj)
                    h = t.layer("mean_pool", t.layer("relu", h))
                    y = t.layer("dense", h, store=s, prefix="reg")
                    return t, t.layer("sigmoid_mse", y, targets=[[0.37]])

                worst[(kind, "softmax_ce")] = max(worst.get((kind, "softmax_ce"), 0), grad_check(ce, store))
                worst[(kind, "sigmoid_mse")] = max(worst.get((kind, "sigmoid_mse"), 0), grad_check(smse, store))
        elapsed = time.perf_counter() - start
        bad = {k: v for k, v in worst.items() if v >= 1e-4}
        assert not bad, f"gradient errors {bad}"
        assert elapsed < 30, f"suite took {elapsed:.1f}s"


# -- 2 -------------------------------------------------------------------------


def test_criterion_02_classifier_sanity():
    with criterion(2, "GCN (lr=0.01, wd=1e-5) on 200-node 2-block SBM: val acc >= 0.95 in <= 200 epochs, < 60 s"):
        start = time.perf_counter()
        g = sbm(seed=0, sizes=(100, 100), d=8, p_in=0.1, p_out=0.01, noise=1.0)
        split = random_split(g.num_nodes, 0.4, 0.1, 0)
        cfg = ModelConfig.for_arch("GCN", g.feature_dim, 2, seed=0)
        assert (cfg.lr, cfg.wd, cfg.max_epochs) == (0.01, 1e-5, 200)
        m = train_classifier(g, split, cfg)
        elapsed = time.perf_counter() - start
        assert m.best_val_acc >= 0.95, f"val acc {m.best_val_acc}"
        assert m.best_epoch <= 200
        assert elapsed < 60


# -- 3 -------------------------------------------------------------------------


def _dense_gcn_predict(m, g):
    # independent dense-matrix forward pass of the 2-layer GCN classifier
    a = g.adjacency.toarray() + np.eye(g.num_nodes)
    d = 1.0 / np.sqrt(a.sum(axis=1))
    a = d[:, None] * a * d[None, :]
    p = m.params
    h = np.maximum(a @ g.features @ p["conv0.weight"] + p["conv0.bias"], 0.0)
    z = a @ h @ p["conv1.weight"] + p["conv1.bias"]
    return (z @ p["head.weight"] + p["head.bias"]).argmax(axis=1)


def test_criterion_03_label_oracle(sbm3):
    with criterion(3, "label_meta equals brute-force recount k/M on 20 random meta-graphs"):
        g, split, m = sbm3
        metas = build_meta_set(seed_subgraph(g, split), AugmentConfig(K=20, seed=123))
        for mg in metas:
            pred = _dense_gcn_predict(m, mg.graph)
            k = 0
            for yhat, y in zip(pred.tolist(), mg.graph.labels.tolist()):
                k += yhat == y
            assert label_meta(m, mg) == k / mg.graph.num_nodes, f"meta-graph {mg.index}"


# -- 4 -------------------------------------------------------------------------


def test_criterion_04_discrepancy_bounds(sbm3):
    with criterion(4, "every X_disc entry in [-1, 1]; self-case diagonal = 1 within 1e-12"):
        g, split, m = sbm3
        b = DiscrepancyBuilder(m, g)
        metas = build_meta_set(seed_subgraph(g, split), AugmentConfig(K=40, seed=4))
        shifted = [sbm(seed=s, sizes=(100, 100, 100), p_in=0.06, noise=1.2 * f)
                   for s, f in ((21, 1.0), (22, 2.0))]
        attrs = [b.build(mg).attrs for mg in metas] + [b.build_inference(t).attrs for t in shifted]
        for a in attrs:
            assert a.min() >= -1.0 and a.max() <= 1.0
        diag = np.diag(b.build_inference(g).attrs)
        assert np.abs(diag - 1.0).max() <= 1e-12


# -- 5 -------------------------------------------------------------------------


def _valid(h: Graph, n_classes: int):
    # rebuilding from raw arrays re-runs every structural check
    Graph(np.array(h.features), np.array(h.labels), np.array(h.edges), n_classes)
    assert np.isfinite(h.features).all()
    assert np.array_equal(h.edges, np.unique(h.edges, axis=0))


def test_criterion_05_augmentation_counts():
    with criterion(5, "EdgeDrop/Subgraph/AttrMask/NodeMix exact counts on 50 trials each; outputs valid"):
        rng = rng_from_seed(5)
        for trial in range(50):
            g = sbm(seed=trial, sizes=(int(rng.integers(10, 40)), int(rng.integers(10, 40))), d=5)
            p = float(rng.uniform(0.05, 0.95))
            n, e = g.num_nodes, g.num_edges

            h = edge_drop(g, p, rng_from_seed(trial, 1))
            assert h.num_edges == e - count_for(p, e)
            _valid(h, 2)

            h = subgraph_sample(g, p, rng_from_seed(trial, 2))
            assert h.num_nodes == count_for(1 - p, n)
            assert subgraph_nodes(g, p, rng_from_seed(trial, 2)).size == h.num_nodes
            _valid(h, 2)

            h = attr_mask(g, p, rng_from_seed(trial, 3))
            assert int((h.features == 0).all(axis=1).sum()) == count_for(p, n)
            _valid(h, 2)

            h = node_mix(g, p, rng_from_seed(trial, 4))
            assert int((h.features != g.features).any(axis=1).sum()) == count_for(p, n)
            assert np.array_equal(h.labels, g.labels)
            _valid(h, 2)


# -- 6 -------------------------------------------------------------------------


def test_criterion_06_atc_self_consistency():
    with criterion(6, "ATC: |fraction below t - val error| <= 1/|val| on 30 val sets, MC and NE"):
        for i in range(30):
            rng = rng_from_seed(6, i)
            n, c = int(rng.integers(20, 400)), int(rng.integers(2, 8))
            logits = rng.standard_normal((n, c)) * rng.uniform(0.5, 4.0)
            labels = rng.integers(c, size=n)
            err = np.mean(logits.argmax(axis=1) != labels)
            for score in ("MC", "NE"):
                t = atc_fit_threshold(logits, labels, score)
                below = np.mean(confidence_scores(logits, score) < t.value)
                assert abs(below - err) <= 1 / n, (i, score, below, err)


# -- 7 -------------------------------------------------------------------------


def _nll(logits, labels, T):
    z = logits / T
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax.ravel() + np.log(np.exp(z - zmax).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(labels)), labels]))


def test_criterion_07_temperature():
    with criterion(7, "temperature = grid argmin NLL; calibrated logits give T within one grid step of 1"):
        rng = rng_from_seed(7)
        for i in range(5):
            logits = rng.standard_normal((500, 4)) * (i + 1)
            labels = rng.integers(4, size=500)
            T = temperature_calibrate(logits, labels)
            losses = np.array([_nll(logits, labels, t) for t in TEMPERATURE_GRID])
            assert T == TEMPERATURE_GRID[int(np.argmin(losses))]
        logits = rng.standard_normal((20000, 5)) * 2.0
        p = softmax(logits, axis=1)
        labels = (p.cumsum(axis=1) > rng.random((20000, 1))).argmax(axis=1)
        T = temperature_calibrate(logits, labels)
        one = int(np.argmin(np.abs(TEMPERATURE_GRID - 1.0)))
        assert abs(int(np.flatnonzero(TEMPERATURE_GRID == T)[0]) - one) <= 1, T


# -- 8 -------------------------------------------------------------------------


def test_criterion_08_mmd():
    with criterion(8, "mmd(z, z) = 0, symmetry, mean-gap oracle within 10% on 1000-sample Gaussians"):
        rng = rng_from_seed(8)
        z = rng.standard_normal((200, 16))
        for k in ("linear", "rbf"):
            assert mmd(z, z, k) == 0.0
        shift = np.zeros(16)
        shift[:4] = 1.0
        a = rng.standard_normal((1000, 16))
        b = rng.standard_normal((1000, 16)) + shift
        for k in ("linear", "rbf"):
            assert mmd(a, b, k) == pytest.approx(mmd(b, a, k), rel=1e-12, abs=0)
        gap = float(shift @ shift)
        assert abs(mmd(a, b) - gap) <= 0.1 * gap


# -- 9 -------------------------------------------------------------------------


def test_criterion_09_evaluator_capacity():
    with criterion(9, "evaluator: train MSE < 1e-3 on 50 synthetic DiscGraphs in 500 epochs; permutation invariance 1e-9"):
        discs = synthetic_discs(count=50, width=40, seed=0)
        assert len({d.label for d in discs}) == 50
        ev = train_evaluator(discs, EvaluatorConfig(input_dim=40, epochs=500, seed=0, val_fraction=0.0))
        assert mse_on(ev, discs) < 1e-3
        assert max(abs(estimate_accuracy(ev, d) - d.label) for d in discs) < 0.05
        for i, d in enumerate(discs):
            assert abs(estimate_accuracy(ev, permuted(d, i)) - estimate_accuracy(ev, d)) < 1e-9


# -- 10 / 11 -------------------------------------------------------------------


def _run_benchmark(root: Path) -> Path:
    cfg = pipeline.SBMBenchmark(seed=0).write(str(root), archs=("GCN",), seeds=(0,), K=100)
    for cmd in (["train-gnn"], ["build-discgraphs"], ["train-evaluator"],
                ["estimate", "--with-truth"], ["baseline", "--with-truth"], ["report"]):
        assert main([*cmd, "--config", cfg, "--threads", "1"]) == 0, cmd
    return root / "run"


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def benchmark_run(tmp_path_factory):
    start = time.perf_counter()
    out = _run_benchmark(tmp_path_factory.mktemp("bench_a"))
    return out, time.perf_counter() - start


def test_criterion_10_end_to_end(benchmark_run):
    with criterion(10, "desk-scale SBM (600 nodes, 3 classes), GCN, K=100: MAE < 15 pp on 5 shifted targets, < 10 min"):
        out, elapsed = benchmark_run
        src = load_graph(out.parent / "source.gtxt")
        assert (src.num_nodes, src.num_classes) == (600, 3)
        assert len(list((out / "disc" / "GCN_s0").glob("disc_*.disc"))) == 100
        rows = _read(out / "results" / "gnnevaluator.csv")
        assert sorted(r["target"] for r in rows) == sorted(
            ["edgedrop30", "edgedrop60", "noise2x", "attrmask30", "mixed"])
        errs = [abs(float(r["estimate"]) - float(r["truth"])) for r in rows]
        mae = 100 * float(np.mean(errs))
        print(f"GNNEvaluator MAE {mae:.2f} pp over {len(rows)} targets, {elapsed:.0f}s")
        assert mae < 15
        base = _read(out / "results" / "baselines.csv")
        methods = {r["method"] for r in base}
        assert methods == {"ATC-MC", "ATC-MC-c", "ATC-NE", "ATC-NE-c", "Thres(0.7)", "Thres(0.8)",
                           "Thres(0.9)", "AutoEval-G"}
        assert len(base) == len(methods) * 5
        assert all(0.0 <= float(r["estimate"]) <= 1.0 for r in base)
        assert elapsed < 600


def test_criterion_11_determinism(benchmark_run, tmp_path_factory):
    with criterion(11, "repeated criterion-10 run gives byte-identical report CSVs"):
        first, _ = benchmark_run
        second = _run_benchmark(tmp_path_factory.mktemp("bench_b"))
        for rel in ("report/mae.csv", "results/gnnevaluator.csv", "results/baselines.csv",
                    "models/manifest.csv", "disc/GCN_s0/manifest.csv", "evaluators/manifest.csv"):
            assert (first / rel).read_bytes() == (second / rel).read_bytes(), rel


# -- 12 ------------------------------------------------------------------------


def test_criterion_12_roundtrips(tmp_path, sbm3):
    with criterion(12, "graph, classifier and evaluator checkpoints round-trip bit-identically"):
        g, split, m = sbm3
        save_graph(g, tmp_path / "g.gtxt")
        g2 = load_graph(tmp_path / "g.gtxt")
        assert g2.equals(g) and format_graph(g2) == format_graph(g)

        save_model(m, tmp_path / "m.ckpt")
        m2 = load_model(tmp_path / "m.ckpt")
        save_model(m2, tmp_path / "m2.ckpt")
        assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()
        for a, b in zip(model_outputs(m, g), model_outputs(m2, g)):
            assert np.array_equal(a, b)

        b = DiscrepancyBuilder(m, g)
        discs = [b.build(mg) for mg in build_meta_set(seed_subgraph(g, split), AugmentConfig(K=6))]
        ev = train_evaluator(discs, EvaluatorConfig(input_dim=g.num_nodes, hidden_dim=32, epochs=20))
        save_evaluator(ev, tmp_path / "e.ckpt")
        ev2 = load_evaluator(tmp_path / "e.ckpt")
        assert format_evaluator(ev2) == format_evaluator(ev)
        target = b.build_inference(sbm(seed=31, sizes=(100, 100, 100), p_in=0.06, noise=1.2))
        assert estimate_accuracy(ev, target) == estimate_accuracy(ev2, target)
