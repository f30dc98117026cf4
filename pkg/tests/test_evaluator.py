import numpy as np
import pytest

from gnneval import evaluator as E
from gnneval.discrepancy import BindingError, DiscGraph
from gnneval.evaluator import (EvaluatorConfig, estimate_accuracy, estimate_many, format_evaluator,
                               load_evaluator, mse_on, save_evaluator, train_evaluator)
from gnneval.nn import CheckpointError

from conftest import permuted, synthetic_discs


@pytest.fixture(scope="module")
def fitted():
    discs = synthetic_discs(count=20, width=12, seed=1)
    ev = train_evaluator(discs, EvaluatorConfig(input_dim=12, hidden_dim=32, epochs=200))
    return discs, ev


def test_config_validation():
    with pytest.raises(ValueError):
        EvaluatorConfig(input_dim=0)
    with pytest.raises(ValueError):
        EvaluatorConfig(input_dim=3, val_fraction=1.0)
    with pytest.raises(ValueError):
        EvaluatorConfig(input_dim=3, head="relu")


def test_constant_labels_are_fit():
    discs = synthetic_discs(count=12, width=10, seed=2, label=0.8)
    ev = train_evaluator(discs, EvaluatorConfig(input_dim=10, hidden_dim=32, epochs=300, val_fraction=0))
    assert mse_on(ev, discs) < 1e-4


def test_estimates_in_open_unit_interval(fitted):
    discs, ev = fitted
    est = estimate_many(ev, discs)
    assert np.all(est > 0) and np.all(est < 1)
    assert estimate_accuracy(ev, discs[3]) == pytest.approx(est[3], abs=1e-12)


def test_training_is_deterministic(fitted):
    discs, ev = fitted
    again = train_evaluator(discs, ev.config)
    assert format_evaluator(again) == format_evaluator(ev)


def test_permutation_invariance(fitted):
    discs, ev = fitted
    for i, d in enumerate(discs[:5]):
        assert abs(estimate_accuracy(ev, permuted(d, i)) - estimate_accuracy(ev, d)) < 1e-9


def test_initial_snapshot_is_a_candidate():
    discs = synthetic_discs(count=10, width=6, seed=3)
    ev = train_evaluator(discs, EvaluatorConfig(input_dim=6, hidden_dim=8, epochs=0))
    assert ev.best_epoch == 0


def test_rejects_bad_inputs():
    discs = synthetic_discs(count=5, width=6)
    with pytest.raises(ValueError):
        train_evaluator(discs[:1], EvaluatorConfig(input_dim=6))
    with pytest.raises(ValueError):
        train_evaluator(discs, EvaluatorConfig(input_dim=7))
    unlabeled = DiscGraph(discs[0].attrs, discs[0].edges, None, "m0", "g0")
    with pytest.raises(ValueError):
        train_evaluator(discs + [unlabeled], EvaluatorConfig(input_dim=6))
    other = synthetic_discs(count=2, width=6, model="m1")
    with pytest.raises(BindingError):
        train_evaluator(discs + other, EvaluatorConfig(input_dim=6))


def test_binding_checked_at_estimate(fitted):
    discs, ev = fitted
    alien = synthetic_discs(count=1, width=12, model="other")[0]
    with pytest.raises(BindingError):
        estimate_accuracy(ev, alien)
    narrow = synthetic_discs(count=1, width=5)[0]
    with pytest.raises(ValueError):
        estimate_accuracy(ev, narrow)


def test_checkpoint_roundtrip(tmp_path, fitted):
    discs, ev = fitted
    save_evaluator(ev, tmp_path / "e.ckpt")
    back = load_evaluator(tmp_path / "e.ckpt")
    assert format_evaluator(back) == format_evaluator(ev)
    assert np.array_equal(estimate_many(back, discs), estimate_many(ev, discs))


def test_checkpoint_errors(tmp_path, fitted):
    _, ev = fitted
    lines = format_evaluator(ev).splitlines()
    for bad in (["#gnneval v0"] + lines[1:], lines[:2] + ["bound: a b 99"] + lines[3:], lines[:-2]):
        (tmp_path / "bad.ckpt").write_text("\n".join(bad) + "\n")
        with pytest.raises(CheckpointError):
            load_evaluator(tmp_path / "bad.ckpt")


def test_linear_head_option():
    discs = synthetic_discs(count=10, width=6, seed=4)
    ev = train_evaluator(discs, EvaluatorConfig(input_dim=6, hidden_dim=16, epochs=100, head="linear"))
    assert np.isfinite(estimate_many(ev, discs)).all()


def test_lowrank_path_matches_dense(fitted):
    # rank-2 attrs take the factored first layer; the unfactored batch is the oracle
    discs, ev = fitted
    rng = np.random.default_rng(0)
    base = rng.standard_normal((40, 2)) @ rng.standard_normal((2, 12)) * 0.3
    d = DiscGraph(base, discs[0].edges[discs[0].edges.max(axis=1) < 40], None, "m0", "g0")
    b = E._batch([d], False)
    assert b.right is not None
    dense = E._Batch(np.asarray(d.attrs), b.adj, b.pool, None)
    np.testing.assert_allclose(E._predict(ev.config, ev.params, b),
                               E._predict(ev.config, ev.params, dense), rtol=1e-10)
