import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from orthounlearn.data import gen_synthetic, partition_tasks
from orthounlearn.errors import DidNotConverge, EmptySplit, EmptyTestSet
from orthounlearn.model import ModelConfig, backbone_digest, init_model
from orthounlearn.scenario import (
    PretrainConfig,
    ProbeConfig,
    accuracy,
    build_subspaces,
    evaluate,
    h_mean,
    pretrain,
    projection_energy_probe,
    recovery_probe,
    retrain_oracle,
    run_incremental,
)
from orthounlearn.unlearn import SubspaceSet, TrainConfig, UnlearnTask


def test_h_mean_examples():
    assert h_mean(74.25, 74.65) == pytest.approx(74.4495, abs=1e-4)
    assert h_mean(80.0, 0.0) == 0.0
    assert h_mean(0.0, 0.0) == 0.0
    assert h_mean(50.0, 50.0) == 50.0


@given(st.floats(0, 100), st.floats(0, 100))
def test_h_mean_algebra(a, d):
    h = h_mean(a, d)
    assert h == pytest.approx(h_mean(d, a))
    assert h <= 2 * min(a, d) + 1e-9
    assert min(a, d) - 1e-9 <= h <= max(a, d) + 1e-9


def test_pretrain_separable_two_class():
    ds = gen_synthetic(2, 8, 100, 20.0, 0)
    m = pretrain(ds, ModelConfig(input_dim=8, hidden_dim=8, num_classes=2, lora_rank=2), PretrainConfig(target_accuracy=100.0))
    assert accuracy(m, *ds.select("train")) == 100.0


def test_pretrain_errors():
    ds = gen_synthetic(2, 8, 20, 20.0, 0)
    with pytest.raises(DidNotConverge):
        pretrain(ds, ModelConfig(input_dim=8, num_classes=2), PretrainConfig(max_epochs=0))
    with pytest.raises(ValueError):
        pretrain(ds, ModelConfig(input_dim=8, num_classes=3), PretrainConfig())


def test_default_pretrain_reaches_target(default_run):
    report, _ = default_run
    # frozen from the first default run
    assert report["pretrain"]["test"] >= 95.0
    assert report["pretrain"]["test"] == pytest.approx(99.75)


def test_build_subspaces_single_sample(small_world):
    ds, model, _ = small_world
    x_f, _ = ds.select("train", [0])
    x_r, y_r = ds.select("train", [1, 2, 3, 4, 5])
    task = UnlearnTask(1, frozenset({0}), frozenset({1, 2, 3, 4, 5}), x_f[:, :1], x_r, y_r)
    subs = build_subspaces(model, task, 0.99)
    assert all(s.k <= 1 for s in subs.forgetting_in + subs.forgetting_out)
    assert subs.forgetting_in[0].k == 1


def test_build_subspaces_expand_noop(small_world):
    _, model, tasks = small_world
    first = build_subspaces(model, tasks[0], 0.99)
    again = build_subspaces(model, tasks[0], 0.99, first)
    for a, b in zip(first.forgetting_in + first.forgetting_out, again.forgetting_in + again.forgetting_out):
        np.testing.assert_array_equal(a.basis, b.basis)


def test_build_subspaces_empty_split(small_world):
    _, model, tasks = small_world
    t = tasks[0]
    empty = UnlearnTask(1, t.forgetting_classes, t.remaining_classes, t.x_f_train[:, :0], t.x_r_train, t.y_r_train)
    with pytest.raises(EmptySplit):
        build_subspaces(model, empty)


def test_energy_probe_self_span_and_zero(small_world):
    _, model, tasks = small_world
    subs = build_subspaces(model, tasks[0], 1.0)
    assert projection_energy_probe(model, tasks[0].x_f_train, subs) == pytest.approx(1.0)
    fresh = init_model(model.config, 0)  # zero biases, so zero input gives h = 0
    assert projection_energy_probe(fresh, np.zeros((32, 3)), subs) == 0.0
    with pytest.raises(EmptySplit):
        projection_energy_probe(model, np.zeros((32, 0)), subs)


def test_probe_leaves_backbone_alone(small_world):
    ds, model, _ = small_world
    before = backbone_digest(model)
    res = recovery_probe(model, ds, {0, 1}, ProbeConfig())
    assert backbone_digest(model) == before
    assert res["recovered_acc_f"] >= accuracy(model, *ds.select("test", [0, 1])) - 5


def test_retrain_oracle(small_world):
    ds, _, _ = small_world
    oracle = retrain_oracle(ds, [2, 3, 4, 5], ModelConfig(hidden_dim=16, num_classes=6), PretrainConfig(max_epochs=30))
    assert accuracy(oracle, *ds.select("test", [0, 1])) <= 100 / 6
    assert accuracy(oracle, *ds.select("test", [2, 3, 4, 5])) >= 95.0
    with pytest.raises(EmptySplit):
        retrain_oracle(ds, [], ModelConfig(hidden_dim=16, num_classes=6), PretrainConfig())


def test_evaluate_empty_test_set(small_world):
    ds, model, tasks = small_world
    t = tasks[0]
    with pytest.raises(EmptyTestSet):
        accuracy(model, np.zeros((32, 0)), np.zeros(0, int))
    rec = evaluate(model, ds, t, 100.0)
    assert rec.acc_o is None and 0 <= rec.acc_r <= 100


def test_incremental_small(small_world):
    ds, model, tasks = small_world
    cfg = TrainConfig(epochs=3, seed=0)
    res = run_incremental(model, ds, tasks, cfg)
    again = run_incremental(model, ds, tasks, cfg)
    assert [o.metrics for o in res.outcomes] == [o.metrics for o in again.outcomes]
    assert res.outcomes[0].metrics.acc_o is None
    assert res.outcomes[1].metrics.acc_o is not None
    for a, b in zip(res.subspaces, res.subspaces[1:]):
        assert all(x.k <= y.k for x, y in zip(a.forgetting_in + a.forgetting_out, b.forgetting_in + b.forgetting_out))
    for o in res.outcomes:
        assert o.max_relative_delta <= 1e-8
    # T = 0 is a no-op
    empty = run_incremental(model, ds, [], cfg)
    assert empty.outcomes == [] and empty.model is model


def test_remaining_rank_bound(default_run):
    report, _ = default_run
    last = report["tasks"][-1]["subspace_ranks"]
    # 4 surviving classes x 32 training samples each
    assert all(k <= 128 for k in last["remaining_out"])


def test_probe_baselines(default_run):
    report, _ = default_run
    probes = report["probes"]
    assert probes["pretrained"]["recovered_acc_f"] >= 95.0
    assert probes["head_mask"]["recovered_acc_f"] >= 95.0
    assert probes["unlearned"]["recovered_acc_f"] < probes["head_mask"]["recovered_acc_f"]


def test_energy_drops_after_unlearning(default_run):
    report, _ = default_run
    for row in report["tasks"]:
        assert row["energy_after"] < row["energy_before"]
