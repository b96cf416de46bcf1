import math

import numpy as np
import pytest
from oracles import fd_check

from orthounlearn.errors import EmptyBatch, InvalidConfig, NoAdapters
from orthounlearn.model import Linear, LoraAdapter, Model, ModelConfig, backbone_digest, backward, forward, head_digest
from orthounlearn.subspace import Subspace
from orthounlearn.unlearn import (
    SubspaceSet,
    TrainConfig,
    UnlearnTask,
    combine,
    cross_entropy,
    fop_f_loss,
    fop_r_loss,
    project_gradient,
    total_loss,
    unlearn_task,
)

E1 = Subspace(np.array([[1.0], [0.0]]))
E2 = Subspace(np.array([[0.0], [1.0]]))
FULL = Subspace(np.eye(2))
EMPTY = Subspace.empty(2)


def _trace(*cols):
    m = Model(
        ModelConfig(2, 2, 1, 2, "relu", 1),
        [Linear(np.eye(2), np.zeros(2))],
        Linear(np.eye(2), np.zeros(2)),
    )
    return forward(m, np.column_stack(cols))[1]


def _subs(f_out=E1, r_out=E1, f_in=E1, r_in=E2):
    return SubspaceSet([f_in], [r_in], [f_out], [r_out])


def test_fop_f_examples():
    assert fop_f_loss(_trace([0.0, 1.0]), _subs()) == 0.0
    assert fop_f_loss(_trace([1.0, 0.0]), _subs()) == 1.0
    assert fop_f_loss(_trace([1.0, 0.0], [1.0, 0.0]), _subs()) == 1.0


def test_fop_r_examples():
    assert fop_r_loss(_trace([2.0, 0.0]), _subs()) == 0.0
    assert fop_r_loss(_trace([0.0, 1.0]), _subs()) == 1.0
    assert fop_r_loss(_trace([1.0, 1.0]), _subs()) == 1.0


def test_combine_examples():
    cfg = TrainConfig(lambda1=1, lambda2=0.2)
    assert combine(2, 3, 5, cfg).total == pytest.approx(6, rel=1e-12)
    assert combine(2, 3, 5, TrainConfig(lambda1=0, lambda2=0)).total == 2


def test_uniform_logits_cross_entropy():
    loss, grad = cross_entropy(np.zeros((7, 3)), np.array([0, 3, 6]))
    assert loss == pytest.approx(math.log(7), rel=1e-12)
    np.testing.assert_allclose(grad.sum(axis=0), 0, atol=1e-15)


def test_project_gradient_examples():
    np.testing.assert_allclose(project_gradient([[1.0, 2.0]], E1, E2), [[1.0, 0.0]])
    g = np.array([[0.3, -1.7], [2.0, 0.5]])
    np.testing.assert_allclose(project_gradient(g, FULL, EMPTY), g)
    np.testing.assert_allclose(project_gradient(g, E1, E1), 0)
    with pytest.raises(InvalidConfig):
        project_gradient(g, E1, E2, "diagonal")


def test_literal_mode_negates_remaining_component():
    g = np.array([[1.0, 2.0]])
    lit = project_gradient(g, E1, E2, "literal")
    np.testing.assert_allclose(lit, [[1.0, -2.0]])
    assert abs(lit @ np.array([0.0, 1.0])).item() == 2.0


def test_project_gradient_kills_remaining_span():
    rng = np.random.default_rng(0)
    for _ in range(50):
        Bf = Subspace(np.linalg.qr(rng.standard_normal((6, 3)))[0])
        Br = Subspace(np.linalg.qr(rng.standard_normal((6, 2)))[0])
        g = project_gradient(rng.standard_normal((2, 6)), Bf, Br)
        assert np.abs(g @ Br.basis).max() <= 1e-10 * max(np.linalg.norm(g), 1e-300)


def test_backward_zero_batch_and_quadratic_form():
    m = Model(ModelConfig(2, 2, 1, 2, "relu", 1), [Linear(np.eye(2), np.zeros(2))], Linear(np.eye(2), np.zeros(2)))
    m.adapters = [LoraAdapter(np.zeros((1, 2)), np.array([[1.0], [0.5]]))]
    logits, tr = forward(m, np.zeros((2, 3)))
    g = backward(m, tr, cross_entropy(logits, np.array([0, 1, 0]))[1])
    assert not g.down[0].any() and not g.up[0].any()
    # for h inside the positive orthant, dL/dh of ||P h||^2 passes straight to dW as 2 P h x^T
    x = np.array([[2.0], [1.0]])
    _, tr = forward(m, x)
    P = E1.projector
    g = backward(m, tr, None, [2 * P @ tr.outputs[0]])
    np.testing.assert_allclose(g.down[0], m.adapters[0].up.T @ (2 * P @ tr.outputs[0]) @ x.T)


@pytest.mark.parametrize("seed", range(6))
def test_finite_differences(seed):
    err, n = fd_check(seed)
    assert n <= 500
    assert err <= 1e-4


def _toy_task():
    x_f = np.array([[1.0, 0.8], [0.1, 0.0]])
    x_r = np.array([[0.0, 0.1], [1.0, 0.9]])
    return UnlearnTask(1, frozenset({0}), frozenset({1}), x_f, x_r, np.array([1, 1]))


def _toy_model():
    m = Model(ModelConfig(2, 2, 1, 2, "relu", 1), [Linear(np.eye(2), np.zeros(2))], Linear(np.eye(2), np.zeros(2)))
    m.adapters = [LoraAdapter(np.zeros((1, 2)), np.array([[1.0], [-0.5]]))]
    return m


def test_zero_epochs_and_zero_lr_leave_model_unchanged():
    m = _toy_model()
    for cfg in (TrainConfig(epochs=0), TrainConfig(learning_rate=0.0, epochs=3)):
        out = unlearn_task(m, _toy_task(), _subs(), cfg)
        np.testing.assert_array_equal(out.adapters[0].down, m.adapters[0].down)
        np.testing.assert_array_equal(out.adapters[0].up, m.adapters[0].up)


def test_single_step_with_hand_set_gradients():
    m = _toy_model()
    g_down = np.array([[0.4, -3.0]])
    g_up = np.array([[0.25], [1.0]])

    def hook(grads):
        grads.down[0] = g_down
        grads.up[0] = g_up

    cfg = TrainConfig(learning_rate=0.1, epochs=1, batch_size=2, optimizer="sgd")
    out = unlearn_task(m, _toy_task(), _subs(), cfg, step_hook=hook)
    # projection onto e1 then away from e2: [0.4, 0]
    np.testing.assert_allclose(out.adapters[0].down, [[-0.04, 0.0]], rtol=0, atol=1e-15)
    np.testing.assert_allclose(out.adapters[0].up, [[1.0 - 0.025], [-0.5 - 0.1]], rtol=0, atol=1e-15)


def test_unlearn_leaves_backbone_and_head_alone(adapted_problem):
    model, task, subs = adapted_problem
    records = []
    out = unlearn_task(model, task, subs, TrainConfig(epochs=2, learning_rate=1e-3), on_step=records.append)
    assert head_digest(out) == head_digest(model)
    assert backbone_digest(out) == backbone_digest(model)
    assert records and set(records[0]) == {"task", "epoch", "step", "ce", "fop_f", "fop_r", "total"}
    r = records[0]
    assert r["total"] == pytest.approx(r["ce"] + r["fop_f"] + 0.2 * r["fop_r"], rel=1e-12)
    for ad, s in zip(out.adapters, subs.remaining_in):
        delta = ad.up @ ad.down
        assert np.linalg.norm(delta @ s.basis) <= 1e-8 * np.linalg.norm(delta)


def test_unlearn_errors(adapted_problem):
    model, task, subs = adapted_problem
    bare = model.copy()
    bare.adapters = None
    with pytest.raises(NoAdapters):
        unlearn_task(bare, task, subs, TrainConfig())
    with pytest.raises(InvalidConfig):
        unlearn_task(model, task, subs, TrainConfig(lambda1=-1))
    with pytest.raises(EmptyBatch):
        total_loss(np.zeros((32, 0)), task.x_r_train, task.y_r_train, model, subs, TrainConfig())


def test_rows_stay_in_forgetting_span_when_spans_are_orthogonal():
    rng = np.random.default_rng(5)
    Q = np.linalg.qr(rng.standard_normal((8, 8)))[0]
    Bf, Br = Subspace(Q[:, :3]), Subspace(Q[:, 3:6])
    for _ in range(20):
        g = project_gradient(rng.standard_normal((4, 8)), Bf, Br)
        assert np.linalg.norm(g - g @ Bf.projector) <= 1e-8 * np.linalg.norm(g)
