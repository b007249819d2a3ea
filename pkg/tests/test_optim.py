import numpy as np
import pytest

from klp.optim import Adam, AllRestartsFailed, EarlyStopping, adam_step, early_stop_update, multi_restart_train
from klp.tensor import Tensor


def test_zero_gradient_leaves_parameters():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    for _ in range(5):
        p.grad = np.zeros(2)
        opt.step()
    assert p.data.tolist() == [1.0, -2.0]


def test_first_step_is_lr_times_sign():
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    p.grad = np.array([1.0])
    adam_step([p], opt)
    # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    assert abs(p.data[0] + 0.1 / (1 + 1e-8)) < 1e-12
    assert opt.t == 1


@pytest.mark.parametrize("scale", [0.01, 1.0, 1e3])
def test_first_step_scale_invariant(scale):
    g = np.array([0.3, -2.0, 5.0])
    p = Tensor(np.zeros(3), requires_grad=True)
    opt = Adam([p], lr=0.01)
    p.grad = g * scale
    opt.step()
    np.testing.assert_allclose(np.abs(p.data), 0.01, rtol=0.01)
    assert np.array_equal(np.sign(p.data), -np.sign(g))


def test_identical_streams_identical_trajectories():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(20, 4))
    a, b = Tensor(np.ones(4), requires_grad=True), Tensor(np.ones(4), requires_grad=True)
    oa, ob = Adam([a], lr=0.05), Adam([b], lr=0.05)
    for g in grads:
        a.grad, b.grad = g.copy(), g.copy()
        oa.step()
        ob.step()
    assert a.data.tobytes() == b.data.tobytes()
    assert oa.t == 20


def test_missing_grad_is_rejected():
    p = Tensor(np.zeros(2), requires_grad=True, name="w")
    with pytest.raises(ValueError, match="w"):
        Adam([p]).step()


def test_adam_minimises_a_quadratic():
    p = Tensor(np.array([3.0, -4.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    for _ in range(500):
        opt.zero_grad()
        (p * p).sum().backward()
        opt.step()
    assert np.all(np.abs(p.data) < 1e-2)


def test_early_stopping_never_stops_when_improving():
    m = EarlyStopping(patience=3)
    assert all(early_stop_update(m, float(i)) == "continue" for i in range(100))


def test_early_stopping_plateau_after_epoch_5():
    m = EarlyStopping(patience=20)
    results = []
    for epoch in range(1, 40):
        score = min(epoch, 5)
        results.append(early_stop_update(m, score, lambda e=epoch: f"model@{e}"))
        if results[-1] == "stop":
            break
    assert len(results) == 25
    assert m.best_checkpoint == "model@5" and m.best_score == 5 and m.best_epoch == 5


def test_equal_score_is_not_improvement():
    m = EarlyStopping(patience=2)
    assert early_stop_update(m, 0.5) == "continue"
    assert early_stop_update(m, 0.5) == "continue"
    assert early_stop_update(m, 0.5) == "stop"


def test_minimize_direction():
    m = EarlyStopping(patience=1, direction="minimize")
    assert not m.update(1.0)
    assert not m.update(0.5)
    assert m.update(0.7)
    assert m.best_score == 0.5


def test_restart_selects_argmax():
    scores = {0: 0.6, 1: 0.8, 2: 0.7}
    r = multi_restart_train(lambda s: (f"m{s}", scores[s]), 3)
    assert (r.model, r.score, r.index) == ("m1", 0.8, 1)
    assert r.score == max(r.scores)


def test_restart_single_run_and_ties():
    r = multi_restart_train(lambda s: ("only", 0.5), 1)
    assert r.model == "only" and r.index == 0
    r = multi_restart_train(lambda s: (s, 0.5), 3, seeds=[7, 8, 9])
    assert r.model == 7


def test_restart_failures_skipped_then_fatal():
    def fn(seed):
        if seed == 0:
            raise RuntimeError("diverged")
        return seed, 0.1 * seed
    r = multi_restart_train(fn, 3)
    assert r.model == 2 and len(r.failures) == 1 and r.scores[0] is None

    def boom(seed):
        raise RuntimeError("x")
    with pytest.raises(AllRestartsFailed):
        multi_restart_train(boom, 2)


def test_default_restart_count_is_ten():
    seen = []
    multi_restart_train(lambda s: (seen.append(s), 0.0))
    assert len(seen) == 10
