import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from owgr.errors import CapacityExhausted, ShapeError
from owgr.nn import GestureNet, cross_entropy, forward
from owgr.strategies import (
    HYPERPARAMS,
    MAS,
    SI,
    LwF,
    PackNet,
    Replay,
    Strategy,
    StrategyConfig,
    StrategyState,
    distillation,
    make_strategy,
    mas_importance,
    select_keep,
    si_accumulate,
)
from owgr.tasks import Split, Task
from owgr.trainer import TrainConfig, evaluate, evaluate_with_mask, train_task


def _fresh(task, seed=0):
    net = GestureNet(seed=seed)
    net.add_head(task.index, task.n_classes, np.random.default_rng(seed))
    return net


def test_decayable_sets():
    decay = {k: [n for n, _, d in v if d] for k, v in HYPERPARAMS.items()}
    assert decay == {"finetune": [], "lwf": ["lambda"], "si": ["c"], "mas": ["lambda"], "packnet": [], "replay": []}
    assert make_strategy("lwf").hp == {"lambda": 1.0, "temperature": 2.0, "warmup_epochs": 15}
    assert make_strategy("replay").hp["buffer_size"] == 1000


def test_hyperparams_positive():
    with pytest.raises(ValueError):
        StrategyConfig("lwf", {"lambda": 1.0, "temperature": 0.0})
    with pytest.raises(ValueError):
        StrategyConfig("packnet", {"keep_frac": -0.5})


def test_lwf_first_task_is_plain_cross_entropy(small_sequence):
    task = small_sequence.tasks[0]
    net = _fresh(task)
    s = LwF()
    s.before_task(net, task)
    assert s.state.teacher_logits == {}
    idx = np.arange(16)
    loss, grad, _ = s.loss_and_grad(net, task, idx, None)
    ce, _ = cross_entropy(forward(net, task.train.X[idx], task.index), task.train.y[idx])
    assert loss == pytest.approx(ce, rel=1e-12)


def _lwf_on_second_task(small_sequence, **hp):
    t1, t2 = small_sequence.tasks[:2]
    net = _fresh(t1)
    net.add_head(t2.index, t2.n_classes, np.random.default_rng(1))
    s = LwF(hp)
    s.before_task(net, t2)
    return net, t2, s


def test_lwf_warmup_freezes_trunk_then_releases(small_sequence):
    net, task, s = _lwf_on_second_task(small_sequence, warmup_epochs=2)
    n = len(task.train)
    idx = np.arange(n)
    for expect_frozen in (True, True, False):
        _, grad, _ = s.loss_and_grad(net, task, idx, None)
        s.mask_grad(grad)
        head = grad[net.head_span(task.index)]
        assert np.any(head != 0)
        assert (not np.any(grad[: net.trunk_size])) == expect_frozen


@pytest.mark.parametrize("hp", [{"lambda": 0.0}, {"warmup_epochs": 0}])
def test_lwf_without_warmup(small_sequence, hp):
    net, task, s = _lwf_on_second_task(small_sequence, **hp)
    _, grad, _ = s.loss_and_grad(net, task, np.arange(8), None)
    s.mask_grad(grad)
    assert np.any(grad[: net.trunk_size])


def test_lwf_first_task_has_no_warmup(small_sequence):
    task = small_sequence.tasks[0]
    net = _fresh(task)
    s = LwF()
    s.before_task(net, task)
    _, grad, _ = s.loss_and_grad(net, task, np.arange(8), None)
    s.mask_grad(grad)
    assert np.any(grad[: net.trunk_size])


def test_distillation_matched_targets():
    t = np.random.default_rng(0).normal(size=(7, 5))
    value, grad = distillation(t, t, 2.0)
    p = np.exp(t / 2) / np.exp(t / 2).sum(axis=1, keepdims=True)
    assert value == pytest.approx(float(-(p * np.log(p)).sum(axis=1).mean()), rel=1e-12)
    assert np.allclose(grad, 0.0, atol=1e-15)


def test_si_path_zeroed_on_task_start(small_sequence):
    task = small_sequence.tasks[0]
    s = SI()
    s.state.path_w = np.ones(3)
    s.before_task(_fresh(task), task)
    assert not s.state.path_w.any()


def test_si_accumulate_examples():
    state = StrategyState(path_w=np.zeros(1))
    si_accumulate(state, np.array([-1.0]), np.array([0.1]))
    assert state.path_w[0] == pytest.approx(0.1)
    si_accumulate(state, np.array([-1.0]), np.array([0.0]))
    assert state.path_w[0] == pytest.approx(0.1)
    si_accumulate(state, np.array([-1.0]), np.array([0.1]))
    si_accumulate(state, np.array([-1.0]), np.array([0.1]))
    assert state.path_w[0] == pytest.approx(0.3)
    with pytest.raises(ShapeError):
        si_accumulate(state, np.zeros(2), np.zeros(1))


@pytest.mark.parametrize("cls", [SI, MAS])
def test_quadratic_penalty_analytic(cls):
    s = cls()
    s.state.omega = np.array([2.0])
    s.state.theta_star = np.array([0.0])
    value, grad = s.penalty(np.array([0.5]))
    assert value == pytest.approx(0.5)
    assert grad[0] == pytest.approx(2.0)
    value, grad = s.penalty(np.array([0.0]))
    assert value == 0.0 and grad[0] == 0.0


def test_penalty_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    s = MAS({"lambda": 0.7})
    s.state.omega = rng.random(20)
    s.state.theta_star = rng.normal(size=20)
    theta = rng.normal(size=20)
    _, g = s.penalty(theta)
    eps = 1e-6
    for i in range(20):
        e = np.zeros(20)
        e[i] = eps
        num = (s.penalty(theta + e)[0] - s.penalty(theta - e)[0]) / (2 * eps)
        assert abs(num - g[i]) <= 1e-6 * max(abs(num), 1e-3)


class _Linear:
    """One-weight model ``f(x) = w x`` exposing the network interface MAS uses."""

    def __init__(self, w):
        self.params = np.array([float(w)])
        self.running = None

    @property
    def n_params(self):
        return 1

    def features(self, x, train=False, stats=None):
        self._x = x.reshape(len(x), 1)
        return self._x

    def head_logits(self, pooled, task_id):
        return self.params[0] * pooled

    def head_backward(self, pooled, task_id, dlogits, grad):
        grad[0] += float((dlogits * pooled).sum())
        return dlogits * self.params[0]

    def backward_features(self, dpooled, grad):
        pass


def test_mas_linear_analytic():
    assert mas_importance(_Linear(2.0), np.array([[1.0]]), 1)[0] == pytest.approx(4.0)


def test_mas_matches_finite_differences(small_sequence):
    task = small_sequence.tasks[0]
    net = _fresh(task, seed=2)
    X = task.train.X[:3]
    imp = mas_importance(net, X, task.index)

    def sq_norm(params):
        saved = net.params
        net.params = params
        try:
            return [
                float((net.head_logits(net.features(x[None], train=False), task.index) ** 2).sum()) for x in X
            ]
        finally:
            net.params = saved

    rng = np.random.default_rng(0)
    for i in rng.choice(net.n_params, 12, replace=False):
        e = np.zeros(net.n_params)
        e[i] = 1e-6
        plus, minus = sq_norm(net.params + e), sq_norm(net.params - e)
        num = np.mean([abs((p - m) / 2e-6) for p, m in zip(plus, minus)])
        assert abs(num - imp[i]) <= 1e-5 * max(num, 1e-4)


def test_select_keep_top_magnitude():
    assert set(select_keep(np.array([0.5, -0.1, 0.3, -0.9]), 0.5)) == {3, 0}
    with pytest.raises(CapacityExhausted):
        select_keep(np.array([1.0]), 0.5)


def test_packnet_capacity_boundary(small_sequence):
    task = small_sequence.tasks[0]
    net = _fresh(task)
    s = PackNet()
    s.state.masks = np.ones(net.trunk_size, dtype=np.int64)
    with pytest.raises(CapacityExhausted):
        s.before_task(net, task)


def _fake_task(index, n, dim=3):
    X = np.full((n, 1, dim), float(index))
    y = np.arange(n) % 2
    split = Split(X, y, np.arange(n))
    return Task(f"t{index}", ["a", "b"], split, split, split, index)


class _StatsNet:
    """Records which task snapshots a strategy refreshes."""

    def __init__(self):
        self.snapshots = {}
        self.refreshed = []

    def snapshot_stats(self, task_id):
        self.snapshots[task_id] = "current"
        self.refreshed.append(task_id)


def test_replay_quota_example():
    s = Replay({"buffer_size": 6})
    net = _StatsNet()
    for t in range(1, 4):
        s.after_task(net, _fake_task(t, 10), rng=np.random.default_rng(t))
        net.snapshots[t] = "own"
    assert [len(s.state.buffer[t][1]) for t in (1, 2, 3)] == [2, 2, 2]
    # each completed task refreshes the snapshots of earlier rehearsed tasks only
    assert net.refreshed == [1, 1, 2]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 50), st.lists(st.integers(1, 40), min_size=1, max_size=8))
def test_replay_buffer_bound(M, sizes):
    s = Replay({"buffer_size": M})
    for t, n in enumerate(sizes, start=1):
        s.after_task(_StatsNet(), _fake_task(t, n), rng=np.random.default_rng(t))
        assert s.buffer_size() <= M
        quotas = [len(s.state.buffer[k][1]) for k in s.state.buffer]
        capped = [min(q, M // t) for q in quotas]
        assert quotas == capped
        full = [q for q, n_k in zip(quotas, sizes) if n_k >= M // t]
        assert not full or max(full) - min(full) <= 1


def test_replay_stores_uniform_sample_of_current_task():
    s = Replay({"buffer_size": 4})
    s.after_task(None, _fake_task(1, 10), rng=np.random.default_rng(0))
    X, _ = s.state.buffer[1]
    assert np.all(X == 1.0) and len(X) == 4


def test_omega_grows_monotonically(small_sequence):
    cfg = TrainConfig(batch_size=32, max_epochs=2)
    for s in (SI(), MAS()):
        net = GestureNet(seed=0)
        prev = None
        for task in small_sequence.tasks[:2]:
            net.add_head(task.index, task.n_classes, np.random.default_rng(task.index))
            train_task(net, task, s, cfg, 1e-2, np.random.default_rng(0))
            om = s.state.omega
            assert np.all(om >= 0)
            if prev is not None:
                assert np.all(om[: len(prev)] >= prev)
            prev = om.copy()


def test_packnet_owned_weights_never_change(small_sequence):
    cfg = TrainConfig(batch_size=32, max_epochs=3, retrain_epochs=2)
    net, s = GestureNet(seed=0), PackNet()
    rows = []
    for task in small_sequence.tasks:
        net.add_head(task.index, task.n_classes, np.random.default_rng(task.index))
        before = net.params[: net.trunk_size][s.state.masks != 0].copy() if s.state.masks is not None else None
        owned = s.state.masks.copy() if s.state.masks is not None else None
        train_task(net, task, s, cfg, 1e-2, np.random.default_rng(0))
        if owned is not None:
            assert np.array_equal(s.state.masks[owned != 0], owned[owned != 0])
            assert np.array_equal(net.params[: net.trunk_size][owned != 0], before)
        rows.append([evaluate_with_mask(s, net, t.test.X, t.test.y, t.index) for t in small_sequence.tasks[: task.index]])
    for k in range(len(rows)):
        for j in range(k + 1):
            assert rows[k][j] == rows[j][j]


def test_masked_eval_equals_plain_eval_for_other_strategies(small_sequence):
    task = small_sequence.tasks[0]
    net = _fresh(task)
    for kind in ("finetune", "lwf", "si", "mas", "replay"):
        s = make_strategy(kind)
        assert evaluate_with_mask(s, net, task.test.X, task.test.y, 1) == evaluate(net, task.test.X, task.test.y, 1)


def test_finetune_forgets_on_interfering_tasks(catalog):
    from owgr.envelope import DataConfig, case_dataset
    from owgr.tasks import SequenceParams, build_sequence

    ds = case_dataset("new_context", DataConfig(per_class=20))
    seq = build_sequence("new_context", SequenceParams(2, granularity="coarse"), ds, np.random.default_rng(11))
    net, s = GestureNet(seed=0), make_strategy("finetune")
    cfg = TrainConfig(batch_size=32)
    accs = []
    for task in seq.tasks:
        net.add_head(task.index, task.n_classes, np.random.default_rng(task.index))
        train_task(net, task, s, cfg, 1e-2, np.random.default_rng(0))
        accs.append(evaluate(net, seq.tasks[0].test.X, seq.tasks[0].test.y, 1))
    assert accs[1] < accs[0]


@pytest.mark.parametrize("kind", ["si", "mas", "packnet", "replay", "lwf"])
def test_state_save_load_round_trip(tmp_path, small_sequence, kind):
    task = small_sequence.tasks[0]
    net = _fresh(task)
    s = make_strategy(kind)
    train_task(net, task, s, TrainConfig(batch_size=32, max_epochs=1, retrain_epochs=1), 1e-2, np.random.default_rng(0))
    s.save(tmp_path / "state")
    back = Strategy.load(tmp_path / "state")
    assert back.kind == kind and back.hp == s.hp
    for name in ("omega", "theta_star", "masks"):
        a, b = getattr(s.state, name), getattr(back.state, name)
        assert (a is None and b is None) or np.array_equal(a, b)
    for k, (X, y) in s.state.buffer.items():
        assert np.array_equal(back.state.buffer[k][0], X) and np.array_equal(back.state.buffer[k][1], y)
