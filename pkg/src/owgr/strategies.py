"""Continual-learning update policies behind one task lifecycle.

Every strategy follows the same sequence, driven by the trainer::

    before_task(net, task)
    loop:  loss_and_grad(net, task, idx, rng) -> mask_grad(grad) -> SGD step
           -> after_step(net, task_grad, delta)
    after_task(net, task, retrain)

``task_grad`` is the gradient of the plain task loss (no penalty), which is
what the SI path integral accumulates.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CapacityExhausted, NumericsError, ShapeError
from .nn import cross_entropy, log_softmax, softmax

KINDS = ("finetune", "lwf", "si", "packnet", "replay", "mas")

# (name, initial value, decayable) in declaration order
HYPERPARAMS = {
    "finetune": [],
    "lwf": [("lambda", 1.0, True), ("temperature", 2.0, False), ("warmup_epochs", 15, False)],
    "si": [("c", 1.0, True), ("xi", 1e-3, False)],
    "mas": [("lambda", 1.0, True)],
    "packnet": [("keep_frac", 0.5, False)],
    "replay": [("buffer_size", 1000, False)],
}
# non-decayable settings for which 0 means "off"
MAY_BE_ZERO = {"warmup_epochs"}


@dataclass
class StrategyConfig:
    kind: str
    hyperparams: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {KINDS}")
        merged = {name: value for name, value, _ in HYPERPARAMS[self.kind]}
        unknown = set(self.hyperparams) - set(merged)
        if unknown:
            raise ValueError(f"{self.kind} has no hyperparameters {sorted(unknown)}")
        merged.update(self.hyperparams)
        for name, value in merged.items():
            # decayables may reach 0 (the finetune limit); the rest must stay positive
            if value < 0 or (value == 0 and name not in self.decayable and name not in MAY_BE_ZERO):
                raise ValueError(f"{self.kind}.{name} must be positive, got {value}")
        self.hyperparams = merged

    @property
    def decayable(self) -> list:
        return [name for name, _, d in HYPERPARAMS[self.kind] if d]


def _fit(arr: np.ndarray | None, n: int, fill=0.0) -> np.ndarray:
    if arr is None:
        return np.full(n, fill)
    if len(arr) > n:
        raise ShapeError("strategy state is longer than the parameter vector")
    if len(arr) == n:
        return arr
    return np.concatenate([arr, np.full(n - len(arr), fill, dtype=arr.dtype)])


@dataclass
class StrategyState:
    omega: np.ndarray | None = None
    path_w: np.ndarray | None = None
    theta_star: np.ndarray | None = None
    theta_start: np.ndarray | None = None
    masks: np.ndarray | None = None
    buffer: dict = field(default_factory=dict)  # task index -> (X, y)
    teacher_logits: dict = field(default_factory=dict)  # old head -> (n_train, C)
    tasks_seen: int = 0


class Strategy:
    kind = "finetune"

    def __init__(self, hyperparams: dict | None = None):
        self.config = StrategyConfig(self.kind, dict(hyperparams or {}))
        self.hp = self.config.hyperparams
        self.state = StrategyState()

    def copy(self) -> "Strategy":
        return copy.deepcopy(self)

    def with_hyperparams(self, **updates) -> "Strategy":
        s = self.copy()
        s.config = StrategyConfig(self.kind, {**self.hp, **updates})
        s.hp = s.config.hyperparams
        return s

    @property
    def decayable(self) -> list:
        return self.config.decayable

    # -- lifecycle -----------------------------------------------------------

    def before_task(self, net, task) -> None:
        pass

    def loss_and_grad(self, net, task, idx, rng):
        """Loss, full gradient and task-loss gradient for one minibatch."""
        X, y = task.train.X[idx], task.train.y[idx]
        pooled = net.features(X, train=True)
        logits = net.head_logits(pooled, task.index)
        loss, dlogits = cross_entropy(logits, y)
        grad = np.zeros(net.n_params)
        net.backward_features(net.head_backward(pooled, task.index, dlogits, grad), grad)
        return loss, grad, grad

    def mask_grad(self, grad: np.ndarray) -> None:
        pass

    def after_step(self, net, task_grad, delta) -> None:
        pass

    def after_task(self, net, task, retrain=None, rng=None) -> None:
        self.state.tasks_seen += 1

    def eval_params(self, net, task_id) -> np.ndarray:
        """Parameter vector with which ``task_id`` is evaluated."""
        return net.params

    # -- persistence ------------------------------------------------------

    def save(self, path: str | Path) -> None:
        """JSON description plus a raw little-endian float64 sidecar."""
        path = Path(path)
        arrays, meta = [], {}
        offset = 0
        for name in ("omega", "path_w", "theta_star", "theta_start", "masks"):
            a = getattr(self.state, name)
            if a is not None:
                arrays.append(np.asarray(a, dtype="<f8"))
                meta[name] = [offset, len(a)]
                offset += len(a)
        buffers = {}
        for t, (X, y) in self.state.buffer.items():
            arrays.append(np.asarray(X, dtype="<f8").ravel())
            buffers[str(t)] = {"X": [offset, list(X.shape)], "y": y.tolist()}
            offset += X.size
        teachers = {}
        for t, L in self.state.teacher_logits.items():
            arrays.append(np.asarray(L, dtype="<f8").ravel())
            teachers[str(t)] = [offset, list(L.shape)]
            offset += L.size
        doc = {
            "kind": self.kind,
            "hyperparams": self.hp,
            "tasks_seen": self.state.tasks_seen,
            "vectors": meta,
            "buffer": buffers,
            "teacher_logits": teachers,
            "sidecar": path.name + ".f64",
        }
        path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        blob = np.concatenate(arrays) if arrays else np.zeros(0)
        path.with_name(path.name + ".f64").write_bytes(blob.astype("<f8").tobytes())

    @staticmethod
    def load(path: str | Path) -> "Strategy":
        path = Path(path)
        doc = json.loads(path.read_text(encoding="utf-8"))
        blob = np.frombuffer(path.with_name(doc["sidecar"]).read_bytes(), dtype="<f8")
        s = make_strategy(doc["kind"], doc["hyperparams"])
        s.state.tasks_seen = doc["tasks_seen"]
        for name, (off, n) in doc["vectors"].items():
            a = blob[off : off + n].copy()
            setattr(s.state, name, a.astype(np.int64) if name == "masks" else a)
        for t, rec in doc["buffer"].items():
            off, shape = rec["X"]
            X = blob[off : off + int(np.prod(shape))].reshape(shape).copy()
            s.state.buffer[int(t)] = (X, np.asarray(rec["y"], dtype=int))
        for t, (off, shape) in doc["teacher_logits"].items():
            s.state.teacher_logits[int(t)] = blob[off : off + int(np.prod(shape))].reshape(shape).copy()
        return s


class Finetune(Strategy):
    kind = "finetune"


def distillation(student: np.ndarray, teacher: np.ndarray, temperature: float):
    """Soft-target cross-entropy ``-mean sum softmax(t/T) log softmax(s/T)``.

    Returns the value and its gradient w.r.t. the student logits.
    """
    p = softmax(teacher / temperature)
    logq = log_softmax(student / temperature)
    n = len(student)
    value = float(-(p * logq).sum(axis=1).mean())
    dstudent = (np.exp(logq) - p) / (temperature * n)
    return value, dstudent


class LwF(Strategy):
    """Distillation of every old head's outputs on the new task's windows.

    With old heads present and ``lambda > 0`` the first ``warmup_epochs``
    passes over the new data train only the new head (trunk frozen), so the
    randomly initialized head does not drive large gradients into the shared
    trunk before distillation can hold it in place.
    """

    kind = "lwf"

    def __init__(self, hyperparams=None):
        super().__init__(hyperparams)
        self._warmup_windows = 0
        self._seen = 0
        self._trunk = 0

    def before_task(self, net, task):
        self.state.teacher_logits = {}
        self._seen = 0
        self._trunk = net.trunk_size
        old = [h for h in net.heads if h != task.index]
        active = bool(old) and self.hp["lambda"] > 0
        self._warmup_windows = int(self.hp["warmup_epochs"]) * len(task.train) if active else 0
        if not old:
            return
        # batch statistics of the new data, as the student sees it during training
        pooled = net.features(task.train.X, train=True, update_stats=False)
        for h in old:
            self.state.teacher_logits[h] = net.head_logits(pooled, h)

    def in_warmup(self) -> bool:
        return self._seen <= self._warmup_windows and self._warmup_windows > 0

    def loss_and_grad(self, net, task, idx, rng):
        self._seen += len(idx)
        X, y = task.train.X[idx], task.train.y[idx]
        pooled = net.features(X, train=True)
        logits = net.head_logits(pooled, task.index)
        loss, dlogits = cross_entropy(logits, y)
        grad = np.zeros(net.n_params)
        dpooled = net.head_backward(pooled, task.index, dlogits, grad)
        lam, T = self.hp["lambda"], self.hp["temperature"]
        scale = lam * T * T
        for h, teacher in self.state.teacher_logits.items():
            value, dstudent = distillation(net.head_logits(pooled, h), teacher[idx], T)
            loss += scale * value
            dpooled = dpooled + net.head_backward(pooled, h, scale * dstudent, grad)
        net.backward_features(dpooled, grad)
        # SI is the only consumer of task_grad; LwF returns the full gradient
        return loss, grad, grad

    def mask_grad(self, grad):
        if self.in_warmup():
            grad[: self._trunk] = 0.0


class _QuadraticAnchor(Strategy):
    """Shared machinery for SI and MAS: ``coeff * sum omega (theta - theta*)^2``."""

    coeff_name = "lambda"

    def before_task(self, net, task):
        n = net.n_params
        self.state.omega = _fit(self.state.omega, n)
        if self.state.theta_star is not None:
            self.state.theta_star = _fit(self.state.theta_star, n)
        self.state.theta_start = net.params.copy()

    def penalty(self, params):
        """Penalty value and gradient; zero before the first consolidation."""
        st = self.state
        if st.theta_star is None:
            return 0.0, None
        coeff = self.hp[self.coeff_name]
        diff = params - st.theta_star
        value = float(coeff * np.sum(st.omega * diff * diff))
        if not np.isfinite(value):
            raise NumericsError("non-finite regularization penalty")
        return value, 2.0 * coeff * st.omega * diff

    def loss_and_grad(self, net, task, idx, rng):
        loss, task_grad, _ = Strategy.loss_and_grad(self, net, task, idx, rng)
        value, pgrad = self.penalty(net.params)
        if pgrad is None:
            return loss, task_grad, task_grad
        return loss + value, task_grad + pgrad, task_grad


def si_accumulate(state: StrategyState, grads: np.ndarray, delta_theta: np.ndarray) -> StrategyState:
    """Path-integral contribution of one optimizer step: ``w -= g * delta``."""
    if grads.shape != delta_theta.shape or state.path_w is None or state.path_w.shape != grads.shape:
        raise ShapeError("path accumulator, gradient and step lengths differ")
    state.path_w -= grads * delta_theta
    return state


class SI(_QuadraticAnchor):
    kind = "si"
    coeff_name = "c"

    def before_task(self, net, task):
        super().before_task(net, task)
        self.state.path_w = np.zeros(net.n_params)

    def after_step(self, net, task_grad, delta):
        si_accumulate(self.state, task_grad, delta)

    def after_task(self, net, task, retrain=None, rng=None):
        st = self.state
        total = net.params - st.theta_start
        # negative path terms are clamped so omega stays a valid quadratic weight
        st.omega = st.omega + np.maximum(st.path_w, 0.0) / (total * total + self.hp["xi"])
        st.theta_star = net.params.copy()
        st.tasks_seen += 1


def mas_importance(net, X: np.ndarray, task_id) -> np.ndarray:
    """Mean over windows of |d ||logits||^2 / d theta| for ``task_id``'s head."""
    total = np.zeros(net.n_params)
    stats = net.running
    for x in X:
        pooled = net.features(x[None], train=False, stats=stats)
        logits = net.head_logits(pooled, task_id)
        g = np.zeros(net.n_params)
        net.backward_features(net.head_backward(pooled, task_id, 2.0 * logits, g), g)
        total += np.abs(g)
    return total / len(X)


class MAS(_QuadraticAnchor):
    kind = "mas"
    coeff_name = "lambda"

    def after_task(self, net, task, retrain=None, rng=None):
        st = self.state
        st.omega = st.omega + mas_importance(net, task.train.X, task.index)
        st.theta_star = net.params.copy()
        st.tasks_seen += 1


def select_keep(values: np.ndarray, keep_frac: float) -> np.ndarray:
    """Indices of the ``floor(keep_frac * n)`` largest-magnitude entries."""
    k = int(np.floor(keep_frac * len(values)))
    if k < 1:
        raise CapacityExhausted(f"{len(values)} free weights leave nothing to keep at {keep_frac}")
    order = np.argsort(-np.abs(values), kind="stable")
    return order[:k]


class PackNet(Strategy):
    """Per-layer magnitude pruning into task-owned binary masks.

    ``state.masks`` covers the trunk: 0 marks a free weight, ``t`` a weight
    owned by task ``t``.  Norm parameters and biases are not pruned; they are
    owned by the first task and frozen afterwards.
    """

    kind = "packnet"

    def __init__(self, hyperparams=None):
        super().__init__(hyperparams)
        self._current = None
        self._retraining = False
        self._frozen_values = None
        self._frozen_idx = None

    def before_task(self, net, task):
        if self.state.masks is None:
            self.state.masks = np.zeros(net.trunk_size, dtype=np.int64)
        for name in net.prunable_layers():
            if not np.any(self.state.masks[net.span(name)] == 0):
                raise CapacityExhausted(f"layer {name} has no free weights left")
        self._current = task.index
        self._retraining = False
        self._frozen_idx = np.flatnonzero(self.state.masks != 0)
        self._frozen_values = net.params[self._frozen_idx].copy()

    def mask_grad(self, grad):
        trunk = grad[: len(self.state.masks)]
        if self._retraining:
            trunk[self.state.masks != self._current] = 0.0
        else:
            trunk[self.state.masks != 0] = 0.0

    def after_step(self, net, task_grad, delta):
        if not np.array_equal(net.params[self._frozen_idx], self._frozen_values):
            raise AssertionError("PackNet: a weight owned by an earlier task changed")

    def after_task(self, net, task, retrain=None, rng=None):
        masks = self.state.masks
        keep_frac = self.hp["keep_frac"]
        plans = []
        for name in net.prunable_layers():
            sl = net.span(name)
            free = np.flatnonzero(masks[sl] == 0) + sl.start
            plans.append((free, free[select_keep(net.params[free], keep_frac)]))
        for free, keep in plans:
            net.params[np.setdiff1d(free, keep)] = 0.0
            masks[keep] = task.index
        if self.state.tasks_seen == 0:
            unpruned = np.ones(len(masks), dtype=bool)
            for name in net.prunable_layers():
                unpruned[net.span(name)] = False
            masks[unpruned] = task.index
        self._retraining = True
        self._frozen_idx = np.flatnonzero((masks != 0) & (masks != task.index))
        self._frozen_values = net.params[self._frozen_idx].copy()
        if retrain is not None:
            retrain()
        self._retraining = False
        self.state.tasks_seen += 1

    def eval_params(self, net, task_id):
        p = net.params.copy()
        trunk = p[: len(self.state.masks)]
        trunk[(self.state.masks == 0) | (self.state.masks > task_id)] = 0.0
        return p


class Replay(Strategy):
    kind = "replay"

    @property
    def capacity(self) -> int:
        return int(self.hp["buffer_size"])

    def buffer_size(self) -> int:
        return sum(len(y) for _, y in self.state.buffer.values())

    def loss_and_grad(self, net, task, idx, rng):
        X, y = task.train.X[idx], task.train.y[idx]
        groups = [(task.index, len(y), y)]
        parts = [X]
        if self.state.buffer:
            keys = sorted(self.state.buffer)
            sizes = np.array([len(self.state.buffer[k][1]) for k in keys])
            r = min(len(y), int(sizes.sum()))
            pick = np.sort(rng.choice(int(sizes.sum()), size=r, replace=False))
            bounds = np.r_[0, np.cumsum(sizes)]
            for k, lo, hi in zip(keys, bounds[:-1], bounds[1:]):
                sel = pick[(pick >= lo) & (pick < hi)] - lo
                if len(sel):
                    bx, by = self.state.buffer[k]
                    parts.append(bx[sel])
                    groups.append((k, len(sel), by[sel]))
        xb = np.concatenate(parts) if len(parts) > 1 else X
        total = len(xb)
        pooled = net.features(xb, train=True)
        grad = np.zeros(net.n_params)
        dpooled = np.zeros_like(pooled)
        loss = 0.0
        start = 0
        for head, m, labels in groups:
            rows = slice(start, start + m)
            value, dlog = cross_entropy(net.head_logits(pooled[rows], head), labels)
            # every sample carries equal weight in the mixed batch
            loss += value * m / total
            dpooled[rows] = net.head_backward(pooled[rows], head, dlog * (m / total), grad)
            start += m
        net.backward_features(dpooled, grad)
        return loss, grad, grad

    def after_task(self, net, task, retrain=None, rng=None):
        st = self.state
        st.tasks_seen += 1
        quota = self.capacity // st.tasks_seen
        for k in list(st.buffer):
            X, y = st.buffer[k]
            st.buffer[k] = (X[:quota], y[:quota])
        rng = rng if rng is not None else np.random.default_rng(task.index)
        n = len(task.train)
        pick = np.sort(rng.choice(n, size=min(quota, n), replace=False))
        st.buffer[task.index] = (task.train.X[pick].copy(), task.train.y[pick].copy())
        # rehearsal trains every head on mixed batches, so the mixture's
        # running statistics replace the stale per-task snapshots
        for k in st.buffer:
            if k != task.index and k in net.snapshots:
                net.snapshot_stats(k)


_REGISTRY = {
    "finetune": Finetune,
    "lwf": LwF,
    "si": SI,
    "mas": MAS,
    "packnet": PackNet,
    "replay": Replay,
}


def make_strategy(kind: str, hyperparams: dict | None = None) -> Strategy:
    try:
        cls = _REGISTRY[kind]
    except KeyError:
        raise ValueError(f"unknown strategy {kind!r}; expected one of {KINDS}") from None
    return cls(hyperparams)

