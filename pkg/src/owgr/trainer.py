"""Per-task training and the plasticity / stability hyperparameter search."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyTask, MissingHead
from .nn import OptimizerState, sgd_update
from .strategies import Finetune, Strategy


@dataclass(frozen=True)
class TrainConfig:
    lr_grid: tuple = (1e-2, 5e-3, 1e-3, 5e-4, 1e-4)
    momentum: float = 0.9
    batch_size: int = 128
    max_epochs: int = 100
    probe_epochs: int = 30
    anneal_after: int = 10
    anneal_factor: float = 10.0
    stop_after: int = 15
    margin: float = 0.2
    decay_factor: float = 0.5
    hyperparam_floor: float = 1e-6
    retrain_epochs: int = 10

    def __post_init__(self):
        grid = list(self.lr_grid)
        if not grid or any(a <= b for a, b in zip(grid, grid[1:])):
            raise ValueError("lr_grid must be non-empty and strictly descending")
        if not 0 < self.margin < 1 or not 0 < self.decay_factor < 1:
            raise ValueError("margin and decay_factor must lie in (0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")


class Plateau:
    """Validation-driven schedule: anneal after ``anneal_after`` unimproved
    evaluations, stop after ``stop_after``."""

    def __init__(self, anneal_after: int = 10, stop_after: int = 15):
        self.anneal_after = anneal_after
        self.stop_after = stop_after
        self.best = -np.inf
        self.bad = 0

    def step(self, value: float) -> str:
        if value > self.best:
            self.best = value
            self.bad = 0
            return "improved"
        self.bad += 1
        if self.bad >= self.stop_after:
            return "stop"
        if self.bad == self.anneal_after:
            return "anneal"
        return "wait"


@dataclass
class TaskOutcome:
    net: object
    strategy: Strategy | None
    val_acc: float
    lr: float
    hyperparams: dict
    epochs_run: int
    decay_rounds: int = 0
    trials: int = 1
    flagged: str = ""
    log: list = field(default_factory=list)


def evaluate(net, X: np.ndarray, y: np.ndarray, task_id, params=None, batch: int = 512) -> float:
    """Fraction of windows whose argmax logit matches the label.

    Uses ``task_id``'s frozen normalization statistics when present and
    optionally a substitute parameter vector.
    """
    if task_id not in net.heads:
        raise MissingHead(f"no head registered for task {task_id!r}")
    if len(y) == 0:
        raise EmptyTask("nothing to evaluate")
    saved = None
    if params is not None and params is not net.params:
        saved, net.params = net.params, params
    try:
        stats = net.stats_for(task_id)
        correct = 0
        for i in range(0, len(y), batch):
            pooled = net.features(X[i : i + batch], train=False, stats=stats)
            logits = net.head_logits(pooled, task_id)
            correct += int((np.argmax(logits, axis=1) == y[i : i + batch]).sum())
    finally:
        if saved is not None:
            net.params = saved
    return correct / len(y)


def evaluate_with_mask(strategy: Strategy, net, X, y, task_id) -> float:
    return evaluate(net, X, y, task_id, params=strategy.eval_params(net, task_id))


def _run_epochs(net, task, strategy, opt, rng, epochs, batch_size, on_epoch=None):
    n = len(task.train)
    for epoch in range(epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            loss, grad, task_grad = strategy.loss_and_grad(net, task, idx, rng)
            strategy.mask_grad(grad)
            before = net.params.copy()
            sgd_update(net.params, grad, opt)
            strategy.after_step(net, task_grad, net.params - before)
            total += loss * len(idx)
        if on_epoch is not None and on_epoch(epoch, total / n) == "stop":
            return epoch + 1
    return epochs


def train_task(
    net,
    task,
    strategy: Strategy,
    cfg: TrainConfig,
    lr: float,
    rng: np.random.Generator,
    max_epochs: int | None = None,
) -> TaskOutcome:
    """Train ``task``'s head and the shared trunk with ``strategy`` until the
    plateau schedule stops it, then restore the best validation snapshot and
    run the strategy's consolidation."""
    if len(task.train) == 0 or len(task.val) == 0:
        raise EmptyTask(f"task {task.descriptor} has an empty train or val split")
    if task.index not in net.heads:
        raise MissingHead(f"no head registered for task {task.index}")
    epochs = cfg.max_epochs if max_epochs is None else max_epochs
    strategy.before_task(net, task)
    opt = OptimizerState.fresh(net.n_params, lr, cfg.momentum)
    plateau = Plateau(cfg.anneal_after, cfg.stop_after)
    best = {"acc": -1.0}
    log = []

    def on_epoch(epoch, loss):
        acc = evaluate(net, task.val.X, task.val.y, task.index)
        log.append(
            {"epoch": epoch + 1, "train_loss": loss, "val_acc": acc, "lr": opt.lr, "hyperparams": dict(strategy.hp)}
        )
        action = plateau.step(acc)
        if action == "improved":
            best.update(
                acc=acc,
                params=net.params.copy(),
                running={k: (m.copy(), v.copy()) for k, (m, v) in net.running.items()},
            )
        elif action == "anneal":
            opt.lr /= cfg.anneal_factor
        return action

    ran = _run_epochs(net, task, strategy, opt, rng, epochs, cfg.batch_size, on_epoch)
    net.params[:] = best["params"]
    net.running = best["running"]

    def retrain():
        ropt = OptimizerState.fresh(net.n_params, lr, cfg.momentum)
        _run_epochs(net, task, strategy, ropt, rng, cfg.retrain_epochs, cfg.batch_size)

    strategy.after_task(net, task, retrain=retrain, rng=rng)
    net.snapshot_stats(task.index)
    return TaskOutcome(net, strategy, best["acc"], lr, dict(strategy.hp), ran, log=log)


def plasticity_search(net, task, cfg: TrainConfig, seed: int = 0, train_fn=train_task):
    """Finetune a copy of ``net`` at every grid learning rate.

    Returns ``(best_lr, ref_acc)``; ties go to the earlier (larger) rate.
    """
    accs = []
    for i, lr in enumerate(cfg.lr_grid):
        out = train_fn(
            net.copy(), task, Finetune(), cfg, lr, np.random.default_rng([seed, i]), max_epochs=cfg.probe_epochs
        )
        accs.append(out.val_acc)
    best = int(np.argmax(accs))
    return cfg.lr_grid[best], accs[best]


def stability_search(
    net,
    task,
    strategy: Strategy,
    best_lr: float,
    ref_acc: float,
    cfg: TrainConfig,
    seed: int = 0,
    train_fn=train_task,
) -> TaskOutcome:
    """Decay the strategy's stability hyperparameters until the task accuracy
    is within ``cfg.margin`` of the finetuning reference.

    Each round first tries halving every decayable hyperparameter on its own
    (declaration order, first success wins) and otherwise decays all of them
    together.  If every decayable drops below the floor the best trial seen
    is returned with a flag.
    """
    threshold = ref_acc - cfg.margin
    names = strategy.decayable
    trials = 0

    def trial(candidate: Strategy) -> TaskOutcome:
        nonlocal trials
        trials += 1
        out = train_fn(net.copy(), task, candidate.copy(), cfg, best_lr, np.random.default_rng(seed))
        return out

    base = strategy
    out = trial(base)
    best = out
    if not names or out.val_acc >= threshold:
        out.trials = trials
        return out
    rounds = 0
    while True:
        decayed = {n: base.hp[n] * cfg.decay_factor for n in names}
        if all(v < cfg.hyperparam_floor for v in decayed.values()):
            best.decay_rounds, best.trials = rounds, trials
            best.flagged = "margin_not_met"
            return best
        rounds += 1
        for name in names:
            if decayed[name] < cfg.hyperparam_floor:
                continue
            out = trial(base.with_hyperparams(**{name: decayed[name]}))
            best = out if out.val_acc > best.val_acc else best
            if out.val_acc >= threshold:
                out.decay_rounds, out.trials = rounds, trials
                return out
        base = base.with_hyperparams(**decayed)
        if len(names) > 1:
            out = trial(base)
            best = out if out.val_acc > best.val_acc else best
            if out.val_acc >= threshold:
                out.decay_rounds, out.trials = rounds, trials
                return out


def write_log(outcome: TaskOutcome, path) -> None:
    """Append the outcome's per-epoch records as JSON lines."""
    with open(path, "a", encoding="utf-8") as f:
        for rec in outcome.log:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
