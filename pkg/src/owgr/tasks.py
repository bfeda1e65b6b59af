"""Task-incremental sequences for the new-context, new-gesture and new-user cases."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .errors import CatalogError, EmptyTask, ParamError
from .synth import BASE_GESTURES, NULL, Dataset, channel_stats, standardize

CASES = ("new_context", "new_gesture", "new_user")
ORDERINGS = ("random", "easy_to_hard", "hard_to_easy")
_ORDERING_ALIASES = {"E-H": "easy_to_hard", "H-E": "hard_to_easy"}

# surrogate task model defaults per case
CASE_DEFAULTS = {
    "new_context": {"granularity": "coarse", "ordering": "random", "num_tasks": 10},
    "new_user": {"ordering": "random", "num_tasks": 15},
    "new_gesture": {"ordering": "random", "num_tasks": 5, "gestures_per_task": 3},
}


def canonical_case(case: str) -> str:
    c = case.replace("-", "_")
    if c not in CASES:
        raise ParamError(f"unknown case {case!r}; expected one of {CASES}")
    return c


def canonical_ordering(ordering: str) -> str:
    o = _ORDERING_ALIASES.get(ordering, ordering)
    if o not in ORDERINGS:
        raise ParamError(f"unknown ordering {ordering!r}")
    return o


@dataclass(frozen=True)
class SequenceParams:
    num_tasks: int
    ordering: str = "random"
    granularity: str | None = None
    gestures_per_task: int | None = None

    @classmethod
    def defaults(cls, case: str) -> "SequenceParams":
        return cls(**CASE_DEFAULTS[canonical_case(case)])

    def with_value(self, name: str, value) -> "SequenceParams":
        if name not in {"num_tasks", "ordering", "granularity", "gestures_per_task"}:
            raise ParamError(f"{name!r} is not a task-model parameter")
        return replace(self, **{name: value})

    def validate(self, case: str) -> "SequenceParams":
        case = canonical_case(case)
        if int(self.num_tasks) < 1:
            raise ParamError("num_tasks must be >= 1")
        canonical_ordering(self.ordering)
        if case == "new_context":
            if self.granularity not in ("coarse", "fine"):
                raise ParamError("new_context needs granularity 'coarse' or 'fine'")
        elif self.granularity is not None:
            raise ParamError(f"granularity does not apply to {case}")
        if case == "new_gesture":
            if self.gestures_per_task not in (1, 2, 3):
                raise ParamError("gestures_per_task must be 1, 2 or 3")
        elif self.gestures_per_task is not None:
            raise ParamError(f"gestures_per_task does not apply to {case}")
        if case == "new_user" and self.ordering != "random":
            raise ParamError("new_user only varies the number of tasks")
        return self


class LabeledWindow(NamedTuple):
    x: np.ndarray
    y: int
    t: str
    split: str


@dataclass
class Split:
    X: np.ndarray
    y: np.ndarray
    record_id: np.ndarray

    def __len__(self):
        return len(self.y)


@dataclass
class Task:
    descriptor: str
    class_map: list
    train: Split
    val: Split
    test: Split
    index: int = 0  # 1-based position in the sequence; also the head id
    stats: tuple = field(default=None, repr=False)

    @property
    def n_classes(self) -> int:
        return len(self.class_map)

    def split(self, name: str) -> Split:
        return {"train": self.train, "val": self.val, "test": self.test}[name]

    def windows(self, name: str):
        s = self.split(name)
        for x, y in zip(s.X, s.y):
            yield LabeledWindow(x, int(y), self.descriptor, name)

    def summary(self) -> dict:
        return {
            "index": self.index,
            "descriptor": self.descriptor,
            "class_map": list(self.class_map),
            "records": {k: self.split(k).record_id.tolist() for k in ("train", "val", "test")},
        }


@dataclass
class TaskSequence:
    case: str
    tasks: list
    params: SequenceParams
    scores: list | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "case": self.case,
                "params": asdict(self.params),
                "scores": self.scores,
                "tasks": [t.summary() for t in self.tasks],
            },
            sort_keys=True,
        )


def _make_task(descriptor, class_map, ds: Dataset, records_by_class: dict) -> Task:
    splits = {}
    for name in ("train", "val", "test"):
        idx, labels = [], []
        for ci, cls in enumerate(class_map):
            r = [i for i in records_by_class[cls] if ds.split[i] == name]
            idx.extend(r)
            labels.extend([ci] * len(r))
        idx = np.asarray(idx, dtype=int)
        splits[name] = Split(ds.X[idx], np.asarray(labels, dtype=int), ds.record_id[idx])
    if len(splits["train"]) == 0:
        raise EmptyTask(f"task {descriptor} has no training windows")
    stats = channel_stats(splits["train"].X)
    for s in splits.values():
        if len(s):
            s.X = standardize(s.X, stats)
    return Task(descriptor, list(class_map), splits["train"], splits["val"], splits["test"], stats=stats)


def _base_classes(ds: Dataset) -> list:
    present = set(ds.gesture)
    missing = [g for g in BASE_GESTURES if g not in present]
    if missing or NULL not in present:
        raise CatalogError(f"dataset lacks base gestures {missing} or the null class")
    return list(BASE_GESTURES) + [NULL]


def _records(mask: np.ndarray, ds: Dataset, classes) -> dict:
    return {c: np.flatnonzero(mask & (ds.gesture == c)).tolist() for c in classes}


def build_sequence(
    case: str,
    params: SequenceParams,
    dataset: Dataset,
    rng: np.random.Generator,
    probe=None,
) -> TaskSequence:
    """Build the task list for ``case``; ``probe`` is needed for non-random orderings.

    ``probe`` is a ``ProbeConfig`` used to score task difficulty.
    """
    case = canonical_case(case)
    params = params.validate(case)
    ordering = canonical_ordering(params.ordering)
    n = int(params.num_tasks)
    ds = dataset
    tasks: list[Task] = []

    if case == "new_context":
        classes = _base_classes(ds)
        present = set(ds.context)
        if params.granularity == "coarse":
            pool = [c for c, ch in ds.catalog.coarse.items() if all(x in present for x in ch)]
            members = {c: ds.catalog.coarse[c] for c in pool}
        else:
            pool = [c for c in ds.catalog.contexts if c in present]
            members = {c: [c] for c in pool}
        if len(pool) < n:
            raise CatalogError(f"{len(pool)} {params.granularity} contexts available, {n} requested")
        user = sorted(set(ds.user))[0]
        chosen = [pool[i] for i in rng.choice(len(pool), size=n, replace=False)]
        for c in chosen:
            mask = np.isin(ds.context, members[c]) & (ds.user == user)
            tasks.append(_make_task(f"context:{c}", classes, ds, _records(mask, ds, classes)))

    elif case == "new_user":
        classes = _base_classes(ds)
        pool = [u for u in ds.catalog.users if u in set(ds.user)]
        if len(pool) < n:
            raise CatalogError(f"{len(pool)} users available, {n} requested")
        chosen = [pool[i] for i in rng.choice(len(pool), size=n, replace=False)]
        for u in chosen:
            mask = ds.user == u
            tasks.append(_make_task(f"user:{u}", classes, ds, _records(mask, ds, classes)))

    else:
        present = set(ds.gesture)
        pool = [g for g in ds.catalog.gestures if g in present]
        k = int(params.gestures_per_task)
        if len(pool) < k or NULL not in present:
            raise CatalogError(f"need {k} gestures plus null, dataset has {len(pool)} gestures")
        gesture_sets = []
        for _ in range(n):
            pick = sorted(rng.choice(len(pool), size=k, replace=False))
            gesture_sets.append([pool[i] for i in pick] + [NULL])
        # tasks sharing a class split that class's records so no window is reused
        owners: dict = {}
        for ti, cls_list in enumerate(gesture_sets):
            for c in cls_list:
                owners.setdefault(c, []).append(ti)
        per_task = [dict() for _ in range(n)]
        for c, tis in owners.items():
            for name in ("train", "val", "test"):
                recs = np.flatnonzero((ds.gesture == c) & (ds.split == name))
                recs = recs[rng.permutation(len(recs))]
                for j, ti in enumerate(tis):
                    per_task[ti].setdefault(c, []).extend(recs[j :: len(tis)].tolist())
        for ti, cls_list in enumerate(gesture_sets):
            recs = {c: sorted(per_task[ti][c]) for c in cls_list}
            desc = "gestures:" + "+".join(cls_list[:-1])
            tasks.append(_make_task(desc, cls_list, ds, recs))

    scores = None
    if ordering != "random":
        if probe is None:
            raise ParamError(f"ordering {ordering!r} needs a difficulty probe")
        scores = [probe_difficulty(t, probe) for t in tasks]
        perm = order_tasks(list(range(n)), ordering, scores)
        tasks = [tasks[i] for i in perm]
        scores = [scores[i] for i in perm]
    for i, t in enumerate(tasks, start=1):
        t.index = i
    return TaskSequence(case, tasks, params, scores)


def order_tasks(tasks: list, ordering: str, scores=None) -> list:
    """Reorder ``tasks`` by probe score; ties keep the incoming order."""
    ordering = canonical_ordering(ordering)
    if ordering == "random":
        return list(tasks)
    if scores is None or len(scores) != len(tasks):
        raise ParamError("ordering by difficulty needs one score per task")
    sign = -1.0 if ordering == "easy_to_hard" else 1.0
    keys = sorted(range(len(tasks)), key=lambda i: (sign * scores[i], i))
    return [tasks[i] for i in keys]


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 10
    lr_grid: tuple = (1e-2, 5e-3, 1e-3, 5e-4, 1e-4)
    seed: int = 0
    batch_size: int = 128


def probe_difficulty(task: Task, probe: ProbeConfig) -> float:
    """Best validation accuracy of a fresh network trained briefly on ``task`` alone."""
    from .nn import GestureNet
    from .strategies import Finetune
    from .trainer import TrainConfig, train_task

    if len(task.train) == 0 or len(task.val) == 0:
        raise EmptyTask(f"task {task.descriptor} has no train or val windows")
    cfg = TrainConfig(lr_grid=tuple(probe.lr_grid), max_epochs=probe.epochs, batch_size=probe.batch_size)
    best = 0.0
    probe_task = replace(task, index=1)
    for i, lr in enumerate(probe.lr_grid):
        net = GestureNet(seed=probe.seed)
        net.add_head(1, task.n_classes, np.random.default_rng([probe.seed, 1]))
        out = train_task(net, probe_task, Finetune(), cfg, lr, np.random.default_rng([probe.seed, 2, i]))
        best = max(best, out.val_acc)
    return best
