"""One-at-a-time parameter sweeps with seed replication and box-plot statistics."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import CapacityExhausted, OWGRError, ParamError
from .metrics import AccuracyMatrix, MetricsReport
from .nn import GestureNet
from .strategies import HYPERPARAMS, KINDS, make_strategy
from .synth import BASE_GESTURES, Counts, Dataset, default_catalog, gen_dataset
from .tasks import (
    CASE_DEFAULTS,
    ORDERINGS,
    ProbeConfig,
    SequenceParams,
    build_sequence,
    canonical_case,
    canonical_ordering,
)
from .trainer import TrainConfig, evaluate_with_mask, plasticity_search, stability_search

SWEEPABLE = ("ordering", "granularity", "num_tasks", "gestures_per_task", "replay_M")
RESULT_COLUMNS = ("case", "method", "param", "value", "seed", "k", "A", "F", "flags")
SUMMARY_COLUMNS = ("case", "param", "value", "method", "metric", "n", "mean", "median", "q1", "q3", "min", "max")
DEFAULT_SEEDS = (0, 1, 2, 3, 4)


def _applies(case: str, param: str) -> bool:
    if param == "replay_M":
        return True
    if param == "ordering":
        return case != "new_user"
    return param in CASE_DEFAULTS[case]


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a tuple of JSON-serializable parts."""
    blob = json.dumps(list(parts), sort_keys=True, separators=(",", ":")).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little") >> 1


@dataclass(frozen=True)
class DataConfig:
    per_class: int = 20
    catalog_seed: int = 2024
    n_users: int = 20
    seed: int = 0
    path: str | None = None  # load a generated dataset instead of generating one

    def counts(self, case: str, catalog) -> Counts:
        """Smallest cross of catalog entries that the case's sequences draw from."""
        case = canonical_case(case)
        first_user = list(catalog.users)[:1]
        first_group = list(catalog.coarse.values())[0]
        if case == "new_context":
            return Counts(self.per_class, list(BASE_GESTURES), None, first_user)
        if case == "new_user":
            return Counts(self.per_class, list(BASE_GESTURES), list(first_group), None)
        return Counts(self.per_class, None, list(first_group), first_user)


def case_dataset(case: str, data: DataConfig) -> Dataset:
    if data.path:
        return Dataset.load(data.path)
    catalog = default_catalog(n_users=data.n_users, seed=data.catalog_seed)
    return gen_dataset(catalog, data.counts(case, catalog), seed=data.seed)


def _value_key(param: str, value):
    if param in ("ordering",):
        return canonical_ordering(value)
    return value


def _check_value(case: str, param: str, value) -> None:
    if param == "replay_M":
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            raise ParamError(f"replay_M values must be positive integers, got {value!r}")
        return
    if param in ("num_tasks", "gestures_per_task") and (not isinstance(value, int) or isinstance(value, bool)):
        raise ParamError(f"{param} values must be integers, got {value!r}")
    SequenceParams.defaults(case).with_value(param, _value_key(param, value)).validate(case)


@dataclass(frozen=True)
class SweepConfig:
    case: str
    swept_param: str
    values: tuple
    methods: tuple = KINDS
    seeds: tuple = DEFAULT_SEEDS
    master_seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    hyperparams: dict = field(default_factory=dict)
    difficulty_epochs: int = 10

    def __post_init__(self):
        case = canonical_case(self.case)
        object.__setattr__(self, "case", case)
        if self.swept_param not in SWEEPABLE:
            raise ParamError(f"swept_param must be one of {SWEEPABLE}, got {self.swept_param!r}")
        if not _applies(case, self.swept_param):
            raise ParamError(f"{self.swept_param} cannot be swept for {case}")
        if not self.values:
            raise ParamError("values must be non-empty")
        keys = [_value_key(self.swept_param, v) for v in self.values]
        if len(set(keys)) != len(keys):
            raise ParamError(f"duplicate value in {list(self.values)}")
        for v in self.values:
            _check_value(case, self.swept_param, v)
        bad = [m for m in self.methods if m not in KINDS]
        if bad or not self.methods or len(set(self.methods)) != len(self.methods):
            raise ParamError(f"methods must be distinct entries of {KINDS}, got {list(self.methods)}")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ParamError("seeds must be a non-empty list of distinct integers")
        for kind, hp in self.hyperparams.items():
            names = {n for n, _, _ in HYPERPARAMS.get(kind, [])}
            if kind not in KINDS or not set(hp) <= names:
                raise ParamError(f"unknown hyperparameters for {kind}: {sorted(hp)}")

    def params_for(self, value) -> SequenceParams:
        """Case defaults with only the swept parameter changed."""
        base = SequenceParams.defaults(self.case)
        if self.swept_param == "replay_M":
            return base
        return base.with_value(self.swept_param, _value_key(self.swept_param, value)).validate(self.case)

    def hyperparams_for(self, method: str, value) -> dict:
        hp = dict(self.hyperparams.get(method, {}))
        if self.swept_param == "replay_M" and method == "replay":
            hp["buffer_size"] = int(value)
        return hp

    def fingerprint(self) -> str:
        blob = json.dumps(_plain(asdict(self)), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)} - {"defaults"}
        if unknown:
            raise ParamError(f"unknown sweep config keys: {sorted(unknown)}")
        for key in ("case", "swept_param", "values"):
            if key not in d:
                raise ParamError(f"sweep config needs {key!r}")
        case = canonical_case(d["case"])
        check_defaults(case, d.pop("defaults", {}), d["swept_param"])
        d["values"] = tuple(d["values"])
        for key in ("methods", "seeds"):
            if key in d:
                d[key] = tuple(d[key])
        d["data"] = _build(DataConfig, d.get("data", {}), "data")
        d["train"] = train_config(d.get("train", {}))
        return cls(**d)

    @classmethod
    def from_toml(cls, path) -> "SweepConfig":
        return cls.from_dict(read_toml(path))


def _build(klass, block: dict, name: str):
    unknown = set(block) - {f.name for f in fields(klass)}
    if unknown:
        raise ParamError(f"unknown keys in [{name}]: {sorted(unknown)}")
    return klass(**block)


def train_config(block: dict) -> TrainConfig:
    block = dict(block)
    if "lr_grid" in block:
        block["lr_grid"] = tuple(block["lr_grid"])
    try:
        return _build(TrainConfig, block, "train")
    except ValueError as e:
        raise ParamError(str(e)) from None


def check_defaults(case: str, defaults: dict, swept: str | None = None) -> None:
    """Reject a defaults block that moves any unswept parameter off its documented default."""
    documented = CASE_DEFAULTS[canonical_case(case)]
    for name, value in defaults.items():
        if name not in documented:
            raise ParamError(f"{name} has no default for {case}")
        if name == swept:
            raise ParamError(f"{name} is swept and cannot also be fixed")
        got = canonical_ordering(value) if name == "ordering" else value
        if got != documented[name]:
            raise ParamError(f"one parameter at a time: {name} must stay at {documented[name]!r}, got {value!r}")


def read_toml(path) -> dict:
    import tomli

    try:
        with open(path, "rb") as f:
            return tomli.load(f)
    except tomli.TOMLDecodeError as e:
        raise ParamError(f"{path}: {e}") from None


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


@dataclass
class RunSpec:
    case: str
    method: str
    param: str
    value: object
    seed: int
    params: SequenceParams
    hyperparams: dict
    train: TrainConfig
    master_seed: int = 0
    difficulty_epochs: int = 10

    @property
    def run_key(self) -> str:
        return f"{self.case}|{self.method}|{self.param}|{self.value}|{self.seed}"

    @property
    def run_seed(self) -> int:
        # method is left out so every method sees the same sequence and init
        return derive_seed(self.master_seed, self.case, self.param, str(self.value), self.seed)


def run_single(spec: RunSpec, dataset: Dataset, log=None) -> MetricsReport:
    """Train ``spec.method`` through one task sequence and fill the accuracy matrix.

    ``log`` optionally receives one dict per accepted task outcome.
    """
    s = spec.run_seed
    probe = ProbeConfig(spec.difficulty_epochs, spec.train.lr_grid, s % (2**32), spec.train.batch_size)
    seq = build_sequence(spec.case, spec.params, dataset, np.random.default_rng([s, 0]), probe=probe)
    net = GestureNet(seed=s % (2**32))
    strategy = make_strategy(spec.method, spec.hyperparams)
    matrix = AccuracyMatrix()
    meta = {
        "case": spec.case,
        "method": spec.method,
        "param": spec.param,
        "value": spec.value,
        "seed": spec.seed,
        "params": asdict(spec.params),
        "hyperparams": dict(strategy.hp),
        "tasks": [t.descriptor for t in seq.tasks],
    }
    report = MetricsReport(matrix, meta)
    per_k_flags = {}
    for task in seq.tasks:
        k = task.index
        net.add_head(k, task.n_classes, np.random.default_rng([s, 1, k]))
        try:
            lr, ref = plasticity_search(net, task, spec.train, seed=derive_seed(s, "probe", k))
            out = stability_search(net, task, strategy, lr, ref, spec.train, seed=derive_seed(s, "train", k))
        except CapacityExhausted as e:
            report.flags.append(f"capacity_exhausted@k={k}: {e}")
            break
        net, strategy = out.net, out.strategy
        if out.flagged:
            per_k_flags[k] = f"{out.flagged}@k={k}"
            report.flags.append(per_k_flags[k])
        row = [evaluate_with_mask(strategy, net, t.test.X, t.test.y, t.index) for t in seq.tasks[:k]]
        matrix.record_row(k, row)
        if log is not None:
            log(
                {
                    "k": k,
                    "task": task.descriptor,
                    "lr": lr,
                    "ref_acc": ref,
                    "val_acc": out.val_acc,
                    "hyperparams": out.hyperparams,
                    "epochs_run": out.epochs_run,
                    "decay_rounds": out.decay_rounds,
                    "trials": out.trials,
                    "flagged": out.flagged,
                    "row": row,
                    "epochs": out.log,
                }
            )
    meta["per_k_flags"] = {str(k): v for k, v in per_k_flags.items()}
    return report


def report_rows(spec: RunSpec, report: MetricsReport) -> list[dict]:
    """Long-format result rows; run-level flags land on the last row."""
    per_k_flags = {int(k): v for k, v in report.meta.get("per_k_flags", {}).items()}
    run_flags = [f for f in report.flags if f not in per_k_flags.values()]
    rows = []
    per_k = report.per_k()
    for i, rec in enumerate(per_k):
        k = rec["k"]
        flags = [per_k_flags[k]] if k in per_k_flags else []
        if i == len(per_k) - 1:
            flags += run_flags
        rows.append(_row(spec, k, rec["A"], rec["F"], flags))
    if not rows:
        rows.append(_row(spec, 0, None, None, run_flags or ["no_tasks_completed"]))
    return rows


def _row(spec, k, A, F, flags) -> dict:
    return {
        "case": spec.case,
        "method": spec.method,
        "param": spec.param,
        "value": str(spec.value),
        "seed": spec.seed,
        "k": k,
        "A": A,
        "F": F,
        "flags": ";".join(flags),
    }


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(rows, columns, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    text = buf.getvalue()
    if path is not None:
        _atomic_write(Path(path), text)
    return text


def read_results(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != RESULT_COLUMNS:
            raise ParamError(f"{path} does not have the results header {','.join(RESULT_COLUMNS)}")
        rows = []
        for r in reader:
            r["seed"] = int(r["seed"])
            r["k"] = int(r["k"])
            r["A"] = float(r["A"]) if r["A"] else None
            r["F"] = float(r["F"]) if r["F"] else None
            rows.append(r)
    return rows


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def value_sort_key(value: str):
    """Numbers numerically, orderings and granularities in their natural order."""
    try:
        return (0, float(value), "")
    except ValueError:
        pass
    natural = list(ORDERINGS) + ["coarse", "fine"]
    try:
        return (1, float(natural.index(canonical_ordering(value))), value)
    except ParamError:
        pass
    if value in natural:
        return (1, float(natural.index(value)), value)
    return (2, 0.0, value)


def _method_key(m: str):
    return (KINDS.index(m) if m in KINDS else len(KINDS), m)


def canonical_sort(rows) -> list[dict]:
    return sorted(
        rows,
        key=lambda r: (r["case"], _method_key(r["method"]), r["param"], value_sort_key(r["value"]), r["seed"], r["k"]),
    )


# ---- sweep execution -------------------------------------------------------

_WORKER_DATASET = None


def _init_worker(dataset):
    global _WORKER_DATASET
    _WORKER_DATASET = dataset


def _run_file(out: Path, spec: RunSpec) -> Path:
    digest = hashlib.sha256(spec.run_key.encode()).hexdigest()[:16]
    return out / "runs" / f"{digest}.json"


def execute(spec: RunSpec, out: Path | None, fingerprint: str, dataset=None) -> list[dict]:
    """Run one spec, catching per-run errors as flagged rows, and persist its result."""
    dataset = dataset if dataset is not None else _WORKER_DATASET
    logs = []
    try:
        report = run_single(spec, dataset, log=logs.append)
        rows = report_rows(spec, report)
        payload = {"report": report.to_dict()}
    except (OWGRError, ValueError, FloatingPointError, AssertionError) as e:
        rows = [_row(spec, 0, None, None, [f"error:{type(e).__name__}: {e}"])]
        payload = {"report": None}
    if out is not None:
        payload.update(run_key=spec.run_key, fingerprint=fingerprint, rows=rows)
        path = _run_file(out, spec)
        _atomic_write(path.with_suffix(".jsonl"), "".join(json.dumps(r, sort_keys=True) + "\n" for r in logs))
        _atomic_write(path, json.dumps(_plain(payload), sort_keys=True, indent=1) + "\n")
    return rows


def _load_done(out: Path, spec: RunSpec, fingerprint: str):
    path = _run_file(out, spec)
    if not path.exists():
        return None
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except ValueError:
        return None
    if d.get("run_key") != spec.run_key or d.get("fingerprint") != fingerprint:
        return None
    return d["rows"]


def run_specs(cfg: SweepConfig) -> list[RunSpec]:
    specs = []
    for value in cfg.values:
        for method in cfg.methods:
            for seed in cfg.seeds:
                specs.append(
                    RunSpec(
                        cfg.case,
                        method,
                        cfg.swept_param,
                        value,
                        int(seed),
                        cfg.params_for(value),
                        cfg.hyperparams_for(method, value),
                        cfg.train,
                        cfg.master_seed,
                        cfg.difficulty_epochs,
                    )
                )
    return specs


def sweep(cfg: SweepConfig, out=None, jobs: int = 1, dataset: Dataset | None = None, on_done=None) -> list[dict]:
    """Execute every (value, method, seed) run; completed runs under ``out`` are reused.

    Writes ``results.csv`` and ``summary.csv`` to ``out`` when given.  The
    output does not depend on ``jobs``.
    """
    if jobs < 1:
        raise ParamError("jobs must be >= 1")
    out = Path(out) if out is not None else None
    fp = cfg.fingerprint()
    specs = run_specs(cfg)
    results: dict = {}
    todo = []
    for spec in specs:
        done = _load_done(out, spec, fp) if out is not None else None
        if done is not None:
            results[spec.run_key] = done
        else:
            todo.append(spec)
    if todo:
        if dataset is None:
            dataset = case_dataset(cfg.case, cfg.data)
        if jobs == 1:
            for spec in todo:
                results[spec.run_key] = execute(spec, out, fp, dataset)
                if on_done:
                    on_done(spec)
        else:
            with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(dataset,)) as pool:
                futures = {spec.run_key: (spec, pool.submit(execute, spec, out, fp)) for spec in todo}
                for key, (spec, fut) in futures.items():
                    results[key] = fut.result()
                    if on_done:
                        on_done(spec)
    rows = canonical_sort([r for spec in specs for r in results[spec.run_key]])
    if out is not None:
        write_csv(rows, RESULT_COLUMNS, out / "results.csv")
        write_csv(summarize(rows), SUMMARY_COLUMNS, out / "summary.csv")
    return rows


# ---- aggregation -----------------------------------------------------------


def box_stats(values) -> dict:
    """Mean, median, quartiles (linear interpolation), extremes and count."""
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise ParamError("cannot summarize an empty group")
    q1, med, q3 = np.percentile(x, [25, 50, 75], method="linear")
    return {
        "n": int(x.size),
        "mean": math.fsum(x.tolist()) / x.size,
        "median": float(med),
        "q1": float(q1),
        "q3": float(q3),
        "min": float(x.min()),
        "max": float(x.max()),
    }


def final_rows(rows) -> list[dict]:
    """The last-k row of each run."""
    last = {}
    for r in rows:
        key = (r["case"], r["method"], r["param"], r["value"], r["seed"])
        if key not in last or r["k"] > last[key]["k"]:
            last[key] = r
    return list(last.values())


def summarize(rows, metrics=("A", "F")) -> list[dict]:
    """Box-plot statistics over seeds of the final-k rows, per (method, value, metric)."""
    groups: dict = {}
    for r in final_rows(rows):
        for m in metrics:
            groups.setdefault((r["case"], r["param"], r["value"], r["method"], m), []).append(r[m])
    out = []
    for key, vals in groups.items():
        vals = [v for v in vals if v is not None]
        if not vals:
            warnings.warn(f"no {key[4]} values for method={key[3]} value={key[2]}; group omitted", stacklevel=2)
            continue
        out.append(dict(zip(("case", "param", "value", "method", "metric"), key), **box_stats(vals)))
    return sorted(
        out,
        key=lambda s: (s["case"], s["param"], value_sort_key(s["value"]), _method_key(s["method"]), s["metric"]),
    )


def single_spec(
    case: str,
    method: str,
    seed: int,
    train: TrainConfig | None = None,
    hyperparams=None,
    master_seed: int = 0,
    difficulty_epochs: int = 10,
    params: SequenceParams | None = None,
) -> RunSpec:
    """Spec for a stand-alone run at the case defaults (or ``params``)."""
    case = canonical_case(case)
    if method not in KINDS:
        raise ParamError(f"unknown method {method!r}; expected one of {KINDS}")
    params = (params or SequenceParams.defaults(case)).validate(case)
    return RunSpec(
        case,
        method,
        "default",
        "default",
        int(seed),
        params,
        dict(hyperparams or {}),
        train or TrainConfig(),
        master_seed,
        difficulty_epochs,
    )


def replace_train(cfg: SweepConfig, **kw) -> SweepConfig:
    return replace(cfg, train=replace(cfg.train, **kw))
