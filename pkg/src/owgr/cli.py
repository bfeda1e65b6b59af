"""``owgr`` command line: gen | run | sweep | report."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from .envelope import (
    RESULT_COLUMNS,
    SUMMARY_COLUMNS,
    DataConfig,
    SweepConfig,
    _atomic_write,
    _build,
    _run_file,
    case_dataset,
    execute,
    read_results,
    read_toml,
    single_spec,
    summarize,
    sweep,
    train_config,
    write_csv,
)
from .errors import OWGRError, ParamError
from .strategies import KINDS
from .synth import default_catalog, gen_dataset
from .tasks import CASES, SequenceParams, canonical_case

PREFIX = "owgr-error:"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _jobs(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError("--jobs must be >= 1")
    return n


def _case(text: str) -> str:
    try:
        return canonical_case(text)
    except ParamError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="owgr", description="Continual-learning lab for wrist-IMU gesture recognition.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--config", required=True, help="TOML with a [data] block")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, help="override the data seed")
    g.add_argument("--case", type=_case, help="generate the subset a case draws from")

    r = sub.add_parser("run", help="one method through one task sequence")
    r.add_argument("--case", type=_case, required=True, help=f"one of {', '.join(CASES)} (hyphens allowed)")
    r.add_argument("--method", required=True, choices=KINDS)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--config", help="optional TOML with [data], [train], [params], [hyperparams.*]")
    r.add_argument("--out", default="owgr-run")

    s = sub.add_parser("sweep", help="one-at-a-time parameter sweep")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=_jobs, default=1)
    s.add_argument("--seed", type=int, help="override the master seed")

    e = sub.add_parser("report", help="summaries and box plots from results.csv")
    e.add_argument("--out", required=True, help="directory holding results.csv")
    e.add_argument("--format", required=True, choices=("csv", "json", "svg"))
    return p


def cmd_gen(args) -> int:
    cfg = read_toml(args.config)
    block = dict(cfg.get("data", {}))
    case = args.case or cfg.get("case")
    if args.seed is not None:
        block["seed"] = args.seed
    data = _build(DataConfig, block, "data")
    if data.path:
        raise ParamError("gen writes a dataset; [data].path is not allowed here")
    catalog = default_catalog(n_users=data.n_users, seed=data.catalog_seed)
    if not case:
        raise ParamError("gen needs a case, from --case or a top-level 'case' key")
    counts = data.counts(canonical_case(case), catalog)
    ds = gen_dataset(catalog, counts, seed=data.seed, out=args.out)
    print(f"{len(ds)} windows written to {args.out}")
    return 0


def cmd_run(args) -> int:
    cfg = read_toml(args.config) if args.config else {}
    unknown = set(cfg) - {"data", "train", "params", "hyperparams", "master_seed", "difficulty_epochs"}
    if unknown:
        raise ParamError(f"unknown run config keys: {sorted(unknown)}")
    data = _build(DataConfig, cfg.get("data", {}), "data")
    try:
        params = SequenceParams(**{**asdict(SequenceParams.defaults(args.case)), **cfg.get("params", {})})
    except TypeError as e:
        raise ParamError(f"[params]: {e}") from None
    spec = single_spec(
        args.case,
        args.method,
        args.seed,
        train=train_config(cfg.get("train", {})),
        hyperparams=cfg.get("hyperparams", {}).get(args.method, {}),
        master_seed=int(cfg.get("master_seed", 0)),
        difficulty_epochs=int(cfg.get("difficulty_epochs", 10)),
        params=params,
    )
    out = Path(args.out)
    rows = execute(spec, out, "single", case_dataset(args.case, data))
    write_csv(rows, RESULT_COLUMNS, out / "results.csv")
    report = json.loads(_run_file(out, spec).read_text(encoding="utf-8"))["report"]
    if report is None:
        raise OWGRError(rows[0]["flags"])
    _atomic_write(out / "report.json", json.dumps(report, sort_keys=True, indent=1) + "\n")
    last = rows[-1]
    print(f"{spec.case} {spec.method} seed={spec.seed}: k={last['k']} A={last['A']} F={last['F']}")
    return 0


def cmd_sweep(args) -> int:
    d = read_toml(args.config)
    if args.seed is not None:
        d["master_seed"] = args.seed
    cfg = SweepConfig.from_dict(d)
    rows = sweep(cfg, out=args.out, jobs=args.jobs)
    print(f"{len(rows)} rows written to {Path(args.out) / 'results.csv'}")
    return 0


def cmd_report(args) -> int:
    out = Path(args.out)
    path = out / "results.csv"
    if not path.exists():
        raise OWGRError(f"{path} not found")
    stats = summarize(read_results(path))
    if args.format == "csv":
        write_csv(stats, SUMMARY_COLUMNS, out / "summary.csv")
        written = [out / "summary.csv"]
    elif args.format == "json":
        _atomic_write(out / "summary.json", json.dumps(stats, sort_keys=True, indent=1) + "\n")
        written = [out / "summary.json"]
    else:
        from .plotting import boxplot_svg

        written = [boxplot_svg(stats, m, out / f"boxplot_{m}.svg") for m in ("A", "F")]
    for w in written:
        print(w)
    return 0


COMMANDS = {"gen": cmd_gen, "run": cmd_run, "sweep": cmd_sweep, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"{PREFIX} usage: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    try:
        return COMMANDS[args.command](args)
    except ParamError as e:
        print(f"{PREFIX} usage: {e}", file=sys.stderr)
        return 1
    except (OWGRError, OSError, ValueError) as e:
        print(f"{PREFIX} {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
