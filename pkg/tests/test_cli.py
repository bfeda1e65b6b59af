import csv
import json
import re
from pathlib import Path

import pytest

from owgr.cli import main
from owgr.envelope import RESULT_COLUMNS, SweepConfig, read_results, read_toml, summarize
from owgr.strategies import KINDS

TINY_TRAIN = """
[train]
lr_grid = [1e-2]
batch_size = 32
max_epochs = 2
probe_epochs = 1
retrain_epochs = 1
"""


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


@pytest.fixture(scope="module")
def user_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("gen")
    cfg = _write(root / "data.toml", 'case = "new-user"\n[data]\nper_class = 5\nn_users = 4\n')
    assert main(["gen", "--config", cfg, "--out", str(root / "d")]) == 0
    return root / "d"


def test_gen_then_run_smoke(tmp_path, user_data, capsys):
    assert (user_data / "manifest.json").exists()
    cfg = _write(tmp_path / "run.toml", f'difficulty_epochs = 1\n[data]\npath = "{user_data}"\n[params]\nnum_tasks = 2\n{TINY_TRAIN}')
    out = tmp_path / "r"
    code = main(["run", "--case", "new-user", "--method", "lwf", "--seed", "0", "--config", cfg, "--out", str(out)])
    assert code == 0, capsys.readouterr().err
    assert (out / "results.csv").exists() and (out / "report.json").exists()
    rows = read_results(out / "results.csv")
    assert [r["k"] for r in rows] == [1, 2]
    assert rows[0]["F"] is None and rows[1]["F"] is not None


def test_run_repeatable(tmp_path, user_data):
    cfg = _write(tmp_path / "run.toml", f'difficulty_epochs = 1\n[data]\npath = "{user_data}"\n[params]\nnum_tasks = 2\n{TINY_TRAIN}')
    args = ["run", "--case", "new_user", "--method", "si", "--config", cfg, "--out"]
    assert main(args + [str(tmp_path / "a")]) == 0
    assert main(args + [str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()


@pytest.mark.parametrize(
    "argv",
    [
        ["sweep", "--out", "x"],
        ["gen", "--out", "x"],
        ["run", "--case", "new_user"],
        ["run", "--case", "new_hand", "--method", "si"],
        ["sweep", "--config", "c.toml", "--out", "x", "--jobs", "0"],
        ["report", "--out", "x", "--format", "png"],
        ["run", "--case", "new_user", "--method", "si", "--verbose"],
        [],
    ],
)
def test_usage_errors(argv, capsys):
    assert main(argv) == 1
    err = capsys.readouterr().err
    assert "owgr-error:" in err


def test_missing_config_prints_usage(capsys):
    assert main(["sweep", "--out", "x"]) == 1
    err = capsys.readouterr().err
    assert "usage:" in err and "--config" in err


def test_invalid_sweep_config_is_usage_error(tmp_path, capsys):
    cfg = _write(tmp_path / "s.toml", 'case = "new_user"\nswept_param = "ordering"\nvalues = ["random"]\n')
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    assert capsys.readouterr().err.startswith("owgr-error:")


def test_runtime_error_exit_two(tmp_path, capsys):
    assert main(["report", "--out", str(tmp_path), "--format", "csv"]) == 2
    assert capsys.readouterr().err.startswith("owgr-error:")
    bad = _write(tmp_path / "bad.toml", "case = [unclosed\n")
    assert main(["gen", "--config", bad, "--out", str(tmp_path / "d")]) in (1, 2)


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "gen" in capsys.readouterr().out


def _fake_results(path, methods=KINDS, values=("random", "E-H", "H-E"), seeds=range(5)):
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_COLUMNS)
        for mi, m in enumerate(methods):
            for vi, v in enumerate(values):
                for s in seeds:
                    for k in (1, 2):
                        a = 0.5 + 0.05 * mi + 0.01 * vi + 0.003 * s
                        f = "" if k == 1 else repr(0.3 - 0.04 * mi + 0.002 * s)
                        w.writerow(["new_context", m, "ordering", v, s, k, repr(a), f, ""])


def test_report_svg_box_count(tmp_path):
    _fake_results(tmp_path)
    assert main(["report", "--out", str(tmp_path), "--format", "svg"]) == 0
    for metric in ("A", "F"):
        text = (tmp_path / f"boxplot_{metric}.svg").read_text()
        assert len(re.findall(r'id="box-', text)) == 18
        assert "<svg" in text


def test_report_svg_repeatable(tmp_path):
    _fake_results(tmp_path)
    main(["report", "--out", str(tmp_path), "--format", "svg"])
    first = (tmp_path / "boxplot_A.svg").read_bytes()
    main(["report", "--out", str(tmp_path), "--format", "svg"])
    assert (tmp_path / "boxplot_A.svg").read_bytes() == first


def test_report_json_round_trip(tmp_path):
    _fake_results(tmp_path)
    assert main(["report", "--out", str(tmp_path), "--format", "json"]) == 0
    back = json.loads((tmp_path / "summary.json").read_text())
    assert back == summarize(read_results(tmp_path / "results.csv"))
    assert len(back) == 2 * 18


def test_report_csv_stable(tmp_path):
    _fake_results(tmp_path)
    main(["report", "--out", str(tmp_path), "--format", "csv"])
    first = (tmp_path / "summary.csv").read_bytes()
    main(["report", "--out", str(tmp_path), "--format", "csv"])
    assert (tmp_path / "summary.csv").read_bytes() == first
    rows = list(csv.DictReader(open(tmp_path / "summary.csv")))
    assert len(rows) == 36


SWEEP = f"""
case = "new_context"
swept_param = "num_tasks"
values = [1, 2]
methods = ["finetune", "mas"]
seeds = [0, 1]
difficulty_epochs = 1

[data]
per_class = 5
{TINY_TRAIN}
"""


def test_sweep_jobs_independent_and_resumable(tmp_path):
    cfg = _write(tmp_path / "s.toml", SWEEP)
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "one"), "--jobs", "1"]) == 0
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "two"), "--jobs", "2"]) == 0
    one = (tmp_path / "one" / "results.csv").read_bytes()
    assert one == (tmp_path / "two" / "results.csv").read_bytes()
    # simulate an interrupted sweep: drop the table and half the runs
    runs = sorted((tmp_path / "one" / "runs").glob("*.json"))
    kept = {p.name: p.read_bytes() for p in runs[: len(runs) // 2]}
    for p in runs[len(runs) // 2 :]:
        p.unlink()
    (tmp_path / "one" / "results.csv").unlink()
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "one")]) == 0
    assert (tmp_path / "one" / "results.csv").read_bytes() == one
    for name, data in kept.items():
        assert (tmp_path / "one" / "runs" / name).read_bytes() == data


CONFIGS = sorted((Path(__file__).parent.parent / "configs").glob("*.toml"))


@pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.name)
def test_shipped_configs_parse(path):
    doc = read_toml(path)
    if "swept_param" in doc:
        SweepConfig.from_dict(doc)
    else:
        assert set(doc) <= {"case", "data", "train", "params", "hyperparams", "master_seed", "difficulty_epochs"}
