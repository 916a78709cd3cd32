import json

import pytest

from chunkstream import bench, datagen, flow
from chunkstream.cli import TICK_COLUMNS, main
from chunkstream.episode import read_episode


@pytest.fixture(scope="module")
def collected(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["collect", "--episodes", "4", "--seed", "1", "--out", str(out)]) == 0
    return out


def test_collect_writes_summary(collected, capsys):
    summary = json.loads((collected / datagen.SUMMARY_FILE).read_text())
    assert summary["episodes"] == 4 and summary["seed"] == 1 and summary["config_digest"]
    assert len(list(collected.glob(datagen.EPISODE_GLOB))) == 4


def test_replay_row_count(collected, capsys):
    path = sorted(collected.glob(datagen.EPISODE_GLOB))[0]
    ep = read_episode(path.read_bytes())
    capsys.readouterr()
    assert main(["replay", "--episode", str(path), "--format", "csv"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == ",".join(TICK_COLUMNS)
    assert len(lines) - 1 == round(ep.footer.completion_time / ep.header.dt) + 1
    assert main(["replay", "--episode", str(path), "--format", "json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert len(doc["rows"]) == len(ep.ticks) and doc["header"]["seed"] == ep.header.seed


def test_train_zero_steps_saves_init(collected, tmp_path, capsys):
    out = tmp_path / "p.bin"
    code = main(["train", "--data", str(collected), "--out", str(out), "--steps", "0", "--seed", "5",
                 "--set", "flow.hidden=8,8", "--set", "executor.chunk_horizon=4"])
    assert code == 0
    params, header = flow.load_params(out)
    assert header["seed"] == 5 and header["config_digest"]
    init = flow.init_params(5 * 8, flow.CONDITION_DIM, (8, 8), seed=5)
    assert (params.flat() == init.flat()).all()


def test_bench_and_report(tmp_path, capsys):
    out = tmp_path / "b"
    code = main(["bench", "--mode", "naive,ci-laas", "--latency-ticks", "5", "--dims", "CR,DA", "--trials", "1",
                 "--count", "2", "--out", str(out)])
    assert code == 0
    for name in ("report.md", "report.csv", "report.json", "manifest.json"):
        assert (out / name).exists()
    csv_text = (out / "report.csv").read_text()
    assert csv_text.startswith("# config_digest=")
    table = bench.parse_csv_report(csv_text)
    assert len(table) == 4
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_digest"] and manifest["sweep_seed"] == 0 and len(manifest["episodes"]) == 8
    capsys.readouterr()
    assert main(["report", "--in", str(out), "--format", "csv"]) == 0
    rebuilt = bench.parse_csv_report(capsys.readouterr().out)
    assert {(r.dimension, r.mode, r.success_rate) for r in rebuilt.rows} == \
        {(r.dimension, r.mode, r.success_rate) for r in table.rows}


def test_bench_flow_policy(tmp_path, capsys):
    params = flow.init_params(21 * 8, flow.CONDITION_DIM, (8,), seed=0)
    path = tmp_path / "p.bin"
    flow.save_params(path, params)
    code = main(["bench", "--policy", f"flow:{path}", "--dims", "CR", "--trials", "1", "--count", "1",
                 "--latency-ticks", "2", "--out", str(tmp_path / "o")])
    assert code == 0


def test_report_of_empty_dir(tmp_path, capsys):
    assert main(["report", "--in", str(tmp_path), "--format", "csv"]) == 0
    assert capsys.readouterr().out == ",".join(bench.METRIC_COLUMNS) + "\n"


@pytest.mark.parametrize("argv", [
    ["collect", "--episodes", "0", "--out", "x"],
    ["bench", "--mode", "warp", "--out", "x"],
    ["bench", "--dims", "CR,ZZ", "--out", "x"],
    ["bench", "--policy", "gpt", "--out", "x"],
    ["bench", "--set", "executor.nope=1", "--out", "x"],
    ["frobnicate"],
])
def test_usage_errors(argv, tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2


def test_invalid_dim_lists_valid(tmp_path, capsys):
    main(["bench", "--dims", "QQ", "--out", str(tmp_path)])
    assert "CR, DA, LS" in capsys.readouterr().err


def test_domain_errors(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"record": "header", "schema_version": 1}\n')
    assert main(["replay", "--episode", str(bad)]) == 1
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["train", "--data", str(empty), "--out", str(tmp_path / "p.bin")]) == 1
    assert main(["replay", "--episode", str(tmp_path / "missing.jsonl")]) == 1
