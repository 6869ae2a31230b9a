import csv
import hashlib
import json

import pydot
import pytest

from mmforge import automaton, cli
from mmforge.envs import dump_synthetic_spec
from mmforge.fixtures import figure_machine, make_machine, redundant_branch_spec


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def figure_file(tmp_path):
    path = tmp_path / "figure.mm"
    path.write_text(automaton.serialize(figure_machine()))
    return path


def test_stage_seed_is_sha256_prefix():
    digest = hashlib.sha256(b"7:clone").digest()
    assert cli.stage_seed(7, "clone") == int.from_bytes(digest[:8], "little")
    assert cli.stage_seed(7, "clone") != cli.stage_seed(7, "qbn")
    assert cli.stage_seed(7, "clone") != cli.stage_seed(8, "clone")


def test_env_var_seed(monkeypatch):
    monkeypatch.setenv("MMFORGE_SEED", "42")
    assert cli.default_seed() == 42
    monkeypatch.delenv("MMFORGE_SEED")
    assert cli.default_seed() == 0


def test_minimize_single_state_is_identity(tmp_path, capsys):
    mm = make_machine([1], [(0, 0, 0, 3), (0, 1, 0, 1)], n_obs=2)
    src, dst = tmp_path / "one.mm", tmp_path / "min.mm"
    src.write_text(automaton.serialize(mm))
    code, _, _ = run(["minimize", "--machine", src, "--out", dst], capsys)
    assert code == 0
    assert dst.read_text() == src.read_text()


def test_minimize_figure(figure_file, tmp_path, capsys):
    dst = tmp_path / "min.mm"
    assert run(["minimize", "--machine", figure_file, "--out", dst], capsys)[0] == 0
    mini = automaton.deserialize(dst.read_text())
    assert automaton.equivalent(mini, figure_machine(), 8)


def test_export_dot_parses(figure_file, tmp_path, capsys):
    code, out, _ = run(["export-dot", "--machine", figure_file], capsys)
    assert code == 0
    (graph,) = pydot.graph_from_dot_data(out)
    assert len(graph.get_nodes()) >= len(figure_machine().states)


def test_reduce_then_export_view(figure_file, tmp_path, capsys):
    view, dot = tmp_path / "view.json", tmp_path / "view.dot"
    code, out, _ = run(["reduce", "--machine", figure_file, "--out", view, "--dot", dot], capsys)
    assert code == 0 and out.startswith("nodes=")
    code, out, _ = run(["export-dot", "--view", view], capsys)
    assert code == 0 and out == dot.read_text()


def test_prune_redundant_to_zero_decision_points(tmp_path, capsys):
    spec = redundant_branch_spec()
    spec_file, mm_file = tmp_path / "spec.txt", tmp_path / "mm.mm"
    spec_file.write_text(dump_synthetic_spec(spec))
    mm_file.write_text(automaton.serialize(spec.machine))
    out_file, log_file = tmp_path / "pruned.mm", tmp_path / "log.json"
    code, out, _ = run(["prune", "--machine", mm_file, "--env", f"synthetic:{spec_file}",
                        "--tolerance", 0, "--min-abs", 0, "--out", out_file,
                        "--log", log_file], capsys)
    assert code == 0
    assert automaton.deserialize(out_file.read_text()).decision_points() == []
    assert json.loads(log_file.read_text())["final_dp"] == 0
    assert "PrunedOpenLoop" in out


def test_eval_expert_json(capsys):
    code, out, _ = run(["eval", "--env", "parity", "--episodes", 4], capsys)
    assert code == 0
    assert json.loads(out)["mean"] == 1.0


def test_eval_seed_file(tmp_path, capsys):
    seeds = tmp_path / "seeds.txt"
    seeds.write_text("3, 9\n12")
    code, out, _ = run(["eval", "--env", "parity", "--seeds", seeds], capsys)
    assert code == 0 and json.loads(out)["seeds"] == [3, 9, 12]


def test_usage_errors_exit_two(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["minimize"])
    assert exc.value.code == 2
    code, _, err = run(["pipeline"], capsys)
    assert code == 2 and "environment is required" in err


def test_runtime_errors_exit_one(tmp_path, capsys):
    bad = tmp_path / "bad.mm"
    bad.write_text("not a machine\n")
    code, _, err = run(["minimize", "--machine", bad, "--out", tmp_path / "x"], capsys)
    assert code == 1 and "error" in err
    code, _, _ = run(["minimize", "--machine", tmp_path / "missing.mm",
                      "--out", tmp_path / "x"], capsys)
    assert code == 1
    code, _, _ = run(["eval", "--env", "nowhere"], capsys)
    assert code == 1


def test_parse_config():
    values = cli.parse_config("env = parity  # comment\nfine-tune = yes\n"
                              "termination_start = none\nprune_tolerance=0.2\n")
    assert values == {"env": "parity", "fine_tune": True, "termination_start": None,
                      "prune_tolerance": 0.2}
    with pytest.raises(ValueError):
        cli.parse_config("colour = red")
    with pytest.raises(ValueError):
        cli.parse_config("just words")


def pipeline(tmp_path, capsys, name, *extra):
    out = tmp_path / name
    code, stdout, _ = run(["pipeline", "--env", "parity", "--out-dir", out, *extra], capsys)
    assert code == 0
    return out, json.loads(stdout)


def test_pipeline_table_and_determinism(tmp_path, capsys):
    a, row = pipeline(tmp_path, capsys, "a", "--seed", 3)
    b, _ = pipeline(tmp_path, capsys, "b", "--seed", 3)
    with open(a / "table.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == cli.CSV_COLUMNS and len(rows) == 1
    assert int(rows[0]["pruned_dp"]) <= int(rows[0]["orig_dp"])
    assert row["classification"]
    for name in ("machine.mm", "pruned.mm", "prune.json", "table.csv", "traces.jsonl",
                 "view.json", "rpn.ckpt", "qbn_h.ckpt", "qbn_o.ckpt"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_pipeline_seed_from_env_and_config(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("MMFORGE_SEED", "3")
    a, _ = pipeline(tmp_path, capsys, "env-seed")
    monkeypatch.delenv("MMFORGE_SEED")
    config = tmp_path / "run.cfg"
    config.write_text("env = cartpole\nseed = 3\n")  # the --env flag overrides the file
    b, _ = pipeline(tmp_path, capsys, "cfg-seed", "--config", config)
    assert (a / "rpn.ckpt").read_bytes() == (b / "rpn.ckpt").read_bytes()
