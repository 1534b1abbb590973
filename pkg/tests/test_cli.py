import csv
import json
import os

import pytest

from clutterlab import nn
from clutterlab.cli import (ConfigError, apply_override, line_chart_svg, main, resolve_config,
                            suite_entries)
from clutterlab.scene import Scene, load_scene, save_scene

SMALL = ["--set", 'suite.patterns=["gathering","tilting"]', "--set", "suite.per_pattern=1",
         "--set", "suite.n_objects=5", "--set", "train.max_ops=2"]


def run(*argv):
    return main([str(a) for a in argv])


def test_default_suite_has_25_scenes_per_pattern(tmp_path):
    assert run("gen-suite", "--out", tmp_path) == 0
    rows = list(csv.DictReader(open(tmp_path / "suite.csv")))
    assert len(rows) == 100
    counts = {}
    for r in rows:
        counts[r["pattern"]] = counts.get(r["pattern"], 0) + 1
    assert counts == {"random": 25, "gathering": 25, "covering": 25, "tilting": 25}
    assert len({r["seed"] for r in rows}) == 100
    load_scene(tmp_path / rows[0]["file"])
    manifest = json.loads((tmp_path / "run_manifest.json").read_text())
    assert manifest["command"] == "gen-suite"
    assert manifest["config"]["suite"]["per_pattern"] == 25
    assert "suite.csv" in manifest["outputs"]


def test_gen_suite_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["--set", "suite.per_pattern=3"]
    assert run("gen-suite", "--out", a, *args) == 0
    assert run("gen-suite", "--out", b, *args) == 0
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert len(files) == 12 + 2
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes()


@pytest.mark.skipif(hasattr(os, "geteuid") and os.geteuid() == 0,
                    reason="root ignores directory permissions")
def test_unwritable_output_directory_is_reported(tmp_path, capsys):
    locked = tmp_path / "locked"
    locked.mkdir()
    locked.chmod(0o500)
    try:
        assert run("gen-suite", "--out", locked / "x") == 1
    finally:
        locked.chmod(0o700)
    assert str(locked) in capsys.readouterr().err


def test_output_path_that_is_a_file_is_reported(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run("gen-suite", "--out", blocker / "sub") == 1
    err = capsys.readouterr().err
    assert err.startswith("clutterlab: error:") and str(blocker) in err


def test_overrides_parse_json_values():
    cfg = resolve_config(overrides=["train.gamma=0.5", "metric.sigma_mode=literal",
                                    'suite.patterns=["covering"]'], seed=9)
    assert cfg["train"]["gamma"] == 0.5
    assert cfg["metric"]["sigma_mode"] == "literal"
    assert cfg["suite"]["patterns"] == ["covering"]
    assert cfg["train"]["seed"] == 9


@pytest.mark.parametrize("bad", ["train.gama=0.5", "nosuch.key=1", "train.gamma", "=3"])
def test_bad_override_keys(bad):
    with pytest.raises(ConfigError):
        resolve_config(overrides=[bad])


@pytest.mark.parametrize("bad", ["metric.w_flat=0.8", "train.gamma=1.5",
                                 'suite.patterns=["spiral"]', "suite.per_pattern=0"])
def test_invalid_values_are_rejected(bad):
    with pytest.raises(ConfigError):
        resolve_config(overrides=[bad])


def test_config_file_merges_and_rejects_unknown_keys(tmp_path):
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"train": {"episodes": 7}}))
    assert resolve_config(good)["train"]["episodes"] == 7
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"episodez": 7}}))
    with pytest.raises(ConfigError):
        resolve_config(bad)
    with pytest.raises(ConfigError):
        resolve_config(tmp_path / "missing.json")


def test_apply_override_needs_an_equals_sign():
    with pytest.raises(ConfigError):
        apply_override({"a": 1}, "a")


def test_suite_seeds_are_disjoint_between_suites():
    cfg = resolve_config()
    ev = {s for _, s in suite_entries(cfg["suite"])}
    tr = {s for _, s in suite_entries(cfg["train_suite"])}
    assert not ev & tr


def test_metric_on_an_empty_scene(tmp_path, capsys):
    path = tmp_path / "empty.json"
    save_scene(Scene(), path)
    assert run("metric", path, "--out", tmp_path / "m") == 0
    report = json.loads((tmp_path / "m" / "metric.json").read_text())
    assert report["phi"] == 0.0
    assert report["degenerate"] is True
    assert json.loads(capsys.readouterr().out) == report


def test_metric_on_a_missing_file(tmp_path, capsys):
    assert run("metric", tmp_path / "nope.png", "--out", tmp_path) == 1
    assert "nope.png" in capsys.readouterr().err


def test_eval_needs_a_policy(tmp_path, capsys):
    assert run("eval", "--out", tmp_path, *SMALL) == 1
    assert "--checkpoint" in capsys.readouterr().err


def test_eval_random_twice_gives_identical_csv(tmp_path):
    assert run("eval", "--random", "--out", tmp_path / "a", *SMALL) == 0
    assert run("eval", "--random", "--out", tmp_path / "b", *SMALL) == 0
    a = (tmp_path / "a" / "eval.csv").read_bytes()
    assert a == (tmp_path / "b" / "eval.csv").read_bytes()
    assert a.decode().splitlines()[0] == "policy,operation_times,phi_increment,success_rate"


def test_corrupt_checkpoint_is_rejected(tmp_path, capsys):
    ck = tmp_path / "q.bin"
    ck.write_bytes(b"CLQN" + b"\0" * 60)
    assert run("eval", "--checkpoint", ck, "--out", tmp_path / "o", *SMALL) == 1
    assert "q.bin" in capsys.readouterr().err
    assert not (tmp_path / "o" / "run_manifest.json").exists()


def test_compare_writes_a_two_row_table_deterministically(tmp_path):
    ck = nn.save_checkpoint(nn.QNetwork.init(1), tmp_path / "q.bin")
    for name in ("a", "b"):
        assert run("compare", "--checkpoint", ck, "--out", tmp_path / name, *SMALL) == 0
    a = (tmp_path / "a" / "compare.csv").read_bytes()
    assert a == (tmp_path / "b" / "compare.csv").read_bytes()
    rows = list(csv.reader(a.decode().splitlines()))
    assert rows[0] == ["policy", "operation_times", "phi_increment", "success_rate"]
    assert [r[0] for r in rows[1:]] == ["random", "learned"]
    assert (tmp_path / "a" / "phi_vs_operations.svg").read_text().startswith("<svg")
    manifest = json.loads((tmp_path / "a" / "run_manifest.json").read_text())
    assert manifest["checkpoint"] == str(ck)
    assert manifest["code_version"].startswith("0.1.0+")


def test_train_writes_checkpoint_and_curves(tmp_path):
    args = ["--set", "train.episodes=2", "--set", "train.batch_size=2",
            "--set", 'train_suite.patterns=["gathering"]', "--set", "train_suite.per_pattern=2",
            "--set", "train_suite.n_objects=4", "--set", "train.max_ops=3"]
    assert run("train", "--out", tmp_path, "--seed", 4, *args) == 0
    net = nn.load_checkpoint(tmp_path / "checkpoint.bin")
    assert len(net.heads) == 8
    lines = (tmp_path / "curves.csv").read_text().splitlines()
    assert lines[0] == "episode,mean_reward_100,success_rate_100,epsilon,lr"
    assert len(lines) == 3
    assert json.loads((tmp_path / "run_manifest.json").read_text())["config"]["train"]["seed"] == 4


def test_svg_chart_handles_empty_series():
    svg = line_chart_svg({"a": [], "b": [(0, 0.5)]}, "t", "x", "y")
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
