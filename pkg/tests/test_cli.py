import json

import pytest

from jointattn.cli import build_parser, main


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert run("gen-synth", "--pairs", 6, "--test-pairs", 2, "--seed", 3, "--out", data) == 0
    cfg = root / "train.json"
    cfg.write_text(json.dumps({"epochs": 3, "triplets_per_epoch": 16, "batch_size": 8}))
    assert run("train", "--manifest", data / "train.jsonl", "--config", cfg, "--epochs", 1,
               "--out", root / "run") == 0
    return root


def test_gen_synth_happy_path(tmp_path):
    assert run("gen-synth", "--pairs", 10, "--seed", 42, "--out", tmp_path / "d") == 0
    dirs = [p for p in (tmp_path / "d").iterdir() if p.is_dir()]
    assert len(dirs) == 10
    assert all((p / "ground_truth.json").exists() for p in dirs)
    assert (tmp_path / "d" / "manifest.jsonl").read_text().count("\n") == 10


def test_unknown_subcommand(capsys):
    assert run("frobnicate") == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_flag(capsys):
    assert run("gen-synth", "--bogus", 1) == 2


def test_eval_pairs_missing_checkpoint(capsys, tmp_path):
    assert run("eval-pairs", "--manifest", tmp_path / "m.jsonl", "--out", tmp_path) == 1
    assert "--checkpoint" in capsys.readouterr().err


def test_missing_manifest_file(capsys, tmp_path):
    assert run("train", "--manifest", tmp_path / "nope.jsonl", "--out", tmp_path) == 1
    assert "error" in capsys.readouterr().err


def test_bad_config_value(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"learning_rate": -1}))
    assert run("train", "--manifest", tmp_path / "m.jsonl", "--config", cfg, "--out", tmp_path) == 1


def subcommands():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.__class__.__name__ == "_SubParsersAction")
    return sub.choices


@pytest.mark.parametrize("name", sorted(subcommands()))
def test_help_lists_flags_with_defaults(name, capsys):
    assert run(name, "--help") == 0
    text = capsys.readouterr().out
    parser = subcommands()[name]
    for action in parser._actions:
        if action.option_strings and action.dest != "help":
            assert any(opt in text for opt in action.option_strings)
    for flag in ("--seed", "--config", "--out"):
        assert flag in text
    assert text.count("default") >= len([a for a in parser._actions if a.dest != "help"])
    assert "Precedence" in " ".join(text.split())


def test_every_subcommand_has_common_flags():
    for name, p in subcommands().items():
        opts = {o for a in p._actions for o in a.option_strings}
        assert {"--seed", "--config", "--out"} <= opts, name


def test_flag_overrides_config(workspace):
    saved = json.loads((workspace / "run" / "train_config.json").read_text())
    assert saved["epochs"] == 1  # flag beat the config file
    assert saved["triplets_per_epoch"] == 16  # config file beat the default
    assert saved["learning_rate"] == 1e-3  # default
    assert (workspace / "run" / "checkpoint.bin").exists()
    assert (workspace / "run" / "training.png").exists()


def test_eval_commands_deterministic(workspace, tmp_path):
    ck = workspace / "run" / "checkpoint.bin"
    test_m = workspace / "data" / "test.jsonl"
    for out in ("a", "b"):
        assert run("eval-pairs", "--checkpoint", ck, "--manifest", test_m, "--n-triplets", 30, "--seed", 1,
                   "--out", tmp_path / out) == 0
        assert run("eval-moments", "--checkpoint", ck, "--manifest", test_m, "--out", tmp_path / out) == 0
    for name in ("eval_pairs.json", "eval_moments.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rep = json.loads((tmp_path / "a" / "eval_pairs.json").read_text())
    assert rep["task"] == "pairs_discrimination" and rep["n"] == 30


def test_summarize(workspace, tmp_path):
    ck = workspace / "run" / "checkpoint.bin"
    m = workspace / "data" / "test.jsonl"
    assert run("summarize", "--checkpoint", ck, "--manifest", m, "--out", tmp_path) == 0
    files = sorted(tmp_path.glob("summary_syn*.json"))
    assert len(files) == 2
    s = json.loads(files[0].read_text())
    assert set(s) == {"pair_id", "importance", "selected", "threshold"}
    assert (tmp_path / "summary_metrics.json").exists()
    assert run("summarize", "--checkpoint", ck, "--manifest", m, "--threshold", 1.01, "--out", tmp_path / "t") == 0
    assert all(json.loads(f.read_text())["selected"] == [] for f in (tmp_path / "t").glob("summary_syn*.json"))


def test_summarize_refuses_untrained(workspace, tmp_path):
    data = workspace / "data"
    assert run("train", "--manifest", data / "train.jsonl", "--epochs", 0, "--out", tmp_path / "r0") == 0
    assert run("summarize", "--checkpoint", tmp_path / "r0" / "checkpoint.bin", "--manifest",
               data / "test.jsonl", "--out", tmp_path) == 1


def frame(workspace, view):
    pid = json.loads((workspace / "data" / "test.jsonl").read_text().splitlines()[0])["pair_id"]
    return workspace / "data" / pid / view / "0.png"


def test_gaze(workspace, tmp_path, capsys):
    ck = workspace / "run" / "checkpoint.bin"
    assert run("gaze", "--checkpoint", ck, "--image", frame(workspace, "third"), "--head", 10, 12,
               "--out", tmp_path) == 0
    g = json.loads((tmp_path / "gaze.json").read_text())
    assert set(g) == {"head", "gaze_point", "ray", "degenerate"}
    assert g["head"] == [10.0, 12.0]
    assert (tmp_path / "gaze.png").stat().st_size > 0
    assert run("gaze", "--checkpoint", ck, "--image", frame(workspace, "third"), "--head", 100, 12,
               "--out", tmp_path) == 1


def test_coseg(workspace, tmp_path):
    ck = workspace / "run" / "checkpoint.bin"
    assert run("coseg", "--checkpoint", ck, "--first", frame(workspace, "first"), "--third",
               frame(workspace, "third"), "--out", tmp_path) == 0
    from jointattn.datakit import read_png

    for name in ("first_mask.png", "third_mask.png"):
        m = read_png(tmp_path / name)
        assert m.shape == (64, 64, 3) and set(m.ravel().tolist()) <= {0, 255} and m.max() == 255
    rec = json.loads((tmp_path / "coseg.json").read_text())
    assert {"proximity", "appearance", "cost"} <= set(rec)
    assert (tmp_path / "coseg.png").stat().st_size > 0


def test_visualize(workspace, tmp_path):
    ck = workspace / "run" / "checkpoint.bin"
    assert run("visualize", "--checkpoint", ck, "--manifest", workspace / "data" / "test.jsonl", "--n", 1,
               "--out", tmp_path) == 0
    assert (tmp_path / "heatmaps.png").exists()
    assert len(list(tmp_path.glob("syn*_*.png"))) == 2


def test_grad_check(workspace, tmp_path):
    assert run("grad-check", "--manifest", workspace / "data" / "train.jsonl", "--coords", 20, "--batch", 1,
               "--out", tmp_path) == 0
    res = json.loads((tmp_path / "grad_check.json").read_text())
    assert res["passed"] and res["max_relative_error"] < 1e-4


def test_ablations(workspace, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 1, "triplets_per_epoch": 16, "batch_size": 8}))
    data = workspace / "data"
    assert run("ablations", "--manifest", data / "train.jsonl", "--test-manifest", data / "test.jsonl",
               "--config", cfg, "--variants", "full,without_sa", "--n-triplets", 20, "--out", tmp_path) == 0
    for name in ("ablations.txt", "ablations.csv", "ablations.json", "ablations.png"):
        assert (tmp_path / name).exists()
    rows = json.loads((tmp_path / "ablations.json").read_text())
    assert [r["variant"] for r in rows] == ["full", "without_sa"]
    assert rows[0]["hit_rate"] is not None
    assert run("ablations", "--manifest", data / "train.jsonl", "--test-manifest", data / "test.jsonl",
               "--variants", "full,bogus", "--out", tmp_path) == 1
