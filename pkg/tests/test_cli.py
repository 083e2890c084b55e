import csv
import hashlib
import json
import subprocess
import sys

import pytest

from volufuse.cli import build_parser, main
from volufuse.volcore import load_volume

TINY = [
    "--threads", "1",
    "--global-shape", "16",
    "--patch-shape", "16",
    "--patch-overlap", "4",
    "--set", "base_channels=4",
    "--set", "depth=2",
    "--set", "disc_channels=4",
    "--epochs1", "1",
    "--epochs2", "1",
    "--batch-size", "2",
    "--set", "patches_per_case=1",
]


def digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "ds"
    assert main(["simulate", "--out", str(root), "--n", "5", "--shape", "20", "--count", "1", "2",
                 "--radius", "2", "3", "--seed", "7", "--threads", "1"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt")
    assert main(["train", "--step", "1", "--data", str(dataset), "--out", str(out / "c1"), *TINY]) == 0
    assert main(["train", "--step", "2", "--data", str(dataset), "--ckpt1", str(out / "c1"), "--out", str(out / "c2"), *TINY]) == 0
    return out


def test_help_documents_every_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    parser = build_parser()
    for name, sub in parser._subparsers._group_actions[0].choices.items():
        text = sub.format_help()
        for action in sub._actions:
            for opt in action.option_strings:
                assert opt in text
            if action.option_strings and action.dest != "help":
                assert action.help, f"{name} {action.option_strings} lacks help"


def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["fuse", "--unknown"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["train", "--step", "3", "--data", "d", "--out", "o"])
    assert exc.value.code == 1


def test_dump_config_applies_precedence(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"epochs1": 3, "lr": 0.5}))
    code = main(["ablate", "--data", "d", "--out", "o", "--config", str(tmp_path / "c.json"), "--lr", "0.25",
                 "--threads", "1", "--dump-config"])
    assert code == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["epochs1"] == 3 and cfg["lr"] == 0.25 and cfg["threads"] == 1


def test_threads_env_fallback(monkeypatch, capsys):
    monkeypatch.setenv("VOLUFUSE_THREADS", "1")
    assert main(["ablate", "--data", "d", "--out", "o", "--dump-config"]) == 0
    assert json.loads(capsys.readouterr().out)["threads"] == 1


def test_runtime_errors_exit_2_with_distinct_messages(tmp_path, dataset, trained, capsys):
    assert main(["fuse", "--in", str(tmp_path / "nope.vol.json"), "--out", str(tmp_path / "o.vol.json")]) == 2
    missing = capsys.readouterr().err
    assert "missing file" in missing

    (tmp_path / "bad.json").write_text("{")
    assert main(["ablate", "--data", str(dataset), "--out", str(tmp_path), "--config", str(tmp_path / "bad.json")]) == 2
    malformed = capsys.readouterr().err
    assert "malformed config" in malformed

    inp = dataset / "case_000_input.vol.json"
    # a two-channel step-two model without its step-one partner
    assert main(["fuse", "--in", str(inp), "--out", str(tmp_path / "o.vol.json"), "--ckpt2", str(trained / "c2"), *TINY]) == 2
    mismatch = capsys.readouterr().err
    assert "checkpoint mismatch" in mismatch
    assert len({missing.split(":")[1], malformed.split(":")[1], mismatch.split(":")[1]}) == 3


def test_impossible_phantoms_exit_2(tmp_path, capsys):
    assert main(["simulate", "--n", "1", "--shape", "20", "--out", str(tmp_path), "--threads", "1"]) == 2
    assert "placement failed" in capsys.readouterr().err


def test_simulate_is_byte_reproducible(tmp_path):
    args = ["simulate", "--n", "3", "--shape", "20", "--count", "1", "2", "--radius", "2", "3", "--seed", "7", "--threads", "1"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    assert digest(tmp_path / "a") == digest(tmp_path / "b")


def test_fuse_writes_volume_with_input_shape(tmp_path, dataset, trained):
    inp = dataset / "case_000_input.vol.json"
    out = tmp_path / "b.vol.json"
    code = main(["fuse", "--in", str(inp), "--out", str(out), "--ckpt1", str(trained / "c1"), "--ckpt2", str(trained / "c2"), *TINY])
    assert code == 0
    assert out.exists() and (tmp_path / "b.vol.raw").exists()
    assert load_volume(out).shape == load_volume(inp).shape


def test_eval_on_ground_truth_gives_unit_nssim(tmp_path, dataset):
    manifest = json.loads((dataset / "manifest.json").read_text())
    for case in manifest["cases"]:
        case["output"] = case["gt"]
    (dataset / "gt_as_output.json").write_text(json.dumps(manifest))
    csv_path = tmp_path / "r.csv"
    assert main(["eval", "--data", str(dataset / "gt_as_output.json"), "--out", str(csv_path), "--threads", "1"]) == 0
    rows = list(csv.DictReader(csv_path.open()))
    assert len(rows) == 5
    assert all(float(r["nssim"]) == 1.0 for r in rows)


def test_eval_requires_predictions(tmp_path, dataset, capsys):
    assert main(["eval", "--data", str(dataset), "--out", str(tmp_path / "r.csv")]) == 1
    assert main(["eval", "--data", str(dataset), "--pred-dir", str(tmp_path), "--out", str(tmp_path / "r.csv")]) == 2


def test_train_and_fuse_are_byte_reproducible(tmp_path, dataset, trained):
    out = tmp_path / "again"
    assert main(["train", "--step", "1", "--data", str(dataset), "--out", str(out / "c1"), *TINY]) == 0
    assert main(["train", "--step", "2", "--data", str(dataset), "--ckpt1", str(out / "c1"), "--out", str(out / "c2"), *TINY]) == 0
    assert digest(out / "c1") == digest(trained / "c1")
    assert digest(out / "c2") == digest(trained / "c2")


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "volufuse", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "simulate" in proc.stdout
