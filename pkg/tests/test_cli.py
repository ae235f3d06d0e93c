import json
import subprocess
import sys

import pytest

from dcacseg.cli import build_parser, main
from dcacseg.data import load_manifest, load_mask, save_mask


@pytest.fixture
def tiny_set(tmp_path):
    out = tmp_path / "data"
    assert main(["synth", "--domains", "2", "--per-domain", "3", "--size", "32", "--seed", "7",
                 "--out", str(out)]) == 0
    return out / "manifest.json"


FAST = ["--set", "patch_size=16", "depth=2", "base_channels=4", "epochs=1", "minibatches_per_epoch=1"]


def test_synth_count(tmp_path):
    assert main(["synth", "--domains", "4", "--per-domain", "10", "--seed", "7", "--size", "32",
                 "--out", str(tmp_path)]) == 0
    m = load_manifest(tmp_path / "manifest.json")
    assert len(m) == 40 and m.num_domains == 4
    cfg = json.loads((tmp_path / "config.resolved.json").read_text())
    assert cfg["seed"] == 7 and cfg["command"] == "synth"


def test_synth_requires_seed(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["synth", "--out", str(tmp_path)])
    assert e.value.code != 0


def test_synth_reproducible(tmp_path):
    for name in "ab":
        assert main(["synth", "--domains", "2", "--per-domain", "2", "--size", "32", "--seed", "3",
              "--out", str(tmp_path / name)]) == 0
    for f in sorted((tmp_path / "a" / "images").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "images" / f.name).read_bytes()


def test_help_documents_flags(capsys):
    parser = build_parser()
    for cmd in ("synth", "plan", "train", "crossval", "infer", "eval", "experiment"):
        with pytest.raises(SystemExit) as e:
            parser.parse_args([cmd, "--help"])
        assert e.value.code == 0
        text = capsys.readouterr().out
        sub = parser._subparsers._group_actions[0].choices[cmd]
        for action in sub._actions:
            for opt in action.option_strings:
                assert opt in text


def test_unknown_flag_exits_nonzero():
    with pytest.raises(SystemExit) as e:
        main(["synth", "--seed", "1", "--bogus"])
    assert e.value.code != 0


def test_env_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("DCACSEG_OUTPUT_DIR", str(tmp_path / "base"))
    assert main(["synth", "--domains", "2", "--per-domain", "1", "--size", "32", "--seed", "1"]) == 0
    (run,) = (tmp_path / "base").iterdir()
    assert run.name.startswith("synth-")
    assert (run / "config.resolved.json").exists()


def test_plan_and_bad_override(tmp_path, tiny_set, capsys):
    assert main(["plan", "--manifest", str(tiny_set), "--dcac", "--out", str(tmp_path / "p")]) == 0
    p = json.loads((tmp_path / "p" / "plan.json").read_text())
    assert p["dcac_enabled"] and p["num_domains"] == 2 and p["patch_size"] == 64  # desk preset
    assert main(["plan", "--manifest", str(tiny_set), "--preset", "full", "--out", str(tmp_path / "f")]) == 0
    p = json.loads((tmp_path / "f" / "plan.json").read_text())
    assert (p["patch_size"], p["depth"], p["minibatches_per_epoch"]) == (32, 3, 250)
    capsys.readouterr()
    assert main(["plan", "--manifest", str(tiny_set), "--set", "depth=9", "--out", str(tmp_path / "q")]) == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("dcacseg plan: error:") and "\n" not in err


def test_missing_manifest(tmp_path, capsys):
    assert main(["plan", "--manifest", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err


def test_train_infer_eval(tmp_path, tiny_set):
    assert main(["train", "--manifest", str(tiny_set), "--val", str(tiny_set), "--seed", "0",
                 "--out", str(tmp_path / "t"), "--dcac"] + FAST) == 0
    ckpt = tmp_path / "t" / "checkpoint_best.ckpt"
    assert ckpt.exists() and (tmp_path / "t" / "train_log.csv").exists()
    assert main(["infer", "--checkpoint", str(ckpt), str(ckpt), "--manifest", str(tiny_set),
                 "--save-probs", "--out", str(tmp_path / "i")]) == 0
    assert len(list((tmp_path / "i" / "masks").glob("*.png"))) == 6
    assert len(list((tmp_path / "i" / "probs").glob("*.bin"))) == 6
    assert main(["eval", "--pred", str(tmp_path / "i"), "--manifest", str(tiny_set),
                 "--out", str(tmp_path / "e")]) == 0
    summary = json.loads((tmp_path / "e" / "report.json").read_text())
    assert summary["count"] == 6


def test_infer_images_dir(tmp_path, tiny_set):
    main(["train", "--manifest", str(tiny_set), "--seed", "0", "--out", str(tmp_path / "t")] + FAST)
    img_dir = tiny_set.parent / "images"
    assert main(["infer", "--checkpoint", str(tmp_path / "t" / "checkpoint_final.ckpt"),
                 "--images", str(img_dir), "--threshold", "0.5", "--no-tta",
                 "--out", str(tmp_path / "i")]) == 0
    assert len(list((tmp_path / "i" / "masks").glob("*.png"))) == 6


def test_eval_perfect_predictions(tmp_path, tiny_set, capsys):
    (tmp_path / "pred").mkdir()
    for s in load_manifest(tiny_set).samples:
        save_mask(load_mask(s.mask_path), tmp_path / "pred" / f"{s.image_id}.png")
    capsys.readouterr()
    assert main(["eval", "--pred", str(tmp_path / "pred"), "--manifest", str(tiny_set),
                 "--out", str(tmp_path / "e")]) == 0
    assert json.loads(capsys.readouterr().out)["mean_seg_score"] == 1.0


def test_eval_missing_prediction(tmp_path, tiny_set, capsys):
    (tmp_path / "pred").mkdir()
    assert main(["eval", "--pred", str(tmp_path / "pred"), "--manifest", str(tiny_set),
                 "--out", str(tmp_path / "e")]) == 1
    assert "missing prediction" in capsys.readouterr().err


def test_crossval_k(tmp_path, tiny_set):
    assert main(["crossval", "--manifest", str(tiny_set), "--k", "3", "--seed", "0",
                 "--out", str(tmp_path)] + FAST) == 0
    for i in range(3):
        assert (tmp_path / f"fold_{i}" / "checkpoint_best.ckpt").exists()
        assert (tmp_path / f"fold_{i}" / "report.csv").exists()


def test_experiment_overlap_fails(tmp_path, tiny_set, capsys):
    assert main(["experiment", "--kind", "cross_domain", "--source", str(tiny_set),
                 "--eval", str(tiny_set), "--out", str(tmp_path)] + FAST) == 1
    assert "overlap" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "dcacseg", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "experiment" in r.stdout
