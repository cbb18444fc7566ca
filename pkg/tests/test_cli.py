import csv
import json

import pytest

from advfield.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from advfield.segnet import SegNet, SegNetConfig, save_checkpoint

TOY = ["--height", "32", "--width", "32", "--set", "synth.radius_min=6", "--set", "synth.radius_max=11",
       "--set", "synth.thickness_min=2", "--set", "synth.thickness_max=4", "--set", "synth.center_jitter=3",
       "--set", "synth.texture_sigma=3"]
FAST = ["--set", "net.widths=4,8", "--set", "train.batch_size=2", "--set", "train.val_every=3"]


def tree(root):
    """Every file's bytes; the echoed output directory is the only line allowed to differ."""
    out = {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
    if "effective_config.txt" in out:
        lines = out["effective_config.txt"].splitlines(keepends=True)
        out["effective_config.txt"] = b"".join(x for x in lines if not x.startswith(b"run.out ="))
    return out


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ds"
    assert main(["synth", "--count", "20", "--seed", "7", "--out", str(out)] + TOY) == EXIT_OK
    return out


def test_synth_twice_is_identical(dataset, tmp_path):
    again = tmp_path / "ds2"
    assert main(["synth", "--count", "20", "--seed", "7", "--out", str(again)] + TOY) == EXIT_OK
    assert tree(dataset) == tree(again)


def test_synth_count_zero_is_usage_error(tmp_path, capsys):
    assert main(["synth", "--count", "0", "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert "error" in capsys.readouterr().err


def test_synth_default_extent(tmp_path):
    assert main(["synth", "--count", "2", "--out", str(tmp_path / "d")]) == EXIT_OK
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert {(s["height"], s["width"]) for s in manifest["samples"]} == {(64, 64)}


def test_usage_errors(tmp_path):
    assert main([]) == EXIT_CONFIG
    assert main(["train", "--attack", "gan"]) == EXIT_CONFIG
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["synth", "--set", "bogus=1", "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["synth", "--set", "synth.radius_max=40", "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def train_args(dataset, out, *extra):
    return ["train", "--data", str(dataset), "--out", str(out), "--pretrain-iters", "4",
            "--finetune-iters", "2"] + FAST + list(extra)


def test_train_baseline_and_rerun_identical(dataset, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(train_args(dataset, a, "--attack", "none", "--finetune-iters", "0")) == EXIT_OK
    assert main(train_args(dataset, b, "--attack", "none", "--finetune-iters", "0")) == EXIT_OK
    rows = list(csv.DictReader(open(a / "train_log.csv")))
    assert len(rows) == 4 and all(float(r["loss_cons"]) == 0.0 for r in rows)
    assert (a / "train_log.csv").read_bytes() == (b / "train_log.csv").read_bytes()
    assert (a / "checkpoints" / "best" / "manifest.txt").exists()


def test_train_semi_supervised(dataset, tmp_path):
    assert main(train_args(dataset, tmp_path / "s", "--mode", "semi", "--attack", "vat")) == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "s" / "train_log.csv")))
    assert float(rows[-1]["dcomp_u"]) > 0


def test_rerun_from_effective_config(dataset, tmp_path):
    a = tmp_path / "a"
    assert main(train_args(dataset, a, "--attack", "bias")) == EXIT_OK
    b = tmp_path / "b"
    assert main(["train", "--config", str(a / "effective_config.txt"), "--out", str(b)]) == EXIT_OK
    assert tree(a) == tree(b)


def zero_head_checkpoint(path):
    net = SegNet(SegNetConfig(32, 32, 2, (4, 8), 0)).zero_head()
    save_checkpoint(path, net)
    return path


def test_attack_flags_zero_gradients(dataset, tmp_path):
    ck = zero_head_checkpoint(tmp_path / "ck")
    for kind in ("bias", "morph", "vat"):
        out = tmp_path / kind
        assert main(["attack", "--data", str(dataset), "--checkpoint", str(ck), "--kind", kind,
                     "--out", str(out)]) == EXIT_OK
        rows = list(csv.DictReader(open(out / "attack_summary.csv")))
        assert rows and all(r["zero_grad"] == "1" for r in rows)
        assert any(p.suffix == ".pgm" for p in (out / "attacks").iterdir())


def test_attack_extent_mismatch(dataset, tmp_path):
    ck = tmp_path / "ck"
    save_checkpoint(ck, SegNet(SegNetConfig(16, 16, 2, (4, 8), 0)))
    assert main(["attack", "--data", str(dataset), "--checkpoint", str(ck), "--out", str(tmp_path / "o")]) \
        == EXIT_CONFIG


def test_eval_clean_only(dataset, tmp_path):
    ck = zero_head_checkpoint(tmp_path / "ck")
    out = tmp_path / "ev"
    assert main(["eval", "--data", str(dataset), "--checkpoint", str(ck), "--attacks", "",
                 "--out", str(out)]) == EXIT_OK
    header = (out / "report.csv").read_text().splitlines()[0]
    assert header == "id,dice_clean"
    assert (out / "summary.txt").exists()


def test_ablate_two_cells(dataset, tmp_path):
    out = tmp_path / "ab"
    code = main(["ablate", "--data", str(dataset), "--out", str(out), "--axes", "train.attack=none|random-bias",
                 "--seeds", "0", "--set", "train.pretrain_iters=3", "--set", "train.finetune_iters=2",
                 "--set", "ablate.corruption_trials=1"] + FAST)
    assert code == EXIT_OK
    lines = (out / "ablation.csv").read_text().splitlines()
    assert len(lines) == 3


def test_ablate_failing_cell_returns_runtime_code(dataset, tmp_path):
    code = main(["ablate", "--data", str(dataset), "--out", str(tmp_path / "ab"), "--axes",
                 "train.pretrain_lr=1e300", "--seeds", "0", "--set", "train.pretrain_iters=2",
                 "--set", "train.finetune_iters=0", "--set", "ablate.corruption_trials=1"] + FAST)
    assert code == EXIT_RUNTIME
