import re
import subprocess
import sys

import numpy as np
import pytest

from chromaflow.classifier import load_weights
from chromaflow.cli import build_parser, main
from chromaflow.data import write_image
from chromaflow.evaluation import load_report
from chromaflow.warp import FlowField, load_flow, save_flow


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def subparsers():
    parser = build_parser()
    action = next(a for a in parser._actions if a.__class__.__name__ == "_SubParsersAction")
    return parser, action.choices


def test_help_lists_every_flag():
    parser, subs = subparsers()
    for name, sub in list(subs.items()) + [("main", parser)]:
        text = sub.format_help()
        for action in sub._actions:
            for opt in action.option_strings:
                assert opt in text, f"{name}: {opt} missing from help"


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["attack", "--weights", "w", "--data", "d", "--out", "o", "--bogus"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_attack_defaults():
    args = build_parser().parse_args(["attack", "--weights", "w", "--data", "d", "--out", "o"])
    assert args.iters == 1000 and args.colorfulness_threshold == 15 and args.lr is None
    assert args.mode == "subpixel" and args.gamut == "clamp"


def test_train_prints_epochs_and_writes_weights(capsys, tmp_path, trained):
    out = tmp_path / "w.cwgt"
    d = trained["dir"]
    code, stdout, _ = run(capsys, "train", "--data", d / "train.bin", "--test", d / "test.bin", "--out", out,
                          "--epochs", 2, "--train-limit", 128, "--adv", "fgsm", "--eps", 0.031373)
    assert code == 0
    lines = stdout.strip().splitlines()
    assert len(lines) == 2
    assert all(re.fullmatch(r"epoch \d+ train_acc [0-9.e-]+ test_acc [0-9.e-]+", ln) for ln in lines)
    load_weights(out)


def test_train_missing_file(capsys, tmp_path):
    code, out, err = run(capsys, "train", "--data", tmp_path / "nope.bin", "--out", tmp_path / "w")
    assert code == 1 and out == "" and "error" in err


def attack(capsys, trained, out, *extra):
    d = trained["dir"]
    return run(capsys, "attack", "--weights", d / "w.cwgt", "--data", d / "test.bin", "--iters", 4,
               "--limit", 6, "--batch-size", 4, "--out", out, *extra)


def test_attack_subpixel_artifacts(capsys, tmp_path, trained):
    code, out, _ = attack(capsys, trained, tmp_path / "a", "--mode", "subpixel", "--lr", 2.0, "--jobs", 1)
    assert code == 0
    assert re.fullmatch(r"attacked 6 excluded \d+ fooling_rate_all [0-9.]+ fooling_rate_correct_only \S+\n", out)
    report = load_report(tmp_path / "a" / "report.txt")
    assert report.config["iterations"] == 4 and report.config["learning_rate"] == 2.0
    assert report.config["mode"] == "chroma_subpixel"
    flows = sorted((tmp_path / "a").glob("*/flow.cflw"))
    assert len(flows) == 6
    for f in flows:
        assert np.abs(load_flow(f).to_array()).max() < 1.0
    assert len(list((tmp_path / "a").glob("*/adv.ppm"))) == 6


def test_attack_report_reproducible_across_jobs(capsys, tmp_path, trained):
    for name, jobs in (("a", 1), ("b", 1), ("c", 2)):
        assert attack(capsys, trained, tmp_path / name, "--mode", "unrestricted", "--jobs", jobs)[0] == 0
    a = (tmp_path / "a" / "report.txt").read_bytes()
    assert a == (tmp_path / "b" / "report.txt").read_bytes() == (tmp_path / "c" / "report.txt").read_bytes()
    assert (tmp_path / "a" / "test_00002" / "flow.cflw").read_bytes() == (
        tmp_path / "c" / "test_00002" / "flow.cflw"
    ).read_bytes()


def test_jobs_env_fallback(capsys, tmp_path, trained, monkeypatch):
    monkeypatch.setenv("CHROMAFLOW_JOBS", "2")
    assert attack(capsys, trained, tmp_path / "e", "--mode", "fgsm")[0] == 0
    assert "fgsm" in (tmp_path / "e" / "report.txt").read_text()


def test_attack_ppm_directory_with_targets(capsys, tmp_path, trained):
    src = tmp_path / "imgs"
    src.mkdir()
    rows = ["filename,true_label,target_label"]
    for k, item in enumerate(trained["test"][:3]):
        write_image(item.image, src / f"im{k}.ppm")
        rows.append(f"im{k}.ppm,{item.label},{(item.label + 3) % 10}")
    (src / "manifest.csv").write_text("\n".join(rows) + "\n")
    code, _, _ = run(capsys, "attack", "--weights", trained["dir"] / "w.cwgt", "--data", src, "--targeted",
                     "--iters", 2, "--out", tmp_path / "o", "--jobs", 1)
    assert code == 0
    report = load_report(tmp_path / "o" / "report.txt")
    assert [r["target_class"] for r in report.images] == [(i.label + 3) % 10 for i in trained["test"][:3]]


def test_attack_bad_weights(capsys, tmp_path, trained):
    bad = tmp_path / "w.cwgt"
    bad.write_bytes(b"nope")
    code, _, err = run(capsys, "attack", "--weights", bad, "--data", trained["dir"] / "test.bin", "--out", tmp_path)
    assert code == 1 and "magic" in err


def test_eval_grayscale_and_defense(capsys, tmp_path, trained):
    d = trained["dir"]
    code, out, _ = run(capsys, "eval", "--weights", d / "w.cwgt", "--data", d / "test.bin", "--grayscale")
    assert code == 0
    vals = dict(line.split() for line in out.splitlines())
    assert float(vals["accuracy"]) <= float(vals["color_accuracy"])

    assert attack(capsys, trained, tmp_path / "p", "--mode", "unrestricted", "--gamut", "project", "--jobs", 1)[0] == 0
    code, out, _ = run(capsys, "eval", "--weights", d / "w.cwgt", "--data", d / "test.bin", "--adv-dir", tmp_path / "p")
    assert code == 0
    vals = {k: float(v) for k, v in (line.split() for line in out.splitlines())}
    assert vals["images"] == 6
    assert abs(vals["defense_success"] - vals["grayscale_accuracy"]) <= 1 / 6 + 1e-9
    assert vals["restored_to_clean"] >= 5 / 6


def test_eval_empty_adv_dir(capsys, tmp_path, trained):
    d = trained["dir"]
    (tmp_path / "empty").mkdir()
    code, _, err = run(capsys, "eval", "--weights", d / "w.cwgt", "--data", d / "test.bin", "--adv-dir", tmp_path / "empty")
    assert code == 1 and err


def test_inspect(capsys, tmp_path, trained):
    save_flow(FlowField.zeros(3, 4), tmp_path / "z.cflw")
    code, out, _ = run(capsys, "inspect", "--flow", tmp_path / "z.cflw")
    assert code == 0 and "mean_magnitude 0\n" in out and "height 3" in out
    write_image(np.full((4, 4, 3), 0.5), tmp_path / "g.ppm")
    code, out, _ = run(capsys, "inspect", "--image", tmp_path / "g.ppm")
    assert code == 0 and "colorfulness 0\n" in out
    code, out, _ = run(capsys, "inspect", "--weights", trained["dir"] / "w.cwgt")
    assert code == 0 and "tensors 8" in out
    (tmp_path / "bad.cflw").write_bytes(b"XXXX" + bytes(8))
    code, _, err = run(capsys, "inspect", "--flow", tmp_path / "bad.cflw")
    assert code == 1 and "magic" in err


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "chromaflow", "inspect", "--flow", str(tmp_path / "missing")],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and proc.stdout == "" and "error" in proc.stderr
    proc = subprocess.run([sys.executable, "-m", "chromaflow", "train", "--nope"], capture_output=True, text=True)
    assert proc.returncode == 2
