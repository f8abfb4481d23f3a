import json
import shutil
import subprocess
import sys

import pytest

from intquant.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, EXIT_VERIFY, main


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["make-dataset", "--kind", "spiral", "--samples", "900", "--seed", "3", "--output", str(d / "s.iqds")]) == 0
    rc = main(
        [
            "train", "--dataset", str(d / "s.iqds"), "--output", str(d / "m.iqf"),
            "--hidden", "24,24", "--steps", "900", "--quant-delay", "300", "--eval-interval", "300", "--seed", "3",
        ]
    )
    assert rc == 0
    assert main(["quantize", "--model", str(d / "m.iqf"), "--output", str(d / "m.iqm")]) == 0
    return d


def test_train_outputs(pipeline):
    d = pipeline
    for name in ("m.iqf", "m.iqf.ranges.json", "m.iqf.log.tsv", "m.iqf.manifest.json"):
        assert (d / name).is_file()
    log = (d / "m.iqf.log.tsv").read_text().splitlines()
    assert log[0] == "step\tloss\ttrain_acc\teval_acc"
    assert "# step 0: activation quantization disabled" in log
    assert "# step 300: activation quantization enabled" in log
    ranges = json.loads((d / "m.iqf.ranges.json").read_text())
    assert ranges["version"] == 1 and "input" in ranges["ranges"]


def test_manifest(pipeline):
    m = json.loads((pipeline / "m.iqf.manifest.json").read_text())
    assert m["command"] == "train"
    assert m["seed"] == 3
    assert m["flags"]["quant_delay"] == 300
    assert "time" not in json.dumps(m).lower()


def test_quantize_table(pipeline, capsys):
    assert main(["quantize", "--model", str(pipeline / "m.iqf"), "--output", str(pipeline / "m2.iqm")]) == 0
    rows = capsys.readouterr().out.splitlines()
    assert rows[0] == "op\tkind\trole\tS\tZ\tM\tM0\tn"
    for r in rows[1:]:
        f = r.split("\t")
        assert 0 < float(f[5]) < 1
        assert (1 << 30) <= int(f[6]) < (1 << 31)
    assert (pipeline / "m2.iqm").read_bytes() == (pipeline / "m.iqm").read_bytes()


def test_infer(pipeline, capsys):
    out = pipeline / "pred.tsv"
    assert main(["infer", "--model", str(pipeline / "m.iqm"), "--dataset", str(pipeline / "s.iqds"), "--output", str(out), "--threads", "2"]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "index\tprediction\tlabel" and len(lines) == 901
    acc = float(capsys.readouterr().out.split("\t")[1])
    assert acc >= 0.9


def test_verify(pipeline, capsys):
    args = ["verify", "--float-model", str(pipeline / "m.iqf"), "--model", str(pipeline / "m.iqm"), "--dataset", str(pipeline / "s.iqds")]
    assert main(args) == EXIT_OK
    report = capsys.readouterr().out
    assert "layer\tkind\tmax_code_divergence" in report
    assert main(args + ["--max-divergence", "-1"]) == EXIT_VERIFY


def test_verify_rejects_unrelated_model(pipeline, tmp_path, capsys):
    shutil.copy(pipeline / "m.iqf", tmp_path / "f.iqf")
    ranges = json.loads((pipeline / "m.iqf.ranges.json").read_text())
    ranges["ranges"]["input"] = [-9.0, 9.0]
    (tmp_path / "f.iqf.ranges.json").write_text(json.dumps(ranges))
    rc = main(["verify", "--float-model", str(tmp_path / "f.iqf"), "--model", str(pipeline / "m.iqm"), "--dataset", str(pipeline / "s.iqds")])
    assert rc == EXIT_DATA
    assert "not converted from this float model" in capsys.readouterr().err


def test_missing_file_is_data_error(tmp_path, capsys):
    assert main(["infer", "--model", str(tmp_path / "nope.iqm"), "--dataset", str(tmp_path / "x")]) == EXIT_DATA
    assert "not found" in capsys.readouterr().err


def test_corrupt_model_is_data_error(tmp_path, pipeline):
    (tmp_path / "bad.iqm").write_bytes(b"IQM1\x01")
    assert main(["infer", "--model", str(tmp_path / "bad.iqm"), "--dataset", str(pipeline / "s.iqds")]) == EXIT_DATA


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--bogus"],
        ["make-dataset"],
        ["nosuch"],
        ["train", "--dataset", "x", "--output", "y", "--quant-delay", "soon"],
    ],
)
def test_usage_errors(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == EXIT_USAGE


def test_abbreviated_flags_rejected():
    with pytest.raises(SystemExit) as exc:
        main(["make-dataset", "--out", "x"])
    assert exc.value.code == EXIT_USAGE


def test_bad_bit_depth_is_usage_error(pipeline, tmp_path):
    rc = main(["train", "--dataset", str(pipeline / "s.iqds"), "--output", str(tmp_path / "m.iqf"), "--bits-weights", "9"])
    assert rc == EXIT_USAGE


def test_float_training_marker(pipeline, tmp_path):
    out = tmp_path / "f.iqf"
    rc = main(["train", "--dataset", str(pipeline / "s.iqds"), "--output", str(out), "--steps", "20", "--quant-delay", "none"])
    assert rc == 0
    assert "# step 0: float training, fake quantization disabled" in (tmp_path / "f.iqf.log.tsv").read_text()


def test_cnn_needs_images(pipeline, tmp_path):
    rc = main(["train", "--dataset", str(pipeline / "s.iqds"), "--output", str(tmp_path / "m.iqf"), "--arch", "cnn"])
    assert rc == EXIT_USAGE


def test_bench_command(tmp_path):
    out = tmp_path / "b.tsv"
    assert main(["bench", "--sizes", "8,16", "--reps", "2", "--warmup", "0", "--output", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 3 and lines[1].startswith("8\t")


def test_selftest(capsys):
    assert main(["selftest"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(line.startswith("PASS\t") for line in lines)


def test_console_script():
    exe = shutil.which("intquant")
    cmd = [exe] if exe else [sys.executable, "-m", "intquant.cli"]
    res = subprocess.run(cmd + ["--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "0.1.0" in res.stdout
