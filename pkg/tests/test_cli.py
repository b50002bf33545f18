import json
import subprocess
import sys

import numpy as np
import pytest

from adaptexp import cli
from adaptexp.expquant import QuantParams, quantize_tensor
from adaptexp.netsim import FC, Argmax, EvalDataset, ModelGraph, ReLU, save_dataset, save_model
from adaptexp.tensor import Tensor
from adaptexp.tensorio import load_quantized, save_quantized, save_tensor

SUBCOMMANDS = ("analyze", "capture", "search", "quantize", "dot", "run", "report")


@pytest.fixture
def tiny(tmp_path):
    rng = np.random.default_rng(0)
    centers = rng.normal(size=(3, 6)) * 3
    labels = rng.integers(0, 3, 120)
    inputs = (centers[labels] + rng.normal(size=(120, 6)) * 0.3).astype(np.float32)
    w0 = np.linalg.lstsq(centers, np.eye(3), rcond=None)[0].T
    model = ModelGraph((6,), [
        FC("fc0", np.vstack([w0, -w0]).astype(np.float32), np.zeros(6, np.float32)), ReLU(),
        FC("fc1", (np.hstack([np.eye(3), -np.eye(3)]) + rng.normal(size=(3, 6)) * 0.05).astype(np.float32),
           np.zeros(3, np.float32)),
        Argmax()])
    save_model(model, tmp_path / "model.json")
    save_dataset(EvalDataset(inputs, labels, {"train": np.arange(80), "heldout": np.arange(80, 120)}, 3),
                 tmp_path / "data")
    return tmp_path


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _captured(capsys, tiny):
    code, _, _ = run(capsys, "capture", tiny / "tr", "--model", tiny / "model.json",
                     "--dataset", tiny / "data", "--samples", 8)
    assert code == 0
    return tiny / "tr"


def test_help_documents_every_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for flag in ("--seed", "--threads", "--output-dir", "--format"):
        assert flag in out
    for sub in SUBCOMMANDS:
        assert sub in out
    parser = cli.build_parser()
    subs = next(a for a in parser._actions if a.dest == "command").choices
    for name, sp in subs.items():
        for action in sp._actions:
            if action.option_strings and action.dest != "help":
                assert action.help, f"{name} {action.option_strings} lacks help"


def test_dot_identical_files(capsys, tmp_path, rng):
    p = QuantParams(1.3, 5, 0.2, 0.01)
    save_quantized(quantize_tensor(rng.normal(size=64), p), tmp_path / "a.exq")
    code, out, _ = run(capsys, "dot", tmp_path / "a.exq", tmp_path / "a.exq")
    doc = json.loads(out)
    assert code == 0
    assert doc["rel_diff"] < 1e-6
    assert doc["oracle"] > 0


def test_quantize_explicit_and_searched(capsys, tmp_path, rng):
    save_tensor(Tensor(rng.normal(size=(4, 8)) * 3), tmp_path / "t.npy")
    code, out, _ = run(capsys, "quantize", tmp_path / "t.npy", "--bits", 4, "-o", tmp_path / "s.exq")
    assert code == 0 and json.loads(out)["method"] == "search"
    assert load_quantized(tmp_path / "s.exq").shape == (4, 8)
    code, out, _ = run(capsys, "quantize", tmp_path / "t.npy", "--bits", 3, "--base", 2, "--scale", 1,
                       "--offset", 0, "-o", tmp_path / "e.exq")
    assert code == 0
    assert load_quantized(tmp_path / "e.exq").params == QuantParams(2.0, 3, 1.0, 0.0)
    code, _, err = run(capsys, "quantize", tmp_path / "t.npy", "--bits", 3, "--base", 2)
    assert code == 2 and json.loads(err)["error"] == "ConfigError"


def test_error_codes(capsys, tmp_path):
    np.save(tmp_path / "nan.npy", np.array([1.0, np.nan], np.float32))
    code, _, err = run(capsys, "quantize", tmp_path / "nan.npy", "--bits", 4)
    assert code == 3 and json.loads(err)["error"] == "NonFiniteValue"
    code, _, err = run(capsys, "analyze", tmp_path / "missing")
    assert code == 4 and json.loads(err)["error"] == "TraceIOError"
    code, _, err = run(capsys, "quantize", tmp_path / "nan.npy", "--bits", 9)
    assert code == 2


def test_unknown_config_key_rejected(capsys, tiny):
    tr = _captured(capsys, tiny)
    (tiny / "cfg.json").write_text(json.dumps({"thr_w_init": 0.01, "bogus": 1}))
    code, _, err = run(capsys, "--output-dir", tiny / "out", "search", tr, "--config", tiny / "cfg.json",
                       "--model", tiny / "model.json", "--dataset", tiny / "data")
    assert code == 2 and "bogus" in json.loads(err)["message"]
    assert not (tiny / "out").exists()


def test_unknown_flag_rejected(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["run", "--bogus"])
    assert exc.value.code == 2


def test_search_infeasible_thresholds_warns(capsys, tiny):
    tr = _captured(capsys, tiny)
    (tiny / "cfg.json").write_text(json.dumps({"thr_w_init": 1e-6, "thr_w_step": 1e-6, "thr_w_max": 2e-6}))
    code, out, err = run(capsys, "--output-dir", tiny / "out", "search", tr, "--config", tiny / "cfg.json",
                         "--model", tiny / "model.json", "--dataset", tiny / "data")
    assert code == 0
    assert "warning" in err
    report = json.loads((tiny / "out" / "report.json").read_text())
    assert all(l["threshold_unmet"] for l in report["per_layer"])
    assert all(l["bits"] == 7 for l in report["per_layer"])


def test_search_outputs_and_reproducibility(capsys, tiny):
    tr = _captured(capsys, tiny)
    args = ["search", tr, "--model", tiny / "model.json", "--dataset", tiny / "data"]
    assert run(capsys, "--output-dir", tiny / "o1", *args)[0] == 0
    assert run(capsys, "--output-dir", tiny / "o2", "--threads", 1, *args)[0] == 0
    r1 = (tiny / "o1" / "report.json").read_bytes()
    assert r1 == (tiny / "o2" / "report.json").read_bytes()
    report = json.loads(r1)
    for key in ("per_layer", "avg_bitwidth", "compression_ratio", "compression_ratio_with_sign",
                "baseline_acc", "quant_acc", "thr_w_final"):
        assert key in report
    for name in ("fc0", "fc1"):
        w = load_quantized(tiny / "o1" / "exq" / f"{name}.weights.exq")
        a = load_quantized(tiny / "o1" / "exq" / f"{name}.activations.exq")
        assert a.size == 0 and a.params.base == w.params.base
        layer = next(l for l in report["per_layer"] if l["name"] == name)
        assert w.params.bits == layer["bits"]
    # floats carry at most 9 significant digits
    text = r1.decode()
    for tok in text.replace(",", " ").split():
        if "." in tok and tok.strip('"').replace(".", "").replace("-", "").replace("e", "").isdigit():
            mant = tok.split("e")[0].replace("-", "").replace(".", "").lstrip("0")
            assert len(mant) <= 9


def test_report_and_sweep_csv(capsys, tiny):
    tr = _captured(capsys, tiny)
    assert run(capsys, "--output-dir", tiny / "o", "search", tr, "--model", tiny / "model.json",
               "--dataset", tiny / "data", "--sweep", "--sweep-max", 0.05)[0] == 0
    code, out, _ = run(capsys, "report", tiny / "o" / "report.json", "--sweep-csv", tiny / "sweep.csv")
    assert code == 0
    assert "average bitwidth" in out and "exponent" in out and "+sign" in out
    rows = (tiny / "sweep.csv").read_text().splitlines()
    assert rows[0] == "thr_w,avg_bitwidth,accuracy,accuracy_loss"
    assert len(rows) == 6
    code, out, _ = run(capsys, "--format", "csv", "report", tiny / "o" / "report.json")
    assert out.splitlines() == rows


def test_run_with_and_without_params(capsys, tiny):
    tr = _captured(capsys, tiny)
    code, out, _ = run(capsys, "run", "--model", tiny / "model.json", "--dataset", tiny / "data")
    doc = json.loads(out)
    assert code == 0 and doc["samples"] == 40 and "accuracy_quantized" not in doc
    run(capsys, "--output-dir", tiny / "o", "search", tr, "--model", tiny / "model.json", "--dataset", tiny / "data")
    code, out, _ = run(capsys, "run", "--model", tiny / "model.json", "--dataset", tiny / "data",
                       "--params", tiny / "o" / "report.json")
    doc = json.loads(out)
    assert doc["accuracy_loss"] == pytest.approx(doc["accuracy_f32"] - doc["accuracy_quantized"], abs=1e-8)


def test_analyze_json_and_csv(capsys, tiny):
    tr = _captured(capsys, tiny)
    code, out, _ = run(capsys, "analyze", tr)
    doc = json.loads(out)
    assert code == 0
    assert [l["layer"] for l in doc["layers"]] == ["fc0", "fc1"]
    for l in doc["layers"]:
        assert l["chosen_start"] in ("activations", "weights")
        assert set(l["tensors"]["weights"]["rss"]) == {"normal", "exponential", "pareto", "uniform"}
    assert run(capsys, "analyze", tr)[1] == out
    code, out, _ = run(capsys, "--format", "csv", "analyze", tr)
    assert out.splitlines()[0] == "layer,tensor,normal,exponential,pareto,uniform,best"
    assert len(out.splitlines()) == 5


def test_output_dir_from_environment(capsys, tiny, monkeypatch):
    tr = _captured(capsys, tiny)
    monkeypatch.setenv("ADAPTEXP_OUTPUT_DIR", str(tiny / "env"))
    assert run(capsys, "analyze", tr)[0] == 0
    assert (tiny / "env" / "analyze.json").exists()


def test_capture_seed_selects_subset(capsys, tiny):
    run(capsys, "--seed", 1, "capture", tiny / "a", "--model", tiny / "model.json", "--dataset", tiny / "data",
        "--samples", 4)
    run(capsys, "--seed", 2, "capture", tiny / "b", "--model", tiny / "model.json", "--dataset", tiny / "data",
        "--samples", 4)
    ma = json.loads((tiny / "a" / "manifest.json").read_text())
    mb = json.loads((tiny / "b" / "manifest.json").read_text())
    assert len(ma["samples"]) == 4 and ma["samples"] != mb["samples"]


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "adaptexp.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "analyze" in res.stdout


def test_analyze_bundled_exponential_share(capsys, tmp_path):
    assert run(capsys, "capture", tmp_path / "tr")[0] == 0
    code, out, _ = run(capsys, "analyze", tmp_path / "tr")
    doc = json.loads(out)
    assert code == 0
    # golden from the first run: 6 of 8 tensors, and 3 of 4 chosen start tensors
    assert doc["exponential_best_fraction"] == 0.75
    chosen = [l["tensors"][l["chosen_start"]]["best"] == "exponential" for l in doc["layers"]]
    assert sum(chosen) == 3
    assert doc["exponential_best_fraction"] >= 0.8
