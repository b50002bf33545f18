"""Command-line interface.

Subcommands: analyze, capture, search, quantize, dot, run, report.  Reports
are JSON by default (floats with 9 significant digits); ``--format csv``
switches analyze and report to CSV.  Errors are printed to stderr as a JSON
object and mapped to nonzero exit codes per error class.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import distfit, expdot, netsim, search, tensorio
from ._validation import check_bits
from .errors import AdaptExpError, ConfigError
from .expquant import QuantParams, quantization_error, quantize_tensor

log = logging.getLogger("adaptexp")

OUTPUT_ENV = "ADAPTEXP_OUTPUT_DIR"
SIG_DIGITS = 9


def _round_floats(obj):
    if isinstance(obj, float):
        return float(f"{obj:.{SIG_DIGITS}g}")
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    if isinstance(obj, np.floating):
        return _round_floats(float(obj))
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_round_floats(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    log.info("wrote %s", path)


def _emit(args, name: str, doc: dict, csv_text: str | None = None) -> None:
    text = csv_text if args.format == "csv" and csv_text is not None else dumps(doc)
    sys.stdout.write(text)
    if args.output_dir is not None:
        ext = "csv" if args.format == "csv" and csv_text is not None else "json"
        _write(Path(args.output_dir) / f"{name}.{ext}", text)


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{v:.{SIG_DIGITS}g}" if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def _load_config(path) -> search.SearchConfig:
    if path is None:
        return search.SearchConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return search.SearchConfig.from_dict(doc)


def _model_and_data(args):
    model = netsim.load_model(args.model) if args.model else netsim.load_model(netsim.bundled_model_path())
    data = netsim.load_dataset(args.dataset) if args.dataset else netsim.load_dataset(netsim.bundled_dataset_path())
    return model, data


def calibration_inputs(data: netsim.EvalDataset, samples: int, seed: int, pool: str = "train"):
    """Random subset of the pool split, drawn from ``seed`` and kept in index order."""
    if pool not in data.splits:
        raise ConfigError(f"dataset has no {pool!r} split")
    idx = data.splits[pool]
    if samples < 1:
        raise ConfigError("--samples must be positive")
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(idx, size=min(samples, idx.size), replace=False))
    return data.inputs[pick], pick


# ---------------------------------------------------------------- commands

def cmd_analyze(args) -> int:
    traces = tensorio.load_traces(args.trace_dir)
    rows, layers = [], []
    n_exp_best = n_tensors = 0
    for tr in traces:
        entry = {"layer": tr.name, "tensors": {}}
        rss = {}
        for tag, arr in (("activations", tr.pooled_activations()), ("weights", tr.weights.flat)):
            fit = distfit.fit_histogram(arr, args.bins)
            dist_rss = {d: fit.rss(d) for d in distfit.DISTRIBUTIONS}
            entry["tensors"][tag] = {"rss": dist_rss, "best": fit.best}
            rss[tag] = dist_rss["exponential"]
            n_tensors += 1
            n_exp_best += fit.best == "exponential"
            rows.append([tr.name, tag] + [dist_rss[d] for d in distfit.DISTRIBUTIONS] + [fit.best])
        entry["chosen_start"] = distfit.choose_start(rss["activations"], rss["weights"]).value
        layers.append(entry)
    doc = {"layers": layers, "bins": args.bins,
           "exponential_best_fraction": n_exp_best / n_tensors}
    _emit(args, "analyze", doc,
          _csv(rows, ["layer", "tensor", *distfit.DISTRIBUTIONS, "best"]))
    return 0


def cmd_capture(args) -> int:
    model, data = _model_and_data(args)
    inputs, pick = calibration_inputs(data, args.samples, args.seed)
    manifest = netsim.capture_traces(model, inputs, args.trace_dir, [f"{i:04d}" for i in pick])
    sys.stdout.write(dumps({"trace_dir": str(args.trace_dir), "layers": len(manifest["layers"]),
                            "samples": manifest["samples"]}))
    return 0


def _write_exq(report: search.NetworkQuantReport, model: netsim.ModelGraph, out: Path) -> None:
    layers = {l.name: l for l in model.quantizable}
    for r in report.per_layer:
        if r.name in layers:
            w = quantize_tensor(layers[r.name].weight, r.w_params)
            tensorio.save_quantized(w, out / f"{r.name}.weights.exq")
        tensorio.save_quantized(tensorio.params_only(r.act_params), out / f"{r.name}.activations.exq")


def cmd_search(args) -> int:
    cfg = _load_config(args.config)
    traces = tensorio.load_traces(args.trace_dir)
    model, data = _model_and_data(args)
    if args.split not in data.splits:
        raise ConfigError(f"dataset has no {args.split!r} split")
    x, y = data.split(args.split)
    evaluator = netsim.make_evaluator(model, x, y)
    report = search.search_network(traces, evaluator, cfg, n_jobs=args.threads)
    doc = report.to_dict()
    doc["eval_split"] = args.split
    if args.sweep:
        thresholds = [round(k * cfg.thr_w_step, 10) for k in range(1, int(round(args.sweep_max / cfg.thr_w_step)) + 1)]
        sweep = search.threshold_sweep(traces, evaluator, thresholds, cfg,
                                       baseline_acc=report.baseline_acc, n_jobs=args.threads)
        doc["sweep"] = [p.to_dict() for p in sweep]
    out = Path(args.output_dir if args.output_dir is not None else tensorio.default_output_dir())
    _write(out / "report.json", dumps(doc))
    _write_exq(report, model, out / "exq")
    unmet = [r.name for r in report.per_layer if r.threshold_unmet]
    if unmet:
        print(f"warning: thresholds unmet at 7 bits for layers {unmet}", file=sys.stderr)
    if not report.feasible:
        print("warning: no threshold met the accuracy-loss bound", file=sys.stderr)
    sys.stdout.write(dumps({"report": str(out / "report.json"), "avg_bitwidth": report.avg_bitwidth,
                            "compression_ratio": report.compression_ratio,
                            "accuracy_loss": report.accuracy_loss, "feasible": report.feasible}))
    return 0


def cmd_quantize(args) -> int:
    check_bits(args.bits)
    t = tensorio.load_tensor(args.tensor)
    explicit = [args.base, args.scale, args.offset]
    if any(v is not None for v in explicit):
        if any(v is None for v in explicit):
            raise ConfigError("--base, --scale and --offset must be given together")
        params = QuantParams(args.base, args.bits, args.scale, args.offset)
        method = "explicit"
    else:
        params = search.search_optimal_base(t, args.bits).params
        method = "search"
    qt = quantize_tensor(t, params)
    out = Path(args.output) if args.output else Path(args.tensor).with_suffix(".exq")
    tensorio.save_quantized(qt, out)
    err = quantization_error(t, params) if np.any(t.data) else 0.0
    sys.stdout.write(dumps({"output": str(out), "params": params.to_dict(), "method": method,
                            "rmae": err, "payload_bytes": tensorio.payload_nbytes(qt.size, params.bits)}))
    return 0


def cmd_dot(args) -> int:
    a = tensorio.load_quantized(args.a)
    w = tensorio.load_quantized(args.w)
    counted, cs = expdot.counting_dot(a, w, audit=True)
    oracle = expdot.oracle_dot(a, w)
    rel = abs(counted - oracle) / (1.0 + abs(oracle))
    sys.stdout.write(dumps({"counting": float(counted), "oracle": float(oracle), "rel_diff": rel,
                            "max_abs_counter": max(cs.peak, cs.max_abs()), "fits_int8": cs.fits_int8()}))
    return 0


def cmd_run(args) -> int:
    model, data = _model_and_data(args)
    if args.split not in data.splits:
        raise ConfigError(f"dataset has no {args.split!r} split")
    x, y = data.split(args.split)
    doc = {"split": args.split, "samples": int(len(y)),
           "accuracy_f32": netsim.evaluate_accuracy(model, x, y)}
    if args.params:
        report = search.NetworkQuantReport.from_dict(json.loads(Path(args.params).read_text()))
        acc = netsim.evaluate_accuracy(model, x, y, report.as_mapping())
        doc.update(accuracy_quantized=acc, accuracy_loss=doc["accuracy_f32"] - acc)
    _emit(args, "run", doc)
    return 0


def cmd_report(args) -> int:
    raw = json.loads(Path(args.report).read_text())
    report = search.NetworkQuantReport.from_dict(raw)
    lines = [f"{'layer':<12}{'bits':>5}{'base':>12}{'rmae_act':>11}{'rmae_w':>11}  start        unmet"]
    for r in report.per_layer:
        lines.append(f"{r.name:<12}{r.bits:>5}{r.base:>12.6f}{r.rmae_act:>11.5f}{r.rmae_w:>11.5f}  "
                     f"{r.start.value:<12} {'yes' if r.threshold_unmet else 'no'}")
    lines += [
        f"average bitwidth:               {report.avg_bitwidth:.4f}",
        f"compression vs INT8 (exponent): {100 * report.compression_ratio:.2f}%",
        f"compression vs INT8 (+sign):    {100 * report.compression_ratio_with_sign:.2f}%",
        f"baseline / quantized accuracy:  {report.baseline_acc:.4f} / {report.quant_acc:.4f}",
        f"final weight threshold:         {report.thr_w_final}",
    ]
    points = raw.get("sweep") or raw.get("history", [])
    sweep_csv = _csv([[p["thr_w"], p["avg_bitwidth"], p["accuracy"], p["accuracy_loss"]] for p in points],
                     ["thr_w", "avg_bitwidth", "accuracy", "accuracy_loss"])
    if args.sweep_csv:
        _write(Path(args.sweep_csv), sweep_csv)
    sys.stdout.write(sweep_csv if args.format == "csv" else "\n".join(lines) + "\n")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaptexp", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0, help="seed for calibration-subset sampling (default 0)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker threads for per-layer searches (default: available cores)")
    p.add_argument("--output-dir", default=os.environ.get(OUTPUT_ENV),
                   help=f"directory for written reports (default: ${OUTPUT_ENV}, else stdout only; "
                        "search falls back to the current directory)")
    p.add_argument("--format", choices=("json", "csv"), default="json",
                   help="report format for analyze/report (default json)")
    p.add_argument("-v", "--verbose", action="store_true", help="log written files to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="RSS of candidate distributions per layer and start-tensor choice")
    a.add_argument("trace_dir")
    a.add_argument("--bins", type=int, default=distfit.DEFAULT_BINS, help="histogram bins (default 100)")
    a.set_defaults(func=cmd_analyze)

    def model_args(sp):
        sp.add_argument("--model", help="model.json (default: bundled model)")
        sp.add_argument("--dataset", help="dataset directory (default: bundled dataset)")

    c = sub.add_parser("capture", help="write calibration traces for every FC/CONV layer")
    c.add_argument("trace_dir")
    model_args(c)
    c.add_argument("--samples", type=int, default=16, help="calibration samples (default 16)")
    c.set_defaults(func=cmd_capture)

    s = sub.add_parser("search", help="network-level parameter search; writes report.json and .exq files")
    s.add_argument("trace_dir")
    s.add_argument("--config", help="SearchConfig JSON (unknown keys rejected)")
    model_args(s)
    s.add_argument("--split", default="heldout", help="evaluation split (default heldout)")
    s.add_argument("--sweep", action="store_true", help="also record a full threshold sweep")
    s.add_argument("--sweep-max", type=float, default=0.30, help="upper weight threshold of the sweep (default 0.30)")
    s.set_defaults(func=cmd_search)

    q = sub.add_parser("quantize", help="quantize an NPY tensor into an .exq file")
    q.add_argument("tensor")
    q.add_argument("--bits", type=int, required=True, help="exponent bitwidth in [3, 7]")
    q.add_argument("--base", type=float, help="explicit base (otherwise searched)")
    q.add_argument("--scale", type=float, help="explicit scale")
    q.add_argument("--offset", type=float, help="explicit offset")
    q.add_argument("-o", "--output", help="output path (default: alongside input)")
    q.set_defaults(func=cmd_quantize)

    d = sub.add_parser("dot", help="counting dot product vs brute-force oracle of two .exq vectors")
    d.add_argument("a")
    d.add_argument("w")
    d.set_defaults(func=cmd_dot)

    r = sub.add_parser("run", help="accuracy with and without quantization")
    model_args(r)
    r.add_argument("--params", help="report.json with per-layer parameters")
    r.add_argument("--split", default="heldout", help="evaluation split (default heldout)")
    r.set_defaults(func=cmd_run)

    rp = sub.add_parser("report", help="human summary of report.json plus threshold-sweep CSV")
    rp.add_argument("report")
    rp.add_argument("--sweep-csv", help="write thr_w/avg_bitwidth/accuracy/accuracy_loss CSV here")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be positive")
    try:
        return args.func(args)
    except AdaptExpError as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return exc.exit_code
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
