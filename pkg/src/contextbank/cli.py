"""Command-line interface.

::

    contextbank synth gen    --seed 11 --out world.trace [--config c.toml]
    contextbank bank build   --trace world.trace --out banks/ [--strategy top_k:1]
    contextbank bank info    --bank banks/cam00.bank
    contextbank train        --trace world.trace --banks banks/ --mode st+lt --seed 0 --out m.ctxm
    contextbank eval         --model m.ctxm --trace world.trace --banks banks/ [--mode ...] [--horizon 1w]
    contextbank report attend --model m.ctxm --trace world.trace --banks banks/ --out-dir out/
    contextbank report fp    --model m.ctxm --trace world.trace --banks banks/ --out-dir out/
    contextbank bench        --out-dir out/

Exit status: 0 success, 1 usage error, 2 bad data or file format.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .bench import (BASELINE_KIND, HORIZONS, horizon_label, lag_mass, parse_horizon, run_benchmark,
                    timeline_histogram)
from .config import RunConfig, dataclass_from_mapping, load_config, shipped_config_path, tomllib
from .evalkit import EvalInputError, evaluate, format_detections, fp_histogram, histogram_csv
from .membank import BankFormatError, BankInputError, CurationStrategy, read_bank, write_bank
from .numkit import NumericError
from .plots import attention_timeline_plot, fp_histogram_plot, score_bar_plot
from .synthcam.extractor import ExtractorConfig, SurrogateExtractor
from .synthcam.model import DETECTOR_MODES, DetectorModel, ModelFormatError, read_model, write_model
from .synthcam.pipeline import (CameraData, TrainingError, build_camera_bank, prepare_camera, run_baseline,
                                run_detector, timeline_differentials, train)
from .synthcam.world import ConfigError, TraceFormatError, generate_trace, read_traces, write_traces
from .attention import AttentionConfigError

BANK_MANIFEST = "banks.json"
BANK_MANIFEST_FORMAT = "contextbank-banks 1"
EVAL_MODES = ("single", "majvote", "stspatial", "sf", "st", "lt", "st+lt")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Raises instead of exiting so ``main`` controls the exit status."""

    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    pass


# -- argument types ----------------------------------------------------------------

def _strategy(text: str) -> str:
    try:
        return str(CurationStrategy.parse(text))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _horizon(text: str) -> str:
    try:
        parse_horizon(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return text


def _override(text: str):
    key, sep, value = text.partition("=")
    table, dot, name = key.partition(".")
    if not sep or not dot or not table or not name:
        raise argparse.ArgumentTypeError(f"expected TABLE.KEY=VALUE, got {text!r}")
    try:
        parsed = tomllib.loads(f"v = {value}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value
    return table, name, parsed


# -- shared loading ------------------------------------------------------------------

def _config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    overrides = getattr(args, "set", None) or []
    if overrides:
        doc = {}
        for table, name, value in overrides:
            doc.setdefault(table, {})[name] = value
        merged = {}
        for table in ("trace", "extractor", "bank", "pretrain", "train", "model", "bench"):
            merged[table] = {**dataclasses.asdict(getattr(cfg, table)), **doc.pop(table, {})}
        if doc:
            raise ConfigError(f"unknown config tables in --set: {', '.join(sorted(doc))}")
        cfg = RunConfig.from_mapping(merged)
    return cfg


def _read_manifest(banks_dir: Path) -> dict:
    path = banks_dir / BANK_MANIFEST
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"{path}: no bank manifest (run 'bank build' first)") from None
    except ValueError as exc:
        raise DataError(f"{path}: malformed manifest: {exc}") from None
    if doc.get("format") != BANK_MANIFEST_FORMAT:
        raise DataError(f"{path}: unsupported manifest format {doc.get('format')!r}")
    return doc


def _load_cameras(trace_path, banks_dir, split: str, need_banks: bool):
    """Cameras of ``split`` with features and (when present) their banks."""
    cfg, traces = read_traces(trace_path)
    banks_dir = Path(banks_dir)
    manifest = _read_manifest(banks_dir)
    extractor = SurrogateExtractor(dataclass_from_mapping(ExtractorConfig, manifest["extractor"], "extractor"))
    cams = []
    for t in traces:
        if split != "all" and t.split != split:
            continue
        path = banks_dir / f"{t.camera_id}.bank"
        bank = None
        if path.exists():
            bank = read_bank(path)
            if bank.camera_id != t.camera_id:
                raise DataError(f"{path}: bank belongs to camera {bank.camera_id!r}, not {t.camera_id!r}")
        elif need_banks:
            raise DataError(f"{path}: missing bank for camera {t.camera_id}")
        cams.append(prepare_camera(t, extractor, bank))
    if not cams:
        raise DataError(f"{trace_path}: no cameras in split {split!r}")
    return cfg, extractor, cams


def _write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


# -- subcommands ---------------------------------------------------------------------

def cmd_synth_gen(args) -> int:
    cfg = _config(args)
    trace_cfg = dataclasses.replace(cfg.trace, seed=args.seed)
    traces = generate_trace(trace_cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_traces(args.out, trace_cfg, traces)
    frames = sum(len(t.frames) for t in traces)
    print(f"wrote {args.out}: {len(traces)} cameras, {frames} frames")
    return 0


def cmd_bank_build(args) -> int:
    cfg = _config(args)
    trace_cfg, traces = read_traces(args.trace)
    ext_cfg = dataclasses.replace(cfg.extractor, seed=args.extractor_seed, n_classes=trace_cfg.n_classes)
    extractor = SurrogateExtractor(ext_cfg)
    strategy = CurationStrategy.parse(args.strategy)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t in traces:
        bank = build_camera_bank(t, extractor, strategy, args.capacity, positive_oracle=args.positive_oracle)
        write_bank(bank, out / f"{t.camera_id}.bank")
        print(f"{t.camera_id} {t.split} {len(bank)} entries")
    manifest = {"format": BANK_MANIFEST_FORMAT, "extractor": dataclasses.asdict(ext_cfg),
                "strategy": str(strategy), "capacity": args.capacity, "positive_oracle": args.positive_oracle,
                "cameras": [t.camera_id for t in traces]}
    _write_text(out / BANK_MANIFEST, json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return 0


def cmd_bank_info(args) -> int:
    bank = read_bank(args.bank)
    print(f"camera {bank.camera_id}")
    print(f"strategy {bank.strategy}")
    print(f"entries {len(bank)}")
    print(f"capacity {bank.capacity}")
    print(f"d_feat {bank.d_feat}")
    if len(bank):
        print(f"time_s {bank.time_s[0]!r} .. {bank.time_s[-1]!r}")
    return 0


def _run_training(cfg: RunConfig, cams: Sequence[CameraData], mode: str, horizon_s: float, seed: int,
                  d_feat: int, n_classes: int, log_fn=None) -> DetectorModel:
    pre = dataclasses.replace(cfg.pretrain, seed=seed)
    fine = dataclasses.replace(cfg.train, seed=seed + 1)
    base = DetectorModel.init("single", d_feat, n_classes, np.random.default_rng([pre.seed, 1]))
    base, losses = train(base, cams, pre)
    if log_fn:
        log_fn(f"single-frame pretraining: {len(losses)} steps, final loss {losses[-1]:.4f}" if losses
               else "single-frame pretraining skipped")
    model = DetectorModel.init(mode, d_feat, n_classes, np.random.default_rng([fine.seed, 2]),
                               temperature=cfg.model.temperature, attention_init=cfg.model.attention_init,
                               classifier=base.classifier, horizon_s=horizon_s, window=cfg.model.window,
                               causal=cfg.model.causal)
    model, losses = train(model, cams, fine)
    if log_fn:
        log_fn(f"{mode} training: {len(losses)} steps, final loss {losses[-1]:.4f}" if losses
               else f"{mode} training skipped")
    return model


def cmd_train(args) -> int:
    cfg = _config(args)
    need_long = args.mode in ("lt", "st+lt")
    trace_cfg, extractor, cams = _load_cameras(args.trace, args.banks, "train", need_long)
    model = _run_training(cfg, cams, args.mode, parse_horizon(args.horizon), args.seed,
                          extractor.config.d_feat, trace_cfg.n_classes, log_fn=print)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_model(model, args.out)
    print(f"wrote {args.out}")
    return 0


def _detections_for(model: DetectorModel, mode: str, cams, extractor, window: int):
    if mode in BASELINE_KIND:
        if model.mode != "single":
            raise DataError(f"--mode {mode} needs a single-frame model, got a {model.mode!r} model")
        return run_baseline(BASELINE_KIND[mode], model, cams, extractor, window=window)
    if mode != model.mode:
        raise DataError(f"--mode {mode} does not match the model's mode {model.mode!r}")
    return run_detector(model, cams)


def cmd_eval(args) -> int:
    model = read_model(args.model)
    mode = args.mode or model.mode
    if args.horizon is not None:
        model = dataclasses.replace(model, horizon_s=parse_horizon(args.horizon))
    trace_cfg, extractor, cams = _load_cameras(args.trace, args.banks, args.split, model.long_enabled)
    dets, gts = _detections_for(model, mode, cams, extractor, model.window)
    classes = range(trace_cfg.n_classes)
    report = evaluate(dets, gts, classes=classes, coco=args.coco)
    edges = np.linspace(0.0, 1.0, args.bins + 1)
    report.fp_bins = [float(e) for e in edges]
    report.fp_histogram = [int(c) for c in fp_histogram(dets, gts, edges)]
    report.config = {"mode": mode, "horizon_s": model.horizon_s, "horizon": horizon_label(model.horizon_s),
                     "split": args.split, "model": Path(args.model).name, "window": model.window}
    if args.out:
        _write_text(args.out, report.to_json())
    if args.detections:
        _write_text(args.detections, format_detections(dets))
    print(f"mode {mode} horizon {horizon_label(model.horizon_s)}: mAP@0.5 {report.map50:.4f}  AR@1 {report.ar1:.4f}  "
          f"({report.n_detections} detections, {report.n_ground_truth} ground-truth boxes)")
    return 0


def cmd_report_attend(args) -> int:
    model = read_model(args.model)
    if not model.long_enabled:
        raise DataError(f"attention timelines need a model with a long-term stage, got {model.mode!r}")
    if args.horizon is not None:
        model = dataclasses.replace(model, horizon_s=parse_horizon(args.horizon))
    _, _, cams = _load_cameras(args.trace, args.banks, args.split, True)
    offsets = timeline_differentials(model, cams, args.threshold)
    edges, counts = timeline_histogram(offsets, args.bin_hours, args.span_hours)
    out = Path(args.out_dir)
    csv_path = _write_text(out / "attention_timeline.csv", histogram_csv(edges, counts))
    attention_timeline_plot(edges, counts, out / "attention_timeline.png",
                            title=f"attention above {args.threshold:g} vs time offset")
    print(f"wrote {csv_path} ({len(offsets)} attended entries; "
          f"~24h: {lag_mass(offsets, 24.0)}, ~12h: {lag_mass(offsets, 12.0)})")
    return 0


def cmd_report_fp(args) -> int:
    edges = np.linspace(0.0, 1.0, args.bins + 1)
    series = {}
    runs = [(args.label, args.model, args.banks)]
    if args.compare_model or args.compare_banks:
        runs.append((args.compare_label, args.compare_model or args.model, args.compare_banks or args.banks))
    for label, model_path, banks in runs:
        model = read_model(model_path)
        _, extractor, cams = _load_cameras(args.trace, banks, args.split, model.long_enabled)
        dets, gts = _detections_for(model, model.mode, cams, extractor, model.window)
        if args.empty_only:
            empty = {int(f.frame_id) for c in cams for f in c.frames if f.is_empty}
            dets = [d for d in dets if d.frame_id in empty]
            gts = [g for g in gts if g.frame_id in empty]
        series[label] = fp_histogram(dets, gts, edges)
    if len(series) != len(runs):
        raise UsageError("report fp: the two runs need different --label and --compare-label")
    out = Path(args.out_dir)
    import csv
    import io
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_lo", "bin_hi"] + [f"fp_{k}" for k in series])
    for i in range(len(edges) - 1):
        w.writerow([f"{edges[i]:.6g}", f"{edges[i + 1]:.6g}"] + [int(v[i]) for v in series.values()])
    csv_path = _write_text(out / "fp_histogram.csv", buf.getvalue())
    fp_histogram_plot(edges, series, out / "fp_histogram.png",
                      title="false positives on empty frames" if args.empty_only else "false positives")
    print(f"wrote {csv_path}: " + ", ".join(f"{k} {int(np.sum(v))} false positives" for k, v in series.items()))
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args)
    result = run_benchmark(cfg, progress=lambda msg: print(msg, flush=True))
    out = Path(args.out_dir)
    csv_path = _write_text(out / "bench.csv", result.to_csv())
    modes = result.mode_ladder()
    score_bar_plot([m for m, _ in modes], [v for _, v in modes], out / "bench_modes.png", title="modes and baselines")
    hz = result.horizon_ladder()
    score_bar_plot([f"LT {h}" for h, _ in hz], [v for _, v in hz], out / "bench_horizons.png",
                   title="long-term horizon")
    print(f"wrote {csv_path}")
    return 0


# -- parser ------------------------------------------------------------------------------

def _add_config(p, with_overrides: bool = True):
    p.add_argument("--config", default=None, help="TOML config file (defaults apply when omitted)")
    if with_overrides:
        p.add_argument("--set", action="append", type=_override, default=[], metavar="TABLE.KEY=VALUE",
                       help="override one config value, e.g. trace.n_cameras=4 (repeatable)")


def _add_data(p, banks_required: bool = True):
    p.add_argument("--trace", required=True, help="trace file from 'synth gen'")
    p.add_argument("--banks", required=banks_required, help="bank directory from 'bank build'")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="contextbank", description="Memory-bank attention for per-camera detection.",
                     formatter_class=_Formatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    synth = sub.add_parser("synth", help="synthetic world traces", formatter_class=_Formatter)
    synth_sub = synth.add_subparsers(dest="action", metavar="ACTION", parser_class=_Parser)
    gen = synth_sub.add_parser("gen", help="generate a trace file", formatter_class=_Formatter)
    _add_config(gen)
    gen.add_argument("--seed", type=int, required=True, help="world seed (overrides trace.seed)")
    gen.add_argument("--out", required=True, help="output trace file")
    gen.set_defaults(func=cmd_synth_gen)

    bank = sub.add_parser("bank", help="long-term memory banks", formatter_class=_Formatter)
    bank_sub = bank.add_subparsers(dest="action", metavar="ACTION", parser_class=_Parser)
    build = bank_sub.add_parser("build", help="one bank file per camera", formatter_class=_Formatter)
    _add_config(build)
    build.add_argument("--trace", required=True, help="trace file from 'synth gen'")
    build.add_argument("--strategy", type=_strategy, default="top_k:1",
                       help="curation: top_k:K, positive_only:THR, stride:S[:BASE] or all")
    build.add_argument("--extractor-seed", type=int, default=0, help="seed of the frozen surrogate extractor")
    build.add_argument("--capacity", type=int, default=8500, help="maximum entries per camera (oldest evicted)")
    build.add_argument("--positive-oracle", action="store_true",
                       help="keep only frames whose ground truth holds an object")
    build.add_argument("--out", required=True, help="output directory")
    build.set_defaults(func=cmd_bank_build)
    info = bank_sub.add_parser("info", help="summary of one bank file", formatter_class=_Formatter)
    info.add_argument("--bank", required=True, help="bank file")
    info.set_defaults(func=cmd_bank_info)

    tr = sub.add_parser("train", help="train a detector head", formatter_class=_Formatter)
    _add_config(tr)
    _add_data(tr, banks_required=True)
    tr.add_argument("--mode", choices=DETECTOR_MODES, default="st+lt", help="which memories the head attends to")
    tr.add_argument("--horizon", type=_horizon, default="1month",
                    help=f"long-term horizon: {', '.join(HORIZONS)} or seconds")
    tr.add_argument("--seed", type=int, required=True, help="training seed")
    tr.add_argument("--out", required=True, help="output model file")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="mAP@0.5 / AR@1 report", formatter_class=_Formatter)
    ev.add_argument("--model", required=True, help="model file from 'train'")
    _add_data(ev)
    ev.add_argument("--mode", choices=EVAL_MODES, default=None,
                    help="detector or baseline (default: the model's own mode)")
    ev.add_argument("--horizon", type=_horizon, default=None, help="override the model's long-term horizon")
    ev.add_argument("--split", choices=("test", "train", "all"), default="test", help="cameras to evaluate")
    ev.add_argument("--bins", type=int, default=10, help="confidence bins of the false-positive histogram")
    ev.add_argument("--coco", action="store_true", help="also report mAP averaged over IoU 0.50:0.95")
    ev.add_argument("--out", default=None, help="write the JSON report here")
    ev.add_argument("--detections", default=None, help="write detections in the line format here")
    ev.set_defaults(func=cmd_eval)

    rep = sub.add_parser("report", help="figure data (CSV) and PNG renderings", formatter_class=_Formatter)
    rep_sub = rep.add_subparsers(dest="action", metavar="ACTION", parser_class=_Parser)
    att = rep_sub.add_parser("attend", help="histogram of attended time offsets", formatter_class=_Formatter)
    att.add_argument("--model", required=True, help="model with a long-term stage")
    _add_data(att)
    att.add_argument("--horizon", type=_horizon, default=None, help="override the model's long-term horizon")
    att.add_argument("--split", choices=("test", "train", "all"), default="test", help="cameras to use")
    att.add_argument("--threshold", type=float, default=0.01, help="minimum attention weight counted")
    att.add_argument("--bin-hours", type=float, default=1.0, help="histogram bin width in hours")
    att.add_argument("--span-hours", type=float, default=72.0, help="histogram covers +- this many hours")
    att.add_argument("--out-dir", required=True, help="output directory")
    att.set_defaults(func=cmd_report_attend)
    fp = rep_sub.add_parser("fp", help="false positives per confidence bin", formatter_class=_Formatter)
    fp.add_argument("--model", required=True, help="model file")
    _add_data(fp)
    fp.add_argument("--label", default="main", help="column label of the first run")
    fp.add_argument("--compare-model", default=None, help="second model to compare against")
    fp.add_argument("--compare-banks", default=None, help="bank directory for the second run")
    fp.add_argument("--compare-label", default="compare", help="column label of the second run")
    fp.add_argument("--split", choices=("test", "train", "all"), default="test", help="cameras to use")
    fp.add_argument("--bins", type=int, default=10, help="number of equal-width confidence bins")
    fp.add_argument("--empty-only", action="store_true", help="count only detections on empty frames")
    fp.add_argument("--out-dir", required=True, help="output directory")
    fp.set_defaults(func=cmd_report_fp)

    be = sub.add_parser("bench", help="run the pinned benchmark", formatter_class=_Formatter)
    be.add_argument("--config", default=str(shipped_config_path()), help="benchmark TOML config")
    be.add_argument("--set", action="append", type=_override, default=[], metavar="TABLE.KEY=VALUE",
                    help="override one config value (repeatable)")
    be.add_argument("--out-dir", required=True, help="output directory for bench.csv and PNGs")
    be.set_defaults(func=cmd_bench)
    return parser


DATA_ERRORS = (ConfigError, TraceFormatError, BankFormatError, BankInputError, ModelFormatError, EvalInputError,
               AttentionConfigError, NumericError, TrainingError, DataError, OSError)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not hasattr(args, "func"):
            chosen = [a for a in (getattr(args, "command", None), getattr(args, "action", None)) if a]
            raise UsageError(f"contextbank{' ' + ' '.join(chosen) if chosen else ''}: missing subcommand "
                             f"(see --help)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"contextbank: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
