"""Pinned synthetic benchmark: context modes, baselines and time horizons side by side.

Protocol (same for every row):

1. generate the world, extract features once, build one long-term bank per camera;
2. train a single-frame classifier on the training cameras (``[pretrain]``);
3. for every row, start from a copy of that classifier, add fresh attention
   parameters for the row's mode and train again (``[train]``); the
   single-frame row gets the same extra steps without attention;
4. score detections on the held-out test cameras;
5. repeat 3-4 for each seed in ``[bench] seeds`` and report the mean.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import RunConfig
from .evalkit import EvalReport, evaluate, fp_histogram
from .synthcam.extractor import SurrogateExtractor
from .synthcam.model import DetectorModel
from .synthcam.pipeline import (CameraData, build_camera_bank, prepare_camera, run_baseline, run_detector,
                                timeline_differentials, train)
from .synthcam.world import generate_trace

log = logging.getLogger(__name__)

HORIZONS: Dict[str, float] = {
    "1m": 60.0,
    "1h": 3600.0,
    "1d": 86400.0,
    "1w": 7 * 86400.0,
    "1month": 30 * 86400.0,
}
HORIZON_LADDER = ("1m", "1d", "1w", "1month")
MODE_LADDER = ("single", "majvote", "stspatial", "sf", "st", "st+lt")
BASELINE_KIND = {"single": "single_frame", "majvote": "majority_vote", "stspatial": "st_spatial"}


def parse_horizon(text: str) -> float:
    """Horizon in seconds from ``1m``/``1h``/``1d``/``1w``/``1month`` or a plain number of seconds."""
    if text in HORIZONS:
        return HORIZONS[text]
    try:
        value = float(text)
    except ValueError:
        raise ValueError(f"unknown horizon {text!r}; expected one of {', '.join(HORIZONS)} or seconds") from None
    if not value > 0:
        raise ValueError(f"horizon must be positive, got {text!r}")
    return value


def horizon_label(seconds: float) -> str:
    for name, value in HORIZONS.items():
        if value == seconds:
            return name
    return f"{seconds:g}s"


@dataclass
class World:
    config: RunConfig
    extractor: SurrogateExtractor
    train_cams: List[CameraData]
    test_cams: List[CameraData]

    @property
    def n_classes(self) -> int:
        return self.config.trace.n_classes


def build_world(cfg: RunConfig, positive_oracle: bool = False) -> World:
    """Traces, frozen features and per-camera banks for every camera of the config."""
    traces = generate_trace(cfg.trace)
    extractor = SurrogateExtractor(cfg.extractor)
    strategy = cfg.bank.curation
    cams = [prepare_camera(t, extractor, build_camera_bank(t, extractor, strategy, cfg.bank.capacity,
                                                           positive_oracle=positive_oracle))
            for t in traces]
    return World(cfg, extractor,
                 [c for c in cams if c.trace.split == "train"],
                 [c for c in cams if c.trace.split == "test"])


def with_banks(world: World, positive_oracle: bool) -> World:
    """Same world and features, banks rebuilt with or without empty frames."""
    strategy = world.config.bank.curation

    def rebank(c: CameraData) -> CameraData:
        bank = build_camera_bank(c.trace, world.extractor, strategy, world.config.bank.capacity,
                                 positive_oracle=positive_oracle)
        return replace(c, bank=bank)

    return World(world.config, world.extractor, [rebank(c) for c in world.train_cams],
                 [rebank(c) for c in world.test_cams])


def pretrain(world: World) -> DetectorModel:
    cfg = world.config
    model = DetectorModel.init("single", cfg.extractor.d_feat, world.n_classes,
                               np.random.default_rng([cfg.pretrain.seed, 1]))
    model, _ = train(model, world.train_cams, cfg.pretrain)
    return model


def finetune(world: World, base: DetectorModel, mode: str, horizon_s: float = HORIZONS["1month"],
             seed: Optional[int] = None) -> DetectorModel:
    """A model of ``mode`` warm-started from ``base``'s classifier and trained on the training cameras.

    ``seed`` replaces ``[train] seed`` for both the attention init and the clip sampling.
    """
    cfg = world.config
    hp = cfg.train if seed is None else replace(cfg.train, seed=seed)
    model = DetectorModel.init(mode, cfg.extractor.d_feat, world.n_classes,
                               np.random.default_rng([hp.seed, 2]),
                               temperature=cfg.model.temperature, attention_init=cfg.model.attention_init,
                               classifier=base.classifier, horizon_s=horizon_s, window=cfg.model.window,
                               causal=cfg.model.causal)
    model, _ = train(model, world.train_cams, hp)
    return model


def score(world: World, model: DetectorModel, kind: Optional[str] = None) -> EvalReport:
    """Evaluate on the test cameras; ``kind`` selects a single-frame baseline."""
    if kind is None:
        dets, gts = run_detector(model, world.test_cams)
    else:
        dets, gts = run_baseline(BASELINE_KIND[kind], model, world.test_cams, world.extractor,
                                 window=world.config.model.window)
    return evaluate(dets, gts, classes=range(world.n_classes))


@dataclass(frozen=True)
class BenchRow:
    name: str
    mode: str
    horizon: str
    map50: float
    ar1: float
    map50_runs: Tuple[float, ...] = ()

    @property
    def map50_std(self) -> float:
        return float(np.std(self.map50_runs)) if self.map50_runs else 0.0


@dataclass
class BenchResult:
    rows: List[BenchRow] = field(default_factory=list)

    def get(self, name: str) -> BenchRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def mode_ladder(self) -> List[Tuple[str, float]]:
        return [(m, self.get(m).map50) for m in MODE_LADDER]

    def horizon_ladder(self) -> List[Tuple[str, float]]:
        return [(h, self.get(f"lt@{h}").map50) for h in HORIZON_LADDER]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "mode", "horizon", "map50", "ar1", "map50_std", "runs"])
        for r in self.rows:
            w.writerow([r.name, r.mode, r.horizon, f"{r.map50:.6f}", f"{r.ar1:.6f}", f"{r.map50_std:.6f}",
                        len(r.map50_runs)])
        return buf.getvalue()


def _bench_rows():
    rows = [("single", "single", "1month"), ("majvote", "majvote", "1month"), ("stspatial", "stspatial", "1month"),
            ("sf", "sf", "1month"), ("st", "st", "1month")]
    rows += [(f"lt@{h}", "lt", h) for h in HORIZON_LADDER]
    rows.append(("st+lt", "st+lt", "1month"))
    return rows


def run_benchmark(cfg: RunConfig, progress: Optional[Callable[[str], None]] = None,
                  world: Optional[World] = None) -> BenchResult:
    """All modes, baselines and LT horizons of the pinned benchmark."""
    say = progress or (lambda msg: log.info(msg))
    t0 = time.perf_counter()
    world = world or build_world(cfg)
    base = pretrain(world)
    say(f"world + single-frame pretraining: {time.perf_counter() - t0:.1f}s")
    seeds = cfg.bench.seeds
    runs: Dict[str, List[EvalReport]] = {}
    row_defs = _bench_rows()
    for seed in seeds:
        single = finetune(world, base, "single", seed=seed)
        for kind in ("single", "majvote", "stspatial"):
            runs.setdefault(kind, []).append(score(world, single, None if kind == "single" else kind))
        for name, mode, horizon in row_defs:
            if mode in BASELINE_KIND:
                continue
            runs.setdefault(name, []).append(score(world, finetune(world, base, mode, HORIZONS[horizon], seed=seed)))
            say(f"seed {seed} {name:<12} mAP {runs[name][-1].map50:.4f}  ({time.perf_counter() - t0:.1f}s)")
    out = BenchResult()
    for name, mode, horizon in row_defs:
        reports = runs[name]
        maps = tuple(r.map50 for r in reports)
        out.rows.append(BenchRow(name, mode, horizon if mode in ("lt", "st+lt") else "-", float(np.mean(maps)),
                                 float(np.mean([r.ar1 for r in reports])), maps))
        say(f"{name:<12} mAP {out.rows[-1].map50:.4f}  AR@1 {out.rows[-1].ar1:.4f}  over {len(maps)} seeds")
    return out


# -- empty-frame comparison and periodicity -------------------------------------------

def empty_frame_fp(cfg: RunConfig, bins: Sequence[float] = tuple(np.linspace(0.0, 1.0, 11)),
                   world: Optional[World] = None):
    """False positives on the test cameras' empty frames for two LT models.

    One model is trained and evaluated with banks that keep empty frames,
    the other with banks restricted to frames holding an object (ground-truth
    oracle).  Counts are summed over ``[bench] seeds``.  Returns
    ``(edges, counts_with_empty, counts_positive_only)``.
    """
    world = world or build_world(cfg)
    base = pretrain(world)
    counts = []
    for oracle in (False, True):
        w = with_banks(world, positive_oracle=oracle)
        empty = {int(f.frame_id) for c in w.test_cams for f in c.frames if f.is_empty}
        total = np.zeros(len(bins) - 1, dtype=np.int64)
        for seed in cfg.bench.seeds:
            model = finetune(w, base, "lt", HORIZONS["1month"], seed=seed)
            dets, _ = run_detector(model, w.test_cams)
            total += fp_histogram([d for d in dets if d.frame_id in empty], [], bins)
        counts.append(total)
    return np.asarray(bins, dtype=np.float64), counts[0], counts[1]


def timeline_histogram(offsets_s: Sequence[float], bin_hours: float = 1.0, span_hours: float = 72.0):
    """Histogram of attended time offsets in hours over ``[-span, span]``."""
    edges = np.arange(-span_hours, span_hours + bin_hours / 2, bin_hours)
    counts, _ = np.histogram(np.asarray(offsets_s, dtype=np.float64) / 3600.0, bins=edges)
    return edges, counts


def periodicity(cfg: RunConfig, threshold: float = 0.01, world: Optional[World] = None):
    """Attended time offsets (seconds) of an LT model on the test cameras of ``cfg``."""
    world = world or build_world(cfg)
    base = pretrain(world)
    model = finetune(world, base, "lt", HORIZONS["1w"])
    return timeline_differentials(model, world.test_cams, threshold)


def lag_mass(offsets_s: Sequence[float], lag_hours: float, tolerance_hours: float = 2.0) -> int:
    """Count of offsets within ``tolerance`` of ``+-lag`` (either side of the keyframe)."""
    h = np.abs(np.asarray(offsets_s, dtype=np.float64)) / 3600.0
    return int(np.sum(np.abs(h - lag_hours) <= tolerance_hours))
