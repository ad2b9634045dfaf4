"""Synthetic static-camera world: ground-truth traces of motion-triggered bursts.

A trace is purely symbolic (classes, boxes, lighting, timestamps).  Appearance
is produced separately by :mod:`contextbank.synthcam.extractor`.

Each camera has a dominant resident species that tends to visit at the same
hour every day, occasional visits from other species twelve hours off that
schedule, static distractor objects that sit in the same place in most frames,
and false triggers that produce empty bursts.  Every species at a camera is a
small population of individuals, so the same animals come back day after day.
"""

from __future__ import annotations

import datetime as _dt
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..encoding import BoxPx, Timestamp

TRACE_MAGIC = "CTXTRACE"
TRACE_VERSION = 1
SECONDS_PER_DAY = 86400.0


class ConfigError(ValueError):
    pass


class TraceFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TraceConfig:
    n_classes: int = 4
    n_cameras: int = 9
    n_test_cameras: int = 3
    duration_days: float = 30.0
    start_date: str = "2012-06-01"
    image_width: int = 640
    image_height: int = 480
    trigger_rate: float = 8.0          # triggers per day, empty and non-empty together
    empty_fraction: float = 0.75       # fraction of frames without a true object
    burst_min: int = 1
    burst_max: int = 10
    dominant_share: float = 0.8        # share of visits made by the camera's resident species
    visit_jitter_hours: float = 1.0
    max_group: int = 3
    max_speed: float = 40.0         # horizontal px per frame
    individuals_per_class: int = 3
    distractors_per_camera: int = 1
    distractor_presence: float = 0.9   # probability a distractor is visible in a frame
    night_lighting: float = 0.5
    quality_min: float = 0.2
    frame_quality_jitter: float = 0.2  # per-frame variation around the per-burst quality
    seed: int = 0

    def __post_init__(self):
        for name in ("empty_fraction", "dominant_share", "distractor_presence", "night_lighting", "quality_min",
                     "frame_quality_jitter"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} must lie in [0, 1]")
        if not 1 <= self.burst_min <= self.burst_max <= 10:
            raise ConfigError("burst lengths must satisfy 1 <= burst_min <= burst_max <= 10")
        if self.n_classes < 1 or self.n_cameras < 1:
            raise ConfigError("need at least one class and one camera")
        if not 0 <= self.n_test_cameras <= self.n_cameras:
            raise ConfigError("n_test_cameras must lie in [0, n_cameras]")
        if self.duration_days <= 0 or self.trigger_rate <= 0:
            raise ConfigError("duration_days and trigger_rate must be positive (trace would have zero frames)")
        if self.max_group < 1 or self.distractors_per_camera < 0:
            raise ConfigError("max_group >= 1 and distractors_per_camera >= 0 required")
        if self.individuals_per_class < 1:
            raise ConfigError("individuals_per_class must be >= 1")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ConfigError("image size must be positive")
        _dt.date.fromisoformat(self.start_date)

    @classmethod
    def from_mapping(cls, values: dict) -> "TraceConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown trace config keys: {', '.join(unknown)}")
        out = {}
        for k, v in values.items():
            kind = type(getattr(cls, k)) if hasattr(cls, k) else type(known[k].default)
            out[k] = kind(v)
        return cls(**out)

    @property
    def origin(self) -> _dt.datetime:
        return _dt.datetime.fromisoformat(self.start_date)


@dataclass(frozen=True)
class Instance:
    """One object in one frame.  ``class_id`` is -1 for distractors."""

    key: int
    class_id: int
    box: Tuple[float, float, float, float]   # x_center, y_center, width, height (px)
    quality: float
    distractor: int = -1                      # index into CameraTrace.distractors, or -1
    individual: int = 0                       # which member of the camera's population of this class

    @property
    def is_distractor(self) -> bool:
        return self.distractor >= 0


@dataclass(frozen=True)
class Distractor:
    box: Tuple[float, float, float, float]
    mimic_class: int
    texture: int


@dataclass(frozen=True)
class Frame:
    camera_id: str
    camera_index: int
    frame_index: int
    frame_id: int
    time_s: float
    timestamp: Timestamp
    burst_id: int
    lighting: float
    instances: Tuple[Instance, ...]
    image_width: int = 640
    image_height: int = 480

    @property
    def objects(self) -> List[Instance]:
        return [i for i in self.instances if not i.is_distractor]

    @property
    def is_empty(self) -> bool:
        return not self.objects

    def box_px(self, box) -> BoxPx:
        return BoxPx(float(box[0]), float(box[1]), float(box[2]), float(box[3]),
                     float(self.image_width), float(self.image_height))


@dataclass(frozen=True)
class CameraTrace:
    camera_id: str
    camera_index: int
    split: str
    resident_class: int
    resident_hour: float
    distractors: Tuple[Distractor, ...]
    frames: Tuple[Frame, ...]

    @property
    def bursts(self) -> List[List[int]]:
        """Frame positions grouped by burst, in time order."""
        out: List[List[int]] = []
        last = None
        for pos, f in enumerate(self.frames):
            if f.burst_id != last:
                out.append([])
                last = f.burst_id
            out[-1].append(pos)
        return out


def _daylight(hour: float, night: float) -> float:
    return 1.0 if 6.0 <= hour < 18.0 else night


def _clip_box(x, y, w, h, W, H):
    x = float(np.clip(x, w / 2.0, W - w / 2.0))
    y = float(np.clip(y, h / 2.0, H - h / 2.0))
    return x, y


def _camera_trace(cfg: TraceConfig, cam: int) -> CameraTrace:
    rng = np.random.default_rng([cfg.seed, cam])
    W, H = cfg.image_width, cfg.image_height
    camera_id = f"cam{cam:02d}"
    split = "test" if cam >= cfg.n_cameras - cfg.n_test_cameras else "train"
    resident = int(rng.integers(cfg.n_classes))
    resident_hour = float(rng.uniform(0.0, 24.0))

    distractors = []
    for _ in range(cfg.distractors_per_camera):
        w, h = float(rng.uniform(50, 120)), float(rng.uniform(40, 100))
        x, y = _clip_box(rng.uniform(0, W), rng.uniform(0.5 * H, H), w, h, W, H)
        distractors.append(Distractor((x, y, w, h), int(rng.integers(cfg.n_classes)), int(rng.integers(1 << 16))))

    days = int(np.ceil(cfg.duration_days))
    span = cfg.duration_days * SECONDS_PER_DAY

    # (start_s, length, visit) with visit = (class, group) or None for a false trigger
    triggers = []
    pos_rate = cfg.trigger_rate * (1.0 - cfg.empty_fraction)
    if cfg.empty_fraction < 1.0:
        for day in range(days):
            for _ in range(rng.poisson(pos_rate)):
                if rng.random() < cfg.dominant_share or cfg.n_classes == 1:
                    cls, hour = resident, resident_hour
                else:
                    cls = int(rng.choice([c for c in range(cfg.n_classes) if c != resident]))
                    hour = resident_hour + 12.0
                t = (day + ((hour + rng.normal(0.0, cfg.visit_jitter_hours)) % 24.0) / 24.0) * SECONDS_PER_DAY
                if t >= span:
                    continue
                length = int(rng.integers(cfg.burst_min, cfg.burst_max + 1))
                triggers.append((t, length, (cls, int(rng.integers(1, cfg.max_group + 1)))))
    positive_frames = sum(t[1] for t in triggers)
    if cfg.empty_fraction >= 1.0:
        empty_target = int(round(cfg.trigger_rate * cfg.duration_days * (cfg.burst_min + cfg.burst_max) / 2.0))
    else:
        empty_target = int(round(positive_frames * cfg.empty_fraction / (1.0 - cfg.empty_fraction)))
    empty_frames = 0
    while empty_frames < empty_target:
        length = min(int(rng.integers(cfg.burst_min, cfg.burst_max + 1)), empty_target - empty_frames)
        triggers.append((float(rng.uniform(0.0, span)), length, None))
        empty_frames += length
    if not triggers:
        raise ConfigError(f"camera {camera_id} produced no frames")
    triggers.sort(key=lambda t: t[0])

    frames: List[Frame] = []
    next_free = -np.inf
    key = 0
    origin = cfg.origin
    for burst_id, (start, length, visit) in enumerate(triggers):
        start = float(np.floor(max(start, next_free)))
        next_free = start + length
        hour = (start % SECONDS_PER_DAY) / 3600.0
        lighting = _daylight(hour, cfg.night_lighting)
        animals = []
        if visit is not None:
            cls, group = visit
            base_w = 50.0 + 25.0 * (cls % 4)
            for _ in range(group):
                w = float(base_w * rng.uniform(0.8, 1.25))
                h = float(w * rng.uniform(0.6, 0.9))
                x, y = _clip_box(rng.uniform(0, W), rng.uniform(0.4 * H, 0.9 * H), w, h, W, H)
                animals.append([x, y, w, h, float(rng.uniform(-cfg.max_speed, cfg.max_speed)), key,
                                int(rng.integers(cfg.individuals_per_class)),
                                float(rng.uniform(cfg.quality_min, 1.0))])
                key += 1
        for j in range(length):
            t = start + j
            insts = []
            for a in animals:
                if j:
                    a[0], a[1] = _clip_box(a[0] + a[4] + rng.normal(0, 4), a[1] + rng.normal(0, 4), a[2], a[3], W, H)
                q = lighting * a[7] * float(rng.uniform(1.0 - cfg.frame_quality_jitter, 1.0))
                insts.append(Instance(int(a[5]), visit[0], (a[0], a[1], a[2], a[3]), q, individual=a[6]))
            for d_idx, d in enumerate(distractors):
                if rng.random() < cfg.distractor_presence:
                    insts.append(Instance(-1 - d_idx, -1, d.box, lighting, d_idx))
            fi = len(frames)
            ts = Timestamp.from_datetime(origin + _dt.timedelta(seconds=t))
            frames.append(Frame(camera_id, cam, fi, cam * 10_000_000 + fi, t, ts, burst_id,
                                lighting, tuple(insts), W, H))
    return CameraTrace(camera_id, cam, split, resident, resident_hour, tuple(distractors), tuple(frames))


def generate_trace(cfg: TraceConfig) -> List[CameraTrace]:
    return [_camera_trace(cfg, cam) for cam in range(cfg.n_cameras)]


def empty_fraction(traces: Sequence[CameraTrace]) -> float:
    total = sum(len(t.frames) for t in traces)
    empty = sum(f.is_empty for t in traces for f in t.frames)
    return empty / total if total else 0.0


# -- serialization -------------------------------------------------------------

def _frame_to_json(f: Frame) -> list:
    return [f.frame_index, f.time_s, f.burst_id, f.lighting,
            [[i.key, i.class_id, list(i.box), i.quality, i.distractor, i.individual] for i in f.instances]]


def traces_to_text(cfg: TraceConfig, traces: Sequence[CameraTrace]) -> str:
    doc = {
        "config": asdict(cfg),
        "cameras": [
            {
                "camera_id": t.camera_id,
                "camera_index": t.camera_index,
                "split": t.split,
                "resident_class": t.resident_class,
                "resident_hour": t.resident_hour,
                "distractors": [[list(d.box), d.mimic_class, d.texture] for d in t.distractors],
                "frames": [_frame_to_json(f) for f in t.frames],
            }
            for t in traces
        ],
    }
    return f"{TRACE_MAGIC} {TRACE_VERSION}\n" + json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def traces_from_text(text: str) -> Tuple[TraceConfig, List[CameraTrace]]:
    head, _, body = text.partition("\n")
    parts = head.split()
    if len(parts) != 2 or parts[0] != TRACE_MAGIC:
        raise TraceFormatError("not a trace file (bad magic line)")
    if parts[1] != str(TRACE_VERSION):
        raise TraceFormatError(f"unsupported trace version {parts[1]}")
    try:
        doc = json.loads(body)
        cfg = TraceConfig(**doc["config"])
        traces = []
        origin = cfg.origin
        for c in doc["cameras"]:
            cam = c["camera_index"]
            frames = []
            for fi, t, burst, light, insts in c["frames"]:
                ts = Timestamp.from_datetime(origin + _dt.timedelta(seconds=t))
                frames.append(Frame(c["camera_id"], cam, fi, cam * 10_000_000 + fi, t, ts, burst, light,
                                    tuple(Instance(k, cl, tuple(b), q, d, ind) for k, cl, b, q, d, ind in insts),
                                    cfg.image_width, cfg.image_height))
            traces.append(CameraTrace(
                c["camera_id"], cam, c["split"], c["resident_class"], c["resident_hour"],
                tuple(Distractor(tuple(b), m, tx) for b, m, tx in c["distractors"]), tuple(frames)))
    except (KeyError, TypeError, ValueError) as exc:
        raise TraceFormatError(f"malformed trace body: {exc}") from None
    return cfg, traces


def write_traces(path, cfg: TraceConfig, traces: Sequence[CameraTrace]) -> None:
    Path(path).write_text(traces_to_text(cfg, traces), encoding="utf-8")


def read_traces(path) -> Tuple[TraceConfig, List[CameraTrace]]:
    return traces_from_text(Path(path).read_text(encoding="utf-8"))
