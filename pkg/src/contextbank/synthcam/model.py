"""Second-stage classifier conditioned on memory, plus the temporal baselines."""

from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..attention import (AttentionConfigError, AttentionParams, DEFAULT_TEMPERATURE, HeadCache,
                         head_backward, head_forward, masked_stage_backward, masked_stage_forward,
                         uses_long, uses_short)
from ..encoding import CODE_SIZE, BoxPx
from ..evalkit import Det, iou
from ..numkit import LinearMap, cross_entropy, linear_backward, softmax_rows

MODEL_MAGIC = b"CTXMODEL"
MODEL_VERSION = 1
DETECTOR_MODES = ("single", "sf", "st", "lt", "st+lt")
BASELINES = ("single_frame", "majority_vote", "st_spatial")
HIGH_CONFIDENCE = 0.5


class ModelFormatError(ValueError):
    pass


@dataclass
class DetectorModel:
    mode: str
    n_classes: int
    d_feat: int
    classifier: LinearMap
    theta_short: Optional[AttentionParams] = None
    theta_long: Optional[AttentionParams] = None
    horizon_s: float = 30 * 86400.0
    window: int = 3
    causal: bool = False

    def __post_init__(self):
        self.mode = self.mode.lower()
        if self.mode not in DETECTOR_MODES:
            raise AttentionConfigError(f"unknown mode {self.mode!r}; expected one of {DETECTOR_MODES}")
        if self.classifier.d_out != self.n_classes + 1:
            raise ValueError("classifier must output n_classes + 1 logits (background last)")
        if self.short_enabled and self.theta_short is None:
            raise AttentionConfigError(f"mode {self.mode!r} needs short-term parameters")
        if self.long_enabled and self.theta_long is None:
            raise AttentionConfigError(f"mode {self.mode!r} needs long-term parameters")

    @property
    def background(self) -> int:
        return self.n_classes

    @property
    def short_enabled(self) -> bool:
        return self.mode != "single" and uses_short(self.mode)

    @property
    def long_enabled(self) -> bool:
        return self.mode != "single" and uses_long(self.mode)

    @property
    def short_window(self) -> int:
        return 1 if self.mode == "sf" else self.window

    @classmethod
    def init(cls, mode: str, d_feat: int, n_classes: int, rng: np.random.Generator,
             temperature: float = DEFAULT_TEMPERATURE, attention_init: str = "glorot",
             classifier: Optional[LinearMap] = None, **kw) -> "DetectorModel":
        """Fresh model; ``classifier`` warm-starts the classification layer from a copy."""
        mode = mode.lower()
        fresh = LinearMap.init(d_feat, n_classes + 1, rng)
        classifier = fresh if classifier is None else classifier.copy()
        short = long = None
        if mode != "single" and uses_short(mode):
            short = AttentionParams.init(d_feat, d_feat, rng, temperature=temperature, scheme=attention_init)
        if mode != "single" and uses_long(mode):
            long = AttentionParams.init(d_feat, d_feat + CODE_SIZE, rng, temperature=temperature,
                                        scheme=attention_init)
        return cls(mode, n_classes, d_feat, classifier, short, long, **kw)

    def params(self) -> Dict[str, np.ndarray]:
        out = {"cls.weight": self.classifier.weight, "cls.bias": self.classifier.bias}
        if self.theta_short is not None:
            out.update(self.theta_short.to_dict("short."))
        if self.theta_long is not None:
            out.update(self.theta_long.to_dict("long."))
        return out

    def with_params(self, values: Dict[str, np.ndarray]) -> "DetectorModel":
        short = long = None
        if self.theta_short is not None:
            short = AttentionParams.from_dict(values, "short.", self.theta_short.temperature)
        if self.theta_long is not None:
            long = AttentionParams.from_dict(values, "long.", self.theta_long.temperature)
        return DetectorModel(self.mode, self.n_classes, self.d_feat,
                             LinearMap(values["cls.weight"], values["cls.bias"]), short, long,
                             self.horizon_s, self.window, self.causal)

    def as_single_frame(self) -> "DetectorModel":
        """Same classifier, no attention."""
        return DetectorModel("single", self.n_classes, self.d_feat, self.classifier.copy(),
                             horizon_s=self.horizon_s, window=self.window, causal=self.causal)

    # -- forward / backward on pooled features ---------------------------------

    def forward(self, a_pool: np.ndarray, short: Optional[np.ndarray] = None,
                long: Optional[np.ndarray] = None, long_proj=None) -> Tuple[np.ndarray, np.ndarray, HeadCache]:
        """Return ``(logits, attended features, cache)`` for one keyframe.

        ``long_proj`` optionally holds precomputed ``(q(long), v(long))``.
        """
        if self.mode == "single":
            feats, cache = np.asarray(a_pool, dtype=np.float64), HeadCache(None, None)
        else:
            lq, lv = long_proj if long_proj is not None else (None, None)
            feats, cache = head_forward(a_pool, short, long, self.theta_short, self.theta_long, self.mode, lq, lv)
        return self.classifier(feats), feats, cache

    def loss_and_grad(self, a_pool: np.ndarray, labels: np.ndarray, short=None, long=None, long_proj=None):
        """Summed (not averaged) cross-entropy over the keyframe's proposals and its gradient.

        When ``long_proj`` is given the long-stage q/v gradients are returned
        per memory row as a third value ``(d q(long), d v(long))`` (or None when
        the stage was skipped) instead of being folded into the parameters.
        """
        logits, feats, cache = self.forward(a_pool, short, long, long_proj)
        n = logits.shape[0]
        loss, g_logits = cross_entropy(logits, labels)
        g_logits = g_logits * n
        g_feats, gw, gb = linear_backward(feats, self.classifier, g_logits)
        grads = {"cls.weight": gw, "cls.bias": gb}
        rows = None
        if self.mode != "single":
            if long_proj is not None:
                _, rows = head_backward(g_feats, cache, self.theta_short, self.theta_long, grads, long_rows=True)
            else:
                head_backward(g_feats, cache, self.theta_short, self.theta_long, grads)
        for k, v in self.params().items():
            grads.setdefault(k, np.zeros_like(v))
        if long_proj is not None:
            return loss * n, grads, rows
        return loss * n, grads

    def batch_forward(self, a_pool: np.ndarray, short: Optional[np.ndarray] = None,
                      short_mask: Optional[np.ndarray] = None, long_proj=None,
                      long_mask: Optional[np.ndarray] = None):
        """Logits for many keyframes at once; returns ``(logits, feats, caches)``.

        Rows of ``a_pool`` from different keyframes share one short memory
        matrix and one set of projected long-memory rows ``(q, v)``; the
        boolean masks say which memory rows each proposal may attend to.
        """
        x = np.asarray(a_pool, dtype=np.float64)
        short_cache = long_cache = None
        if self.short_enabled:
            sq, sv = self.theta_short.q_map(short), self.theta_short.v_map(short)
            x, short_cache = masked_stage_forward(x, sq, sv, short_mask, self.theta_short)
        if self.long_enabled:
            x, long_cache = masked_stage_forward(x, long_proj[0], long_proj[1], long_mask, self.theta_long)
        return self.classifier(x), x, (short_cache, long_cache)

    def batch_loss_and_grad(self, a_pool: np.ndarray, labels: np.ndarray,
                            short: Optional[np.ndarray] = None, short_mask: Optional[np.ndarray] = None,
                            long_proj=None, long_mask: Optional[np.ndarray] = None):
        """Summed cross-entropy of :meth:`batch_forward` and its gradient.

        Returns ``(loss, grads, long_rows)`` with ``long_rows`` the per-row
        ``(d q, d v)`` of the long memory (None without a long stage).
        """
        logits, x, (short_cache, long_cache) = self.batch_forward(a_pool, short, short_mask, long_proj, long_mask)
        n = logits.shape[0]
        loss, g_logits = cross_entropy(logits, labels)
        g, gw, gb = linear_backward(x, self.classifier, g_logits * n)
        grads = {"cls.weight": gw, "cls.bias": gb}
        rows = None
        if long_cache is not None:
            g, gq, gv = masked_stage_backward(g, long_cache, self.theta_long, grads, "long.")
            rows = (gq, gv)
        if short_cache is not None:
            g, gq, gv = masked_stage_backward(g, short_cache, self.theta_short, grads, "short.")
            for name, lin, gr in (("q", self.theta_short.q_map, gq), ("v", self.theta_short.v_map, gv)):
                _, w_, b_ = linear_backward(short, lin, gr)
                grads[f"short.{name}.weight"] = w_
                grads[f"short.{name}.bias"] = b_
        for k, v in self.params().items():
            grads.setdefault(k, np.zeros_like(v))
        return loss * n, grads, rows

    def probabilities(self, a_pool, short=None, long=None) -> np.ndarray:
        logits, _, _ = self.forward(a_pool, short, long)
        return softmax_rows(logits)


# -- detection outputs ---------------------------------------------------------------

@dataclass(frozen=True)
class ProposalDetection:
    box: BoxPx
    class_id: int
    score: float


def detect_from_probs(probs: np.ndarray, boxes: Sequence[BoxPx]) -> List[ProposalDetection]:
    """Argmax over all classes (background included).

    Ties go to the lowest index in the order background, 0, 1, ..., so a
    classifier with no evidence predicts background.
    """
    order = np.roll(np.arange(probs.shape[1]), 1)
    cls = order[np.argmax(probs[:, order], axis=1)]
    return [ProposalDetection(boxes[i], int(cls[i]), float(probs[i, cls[i]])) for i in range(len(boxes))]


def detect(model: DetectorModel, a_pool: np.ndarray, boxes: Sequence[BoxPx], short=None, long=None):
    """Classify every proposal of a keyframe given its memories.

    ``short`` is a ShortTermMemory or matrix, ``long`` a bank query result or
    matrix; empty memories fall back to the unconditioned features.
    """
    short = getattr(short, "matrix", short)
    long = getattr(long, "matrix", long)
    if model.short_enabled and short is None:
        short = np.asarray(a_pool)
    if model.long_enabled and long is None:
        long = np.zeros((0, model.d_feat + CODE_SIZE))
    return detect_from_probs(model.probabilities(a_pool, short, long), boxes)


def foreground_detections(probs: np.ndarray, boxes: Sequence[BoxPx], frame_id: int) -> List[Det]:
    """One scored detection per proposal: its best non-background class and that probability."""
    fg = probs[:, :-1]
    cls = np.argmax(fg, axis=1)
    return [Det(frame_id, int(cls[i]), float(fg[i, cls[i]]), boxes[i]) for i in range(len(boxes))]


# -- baselines --------------------------------------------------------------------------

def majority_vote(key_dets: Sequence[Det], other_dets: Sequence[Sequence[Det]],
                  threshold: float = HIGH_CONFIDENCE, iou_threshold: float = 0.5) -> List[Det]:
    """Relabel keyframe detections by a vote over high-confidence window detections.

    Votes come from the detection itself (when confident) and from confident
    detections in the other window frames at the same location (IoU >= 0.5).
    Ties keep the keyframe's own class when it is among the leaders, otherwise
    the lowest class id wins.  Scores are unchanged.
    """
    confident = [d for frame in other_dets for d in frame if d.score >= threshold]
    out = []
    for d in key_dets:
        votes = Counter(o.class_id for o in confident if iou(o.box, d.box) >= iou_threshold)
        if d.score >= threshold:
            votes[d.class_id] += 1
        if not votes:
            out.append(d)
            continue
        top = max(votes.values())
        leaders = sorted(c for c, v in votes.items() if v == top)
        cls = d.class_id if d.class_id in leaders else leaders[0]
        out.append(Det(d.frame_id, cls, d.score, d.box))
    return out


def st_spatial_features(key_pool: np.ndarray, crops: Sequence[np.ndarray], dts: Sequence[float]) -> np.ndarray:
    """Temporal-distance-weighted average of same-location crops.

    ``crops[j]`` is an ``(n, d)`` array of crops from window frame ``j`` at the
    keyframe's proposal boxes, ``dts[j]`` its time offset.  The keyframe
    itself (offset 0) should be included in ``crops``.
    """
    alphas = np.array([1.0 / (1.0 + abs(dt)) for dt in dts])
    alphas = alphas / alphas.sum()
    out = np.zeros_like(np.asarray(key_pool, dtype=np.float64))
    for a, c in zip(alphas, crops):
        out += a * np.asarray(c, dtype=np.float64)
    return out


# -- serialization -------------------------------------------------------------------

def model_to_bytes(model: DetectorModel) -> bytes:
    params = model.params()
    names = sorted(params)
    meta = {
        "mode": model.mode, "n_classes": model.n_classes, "d_feat": model.d_feat,
        "horizon_s": model.horizon_s, "window": model.window, "causal": model.causal,
        "temperature_short": model.theta_short.temperature if model.theta_short else None,
        "temperature_long": model.theta_long.temperature if model.theta_long else None,
        "arrays": [[n, list(params[n].shape)] for n in names],
    }
    head = json.dumps(meta, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(params[n], dtype="<f8").tobytes() for n in names)
    return MODEL_MAGIC + struct.pack("<HI", MODEL_VERSION, len(head)) + head + body


def model_from_bytes(data: bytes) -> DetectorModel:
    if data[:8] != MODEL_MAGIC:
        raise ModelFormatError("bad magic bytes at offset 0")
    if len(data) < 14:
        raise ModelFormatError("truncated model header")
    version, hlen = struct.unpack_from("<HI", data, 8)
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    try:
        meta = json.loads(data[14:14 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise ModelFormatError(f"bad model header: {exc}") from None
    pos = 14 + hlen
    try:
        values = {}
        for name, shape in meta["arrays"]:
            size = int(np.prod(shape)) * 8
            if pos + size > len(data):
                raise ModelFormatError(f"truncated array {name!r} at offset {pos}")
            values[name] = np.frombuffer(data, dtype="<f8", count=size // 8, offset=pos).reshape(shape).copy()
            pos += size
        if pos != len(data):
            raise ModelFormatError(f"trailing bytes at offset {pos}")
        short = long = None
        if meta["temperature_short"] is not None:
            short = AttentionParams.from_dict(values, "short.", meta["temperature_short"])
        if meta["temperature_long"] is not None:
            long = AttentionParams.from_dict(values, "long.", meta["temperature_long"])
        return DetectorModel(meta["mode"], meta["n_classes"], meta["d_feat"],
                             LinearMap(values["cls.weight"], values["cls.bias"]), short, long,
                             meta["horizon_s"], meta["window"], meta["causal"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"inconsistent model header: {exc!r}") from None


def write_model(model: DetectorModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def read_model(path) -> DetectorModel:
    return model_from_bytes(Path(path).read_bytes())
