"""Per-camera data preparation, training loop, and inference over traces."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..attention import AttentionWeights, attention_timeline, attention_weights, head_forward
from ..encoding import CODE_SIZE, X_CENTER_INDEX, BoxPx
from ..evalkit import Det, GroundTruth
from ..membank import (BankQuery, CurationStrategy, LongTermBank, build_long_term, build_short_term,
                       query_bank)
from ..numkit import NumericError, OptimState, clip_grad_norm, sgd_step, softmax_rows
from .extractor import SurrogateExtractor
from .model import (DetectorModel, foreground_detections, majority_vote, st_spatial_features)
from .world import CameraTrace, Frame

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step


@dataclass
class CameraData:
    """A camera's frames with frozen features extracted once."""

    trace: CameraTrace
    pooled: np.ndarray          # (frames, n_prop, d_feat)
    labels: np.ndarray          # (frames, n_prop)
    scores: np.ndarray          # frozen-extractor objectness, (frames, n_prop)
    boxes: List[Tuple[BoxPx, ...]]
    times: np.ndarray
    frame_ids: np.ndarray
    bank: Optional[LongTermBank] = None

    @property
    def camera_id(self) -> str:
        return self.trace.camera_id

    @property
    def frames(self) -> Tuple[Frame, ...]:
        return self.trace.frames

    def __len__(self) -> int:
        return len(self.trace.frames)

    def window(self, pos: int, size: int) -> List[int]:
        """Positions of the ``size``-frame window centred on ``pos`` (clipped at the ends)."""
        half = size // 2
        lo, hi = max(0, pos - half), min(len(self) - 1, pos + (size - 1 - half))
        return list(range(lo, hi + 1))

    def short_memory(self, pos: int, size: int) -> np.ndarray:
        win = self.window(pos, size)
        return build_short_term([self.pooled[p] for p in win], [int(self.frame_ids[p]) for p in win]).matrix

    def long_query(self, pos: int, horizon_s: float, causal: bool = False):
        if self.bank is None:
            raise ValueError(f"camera {self.camera_id} has no long-term bank")
        return query_bank(self.bank, BankQuery(float(self.times[pos]), horizon_s,
                                               exclude_frame_id=int(self.frame_ids[pos]), causal=causal))

    def ground_truth(self, pos: int) -> List[GroundTruth]:
        f = self.frames[pos]
        return [GroundTruth(f.frame_id, i.class_id, f.box_px(i.box)) for i in f.objects]


def prepare_camera(trace: CameraTrace, extractor: SurrogateExtractor, bank: Optional[LongTermBank] = None) -> CameraData:
    pooled, labels, scores, boxes = [], [], [], []
    for f in trace.frames:
        ex = extractor.extract(f, trace.distractors)
        pooled.append(ex.pooled)
        labels.append(ex.labels)
        scores.append(ex.batch.scores)
        boxes.append(ex.batch.boxes)
    return CameraData(trace, np.array(pooled), np.array(labels), np.array(scores), boxes,
                      np.array([f.time_s for f in trace.frames]),
                      np.array([f.frame_id for f in trace.frames], dtype=np.int64), bank)


def build_camera_bank(trace: CameraTrace, extractor: SurrogateExtractor, strategy: CurationStrategy,
                      capacity: int = 8500, positive_oracle: bool = False) -> LongTermBank:
    """Long-term bank for one camera from the frozen extractor.

    ``positive_oracle`` keeps only frames whose ground truth holds an object.
    """
    return build_long_term(
        trace.frames,
        lambda f: extractor.extract(f, trace.distractors).detections(),
        strategy, capacity, d_feat=extractor.config.d_feat,
        frame_filter=(lambda f: not f.is_empty) if positive_oracle else None,
    )


def flip_context(long: np.ndarray, d_feat: int) -> np.ndarray:
    out = np.array(long, copy=True)
    if len(out):
        out[:, d_feat + X_CENTER_INDEX] = 1.0 - out[:, d_feat + X_CENTER_INDEX]
    return out


def frame_inputs(model: DetectorModel, cam: CameraData, pos: int, flip: bool = False):
    short = cam.short_memory(pos, model.short_window) if model.short_enabled else None
    long = None
    if model.long_enabled:
        long = cam.long_query(pos, model.horizon_s, model.causal).matrix
        if flip:
            long = flip_context(long, model.d_feat)
    return cam.pooled[pos], short, long


# -- training ----------------------------------------------------------------------

@dataclass(frozen=True)
class TrainParams:
    steps: int = 300
    clips_per_batch: int = 32
    frames_per_clip: int = 4
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0004
    flip_prob: float = 0.5
    max_grad_norm: Optional[float] = 1.0
    schedule: str = "constant"        # or "cosine": decay the learning rate to 0 over the run
    seed: int = 0


def sample_clips(cams: Sequence[CameraData], rng: np.random.Generator, n_clips: int, frames_per_clip: int):
    """Clips of consecutive frames inside one burst; short bursts repeat their last frame."""
    sizes = np.array([len(c) for c in cams], dtype=np.float64)
    out = []
    for _ in range(n_clips):
        ci = int(rng.choice(len(cams), p=sizes / sizes.sum()))
        cam = cams[ci]
        start = int(rng.integers(len(cam)))
        burst = cam.frames[start].burst_id
        clip = [start]
        while len(clip) < frames_per_clip:
            nxt = clip[-1] + 1
            if nxt < len(cam) and cam.frames[nxt].burst_id == burst:
                clip.append(nxt)
            else:
                clip.append(clip[-1])
        out.append((ci, clip))
    return out


class _BankProjection:
    """q/v projections of a whole bank for one step; per-row gradients accumulate here."""

    def __init__(self, matrix: np.ndarray, theta):
        self.matrix = matrix
        self.queries = theta.q_map(matrix)
        self.values = theta.v_map(matrix)
        self.g_queries = np.zeros_like(self.queries)
        self.g_values = np.zeros_like(self.values)

    def fold(self, grads: Dict[str, np.ndarray]) -> None:
        grads["long.q.weight"] += self.g_queries.T @ self.matrix
        grads["long.q.bias"] += self.g_queries.sum(axis=0)
        grads["long.v.weight"] += self.g_values.T @ self.matrix
        grads["long.v.bias"] += self.g_values.sum(axis=0)


def _short_batch(cam: CameraData, positions: Sequence[int], size: int):
    """Shared short memory for several keyframes plus the per-proposal mask."""
    wins = [cam.window(p, size) for p in positions]
    union = sorted({q for w in wins for q in w})
    col = {q: i for i, q in enumerate(union)}
    n = cam.pooled.shape[1]
    frame_mask = np.zeros((len(positions), len(union)), dtype=bool)
    for j, w in enumerate(wins):
        frame_mask[j, [col[q] for q in w]] = True
    mask = np.repeat(np.repeat(frame_mask, n, axis=0), n, axis=1)
    return cam.pooled[union].reshape(-1, cam.pooled.shape[2]), mask


def _long_mask(cam: CameraData, positions: Sequence[int], horizon_s: float, causal: bool):
    """Bank row span ``[lo, hi)`` covering all keyframes, and the per-proposal mask over it.

    Mirrors ``query_bank``: rows inside the horizon, minus the keyframe's own frame.
    """
    bank = cam.bank
    t = bank.time_s
    times = cam.times[positions]
    los = np.searchsorted(t, times - horizon_s, side="left")
    his = np.searchsorted(t, times if causal else times + horizon_s, side="right")
    lo, hi = int(los.min()), int(his.max())
    idx = np.arange(lo, hi)
    frame_mask = ((idx[None, :] >= los[:, None]) & (idx[None, :] < his[:, None])
                  & (bank.source_frame_id[lo:hi][None, :] != cam.frame_ids[positions][:, None]))
    return lo, hi, np.repeat(frame_mask, cam.pooled.shape[1], axis=0)


@dataclass
class BatchInputs:
    """Stacked proposals of several keyframes of one camera with their memory masks."""

    a_pool: np.ndarray
    labels: np.ndarray
    short: Optional[np.ndarray] = None
    short_mask: Optional[np.ndarray] = None
    long_matrix: Optional[np.ndarray] = None
    long_mask: Optional[np.ndarray] = None


def batch_inputs(model: DetectorModel, cam: CameraData, positions: Sequence[int], flip: bool = False) -> BatchInputs:
    positions = list(positions)
    d = cam.pooled.shape[2]
    out = BatchInputs(cam.pooled[positions].reshape(-1, d), cam.labels[positions].reshape(-1))
    if model.short_enabled:
        out.short, out.short_mask = _short_batch(cam, positions, model.short_window)
    if model.long_enabled:
        if cam.bank is None:
            raise ValueError(f"camera {cam.camera_id} has no long-term bank")
        lo, hi, out.long_mask = _long_mask(cam, positions, model.horizon_s, model.causal)
        matrix = cam.bank.matrix[lo:hi]
        out.long_matrix = flip_context(matrix, model.d_feat) if flip else matrix
    return out


def train(model: DetectorModel, cams: Sequence[CameraData], hp: TrainParams = TrainParams()):
    """Momentum-SGD on per-proposal cross-entropy.  Returns ``(model, loss_curve)``.

    Each step draws ``clips_per_batch`` clips; every clip frame is a keyframe.
    With probability ``flip_prob`` a clip is mirrored together with its bank.
    Keyframes of the same camera and orientation are processed together;
    masks keep each one restricted to its own memories.
    """
    if hp.schedule not in ("constant", "cosine"):
        raise ValueError(f"unknown schedule {hp.schedule!r}; expected 'constant' or 'cosine'")
    rng = np.random.default_rng([hp.seed, 2718])
    params = {k: v.copy() for k, v in model.params().items()}
    state = OptimState(hp.learning_rate, hp.momentum, hp.weight_decay)
    losses = []
    for step in range(hp.steps):
        if hp.schedule == "cosine":
            state = replace(state, learning_rate=0.5 * hp.learning_rate * (1.0 + np.cos(np.pi * step / hp.steps)))
        current = model.with_params(params)
        total = {k: np.zeros_like(v) for k, v in params.items()}
        groups: Dict[Tuple[int, bool], List[int]] = {}
        for ci, clip in sample_clips(cams, rng, hp.clips_per_batch, hp.frames_per_clip):
            flip = bool(rng.random() < hp.flip_prob)
            groups.setdefault((ci, flip), []).extend(clip)
        loss_sum, count = 0.0, 0
        for (ci, flip), positions in sorted(groups.items()):
            b = batch_inputs(current, cams[ci], positions, flip)
            proj = _BankProjection(b.long_matrix, current.theta_long) if current.long_enabled else None
            loss, grads, rows = current.batch_loss_and_grad(
                b.a_pool, b.labels, b.short, b.short_mask,
                (proj.queries, proj.values) if proj is not None else None, b.long_mask)
            if proj is not None:
                proj.g_queries += rows[0]
                proj.g_values += rows[1]
                proj.fold(grads)
            loss_sum += loss
            count += len(b.a_pool)
            for k in total:
                total[k] += grads[k]
        mean_loss = loss_sum / max(count, 1)
        if not np.isfinite(mean_loss):
            raise TrainingError(step, mean_loss)
        grads = {k: v / max(count, 1) for k, v in total.items()}
        if hp.max_grad_norm is not None:
            grads = clip_grad_norm(grads, hp.max_grad_norm)
        params, state = sgd_step(params, grads, state)
        if not all(np.all(np.isfinite(v)) for v in params.values()):
            raise TrainingError(step, float("nan"))
        losses.append(mean_loss)
        if step % 50 == 0:
            log.debug("step %d loss %.4f", step, mean_loss)
    return model.with_params(params), losses


# -- inference -------------------------------------------------------------------

def frame_probabilities(model: DetectorModel, cam: CameraData, pos: int) -> np.ndarray:
    a_pool, short, long = frame_inputs(model, cam, pos)
    return model.probabilities(a_pool, short, long)


def camera_probabilities(model: DetectorModel, cam: CameraData, chunk: int = 64) -> np.ndarray:
    """Class probabilities for every proposal of every frame, ``(frames, n_prop, classes + 1)``.

    Frames are processed in chunks; the result equals per-frame inference.
    """
    out = []
    for start in range(0, len(cam), chunk):
        positions = list(range(start, min(len(cam), start + chunk)))
        b = batch_inputs(model, cam, positions)
        proj = None
        if model.long_enabled:
            proj = (model.theta_long.q_map(b.long_matrix), model.theta_long.v_map(b.long_matrix))
        logits, _, _ = model.batch_forward(b.a_pool, b.short, b.short_mask, proj, b.long_mask)
        out.append(softmax_rows(logits).reshape(len(positions), cam.pooled.shape[1], -1))
    return np.concatenate(out, axis=0)


def run_detector(model: DetectorModel, cams: Sequence[CameraData]) -> Tuple[List[Det], List[GroundTruth]]:
    dets, gts = [], []
    for cam in cams:
        probs = camera_probabilities(model, cam)
        for pos in range(len(cam)):
            dets.extend(foreground_detections(probs[pos], cam.boxes[pos], int(cam.frame_ids[pos])))
            gts.extend(cam.ground_truth(pos))
    return dets, gts


def run_baseline(kind: str, model: DetectorModel, cams: Sequence[CameraData],
                 extractor: Optional[SurrogateExtractor] = None, window: int = 3):
    """Single-frame, majority-vote, or ST-Spatial detections from a single-frame classifier."""
    if kind not in ("single_frame", "majority_vote", "st_spatial"):
        raise ValueError(f"unknown baseline {kind!r}")
    single = model.as_single_frame()
    dets, gts = [], []
    for cam in cams:
        per_frame = None
        if kind == "majority_vote":
            per_frame = [foreground_detections(single.probabilities(cam.pooled[p]), cam.boxes[p],
                                               int(cam.frame_ids[p])) for p in range(len(cam))]
        for pos in range(len(cam)):
            fid = int(cam.frame_ids[pos])
            gts.extend(cam.ground_truth(pos))
            if kind == "single_frame":
                dets.extend(foreground_detections(single.probabilities(cam.pooled[pos]), cam.boxes[pos], fid))
            elif kind == "majority_vote":
                others = [per_frame[p] for p in cam.window(pos, window) if p != pos]
                dets.extend(majority_vote(per_frame[pos], others))
            else:
                if extractor is None:
                    raise ValueError("st_spatial needs the extractor for same-location crops")
                win = cam.window(pos, window)
                crops, dts = [], []
                for p in win:
                    if p == pos:
                        crops.append(cam.pooled[pos])
                    else:
                        f = cam.frames[p]
                        crops.append(np.array([extractor.crop(f, b, cam.trace.distractors)
                                               for b in cam.boxes[pos]]))
                    dts.append(cam.times[p] - cam.times[pos])
                feats = st_spatial_features(cam.pooled[pos], crops, dts)
                dets.extend(foreground_detections(single.probabilities(feats), cam.boxes[pos], fid))
    return dets, gts


def long_attention_weights(model: DetectorModel, cam: CameraData, pos: int) -> AttentionWeights:
    """Long-term weights for a keyframe, after the short-term stage if enabled."""
    if not model.long_enabled:
        raise ValueError("model has no long-term stage")
    a_pool, short, _ = frame_inputs(model, cam, pos)
    ctx = cam.long_query(pos, model.horizon_s, model.causal)
    x = a_pool
    if model.short_enabled:
        x, _ = head_forward(a_pool, short, None, model.theta_short, None, "st")
    return attention_weights(x, ctx.matrix, model.theta_long, times=ctx.times)


def timeline_differentials(model: DetectorModel, cams: Sequence[CameraData], threshold: float = 0.01,
                           positive_only: bool = True) -> List[float]:
    """Time offsets attended by each keyframe's top-scoring detection (seconds)."""
    out: List[float] = []
    for cam in cams:
        for pos in range(len(cam)):
            if positive_only and cam.frames[pos].is_empty:
                continue
            probs = frame_probabilities(model, cam, pos)
            top = int(np.argmax(probs[:, :-1].max(axis=1)))
            w = long_attention_weights(model, cam, pos)
            out.extend(attention_timeline(w, top, float(cam.times[pos]), threshold))
    return out
