"""Frozen surrogate for the first-stage detector: proposals, boxes, features, scores.

Appearance model (all vectors live in ``R^d_feat``):

* class ``c`` object: ``quality * (proto[c] + identity_strength * ident[camera, c, individual]) + noise``
* distractor: ``lighting * (mimic_strength * proto[mimic] + texture_strength * texture + own)``
  ``+ noise``, where ``texture`` comes from a small set of background types shared
  by all cameras and ``own`` is fixed per camera and distractor
* background proposal: ``background_strength * texture[random type] + noise``

``noise`` has expected norm ``noise``.  Embeddings never depend on the
horizontal box position, so mirroring a frame leaves its features unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..attention import ProposalBatch
from ..encoding import BoxPx
from ..evalkit import iou
from ..membank import Detection
from .world import Frame


@dataclass(frozen=True)
class ExtractorConfig:
    d_feat: int = 32
    n_classes: int = 4
    n_prop: int = 8
    grid: int = 2
    noise: float = 0.6
    class_similarity: float = 0.5   # cosine between any two class prototypes
    identity_strength: float = 0.5
    mimic_strength: float = 0.5
    texture_strength: float = 0.6
    own_strength: float = 0.3
    n_textures: int = 3
    background_strength: float = 0.5
    box_jitter: float = 0.04
    score_gain: float = 8.0
    score_offset: float = 0.35
    feature_scale: float = 1.0      # multiplies every emitted feature (scores use the unscaled embedding)
    seed: int = 0


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


class SurrogateExtractor:
    """Deterministic, frozen feature provider.

    Output for a frame depends only on ``(seed, camera, frame index)``, so
    extracting a frame twice gives identical results.
    """

    def __init__(self, config: ExtractorConfig = ExtractorConfig()):
        self.config = config
        rng = np.random.default_rng([config.seed, 7919])
        d = config.d_feat
        shared = _unit(rng.normal(size=d))
        specific = _unit(rng.normal(size=(config.n_classes, d)))
        s = np.sqrt(config.class_similarity)
        protos = _unit(s * shared + np.sqrt(1.0 - config.class_similarity) * specific)
        self.prototypes = protos
        self.textures = _unit(rng.normal(size=(config.n_textures, d)))
        self.background = _unit(rng.normal(size=d))
        self._camera_cache: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
        for arr in (self.prototypes, self.textures, self.background):
            arr.setflags(write=False)

    @property
    def frozen(self) -> bool:
        return True

    def _camera(self, cam: int, n_slots: int = 8):
        """Per-camera random directions: individual identities and distractor-specific parts."""
        if cam not in self._camera_cache:
            rng = np.random.default_rng([self.config.seed, 104729, cam])
            ident = _unit(rng.normal(size=(self.config.n_classes, n_slots, self.config.d_feat)))
            own = _unit(rng.normal(size=(n_slots, self.config.d_feat)))
            self._camera_cache[cam] = (ident, own)
        return self._camera_cache[cam]

    def distractor_prototype(self, cam: int, d_idx: int, mimic_class: int, texture: int) -> np.ndarray:
        c = self.config
        _, own = self._camera(cam)
        return (c.mimic_strength * self.prototypes[mimic_class]
                + c.texture_strength * self.textures[texture % c.n_textures]
                + c.own_strength * own[d_idx % len(own)])

    def object_prototype(self, cam: int, class_id: int, individual: int = 0) -> np.ndarray:
        ident, _ = self._camera(cam)
        return self.prototypes[class_id] + self.config.identity_strength * ident[class_id, individual % ident.shape[1]]

    def objectness(self, emb: np.ndarray) -> np.ndarray:
        c = self.config
        proj = np.atleast_2d(emb) @ self.prototypes.T
        return 1.0 / (1.0 + np.exp(-c.score_gain * (proj.max(axis=1) - c.score_offset)))

    def _noise(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.normal(size=(n, self.config.d_feat)) * (self.config.noise / np.sqrt(self.config.d_feat))

    def extract(self, frame: Frame, distractors=()) -> "Extraction":
        """Proposals for one frame: objects first, then distractors, then background fill.

        ``distractors`` is the camera's ``CameraTrace.distractors`` (needed for
        distractor appearance).
        """
        c = self.config
        rng = np.random.default_rng([c.seed, frame.camera_index, frame.frame_index])
        W, H = frame.image_width, frame.image_height
        embs, boxes, labels, sources = [], [], [], []
        for inst in frame.instances[: c.n_prop]:
            if inst.is_distractor:
                d = distractors[inst.distractor]
                base = inst.quality * self.distractor_prototype(frame.camera_index, inst.distractor,
                                                                d.mimic_class, d.texture)
                labels.append(c.n_classes)
            else:
                base = inst.quality * self.object_prototype(frame.camera_index, inst.class_id, inst.individual)
                labels.append(inst.class_id)
            embs.append(base)
            x, y, w, h = inst.box
            jit = rng.normal(0.0, c.box_jitter, size=4)
            bw, bh = w * (1 + jit[2]), h * (1 + jit[3])
            boxes.append(BoxPx(float(x + w * jit[0]), float(y + h * jit[1]), float(bw), float(bh), float(W), float(H)))
            sources.append(inst.key)
        while len(embs) < c.n_prop:
            t = int(rng.integers(c.n_textures))
            embs.append(c.background_strength * self.textures[t])
            w, h = float(rng.uniform(30, 160)), float(rng.uniform(30, 120))
            x, y = float(rng.uniform(w / 2, W - w / 2)), float(rng.uniform(h / 2, H - h / 2))
            boxes.append(BoxPx(x, y, w, h, float(W), float(H)))
            labels.append(c.n_classes)
            sources.append(None)
        emb = np.array(embs) + self._noise(rng, c.n_prop)
        scores = self.objectness(emb)
        emb = emb * c.feature_scale
        cells = rng.normal(size=(c.n_prop, c.grid, c.grid, c.d_feat)) * (c.noise * c.feature_scale / np.sqrt(c.d_feat))
        cells -= cells.mean(axis=(1, 2), keepdims=True)
        features = emb[:, None, None, :] + cells
        batch = ProposalBatch(features, tuple(boxes), frame.timestamp, frame.time_s, frame.frame_id, scores)
        return Extraction(batch, emb, np.array(labels), tuple(sources))

    def crop(self, frame: Frame, box: BoxPx, distractors=(), extraction: Optional["Extraction"] = None) -> np.ndarray:
        """Pooled feature of ``frame`` at a fixed box location (same-location crop).

        A crop that lands on a proposal (IoU >= 0.5) sees that proposal's
        feature; otherwise it sees background texture.
        """
        ex = extraction if extraction is not None else self.extract(frame, distractors)
        best, best_iou = None, 0.5
        for i, (b, src) in enumerate(zip(ex.batch.boxes, ex.sources)):
            if src is None:
                continue
            o = iou(b, box)
            if o >= best_iou:
                best, best_iou = i, o
        if best is not None:
            return ex.pooled[best].copy()
        c = self.config
        rng = np.random.default_rng([c.seed, frame.camera_index, frame.frame_index,
                                     int(box.x_center), int(box.y_center), 31337])
        t = int(rng.integers(c.n_textures))
        return (c.background_strength * self.textures[t] + self._noise(rng, 1)[0]) * c.feature_scale


@dataclass(frozen=True)
class Extraction:
    batch: ProposalBatch
    pooled: np.ndarray
    labels: np.ndarray
    sources: Tuple[Optional[int], ...]

    def detections(self) -> List[Detection]:
        return [Detection(self.pooled[i], self.batch.boxes[i], float(self.batch.scores[i]))
                for i in range(len(self.pooled))]


def surrogate_extract(frame: Frame, extractor: SurrogateExtractor, distractors=()) -> ProposalBatch:
    return extractor.extract(frame, distractors).batch
