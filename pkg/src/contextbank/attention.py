"""Dot-product attention over memory with per-channel bias add-back.

For keyframe pooled features ``a_pool`` (n x d_feat) and context rows ``b``
(m x d0)::

    w = softmax(k(a_pool) @ q(b).T / (T * sqrt(d_attn)))      # n x m
    F = f(w @ v(b))                                          # n x d_feat
    A' = A + F[:, None, None, :]

Short-term and long-term stages have their own parameters and are applied in
that order.  Memory rows are constants: no gradient is produced for them.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .encoding import BoxPx, Timestamp
from .numkit import LinearMap, ShapeError, linear_backward, mean_pool_spatial, softmax_backward, softmax_rows

DEFAULT_TEMPERATURE = 0.01
MODES = ("sf", "st", "lt", "st+lt")
_MAPS = ("k", "q", "v", "f")


class AttentionConfigError(ValueError):
    pass


@dataclass
class AttentionParams:
    k_map: LinearMap
    q_map: LinearMap
    v_map: LinearMap
    f_map: LinearMap
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if not self.temperature > 0:
            raise AttentionConfigError("temperature must be positive")
        if self.k_map.d_out != self.q_map.d_out:
            raise ShapeError("key and query maps must share d_attn")
        if self.v_map.d_in != self.q_map.d_in:
            raise ShapeError("query and value maps must read the same context rows")
        if self.f_map.d_in != self.v_map.d_out or self.f_map.d_out != self.k_map.d_in:
            raise ShapeError("f must map d_attn back to the keyframe feature depth")

    @property
    def d_feat(self) -> int:
        return self.k_map.d_in

    @property
    def d_ctx(self) -> int:
        return self.q_map.d_in

    @property
    def d_attn(self) -> int:
        return self.k_map.d_out

    @classmethod
    def init(cls, d_feat: int, d_ctx: int, rng: np.random.Generator, d_attn: Optional[int] = None,
             temperature: float = DEFAULT_TEMPERATURE, scheme: str = "glorot") -> "AttentionParams":
        """Fresh parameters.

        ``scheme="glorot"`` draws all four maps Glorot-uniform.  ``"identity"``
        starts from plain embedding similarity: every map is a (rectangular)
        identity, so q and v read the embedding part of a memory row and ignore
        its code until training says otherwise.
        """
        d_attn = d_feat if d_attn is None else d_attn
        if scheme == "glorot":
            return cls(LinearMap.init(d_feat, d_attn, rng), LinearMap.init(d_ctx, d_attn, rng),
                       LinearMap.init(d_ctx, d_attn, rng), LinearMap.init(d_attn, d_feat, rng), temperature)
        if scheme == "identity":
            return cls(LinearMap.identity(d_feat, d_attn), LinearMap.identity(d_ctx, d_attn),
                       LinearMap.identity(d_ctx, d_attn), LinearMap.identity(d_attn, d_feat), temperature)
        raise AttentionConfigError(f"unknown init scheme {scheme!r}; expected 'glorot' or 'identity'")

    @classmethod
    def zeros(cls, d_feat: int, d_ctx: int, d_attn: Optional[int] = None,
              temperature: float = DEFAULT_TEMPERATURE) -> "AttentionParams":
        d_attn = d_feat if d_attn is None else d_attn
        return cls(LinearMap.zeros(d_feat, d_attn), LinearMap.zeros(d_ctx, d_attn),
                   LinearMap.zeros(d_ctx, d_attn), LinearMap.zeros(d_attn, d_feat), temperature)

    def maps(self):
        return {"k": self.k_map, "q": self.q_map, "v": self.v_map, "f": self.f_map}

    def to_dict(self, prefix: str = "") -> Dict[str, np.ndarray]:
        out = {}
        for name, lin in self.maps().items():
            out[f"{prefix}{name}.weight"] = lin.weight
            out[f"{prefix}{name}.bias"] = lin.bias
        return out

    @classmethod
    def from_dict(cls, values, prefix: str = "", temperature: float = DEFAULT_TEMPERATURE) -> "AttentionParams":
        lins = [LinearMap(values[f"{prefix}{n}.weight"], values[f"{prefix}{n}.bias"]) for n in _MAPS]
        return cls(*lins, temperature=temperature)


@dataclass
class ProposalBatch:
    """Keyframe proposal features ``A`` (n x h x w x d) and their boxes."""

    features: np.ndarray
    boxes: Sequence[BoxPx] = ()
    timestamp: Optional[Timestamp] = None
    time_s: float = 0.0
    frame_id: int = -1
    scores: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 4:
            raise ShapeError(f"proposal features must be (n, h, w, d), got {self.features.shape}")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def pooled(self) -> np.ndarray:
        if self.n == 0:
            return np.zeros((0, self.features.shape[3]))
        return mean_pool_spatial(self.features)


@dataclass(frozen=True)
class AttentionWeights:
    w: np.ndarray
    times: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def empty(self) -> bool:
        return self.w.shape[1] == 0


@dataclass(frozen=True)
class ContextBias:
    f_context: np.ndarray


def _scale(p: AttentionParams) -> float:
    return p.temperature * np.sqrt(p.d_attn)


def attention_weights(a_pool: np.ndarray, b: np.ndarray, p: AttentionParams,
                      times: Optional[np.ndarray] = None) -> AttentionWeights:
    """Row-stochastic weights of each keyframe proposal over the memory rows.

    With no memory rows the result has zero columns; callers treat that as
    "skip this stage".
    """
    a_pool = np.asarray(a_pool, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    times = np.zeros(b.shape[0]) if times is None else np.asarray(times)
    if b.shape[0] == 0:
        return AttentionWeights(np.zeros((a_pool.shape[0], 0)), times)
    logits = p.k_map(a_pool) @ p.q_map(b).T
    return AttentionWeights(softmax_rows(logits, _scale(p)), times)


def context_feature(w: AttentionWeights, b: np.ndarray, p: AttentionParams) -> ContextBias:
    b = np.asarray(b, dtype=np.float64)
    if w.w.shape[1] != b.shape[0]:
        raise ShapeError(f"weights cover {w.w.shape[1]} rows but memory has {b.shape[0]}")
    return ContextBias(p.f_map(w.w @ p.v_map(b)))


def attention_block(a: ProposalBatch, b: np.ndarray, p: AttentionParams) -> ProposalBatch:
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] == 0 or a.n == 0:
        return replace(a, features=a.features.copy())
    w = attention_weights(a.pooled, b, p)
    bias = context_feature(w, b, p).f_context
    return replace(a, features=a.features + bias[:, None, None, :])


# Pooled-level forward/backward used for training. Because the bias is added
# uniformly over the spatial grid, pooling commutes with the add-back and the
# whole head can run on (n, d) matrices.

@dataclass
class StageCache:
    a_pool: np.ndarray
    b: np.ndarray
    keys: np.ndarray
    queries: np.ndarray
    values: np.ndarray
    w: np.ndarray
    mixed: np.ndarray


def stage_forward(a_pool: np.ndarray, b: np.ndarray, p: AttentionParams, queries: Optional[np.ndarray] = None,
                  values: Optional[np.ndarray] = None) -> Tuple[np.ndarray, Optional[StageCache]]:
    """One attention stage on pooled features.

    ``queries``/``values`` may carry ``q(b)``/``v(b)`` computed ahead of time
    (e.g. once for a whole bank, then sliced per keyframe).
    """
    if b.shape[0] == 0 or a_pool.shape[0] == 0:
        return a_pool, None
    keys = p.k_map(a_pool)
    queries = p.q_map(b) if queries is None else queries
    values = p.v_map(b) if values is None else values
    w = softmax_rows(keys @ queries.T, _scale(p))
    mixed = w @ values
    out = a_pool + p.f_map(mixed)
    return out, StageCache(a_pool, b, keys, queries, values, w, mixed)


def _accumulate(grads: Dict[str, np.ndarray], key: str, value: np.ndarray) -> None:
    if key in grads:
        grads[key] = grads[key] + value
    else:
        grads[key] = value


def stage_backward_rows(grad_out: np.ndarray, cache: StageCache, p: AttentionParams,
                        grads: Dict[str, np.ndarray], prefix: str):
    """Backward pass stopping at the projected memory rows.

    Accumulates k and f parameter gradients into ``grads`` and returns
    ``(d a_pool, d q(b), d v(b))``.
    """
    g_mixed, g_fw, g_fb = linear_backward(cache.mixed, p.f_map, grad_out)
    g_w = g_mixed @ cache.values.T
    g_values = cache.w.T @ g_mixed
    g_logits = softmax_backward(cache.w, g_w) / _scale(p)
    g_keys = g_logits @ cache.queries
    g_queries = g_logits.T @ cache.keys
    g_a_from_k, g_kw, g_kb = linear_backward(cache.a_pool, p.k_map, g_keys)
    for name, gw, gb in (("k", g_kw, g_kb), ("f", g_fw, g_fb)):
        _accumulate(grads, f"{prefix}{name}.weight", gw)
        _accumulate(grads, f"{prefix}{name}.bias", gb)
    return grad_out + g_a_from_k, g_queries, g_values


def stage_backward(grad_out: np.ndarray, cache: Optional[StageCache], p: AttentionParams,
                   grads: Dict[str, np.ndarray], prefix: str) -> np.ndarray:
    """Accumulate parameter gradients into ``grads``; return d loss / d a_pool."""
    if cache is None:
        return grad_out
    g_a, g_queries, g_values = stage_backward_rows(grad_out, cache, p, grads, prefix)
    # Memory rows are frozen: only the q/v parameter gradients are kept.
    for name, g in (("q", g_queries), ("v", g_values)):
        _accumulate(grads, f"{prefix}{name}.weight", g.T @ cache.b)
        _accumulate(grads, f"{prefix}{name}.bias", g.sum(axis=0))
    return g_a


# Masked variant: many keyframes share one memory matrix, each restricted to
# its own rows by a boolean mask.  A row with no admissible memory gets no
# bias at all, exactly like the per-keyframe empty-memory fallback.

@dataclass
class MaskedStageCache:
    a_pool: np.ndarray
    keys: np.ndarray
    queries: np.ndarray
    values: np.ndarray
    w: np.ndarray
    mixed: np.ndarray
    has_memory: np.ndarray


def masked_stage_forward(a_pool: np.ndarray, queries: np.ndarray, values: np.ndarray, mask: np.ndarray,
                         p: AttentionParams) -> Tuple[np.ndarray, MaskedStageCache]:
    """Attention of every row of ``a_pool`` over the admissible (``mask``) memory rows.

    ``queries``/``values`` are the projected memory rows ``q(b)``, ``v(b)``.
    """
    keys = p.k_map(a_pool)
    has = mask.any(axis=1)
    logits = np.where(mask, keys @ queries.T, -np.inf)
    logits[~has] = 0.0
    w = softmax_rows(logits, _scale(p)) if logits.shape[1] else np.zeros_like(logits)
    w[~has] = 0.0
    mixed = w @ values
    out = a_pool + p.f_map(mixed) * has[:, None]
    return out, MaskedStageCache(a_pool, keys, queries, values, w, mixed, has)


def masked_stage_backward(grad_out: np.ndarray, cache: MaskedStageCache, p: AttentionParams,
                          grads: Dict[str, np.ndarray], prefix: str):
    """Returns ``(d a_pool, d queries, d values)``; k/f gradients go into ``grads``."""
    g_f = grad_out * cache.has_memory[:, None]
    g_mixed, g_fw, g_fb = linear_backward(cache.mixed, p.f_map, g_f)
    g_w = g_mixed @ cache.values.T
    g_values = cache.w.T @ g_mixed
    g_logits = softmax_backward(cache.w, g_w) / _scale(p)
    g_keys = g_logits @ cache.queries
    g_queries = g_logits.T @ cache.keys
    g_a_from_k, g_kw, g_kb = linear_backward(cache.a_pool, p.k_map, g_keys)
    for name, gw, gb in (("k", g_kw, g_kb), ("f", g_fw, g_fb)):
        _accumulate(grads, f"{prefix}{name}.weight", gw)
        _accumulate(grads, f"{prefix}{name}.bias", gb)
    return grad_out + g_a_from_k, g_queries, g_values


def _check_mode(mode: str) -> str:
    mode = mode.lower()
    if mode not in MODES:
        raise AttentionConfigError(f"unknown attention mode {mode!r}; expected one of {MODES}")
    return mode


def uses_short(mode: str) -> bool:
    return _check_mode(mode) in ("sf", "st", "st+lt")


def uses_long(mode: str) -> bool:
    return _check_mode(mode) in ("lt", "st+lt")


@dataclass
class HeadCache:
    short: Optional[StageCache]
    long: Optional[StageCache]


def head_forward(a_pool: np.ndarray, short: Optional[np.ndarray], long: Optional[np.ndarray],
                 theta_short: Optional[AttentionParams], theta_long: Optional[AttentionParams],
                 mode: str, long_queries: Optional[np.ndarray] = None,
                 long_values: Optional[np.ndarray] = None) -> Tuple[np.ndarray, HeadCache]:
    """Sequential short-then-long attention on pooled features."""
    mode = _check_mode(mode)
    x = np.asarray(a_pool, dtype=np.float64)
    c_short = c_long = None
    if uses_short(mode):
        if short is None or theta_short is None:
            raise AttentionConfigError(f"mode {mode!r} needs short-term memory and parameters")
        x, c_short = stage_forward(x, short, theta_short)
    if uses_long(mode):
        if long is None or theta_long is None:
            raise AttentionConfigError(f"mode {mode!r} needs a long-term query result and parameters")
        x, c_long = stage_forward(x, long, theta_long, long_queries, long_values)
    return x, HeadCache(c_short, c_long)


def head_backward(grad_out: np.ndarray, cache: HeadCache, theta_short: Optional[AttentionParams],
                  theta_long: Optional[AttentionParams], grads: Dict[str, np.ndarray],
                  long_rows: bool = False):
    """Backward through both stages.

    With ``long_rows`` the long stage stops at its projected memory rows and
    the return value is ``(d a_pool, (d q(b), d v(b)) or None)``.
    """
    g = grad_out
    rows = None
    if cache.long is not None:
        if long_rows:
            g, gq, gv = stage_backward_rows(g, cache.long, theta_long, grads, "long.")
            rows = (gq, gv)
        else:
            g = stage_backward(g, cache.long, theta_long, grads, "long.")
    if cache.short is not None:
        g = stage_backward(g, cache.short, theta_short, grads, "short.")
    return (g, rows) if long_rows else g


def attention_grad(grad_out: np.ndarray, cache: HeadCache, theta_short: Optional[AttentionParams] = None,
                   theta_long: Optional[AttentionParams] = None) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """Gradients for every k/q/v/f weight and bias of the enabled stages, and for ``a_pool``.

    Keys are ``"short.k.weight"``, ``"long.f.bias"`` and so on.  Stages skipped
    in the forward pass (disabled or empty memory) get zero gradients when
    their parameters are supplied.
    """
    grads: Dict[str, np.ndarray] = {}
    g_a = head_backward(grad_out, cache, theta_short, theta_long, grads)
    for prefix, theta in (("short.", theta_short), ("long.", theta_long)):
        if theta is None:
            continue
        for key, value in theta.to_dict(prefix).items():
            grads.setdefault(key, np.zeros_like(value))
    return grads, g_a


def context_head(a: ProposalBatch, m_short, m_long, theta_short: Optional[AttentionParams],
                 theta_long: Optional[AttentionParams], mode: str) -> ProposalBatch:
    """Apply the enabled attention stages to a keyframe's proposal features.

    ``m_short`` is a :class:`~contextbank.membank.ShortTermMemory` (or a raw
    matrix); ``m_long`` is a bank query result (or a raw matrix).  In ``sf``
    mode the short-term memory must hold only the keyframe.
    """
    mode = _check_mode(mode)
    short = getattr(m_short, "matrix", m_short)
    long = getattr(m_long, "matrix", m_long)
    if mode == "sf" and m_short is not None and len(getattr(m_short, "frame_ids", (a.frame_id,))) != 1:
        raise AttentionConfigError("sf mode restricts short-term memory to the keyframe")
    out = a
    if uses_short(mode):
        if short is None or theta_short is None:
            raise AttentionConfigError(f"mode {mode!r} needs short-term memory and parameters")
        out = attention_block(out, short, theta_short)
    if uses_long(mode):
        if long is None or theta_long is None:
            raise AttentionConfigError(f"mode {mode!r} needs a long-term query result and parameters")
        out = attention_block(out, long, theta_long)
    return out


def attention_timeline(weights: AttentionWeights, row: int, keyframe_time: float,
                       threshold: float = 0.01) -> list:
    """Time offsets (entry time minus keyframe time) of memory rows attended at >= threshold."""
    if weights.w.size == 0 or weights.empty:
        return []
    w = weights.w[row]
    keep = np.nonzero(w >= threshold)[0]
    return [float(weights.times[j] - keyframe_time) for j in keep]
