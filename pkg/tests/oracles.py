"""Independent reference implementations used by the tests.

Everything here is written with explicit Python loops over scalars and shares
no code with the package beyond the plain data classes.
"""

import itertools
import math

import numpy as np


def loop_affine(x, weight, bias):
    out = []
    for row in x:
        out.append([bias[j] + sum(row[k] * weight[j][k] for k in range(len(row))) for j in range(len(weight))])
    return out


def loop_attention(a_pool, b, k_w, k_b, q_w, q_b, v_w, v_b, f_w, f_b, temperature):
    """Weights and context feature by explicit loops.

    Returns ``(w, f_context)`` as nested lists.
    """
    keys = loop_affine(a_pool, k_w, k_b)
    queries = loop_affine(b, q_w, q_b)
    values = loop_affine(b, v_w, v_b)
    d_attn = len(k_w)
    scale = temperature * math.sqrt(d_attn)
    weights = []
    for key in keys:
        logits = [sum(key[c] * q[c] for c in range(d_attn)) / scale for q in queries]
        top = max(logits)
        exps = [math.exp(z - top) for z in logits]
        total = sum(exps)
        weights.append([e / total for e in exps])
    mixed = []
    for w in weights:
        mixed.append([sum(w[j] * values[j][c] for j in range(len(values))) for c in range(len(values[0]))])
    return weights, loop_affine(mixed, f_w, f_b)


def _iou(a, b):
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.width * a.height + b.width * b.height - inter
    return inter / union if union > 0 else 0.0


def _sort_key(d):
    b = d.box
    return (-d.score, d.frame_id, b.x_center, b.y_center, b.width, b.height, d.class_id)


def _ap(flags, n_pos):
    if n_pos == 0:
        return 0.0
    tp = 0
    points = []
    for i, f in enumerate(flags, 1):
        tp += f
        points.append((tp / n_pos, tp / i))
    # all-points interpolation: for every recall level r_k reached, take the
    # best precision at any recall >= r_k, integrate over recall steps.
    terms, prev_r = [], 0.0
    for k, (r, _) in enumerate(points):
        if r > prev_r:
            terms.append((r - prev_r) * max(p for _, p in points[k:]))
            prev_r = r
    return math.fsum(terms)


def exhaustive_class_flags(dets, gts, thr=0.5):
    """True-positive flags (in rank order) by enumerating every assignment.

    Per frame, every one-to-one partial map from detections to ground truth
    with IoU >= ``thr`` on matched pairs is generated.  The chosen map is the
    lexicographic maximum over detections in rank order of
    ``(IoU, -gt_index)`` for a matched detection and ``(-1, 0)`` for an
    unmatched one: higher-ranked detections get first pick of the best
    overlap, ties going to the lowest ground-truth index.
    """
    order = sorted(dets, key=_sort_key)
    flags = {}
    for fid in sorted({d.frame_id for d in order}):
        fd = [d for d in order if d.frame_id == fid]
        fg = [g for g in gts if g.frame_id == fid]
        best_key, best = None, None
        for choice in itertools.product(list(range(len(fg))) + [None], repeat=len(fd)):
            used = [c for c in choice if c is not None]
            if len(used) != len(set(used)):
                continue
            key = []
            valid = True
            for d, c in zip(fd, choice):
                if c is None:
                    key.append((-1.0, 0))
                    continue
                o = _iou(d.box, fg[c].box)
                if o < thr:
                    valid = False
                    break
                key.append((o, -c))
            if valid and (best_key is None or key > best_key):
                best_key, best = key, choice
        for d, c in zip(fd, best):
            flags[id(d)] = c is not None
    return [flags[id(d)] for d in order]


def exhaustive_map(dets, gts, classes, thr=0.5):
    aps = []
    for c in classes:
        cg = [g for g in gts if g.class_id == c]
        if not cg:
            continue
        cd = [d for d in dets if d.class_id == c]
        aps.append(_ap(exhaustive_class_flags(cd, cg, thr), len(cg)))
    return sum(aps) / len(aps) if aps else 0.0
