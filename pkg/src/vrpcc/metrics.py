"""Distortion measures between point clouds.

Chamfer distance here is the sum over both directions of the mean squared
nearest-neighbour distance. EMD is the mean Euclidean distance under the best
bijection, solved exactly (Hungarian) or approximately (auction with
epsilon-scaling).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .autodiff import Tape, Tensor
from .geometry import KdIndex, squared_distances
from .pointset import as_points

FSCORE_THRESHOLD = 0.05


def _mean(values) -> float:
    """Correctly rounded mean, independent of element order."""
    return math.fsum(np.ravel(values).tolist()) / np.size(values)


def chamfer(x, y) -> float:
    x, y = as_points(x), as_points(y)
    _, dxy = KdIndex(y).nearest(x)
    _, dyx = KdIndex(x).nearest(y)
    return _mean(dxy) + _mean(dyx)


def nearest_indices(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Index into ``b`` of each row of ``a``'s nearest neighbour, batched ``(B, n, 3)``."""
    return np.stack([np.argmin(squared_distances(ai, bi), axis=1) for ai, bi in zip(a, b)])


def chamfer_tensor(tape: Tape, pred: Tensor, target: np.ndarray) -> Tensor:
    """Batch-mean Chamfer distance, differentiable w.r.t. ``pred`` through the NN assignments."""
    target = np.asarray(target, dtype=np.float64)
    p_idx = nearest_indices(pred.data, target)     # pred -> target
    t_idx = nearest_indices(target, pred.data)     # target -> pred
    d1 = tape.sub(pred, target[np.arange(len(target))[:, None], p_idx])
    d2 = tape.sub(tape.gather_rows(pred, t_idx, batched=True), target)
    term1 = tape.reduce_mean(tape.reduce_sum(tape.square(d1), axis=-1), axis=1)
    term2 = tape.reduce_mean(tape.reduce_sum(tape.square(d2), axis=-1), axis=1)
    return tape.reduce_mean(tape.add(term1, term2))


def _check_equal(x, y, op):
    if len(x) != len(y):
        raise ValueError(f"{op}: clouds must have equal size, got {len(x)} and {len(y)}")


def _cost(x, y) -> np.ndarray:
    return np.sqrt(squared_distances(x, y))


def emd_exact(x, y) -> float:
    x, y = as_points(x), as_points(y)
    _check_equal(x, y, "emd_exact")
    cost = _cost(x, y)
    rows, cols = linear_sum_assignment(cost)
    return _mean(cost[rows, cols])


def auction_assignment(cost: np.ndarray, iterations: int = 16, factor: float = 5.0) -> np.ndarray:
    """Approximate min-cost perfect matching; returns the column of each row.

    Each epsilon-scaling phase reuses the previous prices and divides epsilon by
    ``factor``. The cheapest complete assignment over all phases is returned, so
    more iterations never give a worse result. Epsilon stops shrinking at a
    floor relative to the cost scale, below which prices could no longer move.
    """
    n = len(cost)
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    benefit = -cost
    prices = np.zeros(n)
    scale = max(float(cost.max()), 1e-12)
    eps = scale / factor
    floor = scale * 1e-11
    best, best_val = None, np.inf
    rows = np.arange(n)
    for _ in range(iterations):
        owner = np.full(n, -1)
        assigned = np.full(n, -1)
        free = rows
        while free.size:
            vals = benefit[free] - prices
            j1 = np.argmax(vals, axis=1)
            v1 = vals[np.arange(len(free)), j1]
            vals[np.arange(len(free)), j1] = -np.inf
            v2 = vals.max(axis=1)
            bids = prices[j1] + (v1 - v2) + eps
            # highest bid per object wins; ties go to the lowest bidder
            order = np.lexsort((free, -bids, j1))
            j_sorted = j1[order]
            first = np.ones(len(order), dtype=bool)
            first[1:] = j_sorted[1:] != j_sorted[:-1]
            win = order[first]
            objs, bidders = j1[win], free[win]
            prev = owner[objs]
            assigned[prev[prev >= 0]] = -1
            owner[objs] = bidders
            assigned[bidders] = objs
            prices[objs] = bids[win]
            free = rows[assigned < 0]
        val = float(cost[rows, assigned].sum())
        if val < best_val:
            best, best_val = assigned.copy(), val
        if eps <= floor:
            break
        eps = max(eps / factor, floor)
    return best


def emd_approx(x, y, iterations: int = 16) -> float:
    x, y = as_points(x), as_points(y)
    _check_equal(x, y, "emd_approx")
    cost = _cost(x, y)
    return _mean(cost[np.arange(len(x)), auction_assignment(cost, iterations)])


def emd_tensor(tape: Tape, pred: Tensor, target: np.ndarray, iterations: int = 8) -> Tensor:
    """Batch-mean auction EMD, differentiable w.r.t. ``pred`` through the final matching."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"emd: shapes {pred.shape} and {target.shape} differ")
    match = np.stack([auction_assignment(_cost(t, p), iterations) for p, t in zip(pred.data, target)])
    diff = tape.sub(tape.gather_rows(pred, match, batched=True), target)
    dist = tape.sqrt(tape.add(tape.reduce_sum(tape.square(diff), axis=-1), 1e-12))
    return tape.reduce_mean(dist)


def fscore(x, y, d: float = FSCORE_THRESHOLD) -> float:
    """Harmonic mean of precision (``y`` near ``x``) and recall (``x`` near ``y``)."""
    if d <= 0:
        raise ValueError("fscore threshold must be positive")
    x, y = as_points(x), as_points(y)
    _, dyx = KdIndex(x).nearest(y)
    _, dxy = KdIndex(y).nearest(x)
    precision = float(np.mean(dyx <= d * d))
    recall = float(np.mean(dxy <= d * d))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def _errors(x, y):
    """Error vectors y->x (with the matched reference index) and x->y."""
    ix, _ = KdIndex(x).nearest(y)
    iy, _ = KdIndex(y).nearest(x)
    return y - x[ix], ix, x - y[iy]


def p2p(x, y) -> float:
    x, y = as_points(x), as_points(y)
    e_yx, _, e_xy = _errors(x, y)
    return max(float(np.sqrt(np.mean((e_yx**2).sum(axis=1)))),
               float(np.sqrt(np.mean((e_xy**2).sum(axis=1)))))


def p2plane(x, y, normals) -> float:
    """Symmetrised RMS of nearest-neighbour errors projected on ``x``'s normals.

    Errors of ``y`` against ``x`` use the matched reference point's normal; errors
    of ``x`` against ``y`` use the normal at the ``x`` point itself.
    """
    if normals is None:
        raise ValueError("p2plane needs reference normals")
    x, y = as_points(x), as_points(y)
    normals = np.asarray(normals, dtype=np.float64)
    if normals.shape != x.shape:
        raise ValueError(f"p2plane: normals shape {normals.shape} != cloud shape {x.shape}")
    e_yx, ix, e_xy = _errors(x, y)
    a = (e_yx * normals[ix]).sum(axis=1)
    b = (e_xy * normals).sum(axis=1)
    return max(float(np.sqrt(np.mean(a * a))), float(np.sqrt(np.mean(b * b))))


@dataclass(frozen=True)
class MetricReport:
    cd: float
    emd: float
    fscore: float
    p2p: float
    p2plane: float


def compare(x, y, normals=None, d: float = FSCORE_THRESHOLD, emd: str = "auto") -> MetricReport:
    """All metrics for one pair; EMD is exact up to 512 points and needs equal sizes."""
    from .geometry import estimate_normals

    x, y = as_points(x), as_points(y)
    if normals is None:
        normals = estimate_normals(x, min(16, len(x))) if len(x) >= 3 else np.tile([0.0, 0.0, 1.0], (len(x), 1))
    if len(x) != len(y):
        emd_val = float("nan")
    elif emd == "exact" or (emd == "auto" and len(x) <= 512):
        emd_val = emd_exact(x, y)
    else:
        emd_val = emd_approx(x, y)
    return MetricReport(chamfer(x, y), emd_val, fscore(x, y, d), p2p(x, y), p2plane(x, y, normals))
