"""Brute-force reference implementations used only by the tests."""
import itertools
import math

import numpy as np


def raster_iou_counts(a, b, sub=4):
    """(intersection, union) areas by counting sub-cells of a fine grid.

    ``a``/``b`` are (x1, y1, x2, y2) tuples or None. Exact for corners on
    the 1/sub grid.
    """
    boxes = [x for x in (a, b) if x is not None]
    if not boxes:
        return 0.0, 0.0
    lo_x = math.floor(min(x[0] for x in boxes))
    lo_y = math.floor(min(x[1] for x in boxes))
    hi_x = math.ceil(max(x[2] for x in boxes))
    hi_y = math.ceil(max(x[3] for x in boxes))
    inter = union = 0
    for i in range((hi_x - lo_x) * sub):
        cx = lo_x + (i + 0.5) / sub
        for j in range((hi_y - lo_y) * sub):
            cy = lo_y + (j + 0.5) / sub
            in_a = a is not None and a[0] < cx < a[2] and a[1] < cy < a[3]
            in_b = b is not None and b[0] < cx < b[2] and b[1] < cy < b[3]
            inter += in_a and in_b
            union += in_a or in_b
    cell = 1.0 / (sub * sub)
    return inter * cell, union * cell


def mann_whitney(pos, neg):
    wins = 0.0
    for a in pos:
        for b in neg:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(pos) * len(neg))


def greedy_nms_fixed_point(boxes, scores, thr, iou_fn):
    """Kept set by enumeration: the unique subset K with i in K iff no
    higher-priority member of K overlaps i by more than thr."""
    n = len(boxes)
    prio = sorted(range(n), key=lambda i: (-scores[i], i))
    rank = {i: r for r, i in enumerate(prio)}
    found = []
    for mask in range(1 << n):
        K = {i for i in range(n) if mask >> i & 1}
        ok = True
        for i in range(n):
            blocked = any(rank[j] < rank[i] and iou_fn(boxes[i], boxes[j]) > thr for j in K)
            if (i in K) == blocked:
                ok = False
                break
        if ok:
            found.append(K)
    assert len(found) == 1, found
    return found[0]


def ray_objective(p, rays):
    total = 0.0
    for o, d in rays:
        w = np.asarray(p, float) - o
        r = w - (w @ d) * d
        total += r @ r
    return total


def coordinate_descent_point(rays, start, tol=1e-13, max_sweeps=200000):
    """Minimize the summed squared point-to-line distance one axis at a time.

    Each axis step is the vertex of the parabola through three objective
    evaluations, exact for this quadratic objective.
    """
    p = np.array(start, dtype=float)
    for _ in range(max_sweeps):
        biggest = 0.0
        for k in range(3):
            h = 1.0
            e = np.zeros(3)
            e[k] = h
            f0 = ray_objective(p, rays)
            fp = ray_objective(p + e, rays)
            fm = ray_objective(p - e, rays)
            curv = fp - 2 * f0 + fm
            if curv <= 0:
                continue
            step = -h * (fp - fm) / (2 * curv)
            p[k] += step
            biggest = max(biggest, abs(step))
        if biggest < tol:
            break
    return p


def pairwise_midpoint_centroid(rays):
    mids = []
    for (o1, d1), (o2, d2) in itertools.combinations(rays, 2):
        w = o1 - o2
        c = d1 @ d2
        den = 1 - c * c
        if den < 1e-12:
            continue
        s = (c * (d2 @ w) - d1 @ w) / den
        t = ((d2 @ w) - c * (d1 @ w)) / den
        mids.append(0.5 * (o1 + s * d1 + o2 + t * d2))
    return np.mean(mids, axis=0)


def grid_search_point(rays, center, half=1.0, n=11, levels=30):
    """Zooming dense grid search for the ray-bundle minimizer."""
    c = np.array(center, dtype=float)
    for _ in range(levels):
        axis = np.linspace(-half, half, n)
        best, best_f = c, ray_objective(c, rays)
        for dx in axis:
            for dy in axis:
                for dz in axis:
                    q = c + np.array([dx, dy, dz])
                    fq = ray_objective(q, rays)
                    if fq < best_f:
                        best, best_f = q, fq
        c = best
        half *= 0.5
    return c
