"""Planar convex hull (Quickhull) and Ramer-Douglas-Peucker reduction.

Both operate on index lists so callers can map survivors back to the
hypotheses they came from.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def quickhull(points: Sequence[Sequence[float]]) -> list[int]:
    """Indices of the convex-hull vertices in counter-clockwise order.

    Collinear boundary points and duplicates are not reported as vertices.
    Fewer than three distinct points yield the distinct extreme points.
    """
    pts = [(float(p[0]), float(p[1])) for p in points]
    n = len(pts)
    if n == 0:
        return []
    # lowest index wins among duplicates
    uniq = []
    seen = {}
    for i, p in enumerate(pts):
        if p not in seen:
            seen[p] = i
            uniq.append(i)
    if len(uniq) == 1:
        return [uniq[0]]
    left = min(uniq, key=lambda i: (pts[i][0], pts[i][1]))
    right = max(uniq, key=lambda i: (pts[i][0], pts[i][1]))
    above, below = [], []
    for i in uniq:
        if i in (left, right):
            continue
        c = _cross(pts[left], pts[right], pts[i])
        if c > 0:
            above.append(i)
        elif c < 0:
            below.append(i)
    hull = [left]
    _partition(pts, below, left, right, hull)
    hull.append(right)
    _partition(pts, above, right, left, hull)
    return hull


def _partition(pts, idx, a, b, hull) -> None:
    # idx all lie strictly right of the directed line b->a, i.e. left of a->b
    # when walking counter-clockwise from a to b
    if not idx:
        return
    far, far_d = None, 0.0
    for i in idx:
        d = -_cross(pts[a], pts[b], pts[i])
        if d > far_d:
            far, far_d = i, d
    if far is None:
        return
    outside_a = [i for i in idx if -_cross(pts[a], pts[far], pts[i]) > 0]
    outside_b = [i for i in idx if -_cross(pts[far], pts[b], pts[i]) > 0]
    _partition(pts, outside_a, a, far, hull)
    hull.append(far)
    _partition(pts, outside_b, far, b, hull)


def _segment_distance(p, a, b) -> float:
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    L2 = dx * dx + dy * dy
    if L2 == 0.0:
        return math.hypot(p[0] - ax, p[1] - ay)
    return abs(dx * (p[1] - ay) - dy * (p[0] - ax)) / math.sqrt(L2)


def rdp_chain(points, epsilon: float) -> list[int]:
    """Classic RDP on an open polyline; returns kept positions (endpoints kept)."""
    n = len(points)
    if n < 3:
        return list(range(n))
    keep = [False] * n
    keep[0] = keep[-1] = True
    stack = [(0, n - 1)]
    while stack:
        s, e = stack.pop()
        dmax, imax = -1.0, -1
        for i in range(s + 1, e):
            d = _segment_distance(points[i], points[s], points[e])
            if d > dmax:
                dmax, imax = d, i
        if imax >= 0 and dmax > epsilon:
            keep[imax] = True
            stack.append((s, imax))
            stack.append((imax, e))
    return [i for i in range(n) if keep[i]]


def rdp_reduce(vertices: Sequence[Sequence[float]], epsilon: float) -> list[int]:
    """RDP on a closed ring given in hull order.

    The ring is cut at its two mutually farthest vertices; each resulting chain
    is simplified separately. Returns positions into ``vertices`` in ring order.
    """
    pts = [(float(p[0]), float(p[1])) for p in vertices]
    n = len(pts)
    if n < 3:
        return list(range(n))
    best, a, b = -1.0, 0, 1
    for i in range(n):
        for j in range(i + 1, n):
            d = math.hypot(pts[i][0] - pts[j][0], pts[i][1] - pts[j][1])
            if d > best:
                best, a, b = d, i, j
    chain1 = list(range(a, b + 1))
    chain2 = list(range(b, n)) + list(range(0, a + 1))
    kept = set()
    for chain in (chain1, chain2):
        sub = rdp_chain([pts[i] for i in chain], epsilon)
        kept.update(chain[i] for i in sub)
    return sorted(kept)


def points_array(points) -> np.ndarray:
    return np.asarray(points, dtype=float).reshape(-1, 2)
