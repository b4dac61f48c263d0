import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import ConvexHull

from resloc.geometry import quickhull, rdp_chain, rdp_reduce


def _ccw_area(pts, idx):
    p = np.asarray([pts[i] for i in idx], float)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)


def test_hull_of_square_with_interior():
    pts = [(0, 0), (1, 0), (1, 1), (0, 1), (0.5, 0.5), (0.2, 0.7)]
    assert sorted(quickhull(pts)) == [0, 1, 2, 3]


@pytest.mark.parametrize("pts, expected", [([], []), ([(1, 2)], [0]), ([(1, 2), (1, 2)], [0]),
                                           ([(0, 0), (1, 1)], [0, 1]), ([(0, 0), (1, 0), (2, 0)], [0, 2])])
def test_hull_degenerate_inputs(pts, expected):
    assert sorted(quickhull(pts)) == expected


def test_hull_is_counter_clockwise():
    pts = [(0, 0), (4, 0), (5, 3), (2, 5), (-1, 3), (2, 2)]
    h = quickhull(pts)
    assert _ccw_area(pts, h) > 0


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 40))
def test_hull_matches_scipy(seed, n):
    pts = np.random.default_rng(seed).uniform(-10, 10, size=(n, 2))
    assert sorted(quickhull(pts)) == sorted(ConvexHull(pts).vertices.tolist())


@pytest.mark.parametrize(
    "pts, eps, expected",
    [([(0, 0), (1, 0), (2, 0)], 0.1, [0, 2]), ([(0, 0), (1, 0.5), (2, 0)], 0.1, [0, 1, 2]),
     ([(0, 0), (1, 0.5), (2, 0)], 0.6, [0, 2])],
)
def test_rdp_chain_examples(pts, eps, expected):
    assert rdp_chain(pts, eps) == expected


@pytest.mark.parametrize("eps", [0.0, 0.3, 0.7])
def test_rdp_keeps_square_corners(eps):
    square = [(0, 0), (1, 0), (1, 1), (0, 1)]
    assert rdp_reduce(square, eps) == [0, 1, 2, 3]


def test_rdp_ring_drops_flat_vertex():
    ring = [(0, 0), (2, 0), (4, 0.05), (6, 0), (3, 5)]
    assert rdp_reduce(ring, 0.5) == [0, 3, 4]


def test_rdp_short_input_unchanged():
    assert rdp_reduce([(0, 0), (3, 3)], 1.0) == [0, 1]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 3))
def test_rdp_output_is_ordered_subset_and_monotone(seed, eps):
    pts = np.random.default_rng(seed).uniform(-10, 10, size=(25, 2))
    ring = [tuple(pts[i]) for i in quickhull(pts)]
    a = rdp_reduce(ring, eps)
    b = rdp_reduce(ring, eps + 1.0)
    assert a == sorted(a) and set(a) <= set(range(len(ring)))
    assert len(b) <= len(a)
    assert len(a) >= min(2, len(ring))
