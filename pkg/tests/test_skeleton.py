"""Topology-preserving thinning and branch decomposition."""
import numpy as np
import pytest
from scipy import ndimage

from tfenet.skeleton import SkeletonGraph, decompose, skeletonize, thin


def capsule_mask(shape, p0, p1, r):
    zz, yy, xx = np.mgrid[:shape[0], :shape[1], :shape[2]]
    pts = np.stack([zz, yy, xx], axis=-1).astype(float)
    a = np.asarray(p0, dtype=float)
    d = np.asarray(p1, dtype=float) - a
    t = np.clip(((pts - a) @ d) / (d @ d), 0.0, 1.0)
    closest = a + t[..., None] * d
    return (np.linalg.norm(pts - closest, axis=-1) <= r).astype(np.uint8)


def n_components(mask):
    _, n = ndimage.label(mask, structure=np.ones((3, 3, 3)))
    return n


def test_thin_empty_and_single_voxel():
    assert thin(np.zeros((4, 4, 4), dtype=bool)).sum() == 0
    m = np.zeros((5, 5, 5), dtype=bool)
    m[2, 2, 2] = True
    assert np.array_equal(thin(m), m)


def test_thin_is_subset_and_preserves_component_count(rng):
    for _ in range(15):
        blob = ndimage.binary_dilation(
            rng.random((12, 12, 12)) < 0.04, iterations=2)
        sk = thin(blob)
        assert not np.any(sk & ~blob)
        if blob.any():
            assert n_components(sk) == n_components(blob)


def test_thin_idempotent_on_thin_sets():
    m = np.zeros((9, 9, 9), dtype=bool)
    m[4, 4, 1:8] = True
    assert np.array_equal(thin(m), m)


def test_straight_capsule_single_branch():
    m = capsule_mask((40, 14, 14), (5, 6, 6), (34, 6, 6), 2.2)
    g = skeletonize(m)
    assert g.n_branches == 1
    assert g.n_bifurcations == 0
    assert g.n_endpoints == 2
    assert abs(g.total_length - 30) <= 2


def test_oblique_capsule_single_branch():
    m = capsule_mask((40, 40, 40), (5, 6, 8), (33, 30, 24), 2.0)
    g = skeletonize(m)
    assert g.n_branches == 1
    # a 26-connected digital line has Chebyshev-many voxels
    assert abs(g.total_length - 29) <= 2


def test_y_junction_three_branches():
    m = (capsule_mask((40, 40, 16), (4, 20, 8), (20, 20, 8), 2.2)
         | capsule_mask((40, 40, 16), (20, 20, 8), (34, 10, 8), 1.9)
         | capsule_mask((40, 40, 16), (20, 20, 8), (34, 31, 8), 1.9))
    g = skeletonize(m)
    assert g.n_branches == 3
    assert g.n_bifurcations == 1
    assert g.n_endpoints == 3


def test_torus_single_cycle():
    zz, yy, xx = np.mgrid[:20, :28, :28]
    ring = np.sqrt((yy - 13.5) ** 2 + (xx - 13.5) ** 2)
    m = ((ring - 8.0) ** 2 + (zz - 9.5) ** 2 <= 2.0 ** 2)
    g = skeletonize(m)
    assert g.n_branches == 1
    assert g.n_endpoints == 0
    assert g.n_bifurcations == 0
    # the cycle is closed: its ends touch
    b = g.branches[0]
    assert np.abs(b[0] - b[-1]).max() <= 1


def test_solid_sphere_collapses_to_point_like_core():
    zz, yy, xx = np.mgrid[:15, :15, :15]
    m = ((zz - 7) ** 2 + (yy - 7) ** 2 + (xx - 7) ** 2) <= 25
    g = skeletonize(m)
    assert g.n_bifurcations == 0
    assert g.total_length <= 5


def test_spur_pruning():
    trunk = capsule_mask((44, 18, 18), (4, 9, 9), (39, 9, 9), 2.0)
    g = skeletonize(trunk, prune_len=4)
    assert g.n_branches == 1


def test_decompose_partitions_voxels():
    m = np.zeros((12, 12, 12), dtype=np.uint8)
    m[2:10, 6, 6] = 1
    m[6, 6:11, 6] = 1        # T shape
    g = decompose(m)
    assert g.n_branches == 3
    assert g.n_bifurcations == 1
    assert g.n_endpoints == 3
    # the corner voxel is 26-redundant (diagonal neighbor spans its
    # whole neighborhood) and gets dropped during decomposition
    assert g.total_length == int(m.sum()) - 1
    in_branches = sum(len(b) for b in g.branches)
    assert in_branches == g.total_length - 1    # one junction voxel


def test_graph_mask_round_trip():
    m = np.zeros((10, 10, 10), dtype=np.uint8)
    m[3, 2:9, 5] = 1
    g = decompose(m)
    assert np.array_equal(g.mask(), m)
    g2 = decompose(g.mask())
    assert g2.total_length == g.total_length
    assert g2.n_branches == g.n_branches


def test_empty_mask_gives_empty_graph():
    g = skeletonize(np.zeros((6, 6, 6), dtype=bool))
    assert isinstance(g, SkeletonGraph)
    assert g.total_length == 0
    assert g.n_branches == 0
    assert g.mask().sum() == 0


def test_branch_paths_are_26_connected_chains():
    m = (capsule_mask((36, 36, 14), (4, 18, 7), (18, 18, 7), 2.2)
         | capsule_mask((36, 36, 14), (18, 18, 7), (31, 8, 7), 1.9)
         | capsule_mask((36, 36, 14), (18, 18, 7), (31, 29, 7), 1.9))
    g = skeletonize(m)
    for b in g.branches:
        steps = np.abs(np.diff(b, axis=0)).max(axis=1)
        assert b.shape[0] == 1 or steps.max() == 1
