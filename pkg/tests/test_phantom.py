"""Synthetic tube-tree generator: topology truth, volumes, corpora."""
import json

import numpy as np
import pytest

from tfenet.errors import ArgumentError
from tfenet.phantom import (TreeSpec, corpus, generate_tree, truth_from_dict,
                            truth_to_dict)
from tfenet.skeleton import skeletonize
from tfenet.volume import read_volume


def test_depth_zero_is_single_branch():
    img, label, truth, nb, tl = generate_tree(
        TreeSpec(depth=0), np.random.default_rng(0))
    assert nb == 1
    assert truth.n_bifurcations == 0
    assert truth.n_endpoints == 2
    assert tl == truth.total_length > 0
    assert label.any()
    assert img.data.shape == (1, 64, 64, 64)


@pytest.mark.parametrize("depth,branches,bifs,endpoints",
                         [(1, 3, 1, 3), (2, 7, 3, 5)])
def test_full_binary_topology(depth, branches, bifs, endpoints):
    for seed in (0, 1, 2):
        _, _, truth, nb, _ = generate_tree(
            TreeSpec(depth=depth), np.random.default_rng(seed))
        assert nb == branches
        assert truth.n_bifurcations == bifs
        assert truth.n_endpoints == endpoints


def test_single_tube_volume_near_analytic_capsule():
    spec = TreeSpec(depth=0)
    r = spec.root_radius
    for seed in range(6):
        _, label, truth, _, tl = generate_tree(spec, np.random.default_rng(seed))
        analytic = np.pi * r * r * (tl - 1) + 4 / 3 * np.pi * r ** 3
        assert abs(int(label.sum()) - analytic) < 0.10 * analytic


def test_foreground_stays_sparse():
    for depth in (0, 1, 2):
        _, label, _, _, _ = generate_tree(
            TreeSpec(depth=depth), np.random.default_rng(7))
        assert label.mean() < 0.03


def test_intensity_model():
    spec = TreeSpec(depth=1, noise_sigma=0.0)
    img, label, _, _, _ = generate_tree(spec, np.random.default_rng(4))
    vol = img.data[0]
    assert np.all(vol[label != 0] == spec.lumen_hu)
    # far corner voxel sits in plain background
    assert vol[0, 0, 0] == spec.background_hu
    # a wall shell of intermediate intensity surrounds the lumen
    assert np.count_nonzero(vol == spec.wall_hu) > 0


def test_noise_perturbs_but_preserves_label():
    rng_a, rng_b = np.random.default_rng(11), np.random.default_rng(11)
    img_a, lab_a, _, _, _ = generate_tree(TreeSpec(depth=1), rng_a)
    img_b, lab_b, _, _, _ = generate_tree(
        TreeSpec(depth=1, noise_sigma=40.0), rng_b)
    assert np.array_equal(lab_a, lab_b)
    assert not np.array_equal(img_a.data, img_b.data)


def test_truth_centerline_lies_inside_label():
    # the stem extension along the fork bisector may round a voxel or
    # two into the notch between separating child tubes; everything
    # else must sit inside the solid
    for seed in (0, 4, 9):
        _, label, truth, _, _ = generate_tree(
            TreeSpec(depth=2), np.random.default_rng(seed))
        v = truth.voxels
        inside = label[v[:, 0], v[:, 1], v[:, 2]] != 0
        assert inside.mean() >= 0.97


def test_truth_round_trip():
    _, _, truth, _, _ = generate_tree(TreeSpec(depth=2),
                                      np.random.default_rng(3))
    d = json.loads(json.dumps(truth_to_dict(truth)))
    g = truth_from_dict(d)
    assert g.shape == truth.shape
    assert g.total_length == truth.total_length
    assert g.n_branches == truth.n_branches
    assert g.n_bifurcations == truth.n_bifurcations
    assert g.n_endpoints == truth.n_endpoints
    assert (set(map(tuple, g.voxels.tolist()))
            == set(map(tuple, truth.voxels.tolist())))
    for a, b in zip(g.branches, truth.branches):
        assert np.array_equal(a, b)


def test_infeasible_specs_rejected():
    with pytest.raises(ArgumentError):
        TreeSpec(depth=-1)
    with pytest.raises(ArgumentError):
        TreeSpec(depth=8, root_radius=2.0, radius_decay=0.7)
    with pytest.raises(ArgumentError):
        TreeSpec(length_range=(20.0, 14.0))
    with pytest.raises(ArgumentError):
        TreeSpec(angle_range=(10.0, 95.0))
    with pytest.raises(ArgumentError):
        TreeSpec(shape=(6, 64, 64), root_radius=2.2)


def test_corpus_split_and_files(tmp_path):
    spec = TreeSpec(depth=0, shape=(32, 32, 32), root_radius=1.8,
                    length_range=(8.0, 10.0))
    manifest = corpus(tmp_path, 10, spec, seed=0)
    assert [e["split"] for e in manifest].count("train") == 6
    assert [e["split"] for e in manifest].count("val") == 2
    assert [e["split"] for e in manifest].count("test") == 2
    assert json.loads((tmp_path / "manifest.json").read_text()) == manifest
    for e in manifest:
        vol = read_volume(tmp_path / e["image"])
        lab = read_volume(tmp_path / e["label"])
        assert vol.data.shape == lab.data.shape == (1, 32, 32, 32)
        truth = truth_from_dict(
            json.loads((tmp_path / e["truth"]).read_text()))
        assert truth.total_length > 0


def test_corpus_rejects_empty():
    with pytest.raises(ArgumentError):
        corpus("/tmp/unused", 0, TreeSpec(), seed=0)


def test_corpus_bytes_reproducible(tmp_path):
    spec = TreeSpec(depth=1, shape=(40, 40, 40), root_radius=2.0,
                    length_range=(10.0, 13.0))
    a, b = tmp_path / "a", tmp_path / "b"
    corpus(a, 3, spec, seed=42)
    corpus(b, 3, spec, seed=42)
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes()


def test_corpus_depth_range_varies_topology(tmp_path):
    spec = TreeSpec(depth=2, shape=(56, 56, 56), root_radius=2.0,
                    length_range=(10.0, 14.0))
    manifest = corpus(tmp_path, 6, spec, seed=5, depth_range=(0, 2))
    counts = set()
    for e in manifest:
        d = json.loads((tmp_path / e["truth"]).read_text())
        counts.add(d["n_branches"])
        assert d["n_branches"] in (1, 3, 7)
    assert len(counts) > 1


def test_skeleton_recovers_truth_branch_count():
    spec = TreeSpec(depth=2, root_radius=2.3, radius_decay=0.92,
                    length_range=(22.0, 30.0), shape=(88, 88, 88))
    for seed in (0, 1):
        _, label, truth, nb, tl = generate_tree(spec,
                                                np.random.default_rng(seed))
        g = skeletonize(label != 0)
        assert g.n_branches == nb
        assert abs(g.total_length - tl) <= 0.05 * tl
