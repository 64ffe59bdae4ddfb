import json

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from dcgct import ShapeError, TopologyError
from skeleton import (
    CATEGORIES, H36M17_PAIRS, build_topology, decompose_adjacency, flip_pose, make_topology, normalize_adjacency,
)


def test_h36m17_layout(topo):
    assert topo.joint_count == 17
    assert topo.root == 0
    assert topo.parent[0] is None
    assert topo.children(8) == [9, 11, 14]
    assert topo.partner(3) == 6
    assert topo.partner(9) is None


def test_unknown_preset():
    with pytest.raises(TopologyError, match="unknown topology preset"):
        build_topology("mpii16")


def test_cyclic_topology_file(tmp_path):
    path = tmp_path / "cycle.json"
    path.write_text(json.dumps({"names": ["a", "b", "c"], "parents": [-1, 2, 1], "root": 0}))
    with pytest.raises(TopologyError, match="cyclic topology"):
        build_topology(str(path))


def test_malformed_topology_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(TopologyError, match="malformed"):
        build_topology(str(path))


def test_topology_file_matches_preset(tmp_path, topo):
    path = tmp_path / "h36m.json"
    path.write_text(json.dumps(topo.to_dict()))
    assert build_topology(str(path)) == topo


def test_invalid_pairs():
    with pytest.raises(TopologyError):
        make_topology(["a", "b"], [None, 0], 0, [(1, 1)])
    with pytest.raises(TopologyError):
        make_topology(["a", "b", "c"], [None, 0, 0], 0, [(1, 2), (2, 0)])


def test_two_joint_chain(two_joint_topo):
    adj = decompose_adjacency(two_joint_topo)
    assert_allclose(adj.normalized["toward_root"], [[0.0, 0.0], [1.0, 0.0]])
    assert_allclose(adj.normalized["away_from_root"], [[0.0, 1.0], [0.0, 0.0]])
    assert_allclose(adj.normalized["self"], np.eye(2))
    assert not adj.normalized["symmetric"].any()


def test_self_category_is_identity(adjacency):
    assert_allclose(adjacency.normalized["self"], np.eye(17))


def test_adjacency_nonnegative_and_zero_rows(adjacency):
    for k in CATEGORIES:
        mat = adjacency.normalized[k]
        assert (mat >= 0).all()
        empty = adjacency.raw[k].sum(axis=1) == 0
        assert not mat[empty].any()
    # root has no parent, neck has no partner
    assert not adjacency.normalized["toward_root"][0].any()
    assert not adjacency.normalized["symmetric"][9].any()


def test_row_energy_bounded(adjacency):
    for k in CATEGORIES:
        assert ((adjacency.normalized[k] ** 2).sum(axis=1) <= 1.0 + 1e-9).all(), k


def test_row_sums_bounded(topo, adjacency):
    for k in ("self", "toward_root", "symmetric"):
        assert (adjacency.normalized[k].sum(axis=1) <= 1.0 + 1e-9).all(), k
    away = adjacency.normalized["away_from_root"]
    single_child = [j for j in range(topo.joint_count) if len(topo.children(j)) == 1]
    assert (away[single_child].sum(axis=1) <= 1.0 + 1e-9).all()


def test_multi_child_rows_sum_to_sqrt3(topo, adjacency):
    away = adjacency.normalized["away_from_root"]
    # pelvis and thorax each have three children of in-degree one
    assert topo.children(0) == [1, 4, 7]
    assert topo.children(8) == [9, 11, 14]
    assert_allclose(away[[0, 8]].sum(axis=1), [np.sqrt(3.0)] * 2, rtol=1e-12)
    assert_allclose((away[[0, 8]] ** 2).sum(axis=1), [1.0, 1.0], rtol=1e-12)


def _one_hop_adjacency(topo):
    """Ã = I + parent edges both ways + symmetric pairs, built straight from the topology"""
    a = np.eye(topo.joint_count)
    for i, p in enumerate(topo.parent):
        if p is not None:
            a[i, p] = a[p, i] = 1.0
    for i, j in topo.symmetric_pairs:
        a[i, j] = a[j, i] = 1.0
    return a


def test_categories_sum_to_one_hop_adjacency(topo, adjacency):
    assert_array_equal(sum(adjacency.raw[k] for k in CATEGORIES), _one_hop_adjacency(topo))


def test_merged_matches_degree_normalized_one_hop(topo, adjacency):
    a = _one_hop_adjacency(topo)
    degree = a.sum(axis=1)
    expected = np.diag(degree ** -0.5) @ a @ np.diag(degree ** -0.5)
    assert_allclose(adjacency.merged(), expected, atol=1e-12)


def test_symmetric_category_is_symmetric(adjacency):
    sym = adjacency.normalized["symmetric"]
    assert_allclose(sym, sym.T)
    for a, b in H36M17_PAIRS:
        assert sym[a, b] == 1.0


def test_categories_partition_one_hop_neighborhood(adjacency):
    total = sum(adjacency.raw[k] for k in CATEGORIES)
    assert total.max() == 1.0
    union = (adjacency.merged() > 0).astype(float)
    assert_array_equal(total, union)


def test_normalize_matches_symmetric_formula(rng):
    a = rng.integers(0, 2, size=(6, 6)).astype(float)
    a = np.maximum(a, a.T)
    d = a.sum(axis=1)
    inv = np.where(d > 0, 1.0 / np.sqrt(np.where(d > 0, d, 1.0)), 0.0)
    assert_allclose(normalize_adjacency(a), np.diag(inv) @ a @ np.diag(inv))


def test_adjacency_is_read_only(adjacency):
    with pytest.raises(ValueError):
        adjacency.normalized["self"][0, 0] = 2.0


def test_flip_involution(topo, rng):
    pose = rng.normal(size=(4, 17, 3))
    assert_array_equal(flip_pose(flip_pose(pose, topo), topo), pose)


def test_flip_swaps_and_negates(topo, rng):
    pose = rng.normal(size=(17, 2))
    flipped = flip_pose(pose, topo)
    assert_allclose(flipped[4], [-pose[1, 0], pose[1, 1]])
    assert_allclose(flipped[0], [-pose[0, 0], pose[0, 1]])


def test_flip_shape_mismatch(topo):
    with pytest.raises(ShapeError):
        flip_pose(np.zeros((16, 3)), topo)
