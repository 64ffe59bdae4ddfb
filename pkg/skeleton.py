"""
Skeleton Module - Skeleton topology, adjacency categories and pose flipping
"""
import json
import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from dcgct import TopologyError, ShapeError

log = logging.getLogger("dcgct.skeleton")

CATEGORIES = ("self", "toward_root", "away_from_root", "symmetric")

# Human3.6M 17-joint layout
H36M17_NAMES = (
    "Pelvis", "RHip", "RKnee", "RAnkle", "LHip", "LKnee", "LAnkle",
    "Spine", "Thorax", "Neck", "Head",
    "LShoulder", "LElbow", "LWrist", "RShoulder", "RElbow", "RWrist",
)
H36M17_PARENTS = (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15)
H36M17_PAIRS = ((1, 4), (2, 5), (3, 6), (11, 14), (12, 15), (13, 16))


@dataclass(frozen=True)
class SkeletonTopology:
    joint_names: Tuple[str, ...]
    parent: Tuple[Optional[int], ...]
    root: int
    symmetric_pairs: Tuple[Tuple[int, int], ...]

    @property
    def joint_count(self) -> int:
        return len(self.parent)

    def children(self, joint: int) -> List[int]:
        return [j for j, p in enumerate(self.parent) if p == joint]

    def partner(self, joint: int) -> Optional[int]:
        """Symmetric counterpart of a joint, or None"""
        for a, b in self.symmetric_pairs:
            if a == joint:
                return b
            if b == joint:
                return a
        return None

    def flip_permutation(self) -> np.ndarray:
        """Joint index permutation swapping every symmetric pair"""
        perm = np.arange(self.joint_count)
        for a, b in self.symmetric_pairs:
            perm[a], perm[b] = b, a
        return perm

    def to_dict(self) -> Dict:
        return {
            "names": list(self.joint_names),
            "parents": [p for p in self.parent],
            "root": self.root,
            "symmetric_pairs": [list(p) for p in self.symmetric_pairs],
        }


def make_topology(names: Sequence[str], parents: Sequence[Optional[int]], root: int,
                  symmetric_pairs: Sequence[Sequence[int]]) -> SkeletonTopology:
    """
    Validate raw fields and build a SkeletonTopology

    Args:
        names: Per-joint labels
        parents: Per-joint parent index; None or -1 marks the root
        root: Root joint index
        symmetric_pairs: Unordered left/right joint pairs

    Returns:
        Validated topology
    """
    n = len(parents)
    if n < 1:
        raise TopologyError("topology needs at least one joint")
    if len(names) != n:
        raise TopologyError(f"{len(names)} names for {n} joints")
    if not isinstance(root, int) or not 0 <= root < n:
        raise TopologyError(f"root index {root!r} out of range [0, {n})")

    parent: List[Optional[int]] = []
    for i, p in enumerate(parents):
        if p is None or p == -1:
            parent.append(None)
            continue
        if not isinstance(p, int) or not 0 <= p < n:
            raise TopologyError(f"joint {i} has parent {p!r} out of range [0, {n})")
        if p == i:
            raise TopologyError("cyclic topology: joint {} is its own parent".format(i))
        parent.append(p)

    roots = [i for i, p in enumerate(parent) if p is None]
    if roots != [root]:
        raise TopologyError(f"expected exactly one parentless joint (root {root}), found {roots}")

    # every joint must reach the root without revisiting a joint
    for start in range(n):
        seen = set()
        j = start
        while j is not None:
            if j in seen:
                raise TopologyError(f"cyclic topology through joint {j}")
            seen.add(j)
            j = parent[j]

    pairs = []
    used = set()
    for pair in symmetric_pairs:
        if len(pair) != 2:
            raise TopologyError(f"symmetric pair {pair!r} must have two joints")
        a, b = int(pair[0]), int(pair[1])
        if not (0 <= a < n and 0 <= b < n):
            raise TopologyError(f"symmetric pair {pair!r} out of range [0, {n})")
        if a == b:
            raise TopologyError(f"joint {a} paired with itself")
        if a in used or b in used:
            raise TopologyError(f"joint appears in more than one symmetric pair: {pair!r}")
        used.update((a, b))
        pairs.append((a, b))

    return SkeletonTopology(tuple(str(s) for s in names), tuple(parent), root, tuple(pairs))


def build_topology(preset_name: str) -> SkeletonTopology:
    """
    Build a skeleton topology from a preset name or a JSON description file

    Args:
        preset_name: "h36m17" or a path to {names, parents, root, symmetric_pairs}

    Returns:
        SkeletonTopology
    """
    if preset_name == "h36m17":
        return make_topology(H36M17_NAMES, H36M17_PARENTS, 0, H36M17_PAIRS)

    if not os.path.isfile(preset_name):
        raise TopologyError(f"unknown topology preset {preset_name!r}")

    try:
        with open(preset_name, "r") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise TopologyError(f"malformed topology file {preset_name}: {e}")

    try:
        return make_topology(data["names"], data["parents"], data["root"], data.get("symmetric_pairs", []))
    except (KeyError, TypeError) as e:
        raise TopologyError(f"malformed topology file {preset_name}: missing or bad field {e}")


def _inv_sqrt(degree: np.ndarray) -> np.ndarray:
    out = np.zeros_like(degree, dtype=np.float64)
    np.power(degree, -0.5, out=out, where=degree > 0)
    return out


def normalize_adjacency(a: np.ndarray) -> np.ndarray:
    """
    Symmetric normalization D^-1/2 A D^-1/2

    Directed category graphs scale rows by out-degree and columns by in-degree;
    for a symmetric A both are the ordinary degree. Zero-degree rows stay zero.
    """
    a = np.asarray(a, dtype=np.float64)
    return _inv_sqrt(a.sum(axis=1))[:, None] * a * _inv_sqrt(a.sum(axis=0))[None, :]


def raw_adjacency(topo: SkeletonTopology) -> Dict[str, np.ndarray]:
    """Unnormalized 0/1 adjacency A_k per category"""
    n = topo.joint_count
    raw = {k: np.zeros((n, n), dtype=np.float64) for k in CATEGORIES}
    raw["self"][:] = np.eye(n)
    for i, p in enumerate(topo.parent):
        if p is not None:
            raw["toward_root"][i, p] = 1.0
            raw["away_from_root"][p, i] = 1.0
    for a, b in topo.symmetric_pairs:
        raw["symmetric"][a, b] = 1.0
        raw["symmetric"][b, a] = 1.0
    return raw


class AdjacencySet:
    """Four normalized category adjacency matrices, read-only after construction"""

    def __init__(self, normalized: Dict[str, np.ndarray], raw: Dict[str, np.ndarray]):
        self.normalized = {}
        self.raw = {}
        for k in CATEGORIES:
            mat = np.array(normalized[k], dtype=np.float64)
            mat.setflags(write=False)
            self.normalized[k] = mat
            r = np.array(raw[k], dtype=np.float64)
            r.setflags(write=False)
            self.raw[k] = r

    @property
    def joint_count(self) -> int:
        return self.normalized["self"].shape[0]

    def stacked(self) -> np.ndarray:
        """(4, N, N) array in CATEGORIES order"""
        return np.stack([self.normalized[k] for k in CATEGORIES])

    def active_rows(self, category: str) -> np.ndarray:
        """Indices of rows with nonzero raw degree"""
        return np.flatnonzero(self.raw[category].sum(axis=1) > 0)

    def nnz(self, category: str) -> int:
        return int(np.count_nonzero(self.normalized[category]))

    def merged(self) -> np.ndarray:
        """Union of all raw category edges (self-loops included), normalized once"""
        union = np.zeros_like(self.raw["self"])
        for k in CATEGORIES:
            union = np.maximum(union, self.raw[k])
        return normalize_adjacency(union)

    def to_dict(self) -> Dict:
        return {k: self.normalized[k].tolist() for k in CATEGORIES}


def decompose_adjacency(topo: SkeletonTopology) -> AdjacencySet:
    """
    Split 1-hop neighborhoods into self / toward-root / away-from-root / symmetric
    categories and normalize each as D_k^-1/2 A_k D_k^-1/2

    Args:
        topo: Validated topology

    Returns:
        AdjacencySet
    """
    raw = raw_adjacency(topo)
    normalized = {k: normalize_adjacency(raw[k]) for k in CATEGORIES}
    log.debug(f"Adjacency built for {topo.joint_count} joints: "
              + ", ".join(f"{k}={int(raw[k].sum())} edges" for k in CATEGORIES))
    return AdjacencySet(normalized, raw)


def save_adjacency(adjacency: AdjacencySet, path: str):
    """Export normalized matrices as JSON (golden files)"""
    with open(path, "w") as f:
        json.dump(adjacency.to_dict(), f, indent=1)


def flip_pose(pose: np.ndarray, topo: SkeletonTopology) -> np.ndarray:
    """
    Horizontal flip: negate x and swap left/right joint rows

    Args:
        pose: Array [..., N, D] with D >= 1
        topo: Topology providing the symmetric pairs

    Returns:
        Flipped copy, same shape
    """
    pose = np.asarray(pose)
    if pose.ndim < 2 or pose.shape[-1] < 1:
        raise ShapeError(f"pose must be [..., N, D], got shape {pose.shape}")
    if pose.shape[-2] != topo.joint_count:
        raise ShapeError(f"joint axis {pose.shape[-2]} does not match topology ({topo.joint_count} joints)")
    flipped = pose[..., topo.flip_permutation(), :].copy()
    flipped[..., 0] = -flipped[..., 0]
    return flipped
