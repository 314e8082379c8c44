"""Topology-preserving 3D thinning and centerline graph decomposition.

Thinning deletes simple border voxels (removal preserves the
26-connectivity of foreground and 6-connectivity of background) in six
directional subiterations, each split into eight parity subfields so
that voxels deleted in one batch are never 26-adjacent to each other.
Voxels with exactly one foreground neighbour are curve endpoints and
are kept, which preserves branch tips.

The resulting unit-width skeleton is decomposed into a graph: clusters
of voxels with 26-degree >= 3 are bifurcation nodes, degree-1 voxels
are endpoints, and maximal chains of the remaining voxels form
branches.  Short terminal branches below a length threshold are pruned
(they are thinning artifacts of rounded caps, not real topology).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError

# ---------------------------------------------------------------------------
# Static neighborhood tables (3x3x3 cell index = (dz+1)*9 + (dy+1)*3 + dx+1)
# ---------------------------------------------------------------------------

_OFFS = [(dz, dy, dx) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
_CENTER = 13
_SENTINEL = 27


def _pack_adjacency(pairs_fn, members):
    """Dense (27, K) neighbor table padded with a sentinel column index."""
    rows = []
    for i in range(27):
        if i in members:
            rows.append([j for j in members if j != i and pairs_fn(_OFFS[i], _OFFS[j])])
        else:
            rows.append([])
    width = max(len(r) for r in rows)
    table = np.full((27, width), _SENTINEL, dtype=np.int64)
    for i, r in enumerate(rows):
        table[i, :len(r)] = r
    return table


def _cheb(a, b):
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]), abs(a[2] - b[2]))


def _manh(a, b):
    return abs(a[0] - b[0]) + abs(a[1] - b[1]) + abs(a[2] - b[2])


_FG_CELLS = frozenset(i for i in range(27) if i != _CENTER)
_N18_CELLS = frozenset(i for i in range(27)
                       if i != _CENTER and sum(abs(c) for c in _OFFS[i]) <= 2)
_FACE_CELLS = np.array(sorted(i for i in range(27)
                              if sum(abs(c) for c in _OFFS[i]) == 1), dtype=np.int64)
_ADJ26 = _pack_adjacency(lambda a, b: _cheb(a, b) == 1, _FG_CELLS)
_ADJ6 = _pack_adjacency(lambda a, b: _manh(a, b) == 1, _N18_CELLS)

_DIRECTIONS = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]
_SUBFIELDS = [(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)]


# ---------------------------------------------------------------------------
# Batched simple-point test
# ---------------------------------------------------------------------------

def _batch_label(occ: np.ndarray, adj: np.ndarray) -> np.ndarray:
    """Minimum-label propagation over a fixed 27-cell adjacency.

    occ is (n, 27) membership; returns per-cell component labels (the
    smallest member index), sentinel 27 on non-members.
    """
    n = occ.shape[0]
    lab = np.where(occ, np.arange(27)[None, :], _SENTINEL)
    ext = np.full((n, 28), _SENTINEL, dtype=np.int64)
    ext[:, :27] = lab
    while True:
        new = np.minimum(lab, ext[:, adj].min(axis=2))
        new[~occ] = _SENTINEL
        if np.array_equal(new, lab):
            return lab
        lab = new
        ext[:, :27] = lab


def _count_roots(lab: np.ndarray, occ: np.ndarray) -> np.ndarray:
    return ((lab == np.arange(27)[None, :]) & occ).sum(axis=1)


def _simple_mask(nbhd: np.ndarray) -> np.ndarray:
    """Simplicity of the center voxel for each (n, 27) 0/1 neighborhood.

    Simple iff the foreground in the punctured 3^3 neighborhood has
    exactly one 26-component AND the background restricted to the 18
    face+edge cells has exactly one 6-component touching a face cell.
    """
    occ_fg = nbhd.astype(bool).copy()
    occ_fg[:, _CENTER] = False
    c_star = _count_roots(_batch_label(occ_fg, _ADJ26), occ_fg)

    occ_bg = ~nbhd.astype(bool)
    keep = np.zeros(27, dtype=bool)
    keep[list(_N18_CELLS)] = True
    occ_bg &= keep[None, :]
    lab_bg = _batch_label(occ_bg, _ADJ6)
    face_lab = np.sort(lab_bg[:, _FACE_CELLS], axis=1)
    fresh = np.ones_like(face_lab, dtype=bool)
    fresh[:, 1:] = face_lab[:, 1:] != face_lab[:, :-1]
    c_bar = ((face_lab != _SENTINEL) & fresh).sum(axis=1)
    return (c_star == 1) & (c_bar == 1)


# ---------------------------------------------------------------------------
# Thinning
# ---------------------------------------------------------------------------

def _shifted(padded: np.ndarray, off, shape) -> np.ndarray:
    dz, dy, dx = off
    d, h, w = shape
    return padded[1 + dz:1 + dz + d, 1 + dy:1 + dy + h, 1 + dx:1 + dx + w]


def _neighbor_count(m: np.ndarray) -> np.ndarray:
    padded = np.pad(m, 1).astype(np.uint8)
    acc = np.zeros(m.shape, dtype=np.int16)
    for off in _OFFS:
        if off != (0, 0, 0):
            acc += _shifted(padded, off, m.shape)
    return acc


def thin(mask: np.ndarray) -> np.ndarray:
    """Iteratively thin a binary volume to a unit-width centerline.

    Deterministic: directions, subfields and voxel scan order are fixed.
    """
    m = (np.asarray(mask) != 0)
    if m.ndim != 3:
        raise ArgumentError(f"mask must be 3D, got ndim={m.ndim}")
    shape = m.shape
    while True:
        deleted = 0
        for direction in _DIRECTIONS:
            for sub in _SUBFIELDS:
                padded = np.pad(m, 1)
                border = m & ~_shifted(padded, direction, shape)
                if not border.any():
                    continue
                parity = np.zeros(shape, dtype=bool)
                parity[sub[0]::2, sub[1]::2, sub[2]::2] = True
                cand = border & parity
                if not cand.any():
                    continue
                nc = _neighbor_count(m)
                cand &= nc != 1                  # keep curve endpoints
                idx = np.argwhere(cand)
                if idx.size == 0:
                    continue
                nbhd = np.empty((idx.shape[0], 27), dtype=np.uint8)
                for j, off in enumerate(_OFFS):
                    nbhd[:, j] = _shifted(padded, off, shape)[
                        idx[:, 0], idx[:, 1], idx[:, 2]]
                simple = _simple_mask(nbhd)
                kill = idx[simple]
                if kill.size:
                    m[kill[:, 0], kill[:, 1], kill[:, 2]] = False
                    deleted += kill.shape[0]
        if deleted == 0:
            return m.astype(np.uint8)


# ---------------------------------------------------------------------------
# Graph decomposition
# ---------------------------------------------------------------------------

@dataclass
class SkeletonGraph:
    """Centerline voxels decomposed into branches and nodes.

    branches hold chain voxels (terminal endpoints included, junction
    voxels excluded); voxels is the full centerline including junction
    clusters, so total_length counts every centerline voxel once.
    """

    shape: tuple[int, int, int]
    voxels: np.ndarray                  # (n, 3) int64
    branches: list[np.ndarray]          # each (m, 3) int64, in path order
    n_bifurcations: int
    n_endpoints: int

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    @property
    def total_length(self) -> int:
        return int(self.voxels.shape[0])

    def mask(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=np.uint8)
        if self.voxels.size:
            out[self.voxels[:, 0], self.voxels[:, 1], self.voxels[:, 2]] = 1
        return out


def _decompose(voxset: set, shape) -> SkeletonGraph:
    if not voxset:
        return SkeletonGraph(tuple(shape), np.zeros((0, 3), dtype=np.int64), [], 0, 0)
    nbrs = {}
    for v in voxset:
        z, y, x = v
        ns = []
        for dz, dy, dx in _OFFS:
            if (dz, dy, dx) == (0, 0, 0):
                continue
            u = (z + dz, y + dy, x + dx)
            if u in voxset:
                ns.append(u)
        nbrs[v] = ns
    deg = {v: len(ns) for v, ns in nbrs.items()}
    junctions = {v for v, d in deg.items() if d >= 3}

    # junction clusters = 26-components of the junction voxels
    cluster_of = {}
    n_clusters = 0
    for v in sorted(junctions):
        if v in cluster_of:
            continue
        stack = [v]
        cluster_of[v] = n_clusters
        while stack:
            u = stack.pop()
            for w in nbrs[u]:
                if w in junctions and w not in cluster_of:
                    cluster_of[w] = n_clusters
                    stack.append(w)
        n_clusters += 1

    chain = voxset - junctions
    endpoints = sorted(v for v, d in deg.items() if d <= 1)
    visited = set()
    branches = []

    def walk(start):
        path = [start]
        visited.add(start)
        prev = None
        cur = start
        while True:
            nxt = None
            for u in nbrs[cur]:
                if u in chain and u not in visited and u != prev:
                    nxt = u
                    break
            if nxt is None:
                return path
            path.append(nxt)
            visited.add(nxt)
            prev, cur = cur, nxt

    def is_terminus(v):
        return deg[v] <= 1 or any(u in junctions for u in nbrs[v])

    for v in sorted(chain):
        if v not in visited and is_terminus(v):
            branches.append(walk(v))
    for v in sorted(chain):                      # leftover pure cycles
        if v not in visited:
            branches.append(walk(v))

    all_vox = np.array(sorted(voxset), dtype=np.int64)
    return SkeletonGraph(tuple(shape), all_vox,
                         [np.array(b, dtype=np.int64) for b in branches],
                         n_clusters, len(endpoints))


def _terminal_spurs(graph: SkeletonGraph, min_len: int) -> list[np.ndarray]:
    """Short branches with a free endpoint and a junction attachment.

    A spur hangs off a bifurcation cluster and dies in an endpoint;
    bridges between two clusters and free-floating chains are kept.
    """
    if graph.n_bifurcations == 0:
        return []
    voxset = {tuple(v) for v in graph.voxels}
    branch_vox = set()
    for b in graph.branches:
        branch_vox.update(tuple(v) for v in b)
    junction_vox = voxset - branch_vox

    def nbr_count(v, pool):
        z, y, x = v
        return sum((z + dz, y + dy, x + dx) in pool
                   for dz, dy, dx in _OFFS if (dz, dy, dx) != (0, 0, 0))

    spurs = []
    for b in graph.branches:
        if b.shape[0] >= min_len:
            continue
        ends = [tuple(b[0]), tuple(b[-1])]
        touches = any(nbr_count(e, junction_vox) > 0 for e in ends)
        has_free_end = any(nbr_count(e, voxset) <= 1 for e in ends)
        if touches and has_free_end:
            spurs.append(b)
    return spurs


def _redundant_bridge(graph: SkeletonGraph, min_len: int) -> np.ndarray | None:
    """A short junction-to-junction branch that closes a spurious cycle.

    Wide tubes can thin into ladder shapes whose rungs connect the same
    pair of clusters twice.  A rung is removable when the rest of the
    skeleton stays one 26-connected piece without it; one is returned
    per call so removals never combine into a disconnection.
    """
    if graph.n_bifurcations == 0:
        return None
    voxset = {tuple(int(c) for c in v) for v in graph.voxels}
    branch_vox = set()
    for b in graph.branches:
        branch_vox.update(tuple(int(c) for c in v) for v in b)
    junction_vox = voxset - branch_vox

    def junction_touch(v):
        z, y, x = v
        return any((z + dz, y + dy, x + dx) in junction_vox
                   for dz, dy, dx in _OFFS if (dz, dy, dx) != (0, 0, 0))

    def connected_without(drop):
        rest = voxset - drop
        if not rest:
            return False
        seed = next(iter(rest))
        seen = {seed}
        stack = [seed]
        while stack:
            z, y, x = stack.pop()
            for dz, dy, dx in _OFFS:
                if (dz, dy, dx) == (0, 0, 0):
                    continue
                u = (z + dz, y + dy, x + dx)
                if u in rest and u not in seen:
                    seen.add(u)
                    stack.append(u)
        return len(seen) == len(rest)

    for b in sorted(graph.branches, key=len):
        if b.shape[0] >= min_len:
            continue
        ends = [tuple(int(c) for c in b[0]), tuple(int(c) for c in b[-1])]
        if not all(junction_touch(e) for e in ends):
            continue
        drop = {tuple(int(c) for c in v) for v in b}
        if connected_without(drop):
            return b
    return None


def _drop_dominated(voxset: set) -> None:
    """Remove voxels one of whose neighbors already covers their links.

    Candidates sit at degree >= 3 with every other neighbor adjacent to
    a single dominating neighbor; any path through the voxel reroutes
    through that neighbor, so connectivity is untouched.  Degree-1 and
    degree-2 voxels are never dropped, which keeps chains and their
    tips at full length.  Spur removal tends to strand such voxels on
    the trunk, where they would otherwise read as bifurcations.
    """
    changed = True
    while changed:
        changed = False
        for v in sorted(voxset):
            if v not in voxset:
                continue
            z, y, x = v
            ns = [(z + dz, y + dy, x + dx) for dz, dy, dx in _OFFS
                  if (dz, dy, dx) != (0, 0, 0)
                  and (z + dz, y + dy, x + dx) in voxset]
            if len(ns) < 3:
                continue
            for u in ns:
                if all(w == u
                       or (abs(w[0] - u[0]) <= 1 and abs(w[1] - u[1]) <= 1
                           and abs(w[2] - u[2]) <= 1)
                       for w in ns):
                    voxset.discard(v)
                    changed = True
                    break


def decompose(skeleton_mask: np.ndarray, prune_len: int = 0) -> SkeletonGraph:
    """Branch/node decomposition of a unit-width skeleton mask.

    With prune_len > 0, terminal branches shorter than prune_len voxels
    are removed iteratively.  After each pass redundant voxels are
    dropped (a spur can leave a bump that rides the trunk at degree 3)
    and the graph is rebuilt, so dissolved junctions merge their
    surviving branches.
    """
    m = (np.asarray(skeleton_mask) != 0)
    voxset = {tuple(int(c) for c in v) for v in np.argwhere(m)}
    _drop_dominated(voxset)
    graph = _decompose(voxset, m.shape)
    while prune_len > 0:
        spurs = _terminal_spurs(graph, prune_len)
        if spurs:
            for b in spurs:
                voxset.difference_update(tuple(int(c) for c in v) for v in b)
        else:
            bridge = _redundant_bridge(graph, prune_len)
            if bridge is None:
                break
            voxset.difference_update(tuple(int(c) for c in v) for v in bridge)
        _drop_dominated(voxset)
        graph = _decompose(voxset, m.shape)
    return graph


def _trim_tips(skel: np.ndarray, dist: np.ndarray) -> np.ndarray:
    """Retract terminal voxels that are not centers of maximal balls.

    A degree-1 voxel whose inscribed ball fits inside the inward
    neighbor's ball (radius grows at least as fast as the step toward
    it) carries no surface information; rounded tube caps thin into
    such runs, which would otherwise overstate branch length.  At a
    genuine tip the radius plateaus and retraction stops.
    """
    voxset = {tuple(int(c) for c in v) for v in np.argwhere(skel != 0)}
    changed = True
    while changed:
        changed = False
        for v in sorted(voxset):
            z, y, x = v
            ns = [(z + dz, y + dy, x + dx) for dz, dy, dx in _OFFS
                  if (dz, dy, dx) != (0, 0, 0)
                  and (z + dz, y + dy, x + dx) in voxset]
            if len(ns) != 1:
                continue
            u = ns[0]
            step = float(np.sqrt((v[0] - u[0]) ** 2 + (v[1] - u[1]) ** 2
                                 + (v[2] - u[2]) ** 2))
            # 0.6 slack absorbs grid quantization of the distance values
            # while a flat radius profile (step 1, growth 0) still stops
            if dist[u] >= dist[v] + step - 0.6:
                voxset.discard(v)
                changed = True
    out = np.zeros(skel.shape, dtype=np.uint8)
    if voxset:
        idx = np.array(sorted(voxset), dtype=np.int64)
        out[idx[:, 0], idx[:, 1], idx[:, 2]] = 1
    return out


def skeletonize(mask: np.ndarray, prune_len: int = 4,
                trim_tips: bool = True) -> SkeletonGraph:
    """Thin a binary volume and decompose the centerline into a graph.

    trim_tips retracts cap-overshoot runs at branch ends using the
    distance transform of the input mask.  An empty mask yields an
    empty graph.
    """
    m = np.asarray(mask)
    if m.ndim == 4:
        m = m[0]
    m = (m != 0)
    if not m.any():
        return SkeletonGraph(tuple(m.shape), np.zeros((0, 3), dtype=np.int64), [], 0, 0)
    sk = thin(m)
    if trim_tips:
        from scipy.ndimage import distance_transform_edt
        sk = _trim_tips(sk, distance_transform_edt(m))
    return decompose(sk, prune_len=prune_len)
