"""Synthetic tubular-tree phantoms with exact topology ground truth.

Each case is a recursive two-child tree of capsule-shaped tubes
rasterized into a CT-like intensity volume (dark lumen, soft-tissue
wall, brighter background, additive noise).  The centerline graph is
recorded from the generating segments, not re-skeletonized, so branch
count and tree length are exact oracles for the metrics module.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ArgumentError
from .skeleton import SkeletonGraph
from .volume import Volume, write_volume


@dataclass(frozen=True)
class TreeSpec:
    """Geometry and intensity model for one phantom tree."""

    depth: int = 2
    root_radius: float = 2.2
    radius_decay: float = 0.85
    length_range: tuple[float, float] = (14.0, 20.0)
    angle_range: tuple[float, float] = (25.0, 42.0)   # degrees off parent
    shape: tuple[int, int, int] = (64, 64, 64)
    lumen_hu: float = -950.0
    wall_hu: float = -200.0
    background_hu: float = 30.0
    noise_sigma: float = 20.0
    wall_thickness: float = 1.5

    def __post_init__(self):
        if self.depth < 0:
            raise ArgumentError(f"depth must be >= 0, got {self.depth}")
        if self.root_radius * self.radius_decay ** self.depth < 1.0:
            raise ArgumentError(
                "radius decays below 1 voxel at max depth "
                f"(root {self.root_radius}, decay {self.radius_decay}, "
                f"depth {self.depth})")
        if not (0.0 < self.length_range[0] <= self.length_range[1]):
            raise ArgumentError(f"bad length range {self.length_range}")
        if not (0.0 < self.angle_range[0] <= self.angle_range[1] < 90.0):
            raise ArgumentError(f"bad angle range {self.angle_range}")
        if min(self.shape) < 4 * self.root_radius:
            raise ArgumentError(
                f"shape {self.shape} cannot hold radius {self.root_radius}")


# ---------------------------------------------------------------------------
# Segment geometry
# ---------------------------------------------------------------------------

def _unit(v):
    return v / np.linalg.norm(v)


def _perp_basis(u):
    """Two unit vectors orthogonal to u and to each other."""
    ref = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    a = _unit(np.cross(u, ref))
    return a, np.cross(u, a)


def _tilted(u, angle_rad, azimuth):
    a, b = _perp_basis(u)
    side = math.cos(azimuth) * a + math.sin(azimuth) * b
    return _unit(math.cos(angle_rad) * u + math.sin(angle_rad) * side)


def _segment_distance(p0, p1, q0, q1):
    """Minimum distance between segments p0-p1 and q0-q1."""
    d1 = p1 - p0
    d2 = q1 - q0
    r = p0 - q0
    a = d1 @ d1
    e = d2 @ d2
    f = d2 @ r
    c = d1 @ r
    b = d1 @ d2
    den = a * e - b * b
    s = 0.0 if den < 1e-12 else float(np.clip((b * f - c * e) / den, 0.0, 1.0))
    t = (b * s + f) / e if e > 1e-12 else 0.0
    if t < 0.0:
        t = 0.0
        s = float(np.clip(-c / a, 0.0, 1.0)) if a > 1e-12 else 0.0
    elif t > 1.0:
        t = 1.0
        s = float(np.clip((b - c) / a, 0.0, 1.0)) if a > 1e-12 else 0.0
    return float(np.linalg.norm((p0 + s * d1) - (q0 + t * d2)))


@dataclass
class _Segment:
    p0: np.ndarray
    p1: np.ndarray
    radius: float
    parent: int               # index into the segment list, -1 for root


def _fits(p, radius, shape):
    return all(radius + 1.0 <= p[i] <= shape[i] - radius - 2.0 for i in range(3))


def _clear_of(seg_p0, seg_p1, radius, segments, parent_idx):
    """Candidate keeps a gap to every segment it is not attached to.

    Segments meeting the candidate at its start (the parent and any
    sibling placed first) legitimately overlap there; those are held
    apart by angle instead of by distance.
    """
    u = _unit(seg_p1 - seg_p0)
    for i, s in enumerate(segments):
        if i == parent_idx:
            continue
        if np.linalg.norm(s.p0 - seg_p0) < 1e-9:
            # siblings overlap near the fork by ~r/sin(half angle); below
            # ~58 degrees the merged stem outgrows the junction cluster
            # and the skeleton under-counts both children
            w = _unit(s.p1 - s.p0)
            if float(u @ w) > math.cos(math.radians(58.0)):
                return False
            continue
        gap = _segment_distance(seg_p0, seg_p1, s.p0, s.p1)
        if gap < radius + s.radius + 1.5:
            return False
    return True


def _grow(spec: TreeSpec, rng: np.random.Generator) -> list[_Segment]:
    last_err = None
    for restart in range(8):
        try:
            return _grow_once(spec, rng)
        except ArgumentError as e:
            last_err = e
    raise last_err


def _grow_once(spec: TreeSpec, rng: np.random.Generator) -> list[_Segment]:
    shape = np.array(spec.shape, dtype=float)
    lo, hi = spec.length_range

    root_len = rng.uniform(lo, hi)
    for attempt in range(200):
        tilt = math.radians(rng.uniform(0.0, 12.0))
        azim = rng.uniform(0.0, 2.0 * math.pi)
        u = _tilted(np.array([1.0, 0.0, 0.0]), tilt, azim)
        start = np.array([
            spec.root_radius + 2.0,
            shape[1] / 2.0 + rng.uniform(-4.0, 4.0),
            shape[2] / 2.0 + rng.uniform(-4.0, 4.0)])
        end = start + root_len * u
        if _fits(start, spec.root_radius, shape) and _fits(end, spec.root_radius, shape):
            break
    else:
        raise ArgumentError(
            f"no feasible root tube for shape {spec.shape} and "
            f"length range {spec.length_range}")

    segments = [_Segment(start, end, spec.root_radius, -1)]
    frontier = [0]
    for gen in range(1, spec.depth + 1):
        radius = spec.root_radius * spec.radius_decay ** gen
        next_frontier = []
        for idx in frontier:
            parent = segments[idx]
            u = _unit(parent.p1 - parent.p0)
            base_azim = rng.uniform(0.0, 2.0 * math.pi)
            for child in range(2):
                placed = False
                length = rng.uniform(lo, hi) * spec.radius_decay ** gen
                for attempt in range(60):
                    ang = math.radians(rng.uniform(*spec.angle_range))
                    azim = base_azim + child * math.pi + rng.uniform(-0.6, 0.6)
                    v = _tilted(u, ang, azim)
                    end = parent.p1 + length * v
                    if (_fits(end, radius, shape)
                            and _clear_of(parent.p1, end, radius, segments, idx)):
                        segments.append(_Segment(parent.p1.copy(), end, radius, idx))
                        next_frontier.append(len(segments) - 1)
                        placed = True
                        break
                    if attempt % 10 == 9:
                        length = max(length * 0.8, 9.0)
                if not placed:
                    raise ArgumentError(
                        f"could not place generation-{gen} branch inside "
                        f"shape {spec.shape}; enlarge the volume or shorten "
                        "the length range")
        frontier = next_frontier
    return segments


# ---------------------------------------------------------------------------
# Rasterization and centerline truth
# ---------------------------------------------------------------------------

def _rasterize_capsule(mask: np.ndarray, p0, p1, r: float) -> None:
    """OR a capsule (segment dilated by a ball) into mask, uint8 in place."""
    lo = np.maximum(np.floor(np.minimum(p0, p1) - r - 1).astype(int), 0)
    hi = np.minimum(np.ceil(np.maximum(p0, p1) + r + 2).astype(int),
                    np.array(mask.shape))
    zz, yy, xx = np.mgrid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    pts = np.stack([zz, yy, xx], axis=-1).astype(float) - p0
    d = np.asarray(p1, dtype=float) - p0
    L = float(np.linalg.norm(d))
    u = d / L
    t = np.clip(pts @ u, 0.0, L)
    dist = np.linalg.norm(pts - t[..., None] * u, axis=-1)
    mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] |= (dist <= r).astype(np.uint8)


def _centerline_voxels(p0, p1) -> list[tuple[int, int, int]]:
    """26-connected digital line from p0 to p1.

    Steps follow the dominant axis so consecutive voxels differ by at
    most one per coordinate; a denser sampling would count staircase
    voxels a 26-adjacency walk (or a skeleton) never visits.
    """
    d = np.asarray(p1, dtype=float) - np.asarray(p0, dtype=float)
    n = max(int(math.ceil(np.abs(d).max())), 1)
    out = []
    for i in range(n + 1):
        p = np.asarray(p0) + (i / n) * d
        v = tuple(int(c) for c in np.round(p))
        if not out or v != out[-1]:
            out.append(v)
    return out


def _truth_graph(segments: list[_Segment], shape) -> SkeletonGraph:
    """Medial-axis centerline of the rasterized solid, analytically.

    Two child tubes overlap past their fork until their axes are two
    radii apart, so the solid carries a single merged stem there.  The
    recorded parent line therefore runs through the stem (along the
    fork bisector) and each child line starts at its separation point;
    a naive union of the generating segments would double-count the
    stem and overstate tree length by several voxels per bifurcation.
    """
    children: dict[int, list[int]] = {}
    for idx, s in enumerate(segments):
        if s.parent >= 0:
            children.setdefault(s.parent, []).append(idx)

    stem_end = {}       # internal segment -> fork point of the solid
    child_start = {}    # child segment -> where its tube comes free
    for i, kids in children.items():
        j = segments[i].p1
        dirs = [_unit(segments[k].p1 - segments[k].p0) for k in kids]
        if len(kids) == 2:
            cosg = float(np.clip(dirs[0] @ dirs[1], -1.0, 1.0))
            half = 0.5 * math.acos(cosg)
            r_c = max(segments[k].radius for k in kids)
            shortest = min(float(np.linalg.norm(segments[k].p1 - segments[k].p0))
                           for k in kids)
            # +0.25: digitally the tubes come apart a little past surface
            # contact, once background shows up between the rasterized walls
            d_sep = min((r_c + 0.25) / max(math.sin(half), 1e-6),
                        0.45 * shortest)
            bis = _unit(dirs[0] + dirs[1])
            stem_end[i] = j + d_sep * math.cos(half) * bis
        else:
            d_sep = 0.0
            stem_end[i] = j
        for k, w in zip(kids, dirs):
            child_start[k] = j + d_sep * w

    claimed = set()
    branches = []
    junctions = []
    endpoints = 0
    for i, s in enumerate(segments):
        start = child_start.get(i, s.p0)
        line = _centerline_voxels(start, s.p1)
        if i in stem_end and not np.allclose(stem_end[i], s.p1):
            for v in _centerline_voxels(s.p1, stem_end[i])[1:]:
                if v != line[-1]:
                    line.append(v)
        if i in stem_end:
            jv = line[-1]
            line = line[:-1]
            if jv not in claimed:
                claimed.add(jv)
                junctions.append(jv)
        else:
            endpoints += 1
        line = [v for v in line if v not in claimed]
        claimed.update(line)
        branches.append(np.array(line, dtype=np.int64))
    endpoints += 1            # the root's open start

    all_vox = sorted(claimed)
    return SkeletonGraph(tuple(int(c) for c in shape),
                         np.array(all_vox, dtype=np.int64),
                         branches, len(junctions), endpoints)


def generate_tree(spec: TreeSpec, rng: np.random.Generator):
    """One phantom case.

    Returns (image Volume in HU, label mask, truth SkeletonGraph,
    branch count, tree length in centerline voxels).
    """
    segments = _grow(spec, rng)

    label = np.zeros(spec.shape, dtype=np.uint8)
    wall = np.zeros(spec.shape, dtype=np.uint8)
    for s in segments:
        _rasterize_capsule(label, s.p0, s.p1, s.radius)
        _rasterize_capsule(wall, s.p0, s.p1, s.radius + spec.wall_thickness)

    img = np.full(spec.shape, spec.background_hu, dtype=np.float32)
    img[wall != 0] = spec.wall_hu
    img[label != 0] = spec.lumen_hu
    img += rng.normal(0.0, spec.noise_sigma, size=spec.shape).astype(np.float32)

    truth = _truth_graph(segments, spec.shape)
    return (Volume(img), label, truth,
            truth.n_branches, truth.total_length)


# ---------------------------------------------------------------------------
# Truth (de)serialization
# ---------------------------------------------------------------------------

def truth_to_dict(g: SkeletonGraph) -> dict:
    branch_vox = {tuple(int(c) for c in v) for b in g.branches for v in b}
    junctions = [[int(c) for c in v] for v in g.voxels
                 if tuple(int(c) for c in v) not in branch_vox]
    return {
        "shape": [int(s) for s in g.shape],
        "n_branches": int(g.n_branches),
        "n_bifurcations": int(g.n_bifurcations),
        "n_endpoints": int(g.n_endpoints),
        "tree_length": int(g.total_length),
        "branches": [[list(map(int, v)) for v in b] for b in g.branches],
        "junctions": junctions,
    }


def truth_from_dict(d: dict) -> SkeletonGraph:
    branches = [np.array(b, dtype=np.int64).reshape(-1, 3) for b in d["branches"]]
    vox = [v for b in branches for v in b.tolist()] + [list(map(int, j)) for j in d["junctions"]]
    return SkeletonGraph(tuple(d["shape"]),
                         np.array(sorted(set(map(tuple, vox))), dtype=np.int64),
                         branches, int(d["n_bifurcations"]),
                         int(d["n_endpoints"]))


# ---------------------------------------------------------------------------
# Corpus generation
# ---------------------------------------------------------------------------

def corpus(out_dir: str | Path, n_cases: int, spec: TreeSpec, seed: int,
           depth_range: tuple[int, int] | None = None) -> list[dict]:
    """Write n reproducible cases and a manifest with a 60/20/20 split.

    Each case draws its own generator from one spawned seed stream, so
    corpora are byte-identical across runs for a fixed seed and cases
    may be generated in any order.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if n_cases < 1:
        raise ArgumentError(f"need at least one case, got {n_cases}")

    n_train = int(n_cases * 0.6)
    n_val = int(n_cases * 0.2)
    splits = (["train"] * n_train + ["val"] * n_val
              + ["test"] * (n_cases - n_train - n_val))

    seeds = np.random.SeedSequence(seed).spawn(n_cases)
    manifest = []
    for i, (split, ss) in enumerate(zip(splits, seeds)):
        rng = np.random.default_rng(ss)
        case_spec = spec
        if depth_range is not None:
            case_spec = replace(spec, depth=int(rng.integers(depth_range[0],
                                                             depth_range[1] + 1)))
        img, label, truth, _, _ = generate_tree(case_spec, rng)
        name = f"case{i:03d}"
        img_path = out / f"{name}_img.tvol"
        lab_path = out / f"{name}_lab.tvol"
        truth_path = out / f"{name}_truth.json"
        write_volume(img, img_path)
        write_volume(Volume(label.astype(np.uint8)), lab_path)
        truth_path.write_text(json.dumps(truth_to_dict(truth)))
        manifest.append({
            "case": name,
            "split": split,
            "image": img_path.name,
            "label": lab_path.name,
            "truth": truth_path.name,
        })
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest
