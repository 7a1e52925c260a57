"""Mask tracing, view-consensus clustering, and instance assembly.

A 2D mask's spatial tracker is the set of gaussians that rasterize the
mask's pixels while still mostly unoccluded (front transmittance above
0.5). Trackers from different frames are merged into instances when, in
enough of the frames that see both, a single tracker of that frame
contains both point sets; masks whose tracker keeps straddling several
same-frame trackers are under-segmentations and get discarded. Fused
instances are cleaned with DBSCAN over member centers.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .rasterizer import FrameContributions, render_with_contributions
from .scene import Frame, SceneError, SplatScene


@dataclass
class ClusteringConfig:
    transmittance_threshold: float = 0.5   # strict >, per-pixel
    visibility_fraction: float = 0.30      # inclusive
    containment_fraction: float = 0.80     # inclusive
    consensus_threshold: float = 0.90      # strict >
    intersect_fraction: float = 0.20       # inclusive, under-segmentation
    consistency_fraction: float = 0.80     # inclusive, under-segmentation
    dbscan_min_pts: int = 8
    dbscan_eps_factor: float = 2.0         # x median nearest-neighbor distance
    min_cluster_fraction: float = 0.05


@dataclass
class SpatialTracker:
    frame: int
    mask: int
    members: np.ndarray          # sorted gaussian indices
    member_mask: np.ndarray      # (N,) bool

    @property
    def size(self) -> int:
        return int(self.members.size)

    @staticmethod
    def from_indices(frame: int, mask: int, indices, n_gaussians: int) -> "SpatialTracker":
        members = np.asarray(sorted(int(i) for i in indices), dtype=np.int64)
        mm = np.zeros(n_gaussians, dtype=bool)
        mm[members] = True
        return SpatialTracker(frame=frame, mask=mask, members=members, member_mask=mm)


@dataclass
class FrameTrace:
    """Per-frame rasterization bookkeeping the tracker stage consumes."""

    frame: int
    contributing: np.ndarray                    # (N,) bool, any nonzero blend weight
    contributions: FrameContributions | None = None


@dataclass
class ConsensusEdge:
    a: int
    b: int
    rate: float
    n_vis: int
    n_contain: int


@dataclass
class ConsensusGraph:
    trackers: list[SpatialTracker]
    edges: list[ConsensusEdge]


@dataclass
class InstanceRecord:
    id: int
    gaussians: np.ndarray                 # sorted indices, floater-filtered
    masks: list[tuple[int, int]]          # (frame, mask) pairs
    mean_feature: np.ndarray | None = None


def trace_frame(scene: SplatScene, frame: Frame) -> FrameTrace:
    _, fc = render_with_contributions(scene, frame.camera)
    return FrameTrace(frame=frame.index, contributing=fc.contributing(), contributions=fc)


def trace_frames(scene: SplatScene) -> list[FrameTrace]:
    return [trace_frame(scene, f) for f in scene.frames]


def build_tracker(scene: SplatScene, frame: Frame, mask_id: int,
                  trace: FrameTrace | None = None,
                  cfg: ClusteringConfig | None = None) -> SpatialTracker:
    """Gaussians with nonzero weight and T > 0.5 at some pixel of the mask."""
    cfg = cfg or ClusteringConfig()
    pix = np.flatnonzero((frame.mask_map == mask_id).ravel())
    if pix.size == 0:
        raise SceneError(f"frame {frame.index}: mask {mask_id} has no pixels")
    if trace is None or trace.contributions is None:
        trace = trace_frame(scene, frame)
    fc = trace.contributions
    _, flat = fc.gather(pix)
    keep = fc.transmittance[flat] > cfg.transmittance_threshold
    members = np.unique(fc.gauss[flat][keep])
    if members.size == 0:
        raise SceneError(f"frame {frame.index}: mask {mask_id} has an empty tracker "
                         "(all contributors occluded)")
    return SpatialTracker.from_indices(frame.index, mask_id, members, scene.n_gaussians)


def is_visible(tracker: SpatialTracker, trace: FrameTrace,
               fraction: float = 0.30) -> bool:
    """True iff >= `fraction` of members contribute to that frame's render."""
    if tracker.size == 0:
        return False
    hits = trace.contributing[tracker.members].sum()
    return bool(hits >= fraction * tracker.size)


def is_contained(tracker: SpatialTracker, frame_trackers: list[SpatialTracker],
                 fraction: float = 0.80):
    """The frame's tracker holding >= `fraction` of members, if any.

    Ties and multiple qualifiers resolve to the highest containment
    (then lowest mask id). Returns (frame, mask) or None.
    """
    best = None
    best_frac = -1.0
    for t in frame_trackers:
        overlap = t.member_mask[tracker.members].sum() / tracker.size
        if overlap > best_frac + 1e-12:
            best, best_frac = t, overlap
    if best is not None and best_frac >= fraction:
        return (best.frame, best.mask)
    return None


class ConsensusIndex:
    """Vectorized visibility/containment tables over all trackers."""

    def __init__(self, trackers: list[SpatialTracker], traces: list[FrameTrace],
                 cfg: ClusteringConfig | None = None):
        self.cfg = cfg or ClusteringConfig()
        self.trackers = trackers
        self.traces = traces
        self.frame_ids = [tr.frame for tr in traces]
        n_t = len(trackers)
        if n_t == 0:
            self.visible = np.zeros((0, 0), dtype=bool)
            self.support = np.zeros((0, 0, 0), dtype=bool)
            return
        members = np.stack([t.member_mask for t in trackers]).astype(np.float64)
        sizes = members.sum(axis=1)
        self.sizes = sizes

        # visible[t, f]
        contrib = np.stack([tr.contributing for tr in traces]).astype(np.float64)
        frac_vis = (members @ contrib.T) / sizes[:, None]
        self.visible = frac_vis >= self.cfg.visibility_fraction - 1e-12

        # per frame: which trackers of that frame contain tracker t
        self.by_frame: dict[int, list[int]] = {}
        for i, t in enumerate(trackers):
            self.by_frame.setdefault(t.frame, []).append(i)

        self.contained_in: list[np.ndarray] = []    # per frame: (n_t, k_f) bool
        self.intersects: list[np.ndarray] = []      # per frame: (n_t, k_f) bool
        for f_pos, f_id in enumerate(self.frame_ids):
            rows = self.by_frame.get(f_id, [])
            if not rows:
                self.contained_in.append(np.zeros((n_t, 0), dtype=bool))
                self.intersects.append(np.zeros((n_t, 0), dtype=bool))
                continue
            fm = members[rows]                       # (k_f, N)
            overlap = members @ fm.T                 # (n_t, k_f) shared members
            frac_in_frame_tracker = overlap / sizes[:, None]
            frac_of_candidate = overlap / sizes[rows][None, :]
            self.contained_in.append(
                frac_in_frame_tracker >= self.cfg.containment_fraction - 1e-12)
            self.intersects.append(
                frac_of_candidate >= self.cfg.intersect_fraction - 1e-12)

    def pair_tables(self):
        """(n_vis, n_contain) integer matrices over tracker pairs."""
        n_t = len(self.trackers)
        n_vis = np.zeros((n_t, n_t), dtype=np.int64)
        n_con = np.zeros((n_t, n_t), dtype=np.int64)
        for f_pos in range(len(self.traces)):
            v = self.visible[:, f_pos].astype(np.int64)
            n_vis += np.outer(v, v)
            c = self.contained_in[f_pos].astype(np.int64)
            if c.shape[1]:
                # frame supports (a, b) when one tracker of it contains both
                n_con += (c @ c.T) > 0
        return n_vis, n_con


def consensus_rate(a: SpatialTracker, b: SpatialTracker,
                   index: ConsensusIndex) -> tuple[float, int, int]:
    """Eq-style view consensus: supporting frames / co-visible frames."""
    ia = index.trackers.index(a)
    ib = index.trackers.index(b)
    n_vis = n_con = 0
    for f_pos in range(len(index.traces)):
        both_vis = index.visible[ia, f_pos] and index.visible[ib, f_pos]
        n_vis += int(both_vis)
        c = index.contained_in[f_pos]
        if c.shape[1] and (c[ia] & c[ib]).any():
            n_con += 1
    rate = n_con / n_vis if n_vis > 0 else 0.0
    return rate, n_vis, n_con


def consensus_graph(index: ConsensusIndex) -> ConsensusGraph:
    n_vis, n_con = index.pair_tables()
    edges = []
    n_t = len(index.trackers)
    for a in range(n_t):
        for b in range(a + 1, n_t):
            rate = n_con[a, b] / n_vis[a, b] if n_vis[a, b] > 0 else 0.0
            edges.append(ConsensusEdge(a=a, b=b, rate=rate,
                                       n_vis=int(n_vis[a, b]), n_contain=int(n_con[a, b])))
    return ConsensusGraph(trackers=index.trackers, edges=edges)


def detect_undersegmentation(tracker: SpatialTracker, index: ConsensusIndex) -> bool:
    """Tracker straddles several same-frame trackers in most visible frames."""
    ti = index.trackers.index(tracker)
    visible_frames = 0
    multi_frames = 0
    for f_pos, f_id in enumerate(index.frame_ids):
        if not index.visible[ti, f_pos]:
            continue
        visible_frames += 1
        rows = index.by_frame.get(f_id, [])
        hits = 0
        for col, other in enumerate(rows):
            if index.trackers[other] is tracker:
                continue
            if index.intersects[f_pos][ti, col]:
                hits += 1
        if hits >= 2:
            multi_frames += 1
    if visible_frames == 0:
        return False
    return multi_frames >= index.cfg.consistency_fraction * visible_frames - 1e-12


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def cluster_masks(trackers: list[SpatialTracker], index: ConsensusIndex) -> list[list[SpatialTracker]]:
    """Connected components over C > threshold edges (order-independent)."""
    cfg = index.cfg
    pos = {id(t): i for i, t in enumerate(index.trackers)}
    rows = [pos[id(t)] for t in trackers]
    n_vis, n_con = index.pair_tables()
    uf = UnionFind(len(rows))
    for i in range(len(rows)):
        for j in range(i + 1, len(rows)):
            a, b = rows[i], rows[j]
            if n_vis[a, b] > 0 and n_con[a, b] / n_vis[a, b] > cfg.consensus_threshold:
                uf.union(i, j)
    groups: dict[int, list[SpatialTracker]] = {}
    for i, t in enumerate(trackers):
        groups.setdefault(uf.find(i), []).append(t)
    clusters = list(groups.values())
    for c in clusters:
        c.sort(key=lambda t: (t.frame, t.mask))
    clusters.sort(key=lambda c: (c[0].frame, c[0].mask))
    return clusters


# ---------------------------------------------------------------------------
# DBSCAN floater filtering


def dbscan_labels(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Classic DBSCAN; -1 marks noise. Neighborhoods include the point."""
    n = points.shape[0]
    tree = cKDTree(points)
    neighborhoods = tree.query_ball_point(points, r=eps)
    core = np.array([len(nb) >= min_pts for nb in neighborhoods])
    labels = np.full(n, -1, dtype=np.int64)
    cluster = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = cluster
        queue = deque([i])
        while queue:
            j = queue.popleft()
            for nb in neighborhoods[j]:
                if labels[nb] == -1:
                    labels[nb] = cluster
                    if core[nb]:
                        queue.append(nb)
        cluster += 1
    return labels


def filter_floaters(indices, scene: SplatScene,
                    cfg: ClusteringConfig | None = None) -> np.ndarray:
    """Drop isolated members; keep clusters holding >= 5% of the input."""
    cfg = cfg or ClusteringConfig()
    idx = np.asarray(sorted(int(i) for i in indices), dtype=np.int64)
    if idx.size == 0:
        raise SceneError("cannot filter an empty gaussian set")
    pts = scene.centers[idx].astype(np.float64)
    if idx.size == 1:
        raise SceneError("degenerate instance: single gaussian classified as noise")
    nn = cKDTree(pts).query(pts, k=2)[0][:, 1]
    eps = cfg.dbscan_eps_factor * float(np.median(nn))
    labels = dbscan_labels(pts, eps=eps, min_pts=cfg.dbscan_min_pts)
    if (labels == -1).all():
        raise SceneError("degenerate instance: DBSCAN classified every member as noise")
    keep = np.zeros(idx.size, dtype=bool)
    for lab in np.unique(labels):
        if lab == -1:
            continue
        sel = labels == lab
        if sel.sum() >= cfg.min_cluster_fraction * idx.size:
            keep |= sel
    if not keep.any():
        raise SceneError("degenerate instance: no DBSCAN cluster above the size floor")
    return idx[keep]


# ---------------------------------------------------------------------------
# full pipeline


def build_trackers(scene: SplatScene, traces: list[FrameTrace],
                   cfg: ClusteringConfig | None = None) -> list[SpatialTracker]:
    trace_by_frame = {t.frame: t for t in traces}
    trackers = []
    for frame in scene.frames:
        trace = trace_by_frame[frame.index]
        for mask_id in frame.mask_ids():
            trackers.append(build_tracker(scene, frame, mask_id, trace=trace, cfg=cfg))
    return trackers


def build_instances(scene: SplatScene, cfg: ClusteringConfig | None = None,
                    traces: list[FrameTrace] | None = None) -> list[InstanceRecord]:
    """Trackers -> under-segmentation filter -> consensus clusters -> DBSCAN."""
    cfg = cfg or ClusteringConfig()
    if not scene.frames or all(len(f.mask_ids()) == 0 for f in scene.frames):
        return []
    if traces is None:
        traces = trace_frames(scene)
    trackers = build_trackers(scene, traces, cfg)
    index = ConsensusIndex(trackers, traces, cfg)
    kept = [t for t in trackers if not detect_undersegmentation(t, index)]
    clusters = cluster_masks(kept, index)
    records = []
    for i, cluster in enumerate(clusters, start=1):
        union = np.zeros(scene.n_gaussians, dtype=bool)
        for t in cluster:
            union |= t.member_mask
        gaussians = filter_floaters(np.flatnonzero(union), scene, cfg)
        records.append(InstanceRecord(
            id=i, gaussians=gaussians,
            masks=[(t.frame, t.mask) for t in cluster]))
    return records


def instance_label_array(instances: list[InstanceRecord], n_gaussians: int) -> np.ndarray:
    """(N,) instance id per gaussian, 0 where unassigned; first id wins ties."""
    out = np.zeros(n_gaussians, dtype=np.int64)
    for rec in sorted(instances, key=lambda r: r.id, reverse=True):
        out[rec.gaussians] = rec.id
    return out
