"""Synthetic desk-scale scenes with known per-gaussian instance labels.

Instances are sparse blobs of moderately opaque disks: from any ring
viewpoint nearly every disk keeps front transmittance above 0.5 somewhere
on its instance's silhouette, which is what makes mask-tracing behave the
way it does on real captures. Frames carry rendered images plus label
maps rasterized from the ground truth, optionally corrupted with label
splits and merges to emulate noisy 2D segmentation priors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rasterizer import render_with_contributions
from .scene import Frame, SceneError, SplatScene, look_at_camera

_SH_C0 = 0.28209479177387814

# distinct, saturated-ish base colors cycled over instances
_PALETTE = np.array([
    (0.85, 0.25, 0.20), (0.20, 0.55, 0.85), (0.25, 0.75, 0.30),
    (0.90, 0.70, 0.15), (0.65, 0.30, 0.80), (0.20, 0.75, 0.70),
    (0.90, 0.45, 0.60), (0.55, 0.55, 0.25),
])


@dataclass
class OccluderArc:
    """A cylindrical wall segment of dense unlabeled disks."""

    center: tuple[float, float]        # world xy of the cylinder axis
    radius: float
    z_range: tuple[float, float]
    gaps_deg: tuple[tuple[float, float], ...] = ()   # azimuth spans left open
    opacity: float = 0.95
    spacing: float = 0.1
    scale: float = 0.11


@dataclass
class SynthSpec:
    n_instances: int
    gaussians_per_instance: int = 25
    n_views: int = 12
    noise_rate: float = 0.0
    image_size: int = 64
    instance_radius: float = 0.5
    min_separation: float = 3.0
    centers: list[tuple[float, float, float]] | None = None
    opacity_range: tuple[float, float] = (0.35, 0.45)
    scale_range: tuple[float, float] = (0.28, 0.45)    # relative to instance_radius
    elevation_deg: float = 32.0
    camera_distance_factor: float = 3.0
    mask_alpha_threshold: float = 0.25
    color_jitter: float = 0.08
    occluders: list[OccluderArc] = field(default_factory=list)
    # explicit (frame, "merge"|"split", instance ids) list; overrides noise_rate
    corruption_schedule: list[tuple[int, str, tuple[int, ...]]] | None = None
    seed: int = 0


@dataclass
class Corruption:
    frame: int
    kind: str                      # "merge" or "split"
    instances: tuple[int, ...]     # ground-truth instance ids involved
    dense_labels: tuple[int, ...]  # labels in the final per-frame mask_map


@dataclass
class SynthResult:
    scene: SplatScene
    gt_labels: np.ndarray                    # (N,) 0 = background/occluder
    corruptions: list[Corruption]
    clean_instance_masks: dict[int, np.ndarray]   # frame -> (H, W) instance-id map
    label_to_instance: dict[int, dict[int, int]]  # frame -> dense label -> gt id (0 if merged)


def _instance_centers(spec: SynthSpec) -> np.ndarray:
    if spec.centers is not None:
        centers = np.asarray(spec.centers, dtype=np.float64)
        if centers.shape != (spec.n_instances, 3):
            raise SceneError(f"expected {spec.n_instances} centers, got {centers.shape}")
        for i in range(len(centers)):
            for j in range(i + 1, len(centers)):
                d = np.linalg.norm(centers[i] - centers[j])
                if d < spec.min_separation:
                    raise SceneError(
                        f"degenerate layout: instances {i + 1} and {j + 1} are {d:.3f} apart "
                        f"(min separation {spec.min_separation})")
        return centers
    k = spec.n_instances
    if k == 1:
        return np.zeros((1, 3))
    ring = spec.min_separation / (2.0 * math.sin(math.pi / k)) * 1.05
    ang = np.arange(k) * 2.0 * math.pi / k
    return np.stack([ring * np.cos(ang), ring * np.sin(ang), np.zeros(k)], axis=1)


def _lattice_ball(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    """~n jittered lattice points in a ball: locally even spacing keeps
    every point DBSCAN-core-dense, unlike uniform sampling."""
    spacing = radius * (4.0 * math.pi / (3.0 * max(n, 1))) ** (1.0 / 3.0)
    pts = None
    for _ in range(32):
        m = int(math.ceil(radius / spacing))
        ax = np.arange(-m, m + 1) * spacing
        gx, gy, gz = np.meshgrid(ax, ax, ax)
        pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
        pts = pts[np.linalg.norm(pts, axis=1) <= radius]
        if len(pts) >= n:
            break
        spacing *= 0.96
    pts = pts + rng.uniform(-0.2, 0.2, size=pts.shape) * spacing
    if len(pts) > n:
        # trim the outermost points; keeps the lattice interior intact
        order = np.argsort(np.linalg.norm(pts, axis=1), kind="stable")
        pts = pts[np.sort(order[:n])]
    return pts


def _blob(rng: np.random.Generator, center: np.ndarray, spec: SynthSpec, color: np.ndarray):
    r = spec.instance_radius
    centers = center + _lattice_ball(rng, spec.gaussians_per_instance, r)
    n = centers.shape[0]
    tu = rng.normal(size=(n, 3))
    tu /= np.linalg.norm(tu, axis=1, keepdims=True)
    tv = np.cross(tu, rng.normal(size=(n, 3)))
    bad = np.linalg.norm(tv, axis=1) < 1e-8
    while bad.any():
        tv[bad] = np.cross(tu[bad], rng.normal(size=(int(bad.sum()), 3)))
        bad = np.linalg.norm(tv, axis=1) < 1e-8
    tv /= np.linalg.norm(tv, axis=1, keepdims=True)
    scales = rng.uniform(*spec.scale_range, size=(n, 2)) * r
    ops = rng.uniform(*spec.opacity_range, size=n)
    j = spec.color_jitter
    rgb = np.clip(color + rng.uniform(-j, j, size=(n, 3)), 0.02, 0.98)
    sh = (rgb / _SH_C0).reshape(n, 1, 3)
    return centers, tu, tv, scales, ops, sh


def _occluder_gaussians(arc: OccluderArc, rng: np.random.Generator):
    z0, z1 = arc.z_range
    n_az = max(4, int(round(2.0 * math.pi * arc.radius / arc.spacing)))
    n_z = max(2, int(round((z1 - z0) / arc.spacing)))
    rows = []
    for iz in range(n_z):
        z = z0 + (iz + 0.5) * (z1 - z0) / n_z
        for ia in range(n_az):
            az = math.degrees(2.0 * math.pi * ia / n_az)
            in_gap = any(_azimuth_in(az, lo, hi) for lo, hi in arc.gaps_deg)
            if in_gap:
                continue
            a = math.radians(az)
            pos = np.array([arc.center[0] + arc.radius * math.cos(a),
                            arc.center[1] + arc.radius * math.sin(a), z])
            tu = np.array([-math.sin(a), math.cos(a), 0.0])   # tangential
            tv = np.array([0.0, 0.0, 1.0])                    # vertical
            rows.append((pos, tu, tv))
    if not rows:
        return None
    n = len(rows)
    centers = np.stack([r[0] for r in rows])
    tu = np.stack([r[1] for r in rows])
    tv = np.stack([r[2] for r in rows])
    scales = np.full((n, 2), arc.scale)
    ops = np.full(n, arc.opacity)
    gray = rng.uniform(0.35, 0.55, size=(n, 1)) * np.ones((1, 3))
    sh = (gray / _SH_C0).reshape(n, 1, 3)
    return centers, tu, tv, scales, ops, sh


def _azimuth_in(az: float, lo: float, hi: float) -> bool:
    az, lo, hi = az % 360.0, lo % 360.0, hi % 360.0
    if lo <= hi:
        return lo <= az <= hi
    return az >= lo or az <= hi


def _ring_cameras(spec: SynthSpec, bound: float):
    dist = spec.camera_distance_factor * max(bound, 1e-6)
    half = math.atan(1.25 * bound / dist)
    f = (spec.image_size / 2.0) / math.tan(half)
    elev = math.radians(spec.elevation_deg)
    cams = []
    for i in range(spec.n_views):
        az = 2.0 * math.pi * i / spec.n_views
        pos = np.array([dist * math.cos(elev) * math.cos(az),
                        dist * math.cos(elev) * math.sin(az),
                        dist * math.sin(elev)])
        cams.append(look_at_camera(pos, (0.0, 0.0, 0.0), f, f,
                                   spec.image_size, spec.image_size))
    return cams


def _pick_merge_pairs(rng, present_pairs: list[tuple[int, int]], count: int):
    pairs = list(present_pairs)
    rng.shuffle(pairs)
    return [pairs[i % len(pairs)] for i in range(count)]


def generate(spec: SynthSpec) -> SynthResult:
    """Build scene + frames + ground truth, with optional label corruption."""
    if spec.n_instances < 1:
        raise SceneError("need at least one instance")
    rng = np.random.default_rng(spec.seed)
    inst_centers = _instance_centers(spec)

    parts, labels = [], []
    for k in range(spec.n_instances):
        color = _PALETTE[k % len(_PALETTE)]
        part = _blob(rng, inst_centers[k], spec, color)
        parts.append(part)
        labels.append(np.full(part[0].shape[0], k + 1, dtype=np.int64))
    for arc in spec.occluders:
        occ = _occluder_gaussians(arc, rng)
        if occ is not None:
            parts.append(occ)
            labels.append(np.zeros(occ[0].shape[0], dtype=np.int64))

    centers = np.concatenate([p[0] for p in parts])
    scene = SplatScene(
        centers=centers.astype(np.float32),
        tangent_u=np.concatenate([p[1] for p in parts]).astype(np.float32),
        tangent_v=np.concatenate([p[2] for p in parts]).astype(np.float32),
        scales=np.concatenate([p[3] for p in parts]).astype(np.float32),
        opacities=np.concatenate([p[4] for p in parts]).astype(np.float32),
        sh=np.concatenate([p[5] for p in parts]).astype(np.float32),
        features=rng.normal(size=(centers.shape[0], 16)).astype(np.float32),
    )
    gt = np.concatenate(labels)

    reach = (1.0 + 3.0 * spec.scale_range[1]) * spec.instance_radius
    bound = float(np.linalg.norm(inst_centers[:, :2], axis=1).max()) + reach
    for arc in spec.occluders:
        bound = max(bound, float(np.hypot(*arc.center)) + arc.radius)
    cams = _ring_cameras(spec, bound)

    k = spec.n_instances
    frames: list[Frame] = []
    clean_masks: dict[int, np.ndarray] = {}
    inst_masks: dict[int, np.ndarray] = {}
    frame_fcs = []
    for i, cam in enumerate(cams):
        out, fc = render_with_contributions(scene, cam)
        wsum = fc.label_weights(gt, k)
        inst_w = wsum[:, :, 1:]
        best = inst_w.argmax(axis=2) + 1
        best_w = inst_w.max(axis=2)
        labeled = (out.alpha >= spec.mask_alpha_threshold) & (best_w >= 0.5 * out.alpha)
        inst_mask = np.where(labeled, best, 0).astype(np.int32)
        clean_masks[i] = inst_mask.copy()
        inst_masks[i] = inst_mask
        frame_fcs.append(fc)
        frames.append(Frame(index=i, camera=cam, mask_map=inst_mask, image=out.color.copy()))

    # corruption pass: either an explicit schedule, or ceil(rate * n_views)
    # corrupted frames with one split or merge each, diversifying victims
    # so repeated identical corruptions only appear when unavoidable
    plan: list[tuple[int, str, tuple[int, ...]]] = []
    if spec.corruption_schedule is not None:
        plan = [(fi, kind, tuple(v)) for fi, kind, v in spec.corruption_schedule]
    elif spec.noise_rate > 0:
        n_corrupt = min(int(math.ceil(spec.noise_rate * spec.n_views)), spec.n_views)
        corrupt_frames = sorted(rng.choice(spec.n_views, size=n_corrupt,
                                           replace=False).tolist())
        all_pairs = [(a + 1, b + 1) for a in range(k) for b in range(a + 1, k)]
        merge_sched = _pick_merge_pairs(rng, all_pairs, n_corrupt) if all_pairs else []
        split_sched = list(rng.permutation(np.arange(1, k + 1)))
        split_ptr = merge_ptr = 0
        for fi in corrupt_frames:
            present = [int(v) for v in np.unique(inst_masks[fi]) if 0 < v <= k]
            kind = "merge" if (k > 1 and len(present) >= 2 and rng.uniform() < 0.5) else "split"
            if kind == "merge":
                a, b = merge_sched[merge_ptr % len(merge_sched)]
                merge_ptr += 1
                if a not in present or b not in present:
                    avail = [p for p in all_pairs if p[0] in present and p[1] in present]
                    if avail:
                        a, b = avail[int(rng.integers(len(avail)))]
                    else:
                        kind = "split"
                if kind == "merge":
                    plan.append((fi, "merge", (a, b)))
            if kind == "split":
                victims = [int(v) for v in split_sched if v in present] or present
                if victims:
                    plan.append((fi, "split", (victims[split_ptr % len(victims)],)))
                    split_ptr += 1

    # working maps hold "extended ids": 1..k ground truth, k+1.. split parts
    corruptions: list[Corruption] = []
    origin_of: dict[int, tuple] = {i: ("clean", (i,)) for i in range(1, k + 1)}
    next_ext = k + 1
    for fi, kind, victims in plan:
        m = inst_masks[fi]
        present = {int(v) for v in np.unique(m) if 0 < v <= k}
        if kind == "merge":
            a, b = victims
            if a not in present or b not in present:
                raise SceneError(f"cannot merge instances {victims} in frame {fi}: not both visible")
            ext = next_ext
            next_ext += 1
            origin_of[ext] = ("merge", (a, b))
            m[(m == a) | (m == b)] = ext
            corruptions.append(Corruption(frame=fi, kind="merge", instances=(a, b),
                                          dense_labels=()))
        elif kind == "split":
            (v,) = victims
            ys, xs = np.nonzero(m == v)
            if len(xs) < 4:
                continue
            phi = rng.uniform(0.0, math.pi)
            proj = (xs - xs.mean()) * math.cos(phi) + (ys - ys.mean()) * math.sin(phi)
            side = proj >= np.median(proj)
            if side.all() or (~side).all():
                continue
            ext = next_ext
            next_ext += 1
            origin_of[ext] = ("split", (int(v),))
            m[ys[side], xs[side]] = ext
            corruptions.append(Corruption(frame=fi, kind="split", instances=(int(v),),
                                          dense_labels=()))
        elif kind == "part":
            # view-consistent over-segmentation: cut the instance along a
            # fixed world plane, assign each mask pixel to the dominant half
            (v,) = victims
            ys, xs = np.nonzero(m == v)
            if len(xs) < 4:
                continue
            sel = gt == v
            cut = np.median(centers[sel, 0])
            part_labels = np.zeros(len(gt), dtype=np.int64)
            part_labels[sel] = 1 + (centers[sel, 0] > cut)
            w = frame_fcs[fi].label_weights(part_labels, 2)
            side = w[ys, xs, 2] > w[ys, xs, 1]
            if side.all() or (~side).all():
                continue
            ext = next_ext
            next_ext += 1
            origin_of[ext] = ("split", (int(v),))
            m[ys[side], xs[side]] = ext
            corruptions.append(Corruption(frame=fi, kind="split", instances=(int(v),),
                                          dense_labels=()))
        else:
            raise SceneError(f"unknown corruption kind {kind!r}")

    # dense per-frame relabeling with a seeded permutation; record the
    # final label of each corruption
    label_to_instance: dict[int, dict[int, int]] = {}
    for fi, frame in enumerate(frames):
        m = inst_masks[fi]
        present = [int(v) for v in np.unique(m) if v > 0]
        perm = list(rng.permutation(len(present)))
        mapping = {old: pi + 1 for old, pi in zip(present, perm)}
        new = np.zeros_like(m)
        for old, dense in mapping.items():
            new[m == old] = dense
        frame.mask_map = new
        lut = {}
        for old, dense in mapping.items():
            kind, insts = origin_of[old]
            lut[dense] = insts[0] if kind in ("clean", "split") else 0
        label_to_instance[fi] = lut
        for c in corruptions:
            if c.frame != fi:
                continue
            if c.kind == "merge":
                ext = [o for o, (kk, ii) in origin_of.items() if kk == "merge" and ii == c.instances]
                c.dense_labels = tuple(mapping[e] for e in ext if e in mapping)
            else:
                ext = [o for o, (kk, ii) in origin_of.items() if kk == "split" and ii == c.instances]
                dense = [mapping[e] for e in ext if e in mapping]
                base = mapping.get(c.instances[0])
                if base is not None:
                    dense.append(base)
                c.dense_labels = tuple(sorted(dense))

    scene.frames = frames
    scene.validate()
    return SynthResult(scene=scene, gt_labels=gt, corruptions=corruptions,
                       clean_instance_masks=clean_masks, label_to_instance=label_to_instance)


def synth_scene(spec: SynthSpec):
    """Spec-facing wrapper: (scene, per-gaussian ground-truth labels)."""
    result = generate(spec)
    return result.scene, result.gt_labels
