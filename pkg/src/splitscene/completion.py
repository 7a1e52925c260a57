"""Occlusion-aware completion of an extracted instance.

Pipeline: 16 object-centered viewpoints are scored for scene occlusion;
the clear ones become condition views, the rest are synthesized. Each
timestep re-noises the encoded condition views, warps them into every
target through rendered depth (dropping cells that would land on a
back-facing surface there), overwrites the warped-known cells, queries
the denoiser once per condition view, averages the noise and applies the
deterministic update to the unknown cells. Finally the instance's splats
are refined jointly against condition renders and generated views.

The latent space is block-averaged RGB (nearest-neighbor decode): the
orchestration math never looks inside a latent cell.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .denoiser import NoiseSchedule
from .rasterizer import eval_sh, pixel_rays, render
from .scene import Camera, SceneError, SplatScene, look_at_camera

_SH_C0 = 0.28209479177387814
N_VIEWPOINTS = 16


@dataclass
class CompletionConfig:
    view_size: int = 64
    fov_deg: float = 60.0
    elevation_deg: float = 30.0
    radius_factor: float = 2.5
    condition_threshold: float = 0.05
    min_conditions: int = 2
    latent_factor: int = 8
    timesteps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    tau_seg: float = 0.9
    # minimum latent-cell coverage for a condition cell to warp into
    # targets; above 1.0 disables warping (pure generation)
    warp_alpha_floor: float = 0.5
    condition_mode: str = "average"      # or "roundrobin"
    seed: int = 42

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule.linear(self.timesteps, self.beta_start, self.beta_end)


# ---------------------------------------------------------------------------
# viewpoints


def instance_bounds(scene: SplatScene, indices) -> tuple[np.ndarray, float]:
    """(centroid, bounding-sphere radius incl. 3-sigma disk extent)."""
    idx = np.asarray(sorted(int(i) for i in indices), dtype=np.int64)
    if idx.size == 0:
        raise SceneError("instance has no gaussians")
    centers = scene.centers[idx].astype(np.float64)
    centroid = centers.mean(axis=0)
    reach = np.linalg.norm(centers - centroid, axis=1) \
        + 3.0 * scene.scales[idx].max(axis=1)
    radius = float(reach.max())
    if radius < 1e-9:
        raise SceneError("degenerate instance: zero spatial extent")
    return centroid, radius


def propose_viewpoints(instance, scene: SplatScene,
                       config: CompletionConfig | None = None) -> list[Camera]:
    """16 poses on a ring: 22.5 degree azimuth steps, fixed elevation,
    radius proportional to the instance bounding sphere, all aimed at the
    instance centroid."""
    config = config or CompletionConfig()
    centroid, radius = instance_bounds(scene, _indices(instance))
    dist = config.radius_factor * radius
    elev = math.radians(config.elevation_deg)
    size = config.view_size
    f = (size / 2.0) / math.tan(math.radians(config.fov_deg) / 2.0)
    poses = []
    for i in range(N_VIEWPOINTS):
        az = math.radians(360.0 * i / N_VIEWPOINTS)
        pos = centroid + dist * np.array([math.cos(elev) * math.cos(az),
                                          math.cos(elev) * math.sin(az),
                                          math.sin(elev)])
        poses.append(look_at_camera(pos, centroid, f, f, size, size))
    return poses


def _indices(instance) -> np.ndarray:
    gaussians = getattr(instance, "gaussians", instance)
    return np.asarray(gaussians, dtype=np.int64)


def occlusion_score(pose: Camera, instance, scene: SplatScene,
                    depth_epsilon: float | None = None) -> float:
    """Fraction of the instance silhouette hidden behind nearer scene geometry."""
    idx = _indices(instance)
    inst_scene = scene.subset(idx)
    inst = render(inst_scene, pose)
    sil = inst.alpha > 0.5
    if not sil.any():
        return 1.0
    full = render(scene, pose)
    if depth_epsilon is None:
        depth_epsilon = 1e-3 * scene.scene_scale
    occluded = full.depth < inst.depth - depth_epsilon
    return float((occluded & sil).sum() / sil.sum())


def classify_views(scores: np.ndarray, threshold: float = 0.05,
                   min_conditions: int = 2) -> tuple[list[int], list[int]]:
    """Condition views score at or below the threshold; if too few
    qualify, the lowest-scoring views are promoted."""
    scores = np.asarray(scores, dtype=np.float64)
    conditions = [i for i, s in enumerate(scores) if s <= threshold]
    if len(conditions) < min_conditions:
        order = np.argsort(scores, kind="stable")
        conditions = sorted(int(i) for i in order[:min_conditions])
    targets = [i for i in range(len(scores)) if i not in set(conditions)]
    return conditions, targets


@dataclass
class ViewpointPlan:
    poses: list[Camera]
    occlusion: np.ndarray
    conditions: list[int]
    targets: list[int]
    relative_poses: np.ndarray = field(default=None)   # (V, V, 4, 4) target<-source

    def __post_init__(self):
        if self.relative_poses is None:
            self.relative_poses = pairwise_relative_poses(self.poses)

    def relative_pose(self, target: int, source: int) -> np.ndarray:
        return self.relative_poses[target, source]


def _to_homogeneous(cam: Camera) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = cam.rotation
    m[:3, 3] = cam.translation
    return m


def pairwise_relative_poses(poses: list[Camera]) -> np.ndarray:
    n = len(poses)
    w2c = np.stack([_to_homogeneous(p) for p in poses])
    c2w = np.linalg.inv(w2c)
    out = np.zeros((n, n, 4, 4))
    for t in range(n):
        for s in range(n):
            out[t, s] = w2c[t] @ c2w[s]
    return out


def build_viewpoint_plan(instance, scene: SplatScene,
                         config: CompletionConfig | None = None) -> ViewpointPlan:
    config = config or CompletionConfig()
    poses = propose_viewpoints(instance, scene, config)
    scores = np.array([occlusion_score(p, instance, scene) for p in poses])
    conditions, targets = classify_views(scores, config.condition_threshold,
                                         config.min_conditions)
    return ViewpointPlan(poses=poses, occlusion=scores,
                         conditions=conditions, targets=targets)


# ---------------------------------------------------------------------------
# condition rendering and the latent codec


@dataclass
class ConditionView:
    index: int
    camera: Camera
    image: np.ndarray        # (H, W, 3), background whited out
    depth: np.ndarray        # (H, W), valid where mask holds
    mask: np.ndarray         # (H, W) bool instance foreground


def _foreground(out, mean_feature: np.ndarray, tau_seg: float,
                alpha_floor: float = 0.5) -> np.ndarray:
    feats = out.feature.reshape(-1, out.feature.shape[-1])
    norms = np.maximum(np.linalg.norm(feats, axis=1), 1e-12)
    m = np.asarray(mean_feature, dtype=np.float64)
    m = m / max(np.linalg.norm(m), 1e-12)
    sim = ((feats @ m) / norms).reshape(out.alpha.shape)
    return (sim >= tau_seg) & (out.alpha > alpha_floor)


def render_condition(instance, scene: SplatScene, pose: Camera,
                     mean_feature: np.ndarray, tau_seg: float = 0.9) -> ConditionView:
    """Render the full scene and white out everything whose rendered
    feature does not match the instance; keep depth for warping."""
    out = render(scene, pose)
    fg = _foreground(out, mean_feature, tau_seg)
    white = np.ones_like(out.color)
    image = np.where(fg[..., None], np.clip(out.color, 0.0, 1.0), white)
    depth = np.where(fg, out.depth, 0.0)
    return ConditionView(index=-1, camera=pose, image=image, depth=depth, mask=fg)


def downscale_camera(cam: Camera, factor: int) -> Camera:
    if cam.width % factor or cam.height % factor:
        raise ValueError(f"image {cam.width}x{cam.height} not divisible by {factor}")
    return Camera(cam.fx / factor, cam.fy / factor, cam.cx / factor, cam.cy / factor,
                  cam.width // factor, cam.height // factor,
                  cam.rotation.copy(), cam.translation.copy())


def encode_latent(image: np.ndarray, factor: int) -> np.ndarray:
    h, w, c = image.shape
    if h % factor or w % factor:
        raise ValueError(f"image {h}x{w} not divisible by latent factor {factor}")
    return image.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))


def decode_latent(latent: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(latent, factor, axis=0), factor, axis=1)


# ---------------------------------------------------------------------------
# averaged noise and the deterministic update


def average_noise(predictions: list[np.ndarray]) -> np.ndarray:
    if not predictions:
        raise ValueError("need at least one noise prediction")
    first = np.asarray(predictions[0], dtype=np.float64)
    acc = first.copy()
    for p in predictions[1:]:
        p = np.asarray(p, dtype=np.float64)
        if p.shape != first.shape:
            raise ValueError(f"prediction shape {p.shape} != {first.shape}")
        acc += p
    return acc / len(predictions)


def ddpm_step(x_t: np.ndarray, eps_bar: np.ndarray, t: int,
              schedule: NoiseSchedule) -> np.ndarray:
    """Deterministic reverse step (no stochastic term)."""
    beta = schedule.beta(t)
    ab = schedule.alpha_bar(t)
    return (np.asarray(x_t, dtype=np.float64)
            - beta / math.sqrt(1.0 - ab) * np.asarray(eps_bar, dtype=np.float64)) \
        / math.sqrt(schedule.alpha(t))


# ---------------------------------------------------------------------------
# geometry-aware latent warping


def _warp_entries(src_cam: Camera, src_depth: np.ndarray, src_valid: np.ndarray,
                  src_normals: np.ndarray, tgt_cam: Camera):
    """(src_cell, tgt_cell, tgt_depth) triples for forward-warpable cells.

    Cells whose stored surface normal faces away from the target camera
    (normal . viewing-direction >= 0) are discarded.
    """
    h, w = src_depth.shape
    origin, dirs = pixel_rays(src_cam)
    ok = src_valid & (src_depth > 0)
    src_lin = np.flatnonzero(ok.ravel())
    if src_lin.size == 0:
        return (np.zeros(0, dtype=np.int64),) * 2 + (np.zeros(0),)
    d = dirs.reshape(-1, 3)[src_lin]
    pts = origin + src_depth.ravel()[src_lin, None] * d

    n = src_normals.reshape(-1, 3)[src_lin]
    n_len = np.linalg.norm(n, axis=1)
    has_normal = n_len > 1e-9
    n = np.where(has_normal[:, None], n / np.maximum(n_len[:, None], 1e-12), 0.0)

    t_origin = tgt_cam.center
    view = pts - t_origin
    view_len = np.linalg.norm(view, axis=1)
    view_dir = view / np.maximum(view_len[:, None], 1e-12)
    front_facing = np.einsum("ij,ij->i", n, view_dir) < 0.0
    keep = has_normal & front_facing

    cam_pts = (pts - t_origin) @ tgt_cam.rotation.T
    z = cam_pts[:, 2]
    keep &= z > 1e-9
    zs = np.where(z > 1e-9, z, 1.0)
    px = tgt_cam.fx * cam_pts[:, 0] / zs + tgt_cam.cx
    py = tgt_cam.fy * cam_pts[:, 1] / zs + tgt_cam.cy
    ix = np.floor(px).astype(np.int64)
    iy = np.floor(py).astype(np.int64)
    keep &= (ix >= 0) & (ix < tgt_cam.width) & (iy >= 0) & (iy < tgt_cam.height)

    src_keep = src_lin[keep]
    tgt_lin = iy[keep] * tgt_cam.width + ix[keep]
    return src_keep, tgt_lin, view_len[keep]


def warp_latents(latent: np.ndarray, src_cam: Camera, src_depth: np.ndarray,
                 src_valid: np.ndarray, src_normals: np.ndarray,
                 tgt_cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Forward-warp latent cells into the target grid.

    Returns (warped grid, validity mask); collisions keep the cell
    nearest to the target camera, unwarped cells stay invalid.
    """
    src_idx, tgt_idx, depth = _warp_entries(src_cam, src_depth, src_valid,
                                            src_normals, tgt_cam)
    h, w = tgt_cam.height, tgt_cam.width
    out = np.zeros((h * w, latent.shape[-1]))
    valid = np.zeros(h * w, dtype=bool)
    if src_idx.size:
        # painter's order: write far-to-near so the nearest lands last
        order = np.argsort(-depth, kind="stable")
        flat = latent.reshape(-1, latent.shape[-1])
        out[tgt_idx[order]] = flat[src_idx[order]]
        valid[tgt_idx[order]] = True
    return out.reshape(h, w, latent.shape[-1]), valid.reshape(h, w)


# ---------------------------------------------------------------------------
# the full completion pass


@dataclass
class CompletionResult:
    plan: ViewpointPlan
    conditions: list[ConditionView]
    target_indices: list[int]
    latents: dict[int, np.ndarray]
    images: dict[int, np.ndarray]
    known: dict[int, np.ndarray]        # latent cells carrying warped observations
    skipped: bool = False


def mock_target_latents(instance, scene: SplatScene, plan: ViewpointPlan,
                        config: CompletionConfig) -> dict[int, np.ndarray]:
    """Encoded instance-only renders for each target view: the oracle a
    closed-form mock denoiser steers toward."""
    idx = _indices(instance)
    inst_scene = scene.subset(idx)
    out = {}
    for n in plan.targets:
        r = render(inst_scene, plan.poses[n])
        img = np.clip(r.color, 0.0, 1.0) + (1.0 - r.alpha[..., None])
        out[n] = encode_latent(np.clip(img, 0.0, 1.0), config.latent_factor)
    return out


def run_completion(instance, scene: SplatScene, denoiser, schedule: NoiseSchedule,
                   plan: ViewpointPlan, mean_feature: np.ndarray,
                   config: CompletionConfig | None = None) -> CompletionResult:
    """Alternated-condition denoising with per-step latent warping."""
    config = config or CompletionConfig()
    if not plan.targets:
        return CompletionResult(plan=plan, conditions=[], target_indices=[],
                                latents={}, images={}, known={}, skipped=True)
    if not plan.conditions:
        raise SceneError("completion needs at least one condition view")

    factor = config.latent_factor
    rng = np.random.default_rng(config.seed)

    conditions: list[ConditionView] = []
    cond_latents: dict[int, np.ndarray] = {}
    cond_geom = {}
    for k in plan.conditions:
        cv = render_condition(instance, scene, plan.poses[k], mean_feature, config.tau_seg)
        cv.index = k
        conditions.append(cv)
        cond_latents[k] = encode_latent(cv.image, factor)
        # latent-resolution geometry for warping
        lat_cam = downscale_camera(plan.poses[k], factor)
        lat_out = render(scene, lat_cam)
        lat_fg = _foreground(lat_out, mean_feature, config.tau_seg,
                             alpha_floor=config.warp_alpha_floor)
        cond_geom[k] = (lat_cam, np.where(lat_fg, lat_out.depth, 0.0), lat_fg,
                        lat_out.normal)

    # static warp maps: (source cell, target cell, target depth) per (k, n)
    warp_maps = {}
    for n in plan.targets:
        tgt_cam = downscale_camera(plan.poses[n], factor)
        entries = []
        for k in plan.conditions:
            lat_cam, lat_depth, lat_fg, lat_normal = cond_geom[k]
            s, tgt, dep = _warp_entries(lat_cam, lat_depth, lat_fg, lat_normal, tgt_cam)
            entries.append((k, s, tgt, dep))
        # merge across conditions: painter far-to-near over the union
        src = np.concatenate([e[1] for e in entries]) if entries else np.zeros(0, np.int64)
        tgt = np.concatenate([e[2] for e in entries]) if entries else np.zeros(0, np.int64)
        dep = np.concatenate([e[3] for e in entries]) if entries else np.zeros(0)
        ks = np.concatenate([np.full(e[1].size, e[0], dtype=np.int64) for e in entries]) \
            if entries else np.zeros(0, np.int64)
        order = np.argsort(-dep, kind="stable")
        warp_maps[n] = (ks[order], src[order], tgt[order])

    lat_h = config.view_size // factor
    shape = (lat_h, lat_h, 3)
    x = {n: rng.standard_normal(shape) for n in plan.targets}
    known = {}
    for n in plan.targets:
        mask = np.zeros(lat_h * lat_h, dtype=bool)
        mask[warp_maps[n][2]] = True
        known[n] = mask.reshape(lat_h, lat_h)

    def overwrite_known(n, noisy_latents):
        ks, src, tgt = warp_maps[n]
        grid = x[n].reshape(-1, 3)
        for k in plan.conditions:
            sel = ks == k
            if sel.any():
                grid[tgt[sel]] = noisy_latents[k].reshape(-1, 3)[src[sel]]
        x[n] = grid.reshape(shape)

    def denoise_target(n, t, noisy, cond_pool):
        overwrite_known(n, noisy)
        preds = [denoiser.predict(x[n], cond_latents[k], plan.relative_pose(n, k), t,
                                  target=n, condition_index=k)
                 for k in cond_pool]
        eps_bar = average_noise(preds)
        stepped = ddpm_step(x[n], eps_bar, t, schedule)
        x[n] = np.where(known[n][..., None], x[n], stepped)

    parallel = bool(getattr(denoiser, "concurrent", False)) and len(plan.targets) > 1
    for t in range(schedule.timesteps, 0, -1):
        ab = schedule.alpha_bar(t)
        noisy = {}
        for k in plan.conditions:
            eps = rng.standard_normal(cond_latents[k].shape)
            noisy[k] = math.sqrt(ab) * cond_latents[k] + math.sqrt(1.0 - ab) * eps
        if config.condition_mode == "roundrobin":
            pool = [plan.conditions[(schedule.timesteps - t) % len(plan.conditions)]]
        else:
            pool = plan.conditions
        try:
            if parallel:
                with ThreadPoolExecutor(max_workers=min(8, len(plan.targets))) as ex:
                    list(ex.map(lambda n: denoise_target(n, t, noisy, pool), plan.targets))
            else:
                for n in plan.targets:
                    denoise_target(n, t, noisy, pool)
        except Exception as e:
            raise SceneError(f"denoiser failure at timestep {t}: {e}") from e

    # final clean overwrite so visible regions carry the observations
    for n in plan.targets:
        overwrite_known(n, cond_latents)

    images = {n: np.clip(decode_latent(x[n], factor), 0.0, 1.0) for n in plan.targets}
    return CompletionResult(plan=plan, conditions=conditions,
                            target_indices=list(plan.targets),
                            latents={n: x[n].copy() for n in plan.targets},
                            images=images,
                            known={n: known[n].copy() for n in plan.targets})


# ---------------------------------------------------------------------------
# joint refinement


@dataclass
class ViewObservation:
    camera: Camera
    image: np.ndarray
    weight: float = 1.0


@dataclass
class RefineConfig:
    iters: int = 300
    refresh_every: int = 50
    lr_color: float = 0.05
    lr_opacity: float = 0.02
    lr_position: float = 0.0005
    optimize_positions: bool = False
    generated_weight: float = 0.5


@dataclass
class RefineResult:
    scene: SplatScene
    checkpoints: list[float]
    diverged: bool = False


class _DenseTrace:
    """Full per-(pixel, gaussian) compositing state for a small scene."""

    def __init__(self, scene: SplatScene, cam: Camera, cutoff: float = 1.0 / 255.0):
        origin, dirs = pixel_rays(cam)
        d = dirs.reshape(-1, 3)
        p = scene.centers.astype(np.float64)
        tu = scene.tangent_u.astype(np.float64)
        tv = scene.tangent_v.astype(np.float64)
        su = scene.scales[:, 0].astype(np.float64)
        sv = scene.scales[:, 1].astype(np.float64)
        nrm = np.cross(tu, tv)
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        rel = p - origin
        denom = d @ nrm.T
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.einsum("ij,ij->i", rel, nrm)[None, :] / denom
        valid = (np.abs(denom) >= 1e-9) & (t > 0) & np.isfinite(t)
        t = np.where(valid, t, 0.0)
        u = (-np.einsum("ij,ij->i", rel, tu) / su)[None, :] + t * (d @ tu.T) / su[None, :]
        v = (-np.einsum("ij,ij->i", rel, tv) / sv)[None, :] + t * (d @ tv.T) / sv[None, :]
        g = np.exp(-(u * u + v * v) / 2.0)
        valid &= g >= cutoff
        self.g = np.where(valid, g, 0.0)
        self.u, self.v = u, v
        self.order = np.argsort(np.where(valid, t, np.inf), axis=1, kind="stable")
        self.dirs = d
        self.tu, self.tv, self.su, self.sv, self.normals = tu, tv, su, sv, nrm
        self.denom = denom
        view = rel / np.maximum(np.linalg.norm(rel, axis=1, keepdims=True), 1e-12)
        self.sh_basis_dir = view

    def weights(self, opacities: np.ndarray):
        ag = opacities[None, :] * self.g
        ag_s = np.take_along_axis(ag, self.order, axis=1)
        trans = np.ones_like(ag_s)
        if ag_s.shape[1] > 1:
            trans[:, 1:] = np.cumprod(1.0 - ag_s[:, :-1], axis=1)
        w_s = ag_s * trans
        w = np.zeros_like(w_s)
        np.put_along_axis(w, self.order, w_s, axis=1)
        t_unsorted = np.zeros_like(trans)
        np.put_along_axis(t_unsorted, self.order, trans, axis=1)
        return w, t_unsorted


def render_composite_white(scene: SplatScene, cam: Camera) -> np.ndarray:
    out = render(scene, cam)
    return np.clip(np.clip(out.color, 0.0, 1.0) + (1.0 - out.alpha[..., None]), 0.0, 1.0)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - b) ** 2))
    if mse <= 1e-12:
        return 99.0
    return -10.0 * math.log10(mse)


def joint_refine(instance_scene: SplatScene, source_views: list[ViewObservation],
                 generated_views: list[ViewObservation],
                 config: RefineConfig | None = None) -> RefineResult:
    """L1 photometric refinement of the instance's colors and opacities
    (optionally positions) against source and generated views.

    Blend weights are linearized around checkpoints (geometry-frozen
    rasterization); source views weigh 1.0, generated views
    `generated_weight`. Divergence returns the input unchanged.
    """
    config = config or RefineConfig()
    views = [ViewObservation(v.camera, v.image, 1.0) for v in source_views] + \
            [ViewObservation(v.camera, v.image, config.generated_weight)
             for v in generated_views]
    if not views:
        raise SceneError("joint_refine needs at least one view")

    work = instance_scene.subset(range(instance_scene.n_gaussians))
    sh0 = work.sh[:, 0, :].astype(np.float64)
    opac = work.opacities.astype(np.float64)
    pos = work.centers.astype(np.float64)
    n = work.n_gaussians

    def sync():
        work.sh[:, 0, :] = sh0.astype(np.float32)
        work.opacities[:] = np.clip(opac, 0.0, 1.0).astype(np.float32)
        work.centers[:] = pos.astype(np.float32)

    def total_l1() -> float:
        sync()
        loss = 0.0
        for view in views:
            got = render_composite_white(work, view.camera)
            loss += view.weight * float(np.abs(got - view.image).mean())
        return loss / len(views)

    if config.iters == 0:
        return RefineResult(scene=work, checkpoints=[total_l1()])

    params = [sh0, opac] + ([pos] if config.optimize_positions else [])
    lrs = [config.lr_color, config.lr_opacity] + \
        ([config.lr_position] if config.optimize_positions else [])
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8

    initial = total_l1()
    checkpoints = [initial]
    best = initial
    best_state = [p.copy() for p in params]
    traces = None

    # higher SH bands stay frozen during refinement
    rest_sh = None
    if work.sh.shape[1] > 1:
        rest_sh = work.sh.astype(np.float64)
        rest_sh[:, 0, :] = 0.0

    for it in range(1, config.iters + 1):
        if traces is None or (it - 1) % config.refresh_every == 0:
            sync()
            traces = [_DenseTrace(work, view.camera) for view in views]

        grads = [np.zeros_like(p) for p in params]
        for view, tr in zip(views, traces):
            w, t_front = tr.weights(np.clip(opac, 0.0, 1.0))
            colors = _SH_C0 * sh0
            if rest_sh is not None:
                colors = colors + eval_sh(rest_sh, tr.sh_basis_dir)
            alpha = w.sum(axis=1)
            img = w @ colors + (1.0 - alpha)[:, None]
            target = view.image.reshape(-1, 3)
            sign = np.sign(img - target) * (view.weight / (img.size * len(views)))

            grads[0] += _SH_C0 * (w.T @ sign)                 # d/d sh0 through w
            resid = colors - 1.0                              # vs white background
            gt_front = tr.g * t_front                         # dw/d opacity
            s_pm = sign @ resid.T                             # (P, M) color residual dot
            grads[1] += np.einsum("pm,pm->m", gt_front, s_pm)
            if config.optimize_positions:
                # dG/dp at frozen rays: u, v move with the center through
                # both the in-plane offset and the hit depth
                coeff = np.clip(opac, 0.0, 1.0)[None, :] * t_front * s_pm
                dun = (tr.dirs @ tr.tu.T) / tr.su[None, :]
                dvn = (tr.dirs @ tr.tv.T) / tr.sv[None, :]
                inv_dn = np.where(np.abs(tr.denom) > 1e-9, 1.0 / tr.denom, 0.0)
                for axis in range(3):
                    du_dp = -tr.tu[:, axis][None, :] / tr.su[None, :] \
                        + dun * tr.normals[:, axis][None, :] * inv_dn
                    dv_dp = -tr.tv[:, axis][None, :] / tr.sv[None, :] \
                        + dvn * tr.normals[:, axis][None, :] * inv_dn
                    dg_dp = tr.g * (-(tr.u * du_dp + tr.v * dv_dp))
                    grads[2][:, axis] += np.einsum("pm,pm->m", coeff, dg_dp)

        for i, (p, g) in enumerate(zip(params, grads)):
            m[i] = beta1 * m[i] + (1 - beta1) * g
            v[i] = beta2 * v[i] + (1 - beta2) * g * g
            p -= lrs[i] * (m[i] / (1 - beta1 ** it)) / \
                (np.sqrt(v[i] / (1 - beta2 ** it)) + eps)
        opac[:] = np.clip(opac, 0.0, 1.0)

        if it % config.refresh_every == 0 or it == config.iters:
            loss = total_l1()
            if loss < best:
                best = loss
                best_state = [p.copy() for p in params]
            checkpoints.append(best)

    for p, b in zip(params, best_state):
        p[:] = b
    sync()
    if best > initial + 1e-12:
        return RefineResult(scene=instance_scene.subset(range(instance_scene.n_gaussians)),
                            checkpoints=checkpoints, diverged=True)
    return RefineResult(scene=work, checkpoints=checkpoints)
