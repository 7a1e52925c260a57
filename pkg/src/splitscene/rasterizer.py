"""Deterministic tiled forward rasterizer for 2D Gaussian disks.

Each splat is an oriented planar disk; a pixel ray is intersected exactly
with the disk plane, the Gaussian is evaluated in the disk's unit uv
frame, and intersections are composited front-to-back with depth-sorted
alpha blending. Color, depth, normal, alpha and feature maps come out of
one pass, optionally together with the per-pixel contribution lists
(blend weight + front transmittance per gaussian) that the mask-tracking
stage consumes.

Determinism contract: pure function of (scene, camera, cutoff); depth
ties break by ascending gaussian index; tile parallelism never reorders
per-pixel compositing.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .scene import FEATURE_DIM, Camera, Gaussian2D, SplatScene

DEFAULT_CUTOFF = 1.0 / 255.0
PARALLEL_EPS = 1e-9
TILE = 16

# SH basis constants (real spherical harmonics, degrees 0..3)
_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
       -1.0925484305920792, 0.5462742152960396)
_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
       0.3731763325901154, -0.4570457994644658, 1.445305721320277,
       -0.5900435899266435)


def gaussian_value(u, v):
    """Unit-frame 2D Gaussian, exp(-(u^2+v^2)/2)."""
    return np.exp(-(np.asarray(u, dtype=np.float64) ** 2 + np.asarray(v, dtype=np.float64) ** 2) / 2.0)


def intersect_disk(g: Gaussian2D, origin, direction):
    """Exact ray/disk-plane intersection in the disk's scaled uv frame.

    Returns (u, v, depth) with depth measured along the unit-norm ray
    direction, or None when the ray is parallel to the plane (within
    1e-9) or the hit lies behind the origin.
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    n = np.cross(g.tangent_u, g.tangent_v)
    denom = float(direction @ n)
    if abs(denom) < PARALLEL_EPS:
        return None
    t = float((g.center - origin) @ n) / denom
    if t <= 0.0:
        return None
    hit = origin + t * direction
    u = float((hit - g.center) @ g.tangent_u) / g.scale_u
    v = float((hit - g.center) @ g.tangent_v) / g.scale_v
    return u, v, t


def eval_sh(sh: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Evaluate SH color (degrees 0..3) per gaussian for unit view dirs.

    sh: (N, n_sh, 3), dirs: (N, 3) -> (N, 3). No offset or clamping;
    callers clamp when writing images.
    """
    n_sh = sh.shape[1]
    out = _C0 * sh[:, 0]
    if n_sh == 1:
        return out
    x, y, z = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
    out = out - _C1 * y * sh[:, 1] + _C1 * z * sh[:, 2] - _C1 * x * sh[:, 3]
    if n_sh == 4:
        return out
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    out = (out
           + _C2[0] * xy * sh[:, 4]
           + _C2[1] * yz * sh[:, 5]
           + _C2[2] * (2.0 * zz - xx - yy) * sh[:, 6]
           + _C2[3] * xz * sh[:, 7]
           + _C2[4] * (xx - yy) * sh[:, 8])
    if n_sh == 9:
        return out
    out = (out
           + _C3[0] * y * (3.0 * xx - yy) * sh[:, 9]
           + _C3[1] * xy * z * sh[:, 10]
           + _C3[2] * y * (4.0 * zz - xx - yy) * sh[:, 11]
           + _C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy) * sh[:, 12]
           + _C3[4] * x * (4.0 * zz - xx - yy) * sh[:, 13]
           + _C3[5] * z * (xx - yy) * sh[:, 14]
           + _C3[6] * x * (xx - 3.0 * yy) * sh[:, 15])
    return out


def pixel_rays(cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """(origin (3,), unit directions (H, W, 3)) for all pixel centers."""
    xs = (np.arange(cam.width, dtype=np.float64) + 0.5 - cam.cx) / cam.fx
    ys = (np.arange(cam.height, dtype=np.float64) + 0.5 - cam.cy) / cam.fy
    gx, gy = np.meshgrid(xs, ys)
    d_cam = np.stack([gx, gy, np.ones_like(gx)], axis=-1)
    d_world = d_cam @ cam.rotation  # row-vector form of R^T @ d
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    return cam.center, d_world


@dataclass
class RenderOutput:
    color: np.ndarray     # (H, W, 3)
    depth: np.ndarray     # (H, W) median ray-hit distance (first 0.5-alpha
    #                       crossing; blend-weighted mean below 0.5 coverage)
    normal: np.ndarray    # (H, W, 3) blended camera-facing disk normals
    alpha: np.ndarray     # (H, W)
    feature: np.ndarray   # (H, W, 16)


@dataclass
class FrameContributions:
    """CSR per-pixel contribution lists, front-to-back per pixel.

    For pixel p, the slice indptr[p]:indptr[p+1] lists (gaussian index,
    blend weight w_i, front transmittance T_i) in depth order; only
    strictly positive weights are stored.
    """

    width: int
    height: int
    n_gaussians: int
    indptr: np.ndarray         # (H*W + 1,) int64
    gauss: np.ndarray          # (E,) int32
    weight: np.ndarray         # (E,) float64
    transmittance: np.ndarray  # (E,) float64

    def at(self, x: int, y: int) -> list[tuple[int, float, float]]:
        p = y * self.width + x
        s, e = self.indptr[p], self.indptr[p + 1]
        return [(int(self.gauss[i]), float(self.weight[i]), float(self.transmittance[i]))
                for i in range(s, e)]

    def contributing(self) -> np.ndarray:
        """Bool mask over gaussians with nonzero weight at any pixel."""
        out = np.zeros(self.n_gaussians, dtype=bool)
        out[self.gauss] = True
        return out

    def alpha_map(self) -> np.ndarray:
        sums = np.zeros(self.width * self.height, dtype=np.float64)
        np.add.at(sums, np.repeat(np.arange(len(self.indptr) - 1), np.diff(self.indptr)), self.weight)
        return sums.reshape(self.height, self.width)

    def label_weights(self, labels: np.ndarray, n_labels: int) -> np.ndarray:
        """(H, W, n_labels+1) per-pixel blend-weight sums grouped by label."""
        pix = np.repeat(np.arange(self.width * self.height), np.diff(self.indptr))
        out = np.zeros((self.width * self.height, n_labels + 1), dtype=np.float64)
        np.add.at(out, (pix, labels[self.gauss]), self.weight)
        return out.reshape(self.height, self.width, n_labels + 1)

    def gather(self, pixels: np.ndarray):
        """Flattened entry indices for a batch of linear pixel ids.

        Returns (seg, flat): entry i of the batch lives at self.*[flat[i]]
        and belongs to pixels[seg[i]]; depth order is preserved per pixel.
        """
        pixels = np.asarray(pixels, dtype=np.int64)
        starts = self.indptr[pixels]
        lens = (self.indptr[pixels + 1] - starts).astype(np.int64)
        total = int(lens.sum())
        if total == 0:
            z = np.zeros(0, dtype=np.int64)
            return z, z
        seg = np.repeat(np.arange(len(pixels), dtype=np.int64), lens)
        cum = np.cumsum(lens) - lens
        flat = np.arange(total, dtype=np.int64) - np.repeat(cum, lens) + np.repeat(starts, lens)
        return seg, flat


class ContributionList:
    """Spec-facing view: ordered (gaussian, weight, transmittance) per pixel."""

    def __init__(self, pixels, entries):
        self.pixels = list(pixels)
        self._entries = {tuple(p): e for p, e in zip(pixels, entries)}

    def at(self, x: int, y: int) -> list[tuple[int, float, float]]:
        return self._entries[(x, y)]


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("SPLITSCENE_THREADS", "1")))
    except ValueError:
        return 1


class _Prep:
    """Per-(scene, camera) precomputation shared by all tiles."""

    def __init__(self, scene: SplatScene, cam: Camera, cutoff: float):
        self.cutoff = cutoff
        self.origin, self.dirs = pixel_rays(cam)
        self.p = scene.centers.astype(np.float64)
        self.tu = scene.tangent_u.astype(np.float64)
        self.tv = scene.tangent_v.astype(np.float64)
        self.su = scene.scales[:, 0].astype(np.float64)
        self.sv = scene.scales[:, 1].astype(np.float64)
        self.alpha = scene.opacities.astype(np.float64)
        n = np.cross(self.tu, self.tv)
        self.n = n / np.linalg.norm(n, axis=1, keepdims=True)
        rel = self.p - self.origin
        self.plane_off = np.einsum("ij,ij->i", rel, self.n)
        self.au = -np.einsum("ij,ij->i", rel, self.tu) / self.su
        self.av = -np.einsum("ij,ij->i", rel, self.tv) / self.sv
        view = rel / np.maximum(np.linalg.norm(rel, axis=1, keepdims=True), 1e-12)
        self.color = eval_sh(scene.sh.astype(np.float64), view)
        self.feat = scene.features.astype(np.float64)
        # bin radius derived from cutoff so tiling never drops a gaussian
        # the compositing rule would keep (3.33 sigma at the 1/255 default)
        self.bin_radius = max(3.0, math.sqrt(max(2.0 * math.log(1.0 / cutoff), 0.0)))
        self.tiles = self._bin(cam)

    def _bin(self, cam: Camera) -> dict[tuple[int, int], list[int]]:
        r = self.bin_radius
        ring = np.array([(1, 0), (-1, 0), (0, 1), (0, -1),
                         (math.sqrt(0.5), math.sqrt(0.5)), (math.sqrt(0.5), -math.sqrt(0.5)),
                         (-math.sqrt(0.5), math.sqrt(0.5)), (-math.sqrt(0.5), -math.sqrt(0.5))])
        n = self.p.shape[0]
        pts = np.empty((n, 9, 3))
        pts[:, 0] = self.p
        for k, (cu, cv) in enumerate(ring):
            pts[:, k + 1] = (self.p
                             + (r * cu * self.su)[:, None] * self.tu
                             + (r * cv * self.sv)[:, None] * self.tv)
        cam_pts = (pts - self.origin) @ cam.rotation.T
        z = cam_pts[..., 2]
        behind = z <= 1e-9
        zs = np.where(behind, 1.0, z)
        sx = cam.fx * cam_pts[..., 0] / zs + cam.cx
        sy = cam.fy * cam_pts[..., 1] / zs + cam.cy
        tiles: dict[tuple[int, int], list[int]] = {}
        ntx = (cam.width + TILE - 1) // TILE
        nty = (cam.height + TILE - 1) // TILE
        for i in range(n):
            if behind[i].all():
                continue
            if behind[i].any():
                x0, x1, y0, y1 = 0.0, cam.width - 1.0, 0.0, cam.height - 1.0
            else:
                x0, x1 = sx[i].min(), sx[i].max()
                y0, y1 = sy[i].min(), sy[i].max()
            tx0 = max(0, int(math.floor(x0 / TILE)))
            tx1 = min(ntx - 1, int(math.floor(x1 / TILE)))
            ty0 = max(0, int(math.floor(y0 / TILE)))
            ty1 = min(nty - 1, int(math.floor(y1 / TILE)))
            if tx1 < tx0 or ty1 < ty0:
                continue
            for ty in range(ty0, ty1 + 1):
                for tx in range(tx0, tx1 + 1):
                    tiles.setdefault((tx, ty), []).append(i)
        return tiles


def _composite_tile(prep: _Prep, cam: Camera, tx: int, ty: int, cand: list[int],
                    want_contrib: bool):
    x0, x1 = tx * TILE, min((tx + 1) * TILE, cam.width)
    y0, y1 = ty * TILE, min((ty + 1) * TILE, cam.height)
    dirs = prep.dirs[y0:y1, x0:x1].reshape(-1, 3)
    npix = dirs.shape[0]
    idx = np.asarray(cand, dtype=np.int64)
    m = idx.size

    denom = dirs @ prep.n[idx].T                       # (P, M)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = prep.plane_off[idx][None, :] / denom
    valid = (np.abs(denom) >= PARALLEL_EPS) & (t > 0.0) & np.isfinite(t)
    du = (dirs @ prep.tu[idx].T) / prep.su[idx][None, :]
    dv = (dirs @ prep.tv[idx].T) / prep.sv[idx][None, :]
    t_safe = np.where(valid, t, 0.0)
    u = prep.au[idx][None, :] + t_safe * du
    v = prep.av[idx][None, :] + t_safe * dv
    g = np.exp(-(u * u + v * v) / 2.0)
    valid &= g >= prep.cutoff
    ag = np.where(valid, prep.alpha[idx][None, :] * g, 0.0)

    order = np.argsort(np.where(valid, t_safe, np.inf), axis=1, kind="stable")
    ag_s = np.take_along_axis(ag, order, axis=1)
    trans = np.ones_like(ag_s)
    if m > 1:
        trans[:, 1:] = np.cumprod(1.0 - ag_s[:, :-1], axis=1)
    w_s = ag_s * trans

    w = np.zeros_like(w_s)
    np.put_along_axis(w, order, w_s, axis=1)

    alpha = w.sum(axis=1)
    color = w @ prep.color[idx]
    feat = w @ prep.feat[idx]
    # median depth: ray distance where accumulated alpha first reaches 0.5;
    # low-coverage pixels fall back to the blend-weighted mean
    cum = np.cumsum(w_s, axis=1)
    crossed = cum >= 0.5
    first = np.argmax(crossed, axis=1)
    t_sorted = np.take_along_axis(t_safe, order, axis=1)
    median_depth = t_sorted[np.arange(npix), first]
    mean_depth = np.divide((w * t_safe).sum(axis=1), alpha,
                           out=np.zeros(npix), where=alpha > 1e-12)
    depth_px = np.where(crossed.any(axis=1), median_depth, mean_depth)
    orient = -np.sign(denom)
    normal = (w * orient) @ prep.n[idx]

    contrib = None
    if want_contrib:
        keep = w_s > 0.0
        px = np.arange(npix, dtype=np.int64)
        row = px // (x1 - x0)
        col = px - row * (x1 - x0)
        pix_lin = (row + y0) * cam.width + (col + x0)
        pix_rep = np.repeat(pix_lin, m).reshape(npix, m)
        gauss_s = idx[order]
        contrib = (pix_rep[keep], gauss_s[keep].astype(np.int32),
                   w_s[keep], trans[keep])
    return (y0, y1, x0, x1, color, feat, alpha, depth_px, normal, contrib)


def _run(scene: SplatScene, cam: Camera, cutoff: float, want_contrib: bool):
    prep = _Prep(scene, cam, cutoff)
    h, w = cam.height, cam.width
    color = np.zeros((h, w, 3))
    feat = np.zeros((h, w, FEATURE_DIM))
    alpha = np.zeros((h, w))
    depth = np.zeros((h, w))
    normal = np.zeros((h, w, 3))

    jobs = sorted(prep.tiles.items())
    workers = _workers()
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(
                lambda kv: _composite_tile(prep, cam, kv[0][0], kv[0][1], kv[1], want_contrib),
                jobs))
    else:
        results = [_composite_tile(prep, cam, tx, ty, cand, want_contrib)
                   for (tx, ty), cand in jobs]

    chunks = []
    for (y0, y1, x0, x1, c, f, a, dp, nrm, contrib) in results:
        shape = (y1 - y0, x1 - x0)
        color[y0:y1, x0:x1] = c.reshape(*shape, 3)
        feat[y0:y1, x0:x1] = f.reshape(*shape, FEATURE_DIM)
        alpha[y0:y1, x0:x1] = a.reshape(shape)
        depth[y0:y1, x0:x1] = dp.reshape(shape)
        normal[y0:y1, x0:x1] = nrm.reshape(*shape, 3)
        if contrib is not None:
            chunks.append(contrib)

    out = RenderOutput(color=color, depth=depth, normal=normal, alpha=alpha, feature=feat)

    contribs = None
    if want_contrib:
        if chunks:
            pix = np.concatenate([c[0] for c in chunks])
            gauss = np.concatenate([c[1] for c in chunks])
            wgt = np.concatenate([c[2] for c in chunks])
            trn = np.concatenate([c[3] for c in chunks])
            order = np.argsort(pix, kind="stable")
            pix, gauss, wgt, trn = pix[order], gauss[order], wgt[order], trn[order]
            indptr = np.zeros(h * w + 1, dtype=np.int64)
            np.add.at(indptr, pix + 1, 1)
            indptr = np.cumsum(indptr)
        else:
            pix = np.zeros(0, dtype=np.int64)
            gauss = np.zeros(0, dtype=np.int32)
            wgt = trn = np.zeros(0)
            indptr = np.zeros(h * w + 1, dtype=np.int64)
        contribs = FrameContributions(width=w, height=h, n_gaussians=scene.n_gaussians,
                                      indptr=indptr, gauss=gauss, weight=wgt, transmittance=trn)
    return out, contribs


def render(scene: SplatScene, cam: Camera, cutoff: float = DEFAULT_CUTOFF) -> RenderOutput:
    """Render color/depth/normal/alpha/feature maps from one camera."""
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    out, _ = _run(scene, cam, cutoff, want_contrib=False)
    return out


def render_with_contributions(scene: SplatScene, cam: Camera,
                              cutoff: float = DEFAULT_CUTOFF):
    """Render and also return the full-frame per-pixel contribution CSR."""
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    return _run(scene, cam, cutoff, want_contrib=True)


def frame_contributions(scene: SplatScene, cam: Camera,
                        cutoff: float = DEFAULT_CUTOFF) -> FrameContributions:
    return render_with_contributions(scene, cam, cutoff)[1]


def contribution_list(scene: SplatScene, cam: Camera, pixels,
                      cutoff: float = DEFAULT_CUTOFF) -> ContributionList:
    """Ordered (gaussian, weight w_i, transmittance T_i) per requested pixel."""
    for (x, y) in pixels:
        if not (0 <= x < cam.width and 0 <= y < cam.height):
            raise ValueError(f"pixel ({x}, {y}) outside {cam.width}x{cam.height} image")
    _, fc = _run(scene, cam, cutoff, want_contrib=True)
    entries = [fc.at(x, y) for (x, y) in pixels]
    return ContributionList(pixels, entries)


# ---------------------------------------------------------------------------
# output writers


def write_color_png(img: np.ndarray, path) -> None:
    arr = (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def write_normal_png(normal: np.ndarray, path) -> None:
    arr = ((np.clip(normal, -1.0, 1.0) + 1.0) * 127.5).round().astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def write_float_grid(grid: np.ndarray, path) -> None:
    np.save(path, grid.astype(np.float32))


def load_float_grid(path) -> np.ndarray:
    return np.load(path)
