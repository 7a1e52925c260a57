"""Independent reference implementations used to check the fast paths.

Everything here is deliberately naive: per-pixel loops, longdouble
accumulation, no tiling, no shared code with the tiled rasterizer beyond
the camera convention. Keep it that way.
"""

from __future__ import annotations

import numpy as np

from splitscene.scene import Camera, SplatScene


def naive_render(scene: SplatScene, cam: Camera, cutoff: float = 1.0 / 255.0):
    """Sorted per-pixel compositor. Returns dict of float64 maps."""
    h, w = cam.height, cam.width
    rot = cam.rotation
    origin = -rot.T @ cam.translation

    p = scene.centers.astype(np.float64)
    tu = scene.tangent_u.astype(np.float64)
    tv = scene.tangent_v.astype(np.float64)
    su = scene.scales[:, 0].astype(np.float64)
    sv = scene.scales[:, 1].astype(np.float64)
    op = scene.opacities.astype(np.float64)
    normals = np.cross(tu, tv)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    # view-dependent color, evaluated exactly like a per-splat SH lookup
    from splitscene.rasterizer import eval_sh
    rel = p - origin
    view = rel / np.linalg.norm(rel, axis=1, keepdims=True)
    colors = eval_sh(scene.sh.astype(np.float64), view)
    feats = scene.features.astype(np.float64)

    color = np.zeros((h, w, 3), dtype=np.longdouble)
    feature = np.zeros((h, w, feats.shape[1]), dtype=np.longdouble)
    alpha = np.zeros((h, w), dtype=np.longdouble)
    depth_num = np.zeros((h, w), dtype=np.longdouble)
    depth = np.zeros((h, w), dtype=np.float64)
    normal = np.zeros((h, w, 3), dtype=np.longdouble)

    n = scene.n_gaussians
    for y in range(h):
        for x in range(w):
            d_cam = np.array([(x + 0.5 - cam.cx) / cam.fx,
                              (y + 0.5 - cam.cy) / cam.fy, 1.0])
            d = rot.T @ d_cam
            d = d / np.linalg.norm(d)
            hits = []
            for i in range(n):
                denom = float(d @ normals[i])
                if abs(denom) < 1e-9:
                    continue
                t = float((p[i] - origin) @ normals[i]) / denom
                if t <= 0.0:
                    continue
                hit = origin + t * d
                u = float((hit - p[i]) @ tu[i]) / su[i]
                v = float((hit - p[i]) @ tv[i]) / sv[i]
                g = np.exp(-(u * u + v * v) / 2.0)
                if g < cutoff:
                    continue
                hits.append((t, i, g, denom))
            hits.sort(key=lambda r: (r[0], r[1]))
            trans = np.longdouble(1.0)
            median = None
            for t, i, g, denom in hits:
                wgt = np.longdouble(op[i] * g) * trans
                color[y, x] += wgt * colors[i]
                feature[y, x] += wgt * feats[i]
                alpha[y, x] += wgt
                depth_num[y, x] += wgt * np.longdouble(t)
                if median is None and float(alpha[y, x]) >= 0.5:
                    median = t
                orient = -np.sign(denom)
                normal[y, x] += wgt * orient * normals[i]
                trans = trans * np.longdouble(1.0 - op[i] * g)
            # median depth once coverage crosses 0.5, weighted mean below
            if median is not None:
                depth[y, x] = median
            elif alpha[y, x] > 1e-12:
                depth[y, x] = float(depth_num[y, x] / alpha[y, x])
    return {
        "color": color.astype(np.float64),
        "feature": feature.astype(np.float64),
        "alpha": alpha.astype(np.float64),
        "depth": depth.astype(np.float64),
        "normal": normal.astype(np.float64),
    }


def naive_instance_masks(scene: SplatScene, cam: Camera, gt_labels: np.ndarray,
                         n_instances: int, alpha_threshold: float,
                         cutoff: float = 1.0 / 255.0) -> np.ndarray:
    """Per-pixel argmax instance labels from a naive weight accumulation."""
    h, w = cam.height, cam.width
    rot = cam.rotation
    origin = -rot.T @ cam.translation
    p = scene.centers.astype(np.float64)
    tu = scene.tangent_u.astype(np.float64)
    tv = scene.tangent_v.astype(np.float64)
    su = scene.scales[:, 0].astype(np.float64)
    sv = scene.scales[:, 1].astype(np.float64)
    op = scene.opacities.astype(np.float64)
    normals = np.cross(tu, tv)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    out = np.zeros((h, w), dtype=np.int32)
    n = scene.n_gaussians
    for y in range(h):
        for x in range(w):
            d_cam = np.array([(x + 0.5 - cam.cx) / cam.fx,
                              (y + 0.5 - cam.cy) / cam.fy, 1.0])
            d = rot.T @ d_cam
            d /= np.linalg.norm(d)
            hits = []
            for i in range(n):
                denom = float(d @ normals[i])
                if abs(denom) < 1e-9:
                    continue
                t = float((p[i] - origin) @ normals[i]) / denom
                if t <= 0.0:
                    continue
                hit = origin + t * d
                u = float((hit - p[i]) @ tu[i]) / su[i]
                v = float((hit - p[i]) @ tv[i]) / sv[i]
                g = np.exp(-(u * u + v * v) / 2.0)
                if g < cutoff:
                    continue
                hits.append((t, i, g))
            hits.sort(key=lambda r: (r[0], r[1]))
            trans = 1.0
            acc = np.zeros(n_instances + 1)
            alpha = 0.0
            for t, i, g in hits:
                wgt = op[i] * g * trans
                acc[gt_labels[i]] += wgt
                alpha += wgt
                trans *= 1.0 - op[i] * g
            if alpha >= alpha_threshold:
                best = int(np.argmax(acc[1:])) + 1
                if acc[best] >= 0.5 * alpha:
                    out[y, x] = best
    return out


def finite_difference_grad(fn, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar function over an array."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        hi = fn(x)
        flat[i] = keep - h
        lo = fn(x)
        flat[i] = keep
        gf[i] = (hi - lo) / (2.0 * h)
    return g


def random_scene(rng: np.random.Generator, n: int, sh_degree: int = 0,
                 spread: float = 1.0, feature_dim: int = 16) -> SplatScene:
    """Random well-formed splat cloud in a unit-ish box (no frames)."""
    from splitscene.scene import SplatScene as _S

    centers = rng.uniform(-spread, spread, size=(n, 3))
    tu = rng.normal(size=(n, 3))
    tu /= np.linalg.norm(tu, axis=1, keepdims=True)
    helper = rng.normal(size=(n, 3))
    tv = np.cross(tu, helper)
    # re-draw any helper that came out parallel
    bad = np.linalg.norm(tv, axis=1) < 1e-6
    while bad.any():
        helper[bad] = rng.normal(size=(int(bad.sum()), 3))
        tv = np.cross(tu, helper)
        bad = np.linalg.norm(tv, axis=1) < 1e-6
    tv /= np.linalg.norm(tv, axis=1, keepdims=True)
    scales = rng.uniform(0.1, 0.5, size=(n, 2)) * spread
    ops = rng.uniform(0.2, 1.0, size=n)
    n_sh = (sh_degree + 1) ** 2
    sh = rng.uniform(-0.5, 3.0, size=(n, n_sh, 3))
    feats = rng.normal(size=(n, feature_dim))
    return _S(
        centers=centers.astype(np.float32),
        tangent_u=tu.astype(np.float32),
        tangent_v=tv.astype(np.float32),
        scales=scales.astype(np.float32),
        opacities=ops.astype(np.float32),
        sh=sh.astype(np.float32),
        features=feats.astype(np.float32),
    )
