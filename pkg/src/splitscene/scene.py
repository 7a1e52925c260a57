"""Scene container: splat arrays, cameras, frames, and on-disk formats.

A scene holds an ordered set of 2D Gaussian disks (oriented planar splats)
plus the posed frames used for mask supervision. Splat storage is
struct-of-arrays for vectorized rasterization; `Gaussian2D` is the
per-splat view used at API boundaries and in validation messages.

On-disk formats:
  * splat container: little-endian binary, header ``SPL2`` + version +
    count + SH degree, fixed-width per-gaussian records (see `save_scene`)
  * cameras: one JSON document, one entry per frame
  * masks: one 16-bit grayscale PNG per frame, pixel value = label
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

MAGIC = b"SPL2"
VERSION = 1
FEATURE_DIM = 16
ORTHO_TOL = 1e-6

# per-gaussian fixed part: center(3) + tangent_u(3) + tangent_v(3) +
# scales(2) + opacity(1) + feature(16) floats; SH block varies with degree
_FIXED_FLOATS = 3 + 3 + 3 + 2 + 1 + FEATURE_DIM


class SceneError(ValueError):
    """Malformed container or violated scene invariant."""


@dataclass
class Gaussian2D:
    """One oriented planar Gaussian disk."""

    center: np.ndarray        # (3,) world units
    tangent_u: np.ndarray     # (3,) unit
    tangent_v: np.ndarray     # (3,) unit, orthogonal to tangent_u
    scale_u: float
    scale_v: float
    opacity: float
    sh: np.ndarray            # ((deg+1)**2, 3) spherical-harmonic coefficients
    feature: np.ndarray       # (16,) instance feature

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.tangent_u, self.tangent_v)


@dataclass
class Camera:
    """Pinhole camera with a rigid world-to-camera transform.

    Convention: x_cam = R @ x_world + t, camera looks along +z,
    image x right / y down, pixel (i, j) center at (j + 0.5, i + 0.5).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray      # (3, 3) world-to-camera
    translation: np.ndarray   # (3,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    def validate(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise SceneError(f"camera focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise SceneError(f"camera size must be positive, got {self.width}x{self.height}")
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=ORTHO_TOL):
            raise SceneError("camera rotation is not orthonormal")
        if not np.isclose(np.linalg.det(r), 1.0, atol=ORTHO_TOL):
            raise SceneError("camera rotation determinant is not +1")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def translated(self, offset: np.ndarray) -> "Camera":
        """Same orientation, camera center shifted by `offset` (world)."""
        new_t = self.translation - self.rotation @ np.asarray(offset, dtype=np.float64)
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                      self.rotation.copy(), new_t)


def look_at_camera(position, target, fx, fy, width, height,
                   cx=None, cy=None, up=(0.0, 0.0, 1.0)) -> Camera:
    """Camera at `position` looking at `target`, world +z treated as up."""
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    forward = target - position
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise SceneError("look-at target coincides with camera position")
    z = forward / norm
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        # looking straight up/down: pick an arbitrary horizontal right vector
        x = np.cross(z, np.array([0.0, 1.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    rot = np.stack([x, y, z])
    return Camera(fx, fy, width / 2.0 if cx is None else cx,
                  height / 2.0 if cy is None else cy,
                  width, height, rot, -rot @ position)


@dataclass
class Frame:
    """A posed frame with its label map (and, when rendered, an image).

    Mask labels are dense positive integers per frame; 0 marks unlabeled
    pixels. The image is optional: synthetic scenes carry renders, scenes
    loaded from disk may not.
    """

    index: int
    camera: Camera
    mask_map: np.ndarray                 # (H, W) int32, 0 = unlabeled
    image: np.ndarray | None = None     # (H, W, 3) float in [0, 1]

    def validate(self) -> None:
        self.camera.validate()
        h, w = self.camera.height, self.camera.width
        if self.mask_map.shape != (h, w):
            raise SceneError(f"frame {self.index}: mask_map shape {self.mask_map.shape} != camera {h}x{w}")
        if self.mask_map.min() < 0:
            raise SceneError(f"frame {self.index}: negative mask label")
        labels = np.unique(self.mask_map)
        labels = labels[labels > 0]
        if len(labels) and not np.array_equal(labels, np.arange(1, len(labels) + 1)):
            raise SceneError(f"frame {self.index}: mask labels not dense positive integers: {labels.tolist()}")
        if self.image is not None and self.image.shape != (h, w, 3):
            raise SceneError(f"frame {self.index}: image shape {self.image.shape} != camera {h}x{w}x3")

    def mask_ids(self) -> list[int]:
        labels = np.unique(self.mask_map)
        return [int(v) for v in labels if v > 0]


@dataclass
class SplatScene:
    """Struct-of-arrays splat scene plus its frames.

    Arrays are float32 (the container's precision); numeric code upcasts
    as needed. Immutable after load except `features`, which the feature
    trainer owns while running.
    """

    centers: np.ndarray       # (N, 3) f32
    tangent_u: np.ndarray     # (N, 3) f32
    tangent_v: np.ndarray     # (N, 3) f32
    scales: np.ndarray        # (N, 2) f32
    opacities: np.ndarray     # (N,)  f32
    sh: np.ndarray            # (N, (deg+1)**2, 3) f32
    features: np.ndarray      # (N, 16) f32
    frames: list[Frame] = field(default_factory=list)

    @property
    def n_gaussians(self) -> int:
        return self.centers.shape[0]

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[1]))) - 1

    @property
    def scene_scale(self) -> float:
        """Median camera-to-scene-centroid distance (1.0 with no frames)."""
        if not self.frames:
            return 1.0
        centroid = self.centers.astype(np.float64).mean(axis=0)
        dists = [np.linalg.norm(f.camera.center - centroid) for f in self.frames]
        return float(np.median(dists))

    def centroid(self) -> np.ndarray:
        return self.centers.astype(np.float64).mean(axis=0)

    def gaussian(self, i: int) -> Gaussian2D:
        return Gaussian2D(
            center=self.centers[i].astype(np.float64),
            tangent_u=self.tangent_u[i].astype(np.float64),
            tangent_v=self.tangent_v[i].astype(np.float64),
            scale_u=float(self.scales[i, 0]),
            scale_v=float(self.scales[i, 1]),
            opacity=float(self.opacities[i]),
            sh=self.sh[i].astype(np.float64),
            feature=self.features[i].astype(np.float64),
        )

    @staticmethod
    def from_gaussians(gaussians: list[Gaussian2D], frames: list[Frame] | None = None) -> "SplatScene":
        n = len(gaussians)
        if n == 0:
            raise SceneError("scene must contain at least 1 gaussian")
        n_sh = gaussians[0].sh.shape[0]
        scene = SplatScene(
            centers=np.stack([g.center for g in gaussians]).astype(np.float32),
            tangent_u=np.stack([g.tangent_u for g in gaussians]).astype(np.float32),
            tangent_v=np.stack([g.tangent_v for g in gaussians]).astype(np.float32),
            scales=np.array([[g.scale_u, g.scale_v] for g in gaussians], dtype=np.float32),
            opacities=np.array([g.opacity for g in gaussians], dtype=np.float32),
            sh=np.stack([g.sh for g in gaussians]).astype(np.float32).reshape(n, n_sh, 3),
            features=np.stack([g.feature for g in gaussians]).astype(np.float32),
            frames=list(frames) if frames else [],
        )
        return scene

    def subset(self, indices) -> "SplatScene":
        """New scene restricted to the given gaussian indices (no frames)."""
        idx = np.asarray(sorted(int(i) for i in indices), dtype=np.int64)
        if idx.size == 0:
            raise SceneError("cannot build a scene from an empty gaussian set")
        return SplatScene(
            centers=self.centers[idx].copy(),
            tangent_u=self.tangent_u[idx].copy(),
            tangent_v=self.tangent_v[idx].copy(),
            scales=self.scales[idx].copy(),
            opacities=self.opacities[idx].copy(),
            sh=self.sh[idx].copy(),
            features=self.features[idx].copy(),
        )

    def validate(self) -> None:
        n = self.n_gaussians
        if n < 1:
            raise SceneError("scene must contain at least 1 gaussian")
        if self.features.shape != (n, FEATURE_DIM):
            raise SceneError(f"feature dimension must be {FEATURE_DIM}, got shape {self.features.shape}")
        deg = self.sh_degree
        if deg not in (0, 1, 2, 3) or self.sh.shape[1] != (deg + 1) ** 2:
            raise SceneError(f"unsupported SH block shape {self.sh.shape}")
        for name, arr in (("centers", self.centers), ("tangent_u", self.tangent_u),
                          ("tangent_v", self.tangent_v), ("scales", self.scales),
                          ("opacities", self.opacities), ("sh", self.sh),
                          ("features", self.features)):
            bad = ~np.isfinite(arr.reshape(n, -1)).all(axis=1)
            if bad.any():
                raise SceneError(f"gaussian {int(np.argmax(bad))}: non-finite value in {name}")

        tu = self.tangent_u.astype(np.float64)
        tv = self.tangent_v.astype(np.float64)
        # f32 storage of normalized f64 vectors rounds at ~1e-7; allow headroom
        tol = ORTHO_TOL * 4
        nu = np.abs(np.linalg.norm(tu, axis=1) - 1.0)
        nv = np.abs(np.linalg.norm(tv, axis=1) - 1.0)
        dots = np.abs(np.einsum("ij,ij->i", tu, tv))
        for name, err in (("tangent_u norm", nu), ("tangent_v norm", nv), ("tangent orthogonality", dots)):
            if (err > tol).any():
                i = int(np.argmax(err > tol))
                raise SceneError(f"gaussian {i}: {name} off by {err[i]:.2e} (tolerance {tol:.0e})")
        if (self.scales <= 0).any():
            i = int(np.argmax((self.scales <= 0).any(axis=1)))
            raise SceneError(f"gaussian {i}: scales must be positive, got {self.scales[i].tolist()}")
        bad_op = (self.opacities < 0) | (self.opacities > 1)
        if bad_op.any():
            i = int(np.argmax(bad_op))
            raise SceneError(f"gaussian {i}: opacity {float(self.opacities[i])} outside [0, 1]")

        seen = set()
        for f in self.frames:
            if f.index in seen:
                raise SceneError(f"duplicate frame index {f.index}")
            seen.add(f.index)
            f.validate()

    def normals(self) -> np.ndarray:
        """(N, 3) unit disk normals tangent_u x tangent_v (float64)."""
        n = np.cross(self.tangent_u.astype(np.float64), self.tangent_v.astype(np.float64))
        return n / np.linalg.norm(n, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# splat container


def scene_bytes(scene: SplatScene) -> bytes:
    """Serialize the splat container to bytes."""
    n = scene.n_gaussians
    deg = scene.sh_degree
    n_sh = (deg + 1) ** 2
    header = MAGIC + struct.pack("<IQB", VERSION, n, deg)
    per = np.concatenate([
        scene.centers.astype("<f4"),
        scene.tangent_u.astype("<f4"),
        scene.tangent_v.astype("<f4"),
        scene.scales.astype("<f4"),
        scene.opacities.astype("<f4").reshape(n, 1),
        scene.sh.astype("<f4").reshape(n, n_sh * 3),
        scene.features.astype("<f4"),
    ], axis=1)
    return header + per.tobytes()


def save_scene(scene: SplatScene, path) -> None:
    """Write the splat container; `load_scene` reproduces it bitwise."""
    Path(path).write_bytes(scene_bytes(scene))


def load_scene(path) -> SplatScene:
    """Read a splat container and validate all invariants."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 + 13:
        raise SceneError(f"{path}: truncated header")
    if raw[:4] != MAGIC:
        raise SceneError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, count, deg = struct.unpack_from("<IQB", raw, 4)
    if version != VERSION:
        raise SceneError(f"{path}: unsupported container version {version}")
    if deg > 3:
        raise SceneError(f"{path}: unsupported SH degree {deg}")
    if count < 1:
        raise SceneError(f"{path}: scene must contain at least 1 gaussian")
    n_sh = (deg + 1) ** 2
    rec_floats = _FIXED_FLOATS + n_sh * 3
    payload = raw[17:]
    expected = count * rec_floats * 4
    if len(payload) != expected:
        raise SceneError(f"{path}: payload is {len(payload)} bytes, expected {expected} "
                         f"({count} gaussians x {rec_floats} floats)")
    flat = np.frombuffer(payload, dtype="<f4").reshape(count, rec_floats)
    o = 0

    def take(k):
        nonlocal o
        out = flat[:, o:o + k]
        o += k
        return out

    scene = SplatScene(
        centers=take(3).copy(),
        tangent_u=take(3).copy(),
        tangent_v=take(3).copy(),
        scales=take(2).copy(),
        opacities=take(1).copy().reshape(count),
        sh=take(n_sh * 3).copy().reshape(count, n_sh, 3),
        features=take(FEATURE_DIM).copy(),
    )
    scene.validate()
    return scene


# ---------------------------------------------------------------------------
# cameras JSON


def save_cameras(frames: list[Frame], path) -> None:
    entries = []
    for f in frames:
        c = f.camera
        entries.append({
            "index": f.index,
            "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
            "width": c.width, "height": c.height,
            "R": [float(v) for v in c.rotation.reshape(9)],
            "t": [float(v) for v in c.translation],
        })
    Path(path).write_text(json.dumps({"frames": entries}, indent=1))


def load_cameras(path) -> list[tuple[int, Camera]]:
    doc = json.loads(Path(path).read_text())
    out = []
    for e in doc["frames"]:
        cam = Camera(e["fx"], e["fy"], e["cx"], e["cy"], int(e["width"]), int(e["height"]),
                     np.array(e["R"], dtype=np.float64).reshape(3, 3),
                     np.array(e["t"], dtype=np.float64))
        cam.validate()
        out.append((int(e["index"]), cam))
    return out


# ---------------------------------------------------------------------------
# masks (16-bit grayscale PNG, pixel value = label)


def save_mask(mask: np.ndarray, path) -> None:
    if mask.max() > np.iinfo(np.uint16).max:
        raise SceneError("mask label exceeds 16-bit range")
    img = Image.fromarray(mask.astype(np.uint16))
    img.save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    arr = np.array(Image.open(path))
    return arr.astype(np.int32)


def save_frames(frames: list[Frame], cameras_path, masks_dir) -> None:
    save_cameras(frames, cameras_path)
    masks_dir = Path(masks_dir)
    masks_dir.mkdir(parents=True, exist_ok=True)
    for f in frames:
        save_mask(f.mask_map, masks_dir / f"mask_{f.index:04d}.png")


def load_frames(cameras_path, masks_dir) -> list[Frame]:
    frames = []
    masks_dir = Path(masks_dir)
    for index, cam in load_cameras(cameras_path):
        mask_path = masks_dir / f"mask_{index:04d}.png"
        if mask_path.exists():
            mask = load_mask(mask_path)
        else:
            mask = np.zeros((cam.height, cam.width), dtype=np.int32)
        frame = Frame(index=index, camera=cam, mask_map=mask)
        frame.validate()
        frames.append(frame)
    return frames
