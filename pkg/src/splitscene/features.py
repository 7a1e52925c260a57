"""Per-gaussian instance feature field: contrastive training and queries.

The 16-dim features are rasterized exactly like color, so a rendered
pixel feature is a fixed linear blend of per-gaussian features (geometry
and opacity stay frozen). Training pulls features toward their instance
mean and away from other instances' means with a temperature-scaled
softmax over batch-local means, fed by three supervision sources: raw
single-view masks, cross-view clustered masks, and the fused 3D masks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .clustering import InstanceRecord, instance_label_array
from .rasterizer import FrameContributions, render, render_with_contributions
from .scene import Camera, SplatScene

_EPS = 1e-12


class FeatureFieldError(ValueError):
    pass


@dataclass
class TrainingConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    window_k: int = 2
    temperature: float = 0.5
    samples_per_mask: int = 64
    lr: float = 5e-3
    iters: int = 2000
    tau_seg: float = 0.9
    seed: int = 42


@dataclass
class LabeledBatch:
    features: np.ndarray   # (S, D) raw, pre-normalization
    labels: np.ndarray     # (S,) integer labels, any values
    source: str = ""

    def validate(self) -> None:
        if not np.isfinite(self.features).all():
            raise FeatureFieldError(f"batch '{self.source}': non-finite feature")
        if np.unique(self.labels).size < 2:
            raise FeatureFieldError(
                f"batch '{self.source}': needs at least 2 distinct labels for the softmax")


def _normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    norms = np.maximum(norms, _EPS)
    return x / norms, norms


def _batch_stats(batch: LabeledBatch, temperature):
    batch.validate()
    f_norm, norms = _normalize_rows(np.asarray(batch.features, dtype=np.float64))
    labels = np.asarray(batch.labels)
    uniq, inv = np.unique(labels, return_inverse=True)
    n_inst = uniq.size
    counts = np.bincount(inv, minlength=n_inst).astype(np.float64)
    means = np.zeros((n_inst, f_norm.shape[1]))
    np.add.at(means, inv, f_norm)
    means /= counts[:, None]
    phi = np.asarray(temperature, dtype=np.float64)
    if phi.ndim == 0:
        phi = np.full(n_inst, float(phi))
    if phi.shape != (n_inst,):
        raise FeatureFieldError(f"temperature must be scalar or one per instance, got {phi.shape}")
    if (phi <= 0).any():
        raise FeatureFieldError("temperature must be positive")
    logits = f_norm @ (means / phi[:, None]).T          # (S, N)
    logits -= logits.max(axis=1, keepdims=True)
    exp = np.exp(logits)
    p = exp / exp.sum(axis=1, keepdims=True)
    return f_norm, norms, inv, counts, means, phi, p


def contrastive_loss(batch: LabeledBatch, temperature) -> float:
    """Mean negative log-softmax of each sample against instance means.

    Features are L2-normalized before every dot product; the divisor is
    the number of instances in the batch, not the sample count.
    """
    f_norm, _, inv, _, _, _, p = _batch_stats(batch, temperature)
    n_inst = p.shape[1]
    picked = np.maximum(p[np.arange(len(inv)), inv], _EPS)
    return float(-np.log(picked).sum() / n_inst)


def contrastive_grad(batch: LabeledBatch, temperature) -> tuple[float, np.ndarray]:
    """Loss plus its exact gradient w.r.t. the raw (unnormalized) features.

    Includes both the direct softmax path and the dependency of the
    batch-local instance means on every member sample.
    """
    f_norm, norms, inv, counts, means, phi, p = _batch_stats(batch, temperature)
    s, n_inst = p.shape
    picked = np.maximum(p[np.arange(s), inv], _EPS)
    loss = float(-np.log(picked).sum() / n_inst)

    a = p.copy()
    a[np.arange(s), inv] -= 1.0
    a /= n_inst                                     # dL/dlogits
    a_scaled = a / phi[None, :]
    grad_norm = a_scaled @ means                    # direct term
    b = a_scaled.T @ f_norm                         # (N, D): dL/dmean_k * phi_k undone
    grad_norm += b[inv] / counts[inv][:, None]      # mean term

    # chain through row normalization: (I - f f^T) / ||raw||
    dots = np.einsum("ij,ij->i", grad_norm, f_norm)
    grad_raw = (grad_norm - f_norm * dots[:, None]) / norms
    return loss, grad_raw


# ---------------------------------------------------------------------------
# supervision plumbing


@dataclass
class FieldContext:
    """Frozen-geometry training cache for one scene + instance set."""

    scene: SplatScene
    instances: list[InstanceRecord]
    config: TrainingConfig
    contributions: dict[int, FrameContributions]
    mask_pixels: dict[int, dict[int, np.ndarray]]       # frame -> raw label -> linear pixels
    instance_pixels: dict[int, dict[int, np.ndarray]]   # frame -> instance id -> linear pixels
    contributing: dict[int, np.ndarray]                 # frame -> (N,) bool
    gauss_labels: np.ndarray                            # (N,) instance id, 0 unassigned
    frame_order: list[int]

    @staticmethod
    def build(scene: SplatScene, instances: list[InstanceRecord],
              config: TrainingConfig,
              contributions: dict[int, FrameContributions] | None = None) -> "FieldContext":
        mask_of_instance = {}
        for rec in instances:
            for fm in rec.masks:
                mask_of_instance[fm] = rec.id
        contribs: dict[int, FrameContributions] = dict(contributions or {})
        mask_pixels: dict[int, dict[int, np.ndarray]] = {}
        inst_pixels: dict[int, dict[int, np.ndarray]] = {}
        contributing: dict[int, np.ndarray] = {}
        for frame in scene.frames:
            if frame.index not in contribs:
                contribs[frame.index] = render_with_contributions(scene, frame.camera)[1]
            fc = contribs[frame.index]
            contributing[frame.index] = fc.contributing()
            flat = frame.mask_map.ravel()
            per_label = {}
            per_inst = {}
            for lab in np.unique(flat):
                if lab <= 0:
                    continue
                pixels = np.flatnonzero(flat == lab)
                per_label[int(lab)] = pixels
                inst = mask_of_instance.get((frame.index, int(lab)))
                if inst is not None:
                    per_inst.setdefault(inst, []).append(pixels)
            mask_pixels[frame.index] = per_label
            inst_pixels[frame.index] = {
                k: np.concatenate(v) for k, v in per_inst.items()}
        return FieldContext(
            scene=scene, instances=instances, config=config,
            contributions=contribs, mask_pixels=mask_pixels,
            instance_pixels=inst_pixels, contributing=contributing,
            gauss_labels=instance_label_array(instances, scene.n_gaussians),
            frame_order=[f.index for f in scene.frames])


@dataclass
class RenderedBatch:
    batch: LabeledBatch
    seg: np.ndarray     # entry -> sample row
    flat: np.ndarray    # entry -> CSR entry index
    frames: list[int]   # frame per entry block boundary bookkeeping
    entry_frame: np.ndarray  # entry -> frame index


def sample_rendered_batch(ctx: FieldContext, features: np.ndarray,
                          frame_ids: list[int], label_mode: str,
                          rng: np.random.Generator) -> RenderedBatch | None:
    """Sample mask pixels in the given frames and blend their features.

    label_mode "raw" uses each frame's own mask labels (offset per frame
    so labels never collide across frames); "instance" maps masks through
    the clustered instances and skips unclustered masks.
    """
    spm = ctx.config.samples_per_mask
    pix_parts, label_parts, frame_parts = [], [], []
    for fi in frame_ids:
        if label_mode == "raw":
            groups = ctx.mask_pixels.get(fi, {})
            offset = fi * 10000  # keep raw labels frame-local
        else:
            groups = ctx.instance_pixels.get(fi, {})
            offset = 0
        for lab, pixels in sorted(groups.items()):
            take = min(spm, pixels.size)
            chosen = rng.permutation(pixels)[:take]
            pix_parts.append(chosen)
            label_parts.append(np.full(take, lab + offset, dtype=np.int64))
            frame_parts.append(np.full(take, fi, dtype=np.int64))
    if not pix_parts:
        return None
    pixels = np.concatenate(pix_parts)
    labels = np.concatenate(label_parts)
    frames = np.concatenate(frame_parts)
    if np.unique(labels).size < 2:
        return None

    feats = np.zeros((pixels.size, features.shape[1]))
    segs, flats, entry_frames = [], [], []
    for fi in frame_ids:
        sel = frames == fi
        if not sel.any():
            continue
        fc = ctx.contributions[fi]
        seg, flat = fc.gather(pixels[sel])
        rows = np.flatnonzero(sel)
        np.add.at(feats, rows[seg],
                  fc.weight[flat][:, None] * features[fc.gauss[flat]])
        segs.append(rows[seg])
        flats.append(flat)
        entry_frames.append(np.full(flat.size, fi, dtype=np.int64))
    batch = LabeledBatch(features=feats, labels=labels,
                         source=f"{label_mode}-view render")
    return RenderedBatch(batch=batch,
                         seg=np.concatenate(segs) if segs else np.zeros(0, dtype=np.int64),
                         flat=np.concatenate(flats) if flats else np.zeros(0, dtype=np.int64),
                         frames=list(frame_ids),
                         entry_frame=np.concatenate(entry_frames) if entry_frames else np.zeros(0, dtype=np.int64))


def _scatter_render_grad(ctx: FieldContext, rb: RenderedBatch,
                         grad_rows: np.ndarray, out: np.ndarray) -> None:
    for fi in rb.frames:
        sel = rb.entry_frame == fi
        if not sel.any():
            continue
        fc = ctx.contributions[fi]
        flat = rb.flat[sel]
        np.add.at(out, fc.gauss[flat],
                  fc.weight[flat][:, None] * grad_rows[rb.seg[sel]])


def _children(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(int(rng.integers(2 ** 63))) for _ in range(n)]


def total_loss(ctx: FieldContext, frame_index: int, features: np.ndarray,
               rng: np.random.Generator):
    """Weighted three-term loss and its gradient over all features.

    Returns (loss, grad (N, D), parts dict). Terms without two distinct
    labels available are skipped (reported as 0.0 in parts).
    """
    cfg = ctx.config
    grad = np.zeros_like(features)
    parts = {"single": 0.0, "cross": 0.0, "threed": 0.0}
    rng1, rng2, rng3 = _children(rng, 3)

    if cfg.lambda1 > 0:
        rb = sample_rendered_batch(ctx, features, [frame_index], "raw", rng1)
        if rb is not None:
            loss, g = contrastive_grad(rb.batch, cfg.temperature)
            parts["single"] = loss
            _scatter_render_grad(ctx, rb, cfg.lambda1 * g, grad)

    if cfg.lambda2 > 0:
        pos = ctx.frame_order.index(frame_index)
        lo = max(0, pos - cfg.window_k)
        hi = min(len(ctx.frame_order), pos + cfg.window_k + 1)
        window = ctx.frame_order[lo:hi]
        rb = sample_rendered_batch(ctx, features, window, "instance", rng2)
        if rb is not None:
            loss, g = contrastive_grad(rb.batch, cfg.temperature)
            parts["cross"] = loss
            _scatter_render_grad(ctx, rb, cfg.lambda2 * g, grad)

    if cfg.lambda3 > 0:
        visible = ctx.contributing[frame_index] & (ctx.gauss_labels > 0)
        idx = np.flatnonzero(visible)
        if idx.size and np.unique(ctx.gauss_labels[idx]).size >= 2:
            batch = LabeledBatch(features=features[idx],
                                 labels=ctx.gauss_labels[idx], source="3D gaussians")
            loss, g = contrastive_grad(batch, cfg.temperature)
            parts["threed"] = loss
            np.add.at(grad, idx, cfg.lambda3 * g)

    total = (cfg.lambda1 * parts["single"] + cfg.lambda2 * parts["cross"]
             + cfg.lambda3 * parts["threed"])
    return total, grad, parts


@dataclass
class TrainResult:
    features: np.ndarray                 # (N, D) float32, also written to the scene
    mean_features: dict[int, np.ndarray]
    log_rows: list[tuple]                # (iter, total, single, cross, threed)
    single_instance: bool = False


def instance_mean_features(features: np.ndarray,
                           instances: list[InstanceRecord]) -> dict[int, np.ndarray]:
    """L2-normalized mean of L2-normalized member features, per instance."""
    out = {}
    for rec in instances:
        f = features[rec.gaussians].astype(np.float64)
        f = f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), _EPS)
        m = f.mean(axis=0)
        out[rec.id] = m / max(np.linalg.norm(m), _EPS)
    return out


def train(scene: SplatScene, instances: list[InstanceRecord],
          config: TrainingConfig | None = None,
          contributions: dict[int, FrameContributions] | None = None) -> TrainResult:
    """Adam over the raw feature matrix; deterministic under config.seed.

    Fills every InstanceRecord.mean_feature. A scene with fewer than two
    instances exits cleanly (nothing to contrast against).
    """
    config = config or TrainingConfig()
    if not instances:
        raise FeatureFieldError("no instances to train against")
    rng = np.random.default_rng(config.seed)
    feats = scene.features.astype(np.float64)

    if len(instances) < 2:
        means = instance_mean_features(feats, instances)
        for rec in instances:
            rec.mean_feature = means[rec.id]
        return TrainResult(features=scene.features.copy(), mean_features=means,
                           log_rows=[], single_instance=True)

    ctx = FieldContext.build(scene, instances, config, contributions)
    m = np.zeros_like(feats)
    v = np.zeros_like(feats)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    rows = []
    for it in range(1, config.iters + 1):
        frame = ctx.frame_order[int(rng.integers(len(ctx.frame_order)))]
        try:
            loss, grad, parts = total_loss(ctx, frame, feats, rng)
        except FeatureFieldError as e:
            raise FeatureFieldError(
                f"training diverged at iteration {it} (frame {frame}): {e}") from e
        if not math.isfinite(loss):
            raise FeatureFieldError(
                f"training diverged at iteration {it} (frame {frame}): loss={loss}")
        m = beta1 * m + (1 - beta1) * grad
        v = beta2 * v + (1 - beta2) * grad * grad
        m_hat = m / (1 - beta1 ** it)
        v_hat = v / (1 - beta2 ** it)
        feats -= config.lr * m_hat / (np.sqrt(v_hat) + eps)
        rows.append((it, loss, parts["single"], parts["cross"], parts["threed"]))

    scene.features = feats.astype(np.float32)
    means = instance_mean_features(scene.features.astype(np.float64), instances)
    for rec in instances:
        rec.mean_feature = means[rec.id]
    return TrainResult(features=scene.features.copy(), mean_features=means, log_rows=rows)


# ---------------------------------------------------------------------------
# extraction and interactive queries


def feature_cosines(features: np.ndarray, mean_feature: np.ndarray) -> np.ndarray:
    f = features.astype(np.float64)
    f = f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), _EPS)
    m = np.asarray(mean_feature, dtype=np.float64)
    m = m / max(np.linalg.norm(m), _EPS)
    return f @ m


def segment_instance(scene: SplatScene, instance: InstanceRecord,
                     tau_seg: float = 0.9) -> np.ndarray:
    """Indices of all gaussians with cosine(feature, mean) >= tau_seg."""
    if instance.mean_feature is None:
        raise FeatureFieldError(f"instance {instance.id} has no mean feature (train first)")
    cos = feature_cosines(scene.features, instance.mean_feature)
    idx = np.flatnonzero(cos >= tau_seg)
    if idx.size == 0:
        raise FeatureFieldError(
            f"instance {instance.id}: no gaussian reaches cosine {tau_seg} "
            "(threshold too strict for this scene)")
    return idx


@dataclass
class ClickResult:
    instance_id: int                  # 0 = background
    gaussians: np.ndarray
    similarity: np.ndarray            # (H, W) cosine to the matched mean, clipped to [0, 1]
    mask: np.ndarray                  # (H, W) bool, similarity >= tau_seg on covered pixels


def query_click(scene: SplatScene, view: Camera, pixel: tuple[int, int],
                instances: list[InstanceRecord], tau_seg: float = 0.9,
                background_alpha: float = 0.1,
                min_similarity: float = 0.5) -> ClickResult:
    """Match the clicked pixel's rendered feature against instance means.

    Low-coverage pixels and pixels matching no instance better than
    `min_similarity` (unlabeled clutter) report background.
    """
    x, y = pixel
    if not (0 <= x < view.width and 0 <= y < view.height):
        raise ValueError(f"pixel {pixel} outside {view.width}x{view.height} view")
    out = render(scene, view)
    h, w = view.height, view.width
    empty = ClickResult(instance_id=0, gaussians=np.zeros(0, dtype=np.int64),
                        similarity=np.zeros((h, w)), mask=np.zeros((h, w), dtype=bool))
    if out.alpha[y, x] < background_alpha:
        return empty
    feat = out.feature[y, x]
    norm = np.linalg.norm(feat)
    if norm < _EPS:
        return empty
    feat = feat / norm
    best_id, best_cos = 0, -np.inf
    for rec in instances:
        if rec.mean_feature is None:
            raise FeatureFieldError("features are untrained (no instance means)")
        m = rec.mean_feature / max(np.linalg.norm(rec.mean_feature), _EPS)
        c = float(feat @ m)
        if c > best_cos:
            best_id, best_cos = rec.id, c
    if best_id == 0 or best_cos < min_similarity:
        return empty
    rec = next(r for r in instances if r.id == best_id)
    pix_feats = out.feature.reshape(-1, out.feature.shape[-1])
    norms = np.maximum(np.linalg.norm(pix_feats, axis=1), _EPS)
    m = rec.mean_feature / max(np.linalg.norm(rec.mean_feature), _EPS)
    sim = (pix_feats @ m) / norms
    sim = sim.reshape(h, w)
    covered = out.alpha >= background_alpha
    similarity = np.clip(np.where(covered, sim, 0.0), 0.0, 1.0)
    mask = covered & (sim >= tau_seg)
    return ClickResult(instance_id=best_id,
                       gaussians=segment_instance(scene, rec, tau_seg),
                       similarity=similarity, mask=mask)


def reference_view_miou(scene: SplatScene, instance_gt_masks: dict[int, np.ndarray],
                        tau_seg: float = 0.9, alpha_floor: float = 0.1) -> float:
    """Reference-view query protocol: per instance, take the view with the
    largest ground-truth mask, read its mean rendered feature, threshold
    cosine similarity in every other view, and average the IoUs.

    `alpha_floor` should match the coverage level at which the ground
    truth masks were defined, so the comparison scores feature quality
    rather than silhouette bookkeeping.
    """
    frame_by_index = {f.index: f for f in scene.frames}
    rendered = {fi: render(scene, frame_by_index[fi].camera)
                for fi in instance_gt_masks}
    inst_ids = sorted({int(v) for m in instance_gt_masks.values()
                       for v in np.unique(m) if v > 0})
    ious = []
    for inst in inst_ids:
        ref = max(instance_gt_masks, key=lambda fi: (instance_gt_masks[fi] == inst).sum())
        if (instance_gt_masks[ref] == inst).sum() == 0:
            continue
        out = rendered[ref]
        feats = out.feature[instance_gt_masks[ref] == inst]
        feats = feats / np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), _EPS)
        ref_feat = feats.mean(axis=0)
        ref_feat /= max(np.linalg.norm(ref_feat), _EPS)
        for fi, gt_mask in instance_gt_masks.items():
            if fi == ref:
                continue
            out_t = rendered[fi]
            pix = out_t.feature.reshape(-1, out_t.feature.shape[-1])
            norms = np.maximum(np.linalg.norm(pix, axis=1), _EPS)
            sim = ((pix @ ref_feat) / norms).reshape(gt_mask.shape)
            pred = (sim >= tau_seg) & (out_t.alpha >= alpha_floor)
            want = gt_mask == inst
            union = (pred | want).sum()
            if union == 0:
                continue
            ious.append((pred & want).sum() / union)
    if not ious:
        raise FeatureFieldError("no instance visible in any target view")
    return float(np.mean(ious))
