import numpy as np
import pytest

from splitscene.clustering import (
    ConsensusIndex,
    FrameTrace,
    SpatialTracker,
    build_instances,
    build_tracker,
    build_trackers,
    cluster_masks,
    consensus_graph,
    consensus_rate,
    detect_undersegmentation,
    filter_floaters,
    instance_label_array,
    is_contained,
    is_visible,
    trace_frames,
)
from splitscene.scene import Frame, SceneError, SplatScene, look_at_camera
from splitscene.synth import SynthSpec, generate

from test_rasterizer import disk


def mk_tracker(frame, mask, members, n):
    return SpatialTracker.from_indices(frame, mask, members, n)


def mk_trace(frame, contributing, n):
    c = np.zeros(n, dtype=bool)
    c[list(contributing)] = True
    return FrameTrace(frame=frame, contributing=c)


@pytest.fixture(scope="module")
def synth_k3_noisy():
    # seed picked so the corruption schedule includes merges
    res = generate(SynthSpec(n_instances=3, n_views=12, noise_rate=0.2, seed=302))
    assert any(c.kind == "merge" for c in res.corruptions)
    traces = trace_frames(res.scene)
    trackers = build_trackers(res.scene, traces)
    index = ConsensusIndex(trackers, traces)
    return res, traces, trackers, index


@pytest.fixture(scope="module")
def synth_k2_clean():
    res = generate(SynthSpec(n_instances=2, n_views=8, noise_rate=0.0, seed=21))
    traces = trace_frames(res.scene)
    trackers = build_trackers(res.scene, traces)
    return res, traces, trackers


# ---------------------------------------------------------------------------
# build_tracker


def test_single_opaque_gaussian_mask():
    scene = SplatScene.from_gaussians([disk(opacity=1.0, su=2.0, sv=2.0)])
    cam = look_at_camera((0, 0, -6), (0, 0, 0), fx=8, fy=8, width=4, height=4)
    mask = np.ones((4, 4), dtype=np.int32)
    frame = Frame(index=0, camera=cam, mask_map=mask)
    tracker = build_tracker(scene, frame, 1)
    assert tracker.members.tolist() == [0]


def test_mask_without_qualifying_contributors_errors():
    # the instance never rasterizes in this frame (out of the frustum);
    # its mask pixels have no unoccluded contributor at all
    scene = SplatScene.from_gaussians([disk(center=(100.0, 0, 0))])
    cam = look_at_camera((0, 0, -6), (0, 0, 0), fx=8, fy=8, width=4, height=4)
    mask = np.zeros((4, 4), dtype=np.int32)
    mask[1:3, 1:3] = 1
    frame = Frame(index=3, camera=cam, mask_map=mask)
    with pytest.raises(SceneError, match="frame 3: mask 1"):
        build_tracker(scene, frame, 1)


def test_empty_mask_errors():
    scene = SplatScene.from_gaussians([disk()])
    cam = look_at_camera((0, 0, -6), (0, 0, 0), fx=8, fy=8, width=4, height=4)
    frame = Frame(index=0, camera=cam, mask_map=np.zeros((4, 4), dtype=np.int32))
    with pytest.raises(SceneError, match="mask 1 has no pixels"):
        build_tracker(scene, frame, 1)


def test_trackers_subset_of_instance_with_high_recall(synth_k2_clean):
    res, traces, trackers = synth_k2_clean
    for t in trackers:
        inst = res.label_to_instance[t.frame][t.mask]
        gt = np.flatnonzero(res.gt_labels == inst)
        assert np.isin(t.members, gt).all()          # tracker within ground truth
        assert np.isin(gt, t.members).mean() >= 0.9  # >= 90% of visible members


# ---------------------------------------------------------------------------
# is_visible / is_contained


def test_visibility_thresholds():
    n = 200
    tracker = mk_tracker(0, 1, range(100), n)
    assert is_visible(tracker, mk_trace(1, range(30), n)) is True      # exactly 30%
    assert is_visible(tracker, mk_trace(1, range(29), n)) is False
    assert is_visible(tracker, mk_trace(1, range(100), n)) is True


def test_self_frame_visibility(synth_k2_clean):
    _, traces, trackers = synth_k2_clean
    by_frame = {t.frame: t for t in traces}
    for t in trackers:
        assert is_visible(t, by_frame[t.frame])


def test_containment_identical_tracker():
    n = 50
    a = mk_tracker(0, 1, range(20), n)
    twin = mk_tracker(1, 4, range(20), n)
    assert is_contained(a, [twin]) == (1, 4)


def test_containment_below_threshold():
    n = 200
    a = mk_tracker(0, 1, range(100), n)
    best = mk_tracker(1, 2, range(79), n)   # 79% of a's members
    assert is_contained(a, [best]) is None
    exact = mk_tracker(1, 3, range(80), n)  # 80% is inclusive
    assert is_contained(a, [best, exact]) == (1, 3)


def test_mutual_containment_in_synth(synth_k2_clean):
    res, traces, trackers = synth_k2_clean
    by_frame = {}
    for t in trackers:
        by_frame.setdefault(t.frame, []).append(t)
    a = trackers[0]
    inst = res.label_to_instance[a.frame][a.mask]
    for t in trackers:
        if t.frame == a.frame or res.label_to_instance[t.frame][t.mask] != inst:
            continue
        hit = is_contained(a, by_frame[t.frame])
        assert hit is not None
        back = is_contained(t, by_frame[a.frame])
        assert back is not None
        break


# ---------------------------------------------------------------------------
# consensus_rate


def test_consensus_all_frames_support():
    n = 10
    trackers = [mk_tracker(f, 1, range(10), n) for f in range(10)]
    traces = [mk_trace(f, range(10), n) for f in range(10)]
    index = ConsensusIndex(trackers, traces)
    c, n_vis, n_con = consensus_rate(trackers[0], trackers[1], index)
    assert (c, n_vis, n_con) == (1.0, 10, 10)


def test_consensus_exactly_at_threshold_not_merged():
    n = 10
    trackers = [mk_tracker(f, 1, range(10), n) for f in range(9)]
    trackers.append(mk_tracker(9, 1, range(7), n))   # contains only 70%
    traces = [mk_trace(f, range(10), n) for f in range(10)]
    index = ConsensusIndex(trackers, traces)
    a, b = trackers[0], trackers[1]
    c, n_vis, n_con = consensus_rate(a, b, index)
    assert n_vis == 10 and n_con == 9
    assert abs(c - 0.9) < 1e-12
    clusters = cluster_masks([a, b], index)
    assert len(clusters) == 2        # strict "exceeds 0.9"


def test_consensus_matches_hand_enumeration():
    # 3 frames, trackers with asymmetric membership; reference result comes
    # from an independent nested-loop count below
    n = 12
    t_a = mk_tracker(0, 1, [0, 1, 2, 3, 4], n)
    t_b = mk_tracker(1, 1, [0, 1, 2, 5, 6], n)
    others = [mk_tracker(0, 2, [6, 7, 8], n),
              mk_tracker(1, 2, [6, 7, 9], n),
              mk_tracker(2, 1, [0, 1, 2, 3, 4, 5], n),
              mk_tracker(2, 2, [6, 7, 8, 9], n)]
    trackers = [t_a, t_b] + others
    traces = [mk_trace(0, range(9), n), mk_trace(1, range(12), n), mk_trace(2, range(12), n)]
    index = ConsensusIndex(trackers, traces)

    def visible(t, trace):
        return trace.contributing[t.members].sum() >= 0.3 * t.size

    def contained_together(x, y, frame_trackers):
        for cand in frame_trackers:
            fx = np.isin(x.members, cand.members).mean()
            fy = np.isin(y.members, cand.members).mean()
            if fx >= 0.8 and fy >= 0.8:
                return True
        return False

    by_frame = {0: [t_a, others[0]], 1: [t_b, others[1]], 2: [others[2], others[3]]}
    n_vis = n_con = 0
    for f, trace in enumerate(traces):
        if visible(t_a, trace) and visible(t_b, trace):
            n_vis += 1
            if contained_together(t_a, t_b, by_frame[f]):
                n_con += 1
    want = (n_con / n_vis if n_vis else 0.0, n_vis, n_con)
    got = consensus_rate(t_a, t_b, index)
    assert got == want
    assert want[1] == 3 and want[2] == 1   # fixture exercises both counters


def test_consensus_symmetry(synth_k3_noisy):
    _, _, trackers, index = synth_k3_noisy
    rng = np.random.default_rng(3)
    for _ in range(20):
        i, j = rng.integers(0, len(trackers), size=2)
        assert consensus_rate(trackers[i], trackers[j], index) == \
            consensus_rate(trackers[j], trackers[i], index)


def test_consensus_graph_edge_invariants(synth_k3_noisy):
    _, _, trackers, index = synth_k3_noisy
    g = consensus_graph(index)
    for e in g.edges:
        assert 0.0 <= e.rate <= 1.0
        if e.n_vis > 0:
            assert abs(e.rate - e.n_contain / e.n_vis) < 1e-12
        else:
            assert e.rate == 0.0


# ---------------------------------------------------------------------------
# under-segmentation


def test_injected_merge_is_flagged(synth_k3_noisy):
    res, _, trackers, index = synth_k3_noisy
    merged_keys = {(c.frame, d) for c in res.corruptions if c.kind == "merge"
                   for d in c.dense_labels}
    assert merged_keys
    for t in trackers:
        flagged = detect_undersegmentation(t, index)
        if (t.frame, t.mask) in merged_keys:
            assert flagged, f"merged mask {(t.frame, t.mask)} not flagged"
        else:
            assert not flagged, f"clean mask {(t.frame, t.mask)} falsely flagged"


def test_inconsistent_multi_intersection_not_flagged():
    # suspect straddles two trackers in only 1 of 10 visible frames
    n = 10
    suspect = mk_tracker(0, 1, range(10), n)
    trackers = [suspect,
                mk_tracker(1, 1, range(5), n), mk_tracker(1, 2, range(5, 10), n)]
    for f in range(2, 10):
        trackers.append(mk_tracker(f, 1, range(10), n))
    traces = [mk_trace(f, range(10), n) for f in range(10)]
    index = ConsensusIndex(trackers, traces)
    assert detect_undersegmentation(suspect, index) is False


def test_discarded_mask_members_survive_elsewhere(synth_k3_noisy):
    res, _, trackers, index = synth_k3_noisy
    kept = [t for t in trackers if not detect_undersegmentation(t, index)]
    discarded = [t for t in trackers if detect_undersegmentation(t, index)]
    for d in discarded:
        covered = np.zeros(res.scene.n_gaussians, dtype=bool)
        for t in kept:
            covered |= t.member_mask
        assert covered[d.members].all()


# ---------------------------------------------------------------------------
# cluster_masks


def test_all_high_consensus_single_cluster():
    n = 10
    trackers = [mk_tracker(f, 1, range(10), n) for f in range(5)]
    traces = [mk_trace(f, range(10), n) for f in range(5)]
    index = ConsensusIndex(trackers, traces)
    clusters = cluster_masks(trackers, index)
    assert len(clusters) == 1
    assert len(clusters[0]) == 5


def test_never_covisible_pairs_stay_separate():
    n = 4
    a = mk_tracker(0, 1, [0, 1], n)
    b = mk_tracker(1, 1, [2, 3], n)
    traces = [mk_trace(0, [0, 1], n), mk_trace(1, [2, 3], n)]
    index = ConsensusIndex([a, b], traces)
    assert consensus_rate(a, b, index)[0] == 0.0
    assert len(cluster_masks([a, b], index)) == 2


def test_synth_clusters_match_ground_truth(synth_k3_noisy):
    res, traces, trackers, index = synth_k3_noisy
    kept = [t for t in trackers if not detect_undersegmentation(t, index)]
    clusters = cluster_masks(kept, index)
    assert len(clusters) == 3
    for cluster in clusters:
        insts = {res.label_to_instance[t.frame][t.mask] for t in cluster}
        assert len(insts) == 1


def test_clustering_invariant_to_enumeration_order(synth_k3_noisy):
    _, _, trackers, index = synth_k3_noisy
    kept = [t for t in trackers if not detect_undersegmentation(t, index)]
    base = cluster_masks(kept, index)
    rng = np.random.default_rng(5)
    shuffled = [kept[i] for i in rng.permutation(len(kept))]
    again = cluster_masks(shuffled, index)
    as_sets = lambda cs: sorted(sorted((t.frame, t.mask) for t in c) for c in cs)
    assert as_sets(base) == as_sets(again)


def test_merging_two_masks_never_reduces_recall(synth_k2_clean):
    res, _, trackers = synth_k2_clean
    gt1 = np.flatnonzero(res.gt_labels == 1)
    same = [t for t in trackers if res.label_to_instance[t.frame][t.mask] == 1]
    a, b = same[0], same[1]
    merged = set(a.members) | set(b.members)
    recall_a = np.isin(gt1, a.members).mean()
    recall_merged = np.isin(gt1, sorted(merged)).mean()
    assert recall_merged >= recall_a


# ---------------------------------------------------------------------------
# filter_floaters


def grid_cloud(n_side, spacing, origin=(0.0, 0.0, 0.0)):
    ax = np.arange(n_side) * spacing
    gx, gy, gz = np.meshgrid(ax, ax, ax)
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1) + np.asarray(origin)


def cloud_scene(points):
    n = len(points)
    return SplatScene(
        centers=np.asarray(points, dtype=np.float32),
        tangent_u=np.tile(np.array([[1, 0, 0]], dtype=np.float32), (n, 1)),
        tangent_v=np.tile(np.array([[0, 1, 0]], dtype=np.float32), (n, 1)),
        scales=np.full((n, 2), 0.1, dtype=np.float32),
        opacities=np.full(n, 0.5, dtype=np.float32),
        sh=np.ones((n, 1, 3), dtype=np.float32),
        features=np.zeros((n, 16), dtype=np.float32))


def test_isolated_outliers_removed():
    blob = grid_cloud(5, 0.1)                       # 125 points, spacing 0.1
    outliers = np.array([[50.0, 0, 0], [0, 60.0, 0], [0, 0, 70.0]])
    scene = cloud_scene(np.vstack([blob, outliers]))
    kept = filter_floaters(range(128), scene)
    assert kept.tolist() == list(range(125))


def test_single_dense_blob_identity():
    scene = cloud_scene(grid_cloud(5, 0.1))
    kept = filter_floaters(range(125), scene)
    assert kept.tolist() == list(range(125))


def test_small_satellite_cluster_removed():
    blob = grid_cloud(8, 0.1)                        # 512 points
    satellite = grid_cloud(2, 0.1, origin=(30.0, 0, 0))   # 8 dense points = 1.5%
    scene = cloud_scene(np.vstack([blob, satellite]))
    kept = filter_floaters(range(520), scene)
    assert kept.tolist() == list(range(512))


def test_all_noise_is_error():
    # collinear spaced points: each 2x-NN ball holds at most 5 < minPts
    pts = np.stack([np.arange(10) * 10.0, np.zeros(10), np.zeros(10)], axis=1)
    scene = cloud_scene(pts)
    with pytest.raises(SceneError, match="noise"):
        filter_floaters(range(8), scene)


# ---------------------------------------------------------------------------
# build_instances


def test_single_instance_pipeline():
    res = generate(SynthSpec(n_instances=1, n_views=8, noise_rate=0.0, seed=31))
    recs = build_instances(res.scene)
    assert len(recs) == 1
    gt = np.flatnonzero(res.gt_labels == 1)
    assert np.isin(gt, recs[0].gaussians).mean() >= 0.95
    assert recs[0].id == 1
    assert len(recs[0].masks) == 8


def test_five_instances_with_noise():
    res = generate(SynthSpec(n_instances=5, n_views=12, noise_rate=0.2, seed=55))
    recs = build_instances(res.scene)
    assert len(recs) == 5
    assert [r.id for r in recs] == [1, 2, 3, 4, 5]
    for rec in recs:
        got = set(rec.gaussians.tolist())
        ious = []
        for k in range(1, 6):
            gt = set(np.flatnonzero(res.gt_labels == k).tolist())
            ious.append(len(got & gt) / len(got | gt))
        assert max(ious) >= 0.9


def test_zero_masks_empty_result():
    res = generate(SynthSpec(n_instances=2, n_views=3, seed=8))
    for f in res.scene.frames:
        f.mask_map = np.zeros_like(f.mask_map)
    assert build_instances(res.scene) == []


def test_instance_label_array(synth_k3_noisy):
    res, *_ = synth_k3_noisy
    recs = build_instances(res.scene)
    labels = instance_label_array(recs, res.scene.n_gaussians)
    for rec in recs:
        assert (labels[rec.gaussians] == rec.id).all()
