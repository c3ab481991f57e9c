import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import mapfuse.height_estimation as he
from conftest import level_pose
from mapfuse.errors import EmptyProjection, NoVisibleEdges, OutOfRange
from mapfuse.height_estimation import (
    HeightEstimate,
    HeightScanConfig,
    HeightVoteArray,
    JointConfig,
    estimate_all,
    estimate_height_single,
    joint_localize_estimate,
    polyline_score,
    scan_polylines,
)
from mapfuse.image_features import EdgenessField, SpectralHistogramConfig, edgeness_field
from mapfuse.localization import LocalizationConfig, localize
from mapfuse.image_features import line_support_regions
from mapfuse.map_model import Footprint, MapScene, visible_edges
from mapfuse.synthetic import (
    SceneSpec,
    default_intrinsics,
    generate_scene,
    perturb_position,
    render_scene,
    render_view,
    truth_mask,
    unobstructed_roofline,
)

INTR = default_intrinsics()
POSE = level_pose(0, 0, 2.5, heading=5)


def box(x0, y0, x1, y1):
    return [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]


def rendered(footprints, heights, colors, pose=POSE):
    scene = MapScene.build(footprints)
    img = render_scene(scene, heights, INTR, pose, colors)
    return scene, img, edgeness_field(img), visible_edges(scene, INTR, pose)


@pytest.fixture(scope="module")
def single_12m():
    return rendered([Footprint("a", box(-6, 25, 6, 33))], {"a": 12.0}, {"a": (150, 60, 50)})


def test_scan_config_defaults():
    cfg = HeightScanConfig()
    assert (cfg.min_height, cfg.max_height, cfg.step, cfg.low_score_threshold) == (3.0, 100.0, 0.2, 0.15)
    hs = cfg.heights
    assert len(hs) == 486 and hs[0] == 3.0 and hs[-1] == pytest.approx(100.0)
    with pytest.raises(ValueError):
        HeightScanConfig(min_height=10, max_height=5)
    with pytest.raises(ValueError):
        HeightScanConfig(step=0)


def test_zero_field_scores_zero(single_12m):
    _, img, _, edges = single_12m
    zero = EdgenessField(np.zeros(img.shape[:2]), SpectralHistogramConfig())
    sums, counts = scan_polylines(edges, np.arange(3, 30, 0.2), zero.scores, INTR, POSE)
    assert (sums == 0).all() and (counts[:40] > 0).all()
    est = estimate_height_single("a", edges, zero, INTR, POSE)
    assert est.rejected and est.score == 0.0


def test_twelve_metre_roofline(single_12m):
    _, _, field, edges = single_12m
    hs = HeightScanConfig(max_height=18.0).heights
    scores = [polyline_score(edges, h, field, INTR, POSE)[0] for h in hs]
    assert hs[int(np.argmax(scores))] == pytest.approx(12.0, abs=0.2 + 1e-9)
    est = estimate_height_single("a", edges, field, INTR, POSE)
    assert not est.rejected
    assert est.height == pytest.approx(12.0, abs=0.2 + 1e-9)


def test_scan_matches_per_elevation_scores(single_12m):
    _, _, field, edges = single_12m
    els = np.array([5.0, 9.4, 12.0, 16.6])
    sums, counts = scan_polylines(edges, els, field.scores, INTR, POSE)
    for e, s, c in zip(els, sums, counts):
        score, n = polyline_score(edges, e, field, INTR, POSE)
        assert n == c and score == pytest.approx(s / c)
        raw, _ = polyline_score(edges, e, field, INTR, POSE, normalize=False)
        assert raw == pytest.approx(s)


def test_off_image_polyline_raises(single_12m):
    _, _, field, edges = single_12m
    behind = level_pose(0, 0, 2.5, heading=185)
    with pytest.raises(EmptyProjection):
        polyline_score(edges, 12.0, field, INTR, behind)


def test_no_visible_edges(single_12m):
    _, _, field, edges = single_12m
    with pytest.raises(NoVisibleEdges):
        estimate_height_single("zzz", edges, field, INTR, POSE)


def test_truncated_roofline_rejected():
    # a 40 m facade 6 m away: the roofline is far above the frame
    _, _, field, edges = rendered([Footprint("a", box(-15, 6, 15, 12))], {"a": 40.0}, {"a": (150, 60, 50)})
    est = estimate_height_single("a", edges, field, INTR, POSE)
    assert est.rejected


def test_foreground_roofline_beats_taller_background():
    fps = [Footprint("f", box(-8, 30, 8, 36)), Footprint("b", box(-14, 45, 14, 53))]
    _, _, field, edges = rendered(fps, {"f": 10.0, "b": 25.0}, {"f": (200, 40, 40), "b": (120, 150, 190)})
    est = estimate_height_single("f", edges, field, INTR, POSE)
    # the background roofline is seen by the foreground polyline near 17.5 m
    hs = est.heights
    k = int(np.argmin(np.abs(hs - 17.5)))
    second = est.scores[k - 3 : k + 4].max()
    assert second > 0.5 * est.score
    assert est.height == pytest.approx(10.0, abs=0.2 + 1e-9)
    assert est.score > second


def test_constant_facade_is_rejected():
    img = np.full((640, 905, 3), (150, 60, 50), np.uint8)
    field = edgeness_field(img)
    scene = MapScene.build([Footprint("a", box(-6, 25, 6, 33))])
    est = estimate_height_single("a", visible_edges(scene, INTR, POSE), field, INTR, POSE)
    assert est.rejected and est.score == pytest.approx(0.0)


def test_step_halving_consistency(single_12m):
    _, _, field, edges = single_12m
    coarse = estimate_height_single("a", edges, field, INTR, POSE, HeightScanConfig(step=0.2))
    fine = estimate_height_single("a", edges, field, INTR, POSE, HeightScanConfig(step=0.1))
    assert abs(coarse.height - fine.height) <= 0.2 + 1e-9


@pytest.mark.parametrize("seed", range(3))
def test_step_halving_on_scenes(seed):
    synth = generate_scene(SceneSpec(seed=seed, n_cameras=1))
    pose = synth.poses[0]
    field = edgeness_field(render_view(synth, 0))
    edges = visible_edges(synth.map, synth.intrinsics, pose)
    for bid in sorted({e.building_id for e in edges}):
        a = estimate_height_single(bid, edges, field, synth.intrinsics, pose, HeightScanConfig(step=0.2))
        b = estimate_height_single(bid, edges, field, synth.intrinsics, pose, HeightScanConfig(step=0.1))
        if a.height is None or a.score < 0.15:
            continue
        assert abs(a.height - b.height) <= 0.2 + 1e-9, bid


# ---------------------------------------------------------------- votes


def est(h, rejected=False, score=1.0):
    return HeightEstimate("a", h, score, rejected)


def test_accumulate_examples():
    v = HeightVoteArray("a")
    v.accumulate(est(12.0))
    assert v.counts[v.bin_of(12.0)] == 1 and v.n_votes == 1
    before = v.counts.copy()
    v.accumulate(est(30.0, rejected=True))
    assert np.array_equal(v.counts, before)
    assert v.n_views_seen == 2
    with pytest.raises(OutOfRange):
        v.accumulate(est(2.0))
    with pytest.raises(OutOfRange):
        v.accumulate(est(100.4))


def test_finalize_argmax_and_ties():
    v = HeightVoteArray("a")
    for h in (10.0, 10.0, 10.0, 12.0):
        v.accumulate(est(h))
    assert v.finalize() == pytest.approx(10.0)
    t = HeightVoteArray("a")
    for h in (14.0, 9.0):
        t.accumulate(est(h))
    assert t.finalize() == pytest.approx(9.0)
    assert HeightVoteArray("a").finalize() is None


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 485), min_size=1, max_size=40))
def test_vote_idempotence(bins):
    cfg = HeightScanConfig()
    once, twice = HeightVoteArray("a"), HeightVoteArray("a")
    for b in bins:
        once.accumulate(est(float(cfg.heights[b])))
    for _ in range(2):
        for b in bins:
            twice.accumulate(est(float(cfg.heights[b])))
    assert np.array_equal(twice.counts, 2 * once.counts)
    assert twice.finalize() == once.finalize()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.integers(0, 485), max_size=10), min_size=1, max_size=6), st.randoms())
def test_merge_order_independent(groups, rnd):
    cfg = HeightScanConfig()
    parts = []
    for g in groups:
        v = HeightVoteArray("a")
        for b in g:
            v.accumulate(est(float(cfg.heights[b])))
        parts.append(v)
    a, b = HeightVoteArray("a"), HeightVoteArray("a")
    for p in parts:
        a.merge(p)
    shuffled = list(parts)
    rnd.shuffle(shuffled)
    for p in shuffled:
        b.merge(p)
    assert np.array_equal(a.counts, b.counts) and a.finalize() == b.finalize()


# ---------------------------------------------------------------- joint estimation


def test_no_refine_uses_initial_pose(easy_scene):
    img = render_view(easy_scene, 0)
    pose = perturb_position(easy_scene.poses[0], 4.0, 1)
    res = joint_localize_estimate(img, easy_scene.map, easy_scene.intrinsics, pose, refine=False)
    assert res.fallback and res.accumulator is None
    assert np.array_equal(res.position, pose.position)
    assert len(res.candidates) == 1


def test_fallback_without_regions(easy_scene):
    # a featureless photo has no line support regions, so no peak can pass
    img = np.full((640, 905, 3), 128, np.uint8)
    pose = easy_scene.poses[0]
    res = joint_localize_estimate(img, easy_scene.map, easy_scene.intrinsics, pose)
    assert res.fallback and res.n_regions == 0
    assert not res.accumulator.values.any()
    assert np.array_equal(res.position, pose.position)


def test_top_k_one_reduces_to_single_estimate(easy_scene):
    img = render_view(easy_scene, 0)
    intr = easy_scene.intrinsics
    pose = perturb_position(easy_scene.poses[0], 4.0, 2)
    cfg = JointConfig(localization=LocalizationConfig(top_k=1))
    res = joint_localize_estimate(img, easy_scene.map, intr, pose, cfg)
    _, peaks = localize(easy_scene.map, line_support_regions(img), intr, pose, cfg.localization)
    assert len(res.candidates) == 1 and res.chosen == 0
    assert res.position[:2] == pytest.approx([peaks[0].x, peaks[0].y])
    estimates, S = estimate_all(easy_scene.map, edgeness_field(img), intr, pose.with_position_xy(peaks[0].x, peaks[0].y))
    assert res.candidates[0].S == pytest.approx(S)
    assert {b: e.height for b, e in estimates.items()} == {b: e.height for b, e in res.estimates.items()}


def test_ties_in_S_go_to_the_higher_peak(easy_scene, monkeypatch):
    monkeypatch.setattr(he, "estimate_all", lambda *a, **k: ({}, 1.0))
    img = render_view(easy_scene, 0)
    pose = perturb_position(easy_scene.poses[0], 4.0, 3)
    res = joint_localize_estimate(img, easy_scene.map, easy_scene.intrinsics, pose)
    assert len(res.candidates) > 1
    assert res.chosen == 0
    peaks = [c.peak_value for c in res.candidates]
    assert peaks == sorted(peaks, reverse=True)


def test_diagnostics_content(easy_scene):
    img = render_view(easy_scene, 1)
    res = joint_localize_estimate(img, easy_scene.map, easy_scene.intrinsics, easy_scene.poses[1])
    d = res.diagnostics(include_curves=True)
    assert set(d) >= {"position", "fallback_to_initial", "candidates", "buildings", "chosen_candidate"}
    assert all("S" in c and "peak_value" in c for c in d["candidates"])
    some = next(iter(d["buildings"].values()))
    assert len(some["scan_curve"]) == 486


@pytest.mark.parametrize("seed", range(5))
def test_joint_recovery_with_noise(seed):
    synth = generate_scene(SceneSpec(seed=200 + seed, n_cameras=1))
    truth = synth.poses[0]
    pose = perturb_position(truth, 4.0, seed)
    img = render_view(synth, 0)
    res = joint_localize_estimate(img, synth.map, synth.intrinsics, pose)
    assert np.hypot(*(res.position[:2] - truth.position[:2])) <= 0.3 + 0.15 * np.sqrt(2)
    # heights are only recoverable where the roofline is actually in view
    labels = truth_mask(synth, 0)
    edges = visible_edges(synth.map, synth.intrinsics, truth)
    clear = [b for b in res.estimates if unobstructed_roofline(synth, 0, b, edges, labels)]
    assert clear
    for b in clear:
        assert res.estimates[b].height == pytest.approx(synth.heights[b], abs=0.2 + 1e-9), b


def test_candidate_dominance_over_scenes():
    wins = total = 0
    for seed in range(20):
        synth = generate_scene(SceneSpec(seed=seed, n_cameras=1))
        pose = synth.poses[0]
        field = edgeness_field(render_view(synth, 0))
        _, S0 = estimate_all(synth.map, field, synth.intrinsics, pose)
        for ang in np.arange(8) * np.pi / 4:
            shifted = pose.with_position_xy(pose.position[0] + 0.6 * np.cos(ang), pose.position[1] + 0.6 * np.sin(ang))
            _, S = estimate_all(synth.map, field, synth.intrinsics, shifted)
            wins += S0 >= S
            total += 1
    print(f"true-position S dominates in {wins}/{total} shifted candidates")
    assert wins == total
