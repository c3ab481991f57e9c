import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import level_pose
from mapfuse.errors import BehindCamera, FullyClipped
from mapfuse.geo_core import project_points
from mapfuse.localization import (
    BCL,
    Accumulator,
    CandidatePosition,
    LocalizationConfig,
    bcl_votes,
    bcls_for_corners,
    project_bcl,
    refine_position,
    sweep_range,
    top_peaks,
    vote,
)
from mapfuse.map_model import CornerPoint, Footprint, MapScene, visible_corners
from mapfuse.synthetic import SceneSpec, default_intrinsics, generate_scene, perturb_position

LC = LocalizationConfig()


def corner(x, y, g=0.0, bid="a"):
    return CornerPoint(bid, 0, float(x), float(y), g)


def exact_regions(scene, intr, pose, cfg=LC):
    """Region centers placed on the true projections of every visible BCL."""
    out = []
    for b in bcls_for_corners(visible_corners(scene, intr, pose), cfg):
        try:
            p = project_bcl(b, intr, pose)
        except (BehindCamera, FullyClipped):
            continue
        out.append(0.5 * (p.clip_a + p.clip_b))
    return np.array(out).reshape(-1, 2)


def cells_crossed(a, b, n):
    """Oracle: cells whose open square the segment ``a -> b`` passes through (brute force over the grid)."""
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    i, j = i.ravel().astype(float), j.ravel().astype(float)
    d = b - a
    lo, hi = np.zeros_like(i), np.ones_like(i)
    for comp, cmin in ((0, i), (1, j)):
        if d[comp] == 0:
            ok = (a[comp] > cmin) & (a[comp] < cmin + 1)
            lo = np.where(ok, lo, 1.0)
            hi = np.where(ok, hi, 0.0)
            continue
        t0 = (cmin - a[comp]) / d[comp]
        t1 = (cmin + 1 - a[comp]) / d[comp]
        lo = np.maximum(lo, np.minimum(t0, t1))
        hi = np.minimum(hi, np.maximum(t0, t1))
    hit = hi - lo > 1e-12
    return set(zip(i[hit].astype(int), j[hit].astype(int)))


# ---------------------------------------------------------------- projection and sweep


def test_bcl_geometry():
    b = BCL.at(corner(1, 2, 3.0), 15.0)
    assert b.top_elev - b.base_elev == 15.0
    assert b.base[:2] == pytest.approx(b.top[:2])


def test_bcl_straight_ahead_on_center_column(intr):
    p = project_bcl(BCL.at(corner(0, 10)), intr, level_pose())
    assert p.column == pytest.approx(intr.cx)
    assert abs(p.base_uv[0] - p.top_uv[0]) < 0.5


def test_bcl_pixel_height_similar_triangles(intr):
    p = project_bcl(BCL.at(corner(0, 30)), intr, level_pose())
    assert p.pixel_height == pytest.approx(500 * 15 / 30)


def test_bcl_errors(intr):
    with pytest.raises(BehindCamera):
        project_bcl(BCL.at(corner(0, -10)), intr, level_pose())
    with pytest.raises(FullyClipped):
        project_bcl(BCL.at(corner(100, 10)), intr, level_pose())


def test_bcl_clipped_to_image(intr):
    # very close corner: top leaves the frame
    p = project_bcl(BCL.at(corner(0, 4)), intr, level_pose())
    assert 0 <= p.clip_a[1] <= intr.height and 0 <= p.clip_b[1] <= intr.height
    assert p.top_uv[1] < 0


def test_sweep_range_examples():
    assert sweep_range(60, 500) == 50
    assert sweep_range(10, 500) == 300
    assert sweep_range(20, 500) == 2 * sweep_range(40, 500)
    assert sweep_range(1, 500, width=905) == 905
    with pytest.raises(ValueError):
        sweep_range(0, 500)


# ---------------------------------------------------------------- accumulator


def test_accumulator_centered():
    acc = Accumulator.centered((10.0, -4.0))
    assert acc.values.shape == (40, 40)
    assert acc.to_grid((10.0, -4.0)) == pytest.approx([20.0, 20.0])
    assert acc.cell_of((10.0, -4.0)) == (20, 20)
    assert acc.cell_center(0, 0) == pytest.approx([10 - 6 + 0.15, -4 - 6 + 0.15])
    assert len(acc.to_csv().splitlines()) == 40


def test_zero_regions_zero_votes(intr):
    acc = Accumulator.centered((0, 0))
    vote(acc, [BCL.at(corner(3, 20))], [], intr, level_pose().rotation, level_pose().position)
    assert not acc.values.any()
    assert top_peaks(acc) == []


def test_one_bcl_one_region_votes_on_its_lines(intr):
    pose = level_pose()
    b = BCL.at(corner(4, 25))
    p = project_bcl(b, intr, pose)
    centers = np.array([0.5 * (p.clip_a + p.clip_b) + [7.0, 0.0]])
    acc = Accumulator.centered(pose.position[:2])
    vote(acc, [b], centers, intr, pose.rotation, pose.position)
    _, w, dirs = bcl_votes(b, centers, intr, pose)
    assert len(w) > 0
    expected = set()
    for d in dirs:
        a = acc.to_grid(b.base[:2])
        expected |= cells_crossed(a, a - d * 200.0, acc.size)
    got = {(int(ix), int(iy)) for iy, ix in zip(*np.nonzero(acc.values))}
    assert got == expected
    # every one of those lines passes through the corner's map position
    for d in dirs:
        nrm = np.array([-d[1], d[0]])
        assert abs(nrm @ (b.base[:2] - b.base[:2])) == 0.0


@pytest.mark.parametrize("mode", ["sum", "max"])
@pytest.mark.parametrize("seed", range(3))
def test_vote_conservation(seed, mode):
    cfg = LocalizationConfig(vote_mode=mode)
    synth = generate_scene(SceneSpec(seed=seed, n_cameras=1))
    intr, truth = synth.intrinsics, synth.poses[0]
    init = perturb_position(truth, 4.0, seed)
    centers = exact_regions(synth.map, intr, truth)
    bcls = bcls_for_corners(visible_corners(synth.map, intr, init))
    acc = vote(Accumulator.centered(init.position[:2]), bcls, centers, intr, init.rotation, init.position, cfg)
    expected = np.zeros((40, 40))
    for b in bcls:
        try:
            _, w, dirs = bcl_votes(b, centers, intr, init, cfg)
        except (BehindCamera, FullyClipped):
            continue
        a = acc.to_grid(b.base[:2])
        per_bcl = np.zeros((40, 40))
        for wk, d in zip(w, dirs):
            for ix, iy in cells_crossed(a, a - d * 500.0, acc.size):
                per_bcl[iy, ix] = per_bcl[iy, ix] + wk if mode == "sum" else max(per_bcl[iy, ix], wk)
        expected += per_bcl
    assert acc.values.sum() == pytest.approx(expected.sum(), rel=1e-9)
    assert np.allclose(acc.values, expected, rtol=1e-9, atol=1e-12)
    assert (acc.values >= 0).all()


def test_max_mode_bounds_each_bcl_to_one_vote_per_cell(intr):
    pose = level_pose()
    b = BCL.at(corner(4, 25))
    p = project_bcl(b, intr, pose)
    centers = np.array([0.5 * (p.clip_a + p.clip_b)])
    acc = vote(Accumulator.centered(pose.position[:2]), [b], centers, intr, pose.rotation, pose.position)
    assert acc.values.max() <= 1.0 + 1e-12
    acc_sum = vote(Accumulator.centered(pose.position[:2]), [b], centers, intr, pose.rotation, pose.position, LocalizationConfig(vote_mode="sum"))
    assert acc_sum.values.max() > 1.0
    assert np.array_equal(acc.values > 0, acc_sum.values > 0)


def test_recovers_offset_position_with_exact_regions():
    synth = generate_scene(SceneSpec(seed=11, n_cameras=1))
    intr, truth = synth.intrinsics, synth.poses[0]
    init = truth.with_position_xy(truth.position[0] - 3.0, truth.position[1] - 2.0)
    centers = exact_regions(synth.map, intr, truth)
    bcls = bcls_for_corners(visible_corners(synth.map, intr, init))
    acc = vote(Accumulator.centered(init.position[:2]), bcls, centers, intr, init.rotation, init.position)
    iy, ix = np.unravel_index(np.argmax(acc.values), acc.values.shape)
    assert (ix, iy) == acc.cell_of(truth.position[:2])


def _exact_region_runs(n_scenes=24):
    out = []
    for seed in range(n_scenes):
        synth = generate_scene(SceneSpec(seed=100 + seed, n_cameras=1))
        intr, truth = synth.intrinsics, synth.poses[0]
        init = perturb_position(truth, 5.0, seed)
        bcls = bcls_for_corners(visible_corners(synth.map, intr, init))
        if len(bcls) < 4:
            continue
        centers = exact_regions(synth.map, intr, truth)
        acc = vote(Accumulator.centered(init.position[:2]), bcls, centers, intr, init.rotation, init.position)
        out.append((acc, top_peaks(acc), truth.position[:2]))
    return out


def test_zero_noise_identifiability_over_scenes():
    runs = _exact_region_runs()
    assert len(runs) >= 20
    hits = sum(bool(peaks) and peaks[0].cell == acc.cell_of(truth) for acc, peaks, truth in runs)
    print(f"top-1 cell contains the true position in {hits}/{len(runs)} scenes")
    assert hits == len(runs)


def test_exact_regions_recover_within_one_and_a_half_cells():
    runs = _exact_region_runs()
    errs = [np.hypot(peaks[0].x - truth[0], peaks[0].y - truth[1]) for acc, peaks, truth in runs]
    assert max(errs) <= 0.45


def test_translation_covariance():
    synth = generate_scene(SceneSpec(seed=5, n_cameras=1))
    intr, truth = synth.intrinsics, synth.poses[0]
    init = perturb_position(truth, 4.0, 5)
    off = np.array([37.5, -120.25])
    moved = MapScene.build([Footprint(fp.id, fp.ring + off, fp.ground_elev) for fp in synth.map.footprints])
    res = []
    for scene, t, i in (
        (synth.map, truth, init),
        (moved, truth.with_position_xy(*(truth.position[:2] + off)), init.with_position_xy(*(init.position[:2] + off))),
    ):
        centers = exact_regions(scene, intr, t)
        bcls = bcls_for_corners(visible_corners(scene, intr, i))
        acc = vote(Accumulator.centered(i.position[:2]), bcls, centers, intr, i.rotation, i.position)
        res.append(np.unravel_index(np.argmax(acc.values), acc.values.shape))
    assert res[0] == res[1]


# ---------------------------------------------------------------- peaks


def bump(acc, ix, iy, height, sigma=1.5):
    j, i = np.mgrid[0 : acc.size, 0 : acc.size]
    acc.values += height * np.exp(-((i - ix) ** 2 + (j - iy) ** 2) / (2 * sigma**2))


def test_single_bump():
    acc = Accumulator.centered((0, 0))
    bump(acc, 12, 30, 4.0)
    (p,) = top_peaks(acc)
    assert p.cell == (12, 30)
    assert p.peak_value == pytest.approx(4.0)
    assert (p.x, p.y) == pytest.approx(tuple(acc.cell_center(12, 30)))


def test_flat_below_threshold():
    acc = Accumulator.centered((0, 0))
    acc.values[:] = 1.0
    assert top_peaks(acc) == []


def test_two_bumps_ordered():
    acc = Accumulator.centered((0, 0))
    bump(acc, 8, 8, 3.0)
    bump(acc, 30, 25, 5.0)
    peaks = top_peaks(acc)
    assert [p.cell for p in peaks] == [(30, 25), (8, 8)]
    assert peaks[0].peak_value > peaks[1].peak_value


def test_plateau_yields_one_peak():
    acc = Accumulator.centered((0, 0))
    acc.values[10, 10:12] = 2.0
    peaks = top_peaks(acc)
    assert len(peaks) == 1


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.floats(0.0, 3.0))
def test_peaks_properties(seed, k, thr):
    rng = np.random.default_rng(seed)
    acc = Accumulator.centered((0, 0))
    acc.values[:] = rng.gamma(1.0, 1.0, (40, 40))
    peaks = top_peaks(acc, k, thr)
    assert len(peaks) <= k
    vals = [p.peak_value for p in peaks]
    assert vals == sorted(vals, reverse=True)
    for a in range(len(peaks)):
        assert peaks[a].peak_value >= thr and peaks[a].peak_value > 0
        ix, iy = peaks[a].cell
        assert acc.values[iy, ix] == acc.values[max(iy - 1, 0) : iy + 2, max(ix - 1, 0) : ix + 2].max()
        for b in range(a):
            assert max(abs(peaks[a].cell[0] - peaks[b].cell[0]), abs(peaks[a].cell[1] - peaks[b].cell[1])) > 1


# ---------------------------------------------------------------- fallback


def test_refine_position_fallback():
    init = np.array([1.0, 2.0, 2.5])
    pos, fb = refine_position([], init)
    assert fb and np.array_equal(pos, init)
    pos, fb = refine_position([CandidatePosition(4.0, 5.0, 3.0, (0, 0))], init)
    assert not fb and pos.tolist() == [4.0, 5.0, 2.5]


def test_config_validation():
    with pytest.raises(ValueError):
        LocalizationConfig(grid_size=2)
    with pytest.raises(ValueError):
        LocalizationConfig(bcl_length=0)
    with pytest.raises(ValueError):
        LocalizationConfig(vote_mode="mean")
    assert (LC.grid_size, LC.cell_size, LC.top_k, LC.peak_threshold, LC.bcl_length, LC.kernel_sigma) == (40, 0.3, 5, 1.5, 15.0, 10.0)
