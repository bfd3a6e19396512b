"""Tests for visitation maps, weighted overlap, and evaluation tables."""

import math

import numpy as np
import pytest

from cnatlas.apply import CN_LABELS, IdentificationResult
from cnatlas.core import (
    AffineTransform,
    Nerve,
    Space,
    Streamline,
    Tractogram,
    _dense_sample,
)
from cnatlas.errors import (
    ArityError,
    EmptyInputError,
    GridMismatchError,
    InvalidConfigError,
    InvalidGeometryError,
)
from cnatlas.metrics import (
    GridSpec,
    VisitationMap,
    identification_table,
    select_ground_truth,
    voxelize_bundle,
    wdice,
)
from cnatlas.pipeline import ClusterLabel
from phantoms import box_mask, make_subject, phantom_rois


def line(x0, x1, y=0.5, z=0.5, n=2, id=0):
    pts = np.linspace([x0, y, z], [x1, y, z], n)
    return Streamline(pts, id=id)


def tract(*fibers):
    renumbered = tuple(Streamline(s.points, id=i) for i, s in enumerate(fibers))
    return Tractogram(renumbered, space=Space.ATLAS)


def unit_grid(dims):
    return GridSpec(dims, AffineTransform.identity())


def subdivide(points):
    mids = (points[:-1] + points[1:]) / 2.0
    out = np.empty((len(points) + len(mids), 3))
    out[0::2] = points
    out[1::2] = mids
    return out


def wiggle_tract(seed, n_fibers=20, spread=40.0):
    rng = np.random.default_rng(seed)
    fibers = []
    for i in range(n_fibers):
        steps = rng.normal(scale=2.0, size=(18, 3))
        pts = np.cumsum(steps, axis=0) + rng.uniform(0.0, spread, size=3)
        fibers.append(Streamline(pts, id=i))
    return tract(*fibers)


def fake_result(identified):
    bundles = {l: Tractogram((), subject_id="s", space=Space.SUBJECT) for l in CN_LABELS}
    counts = {l: (1 if l in identified else 0) for l in CN_LABELS}
    flags = {l: l in identified for l in CN_LABELS}
    return IdentificationResult(
        bundles=bundles,
        counts=counts,
        identified=flags,
        transform=AffineTransform.identity(),
        low_confidence_count=0,
    )


# ---------------------------------------------------------------------------
# grids and visitation maps


def test_grid_covering_bounds_and_affine():
    t = tract(line(0.0, 10.0, y=0.0, z=0.0), line(2.0, 7.0, y=10.0, z=4.0))
    g = GridSpec.covering([t], voxel_mm=1.0, pad_mm=2.0)
    np.testing.assert_allclose(g.voxel_to_world.translation, [-2.0, -2.0, -2.0])
    assert g.dims == (14, 14, 8)
    np.testing.assert_allclose(g.voxel_edges_mm, [1.0, 1.0, 1.0])


def test_grid_covering_validation():
    t = tract(line(0.0, 10.0))
    with pytest.raises(InvalidConfigError):
        GridSpec.covering([t], voxel_mm=0.0)
    with pytest.raises(EmptyInputError):
        GridSpec.covering([tract()])
    with pytest.raises(InvalidGeometryError):
        GridSpec((0, 5, 5), AffineTransform.identity())


def test_grid_from_mask_copies_geometry():
    m = box_mask([2.0, 4.0, 6.0], [10.0, 12.0, 14.0], voxel_mm=2.0)
    g = GridSpec.from_mask(m)
    assert g.dims == m.dims
    np.testing.assert_array_equal(g.voxel_to_world.matrix, m.voxel_to_world.matrix)


def test_voxelize_straight_fiber_hits_analytic_ray():
    """One axis-aligned fiber visits exactly the voxels its span covers."""
    m = voxelize_bundle(tract(line(0.2, 9.8)), unit_grid((12, 2, 2)))
    expected = np.zeros((12, 2, 2), dtype=np.int64)
    expected[0:10, 0, 0] = 1
    np.testing.assert_array_equal(m.counts, expected)


def test_voxelize_counts_each_fiber_once_per_voxel():
    back_and_forth = Streamline(
        np.array([[0.2, 0.5, 0.5], [9.8, 0.5, 0.5], [0.2, 0.5, 0.5]]), id=0
    )
    m = voxelize_bundle(tract(back_and_forth), unit_grid((12, 2, 2)))
    assert m.counts.max() == 1
    assert m.counts.sum() == 10


def test_voxelize_duplicate_fiber_doubles_counts_not_weights():
    g = unit_grid((12, 2, 2))
    one = voxelize_bundle(tract(line(0.2, 9.8)), g)
    two = voxelize_bundle(tract(line(0.2, 9.8, id=0), line(0.2, 9.8, id=1)), g)
    np.testing.assert_array_equal(two.counts, 2 * one.counts)
    np.testing.assert_allclose(two.weights, one.weights)


def test_voxelize_empty_bundle_gives_zero_map():
    m = voxelize_bundle(tract(), unit_grid((4, 4, 4)))
    assert m.counts.sum() == 0
    assert m.weights.sum() == 0.0


def test_voxelize_ignores_out_of_grid_geometry():
    m = voxelize_bundle(tract(line(50.0, 80.0)), unit_grid((4, 4, 4)))
    assert m.counts.sum() == 0


def test_voxelize_order_invariant():
    t = wiggle_tract(seed=5)
    g = GridSpec.covering([t], voxel_mm=2.0)
    fwd = voxelize_bundle(t, g)
    rev = voxelize_bundle(tract(*reversed(list(t))), g)
    np.testing.assert_array_equal(fwd.counts, rev.counts)


def test_voxelize_invariant_to_point_densification():
    for seed in range(5):
        t = wiggle_tract(seed=seed)
        doubled = tract(*(Streamline(subdivide(s.points), id=s.id) for s in t))
        g = GridSpec.covering([t], voxel_mm=2.0)
        np.testing.assert_array_equal(
            voxelize_bundle(t, g).counts, voxelize_bundle(doubled, g).counts
        )


def test_weights_normalized_over_visits():
    for seed in range(4):
        t = wiggle_tract(seed=10 + seed)
        m = voxelize_bundle(t, GridSpec.covering([t], voxel_mm=2.0))
        assert (m.weights >= 0).all()
        assert m.weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_visitation_map_shape_checked():
    with pytest.raises(GridMismatchError):
        VisitationMap(grid=unit_grid((3, 3, 3)), counts=np.zeros((2, 3, 3)))


# ---------------------------------------------------------------------------
# weighted Dice


def test_wdice_identical_map_is_exactly_one():
    t = wiggle_tract(seed=2)
    m = voxelize_bundle(t, GridSpec.covering([t], voxel_mm=2.0))
    assert wdice(m, m) == 1.0


def test_wdice_disjoint_supports_zero():
    g = unit_grid((20, 2, 2))
    a = voxelize_bundle(tract(line(0.2, 4.8)), g)
    b = voxelize_bundle(tract(line(10.2, 14.8)), g)
    assert wdice(a, b) == 0.0


def test_wdice_half_overlap_matches_plain_dice():
    """Uniform equal-size supports overlapping by half score exactly 0.5."""
    g = unit_grid((15, 2, 2))
    a = voxelize_bundle(tract(line(0.1, 9.9)), g)
    b = voxelize_bundle(tract(line(5.1, 14.9)), g)
    assert int((a.counts > 0).sum()) == 10
    assert int((b.counts > 0).sum()) == 10
    assert int(((a.counts > 0) & (b.counts > 0)).sum()) == 5
    assert wdice(a, b) == pytest.approx(0.5, abs=1e-12)


def test_wdice_one_when_supports_coincide_despite_weights():
    g = unit_grid((12, 2, 2))
    a = voxelize_bundle(tract(line(0.2, 9.8)), g)
    lopsided = voxelize_bundle(tract(line(0.2, 9.8, id=0), line(0.2, 4.8, id=1)), g)
    assert not np.allclose(a.weights, lopsided.weights)
    assert wdice(a, lopsided) == 1.0
    shifted = voxelize_bundle(tract(line(1.2, 10.8)), g)
    assert wdice(a, shifted) < 1.0


def test_wdice_empty_maps():
    g = unit_grid((4, 4, 4))
    e1 = voxelize_bundle(tract(), g)
    e2 = voxelize_bundle(tract(), g)
    full = voxelize_bundle(tract(line(0.5, 3.5)), g)
    assert wdice(e1, e2) == 1.0
    assert wdice(e1, full) == 0.0


def test_wdice_symmetric_and_bounded():
    g = None
    for seed in range(12):
        ta = wiggle_tract(seed=100 + seed)
        tb = wiggle_tract(seed=200 + seed)
        if g is None:
            g = GridSpec.covering([ta, tb], voxel_mm=2.5, pad_mm=60.0)
        a = voxelize_bundle(ta, g)
        b = voxelize_bundle(tb, g)
        s = wdice(a, b)
        assert s == wdice(b, a)
        assert 0.0 <= s <= 1.0


def test_wdice_grid_mismatch_raises():
    a = voxelize_bundle(tract(line(0.2, 3.8)), unit_grid((5, 2, 2)))
    b = voxelize_bundle(tract(line(0.2, 3.8)), unit_grid((6, 2, 2)))
    with pytest.raises(GridMismatchError):
        wdice(a, b)
    shifted = GridSpec((5, 2, 2), AffineTransform.from_parts(np.eye(3), [0.5, 0.0, 0.0]))
    c = voxelize_bundle(tract(line(0.2, 3.8)), shifted)
    with pytest.raises(GridMismatchError):
        wdice(a, c)


# ---------------------------------------------------------------------------
# ground-truth selection


def test_select_requires_rois():
    t = tract(line(0.0, 10.0))
    with pytest.raises(InvalidConfigError):
        select_ground_truth(t, [])


def test_select_roi_roa_semantics():
    roi_a = box_mask([0.0, 0.0, 0.0], [2.0, 2.0, 2.0], voxel_mm=1.0)
    roi_b = box_mask([8.0, 0.0, 0.0], [10.0, 2.0, 2.0], voxel_mm=1.0)
    roa = box_mask([4.0, 0.0, 0.0], [6.0, 2.0, 2.0], voxel_mm=1.0)
    through = line(0.5, 9.5, y=1.0, z=1.0, id=0)
    detour = Streamline(
        np.array([[0.5, 1.0, 1.0], [2.5, 8.0, 1.0], [7.5, 8.0, 1.0], [9.5, 1.0, 1.0]]), id=1
    )
    half = line(0.5, 3.0, y=1.0, z=1.0, id=2)
    t = tract(through, detour, half)
    kept = select_ground_truth(t, [roi_a, roi_b], [roa])
    assert [s.id for s in kept] == [1]
    kept_no_roa = select_ground_truth(t, [roi_a, roi_b])
    assert [s.id for s in kept_no_roa] == [0, 1]


def test_select_matches_fine_sampled_membership():
    """Selection at the default step equals brute-force fine sampling."""
    for seed in range(3):
        t, _ = make_subject(seed=300 + seed, subject_id="s", fibers_per_bundle=40, junk_fraction=0.15)
        for nerve, masks in phantom_rois().items():
            got = {s.id for s in select_ground_truth(t, masks)}
            want = set()
            for s in t:
                pts = _dense_sample(s.points, 0.05)
                if all(m.contains(pts).any() for m in masks):
                    want.add(s.id)
            assert got == want


def test_select_monotone_in_masks():
    for seed in range(3):
        t, _ = make_subject(seed=400 + seed, subject_id="s", fibers_per_bundle=30, junk_fraction=0.2)
        rois = phantom_rois()[Nerve.CN_II]
        roa = box_mask([20.0, -10.0, -10.0], [40.0, 20.0, 20.0], voxel_mm=4.0)
        base = {s.id for s in select_ground_truth(t, rois[:1])}
        more_roi = {s.id for s in select_ground_truth(t, rois)}
        with_roa = {s.id for s in select_ground_truth(t, rois, [roa])}
        assert more_roi <= base
        assert with_roa <= more_roi


# ---------------------------------------------------------------------------
# identification table


def test_table_unsuccessful_stratum_cell():
    """8 automated successes over 10 manual failures renders as 8/10."""
    label = ClusterLabel.CN_II_D
    results = [fake_result({label} if i < 8 else set()) for i in range(10)]
    truth = [{label: False} for _ in range(10)]
    report = identification_table(results, truth)
    assert report.strata[label]["unsuccessful"] == (8, 10)
    assert report.strata[label]["successful"] == (0, 0)
    text = report.to_text()
    assert "8/10" in text
    assert "0/10" in text
    assert "identification,CN II-D,unsuccessful,8,0,10,,," in report.to_csv().splitlines()


def test_table_all_success_fixture():
    labels = set(CN_LABELS)
    results = [fake_result(labels) for _ in range(6)]
    truth = [{l: True for l in CN_LABELS} for _ in range(6)]
    report = identification_table(results, truth)
    for label in CN_LABELS:
        assert report.strata[label]["successful"] == (6, 6)
        assert report.strata[label]["unsuccessful"] == (0, 0)
    assert report.to_text().count("6/6") >= len(CN_LABELS)


def test_table_wdice_pooling_and_layout():
    results = [fake_result({ClusterLabel.CN_II_D}), fake_result({ClusterLabel.CN_II_N})]
    truth = [
        {ClusterLabel.CN_II_D: True, ClusterLabel.CN_II_N: True},
        {ClusterLabel.CN_II_D: True, ClusterLabel.CN_II_N: True},
    ]
    scores = [{ClusterLabel.CN_II_D: 0.7}, {ClusterLabel.CN_II_N: 0.8}]
    report = identification_table(results, truth, scores)
    mean, std, n = report.wdice_by_nerve[Nerve.CN_II]
    assert (mean, n) == (0.75, 2)
    assert std == pytest.approx(0.05, abs=1e-12)
    assert "0.7500±0.0500" in report.to_text()
    assert report.wdice_overall[2] == 2
    assert Nerve.CN_V not in report.wdice_by_nerve


def test_table_wdice_matches_independent_statistics():
    rng = np.random.default_rng(9)
    for _ in range(5):
        n = int(rng.integers(3, 12))
        values = rng.uniform(0.3, 1.0, size=n)
        results = [fake_result({ClusterLabel.CN_V_L}) for _ in range(n)]
        truth = [{ClusterLabel.CN_V_L: True} for _ in range(n)]
        scores = [{ClusterLabel.CN_V_L: float(v)} for v in values]
        report = identification_table(results, truth, scores)
        mean, std, count = report.wdice_by_nerve[Nerve.CN_V]
        want_mean = sum(values) / n
        want_std = math.sqrt(sum((v - want_mean) ** 2 for v in values) / n)
        assert count == n
        assert abs(mean - want_mean) < 1e-12
        assert abs(std - want_std) < 1e-12


def test_table_wdice_stratum_filter():
    results = [fake_result({ClusterLabel.CN_V_L})] * 2
    truth = [{ClusterLabel.CN_V_L: True}, {ClusterLabel.CN_V_L: False}]
    scores = [{ClusterLabel.CN_V_L: 0.9}, {ClusterLabel.CN_V_L: 0.1}]
    only_good = identification_table(results, truth, scores)
    assert only_good.wdice_by_nerve[Nerve.CN_V] == (0.9, 0.0, 1)
    everything = identification_table(results, truth, scores, wdice_stratum="all")
    assert everything.wdice_by_nerve[Nerve.CN_V][2] == 2
    with pytest.raises(InvalidConfigError):
        identification_table(results, truth, scores, wdice_stratum="best")


def test_table_misaligned_inputs_raise():
    results = [fake_result(set())] * 3
    truth = [{}] * 2
    with pytest.raises(ArityError):
        identification_table(results, truth)
    with pytest.raises(ArityError):
        identification_table(results, [{}] * 3, wdice_scores=[{}] * 2)
