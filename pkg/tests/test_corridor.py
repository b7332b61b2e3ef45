import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import hull_distance, sampled_box_distance, sampled_corners, straight_track, turning_track
from store3d.corridor import (
    AgentTrack,
    RelevanceConfig,
    calibrate_dmin,
    covered_end,
    empirical_cdf,
    label_dataset,
    labels_from_records,
    labels_to_records,
    nearest_rank,
    relevance_label,
    swept_corridor,
)
from store3d.data import SyntheticSpec, crossing_scenario, gen_synthetic
from store3d.errors import EmptyDistribution, InsufficientTrack
from store3d.geometry import OrientedBoxBEV, Point2, polygon_distance

CFG = RelevanceConfig()


def test_nearest_rank_fixtures():
    vals = [5.0, 1.0, 4.0, 2.0, 3.0, 6.0, 7.0, 8.0, 9.0, 10.0]
    assert nearest_rank(vals, 0.10) == 1.0
    assert nearest_rank(vals, 0.11) == 2.0
    assert nearest_rank(vals, 1.0) == 10.0
    with pytest.raises(EmptyDistribution):
        nearest_rank([], 0.1)


def test_empirical_cdf_merges_ties():
    assert empirical_cdf([2.0, 1.0, 2.0, 3.0]) == [(1.0, 0.25), (2.0, 0.75), (3.0, 1.0)]


def test_stationary_agent_corridor_is_its_box():
    tr = straight_track("a", 3.0, -1.0, 0.4, 0.0, 4.0, 2.0)
    poly = swept_corridor(tr, 0.0, CFG)
    assert poly.area() == pytest.approx(8.0)


def test_straight_corridor_area_is_swept_rectangle():
    # axis-aligned box moving along its length: area = w * (l + v H)
    tr = straight_track("a", 0.0, 0.0, 0.0, 2.0, 4.0, 2.0)
    assert swept_corridor(tr, 0.0, CFG).area() == pytest.approx(2.0 * (4.0 + 2.0 * 5.0))


def test_short_track_is_truncated_or_rejected():
    tr = straight_track("a", 0.0, 0.0, 0.0, 1.0, 4.0, 2.0, duration=3.0)
    assert covered_end(tr, 0.0, CFG) == pytest.approx(3.0)
    with pytest.raises(InsufficientTrack):
        covered_end(tr, 2.5, CFG)
    with pytest.raises(InsufficientTrack):
        covered_end(tr, -1.0, CFG)


def test_yaw_interpolates_along_shortest_arc():
    a = OrientedBoxBEV(Point2(0, 0), math.pi - 0.1, 2.0, 1.0)
    b = OrientedBoxBEV(Point2(0, 0), -math.pi + 0.1, 2.0, 1.0)
    tr = AgentTrack("a", "car", [0.0, 1.0], [a, b])
    assert abs(abs(tr.box_at(0.5).yaw) - math.pi) < 1e-9


@settings(max_examples=40, deadline=None)
@given(
    st.floats(-20, 20), st.floats(-20, 20), st.floats(-math.pi, math.pi), st.floats(0, 12),
    st.floats(-20, 20), st.floats(-20, 20), st.floats(-math.pi, math.pi), st.floats(0, 12),
)
def test_straight_corridor_distance_matches_dense_sweep(x1, y1, h1, v1, x2, y2, h2, v2):
    a = straight_track("a", x1, y1, h1, v1, 4.5, 1.9)
    e = straight_track("e", x2, y2, h2, v2, 4.08, 1.73)
    d = polygon_distance(swept_corridor(a, 0.0, CFG), swept_corridor(e, 0.0, CFG))
    ref = hull_distance(sampled_corners(a, 0.0, 5.0, 0.05), sampled_corners(e, 0.0, 5.0, 0.05))
    assert d == pytest.approx(ref, abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.floats(-25, 25), st.floats(-25, 25), st.floats(-math.pi, math.pi), st.floats(1, 12), st.floats(-0.8, 0.8))
def test_turning_corridor_never_overestimates(x, y, h, v, w):
    a = turning_track("a", x, y, h, v, w, 4.5, 1.9)
    e = straight_track("e", 0.0, 0.0, 0.0, 8.0, 4.08, 1.73)
    d = polygon_distance(swept_corridor(a, 0.0, CFG), swept_corridor(e, 0.0, CFG))
    assert d <= sampled_box_distance(a, 0.0, 5.0, sampled_corners(e, 0.0, 5.0, 0.05), 0.05) + 1e-9


@settings(max_examples=25, deadline=None)
@given(st.floats(-math.pi, math.pi), st.floats(1, 12), st.floats(-1.2, 1.2))
def test_corridor_contains_every_sampled_corner(h, v, w):
    tr = turning_track("a", 0.0, 0.0, h, v, w, 4.5, 1.9)
    poly = swept_corridor(tr, 0.0, CFG)
    assert np.all(poly.contains(sampled_corners(tr, 0.0, 5.0, 0.01), tol=1e-7))


def test_label_threshold_is_inclusive():
    a = straight_track("a", 0.0, 5.0, 0.0, 0.0, 4.0, 2.0)
    e = straight_track("e", 0.0, 0.0, 0.0, 0.0, 4.0, 2.0)
    # gap between the boxes is 5 - 2 = 3 m
    assert relevance_label(a, e, 0.0, RelevanceConfig(d_min=3.0)).relevant
    assert not relevance_label(a, e, 0.0, RelevanceConfig(d_min=2.999)).relevant


@pytest.mark.parametrize("seed", range(4))
def test_crossing_pedestrian_is_relevant(seed):
    labels = label_dataset(crossing_scenario(seed), CFG)
    assert labels[0].labels[0].relevant


def test_calibrate_then_label_hits_percentile():
    ds = gen_synthetic(SyntheticSpec(n_scenes=2, seed=4))
    d_min, cdf = calibrate_dmin(ds, CFG)
    labels = label_dataset(ds, RelevanceConfig(d_min=d_min))
    finite = [lab for fl in labels for lab in fl.labels if not lab.uncovered]
    frac = sum(lab.relevant for lab in finite) / len(finite)
    assert frac >= CFG.percentile
    assert cdf[-1][1] == pytest.approx(1.0)
    assert all(a[0] < b[0] and a[1] < b[1] for a, b in zip(cdf, cdf[1:]))


def test_label_records_roundtrip():
    labels = label_dataset(crossing_scenario(1), CFG)
    back = labels_from_records(labels_to_records(labels))
    assert [(fl.frame_id, fl.labels) for fl in back] == [(fl.frame_id, fl.labels) for fl in labels]


def test_relevance_config_validation():
    with pytest.raises(ValueError):
        RelevanceConfig(horizon_H=0.0)
    with pytest.raises(ValueError):
        RelevanceConfig(percentile=0.0)
    with pytest.raises(ValueError):
        RelevanceConfig(d_min=-1.0)
