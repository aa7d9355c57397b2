from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from navharness.errors import EmptyInput, EmptyPath, EmptyTrace, OutOfBounds
from navharness.metrics import (
    COLUMN_NAMES,
    MetricConfig,
    MetricReport,
    aggregate,
    dtw,
    evaluate_episode,
    json_safe,
    lowlevel_metrics,
    navigation_error,
    ndtw,
    resample_path,
    spl,
    success,
)
from navharness.records import Trace
from navharness.scene import inflate
from conftest import make_record, metric_fixtures
from oracles import brute_dtw

SCENE, EPISODES = metric_fixtures()
GRID = inflate(SCENE, 0.3)


@pytest.mark.parametrize("ep", EPISODES, ids=[e["name"] for e in EPISODES])
def test_fixture_episodes(ep):
    rec = make_record(ep["xy"], ep["stop_issued"], SCENE.goal)
    exp = ep["expected"]
    s = success(rec, GRID)
    assert (s.sr, s.os) == (exp["sr"], exp["os"])
    assert spl(rec, GRID) == exp["spl"]
    assert navigation_error(GRID, rec.final_xy, SCENE.goal) == exp["ne"]


def test_navigation_error_cases():
    assert navigation_error(GRID, SCENE.goal, SCENE.goal) == 0.0
    occ = np.zeros((10, 20), dtype=bool)
    g = inflate(occ, 0.0, 0.1)
    assert navigation_error(g, (0.05, 0.05), (1.25, 0.05)) == pytest.approx(1.2, abs=0.1)
    occ[:, 10] = True
    g = inflate(occ, 0.0, 0.1)
    assert navigation_error(g, (0.05, 0.05), (1.55, 0.05)) == math.inf
    with pytest.raises(OutOfBounds):
        navigation_error(g, (5.0, 0.05), (0.05, 0.05))
    assert navigation_error(g, (0.05, 0.05), (1.55, 0.05), euclidean=True) == pytest.approx(1.5)


def test_spl_formula_doubling():
    rec = make_record([SCENE.start_pose[:2], SCENE.goal, SCENE.start_pose[:2], SCENE.goal], True, SCENE.goal)
    # p = 3 l, still a success
    assert spl(rec, GRID) == pytest.approx(1 / 3)


def test_ndtw_identity_and_offset():
    ref = [(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (3.0, 0.0)]
    assert ndtw(ref, ref) == 1.0
    delta = 0.4
    shifted = [(x, y + delta) for x, y in ref]
    assert ndtw(shifted, ref, 3.0) == pytest.approx(math.exp(-delta / 3))


def test_ndtw_three_point_brute():
    a = [(0, 0), (1, 1), (2, 0)]
    b = [(0, 1), (2, 2), (3, 0)]
    assert dtw(a, b) == brute_dtw(a, b)
    assert ndtw(a, b) == math.exp(-brute_dtw(a, b) / 9)


def test_empty_paths():
    with pytest.raises(EmptyPath):
        dtw([], [(0, 0)])
    with pytest.raises(EmptyPath):
        ndtw([(0, 0)], [])


POINTS = [(0.0, 0.0), (1.0, 0.0), (0.0, 2.0), (3.0, 1.0)]
paths = st.lists(st.sampled_from(POINTS), min_size=1, max_size=6)


@settings(max_examples=200, deadline=None)
@given(paths, paths)
def test_dtw_matches_brute_force(a, b):
    assert dtw(a, b) == brute_dtw(a, b)


@given(st.lists(st.sampled_from(POINTS), min_size=1, max_size=6).flatmap(
    lambda a: st.tuples(st.just(a), st.lists(st.sampled_from(POINTS), min_size=len(a), max_size=len(a)))))
def test_ndtw_reversal_symmetry(pair):
    a, b = pair
    assert ndtw(a[::-1], b[::-1]) == pytest.approx(ndtw(a, b), rel=1e-12)


@given(paths, paths, st.floats(0.1, 10))
def test_ndtw_scale_and_range(a, b, lam):
    v = ndtw(a, b, 3.0)
    assert 0.0 <= v <= 1.0
    scaled = ndtw([(lam * x, lam * y) for x, y in a], [(lam * x, lam * y) for x, y in b], 3.0 * lam)
    assert scaled == pytest.approx(v, rel=1e-9)


def test_resample_keeps_endpoints():
    r = resample_path([(0, 0), (1, 0)], 0.25)
    assert len(r) == 5 and tuple(r[0]) == (0, 0) and tuple(r[-1]) == (1, 0)
    assert len(resample_path([(1, 1), (1, 1)], 0.25)) == 1


def _trace(v, v_cmd, contact):
    n = len(v)
    z = [0.0] * n
    return Trace(t=range(n), x=z, y=z, yaw=z, v=v, omega=z, v_cmd=v_cmd, w_cmd=z, contact=contact)


def test_lowlevel_examples():
    n = 501
    perfect = _trace([0.5] * n, [0.5] * n, [False] * n)
    assert lowlevel_metrics(perfect) == {"lin_vel_err": 0.0, "ang_vel_err": 0.0, "collision_rate": 0.0}
    lag = _trace([0.4] * n, [0.5] * n, [False] * n)
    assert lowlevel_metrics(lag)["lin_vel_err"] == pytest.approx(0.1)
    contact = [False] * n
    for k in (1, 50, 100, 200, 400):
        contact[k] = True
    assert lowlevel_metrics(_trace([0.5] * n, [0.5] * n, contact))["collision_rate"] == 1.0


def test_lowlevel_ignores_stop_steps():
    t = _trace([0.0, 0.3, 0.1], [0.0, 0.5, 0.0], [False] * 3)
    assert lowlevel_metrics(t)["lin_vel_err"] == pytest.approx(0.2)


def test_lowlevel_empty():
    with pytest.raises(EmptyTrace):
        lowlevel_metrics(_trace([0.0], [0.0], [False]))


@given(st.lists(st.booleans(), min_size=2, max_size=100))
def test_collision_rate_range(contact):
    n = len(contact)
    r = lowlevel_metrics(_trace([0.0] * n, [0.5] * n, contact))["collision_rate"]
    assert 0.0 <= r <= 100.0
    if not any(contact[1:]):
        assert r == 0.0


def _report(**kw):
    base = dict(ne=0.0, os=True, sr=True, spl=1.0, ndtw=1.0, lin_vel_err=0.0, ang_vel_err=0.0, collision_rate=0.0)
    base.update(kw)
    return MetricReport(**base)


def test_aggregate():
    r = _report(ne=1.5, spl=0.7)
    single = aggregate([r])
    assert single["count"] == 1
    assert {k: single[COLUMN_NAMES[k]] for k in COLUMN_NAMES} == {k: float(v) for k, v in r.to_dict().items()}
    assert aggregate([_report(), _report(sr=False, spl=0.0)])["SR"] == 0.5
    three = aggregate([_report(ne=1.0, spl=0.9), _report(ne=2.0, spl=0.6, os=False), _report(ne=6.0, sr=False, spl=0.0)])
    assert three["NE"] == pytest.approx(3.0)
    assert three["SPL"] == pytest.approx(0.5)
    assert three["OS"] == pytest.approx(2 / 3)
    assert three["SR"] == pytest.approx(2 / 3)
    with pytest.raises(EmptyInput):
        aggregate([])


def test_json_safe():
    assert json_safe({"NE": math.inf, "SR": 0.5}) == {"NE": None, "SR": 0.5}


def test_spl_never_exceeds_sr():
    reports = []
    for ep in EPISODES:
        rec = make_record(ep["xy"], ep["stop_issued"], SCENE.goal)
        s = success(rec, GRID)
        p = spl(rec, GRID)
        assert 0.0 <= p <= float(s.sr)
        reports.append(_report(sr=s.sr, spl=p))
    agg = aggregate(reports)
    assert agg["SPL"] <= agg["SR"]


def test_evaluate_episode_fields():
    rec = make_record([SCENE.start_pose[:2], SCENE.goal], True, SCENE.goal, v=[0.0, 0.5], v_cmd=[0.0, 0.5])
    rep = evaluate_episode(rec, SCENE)
    assert rep.sr and rep.spl == 1.0 and rep.ndtw == 1.0 and rep.collision_rate == 0.0
    eu = evaluate_episode(rec, SCENE, MetricConfig(euclidean=True))
    assert eu.ne == 0.0
