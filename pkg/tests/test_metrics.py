import math

import pytest
from hypothesis import given, settings, strategies as st

from uncap.metrics import (
    InfractionEvent,
    default_penalties,
    driving_score,
    infraction_penalty,
    information_gain,
    jerk_rms,
    load_penalty_table,
    make_infraction,
    min_distance_margin,
    route_completion,
)

ROUTE = [(0.0, 0.0), (100.0, 0.0)]


def straight(n, step=1.0):
    return [(i * step, 0.0) for i in range(n)]


def test_route_completion_examples():
    assert route_completion(straight(101), ROUTE) == 1.0
    assert route_completion([(0.0, 0.0)] * 10, ROUTE) == 0.0
    # drives the whole way, but collides at 50 m
    assert route_completion(straight(101), ROUTE, failure_index=50) == pytest.approx(0.5, abs=0.01)


def test_route_completion_lateral_offset_and_overshoot():
    assert route_completion([(50.0, 3.0)], ROUTE) == pytest.approx(0.5)
    assert route_completion([(150.0, 0.0)], ROUTE) == 1.0


def test_route_completion_degenerate_route():
    with pytest.raises(ValueError):
        route_completion([(0.0, 0.0)], [(1.0, 1.0), (1.0, 1.0)])


def test_route_completion_uturn_route_is_not_shortcut():
    route = [(0.0, 0.0), (50.0, 0.0), (50.0, 4.0), (0.0, 4.0)]
    # sitting near the start is close to the end of the route too
    assert route_completion([(0.0, 0.0), (1.0, 0.5)], route) < 0.05


def test_infraction_penalty_examples():
    table = default_penalties()
    assert infraction_penalty([]) == 1.0
    assert infraction_penalty([make_infraction(3, "collision_vehicle", table)]) == 0.60
    events = [InfractionEvent(1, "collision_vehicle", 0.60), InfractionEvent(2, "red_light", 0.70)]
    assert infraction_penalty(events) == pytest.approx(0.42)


@given(st.lists(st.floats(0.01, 1.0), max_size=8), st.randoms())
def test_infraction_penalty_order_free(coeffs, rnd):
    events = [InfractionEvent(i, "lane_invasion", c) for i, c in enumerate(coeffs)]
    shuffled = list(events)
    rnd.shuffle(shuffled)
    assert infraction_penalty(events) == infraction_penalty(shuffled)
    assert 0.0 <= infraction_penalty(events) <= 1.0


def test_infraction_validation():
    with pytest.raises(ValueError):
        InfractionEvent(0, "speeding", 0.5)
    with pytest.raises(ValueError):
        InfractionEvent(0, "red_light", 0.0)


def test_penalty_table_validation():
    table = default_penalties()
    assert table["lane_invasion"] == 0.90
    with pytest.raises(ValueError):
        load_penalty_table({k: v for k, v in table.items() if k != "stop_sign"})
    with pytest.raises(ValueError):
        load_penalty_table(dict(table, red_light=1.5))


def test_driving_score_examples():
    assert driving_score(0.892, 0.90) == pytest.approx(0.8028, abs=1e-9)
    assert driving_score(1.0, 1.0) == 1.0
    assert driving_score(0.883, 0.78) == pytest.approx(0.6887, abs=1e-4)
    with pytest.raises(ValueError):
        driving_score(1.2, 0.5)


def test_information_gain_examples():
    assert information_gain([(0.25, 0.71)]) == pytest.approx(1.0438, abs=1e-4)
    assert information_gain([(0.43, 0.44)]) == pytest.approx(0.0230, abs=1e-4)
    assert information_gain([(0.3, 0.3), (0.3, 0.3)]) == 0.0
    assert information_gain([]) is None
    with pytest.raises(ValueError):
        information_gain([(0.0, 0.5)])


@given(st.lists(st.tuples(st.floats(0.01, 0.5), st.floats(0.01, 0.5)), min_size=1, max_size=6),
       st.floats(0.1, 2.0))
def test_information_gain_scale_free(pairs, k):
    scaled = [(a * k, b * k) for a, b in pairs]
    assert information_gain(scaled) == pytest.approx(information_gain(pairs), abs=1e-9)


def test_margin_parallel_lanes():
    a = [((float(t), 0.0), 0.0) for t in range(20)]
    b = [((float(t), 4.0), 0.0) for t in range(20)]
    assert min_distance_margin(a, b, (4.5, 2.0), (4.5, 2.0)) == pytest.approx(2.0)


def test_margin_identical_trajectories_collide():
    a = [((float(t), 0.0), 0.3) for t in range(5)]
    assert min_distance_margin(a, a, (4.5, 2.0), (4.5, 2.0)) <= 0.0


def test_margin_tracks_minimum():
    a = [((0.0, 0.0), 0.0)] * 3
    b = [((20.0, 0.0), 0.0), ((10.0, 0.0), 0.0), ((30.0, 0.0), 0.0)]
    assert min_distance_margin(a, b, (4.0, 2.0), (4.0, 2.0)) == pytest.approx(6.0)


def test_margin_requires_alignment():
    with pytest.raises(ValueError):
        min_distance_margin([((0, 0), 0)], [], (1, 1), (1, 1))


@settings(max_examples=100)
@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-math.pi, math.pi))
def test_margin_symmetric(x, y, h):
    a = [((0.0, 0.0), 0.0)]
    b = [((x, y), h)]
    assert min_distance_margin(a, b, (4.5, 2.0), (3.0, 1.5)) == pytest.approx(
        min_distance_margin(b, a, (3.0, 1.5), (4.5, 2.0)), abs=1e-9)


def test_jerk():
    assert jerk_rms([5.0, 5.0, 5.0, 5.0], 0.05) == 0.0
    assert jerk_rms([0.0, 1.0], 0.05) == 0.0
    assert jerk_rms([0.0, 0.0, 1.0], 1.0) == pytest.approx(1.0)
