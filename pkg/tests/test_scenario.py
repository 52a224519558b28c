import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uncap.scenario import (
    Control,
    KinematicParams,
    ObjectTruth,
    ScenarioError,
    SensorConfig,
    bundled_scenarios,
    load_scenario,
    scenario_from_dict,
    step_kinematics,
    synthesize_detections,
    synthetic_calibration_set,
)

from conftest import cav


def minimal_doc(**over):
    doc = {
        "tick_rate_hz": 10, "duration_ticks": 20,
        "lanes": [{"id": "a", "polyline": [[0, 0], [100, 0]]}],
        "cavs": [{"id": 1, "position": [0, 0], "velocity": [5, 0], "heading": 0.0,
                  "goal": [100, 0], "route": [[0, 0], [100, 0]]}],
        "objects": [{"id": 9, "class": 0, "extent": [4.5, 2, 1.5],
                     "per_tick": [{"tick": 0, "location": [30, 0], "speed": 0, "heading": 0}]}],
    }
    doc.update(over)
    return doc


def test_bundled_merge_highway():
    sc = load_scenario("merge_highway.json")
    assert sorted(c.id for c in sc.cavs) == [1996, 2005, 2014]
    assert [o.object_id for o in sc.objects] == [2042]
    assert len(sc.entity_ids) == 4


def test_four_bundled_scenarios():
    names = sorted(p.stem for p in bundled_scenarios())
    assert names == ["intersection_turn", "merge_highway", "near_miss_intersection", "occluded_urban"]
    for p in bundled_scenarios():
        sc = load_scenario(p)
        assert 3 <= len(sc.cavs) <= 4


def test_empty_cav_list_rejected():
    with pytest.raises(ScenarioError, match="≥ 1 CAV"):
        scenario_from_dict(minimal_doc(cavs=[]))


def test_unknown_detection_object_named():
    dets = {"1": {"0": [{"object_id": 77, "location": [1, 1], "confidence_vector": [0.9, 0.05, 0.03, 0.02]}]}}
    with pytest.raises(ScenarioError, match="77"):
        scenario_from_dict(minimal_doc(detections=dets))


def test_parse_error_has_position(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"tick_rate_hz": 10,\n "cavs": [}', encoding="utf-8")
    with pytest.raises(ScenarioError, match=r"bad.json:2:"):
        load_scenario(p)


def test_goal_must_match_route():
    doc = minimal_doc()
    doc["cavs"][0]["goal"] = [50, 0]
    with pytest.raises(ScenarioError, match="goal"):
        scenario_from_dict(doc)


def test_heading_velocity_consistency():
    doc = minimal_doc()
    doc["cavs"][0]["heading"] = 1.0
    with pytest.raises(ScenarioError, match="heading"):
        scenario_from_dict(doc)


def test_kinematics_fixed_point():
    s = cav(vel=(0.0, 0.0))
    assert step_kinematics(s, Control(), 0.1) == s


def test_kinematics_brake():
    s = cav(vel=(10.0, 0.0))
    out = step_kinematics(s, Control(brake=1.0), 0.1)
    assert out.speed == pytest.approx(9.2)


def test_full_brake_stops_without_going_negative():
    s = cav(vel=(12.0, 0.0))
    for _ in range(int(12.0 / 8.0 / 0.1) + 5):
        s = step_kinematics(s, Control(brake=1.0), 0.1)
        assert s.speed >= 0.0
    assert s.speed == 0.0


def test_kinematics_rejects_bad_dt():
    with pytest.raises(ValueError):
        step_kinematics(cav(), Control(), 0.0)


controls = st.tuples(st.floats(-2, 2), st.floats(-2, 2), st.floats(-3, 3))


@settings(max_examples=100)
@given(st.lists(controls, min_size=1, max_size=60), st.floats(0, 40))
def test_speed_stays_in_bounds(seq, v0):
    p = KinematicParams()
    s = cav(vel=(v0, 0.0))
    for th, br, steer in seq:
        s = step_kinematics(s, Control(th, br, steer), 0.1, p)
        assert 0.0 <= s.speed <= p.v_max


def truth(oid, loc, cls=0, ext=(4.5, 2.0, 1.5)):
    return ObjectTruth(oid, cls, loc, ext, 0.0, 0.0)


def test_occluded_object_absent():
    observer = cav(1, (0, 0), (1, 0))
    world = [truth(10, (20.0, 0.0)), truth(11, (40.0, 0.0))]
    dets = synthesize_detections(world, observer, SensorConfig(), 42)
    assert [d.object_id for d in dets] == [10]


def test_out_of_fov_and_range_absent():
    observer = cav(1, (0, 0), (1, 0))
    world = [truth(10, (-20.0, 0.0)), truth(11, (90.0, 0.0)), truth(12, (30.0, 5.0))]
    assert [d.object_id for d in synthesize_detections(world, observer, SensorConfig(), 1)] == [12]


def test_low_temperature_gives_one_hot():
    observer = cav(1, (0, 0), (1, 0))
    d = synthesize_detections([truth(10, (10.0, 0.0), cls=2)], observer, SensorConfig(noise_temp=1e-3), 5)[0]
    assert d.confidence_vector[2] == pytest.approx(1.0, abs=1e-12)


def test_detection_bit_identical_for_seed():
    observer = cav(1, (0, 0), (1, 0))
    a = synthesize_detections([truth(10, (10.0, 0.0))], observer, SensorConfig(), 42)
    b = synthesize_detections([truth(10, (10.0, 0.0))], observer, SensorConfig(), 42)
    assert a[0].confidence_vector == b[0].confidence_vector


def test_confidence_vectors_normalised_and_sharpen():
    rates = []
    for t in (1.0, 0.5, 0.1):
        data = synthetic_calibration_set(1000, SensorConfig(noise_temp=t), 4, seed=3)
        for conf, _ in data[:50]:
            assert abs(sum(conf) - 1.0) < 1e-9
        rates.append(np.mean([int(np.argmax(c)) == y for c, y in data]))
    assert rates[0] <= rates[1] <= rates[2]
    assert rates[2] > 0.99


def test_scenario_roundtrips_through_json(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps(minimal_doc()), encoding="utf-8")
    sc = load_scenario(p)
    assert sc.tick_rate == 10 and sc.duration_ticks == 20
    assert sc.cavs[0].speed == pytest.approx(5.0)
    assert math.isclose(sc.cavs[0].heading, 0.0)
