import math
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mlsadjust.exceptions import FormatError, InvalidInputError
from mlsadjust.io import (
    CAMPAIGN_FILES, ControlPointRecord, ObservationRecord, TrajectoryRecord, format_float,
    load_campaign, parse_control_points, parse_json, parse_observations, parse_trajectory,
    read_text, serialize_control_points, serialize_json, serialize_observations,
    serialize_trajectory, sha256_file, write_campaign,
)

from helpers import small_campaign

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)
positive = st.floats(min_value=1e-300, max_value=1e300, allow_nan=False)
ident = st.text(alphabet=st.characters(whitelist_categories=("Lu", "Ll", "Nd"),
                                       whitelist_characters="_-.:"),
                min_size=1, max_size=12)


@given(st.lists(st.tuples(ident, finite, finite, finite, st.floats(0, 1e6)), max_size=20,
                unique_by=lambda r: r[0]))
def test_control_points_round_trip(rows):
    recs = [ControlPointRecord(*r) for r in rows]
    text = serialize_control_points(recs)
    assert parse_control_points(text) == recs
    assert serialize_control_points(parse_control_points(text)) == text


@given(st.lists(st.tuples(finite, finite, finite, finite, finite, finite), max_size=20),
       st.lists(st.floats(1e-3, 1e3), max_size=20))
def test_trajectory_round_trip(rows, steps):
    t = np.cumsum([1.0] + steps)[: len(rows)]
    recs = [TrajectoryRecord(float(ti), *r) for ti, r in zip(t, rows)]
    text = serialize_trajectory(recs)
    assert parse_trajectory(text) == recs
    assert serialize_trajectory(parse_trajectory(text)) == text


@given(st.lists(st.tuples(finite, positive, finite, finite, ident), max_size=20))
def test_observations_round_trip(rows):
    recs = [ObservationRecord(*r) for r in rows]
    text = serialize_observations(recs)
    assert parse_observations(text) == recs
    assert serialize_observations(parse_observations(text)) == text


json_values = st.recursive(
    st.none() | st.booleans() | st.integers(-2**53, 2**53) | finite | st.text(max_size=8),
    lambda kids: st.lists(kids, max_size=4) | st.dictionaries(st.text(max_size=6), kids,
                                                               max_size=4),
    max_leaves=20,
)


@given(st.dictionaries(st.text(max_size=6), json_values, max_size=5))
def test_json_round_trip(body):
    doc = {"format_version": "1.0", "kind": "report", **body}
    doc["format_version"], doc["kind"] = "1.0", "report"
    text = serialize_json(doc)
    parsed = parse_json(text, kind="report")
    assert serialize_json(parsed) == text
    assert text.endswith("\n") and "\r" not in text


def test_float_format():
    assert format_float(-0.0) == "0.0"
    assert format_float(0.1) == "0.1"
    assert float(format_float(1 / 3)) == 1 / 3
    with pytest.raises(InvalidInputError):
        format_float(math.nan)


def test_json_nonfinite_becomes_null():
    text = serialize_json({"format_version": "1.0", "x": math.nan, "y": np.float64(-0.0),
                           "z": np.arange(2)})
    doc = parse_json(text)
    assert doc["x"] is None and doc["y"] == 0.0 and doc["z"] == [0, 1]
    assert "-0.0" not in text


GOOD_CP = "id,x_m,y_m,z_m,sigma_mm\nA,1.0,2.0,3.0,3.0\nB,4.0,5.0,6.0,3.0\n"


@pytest.mark.parametrize("text, line", [
    ("", 1),
    ("id,x,y,z,sigma_mm\nA,1,2,3,3\n", 1),
    ("id,x_m,y_m,z_m,sigma_mm\nA,1,2,3\n", 2),
    ("id,x_m,y_m,z_m,sigma_mm\nA,1,2,3,3\r\nB,1,2,3,3\n", 2),
    ("id,x_m,y_m,z_m,sigma_mm\nA,1,2,3,3\nB,1,2,3,3", 3),
    ("id,x_m,y_m,z_m,sigma_mm\nA,1,2,3,3\nB,1,nan,3,3\n", 3),
    ("id,x_m,y_m,z_m,sigma_mm\nA,1,2,3,3\nB,1,0x1,3,3\n", 3),
    ("id,x_m,y_m,z_m,sigma_mm\nA,1,2,3,3\nB,1,1e999,3,3\n", 3),
    ("id,x_m,y_m,z_m,sigma_mm\nA,1,2,3,3\nA,1,2,3,3\n", 3),
    ("id,x_m,y_m,z_m,sigma_mm\nA,1,2,3,-1\n", 2),
    ("id,x_m,y_m,z_m,sigma_mm\n A,1,2,3,1\n", 2),
])
def test_control_point_format_errors(text, line):
    with pytest.raises(FormatError) as info:
        parse_control_points(text, "cp.csv")
    assert info.value.line == line
    assert str(info.value).startswith(f"cp.csv:{line}: ")


def test_good_control_points():
    recs = parse_control_points(GOOD_CP)
    assert [r.id for r in recs] == ["A", "B"]


def test_trajectory_must_increase():
    text = "t_s,x_m,y_m,z_m,theta_x_deg,theta_y_deg,theta_z_deg\n0,0,0,0,0,0,0\n0,0,0,0,0,0,0\n"
    with pytest.raises(FormatError) as info:
        parse_trajectory(text)
    assert info.value.line == 3


def test_observation_range_positive():
    text = "t_s,rho_m,alpha_deg,beta_deg,control_point_id\n0,1,0,0,A\n0,0,0,0,A\n"
    with pytest.raises(FormatError) as info:
        parse_observations(text)
    assert info.value.line == 3


def test_serializer_rejects_bad_ids():
    with pytest.raises(InvalidInputError):
        serialize_control_points([ControlPointRecord("a,b", 0, 0, 0, 0)])
    with pytest.raises(InvalidInputError):
        serialize_control_points([ControlPointRecord("a", 0, 0, 0, 0)] * 2)


def test_json_errors():
    with pytest.raises(FormatError) as info:
        parse_json('{\n  "a": 1,\n}\n')
    assert info.value.line == 3
    with pytest.raises(FormatError, match="incompatible"):
        parse_json('{"format_version": "2.0"}')
    with pytest.raises(FormatError, match="missing"):
        parse_json('{"kind": "run"}')
    with pytest.raises(FormatError, match="expected a 'run'"):
        parse_json('{"format_version": "1.0", "kind": "campaign"}', kind="run")
    with pytest.raises(FormatError):
        parse_json("[1]")


def test_invalid_utf8(tmp_path):
    p = tmp_path / "cp.csv"
    p.write_bytes(b"id,x_m,y_m,z_m,sigma_mm\n\xff,1,2,3,3\n")
    with pytest.raises(FormatError) as info:
        read_text(p)
    assert info.value.line == 2


@pytest.fixture(scope="module")
def campaign():
    return small_campaign(31)


def test_campaign_round_trip(tmp_path, campaign):
    manifest = write_campaign(tmp_path, campaign, config={"k": 1})
    for name in CAMPAIGN_FILES:
        assert manifest["files"][name] == sha256_file(tmp_path / name)
    loaded = load_campaign(str(tmp_path), noise_model=campaign.dataset.noise_model)
    a, b = campaign.dataset, loaded.dataset
    assert b.point_ids == a.point_ids
    assert np.array_equal(b.rho, a.rho) and np.array_equal(b.t, a.t)
    assert np.allclose(b.alpha, a.alpha, rtol=0, atol=1e-15)
    assert np.allclose(b.positions, a.positions, rtol=0, atol=1e-9)
    assert loaded.control_sigmas == pytest.approx(campaign.control_sigmas, rel=1e-15)
    assert loaded.pass_window(0) is not None and loaded.pass_window(99) is None
    # a second write is byte-identical
    other = tmp_path / "again"
    write_campaign(other, campaign, config={"k": 1})
    for name in list(CAMPAIGN_FILES) + ["manifest.json"]:
        assert (other / name).read_bytes() == (tmp_path / name).read_bytes()


def test_campaign_without_manifest(tmp_path, campaign):
    write_campaign(tmp_path, campaign)
    os.remove(tmp_path / "manifest.json")
    assert load_campaign(str(tmp_path)).manifest is None


def _edit_observations(tmp_path, edit):
    p = tmp_path / "observations.csv"
    lines = p.read_text().split("\n")
    edit(lines)
    p.write_text("\n".join(lines))


def test_unknown_control_point(tmp_path, campaign):
    write_campaign(tmp_path, campaign)

    def edit(lines):
        f = lines[3].split(",")
        lines[3] = ",".join(f[:4] + ["ZZZ"])

    _edit_observations(tmp_path, edit)
    with pytest.raises(FormatError) as info:
        load_campaign(str(tmp_path))
    assert info.value.line == 4


def test_observation_outside_trajectory(tmp_path, campaign):
    write_campaign(tmp_path, campaign)

    def edit(lines):
        f = lines[1].split(",")
        lines[1] = ",".join(["-100.0"] + f[1:])

    _edit_observations(tmp_path, edit)
    with pytest.raises(FormatError, match="outside") as info:
        load_campaign(str(tmp_path))
    assert info.value.line == 2


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=10))
def test_float_repr_is_exact(values):
    for v in values:
        assert float(format_float(v)) == v + 0.0
