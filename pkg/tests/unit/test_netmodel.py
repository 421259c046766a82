"""Unit tests for case parsing and dispatch coordinates"""
import logging

import numpy as np
import pytest
from scipy.special import expit

from scopfsampler.exceptions import CaseParseError, DispatchBoundsError
from scopfsampler.netmodel import (
    BusType,
    Dispatch,
    DispatchBox,
    NetworkOptions,
    dispatch_box,
    from_unconstrained,
    load_case,
    nominal_dispatch,
    parse_case,
    sample_uniform,
    to_unconstrained,
    unconstrained_jacobian,
)

ONE_GEN_CASE = """
mpc.baseMVA = 100;
mpc.bus = [
    1 3 0  0 0 0 1 1 0 0 1 1.06 0.94;
    2 2 0  0 0 0 1 1 0 0 1 1.06 0.94;
    3 1 80 30 0 0 1 1 0 0 1 1.06 0.94;
];
mpc.gen = [
    1 0  0 100 -100 1.0 100 1 300 0;
    2 50 0 100 -100 1.0 100 1 200 10;
];
mpc.branch = [
    1 2 0.01 0.1 0 0 0 0 0 0 1 -360 360;
    2 3 0.01 0.1 0 0 0 0 0 0 1 -360 360;
];
mpc.gencost = [
    2 0 0 3 0.01 20 5;
    2 0 0 2 30 0;
];
"""

def test_parse_converts_to_per_unit(toy):
    """Test per-unit conversion of loads, limits, admittances and costs"""
    assert toy.base_mva == 100
    assert toy.n_buses == 3
    assert toy.n_branches == 3
    assert toy.loads[0].p == pytest.approx(0.5)
    assert toy.loads[0].q == pytest.approx(0.2)
    assert toy.generators[1].pmax == pytest.approx(1.0)
    assert toy.generators[1].pmin == pytest.approx(0.1)
    assert toy.branches[0].y_series == pytest.approx(1.0 / complex(0.01, 0.1))
    assert toy.branches[0].b_charging == pytest.approx(0.02)
    # 0.01 $/MW^2 * 100^2, 20 $/MW * 100
    assert toy.generators[0].cost == pytest.approx((100.0, 2000.0, 0.0))
    assert toy.buses[0].type == BusType.SLACK

def test_short_cost_polynomial_is_padded():
    """Test that a linear gencost row yields c2 = 0"""
    network = parse_case(ONE_GEN_CASE)
    assert network.generators[1].cost == pytest.approx((0.0, 3000.0, 0.0))
    assert network.generators[0].cost == pytest.approx((100.0, 2000.0, 5.0))

def test_dispatch_box_one_generator():
    """Test box assembly for one dispatched generator and two generator buses"""
    network = parse_case(ONE_GEN_CASE)
    box = dispatch_box(network)
    np.testing.assert_allclose(box.lower, [0.1, 0.94, 0.94])
    np.testing.assert_allclose(box.upper, [2.0, 1.06, 1.06])
    assert box.sizes == (1, 2, 0)
    assert box.dimension == 3

def test_box_length_counts_generators(toy, toy_box):
    """Test box length with non-dispatchable loads"""
    assert toy_box.lower.size == len(toy.dispatched_generators) + len(toy.generator_buses)

def test_dispatchable_loads_extend_the_box():
    """Test that dispatchable loads add P and Q entries at fractions of nominal"""
    network = parse_case(
        """
mpc.baseMVA = 100;
mpc.bus = [
    1 3 0 0 0 0 1 1 0 0 1 1.1 0.9;
    2 1 50 20 0 0 1 1 0 0 1 1.1 0.9;
];
mpc.gen = [1 0 0 100 -100 1.0 100 1 200 0];
mpc.branch = [1 2 0.01 0.1 0 0 0 0 0 0 1 -360 360];
mpc.gencost = [2 0 0 3 0 10 0];
""",
        NetworkOptions(dispatchable_loads=True),
    )
    box = dispatch_box(network)
    assert box.sizes == (0, 1, 1)
    np.testing.assert_allclose(box.lower, [0.9, 0.25, 0.1])
    np.testing.assert_allclose(box.upper, [1.1, 0.5, 0.2])

def test_parse_is_deterministic():
    """Test that parsing the same text twice gives identical numbers"""
    first = parse_case(ONE_GEN_CASE)
    again = parse_case(ONE_GEN_CASE)
    assert again.branches == first.branches
    assert again.generators == first.generators
    assert again.buses == first.buses

@pytest.mark.parametrize("text, table", [
    (ONE_GEN_CASE.replace("1 3 0  0", "1 1 0  0"), "bus"),
    (ONE_GEN_CASE.replace("2 2 0  0", "2 3 0  0"), "bus"),
    (ONE_GEN_CASE.replace("2 3 0.01", "2 9 0.01"), "branch"),
    (ONE_GEN_CASE.replace("mpc.gencost", "mpc.unused"), "gencost"),
])
def test_invalid_cases_are_rejected(text, table):
    """Test structural errors: no slack, two slacks, unknown bus, missing table"""
    with pytest.raises(CaseParseError) as exc_info:
        parse_case(text)
    assert exc_info.value.table == table
    assert exc_info.value.exit_code == 3

def test_malformed_value_reports_location():
    """Test that a non-numeric token names its table, row and column"""
    with pytest.raises(CaseParseError) as exc_info:
        parse_case(ONE_GEN_CASE.replace("2 3 0.01 0.1", "2 3 0.01 abc"))
    error = exc_info.value
    assert (error.table, error.row, error.column) == ("branch", 2, 4)
    assert "abc" in error.one_line()
    assert error.one_line().startswith("error[case-parse]:")

def test_unsupported_cost_model_is_rejected():
    with pytest.raises(CaseParseError):
        parse_case(ONE_GEN_CASE.replace("2 0 0 2 30 0", "1 0 0 2 30 0"))

def test_tap_ratios_warn_once(caplog):
    """Test that transformer taps are ignored with a single warning"""
    text = ONE_GEN_CASE.replace(
        "1 2 0.01 0.1 0 0 0 0 0 0 1", "1 2 0.01 0.1 0 0 0 0 0.97 0 1"
    ).replace(
        "2 3 0.01 0.1 0 0 0 0 0 0 1", "2 3 0.01 0.1 0 0 0 0 0.95 0 1"
    )
    with caplog.at_level(logging.WARNING, logger="scopfsampler"):
        network = parse_case(text)
    assert network.n_branches == 2
    assert sum("tap" in r.getMessage() for r in caplog.records) == 1

def test_out_of_service_branch_is_dropped():
    text = ONE_GEN_CASE.replace("1 2 0.01 0.1 0 0 0 0 0 0 1", "1 2 0.01 0.1 0 0 0 0 0 0 0")
    assert parse_case(text).n_branches == 1

def test_load_case_missing_file(tmp_path):
    with pytest.raises(CaseParseError) as exc_info:
        load_case(tmp_path / "nope.m")
    assert "nope.m" in exc_info.value.detail

def test_midpoint_maps_to_zero(toy_box):
    """Test that the box midpoint has zero unconstrained coordinates"""
    midpoint = Dispatch.from_flat(0.5 * (toy_box.lower + toy_box.upper), toy_box.sizes)
    np.testing.assert_allclose(to_unconstrained(midpoint, toy_box), np.zeros(toy_box.dimension), atol=1e-12)

def test_sigmoid_on_unit_bounds():
    """Test the inverse map on [0, 1] bounds"""
    box = DispatchBox(lower=[0.0], upper=[1.0], sizes=(1, 0, 0))
    dispatch = from_unconstrained(np.array([4.0]), box)
    assert dispatch.p_g[0] == pytest.approx(0.98201, abs=1e-5)
    assert dispatch.p_g[0] == pytest.approx(expit(4.0))

def test_roundtrip(toy_box):
    """Test both roundtrips of the logit map"""
    rng = np.random.default_rng(7)
    for _ in range(20):
        z = 3.0 * rng.standard_normal(toy_box.dimension)
        np.testing.assert_allclose(to_unconstrained(from_unconstrained(z, toy_box), toy_box), z, atol=1e-10)
        d = sample_uniform(toy_box, rng)
        np.testing.assert_allclose(
            from_unconstrained(to_unconstrained(d, toy_box), toy_box).flatten(), d.flatten(), atol=1e-12
        )

def test_extreme_coordinates_stay_inside(toy_box):
    """Test that saturated sigmoids are kept strictly inside the bounds"""
    for value in (-800.0, 800.0):
        flat = from_unconstrained(np.full(toy_box.dimension, value), toy_box).flatten()
        assert np.all(flat > toy_box.lower)
        assert np.all(flat < toy_box.upper)

def test_boundary_value_is_rejected(toy, toy_box):
    """Test that a dispatch on its bound cannot be mapped"""
    flat = 0.5 * (toy_box.lower + toy_box.upper)
    flat[0] = toy_box.lower[0]
    with pytest.raises(DispatchBoundsError):
        to_unconstrained(Dispatch.from_flat(flat, toy_box.sizes), toy_box)

def test_frozen_entries_leave_the_coordinates():
    """Test that equal bounds are frozen out of z"""
    box = DispatchBox(lower=[0.0, 1.0, 0.2], upper=[1.0, 1.0, 0.4], sizes=(1, 2, 0))
    assert box.dimension == 2
    dispatch = from_unconstrained(np.zeros(2), box)
    np.testing.assert_allclose(dispatch.flatten(), [0.5, 1.0, 0.3])
    np.testing.assert_allclose(to_unconstrained(dispatch, box), [0.0, 0.0], atol=1e-15)

def test_unconstrained_jacobian_matches_differences(toy_box):
    z = np.array([0.3, -1.2, 0.7])[:toy_box.dimension]
    d = from_unconstrained(z, toy_box)
    h = 1e-6
    expected = [
        (from_unconstrained(z + h * e, toy_box).flatten() - from_unconstrained(z - h * e, toy_box).flatten())[i] / (2 * h)
        for i, e in enumerate(np.eye(toy_box.dimension))
    ]
    np.testing.assert_allclose(unconstrained_jacobian(d, toy_box), expected, rtol=1e-6)

def test_nudge_inside(case14, case14_box):
    """Test that the case-file setpoint is moved strictly inside the box"""
    nominal = nominal_dispatch(case14)
    with pytest.raises(DispatchBoundsError):
        to_unconstrained(nominal, case14_box)
    nudged = case14_box.nudge_inside(nominal)
    assert np.all(np.isfinite(to_unconstrained(nudged, case14_box)))

def test_dispatch_dict_roundtrip(toy_dispatch):
    restored = Dispatch.from_dict(toy_dispatch.to_dict())
    np.testing.assert_array_equal(restored.flatten(), toy_dispatch.flatten())
