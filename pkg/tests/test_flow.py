import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from planar_cohomology.expr import parse
from planar_cohomology.flow import (
    Box,
    FlowError,
    PlanarField,
    RegularityError,
    Status,
    Transversal,
    crossings_many,
    flow_to_crossing,
    integrate,
    integrate_many,
    trace_leaf,
)
from oracles import ex51_flow, scipy_flow

EX51 = PlanarField.from_strings("2*y", "1-y^2", "ex51:1")
EX52 = PlanarField.from_strings("cos(y)", "-sin(y)", "ex52:1")
CONST = PlanarField.from_strings("1", "0", "const")


def test_translation_flow():
    r = integrate(CONST, (0.0, 0.0), 2.0)
    assert r.status == Status.REACHED_TIME
    assert r.endpoint == pytest.approx((2.0, 0.0), abs=1e-14)
    assert r.elapsed == 2.0


@pytest.mark.parametrize("t", [0.25, 1.0, 2.0, 3.0])
def test_ex51_flow_matches_tanh_closed_form(t):
    x, y = integrate(EX51, (0.0, 0.0), t).endpoint
    xe, ye = ex51_flow(t)
    assert abs(x - xe) <= 1e-8 and abs(y - ye) <= 1e-8


def test_ex51_batch_matches_closed_form_from_many_starts():
    rng = np.random.default_rng(5)
    p = np.column_stack([rng.uniform(-2, 2, 60), rng.uniform(-0.9, 0.9, 60)])
    t = 1.7
    r = integrate_many(EX51, p, t)
    ref = np.array([ex51_flow(t, *q) for q in p])
    assert np.max(np.abs(r.y[:, :2] - ref)) <= 1e-8


def test_ex52_flow_agrees_with_independent_integrator():
    p0 = (0.3, 1.1)
    ours = integrate(EX52, p0, 2.5, tol=1e-12).endpoint
    ref = scipy_flow(lambda x, y: math.cos(y), lambda x, y: -math.sin(y), p0, 2.5)
    assert np.allclose(ours, ref, atol=1e-9)


@pytest.mark.parametrize("t", [0.5, 1.0, 3.0, -2.0])
def test_ex52_first_integral_is_conserved(t):
    F = parse("exp(x)*sin(y)")
    p0 = (0.0, math.pi / 2)
    x, y = integrate(EX52, p0, t).endpoint
    assert abs(F(x, y) - F(*p0)) <= 1e-9


def test_forward_then_backward_returns():
    tol = 1e-10
    for field, p0 in ((EX51, (0.2, -0.4)), (EX52, (-1.0, 2.0))):
        q = integrate(field, p0, 1.3, tol).endpoint
        back = integrate(field, q, -1.3, tol).endpoint
        assert np.max(np.abs(np.subtract(back, p0))) <= 10 * tol


@settings(max_examples=40, deadline=None)
@given(st.floats(-1.5, 1.5), st.floats(-0.9, 0.9), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_semigroup_property(x0, y0, s, t):
    tol = 1e-10
    a = integrate(EX51, (x0, y0), s + t, tol).endpoint
    b = integrate(EX51, integrate(EX51, (x0, y0), s, tol).endpoint, t, tol).endpoint
    assert np.max(np.abs(np.subtract(a, b))) <= 10 * tol * max(1.0, np.max(np.abs(a)))


def test_crossing_time_translation():
    r = flow_to_crossing(CONST, (0.0, 0.0), Transversal.vertical(1.0, -10, 10))
    assert r.crossed
    assert r.elapsed == pytest.approx(1.0, abs=1e-12)


def test_crossing_on_ex51_level_set_matches_analytic_point():
    target = Transversal.level("y*exp(x)", 1.0)
    r = flow_to_crossing(EX51, (0.0, 0.0), target)
    assert r.crossed
    # leaf F = -1 meets y e^x = 1 where y^2 + y - 1 = 0
    y = (math.sqrt(5) - 1) / 2
    assert r.endpoint == pytest.approx((-math.log(y), y), abs=1e-9)
    F = parse("(y^2-1)*exp(x)")
    assert abs(F(*r.endpoint) + 1.0) <= 1e-9
    assert abs(target.residual(*r.endpoint)) <= 1e-10


def test_crossing_carries_line_integral():
    r = flow_to_crossing(CONST, (0.0, 0.0), Transversal.vertical(2.0, -10, 10), integrand=parse("x"))
    assert r.integral == pytest.approx(2.0, abs=1e-12)


def test_backward_crossing_has_negative_time():
    r = flow_to_crossing(CONST, (0.0, 0.0), Transversal.vertical(-1.5, -10, 10), direction=-1.0)
    assert r.crossed and r.elapsed == pytest.approx(-1.5, abs=1e-12)


def test_leaves_never_cross_a_separatrix():
    beyond = Transversal.horizontal(1.5, -1e9, 1e9)
    r = flow_to_crossing(EX51, (0.0, 0.999), beyond, tmax=1e4)
    assert not r.crossed
    r = flow_to_crossing(EX51, (0.0, 0.999), beyond, tmax=1e4, direction=-1.0)
    assert not r.crossed


def test_crossings_report_every_target():
    targets = [Transversal.vertical(1.0, -10, 10), Transversal.vertical(3.0, -10, 10)]
    r = crossings_many(CONST, [(0.0, 0.0), (2.0, 1.0)], targets, tmax=10, terminal=[])
    np.testing.assert_allclose(r.cross_t[0], [1.0, 3.0], atol=1e-12)
    assert np.isnan(r.cross_t[1, 0]) and r.cross_t[1, 1] == pytest.approx(1.0)


def test_trace_of_constant_field_is_horizontal():
    poly = trace_leaf(CONST, (0.5, 0.25), Box(-1, 1, -1, 1))
    assert np.all(poly[:, 2] == 0.25)
    # the arcs run to the box edge, up to one sample spacing
    assert -1.0 <= poly[0, 1] <= -0.95 and 0.95 <= poly[-1, 1] <= 1.0
    assert np.all(np.diff(poly[:, 0]) > 0)


@pytest.mark.parametrize("field, p0, F, level", [
    (EX51, (0.0, 0.0), "(y^2-1)*exp(x)", -1.0),
    (EX52, (0.0, math.pi / 4), "exp(x)*sin(y)", math.sqrt(2) / 2),
])
def test_traced_leaves_stay_on_their_level(field, p0, F, level):
    poly = trace_leaf(field, p0, Box(-6, 6, -6, 6))
    assert len(poly) > 50
    Fe = parse(F)
    assert np.max(np.abs(Fe(poly[:, 1], poly[:, 2]) - level)) <= 1e-7


def test_double_crossing_is_reported():
    twice = Transversal.level("x^2", 1.0)
    with pytest.raises(FlowError):
        trace_leaf(CONST, (0.0, 0.0), Box(-3, 3, -1, 1), transversals=[twice])


def test_singular_field_is_rejected():
    with pytest.raises(RegularityError):
        PlanarField.from_strings("x", "y").check_regular(Box(-1, 1, -1, 1))
    EX51.check_regular(Box())


def test_transversal_json_round_trip():
    t = Transversal.level("2*y*exp(x)", 2.0, Box(-np.inf, np.inf, 0.0, np.inf), label="G=2")
    t2 = Transversal.from_json(t.to_json())
    p = np.array([0.1, -0.3, 0.7]), np.array([0.5, 1.0, 2.0])
    np.testing.assert_array_equal(t.residual(*p), t2.residual(*p))
    np.testing.assert_array_equal(t.valid(*p), t2.valid(*p))
