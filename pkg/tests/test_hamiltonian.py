import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from planar_cohomology.expr import compile_exprs, parse
from planar_cohomology.flow import Box
from planar_cohomology.hamiltonian import (
    DensityError,
    HamiltonianPair,
    RectifiedMap,
    bump,
    derive_pair,
    positivity_certificate,
    verify_relations,
)
from planar_cohomology.registry import registry

RNG = np.random.default_rng(11)
PTS = RNG.uniform(-2, 2, (1000, 2))


def _dp(name):
    spec = registry(name)
    return spec.field, derive_pair(spec.field, spec.hamiltonian())


def test_ex51_density_and_normalised_field():
    field, dp = _dp("ex51:1")
    x, y = PTS[:, 0], PTS[:, 1]
    (rho,) = compile_exprs([dp.rho])(x, y)
    np.testing.assert_allclose(np.abs(rho), 2 * (1 + y ** 2) * np.exp(2 * x), rtol=1e-13)
    u, v = dp.xiF(x, y)
    s = 1.0 / (2 * np.exp(x) * (1 + y ** 2))
    np.testing.assert_allclose(u, 2 * y * s, rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(v, (1 - y ** 2) * s, rtol=1e-13, atol=1e-15)


def test_ex52_normalised_field_raises_G_at_unit_rate():
    field, dp = _dp("ex52:1")
    x, y = PTS[:, 0], PTS[:, 1] * 3
    u, v = dp.xiF(x, y)
    np.testing.assert_allclose(u, np.exp(-x) * np.cos(y), rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(v, -np.exp(-x) * np.sin(y), rtol=1e-13, atol=1e-15)
    (lg,) = compile_exprs([dp.xiF.lie(dp.ham.G)])(x, y)
    assert np.max(np.abs(lg - 1.0)) <= 1e-10


def test_sign_bookkeeping_for_the_rectified_case():
    dp = derive_pair(None, HamiltonianPair.from_strings("y", "x"))
    assert dp.xi_F(0.3, 0.4) == (-1.0, 0.0)
    assert dp.rho(0.3, 0.4) == -1.0
    assert dp.xiF(0.3, 0.4) == (1.0, 0.0)


def test_density_zero_is_reported():
    dp = derive_pair(None, HamiltonianPair.from_strings("(1+y)^2*(1-y)*exp(x)", "2*y*exp(x)"))
    with pytest.raises(DensityError):
        dp.evaluate(np.array([0.0]), np.array([-1.0]))


@pytest.mark.parametrize("name", ["ex51:1", "ex52:1"])
def test_relation_suite(name):
    _, dp = _dp(name)
    rep = verify_relations(dp, samples=10000, tol=1e-8, box=Box(-2, 2, -3, 3))
    assert set(rep["relations"]) == {"3", "5", "6", "7", "10"}
    assert all(rep["passed"].values())
    assert max(rep["relations"].values()) <= 1e-8
    assert rep["samples"] == 10000
    assert rep["implied"] == ["4", "8", "9"]


def test_relation_suite_skips_the_degeneracy_collar():
    _, dp = _dp("ex51:2")
    rep = verify_relations(dp, samples=10000, tol=1e-8, box=Box(-2, 2, -3, 3), collar=0.05)
    assert rep["skipped_in_collars"] > 0
    assert all(rep["passed"].values())


def test_hamiltonian_pair_checks():
    spec = registry("ex51:1")
    rep = spec.hamiltonian().check(spec.field, Box(-2, 2, -2, 2))
    assert rep["kernel_residual"] <= 1e-9
    assert rep["LG_sign_constant"]


@pytest.mark.parametrize("name, p, expected", [("ex51:1", (0.0, 0.0), (-1.0, 0.0)),
                                               ("ex52:1", (0.0, math.pi / 2), (1.0, 0.0))])
def test_rectify_examples(name, p, expected):
    rm = RectifiedMap(registry(name).hamiltonian())
    xp, yp = rm.rectify(*p)
    assert (float(xp), float(yp)) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("name", ["ex51:1", "ex52:1"])
def test_pushforward_of_the_commuting_pair(name):
    spec = registry(name)
    dp = derive_pair(spec.field, spec.hamiltonian())
    rm = RectifiedMap(spec.hamiltonian())
    assert rm.pushforward_residual(dp, PTS[:, 0], PTS[:, 1]) <= 1e-9


def test_embedding_is_injective():
    rm = RectifiedMap(registry("ex51:1").hamiltonian())
    p = np.random.default_rng(2).uniform(-3, 3, (100000, 2))
    emb = rm.embed(p[:, 0], p[:, 1])
    assert emb.shape == (100000, 4)
    assert len(np.unique(emb, axis=0)) == len(np.unique(p, axis=0))


@settings(max_examples=30, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.integers(1, 4))
def test_functions_of_F_are_annihilated(a, b, k):
    spec = registry("ex51:1")
    dp = derive_pair(spec.field, spec.hamiltonian())
    F = spec.hamiltonian().F
    h = parse(f"sin({a!r}*X) + {b!r}*X^{k}".replace("X", f"({F})"))
    (v,) = compile_exprs([dp.xiF.lie(h)])(PTS[:200, 0] / 2, PTS[:200, 1] / 2)
    assert np.max(np.abs(v)) <= 1e-9


@settings(max_examples=30, deadline=None)
@given(st.floats(-2, 2), st.floats(0.5, 3), st.floats(-1, 1))
def test_pullbacks_of_antiderivatives_solve_the_equation(a, b, c):
    """L_{xi'_F} H(F, G) = h(F, G) whenever dH/dy' = h."""
    for name in ("ex51:1", "ex52:1"):
        spec = registry(name)
        ham = spec.hamiltonian()
        dp = derive_pair(spec.field, ham)
        rm = RectifiedMap(ham)
        hhat = parse(f"{a!r}*x*cos({b!r}*y) + {c!r}*y^2*exp(x/4)")
        Hhat = parse(f"{a!r}*x*sin({b!r}*y)/{b!r} + {c!r}*y^3/3*exp(x/4)")
        lhs, rhs = compile_exprs([dp.xiF.lie(rm.pull_back(Hhat)), rm.pull_back(hhat)])(PTS[:200, 0] / 2,
                                                                                   PTS[:200, 1] / 2)
        assert np.max(np.abs(lhs - rhs) / np.maximum(1.0, np.abs(rhs))) <= 1e-8


def test_bump_is_flat_at_both_ends():
    assert bump(-0.5) == 0.0 and bump(0.0) == 0.0 and bump(1.0) == 1.0 and bump(2.0) == 1.0
    t = np.linspace(0.05, 0.95, 91)
    assert np.all(np.diff(bump(t)) > 0)
    h = 0.005
    for end in (0.0, 1.0):
        for k in range(1, 5):
            # k-th forward/backward difference around the endpoint stays tiny
            s = np.array([end + h * j for j in range(-k, k + 1)])
            coeffs = np.array([math.comb(2 * k, j) * (-1) ** j for j in range(2 * k + 1)])
            dk = abs(np.dot(coeffs, bump(s))) / (2 * h) ** k
            assert dk <= 1e-6


@pytest.mark.parametrize("name, box", [("ex51:1", Box(-3, 3, -2, 2)),
                                       ("ex52:1", Box(-6, 6, -2 * math.pi, 2 * math.pi)),
                                       ("const", Box(-6, 6, -6, 6))])
def test_positivity_certificate(name, box, ex51, ex52, const_model):
    m = {"ex51:1": ex51, "ex52:1": ex52, "const": const_model}[name]
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(box.xmin, box.xmax, 1500), rng.uniform(box.ymin, box.ymax, 1500)])
    cert = positivity_certificate(m.chart, m.field, depth=8, points=pts)
    assert cert.covered.sum() >= 1000
    assert cert.min_Lf > 0
    assert np.all(cert.f[cert.covered] > 0)
    assert np.all(cert.f <= 1.0)
