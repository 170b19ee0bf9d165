import numpy as np
import pytest
from scipy.integrate import quad
from scipy.linalg import expm

from regime_alm.backward_systems import grid_for, solve_linear_h, solve_linear_K, solve_riccati
from regime_alm.lq_core import (
    FeedbackLaw,
    chain_expectation_integral,
    feedback_control,
    lq_optimal_value,
    lq_value_h_form,
)
from regime_alm.market_model import mv_to_lq
from regime_alm.regime_chain import validate_generator

from problems import GEN3, random_lq, single_regime, two_regime_scalar


def _solve(data, gen, steps=600):
    g = grid_for(data, steps)
    ric = solve_riccati(data, gen, g)
    return g, ric, solve_linear_K(data, gen, ric, g), solve_linear_h(data, gen, ric, g)


def test_chain_expectation_of_regime_indicator():
    gen = validate_generator(GEN3)
    data, _ = random_lq(3, 3, 1, 1)
    g = grid_for(data, 400)
    got = chain_expectation_integral(g, gen, 1, {}, lambda c, sl: np.tile([0.0, 0.0, 1.0], (g.nodes[sl].size, 1)))
    exact = quad(lambda t: expm(gen.q * t)[1, 2], 0.0, data.horizon, epsabs=1e-13)[0]
    assert got == pytest.approx(exact, abs=1e-10)


@pytest.mark.parametrize("seed, ell, m, n, singular", [(31, 2, 2, 3, False), (32, 2, 1, 2, True)])
def test_value_routes_agree(seed, ell, m, n, singular):
    data, gen = random_lq(seed, ell, m, n, singular)
    g, ric, K, h = _solve(data, gen)
    for x in (-0.7, 0.0, 2.0):
        for i0 in range(ell):
            v1 = lq_optimal_value(x, i0, ric, K, data, gen)
            v2 = lq_value_h_form(x, i0, ric, h, data, gen)
            assert abs(v1.V - v2.V) <= 1e-9 * (1 + abs(v1.V))
            assert v1.V == pytest.approx(v1.quadratic + v1.linear + v1.terminal + v1.running_integral, abs=1e-12)


def test_value_is_convex_quadratic_in_x():
    data, gen = random_lq(33, 2, 1, 1)
    g, ric, K, h = _solve(data, gen, 300)
    xs = np.array([-1.0, 0.0, 1.0])
    V = np.array([lq_optimal_value(x, 0, ric, K, data, gen).V for x in xs])
    assert V[0] + V[2] - 2 * V[1] == pytest.approx(2 * ric.P[0, 0], rel=1e-12)


def test_single_regime_mv_feedback_closed_form():
    data, gen = single_regime()
    lq = mv_to_lq(data, 0.1)
    g, ric, K, _ = _solve(lq, gen, 1000)
    target = 1.3
    for t in (0.0, 0.37, 0.9):
        for X in (0.5, 1.0, 2.0):
            u = feedback_control(t, X, 0, ric, K, lq)
            expect = -(0.2 / 0.09) * (X - target * np.exp(-0.05 * (1.0 - t)))
            assert u.shape == (1,)
            assert u[0] == pytest.approx(expect, rel=1e-10, abs=1e-12)


def test_feedback_is_vectorised_and_affine():
    data, gen = two_regime_scalar()
    lq = mv_to_lq(data, 0.2)
    g, ric, K, _ = _solve(lq, gen, 300)
    law = FeedbackLaw(ric, K, lq)
    X = np.array([0.1, 1.0, 3.0])
    i = np.array([0, 1, 1])
    u = law(0.4, X, i)
    assert u.shape == (3, 1)
    for k in range(3):
        np.testing.assert_allclose(u[k], feedback_control(0.4, X[k], i[k], ric, K, lq), rtol=1e-14)
    gain, offset = law.affine(0.4, i)
    np.testing.assert_allclose(u, -(gain * X[:, None] + offset), rtol=1e-14)


def test_report_serialisation():
    data, gen = random_lq(34, 1, 1, 1)
    g, ric, K, _ = _solve(data, gen, 100)
    d = lq_optimal_value(0.5, 0, ric, K, data, gen).to_dict()
    assert set(d) == {"V", "quadratic", "linear", "terminal", "runningIntegral"}
