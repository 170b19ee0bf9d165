import io

import numpy as np
import pytest
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from regime_alm.backward_systems import (
    _spd_solve,
    grid_for,
    integrate_backward,
    interpolate,
    make_grid,
    sample_grid,
    solve_by_contraction,
    solve_feasibility_psi,
    solve_h_mv,
    solve_h_systems,
    solve_linear_h,
    solve_linear_K,
    solve_riccati,
    time_integral,
    write_csv,
)
from regime_alm.errors import (
    BlowUpError,
    ConfigurationError,
    ConvergenceError,
    GainSingularityError,
    PositivityError,
)
from regime_alm.market_model import CoefficientTable, LQData, mv_to_lq

from problems import GEN3, const, random_lq, single_regime


def _mv3(b=0.0):
    """Three regimes, scalar market, constant coefficients."""
    from regime_alm.market_model import MVALMData
    from regime_alm.regime_chain import validate_generator

    r = np.array([0.02, 0.05, 0.08])
    mu = np.array([0.1, 0.25, 0.15])
    sig = np.array([0.2, 0.35, 0.3])
    T = 1.5
    data = MVALMData(T, const(r, T), const(mu[:, None], T), const(sig[:, None, None], T),
                     const([b] * 3, T), const(np.zeros((3, 1)), T), 1.0, 0, 1.1, 0.01)
    return data, validate_generator(GEN3), r, (mu / sig) ** 2


def test_grid_contains_breakpoints():
    g = make_grid(1.0, 10, [0.25, 0.3333, 1.0, 0.0])
    assert 0.25 in g.nodes and 0.3333 in g.nodes
    assert g.nodes[0] == 0.0 and g.nodes[-1] == 1.0
    assert np.all(np.diff(g.nodes) > 0)
    np.testing.assert_array_equal(g.nodes[g.breaks], [0.0, 0.25, 0.3333, 1.0])
    # a breakpoint on a uniform node does not duplicate it
    assert make_grid(1.0, 10, [0.5]).step_count == 10


def test_single_regime_riccati_closed_form():
    data, gen = single_regime()
    g = grid_for(data, 2000)
    ric = solve_riccati(mv_to_lq(data, 0.0), gen, g)
    assert ric.P[0, 0] == pytest.approx(np.exp((2 * 0.05 - 4 / 9) * 1.0), abs=1e-12)
    np.testing.assert_allclose(ric.Gamma[:, 0, 0], 0.2 / 0.09, rtol=1e-13)
    assert np.all(ric.Lambda == 0.0)


def test_mv_systems_match_matrix_exponentials():
    data, gen, r, th2 = _mv3()
    q = gen.q
    T = data.horizon
    g = grid_for(data, 1500)
    ric = solve_riccati(mv_to_lq(data, 0.0), gen, g)
    P0 = expm(T * (np.diag(2 * r - th2) + q)) @ np.ones(3)
    np.testing.assert_allclose(ric.P[0], P0, rtol=1e-11)

    lam = 0.4
    K = solve_linear_K(mv_to_lq(data, lam), gen, ric, g)
    Kt = expm(T * (np.diag(r - th2) + q)) @ np.ones(3)
    np.testing.assert_allclose(K.initial, (lam + data.z) * Kt, rtol=1e-11)

    _, h2 = solve_h_systems(data, gen, ric, g)
    np.testing.assert_allclose(h2.initial, Kt / P0, rtol=1e-11)

    psi = solve_feasibility_psi(data, gen, g)
    np.testing.assert_allclose(psi.initial, expm(T * (np.diag(r) + q)) @ np.ones(3), rtol=1e-11)


def _scalar_lq(ell=2, T=1.0):
    c = lambda v: const(np.asarray(v, float), T)  # noqa: E731
    return LQData(
        T, c([0.3, -0.2][:ell]), c([[0.8], [1.1]][:ell]), c([[0.4], [0.1]][:ell]),
        c([[[0.5]], [[0.2]]][:ell]), c([0.1, 0.0][:ell]), c([[0.2], [0.0]][:ell]),
        c([1.0, 0.5][:ell]), c([0.3, -0.1][:ell]), c([[[0.7]], [[1.4]]][:ell]),
        c([[0.0], [0.2]][:ell]), np.array([1.0, 2.0][:ell]), np.array([0.5, -0.3][:ell]), 0.5,
    )


def _riccati_reference(data, q):
    A, B, C, D = (np.array([getattr(data, k).values[i, 0].ravel()[0] for i in range(2)])
                  for k in ("A", "B", "C", "D"))
    Qc = data.Q.values[:, 0]
    R = data.R.values[:, 0, 0, 0]

    def f(t, P):
        v = B + D * C
        H = -P * P * v * v / (R + P * D * D)
        return -((2 * A + C * C) * P + Qc + H + q @ P)

    sol = solve_ivp(f, (data.horizon, 0.0), data.G, method="DOP853", rtol=1e-13, atol=1e-14)
    return sol.y[:, -1]


def test_rk4_is_fourth_order():
    from regime_alm.regime_chain import validate_generator

    data = _scalar_lq()
    gen = validate_generator([[-1.0, 1.0], [2.0, -2.0]])
    ref = _riccati_reference(data, gen.q)
    errs = []
    for N in (8, 16, 32):
        ric = solve_riccati(data, gen, make_grid(1.0, N))
        errs.append(np.abs(ric.P[0] - ref).max())
    assert errs[0] / errs[1] >= 12 and errs[1] / errs[2] >= 12


@pytest.mark.parametrize("seed, ell, m, n, singular", [(21, 2, 2, 3, False), (22, 3, 1, 2, True)])
def test_h_equals_K_over_P(seed, ell, m, n, singular):
    data, gen = random_lq(seed, ell, m, n, singular)
    g = grid_for(data, 600)
    ric = solve_riccati(data, gen, g)
    K = solve_linear_K(data, gen, ric, g)
    h = solve_linear_h(data, gen, ric, g)
    np.testing.assert_allclose(h.values, K.values / ric.P, atol=1e-10, rtol=0)
    assert ric.min_P > 0


def test_contraction_equals_monolithic():
    data, gen = random_lq(8, 3, 2, 2)
    g = grid_for(data, 500)
    ric = solve_riccati(data, gen, g)
    K = solve_linear_K(data, gen, ric, g)
    Kc = solve_by_contraction(data, gen, ric, g, tol=1e-12)
    assert np.abs(Kc.values - K.values).max() <= 1e-10
    assert Kc.residual <= 1e-12
    with pytest.raises(ConvergenceError) as err:
        solve_by_contraction(data, gen, ric, g, max_iter=2)
    assert err.value.residual > 0


def test_contraction_without_coupling_takes_one_iteration():
    data, gen = single_regime()
    lq = mv_to_lq(data, 0.3)
    g = grid_for(data, 200)
    ric = solve_riccati(lq, gen, g)
    Kc = solve_by_contraction(lq, gen, ric, g)
    assert Kc.iterations == 1
    np.testing.assert_array_equal(Kc.values, solve_linear_K(lq, gen, ric, g).values)


def test_grid_mismatch_is_rejected():
    data, gen = single_regime()
    lq = mv_to_lq(data, 0.0)
    ric = solve_riccati(lq, gen, grid_for(data, 100))
    with pytest.raises(ConfigurationError):
        solve_linear_K(lq, gen, ric, grid_for(data, 101))
    with pytest.raises(ConfigurationError):
        solve_h_mv(data, gen, ric, grid_for(data, 50), 1.0)


def test_positivity_failure():
    from regime_alm.regime_chain import validate_generator

    c = lambda v: const(np.asarray(v, float))  # noqa: E731
    data = LQData(1.0, c([0.0]), c([[0.0]]), c([[0.0]]), c([[[0.0]]]), c([0.0]), c([[0.0]]),
                  c([-5.0]), c([0.0]), c([[[1.0]]]), c([[0.0]]), np.array([1.0]), np.array([0.0]), 0.5)
    with pytest.raises(PositivityError):
        solve_riccati(data, validate_generator([[0.0]]), make_grid(1.0, 100))


def test_gain_singularity():
    with pytest.raises(GainSingularityError):
        _spd_solve(np.array([[[1.0, 2.0], [2.0, 1.0]]]), np.ones((1, 2)))
    with pytest.raises(GainSingularityError):
        _spd_solve(np.array([[[1.0, 0.0], [0.0, 1e-14]]]), np.ones((1, 2)))
    with pytest.raises(GainSingularityError):
        _spd_solve(np.array([[[0.0]]]), np.ones((1, 1)))
    x = _spd_solve(np.array([[[2.0, 1.0], [1.0, 3.0]]]), np.array([[1.0, 2.0]]))
    np.testing.assert_allclose(x, [[0.2, 0.6]], atol=1e-15)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_blow_up_is_reported():
    g = make_grid(2.0, 50)
    with pytest.raises(BlowUpError) as err:
        integrate_backward(lambda t, y, s, k: -(y ** 3), np.array([10.0]), g)
    assert 0.0 <= err.value.t < 2.0


def test_time_integral_handles_jumps():
    g = make_grid(1.0, 10, [0.35])
    t = g.nodes
    f1 = lambda s: 1.0 + s * s  # noqa: E731
    f2 = lambda s: -2.0 + 3.0 * s  # noqa: E731
    right = np.where(t[:-1] < 0.35, f1(t[:-1]), f2(t[:-1]))
    left = np.where(t[1:] <= 0.35, f1(t[1:]), f2(t[1:]))
    exact = (0.35 + 0.35 ** 3 / 3) + (-2.0 * 0.65 + 1.5 * (1.0 - 0.35 ** 2))
    assert time_integral(g, right, left) == pytest.approx(exact, abs=1e-13)


def test_piecewise_constant_sampling_uses_segment_piece():
    tab = CoefficientTable(np.array([0.0, 0.5, 1.0]), np.array([[1.0, 2.0, 3.0]]))
    S = sample_grid(tab, make_grid(1.0, 4, [0.5]))
    # segment [0.25, 0.5] sees the first piece at both ends
    assert S.pos[1, :, 0].tolist() == [1.0, 1.0, 1.0]
    assert S.pos[2, :, 0].tolist() == [2.0, 2.0, 2.0]
    assert S.stage.shape == (4, 4, 1)


def test_interpolation_is_exact_at_nodes_and_smooth_between():
    data, gen, r, th2 = _mv3()
    g = grid_for(data, 400)
    psi = solve_feasibility_psi(data, gen, g)
    np.testing.assert_allclose(psi.at(g.nodes), psi.values, rtol=0, atol=1e-15)
    t = 0.123456
    exact = expm((data.horizon - t) * (np.diag(r) + gen.q)) @ np.ones(3)
    np.testing.assert_allclose(psi.at(t), exact, rtol=1e-10)
    np.testing.assert_allclose(interpolate(g, psi.values, np.array([t, t])), [exact, exact], rtol=1e-10)


def test_csv_export():
    data, gen = single_regime()
    g = make_grid(1.0, 2)
    ric = solve_riccati(mv_to_lq(data, 0.0), gen, g)
    buf = io.StringIO()
    write_csv(buf, g, ric.P)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "t,regime,value"
    assert len(lines) == 4
    t, reg, v = lines[1].split(",")
    assert (t, reg) == ("0", "1")
    assert float(v) == ric.P[0, 0]
