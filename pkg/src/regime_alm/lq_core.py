"""Optimal feedback law and optimal value of the regime-switching LQ problem."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .backward_systems import (
    BackwardGrid,
    LinearSolution,
    RiccatiSolution,
    _require_grid,
    _spd_solve,
    sample_grid,
    time_integral,
)
from .market_model import LQData
from .regime_chain import RegimeGenerator, occupation_distribution


def _point_mass(i0: int, ell: int) -> NDArray[np.float64]:
    p0 = np.zeros(ell)
    p0[i0] = 1.0
    return p0


def _sides(grid: BackwardGrid, tables: dict):
    """Yield (coefficients, node slice) for the right-limit and left-limit
    node layouts used by :func:`time_integral`."""
    S = {k: sample_grid(t, grid) for k, t in tables.items()}
    N = grid.step_count
    yield {k: s.right for k, s in S.items()}, slice(0, N)
    yield {k: s.left for k, s in S.items()}, slice(1, N + 1)


def chain_expectation_integral(
    grid: BackwardGrid,
    gen: RegimeGenerator,
    i0: int,
    tables: dict,
    integrand: Callable[[dict, slice], NDArray[np.float64]],
) -> float:
    """``E int_0^T f(t, alpha_t) dt`` with the chain started in ``i0``.

    ``integrand(coeffs, nodes)`` returns per-regime values, shape
    ``(len(nodes), regimes)``, from coefficient samples and a node slice.
    """
    occ = occupation_distribution(gen, _point_mass(i0, gen.num_regimes), grid.nodes)
    right, left = (
        np.sum(occ[sl] * integrand(S, sl), axis=-1) for S, sl in _sides(grid, tables)
    )
    return time_integral(grid, right, left)


def _affine_parts(t, i, ric, K, data):
    """Gain and offset with ``u* = -(gain X + offset)`` in regime(s) ``i``."""
    t = float(t)
    i = np.asarray(i)
    c = {k: tab.sample(t)[i] for k, tab in data.tables().items()}
    P = ric.at(t)[i]
    Kv = K.at(t)[i]
    D = c["D"]
    Dt = np.swapaxes(D, -1, -2)
    M = c["R"] + P[..., None, None] * (Dt @ D)
    slope = P[..., None] * (np.einsum("...mn,...n->...m", Dt, c["C"]) + c["B"])
    shift = (
        P[..., None] * np.einsum("...mn,...n->...m", Dt, c["rho"])
        - Kv[..., None] * c["B"]
        - np.einsum("...mk,...k->...m", c["R"], c["p"])
    )
    return _spd_solve(M, slope, t), _spd_solve(M, shift, t)


def feedback_control(
    t: float, X: ArrayLike, i: ArrayLike, ric: RiccatiSolution, K: LinearSolution, data: LQData
) -> NDArray[np.float64]:
    """``u* = -(R + P D'D)^{-1} [(P D'C + P B) X + P D'rho - K B - R p]``.

    ``X`` and ``i`` broadcast together; the result has a trailing axis of
    length m.
    """
    X = np.asarray(X, dtype=float)
    gain, offset = _affine_parts(t, i, ric, K, data)
    return -(gain * X[..., None] + offset)


@dataclass(frozen=True)
class FeedbackLaw:
    """``u*(t, X, i)`` bound to a Riccati solution and a K solution."""

    ric: RiccatiSolution
    K: LinearSolution
    data: LQData

    def __call__(self, t: float, X: ArrayLike, i: ArrayLike) -> NDArray[np.float64]:
        return feedback_control(t, X, i, self.ric, self.K, self.data)

    def affine(self, t: float, i: ArrayLike) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """(gain, offset) with ``u* = -(gain X + offset)``."""
        return _affine_parts(t, i, self.ric, self.K, self.data)


@dataclass(frozen=True)
class LQValueReport:
    V: float
    quadratic: float
    linear: float
    terminal: float
    running_integral: float

    def to_dict(self) -> dict:
        return {
            "V": self.V, "quadratic": self.quadratic, "linear": self.linear,
            "terminal": self.terminal, "runningIntegral": self.running_integral,
        }


def _gain_quadratic(c: dict, P: NDArray, w: NDArray) -> NDArray[np.float64]:
    """``w' (R + P D'D)^{-1} w`` per node and regime."""
    D = c["D"]
    M = c["R"] + P[..., None, None] * (np.swapaxes(D, -1, -2) @ D)
    return np.sum(w * _spd_solve(M, w), axis=-1)


def lq_optimal_value(
    x: float, i0: int, ric: RiccatiSolution, K: LinearSolution, data: LQData, gen: RegimeGenerator
) -> LQValueReport:
    """``V = P0 x^2 - 2 K0 x + E[G g^2] + E int (P rho'rho - 2 K b + Q q^2
    + p'Rp - w'(R + P D'D)^{-1} w) dt`` with ``w = D'(P rho) - K B - R p``."""
    grid = ric.grid
    _require_grid(grid, K)

    def integrand(c, sl):
        P, Kv = ric.P[sl], K.values[sl]
        Dt = np.swapaxes(c["D"], -1, -2)
        w = (
            P[..., None] * np.einsum("...mn,...n->...m", Dt, c["rho"])
            - Kv[..., None] * c["B"]
            - np.einsum("...mk,...k->...m", c["R"], c["p"])
        )
        pRp = np.einsum("...m,...mk,...k->...", c["p"], c["R"], c["p"])
        return (
            P * np.sum(c["rho"] ** 2, axis=-1) - 2.0 * Kv * c["b"] + c["Q"] * c["q"] ** 2
            + pRp - _gain_quadratic(c, P, w)
        )

    running = chain_expectation_integral(grid, gen, i0, data.tables(), integrand)
    pT = occupation_distribution(gen, _point_mass(i0, gen.num_regimes), grid.nodes)[-1]
    quad = float(ric.P[0, i0] * x * x)
    lin = float(-2.0 * K.values[0, i0] * x)
    term = float(np.sum(pT * data.G * data.g ** 2))
    return LQValueReport(quad + lin + term + running, quad, lin, term, running)


def lq_value_h_form(
    x: float, i0: int, ric: RiccatiSolution, h: LinearSolution, data: LQData, gen: RegimeGenerator
) -> LQValueReport:
    """Same value through ``h = K/P``:

    ``P0 (x - h0)^2 + E int [Q (h-q)^2 + P v'(I - P D M^{-1} D') v
    + p'(R - R M^{-1} R) p + 2 P v' D M^{-1} R p
    + sum_j q_ij P_j (h_i - h_j)^2] dt`` with ``v = rho + h C``,
    ``M = R + P D'D``. The report's ``quadratic`` field holds
    ``P0 (x - h0)^2``; ``linear`` and ``terminal`` are zero.
    """
    grid = ric.grid
    _require_grid(grid, h)
    q = gen.q

    def integrand(c, sl):
        P, hv = ric.P[sl], h.values[sl]
        D, R, p = c["D"], c["R"], c["p"]
        Dt = np.swapaxes(D, -1, -2)
        M = R + P[..., None, None] * (Dt @ D)
        v = c["rho"] + hv[..., None] * c["C"]
        Dtv = np.einsum("...mn,...n->...m", Dt, v)
        Rp = np.einsum("...mk,...k->...m", R, p)
        proj = np.sum(v * v, axis=-1) - P * np.sum(Dtv * _spd_solve(M, Dtv), axis=-1)
        pRp = np.sum(p * Rp, axis=-1) - np.sum(Rp * _spd_solve(M, Rp), axis=-1)
        cross = 2.0 * P * np.sum(Dtv * _spd_solve(M, Rp), axis=-1)
        diff = hv[..., :, None] - hv[..., None, :]
        jumps = np.sum(q * P[..., None, :] * diff ** 2, axis=-1)
        return c["Q"] * (hv - c["q"]) ** 2 + P * proj + pRp + cross + jumps

    running = chain_expectation_integral(grid, gen, i0, data.tables(), integrand)
    quad = float(ric.P[0, i0] * (x - h.values[0, i0]) ** 2)
    return LQValueReport(quad + running, quad, 0.0, 0.0, running)
