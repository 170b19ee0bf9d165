"""Mean-variance asset-liability layer: feasibility, M-constants, the optimal
multiplier, the efficient frontier and the optimal portfolio law."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence, TextIO

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import minimize_scalar

from .backward_systems import (
    DEFAULT_STEPS,
    BackwardGrid,
    LinearSolution,
    RiccatiSolution,
    _require_grid,
    grid_for,
    integrate_forward,
    sample_grid,
    sigma_products,
    solve_feasibility_psi,
    solve_h_systems,
    solve_linear_K,
    solve_riccati,
)
from .errors import EllipticityError, FrontierDomainError, InfeasibleError
from .lq_core import chain_expectation_integral
from .market_model import CoefficientTable, MVALMData, check_mv_assumptions, mv_to_lq
from .regime_chain import RegimeGenerator

FEASIBILITY_TOL = 1e-12
AUTO_GRID_POINTS = 21


def _at(table: CoefficientTable, t: ArrayLike, i: ArrayLike) -> NDArray[np.float64]:
    """Table value at ``(t, i)``; scalar ``t`` or ``t`` shaped like ``i``."""
    t = np.asarray(t, dtype=float)
    i = np.asarray(i)
    if t.ndim == 0:
        return table.sample(t)[i]
    t, i = np.broadcast_arrays(t, i)
    s = table.sample(t.ravel())
    out = s[np.arange(t.size), i.ravel()]
    return out.reshape(t.shape + out.shape[1:])


def _sol_at(values_at, t: ArrayLike, i: ArrayLike) -> NDArray[np.float64]:
    t = np.asarray(t, dtype=float)
    i = np.asarray(i)
    if t.ndim == 0:
        return values_at(t)[i]
    t, i = np.broadcast_arrays(t, i)
    v = values_at(t.ravel())
    return v[np.arange(t.size), i.ravel()].reshape(t.shape)


# ------------------------------------------------------------ feasibility


@dataclass(frozen=True)
class FeasibilityReport:
    metric: float
    EX0T: float
    tol: float = FEASIBILITY_TOL

    @property
    def feasible(self) -> bool:
        return self.metric > self.tol

    def witness_beta(self, z: float) -> float:
        """Scale of the witness portfolio ``beta psi mu`` reaching ``E X(T) = z``."""
        if not self.feasible:
            if z == self.EX0T:
                return 0.0
            raise InfeasibleError(
                f"feasibility metric {self.metric:.3g} is not positive; "
                f"only E[X(T)] = {self.EX0T:.17g} is reachable"
            )
        return (z - self.EX0T) / self.metric

    def to_dict(self) -> dict:
        return {"metric": self.metric, "feasible": self.feasible, "EX0T": self.EX0T}


def expected_uncontrolled_terminal(
    data: MVALMData, gen: RegimeGenerator, grid: BackwardGrid
) -> float:
    """``E[X(T)]`` with zero portfolio, via ``m_i = E[X 1{alpha = i}]``:
    ``m_i' = r_i m_i + b_i p_i + sum_j q_ji m_j``, ``p' = q' p``."""
    ell = gen.num_regimes
    r = sample_grid(data.r, grid).forward_stage
    b = sample_grid(data.b, grid).forward_stage
    qt = gen.q.T
    y0 = np.zeros((2, ell))
    y0[0, data.i0] = 1.0
    y0[1, data.i0] = data.x0

    def rhs(t, y, seg, stage):
        p, m = y
        return np.stack([qt @ p, r[seg, stage] * m + b[seg, stage] * p + qt @ m])

    return float(integrate_forward(rhs, y0, grid)[-1, 1].sum())


def feasibility_metric(
    data: MVALMData, gen: RegimeGenerator, psi: LinearSolution, grid: BackwardGrid
) -> FeasibilityReport:
    """``E int psi(t, alpha)^2 |mu(t, alpha)|^2 dt`` and ``E[X^0(T)]``."""
    _require_grid(grid, psi)

    def integrand(c, sl):
        return psi.values[sl] ** 2 * np.sum(c["mu"] ** 2, axis=-1)

    metric = chain_expectation_integral(grid, gen, data.i0, {"mu": data.mu}, integrand)
    return FeasibilityReport(metric, expected_uncontrolled_terminal(data, gen, grid))


@dataclass(frozen=True)
class WitnessLaw:
    """Open-loop witness portfolio ``beta psi(t, i) mu(t, i)``."""

    data: MVALMData
    psi: LinearSolution
    beta: float

    def __call__(self, t, X, i) -> NDArray[np.float64]:
        X = np.asarray(X, dtype=float)
        mu = _at(self.data.mu, t, i)
        ps = _sol_at(self.psi.at, t, i)
        return np.broadcast_to(self.beta * ps[..., None] * mu, X.shape + mu.shape[-1:])


# ------------------------------------------------------------ M-constants


def _pair_sum(q, P, f1, f2):
    """``sum_j q_ij P_j (f1_i - f1_j)(f2_i - f2_j)`` per node and regime."""
    d1 = f1[..., :, None] - f1[..., None, :]
    d2 = f2[..., :, None] - f2[..., None, :]
    return np.sum(q * P[..., None, :] * d1 * d2, axis=-1)


def compute_M_constants(
    data: MVALMData,
    gen: RegimeGenerator,
    ric: RiccatiSolution,
    h1: LinearSolution,
    h2: LinearSolution,
    grid: BackwardGrid,
) -> tuple[float, float, float]:
    _require_grid(grid, ric, h1, h2)
    q = gen.q
    tabs = {"sigma": data.sigma, "rho": data.rho}

    def m1(c, sl):
        return _pair_sum(q, ric.P[sl], h2.values[sl], h2.values[sl])

    def m2(c, sl):
        return _pair_sum(q, ric.P[sl], h1.values[sl], h2.values[sl])

    def m3(c, sl):
        P, H1 = ric.P[sl], h1.values[sl]
        sig, rho = c["sigma"], c["rho"]
        _, proj = sigma_products(sig, np.zeros(sig.shape[:-1]))
        resid = rho - np.einsum("...nk,...k->...n", proj, rho)
        return _pair_sum(q, P, H1, H1) + P * np.sum(rho * resid, axis=-1)

    i0 = data.i0
    return tuple(chain_expectation_integral(grid, gen, i0, tabs, f) for f in (m1, m2, m3))


# ------------------------------------------------------------- frontier


def _frontier_a(P0: float, h20: float, M1: float) -> float:
    a = P0 * h20 * h20 + M1
    if not 0.0 < a < 1.0:
        raise FrontierDomainError(
            f"P0 h20^2 + M1 = {a:.17g} must lie strictly in (0, 1); frontier undefined"
        )
    return a


def lambda_star(P0: float, h10: float, h20: float, M1: float, M2: float, x: float, z: float) -> float:
    """Maximiser of the concave dual ``lambda -> min_pi J(pi, lambda)``."""
    a = _frontier_a(P0, h20, M1)
    return (M2 + a * z - P0 * h20 * (x - h10)) / (1.0 - a)


@dataclass(frozen=True)
class FrontierReport:
    P0: float
    h10: float
    h20: float
    M1: float
    M2: float
    M3: float
    x: float
    z: float

    @property
    def a(self) -> float:
        return self.P0 * self.h20 ** 2 + self.M1

    @property
    def margin(self) -> float:
        """Distance of ``P0 h20^2 + M1`` to the ends of (0, 1)."""
        return min(self.a, 1.0 - self.a)

    @property
    def slope(self) -> float:
        return self.a / (1.0 - self.a)

    @property
    def vertex_z(self) -> float:
        return (self.P0 * self.h20 * (self.x - self.h10) - self.M2) / self.a

    @property
    def base_var(self) -> float:
        c = self.P0 * self.h20 * (self.x - self.h10)
        return -((self.M2 - c) ** 2) / self.a + self.M3 + self.P0 * (self.x - self.h10) ** 2

    def lambda_star_at(self, z: float) -> float:
        return lambda_star(self.P0, self.h10, self.h20, self.M1, self.M2, self.x, z)

    @property
    def lambda_star(self) -> float:
        return self.lambda_star_at(self.z)

    def variance(self, z: ArrayLike) -> NDArray[np.float64] | float:
        v = self.slope * (np.asarray(z, dtype=float) - self.vertex_z) ** 2 + self.base_var
        return float(v) if np.ndim(v) == 0 else v

    def curve(self, zs: Sequence[float]) -> list[tuple[float, float, float, float]]:
        """Rows ``(z, variance, stddev, lambdaStar)``; stddev clips tiny
        negative round-off at 0."""
        rows = []
        for z in zs:
            v = self.variance(z)
            rows.append((float(z), v, float(np.sqrt(max(v, 0.0))), self.lambda_star_at(z)))
        return rows

    def to_dict(self) -> dict:
        return {
            "P0": self.P0, "h10": self.h10, "h20": self.h20,
            "M1": self.M1, "M2": self.M2, "M3": self.M3,
            "x": self.x, "z": self.z, "lambdaStar": self.lambda_star,
            "slope": self.slope, "vertexZ": self.vertex_z, "baseVar": self.base_var,
            "variance": self.variance(self.z), "domainMargin": self.margin,
        }


def write_frontier_csv(out: TextIO, report: FrontierReport, zs: Sequence[float]) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["z", "variance", "stddev", "lambdaStar"])
    for row in report.curve(zs):
        w.writerow([format(v, ".17g") for v in row])


def auto_z_grid(report: FrontierReport, points: int = AUTO_GRID_POINTS) -> NDArray[np.float64]:
    """``vertexZ +- 3 sqrt(baseVar + 1) / slope``."""
    half = 3.0 * np.sqrt(max(report.base_var, 0.0) + 1.0) / report.slope
    return np.linspace(report.vertex_z - half, report.vertex_z + half, points)


def efficient_frontier(
    data: MVALMData,
    gen: RegimeGenerator,
    ric: RiccatiSolution,
    h1: LinearSolution,
    h2: LinearSolution,
    grid: BackwardGrid,
    feasibility: FeasibilityReport | None = None,
) -> FrontierReport:
    if feasibility is not None and not feasibility.feasible:
        raise InfeasibleError(
            f"feasibility metric {feasibility.metric:.3g} is not positive: "
            "no portfolio moves the terminal mean"
        )
    M1, M2, M3 = compute_M_constants(data, gen, ric, h1, h2, grid)
    i0 = data.i0
    rep = FrontierReport(
        float(ric.P[0, i0]), float(h1.values[0, i0]), float(h2.values[0, i0]),
        M1, M2, M3, float(data.x0), float(data.z),
    )
    _frontier_a(rep.P0, rep.h20, rep.M1)
    return rep


# -------------------------------------------------------------- feedback


def _mv_parts(t, i, data, h1, h2, lam, z, gather=True):
    if gather and np.ndim(t) == 0 and np.ndim(i) > 0:
        # one solve per regime, then gather
        gain, offset = _mv_parts(t, np.arange(data.num_regimes), data, h1, h2, lam, z, False)
        i = np.asarray(i)
        return gain[i], offset[i]
    sig = _at(data.sigma, t, i)
    mu = _at(data.mu, t, i)
    rho = _at(data.rho, t, i)
    target = _sol_at(h1.at, t, i) + (lam + z) * _sol_at(h2.at, t, i)
    SS = sig @ np.swapaxes(sig, -1, -2)
    try:
        L = np.linalg.cholesky(SS)
    except np.linalg.LinAlgError as exc:
        raise EllipticityError("sigma sigma' is not positive definite") from exc

    def solve(v):
        y = np.linalg.solve(L, v[..., None])
        return np.linalg.solve(np.swapaxes(L, -1, -2), y)[..., 0]

    gain = solve(mu)
    hedge = solve(np.einsum("...mn,...n->...m", sig, rho))
    return gain, hedge - gain * target[..., None]


def mv_feedback(
    t: ArrayLike,
    X: ArrayLike,
    i: ArrayLike,
    data: MVALMData,
    ric: RiccatiSolution,
    h1: LinearSolution,
    h2: LinearSolution,
    lam: float,
    z: float,
) -> NDArray[np.float64]:
    """``pi* = -(sigma sigma')^{-1} [mu (X - h1 - (lam + z) h2) + sigma rho]``.

    ``t`` is a scalar or shaped like ``i``; ``X`` broadcasts with ``i``.
    """
    _require_grid(ric.grid, h1, h2)
    X = np.asarray(X, dtype=float)
    gain, offset = _mv_parts(t, i, data, h1, h2, lam, z)
    return -(gain * X[..., None] + offset)


@dataclass(frozen=True)
class MVFeedbackLaw:
    data: MVALMData
    ric: RiccatiSolution
    h1: LinearSolution
    h2: LinearSolution
    lam: float
    z: float

    def __call__(self, t, X, i) -> NDArray[np.float64]:
        return mv_feedback(t, X, i, self.data, self.ric, self.h1, self.h2, self.lam, self.z)

    def affine(self, t, i):
        """(gain, offset) with ``pi* = -(gain X + offset)``."""
        return _mv_parts(t, i, self.data, self.h1, self.h2, self.lam, self.z)


# ---------------------------------------------------------- relaxed value


def relaxed_value(
    data: MVALMData,
    gen: RegimeGenerator,
    ric: RiccatiSolution,
    K: LinearSolution,
    grid: BackwardGrid,
    lam: float,
) -> float:
    """``min_pi E(X(T) - (lam + z))^2 - lam^2`` from ``P`` and ``K`` (terminal
    ``lam + z``):

    ``P0 x^2 - 2 K0 x + (lam + z)^2 - lam^2 + E int [P rho'rho - 2 K b
    - (1/P)(P sigma rho - K mu)'(sigma sigma')^{-1}(P sigma rho - K mu)] dt``.
    """
    _require_grid(grid, ric, K)

    def integrand(c, sl):
        P, Kv = ric.P[sl], K.values[sl]
        sig, rho, mu = c["sigma"], c["rho"], c["mu"]
        w = P[..., None] * np.einsum("...mn,...n->...m", sig, rho) - Kv[..., None] * mu
        SS = sig @ np.swapaxes(sig, -1, -2)
        quad = np.sum(w * np.linalg.solve(SS, w[..., None])[..., 0], axis=-1)
        return P * np.sum(rho ** 2, axis=-1) - 2.0 * Kv * c["b"] - quad / P

    running = chain_expectation_integral(grid, gen, data.i0, data.tables(), integrand)
    i0, x = data.i0, data.x0
    g = lam + data.z
    return float(ric.P[0, i0] * x * x - 2.0 * K.values[0, i0] * x + g * g - lam * lam + running)


# -------------------------------------------------------------- pipeline


@dataclass(frozen=True)
class MVSolution:
    """Everything the frontier and the optimal law need, on one grid."""

    data: MVALMData
    gen: RegimeGenerator
    grid: BackwardGrid
    ric: RiccatiSolution
    h1: LinearSolution
    h2: LinearSolution
    psi: LinearSolution
    feasibility: FeasibilityReport
    frontier: FrontierReport

    def law(self, z: float | None = None) -> MVFeedbackLaw:
        z = self.data.z if z is None else float(z)
        return MVFeedbackLaw(self.data, self.ric, self.h1, self.h2, self.frontier.lambda_star_at(z), z)

    def relaxed(self, lam: float) -> float:
        K = solve_linear_K(mv_to_lq(self.data, lam), self.gen, self.ric, self.grid)
        return relaxed_value(self.data, self.gen, self.ric, K, self.grid, lam)


def solve_mv(data: MVALMData, gen: RegimeGenerator, steps: int = DEFAULT_STEPS) -> MVSolution:
    """Ellipticity check, then psi, P, h1, h2, feasibility and the frontier."""
    check_mv_assumptions(data)
    grid = grid_for(data, steps)
    psi = solve_feasibility_psi(data, gen, grid)
    feas = feasibility_metric(data, gen, psi, grid)
    if not feas.feasible:
        raise InfeasibleError(
            f"feasibility metric {feas.metric:.3g} is not positive: "
            "no portfolio moves the terminal mean"
        )
    ric = solve_riccati(mv_to_lq(data, 0.0), gen, grid)
    h1, h2 = solve_h_systems(data, gen, ric, grid)
    front = efficient_frontier(data, gen, ric, h1, h2, grid, feas)
    return MVSolution(data, gen, grid, ric, h1, h2, psi, feas, front)


def maximize_relaxed_value(sol: MVSolution, z: float, width: float | None = None) -> tuple[float, float]:
    """Numerical dual maximisation over ``lam* +- width`` (default
    ``5 (1 + |lam*|)``); returns ``(argmax, max)``."""
    data = sol.data.with_target(z)
    lam0 = sol.frontier.lambda_star_at(z)
    w = 5.0 * (1.0 + abs(lam0)) if width is None else width

    def neg(lam):
        K = solve_linear_K(mv_to_lq(data, lam), sol.gen, sol.ric, sol.grid)
        return -relaxed_value(data, sol.gen, sol.ric, K, sol.grid, lam)

    res = minimize_scalar(neg, bounds=(lam0 - w, lam0 + w), method="bounded",
                          options={"xatol": 1e-10})
    return float(res.x), float(-res.fun)

