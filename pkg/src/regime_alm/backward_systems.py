"""Terminal-value RK4 integrators for the coupled per-regime systems.

With coefficients deterministic in time for each regime the martingale
integrands of the backward equations vanish, so every system reduces to
an ODE in ``t`` coupled across regimes through the generator. Solved here:

* the Riccati system for ``P`` (with feedback gain ``Gamma``),
* the linear system for ``K`` (monolithic and by Picard contraction),
* the general ``h = K/P`` system,
* the mean-variance ``h1`` / ``h2`` split and the feasibility system ``psi``.

RK4 stage convention (backward step over segment ``k`` = ``[t_k, t_{k+1}]``):
stage 0 at ``t_{k+1}`` (left limit of the coefficients), stages 1-2 at the
midpoint, stage 3 at ``t_k`` (right limit). Stage values of ``P`` are stored so
that the linear systems reuse exactly the ``P`` the Riccati solve saw.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, TextIO

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.integrate import simpson
from scipy.interpolate import CubicSpline

from .errors import (
    BlowUpError,
    ConfigurationError,
    ConvergenceError,
    EllipticityError,
    GainSingularityError,
    PositivityError,
)
from .market_model import CoefficientTable, LQData, MVALMData
from .regime_chain import RegimeGenerator

DEFAULT_STEPS = 2000
POSITIVITY_FLOOR = 1e-12
MAX_CONDITION = 1e12
PICARD_TOL = 1e-10
PICARD_MAX_ITER = 200

# stage -> sample position (0 = segment start, 1 = midpoint, 2 = segment end)
_BACKWARD_POS = (2, 1, 1, 0)
FORWARD_POS = (0, 1, 1, 2)


@dataclass(frozen=True)
class BackwardGrid:
    """Time nodes on [0, T], stored increasing, integrated from T down to 0.

    ``breaks`` are the indices of nodes that coincide with coefficient-table
    breakpoints (always including 0 and the last node).
    """

    nodes: NDArray[np.float64]
    breaks: NDArray[np.int64]

    @property
    def horizon(self) -> float:
        return float(self.nodes[-1])

    @property
    def step_count(self) -> int:
        return self.nodes.size - 1

    @property
    def mids(self) -> NDArray[np.float64]:
        return 0.5 * (self.nodes[:-1] + self.nodes[1:])

    def same_as(self, other: "BackwardGrid") -> bool:
        return self is other or (
            self.nodes.shape == other.nodes.shape and np.array_equal(self.nodes, other.nodes)
        )


def make_grid(horizon: float, steps: int = DEFAULT_STEPS, breakpoints: Iterable[float] = ()) -> BackwardGrid:
    """Uniform grid with ``steps`` intervals, refined so that every
    breakpoint in ``(0, horizon)`` is a node."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    T = float(horizon)
    uniform = np.linspace(0.0, T, steps + 1)
    bps = np.array(sorted({float(b) for b in breakpoints if 0.0 < b < T}))
    snap = 1e-12 * max(T, 1.0)
    if bps.size:
        # drop uniform nodes that nearly coincide with a breakpoint
        near = np.min(np.abs(uniform[:, None] - bps[None, :]), axis=1) <= snap
        near[[0, -1]] = False
        nodes = np.union1d(uniform[~near], bps)
    else:
        nodes = uniform
    breaks = np.searchsorted(nodes, np.concatenate([[0.0], bps, [T]]))
    nodes.setflags(write=False)
    breaks.setflags(write=False)
    return BackwardGrid(nodes, breaks)


def grid_for(data: LQData | MVALMData, steps: int = DEFAULT_STEPS) -> BackwardGrid:
    return make_grid(data.horizon, steps, data.breakpoints())


@dataclass(frozen=True)
class GridSamples:
    """Coefficient samples laid out for integration on a grid.

    ``pos`` has shape ``(N, 3, regimes, ...)`` for segment start / midpoint /
    end, all taken on the segment's own piece of a piecewise-constant table.
    """

    pos: NDArray[np.float64]

    @property
    def stage(self) -> NDArray[np.float64]:
        return self.pos[:, _BACKWARD_POS]

    @property
    def forward_stage(self) -> NDArray[np.float64]:
        return self.pos[:, FORWARD_POS]

    @property
    def right(self) -> NDArray[np.float64]:
        """Values at nodes 0..N-1 (right limits)."""
        return self.pos[:, 0]

    @property
    def left(self) -> NDArray[np.float64]:
        """Values at nodes 1..N (left limits)."""
        return self.pos[:, 2]

    @property
    def nodes(self) -> NDArray[np.float64]:
        """Right limits at nodes 0..N-1 and the left limit at the last node."""
        return np.concatenate([self.pos[:, 0], self.pos[-1:, 2]])


def sample_grid(table: CoefficientTable, grid: BackwardGrid) -> GridSamples:
    t = grid.nodes
    times = np.stack([t[:-1], grid.mids, t[1:]], axis=1)
    anchors = np.repeat(t[:-1, None], 3, axis=1)
    return GridSamples(table.sample(times, anchors))


def integrate_backward(
    rhs: Callable[[float, NDArray, int, int], NDArray],
    terminal: ArrayLike,
    grid: BackwardGrid,
    record_stages: bool = False,
):
    """Classical RK4 from ``grid.horizon`` down to 0.

    ``rhs(t, y, seg, stage)`` returns ``dy/dt``; ``seg`` indexes the grid
    interval and ``stage`` the RK4 stage (see module docstring). Returns the
    node values, shape ``(N+1, *terminal.shape)``, and with ``record_stages``
    also the stage inputs, shape ``(N, 4, *terminal.shape)``.
    """
    y = np.array(terminal, dtype=float)
    t = grid.nodes
    N = grid.step_count
    out = np.empty((N + 1,) + y.shape)
    out[N] = y
    stages = np.empty((N, 4) + y.shape) if record_stages else None
    for k in range(N - 1, -1, -1):
        h = t[k] - t[k + 1]
        tm = 0.5 * (t[k] + t[k + 1])
        k1 = rhs(t[k + 1], y, k, 0)
        y2 = y + 0.5 * h * k1
        k2 = rhs(tm, y2, k, 1)
        y3 = y + 0.5 * h * k2
        k3 = rhs(tm, y3, k, 2)
        y4 = y + h * k3
        k4 = rhs(t[k], y4, k, 3)
        if record_stages:
            stages[k, 0], stages[k, 1], stages[k, 2], stages[k, 3] = y, y2, y3, y4
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise BlowUpError(f"non-finite solution at t={t[k]:.6g}", t=float(t[k]))
        out[k] = y
    if record_stages:
        return out, stages
    return out


def integrate_forward(
    rhs: Callable[[float, NDArray, int, int], NDArray],
    initial: ArrayLike,
    grid: BackwardGrid,
) -> NDArray[np.float64]:
    """RK4 from 0 up to ``grid.horizon``; stage 0 at ``t_k`` (right limit),
    stages 1-2 at the midpoint, stage 3 at ``t_{k+1}`` (left limit)."""
    y = np.array(initial, dtype=float)
    t = grid.nodes
    out = np.empty((t.size,) + y.shape)
    out[0] = y
    for k in range(grid.step_count):
        h = t[k + 1] - t[k]
        tm = 0.5 * (t[k] + t[k + 1])
        k1 = rhs(t[k], y, k, 0)
        k2 = rhs(tm, y + 0.5 * h * k1, k, 1)
        k3 = rhs(tm, y + 0.5 * h * k2, k, 2)
        k4 = rhs(t[k + 1], y + h * k3, k, 3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise BlowUpError(f"non-finite solution at t={t[k + 1]:.6g}", t=float(t[k + 1]))
        out[k + 1] = y
    return out


def interpolate(grid: BackwardGrid, values: NDArray[np.float64], t: ArrayLike) -> NDArray[np.float64]:
    """Node values at ``t`` by cubic splines, one per breakpoint piece (the
    solutions have kinks where coefficients jump). Shape
    ``(*t.shape, *values.shape[1:])``; at a breakpoint the later piece wins."""
    return NodeInterpolant(grid, values)(t)


class NodeInterpolant:
    def __init__(self, grid: BackwardGrid, values: NDArray[np.float64]):
        b = grid.breaks
        self._starts = grid.nodes[b[1:-1]]
        self._pieces = [
            CubicSpline(grid.nodes[lo:hi + 1], values[lo:hi + 1], axis=0)
            for lo, hi in zip(b[:-1], b[1:])
        ]

    def __call__(self, t: ArrayLike) -> NDArray[np.float64]:
        t = np.asarray(t, dtype=float)
        if len(self._pieces) == 1:
            return self._pieces[0](t)
        piece = np.searchsorted(self._starts, t, side="right")
        if t.ndim == 0:
            return self._pieces[int(piece)](t)
        out = None
        for k in np.unique(piece):
            sel = piece == k
            v = self._pieces[k](t[sel])
            if out is None:
                out = np.empty(t.shape + v.shape[1:])
            out[sel] = v
        return out


def time_integral(grid: BackwardGrid, right: NDArray[np.float64], left: NDArray[np.float64]) -> float:
    """Composite Simpson of a function known by its right limits at nodes
    0..N-1 and left limits at nodes 1..N, split at the coefficient breakpoints."""
    total = 0.0
    b = grid.breaks
    for lo, hi in zip(b[:-1], b[1:]):
        y = np.concatenate([right[lo:hi], left[hi - 1:hi]])
        total += float(simpson(y, x=grid.nodes[lo:hi + 1]))
    return total


# ---------------------------------------------------------------- Riccati


def _spd_solve(M: NDArray[np.float64], v: NDArray[np.float64], t: float = np.nan) -> NDArray[np.float64]:
    """Solve ``M x = v`` for a stack of SPD matrices.

    Definiteness is tested by the Cholesky factorisation; the condition
    number is estimated by the squared spread of the Cholesky diagonal.
    """
    if M.shape[-1] == 1:
        d = M[..., 0, 0]
        if np.any(d <= 0.0) or not np.all(np.isfinite(d)):
            raise GainSingularityError(f"R + P D'D not positive definite at t={t:.6g}")
        return v / d[..., None]
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise GainSingularityError(f"R + P D'D not positive definite at t={t:.6g}") from exc
    diag = np.diagonal(L, axis1=-2, axis2=-1)
    if np.any(diag <= 0.0) or not np.all(np.isfinite(diag)):
        raise GainSingularityError(f"R + P D'D not positive definite at t={t:.6g}")
    if np.any((diag.max(axis=-1) / diag.min(axis=-1)) ** 2 > MAX_CONDITION):
        raise GainSingularityError(f"R + P D'D condition number above {MAX_CONDITION:.0e} at t={t:.6g}")
    return np.linalg.solve(M, v[..., None])[..., 0]


@dataclass(frozen=True)
class _LQStageData:
    """LQ coefficients sampled on a grid plus the derived combinations."""

    S: dict[str, GridSamples]
    BDC: NDArray[np.float64]  # B + D'C, positions layout (N, 3, l, m)
    DtD: NDArray[np.float64]  # D'D
    DtRho: NDArray[np.float64]  # D'rho
    Rp: NDArray[np.float64]


def _lq_stage_data(data: LQData, grid: BackwardGrid) -> _LQStageData:
    S = {k: sample_grid(tab, grid) for k, tab in data.tables().items()}
    D, C = S["D"].pos, S["C"].pos
    Dt = np.swapaxes(D, -1, -2)
    BDC = S["B"].pos + np.einsum("...mn,...n->...m", Dt, C)
    DtD = Dt @ D
    DtRho = np.einsum("...mn,...n->...m", Dt, S["rho"].pos)
    Rp = np.einsum("...mk,...k->...m", S["R"].pos, S["p"].pos)
    return _LQStageData(S, BDC, DtD, DtRho, Rp)


@dataclass(frozen=True)
class RiccatiSolution:
    """``P`` on the grid, its RK4 stage values, and the feedback gain.

    ``Gamma = (R + P D'D)^{-1} (P B + P D'C)``; ``Lambda`` is identically 0.
    """

    grid: BackwardGrid
    P: NDArray[np.float64]
    P_stages: NDArray[np.float64]
    Gamma: NDArray[np.float64]
    Gamma_stages: NDArray[np.float64]
    Lambda: NDArray[np.float64]

    @property
    def min_P(self) -> float:
        return float(min(self.P.min(), self.P_stages.min()))

    @cached_property
    def _interp(self) -> "NodeInterpolant":
        return NodeInterpolant(self.grid, self.P)

    def at(self, t: ArrayLike) -> NDArray[np.float64]:
        return self._interp(t)


def solve_riccati(data: LQData, gen: RegimeGenerator, grid: BackwardGrid) -> RiccatiSolution:
    """Integrate ``dP_i/dt = -[(2A + C'C) P_i + Q + H(P_i) + sum_j q_ij P_j]``
    with ``H(P) = -P^2 (B+D'C)'(R + P D'D)^{-1}(B+D'C)``, ``P(T) = G``.

    Raises PositivityError if any stage value drops to the positivity
    floor and GainSingularityError if ``R + P D'D`` loses definiteness.
    """
    sd = _lq_stage_data(data, grid)
    st = lambda a: a[:, _BACKWARD_POS]  # noqa: E731
    lin = st(2.0 * sd.S["A"].pos + np.sum(sd.S["C"].pos ** 2, axis=-1))
    Qc = st(sd.S["Q"].pos)
    R = st(sd.S["R"].pos)
    v = st(sd.BDC)
    DtD = st(sd.DtD)
    q = gen.q

    def rhs(t, P, seg, stage):
        if np.any(P <= POSITIVITY_FLOOR):
            raise PositivityError(
                f"P fell to {P.min():.3g} at t={t:.6g}; data outside the well-posed cases"
            )
        vk = v[seg, stage]
        w = _spd_solve(R[seg, stage] + P[:, None, None] * DtD[seg, stage], vk, t)
        H = -P * P * np.sum(vk * w, axis=-1)
        return -(lin[seg, stage] * P + Qc[seg, stage] + H + q @ P)

    P, P_st = integrate_backward(rhs, data.G, grid, record_stages=True)
    if P.min() <= POSITIVITY_FLOOR:
        k = int(np.argmin(P.min(axis=1)))
        raise PositivityError(f"P fell to {P.min():.3g} at t={grid.nodes[k]:.6g}")

    def gain(Pv, Rv, DtDv, vv):
        M = Rv + Pv[..., None, None] * DtDv
        return Pv[..., None] * _spd_solve(M, vv)

    Gamma_st = gain(P_st, R, DtD, v)
    node = lambda a: np.concatenate([a[:, 0], a[-1:, 2]])  # noqa: E731
    Gamma = gain(P, node(sd.S["R"].pos), node(sd.DtD), node(sd.BDC))
    for a in (P, P_st, Gamma, Gamma_st):
        a.setflags(write=False)
    Lam = np.zeros(P.shape + (data.n,))
    return RiccatiSolution(grid, P, P_st, Gamma, Gamma_st, Lam)


# ------------------------------------------------------- linear systems


@dataclass(frozen=True)
class LinearSolution:
    """Solution of one linear per-regime system (``role`` names which).

    ``L`` is the (identically zero) martingale integrand.
    """

    role: str
    grid: BackwardGrid
    values: NDArray[np.float64]
    stages: NDArray[np.float64]
    L: NDArray[np.float64]
    iterations: int = 0
    residual: float = 0.0
    meta: dict = field(default_factory=dict, compare=False)

    @cached_property
    def _interp(self) -> "NodeInterpolant":
        return NodeInterpolant(self.grid, self.values)

    def at(self, t: ArrayLike) -> NDArray[np.float64]:
        return self._interp(t)

    @property
    def initial(self) -> NDArray[np.float64]:
        return self.values[0]

    @property
    def terminal(self) -> NDArray[np.float64]:
        return self.values[-1]


def _linear(role, grid, rhs, terminal, n, **kw) -> LinearSolution:
    vals, stages = integrate_backward(rhs, terminal, grid, record_stages=True)
    vals.setflags(write=False)
    stages.setflags(write=False)
    return LinearSolution(role, grid, vals, stages, np.zeros(vals.shape + (n,)), **kw)


def _require_grid(grid: BackwardGrid, *sols) -> None:
    for s in sols:
        if not s.grid.same_as(grid):
            raise ConfigurationError(f"{type(s).__name__} lives on a different grid")


def _k_coefficients(data: LQData, ric: RiccatiSolution, grid: BackwardGrid):
    """Stage arrays ``a``, ``f`` with ``dK/dt = -(a K + f + sum_j q_ij K_j)``."""
    sd = _lq_stage_data(data, grid)
    st = lambda a: a[:, _BACKWARD_POS]  # noqa: E731
    P, Gam = ric.P_stages, ric.Gamma_stages
    S = {k: st(v.pos) for k, v in sd.S.items()}
    a = S["A"] - np.sum(S["B"] * Gam, axis=-1)
    f = (
        np.sum((P[..., None] * st(sd.DtRho) - st(sd.Rp)) * Gam, axis=-1)
        + S["q"] * S["Q"]
        - P * (np.sum(S["C"] * S["rho"], axis=-1) + S["b"])
    )
    return a, f


def solve_linear_K(
    data: LQData, gen: RegimeGenerator, ric: RiccatiSolution, grid: BackwardGrid
) -> LinearSolution:
    """Monolithic RK4 for ``dK_i/dt = -[(A - B'Gamma_i) K_i
    + (P D'rho - R p)'Gamma_i + q Q - P (C'rho + b) + sum_j q_ij K_j]``,
    ``K(T) = G g``."""
    _require_grid(grid, ric)
    a, f = _k_coefficients(data, ric, grid)
    q = gen.q

    def rhs(t, K, seg, stage):
        return -(a[seg, stage] * K + f[seg, stage] + q @ K)

    return _linear("K", grid, rhs, data.G * data.g, data.n)


def solve_by_contraction(
    data: LQData,
    gen: RegimeGenerator,
    ric: RiccatiSolution,
    grid: BackwardGrid,
    tol: float = PICARD_TOL,
    max_iter: int = PICARD_MAX_ITER,
) -> LinearSolution:
    """Fixed point of the map U -> K where each regime's K_i solves its own
    scalar linear ODE with the coupling ``sum_{j != i} q_ij U_j`` frozen.

    Starts from U = 0. The frozen coupling is taken at the previous iterate's
    RK4 stage values, so the fixed point is the monolithic RK4 solution.
    Regimes are decoupled inside an iteration and are advanced together.
    """
    _require_grid(grid, ric)
    a, f = _k_coefficients(data, ric, grid)
    qd = np.diag(gen.q)
    own = a + qd
    off = gen.off_diagonal
    terminal = data.G * data.g
    N, ell = grid.step_count, gen.num_regimes
    U_vals = np.zeros((N + 1, ell))
    U_st = np.zeros((N, 4, ell))
    coupled = bool(np.any(off != 0.0))
    residual = np.inf
    for it in range(1, max_iter + 1):
        src = U_st @ off.T

        def rhs(t, K, seg, stage):
            return -(own[seg, stage] * K + f[seg, stage] + src[seg, stage])

        vals, stages = integrate_backward(rhs, terminal, grid, record_stages=True)
        residual = float(np.max(np.abs(vals - U_vals)))
        U_vals, U_st = vals, stages
        if not coupled or residual <= tol:
            U_vals.setflags(write=False)
            U_st.setflags(write=False)
            return LinearSolution(
                "K", grid, U_vals, U_st, np.zeros(U_vals.shape + (data.n,)),
                iterations=it, residual=residual,
            )
    raise ConvergenceError(
        f"contraction did not reach tol={tol:g} in {max_iter} iterations", residual
    )


def solve_linear_h(
    data: LQData, gen: RegimeGenerator, ric: RiccatiSolution, grid: BackwardGrid
) -> LinearSolution:
    """``h = K/P`` solved directly:
    ``dh_i/dt = [A + C'C + Q/P - C'D Gamma] h - (D'rho - R p/P)'Gamma - qQ/P
    + b + rho'C + (1/P_i) sum_j q_ij P_j (h_i - h_j)``, ``h(T) = g``."""
    _require_grid(grid, ric)
    sd = _lq_stage_data(data, grid)
    st = lambda a: a[:, _BACKWARD_POS]  # noqa: E731
    S = {k: st(v.pos) for k, v in sd.S.items()}
    P, Gam = ric.P_stages, ric.Gamma_stages
    DGam = np.einsum("...nm,...m->...n", S["D"], Gam)
    alpha = S["A"] + np.sum(S["C"] ** 2, axis=-1) + S["Q"] / P - np.sum(S["C"] * DGam, axis=-1)
    beta = (
        -np.sum((st(sd.DtRho) - st(sd.Rp) / P[..., None]) * Gam, axis=-1)
        - S["q"] * S["Q"] / P
        + S["b"]
        + np.sum(S["rho"] * S["C"], axis=-1)
    )
    q = gen.q

    def rhs(t, h, seg, stage):
        Pk = P[seg, stage]
        jump = (h * (q @ Pk) - q @ (Pk * h)) / Pk
        return alpha[seg, stage] * h + beta[seg, stage] + jump

    return _linear("h", grid, rhs, data.g, data.n)


# ------------------------------------------------------- mean-variance


def sigma_products(sigma: NDArray[np.float64], mu: NDArray[np.float64]):
    """``(sigma sigma')^{-1} mu`` and the projector ``sigma'(sigma sigma')^{-1} sigma``."""
    SS = sigma @ np.swapaxes(sigma, -1, -2)
    try:
        L = np.linalg.cholesky(SS)
    except np.linalg.LinAlgError as exc:
        raise EllipticityError("sigma sigma' is not positive definite") from exc
    Lt = np.swapaxes(L, -1, -2)
    inv_mu = np.linalg.solve(Lt, np.linalg.solve(L, mu[..., None]))[..., 0]
    inv_sig = np.linalg.solve(Lt, np.linalg.solve(L, sigma))
    proj = np.swapaxes(sigma, -1, -2) @ inv_sig
    return inv_mu, proj


def _mv_source(data: MVALMData, grid: BackwardGrid) -> NDArray[np.float64]:
    """Stage array ``mu'(sigma sigma')^{-1} sigma rho - b``."""
    S = {k: sample_grid(t, grid).stage for k, t in data.tables().items()}
    inv_mu, _ = sigma_products(S["sigma"], S["mu"])
    sig_rho = np.einsum("...mn,...n->...m", S["sigma"], S["rho"])
    return np.sum(inv_mu * sig_rho, axis=-1) - S["b"]


def solve_h_mv(
    data: MVALMData,
    gen: RegimeGenerator,
    ric: RiccatiSolution,
    grid: BackwardGrid,
    terminal: float | ArrayLike,
    with_source: bool = True,
    role: str = "h",
) -> LinearSolution:
    """``dh_i/dt = r h_i - s + (1/P_i) sum_j q_ij P_j (h_i - h_j)`` with
    ``s = mu'(sigma sigma')^{-1} sigma rho - b`` (dropped when ``with_source``
    is False), ``h(T) = terminal``."""
    _require_grid(grid, ric)
    r = sample_grid(data.r, grid).stage
    src = _mv_source(data, grid) if with_source else np.zeros_like(r)
    P = ric.P_stages
    q = gen.q
    term = np.broadcast_to(np.asarray(terminal, dtype=float), (gen.num_regimes,))

    def rhs(t, h, seg, stage):
        Pk = P[seg, stage]
        jump = (h * (q @ Pk) - q @ (Pk * h)) / Pk
        return r[seg, stage] * h - src[seg, stage] + jump

    return _linear(role, grid, rhs, term, data.n)


def solve_h_systems(
    data: MVALMData, gen: RegimeGenerator, ric: RiccatiSolution, grid: BackwardGrid
) -> tuple[LinearSolution, LinearSolution]:
    """The liability part ``h1`` (terminal 0) and the target part ``h2``
    (terminal 1, no source); ``h = h1 + (lambda + z) h2``."""
    h1 = solve_h_mv(data, gen, ric, grid, 0.0, with_source=True, role="h1")
    h2 = solve_h_mv(data, gen, ric, grid, 1.0, with_source=False, role="h2")
    return h1, h2


def solve_feasibility_psi(data: MVALMData, gen: RegimeGenerator, grid: BackwardGrid) -> LinearSolution:
    """``dpsi_i/dt = -(r psi_i + sum_j q_ij psi_j)``, ``psi(T) = 1``."""
    r = sample_grid(data.r, grid).stage
    q = gen.q

    def rhs(t, psi, seg, stage):
        return -(r[seg, stage] * psi + q @ psi)

    return _linear("psi", grid, rhs, np.ones(gen.num_regimes), data.n)


# ------------------------------------------------------------- export


def write_csv(out: TextIO, grid: BackwardGrid, values: NDArray[np.float64]) -> None:
    """Columns ``t, regime, value`` with 1-based regimes and 17 significant digits."""
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["t", "regime", "value"])
    for k, t in enumerate(grid.nodes):
        for i, v in enumerate(values[k]):
            w.writerow([format(t, ".17g"), i + 1, format(float(v), ".17g")])
