"""Coefficient tables, LQ / mean-variance problem data and assumption checks.

Every coefficient is a deterministic function of time for each regime,
stored as samples on a time grid together with an interpolation rule.
Regimes are 0-based in the Python API.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import AssumptionError, StructuralError

PIECEWISE_CONSTANT = "piecewise-constant-left"
PIECEWISE_LINEAR = "piecewise-linear"
INTERPOLATIONS = (PIECEWISE_CONSTANT, PIECEWISE_LINEAR)

PSD_TOL = 1e-10
_SYM_TOL = 1e-12


def _frozen(a: ArrayLike) -> NDArray[np.float64]:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class CoefficientTable:
    """Per-regime samples of one coefficient on a time grid.

    ``values`` has shape ``(num_regimes, len(grid), *entry_shape)``.
    With ``piecewise-constant-left`` the value at ``t`` is the sample at the
    greatest grid node ``<= t``; ``piecewise-linear`` interpolates linearly.
    """

    grid: NDArray[np.float64]
    values: NDArray[np.float64]
    interpolation: str = PIECEWISE_CONSTANT

    def __post_init__(self):
        grid = _frozen(self.grid)
        values = _frozen(self.values)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)
        if self.interpolation not in INTERPOLATIONS:
            raise StructuralError(f"unknown interpolation {self.interpolation!r}")
        if grid.ndim != 1 or grid.size < 2:
            raise StructuralError("grid needs at least the two nodes 0 and T")
        if grid[0] != 0.0:
            raise StructuralError("grid must start at 0")
        if np.any(np.diff(grid) <= 0):
            raise StructuralError("grid must be strictly increasing")
        if values.ndim < 2 or values.shape[1] != grid.size:
            raise StructuralError(
                f"expected one sample per grid node per regime, got values of shape "
                f"{values.shape} for {grid.size} nodes"
            )
        if not np.all(np.isfinite(values)):
            raise StructuralError("coefficient samples must be finite")

    @classmethod
    def constant(
        cls, per_regime: ArrayLike, horizon: float, interpolation: str = PIECEWISE_CONSTANT
    ) -> "CoefficientTable":
        """Time-constant table; ``per_regime[i]`` is the value in regime ``i``."""
        v = np.asarray(per_regime, dtype=float)
        values = np.repeat(v[:, None, ...], 2, axis=1)
        return cls(np.array([0.0, float(horizon)]), values, interpolation)

    @property
    def horizon(self) -> float:
        return float(self.grid[-1])

    @property
    def num_regimes(self) -> int:
        return self.values.shape[0]

    @property
    def entry_shape(self) -> tuple[int, ...]:
        return self.values.shape[2:]

    def sample(self, times: ArrayLike, anchors: ArrayLike | None = None) -> NDArray[np.float64]:
        """Vectorised evaluation for all regimes.

        Returns an array of shape ``(*times.shape, num_regimes, *entry_shape)``.
        For piecewise-constant tables the piece is selected by ``anchors``
        (default: ``times``); passing the left end of an integration step
        as anchor yields the left limit at the step's right end.
        """
        t = np.asarray(times, dtype=float)
        g = self.grid
        if self.interpolation == PIECEWISE_CONSTANT:
            a = t if anchors is None else np.asarray(anchors, dtype=float)
            idx = np.clip(np.searchsorted(g, a, side="right") - 1, 0, g.size - 1)
            out = self.values[:, idx]
        else:
            idx = np.clip(np.searchsorted(g, t, side="right") - 1, 0, g.size - 2)
            w = (t - g[idx]) / (g[idx + 1] - g[idx])
            w = w.reshape(w.shape + (1,) * len(self.entry_shape))
            out = (1.0 - w) * self.values[:, idx] + w * self.values[:, idx + 1]
        return np.moveaxis(out, 0, t.ndim)


def evaluate(table: CoefficientTable, t: float, i: int) -> float | NDArray[np.float64]:
    """Value of ``table`` at time ``t`` in regime ``i`` (0-based)."""
    if not 0.0 <= t <= table.horizon:
        raise ValueError(f"t={t} outside [0, {table.horizon}]")
    if not 0 <= i < table.num_regimes:
        raise IndexError(f"regime {i} outside 0..{table.num_regimes - 1}")
    v = table.sample(np.asarray(t))[i]
    return float(v) if v.ndim == 0 else v


def _check_table(name: str, table: CoefficientTable, horizon: float, nreg: int, shape: tuple):
    if not isinstance(table, CoefficientTable):
        raise StructuralError(f"{name} must be a CoefficientTable")
    if not np.isclose(table.horizon, horizon, rtol=0, atol=1e-12):
        raise StructuralError(f"{name}: grid ends at {table.horizon}, horizon is {horizon}")
    if table.num_regimes != nreg:
        raise StructuralError(f"{name}: {table.num_regimes} regimes, expected {nreg}")
    if table.entry_shape != shape:
        raise StructuralError(f"{name}: entry shape {table.entry_shape}, expected {shape}")


def _breakpoints(tables: Mapping[str, CoefficientTable]) -> NDArray[np.float64]:
    return np.unique(np.concatenate([t.grid for t in tables.values()]))


@dataclass(frozen=True)
class LQData:
    """Coefficients of the scalar-state regime-switching LQ problem.

    State: ``dX = (A X + B'u + b) dt + (C'X + u'D' + rho') dW``;
    cost: ``E[int Q (X-q)^2 + (u-p)'R(u-p) dt + G (X(T)-g)^2]``.
    Shapes per regime: B, p: (m,); C, rho: (n,); D: (n, m); R: (m, m).
    """

    horizon: float
    A: CoefficientTable
    B: CoefficientTable
    C: CoefficientTable
    D: CoefficientTable
    b: CoefficientTable
    rho: CoefficientTable
    Q: CoefficientTable
    q: CoefficientTable
    R: CoefficientTable
    p: CoefficientTable
    G: NDArray[np.float64]
    g: NDArray[np.float64]
    delta: float

    def __post_init__(self):
        object.__setattr__(self, "G", _frozen(self.G))
        object.__setattr__(self, "g", _frozen(self.g))
        nreg = self.A.num_regimes
        if self.B.values.ndim != 3 or self.C.values.ndim != 3:
            raise StructuralError("B and C must be vector-valued tables")
        m, n = self.B.entry_shape[0], self.C.entry_shape[0]
        if m > n:
            raise StructuralError(f"need m <= n, got m={m}, n={n}")
        expected = {
            "A": (), "B": (m,), "C": (n,), "D": (n, m), "b": (), "rho": (n,),
            "Q": (), "q": (), "R": (m, m), "p": (m,),
        }
        for name, shape in expected.items():
            _check_table(name, getattr(self, name), self.horizon, nreg, shape)
        if self.G.shape != (nreg,) or self.g.shape != (nreg,):
            raise StructuralError("G and g need one value per regime")
        R = self.R.values
        if np.max(np.abs(R - np.swapaxes(R, -1, -2)), initial=0.0) > _SYM_TOL * max(1.0, np.abs(R).max()):
            raise StructuralError("R must be symmetric at every node")
        if not self.delta > 0:
            raise StructuralError("delta must be positive")

    @property
    def num_regimes(self) -> int:
        return self.A.num_regimes

    @property
    def m(self) -> int:
        return self.B.entry_shape[0]

    @property
    def n(self) -> int:
        return self.C.entry_shape[0]

    def tables(self) -> dict[str, CoefficientTable]:
        return {k: getattr(self, k) for k in ("A", "B", "C", "D", "b", "rho", "Q", "q", "R", "p")}

    def breakpoints(self) -> NDArray[np.float64]:
        return _breakpoints(self.tables())


@dataclass(frozen=True)
class MVALMData:
    """Market, liability and target of the mean-variance ALM problem.

    Surplus: ``dX = (r X + pi'mu + b) dt + (pi'sigma + rho') dW``, X(0) = x0.
    ``sigma`` is (m, n) per regime, ``mu`` (m,), ``rho`` (n,).
    """

    horizon: float
    r: CoefficientTable
    mu: CoefficientTable
    sigma: CoefficientTable
    b: CoefficientTable
    rho: CoefficientTable
    x0: float
    i0: int
    z: float
    delta: float

    def __post_init__(self):
        nreg = self.r.num_regimes
        if self.sigma.values.ndim != 4:
            raise StructuralError("sigma must be matrix-valued")
        m, n = self.sigma.entry_shape
        if m > n:
            raise StructuralError(f"need m <= n, got m={m}, n={n}")
        for name, shape in {"r": (), "mu": (m,), "sigma": (m, n), "b": (), "rho": (n,)}.items():
            _check_table(name, getattr(self, name), self.horizon, nreg, shape)
        if not 0 <= self.i0 < nreg:
            raise StructuralError(f"initial regime {self.i0} outside 0..{nreg - 1}")
        if not self.delta > 0:
            raise StructuralError("delta must be positive")

    @property
    def num_regimes(self) -> int:
        return self.r.num_regimes

    @property
    def m(self) -> int:
        return self.sigma.entry_shape[0]

    @property
    def n(self) -> int:
        return self.sigma.entry_shape[1]

    def tables(self) -> dict[str, CoefficientTable]:
        return {k: getattr(self, k) for k in ("r", "mu", "sigma", "b", "rho")}

    def breakpoints(self) -> NDArray[np.float64]:
        return _breakpoints(self.tables())

    def with_target(self, z: float) -> "MVALMData":
        return replace(self, z=float(z))


def _check_times(tables: Mapping[str, CoefficientTable]) -> NDArray[np.float64]:
    """Table nodes plus midpoints between them; linear interpolation of a
    matrix entry can lose rank strictly between nodes."""
    nodes = _breakpoints(tables)
    return np.union1d(nodes, 0.5 * (nodes[:-1] + nodes[1:]))


def _min_eig(mats: NDArray[np.float64]) -> float:
    if mats.shape[-1] == 0:
        return np.inf
    sym = 0.5 * (mats + np.swapaxes(mats, -1, -2))
    return float(np.linalg.eigvalsh(sym).min())


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of the standard / singular case checks."""

    standard: bool
    singular: bool
    delta: float
    min_Q: float
    min_eig_R: float
    min_eig_DtD: float
    min_G: float
    messages: tuple[str, ...] = field(default=())

    @property
    def case(self) -> str:
        if self.standard and self.singular:
            return "both"
        if self.standard:
            return "standard"
        if self.singular:
            return "singular"
        return "neither"

    @property
    def fatal(self) -> bool:
        return not (self.standard or self.singular)

    def to_dict(self) -> dict:
        return {
            "case": self.case, "fatal": self.fatal, "delta": self.delta,
            "minQ": self.min_Q, "minEigR": self.min_eig_R,
            "minEigDtD": self.min_eig_DtD, "minG": self.min_G,
            "messages": list(self.messages),
        }


def validate_lq_assumptions(data: LQData) -> ValidationReport:
    """Check which of the standard / singular well-posedness cases holds.

    Standard: Q >= 0, R >= delta I, G >= delta.
    Singular: Q >= 0, R >= 0, G >= delta, D'D >= delta I.
    Checked at every table node (and midpoints) by minimum eigenvalues.
    """
    times = _check_times(data.tables())
    d = data.delta
    min_Q = float(data.Q.sample(times).min())
    min_R = _min_eig(data.R.sample(times))
    D = data.D.sample(times)
    min_DtD = _min_eig(np.swapaxes(D, -1, -2) @ D)
    min_G = float(data.G.min())

    q_ok = min_Q >= -PSD_TOL
    g_ok = min_G >= d - PSD_TOL
    standard = q_ok and g_ok and min_R >= d - PSD_TOL
    singular = q_ok and g_ok and min_R >= -PSD_TOL and min_DtD >= d - PSD_TOL

    msgs = []
    if not q_ok:
        msgs.append(f"state weight Q has negative value {min_Q:.3g}")
    if not g_ok:
        msgs.append(f"terminal weight G={min_G:.3g} below delta={d:.3g}")
    if min_R < d - PSD_TOL:
        msgs.append(f"min eig R={min_R:.3g} below delta (standard case fails)")
    if min_DtD < d - PSD_TOL:
        msgs.append(f"min eig D'D={min_DtD:.3g} below delta (singular case fails)")
    return ValidationReport(standard, singular, d, min_Q, min_R, min_DtD, min_G, tuple(msgs))


def min_sigma_eigenvalue(data: MVALMData) -> float:
    """Smallest eigenvalue of sigma sigma' over the table nodes: the largest
    delta the ellipticity condition admits."""
    S = data.sigma.sample(_check_times(data.tables()))
    return _min_eig(S @ np.swapaxes(S, -1, -2))


def check_mv_assumptions(data: MVALMData) -> float:
    """Raise AssumptionError unless sigma sigma' >= delta I everywhere.

    Returns the observed minimum eigenvalue.
    """
    lam = min_sigma_eigenvalue(data)
    if lam < data.delta - PSD_TOL:
        raise AssumptionError(
            f"uniform ellipticity fails: min eig(sigma sigma')={lam:.6g} < delta={data.delta:.6g}"
        )
    return lam


def mv_to_lq(data: MVALMData, lam: float) -> LQData:
    """The LQ problem whose optimum is the relaxed mean-variance problem at
    multiplier ``lam``: A=r, B=mu, C=0, D=sigma', Q=q=R=p=0, G=1, g=lam+z.

    delta is capped at 1 so the singular case (G=1 >= delta) can hold.
    """
    T = data.horizon
    nreg, m, n = data.num_regimes, data.m, data.n
    sig = data.sigma
    D = CoefficientTable(sig.grid, np.swapaxes(sig.values, -1, -2), sig.interpolation)

    def zeros(shape):
        return CoefficientTable.constant(np.zeros((nreg,) + shape), T)

    return LQData(
        horizon=T,
        A=data.r, B=data.mu, C=zeros((n,)), D=D, b=data.b, rho=data.rho,
        Q=zeros(()), q=zeros(()), R=zeros((m, m)), p=zeros((m,)),
        G=np.ones(nreg), g=np.full(nreg, lam + data.z),
        delta=min(data.delta, 1.0),
    )
