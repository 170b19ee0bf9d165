"""Continuous-time Markov chain: generator checks, occupation law, exact paths."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import ConservationError, ProbabilityError, RateError, StructuralError

ROW_SUM_TOL = 1e-12
PROB_TOL = 1e-10


@dataclass(frozen=True)
class RegimeGenerator:
    """Validated generator ``q`` (rates per year); build with :func:`validate_generator`."""

    q: NDArray[np.float64]

    @property
    def num_regimes(self) -> int:
        return self.q.shape[0]

    @property
    def off_diagonal(self) -> NDArray[np.float64]:
        return self.q - np.diag(np.diag(self.q))

    def stationary(self) -> NDArray[np.float64]:
        """A stationary law ``pi`` with ``pi' q = 0`` (least-squares solve)."""
        ell = self.num_regimes
        M = np.vstack([self.q.T, np.ones(ell)])
        rhs = np.zeros(ell + 1)
        rhs[-1] = 1.0
        pi = np.linalg.lstsq(M, rhs, rcond=None)[0]
        return np.clip(pi, 0.0, None) / np.clip(pi, 0.0, None).sum()


def validate_generator(q: ArrayLike) -> RegimeGenerator:
    q = np.array(q, dtype=float)
    if q.ndim != 2 or q.shape[0] != q.shape[1] or q.shape[0] == 0:
        raise StructuralError(f"generator must be a non-empty square matrix, got shape {q.shape}")
    off = q - np.diag(np.diag(q))
    if np.any(off < 0):
        i, j = np.argwhere(off < 0)[0]
        raise RateError(f"negative rate q[{i},{j}]={q[i, j]}")
    rows = q.sum(axis=1)
    bad = np.flatnonzero(np.abs(rows) > ROW_SUM_TOL)
    if bad.size:
        raise ConservationError(f"row {bad[0]} sums to {rows[bad[0]]}, not 0")
    q.setflags(write=False)
    return RegimeGenerator(q)


def _check_prob(p0: NDArray[np.float64], ell: int) -> None:
    if p0.shape != (ell,):
        raise ProbabilityError(f"expected {ell} probabilities, got shape {p0.shape}")
    if np.any(p0 < -PROB_TOL) or abs(p0.sum() - 1.0) > PROB_TOL:
        raise ProbabilityError(f"not a probability vector: {p0}")


def occupation_distribution(
    gen: RegimeGenerator, p0: ArrayLike, grid: ArrayLike
) -> NDArray[np.float64]:
    """Law of the chain at each node of ``grid``: RK4 on ``dp/dt = q' p``.

    ``grid`` is increasing and starts at the time where ``p0`` holds.
    Returns shape ``(len(grid), num_regimes)``.
    """
    p = np.array(p0, dtype=float)
    _check_prob(p, gen.num_regimes)
    t = np.asarray(grid, dtype=float)
    qt = gen.q.T
    out = np.empty((t.size, p.size))
    out[0] = p
    for k in range(t.size - 1):
        h = t[k + 1] - t[k]
        k1 = qt @ p
        k2 = qt @ (p + 0.5 * h * k1)
        k3 = qt @ (p + 0.5 * h * k2)
        k4 = qt @ (p + h * k3)
        p = p + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k + 1] = p
    return out


@dataclass(frozen=True)
class ChainPath:
    """Right-continuous chain path: ``states[k]`` holds on
    ``[jump_times[k-1], jump_times[k])`` with ``jump_times[-1]`` read as 0."""

    jump_times: NDArray[np.float64]
    states: NDArray[np.int64]

    def state_at(self, t: float) -> int:
        return int(self.states[np.searchsorted(self.jump_times, t, side="right")])

    @property
    def num_jumps(self) -> int:
        return self.jump_times.size


def sample_chain_path(
    gen: RegimeGenerator, i0: int, horizon: float, rng: np.random.Generator
) -> ChainPath:
    """Exact path on [0, horizon]: exponential holding times with rate
    ``-q_ii`` and jump targets drawn with probabilities ``q_ij / -q_ii``."""
    q = gen.q
    times: list[float] = []
    states = [int(i0)]
    t = 0.0
    i = int(i0)
    while True:
        rate = -q[i, i]
        if rate <= 0.0:
            break
        t += rng.exponential(1.0 / rate)
        if t > horizon:
            break
        w = q[i].copy()
        w[i] = 0.0
        targets = np.flatnonzero(w > 0.0)
        cdf = np.cumsum(w[targets])
        k = np.searchsorted(cdf, rng.random() * cdf[-1], side="right")
        i = int(targets[min(k, targets.size - 1)])
        times.append(t)
        states.append(i)
    return ChainPath(np.array(times, dtype=float), np.array(states, dtype=np.int64))
