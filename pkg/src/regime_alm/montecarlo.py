"""Monte Carlo simulation of the controlled surplus under a feedback law.

Euler-Maruyama on a uniform grid, with the chain's jump times inserted
into the step they fall in (event-aligned Euler). The Brownian increment of
a split step is divided by a Brownian bridge, so the base increments do not
depend on the chain path.

Random numbers come from counter-based Philox streams: stream kind
(chain / brownian / bridge) selects the key, the path index the counter.
Paths are processed in fixed-size blocks and terminal values are reduced
in path order, so results do not depend on the number of workers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import SimulationError
from .market_model import MVALMData
from .mv_alm import MVSolution, FrontierReport, _at
from .regime_chain import RegimeGenerator, sample_chain_path

Law = Callable[..., NDArray[np.float64]]

BLOCK_SIZE = 4096
MIN_CONCLUSIVE_PATHS = 1000
_CHAIN, _BROWNIAN, _BRIDGE = 0, 1, 2


@dataclass(frozen=True)
class SimConfig:
    """``brownian_seed`` (default: ``seed``) keys the Brownian and bridge
    streams separately from the chain stream."""

    num_paths: int
    time_steps: int
    seed: int = 0
    antithetic: bool = False
    workers: int = 1
    brownian_seed: int | None = None
    block_size: int = BLOCK_SIZE

    def __post_init__(self):
        if self.num_paths < 2:
            raise ValueError("num_paths must be >= 2")
        if self.time_steps < 1:
            raise ValueError("time_steps must be >= 1")
        if self.antithetic and self.num_paths % 2:
            raise ValueError("antithetic sampling needs an even number of paths")
        if self.block_size < 2 or self.block_size % 2:
            raise ValueError("block_size must be even and >= 2")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def to_dict(self) -> dict:
        return {
            "numPaths": self.num_paths, "timeSteps": self.time_steps, "seed": self.seed,
            "antithetic": self.antithetic, "brownianSeed": self.brownian_seed,
            "blockSize": self.block_size,
        }


class _Streams:
    """Per-path generators from one Philox key; path ``p`` starts at
    counter ``[0, 0, p, 0]``."""

    def __init__(self, seed: int, kind: int):
        key = np.random.SeedSequence([seed, kind]).generate_state(2, np.uint64)
        self._bitgen = np.random.Philox(key=key)
        self._gen = np.random.Generator(self._bitgen)
        self._state = self._bitgen.state

    def at(self, path: int) -> np.random.Generator:
        st = self._state
        st["state"]["counter"] = np.array([0, 0, path, 0], dtype=np.uint64)
        st["buffer_pos"] = 4
        st["has_uint32"] = 0
        st["uinteger"] = 0
        self._bitgen.state = st
        return self._gen


def stream(seed: int, kind: int, path: int) -> np.random.Generator:
    """Fresh generator for one stream, for inspection and tests."""
    key = np.random.SeedSequence([seed, kind]).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=[0, 0, path, 0]))


def chain_paths(gen: RegimeGenerator, i0: int, horizon: float, cfg: SimConfig, start: int = 0, stop: int | None = None):
    """The chain paths used by :func:`simulate_terminal_wealth`."""
    stop = cfg.num_paths if stop is None else stop
    s = _Streams(cfg.seed, _CHAIN)
    return [
        sample_chain_path(gen, i0, horizon, s.at(p // 2 if cfg.antithetic else p))
        for p in range(start, stop)
    ]


@dataclass
class _Coeffs:
    """MV coefficients at the Euler nodes, shape ``(steps, regimes, ...)``."""

    r: NDArray[np.float64]
    mu: NDArray[np.float64]
    sigma: NDArray[np.float64]
    b: NDArray[np.float64]
    rho: NDArray[np.float64]


def _node_coeffs(data: MVALMData, nodes: NDArray[np.float64]) -> _Coeffs:
    t = nodes[:-1]
    return _Coeffs(*(data.tables()[k].sample(t) for k in ("r", "mu", "sigma", "b", "rho")))


def _euler(data, law, co, k, t, X, reg, h, dW):
    """One Euler step of the surplus from time ``t`` (the node ``k`` when
    scalar, else per-path times) over ``h`` with increments ``dW``."""
    if np.ndim(t) == 0:
        r, mu, sig, b, rho = co.r[k, reg], co.mu[k, reg], co.sigma[k, reg], co.b[k, reg], co.rho[k, reg]
    else:
        r, mu, sig, b, rho = (_at(tab, t, reg) for tab in
                              (data.r, data.mu, data.sigma, data.b, data.rho))
    pi = law(t, X, reg)
    vol = np.einsum("pmn,pm->pn", sig, pi) + rho
    return X + (r * X + np.sum(pi * mu, axis=-1) + b) * h + np.sum(vol * dW, axis=-1)


def _simulate_block(data, gen, law, cfg, start, stop):
    T, n = data.horizon, data.n
    steps = cfg.time_steps
    nodes = np.linspace(0.0, T, steps + 1)
    co = _node_coeffs(data, nodes)
    N = stop - start
    anti = cfg.antithetic
    bseed = cfg.seed if cfg.brownian_seed is None else cfg.brownian_seed
    s_chain, s_brown, s_bridge = _Streams(cfg.seed, _CHAIN), _Streams(bseed, _BROWNIAN), _Streams(bseed, _BRIDGE)

    Z = np.empty((N, steps, n))
    ev_path, ev_tau, ev_state, ev_z = [], [], [], []
    for a, p in enumerate(range(start, stop)):
        s = p // 2 if anti else p
        path = sample_chain_path(gen, data.i0, T, s_chain.at(s))
        Z[a] = s_brown.at(s).standard_normal((steps, n))
        if path.num_jumps:
            ev_path.append(np.full(path.num_jumps, a))
            ev_tau.append(path.jump_times)
            ev_state.append(path.states[1:])
            ev_z.append(s_bridge.at(s).standard_normal((path.num_jumps, n)))
    sign = np.ones(N)
    if anti:
        sign[(np.arange(start, stop) % 2) == 1] = -1.0
    Z *= sign[:, None, None]

    if ev_path:
        ev_path = np.concatenate(ev_path)
        ev_tau = np.concatenate(ev_tau)
        ev_state = np.concatenate(ev_state)
        ev_z = np.concatenate(ev_z) * sign[ev_path, None]
        keep = ev_tau < T
        ev_path, ev_tau, ev_state, ev_z = ev_path[keep], ev_tau[keep], ev_state[keep], ev_z[keep]
    else:
        ev_path = np.empty(0, dtype=np.int64)
        ev_tau = np.empty(0)
        ev_state = np.empty(0, dtype=np.int64)
        ev_z = np.empty((0, n))
    ev_step = np.clip(np.searchsorted(nodes, ev_tau, side="right") - 1, 0, steps - 1)
    order = np.lexsort((ev_tau, ev_path, ev_step))
    ev_path, ev_tau, ev_state, ev_z, ev_step = (
        a[order] for a in (ev_path, ev_tau, ev_state, ev_z, ev_step))
    bounds = np.searchsorted(ev_step, np.arange(steps + 1))

    X = np.full(N, float(data.x0))
    reg = np.full(N, data.i0, dtype=np.int64)
    for k in range(steps):
        t0, t1 = nodes[k], nodes[k + 1]
        dt = t1 - t0
        dW = Z[:, k] * np.sqrt(dt)
        lo, hi = bounds[k], bounds[k + 1]
        if lo == hi:
            X = _euler(data, law, co, k, t0, X, reg, dt, dW)
        else:
            P, tau, S, B = ev_path[lo:hi], ev_tau[lo:hi], ev_state[lo:hi], ev_z[lo:hi]
            paths, first = np.unique(P, return_index=True)
            plain = np.ones(N, dtype=bool)
            plain[paths] = False
            idx = np.flatnonzero(plain)
            X[idx] = _euler(data, law, co, k, t0, X[idx], reg[idx], dt, dW[idx])
            pos = np.searchsorted(paths, P)
            rank = np.arange(P.size) - first[pos]
            rem = dW[paths].copy()
            cur = np.full(paths.size, t0)
            for rr in range(int(rank.max()) + 1):
                e = np.flatnonzero(rank == rr)
                pp, ps = P[e], pos[e]
                span = t1 - cur[ps]
                h = tau[e] - cur[ps]
                frac = h / span
                dW1 = frac[:, None] * rem[ps] + np.sqrt(h * (span - h) / span)[:, None] * B[e]
                t_sub = t0 if rr == 0 else cur[ps]
                X[pp] = _euler(data, law, co, k, t_sub, X[pp], reg[pp], h, dW1)
                rem[ps] -= dW1
                cur[ps] = tau[e]
                reg[pp] = S[e]
            X[paths] = _euler(data, law, co, k, cur, X[paths], reg[paths], t1 - cur, rem)
        bad = ~np.isfinite(X)
        if np.any(bad):
            a = int(np.flatnonzero(bad)[0])
            raise SimulationError(
                f"non-finite surplus on path {start + a} at t={t1:.6g}", path=start + a, t=float(t1)
            )
    return X


def simulate_terminal_wealth(
    data: MVALMData, law: Law, cfg: SimConfig, gen: RegimeGenerator
) -> NDArray[np.float64]:
    """``X(T)`` for every path, in path order.

    ``law(t, X, i)`` gets a scalar ``t`` on the Euler nodes and per-path
    times after a regime switch inside a step; it returns shape ``(N, m)``.
    """
    blocks = [(s, min(s + cfg.block_size, cfg.num_paths))
              for s in range(0, cfg.num_paths, cfg.block_size)]
    if cfg.workers == 1 or len(blocks) == 1:
        parts = [_simulate_block(data, gen, law, cfg, s, e) for s, e in blocks]
    else:
        with ThreadPoolExecutor(cfg.workers) as ex:
            parts = list(ex.map(lambda b: _simulate_block(data, gen, law, cfg, *b), blocks))
    return np.concatenate(parts)


def _mean_se(v: NDArray[np.float64], antithetic: bool) -> tuple[float, float]:
    """Mean and its standard error; antithetic pairs are averaged first."""
    if antithetic:
        v = 0.5 * (v[0::2] + v[1::2])
    return float(np.mean(v)), float(np.std(v, ddof=1) / np.sqrt(v.size))


@dataclass(frozen=True)
class SimOutcome:
    mean_xt: float
    var_xt: float
    se_mean: float
    se_var: float
    cost_j: float
    se_cost: float
    paths_used: int
    lam: float = 0.0

    @property
    def inconclusive(self) -> bool:
        return self.paths_used < MIN_CONCLUSIVE_PATHS

    def to_dict(self) -> dict:
        return {
            "meanXT": self.mean_xt, "varXT": self.var_xt, "seMean": self.se_mean,
            "seVar": self.se_var, "costJ": self.cost_j, "seCost": self.se_cost,
            "lambda": self.lam, "pathsUsed": self.paths_used,
        }


def summarize(XT: NDArray[np.float64], target: float, lam: float = 0.0, antithetic: bool = False) -> SimOutcome:
    """Moments of ``X(T)`` and the relaxed cost ``E(X(T) - target)^2 - lam^2``.

    The variance standard error is the fourth-moment (delta method) one:
    the spread of the squared deviations over ``sqrt(N)``.
    """
    mean, se_mean = _mean_se(XT, antithetic)
    var = float(np.var(XT, ddof=1))
    _, se_var = _mean_se((XT - mean) ** 2, antithetic)
    cost, se_cost = _mean_se((XT - target) ** 2 - lam * lam, antithetic)
    return SimOutcome(mean, var, se_mean, se_var, cost, se_cost, int(XT.size), float(lam))


def simulate_wealth_paths(
    data: MVALMData, law: Law, cfg: SimConfig, gen: RegimeGenerator, lam: float = 0.0
) -> SimOutcome:
    """Simulate and summarise; ``costJ`` is the relaxed objective at ``lam``
    (``lam = 0`` gives ``E(X(T) - z)^2``)."""
    XT = simulate_terminal_wealth(data, law, cfg, gen)
    return summarize(XT, lam + data.z, lam, cfg.antithetic)


# ---------------------------------------------------------- verification


def verify_frontier(
    data: MVALMData,
    gen: RegimeGenerator,
    analytic: FrontierReport,
    solutions: MVSolution,
    cfg: SimConfig,
    z: float | None = None,
) -> dict:
    """Simulate the optimal law at target ``z`` and compare with the frontier:
    ``|mean - z| <= 3 seMean`` and
    ``|var - Var(z)| <= 3 seVar + 5 Var(z) / timeSteps``."""
    z = data.z if z is None else float(z)
    out = simulate_wealth_paths(data.with_target(z), solutions.law(z), cfg, gen)
    var_a = float(analytic.variance(z))
    allowance = 5.0 * var_a / cfg.time_steps
    mean_gap = abs(out.mean_xt - z)
    var_gap = abs(out.var_xt - var_a)
    mean_ok = mean_gap <= 3.0 * out.se_mean
    var_ok = var_gap <= 3.0 * out.se_var + allowance
    status = "inconclusive" if out.inconclusive else ("pass" if mean_ok and var_ok else "fail")
    return {
        "meanXT": out.mean_xt, "z": z, "seMean": out.se_mean,
        "varXT": out.var_xt, "analyticVar": var_a, "seVar": out.se_var,
        "pass": None if out.inconclusive else bool(mean_ok and var_ok),
        "status": status,
        "meanPass": bool(mean_ok), "variancePass": bool(var_ok),
        "meanMargin": 3.0 * out.se_mean - mean_gap,
        "varianceMargin": 3.0 * out.se_var + allowance - var_gap,
        "discretizationAllowance": allowance,
        "lambdaStar": solutions.frontier.lambda_star_at(z),
        "pathsUsed": out.paths_used, "timeSteps": cfg.time_steps,
    }


@dataclass(frozen=True)
class PerturbedLaw:
    base: Law
    direction: Law
    eps: float

    def __call__(self, t, X, i):
        return self.base(t, X, i) + self.eps * self.direction(t, X, i)


def constant_direction(m: int) -> Law:
    """The unit vector ``(1, ..., 1)/sqrt(m)``."""
    e = np.full(m, 1.0 / np.sqrt(m))

    def v(t, X, i):
        return np.broadcast_to(e, np.shape(X) + (m,))

    return v


def against_direction(base: Law) -> Law:
    """``-pi*/|pi*|`` (zero where ``pi* = 0``)."""

    def v(t, X, i):
        u = base(t, X, i)
        nrm = np.linalg.norm(u, axis=-1, keepdims=True)
        return -np.divide(u, nrm, out=np.zeros_like(u), where=nrm > 0)

    return v


def rotating_direction(m: int, horizon: float) -> Law:
    """Unit vector depending on time and regime: a rotation in the first
    two coordinates, or a sign pattern when ``m = 1``."""

    def v(t, X, i):
        shape = np.broadcast_shapes(np.shape(X), np.shape(i), np.shape(t))
        ang = np.broadcast_to(np.pi * np.asarray(t) / horizon + np.asarray(i), shape)
        out = np.zeros(shape + (m,))
        if m == 1:
            out[..., 0] = np.where(np.cos(ang) >= 0, 1.0, -1.0)
        else:
            out[..., 0] = np.cos(ang)
            out[..., 1] = np.sin(ang)
        return out

    return v


def default_perturbations(solutions: MVSolution, z: float | None = None) -> list[tuple[str, Law]]:
    m, T = solutions.data.m, solutions.data.horizon
    return [
        ("constant", constant_direction(m)),
        ("againstOptimal", against_direction(solutions.law(z))),
        ("rotating", rotating_direction(m, T)),
    ]


def perturbation_optimality_check(
    data: MVALMData,
    gen: RegimeGenerator,
    solutions: MVSolution,
    lam: float,
    cfg: SimConfig,
    perturbations: Sequence[tuple[str, Law]] | None = None,
    eps: float = 0.1,
    z: float | None = None,
) -> dict:
    """Relaxed cost of ``pi* + eps v`` against ``pi*`` with common random
    numbers. Each difference must be ``>= -3`` paired standard errors."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    z = data.z if z is None else float(z)
    d = data.with_target(z)
    base = solutions.law(z)
    base = type(base)(base.data, base.ric, base.h1, base.h2, lam, z)
    if perturbations is None:
        perturbations = default_perturbations(solutions, z)
    target = lam + z
    J0 = (simulate_terminal_wealth(d, base, cfg, gen) - target) ** 2 - lam * lam
    rows = []
    for name, v in perturbations:
        J1 = (simulate_terminal_wealth(d, PerturbedLaw(base, v, eps), cfg, gen) - target) ** 2 - lam * lam
        diff, se = _mean_se(J1 - J0, cfg.antithetic)
        rows.append({
            "name": name, "difference": diff, "pairedSE": se,
            "nonnegative": bool(diff >= -3.0 * se),
            "strictlyPositive": bool(diff > 3.0 * se),
        })
    inconclusive = cfg.num_paths < MIN_CONCLUSIVE_PATHS
    ok = all(r["nonnegative"] for r in rows)
    return {
        "lambda": lam, "z": z, "eps": eps,
        "optimalCost": _mean_se(J0, cfg.antithetic)[0],
        "perturbations": rows,
        "anyStrictlyPositive": any(r["strictlyPositive"] for r in rows),
        "pass": None if inconclusive else ok,
        "status": "inconclusive" if inconclusive else ("pass" if ok else "fail"),
    }
