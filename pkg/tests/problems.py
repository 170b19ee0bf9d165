"""Problem builders shared by the test modules."""

from __future__ import annotations

import numpy as np

from regime_alm.market_model import (
    PIECEWISE_CONSTANT,
    PIECEWISE_LINEAR,
    CoefficientTable,
    LQData,
    MVALMData,
)
from regime_alm.regime_chain import validate_generator

GEN2 = [[-1.0, 1.0], [2.0, -2.0]]
GEN3 = [[-1.5, 1.0, 0.5], [0.4, -0.9, 0.5], [1.0, 2.0, -3.0]]


def const(v, T=1.0):
    return CoefficientTable.constant(np.asarray(v, dtype=float), T)


def single_regime(r=0.05, mu=0.2, sigma=0.3, b=0.0, rho=0.0, x0=1.0, z=1.2, T=1.0):
    data = MVALMData(
        T, const([r], T), const([[mu]], T), const([[[sigma]]], T), const([b], T),
        const([[rho]], T), x0, 0, z, 0.01,
    )
    return data, validate_generator([[0.0]])


def two_regime_scalar(b=(0.1, -0.2), rho=(0.05, 0.1), x0=1.0, z=1.2, T=1.0):
    """m = n = 1, two regimes, with a liability."""
    data = MVALMData(
        T, const([0.03, 0.06], T), const([[0.1], [0.25]], T), const([[[0.3]], [[0.2]]], T),
        const(list(b), T), const([[rho[0]], [rho[1]]], T), x0, 0, z, 0.01,
    )
    return data, validate_generator(GEN2)


def two_regime_incomplete(x0=1.0, z=1.2, T=1.0):
    """m = 2 assets, n = 3 noises: the rho-projection term survives."""
    data = MVALMData(
        T, const([0.03, 0.06], T), const([[0.1, 0.05], [0.2, 0.1]], T),
        const([[[0.3, 0.1, 0.0], [0.05, 0.25, 0.1]], [[0.2, 0.0, 0.1], [0.1, 0.35, 0.0]]], T),
        const([0.1, -0.2], T), const([[0.05, 0.1, 0.02], [0.1, -0.05, 0.03]], T),
        x0, 0, z, 0.01,
    )
    return data, validate_generator(GEN2)


def three_regime_timevarying(x0=0.8, z=1.3, T=2.0, interp=PIECEWISE_CONSTANT):
    """Three regimes, coefficients on a grid with interior breakpoints."""
    g = np.array([0.0, 0.6, 1.3, T])
    rng = np.random.default_rng(11)
    r = CoefficientTable(g, rng.uniform(0.01, 0.07, (3, 4)), interp)
    mu = CoefficientTable(g, rng.uniform(0.05, 0.3, (3, 4, 1)), interp)
    sig = CoefficientTable(g, rng.uniform(0.15, 0.4, (3, 4, 1, 2)), interp)
    b = CoefficientTable(g, rng.uniform(-0.2, 0.2, (3, 4)), interp)
    rho = CoefficientTable(g, rng.uniform(-0.1, 0.1, (3, 4, 2)), interp)
    return MVALMData(T, r, mu, sig, b, rho, x0, 1, z, 0.01), validate_generator(GEN3)


def mv_regression_set():
    return [
        ("single", *single_regime()),
        ("single-liability", *single_regime(b=0.1, rho=0.05)),
        ("two-scalar", *two_regime_scalar()),
        ("two-incomplete", *two_regime_incomplete()),
        ("three-const", *three_regime_timevarying()),
        ("three-linear", *three_regime_timevarying(interp=PIECEWISE_LINEAR)),
    ]


def random_lq(seed: int, ell: int, m: int, n: int, singular: bool = False,
              interp: str = PIECEWISE_CONSTANT, T: float = 1.5):
    """General LQ data on a grid with interior breakpoints.

    Standard case: R = S S' + I. Singular case: R = 0 and D with orthonormal
    columns scaled so that D'D = I.
    """
    rng = np.random.default_rng(seed)
    g = np.array([0.0, 0.37, 0.9, T])
    k = g.size

    def tab(shape, lo=-0.5, hi=0.5):
        return CoefficientTable(g, rng.uniform(lo, hi, (ell, k) + shape), interp)

    if singular:
        R = CoefficientTable(g, np.zeros((ell, k, m, m)), interp)
        Qs, _ = np.linalg.qr(rng.normal(size=(ell, k, n, n)))
        D = CoefficientTable(g, Qs[..., :m], interp)
    else:
        S = rng.normal(size=(ell, k, m, m))
        R = CoefficientTable(g, S @ np.swapaxes(S, -1, -2) + np.eye(m), interp)
        D = tab((n, m))
    A, B, C = tab(()), tab((m,)), tab((n,))
    b, rho = tab(()), tab((n,))
    Q, q, p = tab((), 0.0, 1.0), tab(()), tab((m,))
    G = rng.uniform(0.5, 2.0, ell)
    gT = rng.uniform(-1.0, 1.0, ell)
    off = rng.uniform(0.2, 2.0, (ell, ell))
    np.fill_diagonal(off, 0.0)
    gen = validate_generator(off - np.diag(off.sum(axis=1)))
    data = LQData(T, A, B, C, D, b, rho, Q, q, R, p, G, gT, 0.5)
    return data, gen


def lq_regression_set():
    return [
        ("std-1", *random_lq(1, 1, 1, 1)),
        ("std-2", *random_lq(2, 2, 2, 3)),
        ("std-3-linear", *random_lq(3, 3, 1, 2, interp=PIECEWISE_LINEAR)),
        ("sing-1", *random_lq(4, 1, 1, 1, singular=True)),
        ("sing-2", *random_lq(5, 2, 2, 2, singular=True)),
        ("sing-3", *random_lq(6, 3, 1, 3, singular=True)),
    ]
