"""JSON problem documents.

Schema (regimes are 1-based in the document, 0-based in the API)::

    {
      "horizon": 1.0,
      "regimes": 2, "assets": 1, "noise": 1,
      "generator": [[-1, 1], [2, -2]],
      "x0": 1.0, "i0": 1, "z": 1.2, "delta": 0.01,
      "interpolation": "piecewise-constant-left",
      "coefficients": {
        "r":     {"constant": [0.05, 0.03]},
        "mu":    {"grid": [0, 0.5, 1], "values": [[[0.2], [0.1], [0.1]], [[0.1], [0.1], [0.1]]]},
        "sigma": {"constant": [[[0.3]], [[0.25]]]},
        "b":     {"constant": [0.0, 0.0]},
        "rho":   {"constant": [[0.0], [0.0]]}
      }
    }

``values[i][k]`` is the entry in regime ``i`` at grid node ``k``;
``constant[i]`` a time-constant entry. A per-coefficient
``"interpolation"`` overrides the document-level one. ``b`` and ``rho``
default to zero; ``regimes``, ``assets`` and ``noise`` are optional and
checked against the shapes when given.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .market_model import PIECEWISE_CONSTANT, CoefficientTable, MVALMData
from .regime_chain import RegimeGenerator, validate_generator

_REQUIRED = ("horizon", "generator", "x0", "i0", "z", "delta", "coefficients")
_COEFFS = ("r", "mu", "sigma", "b", "rho")


class ConfigParseError(ConfigurationError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        super().__init__(message)
        self.line = line
        self.column = column


@dataclass(frozen=True)
class ProblemConfig:
    data: MVALMData
    gen: RegimeGenerator
    checksum: str
    path: str | None = None


def _entry_shapes(m: int, n: int) -> dict[str, tuple[int, ...]]:
    return {"r": (), "mu": (m,), "sigma": (m, n), "b": (), "rho": (n,)}


def _table(name: str, spec, horizon: float, nreg: int, shape: tuple, interp: str) -> CoefficientTable:
    if not isinstance(spec, dict):
        raise ConfigurationError(f"coefficients.{name} must be an object")
    interp = spec.get("interpolation", interp)
    try:
        if "constant" in spec:
            v = np.asarray(spec["constant"], dtype=float)
            if v.shape == shape:
                v = np.broadcast_to(v, (nreg,) + shape)
            if v.shape != (nreg,) + shape:
                raise ConfigurationError(
                    f"coefficients.{name}.constant has shape {v.shape}, expected {(nreg,) + shape}"
                )
            return CoefficientTable.constant(v, horizon, interp)
        if "grid" in spec and "values" in spec:
            grid = np.asarray(spec["grid"], dtype=float)
            v = np.asarray(spec["values"], dtype=float)
            want = (nreg, grid.size) + shape
            if v.shape != want:
                raise ConfigurationError(
                    f"coefficients.{name}.values has shape {v.shape}, expected {want}"
                )
            return CoefficientTable(grid, v, interp)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"coefficients.{name}: {exc}") from exc
    raise ConfigurationError(f"coefficients.{name} needs 'constant' or 'grid' and 'values'")


def _infer_mn(coeffs: dict, doc: dict) -> tuple[int, int]:
    sig = coeffs.get("sigma")
    if not isinstance(sig, dict):
        raise ConfigurationError("coefficients.sigma is required")
    raw = sig.get("constant", sig.get("values"))
    try:
        a = np.asarray(raw, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"coefficients.sigma: {exc}") from exc
    if a.ndim < 2:
        raise ConfigurationError("coefficients.sigma entries must be m x n matrices")
    m, n = a.shape[-2:]
    m, n = int(doc.get("assets", m)), int(doc.get("noise", n))
    return m, n


def problem_from_dict(doc: dict) -> tuple[MVALMData, RegimeGenerator]:
    if not isinstance(doc, dict):
        raise ConfigurationError("config document must be a JSON object")
    missing = [k for k in _REQUIRED if k not in doc]
    if missing:
        raise ConfigurationError(f"missing field(s): {', '.join(missing)}")
    try:
        q = np.asarray(doc["generator"], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"generator: {exc}") from exc
    gen = validate_generator(q)
    nreg = gen.num_regimes
    if "regimes" in doc and int(doc["regimes"]) != nreg:
        raise ConfigurationError(f"regimes={doc['regimes']} but generator is {nreg}x{nreg}")
    coeffs = doc["coefficients"]
    if not isinstance(coeffs, dict):
        raise ConfigurationError("coefficients must be an object")
    unknown = set(coeffs) - set(_COEFFS)
    if unknown:
        raise ConfigurationError(f"unknown coefficient(s): {', '.join(sorted(unknown))}")
    m, n = _infer_mn(coeffs, doc)
    T = float(doc["horizon"])
    interp = doc.get("interpolation", PIECEWISE_CONSTANT)
    shapes = _entry_shapes(m, n)
    tables = {}
    for name in _COEFFS:
        if name in coeffs:
            tables[name] = _table(name, coeffs[name], T, nreg, shapes[name], interp)
        elif name in ("b", "rho"):
            tables[name] = CoefficientTable.constant(np.zeros((nreg,) + shapes[name]), T, interp)
        else:
            raise ConfigurationError(f"coefficients.{name} is required")
    i0 = doc["i0"]
    if not isinstance(i0, int) or not 1 <= i0 <= nreg:
        raise ConfigurationError(f"i0 must be an integer regime in 1..{nreg}, got {i0!r}")
    data = MVALMData(
        horizon=T, x0=float(doc["x0"]), i0=i0 - 1, z=float(doc["z"]),
        delta=float(doc["delta"]), **tables,
    )
    return data, gen


def load_config(path: str | Path) -> ProblemConfig:
    """Read and validate a problem document; ``checksum`` is the SHA-256
    of the file bytes."""
    raw = Path(path).read_bytes()
    try:
        doc = json.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise ConfigParseError(f"config is not UTF-8: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigParseError(exc.msg, exc.lineno, exc.colno) from exc
    data, gen = problem_from_dict(doc)
    return ProblemConfig(data, gen, hashlib.sha256(raw).hexdigest(), str(path))
