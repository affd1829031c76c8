"""Model descriptions read from YAML.

Two forms are accepted.  The satellite template::

    template: satellite
    delta: 1.0e-3
    q1: 0.0063          # optional
    theta_true: 5.0     # optional

and an explicit model whose matrix entries are polynomials in named
parameters::

    name: scalar-noise
    params: [theta]
    theta_true: [1.0]
    matrices:
      F: [[1]]
      H: [[1]]
      R: [["theta"]]
      Pi0: [[1]]
      Omega: [[0]]

``F``, ``H``, ``R`` and ``Pi0`` are required.  Missing ``G`` defaults to the
identity, ``Omega`` to zero, ``B`` to an ``n x 1`` zero column and ``x0`` to
zero.  Entries are parsed with sympy; anything that is not a polynomial in the
declared parameters is rejected.  Partials are derived symbolically.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import sympy
import yaml

from .errors import ConfigError
from .model import MATRIX_NAMES, SATELLITE_Q1, ParametrizedModel, satellite_model

REQUIRED = ("F", "H", "R", "Pi0")


@dataclass(frozen=True)
class ModelConfig:
    model: ParametrizedModel
    theta_true: np.ndarray | None
    source: str = "<mapping>"


def read_yaml(path) -> dict[str, Any]:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def _theta_vector(value, p: int | None = None) -> np.ndarray | None:
    if value is None:
        return None
    arr = np.atleast_1d(np.asarray(value, dtype=float)).reshape(-1)
    if p is not None and arr.size != p:
        raise ConfigError(f"theta_true has {arr.size} entries, expected {p}")
    return arr


def _parse_entry(raw, symbols: dict[str, sympy.Symbol], where: str) -> sympy.Expr:
    if isinstance(raw, bool):
        raise ConfigError(f"{where}: boolean is not a matrix entry")
    if isinstance(raw, (int, float)):
        return sympy.Float(raw) if isinstance(raw, float) else sympy.Integer(raw)
    if not isinstance(raw, str):
        raise ConfigError(f"{where}: unsupported entry {raw!r}")
    try:
        expr = sympy.sympify(raw, locals=dict(symbols), rational=False)
    except (sympy.SympifyError, SyntaxError, TypeError) as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} ({exc})") from None
    unknown = expr.free_symbols - set(symbols.values())
    if unknown:
        names = ", ".join(sorted(str(s) for s in unknown))
        raise ConfigError(f"{where}: unknown symbol(s) {names}")
    if symbols and not expr.is_polynomial(*symbols.values()):
        raise ConfigError(f"{where}: {raw!r} is not a polynomial in the parameters")
    return expr


def _parse_matrix(name: str, raw, symbols) -> sympy.Matrix:
    if name == "x0":
        rows = [[e] for e in np.atleast_1d(np.asarray(raw, dtype=object)).reshape(-1)]
    elif not isinstance(raw, list):
        rows = [[raw]]
    elif raw and all(isinstance(r, list) for r in raw):
        rows = raw
    else:
        rows = [raw]
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ConfigError(f"{name}: rows have different lengths")
    return sympy.Matrix([[_parse_entry(e, symbols, f"{name}[{i}][{j}]") for j, e in enumerate(r)] for i, r in enumerate(rows)])


def _compile(mat: sympy.Matrix, syms: list[sympy.Symbol]):
    shape = mat.shape
    if not mat.free_symbols:
        const = np.array(mat.tolist(), dtype=float).reshape(shape)
        return lambda theta: const
    fn = sympy.lambdify(syms, mat, modules="numpy")
    return lambda theta: np.asarray(fn(*theta), dtype=float).reshape(shape)


def _polynomial_model(data: Mapping[str, Any]) -> ModelConfig:
    params = data.get("params", ["theta"])
    if isinstance(params, str):
        params = [params]
    if not params or len(set(params)) != len(params):
        raise ConfigError("params must be a non-empty list of distinct names")
    syms = [sympy.Symbol(str(name), real=True) for name in params]
    symbols = dict(zip(map(str, params), syms))
    raw = data.get("matrices")
    if not isinstance(raw, dict):
        raise ConfigError("'matrices' mapping is required")
    extra = set(raw) - set(MATRIX_NAMES)
    if extra:
        raise ConfigError(f"unknown matrix name(s): {', '.join(sorted(extra))}")
    missing = [k for k in REQUIRED if k not in raw]
    if missing:
        raise ConfigError(f"missing matrix entries: {', '.join(missing)}")

    mats = {name: _parse_matrix(name, raw[name], symbols) for name in raw}
    n, m = mats["F"].shape[0], mats["H"].shape[0]
    mats.setdefault("G", sympy.eye(n))
    q = mats["G"].shape[1]
    mats.setdefault("Omega", sympy.zeros(q, q))
    mats.setdefault("B", sympy.zeros(n, 1))
    mats.setdefault("x0", sympy.zeros(n, 1))
    d, p = mats["B"].shape[1], len(syms)

    model_shapes = ParametrizedModel(n, m, d, q, p, None, None).shapes
    for name, shape in model_shapes.items():
        got = mats[name].shape
        want = (shape[0], 1) if name == "x0" else shape
        if got != want:
            raise ConfigError(f"{name} has shape {got}, expected {want}")

    values = {name: _compile(mats[name], syms) for name in MATRIX_NAMES}
    partials = {
        name: [_compile(mats[name].diff(s), syms) for s in syms] for name in MATRIX_NAMES
    }

    def matrices(theta):
        out = {name: values[name](theta) for name in MATRIX_NAMES}
        out["x0"] = out["x0"].reshape(n)
        return out

    def partial_matrices(theta):
        out = {name: np.stack([f(theta) for f in partials[name]]) for name in MATRIX_NAMES}
        out["x0"] = out["x0"].reshape(p, n)
        return out

    model = ParametrizedModel(
        n=n, m=m, d=d, q=q, p=p,
        matrices=matrices, partials=partial_matrices,
        name=str(data.get("name", "config-model")),
    )
    return ModelConfig(model=model, theta_true=_theta_vector(data.get("theta_true"), p))


def model_from_mapping(data: Mapping[str, Any]) -> ModelConfig:
    template = data.get("template")
    if template is None:
        return _polynomial_model(data)
    if template != "satellite":
        raise ConfigError(f"unknown template {template!r}")
    if "delta" not in data:
        raise ConfigError("satellite template needs 'delta'")
    try:
        delta = float(data["delta"])
        q1 = float(data.get("q1", SATELLITE_Q1))
    except (TypeError, ValueError):
        raise ConfigError("delta and q1 must be numbers") from None
    if delta <= 0:
        raise ConfigError("delta must be positive")
    return ModelConfig(model=satellite_model(delta, q1), theta_true=_theta_vector(data.get("theta_true"), 1))


def load_model_config(path) -> ModelConfig:
    cfg = model_from_mapping(read_yaml(path))
    return ModelConfig(model=cfg.model, theta_true=cfg.theta_true, source=str(path))
