"""Run configuration: YAML parsing with source positions, validation, dumping.

A minimal configuration::

    mesh:
      dim: 1
      bounds: [[0, 3.141592653589793]]
      n: 200
      bc: {left: dirichlet, right: dirichlet}
    period: 1.0
    steps: 200
    command: {name: eigen}

Coefficients, the weight and the nonlinearity are expression strings (see
:mod:`periodic_logistic.expressions`).  ``parse_config(dump_config(c)) == c``.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError, ConfigParseError, MissingFieldError, PeriodicityError
from .expressions import ExpressionError, compile_expression

__all__ = ["RunConfig", "parse_config", "parse_config_text", "dump_config", "config_hash", "COMMANDS"]

COMMANDS = ("eigen", "mu-star", "logistic", "bifurcate", "blowup", "all")
NEEDS_NONLINEARITY = ("logistic", "bifurcate", "blowup", "all")
SIDES = {1: ("left", "right"), 2: ("left", "right", "bottom", "top")}


@dataclass(frozen=True)
class RunConfig:
    dim: int
    bounds: tuple
    n: tuple
    bc: tuple  # ((side, kind), ...)
    T: float = 1.0
    K: int = 200
    theta: float = 1.0
    a: tuple = None
    drift: tuple = None
    convection: tuple = None
    c0: str = "0"
    beta0: str = "0"
    weight: str = "1"
    g: str = None
    dg: str = None
    growth: tuple = None
    command: str = "eigen"
    gamma_ladder: tuple = None
    mu: tuple = ()
    direction: str = "up"
    mu_ladder: tuple = None
    rungs: int = 8
    tol_fix: float = None
    max_periods: int = 500
    margin: int = 2
    seed: int = 0
    output: str = None


class _Marks:
    def __init__(self):
        self.pos = {}

    def at(self, path):
        return self.pos.get(path, (None, None))


def _construct(node, path, marks):
    marks.pos[path] = (node.start_mark.line + 1, node.start_mark.column + 1)
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = yaml.safe_load(yaml.serialize(k)) if not isinstance(k, yaml.ScalarNode) else k.value
            if key in out:
                raise ConfigParseError(f"duplicate key {key!r}", k.start_mark.line + 1, k.start_mark.column + 1)
            out[key] = _construct(v, path + (key,), marks)
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_construct(v, path + (i,), marks) for i, v in enumerate(node.value)]
    return yaml.safe_load(yaml.serialize(node))


def _load(text: str):
    marks = _Marks()
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.MarkedYAMLError as exc:
        m = exc.problem_mark
        raise ConfigParseError(f"malformed configuration: {exc.problem}", m.line + 1, m.column + 1) from None
    if node is None:
        raise ConfigParseError("empty configuration", 1, 1)
    data = _construct(node, (), marks)
    if not isinstance(data, dict):
        raise ConfigParseError("top level must be a mapping", 1, 1)
    return data, marks


def _fail(msg, path, marks, cls=ConfigParseError):
    line, col = marks.at(path)
    return cls(f"{'.'.join(map(str, path))}: {msg}", line, col)


def _expr(value, path, marks, variables=("x", "y", "t")):
    if value is None:
        return None
    try:
        compile_expression(value, variables)
    except ExpressionError as exc:
        line, col = marks.at(path)
        if col is not None and exc.column is not None:
            col = col + exc.column - 1 + (1 if isinstance(value, str) else 0)
        raise ConfigParseError(f"{'.'.join(map(str, path))}: {exc}", line, col) from None
    return value if isinstance(value, str) else repr(float(value))


def _number(value, path, marks, kind=float, positive=False):
    if isinstance(value, str):
        # YAML 1.1 reads "1e-10" (no dot) as a string
        try:
            value = float(value)
        except ValueError:
            pass
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise _fail(f"expected a number, got {value!r}", path, marks)
    if kind is int and float(value) != int(value):
        raise _fail(f"expected an integer, got {value!r}", path, marks)
    v = kind(value)
    if positive and v <= 0:
        raise _fail("must be positive", path, marks)
    return v


def _section(data, key, marks, required=False):
    if key not in data:
        if required:
            raise MissingFieldError(f"missing field {key!r}", field=key)
        return {}
    v = data[key]
    if not isinstance(v, dict):
        raise _fail("expected a mapping", (key,), marks)
    return v


_TOP = {"mesh", "period", "steps", "theta", "coefficients", "weight", "nonlinearity", "command", "seed", "output"}


def parse_config_text(text: str, check_periodic: bool = True) -> RunConfig:
    data, marks = _load(text)
    for k in data:
        if k not in _TOP:
            raise _fail("unknown field", (k,), marks)
    mesh = _section(data, "mesh", marks, required=True)
    dim = _number(mesh.get("dim", 1), ("mesh", "dim"), marks, int)
    if dim not in (1, 2):
        raise _fail("dim must be 1 or 2", ("mesh", "dim"), marks)
    if "bounds" not in mesh:
        raise MissingFieldError("missing field 'mesh.bounds'", field="mesh.bounds")
    bounds = mesh["bounds"]
    if not (isinstance(bounds, list) and len(bounds) == dim and all(isinstance(b, list) and len(b) == 2 for b in bounds)):
        raise _fail(f"expected {dim} pairs [lo, hi]", ("mesh", "bounds"), marks)
    bounds = tuple(
        tuple(_number(v, ("mesh", "bounds", i, j), marks) for j, v in enumerate(b)) for i, b in enumerate(bounds)
    )
    n = mesh.get("n")
    if n is None:
        raise MissingFieldError("missing field 'mesh.n'", field="mesh.n")
    n = [n] * dim if not isinstance(n, list) else n
    if len(n) != dim:
        raise _fail(f"expected {dim} node counts", ("mesh", "n"), marks)
    n = tuple(_number(v, ("mesh", "n"), marks, int, positive=True) for v in n)
    bc_in = mesh.get("bc", {})
    if not isinstance(bc_in, dict):
        raise _fail("expected a mapping side -> kind", ("mesh", "bc"), marks)
    bc = []
    for side in SIDES[dim]:
        kind = bc_in.get(side, "dirichlet")
        kind = "robin" if kind == "neumann" else kind
        if kind not in ("dirichlet", "robin"):
            raise _fail(f"unknown boundary kind {kind!r}", ("mesh", "bc", side), marks)
        bc.append((side, kind))
    for side in bc_in:
        if side not in SIDES[dim]:
            raise _fail("unknown side", ("mesh", "bc", side), marks)

    T = _number(data.get("period", 1.0), ("period",), marks, positive=True)
    K = _number(data.get("steps", 200), ("steps",), marks, int, positive=True)
    theta = _number(data.get("theta", 1.0), ("theta",), marks)
    if not 0.5 <= theta <= 1.0:
        raise _fail("theta must lie in [0.5, 1]", ("theta",), marks)

    co = _section(data, "coefficients", marks)
    a = co.get("a")
    if a is None:
        a = tuple(tuple("1" if j == k else "0" for k in range(dim)) for j in range(dim))
    elif not isinstance(a, list):
        e = _expr(a, ("coefficients", "a"), marks)
        a = tuple(tuple(e if j == k else "0" for k in range(dim)) for j in range(dim))
    else:
        if len(a) != dim or any(not isinstance(r, list) or len(r) != dim for r in a):
            raise _fail(f"expected a {dim}x{dim} matrix", ("coefficients", "a"), marks)
        a = tuple(tuple(_expr(v, ("coefficients", "a", j, k), marks) for k, v in enumerate(r)) for j, r in enumerate(a))

    def vec(key):
        v = co.get(key)
        if v is None:
            return None
        if not isinstance(v, list) or len(v) != dim:
            raise _fail(f"expected {dim} expressions", ("coefficients", key), marks)
        return tuple(_expr(e, ("coefficients", key, i), marks) for i, e in enumerate(v))

    drift = vec("drift")
    convection = vec("convection")
    c0 = _expr(co.get("c0", "0"), ("coefficients", "c0"), marks)
    beta0 = _expr(co.get("beta0", "0"), ("coefficients", "beta0"), marks)
    for k in co:
        if k not in ("a", "drift", "convection", "c0", "beta0"):
            raise _fail("unknown field", ("coefficients", k), marks)
    weight = _expr(data.get("weight", "1"), ("weight",), marks)

    nl = _section(data, "nonlinearity", marks)
    g = _expr(nl.get("g"), ("nonlinearity", "g"), marks, ("x", "y", "t", "xi"))
    dg = _expr(nl.get("dg"), ("nonlinearity", "dg"), marks, ("x", "y", "t", "xi"))
    growth = nl.get("growth")
    if growth is not None:
        if not isinstance(growth, list) or len(growth) != 2:
            raise _fail("expected [c, p]", ("nonlinearity", "growth"), marks)
        growth = tuple(_number(v, ("nonlinearity", "growth"), marks, positive=True) for v in growth)

    cmd = data.get("command", {"name": "eigen"})
    if isinstance(cmd, str):
        cmd = {"name": cmd}
    if not isinstance(cmd, dict):
        raise _fail("expected a mapping", ("command",), marks)
    name = cmd.get("name", "eigen")
    if name not in COMMANDS:
        raise _fail(f"unknown command {name!r}", ("command", "name"), marks)
    allowed = {"name", "gamma_ladder", "mu", "direction", "mu_ladder", "rungs", "tol_fix", "max_periods", "margin"}
    for k in cmd:
        if k not in allowed:
            raise _fail("unknown field", ("command", k), marks)

    def numlist(key, positive=False):
        v = cmd.get(key)
        if v is None:
            return None
        v = v if isinstance(v, list) else [v]
        return tuple(_number(x, ("command", key, i), marks, positive=positive) for i, x in enumerate(v))

    gamma_ladder = numlist("gamma_ladder", positive=True)
    mu = numlist("mu") or ()
    mu_ladder = numlist("mu_ladder")
    direction = cmd.get("direction", "up")
    if direction not in ("up", "down"):
        raise _fail("direction must be 'up' or 'down'", ("command", "direction"), marks)
    rungs = _number(cmd.get("rungs", 8), ("command", "rungs"), marks, int, positive=True)
    tol_fix = cmd.get("tol_fix")
    tol_fix = None if tol_fix is None else _number(tol_fix, ("command", "tol_fix"), marks, positive=True)
    max_periods = _number(cmd.get("max_periods", 500), ("command", "max_periods"), marks, int, positive=True)
    margin = _number(cmd.get("margin", 2), ("command", "margin"), marks, int)
    if margin < 0:
        raise _fail("margin must be nonnegative", ("command", "margin"), marks)
    if name in NEEDS_NONLINEARITY:
        if g is None:
            raise MissingFieldError(f"command {name!r} needs nonlinearity.g", field="nonlinearity.g")
        if dg is None:
            raise MissingFieldError(f"command {name!r} needs nonlinearity.dg", field="nonlinearity.dg")
    if name == "logistic" and not mu:
        raise MissingFieldError("command 'logistic' needs command.mu", field="command.mu")
    seed = _number(data.get("seed", 0), ("seed",), marks, int)
    if seed < 0:
        raise _fail("seed must be nonnegative", ("seed",), marks)
    output = data.get("output")
    if output is not None and not isinstance(output, str):
        raise _fail("expected a path string", ("output",), marks)

    cfg = RunConfig(
        dim=dim, bounds=bounds, n=n, bc=tuple(bc), T=T, K=K, theta=theta, a=a, drift=drift,
        convection=convection, c0=c0, beta0=beta0, weight=weight, g=g, dg=dg, growth=growth,
        command=name, gamma_ladder=gamma_ladder, mu=mu, direction=direction, mu_ladder=mu_ladder,
        rungs=rungs, tol_fix=tol_fix, max_periods=max_periods, margin=margin, seed=seed, output=output,
    )
    if check_periodic:
        check_periodicity(cfg)
    return cfg


def parse_config(path, check_periodic: bool = True) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"configuration file not found: {p}")
    return parse_config_text(p.read_text(), check_periodic)


def expression_fields(cfg: RunConfig) -> dict:
    out = {"weight": cfg.weight, "coefficients.c0": cfg.c0, "coefficients.beta0": cfg.beta0}
    for j, row in enumerate(cfg.a):
        for k, e in enumerate(row):
            out[f"coefficients.a.{j}.{k}"] = e
    for key in ("drift", "convection"):
        vals = getattr(cfg, key)
        if vals is not None:
            for i, e in enumerate(vals):
                out[f"coefficients.{key}.{i}"] = e
    return out


def check_periodicity(cfg: RunConfig, samples: int = 13, tol: float = 1e-12) -> None:
    """Sample each expression at ``t`` and ``t + T`` for ``t`` in ``[-T, T]``."""
    rng = np.random.default_rng(1234)
    pts = [rng.uniform(lo, hi, 16) for lo, hi in cfg.bounds]
    x = pts[0]
    y = pts[1] if cfg.dim == 2 else np.zeros_like(x)
    ts = np.linspace(-cfg.T, cfg.T, samples) + 0.37 * cfg.T / samples
    xi = np.linspace(0.0, 5.0, 16)
    exprs = dict(expression_fields(cfg))
    for key in ("g", "dg"):
        if getattr(cfg, key) is not None:
            exprs[f"nonlinearity.{key}"] = getattr(cfg, key)
    for name, text in exprs.items():
        e = compile_expression(text, ("x", "y", "t", "xi"))
        if "t" not in e.uses:
            continue
        for t in ts:
            v0 = e.evaluate(x=x, y=y, t=t, xi=xi)
            v1 = e.evaluate(x=x, y=y, t=t + cfg.T, xi=xi)
            if np.max(np.abs(v1 - v0)) > tol * (1 + np.max(np.abs(v0))):
                raise PeriodicityError(f"expression for {name} is not periodic in t with period {cfg.T}", field=name)


def _plain(cfg: RunConfig) -> dict:
    d = {
        "mesh": {
            "dim": cfg.dim,
            "bounds": [list(b) for b in cfg.bounds],
            "n": list(cfg.n),
            "bc": {s: k for s, k in cfg.bc},
        },
        "period": cfg.T,
        "steps": cfg.K,
        "theta": cfg.theta,
        "coefficients": {"a": [list(r) for r in cfg.a], "c0": cfg.c0, "beta0": cfg.beta0},
        "weight": cfg.weight,
        "command": {
            "name": cfg.command,
            "direction": cfg.direction,
            "rungs": cfg.rungs,
            "max_periods": cfg.max_periods,
            "margin": cfg.margin,
        },
        "seed": cfg.seed,
    }
    for key in ("drift", "convection"):
        if getattr(cfg, key) is not None:
            d["coefficients"][key] = list(getattr(cfg, key))
    nl = {k: getattr(cfg, k) for k in ("g", "dg") if getattr(cfg, k) is not None}
    if cfg.growth is not None:
        nl["growth"] = list(cfg.growth)
    if nl:
        d["nonlinearity"] = nl
    for key in ("gamma_ladder", "mu_ladder"):
        if getattr(cfg, key) is not None:
            d["command"][key] = list(getattr(cfg, key))
    if cfg.mu:
        d["command"]["mu"] = list(cfg.mu)
    if cfg.tol_fix is not None:
        d["command"]["tol_fix"] = cfg.tol_fix
    if cfg.output is not None:
        d["output"] = cfg.output
    return d


def dump_config(cfg: RunConfig) -> str:
    """YAML text that parses back to ``cfg``."""
    return yaml.safe_dump(_plain(cfg), sort_keys=True, default_flow_style=None)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()
