"""A small arithmetic expression language for configuration files.

Expressions use the variables ``x``, ``y``, ``t`` (and ``xi`` for
nonlinearities), the constants ``pi`` and ``e``, the functions ``sin``,
``cos``, ``exp``, ``abs``, ``min``, ``max``, the operators ``+ - * / **``
and comparisons, which evaluate to 0 or 1.  Nothing else is accepted, so a
configuration file cannot run arbitrary code.

Examples
--------
>>> f = compile_expression("1 + 0.5*sin(2*pi*t)")
>>> float(f.evaluate(t=0.25))
1.5
>>> compile_expression("(abs(x) >= 0.3)").evaluate(x=np.array([0.0, 1.0])).tolist()
[0.0, 1.0]
"""

from __future__ import annotations

import ast
import operator
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

__all__ = ["Expression", "compile_expression", "ExpressionError"]


class ExpressionError(ConfigError):
    """Malformed or disallowed expression; ``column`` is 1-based within the text."""

    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


_FUNCS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "abs": np.abs,
    "min": np.minimum,
    "max": np.maximum,
}
_CONSTS = {"pi": np.pi, "e": np.e}
_BINOPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Pow: np.power,
}
_CMPOPS = {
    ast.Lt: np.less,
    ast.LtE: np.less_equal,
    ast.Gt: np.greater,
    ast.GtE: np.greater_equal,
    ast.Eq: np.equal,
    ast.NotEq: np.not_equal,
}


def _check(node, variables):
    if isinstance(node, ast.Expression):
        return _check(node.body, variables)
    if isinstance(node, ast.Constant):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            raise ExpressionError(f"unsupported literal {node.value!r}", node.col_offset + 1)
        return
    if isinstance(node, ast.Name):
        if node.id not in variables and node.id not in _CONSTS:
            raise ExpressionError(f"unknown name {node.id!r}", node.col_offset + 1)
        return
    if isinstance(node, ast.BinOp):
        if type(node.op) not in _BINOPS:
            raise ExpressionError("unsupported operator", node.col_offset + 1)
        _check(node.left, variables)
        _check(node.right, variables)
        return
    if isinstance(node, ast.UnaryOp):
        if not isinstance(node.op, (ast.UAdd, ast.USub)):
            raise ExpressionError("unsupported unary operator", node.col_offset + 1)
        _check(node.operand, variables)
        return
    if isinstance(node, ast.Compare):
        if any(type(op) not in _CMPOPS for op in node.ops):
            raise ExpressionError("unsupported comparison", node.col_offset + 1)
        _check(node.left, variables)
        for c in node.comparators:
            _check(c, variables)
        return
    if isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS:
            raise ExpressionError("only sin, cos, exp, abs, min, max may be called", node.col_offset + 1)
        if node.keywords:
            raise ExpressionError("keyword arguments are not allowed", node.col_offset + 1)
        want = 1 if node.func.id in ("sin", "cos", "exp", "abs") else 2
        if len(node.args) != want:
            raise ExpressionError(f"{node.func.id} takes {want} argument(s)", node.col_offset + 1)
        for a in node.args:
            _check(a, variables)
        return
    raise ExpressionError(f"unsupported syntax ({type(node).__name__})", getattr(node, "col_offset", 0) + 1)


def _eval(node, env):
    if isinstance(node, ast.Constant):
        return float(node.value)
    if isinstance(node, ast.Name):
        return env[node.id] if node.id in env else _CONSTS[node.id]
    if isinstance(node, ast.BinOp):
        return _BINOPS[type(node.op)](_eval(node.left, env), _eval(node.right, env))
    if isinstance(node, ast.UnaryOp):
        v = _eval(node.operand, env)
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.Compare):
        left = _eval(node.left, env)
        out = None
        for op, comp in zip(node.ops, node.comparators):
            right = _eval(comp, env)
            r = _CMPOPS[type(op)](left, right)
            out = r if out is None else np.logical_and(out, r)
            left = right
        return np.asarray(out, dtype=float)
    f = _FUNCS[node.func.id]
    return f(*[_eval(a, env) for a in node.args])


@dataclass(frozen=True, eq=False)
class Expression:
    text: str
    variables: tuple
    tree: ast.Expression
    uses: frozenset

    @property
    def is_constant(self) -> bool:
        return not self.uses

    def constant_value(self) -> float:
        return float(_eval(self.tree.body, {}))

    def evaluate(self, **values):
        env = {v: np.asarray(values.get(v, 0.0), dtype=float) for v in self.variables}
        with np.errstate(all="ignore"):
            return np.asarray(_eval(self.tree.body, env), dtype=float)

    def field(self):
        """Constant, or callable ``f(x, y, t)`` for coefficient fields."""
        if self.is_constant:
            return self.constant_value()

        def f(x, y, t):
            return self.evaluate(x=x, y=y, t=t)

        return f

    def nonlinearity(self):
        """Callable ``f(x, y, t, xi)``."""

        def f(x, y, t, xi):
            return self.evaluate(x=x, y=y, t=t, xi=xi)

        return f


def compile_expression(text, variables=("x", "y", "t")) -> Expression:
    """Parse and validate ``text``; raises ExpressionError with a column."""
    if isinstance(text, (int, float)) and not isinstance(text, bool):
        text = repr(float(text))
    if not isinstance(text, str):
        raise ExpressionError(f"expression must be a string or number, got {type(text).__name__}")
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"syntax error in expression {text!r}", exc.offset) from None
    _check(tree, set(variables))
    uses = frozenset(n.id for n in ast.walk(tree) if isinstance(n, ast.Name) and n.id in variables)
    return Expression(text.strip(), tuple(variables), tree, uses)
