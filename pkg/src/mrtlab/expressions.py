"""Tiny arithmetic expression evaluator for scenario coefficient fields.

Supports + - * / ^ (power), unary minus, parentheses, the functions
exp, sin, cos, sqrt, abs, step, bump, min, max, and named variables
supplied by the caller (x1..x3, xi1..xi3, eta1..eta3, r, cos_theta).
Expressions are parsed with the Python ast module and evaluated against
numpy arrays; anything outside the whitelist is rejected.
"""

from __future__ import annotations

import ast

import numpy as np

from .util import bump


class ExpressionError(ValueError):
    pass


_FUNCS = {
    "exp": np.exp,
    "sin": np.sin,
    "cos": np.cos,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "step": lambda t: (np.asarray(t) >= 0.0).astype(float),
    "bump": bump,
    "min": np.minimum,
    "max": np.maximum,
}

_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}


class Expression:
    """A compiled scalar expression over named array variables."""

    def __init__(self, text: str):
        self.text = text
        try:
            self._tree = ast.parse(text.replace("^", "**"), mode="eval")
        except SyntaxError as exc:
            raise ExpressionError(f"cannot parse expression {text!r}: {exc}") from exc
        self._check(self._tree.body)

    def _check(self, node: ast.AST) -> None:
        if isinstance(node, ast.Constant):
            if not isinstance(node.value, (int, float)):
                raise ExpressionError(f"non-numeric constant in {self.text!r}")
        elif isinstance(node, ast.Name):
            pass
        elif isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            self._check(node.left)
            self._check(node.right)
        elif isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            self._check(node.operand)
        elif isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS:
                raise ExpressionError(f"unknown function in {self.text!r}")
            if node.keywords:
                raise ExpressionError("keyword arguments are not supported")
            for arg in node.args:
                self._check(arg)
        else:
            raise ExpressionError(f"disallowed syntax in {self.text!r}")

    def _eval(self, node: ast.AST, env: dict) -> np.ndarray:
        if isinstance(node, ast.Constant):
            return node.value
        if isinstance(node, ast.Name):
            if node.id not in env:
                raise ExpressionError(
                    f"unknown variable {node.id!r} in {self.text!r}; "
                    f"available: {sorted(env)}")
            return env[node.id]
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, env),
                                          self._eval(node.right, env))
        if isinstance(node, ast.UnaryOp):
            val = self._eval(node.operand, env)
            return -val if isinstance(node.op, ast.USub) else +val
        if isinstance(node, ast.Call):
            args = [self._eval(a, env) for a in node.args]
            return _FUNCS[node.func.id](*args)
        raise ExpressionError("unreachable")

    def __call__(self, **env) -> np.ndarray:
        return np.asarray(self._eval(self._tree.body, env), dtype=float)


def _position_env(x: np.ndarray) -> dict:
    env = {"r": np.sqrt((x * x).sum(axis=-1))}
    for i in range(x.shape[-1]):
        env[f"x{i + 1}"] = x[..., i]
    if x.shape[-1] == 2:
        env["x3"] = np.zeros_like(env["x1"])
    return env


def position_function(text: str):
    """Compile an expression of x1..x3, r into f(x) for points (N, n)."""
    expr = Expression(text)

    def f(x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.broadcast_to(expr(**_position_env(x)), x.shape[:-1]).astype(float)

    return f


def phase_function(text: str):
    """Compile an expression of x*, xi*, r into f(x, xi) on phase points."""
    expr = Expression(text)

    def f(x: np.ndarray, xi: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        env = _position_env(x)
        for i in range(xi.shape[-1]):
            env[f"xi{i + 1}"] = xi[..., i]
        if xi.shape[-1] == 2:
            env["xi3"] = np.zeros_like(env["x1"])
        return np.broadcast_to(expr(**env), x.shape[:-1]).astype(float)

    return f


def kernel_function(text: str):
    """Compile an expression of x*, eta*, xi*, r, cos_theta into k(x, eta, xi).

    cos_theta is the metric inner product of the unit vectors eta and xi,
    which for a conformal metric equals their Euclidean cosine.
    """
    expr = Expression(text)

    def f(x: np.ndarray, eta: np.ndarray, xi: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        eta = np.atleast_2d(np.asarray(eta, dtype=float))
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        env = _position_env(x)
        for i in range(xi.shape[-1]):
            env[f"xi{i + 1}"] = xi[..., i]
            env[f"eta{i + 1}"] = eta[..., i]
        ne = eta / np.linalg.norm(eta, axis=-1, keepdims=True)
        nx = xi / np.linalg.norm(xi, axis=-1, keepdims=True)
        env["cos_theta"] = (ne * nx).sum(axis=-1)
        return np.broadcast_to(expr(**env), x.shape[:-1]).astype(float)

    return f
