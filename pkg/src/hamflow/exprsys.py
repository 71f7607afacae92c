"""User-defined systems from arithmetic expression strings.

Supported syntax per component: operators + - * / ^, functions sin, cos,
exp, variable names x1..xn and named constants.  Jacobians come from
forward-mode dual numbers and the penalty Hessian at the origin from
hyper-dual numbers, so no finite differencing enters the system definition.
"""

from __future__ import annotations

import ast
import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .systems import ControlAffineSystem

_ALLOWED_CALLS = ("sin", "cos", "exp")


# ---------------------------------------------------------------------------
# forward-mode numbers
# ---------------------------------------------------------------------------

@dataclass
class Dual:
    """First-order dual number with a gradient payload: val + grad . eps."""

    val: float
    grad: np.ndarray

    def _lift(self, other):
        if isinstance(other, Dual):
            return other
        return Dual(float(other), np.zeros_like(self.grad))

    def __add__(self, o):
        o = self._lift(o)
        return Dual(self.val + o.val, self.grad + o.grad)

    __radd__ = __add__

    def __sub__(self, o):
        o = self._lift(o)
        return Dual(self.val - o.val, self.grad - o.grad)

    def __rsub__(self, o):
        return self._lift(o).__sub__(self)

    def __mul__(self, o):
        o = self._lift(o)
        return Dual(self.val * o.val, self.val * o.grad + o.val * self.grad)

    __rmul__ = __mul__

    def __truediv__(self, o):
        o = self._lift(o)
        return Dual(self.val / o.val,
                    (self.grad * o.val - self.val * o.grad) / o.val ** 2)

    def __rtruediv__(self, o):
        return self._lift(o).__truediv__(self)

    def __neg__(self):
        return Dual(-self.val, -self.grad)

    def __pos__(self):
        return self

    def __pow__(self, o):
        if isinstance(o, Dual):
            if np.any(o.grad != 0.0):
                # a^b = exp(b log a); requires a > 0
                return (o * _log(self)).exp()
            o = o.val
        e = float(o)
        return Dual(self.val ** e, e * self.val ** (e - 1.0) * self.grad)

    def __rpow__(self, o):
        return self._lift(o).__pow__(self)

    def exp(self):
        v = np.exp(self.val)
        return Dual(v, v * self.grad)


def _log(x: Dual) -> Dual:
    if x.val <= 0:
        raise ValueError("log of nonpositive base in dual power")
    return Dual(np.log(x.val), x.grad / x.val)


@dataclass
class HyperDual:
    """Truncated bivariate dual: f + f1 e1 + f2 e2 + f12 e1 e2 (e_i^2 = 0)."""

    f: float
    f1: float
    f2: float
    f12: float

    def _lift(self, other):
        if isinstance(other, HyperDual):
            return other
        return HyperDual(float(other), 0.0, 0.0, 0.0)

    def __add__(self, o):
        o = self._lift(o)
        return HyperDual(self.f + o.f, self.f1 + o.f1, self.f2 + o.f2,
                         self.f12 + o.f12)

    __radd__ = __add__

    def __sub__(self, o):
        o = self._lift(o)
        return HyperDual(self.f - o.f, self.f1 - o.f1, self.f2 - o.f2,
                         self.f12 - o.f12)

    def __rsub__(self, o):
        return self._lift(o).__sub__(self)

    def __mul__(self, o):
        o = self._lift(o)
        return HyperDual(
            self.f * o.f,
            self.f1 * o.f + self.f * o.f1,
            self.f2 * o.f + self.f * o.f2,
            self.f12 * o.f + self.f1 * o.f2 + self.f2 * o.f1 + self.f * o.f12,
        )

    __rmul__ = __mul__

    def _chain(self, u, du, ddu):
        return HyperDual(u, du * self.f1, du * self.f2,
                         ddu * self.f1 * self.f2 + du * self.f12)

    def reciprocal(self):
        f = self.f
        return self._chain(1.0 / f, -1.0 / f ** 2, 2.0 / f ** 3)

    def __truediv__(self, o):
        o = self._lift(o)
        return self * o.reciprocal()

    def __rtruediv__(self, o):
        return self._lift(o).__truediv__(self)

    def __neg__(self):
        return HyperDual(-self.f, -self.f1, -self.f2, -self.f12)

    def __pos__(self):
        return self

    def __pow__(self, o):
        if isinstance(o, HyperDual):
            if o.f1 != 0.0 or o.f2 != 0.0 or o.f12 != 0.0:
                raise ValueError("variable exponents unsupported for hyperduals")
            o = o.f
        e = float(o)
        f = self.f
        return self._chain(f ** e, e * f ** (e - 1.0),
                           e * (e - 1.0) * f ** (e - 2.0))

    def __rpow__(self, o):
        base = self._lift(o)
        return base.__pow__(self)

    def sin(self):
        return self._chain(np.sin(self.f), np.cos(self.f), -np.sin(self.f))

    def cos(self):
        return self._chain(np.cos(self.f), -np.sin(self.f), -np.cos(self.f))

    def exp(self):
        v = np.exp(self.f)
        return self._chain(v, v, v)


def _sin(x):
    if isinstance(x, Dual):
        return Dual(np.sin(x.val), np.cos(x.val) * x.grad)
    if isinstance(x, HyperDual):
        return x.sin()
    return np.sin(x)


def _cos(x):
    if isinstance(x, Dual):
        return Dual(np.cos(x.val), -np.sin(x.val) * x.grad)
    if isinstance(x, HyperDual):
        return x.cos()
    return np.cos(x)


def _exp(x):
    if isinstance(x, (Dual, HyperDual)):
        return x.exp()
    return np.exp(x)


_FUNCS = {"sin": _sin, "cos": _cos, "exp": _exp}


# ---------------------------------------------------------------------------
# expression compilation
# ---------------------------------------------------------------------------

_BINOPS = {
    ast.Add: lambda a, b: a + b,
    ast.Sub: lambda a, b: a - b,
    ast.Mult: lambda a, b: a * b,
    ast.Div: lambda a, b: a / b,
    ast.Pow: lambda a, b: a ** b,
}


class Expression:
    """One compiled scalar expression over named variables and constants."""

    def __init__(self, source: str, variables, constants=None):
        self.source = source
        self.variables = list(variables)
        self.constants = dict(constants or {})
        text = source.replace("^", "**")
        try:
            tree = ast.parse(text, mode="eval")
        except SyntaxError as exc:
            raise ConfigError(f"bad expression {source!r}: {exc.msg}") from None
        self._root = tree.body
        self._check(self._root)

    def _check(self, node):
        if isinstance(node, ast.Constant):
            if not isinstance(node.value, (int, float)):
                raise ConfigError(f"non-numeric constant in {self.source!r}")
        elif isinstance(node, ast.Name):
            if node.id not in self.variables and node.id not in self.constants:
                raise ConfigError(
                    f"unknown name {node.id!r} in {self.source!r}")
        elif isinstance(node, ast.BinOp):
            if type(node.op) not in _BINOPS:
                raise ConfigError(f"operator not allowed in {self.source!r}")
            self._check(node.left)
            self._check(node.right)
        elif isinstance(node, ast.UnaryOp):
            if not isinstance(node.op, (ast.USub, ast.UAdd)):
                raise ConfigError(f"operator not allowed in {self.source!r}")
            self._check(node.operand)
        elif isinstance(node, ast.Call):
            if (not isinstance(node.func, ast.Name)
                    or node.func.id not in _ALLOWED_CALLS
                    or node.keywords or len(node.args) != 1):
                raise ConfigError(
                    f"only sin/cos/exp calls allowed in {self.source!r}")
            self._check(node.args[0])
        else:
            raise ConfigError(
                f"unsupported syntax {type(node).__name__} in {self.source!r}")

    def __call__(self, values: dict):
        return self._eval(self._root, values)

    def _eval(self, node, values):
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            if node.id in values:
                return values[node.id]
            return float(self.constants[node.id])
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, values),
                                          self._eval(node.right, values))
        if isinstance(node, ast.UnaryOp):
            v = self._eval(node.operand, values)
            return -v if isinstance(node.op, ast.USub) else +v
        if isinstance(node, ast.Call):
            return _FUNCS[node.func.id](self._eval(node.args[0], values))
        raise AssertionError("unreachable")


def _scalar(v):
    if isinstance(v, Dual):
        return v.val
    if isinstance(v, HyperDual):
        return v.f
    return float(v)


# ---------------------------------------------------------------------------
# system assembly
# ---------------------------------------------------------------------------

def expression_system(spec: dict, name: str = "expr") -> ControlAffineSystem:
    """Build a ControlAffineSystem from an expression specification.

    Expected keys: n, m, f (list of n strings), g (n x m nested list of
    strings), h (string, optional; defaults to 0), params (optional dict of
    named constants).  State variables are x1..xn.
    """
    try:
        n = int(spec["n"])
        m = int(spec["m"])
        f_src = list(spec["f"])
        g_src = [list(row) for row in spec["g"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"expression system needs n, m, f, g: {exc}") from None
    params = dict(spec.get("params", {}))
    h_src = spec.get("h", "0")
    if len(f_src) != n or len(g_src) != n or any(len(r) != m for r in g_src):
        raise ConfigError("f must have n entries and g must be n x m")

    names = [f"x{i+1}" for i in range(n)]
    f_ex = [Expression(s, names, params) for s in f_src]
    g_ex = [[Expression(s, names, params) for s in row] for row in g_src]
    h_ex = Expression(h_src, names, params)

    def env_plain(x):
        return {nm: float(x[i]) for i, nm in enumerate(names)}

    def env_dual(x):
        return {nm: Dual(float(x[i]), np.eye(n)[i]) for i, nm in enumerate(names)}

    def f(x):
        env = env_plain(x)
        return np.array([_scalar(e(env)) for e in f_ex])

    def g(x):
        env = env_plain(x)
        return np.array([[_scalar(e(env)) for e in row] for row in g_ex])

    def h(x):
        return _scalar(h_ex(env_plain(x)))

    def Df(x):
        env = env_dual(x)
        out = np.zeros((n, n))
        for i, e in enumerate(f_ex):
            v = e(env)
            out[i] = v.grad if isinstance(v, Dual) else 0.0
        return out

    def Dg(x):
        env = env_dual(x)
        out = np.zeros((m, n, n))
        for i, row in enumerate(g_ex):
            for j, e in enumerate(row):
                v = e(env)
                if isinstance(v, Dual):
                    out[j, i] = v.grad
        return out

    def Dh(x):
        v = h_ex(env_dual(x))
        return v.grad.copy() if isinstance(v, Dual) else np.zeros(n)

    D2h0 = np.zeros((n, n))
    zero = np.zeros(n)
    for i in range(n):
        for j in range(i, n):
            env = {nm: HyperDual(zero[k], 1.0 if k == i else 0.0,
                                 1.0 if k == j else 0.0, 0.0)
                   for k, nm in enumerate(names)}
            v = h_ex(env)
            val = v.f12 if isinstance(v, HyperDual) else 0.0
            D2h0[i, j] = D2h0[j, i] = val

    sys = ControlAffineSystem(n=n, m=m, f=f, g=g, h=h, Df=Df, Dg=Dg, Dh=Dh,
                              D2h0=D2h0, name=name)

    if np.linalg.norm(sys.f(zero)) > 1e-9:
        raise ConfigError("f(0) must vanish: the origin is not an equilibrium")
    if abs(sys.h(zero)) > 1e-12 or np.linalg.norm(sys.Dh(zero)) > 1e-9:
        raise ConfigError("penalty must satisfy h(0) = 0 and Dh(0) = 0")
    return sys


def load_expression_system(path) -> ControlAffineSystem:
    with open(path) as fh:
        try:
            spec = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return expression_system(spec, name=str(spec.get("name", "expr")))
