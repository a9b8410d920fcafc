"""Weight functions ``h = hhat * exp(-4 pi sum_i alpha_i G(., p_i))``."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import sympy

from .green import GreenError, GreenOracle, fundamental

_X, _Y = sympy.symbols("x y", real=True)
_ALLOWED_FUNCS = {sympy.exp}
# numbers (with exponents), x, y, exp, pi, E and arithmetic only
_TOKEN_RE = re.compile(r"[0-9eE.xyexpi+\-*/() \t]+")


class WeightError(ValueError):
    pass


def parse_hhat(expr: str) -> sympy.Expr:
    """Parse an expression in ``x``, ``y`` built from constants, ``+ - * / **`` and ``exp``."""
    if not isinstance(expr, str) or not expr.strip():
        raise WeightError("hhat must be a non-empty expression string")
    if not _TOKEN_RE.fullmatch(expr):
        raise WeightError(f"hhat {expr!r} contains characters outside the grammar")
    for word in re.findall(r"[A-Za-z_]+", expr):
        if word not in ("x", "y", "exp", "pi", "E", "e"):
            raise WeightError(f"unknown identifier {word!r} in hhat")
    local = {"x": _X, "y": _Y, "exp": sympy.exp, "pi": sympy.pi, "E": sympy.E}
    try:
        e = sympy.sympify(expr, locals=local, rational=False, evaluate=True)
    except (sympy.SympifyError, SyntaxError, TypeError) as exc:
        raise WeightError(f"cannot parse hhat {expr!r}: {exc}") from exc
    if not isinstance(e, sympy.Expr):
        raise WeightError(f"hhat {expr!r} is not an expression")
    if not e.free_symbols <= {_X, _Y}:
        raise WeightError(f"hhat may only use x and y, got {sorted(map(str, e.free_symbols))}")
    for f in e.atoms(sympy.Function):
        if f.func not in _ALLOWED_FUNCS:
            raise WeightError(f"function {f.func} not allowed in hhat")
    return e


@dataclass
class WeightSpec:
    """Smooth positive factor ``hhat`` plus optional vortex singularities."""

    hhat: str = "1"
    singular_points: list[tuple[float, float]] = field(default_factory=list)
    alphas: list[float] = field(default_factory=list)

    def __post_init__(self):
        self._expr = parse_hhat(self.hhat)
        self.singular_points = [tuple(map(float, p)) for p in self.singular_points]
        self.alphas = [float(a) for a in self.alphas]
        if len(self.alphas) != len(self.singular_points):
            raise WeightError("alphas and singular_points must have equal length")
        if any(a <= -1 for a in self.alphas):
            raise WeightError("every alpha must exceed -1")
        if len(set(self.singular_points)) != len(self.singular_points):
            raise WeightError("singular points must be distinct")
        logh = sympy.log(self._expr)
        gx, gy = sympy.diff(logh, _X), sympy.diff(logh, _Y)
        lap = sympy.simplify(sympy.diff(logh, _X, 2) + sympy.diff(logh, _Y, 2))
        mods = ["numpy"]
        self._f = sympy.lambdify((_X, _Y), self._expr, mods)
        self._gx = sympy.lambdify((_X, _Y), gx, mods)
        self._gy = sympy.lambdify((_X, _Y), gy, mods)
        self._lap = sympy.lambdify((_X, _Y), lap, mods)

    @classmethod
    def from_json(cls, text: str | dict | None) -> "WeightSpec":
        if text is None or text == "":
            return cls()
        data: Any = json.loads(text) if isinstance(text, str) else dict(text)
        if not isinstance(data, dict):
            raise WeightError("weight description must be a JSON object")
        unknown = set(data) - {"hhat", "singular_points", "alphas"}
        if unknown:
            raise WeightError(f"unknown weight keys {sorted(unknown)}")
        return cls(str(data.get("hhat", "1")), data.get("singular_points", []), data.get("alphas", []))

    def to_dict(self) -> dict:
        return {"hhat": self.hhat, "singular_points": [list(p) for p in self.singular_points],
                "alphas": list(self.alphas)}

    @property
    def is_constant(self) -> bool:
        return not self.singular_points and self._expr.free_symbols == set()

    def hhat_eval(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.broadcast_to(np.asarray(self._f(X[:, 0], X[:, 1]), dtype=float), (len(X),)).copy()

    def dlog_hhat(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        X = np.atleast_2d(X)
        n = len(X)
        g = np.column_stack([np.broadcast_to(np.asarray(self._gx(X[:, 0], X[:, 1]), float), (n,)),
                             np.broadcast_to(np.asarray(self._gy(X[:, 0], X[:, 1]), float), (n,))])
        lap = np.broadcast_to(np.asarray(self._lap(X[:, 0], X[:, 1]), float), (n,)).copy()
        return g, lap

    def log_h(self, oracle: GreenOracle | None, X: np.ndarray) -> np.ndarray:
        """``log h`` at arbitrary points (singular points excluded)."""
        X = np.atleast_2d(X)
        hh = self.hhat_eval(X)
        if np.any(hh <= 0):
            raise WeightError("hhat must be positive on the domain")
        out = np.log(hh)
        for p, a in zip(self.singular_points, self.alphas):
            if oracle is None:
                raise WeightError("singular weights need a Green oracle")
            out -= 4 * np.pi * a * oracle.green_many(p, X)
        return out

    def nodal(self, oracle: GreenOracle | None, mesh=None) -> np.ndarray:
        """Nodal values of ``h``.

        Nodes closer than a quarter mesh size to a singular point take the
        value at that distance, the simplest regularization that keeps the
        lumped quadrature finite.
        """
        mesh = mesh if mesh is not None else oracle.mesh
        X = mesh.nodes
        logh = np.log(self.hhat_eval(X))
        for p, a in zip(self.singular_points, self.alphas):
            H, _ = oracle.correction(p)
            r = np.hypot(*(X - np.asarray(p)).T)
            r = np.maximum(r, 0.25 * mesh.h_max)
            logh -= 4 * np.pi * a * (fundamental(r) + H)
        return np.exp(logh)


def weight_eval(w: WeightSpec, oracle: GreenOracle | None, x) -> tuple[float, np.ndarray, float]:
    """Return ``h(x)``, ``grad log h(x)`` and ``Laplace log h(x)``.

    ``G(., p)`` is harmonic away from ``p``, so only ``hhat`` contributes to the
    Laplacian.  The gradient of the regular part of ``G`` uses central
    differences.
    """
    x = np.asarray(x, dtype=float)
    for p in w.singular_points:
        if np.hypot(*(x - np.asarray(p))) < 1e-12:
            raise WeightError("weight evaluated at a singular point")
    logh = float(w.log_h(oracle, x[None])[0])
    g, lap = w.dlog_hhat(x[None])
    grad = g[0].copy()
    for p, a in zip(w.singular_points, w.alphas):
        d = x - np.asarray(p)
        r2 = float(d @ d)
        gradG = -d / (2 * np.pi * r2)
        s = oracle.fd_step
        for i in range(2):
            e = np.zeros(2)
            e[i] = s
            gradG[i] += (oracle.regular_part_many(p, (x + e)[None])[0]
                         - oracle.regular_part_many(p, (x - e)[None])[0]) / (2 * s)
        grad -= 4 * np.pi * a * gradG
    return float(np.exp(logh)), grad, float(lap[0])


__all__ = ["WeightSpec", "WeightError", "weight_eval", "parse_hhat", "GreenError"]
