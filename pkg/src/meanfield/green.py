"""Dirichlet Green function, regular part and Robin function.

The Green function is split as ``G(x, y) = -log|x-y| / 2pi + H_y(x)``.  The
harmonic correction ``H_y`` is computed by P1 finite elements with boundary
data ``log|s-y| / 2pi``; off the boundary layer it is re-evaluated through
Green's representation formula

    H_y(x) = sum_B F_y[B] Phi(x - s_B) - int_dOmega g_y(s) dn_s Phi(x - s) ds,

where ``F_y`` is the consistent discrete boundary flux.  The result is a
genuinely harmonic, smooth function of ``x`` with O(h^2) error, so that
finite differences of the Robin function are well behaved.
"""

from __future__ import annotations

import threading
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .geometry import Mesh

TWO_PI = 2.0 * np.pi


class GreenError(ValueError):
    """Invalid evaluation point for the Green/Robin machinery."""


def fundamental(r):
    """Fundamental solution of ``-Laplace`` in the plane, ``-log(r) / 2pi``."""
    return -np.log(r) / TWO_PI


@dataclass
class RobinReport:
    """Maximum of the Robin function found by Newton ascent."""

    argmax: tuple[float, float]
    gamma_max: float
    grad_norm: float
    hessian: list[list[float]]
    hessian_det: float
    all_maxima: list[dict] = field(default_factory=list)
    divergent_seeds: list[tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


class GreenOracle:
    """Green function oracle bound to one mesh.

    Parameters
    ----------
    mesh : Mesh
        Triangulation of the domain.
    near_factor : float
        Points closer than ``near_factor`` boundary edge lengths to the
        boundary use P1 interpolation instead of the representation formula.
    n_gauss : int
        Gauss points per boundary segment for the double-layer term.
    """

    def __init__(self, mesh: Mesh, near_factor: float = 4.0, n_gauss: int = 6):
        self.mesh = mesh
        self._lock = threading.Lock()
        self._cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
        K = mesh.stiffness.tocsr()
        I, B = mesh.interior_nodes, mesh.boundary_nodes
        self._I, self._B = I, B
        self._K = K
        self._KIB = K[I][:, B]
        self._KB = K[B]
        self._lu = spla.splu(K[I][:, I].tocsc())

        be = mesh.boundary_edges
        A, C = mesh.nodes[be[:, 0]], mesh.nodes[be[:, 1]]
        d = C - A
        L = np.hypot(d[:, 0], d[:, 1])
        normals = np.column_stack([d[:, 1], -d[:, 0]]) / L[:, None]
        xg, wg = np.polynomial.legendre.leggauss(n_gauss)
        t = 0.5 * (xg + 1)
        self._gpts = (A[:, None, :] + t[None, :, None] * d[:, None, :]).reshape(-1, 2)
        self._gw = (0.5 * L[:, None] * wg[None, :]).ravel()
        self._gn = np.repeat(normals, n_gauss, axis=0)
        self._seg_a, self._seg_b = A, C
        self.h_boundary = float(L.max())
        self.near_dist = near_factor * self.h_boundary
        self.h = mesh.h_max
        dom = mesh.domain
        self.diameter = dom.diameter if dom is not None else float(np.ptp(mesh.nodes, axis=0).max())
        self.fd_step = max(2 * self.h, 1e-3 * self.diameter)

    # ------------------------------------------------------------------
    def _key(self, y) -> tuple[int, int]:
        return (int(round(y[0] * 1e12)), int(round(y[1] * 1e12)))

    def correction(self, y) -> tuple[np.ndarray, np.ndarray]:
        """Nodal harmonic correction ``H_y`` and boundary flux for source ``y``."""
        y = np.asarray(y, dtype=float)
        key = self._key(y)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        sB = self.mesh.nodes[self._B]
        g = np.log(np.hypot(*(sB - y).T)) / TWO_PI
        H = np.empty(self.mesh.n_nodes)
        H[self._B] = g
        H[self._I] = -self._lu.solve(self._KIB @ g)
        flux = self._KB @ H
        with self._lock:
            self._cache[key] = (H, flux)
        return H, flux

    def _check_inside(self, pts, what: str):
        inside = self.mesh.contains(pts)
        if not np.all(inside):
            raise GreenError(f"{what} lies outside the domain")

    def regular_part_many(self, y, X) -> np.ndarray:
        """``R(x, y)`` for an array of points ``X`` and a single source ``y``."""
        y = np.asarray(y, dtype=float)
        X = np.atleast_2d(np.asarray(X, dtype=float))
        H, flux = self.correction(y)
        out = np.empty(len(X))
        dist = self.mesh.boundary_distance(X)
        far = dist >= self.near_dist
        if np.any(~far):
            vals = self.mesh.interpolate(H, X[~far])
            if np.any(np.isnan(vals)):
                raise GreenError("evaluation point outside the mesh")
            out[~far] = vals
        if np.any(far):
            out[far] = self._represent(y, flux, X[far])
        return out

    def _represent(self, y, flux, X, chunk: int = 2048) -> np.ndarray:
        sB = self.mesh.nodes[self._B]
        gw = np.log(np.hypot(*(self._gpts - y).T)) / TWO_PI * self._gw
        gn_dot_s = (self._gpts * self._gn).sum(1)
        s2B = (sB**2).sum(1)
        s2G = (self._gpts**2).sum(1)
        out = np.empty(len(X))
        for s in range(0, len(X), chunk):
            x = X[s:s + chunk]
            x2 = (x**2).sum(1)[:, None]
            r2 = np.maximum(x2 + s2B[None, :] - 2 * x @ sB.T, 1e-300)
            single = -(np.log(r2) @ flux) / (2 * TWO_PI)
            r2 = np.maximum(x2 + s2G[None, :] - 2 * x @ self._gpts.T, 1e-300)
            num = x @ self._gn.T - gn_dot_s[None, :]
            out[s:s + chunk] = single - ((num / r2) @ gw) / TWO_PI
        return out

    # ------------------------------------------------------------------
    def regular_part(self, y, x) -> float:
        """Regular part ``R(x, y)``; ``x == y`` is allowed."""
        self._check_inside(np.vstack([y, x]), "point")
        return float(self.regular_part_many(y, np.asarray(x, float)[None])[0])

    def green_eval(self, y, x) -> float:
        """Green function ``G(x, y)`` for distinct interior points."""
        y = np.asarray(y, dtype=float)
        x = np.asarray(x, dtype=float)
        r = float(np.hypot(*(x - y)))
        if r < 1e-14:
            raise GreenError("x coincides with the source; use robin_eval")
        self._check_inside(y[None], "source y")
        self._check_inside(x[None], "target x")
        return float(fundamental(r)) + self.regular_part(y, x)

    def green_field(self, y) -> np.ndarray:
        """Nodal values of ``G(., y)`` (``inf`` at a node coinciding with ``y``)."""
        H, _ = self.correction(y)
        r = np.hypot(*(self.mesh.nodes - np.asarray(y)).T)
        with np.errstate(divide="ignore"):
            return fundamental(r) + H

    def green_many(self, y, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        r = np.hypot(*(X - np.asarray(y)).T)
        if np.any(r < 1e-14):
            raise GreenError("x coincides with the source")
        return fundamental(r) + self.regular_part_many(y, X)

    # ------------------------------------------------------------------
    def _robin_raw(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(self.regular_part_many(x, x[None])[0])

    def _check_robin_point(self, x):
        x = np.asarray(x, dtype=float)
        if not self.mesh.contains(x[None])[0]:
            raise GreenError("point lies outside the domain")
        if self.mesh.boundary_distance(x[None])[0] < 2 * self.h:
            raise GreenError("point is within 2h of the boundary where gamma -> -inf")

    def robin_eval(self, x) -> float:
        """Robin function ``gamma(x) = R(x, x)``."""
        self._check_robin_point(x)
        return self._robin_raw(x)

    def robin_grad(self, x, step: float | None = None) -> np.ndarray:
        self._check_robin_point(x)
        d = step or self.fd_step
        x = np.asarray(x, dtype=float)
        g = np.empty(2)
        for i in range(2):
            e = np.zeros(2)
            e[i] = d
            g[i] = (self._robin_raw(x + e) - self._robin_raw(x - e)) / (2 * d)
        return g

    def robin_hess(self, x, step: float | None = None) -> np.ndarray:
        self._check_robin_point(x)
        d = step or self.fd_step
        x = np.asarray(x, dtype=float)
        f0 = self._robin_raw(x)
        H = np.empty((2, 2))
        e = np.eye(2) * d
        for i in range(2):
            H[i, i] = (self._robin_raw(x + e[i]) - 2 * f0 + self._robin_raw(x - e[i])) / d**2
        H[0, 1] = H[1, 0] = (
            self._robin_raw(x + e[0] + e[1]) - self._robin_raw(x + e[0] - e[1])
            - self._robin_raw(x - e[0] + e[1]) + self._robin_raw(x - e[0] - e[1])
        ) / (4 * d**2)
        return H

    def robin_max(self, seeds, tol_grad: float = 1e-6, max_iter: int = 60) -> RobinReport:
        """Newton ascent on the Robin function from every seed.

        Every distinct local maximum is kept in ``all_maxima``; the canonical
        one has the largest value, ties broken by distance to the domain
        centroid and then lexicographically.
        """
        seeds = np.atleast_2d(np.asarray(seeds, dtype=float))
        if len(seeds) == 0:
            raise GreenError("robin_max needs at least one seed")
        found: list[dict] = []
        bad: list[tuple[float, float]] = []
        for s in seeds:
            res = self._ascend(s, tol_grad, max_iter)
            if res is None:
                bad.append((float(s[0]), float(s[1])))
                continue
            x, gam, gn, H = res
            if any(np.hypot(*(x - np.asarray(f["x"]))) < 1e-6 * self.diameter for f in found):
                continue
            found.append({"x": [float(x[0]), float(x[1])], "gamma": gam, "grad_norm": gn,
                          "hessian": H.tolist(), "hessian_det": float(np.linalg.det(H))})
        if not found:
            raise GreenError(f"no seed converged to a maximum; divergent seeds: {bad}")
        c = self.mesh.domain.centroid if self.mesh.domain is not None else self.mesh.nodes.mean(0)
        tol = 1e-9 * max(1.0, max(abs(f["gamma"]) for f in found))
        gmax = max(f["gamma"] for f in found)
        top = [f for f in found if f["gamma"] >= gmax - tol]
        top.sort(key=lambda f: (round(float(np.hypot(*(np.asarray(f["x"]) - c))), 12), f["x"][0], f["x"][1]))
        best = top[0]
        return RobinReport(
            argmax=(best["x"][0], best["x"][1]), gamma_max=best["gamma"], grad_norm=best["grad_norm"],
            hessian=best["hessian"], hessian_det=best["hessian_det"], all_maxima=found, divergent_seeds=bad,
        )

    def _ascend(self, x0, tol_grad, max_iter):
        x = np.asarray(x0, dtype=float).copy()
        # the diagonal stencil reaches sqrt(2) fd_step from x
        margin = 2 * self.h + 2 * self.fd_step
        if not (self.mesh.contains(x[None])[0] and self.mesh.boundary_distance(x[None])[0] >= margin):
            return None
        try:
            return self._ascend_loop(x, tol_grad, max_iter, margin)
        except GreenError:
            return None

    def _ascend_loop(self, x, tol_grad, max_iter, margin):
        for _ in range(max_iter):
            g = self.robin_grad(x)
            if np.linalg.norm(g) <= tol_grad:
                H = self.robin_hess(x)
                H = 0.5 * (H + H.T)
                if np.max(np.linalg.eigvalsh(H)) > 1e-8 * max(1.0, np.abs(H).max()):
                    return None  # saddle or minimum
                return x, self._robin_raw(x), float(np.linalg.norm(g)), H
            H = self.robin_hess(x)
            H = 0.5 * (H + H.T)
            w, V = np.linalg.eigh(H)
            # ascent direction: Newton on the negative-definite part, gradient elsewhere
            w_safe = np.where(w < -1e-10, w, -max(1.0, np.abs(w).max()))
            step = -V @ ((V.T @ g) / w_safe)
            f0 = self._robin_raw(x)
            t = 1.0
            for _ in range(30):
                xn = x + t * step
                ok = self.mesh.contains(xn[None])[0] and self.mesh.boundary_distance(xn[None])[0] >= margin
                if ok and (self._robin_raw(xn) >= f0 - 1e-14 or np.linalg.norm(self.robin_grad(xn)) < np.linalg.norm(g)):
                    break
                t *= 0.5
            else:
                return None
            x = xn
        return None


def robin_map(oracle: GreenOracle, points) -> np.ndarray:
    """Rows ``x, y, gamma, grad_norm`` for every admissible point."""
    rows = []
    for p in np.atleast_2d(points):
        try:
            gam = oracle.robin_eval(p)
            gn = float(np.linalg.norm(oracle.robin_grad(p)))
        except GreenError:
            continue
        rows.append((p[0], p[1], gam, gn))
    return np.array(rows).reshape(-1, 4)


def default_seeds(mesh: Mesh, n: int = 0, rng: np.random.Generator | None = None) -> np.ndarray:
    """The domain centroid plus ``n`` jittered interior points."""
    dom = mesh.domain
    c = dom.centroid if dom is not None else mesh.nodes.mean(0)
    pts = [c]
    if n > 0:
        rng = rng or np.random.default_rng(0)
        lo, hi = mesh.nodes.min(0), mesh.nodes.max(0)
        while len(pts) < n + 1:
            p = lo + (hi - lo) * rng.random(2)
            if mesh.contains(p[None])[0] and mesh.boundary_distance(p[None])[0] > 0.1 * (hi - lo).min():
                pts.append(p)
    return np.array(pts)
