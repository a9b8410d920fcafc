"""Point-vortex Hamiltonian, blow-up predictors and the first/second kind test.

The singular integrals ``D(q)`` and ``D_Omega(q)`` are evaluated by splitting
each one with a smooth radial cutoff around the vortex points.  The far part
is a composite mesh quadrature.  The near part is integrated in polar
coordinates on geometric shells down to radius ``eps_k = rho 2^-k``.  The
shell sums are then Richardson-extrapolated in ``eps^2``.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.optimize import linear_sum_assignment

from .geometry import Domain, Mesh, Quadrature, build_mesh
from .green import GreenError, GreenOracle, default_seeds, fundamental
from .weight import WeightSpec, weight_eval

EIGHT_PI = 8.0 * np.pi


class VortexError(ValueError):
    pass


@dataclass
class LimitValue:
    """Extrapolated limit with an error bar from the last two iterates."""

    value: float
    error: float
    iterates: list[float] = field(default_factory=list)
    converged: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CriticalPointReport:
    q: list[list[float]]
    f_value: float
    grad_norm: float
    hessian: list[list[float]]
    hessian_det: float
    degenerate: bool
    ell: float
    big_d: LimitValue | None
    separation: float

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


@dataclass
class ClassifierVerdict:
    kind: str  # "first", "second" or "inconclusive"
    witness: tuple[float, float]
    d_omega: float
    d_omega_error: float
    gamma_hessian_det: float
    maxima: list[dict] = field(default_factory=list)
    advice: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Hamiltonian
# ---------------------------------------------------------------------------

def _as_config(q) -> np.ndarray:
    q = np.asarray(q, dtype=float).reshape(-1, 2)
    if len(q) == 0:
        raise VortexError("empty configuration")
    return q


def _check_distinct(q: np.ndarray):
    for i, j in itertools.combinations(range(len(q)), 2):
        if np.hypot(*(q[i] - q[j])) < 1e-12:
            raise VortexError("coincident vortex points")


def f_m_eval(oracle: GreenOracle, w: WeightSpec, q) -> float:
    """m-vortex Hamiltonian (ordered-pair interaction sum)."""
    q = _as_config(q)
    _check_distinct(q)
    total = 0.0
    logh = w.log_h(oracle, q)
    for j in range(len(q)):
        total += logh[j] + 4 * np.pi * oracle.robin_eval(q[j])
        for l in range(len(q)):
            if l != j:
                total += 4 * np.pi * oracle.green_eval(q[j], q[l])
    return float(total)


def f_m_grad(oracle, w, q, step=None) -> np.ndarray:
    q = _as_config(q)
    d = step or oracle.fd_step
    x = q.ravel()
    g = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = d
        g[i] = (f_m_eval(oracle, w, x + e) - f_m_eval(oracle, w, x - e)) / (2 * d)
    return g


def f_m_hess(oracle, w, q, step=None) -> np.ndarray:
    q = _as_config(q)
    d = step or oracle.fd_step
    x = q.ravel()
    n = len(x)
    f0 = f_m_eval(oracle, w, x)
    E = np.eye(n) * d
    H = np.empty((n, n))
    for i in range(n):
        H[i, i] = (f_m_eval(oracle, w, x + E[i]) - 2 * f0 + f_m_eval(oracle, w, x - E[i])) / d**2
        for k in range(i):
            H[i, k] = H[k, i] = (
                f_m_eval(oracle, w, x + E[i] + E[k]) - f_m_eval(oracle, w, x + E[i] - E[k])
                - f_m_eval(oracle, w, x - E[i] + E[k]) + f_m_eval(oracle, w, x - E[i] - E[k])
            ) / (4 * d**2)
    return 0.5 * (H + H.T)


def g_star_eval(oracle: GreenOracle, q, j: int, x) -> float:
    """``8 pi R(x, q_j) + 8 pi sum_{l != j} G(x, q_l)``."""
    return float(g_star_many(oracle, q, j, np.asarray(x, float)[None])[0])


def g_star_many(oracle: GreenOracle, q, j: int, X) -> np.ndarray:
    q = _as_config(q)
    X = np.atleast_2d(np.asarray(X, float))
    for l in range(len(q)):
        if l != j and np.any(np.hypot(*(X - q[l]).T) < 1e-12):
            raise VortexError("x coincides with another vortex point")
    out = EIGHT_PI * oracle.regular_part_many(q[j], X)
    for l in range(len(q)):
        if l != j:
            out += EIGHT_PI * oracle.green_many(q[l], X)
    return out


def f_qj_eval(oracle: GreenOracle, w: WeightSpec, q, j: int, x) -> float:
    """``G_j*(x) - G_j*(q_j) + log h(x) - log h(q_j)``; vanishes at ``q_j``."""
    return float(f_qj_many(oracle, w, q, j, np.asarray(x, float)[None])[0])


def f_qj_many(oracle, w, q, j, X) -> np.ndarray:
    q = _as_config(q)
    X = np.atleast_2d(np.asarray(X, float))
    base = g_star_eval(oracle, q, j, q[j])
    lh0 = w.log_h(oracle, q[j][None])[0]
    return g_star_many(oracle, q, j, X) - base + w.log_h(oracle, X) - lh0


def ell_eval(oracle: GreenOracle, w: WeightSpec, q) -> float:
    """``sum_j Laplace(log h)(q_j) h(q_j) exp(G_j*(q_j))``."""
    q = _as_config(q)
    total = 0.0
    for j in range(len(q)):
        h, _, lap = weight_eval(w, oracle, q[j])
        if lap == 0.0:
            continue
        total += lap * h * np.exp(g_star_eval(oracle, q, j, q[j]))
    return float(total)


# ---------------------------------------------------------------------------
# Singular integrals
# ---------------------------------------------------------------------------

def _cutoff(r, rho):
    """Smooth radial cutoff: 1 for r <= rho/2, 0 for r >= rho (C^3 transition)."""
    t = np.clip((r - 0.5 * rho) / (0.5 * rho), 0.0, 1.0)
    s = t**4 * (35 - 84 * t + 70 * t**2 - 20 * t**3)
    return 1.0 - s


def _composite_rule(level: int) -> tuple[np.ndarray, np.ndarray]:
    """Degree-5 rule on the reference triangle split ``4**level`` times."""
    base = Quadrature.of_order(5)
    tris = [np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])]
    for _ in range(level):
        new = []
        for T in tris:
            a, b, c = T
            ab, bc, ca = (a + b) / 2, (b + c) / 2, (c + a) / 2
            new += [np.array([a, ab, ca]), np.array([ab, b, bc]), np.array([ca, bc, c]), np.array([ab, bc, ca])]
        tris = new
    bary = np.concatenate([base.bary @ T for T in tris])
    wts = np.tile(base.weights, len(tris)) / len(tris)
    return bary, wts


def _mesh_points_near(mesh: Mesh, centers: np.ndarray, radius: float, fine_size: float):
    """Quadrature points, weights, triangle ids and barycentrics over the mesh.

    Triangles within ``radius`` of a centre are subdivided until their size
    is about ``fine_size``.
    """
    P = mesh.nodes[mesh.triangles]
    cen = P.mean(1)
    dist = np.min(np.hypot(cen[:, None, 0] - centers[None, :, 0], cen[:, None, 1] - centers[None, :, 1]), axis=1)
    tri_h = np.sqrt(2 * mesh.areas)
    near = dist < radius + 2 * tri_h
    level = 0
    if near.any():
        level = int(np.clip(np.ceil(np.log2(tri_h[near].max() / fine_size)), 0, 5))
    out = []
    for mask, lev in ((~near, 0), (near, level)):
        if not mask.any():
            continue
        b, wq = _composite_rule(lev)
        ids = np.flatnonzero(mask)
        X = np.einsum("qk,tkd->tqd", b, P[ids]).reshape(-1, 2)
        W = (2 * mesh.areas[ids][:, None] * wq[None, :]).ravel()
        out.append((X, W, np.repeat(ids, len(b)), np.tile(b, (len(ids), 1))))
    return tuple(np.concatenate([o[k] for o in out]) for k in range(4))


def _regular_mixed(oracle: GreenOracle, y, X, tri, bary, accurate: np.ndarray) -> np.ndarray:
    """``R(., y)``: representation formula where ``accurate`` and P1 elsewhere."""
    H, _ = oracle.correction(y)
    out = (H[oracle.mesh.triangles[tri]] * bary).sum(1)
    sel = accurate & (oracle.mesh.boundary_distance(X) >= oracle.near_dist) if accurate.any() else accurate
    if sel.any():
        out[sel] = oracle.regular_part_many(y, X[sel])
    return out


def _exterior_term(mesh: Mesh, q: np.ndarray) -> float:
    """``int_{R^2 \\ Omega} |x-q|^-4`` as a closed-form boundary sum."""
    be = mesh.boundary_edges
    A, B = mesh.nodes[be[:, 0]], mesh.nodes[be[:, 1]]
    d = B - A
    L = np.hypot(d[:, 0], d[:, 1])
    t_hat = d / L[:, None]
    n = np.column_stack([t_hat[:, 1], -t_hat[:, 0]])
    dist = ((A - q) * n).sum(1)
    t0 = ((A - q) * t_hat).sum(1)
    t1 = t0 + L

    def prim(t):
        return t / (2 * dist**2 * (dist**2 + t**2)) + np.arctan(t / dist) / (2 * dist**3)

    return float(0.5 * np.sum(dist * (prim(t1) - prim(t0))))


def _polar_shells(f_near, q, rho, n_levels, n_theta=64, n_r=12):
    """Shell integrals of ``chi(r) (e^f - 1) / r^4`` on ``[rho 2^-k-1, rho 2^-k]``."""
    xg, wg = leggauss(n_r)
    th = 2 * np.pi * np.arange(n_theta) / n_theta
    dirs = np.column_stack([np.cos(th), np.sin(th)])
    out = []
    for k in range(n_levels):
        r1, r0 = rho * 2.0**-k, rho * 2.0 ** (-k - 1)
        rr = r0 + (r1 - r0) * (xg + 1) / 2
        ww = (r1 - r0) / 2 * wg
        X = (q[None, None, :] + rr[:, None, None] * dirs[None, :, :]).reshape(-1, 2)
        F = f_near(X).reshape(len(rr), n_theta)
        ang = np.expm1(F).mean(1) * 2 * np.pi
        out.append(float(np.sum(ww * _cutoff(rr, rho) * ang / rr**3)))
    return np.array(out)


def _richardson(partial: np.ndarray) -> LimitValue:
    """Extrapolate cumulative shell sums assuming an ``eps^2`` remainder."""
    I = np.cumsum(partial)
    R = (4 * I[1:] - I[:-1]) / 3
    err = abs(R[-1] - R[-2])
    # the error bar must shrink along the sequence for the limit to be trusted
    tail = np.abs(np.diff(R[-4:]))
    scale = max(1.0, abs(R[-1]))
    converged = err < 1e-3 * scale and (err < 1e-6 * scale or bool(np.all(tail[1:] <= tail[:-1] * 1.5)))
    return LimitValue(float(R[-1]), float(err), [float(v) for v in R], converged)


def _near_radius(oracle: GreenOracle, q: np.ndarray) -> np.ndarray:
    """Cutoff radius per vortex: inside the representation zone, disjoint supports."""
    mesh = oracle.mesh
    db = mesh.boundary_distance(q)
    rho = np.minimum(0.5 * db, db - 1.05 * oracle.near_dist)
    if len(q) > 1:
        D = np.hypot(q[:, None, 0] - q[None, :, 0], q[:, None, 1] - q[None, :, 1])
        np.fill_diagonal(D, np.inf)
        rho = np.minimum(rho, 0.45 * D.min(1))
    if np.any(rho <= 2 * oracle.h) and np.any(rho <= 0):
        raise VortexError("vortex point too close to the boundary for the singular integral")
    return rho


def d_omega_eval(oracle: GreenOracle, q, *, tol_grad: float = 1e-6, n_levels: int = 10,
                 check_critical: bool = True) -> LimitValue:
    """``D_Omega(q)`` at a critical point ``q`` of the Robin function.

    ``lim_eps int_{Omega \\ B_eps(q)} (exp(8 pi (R(x,q) - gamma(q))) - 1) / |x-q|^4
    - int_{R^2 \\ Omega} |x-q|^-4``.
    """
    q = np.asarray(q, dtype=float)
    try:
        oracle._check_robin_point(q)
    except GreenError as exc:
        raise VortexError(str(exc)) from exc
    if check_critical:
        gn = float(np.linalg.norm(oracle.robin_grad(q)))
        if gn > tol_grad:
            raise VortexError(f"q is not a critical point of the Robin function (|grad|={gn:.3g})")
    rho = float(_near_radius(oracle, q[None])[0])
    gam = oracle._robin_raw(q)

    def F(X):
        return EIGHT_PI * (oracle.regular_part_many(q, X) - gam)

    near = _richardson(_polar_shells(F, q, rho, n_levels))
    X, W, tri, bary = _mesh_points_near(oracle.mesh, q[None], 4 * rho, rho / 8)
    r = np.hypot(*(X - q).T)
    mask = r > 0.5 * rho
    X, W, tri, bary, r = X[mask], W[mask], tri[mask], bary[mask], r[mask]
    R = _regular_mixed(oracle, q, X, tri, bary, r < 2 * rho)
    vals = (1 - _cutoff(r, rho)) * np.expm1(EIGHT_PI * (R - gam)) / r**4
    far = float(np.sum(vals * W))
    ext = _exterior_term(oracle.mesh, q)
    total = near.value + far - ext
    return LimitValue(total, near.error, [v + far - ext for v in near.iterates], near.converged)


def big_d_eval(oracle: GreenOracle, w: WeightSpec, q, *, tol_grad: float = 1e-6,
               n_levels: int = 10, check_critical: bool = True) -> LimitValue:
    """``D(q)`` for an m-vortex critical point.

    Each term ``h(q_j) e^{G_j*(q_j)} e^{Phi_j}`` equals ``h e^{8 pi sum_l G(., q_l)}``
    so the far integrand needs no partition; only the near parts around each
    ``q_j`` carry the ``pi / r_j^2`` subtraction.
    """
    q = _as_config(q)
    _check_distinct(q)
    if check_critical:
        gn = float(np.linalg.norm(f_m_grad(oracle, w, q)))
        if gn > tol_grad:
            raise VortexError(f"q is not a critical point of f_m (|grad|={gn:.3g})")
    rho = _near_radius(oracle, q)
    m = len(q)
    w_j = np.array([np.exp(w.log_h(oracle, q[j][None])[0] + g_star_eval(oracle, q, j, q[j])) for j in range(m)])
    near_total = 0.0
    err = 0.0
    iters = None
    conv = True
    for j in range(m):
        lim = _richardson(_polar_shells(lambda X, j=j: f_qj_many(oracle, w, q, j, X), q[j], rho[j], n_levels))
        # - 2 pi int_0^rho (1 - chi) r^-3 dr - pi / rho^2
        xg, wg = leggauss(24)
        rr = 0.5 * rho[j] * (1 + (xg + 1) / 2)
        tail = np.sum(0.25 * rho[j] * wg * (1 - _cutoff(rr, rho[j])) / rr**3) * 2 * np.pi
        c = w_j[j] * (-tail - np.pi / rho[j] ** 2)
        near_total += w_j[j] * lim.value + c
        err += w_j[j] * lim.error
        arr = w_j[j] * np.array(lim.iterates) + c
        iters = arr if iters is None else iters + arr
        conv = conv and lim.converged
    X, W, tri, bary = _mesh_points_near(oracle.mesh, q, 4 * rho.max(), rho.min() / 8)
    chi = np.zeros(len(X))
    dmin = np.full(len(X), np.inf)
    for j in range(m):
        rj = np.hypot(*(X - q[j]).T)
        chi += _cutoff(rj, rho[j])
        dmin = np.minimum(dmin, rj / rho[j])
    mask = chi < 1 - 1e-15
    X, W, tri, bary, dmin, chi = X[mask], W[mask], tri[mask], bary[mask], dmin[mask], chi[mask]
    expo = w.log_h(oracle, X)
    for l in range(m):
        R = _regular_mixed(oracle, q[l], X, tri, bary, dmin < 2)
        expo = expo + EIGHT_PI * (R + fundamental(np.hypot(*(X - q[l]).T)))
    far = float(np.sum((1 - chi) * np.exp(expo) * W))
    return LimitValue(near_total + far, err, [float(v + far) for v in iters], conv)


# ---------------------------------------------------------------------------
# Critical points
# ---------------------------------------------------------------------------

def _separation(oracle: GreenOracle, w: WeightSpec, q: np.ndarray) -> float:
    s = float(oracle.mesh.boundary_distance(q).min())
    for i, j in itertools.combinations(range(len(q)), 2):
        s = min(s, float(np.hypot(*(q[i] - q[j]))))
    for p in w.singular_points:
        s = min(s, float(np.hypot(*(q - np.asarray(p)).T).min()))
    return s


def config_distance(a, b) -> float:
    """Distance between configurations modulo permutation of the points."""
    a, b = _as_config(a), _as_config(b)
    C = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
    r, c = linear_sum_assignment(C**2)
    return float(np.sqrt(np.sum(C[r, c] ** 2)))


def seed_grid(domain: Domain, m: int, n: int = 5, jitter: float = 0.0, rng=None) -> np.ndarray:
    """Seed configurations from an ``n x n`` interior grid (all m-subsets for m > 1)."""
    rng = rng or np.random.default_rng(0)
    c = domain.centroid
    if domain.kind == "disk":
        R = domain.radius
        base = np.array([(c[0] + R * 0.6 * (2 * i / (n - 1) - 1), c[1] + R * 0.6 * (2 * k / (n - 1) - 1))
                         for i in range(n) for k in range(n)]) if n > 1 else c[None]
    else:
        V = domain.corners()
        lo, hi = V.min(0), V.max(0)
        span = hi - lo
        ts = (np.arange(n) + 0.5) / n if n > 1 else np.array([0.5])
        base = np.array([lo + span * (a, b) for a in ts for b in ts])
    base = base[domain.contains(base)]
    if jitter:
        base = base + jitter * domain.diameter * rng.standard_normal(base.shape)
        base = base[domain.contains(base)]
    if m == 1:
        return base[:, None, :]
    combos = list(itertools.combinations(range(len(base)), m))
    return np.array([base[list(cb)] for cb in combos])


def find_critical_points(oracle: GreenOracle, w: WeightSpec, m: int, seeds, *, tol_grad: float = 1e-6,
                         max_iter: int = 40, with_big_d: bool = True) -> tuple[list[CriticalPointReport], list]:
    """Newton iteration on ``grad f_m = 0`` from every seed configuration.

    Returns the deduplicated reports and the list of seeds that failed.
    """
    if m < 1:
        raise VortexError("m must be at least 1")
    seeds = np.asarray(seeds, dtype=float).reshape(-1, m, 2)
    thr = 1e-6 * oracle.diameter
    reports: list[CriticalPointReport] = []
    failed = []
    for s in seeds:
        res = _newton_critical(oracle, w, s, tol_grad, max_iter)
        if res is None:
            failed.append(s.tolist())
            continue
        q, g, H = res
        if any(config_distance(q, r.q) < max(thr, 1e-4 * oracle.diameter) for r in reports):
            continue
        ev = np.linalg.eigvalsh(H)
        scale = max(1.0, np.abs(ev).max())
        degenerate = bool(np.abs(ev).min() < 1e-3 * scale)
        try:
            ell = ell_eval(oracle, w, q)
        except Exception:  # noqa: BLE001 - reported as NaN
            ell = float("nan")
        bd = None
        if with_big_d:
            try:
                bd = big_d_eval(oracle, w, q, tol_grad=tol_grad, check_critical=False)
            except VortexError:
                bd = None
        reports.append(CriticalPointReport(
            q=q.tolist(), f_value=f_m_eval(oracle, w, q), grad_norm=float(np.linalg.norm(g)),
            hessian=H.tolist(), hessian_det=float(np.linalg.det(H)), degenerate=degenerate,
            ell=ell, big_d=bd, separation=_separation(oracle, w, q)))
    return reports, failed


def _newton_critical(oracle, w, q0, tol_grad, max_iter):
    q = np.asarray(q0, dtype=float).copy()
    margin = 2 * oracle.h + 2 * oracle.fd_step

    def admissible(x):
        x = x.reshape(-1, 2)
        if not np.all(oracle.mesh.contains(x)):
            return False
        if oracle.mesh.boundary_distance(x).min() < margin:
            return False
        for i, j in itertools.combinations(range(len(x)), 2):
            if np.hypot(*(x[i] - x[j])) < 2 * oracle.fd_step:
                return False
        return True

    if not admissible(q):
        return None
    try:
        return _newton_loop(oracle, w, q, tol_grad, max_iter, admissible)
    except GreenError:
        return None


def _newton_loop(oracle, w, q, tol_grad, max_iter, admissible):
    for _ in range(max_iter):
        g = f_m_grad(oracle, w, q)
        H = f_m_hess(oracle, w, q)
        gn = np.linalg.norm(g)
        if gn <= tol_grad:
            return q.reshape(-1, 2), g, H
        step = -np.linalg.lstsq(H, g, rcond=1e-8)[0]
        t = 1.0
        for _ in range(30):
            qn = q.ravel() + t * step
            if admissible(qn) and np.linalg.norm(f_m_grad(oracle, w, qn)) < gn:
                break
            t *= 0.5
        else:
            return None
        q = qn.reshape(-1, 2)
    return None


# ---------------------------------------------------------------------------
# Classifier
# ---------------------------------------------------------------------------

def classify_domain(domain: Domain, mesh_h: float = 0.05, *, oracle: GreenOracle | None = None,
                    n_seeds: int = 4, tol_grad: float = 1e-6, seed: int = 0, h_center: float | None = None) -> ClassifierVerdict:
    """First/second kind verdict from the sign of ``D_Omega`` at Robin maxima."""
    if oracle is None:
        oracle = GreenOracle(build_mesh(domain, mesh_h, h_center=h_center))
    seeds = default_seeds(oracle.mesh, n_seeds, np.random.default_rng(seed))
    rep = oracle.robin_max(seeds, tol_grad=tol_grad)
    maxima = []
    for mx in rep.all_maxima:
        dv = d_omega_eval(oracle, mx["x"], tol_grad=tol_grad)
        maxima.append({**mx, "d_omega": dv.value, "d_omega_error": dv.error, "converged": dv.converged})
    second = [mx for mx in maxima if mx["d_omega"] > mx["d_omega_error"]]
    if second:
        kind, wit = "second", max(second, key=lambda m: m["d_omega"])
    elif all(mx["d_omega"] < -mx["d_omega_error"] for mx in maxima):
        kind = "first"
        ax = rep.argmax
        wit = next(mx for mx in maxima if mx["x"] == [ax[0], ax[1]])
    else:
        kind, wit = "inconclusive", maxima[0]
    advice = "" if kind != "inconclusive" else "error bar straddles zero: refine the mesh and retry"
    return ClassifierVerdict(kind, (wit["x"][0], wit["x"][1]), wit["d_omega"], wit["d_omega_error"],
                             wit["hessian_det"], maxima, advice)
