"""Entropy, energy and branch continuation.

The high-energy part of the entropy curve comes from the Gelfand branch
``-Laplace u = eps^2 e^u`` traced in ``(eps, u)`` by pseudo-arclength
continuation.  Each state carries ``lambda = eps^2 int e^u``.  The low part
comes from direct mean field solves on a grid of ``lambda`` values.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import Mesh
from .green import GreenOracle
from .pde import (ScalarField, SolverError, _result, _system, bubble_diagnose,
                  linearized_spectrum_gelfand, linearized_spectrum_meanfield, solve_gelfand,
                  solve_mean_field)
from .weight import WeightSpec

EIGHT_PI = 8.0 * np.pi


@dataclass
class DensityState:
    rho: np.ndarray
    psi: np.ndarray
    lam: float
    entropy: float
    energy: float
    mass: float
    log_partition: float

    def identity_residual(self) -> float:
        """Relative defect of ``S = log int e^{lam psi} - 2 lam E``."""
        rhs = self.log_partition - 2 * self.lam * self.energy
        return abs(self.entropy - rhs) / max(1.0, abs(self.entropy))


def functionals(u, lam: float, w: WeightSpec | None = None, weight: np.ndarray | None = None,
                mesh: Mesh | None = None) -> DensityState:
    """Entropy, energy and mass of the density generated by ``u``.

    ``psi = u / lam`` away from ``lam = 0``; for ``|lam| < 1e-6`` the stream
    function is obtained from ``-Laplace psi = rho`` directly.
    """
    if isinstance(u, ScalarField):
        mesh, vals = u.mesh, u.values
    else:
        vals = np.asarray(u, dtype=float)
    if mesh is None:
        raise ValueError("mesh required")
    S_ = _system(mesh)
    m = S_.m
    hw = weight if weight is not None else (np.ones(mesh.n_nodes) if w is None or w.is_constant
                                             else w.nodal(None, mesh))
    Z = np.sum(m * hw * np.exp(vals))
    rho = hw * np.exp(vals) / Z
    if abs(lam) >= 1e-6:
        psi = vals / lam
    else:
        psi = poisson(mesh, rho)
    mass = float(np.sum(m * rho))
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -float(np.sum(np.where(rho > 0, m * rho * np.log(rho), 0.0)))
    energy = 0.5 * float(np.sum(m * rho * psi))
    logZ = float(np.log(np.sum(m * np.exp(lam * psi))))
    return DensityState(rho, psi, float(lam), ent, energy, mass, logZ)


def poisson(mesh: Mesh, f: np.ndarray) -> np.ndarray:
    """``-Laplace psi = f`` with zero boundary values (lumped load)."""
    S = _system(mesh)
    out = np.zeros(mesh.n_nodes)
    out[S.I] = spla.spsolve(S.KII, (S.m * f)[S.I])
    return out


def energy_by_poisson(mesh: Mesh, rho: np.ndarray) -> float:
    psi = poisson(mesh, rho)
    return 0.5 * float(psi @ (mesh.stiffness @ psi))


# ---------------------------------------------------------------------------
# Branch continuation
# ---------------------------------------------------------------------------

@dataclass
class BranchPoint:
    eps: float
    u: ScalarField
    lambda_eps: float
    energy: float
    entropy: float
    mu_max: float
    rho_max: float
    min_eig: float
    min_abs_eig: float
    min_eig_mf: float
    local_masses: list[float]
    arc_index: int
    deps_ds: float
    ds: float

    def row(self) -> list[float]:
        return [self.eps, self.lambda_eps, self.energy, self.entropy, self.mu_max, self.min_eig, *self.local_masses]


@dataclass
class Branch:
    points: list[BranchPoint]
    folds: list[dict] = field(default_factory=list)
    stop_reason: str = ""

    def arrays(self) -> dict[str, np.ndarray]:
        keys = ["eps", "lambda_eps", "energy", "entropy", "mu_max", "rho_max", "min_eig", "min_eig_mf", "deps_ds"]
        return {k: np.array([getattr(p, k) for p in self.points]) for k in keys}


class _Continuation:
    def __init__(self, mesh: Mesh, tol: float):
        self.mesh = mesh
        self.S = _system(mesh)
        self.I = self.S.I
        self.mI = self.S.m[self.I]
        self.W = self.mI / mesh.area
        self.tol = tol

    def residual(self, uI, eps):
        u = self._full(uI)
        F = (self.S.K @ u)[self.I] - eps**2 * self.mI * np.exp(uI)
        scale = max(1.0, np.abs(eps**2 * self.mI * np.exp(uI)).max())
        return F, scale

    def _full(self, uI):
        u = np.zeros(self.mesh.n_nodes)
        u[self.I] = uI
        return u

    def jac(self, uI, eps):
        J = self.S.KII - sp.diags(eps**2 * self.mI * np.exp(uI))
        Fe = -2 * eps * self.mI * np.exp(uI)
        return J, Fe

    def bordered(self, J, Fe, tu, te):
        row = sp.csr_matrix((self.W * tu)[None, :])
        top = sp.hstack([J, sp.csc_matrix(Fe[:, None])])
        bot = sp.hstack([row, sp.csr_matrix([[te]])])
        return spla.splu(sp.vstack([top, bot]).tocsc())

    def tangent(self, uI, eps, tu_prev, te_prev):
        J, Fe = self.jac(uI, eps)
        lu = self.bordered(J, Fe, tu_prev, te_prev)
        rhs = np.zeros(len(uI) + 1)
        rhs[-1] = 1.0
        z = lu.solve(rhs)
        tu, te = z[:-1], z[-1]
        nrm = math.sqrt(float(np.sum(self.W * tu * tu)) + te * te)
        tu, te = tu / nrm, te / nrm
        if float(np.sum(self.W * tu * tu_prev)) + te * te_prev < 0:
            tu, te = -tu, -te
        return tu, te

    def correct(self, u_pred, e_pred, tu, te, max_iter=12):
        uI, eps = u_pred.copy(), e_pred
        for it in range(max_iter):
            F, scale = self.residual(uI, eps)
            N = float(np.sum(self.W * tu * (uI - u_pred))) + te * (eps - e_pred)
            if np.linalg.norm(F, np.inf) / scale <= self.tol and abs(N) <= 1e-12:
                return uI, eps, it, True
            J, Fe = self.jac(uI, eps)
            try:
                lu = self.bordered(J, Fe, tu, te)
            except RuntimeError:
                return uI, eps, it, False
            d = lu.solve(-np.r_[F, N])
            if not np.all(np.isfinite(d)):
                return uI, eps, it, False
            uI = uI + d[:-1]
            eps = eps + d[-1]
            if eps <= 0 or np.abs(d[:-1]).max() > 5.0:
                return uI, eps, it, False
        F, scale = self.residual(uI, eps)
        return uI, eps, max_iter, np.linalg.norm(F, np.inf) / scale <= self.tol


def trace_branch(mesh: Mesh, eps_start: float, eps_min: float, *, ds0: float = 0.05, ds_max: float = 0.5,
                 ds_min: float = 1e-7, du_max: float = 0.25, max_points: int = 400, tol: float = 1e-10,
                 tol_eig: float = 1e-8, mu_stop: float | None = None, resolution: float = 6.0,
                 spectra: bool = True, mf_spectra: bool = False, r0: float | None = None,
                 oracle: GreenOracle | None = None) -> Branch:
    """Pseudo-arclength continuation of the Gelfand branch from the lower branch.

    Stops when ``eps`` drops below ``eps_min`` on the upper branch, when the
    step size underflows, when ``max u`` reaches ``mu_stop`` or when the bubble
    width ``sqrt(8 / (eps^2 e^{max u}))`` falls below ``resolution`` local mesh
    sizes.
    """
    C = _Continuation(mesh, tol)
    first = solve_gelfand(mesh, eps_start, tol=tol)
    if not first.converged:
        raise SolverError(f"no lower-branch solution at eps_start={eps_start}")
    uI, eps = first.u.values[C.I].copy(), eps_start
    # initial tangent: decreasing-eps direction is wrong on the lower branch, go up in eps
    tu, te = C.tangent(uI, eps, np.zeros_like(uI), 1.0)
    points: list[BranchPoint] = []
    folds: list[dict] = []
    ds = ds0
    stop = "max_points"
    passed_fold = False

    def record(uI, eps, te, ds):
        u = C._full(uI)
        res = _result(mesh, u, "gelfand", eps, eps**2 * float(np.sum(C.S.m * np.exp(u))), eps, 0.0, 0, True,
                      np.ones(mesh.n_nodes), "")
        st = functionals(res.u, res.lam, mesh=mesh)
        me, mabs, mmf = float("nan"), float("nan"), float("nan")
        if spectra:
            sp_g = linearized_spectrum_gelfand(res, k=4, tol=tol_eig)
            me, mabs = sp_g.eigenvalues[0], sp_g.min_abs_eigenvalue
        if mf_spectra:
            mmf = linearized_spectrum_meanfield(res, k=4, tol=tol_eig).eigenvalues[0]
        masses = []
        rr = r0
        br = bubble_diagnose(res, 1, r0=rr, oracle=None)
        if br.local_masses:
            masses = [float(br.local_masses[0])]
        return BranchPoint(float(eps), res.u, float(res.lam), st.energy, st.entropy, float(np.max(res.u_tilde)),
                           float(st.rho.max()), float(me), float(mabs), float(mmf), masses, len(points),
                           float(te), float(ds))

    points.append(record(uI, eps, te, 0.0))
    while len(points) < max_points:
        u_pred = uI + ds * tu
        e_pred = eps + ds * te
        ok = e_pred > 0
        if ok:
            un, en, its, ok = C.correct(u_pred, e_pred, tu, te)
        if ok and np.abs(un - uI).max() > du_max:
            ok = False
        if not ok:
            ds *= 0.5
            if ds < ds_min:
                stop = "step underflow"
                break
            continue
        tun, ten = C.tangent(un, en, tu, te)
        if np.sign(ten) != np.sign(te) and te != 0:
            folds.append({"index": len(points), "eps_before": eps, "eps_after": en})
            passed_fold = True
        uI, eps, tu, te = un, en, tun, ten
        points.append(record(uI, eps, te, ds))
        if its <= 3:
            ds = min(ds * 1.5, ds_max)
        umax = uI.max()
        imax = C.I[np.argmax(uI)]
        width = math.sqrt(8.0 / (eps**2 * math.exp(umax)))
        if passed_fold and eps < eps_min:
            stop = "eps_min"
            break
        if mu_stop is not None and umax >= mu_stop:
            stop = "mu_stop"
            break
        if width < resolution * mesh.node_h[imax]:
            stop = "resolution limit"
            break
    return Branch(points, folds, stop)


def locate_fold(mesh: Mesh, point: BranchPoint, tol: float = 1e-10, iters: int = 60) -> dict:
    """Refine a fold by bisection on the arclength step from ``point``.

    ``point`` must lie before the fold; the sign of ``d eps / ds`` at the
    corrected state decides the bisection.
    """
    C = _Continuation(mesh, tol)
    uI = point.u.values[C.I].copy()
    eps = point.eps
    tu, te = C.tangent(uI, eps, np.zeros_like(uI), 1.0 if point.deps_ds >= 0 else -1.0)
    s0 = np.sign(te)
    lo, hi = 0.0, None
    ds = 0.02
    best = (uI, eps, te)
    for _ in range(iters):
        trial = ds if hi is None else 0.5 * (lo + hi)
        un, en, _, ok = C.correct(uI + trial * tu, eps + trial * te, tu, te)
        if not ok:
            if hi is None:
                ds *= 0.5
                continue
            hi = trial
            continue
        _, ten = C.tangent(un, en, tu, te)
        if np.sign(ten) == s0:
            lo = trial
            best = (un, en, ten)
            if hi is None:
                ds *= 2
        else:
            hi = trial
            best = (un, en, ten)
        if abs(best[2]) < 1e-9:
            break
    uI, en, ten = best
    u = C._full(uI)
    lam = en**2 * float(np.sum(C.S.m * np.exp(u)))
    return {"eps": float(en), "eps2": float(en**2), "lambda": lam, "u": u, "deps_ds": float(ten)}


def tangent_fields(point: BranchPoint, fold_tol: float = 1e-3) -> tuple[np.ndarray, float]:
    """``w = du/deps`` from the linearized equation and ``d lambda / d eps``."""
    mesh = point.u.mesh
    S = _system(mesh)
    if not np.isfinite(point.min_abs_eig):
        res = _result(mesh, point.u.values, "gelfand", point.eps, point.lambda_eps, point.eps, 0.0, 0, True,
                      np.ones(mesh.n_nodes), "")
        point.min_abs_eig = linearized_spectrum_gelfand(res, k=2).min_abs_eigenvalue
    if abs(point.min_abs_eig) < fold_tol:
        raise SolverError("linearized operator is singular at a fold; use arclength derivatives")
    eps = point.eps
    u = point.u.values
    eu = np.exp(u)
    A = (S.KII - sp.diags(eps**2 * S.m[S.I] * eu[S.I])).tocsc()
    w = np.zeros(mesh.n_nodes)
    w[S.I] = spla.spsolve(A, 2 * eps * S.m[S.I] * eu[S.I])
    dlam = 2 * eps * float(np.sum(S.m * eu)) + eps**2 * float(np.sum(S.m * eu * w))
    return w, dlam


# ---------------------------------------------------------------------------
# Entropy-energy curve
# ---------------------------------------------------------------------------

@dataclass
class CurveReport:
    E: np.ndarray
    S: np.ndarray
    lam: np.ndarray
    segment: np.ndarray
    dSdE: np.ndarray
    d2SdE2: np.ndarray
    verdicts: dict
    e8pi: float
    kind: str

    def rows(self):
        for i in range(len(self.E)):
            yield [self.E[i], self.S[i], self.lam[i], self.dSdE[i], self.d2SdE2[i], self.segment[i]]


def lambda_grid(n_neg: int = 24, n_pos: int = 24, n_geo: int = 28, per_halving: int = 4) -> np.ndarray:
    """Uniform on ``[-4 pi, 0]`` and ``[0, 4 pi]``, then geometric in ``1 - lam/8pi``.

    The geometric part takes ``per_halving`` steps for every halving of the
    gap to 8 pi.
    """
    neg = np.linspace(-4 * np.pi, 0.0, n_neg + 1)
    pos = np.linspace(0.0, 4 * np.pi, n_pos + 1)[1:]
    geo = EIGHT_PI * (1 - 0.5 ** (1 + np.arange(1, n_geo + 1) / per_halving))
    return np.unique(np.r_[neg, pos, geo])


def low_segment(mesh: Mesh, lams, tol: float = 1e-10, threads: int = 1) -> list[DensityState]:
    """Mean field states along an increasing ``lambda`` grid.

    With ``threads > 1`` the states with ``lambda <= 4 pi`` are solved
    independently from a zero guess; the rest are always warm-started in
    order since Newton needs a nearby guess as ``lambda`` approaches 8 pi.
    """
    lams = np.sort(np.asarray(lams, dtype=float))
    out: list[DensityState] = []
    guess = None
    k0 = 0
    if threads > 1:
        easy = lams[lams <= 4 * np.pi]
        with ThreadPoolExecutor(max_workers=threads) as ex:
            res = list(ex.map(lambda lam: solve_mean_field(mesh, float(lam), tol=tol), easy))
        for r in res:
            if not r.converged:
                return out
            out.append(functionals(r.u, r.lam))
            guess = r.u.values
        k0 = len(easy)
    for lam in lams[k0:]:
        r = solve_mean_field(mesh, float(lam), guess=guess, tol=tol)
        if not r.converged:
            break
        out.append(functionals(r.u, r.lam))
        guess = r.u.values
    return out


def _derivs(E, S):
    if len(E) < 3:
        return np.full(len(E), np.nan), np.full(len(E), np.nan)
    d1 = np.gradient(S, E)
    d2 = np.gradient(d1, E)
    return d1, d2


def entropy_energy_curve(mesh: Mesh, kind: str, *, branch: Branch | None = None, lams=None,
                         tail_fraction: float = 0.1, tol: float = 1e-10, threads: int = 1) -> CurveReport:
    """Assemble ``S(E)`` from the low mean field segment and the upper branch.

    ``kind`` is the classifier verdict; first-kind domains get no high
    segment.  The convexity verdict looks at the last ``tail_fraction`` of
    the high segment's energy range.
    """
    low = low_segment(mesh, lambda_grid() if lams is None else lams, tol=tol, threads=threads)
    E_low = np.array([s.energy for s in low])
    S_low = np.array([s.entropy for s in low])
    L_low = np.array([s.lam for s in low])
    E_hi = S_hi = L_hi = np.array([])
    e8 = math.inf
    if kind == "second" and branch is not None:
        arr = branch.arrays()
        sel = arr["lambda_eps"] >= EIGHT_PI
        # high segment: states beyond E_8pi along the branch
        e8 = e8pi_value(mesh, tol=tol, guess_states=low)
        sel &= arr["energy"] > e8
        E_hi, S_hi, L_hi = arr["energy"][sel], arr["entropy"][sel], arr["lambda_eps"][sel]
        order = np.argsort(E_hi)
        E_hi, S_hi, L_hi = E_hi[order], S_hi[order], L_hi[order]
    d1l, d2l = _derivs(E_low, S_low)
    d1h, d2h = _derivs(E_hi, S_hi)
    verdicts = curve_verdicts(E_low, S_low, L_low, E_hi, S_hi, L_hi, d2l, d2h, tail_fraction)
    if branch is not None:
        verdicts["E_monotone_in_eps"] = upper_branch_energy_monotone(branch)
    if kind != "second":
        verdicts["annotation"] = "first kind"
    E = np.r_[E_low, E_hi]
    return CurveReport(E, np.r_[S_low, S_hi], np.r_[L_low, L_hi],
                       np.array(["low"] * len(E_low) + ["high"] * len(E_hi)), np.r_[d1l, d1h], np.r_[d2l, d2h],
                       verdicts, e8, kind)


def thermo_defect(E, S, lam) -> np.ndarray:
    """``|dS/dE + lambda_mid| / |lambda_mid|`` for consecutive samples."""
    E, S, lam = map(np.asarray, (E, S, lam))
    if len(E) < 2:
        return np.array([])
    mid = 0.5 * (lam[1:] + lam[:-1])
    return np.abs(np.diff(S) / np.diff(E) + mid) / np.maximum(np.abs(mid), 1e-300)


def tail_mask(E: np.ndarray, fraction: float) -> np.ndarray:
    if len(E) == 0:
        return np.zeros(0, bool)
    lo = E.max() - fraction * (E.max() - E.min())
    return E >= lo


def curve_verdicts(E_low, S_low, L_low, E_hi, S_hi, L_hi, d2l, d2h, fraction) -> dict:
    v: dict = {}
    v["low_concave"] = bool(np.all(d2l[1:-1] < 0)) if len(d2l) > 2 else None
    v["lambda_monotone_low"] = bool(np.all(np.diff(L_low) > 0)) if len(L_low) > 1 else None
    v["lambda_monotone"] = v["lambda_monotone_low"]
    dev = [thermo_defect(E_low, S_low, L_low)]
    if len(E_hi) > 1:
        dev.append(thermo_defect(E_hi, S_hi, L_hi))
        tm = tail_mask(E_hi, fraction)
        inner = tm.copy()
        inner[[0, -1]] = False  # one-sided differences at the ends
        v["S_convex_tail"] = bool(np.all(d2h[inner] > 0)) if inner.any() else None
        v["lambda_monotone"] = bool(v["lambda_monotone"]) and bool(np.all(np.diff(L_hi[tm]) < 0))
        v["lambda_decreasing_tail"] = bool(np.all(np.diff(L_hi[tm]) < 0)) and bool(np.all(L_hi[tm] > EIGHT_PI))
        # empirical onset of the convex tail: smallest E beyond which d2S/dE2 stays positive
        pos = d2h[1:-1] > 0
        k = len(pos)
        while k > 0 and pos[k - 1]:
            k -= 1
        v["convex_onset_E"] = float(E_hi[1 + k]) if k < len(pos) else None
        slope = np.polyfit(E_hi[tm], S_hi[tm], 1)[0] if tm.sum() >= 2 else float("nan")
        v["tail_slope"] = float(slope)
        v["tail_slope_rel_err"] = float(abs(slope + EIGHT_PI) / EIGHT_PI)
    devs = np.concatenate(dev) if dev else np.array([])
    v["dSdE_matches_minus_lambda"] = float(devs.max()) if len(devs) else float("nan")
    return v


def upper_branch(branch: Branch) -> list[BranchPoint]:
    """Points past the first fold."""
    if not branch.folds:
        return []
    return branch.points[branch.folds[0]["index"]:]


def upper_branch_energy_monotone(branch: Branch) -> bool | None:
    """``E`` increases while ``eps`` decreases along the upper branch."""
    up = upper_branch(branch)
    if len(up) < 2:
        return None
    eps = np.array([p.eps for p in up])
    E = np.array([p.energy for p in up])
    return bool(np.all(np.diff(eps) < 0) and np.all(np.diff(E) > 0))


def e8pi_value(mesh: Mesh, *, tol: float = 1e-10, guess_states=None) -> float:
    """Energy of the mean field solution at ``lambda = 8 pi`` (continued from below)."""
    lams = EIGHT_PI * (1 - 0.5 ** np.arange(1, 12))
    guess = None
    for lam in np.r_[lams, EIGHT_PI]:
        r = solve_mean_field(mesh, float(lam), guess=guess, tol=tol)
        if not r.converged:
            raise SolverError(f"continuation toward 8 pi stalled at lambda={lam:.6g}")
        guess = r.u.values
    return functionals(r.u, r.lam).energy


def e8pi(mesh: Mesh, kind: str, *, tol: float = 1e-10, n_probe: int = 7) -> dict:
    """``E_8pi`` for second-kind domains, an infinity marker otherwise.

    For first-kind domains the growth rate ``dE / dlog(1/(8 pi - lambda))`` of
    the energy along ``lambda -> 8 pi`` is reported.
    """
    if kind == "second":
        return {"e8pi": e8pi_value(mesh, tol=tol), "infinite": False}
    lams = EIGHT_PI * (1 - 0.5 ** np.arange(1, n_probe + 1))
    states = low_segment(mesh, lams, tol=tol)
    E = np.array([s.energy for s in states])
    x = -np.log(EIGHT_PI - np.array([s.lam for s in states]))
    rate = float(np.polyfit(x[-3:], E[-3:], 1)[0]) if len(E) >= 3 else float("nan")
    return {"e8pi": math.inf, "infinite": True, "energies": E.tolist(), "divergence_rate": rate}
