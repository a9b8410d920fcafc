"""Newton solvers for the mean field and Gelfand equations, linearized
spectra and bubble diagnostics.

Nonlinear terms use the lumped (nodal) quadrature, so for example
``int h e^u`` is ``sum_i m_i h_i e^{u_i}``.  Dirichlet conditions are imposed
by solving for interior unknowns only.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import Mesh
from .green import GreenOracle
from .weight import WeightSpec


class SolverError(RuntimeError):
    pass


@dataclass(eq=False)
class ScalarField:
    """Nodal values on a mesh."""

    values: np.ndarray
    mesh: Mesh

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.n_nodes,):
            raise ValueError("field length does not match the mesh")

    def max(self) -> float:
        return float(self.values.max())


@dataclass(eq=False)
class SolveResult:
    u: ScalarField
    kind: str  # "mean_field" or "gelfand"
    parameter: float
    lam: float
    eps: float | None
    residual_norm: float
    newton_iters: int
    converged: bool
    mass_check: float
    weight: np.ndarray
    message: str = ""

    @property
    def u_tilde(self) -> np.ndarray:
        """``u - log int h e^u`` so that ``int h e^{u_tilde} = 1``."""
        u = self.u.values
        return u - np.log(np.sum(self.u.mesh.lumped_mass * self.weight * np.exp(u)))

    @property
    def density(self) -> np.ndarray:
        """Normalized density ``rho = h e^u / int h e^u``."""
        return self.weight * np.exp(self.u_tilde)

    def summary(self) -> dict:
        return {
            "kind": self.kind, "parameter": self.parameter, "lambda": self.lam, "eps": self.eps,
            "residual_norm": self.residual_norm, "newton_iters": self.newton_iters,
            "converged": self.converged, "mass_check": self.mass_check,
            "u_max": float(self.u.values.max()), "message": self.message,
        }


@dataclass
class SpectrumReport:
    eigenvalues: list[float]
    min_abs_eigenvalue: float
    eigenfield: np.ndarray | None = field(default=None, repr=False)
    converged: bool = True
    operator: str = ""

    @property
    def smallest(self) -> float:
        return self.eigenvalues[0]

    def to_dict(self) -> dict:
        return {"operator": self.operator, "eigenvalues": self.eigenvalues,
                "min_abs_eigenvalue": self.min_abs_eigenvalue, "converged": self.converged}


@dataclass
class BubbleReport:
    peaks: list[list[float]]
    heights: list[float]
    local_masses: list[float]
    eta: list[float]
    w_far: float
    r0: float
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Newton
# ---------------------------------------------------------------------------

class _System:
    """Interior restriction of stiffness and lumped mass."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.I = mesh.interior_nodes
        self.K = mesh.stiffness.tocsr()
        self.KII = self.K[self.I][:, self.I].tocsc()
        self.m = mesh.lumped_mass


_SYSTEM_CACHE: dict[int, _System] = {}


def _system(mesh: Mesh) -> _System:
    s = _SYSTEM_CACHE.get(id(mesh))
    if s is None or s.mesh is not mesh:
        s = _System(mesh)
        _SYSTEM_CACHE.clear()
        _SYSTEM_CACHE[id(mesh)] = s
    return s


def _mf_residual(S: _System, u, lam, hw):
    b = S.m * hw * np.exp(u)
    Z = b.sum()
    Ku = S.K @ u
    F = (Ku - lam * b / Z)[S.I]
    scale = max(1.0, np.abs(lam * b / Z).max(), np.abs(Ku[S.I]).max())
    return F, b, Z, scale


def _gf_residual(S: _System, u, eps2):
    b = S.m * np.exp(u)
    Ku = S.K @ u
    F = (Ku - eps2 * b)[S.I]
    scale = max(1.0, np.abs(eps2 * b).max(), np.abs(Ku[S.I]).max())
    return F, b, scale


def mean_field_jacobian_solve(S: _System, u, lam, hw):
    """Factor ``K - (lam/Z) diag(b) + (lam/Z^2) b b^T`` and return a solver."""
    b = S.m * hw * np.exp(u)
    Z = b.sum()
    bI = b[S.I]
    A = (S.KII - sp.diags(lam / Z * bI)).tocsc()
    lu = spla.splu(A)
    Av = lu.solve(bI)
    c = lam / Z**2
    denom = 1 + c * bI @ Av

    def solve(r):
        Ar = lu.solve(r)
        return Ar - c * Av * (bI @ Ar) / denom

    return solve


def _newton(S, u0, residual, jac_solve, tol, max_iter, max_halvings=30):
    u = u0.copy()
    I = S.I
    F, scale = residual(u)
    rn = np.linalg.norm(F, np.inf) / scale
    it = 0
    while rn > tol and it < max_iter:
        it += 1
        try:
            du = -jac_solve(u)(F)
        except RuntimeError:
            return u, rn, it, False, "singular Jacobian"
        if not np.all(np.isfinite(du)):
            return u, rn, it, False, "non-finite Newton step"
        t = 1.0
        for _ in range(max_halvings + 1):
            un = u.copy()
            un[I] += t * du
            with np.errstate(over="ignore", invalid="ignore"):
                Fn, sn = residual(un)
            rnn = np.linalg.norm(Fn, np.inf) / sn if np.all(np.isfinite(Fn)) else np.inf
            if rnn < rn or rnn <= tol:
                break
            t *= 0.5
        else:
            return u, rn, it, False, "step damping exhausted"
        u, F, scale, rn = un, Fn, sn, rnn
    return u, rn, it, rn <= tol, "" if rn <= tol else "iteration limit"


def solve_mean_field(mesh: Mesh, lam: float, *, w: WeightSpec | None = None, oracle: GreenOracle | None = None,
                     guess=None, tol: float = 1e-10, max_iter: int = 60, weight: np.ndarray | None = None) -> SolveResult:
    """Solve ``-Laplace u = lam h e^u / int h e^u`` with ``u = 0`` on the boundary."""
    S = _system(mesh)
    hw = weight if weight is not None else _nodal_weight(w, oracle, mesh)
    u0 = _initial(mesh, guess)

    def residual(u):
        F, _, _, scale = _mf_residual(S, u, lam, hw)
        return F, scale

    u, rn, it, ok, msg = _newton(S, u0, residual, lambda u: mean_field_jacobian_solve(S, u, lam, hw), tol, max_iter)
    return _result(mesh, u, "mean_field", lam, lam, None, rn, it, ok, hw, msg)


def solve_gelfand(mesh: Mesh, eps: float, *, guess=None, tol: float = 1e-10, max_iter: int = 60) -> SolveResult:
    """Solve ``-Laplace u = eps^2 e^u`` with ``u = 0`` on the boundary."""
    if not eps > 0:
        raise SolverError("eps must be positive")
    S = _system(mesh)
    eps2 = eps * eps
    u0 = _initial(mesh, guess)

    def residual(u):
        F, _, scale = _gf_residual(S, u, eps2)
        return F, scale

    def jac(u):
        A = (S.KII - sp.diags(eps2 * S.m[S.I] * np.exp(u[S.I]))).tocsc()
        return spla.splu(A).solve

    u, rn, it, ok, msg = _newton(S, u0, residual, jac, tol, max_iter)
    lam = eps2 * float(np.sum(S.m * np.exp(u)))
    return _result(mesh, u, "gelfand", eps, lam, eps, rn, it, ok, np.ones(mesh.n_nodes), msg)


def _nodal_weight(w, oracle, mesh):
    if w is None or w.is_constant:
        c = 1.0 if w is None else float(w.hhat_eval(np.zeros((1, 2)))[0])
        return np.full(mesh.n_nodes, c)
    return w.nodal(oracle, mesh)


def _initial(mesh: Mesh, guess) -> np.ndarray:
    if guess is None:
        u = np.zeros(mesh.n_nodes)
    elif isinstance(guess, ScalarField):
        u = guess.values.copy()
    else:
        u = np.asarray(guess, dtype=float).copy()
    if u.shape != (mesh.n_nodes,):
        raise SolverError("guess does not match the mesh")
    u[mesh.boundary_nodes] = 0.0
    return u


def _result(mesh, u, kind, param, lam, eps, rn, it, ok, hw, msg) -> SolveResult:
    m = mesh.lumped_mass
    Z = np.sum(m * hw * np.exp(u))
    ut = u - np.log(Z)
    mass = float(np.sum(m * hw * np.exp(ut)))
    return SolveResult(ScalarField(u, mesh), kind, float(param), float(lam), eps, float(rn), it, bool(ok), mass, hw, msg)


# ---------------------------------------------------------------------------
# Spectra
# ---------------------------------------------------------------------------

def _eig_lowest(S: _System, A: sp.spmatrix, rank1: np.ndarray | None, c: float, k: int, lower: float, tol: float):
    """k smallest eigenvalues of ``A + c v v^T`` against the lumped mass.

    Shift-invert with a shift below the spectrum, then a second pass with
    the shift moved just under the estimated lowest eigenvalue.
    """
    n = A.shape[0]
    k = min(k, n - 2)
    Bd = S.m[S.I]
    B = sp.diags(Bd).tocsc()

    def opinv(sigma):
        lu = spla.splu((A - sigma * B).tocsc())
        if rank1 is None:
            return spla.LinearOperator((n, n), matvec=lu.solve, dtype=float)
        Av = lu.solve(rank1)
        den = 1 + c * rank1 @ Av

        def mv(r):
            r = np.ravel(r)
            Ar = lu.solve(r)
            return Ar - c * Av * (rank1 @ Ar) / den

        return spla.LinearOperator((n, n), matvec=mv, dtype=float)

    if rank1 is None:
        Aop = A
    else:
        Aop = spla.LinearOperator((n, n), matvec=lambda x: A @ np.ravel(x) + c * rank1 * (rank1 @ np.ravel(x)), dtype=float)

    def run(sigma):
        vals, vecs = spla.eigsh(Aop, k=k, M=B, sigma=sigma, which="LM", OPinv=opinv(sigma), tol=tol,
                                v0=np.ones(n), maxiter=20 * n)
        order = np.argsort(vals)
        return vals[order], vecs[:, order]

    converged = True
    try:
        vals, vecs = run(lower)
        gap = vals[1] - vals[0] if k > 1 else 1.0
        sigma = vals[0] - max(0.25 * gap, 1e-6 * max(1.0, abs(vals[0])))
        vals, vecs = run(sigma)
    except spla.ArpackNoConvergence as exc:
        converged = False
        vals = np.sort(exc.eigenvalues) if len(exc.eigenvalues) else np.array([np.nan])
        vecs = None
    try:
        near0 = spla.eigsh(Aop, k=1, M=B, sigma=0.0, which="LM", OPinv=opinv(0.0), tol=tol,
                           v0=np.ones(n), return_eigenvectors=False)
        min_abs = float(min(np.abs(near0).min(), np.abs(vals).min()))
    except (spla.ArpackNoConvergence, RuntimeError):
        min_abs = float(np.abs(vals).min())
    return vals, vecs, min_abs, converged


def linearized_spectrum_gelfand(result: SolveResult, k: int = 6, tol: float = 1e-8) -> SpectrumReport:
    """Eigenvalues ``mu`` of ``-Laplace phi - eps^2 e^u phi = mu phi``."""
    mesh = result.u.mesh
    S = _system(mesh)
    if result.eps is None:
        raise SolverError("Gelfand spectrum needs a Gelfand state")
    eps2 = result.eps**2
    d = eps2 * np.exp(result.u.values[S.I])
    A = (S.KII - sp.diags(S.m[S.I] * d)).tocsc()
    vals, vecs, min_abs, ok = _eig_lowest(S, A, None, 0.0, k, -d.max() - 1.0, tol)
    return SpectrumReport([float(v) for v in vals], min_abs, _embed(mesh, S, vecs), ok, "gelfand")


def linearized_spectrum_meanfield(result: SolveResult, k: int = 6, tol: float = 1e-8,
                                  lam: float | None = None, density: np.ndarray | None = None) -> SpectrumReport:
    """Eigenvalues of ``-Laplace phi - lam rho (phi - <phi>_rho) = mu phi``.

    The projection onto ``rho``-mean-zero functions contributes the exact
    rank-one term ``lam (m rho)(m rho)^T``.
    """
    mesh = result.u.mesh
    S = _system(mesh)
    lam = result.lam if lam is None else lam
    rho = result.density if density is None else density
    b = (S.m * rho)[S.I]
    A = (S.KII - sp.diags(lam * b)).tocsc()
    # Rayleigh bound: the rank-one term is at most |lam| int rho^2 when lam < 0
    lower = -max(lam, 0.0) * rho.max() - max(-lam, 0.0) * float(np.sum(S.m * rho**2)) - 1.0
    vals, vecs, min_abs, ok = _eig_lowest(S, A, b, lam, k, lower, tol)
    return SpectrumReport([float(v) for v in vals], min_abs, _embed(mesh, S, vecs), ok, "mean_field")


def _embed(mesh, S, vecs):
    if vecs is None:
        return None
    out = np.zeros(mesh.n_nodes)
    v = vecs[:, 0]
    out[S.I] = v / np.abs(v).max() * np.sign(v[np.argmax(np.abs(v))])
    return out


# ---------------------------------------------------------------------------
# Bubbles
# ---------------------------------------------------------------------------

def _local_maxima(mesh: Mesh, f: np.ndarray) -> np.ndarray:
    A = mesh.adjacency.tocsr()
    is_max = np.ones(mesh.n_nodes, bool)
    for i in range(mesh.n_nodes):
        nb = A.indices[A.indptr[i]:A.indptr[i + 1]]
        if np.any(f[nb] > f[i]) or np.any((f[nb] == f[i]) & (nb < i)):
            is_max[i] = False
    is_max[mesh.boundary_nodes] = False
    return np.flatnonzero(is_max)


def _refine_peak(mesh: Mesh, f: np.ndarray, i: int) -> tuple[np.ndarray, float]:
    """Quadratic least-squares fit over the 1-ring of node ``i``."""
    A = mesh.adjacency.tocsr()
    nb = A.indices[A.indptr[i]:A.indptr[i + 1]]
    if len(nb) < 5:
        return mesh.nodes[i].copy(), float(f[i])
    d = mesh.nodes[nb] - mesh.nodes[i]
    V = np.column_stack([np.ones(len(nb) + 1), np.r_[0, d[:, 0]], np.r_[0, d[:, 1]],
                         np.r_[0, d[:, 0] ** 2], np.r_[0, d[:, 0] * d[:, 1]], np.r_[0, d[:, 1] ** 2]])
    c = np.linalg.lstsq(V, np.r_[f[i], f[nb]], rcond=None)[0]
    H = np.array([[2 * c[3], c[4]], [c[4], 2 * c[5]]])
    g = c[1:3]
    if np.all(np.linalg.eigvalsh(H) < 0):
        s = -np.linalg.solve(H, g)
        hmax = np.hypot(*d.T).max()
        if np.hypot(*s) <= hmax:
            return mesh.nodes[i] + s, float(c[0] + g @ s + 0.5 * s @ H @ s)
    return mesh.nodes[i].copy(), float(f[i])


def bubble_diagnose(result: SolveResult, expected_m: int = 1, r0: float | None = None,
                    oracle: GreenOracle | None = None, peak_ratio: float = 5.0) -> BubbleReport:
    """Peaks, heights, local masses and profile errors of a concentrated state.

    A node counts as a peak when it is a local maximum of ``u_tilde`` whose
    density exceeds ``peak_ratio`` times the mean density ``1/|Omega|``.
    """
    mesh = result.u.mesh
    ut = result.u_tilde
    rho = result.density
    lam = result.lam
    flags: list[str] = []
    cand = _local_maxima(mesh, ut)
    area = mesh.area
    cand = [i for i in cand if rho[i] * area >= peak_ratio]
    cand.sort(key=lambda i: (-ut[i], i))
    if not cand:
        flags.append("no bubble")
        return BubbleReport([], [], [], [], float("nan"), float(r0 or 0.0), flags)
    peaks, heights = [], []
    for i in cand:
        x, mu = _refine_peak(mesh, ut, i)
        peaks.append(x)
        heights.append(mu)
    peaks_a = np.array(peaks)
    if r0 is None:
        dists = [mesh.boundary_distance(peaks_a).min()]
        if len(peaks_a) > 1:
            D = np.hypot(peaks_a[:, None, 0] - peaks_a[None, :, 0], peaks_a[:, None, 1] - peaks_a[None, :, 1])
            dists.append(D[np.triu_indices(len(peaks_a), 1)].min())
        r0 = 0.25 * min(dists)
    m = mesh.lumped_mass
    masses, etas = [], []
    outside = np.ones(mesh.n_nodes, bool)
    for x, mu in zip(peaks_a, heights):
        r = np.hypot(*(mesh.nodes - x).T)
        ball = r < r0
        outside &= ~ball
        masses.append(float(lam * np.sum(m[ball] * rho[ball])))
        hx = float(result.weight[np.argmin(r)])
        U = mu - 2 * np.log1p(lam * hx / 8 * np.exp(mu) * r[ball] ** 2)
        corr = np.zeros(ball.sum())
        if oracle is not None:
            R = oracle.regular_part_many(x, mesh.nodes[ball])
            corr = 8 * np.pi * (R - oracle.regular_part_many(x, x[None])[0])
        etas.append(float(np.abs(ut[ball] - U - corr).max()) if ball.any() else float("nan"))
    w_far = float("nan")
    if oracle is not None and outside.any():
        ub0 = float(ut[mesh.boundary_nodes].mean())
        acc = ut - ub0
        for x, rj in zip(peaks_a, masses):
            acc = acc - rj * oracle.green_field(x)
        w_far = float(np.abs(acc[outside]).max())
    if len(peaks) != expected_m:
        flags.append(f"found {len(peaks)} peaks, expected {expected_m}")
    return BubbleReport([p.tolist() for p in peaks_a], heights, masses, etas, w_far, float(r0), flags)


# ---------------------------------------------------------------------------
# Sign law
# ---------------------------------------------------------------------------

@dataclass
class ExpansionReport:
    s_values: list[float]
    limiting_sign: int
    monotone_tail: bool
    consistent: bool | None
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def expansion_check(lams, rho_max, d_omega_sign: int | None = None, n_tail: int = 5) -> ExpansionReport:
    """``s_k = (lambda_k - 8 pi) max rho_k`` along a concentrating sequence.

    ``rho_max`` must be increasing along the sequence.  The limiting sign is
    the common sign of the last ``n_tail`` values (0 if they disagree).
    """
    lams = np.asarray(lams, dtype=float)
    rho_max = np.asarray(rho_max, dtype=float)
    if len(lams) != len(rho_max) or len(lams) < n_tail:
        raise SolverError(f"need at least {n_tail} states")
    s = (lams - 8 * np.pi) * rho_max
    tail = np.sign(s[-n_tail:])
    sign = int(tail[0]) if np.all(tail == tail[0]) else 0
    flags = []
    if sign == 0:
        flags.append("sign not stabilized: refine the mesh near the peak")
    d = np.diff(s[-n_tail:])
    rel = np.abs(d) / np.maximum(np.abs(s[-n_tail:-1]), 1e-300)
    monotone = bool(np.all(d >= 0) or np.all(d <= 0) or np.all(rel < 0.05))
    if not monotone:
        flags.append("non-monotone tail beyond 5% noise")
    consistent = None if d_omega_sign is None else (sign == int(np.sign(d_omega_sign)))
    return ExpansionReport([float(v) for v in s], sign, monotone, consistent, flags)
