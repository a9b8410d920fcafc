"""Planar domains, triangulations and triangle quadrature.

Every other module works on a :class:`Mesh` built here: piecewise-linear
elements, Dirichlet nodes tagged as ``boundary_nodes``, and a lumped mass
vector used as the nodal quadrature for all nonlinear terms.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.spatial import Delaunay, cKDTree


class GeometryError(ValueError):
    """Raised for invalid domain descriptions or unmeshable requests."""


# ---------------------------------------------------------------------------
# Domains
# ---------------------------------------------------------------------------

_KINDS = ("disk", "rectangle", "polygon")


@dataclass(frozen=True)
class Domain:
    """A bounded, simply connected planar domain.

    ``disk`` uses ``radius``; ``rectangle`` uses side lengths ``a <= b``
    (``a`` along x); both are centred at ``center``. ``polygon`` takes
    counter-clockwise ``vertices``.
    """

    kind: str
    radius: float | None = None
    a: float | None = None
    b: float | None = None
    vertices: tuple[tuple[float, float], ...] | None = None
    center: tuple[float, float] = (0.0, 0.0)
    label: str = ""

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise GeometryError(f"unknown domain kind {self.kind!r}")
        if self.kind == "disk":
            if self.radius is None or not self.radius > 0:
                raise GeometryError("disk needs radius > 0")
        elif self.kind == "rectangle":
            if self.a is None or self.b is None or not (0 < self.a <= self.b):
                raise GeometryError("rectangle needs 0 < a <= b")
        else:
            if self.vertices is None or len(self.vertices) < 3:
                raise GeometryError("polygon needs at least three vertices")
            v = np.asarray(self.vertices, dtype=float)
            if _signed_area(v) <= 0:
                raise GeometryError("polygon vertices must be counter-clockwise with positive area")
            if _self_intersecting(v):
                raise GeometryError("polygon boundary is self-intersecting")

    # constructors -----------------------------------------------------------
    @classmethod
    def disk(cls, radius: float = 1.0, center=(0.0, 0.0), label: str = "disk") -> "Domain":
        return cls("disk", radius=float(radius), center=_pt(center), label=label)

    @classmethod
    def rectangle(cls, a: float, b: float, center=(0.0, 0.0), label: str = "rectangle") -> "Domain":
        return cls("rectangle", a=float(a), b=float(b), center=_pt(center), label=label)

    @classmethod
    def polygon(cls, vertices, label: str = "polygon") -> "Domain":
        return cls("polygon", vertices=tuple(_pt(v) for v in vertices), label=label)

    @classmethod
    def from_dict(cls, data: dict) -> "Domain":
        data = dict(data)
        kind = data.pop("kind", None)
        label = str(data.pop("label", kind or ""))
        center = data.pop("center", (0.0, 0.0))
        allowed = {"disk": {"radius"}, "rectangle": {"a", "b"}, "polygon": {"vertices"}}
        if kind not in allowed:
            raise GeometryError(f"unknown domain kind {kind!r}")
        unknown = set(data) - allowed[kind]
        if unknown:
            raise GeometryError(f"unknown keys for {kind}: {sorted(unknown)}")
        try:
            if kind == "disk":
                return cls.disk(float(data["radius"]), center, label)
            if kind == "rectangle":
                return cls.rectangle(float(data["a"]), float(data["b"]), center, label)
            return cls.polygon(data["vertices"], label)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, GeometryError):
                raise
            raise GeometryError(f"malformed {kind} domain: {exc}") from exc

    @classmethod
    def from_json(cls, path: str | Path) -> "Domain":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise GeometryError(f"cannot read domain file {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise GeometryError("domain file must hold a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind, "label": self.label}
        if self.kind == "disk":
            out.update(radius=self.radius, center=list(self.center))
        elif self.kind == "rectangle":
            out.update(a=self.a, b=self.b, center=list(self.center))
        else:
            out["vertices"] = [list(v) for v in self.vertices]
        return out

    # geometry ---------------------------------------------------------------
    @property
    def centroid(self) -> np.ndarray:
        if self.kind == "polygon":
            v = np.asarray(self.vertices)
            x, y = v[:, 0], v[:, 1]
            xn, yn = np.roll(x, -1), np.roll(y, -1)
            c = x * yn - xn * y
            A = c.sum() / 2
            return np.array([((x + xn) * c).sum(), ((y + yn) * c).sum()]) / (6 * A)
        return np.asarray(self.center, dtype=float)

    @property
    def area(self) -> float:
        if self.kind == "disk":
            return math.pi * self.radius**2
        if self.kind == "rectangle":
            return self.a * self.b
        return _signed_area(np.asarray(self.vertices))

    @property
    def diameter(self) -> float:
        if self.kind == "disk":
            return 2 * self.radius
        if self.kind == "rectangle":
            return math.hypot(self.a, self.b)
        v = np.asarray(self.vertices)
        d = v[:, None, :] - v[None, :, :]
        return float(np.sqrt((d**2).sum(-1)).max())

    def corners(self) -> np.ndarray | None:
        """Polygon corners (rectangle/polygon), or None for the disk."""
        if self.kind == "rectangle":
            cx, cy = self.center
            a, b = self.a / 2, self.b / 2
            return np.array([[cx - a, cy - b], [cx + a, cy - b], [cx + a, cy + b], [cx - a, cy + b]])
        if self.kind == "polygon":
            return np.asarray(self.vertices, dtype=float)
        return None

    def contains(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if self.kind == "disk":
            return np.hypot(*(pts - self.centroid).T) < self.radius
        return _points_in_polygon(pts, self.corners())


def _pt(p) -> tuple[float, float]:
    x, y = p
    return (float(x), float(y))


def _signed_area(v: np.ndarray) -> float:
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    return d1 * d2 < 0 and d3 * d4 < 0


def _self_intersecting(v: np.ndarray) -> bool:
    n = len(v)
    for i in range(n):
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue
            if _segments_cross(v[i], v[(i + 1) % n], v[j], v[(j + 1) % n]):
                return True
    return False


def _points_in_polygon(pts: np.ndarray, poly: np.ndarray) -> np.ndarray:
    x, y = pts[:, 0][:, None], pts[:, 1][:, None]
    x0, y0 = poly[:, 0][None, :], poly[:, 1][None, :]
    x1, y1 = np.roll(poly[:, 0], -1)[None, :], np.roll(poly[:, 1], -1)[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        crosses = ((y0 > y) != (y1 > y)) & (x < (x1 - x0) * (y - y0) / (y1 - y0) + x0)
    return crosses.sum(axis=1) % 2 == 1


def _segment_distance_brute(pts, a, b):
    d = b - a
    L2 = (d**2).sum(1)
    out = np.empty(len(pts))
    chunk = max(1, 2_000_000 // max(1, len(a)))
    for s in range(0, len(pts), chunk):
        p = pts[s:s + chunk]
        rel = p[:, None, :] - a[None, :, :]
        t = np.clip((rel * d[None]).sum(-1) / L2[None], 0.0, 1.0)
        proj = a[None] + t[..., None] * d[None]
        out[s:s + chunk] = np.sqrt(((p[:, None, :] - proj) ** 2).sum(-1)).min(axis=1)
    return out


def segment_distance(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each point to the nearest of the segments ``a[k]``-``b[k]``."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    k = min(32, len(a))
    if len(pts) * len(a) < 200_000 or k < 32:
        return _segment_distance_brute(pts, a, b)
    mid = 0.5 * (a + b)
    half = 0.5 * float(np.hypot(*(b - a).T).max())
    dk, idx = cKDTree(mid).query(pts, k=k)
    A, B = a[idx], b[idx]
    d = B - A
    t = np.clip(((pts[:, None, :] - A) * d).sum(-1) / (d**2).sum(-1), 0.0, 1.0)
    proj = A + t[..., None] * d
    out = np.sqrt(((pts[:, None, :] - proj) ** 2).sum(-1)).min(1)
    # the nearest segment has its midpoint within out + half; re-check otherwise
    unsure = dk[:, -1] < out + half
    if unsure.any():
        out[unsure] = _segment_distance_brute(pts[unsure], a, b)
    return out


# ---------------------------------------------------------------------------
# Quadrature
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Quadrature:
    """Triangle rule in barycentric form; weights sum to 1/2 (reference area)."""

    order: int
    bary: np.ndarray
    weights: np.ndarray

    @classmethod
    def of_order(cls, order: int) -> "Quadrature":
        if order <= 1:
            return cls(1, np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([0.5]))
        if order == 2:
            b = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
            return cls(2, b, np.full(3, 1 / 6))
        if order <= 4:
            # Dunavant degree-4 rule
            a1, w1 = 0.445948490915965, 0.223381589678011
            a2, w2 = 0.091576213509771, 0.109951743655322
            b = []
            w = []
            for a, wt in ((a1, w1), (a2, w2)):
                c = 1 - 2 * a
                b += [[c, a, a], [a, c, a], [a, a, c]]
                w += [wt] * 3
            return cls(4, np.array(b), 0.5 * np.array(w))
        # degree-5 seven point rule
        a1, w1 = 0.470142064105115, 0.132394152788506
        a2, w2 = 0.101286507323456, 0.125939180544827
        b = [[1 / 3, 1 / 3, 1 / 3]]
        w = [0.225]
        for a, wt in ((a1, w1), (a2, w2)):
            c = 1 - 2 * a
            b += [[c, a, a], [a, c, a], [a, a, c]]
            w += [wt] * 3
        return cls(5, np.array(b), 0.5 * np.array(w))


# ---------------------------------------------------------------------------
# Mesh
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Mesh:
    """Conforming P1 triangulation with positively oriented triangles."""

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_nodes: np.ndarray
    domain: Domain | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.nodes = np.ascontiguousarray(self.nodes, dtype=float)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        self.boundary_nodes = np.unique(np.asarray(self.boundary_nodes, dtype=np.int64))
        if np.any(self.areas <= 0):
            raise GeometryError("mesh has non-positive triangle areas")

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @cached_property
    def areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @property
    def area(self) -> float:
        return float(self.areas.sum())

    @cached_property
    def edges(self) -> np.ndarray:
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    @cached_property
    def h_max(self) -> float:
        d = self.nodes[self.edges[:, 0]] - self.nodes[self.edges[:, 1]]
        return float(np.sqrt((d**2).sum(1)).max())

    @cached_property
    def node_h(self) -> np.ndarray:
        """Longest incident edge length per node (local mesh size)."""
        d = self.nodes[self.edges[:, 0]] - self.nodes[self.edges[:, 1]]
        L = np.sqrt((d**2).sum(1))
        out = np.zeros(self.n_nodes)
        np.maximum.at(out, self.edges[:, 0], L)
        np.maximum.at(out, self.edges[:, 1], L)
        return out

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        """Boundary edges (i, j) oriented with the domain on their left."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        key = np.sort(e, axis=1)
        _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        return e[counts[inv.ravel()] == 1]

    @cached_property
    def interior_nodes(self) -> np.ndarray:
        mask = np.ones(self.n_nodes, bool)
        mask[self.boundary_nodes] = False
        return np.flatnonzero(mask)

    @cached_property
    def lumped_mass(self) -> np.ndarray:
        m = np.zeros(self.n_nodes)
        np.add.at(m, self.triangles.ravel(), np.repeat(self.areas / 3, 3))
        return m

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        p = self.nodes[self.triangles]
        # gradients of barycentric functions: rotate opposite edges
        e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
        A = self.areas
        Kloc = np.einsum("tid,tjd->tij", e, e) / (4 * A)[:, None, None]
        rows = np.repeat(self.triangles, 3, axis=1).ravel()
        cols = np.tile(self.triangles, (1, 3)).ravel()
        return sp.csr_matrix((Kloc.ravel(), (rows, cols)), shape=(self.n_nodes,) * 2)

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        e = self.edges
        n = self.n_nodes
        data = np.ones(2 * len(e))
        return sp.csr_matrix((data, (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])), shape=(n, n))

    def boundary_distance(self, pts) -> np.ndarray:
        """Distance to the polygonal mesh boundary."""
        be = self.boundary_edges
        return segment_distance(np.atleast_2d(pts), self.nodes[be[:, 0]], self.nodes[be[:, 1]])

    def contains(self, pts) -> np.ndarray:
        tri, _ = self.locate(pts)
        return tri >= 0

    # point location ---------------------------------------------------------
    @cached_property
    def _buckets(self):
        lo = self.nodes.min(0)
        hi = self.nodes.max(0)
        nb = max(1, int(math.sqrt(len(self.triangles) / 4)))
        size = (hi - lo).max() / nb + 1e-300
        shape = np.maximum(1, np.ceil((hi - lo) / size).astype(int))
        p = self.nodes[self.triangles]
        tlo = np.floor((p.min(1) - lo) / size).astype(int)
        thi = np.floor((p.max(1) - lo) / size).astype(int)
        tlo = np.clip(tlo, 0, shape - 1)
        thi = np.clip(thi, 0, shape - 1)
        cells: dict[tuple[int, int], list[int]] = {}
        for t in range(len(p)):
            for i in range(tlo[t, 0], thi[t, 0] + 1):
                for j in range(tlo[t, 1], thi[t, 1] + 1):
                    cells.setdefault((i, j), []).append(t)
        cells_np = {k: np.array(v) for k, v in cells.items()}
        return lo, size, shape, cells_np

    def locate(self, pts) -> tuple[np.ndarray, np.ndarray]:
        """Containing triangle index (-1 outside) and barycentric coordinates."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        lo, size, shape, cells = self._buckets
        idx = np.floor((pts - lo) / size).astype(int)
        tri = np.full(len(pts), -1)
        bary = np.zeros((len(pts), 3))
        P = self.nodes[self.triangles]
        for k, (i, j) in enumerate(idx):
            cand = cells.get((int(i), int(j)))
            if cand is None:
                continue
            lam = _barycentric(P[cand], pts[k])
            ok = np.flatnonzero(lam.min(1) >= -1e-12)
            if len(ok):
                best = ok[np.argmax(lam[ok].min(1))]
                tri[k] = cand[best]
                bary[k] = lam[best]
        return tri, bary

    def interpolate(self, values: np.ndarray, pts) -> np.ndarray:
        """P1 interpolation of nodal ``values`` at ``pts`` (NaN outside)."""
        tri, bary = self.locate(pts)
        out = np.full(len(tri), np.nan)
        ok = tri >= 0
        out[ok] = (values[self.triangles[tri[ok]]] * bary[ok]).sum(1)
        return out

    def quadrature_points(self, quad: Quadrature) -> tuple[np.ndarray, np.ndarray]:
        """Physical quadrature points (T, q, 2) and weights (T, q)."""
        P = self.nodes[self.triangles]
        X = np.einsum("qk,tkd->tqd", quad.bary, P)
        W = 2 * self.areas[:, None] * quad.weights[None, :]
        return X, W

    def refine(self) -> "Mesh":
        """Uniform red refinement: every triangle split into four."""
        e = self.edges
        n = self.n_nodes
        mid = 0.5 * (self.nodes[e[:, 0]] + self.nodes[e[:, 1]])
        lookup = {(int(a), int(b)): n + k for k, (a, b) in enumerate(e)}

        def m(a, b):
            return lookup[(a, b) if a < b else (b, a)]

        tris = []
        for a, b, c in self.triangles.tolist():
            ab, bc, ca = m(a, b), m(b, c), m(c, a)
            tris += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
        bset = set(self.boundary_nodes.tolist())
        new_b = [m(int(a), int(b)) for a, b in self.boundary_edges]
        boundary = np.array(sorted(bset | set(new_b)))
        return Mesh(np.vstack([self.nodes, mid]), np.array(tris), boundary, self.domain)

    def stats(self) -> dict:
        return {
            "n_nodes": int(self.n_nodes),
            "n_triangles": int(len(self.triangles)),
            "n_boundary_nodes": int(len(self.boundary_nodes)),
            "h_max": self.h_max,
            "area": self.area,
        }


def _barycentric(P: np.ndarray, x: np.ndarray) -> np.ndarray:
    a, b, c = P[:, 0], P[:, 1], P[:, 2]
    v0, v1 = b - a, c - a
    v2 = x[None, :] - a
    det = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
    l1 = (v2[:, 0] * v1[:, 1] - v2[:, 1] * v1[:, 0]) / det
    l2 = (v0[:, 0] * v2[:, 1] - v0[:, 1] * v2[:, 0]) / det
    return np.stack([1 - l1 - l2, l1, l2], axis=1)


# ---------------------------------------------------------------------------
# Mesh generation
# ---------------------------------------------------------------------------

def _graded_spacing(length: float, h: float, h_center: float | None, growth: float) -> np.ndarray:
    """Node offsets on [0, length] starting at 0 with spacing growing from h_center to h."""
    if h_center is None or h_center >= h:
        n = max(1, math.ceil(length / h - 1e-9))
        return np.linspace(0.0, length, n + 1)
    steps = []
    s = h_center
    pos = 0.0
    while pos + s < length:
        steps.append(s)
        pos += s
        s = min(h, s * growth)
    # stretch the last steps to land on the endpoint
    steps = np.array(steps) if steps else np.array([length])
    steps *= length / steps.sum()
    return np.concatenate([[0.0], np.cumsum(steps)])


def _symmetric_axis(half: float, h: float, h_center: float | None, growth: float) -> np.ndarray:
    pos = _graded_spacing(half, h, h_center, growth)
    return np.concatenate([-pos[:0:-1], pos])


def _rectangle_mesh(dom: Domain, h: float, h_center, growth) -> Mesh:
    xs = _symmetric_axis(dom.a / 2, h / math.sqrt(2) * 1.0, h_center, growth)
    ys = _symmetric_axis(dom.b / 2, h / math.sqrt(2) * 1.0, h_center, growth)
    # keep an even number of cells in each direction for mirror symmetry
    nx, ny = len(xs) - 1, len(ys) - 1
    X, Y = np.meshgrid(xs + dom.center[0], ys + dom.center[1], indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    def idx(i, j):
        return i * (ny + 1) + j

    tris = []
    ic, jc = nx // 2, ny // 2
    for i in range(nx):
        for j in range(ny):
            a, b, c, d = idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)
            # union-jack: diagonals point away from the centre lines
            if (i < ic) == (j < jc):
                tris += [(a, b, c), (a, c, d)]
            else:
                tris += [(a, b, d), (b, c, d)]
    I, J = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), indexing="ij")
    bmask = (I == 0) | (I == nx) | (J == 0) | (J == ny)
    return Mesh(nodes, np.array(tris), np.flatnonzero(bmask.ravel()), dom)


def _disk_mesh(dom: Domain, h: float, h_center, growth) -> Mesh:
    R = dom.radius
    if h_center is None or h_center >= h:
        N = max(2, math.ceil(math.pi * R / (3 * h) - 1e-9))
        radii = np.linspace(0.0, R, N + 1)
        counts = [1] + [6 * k for k in range(1, N + 1)]
    else:
        radii = _graded_spacing(R, h, h_center, growth)
        counts = [1]
        for k in range(1, len(radii)):
            dr = radii[k] - radii[k - 1]
            n = max(6, 4 * math.ceil(2 * math.pi * radii[k] / (4 * min(h, 1.05 * dr))))
            counts.append(n)
    pts = [np.zeros((1, 2))]
    for r, n in zip(radii[1:], counts[1:]):
        th = 2 * np.pi * np.arange(n) / n
        pts.append(np.column_stack([r * np.cos(th), r * np.sin(th)]))
    nodes = np.vstack(pts)
    nb = counts[-1]
    tris = Delaunay(nodes).simplices
    tris = _fix_orientation(nodes, tris)
    tris = _drop_flat(nodes, tris)
    boundary = np.arange(len(nodes) - nb, len(nodes))
    return Mesh(nodes + np.asarray(dom.center), tris, boundary, dom)


def _polygon_mesh(dom: Domain, h_target: float) -> Mesh:
    # lattice spacing below h_target leaves room for the boundary layer
    h = 0.85 * h_target
    V = dom.corners()
    bpts = []
    for k in range(len(V)):
        p, q = V[k], V[(k + 1) % len(V)]
        n = max(1, math.ceil(np.linalg.norm(q - p) / h - 1e-9))
        t = np.arange(n)[:, None] / n
        bpts.append(p + t * (q - p))
    bpts = np.vstack(bpts)
    lo, hi = V.min(0), V.max(0)
    dy = h * math.sqrt(3) / 2
    rows = []
    for j, y in enumerate(np.arange(lo[1], hi[1] + dy, dy)):
        xs = np.arange(lo[0] + (0.5 * h if j % 2 else 0.0), hi[0] + h, h)
        rows.append(np.column_stack([xs, np.full_like(xs, y)]))
    lat = np.vstack(rows)
    inside = _points_in_polygon(lat, V)
    lat = lat[inside]
    d = segment_distance(lat, V, np.roll(V, -1, axis=0))
    lat = lat[d > 0.4 * h]
    nodes = np.vstack([bpts, lat])
    tris = Delaunay(nodes).simplices
    tris = _fix_orientation(nodes, tris)
    tris = _drop_flat(nodes, tris)
    cen = nodes[tris].mean(1)
    tris = tris[_points_in_polygon(cen, V)]
    mesh = Mesh(nodes, tris, np.arange(len(bpts)), dom)
    be = np.sort(mesh.boundary_edges, axis=1)
    if not set(be.ravel().tolist()) <= set(range(len(bpts))):
        raise GeometryError("Delaunay triangulation lost boundary edges; use a smaller h_target")
    return mesh


def _fix_orientation(nodes, tris):
    p = nodes[tris]
    e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    neg = (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]) < 0
    tris = tris.copy()
    tris[neg] = tris[neg][:, [0, 2, 1]]
    return tris


def _drop_flat(nodes, tris, rel=1e-10):
    p = nodes[tris]
    e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    area = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    L2 = np.maximum((e1**2).sum(1), (e2**2).sum(1))
    return tris[area > rel * L2]


def build_mesh(
    domain: Domain,
    h_target: float,
    *,
    h_center: float | None = None,
    growth: float = 1.12,
) -> Mesh:
    """Triangulate ``domain`` with longest edge at most ``1.5 * h_target``.

    ``h_center`` requests a mesh graded toward the domain centre (disk and
    rectangle only): spacing starts at ``h_center`` and grows geometrically by
    ``growth`` per layer until it reaches the ``h_target`` level.
    """
    if not h_target > 0:
        raise GeometryError("h_target must be positive")
    if domain.area <= 0:
        raise GeometryError("degenerate domain with zero area")
    if h_target >= domain.diameter:
        raise GeometryError("h_target must be smaller than the domain diameter")
    if domain.kind == "disk":
        mesh = _disk_mesh(domain, h_target, h_center, growth)
    elif domain.kind == "rectangle":
        mesh = _rectangle_mesh(domain, h_target, h_center, growth)
    else:
        if h_center is not None:
            raise GeometryError("graded meshes are available for disks and rectangles only")
        mesh = _polygon_mesh(domain, h_target)
    if mesh.h_max > 1.5 * h_target + 1e-12:
        raise GeometryError(f"mesh quality check failed: h_max={mesh.h_max:.4g} > 1.5*h_target")
    return mesh


# ---------------------------------------------------------------------------
# Integration
# ---------------------------------------------------------------------------

def integrate(mesh: Mesh, f, quad: Quadrature | None = None) -> float:
    """Quadrature approximation of the integral of ``f`` over the mesh.

    ``f`` is either a nodal array (interpolated as P1) or a vectorised
    callable ``f(x, y)``.
    """
    quad = quad or Quadrature.of_order(2)
    if callable(f):
        X, W = mesh.quadrature_points(quad)
        vals = np.asarray(f(X[..., 0], X[..., 1]), dtype=float)
        return float((np.broadcast_to(vals, W.shape) * W).sum())
    vals = np.asarray(f, dtype=float)
    if vals.shape != (mesh.n_nodes,):
        raise ValueError(f"field has shape {vals.shape}, mesh has {mesh.n_nodes} nodes")
    tri_vals = vals[mesh.triangles]  # (T, 3)
    at_q = tri_vals @ quad.bary.T  # (T, q)
    W = 2 * mesh.areas[:, None] * quad.weights[None, :]
    return float((at_q * W).sum())


def write_field_csv(path: str | Path, mesh: Mesh, values: np.ndarray) -> None:
    """Dump nodal values as ``node_index,x,y,value`` rows."""
    with open(path, "w", newline="\n") as fh:
        fh.write("node_index,x,y,value\n")
        for i, ((x, y), v) in enumerate(zip(mesh.nodes, values)):
            fh.write(f"{i},{x:.17g},{y:.17g},{v:.17g}\n")


def read_field_csv(path: str | Path, mesh: Mesh) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[0] != mesh.n_nodes:
        raise ValueError(f"field file has {data.shape[0]} rows, mesh has {mesh.n_nodes} nodes")
    out = np.zeros(mesh.n_nodes)
    out[data[:, 0].astype(int)] = data[:, 3]
    return out


def circle_points(center: Sequence[float], r: float, n: int) -> np.ndarray:
    th = 2 * np.pi * np.arange(n) / n
    return np.asarray(center)[None, :] + r * np.column_stack([np.cos(th), np.sin(th)])


FieldFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
