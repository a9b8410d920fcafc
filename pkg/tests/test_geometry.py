import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from meanfield.geometry import (Domain, GeometryError, Quadrature, build_mesh, integrate, read_field_csv,
                                write_field_csv)


def test_disk_mesh_area():
    mesh = build_mesh(Domain.disk(), 0.1)
    assert abs(mesh.area - np.pi) / np.pi < 1e-2
    assert mesh.h_max <= 0.15


def test_rectangle_area_exact():
    mesh = build_mesh(Domain.rectangle(1.0, 2.0), 0.1)
    assert mesh.area == pytest.approx(2.0, abs=1e-13)


def test_refinement_halves_h_and_keeps_area():
    mesh = build_mesh(Domain.rectangle(1.0, 1.0), 0.5)
    fine = mesh.refine()
    assert fine.h_max == pytest.approx(0.5 * mesh.h_max, rel=1e-12)
    assert fine.area == pytest.approx(mesh.area, abs=1e-14)
    assert len(fine.triangles) == 4 * len(mesh.triangles)


def test_refinement_of_polygon_keeps_area():
    poly = Domain.polygon([(0, 0), (2, 0), (2, 1), (1, 1.5), (0, 1)])
    mesh = build_mesh(poly, 0.25)
    assert mesh.area == pytest.approx(2.5, abs=1e-12)
    assert mesh.refine().area == pytest.approx(mesh.area, abs=1e-12)


def test_integrate_examples():
    sq = build_mesh(Domain.rectangle(1.0, 1.0), 0.1)
    assert integrate(sq, np.ones(sq.n_nodes)) == pytest.approx(1.0, abs=1e-13)
    assert integrate(sq, np.zeros(sq.n_nodes)) == 0.0
    disk = build_mesh(Domain.disk(), 0.02)
    assert abs(integrate(disk, lambda x, y: x**2 + y**2, Quadrature.of_order(4)) - np.pi / 2) < 1e-3


@pytest.mark.parametrize("order", [1, 2, 4, 5])
def test_quadrature_weights_and_exactness(order):
    q = Quadrature.of_order(order)
    assert q.weights.sum() == pytest.approx(0.5)
    assert np.allclose(q.bary.sum(1), 1.0)
    # polynomial x^order on the reference triangle: exact value order! * 1! ... / (order + 2)!
    x = q.bary[:, 1]
    exact = 1.0 / ((order + 1) * (order + 2))
    assert np.sum(q.weights * x**order) == pytest.approx(exact, rel=1e-10)


@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 1000))
def test_integrate_linear_and_monotone(a, b, seed):
    mesh = build_mesh(Domain.rectangle(1.0, 2.0), 0.25)
    r = np.random.default_rng(seed)
    f, g = r.random(mesh.n_nodes), r.random(mesh.n_nodes)
    lhs = integrate(mesh, a * f + b * g)
    rhs = a * integrate(mesh, f) + b * integrate(mesh, g)
    assert lhs == pytest.approx(rhs, abs=1e-12)
    assert integrate(mesh, f) >= 0
    assert integrate(mesh, f + g) >= integrate(mesh, f)


def test_interpolation_is_exact_for_linear_fields(rng):
    mesh = build_mesh(Domain.disk(), 0.1)
    vals = 2 * mesh.nodes[:, 0] - 3 * mesh.nodes[:, 1] + 0.5
    r = 0.9 * np.sqrt(rng.random(50))
    th = 2 * np.pi * rng.random(50)
    P = np.c_[r * np.cos(th), r * np.sin(th)]
    assert np.allclose(mesh.interpolate(vals, P), 2 * P[:, 0] - 3 * P[:, 1] + 0.5)


def test_stiffness_kills_constants_and_mass_is_area():
    mesh = build_mesh(Domain.disk(), 0.1)
    assert np.abs(mesh.stiffness @ np.ones(mesh.n_nodes)).max() < 1e-12
    assert mesh.lumped_mass.sum() == pytest.approx(mesh.area)


def test_boundary_edges_keep_domain_on_left():
    mesh = build_mesh(Domain.rectangle(1.0, 2.0), 0.2)
    e = mesh.boundary_edges
    a, b = mesh.nodes[e[:, 0]], mesh.nodes[e[:, 1]]
    # signed area of the boundary polygon formed by the edges
    assert 0.5 * np.sum(a[:, 0] * b[:, 1] - b[:, 0] * a[:, 1]) == pytest.approx(2.0)


def test_graded_mesh_is_finer_at_center():
    mesh = build_mesh(Domain.rectangle(1.0, 10.0), 0.05, h_center=0.006)
    i0 = np.argmin(np.hypot(*mesh.nodes.T))
    assert mesh.node_h[i0] < 0.015
    assert mesh.h_max <= 0.075


def test_domain_strict_parsing(tmp_path):
    ok = Domain.from_dict({"kind": "rectangle", "a": 1.0, "b": 10.0, "label": "thin"})
    assert ok.label == "thin" and ok.area == pytest.approx(10.0)
    with pytest.raises(GeometryError):
        Domain.from_dict({"kind": "rectangle", "a": 1.0, "b": 2.0, "c": 3})
    with pytest.raises(GeometryError):
        Domain.from_dict({"kind": "ellipse"})
    with pytest.raises(GeometryError):
        Domain.disk(-1.0)
    with pytest.raises(GeometryError):
        Domain.rectangle(2.0, 1.0)
    with pytest.raises(GeometryError):
        Domain.polygon([(0, 0), (1, 1), (1, 0), (0, 1)])
    p = tmp_path / "d.json"
    p.write_text(json.dumps(ok.to_dict()))
    assert Domain.from_json(p) == ok
    p.write_text("{not json")
    with pytest.raises(GeometryError):
        Domain.from_json(p)


def test_mesh_is_deterministic():
    a = build_mesh(Domain.disk(), 0.08)
    b = build_mesh(Domain.disk(), 0.08)
    assert np.array_equal(a.nodes, b.nodes) and np.array_equal(a.triangles, b.triangles)


def test_field_csv_round_trip(tmp_path, rng):
    mesh = build_mesh(Domain.disk(), 0.2)
    v = rng.standard_normal(mesh.n_nodes)
    p = tmp_path / "f.csv"
    write_field_csv(p, mesh, v)
    assert np.array_equal(read_field_csv(p, mesh), v)
    assert p.read_text().splitlines()[0] == "node_index,x,y,value"
