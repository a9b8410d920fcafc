import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from meanfield.weight import WeightError, WeightSpec, parse_hhat, weight_eval


def test_constant_weight(coarse_disk_oracle):
    w = WeightSpec()
    h, g, lap = weight_eval(w, coarse_disk_oracle, (0.2, 0.1))
    assert w.is_constant
    assert h == 1.0 and np.allclose(g, 0) and lap == 0


def test_exponential_weight_is_log_harmonic(coarse_disk_oracle):
    w = WeightSpec("exp(x)")
    h, g, lap = weight_eval(w, coarse_disk_oracle, (0.3, -0.2))
    assert h == pytest.approx(np.exp(0.3))
    assert np.allclose(g, (1.0, 0.0)) and lap == pytest.approx(0.0, abs=1e-14)
    assert not w.is_constant


def test_singular_weight_disk_value(disk_oracle):
    w = WeightSpec("1", [(0.0, 0.0)], [0.5])
    h, _, _ = weight_eval(w, disk_oracle, (0.5, 0.0))
    assert h == pytest.approx(0.5, rel=1e-3)


def test_polynomial_laplacian():
    w = WeightSpec("exp(x**2 + y**2)")
    _, lap = w.dlog_hhat(np.array([[0.1, 0.2], [0.0, 0.0]]))
    assert np.allclose(lap, 4.0)


@pytest.mark.parametrize("bad", ["sin(x)", "__import__('os')", "x; y", "z + 1", "", "lambda: 1", "x.real"])
def test_grammar_rejects(bad):
    with pytest.raises(WeightError):
        parse_hhat(bad)


def test_spec_validation():
    with pytest.raises(WeightError):
        WeightSpec("1", [(0, 0)], [-1.0])
    with pytest.raises(WeightError):
        WeightSpec("1", [(0, 0)], [])
    with pytest.raises(WeightError):
        WeightSpec.from_json('{"hhat": "1", "beta": 2}')
    w = WeightSpec.from_json('{"hhat": "2 + x*y", "singular_points": [[0.1, 0.2]], "alphas": [0.25]}')
    assert WeightSpec.from_json(w.to_dict()) .to_dict() == w.to_dict()


@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.1, 3))
def test_scalar_multiple_does_not_change_log_derivatives(x, y, c):
    a = WeightSpec("exp(x*y) * (1 + x**2)")
    b = WeightSpec(f"{c!r} * exp(x*y) * (1 + x**2)")
    P = np.array([[x, y]])
    ga, la = a.dlog_hhat(P)
    gb, lb = b.dlog_hhat(P)
    assert np.allclose(ga, gb) and np.allclose(la, lb)
