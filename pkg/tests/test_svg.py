import xml.etree.ElementTree as ET

import numpy as np

from meanfield.svg import _ticks, line_plot, write_plot


def test_ticks_cover_range():
    t = _ticks(0.0, 1.0)
    assert t[0] >= 0 and t[-1] <= 1.0 + 1e-12 and 2 <= len(t) <= 6
    assert _ticks(3.0, 3.0) == [3.0]


def test_plot_is_valid_svg(tmp_path):
    x = np.linspace(0, 1, 20)
    p = write_plot(tmp_path / "a.svg", [(x, x**2, "a"), (x, np.r_[np.nan, x[1:]], "b")], "x", "y", "t")
    root = ET.fromstring(p.read_text())
    lines = root.findall("{http://www.w3.org/2000/svg}polyline")
    assert len(lines) == 2
    assert len(lines[1].get("points").split()) == 19


def test_plot_is_deterministic_and_handles_empty():
    x = np.arange(5.0)
    assert line_plot([(x, x, "s")], "x", "y") == line_plot([(x, x, "s")], "x", "y")
    assert line_plot([], "x", "y").startswith("<svg")
