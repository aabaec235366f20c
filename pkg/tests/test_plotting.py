import matplotlib
import numpy as np

from oadp.plotting import plot_crop_grid, plot_pl_histogram, plot_pr_curves

PNG = b"\x89PNG\r\n\x1a\n"


def rows():
    return [
        {"strategy": s, "masked": m, "macro_precision": 0.5 + 0.1 * m, "weighted_precision": 0.4, "n": 10}
        for s in ("mbs", "fixed", "adaptive") for m in (True, False)
    ]


class TestFigures:
    def test_crop_grid(self, tmp_path):
        path = plot_crop_grid(rows(), tmp_path / "a" / "grid.png", title="t")
        assert path.read_bytes()[:8] == PNG

    def test_pr_curves(self, tmp_path):
        curves = {"a": (np.array([0.5, 1.0]), np.array([1.0, 0.5])), "b": (np.array([]), np.array([]))}
        assert plot_pr_curves(curves, tmp_path / "pr.png").read_bytes()[:8] == PNG

    def test_histogram_empty(self, tmp_path):
        assert plot_pl_histogram({}, tmp_path / "h.png").read_bytes()[:8] == PNG

    def test_deterministic(self, tmp_path):
        a = plot_crop_grid(rows(), tmp_path / "a.png").read_bytes()
        b = plot_crop_grid(rows(), tmp_path / "b.png").read_bytes()
        assert a == b

    def test_global_style_untouched(self, tmp_path):
        before = dict(matplotlib.rcParams)
        plot_pl_histogram({"a": 2}, tmp_path / "h.png")
        assert dict(matplotlib.rcParams) == before
