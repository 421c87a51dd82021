import numpy as np
import pytest

from carsa.connectivity import FncMatrix
from carsa.report import save_fnc_heatmap, save_summary_figure
from carsa.training import TrialReport


def fake_report(fold, seed):
    losses = list(np.linspace(0.7, 0.3, 5))
    return TrialReport(fold, seed, 5, losses, 0.9, 0.95,
                       f"trials/fold{fold}_seed{seed}/checkpoint.npz",
                       f"trials/fold{fold}_seed{seed}/attention.csv")


def test_heatmap_from_fnc_matrix(tmp_path):
    values = np.random.default_rng(0).random((6, 6))
    values /= values.sum(axis=1, keepdims=True)
    out = tmp_path / "a.png"
    save_fnc_heatmap(FncMatrix(values, "attention", "group"), out,
                     domain_edges=[3])
    assert out.stat().st_size > 0


def test_heatmap_from_plain_array_with_title(tmp_path):
    out = tmp_path / "b.png"
    save_fnc_heatmap(np.eye(4), out, title="identity")
    assert out.stat().st_size > 0


def test_summary_figure(tmp_path):
    reports = [fake_report(f, s) for f in range(2) for s in (0, 1)]
    out = tmp_path / "summary.png"
    save_summary_figure(reports, out)
    assert out.stat().st_size > 0


def test_summary_figure_rejects_empty(tmp_path):
    with pytest.raises(ValueError, match="no trial reports"):
        save_summary_figure([], tmp_path / "x.png")
