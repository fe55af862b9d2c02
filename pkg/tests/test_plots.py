import xml.etree.ElementTree as ET

import numpy as np
import pytest

from surgseg.dataio import LabelSequence
from surgseg.plots import plot_confusion, plot_filter_sweep, plot_segmentation, task_colors
from surgseg.segeval import confusion
from surgseg.synthgen import TASK_NAMES

SVG = "{http://www.w3.org/2000/svg}"


def parse(path):
    root = ET.parse(path).getroot()
    assert root.tag == SVG + "svg"
    return root


def bar_paths(root):
    """Path elements drawn inside the bar collections (one per run)."""
    out = []
    for g in root.iter(SVG + "g"):
        if g.get("id", "").startswith("PolyCollection") or g.get("id", "").startswith("BrokenBarHCollection"):
            out.extend(g.iter(SVG + "path"))
    return out


def test_constant_sequences_draw_three_solid_bars(tmp_path):
    seq = LabelSequence(np.full(500, 4))
    root = parse(plot_segmentation(seq, seq, seq, tmp_path / "seg.svg", TASK_NAMES))
    assert len(bar_paths(root)) == 3


def test_runs_become_bars(tmp_path):
    G = LabelSequence(np.repeat([1, 2, 3], 100))
    raw = LabelSequence(np.repeat([1, 2, 3, 2, 3], [100, 100, 50, 5, 45]))
    root = parse(plot_segmentation(G, raw, G, tmp_path / "seg.svg", title="P000"))
    assert len(bar_paths(root)) == 3 + 5 + 3
    text = ET.tostring(root, encoding="unicode")
    assert "ground truth" in text and "filtered" in text and "P000" in text
    assert all(f"T{k}" in text for k in range(1, 13))


def test_length_mismatch(tmp_path):
    with pytest.raises(ValueError):
        plot_segmentation(np.ones(10), np.ones(9), np.ones(10), tmp_path / "x.svg")


def test_diagonal_confusion_annotates_only_diagonal(tmp_path):
    G = np.repeat(np.arange(1, 13), 7)
    root = parse(plot_confusion(confusion(G, G), tmp_path / "cm.svg", "diag"))
    cells = [g.get("id") for g in root.iter(SVG + "g") if g.get("id", "").startswith("cell-")]
    assert sorted(cells) == sorted(f"cell-{k}-{k}" for k in range(1, 13))


def test_off_diagonal_counts_are_printed(tmp_path):
    root = parse(plot_confusion(confusion([9] * 30 + [10] * 5, [10] * 30 + [10] * 5), tmp_path / "cm.svg"))
    texts = [t.text for t in root.iter(SVG + "text") if t.text]
    assert "30" in texts and "5" in texts


def test_plots_are_reproducible(tmp_path):
    G = LabelSequence(np.repeat([5, 6], 50))
    a = plot_segmentation(G, G, G, tmp_path / "a.svg")
    b = plot_segmentation(G, G, G, tmp_path / "b.svg")
    assert a.read_bytes() == b.read_bytes()


def test_filter_sweep_svg(tmp_path):
    parse(plot_filter_sweep([(3, 0.6), (31, 0.7), (301, 0.8)], tmp_path / "s.svg", raw_value=0.55))


def test_task_colours_distinct():
    colors = task_colors()
    assert len({colors[k] for k in range(13)}) == 13
