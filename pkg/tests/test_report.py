import csv

import numpy as np
import pytest

from optreelab.data import make_triples
from optreelab.nets import AlignmentModel, NetConfig
from optreelab.report import pooled_features, similarity_matrices, similarity_report, summarize
from optreelab.tree import GenConfig


def test_single_sample(tiny_net, small_triples, teacher, tmp_path):
    summ = similarity_report(small_triples[:1], AlignmentModel(tiny_net), teacher, tmp_path)
    assert set(summ) == {"image_ots", "image_formula", "ots_formula"}
    for name in summ:
        m = np.loadtxt(tmp_path / f"{name}.csv", delimiter=",", ndmin=2)
        assert m.shape == (1, 1)
    # within one modality a sample's similarity to itself is 1
    feats = pooled_features(AlignmentModel(tiny_net), small_triples[:1], teacher)
    for f in feats.values():
        assert (f @ f.T).item() == pytest.approx(1.0, abs=1e-6)
    rows = list(csv.reader(open(tmp_path / "summary.csv")))
    assert rows[0] == ["matrix", "n", "mean_diag", "mean_offdiag", "gap", "top1"] and len(rows) == 4


def test_summary_arithmetic():
    sim = np.array([[1.0, 0.2, 0.1], [0.4, 0.5, 0.9], [0.0, 0.3, 0.8]])
    s = summarize("x", sim)
    assert s.mean_diag == pytest.approx(2.3 / 3)
    assert s.mean_offdiag == pytest.approx(1.9 / 6)
    assert s.top1 == pytest.approx(2 / 3)
    assert s.gap == pytest.approx(2.3 / 3 - 1.9 / 6)


def test_untrained_gap_is_small(grid, teacher):
    triples = make_triples(GenConfig(node_range=(3, 7)), grid, 50, 1, seed=21)
    mats = similarity_matrices(AlignmentModel(NetConfig()), triples, teacher)
    for name, m in mats.items():
        s = summarize(name, m)
        assert abs(s.gap) < 0.1, (name, s)
        assert not np.allclose(m, m.T)
