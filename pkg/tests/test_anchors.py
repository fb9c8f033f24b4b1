import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from regionedit.anchors import AnchorConfig, select_anchors
from regionedit.core import AttentionMap
from tests.oracles import topk_oracle


def test_unique_max():
    a = np.zeros((5, 6))
    a[2, 3] = 1.0
    assert [(x.row, x.col) for x in select_anchors(AttentionMap(a), AnchorConfig(1))] == [(2, 3)]


def test_default_k():
    assert AnchorConfig().k == 8
    assert len(select_anchors(AttentionMap(np.random.default_rng(0).random((14, 14))))) == 8


def test_rejects_k_larger_than_grid():
    with pytest.raises(ValueError):
        select_anchors(AttentionMap(np.ones((2, 2))), AnchorConfig(5))
    with pytest.raises(ValueError):
        AnchorConfig(0)


def test_ties_break_row_major():
    got = select_anchors(AttentionMap(np.ones((3, 3))), AnchorConfig(4))
    assert [(x.row, x.col) for x in got] == [(0, 0), (0, 1), (0, 2), (1, 0)]


def test_matches_full_sort_oracle_1000_maps():
    rng = np.random.default_rng(0)
    for i in range(1000):
        h, w = (int(v) for v in rng.integers(1, 9, 2))
        # coarse values force plenty of ties
        attn = rng.integers(0, 4, (h, w)).astype(float) if i % 2 else rng.random((h, w))
        k = int(rng.integers(1, h * w + 1))
        got = select_anchors(AttentionMap(attn), AnchorConfig(k))
        assert [(x.row, x.col) for x in got] == topk_oracle(attn, k)


@given(arrays(np.float64, (4, 5), elements=st.floats(0, 1)), st.integers(1, 20))
def test_selection_invariants(attn, k):
    got = select_anchors(AttentionMap(attn), AnchorConfig(k))
    cells = {(x.row, x.col) for x in got}
    assert len(cells) == k
    scores = [x.score for x in got]
    assert scores == sorted(scores, reverse=True)
    rest = [attn[r, c] for r in range(4) for c in range(5) if (r, c) not in cells]
    if rest:
        assert min(scores) >= max(rest)
