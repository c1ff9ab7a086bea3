from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import levenshtein, replay_path

from iopgspo.alignment import (DEL, INS, MATCH, SUB, align, apply_edits, normalized_edit_distance, render_diff,
                               truncate)

seqs = st.lists(st.integers(0, 7), max_size=12)


@given(seqs, seqs)
@settings(max_examples=300)
def test_distance_matches_oracle_and_path_rebuilds(y, r):
    al = align(y, r)
    assert al.distance == levenshtein(y, r)
    assert replay_path(y, r, al.path) == list(r)
    assert apply_edits(y, r, al) == list(r)
    assert int(al.mask.sum()) == sum(op.i is not None for op in al.ops)
    assert int(al.mask_repair.sum()) == sum(op.j is not None for op in al.ops)
    assert al.normalized == pytest.approx(al.distance / max(len(y), len(r), 1))
    assert normalized_edit_distance(y, r) == pytest.approx(al.normalized)


def test_identical_and_empty():
    al = align([1, 2, 3], [1, 2, 3])
    assert al.distance == 0 and al.ops == () and al.mask.sum() == 0
    al = align([], [])
    assert al.distance == 0 and al.normalized == 0.0
    al = align([], [4, 5])
    assert [op.kind for op in al.ops] == [INS, INS]
    al = align([4, 5], [])
    assert [op.kind for op in al.ops] == [DEL, DEL]


def test_substitution_masks():
    al = align([1, 2, 3, 4], [1, 9, 3, 8])
    assert [op.kind for op in al.ops] == [SUB, SUB]
    assert al.mask.tolist() == [0, 1, 0, 1]
    assert al.mask_repair.tolist() == [0, 1, 0, 1]


def test_ambiguous_edits_go_left():
    # deleting either 5 gives the same distance; the leftmost copy is chosen
    al = align([1, 5, 5, 2], [1, 5, 2])
    assert [op for op in al.ops] == [(DEL, 1, None)]
    al = align([1, 2], [1, 7, 7, 2])
    assert [op.j for op in al.ops] == [1, 2]


def test_truncation_keeps_first_k():
    y = [0, 1, 2, 3, 4, 5]
    r = [9, 1, 9, 3, 9, 5]
    al = align(y, r)
    g1 = truncate(al, 1)
    assert g1.mask.tolist() == [1, 0, 0, 0, 0, 0] and g1.t_max == 0
    g2 = truncate(al, 2)
    assert g2.mask.tolist() == [1, 0, 1, 0, 0, 0] and g2.t_max == 2
    gi = truncate(al, math.inf)
    assert gi.mask.tolist() == al.mask.tolist() and gi.n_active == 6
    assert truncate(al, 50).mask.tolist() == al.mask.tolist()
    with pytest.raises(ValueError):
        truncate(al, 0)


@given(seqs, seqs, st.integers(1, 14))
@settings(max_examples=200)
def test_truncated_masks_are_subsets(y, r, K):
    al = align(y, r)
    g = truncate(al, K)
    assert np.all(g.mask <= al.mask) and np.all(g.mask_repair <= al.mask_repair)
    assert len(g.selected) == min(K, al.distance)
    assert truncate(al, K + 1).n_active >= g.n_active


def test_apply_edits_stops_after_kth_op():
    y = [0, 1, 2, 3]
    r = [7, 1, 8, 3]
    al = align(y, r)
    assert apply_edits(y, r, al, n_ops=1) == [7]
    assert apply_edits(y, r, al, n_ops=2) == [7, 1, 8]
    assert apply_edits(y, r, al, n_ops=10) == [7, 1, 8]


def test_render_diff_marks():
    al = align([1, 2, 3], [1, 4, 3, 5])
    text = render_diff([1, 2, 3], [1, 4, 3, 5], al)
    assert text.splitlines()[2].split() == ["S", "I"]
    assert MATCH in {op.kind for op in al.path}
