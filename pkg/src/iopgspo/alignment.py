"""Token-level Levenshtein alignment with bilateral masks and K-truncation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

SUB, DEL, INS, MATCH = "substitute", "delete", "insert", "match"


class EditOp(NamedTuple):
    kind: str
    i: int | None  # error-side index, None for insert
    j: int | None  # repair-side index, None for delete


@dataclass(frozen=True)
class Alignment:
    ops: tuple[EditOp, ...]
    path: tuple[EditOp, ...]  # ops interleaved with matches, in order
    mask: np.ndarray          # error side, length |y|
    mask_repair: np.ndarray   # repair side, length |y~|
    distance: int
    normalized: float

    @property
    def n_substitutions(self) -> int:
        return sum(op.kind == SUB for op in self.ops)


@dataclass(frozen=True)
class TruncatedGate:
    mask: np.ndarray
    mask_repair: np.ndarray
    selected: tuple[EditOp, ...]
    t_max: int  # last edited error-side index in the selection, -1 if none

    @property
    def n_active(self) -> int:
        return int(self.mask.sum() + self.mask_repair.sum())


def _dp_table(y: Sequence[int], r: Sequence[int]) -> np.ndarray:
    n, m = len(y), len(r)
    D = np.zeros((n + 1, m + 1), dtype=np.int64)
    D[:, 0] = np.arange(n + 1)
    D[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        yi = y[i - 1]
        for j in range(1, m + 1):
            D[i, j] = min(D[i - 1, j - 1] + (yi != r[j - 1]), D[i - 1, j] + 1, D[i, j - 1] + 1)
    return D


def align(y: Sequence[int], repair: Sequence[int]) -> Alignment:
    """Canonical minimum edit path from ``y`` to ``repair``.

    Traceback runs from the end and prefers the diagonal, then deletion, then
    insertion, which places ambiguous edits as far left as possible.
    """
    y, r = list(y), list(repair)
    D = _dp_table(y, r)
    i, j = len(y), len(r)
    rev: list[EditOp] = []
    while i > 0 or j > 0:
        if i > 0 and j > 0 and D[i, j] == D[i - 1, j - 1] + (y[i - 1] != r[j - 1]):
            rev.append(EditOp(MATCH if y[i - 1] == r[j - 1] else SUB, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and D[i, j] == D[i - 1, j] + 1:
            rev.append(EditOp(DEL, i - 1, None))
            i -= 1
        else:
            rev.append(EditOp(INS, None, j - 1))
            j -= 1
    path = tuple(reversed(rev))
    ops = tuple(op for op in path if op.kind != MATCH)
    mask = np.zeros(len(y), dtype=np.int64)
    mask_r = np.zeros(len(r), dtype=np.int64)
    for op in ops:
        if op.i is not None:
            mask[op.i] = 1
        if op.j is not None:
            mask_r[op.j] = 1
    d = len(ops)
    assert d == D[-1, -1]
    return Alignment(ops, path, mask, mask_r, d, d / max(len(y), len(r), 1))


def normalized_edit_distance(y: Sequence[int], repair: Sequence[int]) -> float:
    n, m = len(y), len(repair)
    return float(_dp_table(list(y), list(repair))[n, m]) / max(n, m, 1)


def truncate(alignment: Alignment, K: float) -> TruncatedGate:
    """Keep only the first ``K`` edit operations along the path (``K=inf`` keeps all)."""
    if K < 1:
        raise ValueError("K must be >= 1")
    n_keep = alignment.distance if math.isinf(K) else min(int(K), alignment.distance)
    selected = alignment.ops[:n_keep]
    mask = np.zeros_like(alignment.mask)
    mask_r = np.zeros_like(alignment.mask_repair)
    t_max = -1
    for op in selected:
        if op.i is not None:
            mask[op.i] = 1
            t_max = max(t_max, op.i)
        if op.j is not None:
            mask_r[op.j] = 1
    return TruncatedGate(mask, mask_r, selected, t_max)


def apply_edits(y: Sequence[int], repair: Sequence[int], alignment: Alignment,
                n_ops: int | None = None) -> list[int]:
    """Walk the path applying the first ``n_ops`` edits; stop right after the last one.

    With ``n_ops=None`` the whole path is walked, reproducing ``repair``.
    """
    out: list[int] = []
    budget = None if n_ops is None else min(n_ops, alignment.distance)
    done = 0
    for op in alignment.path:
        if budget is not None and done >= budget:
            break
        if op.kind == MATCH:
            out.append(y[op.i])
        elif op.kind == SUB or op.kind == INS:
            out.append(repair[op.j])
            done += 1
        else:
            done += 1
    return out


def render_diff(y: Sequence[int], repair: Sequence[int], alignment: Alignment,
                names: dict[int, str] | None = None) -> str:
    """Two-row text diff; the marker row uses ``S``/``D``/``I`` for edits."""
    names = names or {}

    def fmt(t):
        return names.get(t, str(t))

    top, bot, mark = [], [], []
    for op in alignment.path:
        a = fmt(y[op.i]) if op.i is not None else "-"
        b = fmt(repair[op.j]) if op.j is not None else "-"
        w = max(len(a), len(b))
        top.append(a.rjust(w))
        bot.append(b.rjust(w))
        mark.append({MATCH: " ", SUB: "S", DEL: "D", INS: "I"}[op.kind].rjust(w))
    return "\n".join(["y : " + " ".join(top), "y~: " + " ".join(bot), "    " + " ".join(mark)])
