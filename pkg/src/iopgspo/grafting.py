"""Grafted trajectories and the verified truncation ladder K -> 2K -> full."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from . import policy_model as pm
from .alignment import Alignment, align, apply_edits
from .task_env import Problem, verify


@dataclass(frozen=True)
class GraftResult:
    tokens: tuple[int, ...]
    correct: int
    K: float
    suffix_start: int
    n_generated: int


@dataclass(frozen=True)
class GraftItem:
    problem: Problem
    failed: tuple[int, ...]
    repair: tuple[int, ...]
    alignment: Alignment


def graft_prefix(item: GraftItem, K: float) -> list[int]:
    n = item.alignment.distance if math.isinf(K) else int(K)
    return apply_edits(item.failed, item.repair, item.alignment, n_ops=n)


def graft_batch(model, items: Sequence[GraftItem], K: float, greedy: bool = True, seed: int = 0,
                temperature: float = 1.0, max_len: int = 24) -> list[GraftResult]:
    """Apply the first ``K`` edits of each path and let the policy finish the sequence."""
    results: list[GraftResult | None] = [None] * len(items)
    todo, prefixes = [], []
    for k, it in enumerate(items):
        if it.alignment.distance == 0:
            results[k] = GraftResult(tuple(it.failed), verify(it.problem, it.failed), K, len(it.failed), 0)
            continue
        todo.append(k)
        prefixes.append(graft_prefix(it, K)[:max_len])
    if todo:
        outs = pm.sample(model, [items[k].problem.prompt for k in todo], temperature, max_len,
                         seed=seed, greedy=greedy, prefixes=prefixes)
        for k, pre, (toks, _) in zip(todo, prefixes, outs):
            prob = items[k].problem
            results[k] = GraftResult(tuple(toks), verify(prob, toks), K, len(pre), len(toks) - len(pre))
    return results  # type: ignore[return-value]


def graft(model, problem: Problem, y: Sequence[int], repair: Sequence[int], alignment: Alignment | None,
          K: float, greedy: bool = True, seed: int = 0, **kw) -> GraftResult:
    alignment = alignment or align(y, repair)
    return graft_batch(model, [GraftItem(problem, tuple(y), tuple(repair), alignment)], K, greedy, seed, **kw)[0]


def adaptive_k_batch(model, items: Sequence[GraftItem], K: float, greedy: bool = True, seed: int = 0,
                     fixed: bool = False, temperature: float = 1.0,
                     max_len: int = 24) -> tuple[list[float], int, list[str]]:
    """Pick ``K*`` per item from ``{K, 2K, d}``.

    Returns the chosen levels, the number of tokens the grafts generated, and
    which ladder branch fired per item (``"K"``, ``"2K"`` or ``"full"``).
    """
    n = len(items)
    if fixed:
        return [K] * n, 0, ["fixed"] * n
    if math.isinf(K):
        return [float(it.alignment.distance) for it in items], 0, ["full"] * n
    k_star: list[float | None] = [None] * n
    branch = [""] * n
    tokens = 0
    first = graft_batch(model, items, K, greedy, seed, temperature, max_len)
    tokens += sum(r.n_generated for r in first)
    retry = []
    for i, r in enumerate(first):
        if r.correct:
            k_star[i], branch[i] = K, "K"
        elif items[i].alignment.distance <= K and greedy:
            # all edits were already applied; a 2K graft would be identical
            k_star[i], branch[i] = float(items[i].alignment.distance), "full"
        else:
            retry.append(i)
    if retry:
        second = graft_batch(model, [items[i] for i in retry], 2 * K, greedy, seed + 1, temperature, max_len)
        tokens += sum(r.n_generated for r in second)
        for i, r in zip(retry, second):
            if r.correct:
                k_star[i], branch[i] = 2 * K, "2K"
            else:
                k_star[i], branch[i] = float(items[i].alignment.distance), "full"
    return k_star, tokens, branch  # type: ignore[return-value]


def adaptive_K(model, problem: Problem, y: Sequence[int], repair: Sequence[int], K: float,
               alignment: Alignment | None = None, **kw) -> float:
    alignment = alignment or align(y, repair)
    ks, _, _ = adaptive_k_batch(model, [GraftItem(problem, tuple(y), tuple(repair), alignment)], K, **kw)
    return ks[0]
