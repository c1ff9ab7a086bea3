"""Repair candidates, audited minimum-edit scoring, best-repair selection and pair groups."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import policy_model as pm
from .alignment import Alignment, TruncatedGate, align, normalized_edit_distance, truncate
from .objective import PolicyMember, normalized_advantages, pair_advantage
from .task_env import ContextOverflowError, Problem, Trajectory, build_repair_context, rule_audit, verify

Auditor = Callable[..., int]


class InvariantViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class RepairCandidate:
    tokens: tuple[int, ...]
    logprobs: tuple[float, ...]
    audit: int
    correct: int
    edit_distance: float
    score: float
    index: int = 0
    malformed: bool = False


@dataclass
class RepairGroup:
    problem: Problem
    failed: Trajectory
    anchor: Trajectory
    context: tuple[int, ...]
    candidates: list[RepairCandidate]

    @property
    def size(self) -> int:
        return len(self.candidates)


@dataclass
class PairGroup:
    """``{y, y~}`` with bilateral truncated gates; optional extra full-gate members."""
    problem: Problem
    failed: Trajectory
    repair: RepairCandidate
    alignment: Alignment
    gate: TruncatedGate
    k_star: float
    advantages: tuple[float, ...]
    extras: tuple[Trajectory, ...] = ()
    full_gates: bool = False
    hacked: bool = False
    # log-probs of the repair under the old snapshot in *policy* mode
    policy_logprobs: tuple[float, ...] = ()

    def members(self) -> list[PolicyMember]:
        x = self.problem.prompt
        if self.full_gates:
            g_y = np.ones(len(self.failed.tokens), dtype=np.int64)
            g_r = np.ones(len(self.repair.tokens), dtype=np.int64)
        else:
            g_y, g_r = self.gate.mask, self.gate.mask_repair
        out = [
            PolicyMember(x, self.failed.tokens, np.asarray(self.failed.logprobs), g_y, self.advantages[0]),
            PolicyMember(x, self.repair.tokens, np.asarray(self.policy_logprobs), g_r, self.advantages[1]),
        ]
        for t, adv in zip(self.extras, self.advantages[2:]):
            out.append(PolicyMember(x, t.tokens, np.asarray(t.logprobs), np.ones(len(t.tokens), dtype=np.int64), adv))
        return out

    @property
    def active_ratio(self) -> float:
        """Active gates over total tokens on both sides."""
        g = self.members()[:2]
        return float(sum(m.gates.sum() for m in g)) / max(1, sum(len(m.tokens) for m in g))


def score_candidate(h: int, r_task: int, edit_dist: float, lambda_edit: float = 0.3,
                    edit_floor: float = 0.05) -> float:
    """``h * (r_task - lambda_edit * penalty)``; edits below the floor are free."""
    if lambda_edit < 0:
        raise ValueError("lambda_edit must be >= 0")
    penalty = edit_dist if edit_dist >= edit_floor else 0.0
    return float(h * (r_task - lambda_edit * penalty))


def annotate(problem: Problem, failed: Trajectory, anchor: Trajectory, tokens: Sequence[int],
             logprobs: Sequence[float], index: int, auditor: Auditor = rule_audit,
             lambda_edit: float = 0.3, edit_floor: float = 0.05) -> RepairCandidate:
    h = int(auditor(problem, failed.tokens, tokens, anchor.tokens))
    r = verify(problem, tokens)
    dist = normalized_edit_distance(failed.tokens, tokens)
    return RepairCandidate(tuple(tokens), tuple(logprobs), h, r, dist,
                           score_candidate(h, r, dist, lambda_edit, edit_floor), index)


def generate_repair_groups(model, items: Sequence[tuple[Problem, Trajectory, Trajectory]], G_rep: int = 4,
                           seed: int = 0, temperature: float = 1.0, max_len: int = 24,
                           auditor: Auditor = rule_audit, lambda_edit: float = 0.3,
                           edit_floor: float = 0.05) -> list[RepairGroup]:
    """Sample ``G_rep`` repairs for every ``(x, y, a)`` in one batched pass."""
    contexts, owners, groups = [], [], []
    limit = model.arch.context_len
    for k, (prob, y, a) in enumerate(items):
        try:
            ctx = build_repair_context(prob.prompt, y.tokens, a.tokens, max_context=limit - max_len)
        except ContextOverflowError:
            ctx = None
        groups.append(RepairGroup(prob, y, a, ctx or (), []))
        if ctx is None:
            continue
        for j in range(G_rep):
            contexts.append(ctx)
            owners.append((k, j))
    samples = pm.sample(model, contexts, temperature, max_len, seed=seed) if contexts else []
    for (k, j), (toks, lps) in zip(owners, samples):
        prob, y, a = items[k]
        groups[k].candidates.append(annotate(prob, y, a, toks, lps, j, auditor, lambda_edit, edit_floor))
    for grp in groups:
        if not grp.context:
            grp.candidates = [RepairCandidate((), (), 0, 0, 1.0, 0.0, j, malformed=True) for j in range(G_rep)]
    return groups


def generate_candidates(model, problem: Problem, failed: Trajectory, anchor: Trajectory, G_rep: int = 4,
                        seed: int = 0, **kw) -> RepairGroup:
    return generate_repair_groups(model, [(problem, failed, anchor)], G_rep, seed, **kw)[0]


def select_best(group: RepairGroup) -> RepairCandidate | None:
    """Highest score; ties prefer correct, then smaller edit distance, then lower index.

    Returns None (deferral) when the winner is not correct.
    """
    if not group.candidates:
        raise ValueError("empty repair group")
    best = max(group.candidates, key=lambda c: (c.score, c.correct, -c.edit_distance, -c.index))
    return best if best.correct == 1 else None


def build_pair_group(problem: Problem, failed: Trajectory, best: RepairCandidate, k_star: float,
                     alignment: Alignment | None = None, extras: Sequence[Trajectory] = (),
                     full_gates: bool = False) -> PairGroup:
    if best.correct != 1:
        raise InvariantViolation("pair groups need a correct repair")
    if failed.reward != 0:
        raise InvariantViolation("pair groups need a failed trajectory")
    alignment = alignment or align(failed.tokens, best.tokens)
    if alignment.distance == 0:
        raise InvariantViolation("repair identical to the failed trajectory but rewards differ")
    gate = truncate(alignment, k_star)
    if extras:
        adv = tuple(float(v) for v in normalized_advantages([0.0, 1.0] + [t.reward for t in extras]))
    else:
        adv = pair_advantage(0.0, 1.0)
    return PairGroup(problem, failed, best, alignment, gate, k_star, adv, tuple(extras), full_gates,
                     hacked=best.audit == 0 or rule_audit(problem, None, best.tokens) == 0)
