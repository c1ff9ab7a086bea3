"""Losses: cold-start SFT, gated pair objective, repair objective, joint objective, plain GSPO.

All objectives are *maximized* except :func:`sft_loss`.  Old-policy
log-probabilities always come from the values captured at sampling time.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import policy_model as pm
from .task_env import ContextOverflowError, build_repair_context

log = logging.getLogger(__name__)

ADV_EPS = 1e-8


@dataclass(frozen=True)
class ClipConfig:
    eps: float = 0.2
    beta_kl: float = 0.002
    lambda_rep: float = 0.2
    kl_double: bool = False  # charge the KL inside both the policy and the repair objective

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("clip radius must be positive")


@dataclass
class PolicyMember:
    """One trajectory inside a policy-update group."""
    context: Sequence[int]
    tokens: Sequence[int]
    old_logprobs: np.ndarray
    gates: np.ndarray
    advantage: float


@dataclass
class ObjectiveReport:
    value: torch.Tensor
    policy: float = 0.0
    repair: float = 0.0
    policy_clip: float = 0.0
    repair_clip: float = 0.0
    kl: float = 0.0
    active_tokens: list[int] = field(default_factory=list)
    empty: bool = False

    @property
    def total(self) -> float:
        return float(self.value.detach())

    def as_dict(self) -> dict:
        return {"total": self.total, "policy": self.policy, "repair": self.repair,
                "policy_clip": self.policy_clip, "repair_clip": self.repair_clip, "kl": self.kl}


def normalized_advantages(rewards: Sequence[float]) -> np.ndarray:
    """(r - mean) / (population std + 1e-8); constant groups give zeros."""
    r = np.asarray(rewards, dtype=np.float64)
    std = r.std()
    if std == 0:
        return np.zeros_like(r)
    return (r - r.mean()) / (std + ADV_EPS)


def pair_advantage(r_fail: float, r_repair: float) -> tuple[float, float]:
    a = normalized_advantages([r_fail, r_repair])
    return float(a[0]), float(a[1])


def clipped_term(ratio: torch.Tensor, adv, eps: float) -> torch.Tensor:
    return torch.minimum(ratio * adv, torch.clamp(ratio, 1 - eps, 1 + eps) * adv)


def _logprobs(model, contexts, tokens):
    lp, valid = pm.batch_logprobs(model, contexts, tokens)
    return lp, valid


def _f(t: torch.Tensor) -> float:
    return float(t.detach())


def _old_matrix(old: Sequence[np.ndarray], shape) -> torch.Tensor:
    out = torch.zeros(shape, dtype=pm.DTYPE)
    for b, v in enumerate(old):
        if len(v):
            out[b, :len(v)] = torch.as_tensor(np.asarray(v, dtype=np.float64))
    return out


def _gate_matrix(gates: Sequence[np.ndarray], shape) -> torch.Tensor:
    out = torch.zeros(shape, dtype=pm.DTYPE)
    for b, g in enumerate(gates):
        if len(g):
            out[b, :len(g)] = torch.as_tensor(np.asarray(g, dtype=np.float64))
    return out


# -- stage 1 -----------------------------------------------------------------

def sft_loss(model, batch, max_context: int | None = None) -> torch.Tensor:
    """Mean per-token NLL of ``y_star`` given the repair context ``(x, y, a)``."""
    if not batch:
        raise ValueError("empty SFT batch")
    ctxs, tgts = [], []
    limit = max_context or model.arch.context_len
    for ex in batch:
        try:
            ctx = build_repair_context(ex.x, ex.y, ex.a, max_context=limit - len(ex.y_star) + 1)
        except ContextOverflowError:
            log.warning("skipping cold-start example that overflows the context")
            continue
        ctxs.append(ctx)
        tgts.append(ex.y_star)
    if not ctxs:
        raise ContextOverflowError("every example in the batch overflows the context")
    lp, valid = _logprobs(model, ctxs, tgts)
    return -(lp.sum() / valid.sum())


# -- gated policy objective --------------------------------------------------

def gated_seq_ratio(model, member: PolicyMember) -> torch.Tensor | None:
    """exp of the gate-weighted mean log-ratio; None when no gate is active."""
    g = np.asarray(member.gates, dtype=np.float64)
    if g.sum() == 0:
        return None
    lp, _ = _logprobs(model, [member.context], [member.tokens])
    n = len(member.tokens)
    logr = lp[0, :n] - torch.as_tensor(np.asarray(member.old_logprobs, dtype=np.float64))
    gt = torch.as_tensor(g)
    return torch.exp((gt * logr).sum() / gt.sum())


def gated_token_ratios(lp: torch.Tensor, old: torch.Tensor, gates: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Token ratios ``s[b, t] = sg[w_b] * exp(lp - sg[lp])`` and the gated sequence ratios ``w``.

    ``gates`` must already be zero on padding.  Every row needs an active gate.
    """
    n_active = gates.sum(1)
    if torch.any(n_active == 0):
        raise ValueError("every member needs at least one active gate")
    w = torch.exp((gates * (lp - old)).sum(1) / n_active)
    # value equals w; the derivative flows only through log pi at position t
    return w.detach().unsqueeze(1) * torch.exp(lp - lp.detach()), w


def _member_losses(model, members: Sequence[PolicyMember], eps: float):
    """Per-member gated clipped losses (tensor of length len(members)) and active counts."""
    lp, valid = _logprobs(model, [m.context for m in members], [m.tokens for m in members])
    old = _old_matrix([m.old_logprobs for m in members], lp.shape)
    g = _gate_matrix([m.gates for m in members], lp.shape) * valid
    n_active = g.sum(1)
    s, _ = gated_token_ratios(lp, old, g)
    adv = torch.as_tensor([m.advantage for m in members], dtype=pm.DTYPE).unsqueeze(1)
    terms = clipped_term(s, adv, eps)
    if not torch.all(torch.isfinite(terms)):
        bad = [i for i in range(len(members)) if not torch.all(torch.isfinite(terms[i]))]
        raise pm.NonFiniteError(f"non-finite token ratio in members {bad}")
    losses = (g * terms).sum(1) / n_active
    return losses, [int(v) for v in n_active.tolist()]


def gated_clip_loss(model, group, clip: ClipConfig = ClipConfig()) -> torch.Tensor:
    """Mean over group members of the gate-averaged clipped token terms."""
    members = group.members()
    losses, _ = _member_losses(model, members, clip.eps)
    return losses.mean()


def _policy_clip(model, groups, eps: float):
    members, owner = [], []
    for gi, grp in enumerate(groups):
        for m in grp.members():
            members.append(m)
            owner.append(gi)
    losses, active = _member_losses(model, members, eps)
    owner_t = torch.as_tensor(owner)
    per_group = torch.zeros(len(groups), dtype=pm.DTYPE).index_add(0, owner_t, losses)
    counts = torch.zeros(len(groups), dtype=pm.DTYPE).index_add(
        0, owner_t, torch.ones(len(members), dtype=pm.DTYPE))
    return (per_group / counts).mean(), members, active


def _kl(model, ref, contexts, tokens) -> torch.Tensor:
    if ref is None or not contexts:
        return torch.zeros((), dtype=pm.DTYPE)
    return pm.token_kl(model, ref, contexts, tokens)


def policy_objective(model, ref, groups, clip: ClipConfig = ClipConfig()) -> ObjectiveReport:
    """Gated pair objective minus the KL penalty over the batch's positions."""
    if not groups:
        return ObjectiveReport(torch.zeros((), dtype=pm.DTYPE), empty=True)
    clip_val, members, active = _policy_clip(model, groups, clip.eps)
    kl = _kl(model, ref, [m.context for m in members], [m.tokens for m in members])
    value = clip_val - clip.beta_kl * kl
    return ObjectiveReport(value, policy=_f(value), policy_clip=_f(clip_val), kl=_f(kl), active_tokens=active)


# -- repair objective --------------------------------------------------------

def _repair_clip(model, groups, eps: float):
    ctxs, toks, olds, advs, owner = [], [], [], [], []
    for gi, grp in enumerate(groups):
        adv = normalized_advantages([c.score for c in grp.candidates])
        for c, a in zip(grp.candidates, adv):
            if not c.tokens:
                continue
            ctxs.append(grp.context)
            toks.append(c.tokens)
            olds.append(np.asarray(c.logprobs))
            advs.append(a)
            owner.append(gi)
    sizes = torch.as_tensor([len(g.candidates) for g in groups], dtype=pm.DTYPE)
    if not ctxs:
        return torch.zeros((), dtype=pm.DTYPE), ctxs, toks
    lp, valid = _logprobs(model, ctxs, toks)
    old = _old_matrix(olds, lp.shape)
    lengths = valid.sum(1)
    u = torch.exp(((lp - old) * valid).sum(1) / lengths)
    terms = clipped_term(u, torch.as_tensor(advs, dtype=pm.DTYPE), eps)
    if not torch.all(torch.isfinite(terms)):
        raise pm.NonFiniteError("non-finite repair ratio")
    per_group = torch.zeros(len(groups), dtype=pm.DTYPE).index_add(0, torch.as_tensor(owner), terms)
    return (per_group / sizes).mean(), ctxs, toks


def repair_objective(model, ref, groups, clip: ClipConfig = ClipConfig()) -> ObjectiveReport:
    """Group-normalized clipped sequence objective over repair candidates, minus KL."""
    if not groups:
        return ObjectiveReport(torch.zeros((), dtype=pm.DTYPE), empty=True)
    clip_val, ctxs, toks = _repair_clip(model, groups, clip.eps)
    kl = _kl(model, ref, ctxs, toks)
    value = clip_val - clip.beta_kl * kl
    return ObjectiveReport(value, repair=_f(value), repair_clip=_f(clip_val), kl=_f(kl))


# -- joint -------------------------------------------------------------------

def joint_objective(model, ref, pol_groups, rep_groups, clip: ClipConfig = ClipConfig()) -> ObjectiveReport:
    """``policy + lambda_rep * repair``.

    By default the KL penalty is charged once, on the policy side; with
    ``kl_double`` the repair objective carries its own KL term as well.
    """
    if not pol_groups and not rep_groups:
        return ObjectiveReport(torch.zeros((), dtype=pm.DTYPE), empty=True)
    zero = torch.zeros((), dtype=pm.DTYPE)
    pol_clip, active, kl_pol = zero, [], zero
    if pol_groups:
        pol_clip, members, active = _policy_clip(model, pol_groups, clip.eps)
        kl_pol = _kl(model, ref, [m.context for m in members], [m.tokens for m in members])
    rep_clip, kl_rep = zero, zero
    if rep_groups:
        rep_clip, ctxs, toks = _repair_clip(model, rep_groups, clip.eps)
        if clip.kl_double:
            kl_rep = _kl(model, ref, ctxs, toks)
    policy = pol_clip - clip.beta_kl * kl_pol
    repair = rep_clip - clip.beta_kl * kl_rep
    value = policy + clip.lambda_rep * repair
    return ObjectiveReport(value, policy=_f(policy), repair=_f(repair), policy_clip=_f(pol_clip),
                           repair_clip=_f(rep_clip), kl=_f(kl_pol + kl_rep), active_tokens=active)


# -- reference GSPO ----------------------------------------------------------

@dataclass
class SampleGroup:
    """A prompt's full group of sampled trajectories for the GSPO baseline."""
    context: Sequence[int]
    tokens: list[Sequence[int]]
    old_logprobs: list[np.ndarray]
    rewards: list[float]


def gspo_objective(model, ref, groups: Sequence[SampleGroup], clip: ClipConfig = ClipConfig()) -> ObjectiveReport:
    """Sequence-level clipped objective with length-normalized ratios and group advantages.

    Groups whose rewards are all equal carry no signal and are skipped.
    """
    ctxs, toks, olds, advs, owner = [], [], [], [], []
    kept = 0
    for grp in groups:
        if len(set(grp.rewards)) < 2:
            continue
        adv = normalized_advantages(grp.rewards)
        for t, o, a in zip(grp.tokens, grp.old_logprobs, adv):
            ctxs.append(grp.context)
            toks.append(t)
            olds.append(np.asarray(o))
            advs.append(a)
            owner.append(kept)
        kept += 1
    if kept == 0:
        return ObjectiveReport(torch.zeros((), dtype=pm.DTYPE), empty=True)
    lp, valid = _logprobs(model, ctxs, toks)
    old = _old_matrix(olds, lp.shape)
    w = torch.exp(((lp - old) * valid).sum(1) / valid.sum(1))
    terms = clipped_term(w, torch.as_tensor(advs, dtype=pm.DTYPE), clip.eps)
    owner_t = torch.as_tensor(owner)
    sums = torch.zeros(kept, dtype=pm.DTYPE).index_add(0, owner_t, terms)
    counts = torch.zeros(kept, dtype=pm.DTYPE).index_add(0, owner_t, torch.ones(len(owner), dtype=pm.DTYPE))
    clip_val = (sums / counts).mean()
    kl = _kl(model, ref, ctxs, toks)
    value = clip_val - clip.beta_kl * kl
    return ObjectiveReport(value, policy=_f(value), policy_clip=_f(clip_val), kl=_f(kl))
