"""Two-stage training: cold-start repair SFT, then joint policy/repair RL under a token budget.

Every random draw is keyed on ``(seed, step, stream)`` so a run can be
resumed from any checkpoint without storing generator state.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from . import policy_model as pm
from .alignment import align
from .grafting import GraftItem, adaptive_k_batch
from .objective import ClipConfig, SampleGroup, gspo_objective, joint_objective, sft_loss
from .repair import PairGroup, RepairGroup, build_pair_group, generate_repair_groups, select_best
from .task_env import (Problem, Trajectory, always_pass_audit, corrupt, gen_coldstart, render_solution, rule_audit,
                       sample_problems, solution_tokens, verify)

log = logging.getLogger(__name__)

ABLATIONS = ("no_gating", "no_truncation", "fixed_truncation", "no_min_edit", "include_correct", "audit_off")


@dataclass
class TrainConfig:
    method: str = "iop"
    seed: int = 0
    # group sizes and repair scoring
    group_size: int = 16
    G_rep: int = 4
    K: float = 4.0
    lambda_edit: float = 0.3
    edit_floor: float = 0.05
    lambda_rep: float = 0.2
    beta_kl: float = 0.002
    tau_r: float = 0.5
    eps: float = 0.2
    kl_double: bool = False
    # sampling
    prompt_batch: int = 16
    min_chain: int = 4
    max_chain: int = 8
    max_len: int = 24
    temperature: float = 1.0
    graft_sample: bool = False
    # optimization
    lr: float = 3e-4
    warmup_steps: int = 20
    weight_decay: float = 0.01
    inner_epochs: int = 1
    token_budget: int = 1_100_000
    max_steps: int = 100_000
    ref_refresh: int = 0
    # ablation toggles
    no_gating: bool = False
    no_truncation: bool = False
    fixed_truncation: bool = False
    no_min_edit: bool = False
    include_correct: bool = False
    audit_off: bool = False
    # deferral
    retry_interval: int = 50
    retry_limit: int = 3
    # evaluation and checkpoints
    eval_every: int = 20
    eval_problems: int = 200
    eval_samples: int = 8
    final_eval_samples: int = 32
    repair_probe_n: int = 100
    eval_seed: int = 12345
    checkpoint_every: int = 0
    max_nonfinite_steps: int = 5
    # model and warm start
    width: int = 96
    n_layers: int = 2
    n_heads: int = 4
    context_len: int = 96
    arch_kind: str = "gru"
    base_seed: int = 0
    pretrain_steps: int = 3500
    pretrain_batch: int = 64
    pretrain_lr: float = 3e-3
    coldstart_n: int = 8000
    coldstart_seed: int = 1
    hack_fraction: float = 0.0
    sft_steps: int = 1200
    sft_batch: int = 32
    sft_lr: float = 3e-3
    sft_replay: float = 1.0

    def __post_init__(self):
        self.K = float(self.K)
        if self.method not in ("iop", "gspo"):
            raise ValueError(f"method must be 'iop' or 'gspo', got {self.method!r}")
        for name in ("group_size", "G_rep", "prompt_batch", "max_len", "token_budget", "inner_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not 1 <= self.min_chain <= self.max_chain:
            raise ValueError("need 1 <= min_chain <= max_chain")

    @property
    def arch(self) -> pm.Architecture:
        return pm.Architecture(context_len=self.context_len, width=self.width, n_layers=self.n_layers,
                               n_heads=self.n_heads, kind=self.arch_kind)

    @property
    def clip(self) -> ClipConfig:
        return ClipConfig(self.eps, self.beta_kl, self.lambda_rep, self.kl_double)

    @property
    def effective_K(self) -> float:
        return math.inf if self.no_truncation else self.K

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["K"] = "inf" if math.isinf(self.K) else self.K
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise KeyError(f"unknown config key(s): {', '.join(unknown)}")
        d = dict(d)
        if isinstance(d.get("K"), str):
            d["K"] = float(d["K"])
        return cls(**d)

    _BASE_KEYS = ("width", "n_layers", "n_heads", "context_len", "arch_kind", "base_seed", "pretrain_steps",
                  "pretrain_batch", "pretrain_lr", "min_chain", "max_chain", "warmup_steps")
    _SFT_KEYS = ("coldstart_n", "coldstart_seed", "hack_fraction", "sft_steps", "sft_batch", "sft_lr", "sft_replay")

    def base_key(self) -> str:
        return config_hash({k: getattr(self, k) for k in self._BASE_KEYS})

    def warmstart_key(self) -> str:
        return config_hash({k: getattr(self, k) for k in self._BASE_KEYS + self._SFT_KEYS})


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) % (2**32) for k in keys]).generate_state(1, np.uint64)[0] >> 1)


def rng_for(*keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*keys))


# -- metrics and deferral -----------------------------------------------------

@dataclass
class MetricsRecord:
    step: int
    tokens: int
    policy_tokens: int = 0
    repair_tokens: int = 0
    graft_tokens: int = 0
    n_prompts: int = 0
    n_skipped: int = 0
    n_deferred: int = 0
    n_pairs: int = 0
    n_repair_groups: int = 0
    repair_success: float | None = None
    train_repair_success: float | None = None
    active_token_ratio: float | None = None
    hacked_pairs: int = 0
    train_reward: float = 0.0
    objective: dict = field(default_factory=dict)
    k_star: dict = field(default_factory=dict)
    accuracy: float | None = None
    skipped_update: bool = False
    nonfinite: bool = False

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


@dataclass
class DeferredPrompt:
    problem: Problem
    reason: str
    retries: int
    due_step: int


class DeferralQueue:
    """Deferred prompts keyed by prompt tokens; retried every ``interval`` steps up to ``limit`` times."""

    def __init__(self, interval: int = 50, limit: int = 3):
        self.interval, self.limit = interval, limit
        self.entries: dict[tuple[int, ...], DeferredPrompt] = {}
        self.dropped = 0

    def __len__(self) -> int:
        return len(self.entries)

    def defer(self, problem: Problem, reason: str, step: int) -> None:
        key = problem.prompt
        ent = self.entries.get(key)
        if ent is None:
            self.entries[key] = DeferredPrompt(problem, reason, 0, step + self.interval)
        elif ent.retries >= self.limit:
            del self.entries[key]
            self.dropped += 1
        else:
            ent.reason, ent.due_step = reason, step + self.interval

    def due(self, step: int, n: int) -> list[Problem]:
        out = []
        for ent in self.entries.values():
            if len(out) >= n:
                break
            if ent.due_step <= step:
                ent.retries += 1
                ent.due_step = step + self.interval
                out.append(ent.problem)
        return out

    def resolve(self, problem: Problem) -> None:
        self.entries.pop(problem.prompt, None)

    def state(self) -> list[dict]:
        return [{"prompt": list(k), "reason": e.reason, "retries": e.retries, "due_step": e.due_step}
                for k, e in self.entries.items()]

    def load(self, state: list[dict], dropped: int = 0) -> None:
        from .task_env import parse_prompt
        self.entries = {tuple(s["prompt"]): DeferredPrompt(parse_prompt(s["prompt"]), s["reason"], s["retries"],
                                                           s["due_step"]) for s in state}
        self.dropped = dropped


# -- stage 0/1: warm start -----------------------------------------------------

def _policy_nll(model, problems) -> torch.Tensor:
    lp, valid = pm.batch_logprobs(model, [p.prompt for p in problems], [solution_tokens(p) for p in problems])
    return -(lp.sum() / valid.sum())


def pretrain_base(cfg: TrainConfig) -> pm.TinyLM:
    """Supervised warm start of policy mode on reference solutions (stands in for a base model)."""
    model = pm.init(cfg.base_seed, cfg.arch)
    state = pm.AdamState.zeros(model.n_params)
    adam = pm.AdamConfig(lr=cfg.pretrain_lr, warmup_steps=cfg.warmup_steps, weight_decay=0.0)
    for step in range(cfg.pretrain_steps):
        probs = sample_problems(rng_for(cfg.base_seed, step, 7), cfg.pretrain_batch, cfg.min_chain, cfg.max_chain)
        pm.apply_update(model, pm.gradient(model, lambda m: _policy_nll(m, probs)), state, adam)
    return model


def stage1_sft(cfg: TrainConfig, data, model: pm.TinyLM, seed: int = 0) -> tuple[pm.TinyLM, list[float]]:
    """Fine-tune repair mode on the cold-start set; returns the model and the per-step repair losses.

    ``cfg.sft_replay`` weights a policy-mode replay term on fresh problems, which
    keeps the small shared model from forgetting how to solve.
    """
    if not data:
        raise ValueError("no cold-start data")
    state = pm.AdamState.zeros(model.n_params)
    adam = pm.AdamConfig(lr=cfg.sft_lr, warmup_steps=cfg.warmup_steps, weight_decay=0.0)
    losses = []
    for step in range(cfg.sft_steps):
        idx = rng_for(seed, step, 11).choice(len(data), size=min(cfg.sft_batch, len(data)), replace=False)
        batch = [data[i] for i in idx]
        replay = sample_problems(rng_for(seed, step, 12), cfg.sft_batch, cfg.min_chain, cfg.max_chain)
        loss = None

        def obj(m):
            nonlocal loss
            loss = sft_loss(m, batch)
            return loss + cfg.sft_replay * _policy_nll(m, replay) if cfg.sft_replay else loss

        g = pm.gradient(model, obj)
        if not math.isfinite(float(loss.detach())):
            raise pm.NonFiniteError(f"SFT loss diverged at step {step}")
        losses.append(float(loss.detach()))
        pm.apply_update(model, g, state, adam)
    return model, losses


def warm_start(cfg: TrainConfig, cache_dir: str | Path | None = None) -> pm.TinyLM:
    """Base pretraining followed by cold-start SFT, memoized on disk by config hash."""
    cache_dir = Path(cache_dir or os.environ.get("IOPGSPO_CACHE", Path.home() / ".cache" / "iopgspo"))
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"stage1-{cfg.warmstart_key()}.ckpt"
    if path.exists():
        model, _, _ = pm.load_checkpoint(path)
        return model
    base_path = cache_dir / f"base-{cfg.base_key()}.ckpt"
    if base_path.exists():
        model, _, _ = pm.load_checkpoint(base_path)
    else:
        model = pretrain_base(cfg)
        pm.save_checkpoint(base_path, model)
    data = gen_coldstart(cfg.coldstart_seed, cfg.coldstart_n, cfg.min_chain, cfg.max_chain, cfg.hack_fraction)
    model, losses = stage1_sft(cfg, data, model, seed=cfg.coldstart_seed)
    pm.save_checkpoint(path, model, extra={"sft_first": losses[0] if losses else None,
                                           "sft_last": losses[-1] if losses else None})
    return model


# -- evaluation -----------------------------------------------------------------

def eval_problems(n: int, seed: int, min_chain: int = 4, max_chain: int = 8) -> list[Problem]:
    return sample_problems(rng_for(seed, 0, 99), n, min_chain, max_chain)


def evaluate(model, n_problems: int = 200, samples_per_problem: int = 32, seed: int = 12345,
             temperature: float = 1.0, max_len: int = 24, min_chain: int = 4, max_chain: int = 8,
             per_problem: bool = False):
    """Mean verifier reward over ``n_problems x samples_per_problem`` sampled solutions (avg@k)."""
    if n_problems < 1 or samples_per_problem < 1:
        raise ValueError("need at least one problem and one sample")
    probs = eval_problems(n_problems, seed, min_chain, max_chain)
    ctx = [p.prompt for p in probs for _ in range(samples_per_problem)]
    outs = pm.sample(model, ctx, temperature, max_len, seed=derive_seed(seed, 1))
    rewards = np.array([verify(p, o[0]) for p, o in zip((p for p in probs for _ in range(samples_per_problem)), outs)],
                       dtype=np.float64).reshape(n_problems, samples_per_problem)
    acc = float(rewards.mean())
    return (acc, rewards.mean(1)) if per_problem else acc


def repair_probe(model, n: int = 100, G_rep: int = 4, seed: int = 12345, temperature: float = 1.0,
                 max_len: int = 24, min_chain: int = 4, max_chain: int = 8, lambda_edit: float = 0.3,
                 edit_floor: float = 0.05) -> float:
    """Repair success on held-out corruptions of reference solutions (anchor = the reference).

    Success means the best of ``G_rep`` candidates is correct and passes the rule audit.
    """
    probs = sample_problems(rng_for(seed, 0, 98), n, min_chain, max_chain)
    items = []
    for i, p in enumerate(probs):
        ref = render_solution(p)
        items.append((p, corrupt(ref, derive_seed(seed, i, 97)), ref))
    groups = generate_repair_groups(model, items, G_rep, derive_seed(seed, 96), temperature, max_len,
                                    rule_audit, lambda_edit, edit_floor)
    ok = [(b := select_best(g)) is not None and b.audit == 1 for g in groups]
    return float(np.mean(ok))


def bootstrap_ci(per_problem: np.ndarray, n_boot: int = 2000, alpha: float = 0.05, seed: int = 0):
    rng = np.random.default_rng(seed)
    idx = rng.integers(len(per_problem), size=(n_boot, len(per_problem)))
    means = per_problem[idx].mean(1)
    return float(np.quantile(means, alpha / 2)), float(np.quantile(means, 1 - alpha / 2))


# -- stage 2 --------------------------------------------------------------------

@dataclass
class Rollouts:
    problems: list[Problem]
    groups: list[list[Trajectory]]
    n_tokens: int


def collect_rollouts(model, prompts: list[Problem], cfg: TrainConfig, seed: int) -> Rollouts:
    ctx = [p.prompt for p in prompts for _ in range(cfg.group_size)]
    outs = pm.sample(model, ctx, cfg.temperature, cfg.max_len, seed=seed)
    groups, n_tok = [], 0
    for i, p in enumerate(prompts):
        grp = []
        for toks, lps in outs[i * cfg.group_size:(i + 1) * cfg.group_size]:
            grp.append(Trajectory(p, toks, lps, verify(p, toks)))
            n_tok += len(toks)
        groups.append(grp)
    return Rollouts(prompts, groups, n_tok)


@dataclass
class Partition:
    correct: list[Trajectory]
    errors: list[Trajectory]
    anchor: Trajectory | None
    signal: str  # "ok", "skip" or "defer"


def partition_and_anchor(group: list[Trajectory], tau_r: float, seed: int) -> Partition:
    cor = [t for t in group if t.reward >= tau_r]
    err = [t for t in group if t.reward < tau_r]
    if not err:
        return Partition(cor, err, None, "skip")
    if not cor:
        return Partition(cor, err, None, "defer")
    a = cor[int(np.random.default_rng(seed).integers(len(cor)))]
    return Partition(cor, err, a, "ok")


@dataclass
class DualBatch:
    pol: list[PairGroup]
    rep: list[RepairGroup]
    deferred: list[tuple[Problem, str]]
    repair_tokens: int = 0
    graft_tokens: int = 0
    n_success: int = 0
    n_attempts: int = 0
    excluded_pairs: int = 0
    k_branches: Counter = field(default_factory=Counter)


def build_dual_batches(model, parts: list[tuple[Problem, Partition]], cfg: TrainConfig, seed: int,
                       auditor=None) -> DualBatch:
    """Repair every failed trajectory, fill B_rep, and pair the verified best repairs into B_pol."""
    auditor = auditor or (always_pass_audit if cfg.audit_off else rule_audit)
    lam_edit = 0.0 if cfg.no_min_edit else cfg.lambda_edit
    items, owners = [], []
    for k, (prob, part) in enumerate(parts):
        for y in part.errors:
            items.append((prob, y, part.anchor))
            owners.append(k)
    rep_groups = generate_repair_groups(model, items, cfg.G_rep, seed, cfg.temperature, cfg.max_len,
                                        auditor, lam_edit, cfg.edit_floor)
    out = DualBatch([], rep_groups, [])
    out.repair_tokens = sum(len(c.tokens) for g in rep_groups for c in g.candidates)
    chosen = []
    failed_prompts = set()
    for k, grp in zip(owners, rep_groups):
        best = select_best(grp)
        out.n_attempts += 1
        # an audit-rejected winner is never used for policy updates
        if best is None or best.audit == 0:
            failed_prompts.add(k)
            continue
        out.n_success += 1
        chosen.append((k, grp, best))
    for k in sorted(failed_prompts):
        out.deferred.append((parts[k][0], "no-correct-repair"))
    if not chosen:
        return out
    aligns = [align(grp.failed.tokens, best.tokens) for _, grp, best in chosen]
    gitems = [GraftItem(grp.problem, grp.failed.tokens, best.tokens, al) for (_, grp, best), al in zip(chosen, aligns)]
    k_stars, g_tok, branches = adaptive_k_batch(
        model, gitems, cfg.effective_K, greedy=not cfg.graft_sample, seed=derive_seed(seed, 3),
        fixed=cfg.fixed_truncation and not cfg.no_truncation, temperature=cfg.temperature, max_len=cfg.max_len)
    out.graft_tokens = g_tok
    out.k_branches.update(branches)
    pairs = []
    for (k, grp, best), al, ks in zip(chosen, aligns, k_stars):
        extras = parts[k][1].correct if cfg.include_correct else ()
        pg = build_pair_group(grp.problem, grp.failed, best, ks, al, extras, full_gates=cfg.no_gating)
        if not cfg.no_gating and (pg.gate.mask.sum() == 0 or pg.gate.mask_repair.sum() == 0):
            out.excluded_pairs += 1
            continue
        pairs.append(pg)
    if pairs:
        with torch.no_grad():
            lp, _ = pm.batch_logprobs(model, [p.problem.prompt for p in pairs], [p.repair.tokens for p in pairs])
        for i, p in enumerate(pairs):
            p.policy_logprobs = tuple(lp[i, :len(p.repair.tokens)].tolist())
    out.pol = pairs
    return out


class Trainer:
    """Stateful driver for one Stage 2 run (IOP or the GSPO baseline)."""

    def __init__(self, cfg: TrainConfig, model: pm.TinyLM, ref: pm.TinyLM | None = None,
                 out_dir: str | Path | None = None):
        self.cfg = cfg
        self.model = model
        self.ref = ref if ref is not None else pm.snapshot(model)
        self.adam = pm.AdamConfig(lr=cfg.lr, warmup_steps=cfg.warmup_steps, weight_decay=cfg.weight_decay)
        self.state = pm.AdamState.zeros(model.n_params)
        self.queue = DeferralQueue(cfg.retry_interval, cfg.retry_limit)
        self.step = 0
        self.tokens = 0
        self.out_dir = Path(out_dir) if out_dir else None
        self.records: list[MetricsRecord] = []
        self.nonfinite_streak = 0

    # ---- one step -----------------------------------------------------------
    def next_prompts(self) -> list[Problem]:
        cfg = self.cfg
        retries = self.queue.due(self.step, cfg.prompt_batch // 2) if cfg.method == "iop" else []
        fresh = sample_problems(rng_for(cfg.seed, self.step, 1), cfg.prompt_batch - len(retries),
                                cfg.min_chain, cfg.max_chain)
        return retries + fresh

    def train_step(self) -> MetricsRecord:
        cfg = self.cfg
        step_seed = derive_seed(cfg.seed, self.step, 2)
        prompts = self.next_prompts()
        roll = collect_rollouts(self.model, prompts, cfg, step_seed)
        rec = MetricsRecord(step=self.step, tokens=0, policy_tokens=roll.n_tokens, n_prompts=len(prompts))
        rec.train_reward = float(np.mean([t.reward for g in roll.groups for t in g]))
        if cfg.method == "gspo":
            groups = [SampleGroup(p.prompt, [t.tokens for t in g], [np.asarray(t.logprobs) for t in g],
                                  [float(t.reward) for t in g]) for p, g in zip(roll.problems, roll.groups)]
            rec.n_skipped = sum(len({t.reward for t in g}) < 2 for g in roll.groups)

            def objective(m):
                return gspo_objective(m, self.ref, groups, cfg.clip)
        else:
            parts = []
            for i, (p, g) in enumerate(zip(roll.problems, roll.groups)):
                part = partition_and_anchor(g, cfg.tau_r, derive_seed(step_seed, i, 5))
                if part.signal == "skip":
                    rec.n_skipped += 1
                    self.queue.resolve(p)
                elif part.signal == "defer":
                    self.queue.defer(p, "no-correct-sample", self.step)
                    rec.n_deferred += 1
                else:
                    parts.append((p, part))
            dual = build_dual_batches(self.model, parts, cfg, derive_seed(step_seed, 4))
            deferred_now = {p.prompt for p, _ in dual.deferred}
            for p, reason in dual.deferred:
                self.queue.defer(p, reason, self.step)
                rec.n_deferred += 1
            for p, _ in parts:
                if p.prompt not in deferred_now:
                    self.queue.resolve(p)
            rec.repair_tokens, rec.graft_tokens = dual.repair_tokens, dual.graft_tokens
            rec.n_pairs, rec.n_repair_groups = len(dual.pol), len(dual.rep)
            rec.train_repair_success = dual.n_success / dual.n_attempts if dual.n_attempts else None
            rec.active_token_ratio = float(np.mean([p.active_ratio for p in dual.pol])) if dual.pol else None
            rec.hacked_pairs = sum(p.hacked for p in dual.pol)
            rec.k_star = dict(sorted(dual.k_branches.items()))

            def objective(m):
                return joint_objective(m, self.ref, dual.pol, dual.rep, cfg.clip)

        self.tokens += rec.policy_tokens + rec.repair_tokens + rec.graft_tokens
        rec.tokens = self.tokens
        report = None
        for _ in range(cfg.inner_epochs):
            holder = {}

            def neg(m):
                holder["r"] = objective(m)
                return -holder["r"].value

            try:
                grad = pm.gradient(self.model, neg)
            except pm.NonFiniteError as exc:
                log.warning("step %d skipped: %s", self.step, exc)
                rec.skipped_update = rec.nonfinite = True
                break
            report = holder["r"]
            if report.empty:
                rec.skipped_update = True
                break
            if not pm.apply_update(self.model, grad, self.state, self.adam):
                log.warning("step %d skipped: non-finite update", self.step)
                rec.skipped_update = rec.nonfinite = True
                break
        if report is not None:
            rec.objective = report.as_dict()
        self.step += 1
        if cfg.ref_refresh and self.step % cfg.ref_refresh == 0:
            self.ref = pm.snapshot(self.model)
        return rec

    # ---- loop ----------------------------------------------------------------
    def probe_repair(self) -> float:
        cfg = self.cfg
        return repair_probe(self.model, cfg.repair_probe_n, cfg.G_rep, cfg.eval_seed, cfg.temperature, cfg.max_len,
                            cfg.min_chain, cfg.max_chain, cfg.lambda_edit, cfg.edit_floor)

    def evaluate(self, samples: int | None = None) -> float:
        cfg = self.cfg
        return evaluate(self.model, cfg.eval_problems, samples or cfg.eval_samples, cfg.eval_seed,
                        cfg.temperature, cfg.max_len, cfg.min_chain, cfg.max_chain)

    def run(self, on_record=None) -> list[MetricsRecord]:
        cfg = self.cfg
        metrics_fh = None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            metrics_fh = open(self.out_dir / "metrics.jsonl", "a")
        try:
            if self.step == 0 and not self.records:
                rec0 = MetricsRecord(step=-1, tokens=0)
                self._measure(rec0)
                self._emit(rec0, metrics_fh, on_record)
            while self.tokens < cfg.token_budget and self.step < cfg.max_steps:
                rec = self.train_step()
                self.nonfinite_streak = self.nonfinite_streak + 1 if rec.nonfinite else 0
                if cfg.eval_every and self.step % cfg.eval_every == 0:
                    self._measure(rec)
                self._emit(rec, metrics_fh, on_record)
                if self.nonfinite_streak >= cfg.max_nonfinite_steps:
                    raise pm.NonFiniteError(f"{self.nonfinite_streak} consecutive non-finite steps at step {self.step}")
                if cfg.checkpoint_every and self.out_dir and self.step % cfg.checkpoint_every == 0:
                    self.save(self.out_dir / f"step{self.step:05d}.ckpt")
        finally:
            if metrics_fh:
                metrics_fh.close()
        if self.out_dir:
            self.write_summary(self.out_dir / "summary.csv")
        return self.records

    def _measure(self, rec: MetricsRecord) -> None:
        rec.accuracy = self.evaluate()
        if self.cfg.method == "iop" and self.cfg.repair_probe_n:
            rec.repair_success = self.probe_repair()

    def _emit(self, rec, fh, cb):
        self.records.append(rec)
        if fh:
            fh.write(rec.to_json() + "\n")
            fh.flush()
        if cb:
            cb(rec)

    def write_summary(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "accuracy", "repair_success", "active_token_ratio", "tokens"])
            for r in self.records:
                w.writerow([r.step, _fmt(r.accuracy), _fmt(r.repair_success), _fmt(r.active_token_ratio), r.tokens])

    # ---- checkpoints ----------------------------------------------------------
    def save(self, path: str | Path) -> None:
        extra = {"trainer": {"step": self.step, "tokens": self.tokens, "queue": self.queue.state(),
                             "dropped": self.queue.dropped, "n_records": len(self.records),
                             "config": self.cfg.to_dict()}}
        pm.save_checkpoint(path, self.model, self.state, step=self.step, seed=self.cfg.seed, extra=extra)
        pm.save_checkpoint(Path(path).with_suffix(".ref"), self.ref)

    @classmethod
    def resume(cls, path: str | Path, out_dir: str | Path | None = None,
               cfg: TrainConfig | None = None) -> "Trainer":
        model, state, header = pm.load_checkpoint(path)
        ref, _, _ = pm.load_checkpoint(Path(path).with_suffix(".ref"))
        tstate = header["extra"]["trainer"]
        cfg = cfg or TrainConfig.from_dict(tstate["config"])
        tr = cls(cfg, model, pm.snapshot(ref), out_dir)
        tr.state = state or pm.AdamState.zeros(model.n_params)
        tr.step, tr.tokens = tstate["step"], tstate["tokens"]
        tr.queue.load(tstate["queue"], tstate["dropped"])
        if tr.out_dir and (tr.out_dir / "metrics.jsonl").exists():
            lines = (tr.out_dir / "metrics.jsonl").read_text().splitlines()[:tstate["n_records"]]
            (tr.out_dir / "metrics.jsonl").write_text("".join(l + "\n" for l in lines))
            tr.records = [_record_from_json(l) for l in lines]
        return tr


def _record_from_json(line: str) -> MetricsRecord:
    return MetricsRecord(**json.loads(line))


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def run_training(cfg: TrainConfig, out_dir: str | Path | None = None, cache_dir: str | Path | None = None,
                 on_record=None) -> Trainer:
    """Warm start (cached), then Stage 2 until the token budget is spent."""
    torch.set_num_threads(1)
    model = warm_start(cfg, cache_dir)
    tr = Trainer(cfg, model, pm.snapshot(model), out_dir)
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        metrics = Path(out_dir) / "metrics.jsonl"
        if metrics.exists():
            metrics.unlink()
    tr.run(on_record)
    return tr


def final_accuracy(tr: Trainer) -> float:
    return tr.evaluate(tr.cfg.final_eval_samples)


def config_from_any(obj: Any) -> TrainConfig:
    if isinstance(obj, TrainConfig):
        return obj
    return TrainConfig.from_dict(dict(obj))


def summarize(tr: Trainer, final_acc: float) -> dict:
    """Compact run record: final avg@k, accuracy/probe curves and per-step dynamics."""
    recs = tr.records
    return {
        "config": tr.cfg.to_dict(),
        "config_hash": config_hash(tr.cfg.to_dict()),
        "final_accuracy": final_acc,
        "steps": tr.step,
        "tokens": tr.tokens,
        "curve": [[r.tokens, r.accuracy] for r in recs if r.accuracy is not None],
        "repair_success": [[r.step, r.repair_success] for r in recs if r.repair_success is not None],
        "active_token_ratio": [[r.step, r.active_token_ratio] for r in recs if r.active_token_ratio is not None],
        "train_repair_success": [[r.step, r.train_repair_success] for r in recs
                                 if r.train_repair_success is not None],
        "hacked_pairs": sum(r.hacked_pairs for r in recs),
        "pairs": sum(r.n_pairs for r in recs),
        "k_star": dict(sum((Counter(r.k_star) for r in recs), Counter())),
    }


def run_cached(cfg: TrainConfig, results_dir: str | Path, cache_dir: str | Path | None = None) -> dict:
    """Run (or reload) one configuration; results are keyed by the config hash."""
    results_dir = Path(results_dir)
    results_dir.mkdir(parents=True, exist_ok=True)
    path = results_dir / f"{cfg.method}-{config_hash(cfg.to_dict())}.json"
    if path.exists():
        return json.loads(path.read_text())
    t0 = time.process_time()
    tr = run_training(cfg, cache_dir=cache_dir)
    out = summarize(tr, final_accuracy(tr))
    out["cpu_seconds"] = time.process_time() - t0
    path.write_text(json.dumps(out, sort_keys=True) + "\n")
    return out
