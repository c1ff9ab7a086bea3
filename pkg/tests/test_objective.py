from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest
import torch

from builders import pair_group, repair_group
from iopgspo import objective as obj
from iopgspo import policy_model as pm
from iopgspo.task_env import VOCAB_SIZE, gen_coldstart


@pytest.fixture
def model():
    return pm.init(0, pm.Architecture(width=8, n_layers=1, kind="gru"))


class _Group:
    def __init__(self, members):
        self._m = members

    def members(self):
        return self._m


def test_normalized_advantages():
    np.testing.assert_allclose(obj.normalized_advantages([0, 1]), [-1, 1], atol=1e-7)
    assert np.all(obj.normalized_advantages([1, 1, 1]) == 0)
    a = obj.normalized_advantages([0.0, 0.5, 1.0, 1.0])
    assert abs(a.mean()) < 1e-12 and a.std() == pytest.approx(1.0, abs=1e-7)
    assert obj.pair_advantage(0.0, 1.0)[1] == pytest.approx(1.0, abs=1e-7)


def test_clipped_term_cases():
    r = torch.tensor([0.5, 1.0, 1.5], dtype=torch.float64)
    np.testing.assert_allclose(obj.clipped_term(r, 1.0, 0.2).numpy(), [0.5, 1.0, 1.2])
    np.testing.assert_allclose(obj.clipped_term(r, -1.0, 0.2).numpy(), [-0.8, -1.0, -1.5])


def test_gated_sequence_ratio_worked_example(model, problem):
    from iopgspo.task_env import render_solution
    toks = render_solution(problem).tokens
    lp = pm.batch_logprobs(model, [problem.prompt], [toks])[0][0, :len(toks)].detach().numpy()
    delta = np.linspace(-0.3, 0.3, len(toks))
    gates = np.zeros(len(toks), dtype=int)
    gates[[1, 4]] = 1
    m = obj.PolicyMember(problem.prompt, toks, lp - delta, gates, 1.0)
    assert float(obj.gated_seq_ratio(model, m).detach()) == pytest.approx(math.exp((delta[1] + delta[4]) / 2), rel=1e-12)
    m.gates = np.zeros(len(toks), dtype=int)
    assert obj.gated_seq_ratio(model, m) is None


def test_token_ratio_value_equals_sequence_ratio():
    lp = torch.tensor([[-1.0, -2.0, -0.5, 0.0]], dtype=torch.float64)
    old = torch.tensor([[-1.2, -1.5, -0.5, 0.0]], dtype=torch.float64)
    g = torch.tensor([[1.0, 1.0, 0.0, 0.0]], dtype=torch.float64)
    s, w = obj.gated_token_ratios(lp, old, g)
    assert float(w) == pytest.approx(math.exp((0.2 - 0.5) / 2))
    assert torch.allclose(s, w.expand_as(s))
    with pytest.raises(ValueError):
        obj.gated_token_ratios(lp, old, torch.zeros_like(g))


def test_sft_loss_under_uniform_model_is_log_vocab(model):
    pm.set_flat(model, np.zeros(model.n_params))
    batch = gen_coldstart(0, 8)
    assert float(obj.sft_loss(model, batch).detach()) == pytest.approx(math.log(VOCAB_SIZE), rel=1e-12)
    with pytest.raises(ValueError):
        obj.sft_loss(model, [])


def test_full_gates_reduce_to_sequence_objective(model):
    """With every gate on, the gated objective equals the length-normalized sequence objective."""
    grp = pair_group(model, 3, extras=2)
    grp.full_gates = True
    ref = pm.init(1, model.arch)
    rep = obj.policy_objective(model, ref, [grp])
    members = grp.members()
    sg = obj.SampleGroup(members[0].context, [m.tokens for m in members],
                         [m.old_logprobs for m in members], [0.0, 1.0] + [t.reward for t in grp.extras])
    base = obj.gspo_objective(model, ref, [sg])
    assert rep.total == pytest.approx(base.total, abs=1e-12)


def test_policy_objective_matches_manual_sum(model):
    groups = [pair_group(model, s) for s in (1, 2)]
    rep = obj.policy_objective(model, None, groups, obj.ClipConfig(beta_kl=0.0))
    manual = []
    for g in groups:
        vals = []
        for m in g.members():
            w = float(obj.gated_seq_ratio(model, m).detach())
            vals.append(min(w * m.advantage, min(max(w, 0.8), 1.2) * m.advantage))
        manual.append(np.mean(vals))
    assert rep.total == pytest.approx(np.mean(manual), abs=1e-12)
    assert rep.active_tokens == [int(m.gates.sum()) for g in groups for m in g.members()]


def test_joint_is_policy_plus_weighted_repair(model):
    ref = pm.init(1, model.arch)
    pol = [pair_group(model, 4)]
    rep = [repair_group(model, 5)]
    clip = obj.ClipConfig(lambda_rep=0.37, kl_double=True)
    joint = obj.joint_objective(model, ref, pol, rep, clip)
    p = obj.policy_objective(model, ref, pol, clip)
    r = obj.repair_objective(model, ref, rep, clip)
    assert joint.total == pytest.approx(p.total + 0.37 * r.total, abs=1e-12)
    single = obj.joint_objective(model, ref, pol, rep, obj.ClipConfig(lambda_rep=0.37))
    assert single.total == pytest.approx(p.total + 0.37 * r.repair_clip, abs=1e-12)


def test_empty_policy_batch_leaves_repair_term(model):
    rep = [repair_group(model, 6)]
    clip = obj.ClipConfig(lambda_rep=0.5, beta_kl=0.0)
    joint = obj.joint_objective(model, None, [], rep, clip)
    assert joint.total == pytest.approx(0.5 * obj.repair_objective(model, None, rep, clip).total, abs=1e-12)
    assert obj.joint_objective(model, None, [], []).empty
    assert obj.policy_objective(model, None, []).empty


def test_gspo_skips_constant_groups(model, problem):
    from iopgspo.task_env import render_solution
    toks = render_solution(problem).tokens
    lp = pm.batch_logprobs(model, [problem.prompt], [toks])[0][0, :len(toks)].detach().numpy()
    const = obj.SampleGroup(problem.prompt, [toks, toks], [lp, lp], [1.0, 1.0])
    assert obj.gspo_objective(model, None, [const]).empty


def test_non_finite_ratio_is_reported(model):
    grp = pair_group(model, 7)
    # an overflowing ratio on the negative-advantage side is not rescued by clipping
    grp.failed = dataclasses.replace(grp.failed, logprobs=[-1e6] * len(grp.failed.tokens))
    with pytest.raises(pm.NonFiniteError):
        obj.policy_objective(model, None, [grp])
