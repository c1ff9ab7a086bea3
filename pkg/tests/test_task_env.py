from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iopgspo.task_env import (ANS, BOS, EOS, PLUS, SEP, STEP, TIMES, ContextOverflowError, Problem, Trajectory,
                              answer_overwrite, build_repair_context, corrupt, corrupt_at, gen_coldstart,
                              generate_problem, parse_chain, parse_prompt, parse_tokens, read_jsonl,
                              render_solution, render_tokens, rule_audit, sample_problems, solution_tokens,
                              step_values, verify, write_jsonl)

problems = st.builds(generate_problem, st.integers(0, 2**32), st.integers(1, 8))


def test_parse_chain_example():
    p = parse_chain("3 +4 ×2 +5")
    assert p.start == 3 and p.ops == (PLUS, TIMES, PLUS) and p.digits == (4, 2, 5)
    assert p.values == (3, 7, 4, 9)
    assert p.answer == 9
    assert p.prompt == (BOS, 3, PLUS, 4, TIMES, 2, PLUS, 5, SEP)


@pytest.mark.parametrize("text", ["", "3 -4", "12 +1", "3 +x"])
def test_parse_chain_rejects(text):
    with pytest.raises(ValueError):
        parse_chain(text)


def test_generate_problem_is_seeded():
    assert generate_problem(5, 6) == generate_problem(5, 6)
    assert generate_problem(5, 6) != generate_problem(6, 6)
    with pytest.raises(ValueError):
        generate_problem(0, 0)


def test_sample_problems_lengths(rng):
    probs = sample_problems(rng, 200, 4, 8)
    lens = {p.chain_len for p in probs}
    assert lens == {4, 5, 6, 7, 8}


@given(problems)
def test_reference_solution_verifies_and_audits(p):
    sol = solution_tokens(p)
    assert verify(p, sol) == 1
    assert rule_audit(p, None, sol) == 1
    assert step_values(p, sol) == list(p.values[1:])
    assert parse_prompt(p.prompt) == p


def test_verify_requires_answer_then_eos(problem):
    sol = list(solution_tokens(problem))
    assert verify(problem, sol[:-1]) == 0                      # no EOS
    assert verify(problem, [EOS] + sol) == 0                   # EOS before ANS
    wrong = sol.copy()
    wrong[-2] = (wrong[-2] + 1) % 10
    assert verify(problem, wrong) == 0
    # steps are not checked by the verifier
    assert verify(problem, [ANS, problem.answer, EOS]) == 1


def test_audit_rejects_answer_overwrite(problem):
    bad = corrupt(render_solution(problem), seed=3)
    hack = answer_overwrite(bad.tokens, problem)
    assert verify(problem, hack) == 1
    assert rule_audit(problem, bad, hack) == 0


def test_audit_rejects_broken_format(problem):
    sol = list(solution_tokens(problem))
    assert rule_audit(problem, None, sol[:-1]) == 0
    assert rule_audit(problem, None, [STEP] + sol) == 0
    mismatch = sol.copy()
    mismatch[-2] = (mismatch[-2] + 1) % 10   # ANS disagrees with the last step
    assert rule_audit(problem, None, mismatch) == 0


@given(problems.filter(lambda p: p.chain_len >= 2), st.integers(0, 2**32))
@settings(max_examples=60)
def test_corrupt_is_wrong_but_well_formed(p, seed):
    bad = corrupt(render_solution(p), seed)
    assert verify(p, bad.tokens) == 0
    assert step_values(p, bad.tokens) is not None
    assert len(bad.tokens) == len(solution_tokens(p))


def test_corrupt_rejects_failed_input(problem):
    bad = corrupt(render_solution(problem), 0)
    with pytest.raises(ValueError):
        corrupt(bad, 1)


def test_corrupt_at_propagates(problem):
    t = corrupt_at(render_solution(problem), 0, 1)
    vals = step_values(problem, t.tokens)
    assert vals[0] == (problem.values[1] + 1) % 10
    # later steps stay consistent with the corrupted value
    assert rule_audit(problem, None, t.tokens) == 0
    assert t.reward == verify(problem, t.tokens)


def test_repair_context_layout_and_length(problem):
    y = corrupt(render_solution(problem), 0).tokens
    a = solution_tokens(problem)
    ctx = build_repair_context(problem.prompt, y, a)
    assert len(ctx) == 3 + len(problem.prompt) + len(y) + len(a)
    assert ctx[-1] == SEP and ctx[len(problem.prompt) + 1 + len(y)] == SEP
    with pytest.raises(ContextOverflowError):
        build_repair_context(problem.prompt, y, a, max_context=len(ctx) - 1)


def test_coldstart_roundtrip_and_determinism(tmp_path):
    data = gen_coldstart(1, 50)
    assert len(data) == 50
    for ex in data:
        assert verify(ex.problem, ex.y) == 0
        assert verify(ex.problem, ex.y_star) == 1 and rule_audit(ex.problem, None, ex.y_star) == 1
        assert ex.a == ex.y_star
    write_jsonl(data, tmp_path / "a.jsonl")
    write_jsonl(gen_coldstart(1, 50), tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    back = read_jsonl(tmp_path / "a.jsonl")
    assert [b.to_json() for b in back] == [d.to_json() for d in data]
    assert set(json.loads((tmp_path / "a.jsonl").read_text().splitlines()[0])) == {"x", "y", "a", "y_star"}


def test_hack_prone_coldstart():
    data = gen_coldstart(2, 400, hack_fraction=0.5)
    hacks = [ex for ex in data if rule_audit(ex.problem, None, ex.y_star) == 0]
    assert 150 < len(hacks) < 250
    assert all(verify(ex.problem, ex.y_star) == 1 for ex in hacks)


def test_token_parsing_roundtrip(problem):
    sol = solution_tokens(problem)
    assert parse_tokens(render_tokens(sol)) == list(sol)
    with pytest.raises(ValueError):
        parse_tokens("= 4 nope")
    with pytest.raises(ValueError):
        parse_tokens("99")


def test_trajectory_validation(problem):
    with pytest.raises(ValueError):
        Trajectory(problem, (1, 2), (0.0,))
    with pytest.raises(ValueError):
        Problem(1, (PLUS,), ())
    with pytest.raises(ValueError):
        Problem(10, (), ())
