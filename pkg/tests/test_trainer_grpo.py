import dataclasses
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from stlab.experiments import mcq_bandit
from stlab.gradcheck import SMALL_VOCAB, numeric_grad, relative_error
from stlab.seqmodel import (
    BOS, EOS, PAD, DEFAULT_VOCAB, ModelConfig, Params, Vocab, grad_weighted_loglik, new_params,
    next_token_distributions,
)
from stlab.taskgen import GenConfig, TaskKind, build_dataset, mcq_prompt
from stlab.trainer_grpo import (
    GRPOConfig, GRPOError, GRPOState, GroupSample, NonFiniteError, grpo_objective, grpo_step, is_well_formed,
    kl_term, make_group, normalize_rewards, reward_mcq, train_grpo, weights,
)
from stlab.optim import Adam

TINY = Vocab((PAD, BOS, EOS))
finite = st.floats(-50, 50, allow_nan=False)


def tiny_params(seed, vocab=SMALL_VOCAB, d=3, h=4, scale=0.6):
    return Params.init(ModelConfig(len(vocab), d, h, scale), np.random.default_rng(seed))


@pytest.fixture(scope="module")
def mcq():
    ds = build_dataset(GenConfig(), 10, 4)
    return next(it for it in ds.items if it.kind.is_mcq)


# rewards --------------------------------------------------------------------

def test_reward_examples(mcq):
    good = f"<answer> {mcq.correct_letter} </answer>"
    wrong = next(L for L in "ABCD" if L != mcq.correct_letter)
    assert reward_mcq(mcq, good, GRPOConfig()) == 1.0
    assert reward_mcq(mcq, good, GRPOConfig(format_bonus=0.1)) == pytest.approx(1.1)
    assert reward_mcq(mcq, f"<answer> {wrong} </answer>", GRPOConfig()) == 0.0
    assert reward_mcq(mcq, f"<answer> {wrong} </answer>", GRPOConfig(wrong_reward=-1.0)) == -1.0
    assert reward_mcq(mcq, mcq.correct_letter, GRPOConfig()) == 0.0
    assert reward_mcq(mcq, f"<think> turn left. </think> {good}", GRPOConfig()) == 1.0


def test_well_formed():
    assert is_well_formed("<answer> A </answer>")
    assert is_well_formed("<think> go straight for 1 steps. </think> <answer> B </answer>")
    assert not is_well_formed("<think> x <answer> B </answer>")
    assert not is_well_formed("<answer> A </answer> <answer> B </answer>")


def test_wrong_reward_must_be_zero_or_minus_one():
    with pytest.raises(ValueError):
        GRPOConfig(wrong_reward=-0.5).check()


# normalization and weights ---------------------------------------------------

def test_normalize_examples():
    assert np.allclose(normalize_rewards([1, 1, 1, 1], 1e-6), 0)
    assert np.allclose(normalize_rewards([1, 0], 1e-12), [1, -1])
    with pytest.raises(ValueError):
        normalize_rewards([1.0], 1e-6)


def test_weight_examples():
    assert np.allclose(weights([0, 0, 0, 0], 1.0), 0.25)
    e2 = math.e ** 2
    assert np.allclose(weights([1, -1], 1.0), [e2 / (e2 + 1), 1 / (e2 + 1)], atol=1e-12)
    assert np.allclose(weights([1, -1], 1.0), [0.8808, 0.1192], atol=1e-4)


@given(st.lists(finite, min_size=2, max_size=16), st.floats(0.05, 10))
@settings(max_examples=200, deadline=None)
def test_normalized_mean_zero_and_weights_sum(r, tau):
    rt = normalize_rewards(r, 1e-6)
    # centering cancels about |r| / std digits, so the bound scales with that ratio
    ra = np.asarray(r)
    scale = max(1.0, np.abs(ra).max() / (ra.std() + 1e-6))
    assert abs(rt.mean()) < 1e-12 * scale * max(1.0, np.abs(rt).max())
    w = weights(rt, tau)
    assert abs(w.sum() - 1) <= 1e-9 and (w >= 0).all()


@given(st.lists(finite, min_size=2, max_size=12), st.floats(0.01, 100), st.floats(-100, 100))
@settings(max_examples=200, deadline=None)
def test_affine_invariance(r, a, b):
    r = np.asarray(r)
    assume(r.std() > 1e-3)
    w1 = weights(normalize_rewards(r, 1e-300), 1.0)
    w2 = weights(normalize_rewards(a * r + b, 1e-300), 1.0)
    assert np.allclose(w1, w2, atol=1e-9)


def test_extreme_weights_stay_finite():
    w = weights([1e6, -1e6, 0], 1e-3)
    assert np.isfinite(w).all() and abs(w.sum() - 1) < 1e-12


def test_group_rejects_bad_weights():
    with pytest.raises(GRPOError):
        GroupSample("q", [3], [[4], [5]], np.zeros(2), np.zeros(2), np.array([0.7, 0.7]))


# KL --------------------------------------------------------------------------

def kl_oracle(p_params, q_params, x, completions, vocab):
    """Per-position KL summed by hand over the vocabulary, averaged per completion then over the group."""
    per_seq = []
    for y in completions:
        P = next_token_distributions(p_params, x, y, vocab)
        Q = next_token_distributions(q_params, x, y, vocab)
        total = 0.0
        for pt, qt in zip(P, Q):
            for a in range(len(vocab)):
                total += pt[a] * (math.log(pt[a]) - math.log(qt[a]))
        per_seq.append(total / len(y))
    return sum(per_seq) / len(per_seq)


@pytest.mark.parametrize("seed", range(10))
def test_kl_matches_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    p, q = tiny_params(seed, TINY), tiny_params(seed + 100, TINY)
    x = list(rng.integers(0, 3, size=2))
    comps = [list(rng.integers(0, 3, size=int(rng.integers(1, 5)))) for _ in range(4)]
    g = make_group("q", x, comps, rng.random(4), GRPOConfig())
    assert abs(kl_term(p, q, g, TINY) - kl_oracle(p, q, x, comps, TINY)) < 1e-9


def test_kl_zero_at_reference_and_shape_check():
    p = tiny_params(0)
    g = make_group("q", [3], [[4, 2], [5]], [1.0, 0.0], GRPOConfig())
    assert abs(kl_term(p, p.copy(), g, SMALL_VOCAB)) < 1e-9
    with pytest.raises(GRPOError):
        kl_term(p, tiny_params(0, d=2), g, SMALL_VOCAB)


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_kl_nonnegative(seed):
    rng = np.random.default_rng(seed)
    p, q = tiny_params(seed), tiny_params(seed + 1)
    comps = [list(rng.integers(2, 6, size=int(rng.integers(1, 4)))) for _ in range(3)]
    assert kl_term(p, q, make_group("q", [3], comps, rng.random(3), GRPOConfig()), SMALL_VOCAB) >= 0


# objective -------------------------------------------------------------------

def test_beta_zero_equal_rewards_is_uniform_likelihood():
    p = tiny_params(1)
    comps = [[3, 4], [5], [4, 4, 2], [3]]
    g = make_group("q", [3, 5], comps, [0.5] * 4, GRPOConfig())
    assert np.allclose(g.weights, 0.25)
    parts = grpo_objective(p, tiny_params(2), [g], 0.0, SMALL_VOCAB)
    ref = grad_weighted_loglik(p, [3, 5], [(c, 0.25) for c in comps], SMALL_VOCAB)
    assert np.allclose(parts.grad.flat(), ref.flat(), atol=1e-14)


@pytest.mark.parametrize("variant", ["weighted", "clipped"])
def test_objective_gradient_finite_differences(variant):
    rng = np.random.default_rng(42)
    p, ref = tiny_params(3), tiny_params(4)
    groups = [make_group(f"q{i}", [3, 4], [list(rng.integers(2, 6, size=3)) for _ in range(3)],
                         rng.random(3), GRPOConfig()) for i in range(2)]
    if variant == "clipped":
        for g in groups:
            g.old_logprobs = [rng.normal(-1.5, 0.3, size=len(c)) for c in g.completions]
    f = lambda q: grpo_objective(q, ref, groups, 0.2, SMALL_VOCAB, variant).objective
    parts = grpo_objective(p, ref, groups, 0.2, SMALL_VOCAB, variant)
    assert relative_error(parts.grad.flat(), numeric_grad(f, p)) <= 1e-4


# training --------------------------------------------------------------------

def test_zero_lr_step_records_stats(mcq):
    p = new_params(0)
    cfg = GRPOConfig(lr=0.0, group_size=4, max_len=6)
    state = GRPOState(p.copy(), p.copy(), Adam(0.0))
    stats = grpo_step(state, [mcq], cfg, np.random.default_rng(0))
    assert np.array_equal(state.params.flat(), p.flat())
    assert state.history == [stats] and stats.kl == pytest.approx(0.0, abs=1e-12)


def test_same_seed_identical_curves(tmp_path, mcq):
    cfg = GRPOConfig(steps=4, batch_size=1, group_size=4, max_len=8, seed=3)
    train_grpo(new_params(0), [mcq], cfg, curve_path=tmp_path / "a.csv")
    train_grpo(new_params(0), [mcq], cfg, curve_path=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_route_items_need_rubric_flag():
    ds = build_dataset(GenConfig(), 2, 0)
    desc = [it for it in ds.items if it.kind is TaskKind.ROUTE_DESC]
    with pytest.raises(GRPOError):
        train_grpo(new_params(0), desc, GRPOConfig(steps=1))
    _, hist = train_grpo(new_params(0), desc, GRPOConfig(steps=1, rubric_reward=True, group_size=2,
                                                          batch_size=1, max_len=5), routes=ds.routes)
    assert len(hist) == 1


def test_nonfinite_objective_aborts(mcq):
    p = new_params(0)
    p.bo[:] = np.nan
    with pytest.raises(NonFiniteError):
        train_grpo(p, [mcq], GRPOConfig(steps=1, batch_size=1, group_size=2, max_len=4),
                   ref_params=new_params(0))


def test_three_option_bandit_converges(mcq):
    opts = mcq.options[:3]
    if mcq.correct_index >= 3:
        opts = (mcq.options[mcq.correct_index],) + mcq.options[1:3]
    idx = opts.index(mcq.options[mcq.correct_index])
    route = build_dataset(GenConfig(), 10, 4).routes[mcq.route_id]
    item = dataclasses.replace(mcq, options=opts, correct_index=idx, answer="ABC"[idx],
                               prompt=mcq_prompt(route, mcq.kind, mcq.polarity, opts))
    res = mcq_bandit(0, item, steps=500)
    assert max(res.p_correct) >= 0.95
    blocks = [np.mean(res.rewards[i:i + 100]) for i in range(0, 500, 100)]
    assert all(b2 >= b1 - 1e-12 for b1, b2 in zip(blocks, blocks[1:])), blocks
